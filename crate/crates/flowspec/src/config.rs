//! Run configuration: TOML schema, validation, defaults, and environment
//! overrides.
//!
//! The document has a top-level `strategy` key plus flat `[prompt]`,
//! `[oracle]`, `[cost]` and `[params]` sections. Unknown keys are
//! rejected. Every key can be overridden through an environment variable
//! named `FLOWSPEC_<SECTION>_<KEY>` in upper case (`FLOWSPEC_STRATEGY`
//! for the top-level key), e.g. `FLOWSPEC_PARAMS_N=2` or
//! `FLOWSPEC_ORACLE_ALIGNMENT=0.5`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::{ExpansionConfig, LExp};
use crate::oracle::OracleConfig;
use crate::sim::cost::CostModel;
use crate::tree::Token;

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyId {
    NaivePp,
    PrunedPp,
    FlowspecNoSbd,
    Flowspec,
}

impl StrategyId {
    pub const ALL: [StrategyId; 4] = [
        StrategyId::NaivePp,
        StrategyId::PrunedPp,
        StrategyId::FlowspecNoSbd,
        StrategyId::Flowspec,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyId::NaivePp => "naive_pp",
            StrategyId::PrunedPp => "pruned_pp",
            StrategyId::FlowspecNoSbd => "flowspec_no_sbd",
            StrategyId::Flowspec => "flowspec",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "naive_pp" => Ok(StrategyId::NaivePp),
            "pruned_pp" => Ok(StrategyId::PrunedPp),
            "flowspec_no_sbd" => Ok(StrategyId::FlowspecNoSbd),
            "flowspec" => Ok(StrategyId::Flowspec),
            other => Err(Error::Config(format!("unknown strategy \"{}\"", other))),
        }
    }
}

/// Prompt source: explicit tokens, or a seeded synthetic prompt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<Token>>,
    #[serde(default = "default_prompt_len")]
    pub length: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_prompt_len() -> usize {
    64
}

impl Default for PromptSpec {
    fn default() -> Self {
        PromptSpec {
            tokens: None,
            length: default_prompt_len(),
            seed: 0,
        }
    }
}

impl PromptSpec {
    /// Materializes the prompt tokens for a vocabulary of size `vocab`.
    pub fn materialize(&self, vocab: u32) -> Vec<Token> {
        use rand::{Rng, SeedableRng};
        match &self.tokens {
            Some(t) => t.clone(),
            None => {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
                    0x70726f6d70740000 ^ self.seed,
                );
                (0..self.length).map(|_| rng.gen_range(0..vocab)).collect()
            }
        }
    }
}

/// Decoding / scheduling parameters.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Params {
    /// Number of verification stages.
    pub n: u32,
    /// Draft sequence budget per round.
    pub l: usize,
    /// Initial tree depth.
    pub d0: u32,
    /// Branching factor of tree growth.
    pub k: usize,
    /// Maximum segment length.
    pub l_max: usize,
    /// Context-expansion size; -1 selects the ALL sentinel.
    pub l_exp: i64,
    pub d_exp: u32,
    pub d_se: u32,
    pub l_se: usize,
    /// Sampling temperature: 0 = greedy.
    pub temperature: f64,
    /// Maximum number of committed tokens.
    pub gen_limit: usize,
    /// EOS token id; -1 disables EOS termination.
    pub eos_token: i64,
    /// Run seed (acceptance sampling and other run-local draws).
    pub seed: u64,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            n: 4,
            l: 80,
            d0: 6,
            k: 8,
            l_max: 16,
            l_exp: -1,
            d_exp: 6,
            d_se: 2,
            l_se: 16,
            temperature: 0.0,
            gen_limit: 64,
            eos_token: -1,
            seed: 0,
        }
    }
}

impl Params {
    pub fn expansion(&self) -> ExpansionConfig {
        ExpansionConfig {
            l_exp: if self.l_exp < 0 {
                LExp::All
            } else {
                LExp::Limit(self.l_exp as usize)
            },
            d_exp: self.d_exp,
            d_se: self.d_se,
            l_se: self.l_se,
        }
    }

    pub fn eos(&self) -> Option<Token> {
        (self.eos_token >= 0).then_some(self.eos_token as Token)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub strategy: StrategyId,
    pub prompt: PromptSpec,
    pub oracle: OracleConfig,
    pub cost: CostModel,
    pub params: Params,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            strategy: StrategyId::Flowspec,
            prompt: PromptSpec::default(),
            oracle: OracleConfig::default(),
            cost: CostModel::default(),
            params: Params::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        if p.n < 1 {
            return Err(Error::Config("params.n must be >= 1".into()));
        }
        if p.l < 1 {
            return Err(Error::Config("params.l must be >= 1".into()));
        }
        if p.d0 < 1 {
            return Err(Error::Config("params.d0 must be >= 1".into()));
        }
        if p.k < 1 {
            return Err(Error::Config("params.k must be >= 1".into()));
        }
        if p.l_max < 1 {
            return Err(Error::Config("params.l_max must be >= 1".into()));
        }
        if p.l_se < 1 {
            return Err(Error::Config("params.l_se must be >= 1".into()));
        }
        if p.temperature < 0.0 || !p.temperature.is_finite() {
            return Err(Error::Config("params.temperature must be >= 0".into()));
        }
        if p.eos_token >= self.oracle.vocab_size as i64 {
            return Err(Error::Config(
                "params.eos_token must be below oracle.vocab_size".into(),
            ));
        }
        self.oracle.validate()?;
        self.cost.validate()?;
        if let Some(tokens) = &self.prompt.tokens {
            if tokens.is_empty() {
                return Err(Error::Config("prompt.tokens must be nonempty".into()));
            }
            if tokens.iter().any(|&t| t >= self.oracle.vocab_size) {
                return Err(Error::Config(
                    "prompt.tokens contains ids >= oracle.vocab_size".into(),
                ));
            }
        } else if self.prompt.length == 0 {
            return Err(Error::Config("prompt.length must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serialize: {}", e)))
    }
}

/// Parses and validates a config document, applying defaults and then any
/// `FLOWSPEC_*` environment overrides.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_with_env(text, &env_overrides())
}

/// Like [`parse_config`] but with an explicit override list of
/// (SECTION_KEY, value) pairs; useful for tests.
pub fn parse_config_with_env(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
    let table: toml::Table = text
        .parse()
        .map_err(|e| Error::Config(format!("malformed config: {}", e)))?;
    let mut doc = toml::Value::Table(table);
    for (key, value) in overrides {
        apply_override(&mut doc, key, value)?;
    }
    let cfg: RunConfig = doc
        .try_into()
        .map_err(|e| Error::Config(format!("{}", e)))?;
    cfg.validate()?;
    Ok(cfg)
}

fn env_overrides() -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = std::env::vars()
        .filter_map(|(k, v)| {
            k.strip_prefix("FLOWSPEC_")
                .map(|rest| (rest.to_string(), v))
        })
        .collect();
    out.sort();
    out
}

/// Applies one `SECTION_KEY` (or top-level `STRATEGY`) override onto the
/// raw TOML document before deserialization.
fn apply_override(doc: &mut toml::Value, key: &str, value: &str) -> Result<()> {
    let table = doc
        .as_table_mut()
        .ok_or_else(|| Error::Config("config root is not a table".into()))?;
    if key == "STRATEGY" {
        table.insert(
            "strategy".into(),
            toml::Value::String(value.to_string()),
        );
        return Ok(());
    }
    let (section, field) = key
        .split_once('_')
        .ok_or_else(|| Error::Config(format!("unrecognized override FLOWSPEC_{}", key)))?;
    let section = section.to_ascii_lowercase();
    let field = field.to_ascii_lowercase();
    if !matches!(section.as_str(), "prompt" | "oracle" | "cost" | "params") {
        return Err(Error::Config(format!(
            "unrecognized override section in FLOWSPEC_{}",
            key
        )));
    }
    let parsed: toml::Value = match value.parse::<i64>() {
        Ok(i) => toml::Value::Integer(i),
        Err(_) => match value.parse::<f64>() {
            Ok(f) => toml::Value::Float(f),
            Err(_) => toml::Value::String(value.to_string()),
        },
    };
    let entry = table
        .entry(section)
        .or_insert_with(|| toml::Value::Table(Default::default()));
    entry
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("section for FLOWSPEC_{} is not a table", key)))?
        .insert(field, parsed);
    Ok(())
}
