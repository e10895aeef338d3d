//! Strategy comparison and parameter sweeps with CSV output.
//!
//! All throughput and latency numbers are in *simulated* time from the
//! cost model, not wall-clock measurements.

use crate::config::{RunConfig, StrategyId};
use crate::error::{Error, Result};
use crate::sim::{run_strategy, Metrics};

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub strategy: StrategyId,
    /// Committed tokens per simulated second (mean over seeds).
    pub xi: f64,
    pub latency_s: f64,
    /// Speedup ratio vs the naive pipeline-parallel baseline.
    pub sr: f64,
    pub rounds: f64,
    pub steps: f64,
}

fn decode_metrics(cfg: &RunConfig) -> Result<Metrics> {
    run_strategy(cfg)?.metrics.ok_or_else(|| {
        Error::Metrics("run produced no decode rounds (gen_limit too small?)".into())
    })
}

/// Mean metrics for one strategy over `seeds` consecutive seed offsets
/// (both the run seed and the synthetic-prompt seed are offset).
fn mean_over_seeds(base: &RunConfig, seeds: u32) -> Result<(f64, f64, f64, f64)> {
    let mut xi = 0.0;
    let mut latency = 0.0;
    let mut rounds = 0.0;
    let mut steps = 0.0;
    for s in 0..seeds {
        let mut cfg = base.clone();
        cfg.params.seed = base.params.seed.wrapping_add(s as u64);
        cfg.prompt.seed = base.prompt.seed.wrapping_add(s as u64);
        let m = decode_metrics(&cfg)?;
        xi += m.xi;
        latency += m.latency_s;
        rounds += m.rounds as f64;
        steps += m.steps as f64;
    }
    let n = seeds as f64;
    Ok((xi / n, latency / n, rounds / n, steps / n))
}

/// Runs every config and reports throughput plus speedup over the naive
/// baseline (which is run on the same config whether or not it is in the
/// list). The configs must be identical except for their `strategy`.
pub fn run_compare(configs: &[RunConfig], seeds: u32) -> Result<Vec<CompareRow>> {
    if configs.is_empty() {
        return Err(Error::InvalidArgument("no configs to compare".into()));
    }
    if seeds < 1 {
        return Err(Error::InvalidArgument("seeds must be >= 1".into()));
    }
    let reference = &configs[0];
    for cfg in &configs[1..] {
        let mut normalized = cfg.clone();
        normalized.strategy = reference.strategy;
        if &normalized != reference {
            return Err(Error::InvalidArgument(
                "compare configs must be identical except for the strategy".into(),
            ));
        }
    }
    let mut naive_cfg = reference.clone();
    naive_cfg.strategy = StrategyId::NaivePp;
    let (naive_xi, ..) = mean_over_seeds(&naive_cfg, seeds)?;

    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        let (xi, latency_s, rounds, steps) = if cfg.strategy == StrategyId::NaivePp {
            let m = mean_over_seeds(&naive_cfg, seeds)?;
            (naive_xi, m.1, m.2, m.3)
        } else {
            mean_over_seeds(cfg, seeds)?
        };
        rows.push(CompareRow {
            strategy: cfg.strategy,
            xi,
            latency_s,
            sr: xi / naive_xi,
            rounds,
            steps,
        });
    }
    Ok(rows)
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from("strategy,xi,latency_s,sr,rounds,steps\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.2},{:.2}\n",
            r.strategy.name(),
            r.xi,
            r.latency_s,
            r.sr,
            r.rounds,
            r.steps
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub xi: f64,
    pub latency_s: f64,
    pub rounds: u64,
    pub steps: u64,
}

/// Re-runs the config once per value of the dotted `param` key (e.g.
/// `params.l`, `oracle.alignment`, or top-level `strategy`).
pub fn run_sweep(base: &RunConfig, param: &str, values: &[String]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("no sweep values given".into()));
    }
    let base_text = base.to_toml_string()?;
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let cfg = override_param(&base_text, param, value)?;
        let m = decode_metrics(&cfg)?;
        rows.push(SweepRow {
            value: value.clone(),
            xi: m.xi,
            latency_s: m.latency_s,
            rounds: m.rounds,
            steps: m.steps,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(param: &str, rows: &[SweepRow]) -> String {
    let mut out = format!("{},xi,latency_s,rounds,steps\n", param);
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{},{}\n",
            r.value, r.xi, r.latency_s, r.rounds, r.steps
        ));
    }
    out
}

fn parse_toml_scalar(value: &str) -> toml::Value {
    match value.parse::<i64>() {
        Ok(i) => toml::Value::Integer(i),
        Err(_) => match value.parse::<f64>() {
            Ok(f) => toml::Value::Float(f),
            Err(_) => toml::Value::String(value.to_string()),
        },
    }
}

fn override_param(base_text: &str, param: &str, value: &str) -> Result<RunConfig> {
    let mut table: toml::Table = base_text
        .parse()
        .map_err(|e| Error::Config(format!("malformed config: {}", e)))?;
    match param.split_once('.') {
        None => {
            table.insert(param.to_string(), parse_toml_scalar(value));
        }
        Some((section, key)) => {
            if !matches!(section, "prompt" | "oracle" | "cost" | "params") {
                return Err(Error::InvalidArgument(format!(
                    "unknown sweep section \"{}\"",
                    section
                )));
            }
            table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()))
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("section {} is not a table", section)))?
                .insert(key.to_string(), parse_toml_scalar(value));
        }
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(format!("{}", e)))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Params;

    fn small_config(strategy: StrategyId) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.strategy = strategy;
        cfg.prompt.length = 8;
        cfg.oracle.vocab_size = 32;
        cfg.oracle.alignment = 0.8;
        cfg.params = Params {
            n: 2,
            l: 12,
            d0: 3,
            k: 3,
            l_max: 4,
            gen_limit: 10,
            ..Params::default()
        };
        cfg
    }

    #[test]
    fn naive_row_has_unit_speedup() {
        let configs = [
            small_config(StrategyId::NaivePp),
            small_config(StrategyId::PrunedPp),
        ];
        let rows = run_compare(&configs, 1).unwrap();
        assert!((rows[0].sr - 1.0).abs() < 1e-12);
        assert!(rows.iter().all(|r| r.xi > 0.0));
    }

    #[test]
    fn mismatched_configs_rejected() {
        let a = small_config(StrategyId::NaivePp);
        let mut b = small_config(StrategyId::PrunedPp);
        b.params.l = 16;
        let err = run_compare(&[a, b], 1).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn compare_csv_deterministic() {
        let configs = [small_config(StrategyId::Flowspec)];
        let a = compare_csv(&run_compare(&configs, 2).unwrap());
        let b = compare_csv(&run_compare(&configs, 2).unwrap());
        assert_eq!(a, b);
        assert!(a.starts_with("strategy,xi,latency_s,sr,rounds,steps\n"));
    }

    #[test]
    fn sweep_over_draft_budget() {
        let cfg = small_config(StrategyId::Flowspec);
        let rows = run_sweep(&cfg, "params.l", &["8".into(), "12".into()]).unwrap();
        assert_eq!(rows.len(), 2);
        let csv = sweep_csv("params.l", &rows);
        assert!(csv.starts_with("params.l,xi,latency_s,rounds,steps\n"));
    }

    #[test]
    fn sweep_rejects_unknown_key() {
        let cfg = small_config(StrategyId::Flowspec);
        assert!(run_sweep(&cfg, "params.bogus", &["1".into()]).is_err());
        assert!(run_sweep(&cfg, "nope.l", &["1".into()]).is_err());
    }
}
