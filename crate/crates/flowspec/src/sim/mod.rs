//! Pipeline simulation: cost model, discrete-event engine, and metrics.

pub mod cost;
pub mod engine;
pub mod metrics;

pub use cost::{compute_completion, transfer_arrival, CostModel};
pub use engine::{chunked_prefill, run_flowspec, simulate, SimOutput};
pub use metrics::{collect_metrics, Metrics};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;
use crate::oracle::SyntheticOracle;
use crate::trace::TraceEvent;
use crate::tree::Token;

/// A completed run: the config that produced it, the committed tokens,
/// the derived metrics, and the full event trace.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub config: RunConfig,
    pub committed: Vec<Token>,
    pub metrics: Option<Metrics>,
    #[serde(skip)]
    pub trace: Vec<TraceEvent>,
    /// Set when the trace was written to disk.
    pub trace_path: Option<String>,
}

/// Runs the strategy named by the config end to end.
pub fn run_strategy(config: &RunConfig) -> Result<RunResult> {
    run_strategy_audited(config, false)
}

/// Like [`run_strategy`], with the cross-stage consistency audit enabled.
pub fn run_strategy_audited(config: &RunConfig, audit: bool) -> Result<RunResult> {
    config.validate()?;
    let prompt = config.prompt.materialize(config.oracle.vocab_size);
    let oracle = SyntheticOracle::<f64>::new(config.oracle);
    let out = simulate(
        config.strategy,
        &prompt,
        &oracle,
        &config.cost,
        &config.params,
        audit,
    )?;
    Ok(RunResult {
        config: config.clone(),
        committed: out.committed,
        metrics: out.metrics,
        trace: out.trace,
        trace_path: None,
    })
}
