//! FlowSpec: a discrete-event simulator of pipeline-parallel tree-based
//! speculative decoding.
//!
//! The library models a draft stage `D0` plus `N` verification stages
//! `V1..VN`. Each decode round grows a draft-token tree, flattens it by
//! descending cumulative score, slices it into segments, and streams the
//! segments through the pipeline. As verified segments return, the draft
//! stage accepts tokens, prunes invalidated branches everywhere (segments
//! and KV-cache indexes), and keeps the pipeline fed through context-aware
//! and score-aware tree expansion. Model calls are served by deterministic
//! synthetic oracles, and time comes from a configurable cost model, so
//! every run is exactly reproducible from its config.
//!
//! Score and probability math is generic over the [`scalar::Prob`] scalar
//! (`f32` or `f64`); the aliases below fix the `f64` instantiation used by
//! the simulator and CLI.

pub mod baselines;
pub mod config;
pub mod error;
pub mod expansion;
pub mod oracle;
pub mod pruning;
pub mod report;
pub mod scalar;
pub mod sim;
pub mod trace;
pub mod tree;
pub mod verifier;

pub use config::{parse_config, RunConfig, StrategyId};
pub use error::{Error, Result};
pub use scalar::Prob;
pub use sim::{run_strategy, Metrics, RunResult};
pub use trace::{emit_trace, read_trace};
pub use tree::{NodeId, Token};

/// Concrete scalar used by the simulator and CLI.
pub type Score = f64;
/// `f64` draft tree.
pub type Tree = tree::DraftTree<Score>;
/// `f64` token distribution.
pub type Dist = oracle::TokenDistribution<Score>;
/// `f64` synthetic oracle.
pub type Oracle = oracle::SyntheticOracle<Score>;
