//! Baseline scheduling strategies, as thin wrappers over the simulator.
//!
//! All strategies share the tree, acceptance, and pruning code; they
//! differ only in scheduling behavior:
//!
//! * naive PP: dispatches the whole draft sequence in `l_max` chunks and
//!   waits for every verification output before a single accept walk per
//!   round. No pruning, no expansion, no early exit.
//! * pruned PP: evaluates each returned segment as it arrives, prunes
//!   in-flight state, and exits the round early when the sampled token
//!   leaves the tree. No expansion.
//! * flowspec (no score-based dispatch): full pipeline with pruning and
//!   expansion, but segments are cut in BFS order instead of descending
//!   cumulative score.

use crate::config::{Params, StrategyId};
use crate::error::Result;
use crate::oracle::SyntheticOracle;
use crate::scalar::Prob;
use crate::sim::cost::CostModel;
use crate::sim::engine::{simulate, SimOutput};
use crate::tree::Token;

fn run<S: Prob>(
    strategy: StrategyId,
    prompt: &[Token],
    gen_limit: usize,
    oracle: &SyntheticOracle<S>,
    cost: &CostModel,
    params: &Params,
) -> Result<SimOutput> {
    let mut p = *params;
    p.gen_limit = gen_limit;
    simulate(strategy, prompt, oracle, cost, &p, false)
}

pub fn run_naive_pp<S: Prob>(
    prompt: &[Token],
    gen_limit: usize,
    oracle: &SyntheticOracle<S>,
    cost: &CostModel,
    params: &Params,
) -> Result<SimOutput> {
    run(StrategyId::NaivePp, prompt, gen_limit, oracle, cost, params)
}

pub fn run_pruned_pp<S: Prob>(
    prompt: &[Token],
    gen_limit: usize,
    oracle: &SyntheticOracle<S>,
    cost: &CostModel,
    params: &Params,
) -> Result<SimOutput> {
    run(StrategyId::PrunedPp, prompt, gen_limit, oracle, cost, params)
}

pub fn run_flowspec_no_sbd<S: Prob>(
    prompt: &[Token],
    gen_limit: usize,
    oracle: &SyntheticOracle<S>,
    cost: &CostModel,
    params: &Params,
) -> Result<SimOutput> {
    run(
        StrategyId::FlowspecNoSbd,
        prompt,
        gen_limit,
        oracle,
        cost,
        params,
    )
}
