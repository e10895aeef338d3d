//! Simulated-time cost model for stage compute, link transfers, and
//! draft-stage work.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// All knobs are in (fractional) seconds, bytes, or bytes/second. The
/// defaults are calibrated so one full 16-token stage compute costs about
/// four times one 16-token link transfer.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    /// Fixed cost of one verification-stage forward pass.
    pub stage_base_s: f64,
    /// Marginal per-token cost of a stage forward pass.
    pub stage_per_token_s: f64,
    /// One-way link latency.
    pub link_latency_s: f64,
    /// Link throughput.
    pub link_bytes_per_s: f64,
    /// Payload bytes per draft token (stands in for hidden states).
    pub link_per_token_bytes: f64,
    /// Fixed cost of growing a draft tree.
    pub draft_base_s: f64,
    /// Per-layer cost of draft tree growth.
    pub draft_per_layer_s: f64,
    /// Draft-stage cost of evaluating one returned segment.
    pub d0_eval_s: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            stage_base_s: 0.008,
            stage_per_token_s: 0.002,
            link_latency_s: 0.002,
            link_bytes_per_s: 1.0e6,
            link_per_token_bytes: 500.0,
            draft_base_s: 0.002,
            draft_per_layer_s: 0.016,
            d0_eval_s: 0.002,
        }
    }
}

/// Bytes per retained position in a prune broadcast.
pub const PRUNE_MSG_BYTES_PER_POS: f64 = 4.0;

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("cost.stage_base_s", self.stage_base_s),
            ("cost.stage_per_token_s", self.stage_per_token_s),
            ("cost.link_latency_s", self.link_latency_s),
            ("cost.link_bytes_per_s", self.link_bytes_per_s),
            ("cost.link_per_token_bytes", self.link_per_token_bytes),
            ("cost.draft_base_s", self.draft_base_s),
            ("cost.draft_per_layer_s", self.draft_per_layer_s),
            ("cost.d0_eval_s", self.d0_eval_s),
        ];
        for (name, v) in fields {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{} must be non-negative", name)));
            }
        }
        if self.link_bytes_per_s <= 0.0 {
            return Err(Error::Config("cost.link_bytes_per_s must be positive".into()));
        }
        Ok(())
    }

    /// Forward-pass duration for `n_tokens` at one stage.
    pub fn stage_compute_s(&self, n_tokens: usize) -> f64 {
        self.stage_base_s + n_tokens as f64 * self.stage_per_token_s
    }

    /// One-hop transfer duration for a segment of `n_tokens`.
    pub fn transfer_s(&self, n_tokens: usize) -> f64 {
        self.link_latency_s + n_tokens as f64 * self.link_per_token_bytes / self.link_bytes_per_s
    }

    /// One-hop transfer duration for an arbitrary payload.
    pub fn transfer_bytes_s(&self, bytes: f64) -> f64 {
        self.link_latency_s + bytes / self.link_bytes_per_s
    }

    /// Draft-stage cost of growing `layers` tree layers.
    pub fn draft_grow_s(&self, layers: u32) -> f64 {
        self.draft_base_s + layers as f64 * self.draft_per_layer_s
    }
}

/// Arrival time of a segment dispatched now over one link.
pub fn transfer_arrival(now: f64, n_tokens: usize, cost: &CostModel) -> f64 {
    now + cost.transfer_s(n_tokens)
}

/// Completion time of a stage forward pass entered now.
pub fn compute_completion(now: f64, busy_until: f64, n_tokens: usize, cost: &CostModel) -> f64 {
    now.max(busy_until) + cost.stage_compute_s(n_tokens)
}
