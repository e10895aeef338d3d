//! Collaborative pruning.
//!
//! When the draft stage accepts tokens and re-roots the tree at `n_new`,
//! every other copy of the draft state — in-flight segments and per-stage
//! KV-cache indexes — must drop the invalidated branches. The draft stage
//! computes a single [`PruneMessage`] holding the absolute positions to
//! retain (accepted tokens plus the surviving subtree) and the updated
//! context length; each holder applies it locally.
//!
//! Positions are compacted on prune: the retained positions, in ascending
//! order, are renumbered to `old_l_glo, old_l_glo + 1, ...`. Because every
//! parent precedes its descendants and accepted tokens are ancestors of
//! all retained drafts, the accepted block lands exactly on
//! `[old_l_glo, new_l_glo)` and the retained drafts stay contiguous above
//! it. Messages carry an epoch so re-applying one to already-compacted
//! state is a no-op.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Prob;
use crate::tree::{DraftSegment, DraftSequence, DraftTree, NodeId};
use crate::verifier::VerificationOutcome;

/// Retain set broadcast from the draft stage to all verification stages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMessage {
    /// Ascending absolute positions of accepted tokens and retained
    /// draft nodes (𝓘_retain).
    pub retain_global: Vec<u64>,
    /// Global context length before this prune.
    pub old_l_glo: u64,
    /// Updated global context length: `old_l_glo` + number accepted.
    pub new_l_glo: u64,
    /// Monotone prune counter for idempotent application.
    pub epoch: u64,
}

impl PruneMessage {
    /// Compacted position for a retained position, `None` if pruned.
    /// Positions below `old_l_glo` are committed context and unaffected.
    pub fn remap(&self, pos: u64) -> Option<u64> {
        if pos < self.old_l_glo {
            return Some(pos);
        }
        self.retain_global
            .binary_search(&pos)
            .ok()
            .map(|rank| self.old_l_glo + rank as u64)
    }

    pub fn retains(&self, pos: u64) -> bool {
        pos < self.old_l_glo || self.retain_global.binary_search(&pos).is_ok()
    }
}

/// Per-stage KV-cache index: committed context plus in-cache draft
/// positions. Draft positions are strictly increasing and ≥ context_len;
/// `l_cache = context_len + |draft_entries|` because compaction keeps the
/// cached range contiguous.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvCacheIndex {
    pub context_len: u64,
    pub draft_entries: Vec<u64>,
    /// Last applied prune epoch.
    pub epoch: u64,
}

impl KvCacheIndex {
    pub fn new(context_len: u64) -> Self {
        KvCacheIndex {
            context_len,
            draft_entries: Vec::new(),
            epoch: 0,
        }
    }

    pub fn l_cache(&self) -> u64 {
        self.context_len + self.draft_entries.len() as u64
    }

    pub fn append_positions(&mut self, positions: &[u64]) -> Result<()> {
        for &p in positions {
            if p < self.context_len || self.draft_entries.last().is_some_and(|&l| p <= l) {
                return Err(Error::ContractViolation(format!(
                    "KV append of position {} breaks ordering (context_len {})",
                    p, self.context_len
                )));
            }
            self.draft_entries.push(p);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev = None;
        for &p in &self.draft_entries {
            if p < self.context_len || prev.is_some_and(|q| p <= q) {
                return Err(Error::ContractViolation(
                    "KV draft entries not strictly increasing above context_len".into(),
                ));
            }
            prev = Some(p);
        }
        Ok(())
    }
}

/// Result of computing a prune at the draft stage.
#[derive(Clone, Debug)]
pub struct PruneResult<S> {
    /// Subtree rooted at n_new, re-rooted with rescaled cu_scores.
    pub tree: DraftTree<S>,
    /// Retained entries of the draft sequence, original order, compacted
    /// coordinates and new-tree node ids.
    pub seq: DraftSequence,
    pub msg: PruneMessage,
    /// Old NodeId → new NodeId for every retained draft node.
    pub node_map: BTreeMap<NodeId, NodeId>,
}

/// Computes the retained tree/sequence and the broadcast message for a
/// continuing round. `seq` must be the full live draft sequence, root
/// entry first; `epoch` is the new prune epoch.
pub fn compute_prune<S: Prob>(
    tree: &DraftTree<S>,
    seq: &DraftSequence,
    outcome: &VerificationOutcome,
    epoch: u64,
) -> Result<PruneResult<S>> {
    let matched = outcome.matched_node.ok_or_else(|| {
        Error::ContractViolation("compute_prune called without a matched node".into())
    })?;
    let root_entry = seq
        .entries
        .first()
        .ok_or_else(|| Error::ContractViolation("empty draft sequence".into()))?;
    if root_entry.node != tree.root() {
        return Err(Error::ContractViolation(
            "draft sequence does not start at the tree root".into(),
        ));
    }
    let old_l_glo = root_entry.global_pos + 1;

    let mut pos_of: BTreeMap<NodeId, u64> = BTreeMap::new();
    for e in &seq.entries {
        pos_of.insert(e.node, e.global_pos);
    }

    // accepted chain: walk the tree along S_acc
    let mut i_acc = Vec::new();
    let mut cur = tree.root();
    for &t in &outcome.accepted {
        cur = tree.child_with_token(cur, t).ok_or_else(|| {
            Error::ContractViolation("accepted token not present under its parent".into())
        })?;
        i_acc.push(*pos_of.get(&cur).ok_or_else(|| {
            Error::ContractViolation("accepted node missing from sequence".into())
        })?);
    }

    let (new_tree, node_map) = tree.extract_subtree(matched);

    let mut retain_global: Vec<u64> = i_acc.clone();
    for old_id in node_map.keys() {
        retain_global.push(*pos_of.get(old_id).ok_or_else(|| {
            Error::ContractViolation("retained node missing from sequence".into())
        })?);
    }
    retain_global.sort_unstable();

    let msg = PruneMessage {
        retain_global,
        old_l_glo,
        new_l_glo: old_l_glo + i_acc.len() as u64,
        epoch,
    };

    let mut new_seq = DraftSequence::default();
    for e in &seq.entries {
        let Some(&new_node) = node_map.get(&e.node) else {
            continue;
        };
        let mut entry = e.clone();
        entry.node = new_node;
        entry.global_pos = msg.remap(e.global_pos).expect("retained entry remaps");
        entry.parent_pos = if e.node == matched {
            None // parent is now committed context
        } else {
            e.parent_pos.map(|p| msg.remap(p).expect("retained parent remaps"))
        };
        entry.depth = new_tree.node(new_node).depth;
        new_seq.entries.push(entry);
    }

    Ok(PruneResult {
        tree: new_tree,
        seq: new_seq,
        msg,
        node_map,
    })
}

/// Applies a prune message to an in-flight segment: keeps exactly the
/// entries whose position is retained and rewrites their coordinates.
/// `l_cache` is the owning stage's cache length when the segment was
/// dispatched; it only anchors the paper's local-index view and does not
/// affect the result.
pub fn prune_segment(segment: &DraftSegment, msg: &PruneMessage, l_cache: u64) -> DraftSegment {
    let _ = l_cache;
    if segment.epoch >= msg.epoch {
        return segment.clone();
    }
    let mut out = DraftSegment {
        id: segment.id,
        entries: Vec::new(),
        epoch: msg.epoch,
    };
    for e in &segment.entries {
        let Some(new_pos) = msg
            .retain_global
            .binary_search(&e.global_pos)
            .ok()
            .map(|rank| msg.old_l_glo + rank as u64)
        else {
            continue;
        };
        let mut entry = e.clone();
        entry.global_pos = new_pos;
        entry.parent_pos = e.parent_pos.map(|p| match msg.remap(p) {
            Some(np) => np,
            // parent pruned while child retained cannot happen; keep the
            // stale value rather than panic in release builds
            None => p,
        });
        out.entries.push(entry);
    }
    out
}

/// Applies a prune message to a stage's KV-cache index: accepted
/// positions become context, retained drafts are compacted, pruned
/// positions are dropped.
pub fn prune_kv_cache(cache: &KvCacheIndex, msg: &PruneMessage) -> KvCacheIndex {
    if cache.epoch >= msg.epoch {
        return cache.clone();
    }
    let mut draft_entries = Vec::new();
    for &p in &cache.draft_entries {
        if let Some(np) = msg.remap(p) {
            if np >= msg.new_l_glo {
                draft_entries.push(np);
            }
        }
    }
    KvCacheIndex {
        context_len: msg.new_l_glo,
        draft_entries,
        epoch: msg.epoch,
    }
}

/// True iff the round must terminate (the continuous condition failed).
pub fn should_exit_round(outcome: &VerificationOutcome) -> bool {
    !outcome.continue_round
}
