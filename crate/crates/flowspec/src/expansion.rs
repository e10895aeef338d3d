//! Dynamic tree expansion: keep the pipeline fed.
//!
//! Two mechanisms append fresh draft tokens behind the in-flight
//! sequence. Context-aware expansion runs after every prune: a brand-new
//! base tree is grown from the advanced context, its best shallow nodes
//! are selected, and whichever of them are not already in the pruned tree
//! are merged in (path-hash dedup — nodes already in flight win).
//! Score-aware expansion runs when a step yields no context advance
//! (a fully pruned segment): the preserved base tree is deepened and the
//! best new connected nodes are appended.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::oracle::DraftModel;
use crate::scalar::{cmp_prob, Prob};
use crate::tree::{
    suffix_window, DraftSequence, DraftTree, NodeId, SeqEntry, Token,
};

/// Size cap for context-aware expansion's fresh tree.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum LExp {
    /// Use the full selection budget L; the whole appended sequence is
    /// dispatched as a single segment.
    All,
    Limit(usize),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ExpansionConfig {
    pub l_exp: LExp,
    /// Depth cap of the context-aware selection.
    pub d_exp: u32,
    /// Layers added to the base tree per score-aware expansion.
    pub d_se: u32,
    /// Node budget per score-aware expansion.
    pub l_se: usize,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        ExpansionConfig {
            l_exp: LExp::All,
            d_exp: 6,
            d_se: 2,
            l_se: 16,
        }
    }
}

/// Draft-growth shape parameters shared with round initialization.
#[derive(Copy, Clone, Debug)]
pub struct GrowParams {
    pub l: usize,
    pub d0: u32,
    pub k: usize,
}

/// Allocation cursor for appended sequence entries.
#[derive(Copy, Clone, Debug)]
pub struct SeqAlloc {
    /// Next free KV slot (current cache end).
    pub next_pos: u64,
    /// Next unique entry id.
    pub next_uid: u64,
}

#[derive(Clone, Debug)]
pub struct ContextExpansion<S> {
    /// 𝒯_mer: pruned tree with the new nodes merged in.
    pub tree: DraftTree<S>,
    /// S_app: entries for the appended nodes, dispatch order.
    pub appended: DraftSequence,
    /// The fresh 𝒯_base kept for later score-aware expansion.
    pub base: DraftTree<S>,
}

/// Context-aware expansion after a prune.
///
/// `context` is the committed token sequence including the new root
/// (x_new); `current` is the live draft sequence S_pr whose first entry
/// is the root of `t_pr`.
pub fn context_expand<S: Prob>(
    t_pr: &DraftTree<S>,
    current: &DraftSequence,
    context: &[Token],
    oracle: &dyn DraftModel<S>,
    grow: GrowParams,
    cfg: &ExpansionConfig,
    alloc: SeqAlloc,
) -> Result<ContextExpansion<S>> {
    let root_token = *context.last().ok_or_else(|| {
        Error::InvalidArgument("empty committed context".into())
    })?;
    if root_token != t_pr.root_token() {
        return Err(Error::ContractViolation(
            "context does not end at the pruned tree's root token".into(),
        ));
    }
    let base = crate::tree::grow_base_tree(
        oracle,
        &context[..context.len() - 1],
        root_token,
        grow.d0,
        grow.k,
    )?;

    // 𝒯_new: best nodes of the fresh base tree within depth d_exp
    let budget = match cfg.l_exp {
        LExp::All => grow.l,
        LExp::Limit(n) => n,
    };
    let mut candidates: Vec<NodeId> = base
        .node_ids()
        .filter(|&id| base.node(id).depth <= cfg.d_exp)
        .collect();
    candidates.sort_by(|&a, &b| {
        cmp_prob(base.node(b).cu_score, base.node(a).cu_score).then(a.cmp(&b))
    });
    candidates.truncate(budget);

    // 𝒩_new: those whose path the pruned tree does not already hold
    let mut tree = t_pr.clone();
    let new_nodes: Vec<NodeId> = candidates
        .into_iter()
        .filter(|&id| tree.path_lookup(&base.token_path(id)).is_none())
        .collect();
    let appended = append_from(&mut tree, &base, &new_nodes, current, alloc)?;
    Ok(ContextExpansion {
        tree,
        appended,
        base,
    })
}

/// Score-aware expansion on a starved step: deepens `t_base` by `d_se`
/// layers, then appends the top-`L_se` new connected nodes to `t`.
/// Returns the appended entries S_se (possibly empty).
pub fn score_expand<S: Prob>(
    t: &mut DraftTree<S>,
    t_base: &mut DraftTree<S>,
    current: &DraftSequence,
    context: &[Token],
    oracle: &dyn DraftModel<S>,
    k: usize,
    cfg: &ExpansionConfig,
    alloc: SeqAlloc,
) -> Result<DraftSequence> {
    if t_base.root_token() != t.root_token() {
        return Err(Error::ContractViolation(
            "base tree and live tree have different roots".into(),
        ));
    }
    t_base.extend_layers(oracle, context, cfg.d_se, k)?;

    let mut candidates: Vec<NodeId> = t_base
        .node_ids()
        .filter(|&id| t.path_lookup(&t_base.token_path(id)).is_none())
        .collect();
    candidates.sort_by(|&a, &b| {
        cmp_prob(t_base.node(b).cu_score, t_base.node(a).cu_score).then(a.cmp(&b))
    });

    // greedy connected selection: a candidate joins only if its parent is
    // already in the live tree or selected before it
    let mut selected: Vec<NodeId> = Vec::new();
    let mut selected_paths: std::collections::HashSet<Vec<Token>> =
        std::collections::HashSet::new();
    for id in candidates {
        if selected.len() >= cfg.l_se {
            break;
        }
        let path = t_base.token_path(id);
        let parent_path = &path[..path.len() - 1];
        if t.path_lookup(parent_path).is_some() || selected_paths.contains(parent_path) {
            selected_paths.insert(path);
            selected.push(id);
        }
    }
    append_from(t, t_base, &selected, current, alloc)
}

/// Appends `nodes` (an order where parents precede children) from
/// `source` into `dest`, carrying over the source's scores, and builds
/// their sequence entries.
fn append_from<S: Prob>(
    dest: &mut DraftTree<S>,
    source: &DraftTree<S>,
    nodes: &[NodeId],
    current: &DraftSequence,
    mut alloc: SeqAlloc,
) -> Result<DraftSequence> {
    // entry bookkeeping for parents already in the live sequence
    let mut pos_of: BTreeMap<NodeId, u64> = BTreeMap::new();
    let mut pos_id_of: BTreeMap<NodeId, u64> = BTreeMap::new();
    let mut ctx_of: BTreeMap<NodeId, Vec<Token>> = BTreeMap::new();
    for e in &current.entries {
        pos_of.insert(e.node, e.global_pos);
        pos_id_of.insert(e.node, e.pos_id);
        ctx_of.insert(e.node, e.ctx.clone());
    }

    let mut out = DraftSequence::default();
    for &src_id in nodes {
        let n = source.node(src_id);
        let path = source.token_path(src_id);
        if dest.path_lookup(&path).is_some() {
            continue; // already merged (duplicate path: existing node wins)
        }
        let parent_path = &path[..path.len() - 1];
        let parent = dest.path_lookup(parent_path).ok_or_else(|| {
            Error::ContractViolation(format!(
                "appended node's parent path {:?} missing from the live tree",
                parent_path
            ))
        })?;
        let id = dest.insert_child(parent, n.token, n.own_score)?;
        dest.set_cu_score(id, n.cu_score);

        let parent_pos = pos_of.get(&parent).copied();
        let parent_pos_id = *pos_id_of.get(&parent).ok_or_else(|| {
            Error::ContractViolation("appended node's parent has no sequence entry".into())
        })?;
        let mut ctx = ctx_of
            .get(&parent)
            .cloned()
            .unwrap_or_default();
        ctx.push(n.token);
        let ctx = suffix_window(&ctx);
        let entry = SeqEntry {
            uid: alloc.next_uid,
            node: id,
            token: n.token,
            global_pos: alloc.next_pos,
            parent_pos,
            pos_id: parent_pos_id + 1,
            depth: dest.node(id).depth,
            ctx: ctx.clone(),
        };
        alloc.next_uid += 1;
        alloc.next_pos += 1;
        pos_of.insert(id, entry.global_pos);
        pos_id_of.insert(id, entry.pos_id);
        ctx_of.insert(id, ctx);
        out.entries.push(entry);
    }
    Ok(out)
}
