//! Draft-token trees and their score-ordered sequence form.
//!
//! A [`DraftTree`] is a rooted tree of candidate tokens. Each node carries
//! its own draft probability and the cumulative score (product of draft
//! probabilities along the root path), which estimates how likely the whole
//! path is to be accepted. Trees are flattened into a [`DraftSequence`] —
//! by descending cumulative score, which is also a valid topological
//! order because a parent always outscores its children — and the sequence
//! is chopped into [`DraftSegment`]s for pipelined verification.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{DraftModel, CTX_WINDOW};
use crate::scalar::{cmp_prob, Prob};

/// Vocabulary index.
pub type Token = u32;

/// Dense per-tree node index, assigned in insertion order.
#[derive(Copy, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug)]
pub struct DraftNode<S> {
    pub token: Token,
    /// `None` for the root.
    pub parent: Option<NodeId>,
    pub own_score: S,
    pub cu_score: S,
    pub depth: u32,
    children: Vec<NodeId>,
}

/// Rooted draft-token tree with a hash index from token paths to nodes.
///
/// Token paths exclude the root token: the root's path is the empty list,
/// a child of the root has path `[child_token]`, and so on.
#[derive(Clone, Debug)]
pub struct DraftTree<S> {
    nodes: Vec<DraftNode<S>>,
    path_index: HashMap<Vec<Token>, NodeId>,
}

impl<S: Prob> DraftTree<S> {
    pub fn new(root_token: Token) -> Self {
        let root = DraftNode {
            token: root_token,
            parent: None,
            own_score: S::one(),
            cu_score: S::one(),
            depth: 0,
            children: Vec::new(),
        };
        let mut path_index = HashMap::new();
        path_index.insert(Vec::new(), NodeId(0));
        DraftTree {
            nodes: vec![root],
            path_index,
        }
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn root_token(&self) -> Token {
        self.nodes[0].token
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false // a tree always has its root
    }

    pub fn get(&self, id: NodeId) -> Option<&DraftNode<S>> {
        self.nodes.get(id.index())
    }

    pub fn node(&self, id: NodeId) -> &DraftNode<S> {
        &self.nodes[id.index()]
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len() as u32).map(NodeId)
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.index()].children
    }

    pub fn child_with_token(&self, id: NodeId, token: Token) -> Option<NodeId> {
        self.nodes[id.index()]
            .children
            .iter()
            .copied()
            .find(|&c| self.nodes[c.index()].token == token)
    }

    /// Children ordered by (cu_score descending, NodeId ascending).
    pub fn children_by_score(&self, id: NodeId) -> Vec<NodeId> {
        let mut kids = self.nodes[id.index()].children.clone();
        kids.sort_by(|&a, &b| {
            cmp_prob(self.nodes[b.index()].cu_score, self.nodes[a.index()].cu_score)
                .then(a.cmp(&b))
        });
        kids
    }

    /// Inserts a child under `parent`. Duplicate child tokens under one
    /// parent are collapsed onto the existing node, keeping the higher
    /// own_score (cu scores of the affected subtree are recomputed).
    pub fn insert_child(&mut self, parent: NodeId, token: Token, own_score: S) -> Result<NodeId> {
        if parent.index() >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!(
                "unknown parent node {:?}",
                parent
            )));
        }
        let own_score = own_score.max(S::score_floor());
        if let Some(existing) = self.child_with_token(parent, token) {
            if own_score > self.nodes[existing.index()].own_score {
                self.nodes[existing.index()].own_score = own_score;
                self.recompute_cu_subtree(existing);
            }
            return Ok(existing);
        }
        let id = NodeId(self.nodes.len() as u32);
        let p = &self.nodes[parent.index()];
        let cu = (p.cu_score * own_score).max(S::score_floor());
        let depth = p.depth + 1;
        let mut path = self.token_path(parent);
        path.push(token);
        self.nodes.push(DraftNode {
            token,
            parent: Some(parent),
            own_score,
            cu_score: cu,
            depth,
            children: Vec::new(),
        });
        self.nodes[parent.index()].children.push(id);
        self.path_index.insert(path, id);
        Ok(id)
    }

    /// Token path from the root to `id`, excluding the root token.
    pub fn token_path(&self, id: NodeId) -> Vec<Token> {
        let mut path = Vec::new();
        let mut cur = id;
        while let Some(p) = self.nodes[cur.index()].parent {
            path.push(self.nodes[cur.index()].token);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Node whose root-to-node token path equals `token_path`, if any.
    pub fn path_lookup(&self, token_path: &[Token]) -> Option<NodeId> {
        self.path_index.get(token_path).copied()
    }

    pub fn path_index_len(&self) -> usize {
        self.path_index.len()
    }

    pub fn max_depth(&self) -> u32 {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn nodes_at_depth(&self, depth: u32) -> Vec<NodeId> {
        self.node_ids()
            .filter(|id| self.nodes[id.index()].depth == depth)
            .collect()
    }

    /// Stored cumulative score of `node` (Eq. 1 product along the path).
    pub fn cumulative_score(&self, node: NodeId) -> Result<S> {
        self.get(node)
            .map(|n| n.cu_score)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown node {:?}", node)))
    }

    /// Grows `layers` additional layers from the current deepest layer.
    ///
    /// Each step selects the top-`k` deepest-layer nodes by cumulative
    /// score, queries the draft model for each, and inserts that query's
    /// top-`k` next tokens as children. `context` is the committed token
    /// context including the root token.
    pub fn extend_layers(
        &mut self,
        oracle: &dyn DraftModel<S>,
        context: &[Token],
        layers: u32,
        k: usize,
    ) -> Result<Vec<NodeId>> {
        if k < 1 {
            return Err(Error::InvalidArgument("branching k must be >= 1".into()));
        }
        let mut inserted_all = Vec::new();
        for _ in 0..layers {
            let depth = self.max_depth();
            let mut frontier = self.nodes_at_depth(depth);
            frontier.sort_by(|&a, &b| {
                cmp_prob(self.nodes[b.index()].cu_score, self.nodes[a.index()].cu_score)
                    .then(a.cmp(&b))
            });
            frontier.truncate(k);
            let mut layer_nodes = Vec::new();
            for id in frontier {
                let mut ctx: Vec<Token> = context.to_vec();
                ctx.extend(self.token_path(id));
                let dist = oracle.draft_next(&ctx)?;
                for (token, p) in dist.top_k(k) {
                    let child = self.insert_child(id, token, p)?;
                    layer_nodes.push(child);
                }
            }
            inserted_all.extend(layer_nodes);
        }
        Ok(inserted_all)
    }

    /// Preorder list of `root`'s subtree (including `root`), children in
    /// insertion order.
    pub fn subtree_nodes(&self, root: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            out.push(id);
            for &c in self.nodes[id.index()].children.iter().rev() {
                stack.push(c);
            }
        }
        out
    }

    /// Extracts the subtree rooted at `new_root` as a fresh tree whose
    /// cumulative scores are rescaled so the new root scores 1.0. Node
    /// insertion order follows the original order, so the forward-growth
    /// property is preserved. Returns the old-to-new id mapping.
    pub fn extract_subtree(&self, new_root: NodeId) -> (DraftTree<S>, BTreeMap<NodeId, NodeId>) {
        let mut members: Vec<NodeId> = self.subtree_nodes(new_root);
        members.sort(); // original insertion order
        let mut tree = DraftTree::new(self.nodes[new_root.index()].token);
        let mut map = BTreeMap::new();
        map.insert(new_root, tree.root());
        for &id in members.iter().skip(1) {
            let n = &self.nodes[id.index()];
            let new_parent = map[&n.parent.expect("non-root subtree member")];
            let new_id = tree
                .insert_child(new_parent, n.token, n.own_score)
                .expect("subtree reinsertion");
            map.insert(id, new_id);
        }
        (tree, map)
    }

    /// Overrides a stored cumulative score. Expansion uses this to carry
    /// scores over from a freshly grown base tree whose own-score history
    /// may differ from the merged tree's.
    pub(crate) fn set_cu_score(&mut self, id: NodeId, cu: S) {
        self.nodes[id.index()].cu_score = cu.max(S::score_floor());
    }

    fn recompute_cu_subtree(&mut self, id: NodeId) {
        for n in self.subtree_nodes(id) {
            let parent_cu = match self.nodes[n.index()].parent {
                Some(p) => self.nodes[p.index()].cu_score,
                None => S::one(),
            };
            let own = self.nodes[n.index()].own_score;
            self.nodes[n.index()].cu_score = (parent_cu * own).max(S::score_floor());
        }
    }

    /// Canonical debug form: preorder `token:own_score:cu_score` lines,
    /// 2-space indentation per depth, scores with 6 significant digits.
    pub fn to_debug_string(&self) -> String {
        let mut out = String::new();
        let mut stack = vec![self.root()];
        while let Some(id) = stack.pop() {
            let n = &self.nodes[id.index()];
            for _ in 0..n.depth {
                out.push_str("  ");
            }
            writeln!(out, "{}:{:.5e}:{:.5e}", n.token, n.own_score, n.cu_score).unwrap();
            for &c in n.children.iter().rev() {
                stack.push(c);
            }
        }
        out
    }
}

/// Stored cumulative score for `node` in `tree`.
pub fn cumulative_score<S: Prob>(tree: &DraftTree<S>, node: NodeId) -> Result<S> {
    tree.cumulative_score(node)
}

/// Grows the initial base tree of depth `depth` rooted at `root_token`.
/// `context` is the committed context excluding the root token.
pub fn grow_base_tree<S: Prob>(
    oracle: &dyn DraftModel<S>,
    context: &[Token],
    root_token: Token,
    depth: u32,
    k: usize,
) -> Result<DraftTree<S>> {
    let mut tree = DraftTree::new(root_token);
    let mut ctx = context.to_vec();
    ctx.push(root_token);
    tree.extend_layers(oracle, &ctx, depth, k)?;
    Ok(tree)
}

/// One entry of a [`DraftSequence`]. Entries are self-contained enough for
/// a verification stage to act on them without the tree: they carry the
/// token, the KV slot (`global_pos`), the parent's KV slot, the absolute
/// tree position id, and the trailing token context used by the model
/// oracles.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqEntry {
    /// Run-unique identity, stable across pruning and re-rooting.
    pub uid: u64,
    /// Node id in the tree that produced this entry (tree-local).
    pub node: NodeId,
    pub token: Token,
    /// Current KV-cache slot; remapped by pruning.
    pub global_pos: u64,
    /// Parent's KV slot, `None` when the parent is committed context.
    pub parent_pos: Option<u64>,
    /// Absolute position id: committed-prefix length along this entry's
    /// own path. Never changes after creation.
    pub pos_id: u64,
    pub depth: u32,
    /// Trailing tokens of (committed context ++ path), ending with this
    /// entry's own token. Bounded by the oracle context window.
    pub ctx: Vec<Token>,
}

/// Score-sorted (or BFS-ordered) flattening of a draft tree.
#[derive(Clone, Debug, Default)]
pub struct DraftSequence {
    pub entries: Vec<SeqEntry>,
}

impl DraftSequence {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tokens(&self) -> Vec<Token> {
        self.entries.iter().map(|e| e.token).collect()
    }
}

/// Sequence ordering used when flattening the selected tree.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum SeqOrder {
    /// Descending cumulative score, NodeId ascending on ties.
    ScoreDesc,
    /// Layer (insertion) order; used by the no-SBD ablation.
    Bfs,
}

/// Selects the `min(L, |base|)` highest-cumulative-score nodes of `base`
/// (root always included; the result is connected because a parent always
/// outscores its children) and returns them as a fresh tree plus its
/// score-ordered sequence.
///
/// `root_pos` is the root's KV slot (the committed context length less
/// one); entry `i` is assigned slot `root_pos + i`. `context` is the
/// committed token context including the root token. `uid_base` seeds the
/// per-entry unique ids.
pub fn select_top_l<S: Prob>(
    base: &DraftTree<S>,
    l: usize,
    root_pos: u64,
    context: &[Token],
    uid_base: u64,
) -> Result<(DraftTree<S>, DraftSequence)> {
    select_top_l_ordered(base, l, root_pos, context, uid_base, SeqOrder::ScoreDesc)
}

pub fn select_top_l_ordered<S: Prob>(
    base: &DraftTree<S>,
    l: usize,
    root_pos: u64,
    context: &[Token],
    uid_base: u64,
    order: SeqOrder,
) -> Result<(DraftTree<S>, DraftSequence)> {
    if l < 1 {
        return Err(Error::InvalidArgument("L must be >= 1".into()));
    }
    let mut ids: Vec<NodeId> = base.node_ids().collect();
    ids.sort_by(|&a, &b| {
        cmp_prob(base.node(b).cu_score, base.node(a).cu_score).then(a.cmp(&b))
    });
    ids.truncate(l);
    if order == SeqOrder::Bfs {
        ids.sort(); // insertion order is layer order for grown trees
    }

    let mut tree = DraftTree::new(base.root_token());
    let mut map: BTreeMap<NodeId, NodeId> = BTreeMap::new();
    map.insert(base.root(), tree.root());
    let mut seq = DraftSequence::default();
    let mut pos_of: BTreeMap<NodeId, u64> = BTreeMap::new();
    let mut ctx_of: BTreeMap<NodeId, Vec<Token>> = BTreeMap::new();

    for (i, &old) in ids.iter().enumerate() {
        let n = base.node(old);
        let global_pos = root_pos + i as u64;
        let (new_id, parent_pos, ctx) = if old == base.root() {
            let ctx = suffix_window(context);
            (tree.root(), None, ctx)
        } else {
            let old_parent = n.parent.expect("non-root");
            let new_parent = *map.get(&old_parent).ok_or_else(|| {
                Error::ContractViolation("top-L selection is not connected".into())
            })?;
            let new_id = tree.insert_child(new_parent, n.token, n.own_score)?;
            let mut ctx = ctx_of[&old_parent].clone();
            ctx.push(n.token);
            let ctx = suffix_window(&ctx);
            (new_id, Some(pos_of[&old_parent]), ctx)
        };
        map.insert(old, new_id);
        pos_of.insert(old, global_pos);
        ctx_of.insert(old, ctx.clone());
        seq.entries.push(SeqEntry {
            uid: uid_base + i as u64,
            node: new_id,
            token: n.token,
            global_pos,
            parent_pos,
            pos_id: root_pos + n.depth as u64,
            depth: n.depth,
            ctx,
        });
    }
    Ok((tree, seq))
}

pub(crate) fn suffix_window(tokens: &[Token]) -> Vec<Token> {
    let start = tokens.len().saturating_sub(CTX_WINDOW);
    tokens[start..].to_vec()
}

/// Identifier of a draft segment: (round, ordinal within the round's
/// dispatch order).
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SegmentId {
    pub round: u32,
    pub ordinal: u32,
}

impl std::fmt::Display for SegmentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "r{}.s{}", self.round, self.ordinal)
    }
}

/// Contiguous slice of a draft sequence, the unit of pipelined verification.
#[derive(Clone, Debug)]
pub struct DraftSegment {
    pub id: SegmentId,
    pub entries: Vec<SeqEntry>,
    /// Prune epoch already applied to this segment's coordinates; prune
    /// messages at or below this epoch are no-ops (idempotence).
    pub epoch: u64,
}

impl DraftSegment {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Splits `seq` into consecutive slices of `l_max` entries (the final one
/// may be shorter). An empty sequence yields no segments.
pub fn segment_sequence(
    seq: &DraftSequence,
    l_max: usize,
    round: u32,
    first_ordinal: u32,
) -> Result<Vec<DraftSegment>> {
    if l_max < 1 {
        return Err(Error::InvalidArgument("L_max must be >= 1".into()));
    }
    Ok(seq
        .entries
        .chunks(l_max)
        .enumerate()
        .map(|(i, chunk)| DraftSegment {
            id: SegmentId {
                round,
                ordinal: first_ordinal + i as u32,
            },
            entries: chunk.to_vec(),
            epoch: 0,
        })
        .collect())
}

/// Tree position ids and ancestor sets (the tree attention mask in set
/// form) for a topologically ordered sequence. `ancestor_sets[i]` holds
/// the indices of entry `i`'s strict ancestors within the sequence;
/// ancestors already committed to context are implicit.
pub fn attention_metadata(seq: &DraftSequence) -> Result<(Vec<u64>, Vec<BTreeSet<usize>>)> {
    let mut idx_of: HashMap<u64, usize> = HashMap::new();
    for (i, e) in seq.entries.iter().enumerate() {
        idx_of.insert(e.global_pos, i);
    }
    let mut pos_ids = Vec::with_capacity(seq.len());
    let mut sets: Vec<BTreeSet<usize>> = Vec::with_capacity(seq.len());
    for (i, e) in seq.entries.iter().enumerate() {
        pos_ids.push(e.pos_id);
        let set = match e.parent_pos.and_then(|p| idx_of.get(&p).copied()) {
            Some(pi) => {
                if pi >= i {
                    return Err(Error::ContractViolation(format!(
                        "sequence is not topologically ordered: parent of entry {} is at {}",
                        i, pi
                    )));
                }
                let mut s = sets[pi].clone();
                s.insert(pi);
                s
            }
            None => BTreeSet::new(),
        };
        sets.push(set);
    }
    Ok((pos_ids, sets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{OracleConfig, SyntheticOracle};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn oracle(vocab: u32, seed: u64) -> SyntheticOracle<f64> {
        SyntheticOracle::new(OracleConfig {
            vocab_size: vocab,
            seed,
            alignment: 1.0,
            temperature: 1.0,
        })
    }

    /// Random tree with `n` extra nodes and seeded scores.
    fn random_tree(seed: u64, n: usize) -> DraftTree<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tree = DraftTree::<f64>::new(0);
        for i in 0..n {
            let parent = NodeId(rng.gen_range(0..tree.len() as u32));
            // distinct tokens per node avoid the dedup path
            let token = 1 + i as Token;
            let score: f64 = rng.gen_range(0.01..1.0);
            tree.insert_child(parent, token, score).unwrap();
        }
        tree
    }

    #[test]
    fn cumulative_score_root_is_one() {
        let tree = DraftTree::<f64>::new(7);
        assert_eq!(cumulative_score(&tree, tree.root()).unwrap(), 1.0);
    }

    #[test]
    fn cumulative_score_single_step() {
        let mut tree = DraftTree::<f64>::new(0);
        let a = tree.insert_child(tree.root(), 1, 0.5).unwrap();
        let b = tree.insert_child(a, 2, 0.4).unwrap();
        assert!((cumulative_score(&tree, b).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn cumulative_score_matches_path_walk() {
        // independent oracle: walk parents and re-multiply
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tree = DraftTree::<f64>::new(0);
        let mut cur = tree.root();
        for i in 0..5 {
            cur = tree
                .insert_child(cur, i + 1, rng.gen_range(0.05..0.95))
                .unwrap();
        }
        let mut expect = 1.0;
        let mut walk = Some(cur);
        while let Some(id) = walk {
            expect *= tree.node(id).own_score;
            walk = tree.node(id).parent;
        }
        assert!((cumulative_score(&tree, cur).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn cumulative_score_unknown_node_errors() {
        let tree = DraftTree::<f64>::new(0);
        assert!(cumulative_score(&tree, NodeId(5)).is_err());
    }

    #[test]
    fn grow_depth_zero_is_root_only() {
        let o = oracle(8, 1);
        let tree = grow_base_tree(&o, &[3], 5, 0, 4).unwrap();
        assert_eq!(tree.len(), 1);
        assert_eq!(tree.root_token(), 5);
    }

    #[test]
    fn grow_k1_is_greedy_chain() {
        let o = oracle(16, 2);
        let d0 = 5;
        let tree = grow_base_tree(&o, &[1, 2], 3, d0, 1).unwrap();
        assert_eq!(tree.len(), d0 as usize + 1);
        // every node has at most one child, and each child is the draft argmax
        let mut ctx = vec![1u32, 2, 3];
        let mut cur = tree.root();
        for _ in 0..d0 {
            let dist = o.draft_next(&ctx).unwrap();
            let expect = dist.argmax();
            let kids = tree.children(cur);
            assert_eq!(kids.len(), 1);
            assert_eq!(tree.node(kids[0]).token, expect);
            ctx.push(expect);
            cur = kids[0];
        }
    }

    /// Independent reference for the layer-growth selection rule.
    fn reference_grow(
        o: &SyntheticOracle<f64>,
        context: &[Token],
        root_token: Token,
        d0: u32,
        k: usize,
    ) -> Vec<(Vec<Token>, f64)> {
        // enumerate (path, cu) pairs layer by layer
        let mut all: Vec<(Vec<Token>, f64)> = vec![(vec![], 1.0)];
        let mut layer: Vec<(Vec<Token>, f64)> = all.clone();
        for _ in 0..d0 {
            let mut frontier = layer.clone();
            frontier.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            frontier.truncate(k);
            let mut next = Vec::new();
            for (path, cu) in frontier {
                let mut ctx = context.to_vec();
                ctx.push(root_token);
                ctx.extend(&path);
                let dist = o.draft_next(&ctx).unwrap();
                for (t, p) in dist.top_k(k) {
                    let mut np = path.clone();
                    np.push(t);
                    next.push((np, cu * p));
                }
            }
            all.extend(next.iter().cloned());
            layer = next;
        }
        all
    }

    #[test]
    fn grow_matches_exhaustive_reference() {
        let o = oracle(4, 9);
        let tree = grow_base_tree(&o, &[2], 1, 2, 2).unwrap();
        let reference = reference_grow(&o, &[2], 1, 2, 2);
        assert_eq!(tree.len(), reference.len());
        for (path, cu) in reference {
            let id = tree.path_lookup(&path).expect("path present");
            assert!((tree.node(id).cu_score - cu).abs() < 1e-12);
        }
    }

    #[test]
    fn select_whole_tree_when_l_large() {
        let tree = random_tree(3, 14);
        let (sel, seq) = select_top_l(&tree, 100, 10, &[0], 0).unwrap();
        assert_eq!(sel.len(), tree.len());
        assert_eq!(seq.len(), tree.len());
        for w in seq.entries.windows(2) {
            let a = sel.node(w[0].node).cu_score;
            let b = sel.node(w[1].node).cu_score;
            assert!(a >= b);
        }
    }

    #[test]
    fn select_l1_is_root_only() {
        let tree = random_tree(4, 10);
        let (sel, seq) = select_top_l(&tree, 1, 0, &[0], 0).unwrap();
        assert_eq!(sel.len(), 1);
        assert_eq!(seq.len(), 1);
        assert_eq!(seq.entries[0].token, tree.root_token());
    }

    #[test]
    fn select_l0_errors() {
        let tree = random_tree(4, 4);
        assert!(select_top_l(&tree, 0, 0, &[0], 0).is_err());
    }

    #[test]
    fn select_matches_brute_force_sort() {
        let tree = random_tree(5, 14); // 15 nodes
        let (sel, _) = select_top_l(&tree, 8, 0, &[0], 0).unwrap();
        // brute force: sort all nodes by (cu desc, id asc), take 8
        let mut ids: Vec<NodeId> = tree.node_ids().collect();
        ids.sort_by(|&a, &b| {
            tree.node(b)
                .cu_score
                .partial_cmp(&tree.node(a).cu_score)
                .unwrap()
                .then(a.cmp(&b))
        });
        ids.truncate(8);
        let expect: BTreeSet<Vec<Token>> = ids.iter().map(|&i| tree.token_path(i)).collect();
        let got: BTreeSet<Vec<Token>> = sel.node_ids().map(|i| sel.token_path(i)).collect();
        assert_eq!(expect, got);
    }

    #[test]
    fn segment_lengths() {
        let tree = random_tree(6, 79); // 80 nodes with root
        let (_, seq) = select_top_l(&tree, 80, 0, &[0], 0).unwrap();
        let segs = segment_sequence(&seq, 16, 1, 0).unwrap();
        assert_eq!(segs.len(), 5);
        assert!(segs.iter().all(|s| s.len() == 16));

        let short = DraftSequence {
            entries: seq.entries[..5].to_vec(),
        };
        assert_eq!(segment_sequence(&short, 16, 1, 0).unwrap().len(), 1);

        let odd = DraftSequence {
            entries: seq.entries[..33].to_vec(),
        };
        let segs = segment_sequence(&odd, 16, 1, 0).unwrap();
        let lens: Vec<usize> = segs.iter().map(|s| s.len()).collect();
        assert_eq!(lens, vec![16, 16, 1]);

        assert!(segment_sequence(&DraftSequence::default(), 16, 1, 0)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn attention_chain_and_siblings() {
        let mut tree = DraftTree::<f64>::new(0);
        let a = tree.insert_child(tree.root(), 1, 0.9).unwrap();
        tree.insert_child(a, 2, 0.8).unwrap();
        let (_, seq) = select_top_l(&tree, 3, 0, &[0], 0).unwrap();
        let (_, sets) = attention_metadata(&seq).unwrap();
        assert_eq!(sets[0], BTreeSet::new());
        assert_eq!(sets[1], BTreeSet::from([0]));
        assert_eq!(sets[2], BTreeSet::from([0, 1]));

        let mut tree = DraftTree::<f64>::new(0);
        tree.insert_child(tree.root(), 1, 0.6).unwrap();
        tree.insert_child(tree.root(), 2, 0.4).unwrap();
        let (_, seq) = select_top_l(&tree, 3, 0, &[0], 0).unwrap();
        let (_, sets) = attention_metadata(&seq).unwrap();
        assert_eq!(sets[1], BTreeSet::from([0]));
        assert_eq!(sets[2], BTreeSet::from([0]));
    }

    #[test]
    fn attention_matches_transitive_closure() {
        let tree = random_tree(7, 11); // 12 nodes
        let (sel, seq) = select_top_l(&tree, 12, 0, &[0], 0).unwrap();
        let (_, sets) = attention_metadata(&seq).unwrap();
        // oracle: transitive closure of parent edges over the selected tree
        for (i, e) in seq.entries.iter().enumerate() {
            let mut expect = BTreeSet::new();
            let mut cur = sel.node(e.node).parent;
            while let Some(p) = cur {
                let idx = seq.entries.iter().position(|x| x.node == p).unwrap();
                expect.insert(idx);
                cur = sel.node(p).parent;
            }
            assert_eq!(sets[i], expect, "entry {}", i);
        }
    }

    #[test]
    fn attention_rejects_non_topological() {
        let tree = random_tree(8, 5);
        let (_, mut seq) = select_top_l(&tree, 6, 0, &[0], 0).unwrap();
        seq.entries.reverse();
        assert!(attention_metadata(&seq).is_err());
    }

    #[test]
    fn path_lookup_cases() {
        let mut tree = DraftTree::<f64>::new(9);
        let a = tree.insert_child(tree.root(), 4, 0.5).unwrap();
        let b = tree.insert_child(a, 6, 0.5).unwrap();
        assert_eq!(tree.path_lookup(&[]), Some(tree.root()));
        assert_eq!(tree.path_lookup(&[4, 6]), Some(b));
        assert_eq!(tree.path_lookup(&[4, 7]), None);
        // agrees with a linear search over all nodes
        for id in tree.node_ids() {
            let path = tree.token_path(id);
            assert_eq!(tree.path_lookup(&path), Some(id));
        }
    }

    #[test]
    fn duplicate_child_keeps_higher_score() {
        let mut tree = DraftTree::<f64>::new(0);
        let a = tree.insert_child(tree.root(), 1, 0.3).unwrap();
        let b = tree.insert_child(tree.root(), 1, 0.7).unwrap();
        assert_eq!(a, b);
        assert_eq!(tree.len(), 2);
        assert!((tree.node(a).own_score - 0.7).abs() < 1e-12);
        let c = tree.insert_child(tree.root(), 1, 0.1).unwrap();
        assert_eq!(c, a);
        assert!((tree.node(a).own_score - 0.7).abs() < 1e-12);
    }

    #[test]
    fn child_scores_bounded_by_parent() {
        for seed in 0..20 {
            let tree = random_tree(seed, 30);
            for id in tree.node_ids() {
                if let Some(p) = tree.node(id).parent {
                    assert!(tree.node(id).cu_score <= tree.node(p).cu_score + 1e-15);
                }
            }
        }
    }

    #[test]
    fn select_is_connected_and_topological() {
        for seed in 0..20 {
            let tree = random_tree(100 + seed, 25);
            for l in [1usize, 3, 10, 26] {
                let (sel, seq) = select_top_l(&tree, l, 0, &[0], 0).unwrap();
                assert_eq!(seq.entries[0].token, tree.root_token());
                let idx: HashMap<NodeId, usize> = seq
                    .entries
                    .iter()
                    .enumerate()
                    .map(|(i, e)| (e.node, i))
                    .collect();
                for (i, e) in seq.entries.iter().enumerate() {
                    if let Some(p) = sel.node(e.node).parent {
                        assert!(idx[&p] < i);
                    }
                }
            }
        }
    }

    #[test]
    fn segments_roundtrip() {
        let tree = random_tree(42, 40);
        let (_, seq) = select_top_l(&tree, 41, 0, &[0], 0).unwrap();
        let segs = segment_sequence(&seq, 7, 1, 0).unwrap();
        let mut rebuilt = Vec::new();
        for s in &segs {
            rebuilt.extend(s.entries.iter().cloned());
        }
        assert_eq!(rebuilt, seq.entries);
    }

    #[test]
    fn debug_string_format() {
        let mut tree = DraftTree::<f64>::new(3);
        let a = tree.insert_child(tree.root(), 1, 0.5).unwrap();
        tree.insert_child(a, 2, 0.25).unwrap();
        let s = tree.to_debug_string();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "3:1.00000e0:1.00000e0");
        assert_eq!(lines[1], "  1:5.00000e-1:5.00000e-1");
        assert_eq!(lines[2], "    2:2.50000e-1:1.25000e-1");
    }
}
