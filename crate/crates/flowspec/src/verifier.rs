//! Draft-token acceptance at the draft stage.
//!
//! After each verified segment returns, the draft stage walks the tree
//! from the current root using every base-model distribution received so
//! far, producing the accepted tokens `S_acc` and a freshly sampled token
//! `x_new`. If `x_new` already exists in the tree (the continuous
//! condition), the round keeps going with that node as the new root;
//! otherwise the round exits.
//!
//! Acceptance rules (lossless in both modes):
//!
//! * greedy — at each node take the base argmax `t*`; if a child with
//!   token `t*` exists and its own distribution has arrived, accept it and
//!   descend; if the child exists but its distribution is still in flight,
//!   stop with `x_new = t*` (the child becomes the next root). Otherwise
//!   stop with `x_new = t*`.
//! * stochastic — candidate children are deterministic (top-k drafts),
//!   so the standard rejection-sampling acceptance mass is used directly:
//!   with residual `r` initialized to the temperature-shaped base
//!   distribution, each child `c` (descending cu_score, NodeId tie-break)
//!   is accepted with probability `m = min(q(c), r(token(c)))`, where
//!   `q(c)` is the child's draft score; on rejection the residual becomes
//!   `(r − m·δ_token)/(1 − m)` before the next child is tried; if every
//!   child is rejected, `x_new` is sampled from the final residual. This
//!   telescopes so the committed token's marginal law equals the base
//!   distribution exactly.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::oracle::{apply_temperature, TokenDistribution};
use crate::scalar::Prob;
use crate::tree::{DraftTree, NodeId, Token};

/// Base-model distributions accumulated over completed segments, keyed by
/// the NodeId of the token they were computed at.
#[derive(Clone, Debug)]
pub struct VerificationOutput<S> {
    pub per_token_dist: BTreeMap<NodeId, TokenDistribution<S>>,
}

impl<S> Default for VerificationOutput<S> {
    fn default() -> Self {
        VerificationOutput {
            per_token_dist: BTreeMap::new(),
        }
    }
}

impl<S> VerificationOutput<S> {
    pub fn contains(&self, node: NodeId) -> bool {
        self.per_token_dist.contains_key(&node)
    }
}

/// Result of one acceptance walk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerificationOutcome {
    /// Accepted tokens S_acc, in root-to-leaf order.
    pub accepted: Vec<Token>,
    /// Token sampled after the last accepted node.
    pub new_token: Token,
    /// Node n_new whose path equals `accepted ++ [new_token]`, if present.
    pub matched_node: Option<NodeId>,
    /// True iff `matched_node` is present (the continuous condition).
    pub continue_round: bool,
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub enum AcceptMode<S> {
    Greedy,
    Stochastic { temperature: S },
}

/// Walks `tree` from its root using the distributions in `available`.
///
/// The root's distribution must be present (it came from the previous
/// step or from prefill). `rng_seed` drives all stochastic draws.
pub fn accept_walk<S: Prob>(
    tree: &DraftTree<S>,
    available: &VerificationOutput<S>,
    mode: AcceptMode<S>,
    rng_seed: u64,
) -> Result<VerificationOutcome> {
    if !available.contains(tree.root()) {
        return Err(Error::ContractViolation(
            "root distribution missing from accept_walk input".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut accepted = Vec::new();
    let mut cur = tree.root();
    let new_token = loop {
        let dist = &available.per_token_dist[&cur];
        match mode {
            AcceptMode::Greedy => {
                let t_star = dist.argmax();
                match tree.child_with_token(cur, t_star) {
                    Some(child) if available.contains(child) => {
                        accepted.push(t_star);
                        cur = child;
                    }
                    _ => break t_star,
                }
            }
            AcceptMode::Stochastic { temperature } => {
                let mut residual = apply_temperature(dist, temperature)?.probs;
                let mut next = None;
                for child in tree.children_by_score(cur) {
                    let t = tree.node(child).token as usize;
                    let q = tree.node(child).own_score;
                    let m = q.min(residual[t]).max(S::zero()).min(S::one());
                    let u: f64 = rng.gen();
                    if u < m.to_f64_lossy() {
                        next = Some(child);
                        break;
                    }
                    // rejection: remove the acceptance mass and renormalize
                    let keep = S::one() - m;
                    residual[t] = (residual[t] - m).max(S::zero());
                    for p in &mut residual {
                        *p = *p / keep;
                    }
                }
                match next {
                    Some(child) => {
                        let t = tree.node(child).token;
                        if available.contains(child) {
                            accepted.push(t);
                            cur = child;
                        } else {
                            break t; // child becomes the next root
                        }
                    }
                    None => {
                        let dist = TokenDistribution { probs: residual };
                        break dist.sample(rng.gen());
                    }
                }
            }
        }
    };
    let mut path = accepted.clone();
    path.push(new_token);
    let matched_node = tree.path_lookup(&path);
    Ok(VerificationOutcome {
        accepted,
        new_token,
        matched_node,
        continue_round: matched_node.is_some(),
    })
}

/// Continuous condition: `S_acc ++ [x_new]` names an existing tree node.
pub fn continuous_condition<S: Prob>(
    tree: &DraftTree<S>,
    s_acc: &[Token],
    x_new: Token,
) -> bool {
    let mut path = s_acc.to_vec();
    path.push(x_new);
    tree.path_lookup(&path).is_some()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{BaseModel, OracleConfig, SyntheticOracle};
    use crate::tree::grow_base_tree;

    fn avail_for<S: Prob>(
        tree: &DraftTree<S>,
        dists: Vec<(NodeId, Vec<S>)>,
    ) -> VerificationOutput<S> {
        let _ = tree;
        VerificationOutput {
            per_token_dist: dists
                .into_iter()
                .map(|(n, probs)| (n, TokenDistribution { probs }))
                .collect(),
        }
    }

    #[test]
    fn missing_root_distribution_errors() {
        let tree = DraftTree::<f64>::new(0);
        let avail = VerificationOutput::default();
        assert!(accept_walk(&tree, &avail, AcceptMode::Greedy, 0).is_err());
    }

    #[test]
    fn greedy_zero_acceptance() {
        // base argmax at root (token 3) is not among children
        let mut tree = DraftTree::<f64>::new(0);
        tree.insert_child(tree.root(), 1, 0.9).unwrap();
        let avail = avail_for(&tree, vec![(tree.root(), vec![0.1, 0.2, 0.1, 0.6])]);
        let out = accept_walk(&tree, &avail, AcceptMode::Greedy, 0).unwrap();
        assert!(out.accepted.is_empty());
        assert_eq!(out.new_token, 3);
        assert!(!out.continue_round);
        assert_eq!(out.matched_node, None);
    }

    #[test]
    fn greedy_match_without_child_distribution_continues() {
        let mut tree = DraftTree::<f64>::new(0);
        let a = tree.insert_child(tree.root(), 1, 0.9).unwrap();
        let avail = avail_for(&tree, vec![(tree.root(), vec![0.1, 0.8, 0.1])]);
        let out = accept_walk(&tree, &avail, AcceptMode::Greedy, 0).unwrap();
        assert!(out.accepted.is_empty());
        assert_eq!(out.new_token, 1);
        assert_eq!(out.matched_node, Some(a));
        assert!(out.continue_round);
    }

    #[test]
    fn greedy_perfect_alignment_accepts_whole_chain() {
        // α = 1 oracle, k = 1 chain of depth d: draft argmax == base argmax
        let o = SyntheticOracle::<f64>::new(OracleConfig {
            vocab_size: 16,
            seed: 77,
            alignment: 1.0,
            temperature: 1.0,
        });
        let d = 5;
        let ctx = vec![3u32, 1];
        let tree = grow_base_tree(&o, &ctx[..1], 1, d, 1).unwrap();
        // all distributions available
        let mut avail = VerificationOutput::default();
        for id in tree.node_ids() {
            let mut c = ctx.clone();
            c.extend(tree.token_path(id));
            avail
                .per_token_dist
                .insert(id, o.base_next(&c).unwrap());
        }
        let out = accept_walk(&tree, &avail, AcceptMode::Greedy, 0).unwrap();
        assert_eq!(out.accepted.len(), d as usize);
        // accepted tokens are exactly the chain
        let mut cur = tree.root();
        for &t in &out.accepted {
            cur = tree.child_with_token(cur, t).unwrap();
        }
        assert!(tree.children(cur).is_empty());
    }

    #[test]
    fn prefix_property_random_trees() {
        // accept_walk never accepts a token whose parent was not accepted
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..50 {
            let mut tree = DraftTree::<f64>::new(0);
            for i in 0..10u32 {
                let parent = NodeId(rng.gen_range(0..tree.len() as u32));
                tree.insert_child(parent, 1 + (i % 4), rng.gen_range(0.05..0.95))
                    .ok();
            }
            let mut avail = VerificationOutput::default();
            let v = 6;
            for id in tree.node_ids() {
                if rng.gen_bool(0.7) {
                    let mut probs: Vec<f64> = (0..v).map(|_| rng.gen_range(0.01..1.0)).collect();
                    let s: f64 = probs.iter().sum();
                    probs.iter_mut().for_each(|p| *p /= s);
                    avail.per_token_dist.insert(id, TokenDistribution { probs });
                }
            }
            if !avail.contains(tree.root()) {
                continue;
            }
            let mode = if case % 2 == 0 {
                AcceptMode::Greedy
            } else {
                AcceptMode::Stochastic { temperature: 1.0 }
            };
            let out = accept_walk(&tree, &avail, mode, case).unwrap();
            // the accepted list must trace a root path of the tree
            let mut cur = tree.root();
            for &t in &out.accepted {
                cur = tree
                    .child_with_token(cur, t)
                    .expect("accepted token is a child of the previous one");
            }
        }
    }

    /// Exact enumeration of the documented single-child acceptance law.
    fn one_step_law(p: &[f64], q_child: f64, child_token: usize) -> Vec<f64> {
        let v = p.len();
        let m = q_child.min(p[child_token]);
        let mut law = vec![0.0; v];
        law[child_token] += m;
        let keep = 1.0 - m;
        if keep > 0.0 {
            let mut residual: Vec<f64> = p.to_vec();
            residual[child_token] -= m;
            for (i, r) in residual.iter().enumerate() {
                law[i] += keep * (r / keep);
            }
        }
        law
    }

    #[test]
    fn stochastic_one_step_marginal_matches_base() {
        // single-child tree: the committed token's marginal equals the
        // base distribution exactly, and the empirical law over many
        // trials matches the enumerated law.
        for vocab in 2..=8usize {
            let p: Vec<f64> = {
                let raw: Vec<f64> = (0..vocab).map(|i| 1.0 + ((i * 7 + 3) % 5) as f64).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / s).collect()
            };
            let child_token = vocab / 2;
            let q = 0.6;
            let law = one_step_law(&p, q, child_token);
            let total: f64 = law.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            for i in 0..vocab {
                assert!((law[i] - p[i]).abs() < 1e-12, "marginal equals base");
            }

            let mut tree = DraftTree::<f64>::new(0);
            tree.insert_child(tree.root(), child_token as Token, q)
                .unwrap();
            let avail = avail_for(&tree, vec![(tree.root(), p.clone())]);
            let trials = 20_000u64;
            let mut counts = vec![0u64; vocab];
            for s in 0..trials {
                let out = accept_walk(
                    &tree,
                    &avail,
                    AcceptMode::Stochastic { temperature: 1.0 },
                    s,
                )
                .unwrap();
                // committed next token: accepted child token or x_new
                let t = if out.accepted.is_empty() {
                    out.new_token
                } else {
                    out.accepted[0]
                };
                counts[t as usize] += 1;
            }
            let tv: f64 = counts
                .iter()
                .zip(&law)
                .map(|(&c, &l)| (c as f64 / trials as f64 - l).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv < 0.02, "vocab {}: TV distance {}", vocab, tv);
        }
    }

    #[test]
    fn stochastic_accept_descends_when_available() {
        // child token has full base mass and q = 1: always accepted
        let mut tree = DraftTree::<f64>::new(0);
        let a = tree.insert_child(tree.root(), 1, 1.0).unwrap();
        let avail = avail_for(
            &tree,
            vec![(tree.root(), vec![0.0, 1.0]), (a, vec![1.0, 0.0])],
        );
        let out = accept_walk(
            &tree,
            &avail,
            AcceptMode::Stochastic { temperature: 1.0 },
            4,
        )
        .unwrap();
        assert_eq!(out.accepted, vec![1]);
        assert_eq!(out.new_token, 0);
    }

    #[test]
    fn continuous_condition_cases() {
        let mut tree = DraftTree::<f64>::new(0);
        let a = tree.insert_child(tree.root(), 2, 0.5).unwrap();
        tree.insert_child(a, 3, 0.5).unwrap();
        assert!(continuous_condition(&tree, &[], 2));
        assert!(continuous_condition(&tree, &[2], 3));
        assert!(!continuous_condition(&tree, &[], 9));
        assert!(!continuous_condition(&tree, &[2], 9));
    }

    #[test]
    fn continuous_condition_matches_linear_scan() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let mut tree = DraftTree::<f64>::new(0);
            for i in 0..12u32 {
                let parent = NodeId(rng.gen_range(0..tree.len() as u32));
                tree.insert_child(parent, 1 + (i % 5), rng.gen_range(0.05..0.95))
                    .ok();
            }
            let s_acc: Vec<Token> = (0..rng.gen_range(0..3)).map(|_| rng.gen_range(1..6)).collect();
            let x_new: Token = rng.gen_range(1..6);
            let mut path = s_acc.clone();
            path.push(x_new);
            let scan = tree
                .node_ids()
                .any(|id| tree.token_path(id) == path);
            assert_eq!(continuous_condition(&tree, &s_acc, x_new), scan);
        }
    }
}
