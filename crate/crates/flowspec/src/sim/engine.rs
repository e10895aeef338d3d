//! Deterministic discrete-event simulation of the D0 + V1..VN pipeline.
//!
//! One logical thread drains a priority queue of events ordered by
//! (time, insertion number). The draft stage D0 grows and flattens the
//! tree, dispatches segments to V1 one at a time (the next transfer
//! starts when V1 begins computing the previous segment), evaluates
//! returned outputs, and — depending on the strategy — prunes in-flight
//! state and expands the tree to keep the pipeline fed.
//!
//! Control messages (prune / round exit) are applied to all stage-local
//! state at the moment D0 decides them; their transfer cost is still
//! charged on the trace. This keeps every cross-stage audit exact while
//! preserving the timing the messages would have cost.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{Params, StrategyId};
use crate::error::{Error, Result};
use crate::expansion::{context_expand, score_expand, GrowParams, LExp, SeqAlloc};
use crate::oracle::{apply_temperature, mix_seed, BaseModel, SyntheticOracle, TokenDistribution};
use crate::pruning::{compute_prune, prune_kv_cache, prune_segment, KvCacheIndex, PruneMessage};
use crate::scalar::Prob;
use crate::sim::cost::{CostModel, PRUNE_MSG_BYTES_PER_POS};
use crate::sim::metrics::{collect_metrics, Metrics};
use crate::trace::{EventKind, TraceEvent};
use crate::tree::{
    grow_base_tree, segment_sequence, select_top_l_ordered, DraftSegment, DraftSequence,
    DraftTree, NodeId, SegmentId, SeqOrder, Token,
};
use crate::verifier::{accept_walk, AcceptMode, VerificationOutcome, VerificationOutput};

/// Raw simulation output; [`crate::sim::RunResult`] wraps it with the
/// config echo for trace emission.
#[derive(Clone, Debug)]
pub struct SimOutput {
    pub committed: Vec<Token>,
    pub trace: Vec<TraceEvent>,
    /// `None` when no decode happened (e.g. `gen_limit = 0`).
    pub metrics: Option<Metrics>,
}

/// Scheduling behavior per strategy; all strategies share the tree,
/// acceptance, and pruning code paths.
#[derive(Copy, Clone, Debug)]
struct Flags {
    /// Evaluate each returned segment as it arrives (false: wait for the
    /// whole round and walk once).
    step_eval: bool,
    /// Prune in-flight state and continue rounds across steps.
    prune: bool,
    /// Context- and score-aware expansion.
    expand: bool,
    order: SeqOrder,
}

fn strategy_flags(strategy: StrategyId) -> Flags {
    match strategy {
        StrategyId::NaivePp => Flags {
            step_eval: false,
            prune: false,
            expand: false,
            order: SeqOrder::ScoreDesc,
        },
        StrategyId::PrunedPp => Flags {
            step_eval: true,
            prune: true,
            expand: false,
            order: SeqOrder::ScoreDesc,
        },
        StrategyId::FlowspecNoSbd => Flags {
            step_eval: true,
            prune: true,
            expand: true,
            order: SeqOrder::Bfs,
        },
        StrategyId::Flowspec => Flags {
            step_eval: true,
            prune: true,
            expand: true,
            order: SeqOrder::ScoreDesc,
        },
    }
}

enum Ev<S> {
    /// Segment arrival at a verification stage (0-based index).
    SegArrive {
        stage: usize,
        id: SegmentId,
        /// Nonzero for D0→V1 transfers: generation tag that releases the
        /// serialized dispatch slot.
        gen: u64,
    },
    ComputeDone {
        stage: usize,
        id: SegmentId,
        started: f64,
    },
    /// VerificationOutput arriving back at D0.
    OutputArrive {
        id: SegmentId,
        dists: Vec<(u64, TokenDistribution<S>)>,
    },
    /// D0 finishes evaluating a batch of outputs.
    EvalDone {
        round: u32,
        id: Option<SegmentId>,
        dists: Vec<(u64, TokenDistribution<S>)>,
        started: f64,
    },
    /// D0 finishes growing the round's base tree.
    DraftReady { started: f64 },
    /// A queued segment's earliest dispatch time has come.
    DispatchReady,
}

struct QEv<S> {
    t: f64,
    seq_no: u64,
    ev: Ev<S>,
}

impl<S> PartialEq for QEv<S> {
    fn eq(&self, other: &Self) -> bool {
        self.t == other.t && self.seq_no == other.seq_no
    }
}
impl<S> Eq for QEv<S> {}
impl<S> PartialOrd for QEv<S> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<S> Ord for QEv<S> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.t
            .total_cmp(&other.t)
            .then(self.seq_no.cmp(&other.seq_no))
    }
}

/// One verification stage's local state.
struct StageSt {
    kv: KvCacheIndex,
    inbox: VecDeque<SegmentId>,
    computing: Option<SegmentId>,
    busy_until: f64,
}

pub(crate) struct Engine<'a, S: Prob> {
    oracle: &'a SyntheticOracle<S>,
    cost: CostModel,
    p: Params,
    flags: Flags,
    audit: bool,

    queue: BinaryHeap<Reverse<QEv<S>>>,
    next_seq_no: u64,
    now: f64,
    trace: Vec<TraceEvent>,
    finished: bool,

    prompt: Vec<Token>,
    committed: Vec<Token>,

    round: u32,
    epoch: u64,
    next_uid: u64,
    next_ordinal: u32,
    walk_no: u64,

    tree: DraftTree<S>,
    t_base: DraftTree<S>,
    seq: DraftSequence,
    avail: VerificationOutput<S>,
    uid_to_node: BTreeMap<u64, NodeId>,

    segs: BTreeMap<SegmentId, DraftSegment>,
    dispatch_queue: VecDeque<(SegmentId, f64)>,
    /// Generation tag of the transfer currently occupying the D0→V1 link.
    current_transfer: Option<u64>,
    transfer_gen: u64,
    d0_busy_until: f64,
    /// Separate D0 lane for expansion tree growth; it overlaps evaluation
    /// but expansions serialize among themselves.
    expand_busy_until: f64,

    stages: Vec<StageSt>,
    /// Per-link FIFO floor: arrival on a link never precedes the previous
    /// arrival (segments shrink under pruning, so a short transfer could
    /// otherwise overtake a long one). Index = destination stage; the last
    /// slot is the VN→D0 output link.
    link_last: Vec<f64>,
    /// Naive mode: outputs still missing this round, and the buffered
    /// distributions for the single end-of-round evaluation.
    outputs_expected: usize,
    naive_buffer: Vec<(u64, TokenDistribution<S>)>,

    // shadow-tracker counters (node-conservation audit)
    created: usize,
    absorbed: usize,
    pruned: usize,
}

/// Runs one full simulated generation for `strategy`.
pub fn simulate<S: Prob>(
    strategy: StrategyId,
    prompt: &[Token],
    oracle: &SyntheticOracle<S>,
    cost: &CostModel,
    params: &Params,
    audit: bool,
) -> Result<SimOutput> {
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("prompt must be nonempty".into()));
    }
    if params.n < 1 || params.l < 1 || params.l_max < 1 || params.k < 1 || params.d0 < 1 {
        return Err(Error::InvalidArgument(
            "params out of range (n, l, d0, k, l_max must be >= 1)".into(),
        ));
    }
    cost.validate()?;
    let eng = Engine {
        oracle,
        cost: *cost,
        p: *params,
        flags: strategy_flags(strategy),
        audit,
        queue: BinaryHeap::new(),
        next_seq_no: 0,
        now: 0.0,
        trace: Vec::new(),
        finished: false,
        prompt: prompt.to_vec(),
        committed: Vec::new(),
        round: 0,
        epoch: 0,
        next_uid: 0,
        next_ordinal: 0,
        walk_no: 0,
        tree: DraftTree::new(0),
        t_base: DraftTree::new(0),
        seq: DraftSequence::default(),
        avail: VerificationOutput::default(),
        uid_to_node: BTreeMap::new(),
        segs: BTreeMap::new(),
        dispatch_queue: VecDeque::new(),
        current_transfer: None,
        transfer_gen: 0,
        d0_busy_until: 0.0,
        expand_busy_until: 0.0,
        stages: (0..params.n)
            .map(|_| StageSt {
                kv: KvCacheIndex::new(0),
                inbox: VecDeque::new(),
                computing: None,
                busy_until: 0.0,
            })
            .collect(),
        link_last: vec![0.0; params.n as usize + 1],
        outputs_expected: 0,
        naive_buffer: Vec::new(),
        created: 0,
        absorbed: 0,
        pruned: 0,
    };
    eng.run()
}

/// Full FlowSpec strategy (see the baseline wrappers for the others).
pub fn run_flowspec<S: Prob>(
    prompt: &[Token],
    gen_limit: usize,
    oracle: &SyntheticOracle<S>,
    cost: &CostModel,
    params: &Params,
) -> Result<SimOutput> {
    let mut p = *params;
    p.gen_limit = gen_limit;
    simulate(StrategyId::Flowspec, prompt, oracle, cost, &p, false)
}

/// Pipelined prompt prefill timing and events, independent of strategy.
///
/// The prompt is split into ⌈|prompt|/l_max⌉ chunks fed V1→VN in the same
/// serialized staircase the decode loop uses; the last stage's completion
/// of the final chunk sends the last prompt token's distribution to D0,
/// where `x_new` is sampled (greedy at temperature 0). Returns the token,
/// the per-stage cache indexes, the elapsed simulated time, and the
/// time-sorted prefill events.
pub fn chunked_prefill<S: Prob>(
    prompt: &[Token],
    l_max: usize,
    n_stages: usize,
    cost: &CostModel,
    oracle: &SyntheticOracle<S>,
    temperature: f64,
    seed: u64,
) -> Result<(Token, Vec<KvCacheIndex>, f64, Vec<TraceEvent>)> {
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("prompt must be nonempty".into()));
    }
    if l_max < 1 || n_stages < 1 {
        return Err(Error::InvalidArgument(
            "l_max and stage count must be >= 1".into(),
        ));
    }
    let mut events = Vec::new();
    let mut stage_free = vec![0.0f64; n_stages];
    let mut send = 0.0f64;
    for (ci, chunk) in prompt.chunks(l_max).enumerate() {
        let len = chunk.len();
        let seg = format!("p.s{}", ci);
        let mut arrive = send + cost.transfer_s(len);
        let mut next_send = send;
        for s in 0..n_stages {
            for kind in [EventKind::TransferDone, EventKind::SegmentIn] {
                events.push(TraceEvent {
                    t: arrive,
                    kind,
                    stage: s as u32 + 1,
                    seg_id: Some(seg.clone()),
                    n_tokens: Some(len as u64),
                    detail: None,
                });
            }
            let start = arrive.max(stage_free[s]);
            if s == 0 {
                next_send = start;
            }
            let done = start + cost.stage_compute_s(len);
            stage_free[s] = done;
            events.push(TraceEvent {
                t: done,
                kind: EventKind::ComputeDone,
                stage: s as u32 + 1,
                seg_id: Some(seg.clone()),
                n_tokens: Some(len as u64),
                detail: Some(json!({ "start": start, "dur": done - start })),
            });
            arrive = done + cost.transfer_s(len);
        }
        send = next_send;
    }
    // final distribution travels VN → D0, then D0 samples x_new
    let out_arrive = stage_free[n_stages - 1] + cost.transfer_s(1);
    events.push(TraceEvent {
        t: out_arrive,
        kind: EventKind::TransferDone,
        stage: 0,
        seg_id: Some("p.out".into()),
        n_tokens: Some(1),
        detail: None,
    });
    let elapsed = out_arrive + cost.d0_eval_s;
    events.sort_by(|a, b| a.t.total_cmp(&b.t));

    let dist = oracle.base_next(prompt)?;
    let x_new = sample_token(&dist, temperature, mix_seed(seed, 0x7072_6566_696c_6c))?;
    let caches = vec![KvCacheIndex::new(prompt.len() as u64); n_stages];
    Ok((x_new, caches, elapsed, events))
}

fn sample_token<S: Prob>(dist: &TokenDistribution<S>, temperature: f64, seed: u64) -> Result<Token> {
    if temperature == 0.0 {
        return Ok(dist.argmax());
    }
    let shaped = apply_temperature(dist, S::from_f64_lossy(temperature))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(shaped.sample(rng.gen()))
}

impl<'a, S: Prob> Engine<'a, S> {
    fn run(mut self) -> Result<SimOutput> {
        self.prefill()?;
        if !self.finished {
            self.start_round();
        }
        while let Some(Reverse(qe)) = self.queue.pop() {
            if self.finished {
                break;
            }
            debug_assert!(qe.t >= self.now - 1e-12, "time went backwards");
            self.now = qe.t;
            let audit_point = self.handle(qe.ev)?;
            if self.audit && audit_point && !self.finished {
                self.audit_state()?;
            }
        }
        if !self.finished {
            return Err(Error::ContractViolation(
                "simulation stalled with generation unfinished".into(),
            ));
        }
        let metrics = collect_metrics(&self.trace, self.committed.len()).ok();
        Ok(SimOutput {
            committed: self.committed,
            trace: self.trace,
            metrics,
        })
    }

    // ---- plumbing -------------------------------------------------------

    fn schedule(&mut self, t: f64, ev: Ev<S>) {
        let seq_no = self.next_seq_no;
        self.next_seq_no += 1;
        self.queue.push(Reverse(QEv { t, seq_no, ev }));
    }

    fn emit(
        &mut self,
        kind: EventKind,
        stage: u32,
        seg_id: Option<String>,
        n_tokens: Option<u64>,
        detail: Option<serde_json::Value>,
    ) {
        self.trace.push(TraceEvent {
            t: self.now,
            kind,
            stage,
            seg_id,
            n_tokens,
            detail,
        });
    }

    /// Count of committed positions including the current root token.
    fn l_glo(&self) -> u64 {
        (self.prompt.len() + self.committed.len()) as u64
    }

    fn full_context(&self) -> Vec<Token> {
        let mut ctx = self.prompt.clone();
        ctx.extend_from_slice(&self.committed);
        ctx
    }

    /// Pushes one committed token; returns false when the run just ended.
    fn commit_token(&mut self, t: Token) -> bool {
        if self.committed.len() >= self.p.gen_limit {
            self.finish("gen_limit");
            return false;
        }
        self.committed.push(t);
        if self.p.eos() == Some(t) {
            self.finish("eos");
            return false;
        }
        if self.committed.len() >= self.p.gen_limit {
            self.finish("gen_limit");
            return false;
        }
        true
    }

    fn finish(&mut self, reason: &str) {
        if self.finished {
            return;
        }
        self.finished = true;
        let detail = json!({ "committed": self.committed.len(), "reason": reason, "round": self.round });
        self.emit(EventKind::RoundExit, 0, None, None, Some(detail));
    }

    // ---- prefill and round startup --------------------------------------

    fn prefill(&mut self) -> Result<()> {
        let (x0, caches, elapsed, events) = chunked_prefill(
            &self.prompt,
            self.p.l_max,
            self.stages.len(),
            &self.cost,
            self.oracle,
            self.p.temperature,
            self.p.seed,
        )?;
        self.trace.extend(events);
        self.now = elapsed;
        self.d0_busy_until = elapsed;
        for (st, kv) in self.stages.iter_mut().zip(caches) {
            st.kv = kv;
        }
        if self.p.gen_limit == 0 {
            self.finished = true;
            return Ok(());
        }
        self.commit_token(x0);
        Ok(())
    }

    fn start_round(&mut self) {
        self.round += 1;
        let detail = json!({ "l_glo": self.l_glo(), "round": self.round });
        self.emit(EventKind::RoundStart, 0, None, None, Some(detail));
        let started = self.now.max(self.d0_busy_until);
        let done = started + self.cost.draft_grow_s(self.p.d0);
        self.d0_busy_until = done;
        self.schedule(done, Ev::DraftReady { started });
    }

    fn on_draft_ready(&mut self, started: f64) -> Result<()> {
        let dur = self.now - started;
        self.emit(
            EventKind::ComputeDone,
            0,
            None,
            None,
            Some(json!({ "dur": dur, "kind": "draft", "start": started })),
        );
        let ctx = self.full_context();
        let root = *ctx.last().expect("committed root token");
        self.t_base = grow_base_tree(
            self.oracle,
            &ctx[..ctx.len() - 1],
            root,
            self.p.d0,
            self.p.k,
        )?;
        let (tree, seq) = select_top_l_ordered(
            &self.t_base,
            self.p.l,
            self.l_glo() - 1,
            &ctx,
            self.next_uid,
            self.flags.order,
        )?;
        self.next_uid += seq.len() as u64;
        self.created += seq.len();
        self.tree = tree;
        self.seq = seq;
        self.avail.per_token_dist.clear();
        self.uid_to_node = self
            .seq
            .entries
            .iter()
            .map(|e| (e.uid, e.node))
            .collect();

        let segments = segment_sequence(&self.seq, self.p.l_max, self.round, 0)?;
        self.next_ordinal = segments.len() as u32;
        self.outputs_expected = segments.len();
        self.naive_buffer.clear();
        for mut s in segments {
            s.epoch = self.epoch;
            self.dispatch_queue.push_back((s.id, self.now));
            self.segs.insert(s.id, s);
        }
        self.d0_try_dispatch();
        Ok(())
    }

    // ---- dispatch and stage mechanics ------------------------------------

    /// Sends the next queued segment toward V1 when the serialized slot is
    /// free: no transfer in flight and nothing waiting in V1's inbox.
    fn d0_try_dispatch(&mut self) {
        if self.finished {
            return;
        }
        loop {
            let Some(&(id, ready)) = self.dispatch_queue.front() else {
                return;
            };
            if !self.segs.contains_key(&id) {
                self.dispatch_queue.pop_front();
                continue;
            }
            if self.current_transfer.is_some() || !self.stages[0].inbox.is_empty() {
                return;
            }
            if ready > self.now {
                self.schedule(ready, Ev::DispatchReady);
                return;
            }
            self.dispatch_queue.pop_front();
            let n = self.segs[&id].len();
            self.transfer_gen += 1;
            self.current_transfer = Some(self.transfer_gen);
            self.schedule(
                self.now + self.cost.transfer_s(n),
                Ev::SegArrive {
                    stage: 0,
                    id,
                    gen: self.transfer_gen,
                },
            );
            return;
        }
    }

    fn on_seg_arrive(&mut self, stage: usize, id: SegmentId, gen: u64) {
        if gen != 0 && self.current_transfer == Some(gen) {
            self.current_transfer = None;
        }
        if self.finished {
            return;
        }
        let Some(seg) = self.segs.get(&id) else {
            // fully pruned (or the round exited) while in transit
            if stage == 0 {
                self.d0_try_dispatch();
            }
            return;
        };
        let n = seg.len() as u64;
        let sid = id.to_string();
        self.emit(
            EventKind::TransferDone,
            stage as u32 + 1,
            Some(sid.clone()),
            Some(n),
            None,
        );
        self.emit(EventKind::SegmentIn, stage as u32 + 1, Some(sid), Some(n), None);
        self.stages[stage].inbox.push_back(id);
        self.try_start(stage);
    }

    fn try_start(&mut self, stage: usize) {
        if self.stages[stage].computing.is_some() {
            return;
        }
        while let Some(id) = self.stages[stage].inbox.pop_front() {
            let Some(seg) = self.segs.get(&id) else {
                continue; // emptied while waiting
            };
            let n = seg.len();
            let done = self.now + self.cost.stage_compute_s(n);
            self.stages[stage].computing = Some(id);
            self.stages[stage].busy_until = done;
            self.schedule(
                done,
                Ev::ComputeDone {
                    stage,
                    id,
                    started: self.now,
                },
            );
            if stage == 0 {
                // V1 started computing: free the serialized dispatch slot
                self.d0_try_dispatch();
            }
            return;
        }
        if stage == 0 {
            // the inbox drained without starting (segments emptied by a
            // prune while waiting): the dispatch slot is free again
            self.d0_try_dispatch();
        }
    }

    fn on_compute_done(&mut self, stage: usize, id: SegmentId, started: f64) -> Result<()> {
        if self.stages[stage].computing != Some(id) {
            return Ok(()); // cancelled by a round exit
        }
        self.stages[stage].computing = None;
        let snapshot = self
            .segs
            .get(&id)
            .map(|s| (s.len(), s.entries.clone()));
        if let Some((n, entries)) = snapshot {
            let positions: Vec<u64> = entries.iter().map(|e| e.global_pos).collect();
            self.stages[stage].kv.append_positions(&positions)?;
            self.emit(
                EventKind::ComputeDone,
                stage as u32 + 1,
                Some(id.to_string()),
                Some(n as u64),
                Some(json!({ "dur": self.now - started, "start": started })),
            );
            if stage + 1 < self.stages.len() {
                let arrive = (self.now + self.cost.transfer_s(n)).max(self.link_last[stage + 1]);
                self.link_last[stage + 1] = arrive;
                self.schedule(
                    arrive,
                    Ev::SegArrive {
                        stage: stage + 1,
                        id,
                        gen: 0,
                    },
                );
            } else {
                // final stage: evaluate the base model for each entry and
                // ship the verification output back to D0
                let mut dists = Vec::with_capacity(entries.len());
                for e in &entries {
                    dists.push((e.uid, self.oracle.base_next(&e.ctx)?));
                }
                self.segs.remove(&id);
                let out_link = self.stages.len();
                let arrive = (self.now + self.cost.transfer_s(n)).max(self.link_last[out_link]);
                self.link_last[out_link] = arrive;
                self.schedule(arrive, Ev::OutputArrive { id, dists });
            }
        }
        self.try_start(stage);
        Ok(())
    }

    fn on_output_arrive(&mut self, id: SegmentId, dists: Vec<(u64, TokenDistribution<S>)>) {
        if self.finished || id.round != self.round {
            return;
        }
        self.emit(
            EventKind::TransferDone,
            0,
            Some(id.to_string()),
            Some(dists.len() as u64),
            Some(json!({ "kind": "output" })),
        );
        if self.flags.step_eval {
            self.schedule_eval(Some(id), dists);
        } else {
            self.naive_buffer.extend(dists);
            self.outputs_expected -= 1;
            if self.outputs_expected == 0 {
                let all = std::mem::take(&mut self.naive_buffer);
                self.schedule_eval(None, all);
            }
        }
    }

    fn schedule_eval(&mut self, id: Option<SegmentId>, dists: Vec<(u64, TokenDistribution<S>)>) {
        let started = self.now.max(self.d0_busy_until);
        let done = started + self.cost.d0_eval_s;
        self.d0_busy_until = done;
        self.schedule(
            done,
            Ev::EvalDone {
                round: self.round,
                id,
                dists,
                started,
            },
        );
    }

    // ---- the draft stage's evaluation step -------------------------------

    fn on_eval(
        &mut self,
        round: u32,
        id: Option<SegmentId>,
        dists: Vec<(u64, TokenDistribution<S>)>,
        started: f64,
    ) -> Result<()> {
        if round != self.round {
            return Ok(()); // scheduled before a round exit
        }
        let n_in = dists.len() as u64;
        for (uid, d) in dists {
            if let Some(&node) = self.uid_to_node.get(&uid) {
                self.avail.per_token_dist.insert(node, d);
            } // else: pruned while the output was in flight
        }
        let sid = id.map(|i| i.to_string());
        if !self.avail.contains(self.tree.root()) {
            let detail = json!({
                "committed": 0,
                "dur": self.now - started,
                "start": started,
                "starved": true
            });
            self.emit(EventKind::EvalDone, 0, sid, Some(n_in), Some(detail));
            return Ok(());
        }

        let mode = if self.p.temperature == 0.0 {
            AcceptMode::Greedy
        } else {
            AcceptMode::Stochastic {
                temperature: S::from_f64_lossy(self.p.temperature),
            }
        };
        self.walk_no += 1;
        let seed = mix_seed(self.p.seed, 0x7761_6c6b ^ self.walk_no);
        let out = accept_walk(&self.tree, &self.avail, mode, seed)?;
        let detail = json!({
            "committed": out.accepted.len() + 1,
            "continue": out.continue_round,
            "dur": self.now - started,
            "start": started
        });
        self.emit(EventKind::EvalDone, 0, sid, Some(n_in), Some(detail));

        for i in 0..=out.accepted.len() {
            let t = if i < out.accepted.len() {
                out.accepted[i]
            } else {
                out.new_token
            };
            if !self.commit_token(t) {
                return Ok(());
            }
        }

        if self.flags.prune && out.continue_round {
            self.prune_round(&out)?;
            if self.avail.contains(self.tree.root()) {
                // the new root is already verified (possible under
                // stochastic acceptance): walk again without waiting
                self.schedule_eval(None, Vec::new());
            }
        } else {
            self.exit_round(&out)?;
        }
        Ok(())
    }

    fn prune_round(&mut self, out: &VerificationOutcome) -> Result<()> {
        self.epoch += 1;
        let res = compute_prune(&self.tree, &self.seq, out, self.epoch)?;

        let leaving = self.seq.len() - res.seq.len();
        self.absorbed += 1 + out.accepted.len();
        self.pruned += leaving - 1 - out.accepted.len();

        // control application is atomic across all simulated holders;
        // the broadcast's transfer cost is recorded on the trace event
        for st in &mut self.stages {
            st.kv = prune_kv_cache(&st.kv, &res.msg);
        }
        let mut emptied: Vec<SegmentId> = Vec::new();
        for (sid, seg) in self.segs.iter_mut() {
            let l_cache = seg.entries.first().map_or(0, |e| e.global_pos);
            *seg = prune_segment(seg, &res.msg, l_cache);
            if seg.is_empty() {
                emptied.push(*sid);
            }
        }
        for sid in &emptied {
            self.segs.remove(sid);
        }
        self.dispatch_queue.retain(|(sid, _)| self.segs.contains_key(sid));

        let mut avail = VerificationOutput::default();
        for (node, dist) in std::mem::take(&mut self.avail.per_token_dist) {
            if let Some(&nn) = res.node_map.get(&node) {
                avail.per_token_dist.insert(nn, dist);
            }
        }
        self.avail = avail;
        self.tree = res.tree;
        self.seq = res.seq;
        self.uid_to_node = self
            .seq
            .entries
            .iter()
            .map(|e| (e.uid, e.node))
            .collect();

        let msg = &res.msg;
        let detail = json!({
            "arrive_s": self.cost.transfer_bytes_s(
                msg.retain_global.len() as f64 * PRUNE_MSG_BYTES_PER_POS
            ),
            "emptied": emptied.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            "epoch": msg.epoch,
            "new_l_glo": msg.new_l_glo,
            "old_l_glo": msg.old_l_glo,
            "retain": msg.retain_global
        });
        self.emit(
            EventKind::PruneMsg,
            0,
            None,
            Some(msg.retain_global.len() as u64),
            Some(detail),
        );

        if self.flags.expand {
            self.expand_after_prune(&emptied)?;
        }
        self.d0_try_dispatch();
        Ok(())
    }

    fn expand_after_prune(&mut self, emptied: &[SegmentId]) -> Result<()> {
        let ctx = self.full_context();
        let exp_cfg = self.p.expansion();
        let grow = GrowParams {
            l: self.p.l,
            d0: self.p.d0,
            k: self.p.k,
        };

        // context-aware expansion: fresh tree from the advanced context.
        // Growth overlaps evaluation (evaluation of returned outputs takes
        // priority on D0); the new segments still wait for `ready`.
        let started = self.now.max(self.expand_busy_until);
        let dur = self.cost.draft_grow_s(self.p.d0);
        let ready = started + dur;
        self.expand_busy_until = ready;
        let alloc = SeqAlloc {
            next_pos: self.seq.entries[0].global_pos + self.seq.len() as u64,
            next_uid: self.next_uid,
        };
        let ex = context_expand(&self.tree, &self.seq, &ctx, self.oracle, grow, &exp_cfg, alloc)?;
        self.tree = ex.tree;
        self.t_base = ex.base;
        let detail = json!({
            "dur": dur,
            "kind": "context",
            "ready": ready,
            "start": started
        });
        self.emit(
            EventKind::Expand,
            0,
            None,
            Some(ex.appended.len() as u64),
            Some(detail),
        );
        let whole = exp_cfg.l_exp == LExp::All;
        self.enqueue_appended(ex.appended, ready, whole)?;

        // score-aware expansion when a step yielded fully pruned segments
        if !emptied.is_empty() {
            let started = self.now.max(self.expand_busy_until);
            let dur = self.cost.draft_grow_s(exp_cfg.d_se);
            let ready = started + dur;
            self.expand_busy_until = ready;
            let alloc = SeqAlloc {
                next_pos: self.seq.entries[0].global_pos + self.seq.len() as u64,
                next_uid: self.next_uid,
            };
            let s_se = score_expand(
                &mut self.tree,
                &mut self.t_base,
                &self.seq,
                &ctx,
                self.oracle,
                self.p.k,
                &exp_cfg,
                alloc,
            )?;
            let detail = json!({
                "dur": dur,
                "kind": "score",
                "ready": ready,
                "start": started
            });
            self.emit(
                EventKind::Expand,
                0,
                None,
                Some(s_se.len() as u64),
                Some(detail),
            );
            self.enqueue_appended(s_se, ready, false)?;
        }
        Ok(())
    }

    fn enqueue_appended(
        &mut self,
        appended: DraftSequence,
        ready: f64,
        single_segment: bool,
    ) -> Result<()> {
        if appended.is_empty() {
            return Ok(());
        }
        for e in &appended.entries {
            self.uid_to_node.insert(e.uid, e.node);
        }
        self.next_uid += appended.len() as u64;
        self.created += appended.len();
        let chunk = if single_segment {
            appended.len()
        } else {
            self.p.l_max
        };
        let segments = segment_sequence(&appended, chunk, self.round, self.next_ordinal)?;
        self.next_ordinal += segments.len() as u32;
        for mut s in segments {
            s.epoch = self.epoch;
            self.dispatch_queue.push_back((s.id, ready));
            self.segs.insert(s.id, s);
        }
        self.seq.entries.extend(appended.entries);
        Ok(())
    }

    fn exit_round(&mut self, out: &VerificationOutcome) -> Result<()> {
        let root_entry = self.seq.entries.first().ok_or_else(|| {
            Error::ContractViolation("round exit with empty draft sequence".into())
        })?;
        let old_l_glo = root_entry.global_pos + 1;
        let mut pos_of: BTreeMap<NodeId, u64> = BTreeMap::new();
        for e in &self.seq.entries {
            pos_of.insert(e.node, e.global_pos);
        }
        let mut retain = Vec::new();
        let mut cur = self.tree.root();
        for &t in &out.accepted {
            cur = self.tree.child_with_token(cur, t).ok_or_else(|| {
                Error::ContractViolation("accepted token not present under its parent".into())
            })?;
            retain.push(pos_of[&cur]);
        }
        retain.sort_unstable();
        self.epoch += 1;
        let msg = PruneMessage {
            retain_global: retain,
            old_l_glo,
            new_l_glo: old_l_glo + out.accepted.len() as u64,
            epoch: self.epoch,
        };

        self.absorbed += 1 + out.accepted.len();
        self.pruned += self.seq.len() - 1 - out.accepted.len();

        // instant drop of all in-flight work; caches keep context plus the
        // freshly accepted block
        for st in &mut self.stages {
            st.kv = prune_kv_cache(&st.kv, &msg);
            st.inbox.clear();
            st.computing = None;
            st.busy_until = self.now;
        }
        self.segs.clear();
        self.dispatch_queue.clear();
        self.current_transfer = None;
        self.naive_buffer.clear();
        self.outputs_expected = 0;
        self.avail.per_token_dist.clear();
        self.uid_to_node.clear();
        self.seq = DraftSequence::default();
        self.tree = DraftTree::new(0);
        self.t_base = DraftTree::new(0);

        if self.flags.prune {
            let detail = json!({
                "arrive_s": self.cost.transfer_bytes_s(
                    msg.retain_global.len() as f64 * PRUNE_MSG_BYTES_PER_POS
                ),
                "epoch": msg.epoch,
                "exit": true,
                "new_l_glo": msg.new_l_glo,
                "old_l_glo": msg.old_l_glo,
                "retain": msg.retain_global
            });
            self.emit(
                EventKind::PruneMsg,
                0,
                None,
                Some(msg.retain_global.len() as u64),
                Some(detail),
            );
        }
        let detail = json!({
            "committed": self.committed.len(),
            "reason": "condition",
            "round": self.round
        });
        self.emit(EventKind::RoundExit, 0, None, None, Some(detail));
        self.start_round();
        Ok(())
    }

    fn handle(&mut self, ev: Ev<S>) -> Result<bool> {
        match ev {
            Ev::SegArrive { stage, id, gen } => {
                self.on_seg_arrive(stage, id, gen);
                Ok(false)
            }
            Ev::ComputeDone { stage, id, started } => {
                self.on_compute_done(stage, id, started)?;
                Ok(false)
            }
            Ev::OutputArrive { id, dists } => {
                self.on_output_arrive(id, dists);
                Ok(false)
            }
            Ev::EvalDone {
                round,
                id,
                dists,
                started,
            } => {
                self.on_eval(round, id, dists, started)?;
                Ok(true)
            }
            Ev::DraftReady { started } => {
                self.on_draft_ready(started)?;
                Ok(true)
            }
            Ev::DispatchReady => {
                self.d0_try_dispatch();
                Ok(false)
            }
        }
    }

    // ---- shadow-tracker audit --------------------------------------------

    /// Recomputes the global draft-position bookkeeping from scratch and
    /// checks it against every stage-local copy.
    fn audit_state(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::ContractViolation(format!("audit: {}", msg)));

        if self.seq.len() != self.tree.len() && !self.seq.is_empty() {
            return fail(format!(
                "sequence has {} entries but tree has {} nodes",
                self.seq.len(),
                self.tree.len()
            ));
        }
        let live: BTreeSet<u64> = self.seq.entries.iter().map(|e| e.global_pos).collect();
        if live.len() != self.seq.len() {
            return fail("duplicate global positions in live sequence".into());
        }

        let mut union: BTreeSet<u64> = BTreeSet::new();
        for (i, st) in self.stages.iter().enumerate() {
            st.kv.validate()?;
            if !self.seq.is_empty() && st.kv.context_len != self.l_glo() - 1 {
                return fail(format!(
                    "stage {} context_len {} != l_glo-1 {}",
                    i + 1,
                    st.kv.context_len,
                    self.l_glo() - 1
                ));
            }
            union.extend(st.kv.draft_entries.iter().copied());
        }
        for seg in self.segs.values() {
            union.extend(seg.entries.iter().map(|e| e.global_pos));
        }
        if union != live {
            return fail(format!(
                "position union mismatch: {} tracked vs {} live",
                union.len(),
                live.len()
            ));
        }

        if self.created != self.absorbed + self.pruned + self.seq.len() {
            return fail(format!(
                "node conservation: created {} != absorbed {} + pruned {} + live {}",
                self.created,
                self.absorbed,
                self.pruned,
                self.seq.len()
            ));
        }
        Ok(())
    }
}
