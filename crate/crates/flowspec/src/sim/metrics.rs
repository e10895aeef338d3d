//! Simulated-time metrics, computed from the event trace alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{EventKind, TraceEvent};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Committed tokens per simulated second of decode time (prefill
    /// excluded from the denominator).
    pub xi: f64,
    /// Total simulated run time, prefill included.
    pub latency_s: f64,
    pub rounds: u64,
    /// Draft-stage evaluation steps (EVAL_DONE events).
    pub steps: u64,
    /// Mean tokens committed per committing evaluation.
    pub mean_accept_len: f64,
    /// Busy fraction of the decode window per stage; index 0 is the draft
    /// stage, 1..=N the verification stages.
    pub stage_busy_fraction: Vec<f64>,
}

fn detail_f64(ev: &TraceEvent, key: &str) -> Option<f64> {
    ev.detail.as_ref()?.get(key)?.as_f64()
}

/// Derives all run metrics from the trace. `committed` is the number of
/// tokens the run committed (trace events carry per-step commit counts,
/// but the prefill token is committed without an evaluation event).
pub fn collect_metrics(trace: &[TraceEvent], committed: usize) -> Result<Metrics> {
    let latency_s = trace.iter().map(|e| e.t).fold(0.0, f64::max);
    let decode_start = trace
        .iter()
        .find(|e| e.kind == EventKind::RoundStart)
        .map(|e| e.t)
        .ok_or_else(|| Error::Metrics("trace contains no decode rounds".into()))?;
    let decode_time = latency_s - decode_start;
    if decode_time <= 0.0 {
        return Err(Error::Metrics("zero decode time".into()));
    }

    let mut rounds = 0u64;
    let mut steps = 0u64;
    let mut commit_sum = 0.0f64;
    let mut commit_events = 0u64;
    let mut n_stages = 0u32;
    for ev in trace {
        n_stages = n_stages.max(ev.stage);
        match ev.kind {
            EventKind::RoundStart => rounds += 1,
            EventKind::EvalDone => {
                steps += 1;
                if let Some(c) = detail_f64(ev, "committed") {
                    if c > 0.0 {
                        commit_sum += c;
                        commit_events += 1;
                    }
                }
            }
            _ => {}
        }
    }

    let mut busy = vec![0.0f64; n_stages as usize + 1];
    for ev in trace {
        if ev.t <= decode_start {
            continue; // prefill
        }
        let counts = match ev.kind {
            EventKind::ComputeDone | EventKind::EvalDone | EventKind::Expand => true,
            _ => false,
        };
        if counts {
            if let Some(dur) = detail_f64(ev, "dur") {
                busy[ev.stage as usize] += dur;
            }
        }
    }
    let stage_busy_fraction = busy.into_iter().map(|b| b / decode_time).collect();

    Ok(Metrics {
        xi: committed as f64 / decode_time,
        latency_s,
        rounds,
        steps,
        mean_accept_len: if commit_events > 0 {
            commit_sum / commit_events as f64
        } else {
            0.0
        },
        stage_busy_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn ev(t: f64, kind: EventKind, stage: u32, detail: Option<serde_json::Value>) -> TraceEvent {
        TraceEvent {
            t,
            kind,
            stage,
            seg_id: None,
            n_tokens: None,
            detail,
        }
    }

    #[test]
    fn xi_is_plain_division() {
        let trace = vec![
            ev(0.5, EventKind::RoundStart, 0, None),
            ev(13.0, EventKind::RoundExit, 0, None),
        ];
        let m = collect_metrics(&trace, 100).unwrap();
        assert!((m.xi - 8.0).abs() < 1e-12);
        assert!((m.latency_s - 13.0).abs() < 1e-12);
        assert_eq!(m.rounds, 1);
    }

    #[test]
    fn hand_built_single_round() {
        // prefill compute at t<=1.0, decode from 1.0 to 3.0
        let trace = vec![
            ev(0.8, EventKind::ComputeDone, 1, Some(json!({"start": 0.3, "dur": 0.5}))),
            ev(1.0, EventKind::RoundStart, 0, None),
            ev(
                1.4,
                EventKind::ComputeDone,
                0,
                Some(json!({"start": 1.0, "dur": 0.4})),
            ),
            ev(
                2.0,
                EventKind::ComputeDone,
                1,
                Some(json!({"start": 1.5, "dur": 0.5})),
            ),
            ev(
                2.4,
                EventKind::EvalDone,
                0,
                Some(json!({"start": 2.3, "dur": 0.1, "committed": 3})),
            ),
            ev(
                2.5,
                EventKind::EvalDone,
                0,
                Some(json!({"start": 2.4, "dur": 0.1, "committed": 0})),
            ),
            ev(3.0, EventKind::RoundExit, 0, None),
        ];
        let m = collect_metrics(&trace, 4).unwrap();
        assert!((m.xi - 4.0 / 2.0).abs() < 1e-12);
        assert_eq!(m.rounds, 1);
        assert_eq!(m.steps, 2);
        assert!((m.mean_accept_len - 3.0).abs() < 1e-12);
        // stage 0 busy: 0.4 + 0.1 + 0.1; stage 1 busy: 0.5 (prefill excluded)
        assert!((m.stage_busy_fraction[0] - 0.6 / 2.0).abs() < 1e-12);
        assert!((m.stage_busy_fraction[1] - 0.5 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn no_rounds_is_error() {
        let trace = vec![ev(0.8, EventKind::ComputeDone, 1, None)];
        assert!(collect_metrics(&trace, 0).is_err());
    }

    #[test]
    fn zero_decode_time_is_error() {
        let trace = vec![ev(1.0, EventKind::RoundStart, 0, None)];
        assert!(collect_metrics(&trace, 1).is_err());
    }
}
