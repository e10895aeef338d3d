//! JSON-lines run traces: schema `flowspec-trace/1`.
//!
//! A trace file starts with a header line carrying the schema version and
//! the full run configuration, followed by one event per line with the
//! fields `{t, kind, stage, seg_id, n_tokens, detail}` in that order.
//! Stage 0 is the draft stage, stages 1..=N are the verification stages.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::sim::RunResult;

pub const TRACE_SCHEMA: &str = "flowspec-trace/1";

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    SegmentIn,
    ComputeDone,
    TransferDone,
    PruneMsg,
    EvalDone,
    RoundStart,
    RoundExit,
    Expand,
}

/// One simulator event. `detail` holds kind-specific fields; its keys are
/// emitted in sorted order so traces are byte-stable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    /// Simulated seconds.
    pub t: f64,
    pub kind: EventKind,
    pub stage: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seg_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n_tokens: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub detail: Option<serde_json::Value>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema: String,
    pub config: RunConfig,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes the result's trace as JSON lines with a schema header.
pub fn emit_trace(result: &RunResult, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let header = TraceHeader {
        schema: TRACE_SCHEMA.to_string(),
        config: result.config.clone(),
    };
    let line = serde_json::to_string(&header)
        .map_err(|e| Error::InvalidArgument(format!("trace header serialization: {}", e)))?;
    writeln!(w, "{}", line).map_err(|e| io_err(path, e))?;
    for ev in &result.trace {
        let line = serde_json::to_string(ev)
            .map_err(|e| Error::InvalidArgument(format!("trace event serialization: {}", e)))?;
        writeln!(w, "{}", line).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads a trace file back into its header and events.
pub fn read_trace(path: &Path) -> Result<(TraceHeader, Vec<TraceEvent>)> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut lines = std::io::BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::InvalidArgument(format!("{}: empty trace file", path.display())))?
        .map_err(|e| io_err(path, e))?;
    let header: TraceHeader = serde_json::from_str(&first)
        .map_err(|e| Error::InvalidArgument(format!("malformed trace header: {}", e)))?;
    if header.schema != TRACE_SCHEMA {
        return Err(Error::InvalidArgument(format!(
            "unsupported trace schema \"{}\"",
            header.schema
        )));
    }
    let mut events = Vec::new();
    for line in lines {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: TraceEvent = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidArgument(format!("malformed trace event: {}", e)))?;
        events.push(ev);
    }
    Ok((header, events))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn event_line_key_order() {
        let ev = TraceEvent {
            t: 1.5,
            kind: EventKind::SegmentIn,
            stage: 2,
            seg_id: Some("r1.s0".into()),
            n_tokens: Some(16),
            detail: None,
        };
        let line = serde_json::to_string(&ev).unwrap();
        assert_eq!(
            line,
            "{\"t\":1.5,\"kind\":\"SEGMENT_IN\",\"stage\":2,\"seg_id\":\"r1.s0\",\"n_tokens\":16}"
        );
    }

    #[test]
    fn event_roundtrip_exact() {
        let ev = TraceEvent {
            t: 0.1 + 0.2, // not exactly representable sum
            kind: EventKind::ComputeDone,
            stage: 1,
            seg_id: None,
            n_tokens: None,
            detail: Some(serde_json::json!({"dur": 0.036000000000000004, "start": 1e-3})),
        };
        let line = serde_json::to_string(&ev).unwrap();
        let back: TraceEvent = serde_json::from_str(&line).unwrap();
        assert_eq!(ev, back);
    }
}
