use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Download,
    Upload,
}

/// One line of the event-log JSONL.
///
/// `step` is the snapshot's server step for downloads and the step the update
/// is buffered for on uploads. `flushed` is present on uploads only and marks
/// the upload that filled the buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub time: f64,
    pub seq: u64,
    pub kind: TraceKind,
    pub client: usize,
    pub step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flushed: Option<bool>,
}

impl TraceEntry {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace entries always serialize")
    }
}

pub trait EventSink {
    fn record(&mut self, entry: &TraceEntry) -> Result<()>;
}

/// Discards everything.
pub struct NullSink;

impl EventSink for NullSink {
    fn record(&mut self, _entry: &TraceEntry) -> Result<()> {
        Ok(())
    }
}

impl EventSink for Vec<TraceEntry> {
    fn record(&mut self, entry: &TraceEntry) -> Result<()> {
        self.push(entry.clone());
        Ok(())
    }
}

/// Writes one JSON object per line.
pub struct JsonlSink<W: Write> {
    out: W,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(out: W) -> Self {
        JsonlSink { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> EventSink for JsonlSink<W> {
    fn record(&mut self, entry: &TraceEntry) -> Result<()> {
        writeln!(self.out, "{}", entry.to_json_line())?;
        Ok(())
    }
}
