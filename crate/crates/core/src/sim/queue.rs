use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::protocol::ClientUpdate;

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    DownloadComplete { client: usize },
    UploadComplete { client: usize, update: ClientUpdate },
}

impl EventKind {
    pub fn client(&self) -> usize {
        match self {
            EventKind::DownloadComplete { client } | EventKind::UploadComplete { client, .. } => {
                *client
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent {
    pub fire_time: f64,
    pub sequence_no: u64,
    pub kind: EventKind,
}

/// Heap entry ordered so that the max-heap pops the smallest
/// `(fire_time, sequence_no)`.
struct Pending(SimEvent);

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Pending {}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .fire_time
            .total_cmp(&self.0.fire_time)
            .then_with(|| other.0.sequence_no.cmp(&self.0.sequence_no))
    }
}

/// Time-ordered event queue; ties break by creation order.
#[derive(Default)]
pub struct EventQueue {
    heap: BinaryHeap<Pending>,
    next_seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Schedule `kind` at `fire_time` and return its sequence number.
    pub fn push(&mut self, fire_time: f64, kind: EventKind) -> Result<u64> {
        if !(fire_time >= 0.0 && fire_time.is_finite()) {
            return Err(Error::contract(format!(
                "event scheduled at invalid time {fire_time}"
            )));
        }
        let sequence_no = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Pending(SimEvent {
            fire_time,
            sequence_no,
            kind,
        }));
        Ok(sequence_no)
    }

    pub fn pop(&mut self) -> Option<SimEvent> {
        self.heap.pop().map(|p| p.0)
    }

    /// Pop the minimum event; an empty queue is a contract error.
    pub fn next_event(&mut self) -> Result<SimEvent> {
        self.pop()
            .ok_or_else(|| Error::contract("next_event on an empty queue"))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}
