use serde::{Deserialize, Serialize};

use crate::wire::Admission;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum EventKind {
    Join {
        consumer: u64,
        admitted: Admission,
        epoch: u32,
        progress: u64,
    },
    Rejected {
        consumer: u64,
        protocol_version: u16,
    },
    Evict {
        consumer: u64,
        reason: String,
    },
    Bye {
        consumer: u64,
    },
    HaltStart {
        consumer: u64,
        progress: u64,
    },
    HaltEnd {
        consumer: u64,
    },
    EpochStart {
        epoch: u32,
    },
    EpochEnd {
        epoch: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub t_unix_ms: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// `(t_unix_ms, value)` sample.
pub type Sample = (u64, u64);

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnouncedBatch {
    pub epoch: u32,
    pub batch_index: u64,
    pub checksum: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub pid: u32,
    pub announced: u64,
    pub acks: u64,
    pub consumers_served: u64,
    pub evictions: u64,
    pub peak_live_segments: u64,
    pub peak_live_in_window: u64,
    pub peak_live_outside_window: u64,
    pub end_live_segments: u64,
    pub payload_bytes_written: u64,
    pub epochs_completed: u32,
    pub epoch_len: u64,
    pub buffer_depth: u16,
    pub rubberband_window: u64,
    pub pipeline_calls: u64,
    pub cpu_seconds: f64,
    pub wall_seconds: f64,
    pub max_drift: u64,
    pub live_segments: Vec<Sample>,
    pub drift: Vec<Sample>,
    pub events: Vec<EventRecord>,
    pub announced_batches: Vec<AnnouncedBatch>,
}

impl RunReport {
    pub fn evicted(&self) -> impl Iterator<Item = (u64, u64, &str)> + '_ {
        self.events.iter().filter_map(|e| match &e.kind {
            EventKind::Evict { consumer, reason } => Some((*consumer, e.t_unix_ms, reason.as_str())),
            _ => None,
        })
    }

    pub fn joins(&self) -> impl Iterator<Item = (u64, Admission, u32, u64)> + '_ {
        self.events.iter().filter_map(|e| match &e.kind {
            EventKind::Join {
                consumer,
                admitted,
                epoch,
                progress,
            } => Some((*consumer, *admitted, *epoch, *progress)),
            _ => None,
        })
    }
}
