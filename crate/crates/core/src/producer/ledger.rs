use std::collections::{BTreeMap, BTreeSet};

use crate::payload::{BatchDescriptor, SharedPayload};

/// Outcome of the flow-control check made before announcing another batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Permit,
    Block,
}

#[derive(Debug)]
pub struct BatchLedgerEntry {
    pub descriptor: BatchDescriptor,
    pub payload: SharedPayload,
    pub pending_acks: BTreeSet<u64>,
    pub retained_for_rubberband: bool,
}

impl BatchLedgerEntry {
    pub fn releasable(&self) -> bool {
        self.pending_acks.is_empty() && !self.retained_for_rubberband
    }
}

/// Announced batches that have not been released yet, keyed by run-wide
/// sequence number (`epoch * epoch_len + batch_index`).
#[derive(Debug, Default)]
pub struct Ledger {
    entries: BTreeMap<u64, BatchLedgerEntry>,
}

impl Ledger {
    pub fn insert(&mut self, seq: u64, entry: BatchLedgerEntry) {
        self.entries.insert(seq, entry);
    }

    pub fn get(&self, seq: u64) -> Option<&BatchLedgerEntry> {
        self.entries.get(&seq)
    }

    pub fn get_mut(&mut self, seq: u64) -> Option<&mut BatchLedgerEntry> {
        self.entries.get_mut(&seq)
    }

    pub fn remove(&mut self, seq: u64) -> Option<BatchLedgerEntry> {
        self.entries.remove(&seq)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = (&u64, &BatchLedgerEntry)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&u64, &mut BatchLedgerEntry)> {
        self.entries.iter_mut()
    }

    /// Announced batches still waiting on at least one acknowledgment.
    /// Entries kept only for rubberband replay do not count.
    pub fn outstanding(&self) -> usize {
        self.entries.values().filter(|e| !e.pending_acks.is_empty()).count()
    }

    pub fn outstanding_for(&self, consumer: u64) -> usize {
        self.entries
            .values()
            .filter(|e| e.pending_acks.contains(&consumer))
            .count()
    }

    /// Sequence numbers of entries that can be released now.
    pub fn releasable(&self) -> Vec<u64> {
        self.entries
            .iter()
            .filter(|(_, e)| e.releasable())
            .map(|(s, _)| *s)
            .collect()
    }
}

/// Permits another announcement only while fewer than `buffer_depth` batches
/// are awaiting acknowledgment.
pub fn flow_control_gate(ledger: &Ledger, buffer_depth: u16) -> Gate {
    if ledger.outstanding() < buffer_depth as usize {
        Gate::Permit
    } else {
        Gate::Block
    }
}
