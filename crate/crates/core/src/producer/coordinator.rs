//! Single-writer producer state: consumer registry, batch ledger, epochs.
//!
//! The coordinator does no I/O of its own besides creating and unlinking
//! segments. Every message it wants sent is queued as an [`Outbound`] and the
//! caller drains them with [`Coordinator::take_outbox`]. Time is passed in as
//! monotonic milliseconds so tests can drive it directly.

use std::collections::{BTreeMap, BTreeSet};

use crate::metrics::unix_millis;
use crate::payload::{PayloadError, SegmentStore};
use crate::pipeline::PreparedBatch;
use crate::wire::{Admission, ControlMessage, PROTOCOL_VERSION};

use super::ledger::{flow_control_gate, BatchLedgerEntry, Gate, Ledger};
use super::report::{AnnouncedBatch, EventKind, EventRecord, RunReport};
use super::ProducerConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outbound {
    /// Write on the subscription connections of these consumers.
    Subscribers(Vec<u64>, ControlMessage),
    /// Write on every subscription connection.
    AllSubscribers(ControlMessage),
    /// Write on this consumer's aggregation connection.
    Reply(u64, ControlMessage),
    /// Close both of this consumer's connections.
    Disconnect(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Admitted for a future epoch; receives nothing but epoch markers.
    Waiting { epoch: u32 },
    /// Rubberband joiner being replayed the retained prefix `0..target`.
    CatchingUp { replay_next: u64, target: u64 },
    Streaming,
}

#[derive(Debug, Clone)]
pub struct ConsumerRecord {
    pub consumer_id: u64,
    pub last_heartbeat: u64,
    pub join_epoch: u32,
    pub phase: Phase,
    /// Highest contiguously acknowledged run-wide sequence number, or -1.
    pub ack_cursor: i64,
}

impl ConsumerRecord {
    pub fn admitted(&self) -> bool {
        !matches!(self.phase, Phase::Waiting { .. })
    }
}

/// Number of leading batches of each epoch retained for late joiners:
/// `ceil(fraction * epoch_len)`.
pub fn rubberband_window(fraction: f64, epoch_len: u64) -> u64 {
    let x = fraction * epoch_len as f64;
    let r = x.round();
    // Products such as 0.02 * 1000 land a few ulps off an integer.
    if (x - r).abs() < 1e-9 {
        r as u64
    } else {
        x.ceil() as u64
    }
}

/// Admission for a consumer joining after `progress` batches of the current
/// epoch were announced. Rubberband applies strictly below the window.
pub fn admission_for(progress: u64, window: u64) -> Admission {
    if progress == 0 {
        Admission::Immediate
    } else if progress < window {
        Admission::Rubberband
    } else {
        Admission::WaitForNextEpoch
    }
}

#[derive(Debug)]
pub struct Coordinator {
    config: ProducerConfig,
    epoch_len: u64,
    window: u64,
    store: SegmentStore,
    registry: BTreeMap<u64, ConsumerRecord>,
    ledger: Ledger,
    epoch: u32,
    progress: u64,
    epoch_started: bool,
    ever_started: bool,
    outbox: Vec<Outbound>,
    served: BTreeSet<u64>,
    report: RunReport,
}

impl Coordinator {
    pub fn new(config: ProducerConfig, epoch_len: u64, store: SegmentStore) -> Self {
        let window = rubberband_window(config.rubberband_fraction, epoch_len);
        let report = RunReport {
            epoch_len,
            buffer_depth: config.buffer_depth,
            rubberband_window: window,
            ..RunReport::default()
        };
        Coordinator {
            config,
            epoch_len,
            window,
            store,
            registry: BTreeMap::new(),
            ledger: Ledger::default(),
            epoch: 0,
            progress: 0,
            epoch_started: false,
            ever_started: false,
            outbox: Vec::new(),
            served: BTreeSet::new(),
            report,
        }
    }

    pub fn take_outbox(&mut self) -> Vec<Outbound> {
        std::mem::take(&mut self.outbox)
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn progress(&self) -> u64 {
        self.progress
    }

    pub fn window(&self) -> u64 {
        self.window
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn consumer(&self, id: u64) -> Option<&ConsumerRecord> {
        self.registry.get(&id)
    }

    pub fn consumers(&self) -> impl Iterator<Item = &ConsumerRecord> {
        self.registry.values()
    }

    pub fn report(&self) -> &RunReport {
        &self.report
    }

    fn seq(&self, epoch: u32, batch_index: u64) -> u64 {
        epoch as u64 * self.epoch_len + batch_index
    }

    fn event(&mut self, kind: EventKind) {
        log::debug!("{kind:?}");
        self.report.events.push(EventRecord {
            t_unix_ms: unix_millis(),
            kind,
        });
    }

    pub fn all_announced(&self) -> bool {
        self.epoch >= self.config.epoch_count
    }

    /// Every epoch announced and every batch released.
    pub fn finished(&self) -> bool {
        self.all_announced() && self.ledger.is_empty()
    }

    fn halted(&self) -> bool {
        self.registry
            .values()
            .any(|c| matches!(c.phase, Phase::CatchingUp { .. }))
    }

    fn window_open(&self) -> bool {
        (self.epoch_started && self.progress < self.window) || self.halted()
    }

    /// The pipeline should be preparing batches: someone is connected and
    /// epochs remain.
    pub fn wants_pipeline(&self) -> bool {
        !self.all_announced() && self.ready_to_start()
    }

    fn ready_to_start(&self) -> bool {
        if self.registry.is_empty() {
            return false;
        }
        self.ever_started || self.registry.len() as u32 >= self.config.await_consumers.max(1)
    }

    pub fn gate(&self) -> Gate {
        flow_control_gate(&self.ledger, self.config.buffer_depth)
    }

    /// Whether the next prepared batch may be announced now.
    pub fn can_announce(&self) -> bool {
        self.wants_pipeline() && !self.halted() && self.gate() == Gate::Permit
    }

    /// Registers a consumer whose subscription and aggregation connections are
    /// both established. Returns `None` when the join was rejected.
    pub fn on_join(&mut self, consumer_id: u64, protocol_version: u16, now_ms: u64) -> Option<Admission> {
        if protocol_version != PROTOCOL_VERSION {
            self.event(EventKind::Rejected {
                consumer: consumer_id,
                protocol_version,
            });
            self.outbox.push(Outbound::Disconnect(consumer_id));
            return None;
        }
        if self.registry.contains_key(&consumer_id) {
            // Reconnect under the same identity replaces the old session.
            self.remove_consumer(consumer_id);
        }
        let admission = if self.all_announced() {
            Admission::WaitForNextEpoch
        } else {
            admission_for(self.progress, self.window)
        };
        let seq0 = self.seq(self.epoch, 0) as i64;
        let (phase, welcome_epoch) = match admission {
            Admission::Immediate => (Phase::Streaming, self.epoch),
            Admission::Rubberband => (
                Phase::CatchingUp {
                    replay_next: 0,
                    target: self.progress,
                },
                self.epoch,
            ),
            Admission::WaitForNextEpoch => {
                let next = if self.all_announced() { self.epoch } else { self.epoch + 1 };
                (Phase::Waiting { epoch: next }, next)
            }
        };
        self.registry.insert(
            consumer_id,
            ConsumerRecord {
                consumer_id,
                last_heartbeat: now_ms,
                join_epoch: welcome_epoch,
                phase,
                ack_cursor: seq0 - 1,
            },
        );
        if admission != Admission::WaitForNextEpoch {
            self.served.insert(consumer_id);
        }
        self.event(EventKind::Join {
            consumer: consumer_id,
            admitted: admission,
            epoch: self.epoch,
            progress: self.progress,
        });
        self.outbox.push(Outbound::Reply(
            consumer_id,
            ControlMessage::Welcome {
                consumer_id,
                epoch: welcome_epoch,
                epoch_len: self.epoch_len,
                next_batch_index: 0,
                buffer_depth: self.config.buffer_depth,
                admitted: admission,
            },
        ));
        if admission == Admission::Rubberband {
            self.event(EventKind::HaltStart {
                consumer: consumer_id,
                progress: self.progress,
            });
            self.pump_replay(consumer_id);
        }
        self.sample_drift();
        Some(admission)
    }

    /// Sends the next retained batches to a catching-up consumer, keeping at
    /// most `buffer_depth` of them unacknowledged.
    fn pump_replay(&mut self, id: u64) {
        let depth = self.config.buffer_depth as usize;
        loop {
            let Some(rec) = self.registry.get(&id) else { return };
            let Phase::CatchingUp { replay_next, target } = rec.phase else { return };
            if replay_next >= target || self.ledger.outstanding_for(id) >= depth {
                return;
            }
            // Entries below the target are retained, so they are still present.
            let seq = self.seq(self.epoch, replay_next);
            let Some(entry) = self.ledger.get_mut(seq) else {
                log::error!("retained batch {replay_next} missing during replay");
                return;
            };
            entry.pending_acks.insert(id);
            let msg = ControlMessage::Announce(entry.descriptor.to_announce());
            self.outbox.push(Outbound::Subscribers(vec![id], msg));
            if let Some(rec) = self.registry.get_mut(&id) {
                rec.phase = Phase::CatchingUp {
                    replay_next: replay_next + 1,
                    target,
                };
            }
        }
    }

    pub fn on_heartbeat(&mut self, consumer_id: u64, now_ms: u64) {
        match self.registry.get_mut(&consumer_id) {
            Some(rec) => rec.last_heartbeat = rec.last_heartbeat.max(now_ms),
            None => log::debug!("heartbeat from unknown consumer {consumer_id}"),
        }
    }

    /// Records an acknowledgment and releases every batch that no longer has
    /// anyone to wait for. Returns the released batch indices.
    pub fn on_ack(&mut self, consumer_id: u64, epoch: u32, batch_index: u64) -> Vec<u64> {
        if !self.registry.get(&consumer_id).is_some_and(|c| c.admitted()) {
            log::debug!("ack from unknown or unadmitted consumer {consumer_id}");
            return Vec::new();
        }
        if batch_index >= self.epoch_len {
            log::debug!("ack for out-of-range batch {batch_index}");
            return Vec::new();
        }
        let seq = self.seq(epoch, batch_index);
        let Some(entry) = self.ledger.get_mut(seq) else {
            log::debug!("ack from {consumer_id} for unknown batch {epoch}/{batch_index}");
            return Vec::new();
        };
        if !entry.pending_acks.remove(&consumer_id) {
            log::debug!("duplicate ack from {consumer_id} for {epoch}/{batch_index}");
            return Vec::new();
        }
        self.report.acks += 1;
        let current = self.seq(self.epoch, 0) as i64;
        let rec = self.registry.get_mut(&consumer_id).expect("checked above");
        if seq as i64 == rec.ack_cursor + 1 {
            rec.ack_cursor = seq as i64;
        }
        if let Phase::CatchingUp { target, .. } = rec.phase {
            if rec.ack_cursor + 1 >= current + target as i64 {
                rec.phase = Phase::Streaming;
                self.event(EventKind::HaltEnd {
                    consumer: consumer_id,
                });
            } else {
                self.pump_replay(consumer_id);
            }
        }
        let released = self.release_ready();
        self.sweep_retention();
        self.sample_drift();
        released
    }

    pub fn on_bye(&mut self, consumer_id: u64) {
        if self.registry.contains_key(&consumer_id) {
            self.event(EventKind::Bye {
                consumer: consumer_id,
            });
            self.remove_consumer(consumer_id);
            self.outbox.push(Outbound::Disconnect(consumer_id));
        }
    }

    /// Evicts a consumer whose connection failed.
    pub fn on_disconnect(&mut self, consumer_id: u64) {
        if self.registry.contains_key(&consumer_id) {
            self.evict(consumer_id, "disconnected");
        }
    }

    /// Evicts consumers silent for longer than the heartbeat timeout.
    pub fn evict_stale(&mut self, now_ms: u64) -> Vec<u64> {
        let timeout = self.config.heartbeat_timeout_ms;
        let stale: Vec<u64> = self
            .registry
            .values()
            .filter(|c| now_ms.saturating_sub(c.last_heartbeat) > timeout)
            .map(|c| c.consumer_id)
            .collect();
        for &id in &stale {
            self.evict(id, "heartbeat timeout");
        }
        stale
    }

    fn evict(&mut self, id: u64, reason: &str) {
        self.report.evictions += 1;
        self.event(EventKind::Evict {
            consumer: id,
            reason: reason.to_owned(),
        });
        self.remove_consumer(id);
        self.outbox.push(Outbound::Disconnect(id));
    }

    fn remove_consumer(&mut self, id: u64) {
        let Some(rec) = self.registry.remove(&id) else { return };
        if matches!(rec.phase, Phase::CatchingUp { .. }) {
            self.event(EventKind::HaltEnd { consumer: id });
        }
        for (_, e) in self.ledger.iter_mut() {
            e.pending_acks.remove(&id);
        }
        self.release_ready();
        self.sweep_retention();
        self.sample_drift();
    }

    fn release_ready(&mut self) -> Vec<u64> {
        let ready = self.ledger.releasable();
        let mut released = Vec::with_capacity(ready.len());
        for seq in ready {
            if let Some(mut e) = self.ledger.remove(seq) {
                self.store.release_segment(&mut e.payload);
                released.push(e.descriptor.batch_index);
            }
        }
        if !released.is_empty() {
            self.sample_live(self.window_open());
        }
        released
    }

    /// Drops rubberband retention once the window has passed (or the epoch
    /// moved on) and releases entries that were only being kept for it.
    fn sweep_retention(&mut self) {
        let open = self.window_open();
        let epoch = self.epoch;
        let mut changed = false;
        for (_, e) in self.ledger.iter_mut() {
            if e.retained_for_rubberband && (!open || e.descriptor.epoch != epoch) {
                e.retained_for_rubberband = false;
                changed = true;
            }
        }
        if changed {
            self.release_ready();
        }
    }

    fn promote_waiters(&mut self) {
        let seq0 = self.seq(self.epoch, 0) as i64;
        let epoch = self.epoch;
        let mut promoted = Vec::new();
        for rec in self.registry.values_mut() {
            if let Phase::Waiting { epoch: e } = rec.phase {
                if e <= epoch {
                    rec.phase = Phase::Streaming;
                    rec.ack_cursor = seq0 - 1;
                    promoted.push(rec.consumer_id);
                }
            }
        }
        self.served.extend(promoted);
    }

    /// Writes a prepared batch into shared memory and announces it to every
    /// admitted consumer.
    pub fn announce(&mut self, batch: PreparedBatch) -> Result<(), PayloadError> {
        debug_assert_eq!((batch.epoch, batch.batch_index), (self.epoch, self.progress));
        if self.progress == 0 {
            self.epoch_started = true;
            self.ever_started = true;
            self.promote_waiters();
            self.event(EventKind::EpochStart { epoch: self.epoch });
            self.outbox.push(Outbound::AllSubscribers(ControlMessage::EpochStart {
                epoch: self.epoch,
                epoch_len: self.epoch_len,
            }));
        }
        let (payload, descriptor) = self.store.create_segment(
            batch.epoch,
            batch.batch_index,
            batch.dtype,
            &batch.shape,
            &batch.bytes,
        )?;
        self.report.payload_bytes_written += batch.bytes.len() as u64;
        self.report.announced += 1;
        self.report.announced_batches.push(AnnouncedBatch {
            epoch: batch.epoch,
            batch_index: batch.batch_index,
            checksum: descriptor.checksum,
        });
        let pending: BTreeSet<u64> = self
            .registry
            .values()
            .filter(|c| c.phase == Phase::Streaming)
            .map(|c| c.consumer_id)
            .collect();
        let retained = batch.batch_index < self.window;
        if !pending.is_empty() {
            self.outbox.push(Outbound::Subscribers(
                pending.iter().copied().collect(),
                ControlMessage::Announce(descriptor.to_announce()),
            ));
        }
        let seq = self.seq(batch.epoch, batch.batch_index);
        self.ledger.insert(
            seq,
            BatchLedgerEntry {
                descriptor,
                payload,
                pending_acks: pending,
                retained_for_rubberband: retained,
            },
        );
        self.sweep_retention();
        self.sample_live(self.window_open());
        self.progress += 1;
        if self.progress == self.epoch_len {
            self.event(EventKind::EpochEnd { epoch: self.epoch });
            self.outbox
                .push(Outbound::AllSubscribers(ControlMessage::EpochEnd { epoch: self.epoch }));
            self.report.epochs_completed += 1;
            self.epoch += 1;
            self.progress = 0;
            self.epoch_started = false;
        }
        self.release_ready();
        self.sweep_retention();
        Ok(())
    }

    /// Releases everything left and tells all subscribers the stream is over.
    pub fn shutdown(&mut self) {
        let seqs: Vec<u64> = self.ledger.iter().map(|(s, _)| *s).collect();
        for seq in seqs {
            if let Some(mut e) = self.ledger.remove(seq) {
                self.store.release_segment(&mut e.payload);
            }
        }
        self.sample_live(false);
        self.outbox.push(Outbound::AllSubscribers(ControlMessage::Shutdown));
    }

    /// Gap between the most and least advanced streaming consumers' cursors.
    pub fn drift(&self) -> u64 {
        let cursors = self
            .registry
            .values()
            .filter(|c| c.phase == Phase::Streaming)
            .map(|c| c.ack_cursor);
        match (cursors.clone().max(), cursors.min()) {
            (Some(hi), Some(lo)) => (hi - lo) as u64,
            _ => 0,
        }
    }

    fn sample_drift(&mut self) {
        let d = self.drift();
        self.report.max_drift = self.report.max_drift.max(d);
        if self.report.drift.last().map(|s| s.1) != Some(d) {
            self.report.drift.push((unix_millis(), d));
        }
    }

    fn sample_live(&mut self, in_window: bool) {
        let live = self.ledger.len() as u64;
        let r = &mut self.report;
        r.peak_live_segments = r.peak_live_segments.max(live);
        if in_window {
            r.peak_live_in_window = r.peak_live_in_window.max(live);
        } else {
            r.peak_live_outside_window = r.peak_live_outside_window.max(live);
        }
        if r.live_segments.last().map(|s| s.1) != Some(live) {
            r.live_segments.push((unix_millis(), live));
        }
    }

    /// Final report; counters that live outside the coordinator are filled in
    /// by the caller.
    pub fn into_report(mut self) -> RunReport {
        self.report.consumers_served = self.served.len() as u64;
        self.report.end_live_segments = self.ledger.len() as u64;
        self.report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::payload::SegmentState;
    use crate::pipeline::{DatasetSpec, Pipeline, PrepSpec};
    use crate::wire::DType;

    struct Fixture {
        _dir: tempfile::TempDir,
        pipeline: Pipeline,
        coord: Coordinator,
        last_epoch: u32,
    }

    fn fixture(epoch_len: u64, epochs: u32, depth: u16, fraction: f64) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec::synthetic(1, vec![2], DType::U8, epoch_len * 2, 2);
        let pipeline = Pipeline::new(spec, PrepSpec::default()).unwrap();
        let config = ProducerConfig {
            buffer_depth: depth,
            rubberband_fraction: fraction,
            epoch_count: epochs,
            heartbeat_interval_ms: 100,
            heartbeat_timeout_ms: 500,
            ..ProducerConfig::default()
        };
        let coord = Coordinator::new(config, epoch_len, SegmentStore::new(dir.path()));
        Fixture {
            _dir: dir,
            pipeline,
            coord,
            last_epoch: 0,
        }
    }

    impl Fixture {
        fn announce_next(&mut self) {
            assert!(self.coord.can_announce(), "gate closed");
            let (e, i) = (self.coord.epoch(), self.coord.progress());
            self.last_epoch = e;
            self.coord.announce(self.pipeline.materialize(e, i).unwrap()).unwrap();
        }

        fn ack(&mut self, id: u64, batch: u64) -> Vec<u64> {
            self.coord.on_ack(id, self.last_epoch, batch)
        }

        fn announces_to(&mut self, id: u64) -> Vec<u64> {
            self.coord
                .take_outbox()
                .into_iter()
                .filter_map(|o| match o {
                    Outbound::Subscribers(ids, ControlMessage::Announce(a)) if ids.contains(&id) => {
                        Some(a.batch_index)
                    }
                    _ => None,
                })
                .collect()
        }
    }

    #[test]
    fn window_arithmetic() {
        assert_eq!(rubberband_window(0.02, 1000), 20);
        assert_eq!(rubberband_window(0.02, 100), 2);
        assert_eq!(rubberband_window(0.02, 150), 3);
        assert_eq!(rubberband_window(0.0, 100), 0);
        assert_eq!(rubberband_window(0.02, 1), 1);
        assert_eq!(rubberband_window(0.1, 30), 3);
    }

    #[test]
    fn admission_boundaries() {
        assert_eq!(admission_for(15, 20), Admission::Rubberband);
        assert_eq!(admission_for(20, 20), Admission::WaitForNextEpoch);
        assert_eq!(admission_for(0, 20), Admission::Immediate);
        assert_eq!(admission_for(1, 0), Admission::WaitForNextEpoch);
    }

    #[test]
    fn idle_without_consumers() {
        let f = fixture(10, 1, 2, 0.02);
        assert!(!f.coord.wants_pipeline());
        assert!(!f.coord.can_announce());
    }

    #[test]
    fn gate_blocks_at_buffer_depth() {
        let mut f = fixture(10, 1, 2, 0.0);
        f.coord.on_join(1, PROTOCOL_VERSION, 0);
        for _ in 0..5 {
            f.announce_next();
            f.ack(1, f.coord.progress() - 1);
        }
        f.announce_next(); // 5
        f.announce_next(); // 6
        assert_eq!(f.coord.gate(), Gate::Block);
        assert!(!f.coord.can_announce());
        assert_eq!(f.ack(1, 5), vec![5]);
        assert_eq!(f.coord.gate(), Gate::Permit);
        f.announce_next(); // 7
        assert_eq!(f.coord.progress(), 8);
    }

    #[test]
    fn release_waits_for_every_admitted_consumer() {
        let mut f = fixture(10, 1, 8, 0.0);
        for id in 1..=3 {
            f.coord.on_join(id, PROTOCOL_VERSION, 0);
        }
        for _ in 0..8 {
            f.announce_next();
        }
        assert!(f.ack(1, 7).is_empty());
        assert!(f.ack(2, 7).is_empty());
        // Duplicate acks change nothing.
        assert!(f.ack(2, 7).is_empty());
        assert_eq!(f.ack(3, 7), vec![7]);
        assert!(f.coord.ledger().get(7).is_none());
        assert!(f.ack(3, 7).is_empty());
        assert_eq!(f.coord.report().acks, 3);
    }

    #[test]
    fn eviction_unblocks_release() {
        let mut f = fixture(10, 1, 2, 0.0);
        for id in 1..=3 {
            f.coord.on_join(id, PROTOCOL_VERSION, 0);
        }
        f.announce_next();
        f.ack(1, 0);
        f.ack(2, 0);
        assert!(f.coord.ledger().get(0).is_some());
        for id in 1..=2 {
            f.coord.on_heartbeat(id, 600);
        }
        assert_eq!(f.coord.evict_stale(501), vec![3]);
        assert!(f.coord.ledger().is_empty());
        assert_eq!(f.coord.report().evictions, 1);
        assert!(f.coord.take_outbox().contains(&Outbound::Disconnect(3)));
    }

    #[test]
    fn silent_consumer_stalls_after_depth_then_eviction_resumes() {
        let mut f = fixture(10, 1, 2, 0.0);
        f.coord.on_join(1, PROTOCOL_VERSION, 0);
        f.coord.on_join(2, PROTOCOL_VERSION, 0);
        let mut announced = 0;
        while f.coord.can_announce() {
            f.announce_next();
            announced += 1;
            f.ack(1, f.coord.progress() - 1);
        }
        assert_eq!(announced, 2);
        f.coord.on_heartbeat(1, 1000);
        f.coord.evict_stale(1000);
        assert!(f.coord.can_announce());
    }

    #[test]
    fn on_time_heartbeats_never_evict() {
        let mut f = fixture(10, 1, 2, 0.0);
        f.coord.on_join(1, PROTOCOL_VERSION, 0);
        for t in (0..10_000).step_by(100) {
            f.coord.on_heartbeat(1, t);
            assert!(f.coord.evict_stale(t + 50).is_empty());
        }
    }

    #[test]
    fn all_evicted_returns_to_idle() {
        let mut f = fixture(10, 1, 2, 0.0);
        f.coord.on_join(1, PROTOCOL_VERSION, 0);
        f.announce_next();
        f.coord.evict_stale(10_000);
        assert!(!f.coord.wants_pipeline());
        assert!(f.coord.ledger().is_empty());
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut f = fixture(10, 1, 2, 0.0);
        assert_eq!(f.coord.on_join(1, PROTOCOL_VERSION + 1, 0), None);
        assert_eq!(f.coord.take_outbox(), vec![Outbound::Disconnect(1)]);
        assert!(f.coord.consumer(1).is_none());
    }

    #[test]
    fn retention_covers_exactly_the_window() {
        let mut f = fixture(100, 1, 2, 0.02);
        f.coord.on_join(1, PROTOCOL_VERSION, 0);
        f.announce_next();
        f.ack(1, 0);
        assert!(f.coord.ledger().get(0).unwrap().retained_for_rubberband);
        f.announce_next();
        // Window closed once two batches are out; batch 0 goes, batch 1 awaits its ack.
        assert!(f.coord.ledger().get(0).is_none());
        assert!(!f.coord.ledger().get(1).unwrap().retained_for_rubberband);
        f.ack(1, 1);
        assert!(f.coord.ledger().is_empty());
    }

    #[test]
    fn zero_fraction_means_mid_epoch_joins_wait() {
        let mut f = fixture(100, 2, 2, 0.0);
        f.coord.on_join(1, PROTOCOL_VERSION, 0);
        f.announce_next();
        assert!(f.coord.ledger().iter().all(|(_, e)| !e.retained_for_rubberband));
        assert_eq!(f.coord.on_join(2, PROTOCOL_VERSION, 0), Some(Admission::WaitForNextEpoch));
    }

    #[test]
    fn rubberband_joiner_replays_prefix_and_halts_others() {
        let mut f = fixture(1000, 1, 2, 0.02);
        f.coord.on_join(1, PROTOCOL_VERSION, 0);
        for _ in 0..15 {
            f.announce_next();
            f.ack(1, f.coord.progress() - 1);
        }
        f.coord.take_outbox();
        // Retained prefix stays alive although consumer 1 acked it.
        assert_eq!(f.coord.ledger().len(), 15);
        assert_eq!(f.coord.on_join(2, PROTOCOL_VERSION, 0), Some(Admission::Rubberband));
        let mut replayed = f.announces_to(2);
        assert_eq!(replayed, vec![0, 1]);
        assert!(!f.coord.can_announce());
        let mut next_ack = 0;
        while next_ack < 15 {
            assert!(!f.coord.can_announce(), "announcements resume before catch-up");
            f.ack(2, next_ack);
            next_ack += 1;
            replayed.extend(f.announces_to(2));
        }
        assert_eq!(replayed, (0..15).collect::<Vec<_>>());
        assert_eq!(f.coord.consumer(2).unwrap().phase, Phase::Streaming);
        assert!(f.coord.can_announce());
        f.announce_next();
        assert_eq!(f.announces_to(2), vec![15]);
    }

    #[test]
    fn join_at_window_edge_waits_for_next_epoch() {
        let mut f = fixture(1000, 2, 2, 0.02);
        f.coord.on_join(1, PROTOCOL_VERSION, 0);
        for _ in 0..20 {
            f.announce_next();
            f.ack(1, f.coord.progress() - 1);
        }
        assert_eq!(f.coord.on_join(2, PROTOCOL_VERSION, 0), Some(Admission::WaitForNextEpoch));
        let welcome = f
            .coord
            .take_outbox()
            .into_iter()
            .find_map(|o| match o {
                Outbound::Reply(2, m) => Some(m),
                _ => None,
            })
            .unwrap();
        assert!(matches!(welcome, ControlMessage::Welcome { epoch: 1, .. }));
        // Waiting consumers are not part of the pending set.
        f.announce_next();
        assert!(!f.coord.ledger().get(20).unwrap().pending_acks.contains(&2));
    }

    #[test]
    fn waiter_is_promoted_at_next_epoch_start() {
        let mut f = fixture(4, 2, 2, 0.0);
        f.coord.on_join(1, PROTOCOL_VERSION, 0);
        f.announce_next();
        f.ack(1, 0);
        f.coord.on_join(2, PROTOCOL_VERSION, 0);
        for i in 1..4 {
            f.announce_next();
            f.ack(1, i);
        }
        assert_eq!(f.coord.epoch(), 1);
        // Progress 0 of epoch 1: a new joiner would be immediate.
        assert_eq!(admission_for(f.coord.progress(), f.coord.window()), Admission::Immediate);
        f.coord.take_outbox();
        f.announce_next();
        assert_eq!(f.coord.consumer(2).unwrap().phase, Phase::Streaming);
        assert_eq!(f.announces_to(2), vec![0]);
    }

    #[test]
    fn drift_never_exceeds_buffer_depth() {
        let mut f = fixture(50, 1, 2, 0.0);
        f.coord.on_join(1, PROTOCOL_VERSION, 0);
        f.coord.on_join(2, PROTOCOL_VERSION, 0);
        let mut slow_next = 0;
        while !f.coord.all_announced() {
            while f.coord.can_announce() {
                let idx = f.coord.progress();
                f.announce_next();
                f.ack(1, idx);
                assert!(f.coord.drift() <= 2);
            }
            f.ack(2, slow_next);
            slow_next += 1;
            assert!(f.coord.drift() <= 2);
        }
        while slow_next < 50 {
            f.ack(2, slow_next);
            slow_next += 1;
        }
        assert!(f.coord.finished());
        assert!(f.coord.report().max_drift <= 2);
    }

    #[test]
    fn full_run_releases_every_segment() {
        let mut f = fixture(100, 1, 2, 0.02);
        for id in 1..=3 {
            f.coord.on_join(id, PROTOCOL_VERSION, 0);
        }
        while !f.coord.all_announced() {
            f.announce_next();
            let b = (f.coord.progress() + 99) % 100;
            for id in 1..=3 {
                f.coord.on_ack(id, 0, b);
            }
        }
        assert!(f.coord.finished());
        let r = f.coord.into_report();
        assert_eq!(r.announced, 100);
        assert_eq!(r.acks, 300);
        assert_eq!(r.end_live_segments, 0);
        assert_eq!(r.consumers_served, 3);
        assert!(r.peak_live_outside_window <= 3);
    }

    #[test]
    fn live_segment_peaks_respect_the_window() {
        let mut f = fixture(100, 2, 2, 0.1);
        f.coord.on_join(1, PROTOCOL_VERSION, 0);
        let mut unacked = std::collections::VecDeque::new();
        while !f.coord.all_announced() {
            while f.coord.can_announce() {
                unacked.push_back((f.coord.epoch(), f.coord.progress()));
                f.announce_next();
            }
            let (e, b) = unacked.pop_front().unwrap();
            f.coord.on_ack(1, e, b);
        }
        let r = f.coord.report();
        assert!(r.peak_live_outside_window <= 3, "outside {}", r.peak_live_outside_window);
        assert!(r.peak_live_in_window <= 10 + 3, "inside {}", r.peak_live_in_window);
        assert!(r.peak_live_in_window >= 10);
    }

    #[test]
    fn segments_are_unlinked_on_release() {
        let mut f = fixture(10, 1, 2, 0.0);
        f.coord.on_join(1, PROTOCOL_VERSION, 0);
        f.announce_next();
        let name = f.coord.ledger().get(0).unwrap().descriptor.segment_name.clone();
        assert_eq!(f.coord.ledger().get(0).unwrap().payload.state(), SegmentState::Sealed);
        f.ack(1, 0);
        assert!(f.coord.store.map_segment(&name, false).is_err());
    }
}
