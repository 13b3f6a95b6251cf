//! The producer: iterates the pipeline once and serves every batch to all
//! connected consumers.
//!
//! Consumers hold two connections. The *subscription* connection (broadcast
//! endpoint) carries `EpochStart`/`Announce`/`EpochEnd`/`Shutdown` from the
//! producer; its first frame is a `Join` naming the subscriber. The
//! *aggregation* connection carries `Join`/`Ack`/`Heartbeat`/`Bye` to the
//! producer and the `Welcome` reply back. A consumer is admitted once both
//! connections have announced the same id.

mod coordinator;
mod ledger;
mod report;

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{select, Sender};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::process_cpu_seconds;
use crate::payload::{PayloadError, SegmentStore, DEFAULT_SHM_DIR};
use crate::pipeline::{Pipeline, PipelineError, PrepPool};
use crate::transport::{Conn, Endpoint, Listener};
use crate::wire::{self, ControlMessage, PROTOCOL_VERSION};

pub use coordinator::{admission_for, rubberband_window, ConsumerRecord, Coordinator, Outbound, Phase};
pub use ledger::{flow_control_gate, BatchLedgerEntry, Gate, Ledger};
pub use report::{AnnouncedBatch, EventKind, EventRecord, RunReport, Sample};

pub const DEFAULT_BROADCAST: &str = "/tmp/batchsocket-broadcast.sock";
pub const DEFAULT_AGGREGATE: &str = "/tmp/batchsocket-aggregate.sock";
/// Environment variables that override the default endpoints.
pub const BROADCAST_ENV: &str = "BATCHSOCKET_BROADCAST";
pub const AGGREGATE_ENV: &str = "BATCHSOCKET_AGGREGATE";

/// Broadcast and aggregation endpoints from the environment, else the defaults.
pub fn endpoints_from_env() -> Result<(Endpoint, Endpoint), String> {
    let read = |var: &str, default: &str| match std::env::var(var) {
        Ok(v) if !v.is_empty() => v.parse::<Endpoint>().map_err(|e| format!("{var}: {e}")),
        _ => default.parse(),
    };
    Ok((read(BROADCAST_ENV, DEFAULT_BROADCAST)?, read(AGGREGATE_ENV, DEFAULT_AGGREGATE)?))
}

const SUBSCRIBE_TIMEOUT: Duration = Duration::from_secs(5);
const WRITE_TIMEOUT: Duration = Duration::from_secs(2);
const ACCEPT_POLL: Duration = Duration::from_millis(2);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProducerConfig {
    pub buffer_depth: u16,
    pub rubberband_fraction: f64,
    pub heartbeat_interval_ms: u64,
    pub heartbeat_timeout_ms: u64,
    pub epoch_count: u32,
    pub pause_poll_interval_ms: u64,
    /// Re-read each segment after writing it and check its checksum.
    pub verify_checksums: bool,
    pub broadcast: Endpoint,
    pub aggregate: Endpoint,
    pub shm_dir: PathBuf,
    /// Consumers that must be connected before the first epoch starts.
    pub await_consumers: u32,
}

impl Default for ProducerConfig {
    fn default() -> Self {
        ProducerConfig {
            buffer_depth: 2,
            rubberband_fraction: 0.02,
            heartbeat_interval_ms: 1000,
            heartbeat_timeout_ms: 5000,
            epoch_count: 1,
            pause_poll_interval_ms: 100,
            verify_checksums: false,
            broadcast: Endpoint::Unix(DEFAULT_BROADCAST.into()),
            aggregate: Endpoint::Unix(DEFAULT_AGGREGATE.into()),
            shm_dir: DEFAULT_SHM_DIR.into(),
            await_consumers: 1,
        }
    }
}

impl ProducerConfig {
    pub fn validate(&self) -> Result<(), ProducerError> {
        let bad = |m: &str| Err(ProducerError::InvalidConfig(m.to_owned()));
        if self.buffer_depth < 1 {
            return bad("buffer_depth must be at least 1");
        }
        if !(0.0..1.0).contains(&self.rubberband_fraction) {
            return bad("rubberband_fraction must be in [0, 1)");
        }
        if self.heartbeat_timeout_ms <= self.heartbeat_interval_ms {
            return bad("heartbeat_timeout must exceed heartbeat_interval");
        }
        if self.pause_poll_interval_ms == 0 {
            return bad("pause_poll_interval must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ProducerError {
    #[error("invalid producer config: {0}")]
    InvalidConfig(String),
    #[error("binding {endpoint}: {source}")]
    Bind {
        endpoint: Endpoint,
        source: std::io::Error,
    },
    #[error("pipeline failed: {0}")]
    Pipeline(#[from] PipelineError),
    #[error("payload failed: {0}")]
    Payload(#[from] PayloadError),
}

enum Event {
    Subscribe { consumer: u64, version: u16, conn: Conn },
    AggConnected { conn_id: u64, writer: Conn },
    Control { conn_id: u64, msg: ControlMessage },
    Closed { conn_id: u64 },
}

/// A producer with both endpoints bound, ready to run.
pub struct Producer {
    config: ProducerConfig,
    broadcast: Listener,
    aggregate: Listener,
}

impl Producer {
    pub fn bind(config: ProducerConfig) -> Result<Producer, ProducerError> {
        config.validate()?;
        let bind = |ep: &Endpoint| {
            Listener::bind(ep).map_err(|source| ProducerError::Bind {
                endpoint: ep.clone(),
                source,
            })
        };
        let broadcast = bind(&config.broadcast)?;
        let aggregate = bind(&config.aggregate)?;
        Ok(Producer {
            config,
            broadcast,
            aggregate,
        })
    }

    /// Bound endpoints; ephemeral TCP ports are resolved.
    pub fn endpoints(&self) -> (Endpoint, Endpoint) {
        (
            self.broadcast.local_endpoint().expect("bound listener"),
            self.aggregate.local_endpoint().expect("bound listener"),
        )
    }

    pub fn run(self, pipeline: Pipeline) -> Result<RunReport, ProducerError> {
        self.run_until(pipeline, Arc::new(AtomicBool::new(false)))
    }

    /// Runs every configured epoch, or until `stop` is raised.
    pub fn run_until(self, pipeline: Pipeline, stop: Arc<AtomicBool>) -> Result<RunReport, ProducerError> {
        let started = Instant::now();
        let cpu_start = process_cpu_seconds();
        let Producer {
            config,
            broadcast,
            aggregate,
        } = self;
        let (tx, rx) = crossbeam_channel::unbounded();
        let accept_stop = Arc::new(AtomicBool::new(false));
        let acceptor = spawn_acceptor(broadcast, aggregate, tx, accept_stop.clone());

        let pipeline = Arc::new(pipeline);
        let lookahead = config.buffer_depth as u64 + pipeline.prep().workers as u64;
        let mut pool = PrepPool::spawn(pipeline.clone(), config.epoch_count, lookahead);
        let store = SegmentStore::new(&config.shm_dir);
        let mut coord = Coordinator::new(config.clone(), pipeline.epoch_len(), store.clone());
        let mut links = Links::default();
        let tick = Duration::from_millis(
            config
                .pause_poll_interval_ms
                .min(config.heartbeat_interval_ms)
                .max(1),
        );
        let now_ms = || started.elapsed().as_millis() as u64;

        let result = loop {
            if stop.load(Ordering::Relaxed) {
                break Ok(());
            }
            pool.set_running(coord.wants_pipeline());
            let mut failure = None;
            while coord.can_announce() {
                match pool.take_next() {
                    Some(Ok(batch)) => {
                        if let Err(e) = coord.announce(batch) {
                            failure = Some(ProducerError::from(e));
                            break;
                        }
                        if config.verify_checksums {
                            verify_latest(&coord, &store);
                        }
                        links.flush(&mut coord);
                    }
                    Some(Err(e)) => {
                        failure = Some(e.into());
                        break;
                    }
                    None => break,
                }
            }
            if let Some(e) = failure {
                break Err(e);
            }
            links.flush(&mut coord);
            if coord.finished() {
                break Ok(());
            }
            select! {
                recv(rx) -> ev => match ev {
                    Ok(ev) => links.handle(ev, &mut coord, now_ms()),
                    Err(_) => break Ok(()),
                },
                recv(pool.results()) -> out => {
                    if let Ok(out) = out {
                        pool.accept(out);
                    }
                },
                default(tick) => {},
            }
            // Drain whatever else is queued before sweeping.
            while let Ok(ev) = rx.try_recv() {
                links.handle(ev, &mut coord, now_ms());
            }
            coord.evict_stale(now_ms());
            links.flush(&mut coord);
        };

        coord.shutdown();
        links.flush(&mut coord);
        links.close_all();
        accept_stop.store(true, Ordering::Relaxed);
        let _ = acceptor.join();
        drop(pool);
        result?;

        let mut report = coord.into_report();
        report.pid = std::process::id();
        report.pipeline_calls = pipeline.calls();
        report.cpu_seconds = process_cpu_seconds() - cpu_start;
        report.wall_seconds = started.elapsed().as_secs_f64();
        Ok(report)
    }
}

/// Binds the configured endpoints and runs to completion.
pub fn run(config: ProducerConfig, pipeline: Pipeline) -> Result<RunReport, ProducerError> {
    Producer::bind(config)?.run(pipeline)
}

fn verify_latest(coord: &Coordinator, store: &SegmentStore) {
    if let Some((_, e)) = coord.ledger().iter().next_back() {
        if let Err(err) = store.map_segment(&e.descriptor.segment_name, true) {
            log::error!("segment {} failed verification: {err}", e.descriptor.segment_name);
        }
    }
}

fn spawn_acceptor(
    broadcast: Listener,
    aggregate: Listener,
    tx: Sender<Event>,
    stop: Arc<AtomicBool>,
) -> JoinHandle<()> {
    std::thread::Builder::new()
        .name("accept".into())
        .spawn(move || {
            let mut next_conn = 0u64;
            while !stop.load(Ordering::Relaxed) {
                let mut idle = true;
                match broadcast.accept() {
                    Ok(Some(conn)) => {
                        idle = false;
                        let tx = tx.clone();
                        std::thread::spawn(move || read_subscription(conn, tx));
                    }
                    Ok(None) => {}
                    Err(e) => log::warn!("accept on broadcast endpoint: {e}"),
                }
                match aggregate.accept() {
                    Ok(Some(conn)) => {
                        idle = false;
                        next_conn += 1;
                        spawn_aggregation_reader(next_conn, conn, &tx);
                    }
                    Ok(None) => {}
                    Err(e) => log::warn!("accept on aggregation endpoint: {e}"),
                }
                if idle {
                    std::thread::sleep(ACCEPT_POLL);
                }
            }
        })
        .expect("spawning acceptor")
}

fn read_subscription(mut conn: Conn, tx: Sender<Event>) {
    let _ = conn.set_read_timeout(Some(SUBSCRIBE_TIMEOUT));
    match wire::read_frame(&mut conn) {
        Ok(Some(ControlMessage::Join {
            consumer_id,
            protocol_version,
        })) => {
            let _ = conn.set_read_timeout(None);
            let _ = conn.set_write_timeout(Some(WRITE_TIMEOUT));
            let _ = tx.send(Event::Subscribe {
                consumer: consumer_id,
                version: protocol_version,
                conn,
            });
        }
        Ok(other) => log::warn!("subscription opened with {other:?} instead of Join"),
        Err(e) => log::warn!("reading subscription Join: {e}"),
    }
}

fn spawn_aggregation_reader(conn_id: u64, mut conn: Conn, tx: &Sender<Event>) {
    let writer = match conn.try_clone() {
        Ok(w) => w,
        Err(e) => {
            log::warn!("cloning aggregation connection: {e}");
            return;
        }
    };
    let _ = writer.set_write_timeout(Some(WRITE_TIMEOUT));
    if tx.send(Event::AggConnected { conn_id, writer }).is_err() {
        return;
    }
    let tx = tx.clone();
    std::thread::spawn(move || loop {
        match wire::read_frame(&mut conn) {
            Ok(Some(msg)) => {
                if tx.send(Event::Control { conn_id, msg }).is_err() {
                    return;
                }
            }
            Ok(None) | Err(_) => {
                let _ = tx.send(Event::Closed { conn_id });
                return;
            }
        }
    });
}

#[derive(Default)]
struct PendingJoin {
    agg: Option<u64>,
    sub: Option<Conn>,
}

/// Connection bookkeeping owned by the coordinator loop.
#[derive(Default)]
struct Links {
    agg: HashMap<u64, Conn>,
    agg_owner: HashMap<u64, u64>,
    consumer_agg: HashMap<u64, u64>,
    subs: HashMap<u64, Conn>,
    pending: HashMap<u64, PendingJoin>,
}

impl Links {
    fn handle(&mut self, ev: Event, coord: &mut Coordinator, now_ms: u64) {
        match ev {
            Event::AggConnected { conn_id, writer } => {
                self.agg.insert(conn_id, writer);
            }
            Event::Subscribe {
                consumer,
                version,
                conn,
            } => {
                if version != PROTOCOL_VERSION {
                    coord.on_join(consumer, version, now_ms);
                    coord.take_outbox();
                    conn.shutdown();
                    return;
                }
                self.pending.entry(consumer).or_default().sub = Some(conn);
                self.try_complete(consumer, coord, now_ms);
            }
            Event::Control { conn_id, msg } => match msg {
                ControlMessage::Join {
                    consumer_id,
                    protocol_version,
                } => {
                    if protocol_version != PROTOCOL_VERSION {
                        coord.on_join(consumer_id, protocol_version, now_ms);
                        coord.take_outbox();
                        if let Some(c) = self.agg.remove(&conn_id) {
                            c.shutdown();
                        }
                        return;
                    }
                    self.pending.entry(consumer_id).or_default().agg = Some(conn_id);
                    self.try_complete(consumer_id, coord, now_ms);
                }
                other => {
                    let Some(&owner) = self.agg_owner.get(&conn_id) else {
                        log::debug!("{other:?} on unjoined connection {conn_id}");
                        return;
                    };
                    match other {
                        ControlMessage::Ack {
                            consumer_id,
                            epoch,
                            batch_index,
                        } if consumer_id == owner => {
                            coord.on_ack(consumer_id, epoch, batch_index);
                        }
                        ControlMessage::Heartbeat { consumer_id, .. } if consumer_id == owner => {
                            coord.on_heartbeat(consumer_id, now_ms);
                        }
                        ControlMessage::Bye { consumer_id } if consumer_id == owner => {
                            coord.on_bye(consumer_id);
                        }
                        m => log::warn!("unexpected {m:?} from consumer {owner}"),
                    }
                }
            },
            Event::Closed { conn_id } => {
                self.agg.remove(&conn_id);
                if let Some(owner) = self.agg_owner.remove(&conn_id) {
                    self.consumer_agg.remove(&owner);
                    coord.on_disconnect(owner);
                    if let Some(s) = self.subs.remove(&owner) {
                        s.shutdown();
                    }
                }
                self.pending.retain(|_, p| p.agg != Some(conn_id));
            }
        }
    }

    fn try_complete(&mut self, consumer: u64, coord: &mut Coordinator, now_ms: u64) {
        let ready = self
            .pending
            .get(&consumer)
            .is_some_and(|p| p.agg.is_some() && p.sub.is_some());
        if !ready {
            return;
        }
        let p = self.pending.remove(&consumer).expect("checked");
        let (agg, sub) = (p.agg.expect("checked"), p.sub.expect("checked"));
        // A reconnect replaces the previous links for this identity.
        self.close(consumer);
        self.agg_owner.insert(agg, consumer);
        self.consumer_agg.insert(consumer, agg);
        self.subs.insert(consumer, sub);
        coord.on_join(consumer, PROTOCOL_VERSION, now_ms);
        self.flush(coord);
    }

    fn close(&mut self, consumer: u64) {
        if let Some(s) = self.subs.remove(&consumer) {
            s.shutdown();
        }
        if let Some(conn_id) = self.consumer_agg.remove(&consumer) {
            self.agg_owner.remove(&conn_id);
            if let Some(c) = self.agg.remove(&conn_id) {
                c.shutdown();
            }
        }
    }

    fn close_all(&mut self) {
        let ids: Vec<u64> = self.subs.keys().copied().collect();
        for id in ids {
            self.close(id);
        }
        for (_, c) in self.agg.drain() {
            c.shutdown();
        }
        for (_, p) in self.pending.drain() {
            if let Some(s) = p.sub {
                s.shutdown();
            }
        }
    }

    /// Delivers queued messages; consumers whose connections fail are evicted.
    fn flush(&mut self, coord: &mut Coordinator) {
        loop {
            let out = coord.take_outbox();
            if out.is_empty() {
                return;
            }
            let mut failed = Vec::new();
            for o in out {
                match o {
                    Outbound::Subscribers(ids, msg) => {
                        let frame = encode(&msg);
                        for id in ids {
                            if let Some(c) = self.subs.get_mut(&id) {
                                if c.write_all(&frame).is_err() {
                                    failed.push(id);
                                }
                            }
                        }
                    }
                    Outbound::AllSubscribers(msg) => {
                        let frame = encode(&msg);
                        for (id, c) in self.subs.iter_mut() {
                            if c.write_all(&frame).is_err() {
                                failed.push(*id);
                            }
                        }
                    }
                    Outbound::Reply(id, msg) => {
                        let conn = self.consumer_agg.get(&id).and_then(|cid| self.agg.get_mut(cid));
                        if let Some(c) = conn {
                            if c.write_all(&encode(&msg)).is_err() {
                                failed.push(id);
                            }
                        }
                    }
                    Outbound::Disconnect(id) => self.close(id),
                }
            }
            for id in failed {
                coord.on_disconnect(id);
                self.close(id);
            }
        }
    }
}

fn encode(msg: &ControlMessage) -> Vec<u8> {
    // Coordinator messages are built from validated descriptors.
    wire::encode_message(msg).expect("coordinator produced an unencodable message")
}
