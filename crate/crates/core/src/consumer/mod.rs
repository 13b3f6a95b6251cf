//! Consumer client: a blocking batch iterator over the shared stream.
//!
//! A session keeps a bounded queue of announced descriptors filled by a
//! background reader, heartbeats from a second background thread, and maps
//! and acknowledges each batch as the caller fetches it.

mod driver;

use std::collections::VecDeque;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::payload::{BatchView, PayloadError, SegmentStore, DEFAULT_SHM_DIR};
use crate::producer::{DEFAULT_AGGREGATE, DEFAULT_BROADCAST};
use crate::transport::{Conn, Endpoint};
use crate::wire::{self, Admission, Announce, ControlMessage, PROTOCOL_VERSION};

pub use driver::{drive, ComputeMode, ConsumedBatch, ConsumerReport, DriveOptions, EpochStat};

const CONNECT_RETRY: Duration = Duration::from_millis(20);

#[derive(Debug, Clone)]
pub struct ConsumerConfig {
    pub consumer_id: u64,
    /// Defaults to the producer's buffer depth from `Welcome`.
    pub queue_capacity: Option<u16>,
    pub heartbeat_interval_ms: u64,
    pub broadcast: Endpoint,
    pub aggregate: Endpoint,
    pub verify_checksums: bool,
    pub shm_dir: PathBuf,
    /// Bounds both reaching the endpoints and waiting for `Welcome`.
    pub connect_timeout_ms: u64,
    pub protocol_version: u16,
}

impl ConsumerConfig {
    pub fn new(consumer_id: u64) -> Self {
        ConsumerConfig {
            consumer_id,
            queue_capacity: None,
            heartbeat_interval_ms: 1000,
            broadcast: Endpoint::Unix(DEFAULT_BROADCAST.into()),
            aggregate: Endpoint::Unix(DEFAULT_AGGREGATE.into()),
            verify_checksums: false,
            shm_dir: DEFAULT_SHM_DIR.into(),
            connect_timeout_ms: 5000,
            protocol_version: PROTOCOL_VERSION,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConsumerError {
    #[error("connect failed: {0}")]
    Connect(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Payload(#[from] PayloadError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Joining,
    WaitingForEpoch,
    Streaming,
    Ended,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Welcome {
    pub epoch: u32,
    pub epoch_len: u64,
    pub buffer_depth: u16,
    pub admitted: Admission,
}

#[derive(Debug)]
pub enum Next {
    Batch(BatchView),
    /// The given epoch has ended.
    EpochBoundary(u32),
    EndOfStream,
}

#[derive(Default)]
struct QueueState {
    items: VecDeque<ControlMessage>,
    announces: usize,
    closed: bool,
    shutdown_seen: bool,
    violation: Option<String>,
}

struct Queue {
    state: Mutex<QueueState>,
    ready: Condvar,
}

impl Queue {
    fn push(&self, msg: ControlMessage, capacity: usize) -> bool {
        let mut s = self.state.lock().unwrap();
        match &msg {
            ControlMessage::Announce(_) => {
                if s.announces >= capacity {
                    s.violation = Some(format!("announcement beyond queue capacity {capacity}"));
                    s.closed = true;
                    self.ready.notify_all();
                    return false;
                }
                s.announces += 1;
            }
            ControlMessage::Shutdown => s.shutdown_seen = true,
            _ => {}
        }
        s.items.push_back(msg);
        self.ready.notify_all();
        true
    }

    fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.ready.notify_all();
    }

    fn pop(&self) -> Result<Option<ControlMessage>, String> {
        let mut s = self.state.lock().unwrap();
        loop {
            if let Some(m) = s.items.pop_front() {
                if matches!(m, ControlMessage::Announce(_)) {
                    s.announces -= 1;
                }
                return Ok(Some(m));
            }
            if let Some(v) = &s.violation {
                return Err(v.clone());
            }
            if s.closed {
                return Ok(None);
            }
            s = self.ready.wait(s).unwrap();
        }
    }
}

pub struct ConsumerSession {
    config: ConsumerConfig,
    store: SegmentStore,
    welcome: Welcome,
    state: SessionState,
    current_epoch: u32,
    capacity: usize,
    agg: Arc<Mutex<Conn>>,
    sub: Conn,
    queue: Arc<Queue>,
    heartbeat_paused: Arc<AtomicBool>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

fn connect_retrying(ep: &Endpoint, deadline: Instant) -> Result<Conn, ConsumerError> {
    loop {
        match Conn::connect(ep) {
            Ok(c) => return Ok(c),
            Err(e) if Instant::now() >= deadline => {
                return Err(ConsumerError::Connect(format!("{ep}: {e}")))
            }
            Err(_) => std::thread::sleep(CONNECT_RETRY),
        }
    }
}

impl ConsumerSession {
    pub fn connect(config: ConsumerConfig) -> Result<ConsumerSession, ConsumerError> {
        if config.queue_capacity == Some(0) {
            return Err(ConsumerError::Connect("queue_capacity must be at least 1".into()));
        }
        let timeout = Duration::from_millis(config.connect_timeout_ms);
        let deadline = Instant::now() + timeout;
        let join = ControlMessage::Join {
            consumer_id: config.consumer_id,
            protocol_version: config.protocol_version,
        };
        let io = |e: wire::FrameIoError| ConsumerError::Connect(e.to_string());

        let mut sub = connect_retrying(&config.broadcast, deadline)?;
        wire::write_frame(&mut sub, &join).map_err(io)?;
        let mut agg = connect_retrying(&config.aggregate, deadline)?;
        wire::write_frame(&mut agg, &join).map_err(io)?;

        let remaining = deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(1));
        agg.set_read_timeout(Some(remaining))
            .map_err(|e| ConsumerError::Connect(e.to_string()))?;
        let welcome = match wire::read_frame(&mut agg) {
            Ok(Some(ControlMessage::Welcome {
                consumer_id,
                epoch,
                epoch_len,
                buffer_depth,
                admitted,
                ..
            })) if consumer_id == config.consumer_id => Welcome {
                epoch,
                epoch_len,
                buffer_depth,
                admitted,
            },
            Ok(Some(other)) => {
                return Err(ConsumerError::Connect(format!("expected Welcome, got {other:?}")))
            }
            Ok(None) => {
                return Err(ConsumerError::Connect(
                    "producer closed the connection (protocol version rejected?)".into(),
                ))
            }
            Err(e) => return Err(ConsumerError::Connect(format!("waiting for Welcome: {e}"))),
        };
        let _ = agg.set_read_timeout(None);
        let _ = agg.set_write_timeout(Some(Duration::from_secs(2)));

        let capacity = config.queue_capacity.unwrap_or(welcome.buffer_depth).max(1) as usize;
        let queue = Arc::new(Queue {
            state: Mutex::new(QueueState::default()),
            ready: Condvar::new(),
        });
        let stop = Arc::new(AtomicBool::new(false));
        let heartbeat_paused = Arc::new(AtomicBool::new(false));
        let agg = Arc::new(Mutex::new(agg));

        let reader = {
            let mut conn = sub.try_clone().map_err(|e| ConsumerError::Connect(e.to_string()))?;
            let queue = queue.clone();
            std::thread::Builder::new()
                .name(format!("sub-{}", config.consumer_id))
                .spawn(move || {
                    loop {
                        match wire::read_frame(&mut conn) {
                            Ok(Some(msg)) => {
                                if !queue.push(msg, capacity) {
                                    conn.shutdown();
                                    break;
                                }
                            }
                            Ok(None) => break,
                            Err(e) => {
                                log::debug!("subscription read: {e}");
                                break;
                            }
                        }
                    }
                    queue.close();
                })
                .expect("spawning reader")
        };
        let heartbeat = {
            let agg = agg.clone();
            let stop = stop.clone();
            let paused = heartbeat_paused.clone();
            let id = config.consumer_id;
            let interval = Duration::from_millis(config.heartbeat_interval_ms.max(1));
            let started = Instant::now();
            std::thread::Builder::new()
                .name(format!("hb-{id}"))
                .spawn(move || {
                    let tick = interval.min(Duration::from_millis(50));
                    let mut last = Instant::now() - interval;
                    while !stop.load(Ordering::Relaxed) {
                        if !paused.load(Ordering::Relaxed) && last.elapsed() >= interval {
                            last = Instant::now();
                            let msg = ControlMessage::Heartbeat {
                                consumer_id: id,
                                monotonic_millis: started.elapsed().as_millis() as u64,
                            };
                            if wire::write_frame(&mut *agg.lock().unwrap(), &msg).is_err() {
                                return;
                            }
                        }
                        std::thread::sleep(tick);
                    }
                })
                .expect("spawning heartbeat")
        };

        let state = match welcome.admitted {
            Admission::WaitForNextEpoch => SessionState::WaitingForEpoch,
            _ => SessionState::Streaming,
        };
        Ok(ConsumerSession {
            store: SegmentStore::new(&config.shm_dir),
            config,
            welcome,
            state,
            current_epoch: welcome.epoch,
            capacity,
            agg,
            sub,
            queue,
            heartbeat_paused,
            stop,
            threads: vec![reader, heartbeat],
        })
    }

    pub fn consumer_id(&self) -> u64 {
        self.config.consumer_id
    }

    pub fn welcome(&self) -> Welcome {
        self.welcome
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn current_epoch(&self) -> u32 {
        self.current_epoch
    }

    pub fn queue_capacity(&self) -> usize {
        self.capacity
    }

    /// Whether the producer's `Shutdown` was received (as opposed to the
    /// stream being cut, e.g. after eviction).
    pub fn shutdown_seen(&self) -> bool {
        self.queue.state.lock().unwrap().shutdown_seen
    }

    /// Stops (or resumes) heartbeats without closing the session.
    pub fn pause_heartbeats(&self, paused: bool) {
        self.heartbeat_paused.store(paused, Ordering::Relaxed);
    }

    /// Blocks, without fetching, until the producer closes the subscription.
    pub fn wait_closed(&self) {
        let mut s = self.queue.state.lock().unwrap();
        while !s.closed {
            s = self.queue.ready.wait(s).unwrap();
        }
    }

    /// Blocks until the next batch or marker. The returned view has already
    /// been acknowledged.
    pub fn next_batch(&mut self) -> Result<Next, ConsumerError> {
        if self.state == SessionState::Ended {
            return Ok(Next::EndOfStream);
        }
        loop {
            let msg = match self.queue.pop() {
                Ok(Some(m)) => m,
                Ok(None) => {
                    self.state = SessionState::Ended;
                    return Ok(Next::EndOfStream);
                }
                Err(v) => {
                    self.state = SessionState::Ended;
                    return Err(ConsumerError::Protocol(v));
                }
            };
            match msg {
                ControlMessage::EpochStart { epoch, .. } if epoch >= self.welcome.epoch => {
                    self.current_epoch = epoch;
                    self.state = SessionState::Streaming;
                }
                ControlMessage::EpochEnd { epoch } if epoch >= self.welcome.epoch => {
                    return Ok(Next::EpochBoundary(epoch));
                }
                ControlMessage::Announce(a) => return self.fetch(a).map(Next::Batch),
                ControlMessage::Shutdown => {
                    self.state = SessionState::Ended;
                    return Ok(Next::EndOfStream);
                }
                ControlMessage::EpochStart { .. } | ControlMessage::EpochEnd { .. } => {}
                other => {
                    self.state = SessionState::Ended;
                    return Err(ConsumerError::Protocol(format!("unexpected {other:?} on subscription")));
                }
            }
        }
    }

    fn fetch(&mut self, a: Announce) -> Result<BatchView, ConsumerError> {
        let view = match self.store.map_segment(&a.segment_name, self.config.verify_checksums) {
            Ok(v) => v,
            Err(e @ PayloadError::StaleHandle(_)) => {
                self.state = SessionState::Ended;
                return Err(ConsumerError::Protocol(e.to_string()));
            }
            Err(e) => return Err(e.into()),
        };
        let d = &view.descriptor;
        if (d.epoch, d.batch_index, d.checksum, d.byte_len) != (a.epoch, a.batch_index, a.checksum, a.byte_len) {
            return Err(ConsumerError::Payload(PayloadError::Corrupt {
                name: a.segment_name,
                reason: "segment header disagrees with announcement".into(),
            }));
        }
        let ack = ControlMessage::Ack {
            consumer_id: self.config.consumer_id,
            epoch: a.epoch,
            batch_index: a.batch_index,
        };
        // A failed ack means the producer dropped us; the stream closes shortly.
        if let Err(e) = wire::write_frame(&mut *self.agg.lock().unwrap(), &ack) {
            log::debug!("ack failed: {e}");
        }
        self.current_epoch = a.epoch;
        self.state = SessionState::Streaming;
        Ok(view)
    }

    /// Unmaps a batch. Dropping the view is equivalent.
    pub fn release_view(&self, view: BatchView) {
        drop(view);
    }

    /// Sends `Bye` and tears the session down.
    pub fn close(mut self) {
        let bye = ControlMessage::Bye {
            consumer_id: self.config.consumer_id,
        };
        let _ = wire::write_frame(&mut *self.agg.lock().unwrap(), &bye);
        self.teardown();
    }

    fn teardown(&mut self) {
        self.state = SessionState::Ended;
        self.stop.store(true, Ordering::Relaxed);
        self.sub.shutdown();
        self.agg.lock().unwrap().shutdown();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ConsumerSession {
    fn drop(&mut self) {
        self.teardown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn announce(i: u64) -> ControlMessage {
        ControlMessage::Announce(Announce {
            epoch: 0,
            batch_index: i,
            segment_name: format!("s{i}"),
            byte_len: 1,
            dtype: wire::DType::U8,
            shape: vec![1],
            checksum: 0,
        })
    }

    fn queue() -> Queue {
        Queue {
            state: Mutex::new(QueueState::default()),
            ready: Condvar::new(),
        }
    }

    #[test]
    fn queue_is_fifo_and_markers_are_free() {
        let q = queue();
        assert!(q.push(ControlMessage::EpochStart { epoch: 0, epoch_len: 2 }, 2));
        assert!(q.push(announce(0), 2));
        assert!(q.push(announce(1), 2));
        assert!(q.push(ControlMessage::EpochEnd { epoch: 0 }, 2));
        q.close();
        assert!(matches!(q.pop(), Ok(Some(ControlMessage::EpochStart { .. }))));
        assert_eq!(q.pop(), Ok(Some(announce(0))));
        assert_eq!(q.pop(), Ok(Some(announce(1))));
        assert!(matches!(q.pop(), Ok(Some(ControlMessage::EpochEnd { .. }))));
        assert_eq!(q.pop(), Ok(None));
    }

    #[test]
    fn overflow_is_a_violation() {
        let q = queue();
        assert!(q.push(announce(0), 1));
        assert!(!q.push(announce(1), 1));
        assert_eq!(q.pop(), Ok(Some(announce(0))));
        assert!(q.pop().is_err());
    }

    #[test]
    fn popping_frees_capacity() {
        let q = queue();
        assert!(q.push(announce(0), 1));
        q.pop().unwrap();
        assert!(q.push(announce(1), 1));
    }

    #[test]
    fn unreachable_producer_is_a_connect_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ConsumerConfig::new(1);
        c.broadcast = Endpoint::Unix(dir.path().join("b.sock"));
        c.aggregate = Endpoint::Unix(dir.path().join("a.sock"));
        c.connect_timeout_ms = 50;
        assert!(matches!(ConsumerSession::connect(c), Err(ConsumerError::Connect(_))));
    }
}
