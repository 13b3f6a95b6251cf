#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::thread::JoinHandle;

use batchsocket::consumer::{ConsumerConfig, ConsumerSession};
use batchsocket::pipeline::{DatasetSpec, Pipeline, PrepSpec};
use batchsocket::producer::{Producer, ProducerConfig, ProducerError, RunReport};
use batchsocket::transport::Endpoint;
use batchsocket::wire::DType;
use tempfile::TempDir;

pub struct Running {
    pub dir: TempDir,
    pub broadcast: Endpoint,
    pub aggregate: Endpoint,
    pub stop: Arc<AtomicBool>,
    pub handle: JoinHandle<Result<RunReport, ProducerError>>,
}

impl Running {
    pub fn shm_dir(&self) -> PathBuf {
        self.dir.path().join("shm")
    }

    pub fn consumer_config(&self, id: u64) -> ConsumerConfig {
        let mut c = ConsumerConfig::new(id);
        c.broadcast = self.broadcast.clone();
        c.aggregate = self.aggregate.clone();
        c.shm_dir = self.shm_dir();
        c.heartbeat_interval_ms = 50;
        c.verify_checksums = true;
        c
    }

    pub fn connect(&self, id: u64) -> ConsumerSession {
        ConsumerSession::connect(self.consumer_config(id)).expect("connect")
    }

    pub fn join(self) -> (RunReport, TempDir) {
        let report = self.handle.join().expect("producer thread").expect("producer run");
        (report, self.dir)
    }
}

/// Tiny synthetic dataset: `epoch_len` batches of 2 samples of 4 f32 each.
pub fn dataset(epoch_len: u64) -> DatasetSpec {
    DatasetSpec::synthetic(7, vec![4], DType::F32, epoch_len * 2, 2)
}

pub fn config() -> ProducerConfig {
    ProducerConfig {
        heartbeat_interval_ms: 50,
        heartbeat_timeout_ms: 2000,
        pause_poll_interval_ms: 20,
        ..ProducerConfig::default()
    }
}

pub fn start(mut config: ProducerConfig, spec: DatasetSpec, prep: PrepSpec) -> Running {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("shm")).unwrap();
    config.broadcast = Endpoint::Unix(dir.path().join("b.sock"));
    config.aggregate = Endpoint::Unix(dir.path().join("a.sock"));
    config.shm_dir = dir.path().join("shm");
    let producer = Producer::bind(config).unwrap();
    let (broadcast, aggregate) = producer.endpoints();
    let pipeline = Pipeline::new(spec, prep).unwrap();
    let stop = Arc::new(AtomicBool::new(false));
    let s = stop.clone();
    let handle = std::thread::spawn(move || producer.run_until(pipeline, s));
    Running {
        dir,
        broadcast,
        aggregate,
        stop,
        handle,
    }
}

/// Segment files left in a store directory.
pub fn leftover_segments(dir: &std::path::Path) -> usize {
    std::fs::read_dir(dir).map(|d| d.count()).unwrap_or(0)
}
