//! Measured prep throughput against the analytic model. Both cases share one
//! test so they never compete for CPU with each other.

use std::sync::Arc;
use std::time::{Duration, Instant};

use batchsocket::harness::oracle::prep_rate;
use batchsocket::pipeline::{DatasetSpec, Pipeline, PrepPool, PrepSpec};
use batchsocket::wire::DType;

const TOLERANCE: f64 = 0.15;

/// Batches per second through a pool of `workers`, over `batches` batches of
/// 512 samples at 100 us each.
fn measure(workers: u16, batches: u64) -> f64 {
    let spec = DatasetSpec::synthetic(5, vec![4], DType::U8, batches * 512, 512);
    let prep = PrepSpec {
        workers,
        prep_cost_us_per_sample: 100,
        aux_cost_us_per_batch: 0,
    };
    let pipeline = Arc::new(Pipeline::new(spec, prep).unwrap());
    let mut pool = PrepPool::spawn(pipeline, 1, workers as u64 * 2);
    let start = Instant::now();
    pool.set_running(true);
    let mut taken = 0;
    while taken < batches {
        if let Some(b) = pool.take_next() {
            b.unwrap();
            taken += 1;
            continue;
        }
        let out = pool.results().recv_timeout(Duration::from_secs(10)).expect("prep stalled");
        pool.accept(out);
    }
    batches as f64 / start.elapsed().as_secs_f64()
}

#[test]
fn prep_throughput_tracks_the_core_capped_model() {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get()) as f64;
    let cost = 100 * 512;

    let one = measure(1, 20);
    let expect_one = prep_rate(1.0, cost);
    assert!((expect_one - 19.53).abs() < 0.01);
    let dev = (one - expect_one).abs() / expect_one;
    assert!(dev <= TOLERANCE, "W=1: {one:.2} b/s vs {expect_one:.2} ({:.1}%)", dev * 100.0);

    let workers = 4u16;
    let many = measure(workers, 40);
    let expect_many = prep_rate((workers as f64).min(cores), cost);
    let dev = (many - expect_many).abs() / expect_many;
    assert!(
        dev <= TOLERANCE,
        "W={workers} on {cores} cores: {many:.2} b/s vs {expect_many:.2} ({:.1}%)",
        dev * 100.0
    );
}
