mod common;

use std::sync::atomic::Ordering;
use std::sync::mpsc;
use std::time::Duration;

use batchsocket::consumer::{drive, ConsumerError, ConsumerReport, DriveOptions, Next};
use batchsocket::pipeline::{Pipeline, PrepSpec};
use batchsocket::producer::{EventKind, ProducerConfig};
use batchsocket::wire::{checksum, Admission};

use common::*;

fn indices(r: &ConsumerReport, epoch: u32) -> Vec<u64> {
    r.batches.iter().filter(|b| b.epoch == epoch).map(|b| b.batch_index).collect()
}

fn spawn_drive(
    session: batchsocket::consumer::ConsumerSession,
    opts: DriveOptions,
) -> std::thread::JoinHandle<ConsumerReport> {
    std::thread::spawn(move || drive(session, &opts, || {}))
}

#[test]
fn single_consumer_receives_every_batch_in_order() {
    let run = start(config(), dataset(10), PrepSpec::default());
    let session = run.connect(1);
    let r = drive(session, &DriveOptions::default(), || {});
    let (report, dir) = run.join();

    assert_eq!(indices(&r, 0), (0..10).collect::<Vec<_>>());
    assert!(r.ended_by_shutdown);
    assert_eq!(r.error, None);
    assert_eq!(report.announced, 10);
    assert_eq!(report.acks, 10);
    assert_eq!(report.end_live_segments, 0);
    assert_eq!(leftover_segments(&dir.path().join("shm")), 0);

    // Batches are a pure function of (seed, epoch, index): recompute independently.
    let oracle = Pipeline::new(dataset(10), PrepSpec::default()).unwrap();
    for b in &r.batches {
        let bytes = oracle.materialize(b.epoch, b.batch_index).unwrap().bytes;
        assert_eq!(b.checksum, checksum(&bytes));
    }
}

#[test]
fn three_consumers_each_ack_every_batch() {
    let cfg = ProducerConfig {
        await_consumers: 3,
        ..config()
    };
    let run = start(cfg, dataset(100), PrepSpec::default());
    let handles: Vec<_> = (1..=3).map(|id| spawn_drive(run.connect(id), DriveOptions::default())).collect();
    let reports: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    let (report, _dir) = run.join();

    assert_eq!(report.announced, 100);
    assert_eq!(report.acks, 300);
    assert_eq!(report.pipeline_calls, 100);
    assert!(report.max_drift <= 2, "drift {}", report.max_drift);
    for r in &reports {
        assert_eq!(indices(r, 0), (0..100).collect::<Vec<_>>());
    }
}

#[test]
fn epochs_are_delimited_by_boundaries() {
    let cfg = ProducerConfig {
        epoch_count: 3,
        await_consumers: 2,
        ..config()
    };
    let run = start(cfg, dataset(5), PrepSpec::default());
    let a = spawn_drive(run.connect(1), DriveOptions::default());
    let b = spawn_drive(run.connect(2), DriveOptions::default());
    let (a, b) = (a.join().unwrap(), b.join().unwrap());
    let (report, _dir) = run.join();
    assert_eq!(report.epochs_completed, 3);
    for r in [&a, &b] {
        assert_eq!(r.epochs.len(), 3);
        for e in 0..3 {
            assert_eq!(indices(r, e), (0..5).collect::<Vec<_>>());
        }
    }
    // Reshuffled epochs carry different contents.
    assert_ne!(a.batches[0].checksum, a.batches[5].checksum);
}

#[test]
fn idle_producer_does_not_advance_the_pipeline() {
    let run = start(config(), dataset(10), PrepSpec::default());
    std::thread::sleep(Duration::from_millis(300));
    run.stop.store(true, Ordering::Relaxed);
    let (report, _dir) = run.join();
    assert_eq!(report.pipeline_calls, 0);
    assert_eq!(report.announced, 0);
}

#[test]
fn wrong_protocol_version_is_refused() {
    let run = start(config(), dataset(4), PrepSpec::default());
    let mut c = run.consumer_config(9);
    c.protocol_version = 99;
    c.connect_timeout_ms = 2000;
    let err = batchsocket::consumer::ConsumerSession::connect(c).err().expect("must fail");
    assert!(matches!(err, ConsumerError::Connect(_)), "{err}");

    let r = drive(run.connect(1), &DriveOptions::default(), || {});
    assert_eq!(r.batches_received, 4);
    let (report, _dir) = run.join();
    assert!(report
        .events
        .iter()
        .any(|e| matches!(e.kind, EventKind::Rejected { consumer: 9, protocol_version: 99 })));
}

#[test]
fn slow_consumer_is_paced_without_loss() {
    let cfg = ProducerConfig {
        rubberband_fraction: 0.0,
        ..config()
    };
    let run = start(cfg, dataset(20), PrepSpec::default());
    let opts = DriveOptions {
        compute_us: 10_000,
        ..Default::default()
    };
    let r = drive(run.connect(1), &opts, || {});
    let (report, _dir) = run.join();
    assert_eq!(indices(&r, 0), (0..20).collect::<Vec<_>>());
    assert!(report.peak_live_segments <= 3, "peak {}", report.peak_live_segments);
}

#[test]
fn views_up_to_queue_capacity_can_be_held_together() {
    let run = start(config(), dataset(6), PrepSpec::default());
    let mut s = run.connect(1);
    assert_eq!(s.queue_capacity(), 2);
    let mut held = Vec::new();
    let mut seen = 0;
    loop {
        match s.next_batch().unwrap() {
            Next::Batch(v) => {
                held.push(v);
                seen += 1;
                if held.len() == 2 {
                    assert_ne!(held[0].bytes(), held[1].bytes());
                    assert_eq!(held[0].checksum(), held[0].descriptor.checksum);
                    held.clear();
                }
            }
            Next::EpochBoundary(_) => {}
            Next::EndOfStream => break,
        }
    }
    assert_eq!(seen, 6);
    drop(s);
    run.join();
}

/// Runs consumer 1 until it holds after `hold_after` batches, joins consumer 2
/// at that point, then lets both finish.
fn join_while_paused(
    cfg: ProducerConfig,
    epoch_len: u64,
    hold_after: u64,
) -> (ConsumerReport, ConsumerReport, batchsocket::producer::RunReport) {
    let run = start(cfg, dataset(epoch_len), PrepSpec::default());
    let (held_tx, held_rx) = mpsc::channel();
    let (resume_tx, resume_rx) = mpsc::channel::<()>();
    let first = run.connect(1);
    let a = std::thread::spawn(move || {
        let opts = DriveOptions {
            hold_after: Some(hold_after),
            ..Default::default()
        };
        drive(first, &opts, || {
            held_tx.send(()).unwrap();
            resume_rx.recv().unwrap();
        })
    });
    held_rx.recv().unwrap();
    // Let the producer fill the buffer up to the flow-control bound.
    std::thread::sleep(Duration::from_millis(100));
    let second = run.connect(2);
    let b = spawn_drive(second, DriveOptions::default());
    resume_tx.send(()).unwrap();
    let (a, b) = (a.join().unwrap(), b.join().unwrap());
    let (report, _dir) = run.join();
    (a, b, report)
}

#[test]
fn joiner_inside_window_gets_the_whole_epoch() {
    let cfg = ProducerConfig {
        epoch_count: 2,
        rubberband_fraction: 0.2,
        ..config()
    };
    let (a, b, report) = join_while_paused(cfg, 100, 5);
    let joins: Vec<_> = report.joins().collect();
    assert_eq!(joins[1].1, Admission::Rubberband);
    assert_eq!(joins[1].3, 7);
    for r in [&a, &b] {
        assert_eq!(indices(r, 0), (0..100).collect::<Vec<_>>());
        assert_eq!(indices(r, 1), (0..100).collect::<Vec<_>>());
    }
    assert_eq!(report.acks, 400);
    assert!(report.peak_live_in_window <= 20 + 2 + 1);
    assert!(report.peak_live_outside_window <= 3);
}

#[test]
fn joiner_past_window_waits_for_next_epoch() {
    let cfg = ProducerConfig {
        epoch_count: 2,
        rubberband_fraction: 0.02,
        ..config()
    };
    let (a, b, report) = join_while_paused(cfg, 50, 10);
    let joins: Vec<_> = report.joins().collect();
    assert_eq!(joins[1].1, Admission::WaitForNextEpoch);
    assert_eq!(b.welcome_epoch, 1);
    assert!(indices(&b, 0).is_empty());
    assert_eq!(indices(&b, 1), (0..50).collect::<Vec<_>>());
    assert_eq!(a.batches_received, 100);
}

#[test]
fn stalled_consumer_is_evicted_and_others_finish() {
    let cfg = ProducerConfig {
        heartbeat_timeout_ms: 300,
        await_consumers: 2,
        ..config()
    };
    let run = start(cfg, dataset(200), PrepSpec::default());
    let opts = DriveOptions {
        compute_us: 2_000,
        ..Default::default()
    };
    let a = spawn_drive(run.connect(1), opts.clone());
    let b = spawn_drive(
        run.connect(2),
        DriveOptions {
            stall_after_ms: Some(100),
            ..opts
        },
    );
    let (a, b) = (a.join().unwrap(), b.join().unwrap());
    let (report, dir) = run.join();

    assert_eq!(indices(&a, 0), (0..200).collect::<Vec<_>>());
    assert!(b.stalled_at_unix_ms.is_some());
    assert!(!b.ended_by_shutdown);
    let evicted: Vec<_> = report.evicted().collect();
    assert_eq!(evicted.len(), 1);
    assert_eq!(evicted[0].0, 2);
    let latency = evicted[0].1 as i64 - b.stalled_at_unix_ms.unwrap() as i64;
    assert!(latency <= 300 + 2 * 50 + 100, "eviction took {latency} ms");
    assert_eq!(report.end_live_segments, 0);
    assert_eq!(leftover_segments(&dir.path().join("shm")), 0);
}

#[test]
fn dropped_connection_releases_its_batches() {
    let cfg = ProducerConfig {
        await_consumers: 2,
        ..config()
    };
    let run = start(cfg, dataset(30), PrepSpec::default());
    let a = spawn_drive(
        run.connect(1),
        DriveOptions {
            compute_us: 1_000,
            ..Default::default()
        },
    );
    let mut b = run.connect(2);
    for _ in 0..3 {
        let _ = b.next_batch().unwrap();
    }
    drop(b);
    let a = a.join().unwrap();
    let (report, _dir) = run.join();
    assert_eq!(indices(&a, 0), (0..30).collect::<Vec<_>>());
    assert_eq!(report.evictions, 1);
    assert_eq!(report.end_live_segments, 0);
}

#[test]
fn consumer_leaving_after_its_epochs_says_bye() {
    let cfg = ProducerConfig {
        epoch_count: 3,
        await_consumers: 2,
        ..config()
    };
    let run = start(cfg, dataset(4), PrepSpec::default());
    let a = spawn_drive(run.connect(1), DriveOptions::default());
    let b = spawn_drive(
        run.connect(2),
        DriveOptions {
            max_epochs: Some(1),
            ..Default::default()
        },
    );
    let (a, b) = (a.join().unwrap(), b.join().unwrap());
    let (report, _dir) = run.join();
    assert_eq!(a.batches_received, 12);
    assert_eq!(b.batches_received, 4);
    assert_eq!(report.evictions, 0);
    assert!(report.events.iter().any(|e| matches!(e.kind, EventKind::Bye { consumer: 2 })));
}
