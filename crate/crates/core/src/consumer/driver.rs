//! Emulated training loop used by the CLI and the harness.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{ConsumerSession, Next};
use crate::metrics::{process_cpu_seconds, unix_millis};
use crate::pipeline::burn_cpu;
use crate::wire::Admission;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComputeMode {
    /// Sleep for the step time; models accelerator work that leaves the CPU free.
    #[default]
    Wait,
    /// Busy-spin on the CPU.
    Spin,
}

impl std::str::FromStr for ComputeMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "wait" => Ok(ComputeMode::Wait),
            "spin" => Ok(ComputeMode::Spin),
            _ => Err(format!("unknown compute mode {s:?} (wait|spin)")),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct DriveOptions {
    pub compute_us: u64,
    pub compute_mode: ComputeMode,
    /// Leave (with `Bye`) after this many epoch boundaries.
    pub max_epochs: Option<u32>,
    /// Invoke the hold callback after this many batches.
    pub hold_after: Option<u64>,
    /// Stop heartbeating and fetching this long after connecting.
    pub stall_after_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsumedBatch {
    pub epoch: u32,
    pub batch_index: u64,
    pub checksum: u32,
    pub t_unix_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: u32,
    pub batches: u64,
    pub samples: u64,
    pub first_batch_unix_ms: u64,
    pub end_unix_ms: u64,
    pub wall_seconds: f64,
    pub samples_per_sec: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsumerReport {
    pub consumer_id: u64,
    pub admitted: Option<Admission>,
    pub welcome_epoch: u32,
    pub batches_received: u64,
    pub samples_received: u64,
    /// Samples per second from the first fetch to the end of the last step.
    pub samples_per_sec: f64,
    pub batches_per_sec: f64,
    pub epochs: Vec<EpochStat>,
    pub batches: Vec<ConsumedBatch>,
    pub cpu_seconds: f64,
    pub wall_seconds: f64,
    pub stalled_at_unix_ms: Option<u64>,
    pub ended_by_shutdown: bool,
    pub error: Option<String>,
}

fn compute(mode: ComputeMode, us: u64) {
    if us == 0 {
        return;
    }
    match mode {
        ComputeMode::Wait => std::thread::sleep(Duration::from_micros(us)),
        ComputeMode::Spin => {
            burn_cpu(us);
        }
    }
}

struct EpochAcc {
    batches: u64,
    samples: u64,
    first: Option<(Instant, u64)>,
}

/// Runs the training loop until the stream ends, the epoch limit is reached,
/// or the session fails. Errors are recorded in the report.
pub fn drive(mut session: ConsumerSession, opts: &DriveOptions, mut on_hold: impl FnMut()) -> ConsumerReport {
    let started = Instant::now();
    let cpu0 = process_cpu_seconds();
    let welcome = session.welcome();
    let mut report = ConsumerReport {
        consumer_id: session.consumer_id(),
        admitted: Some(welcome.admitted),
        welcome_epoch: welcome.epoch,
        ..Default::default()
    };
    let mut acc = EpochAcc {
        batches: 0,
        samples: 0,
        first: None,
    };
    let mut first_fetch: Option<Instant> = None;
    let mut last_done = started;
    let mut leave = false;

    loop {
        if let Some(ms) = opts.stall_after_ms {
            if started.elapsed() >= Duration::from_millis(ms) {
                session.pause_heartbeats(true);
                report.stalled_at_unix_ms = Some(unix_millis());
                log::info!("consumer {} stalled", report.consumer_id);
                // Stay silent until the producer cuts the stream.
                session.wait_closed();
                break;
            }
        }
        match session.next_batch() {
            Ok(Next::Batch(view)) => {
                let now = Instant::now();
                first_fetch.get_or_insert(now);
                let d = &view.descriptor;
                let samples = d.shape.first().copied().unwrap_or(1);
                acc.first.get_or_insert((now, unix_millis()));
                acc.batches += 1;
                acc.samples += samples;
                report.batches.push(ConsumedBatch {
                    epoch: d.epoch,
                    batch_index: d.batch_index,
                    checksum: d.checksum,
                    t_unix_ms: unix_millis(),
                });
                report.batches_received += 1;
                report.samples_received += samples;
                compute(opts.compute_mode, opts.compute_us);
                session.release_view(view);
                last_done = Instant::now();
                if opts.hold_after == Some(report.batches_received) {
                    on_hold();
                }
            }
            Ok(Next::EpochBoundary(epoch)) => {
                if let Some((t0, t0_unix)) = acc.first.take() {
                    let wall = last_done.duration_since(t0).as_secs_f64();
                    report.epochs.push(EpochStat {
                        epoch,
                        batches: acc.batches,
                        samples: acc.samples,
                        first_batch_unix_ms: t0_unix,
                        end_unix_ms: unix_millis(),
                        wall_seconds: wall,
                        samples_per_sec: if wall > 0.0 { acc.samples as f64 / wall } else { 0.0 },
                    });
                }
                acc.batches = 0;
                acc.samples = 0;
                let done = report.epochs.len() as u32;
                if opts.max_epochs.is_some_and(|m| done >= m) {
                    leave = true;
                    break;
                }
            }
            Ok(Next::EndOfStream) => break,
            Err(e) => {
                report.error = Some(e.to_string());
                break;
            }
        }
    }

    report.ended_by_shutdown = session.shutdown_seen();
    if let Some(t0) = first_fetch {
        let span = last_done.duration_since(t0).as_secs_f64();
        if span > 0.0 {
            report.samples_per_sec = report.samples_received as f64 / span;
            report.batches_per_sec = report.batches_received as f64 / span;
        }
    }
    if leave {
        session.close();
    } else {
        drop(session);
    }
    report.cpu_seconds = process_cpu_seconds() - cpu0;
    report.wall_seconds = started.elapsed().as_secs_f64();
    report
}
