//! Pass/fail evaluation of a metrics report.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Comparison, ConsumerMetrics, Fault, MetricsReport, Mode, RunMetrics};
use crate::producer::{EventKind, RunReport};
use crate::wire::Admission;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Expected shared / non-shared per-consumer ratio on prep-bound runs.
    pub speedup_target: f64,
    pub speedup_rel: f64,
    pub parity_rel: f64,
    pub oracle_rel: f64,
    pub cpu_ratio_max: f64,
    pub pacing_rel: f64,
    pub scaling_rel: f64,
    pub runtime_max_s: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            speedup_target: 2.0,
            speedup_rel: 0.15,
            parity_rel: 0.10,
            oracle_rel: 0.15,
            cpu_ratio_max: 0.35,
            pacing_rel: 0.10,
            scaling_rel: 0.10,
            runtime_max_s: 120.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub criterion: u8,
    pub check: String,
    pub run: String,
    pub pass: bool,
    pub detail: String,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "criterion {:>2} {:<14} {:<12} {}: {}",
            self.criterion,
            self.check,
            self.run,
            if self.pass { "PASS" } else { "FAIL" },
            self.detail
        )
    }
}

struct Out(Vec<Verdict>);

impl Out {
    fn push(&mut self, criterion: u8, check: &str, run: &str, pass: bool, detail: String) {
        self.0.push(Verdict {
            criterion,
            check: check.into(),
            run: run.into(),
            pass,
            detail,
        });
    }
}

fn rel(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        f64::INFINITY
    } else {
        (a - b).abs() / b.abs()
    }
}

fn producer_for(run: &RunMetrics, consumer: u64) -> &RunReport {
    if run.producers.len() == 1 {
        &run.producers[0]
    } else {
        &run.producers[(consumer - 1) as usize]
    }
}

/// Mean per-consumer samples/s over consumers that reported.
fn mean_rate(run: &RunMetrics) -> f64 {
    let rates: Vec<f64> = run
        .consumers
        .iter()
        .filter(|c| c.report.is_some())
        .map(|c| c.samples_per_sec)
        .collect();
    if rates.is_empty() {
        0.0
    } else {
        rates.iter().sum::<f64>() / rates.len() as f64
    }
}

fn mean_oracle(run: &RunMetrics) -> f64 {
    let o = &run.oracle.per_consumer_samples;
    if o.is_empty() {
        0.0
    } else {
        o.iter().sum::<f64>() / o.len() as f64
    }
}

fn by_mode(report: &MetricsReport, mode: Mode) -> Option<&RunMetrics> {
    report.runs.iter().find(|r| r.spec.mode == mode)
}

/// Every epoch the consumer was admitted for is complete, in order, with the
/// producer's checksums, and nothing else was delivered.
fn exactly_once(run: &RunMetrics, c: &ConsumerMetrics) -> Result<u64, String> {
    let r = c.report.as_ref().ok_or("no consumer report")?;
    if let Some(e) = &r.error {
        return Err(format!("consumer error: {e}"));
    }
    if !r.ended_by_shutdown {
        return Err("stream ended without Shutdown".into());
    }
    let p = producer_for(run, c.id);
    let checksums: HashMap<(u32, u64), u32> = p
        .announced_batches
        .iter()
        .map(|b| ((b.epoch, b.batch_index), b.checksum))
        .collect();
    let e_len = p.epoch_len;
    let mut by_epoch: HashMap<u32, Vec<u64>> = HashMap::new();
    for b in &r.batches {
        match checksums.get(&(b.epoch, b.batch_index)) {
            Some(&sum) if sum == b.checksum => {}
            Some(_) => return Err(format!("checksum mismatch at {}/{}", b.epoch, b.batch_index)),
            None => return Err(format!("batch {}/{} was never announced", b.epoch, b.batch_index)),
        }
        by_epoch.entry(b.epoch).or_default().push(b.batch_index);
    }
    let admitted = r.welcome_epoch..run.spec.epochs;
    let mut full = 0;
    for (epoch, seq) in &by_epoch {
        if !admitted.contains(epoch) {
            return Err(format!("received {} batches of epoch {epoch} before admission", seq.len()));
        }
    }
    for epoch in admitted {
        let seq = by_epoch.remove(&epoch).unwrap_or_default();
        if seq.len() as u64 != e_len || seq.iter().enumerate().any(|(i, &b)| b != i as u64) {
            let first_bad = seq.iter().enumerate().find(|(i, &b)| b != *i as u64);
            return Err(format!(
                "epoch {epoch}: {} of {e_len} batches, first out of order {:?}",
                seq.len(),
                first_bad
            ));
        }
        full += 1;
    }
    Ok(full)
}

fn generic(out: &mut Out, run: &RunMetrics) {
    let label = run.spec.label.as_str();
    let depth = run.spec.producer.buffer_depth as u64;

    if run.spec.is_clean() {
        let series_max = run
            .producers
            .iter()
            .flat_map(|p| p.drift.iter().map(|s| s.1))
            .max()
            .unwrap_or(0);
        out.push(
            4,
            "drift",
            label,
            series_max <= depth,
            format!("max drift {series_max} (bound {depth})"),
        );
    }

    let mut failures = Vec::new();
    let mut epochs = 0;
    for c in &run.consumers {
        if run.spec.is_faulted(c.id) {
            continue;
        }
        match exactly_once(run, c) {
            Ok(n) => epochs += n,
            Err(e) => failures.push(format!("consumer {}: {e}", c.id)),
        }
    }
    out.push(
        5,
        "exactly-once",
        label,
        failures.is_empty(),
        if failures.is_empty() {
            format!("{epochs} complete consumer-epochs")
        } else {
            failures.join("; ")
        },
    );

    let batch_bytes = run.spec.dataset.batch_bytes();
    let mut mem = Vec::new();
    let mut ok = true;
    for p in &run.producers {
        let window = p.rubberband_window;
        ok &= p.peak_live_outside_window <= depth + 1;
        ok &= p.peak_live_in_window <= window + depth + 1;
        let per_epoch = p.payload_bytes_written / p.epochs_completed.max(1) as u64;
        ok &= per_epoch == p.epoch_len * batch_bytes;
        ok &= p.end_live_segments == 0;
        mem.push(format!(
            "outside {} <= {}, inside {} <= {}, {per_epoch} B/epoch",
            p.peak_live_outside_window,
            depth + 1,
            p.peak_live_in_window,
            window + depth + 1
        ));
    }
    ok &= run.leaked_segments == 0;
    mem.dedup();
    out.push(
        8,
        "memory",
        label,
        ok,
        format!("{}; leaked {}", mem.join("; "), run.leaked_segments),
    );
}

fn oracle_check(out: &mut Out, criterion: u8, run: &RunMetrics, tol: f64) {
    let mut worst: f64 = 0.0;
    for (c, o) in run.consumers.iter().zip(&run.oracle.per_consumer_samples) {
        if c.report.is_some() {
            worst = worst.max(rel(c.samples_per_sec, *o));
        }
    }
    out.push(
        criterion,
        "oracle",
        &run.spec.label,
        worst <= tol,
        format!(
            "mean {:.0} vs oracle {:.0} samples/s, worst deviation {:.1}%",
            mean_rate(run),
            mean_oracle(run),
            worst * 100.0
        ),
    );
}

fn speedup(out: &mut Out, report: &MetricsReport, tol: &Tolerances) {
    let (Some(s), Some(n)) = (by_mode(report, Mode::Shared), by_mode(report, Mode::NonShared)) else {
        out.push(1, "speedup", "", false, "needs a shared and a non-shared run".into());
        return;
    };
    let ratio = mean_rate(s) / mean_rate(n);
    out.push(
        1,
        "speedup",
        "",
        rel(ratio, tol.speedup_target) <= tol.speedup_rel,
        format!(
            "shared {:.0} / non-shared {:.0} samples/s = {ratio:.2} (target {} +/- {:.0}%)",
            mean_rate(s),
            mean_rate(n),
            tol.speedup_target,
            tol.speedup_rel * 100.0
        ),
    );
    let wall = s.wall_seconds + n.wall_seconds;
    out.push(
        1,
        "runtime",
        "",
        wall < tol.runtime_max_s,
        format!("{wall:.1}s for both runs"),
    );
    oracle_check(out, 1, s, tol.oracle_rel);
    oracle_check(out, 1, n, tol.oracle_rel);

    let delivered = |r: &RunMetrics| -> u64 {
        r.consumers
            .iter()
            .filter_map(|c| c.report.as_ref())
            .map(|c| c.batches_received)
            .sum()
    };
    let cpu = s.producer_cpu_seconds / n.producer_cpu_seconds;
    let same = delivered(s) == delivered(n);
    out.push(
        3,
        "cpu-sharing",
        "",
        same && cpu <= tol.cpu_ratio_max,
        format!(
            "prep CPU {:.2}s shared vs {:.2}s non-shared = {cpu:.3} (max {}), delivered {} vs {}",
            s.producer_cpu_seconds,
            n.producer_cpu_seconds,
            tol.cpu_ratio_max,
            delivered(s),
            delivered(n)
        ),
    );
}

fn parity(out: &mut Out, report: &MetricsReport, tol: &Tolerances) {
    let (Some(s), Some(n)) = (by_mode(report, Mode::Shared), by_mode(report, Mode::NonShared)) else {
        out.push(2, "parity", "", false, "needs a shared and a non-shared run".into());
        return;
    };
    let (ms, mn) = (mean_rate(s), mean_rate(n));
    out.push(
        2,
        "parity",
        "",
        rel(ms, mn) <= tol.parity_rel,
        format!("shared {ms:.0} vs non-shared {mn:.0} samples/s"),
    );
    oracle_check(out, 2, s, tol.parity_rel);
    oracle_check(out, 2, n, tol.parity_rel);
}

fn rubberband(out: &mut Out, report: &MetricsReport) {
    for run in &report.runs {
        let Some((joiner, progress)) = run.spec.faults.iter().find_map(|f| match f {
            Fault::Join { consumer, at_progress } => Some((*consumer, *at_progress)),
            _ => None,
        }) else {
            continue;
        };
        let p = &run.producers[0];
        let window = p.rubberband_window;
        let join = p.joins().find(|j| j.0 == joiner);
        let expect = if progress < window {
            Admission::Rubberband
        } else {
            Admission::WaitForNextEpoch
        };
        let r = run.consumers[(joiner - 1) as usize].report.as_ref();
        let count = |e: u32| r.map_or(0, |r| r.batches.iter().filter(|b| b.epoch == e).count() as u64);
        let (first, second) = (count(0), count(1));
        let pass = match (join, expect) {
            (Some((_, adm, 0, at)), Admission::Rubberband) => {
                adm == expect
                    && at == progress
                    && halted_for(p, joiner)
                    && first == p.epoch_len
                    && second == p.epoch_len
            }
            (Some((_, adm, 0, at)), _) => adm == expect && at == progress && first == 0 && second == p.epoch_len,
            _ => false,
        };
        out.push(
            6,
            "rubberband",
            &run.spec.label,
            pass,
            format!(
                "join {:?} (window {window}); joiner got {first} batches of epoch 0, {second} of epoch 1",
                join.map(|j| (j.1, j.3)),
            ),
        );
    }
}

fn eviction(out: &mut Out, report: &MetricsReport) {
    for run in &report.runs {
        let p = &run.producers[0];
        let cfg = &run.spec.producer;
        let bound = cfg.heartbeat_timeout_ms + 2 * cfg.pause_poll_interval_ms;
        let mut notes = Vec::new();
        let mut pass = true;
        let mut faulted = 0;
        for f in &run.spec.faults {
            let (id, started) = match f {
                Fault::Stall { consumer, .. } => {
                    let stalled = run.consumers[(*consumer - 1) as usize]
                        .report
                        .as_ref()
                        .and_then(|r| r.stalled_at_unix_ms);
                    (*consumer, stalled)
                }
                Fault::Kill { consumer, .. } => (*consumer, run.consumers[(*consumer - 1) as usize].killed_at_unix_ms),
                Fault::Join { .. } => continue,
            };
            faulted += 1;
            let evicted = p.evicted().find(|e| e.0 == id).map(|e| e.1);
            match (started, evicted) {
                (Some(s), Some(e)) => {
                    let latency = e as i64 - s as i64;
                    let ok = match f {
                        Fault::Stall { .. } => latency <= bound as i64,
                        _ => true,
                    };
                    pass &= ok;
                    notes.push(format!("consumer {id} evicted {latency} ms after fault (bound {bound})"));
                }
                _ => {
                    pass = false;
                    notes.push(format!("consumer {id}: fault at {started:?}, eviction at {evicted:?}"));
                }
            }
        }
        pass &= p.evictions == faulted;
        for c in &run.consumers {
            if !run.spec.is_faulted(c.id) {
                if let Err(e) = exactly_once(run, c) {
                    pass = false;
                    notes.push(format!("survivor {}: {e}", c.id));
                }
            }
        }
        pass &= p.end_live_segments == 0 && run.leaked_segments == 0;
        notes.push(format!(
            "{} evictions, end live {}, leaked {}",
            p.evictions, p.end_live_segments, run.leaked_segments
        ));
        out.push(7, "eviction", &run.spec.label, pass, notes.join("; "));
    }
}

fn pacing(out: &mut Out, report: &MetricsReport, tol: &Tolerances) {
    let solo = report.runs.iter().find(|r| r.spec.label == "solo");
    let mixed = report.runs.iter().find(|r| r.spec.label != "solo");
    let (Some(solo), Some(mixed)) = (solo, mixed) else {
        out.push(9, "pacing", "", false, "needs a `solo` run and a mixed run".into());
        return;
    };
    let epoch_walls = |r: &RunMetrics| -> Vec<f64> {
        r.consumers
            .iter()
            .filter_map(|c| c.report.as_ref())
            .filter_map(|c| c.epochs.first().map(|e| e.wall_seconds))
            .collect()
    };
    let walls = epoch_walls(mixed);
    let solo_wall = epoch_walls(solo).first().copied().unwrap_or(0.0);
    let hi = walls.iter().copied().fold(0.0, f64::max);
    let lo = walls.iter().copied().fold(f64::INFINITY, f64::min);
    let pass = walls.len() == mixed.consumers.len()
        && rel(lo, hi) <= tol.pacing_rel
        && walls.iter().all(|&w| rel(w, solo_wall) <= tol.pacing_rel);
    out.push(
        9,
        "pacing",
        "",
        pass,
        format!("epoch walls {walls:.2?} s vs solo {solo_wall:.2} s"),
    );
}

fn scaling(out: &mut Out, report: &MetricsReport, tol: &Tolerances) {
    let mut runs: Vec<&RunMetrics> = report.runs.iter().filter(|r| r.spec.mode == Mode::Shared).collect();
    runs.sort_by_key(|r| r.spec.consumers.len());
    let Some(base) = runs.first() else {
        out.push(10, "scaling", "", false, "no shared runs".into());
        return;
    };
    let base_rate = mean_rate(base);
    let mut prev_agg = 0.0;
    let mut pass = true;
    let mut notes = Vec::new();
    for r in &runs {
        // Only runs the oracle places below prep capacity are expected to stay flat.
        let consumer_bound = r
            .spec
            .consumers
            .iter()
            .zip(&r.oracle.per_consumer_batches)
            .all(|(c, o)| (super::consumer_rate(c.compute_us) - o).abs() < 1e-9);
        if !consumer_bound {
            notes.push(format!("K={} past the consumer bound", r.spec.consumers.len()));
            continue;
        }
        let per = mean_rate(r);
        let agg = r.aggregate_samples_per_sec;
        pass &= agg >= prev_agg && rel(per, base_rate) <= tol.scaling_rel;
        prev_agg = agg;
        notes.push(format!("K={}: {per:.0}/consumer, {agg:.0} total", r.spec.consumers.len()));
    }
    out.push(10, "scaling", "", pass, notes.join("; "));
}

/// Evaluates every criterion that applies to the report's suite.
pub fn check_acceptance(report: &MetricsReport, tol: &Tolerances) -> Vec<Verdict> {
    let mut out = Out(Vec::new());
    for run in &report.runs {
        generic(&mut out, run);
    }
    match report.compare {
        Comparison::None => {}
        Comparison::Speedup => speedup(&mut out, report, tol),
        Comparison::Parity => parity(&mut out, report, tol),
        Comparison::Rubberband => rubberband(&mut out, report),
        Comparison::Eviction => eviction(&mut out, report),
        Comparison::Pacing => pacing(&mut out, report, tol),
        Comparison::Scaling => scaling(&mut out, report, tol),
    }
    out.0
}

/// Whether the run's event log contains a halt for the given consumer.
fn halted_for(report: &RunReport, consumer: u64) -> bool {
    report
        .events
        .iter()
        .any(|e| matches!(e.kind, EventKind::HaltStart { consumer: c, .. } if c == consumer))
}
