//! Canned suites.
//!
//! Sizes assume nothing about the host beyond one core: consumer steps are
//! timed waits and prep cost is the only CPU-heavy work, so the prep-bound
//! suites saturate whatever cores the loaders can use.

use super::{Comparison, ConsumerSpec, Fault, Mode, ScenarioSpec, Suite};
use crate::pipeline::{DatasetSpec, PrepSpec};
use crate::producer::ProducerConfig;
use crate::wire::DType;

const NAMES: [(&str, &str); 6] = [
    ("prep-bound-4way", "K=4, prep capacity twice one consumer's demand; shared vs non-shared"),
    ("consumer-bound-4way", "K=4, prep far above demand; shared vs non-shared"),
    ("mixed-speeds", "two consumers at 1x and 2x step time, plus the slow one alone"),
    ("late-joiner", "epoch of 1000, 2% window; joins at progress 15 and 25"),
    ("kill-consumer", "K=3; consumer 2 stalls (and, separately, is killed) mid-epoch"),
    ("scaling-1to8", "fixed workers, K in 1, 2, 4, 8"),
];

pub fn list() -> impl Iterator<Item = (&'static str, &'static str)> {
    NAMES.into_iter()
}

/// 32 samples of 16 f32 per batch.
fn dataset(epoch_len: u64) -> DatasetSpec {
    DatasetSpec::synthetic(1, vec![16], DType::F32, epoch_len * 32, 32)
}

fn consumers(compute_us: &[u64]) -> Vec<ConsumerSpec> {
    compute_us
        .iter()
        .map(|&c| ConsumerSpec {
            compute_us: c,
            ..Default::default()
        })
        .collect()
}

fn run(label: &str, mode: Mode, compute_us: &[u64], workers: u16, prep_us: u64, epoch_len: u64) -> ScenarioSpec {
    ScenarioSpec {
        label: label.into(),
        mode,
        consumers: consumers(compute_us),
        prep: PrepSpec {
            workers,
            prep_cost_us_per_sample: prep_us,
            aux_cost_us_per_batch: 0,
        },
        epochs: 1,
        dataset: dataset(epoch_len),
        producer: ProducerConfig::default(),
        faults: Vec::new(),
        timeout_s: 120,
    }
}

pub fn suite(name: &str) -> Option<Suite> {
    let (compare, runs) = match name {
        // 8 ms of prep per batch: 125 batches/s per core, consumers want 62.5.
        "prep-bound-4way" => (
            Comparison::Speedup,
            vec![
                run("shared", Mode::Shared, &[16_000; 4], 4, 250, 300),
                run("non-shared", Mode::NonShared, &[16_000; 4], 4, 250, 300),
            ],
        ),
        "consumer-bound-4way" => (
            Comparison::Parity,
            vec![
                run("shared", Mode::Shared, &[20_000; 4], 4, 10, 100),
                run("non-shared", Mode::NonShared, &[20_000; 4], 4, 10, 100),
            ],
        ),
        "mixed-speeds" => (
            Comparison::Pacing,
            vec![
                run("mixed", Mode::Shared, &[10_000, 20_000], 2, 10, 150),
                run("solo", Mode::Shared, &[20_000], 2, 10, 150),
            ],
        ),
        "late-joiner" => {
            let make = |p: u64| {
                let mut r = run(&format!("join-at-{p}"), Mode::Shared, &[500, 500], 1, 0, 1000);
                r.dataset = DatasetSpec::synthetic(3, vec![4], DType::F32, 4000, 4);
                r.epochs = 2;
                r.faults = vec![Fault::Join {
                    consumer: 2,
                    at_progress: p,
                }];
                r
            };
            (Comparison::Rubberband, vec![make(15), make(25)])
        }
        "kill-consumer" => {
            let make = |label: &str, fault: Fault| {
                let mut r = run(label, Mode::Shared, &[5_000; 3], 2, 10, 300);
                r.producer.heartbeat_interval_ms = 100;
                r.producer.heartbeat_timeout_ms = 500;
                r.producer.pause_poll_interval_ms = 50;
                r.faults = vec![fault];
                r
            };
            (
                Comparison::Eviction,
                vec![
                    make(
                        "stall",
                        Fault::Stall {
                            consumer: 2,
                            after_ms: 500,
                        },
                    ),
                    make(
                        "kill",
                        Fault::Kill {
                            consumer: 2,
                            after_ms: 500,
                        },
                    ),
                ],
            )
        }
        "scaling-1to8" => (
            Comparison::Scaling,
            [1usize, 2, 4, 8]
                .iter()
                .map(|&k| run(&format!("k={k}"), Mode::Shared, &vec![20_000; k], 2, 20, 100))
                .collect(),
        ),
        _ => return None,
    };
    let description = NAMES.iter().find(|(n, _)| *n == name).map(|(_, d)| d.to_string())?;
    Some(Suite {
        name: name.into(),
        description,
        compare,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_builtin_is_valid() {
        for (name, _) in list() {
            let s = suite(name).unwrap();
            assert!(!s.runs.is_empty());
            for r in &s.runs {
                r.validate().unwrap_or_else(|e| panic!("{name}/{}: {e}", r.label));
            }
        }
        assert!(suite("nope").is_none());
    }

    #[test]
    fn suites_round_trip_through_toml() {
        for (name, _) in list() {
            let s = suite(name).unwrap();
            let text = toml::to_string(&s).unwrap();
            let back: Suite = toml::from_str(&text).unwrap();
            assert_eq!(back, s);
        }
    }

    #[test]
    fn late_joiner_window_is_twenty() {
        let s = suite("late-joiner").unwrap();
        let r = &s.runs[0];
        assert_eq!(r.dataset.epoch_len(), 1000);
        assert_eq!(
            crate::producer::rubberband_window(r.producer.rubberband_fraction, 1000),
            20
        );
    }
}
