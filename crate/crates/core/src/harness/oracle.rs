//! Analytic bottleneck model for scenario throughput.

use serde::{Deserialize, Serialize};

use super::{Mode, ScenarioSpec};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleThroughput {
    pub per_consumer_batches: Vec<f64>,
    pub per_consumer_samples: Vec<f64>,
    pub aggregate_samples: f64,
}

/// Batches/s a consumer can train on when never starved.
pub fn consumer_rate(compute_us: u64) -> f64 {
    if compute_us == 0 {
        f64::INFINITY
    } else {
        1e6 / compute_us as f64
    }
}

/// Batches/s produced by `workers` worker-equivalents of CPU. Fractional
/// workers model loaders that share cores.
pub fn prep_rate(workers: f64, cost_us_per_batch: u64) -> f64 {
    if cost_us_per_batch == 0 {
        f64::INFINITY
    } else {
        workers * 1e6 / cost_us_per_batch as f64
    }
}

/// Expected steady-state throughput. Prep workers can use at most
/// `cores` CPUs in total; in non-shared mode those are split evenly across
/// the K loaders. Shared consumers are paced by the slowest one.
pub fn oracle_throughput(spec: &ScenarioSpec, cores: f64) -> OracleThroughput {
    let k = spec.consumers.len();
    let cost = spec.prep.cost_us_per_batch(spec.dataset.batch_size);
    let usable = (spec.prep.workers as f64).min(cores);
    let rates: Vec<f64> = spec.consumers.iter().map(|c| consumer_rate(c.compute_us)).collect();
    let per_consumer_batches: Vec<f64> = match spec.mode {
        Mode::Shared => {
            let slowest = rates.iter().copied().fold(f64::INFINITY, f64::min);
            let r = prep_rate(usable, cost).min(slowest);
            vec![r; k]
        }
        Mode::NonShared => {
            let per_loader = prep_rate(usable / k.max(1) as f64, cost);
            rates.iter().map(|&r| per_loader.min(r)).collect()
        }
    };
    let bs = spec.dataset.batch_size as f64;
    let per_consumer_samples: Vec<f64> = per_consumer_batches.iter().map(|b| b * bs).collect();
    OracleThroughput {
        aggregate_samples: per_consumer_samples.iter().sum(),
        per_consumer_batches,
        per_consumer_samples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::builtin;

    fn spec(mode: Mode, workers: u16, cost_per_sample: u64, compute: &[u64]) -> ScenarioSpec {
        let mut s = builtin::suite("prep-bound-4way").unwrap().runs[0].clone();
        s.mode = mode;
        s.prep.workers = workers;
        s.prep.prep_cost_us_per_sample = cost_per_sample;
        s.dataset.batch_size = 1;
        s.dataset.samples_per_epoch = 100;
        s.consumers = compute
            .iter()
            .map(|&c| super::super::ConsumerSpec {
                compute_us: c,
                ..Default::default()
            })
            .collect();
        s
    }

    #[test]
    fn prep_bound_sharing_doubles_per_consumer_rate() {
        // 100 b/s of prep in total, consumers want 50 b/s each.
        let shared = oracle_throughput(&spec(Mode::Shared, 4, 40_000, &[20_000; 4]), 64.0);
        let solo = oracle_throughput(&spec(Mode::NonShared, 4, 40_000, &[20_000; 4]), 64.0);
        assert!((shared.per_consumer_batches[0] - 50.0).abs() < 1e-9);
        assert!((solo.per_consumer_batches[0] - 25.0).abs() < 1e-9);
    }

    #[test]
    fn consumer_bound_modes_agree() {
        let a = oracle_throughput(&spec(Mode::Shared, 4, 100, &[20_000; 4]), 64.0);
        let b = oracle_throughput(&spec(Mode::NonShared, 4, 100, &[20_000; 4]), 64.0);
        assert_eq!(a.per_consumer_batches, b.per_consumer_batches);
        assert_eq!(a.per_consumer_batches[0], 50.0);
    }

    #[test]
    fn single_consumer_modes_agree() {
        for cost in [10, 1000, 100_000] {
            let a = oracle_throughput(&spec(Mode::Shared, 2, cost, &[5000]), 8.0);
            let b = oracle_throughput(&spec(Mode::NonShared, 2, cost, &[5000]), 8.0);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn cores_cap_the_workers() {
        let capped = oracle_throughput(&spec(Mode::Shared, 4, 10_000, &[0]), 1.0);
        assert!((capped.per_consumer_batches[0] - 100.0).abs() < 1e-9);
        let shared = oracle_throughput(&spec(Mode::NonShared, 4, 10_000, &[0; 4]), 1.0);
        assert!((shared.per_consumer_batches[0] - 25.0).abs() < 1e-9);
    }

    #[test]
    fn shared_pace_is_the_slowest_consumer() {
        let o = oracle_throughput(&spec(Mode::Shared, 4, 1, &[10_000, 20_000]), 4.0);
        assert_eq!(o.per_consumer_batches, vec![50.0, 50.0]);
        assert_eq!(o.aggregate_samples, 100.0);
    }
}
