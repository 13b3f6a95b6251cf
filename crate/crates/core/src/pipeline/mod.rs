//! Batch preparation run by the producer.
//!
//! Sources are deterministic: synthetic samples are a pure function of
//! `(seed, epoch, sample index)` and directory samples are read through a
//! manifest, so a batch can be recomputed by anyone holding the `DatasetSpec`.
//! Pre-processing cost is emulated by burning thread CPU time.

mod pool;
pub mod rng;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::DType;

pub use pool::{PrepPool, PoolOutput};
use rng::{mix_seed, SplitMix64};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("sample {index} ({path}): {reason}")]
    Sample {
        index: u64,
        path: PathBuf,
        reason: String,
    },
    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("batch {batch_index} is past the end of the epoch ({epoch_len} batches)")]
    OutOfRange { batch_index: u64, epoch_len: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceKind {
    Synthetic {
        seed: u64,
        sample_shape: Vec<u64>,
        dtype: DType,
    },
    Directory { path: PathBuf, sample_bytes: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: SourceKind,
    pub samples_per_epoch: u64,
    pub batch_size: u32,
    #[serde(default)]
    pub shuffle_seed: u64,
    /// Reuse epoch 0's order for every epoch.
    #[serde(default)]
    pub no_reshuffle: bool,
}

impl DatasetSpec {
    pub fn synthetic(seed: u64, sample_shape: Vec<u64>, dtype: DType, samples: u64, batch_size: u32) -> Self {
        DatasetSpec {
            source: SourceKind::Synthetic {
                seed,
                sample_shape,
                dtype,
            },
            samples_per_epoch: samples,
            batch_size,
            shuffle_seed: seed,
            no_reshuffle: false,
        }
    }

    /// Full batches per epoch; the ragged remainder is dropped.
    pub fn epoch_len(&self) -> u64 {
        if self.batch_size == 0 {
            return 0;
        }
        self.samples_per_epoch / self.batch_size as u64
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.batch_size == 0 {
            return Err(PipelineError::Invalid("batch_size must be positive".into()));
        }
        if self.samples_per_epoch < self.batch_size as u64 {
            return Err(PipelineError::Invalid(format!(
                "samples_per_epoch {} is smaller than batch_size {}",
                self.samples_per_epoch, self.batch_size
            )));
        }
        match &self.source {
            SourceKind::Synthetic { sample_shape, .. } if sample_shape.len() >= crate::wire::MAX_NDIM => Err(
                PipelineError::Invalid("sample_shape leaves no room for the batch dimension".into()),
            ),
            SourceKind::Directory { sample_bytes: 0, .. } => {
                Err(PipelineError::Invalid("sample_bytes must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn dtype(&self) -> DType {
        match &self.source {
            SourceKind::Synthetic { dtype, .. } => *dtype,
            SourceKind::Directory { .. } => DType::U8,
        }
    }

    pub fn sample_shape(&self) -> Vec<u64> {
        match &self.source {
            SourceKind::Synthetic { sample_shape, .. } => sample_shape.clone(),
            SourceKind::Directory { sample_bytes, .. } => vec![*sample_bytes],
        }
    }

    pub fn batch_shape(&self) -> Vec<u64> {
        let mut shape = vec![self.batch_size as u64];
        shape.extend(self.sample_shape());
        shape
    }

    pub fn sample_bytes(&self) -> u64 {
        self.sample_shape().iter().product::<u64>() * self.dtype().size() as u64
    }

    pub fn batch_bytes(&self) -> u64 {
        self.sample_bytes() * self.batch_size as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrepSpec {
    pub workers: u16,
    #[serde(default)]
    pub prep_cost_us_per_sample: u64,
    #[serde(default)]
    pub aux_cost_us_per_batch: u64,
}

impl Default for PrepSpec {
    fn default() -> Self {
        PrepSpec {
            workers: 1,
            prep_cost_us_per_sample: 0,
            aux_cost_us_per_batch: 0,
        }
    }
}

impl PrepSpec {
    pub fn cost_us_per_batch(&self, batch_size: u32) -> u64 {
        self.prep_cost_us_per_sample * batch_size as u64 + self.aux_cost_us_per_batch
    }
}

/// Deterministic permutation of `0..n` for an epoch: Fisher–Yates driven by
/// SplitMix64 seeded from `(shuffle_seed, epoch)`.
pub fn epoch_order(shuffle_seed: u64, epoch: u32, n: u64) -> Vec<u64> {
    let mut order: Vec<u64> = (0..n).collect();
    let mut rng = SplitMix64::new(mix_seed(&[shuffle_seed, epoch as u64]));
    for i in (1..order.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        order.swap(i, j);
    }
    order
}

/// Analytic preparation throughput in batches per second.
pub fn prep_throughput(prep: &PrepSpec, spec: &DatasetSpec) -> f64 {
    let cost = prep.cost_us_per_batch(spec.batch_size) as f64;
    if cost == 0.0 {
        return f64::INFINITY;
    }
    prep.workers as f64 * 1e6 / cost
}

fn thread_cpu_time() -> Duration {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: valid out-pointer; the clock id is supported on Linux.
    unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    Duration::new(ts.tv_sec as u64, ts.tv_nsec as u32)
}

/// Burns `micros` of this thread's CPU time on a hash loop. Unlike a sleep,
/// the cost shows up in process CPU accounting and scales with contention.
pub fn burn_cpu(micros: u64) -> u64 {
    if micros == 0 {
        return 0;
    }
    let budget = Duration::from_micros(micros);
    let start = thread_cpu_time();
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    loop {
        for i in 0..512u64 {
            h = (h ^ i).wrapping_mul(0x0100_0000_01b3);
        }
        if thread_cpu_time() - start >= budget {
            return std::hint::black_box(h);
        }
    }
}

/// One prepared batch, before it is written into shared memory.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    pub epoch: u32,
    pub batch_index: u64,
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub bytes: Vec<u8>,
}

fn fill_synthetic(seed: u64, epoch: u32, sample: u64, dtype: DType, out: &mut [u8]) {
    let mut rng = SplitMix64::new(mix_seed(&[seed, epoch as u64, sample]));
    match dtype {
        DType::U8 => {
            for chunk in out.chunks_mut(8) {
                let v = rng.next_u64().to_le_bytes();
                chunk.copy_from_slice(&v[..chunk.len()]);
            }
        }
        DType::I32 => {
            for c in out.chunks_exact_mut(4) {
                c.copy_from_slice(&((rng.next_u64() >> 32) as i32).to_le_bytes());
            }
        }
        DType::I64 => {
            for c in out.chunks_exact_mut(8) {
                c.copy_from_slice(&(rng.next_u64() as i64).to_le_bytes());
            }
        }
        DType::F32 => {
            for c in out.chunks_exact_mut(4) {
                let v = (rng.next_u64() >> 40) as f32 / (1u32 << 24) as f32;
                c.copy_from_slice(&v.to_le_bytes());
            }
        }
        DType::F64 => {
            for c in out.chunks_exact_mut(8) {
                let v = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                c.copy_from_slice(&v.to_le_bytes());
            }
        }
    }
}

/// A dataset plus its pre-processing recipe; caches the current epoch order.
#[derive(Debug)]
pub struct Pipeline {
    spec: DatasetSpec,
    prep: PrepSpec,
    manifest: Option<Vec<PathBuf>>,
    order: Mutex<Option<(u32, Arc<Vec<u64>>)>>,
    calls: AtomicU64,
}

impl Pipeline {
    pub fn new(spec: DatasetSpec, prep: PrepSpec) -> Result<Self, PipelineError> {
        spec.validate()?;
        if prep.workers == 0 {
            return Err(PipelineError::Invalid("workers must be at least 1".into()));
        }
        let manifest = match &spec.source {
            SourceKind::Directory { path, .. } => {
                let files = read_manifest(path)?;
                if (files.len() as u64) < spec.samples_per_epoch {
                    return Err(PipelineError::Manifest {
                        path: path.join(MANIFEST_FILE),
                        reason: format!(
                            "lists {} samples, {} required",
                            files.len(),
                            spec.samples_per_epoch
                        ),
                    });
                }
                Some(files)
            }
            SourceKind::Synthetic { .. } => None,
        };
        Ok(Pipeline {
            spec,
            prep,
            manifest,
            order: Mutex::new(None),
            calls: AtomicU64::new(0),
        })
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn prep(&self) -> &PrepSpec {
        &self.prep
    }

    pub fn epoch_len(&self) -> u64 {
        self.spec.epoch_len()
    }

    /// How many batches have been prepared so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn order(&self, epoch: u32) -> Arc<Vec<u64>> {
        let effective = if self.spec.no_reshuffle { 0 } else { epoch };
        let mut cached = self.order.lock().unwrap();
        if let Some((e, o)) = cached.as_ref() {
            if *e == effective {
                return o.clone();
            }
        }
        let o = Arc::new(epoch_order(self.spec.shuffle_seed, effective, self.spec.samples_per_epoch));
        *cached = Some((effective, o.clone()));
        o
    }

    /// Builds the batch bytes without spending any emulated pre-processing cost.
    pub fn materialize(&self, epoch: u32, batch_index: u64) -> Result<PreparedBatch, PipelineError> {
        let epoch_len = self.epoch_len();
        if batch_index >= epoch_len {
            return Err(PipelineError::OutOfRange {
                batch_index,
                epoch_len,
            });
        }
        let order = self.order(epoch);
        let bs = self.spec.batch_size as usize;
        let sample_bytes = self.spec.sample_bytes() as usize;
        let mut bytes = vec![0u8; bs * sample_bytes];
        let first = batch_index as usize * bs;
        for (slot, &sample) in order[first..first + bs].iter().enumerate() {
            let out = &mut bytes[slot * sample_bytes..(slot + 1) * sample_bytes];
            match (&self.spec.source, &self.manifest) {
                (SourceKind::Synthetic { seed, dtype, .. }, _) => {
                    fill_synthetic(*seed, epoch, sample, *dtype, out)
                }
                (SourceKind::Directory { .. }, Some(files)) => {
                    read_sample(&files[sample as usize], sample, out)?
                }
                (SourceKind::Directory { .. }, None) => unreachable!("manifest loaded in new()"),
            }
        }
        Ok(PreparedBatch {
            epoch,
            batch_index,
            dtype: self.spec.dtype(),
            shape: self.spec.batch_shape(),
            bytes,
        })
    }

    /// Materializes a batch and then spends its emulated pre-processing and
    /// auxiliary-stage CPU cost.
    pub fn prepare_batch(&self, epoch: u32, batch_index: u64) -> Result<PreparedBatch, PipelineError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let batch = self.materialize(epoch, batch_index)?;
        burn_cpu(self.prep.prep_cost_us_per_sample * self.spec.batch_size as u64);
        burn_cpu(self.prep.aux_cost_us_per_batch);
        Ok(batch)
    }
}

/// One-shot form of [`Pipeline::prepare_batch`].
pub fn prepare_batch(
    spec: &DatasetSpec,
    prep: &PrepSpec,
    epoch: u32,
    batch_index: u64,
) -> Result<PreparedBatch, PipelineError> {
    Pipeline::new(spec.clone(), *prep)?.prepare_batch(epoch, batch_index)
}

fn read_sample(path: &Path, index: u64, out: &mut [u8]) -> Result<(), PipelineError> {
    use std::io::Read;
    let err = |reason: String| PipelineError::Sample {
        index,
        path: path.to_owned(),
        reason,
    };
    let mut f = std::fs::File::open(path).map_err(|e| err(e.to_string()))?;
    let mut got = 0;
    while got < out.len() {
        match f.read(&mut out[got..]) {
            Ok(0) => return Err(err(format!("short file: {got} of {} bytes", out.len()))),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(err(e.to_string())),
        }
    }
    Ok(())
}

/// Reads `manifest.txt`: one sample filename per line, relative to `dir`.
pub fn read_manifest(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::Manifest {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| dir.join(l))
        .collect())
}

pub fn sample_file_name(index: u64) -> String {
    format!("sample-{index:08}.bin")
}

/// Writes a directory dataset of `count` files with `sample_bytes` bytes each,
/// plus its manifest. Contents come from the synthetic u8 generator.
pub fn write_directory_dataset(dir: &Path, count: u64, sample_bytes: u64, seed: u64) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for i in 0..count {
        let name = sample_file_name(i);
        let mut buf = vec![0u8; sample_bytes as usize];
        fill_synthetic(seed, 0, i, DType::U8, &mut buf);
        std::fs::write(dir.join(&name), &buf)?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    std::fs::write(dir.join(MANIFEST_FILE), manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth(samples: u64, bs: u32) -> DatasetSpec {
        DatasetSpec::synthetic(1, vec![4], DType::F32, samples, bs)
    }

    #[test]
    fn epoch_order_is_deterministic_bijection() {
        let a = epoch_order(0, 0, 4);
        assert_eq!(a, epoch_order(0, 0, 4));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        let big = epoch_order(9, 3, 1000);
        let mut seen = vec![false; 1000];
        for &i in &big {
            assert!(!seen[i as usize]);
            seen[i as usize] = true;
        }
    }

    #[test]
    fn epochs_reshuffle() {
        let orders: Vec<_> = (0..100).map(|e| epoch_order(5, e, 1000)).collect();
        for i in 0..orders.len() {
            for j in i + 1..orders.len() {
                assert_ne!(orders[i], orders[j], "epochs {i} and {j} share an order");
            }
        }
    }

    #[test]
    fn no_reshuffle_pins_epoch_zero_order() {
        let mut spec = synth(64, 8);
        spec.no_reshuffle = true;
        let p = Pipeline::new(spec, PrepSpec::default()).unwrap();
        assert_eq!(*p.order(0), *p.order(7));
    }

    #[test]
    fn synthetic_batches_are_pure() {
        let spec = synth(64, 8);
        let prep = PrepSpec::default();
        let a = prepare_batch(&spec, &prep, 0, 0).unwrap();
        let b = prepare_batch(&spec, &prep, 0, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape, vec![8, 4]);
        assert_eq!(a.bytes.len(), 8 * 4 * 4);
        assert_ne!(a.bytes, prepare_batch(&spec, &prep, 0, 1).unwrap().bytes);
        assert_ne!(a.bytes, prepare_batch(&spec, &prep, 1, 0).unwrap().bytes);
        for c in a.bytes.chunks_exact(4) {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn drop_last_and_range() {
        let spec = synth(70, 8);
        assert_eq!(spec.epoch_len(), 8);
        let p = Pipeline::new(spec, PrepSpec::default()).unwrap();
        assert!(matches!(p.materialize(0, 8), Err(PipelineError::OutOfRange { .. })));
        assert!(Pipeline::new(synth(4, 8), PrepSpec::default()).is_err());
    }

    #[test]
    fn throughput_model() {
        let spec = DatasetSpec::synthetic(0, vec![1], DType::U8, 512, 512);
        let four = PrepSpec {
            workers: 4,
            prep_cost_us_per_sample: 100,
            aux_cost_us_per_batch: 0,
        };
        assert!((prep_throughput(&four, &spec) - 78.125).abs() < 1e-9);
        let eight = PrepSpec { workers: 8, ..four };
        assert!((prep_throughput(&eight, &spec) - 2.0 * prep_throughput(&four, &spec)).abs() < 1e-9);
        let aux = PrepSpec {
            workers: 1,
            prep_cost_us_per_sample: 0,
            aux_cost_us_per_batch: 50_000,
        };
        assert!((prep_throughput(&aux, &spec) - 20.0).abs() < 1e-9);
        assert!(prep_throughput(&PrepSpec::default(), &spec).is_infinite());
    }

    #[test]
    fn burn_cpu_consumes_thread_time() {
        let before = thread_cpu_time();
        burn_cpu(20_000);
        assert!(thread_cpu_time() - before >= Duration::from_millis(20));
    }

    #[test]
    fn directory_source() {
        let dir = tempfile::tempdir().unwrap();
        write_directory_dataset(dir.path(), 10, 16, 3).unwrap();
        let spec = DatasetSpec {
            source: SourceKind::Directory {
                path: dir.path().to_owned(),
                sample_bytes: 16,
            },
            samples_per_epoch: 10,
            batch_size: 5,
            shuffle_seed: 2,
            no_reshuffle: false,
        };
        let p = Pipeline::new(spec.clone(), PrepSpec::default()).unwrap();
        let b = p.materialize(0, 1).unwrap();
        assert_eq!(b.shape, vec![5, 16]);
        let order = p.order(0);
        for slot in 0..5 {
            let want = std::fs::read(dir.path().join(sample_file_name(order[5 + slot]))).unwrap();
            assert_eq!(&b.bytes[slot * 16..(slot + 1) * 16], &want[..]);
        }
        assert_eq!(b, Pipeline::new(spec, PrepSpec::default()).unwrap().materialize(0, 1).unwrap());

        // A short sample is reported by index.
        std::fs::write(dir.path().join(sample_file_name(order[0])), [0u8; 3]).unwrap();
        match p.materialize(0, 0) {
            Err(PipelineError::Sample { index, .. }) => assert_eq!(index, order[0]),
            other => panic!("expected sample error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_must_cover_epoch() {
        let dir = tempfile::tempdir().unwrap();
        write_directory_dataset(dir.path(), 4, 8, 0).unwrap();
        let spec = DatasetSpec {
            source: SourceKind::Directory {
                path: dir.path().to_owned(),
                sample_bytes: 8,
            },
            samples_per_epoch: 8,
            batch_size: 2,
            shuffle_seed: 0,
            no_reshuffle: false,
        };
        assert!(matches!(
            Pipeline::new(spec, PrepSpec::default()),
            Err(PipelineError::Manifest { .. })
        ));
    }
}
