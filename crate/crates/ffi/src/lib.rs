//! C ABI over the batchsocket consumer and producer.
//!
//! Every function returns a [`BsStatus`]; on failure the thread-local message
//! from [`bs_last_error_message`] says what went wrong. Handles are opaque and
//! must be released with the matching close/free function. A batch handle
//! keeps its segment mapped until [`bs_batch_release`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use batchsocket::consumer::{ConsumerConfig, ConsumerError, ConsumerSession, Next};
use batchsocket::payload::{BatchView, DEFAULT_SHM_DIR};
use batchsocket::pipeline::{DatasetSpec, Pipeline, PrepSpec};
use batchsocket::producer::{endpoints_from_env, Producer, ProducerConfig, ProducerError};
use batchsocket::transport::Endpoint;
use batchsocket::wire::{self, DType};

/// Capacity of the shape arrays.
pub const BS_MAX_NDIM: usize = 8;
const MAX_NDIM: usize = BS_MAX_NDIM;
const _: () = assert!(BS_MAX_NDIM == wire::MAX_NDIM);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BsStatus {
    Ok = 0,
    /// `bs_consumer_next` reached the end of an epoch.
    EpochEnd = 1,
    /// `bs_consumer_next` has nothing more to deliver.
    EndOfStream = 2,
    NullArgument = -1,
    InvalidArgument = -2,
    Connect = -3,
    Protocol = -4,
    Payload = -5,
    Io = -6,
    Panic = -7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BsConsumerOptions {
    pub consumer_id: u64,
    /// NUL-terminated endpoint; NULL reads `BATCHSOCKET_BROADCAST` or the default.
    pub broadcast: *const c_char,
    /// NUL-terminated endpoint; NULL reads `BATCHSOCKET_AGGREGATE` or the default.
    pub aggregate: *const c_char,
    /// NULL means `/dev/shm`.
    pub shm_dir: *const c_char,
    pub heartbeat_interval_ms: u64,
    pub connect_timeout_ms: u64,
    /// 0 takes the producer's buffer depth.
    pub queue_capacity: u16,
    pub verify_checksums: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BsWelcome {
    pub epoch: u32,
    pub epoch_len: u64,
    pub buffer_depth: u16,
    /// 0 wait for next epoch, 1 rubberband, 2 immediate.
    pub admission: u8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BsBatchInfo {
    pub epoch: u32,
    pub batch_index: u64,
    /// Wire dtype code: 0 u8, 1 i32, 2 i64, 3 f32, 4 f64.
    pub dtype: u8,
    pub ndim: u8,
    pub shape: [u64; BS_MAX_NDIM],
    pub byte_len: u64,
    pub checksum: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BsProducerOptions {
    pub broadcast: *const c_char,
    pub aggregate: *const c_char,
    pub shm_dir: *const c_char,
    pub epochs: u32,
    pub epoch_len: u64,
    pub batch_size: u32,
    pub sample_ndim: u8,
    pub sample_shape: [u64; BS_MAX_NDIM],
    pub dtype: u8,
    pub seed: u64,
    pub buffer_depth: u16,
    pub rubberband_fraction: f64,
    pub heartbeat_interval_ms: u64,
    pub heartbeat_timeout_ms: u64,
    pub pause_poll_interval_ms: u64,
    pub await_consumers: u32,
    pub workers: u16,
    pub prep_cost_us_per_sample: u64,
    pub verify_checksums: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BsRunSummary {
    pub announced: u64,
    pub acks: u64,
    pub evictions: u64,
    pub epochs_completed: u32,
    pub pipeline_calls: u64,
    pub payload_bytes_written: u64,
    pub peak_live_segments: u64,
}

/// Connected consumer session.
pub struct BsConsumer {
    session: ConsumerSession,
}

/// One mapped batch.
pub struct BsBatch {
    view: BatchView,
}

/// Bound producer, run once.
pub struct BsProducer {
    producer: Mutex<Option<(Producer, Pipeline)>>,
    stop: Arc<AtomicBool>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

struct Failure(BsStatus, String);

type FfiResult<T> = Result<T, Failure>;

fn fail<T>(status: BsStatus, msg: impl Into<String>) -> FfiResult<T> {
    Err(Failure(status, msg.into()))
}

fn guard(f: impl FnOnce() -> FfiResult<BsStatus>) -> BsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(s)) => s,
        Ok(Err(Failure(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("panic inside batchsocket");
            BsStatus::Panic
        }
    }
}

fn consumer_status(e: &ConsumerError) -> BsStatus {
    match e {
        ConsumerError::Connect(_) => BsStatus::Connect,
        ConsumerError::Protocol(_) => BsStatus::Protocol,
        ConsumerError::Payload(_) => BsStatus::Payload,
    }
}

fn producer_status(e: &ProducerError) -> BsStatus {
    match e {
        ProducerError::InvalidConfig(_) => BsStatus::InvalidArgument,
        ProducerError::Bind { .. } => BsStatus::Io,
        ProducerError::Pipeline(_) => BsStatus::InvalidArgument,
        ProducerError::Payload(_) => BsStatus::Payload,
    }
}

/// # Safety
/// `p` is NULL or a valid NUL-terminated string.
unsafe fn opt_str(p: *const c_char, what: &str) -> FfiResult<Option<String>> {
    if p.is_null() {
        return Ok(None);
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(Some(s.to_owned())),
        Err(_) => fail(BsStatus::InvalidArgument, format!("{what} is not UTF-8")),
    }
}

/// # Safety
/// Both pointers are NULL or valid NUL-terminated strings.
unsafe fn endpoints(broadcast: *const c_char, aggregate: *const c_char) -> FfiResult<(Endpoint, Endpoint)> {
    let (env_b, env_a) = endpoints_from_env().or_else(|e| fail(BsStatus::InvalidArgument, e))?;
    let parse = |s: Option<String>, fallback: Endpoint| -> FfiResult<Endpoint> {
        match s {
            Some(s) => s.parse().or_else(|e: String| fail(BsStatus::InvalidArgument, e)),
            None => Ok(fallback),
        }
    };
    Ok((
        parse(opt_str(broadcast, "broadcast")?, env_b)?,
        parse(opt_str(aggregate, "aggregate")?, env_a)?,
    ))
}

/// # Safety
/// `p` is NULL or a valid NUL-terminated string.
unsafe fn shm_dir(p: *const c_char) -> FfiResult<PathBuf> {
    Ok(opt_str(p, "shm_dir")?.unwrap_or_else(|| DEFAULT_SHM_DIR.into()).into())
}

/// Protocol version spoken on the control channel.
#[no_mangle]
pub extern "C" fn bs_protocol_version() -> u16 {
    wire::PROTOCOL_VERSION
}

/// CRC-32 (IEEE) of `len` bytes, as carried in announcements.
///
/// # Safety
/// `data` points to `len` readable bytes, or `len` is 0.
#[no_mangle]
pub unsafe extern "C" fn bs_checksum(data: *const u8, len: usize) -> u32 {
    if len == 0 || data.is_null() {
        return wire::checksum(&[]);
    }
    wire::checksum(std::slice::from_raw_parts(data, len))
}

/// Copies the calling thread's last error into `buf` (NUL-terminated,
/// truncated to `cap`) and returns its full length in bytes.
///
/// # Safety
/// `buf` is NULL or points to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn bs_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = e.len().min(cap - 1);
            ptr::copy_nonoverlapping(e.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// Fills `out` with the defaults: ids must still be set.
///
/// # Safety
/// `out` is NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn bs_consumer_options_default(out: *mut BsConsumerOptions) -> BsStatus {
    guard(|| {
        if out.is_null() {
            return fail(BsStatus::NullArgument, "out is NULL");
        }
        let d = ConsumerConfig::new(0);
        out.write(BsConsumerOptions {
            consumer_id: 0,
            broadcast: ptr::null(),
            aggregate: ptr::null(),
            shm_dir: ptr::null(),
            heartbeat_interval_ms: d.heartbeat_interval_ms,
            connect_timeout_ms: d.connect_timeout_ms,
            queue_capacity: 0,
            verify_checksums: false,
        });
        Ok(BsStatus::Ok)
    })
}

/// Joins the producer and blocks until admitted.
///
/// # Safety
/// `opts` and `out` are valid; string fields are NULL or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn bs_consumer_connect(opts: *const BsConsumerOptions, out: *mut *mut BsConsumer) -> BsStatus {
    guard(|| {
        if opts.is_null() || out.is_null() {
            return fail(BsStatus::NullArgument, "opts and out must not be NULL");
        }
        let o = &*opts;
        let (broadcast, aggregate) = endpoints(o.broadcast, o.aggregate)?;
        let config = ConsumerConfig {
            queue_capacity: (o.queue_capacity > 0).then_some(o.queue_capacity),
            heartbeat_interval_ms: o.heartbeat_interval_ms,
            broadcast,
            aggregate,
            verify_checksums: o.verify_checksums,
            shm_dir: shm_dir(o.shm_dir)?,
            connect_timeout_ms: o.connect_timeout_ms,
            ..ConsumerConfig::new(o.consumer_id)
        };
        let session = ConsumerSession::connect(config).or_else(|e| fail(consumer_status(&e), e.to_string()))?;
        *out = Box::into_raw(Box::new(BsConsumer { session }));
        Ok(BsStatus::Ok)
    })
}

/// # Safety
/// `c` is a live consumer handle and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn bs_consumer_welcome(c: *const BsConsumer, out: *mut BsWelcome) -> BsStatus {
    guard(|| {
        if c.is_null() || out.is_null() {
            return fail(BsStatus::NullArgument, "consumer and out must not be NULL");
        }
        let w = (*c).session.welcome();
        out.write(BsWelcome {
            epoch: w.epoch,
            epoch_len: w.epoch_len,
            buffer_depth: w.buffer_depth,
            admission: w.admitted.code(),
        });
        Ok(BsStatus::Ok)
    })
}

/// Blocks for the next event. `Ok` stores a batch in `*batch`; `EpochEnd`
/// stores the finished epoch in `*epoch`; `EndOfStream` stores neither.
///
/// # Safety
/// `c` is a live consumer handle; `batch` and `epoch` are writable.
#[no_mangle]
pub unsafe extern "C" fn bs_consumer_next(c: *mut BsConsumer, batch: *mut *mut BsBatch, epoch: *mut u32) -> BsStatus {
    guard(|| {
        if c.is_null() || batch.is_null() || epoch.is_null() {
            return fail(BsStatus::NullArgument, "consumer, batch and epoch must not be NULL");
        }
        *batch = ptr::null_mut();
        match (*c).session.next_batch() {
            Ok(Next::Batch(view)) => {
                *batch = Box::into_raw(Box::new(BsBatch { view }));
                Ok(BsStatus::Ok)
            }
            Ok(Next::EpochBoundary(e)) => {
                *epoch = e;
                Ok(BsStatus::EpochEnd)
            }
            Ok(Next::EndOfStream) => Ok(BsStatus::EndOfStream),
            Err(e) => fail(consumer_status(&e), e.to_string()),
        }
    })
}

/// Sends `Bye` and frees the handle. Outstanding batches stay valid.
///
/// # Safety
/// `c` is NULL or a live consumer handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bs_consumer_close(c: *mut BsConsumer) {
    if c.is_null() {
        return;
    }
    let c = Box::from_raw(c);
    let _ = catch_unwind(AssertUnwindSafe(move || c.session.close()));
}

/// Points `*data` at the payload, valid until the batch is released.
///
/// # Safety
/// `b` is a live batch handle; `data` and `len` are writable.
#[no_mangle]
pub unsafe extern "C" fn bs_batch_data(b: *const BsBatch, data: *mut *const u8, len: *mut usize) -> BsStatus {
    guard(|| {
        if b.is_null() || data.is_null() || len.is_null() {
            return fail(BsStatus::NullArgument, "batch, data and len must not be NULL");
        }
        let bytes = (*b).view.bytes();
        *data = bytes.as_ptr();
        *len = bytes.len();
        Ok(BsStatus::Ok)
    })
}

/// # Safety
/// `b` is a live batch handle and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn bs_batch_info(b: *const BsBatch, out: *mut BsBatchInfo) -> BsStatus {
    guard(|| {
        if b.is_null() || out.is_null() {
            return fail(BsStatus::NullArgument, "batch and out must not be NULL");
        }
        let d = &(*b).view.descriptor;
        let mut shape = [0u64; MAX_NDIM];
        shape[..d.shape.len()].copy_from_slice(&d.shape);
        out.write(BsBatchInfo {
            epoch: d.epoch,
            batch_index: d.batch_index,
            dtype: d.dtype.code(),
            ndim: d.shape.len() as u8,
            shape,
            byte_len: d.byte_len,
            checksum: d.checksum,
        });
        Ok(BsStatus::Ok)
    })
}

/// Unmaps the batch and frees the handle.
///
/// # Safety
/// `b` is NULL or a live batch handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bs_batch_release(b: *mut BsBatch) {
    if !b.is_null() {
        drop(Box::from_raw(b));
    }
}

/// Fills `out` with a synthetic source of 100 batches of 32 x [16] f32.
///
/// # Safety
/// `out` is NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn bs_producer_options_default(out: *mut BsProducerOptions) -> BsStatus {
    guard(|| {
        if out.is_null() {
            return fail(BsStatus::NullArgument, "out is NULL");
        }
        let d = ProducerConfig::default();
        let mut sample_shape = [0u64; MAX_NDIM];
        sample_shape[0] = 16;
        out.write(BsProducerOptions {
            broadcast: ptr::null(),
            aggregate: ptr::null(),
            shm_dir: ptr::null(),
            epochs: d.epoch_count,
            epoch_len: 100,
            batch_size: 32,
            sample_ndim: 1,
            sample_shape,
            dtype: DType::F32.code(),
            seed: 0,
            buffer_depth: d.buffer_depth,
            rubberband_fraction: d.rubberband_fraction,
            heartbeat_interval_ms: d.heartbeat_interval_ms,
            heartbeat_timeout_ms: d.heartbeat_timeout_ms,
            pause_poll_interval_ms: d.pause_poll_interval_ms,
            await_consumers: d.await_consumers,
            workers: 1,
            prep_cost_us_per_sample: 0,
            verify_checksums: false,
        });
        Ok(BsStatus::Ok)
    })
}

/// Binds both endpoints over a synthetic source. Consumers may connect as
/// soon as this returns.
///
/// # Safety
/// `opts` and `out` are valid; string fields are NULL or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn bs_producer_bind(opts: *const BsProducerOptions, out: *mut *mut BsProducer) -> BsStatus {
    guard(|| {
        if opts.is_null() || out.is_null() {
            return fail(BsStatus::NullArgument, "opts and out must not be NULL");
        }
        let o = &*opts;
        let (broadcast, aggregate) = endpoints(o.broadcast, o.aggregate)?;
        let Some(dtype) = DType::from_code(o.dtype) else {
            return fail(BsStatus::InvalidArgument, format!("unknown dtype code {}", o.dtype));
        };
        if o.sample_ndim as usize > MAX_NDIM {
            return fail(BsStatus::InvalidArgument, format!("sample_ndim {} exceeds {MAX_NDIM}", o.sample_ndim));
        }
        let shape = o.sample_shape[..o.sample_ndim as usize].to_vec();
        let spec = DatasetSpec::synthetic(o.seed, shape, dtype, o.epoch_len * o.batch_size as u64, o.batch_size);
        let prep = PrepSpec {
            workers: o.workers,
            prep_cost_us_per_sample: o.prep_cost_us_per_sample,
            aux_cost_us_per_batch: 0,
        };
        let pipeline = Pipeline::new(spec, prep).or_else(|e| fail(BsStatus::InvalidArgument, e.to_string()))?;
        let config = ProducerConfig {
            buffer_depth: o.buffer_depth,
            rubberband_fraction: o.rubberband_fraction,
            heartbeat_interval_ms: o.heartbeat_interval_ms,
            heartbeat_timeout_ms: o.heartbeat_timeout_ms,
            epoch_count: o.epochs,
            pause_poll_interval_ms: o.pause_poll_interval_ms,
            verify_checksums: o.verify_checksums,
            broadcast,
            aggregate,
            shm_dir: shm_dir(o.shm_dir)?,
            await_consumers: o.await_consumers,
        };
        let producer = Producer::bind(config).or_else(|e| fail(producer_status(&e), e.to_string()))?;
        *out = Box::into_raw(Box::new(BsProducer {
            producer: Mutex::new(Some((producer, pipeline))),
            stop: Arc::new(AtomicBool::new(false)),
        }));
        Ok(BsStatus::Ok)
    })
}

/// Serves every epoch, blocking until done or stopped. A producer runs once.
///
/// # Safety
/// `p` is a live producer handle; `summary` is NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn bs_producer_run(p: *const BsProducer, summary: *mut BsRunSummary) -> BsStatus {
    guard(|| {
        if p.is_null() {
            return fail(BsStatus::NullArgument, "producer is NULL");
        }
        let p = &*p;
        let Some((producer, pipeline)) = p.producer.lock().unwrap().take() else {
            return fail(BsStatus::InvalidArgument, "producer has already run");
        };
        let r = producer
            .run_until(pipeline, p.stop.clone())
            .or_else(|e| fail(producer_status(&e), e.to_string()))?;
        if !summary.is_null() {
            summary.write(BsRunSummary {
                announced: r.announced,
                acks: r.acks,
                evictions: r.evictions,
                epochs_completed: r.epochs_completed,
                pipeline_calls: r.pipeline_calls,
                payload_bytes_written: r.payload_bytes_written,
                peak_live_segments: r.peak_live_segments,
            });
        }
        Ok(BsStatus::Ok)
    })
}

/// Asks a running producer to shut down. Safe from any thread.
///
/// # Safety
/// `p` is NULL or a live producer handle.
#[no_mangle]
pub unsafe extern "C" fn bs_producer_stop(p: *const BsProducer) {
    if !p.is_null() {
        (*p).stop.store(true, Ordering::SeqCst);
    }
}

/// # Safety
/// `p` is NULL or a producer handle no longer in use by any thread.
#[no_mangle]
pub unsafe extern "C" fn bs_producer_free(p: *mut BsProducer) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}
