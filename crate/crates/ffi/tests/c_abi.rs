use std::ffi::CString;
use std::mem::MaybeUninit;
use std::ptr;
use std::time::{Duration, Instant};

use batchsocket::pipeline::{DatasetSpec, Pipeline, PrepSpec};
use batchsocket::wire::DType;
use batchsocket_ffi::*;

struct Paths {
    dir: tempfile::TempDir,
    shm: tempfile::TempDir,
    broadcast: CString,
    aggregate: CString,
    shm_dir: CString,
}

fn paths() -> Paths {
    let dir = tempfile::tempdir().unwrap();
    let shm = tempfile::tempdir_in("/dev/shm").unwrap();
    let c = |p: std::path::PathBuf| CString::new(p.to_str().unwrap()).unwrap();
    Paths {
        broadcast: c(dir.path().join("b.sock")),
        aggregate: c(dir.path().join("a.sock")),
        shm_dir: c(shm.path().to_path_buf()),
        dir,
        shm,
    }
}

fn producer_options(p: &Paths) -> BsProducerOptions {
    let mut o = MaybeUninit::uninit();
    assert_eq!(unsafe { bs_producer_options_default(o.as_mut_ptr()) }, BsStatus::Ok);
    let mut o = unsafe { o.assume_init() };
    o.broadcast = p.broadcast.as_ptr();
    o.aggregate = p.aggregate.as_ptr();
    o.shm_dir = p.shm_dir.as_ptr();
    o.heartbeat_interval_ms = 50;
    o.heartbeat_timeout_ms = 2000;
    o.pause_poll_interval_ms = 20;
    o
}

fn consumer_options(p: &Paths, id: u64) -> BsConsumerOptions {
    let mut o = MaybeUninit::uninit();
    assert_eq!(unsafe { bs_consumer_options_default(o.as_mut_ptr()) }, BsStatus::Ok);
    let mut o = unsafe { o.assume_init() };
    o.consumer_id = id;
    o.broadcast = p.broadcast.as_ptr();
    o.aggregate = p.aggregate.as_ptr();
    o.shm_dir = p.shm_dir.as_ptr();
    o.heartbeat_interval_ms = 50;
    o.verify_checksums = true;
    o
}

/// Raw handle moved to the thread that runs it.
struct Handle(*mut BsProducer);
unsafe impl Send for Handle {}

#[test]
fn consumer_reads_every_batch_through_the_c_abi() {
    let p = paths();
    let mut po = producer_options(&p);
    po.epochs = 2;
    po.epoch_len = 5;
    po.batch_size = 3;
    po.sample_ndim = 2;
    po.sample_shape[..2].copy_from_slice(&[2, 2]);
    po.dtype = DType::I32.code();
    po.seed = 11;
    let mut producer = ptr::null_mut();
    assert_eq!(unsafe { bs_producer_bind(&po, &mut producer) }, BsStatus::Ok);
    let h = Handle(producer);
    let runner = std::thread::spawn(move || {
        let h = h;
        let mut summary = BsRunSummary::default();
        let status = unsafe { bs_producer_run(h.0, &mut summary) };
        (status, summary, h)
    });

    let oracle = Pipeline::new(
        DatasetSpec::synthetic(11, vec![2, 2], DType::I32, 15, 3),
        PrepSpec::default(),
    )
    .unwrap();
    let co = consumer_options(&p, 1);
    let mut consumer = ptr::null_mut();
    assert_eq!(unsafe { bs_consumer_connect(&co, &mut consumer) }, BsStatus::Ok);
    let mut welcome = BsWelcome::default();
    assert_eq!(unsafe { bs_consumer_welcome(consumer, &mut welcome) }, BsStatus::Ok);
    assert_eq!((welcome.epoch, welcome.epoch_len, welcome.admission), (0, 5, 2));

    let mut seen = Vec::new();
    let mut ended = Vec::new();
    loop {
        let mut batch = ptr::null_mut();
        let mut epoch = u32::MAX;
        match unsafe { bs_consumer_next(consumer, &mut batch, &mut epoch) } {
            BsStatus::Ok => {
                let mut info = BsBatchInfo::default();
                assert_eq!(unsafe { bs_batch_info(batch, &mut info) }, BsStatus::Ok);
                let (mut data, mut len) = (ptr::null(), 0usize);
                assert_eq!(unsafe { bs_batch_data(batch, &mut data, &mut len) }, BsStatus::Ok);
                let bytes = unsafe { std::slice::from_raw_parts(data, len) };
                let expected = oracle.materialize(info.epoch, info.batch_index).unwrap();
                assert_eq!(bytes, expected.bytes.as_slice());
                assert_eq!(unsafe { bs_checksum(data, len) }, info.checksum);
                assert_eq!((info.dtype, info.ndim), (DType::I32.code(), 3));
                assert_eq!(&info.shape[..3], &[3, 2, 2]);
                assert_eq!(info.byte_len, len as u64);
                seen.push((info.epoch, info.batch_index));
                unsafe { bs_batch_release(batch) };
            }
            BsStatus::EpochEnd => {
                assert!(batch.is_null());
                ended.push(epoch);
            }
            BsStatus::EndOfStream => break,
            other => panic!("unexpected status {other:?}"),
        }
    }
    unsafe { bs_consumer_close(consumer) };
    let expected: Vec<_> = (0..2u32).flat_map(|e| (0..5u64).map(move |i| (e, i))).collect();
    assert_eq!(seen, expected);
    assert_eq!(ended, vec![0, 1]);

    let (status, summary, h) = runner.join().unwrap();
    assert_eq!(status, BsStatus::Ok);
    assert_eq!((summary.announced, summary.acks, summary.epochs_completed), (10, 10, 2));
    assert_eq!(summary.payload_bytes_written, 10 * 3 * 4 * 4);
    assert_eq!(unsafe { bs_producer_run(h.0, ptr::null_mut()) }, BsStatus::InvalidArgument);
    unsafe { bs_producer_free(h.0) };
    assert_eq!(std::fs::read_dir(p.shm.path()).unwrap().count(), 0);
    drop(p.dir);
}

#[test]
fn stop_ends_an_idle_producer() {
    let p = paths();
    let po = producer_options(&p);
    let mut producer = ptr::null_mut();
    assert_eq!(unsafe { bs_producer_bind(&po, &mut producer) }, BsStatus::Ok);
    let h = Handle(producer);
    let start = Instant::now();
    let runner = std::thread::spawn(move || {
        let h = h;
        let mut summary = BsRunSummary::default();
        (unsafe { bs_producer_run(h.0, &mut summary) }, summary, h)
    });
    std::thread::sleep(Duration::from_millis(100));
    unsafe { bs_producer_stop(producer) };
    let (status, summary, h) = runner.join().unwrap();
    assert_eq!(status, BsStatus::Ok);
    assert_eq!((summary.announced, summary.pipeline_calls), (0, 0));
    assert!(start.elapsed() < Duration::from_secs(5));
    unsafe { bs_producer_free(h.0) };
}

#[test]
fn endpoints_come_from_the_environment_when_unset() {
    let p = paths();
    std::env::set_var("BATCHSOCKET_BROADCAST", p.broadcast.to_str().unwrap());
    std::env::set_var("BATCHSOCKET_AGGREGATE", p.aggregate.to_str().unwrap());
    let mut po = producer_options(&p);
    po.broadcast = ptr::null();
    po.aggregate = ptr::null();
    let mut producer = ptr::null_mut();
    let status = unsafe { bs_producer_bind(&po, &mut producer) };
    std::env::remove_var("BATCHSOCKET_BROADCAST");
    std::env::remove_var("BATCHSOCKET_AGGREGATE");
    assert_eq!(status, BsStatus::Ok);
    assert!(p.dir.path().join("b.sock").exists());
    assert!(p.dir.path().join("a.sock").exists());
    unsafe { bs_producer_free(producer) };
}
