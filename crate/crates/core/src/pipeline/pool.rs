use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use crossbeam_channel::{Receiver, Sender};

use super::{Pipeline, PipelineError, PreparedBatch};

/// Result of one job, tagged with its position in the run-wide batch sequence.
pub type PoolOutput = (u64, Result<PreparedBatch, PipelineError>);

#[derive(Debug)]
struct PoolState {
    next_claim: u64,
    taken: u64,
    total: u64,
    running: bool,
    stop: bool,
}

#[derive(Debug)]
struct Shared {
    state: Mutex<PoolState>,
    wake: Condvar,
}

/// Worker threads preparing batches ahead of the coordinator.
///
/// Jobs are the run-wide sequence `epoch * epoch_len + batch_index`. Workers
/// never run more than `lookahead` jobs ahead of what the coordinator has
/// taken, and claim nothing while paused. Results arrive out of order on
/// [`PrepPool::results`]; [`PrepPool::take_next`] restores sequence order.
#[derive(Debug)]
pub struct PrepPool {
    shared: Arc<Shared>,
    rx: Receiver<PoolOutput>,
    reorder: BTreeMap<u64, Result<PreparedBatch, PipelineError>>,
    next_seq: u64,
    epoch_len: u64,
    workers: Vec<JoinHandle<()>>,
}

impl PrepPool {
    pub fn spawn(pipeline: Arc<Pipeline>, epochs: u32, lookahead: u64) -> PrepPool {
        let epoch_len = pipeline.epoch_len();
        let shared = Arc::new(Shared {
            state: Mutex::new(PoolState {
                next_claim: 0,
                taken: 0,
                total: epoch_len * epochs as u64,
                running: false,
                stop: false,
            }),
            wake: Condvar::new(),
        });
        let (tx, rx) = crossbeam_channel::unbounded();
        let workers = (0..pipeline.prep().workers)
            .map(|i| {
                let shared = shared.clone();
                let pipeline = pipeline.clone();
                let tx = tx.clone();
                std::thread::Builder::new()
                    .name(format!("prep-{i}"))
                    .spawn(move || worker(shared, pipeline, tx, lookahead.max(1)))
                    .expect("spawning prep worker")
            })
            .collect();
        PrepPool {
            shared,
            rx,
            reorder: BTreeMap::new(),
            next_seq: 0,
            epoch_len,
            workers,
        }
    }

    /// Channel to select on; feed its messages back through [`PrepPool::accept`].
    pub fn results(&self) -> &Receiver<PoolOutput> {
        &self.rx
    }

    pub fn accept(&mut self, out: PoolOutput) {
        self.reorder.insert(out.0, out.1);
    }

    pub fn set_running(&self, running: bool) {
        let mut st = self.shared.state.lock().unwrap();
        if st.running != running {
            st.running = running;
            self.shared.wake.notify_all();
        }
    }

    pub fn is_ready(&self) -> bool {
        self.reorder.contains_key(&self.next_seq)
    }

    /// Next `(epoch, batch_index)` the coordinator expects.
    pub fn next_position(&self) -> (u32, u64) {
        if self.epoch_len == 0 {
            return (0, 0);
        }
        ((self.next_seq / self.epoch_len) as u32, self.next_seq % self.epoch_len)
    }

    /// Removes the next batch in sequence order, if it has been prepared.
    pub fn take_next(&mut self) -> Option<Result<PreparedBatch, PipelineError>> {
        let out = self.reorder.remove(&self.next_seq)?;
        self.next_seq += 1;
        let mut st = self.shared.state.lock().unwrap();
        st.taken = self.next_seq;
        self.shared.wake.notify_all();
        Some(out)
    }
}

impl Drop for PrepPool {
    fn drop(&mut self) {
        {
            let mut st = self.shared.state.lock().unwrap();
            st.stop = true;
            self.shared.wake.notify_all();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn worker(shared: Arc<Shared>, pipeline: Arc<Pipeline>, tx: Sender<PoolOutput>, lookahead: u64) {
    let epoch_len = pipeline.epoch_len();
    loop {
        let seq = {
            let mut st = shared.state.lock().unwrap();
            loop {
                if st.stop || st.next_claim >= st.total {
                    return;
                }
                if st.running && st.next_claim < st.taken + lookahead {
                    break;
                }
                st = shared.wake.wait(st).unwrap();
            }
            st.next_claim += 1;
            st.next_claim - 1
        };
        let epoch = (seq / epoch_len) as u32;
        let res = pipeline.prepare_batch(epoch, seq % epoch_len);
        if tx.send((seq, res)).is_err() {
            return;
        }
    }
}
