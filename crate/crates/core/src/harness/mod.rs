//! Experiment orchestration: spawns producer and consumer processes, applies
//! fault schedules and gathers their reports.

mod acceptance;
pub mod builtin;
pub mod oracle;

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, ExitStatus, Stdio};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consumer::{ComputeMode, ConsumerReport};
use crate::metrics::{host_cores, unix_millis};
use crate::payload::DEFAULT_SHM_DIR;
use crate::pipeline::{DatasetSpec, PrepSpec, SourceKind};
use crate::producer::{ProducerConfig, RunReport};

pub use acceptance::{check_acceptance, Tolerances, Verdict};
pub use oracle::{consumer_rate, oracle_throughput, prep_rate, OracleThroughput};

/// Time allowed after a pacer holds for the producer to fill its buffer.
const SETTLE: Duration = Duration::from_millis(200);
const READY_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// One producer serves every consumer.
    Shared,
    /// Each consumer gets its own producer with `workers / K` workers.
    NonShared,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsumerSpec {
    pub compute_us: u64,
    #[serde(default)]
    pub compute_mode: ComputeMode,
}

/// Consumers are numbered from 1 in the order they are listed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Fault {
    /// SIGKILL the consumer process.
    Kill { consumer: u64, after_ms: u64 },
    /// The consumer stops heartbeating and fetching.
    Stall { consumer: u64, after_ms: u64 },
    /// Start the consumer once the producer has announced `at_progress`
    /// batches of the first epoch. The first listed consumer paces the run.
    Join { consumer: u64, at_progress: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub label: String,
    pub mode: Mode,
    pub consumers: Vec<ConsumerSpec>,
    /// Total workers across all loaders.
    pub prep: PrepSpec,
    pub epochs: u32,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub producer: ProducerConfig,
    #[serde(default)]
    pub faults: Vec<Fault>,
    #[serde(default = "default_timeout")]
    pub timeout_s: u64,
}

fn default_timeout() -> u64 {
    120
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.consumers.is_empty() {
            return bad("at least one consumer is required".into());
        }
        self.dataset.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        if let SourceKind::Directory { path, .. } = &self.dataset.source {
            if !path.is_dir() {
                return bad(format!("dataset directory {} does not exist", path.display()));
            }
        }
        if self.prep.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        let k = self.consumers.len() as u64;
        if self.faults.iter().filter(|f| matches!(f, Fault::Join { .. })).count() > 1 {
            return bad("at most one late join per scenario".into());
        }
        for f in &self.faults {
            let (id, join) = match f {
                Fault::Kill { consumer, .. } | Fault::Stall { consumer, .. } => (*consumer, None),
                Fault::Join { consumer, at_progress } => (*consumer, Some(*at_progress)),
            };
            if id == 0 || id > k {
                return bad(format!("fault names consumer {id}, scenario has {k}"));
            }
            if let Some(p) = join {
                if id == 1 {
                    return bad("consumer 1 paces late joins and cannot join late itself".into());
                }
                if self.mode != Mode::Shared {
                    return bad("late joins need shared mode".into());
                }
                if p <= self.producer.buffer_depth as u64 || p >= self.dataset.epoch_len() {
                    return bad(format!("join progress {p} must lie in (buffer_depth, epoch_len)"));
                }
            }
        }
        Ok(())
    }

    pub fn is_faulted(&self, consumer: u64) -> bool {
        self.faults.iter().any(|f| {
            matches!(f, Fault::Kill { consumer: c, .. } | Fault::Stall { consumer: c, .. } if *c == consumer)
        })
    }

    /// No kill or stall faults.
    pub fn is_clean(&self) -> bool {
        !self
            .faults
            .iter()
            .any(|f| matches!(f, Fault::Kill { .. } | Fault::Stall { .. }))
    }

    fn join_progress(&self, consumer: u64) -> Option<u64> {
        self.faults.iter().find_map(|f| match f {
            Fault::Join { consumer: c, at_progress } if *c == consumer => Some(*at_progress),
            _ => None,
        })
    }
}

/// Which cross-run comparison the acceptance check applies to a suite.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Comparison {
    #[default]
    None,
    /// Shared vs non-shared on a prep-bound configuration.
    Speedup,
    /// Shared vs non-shared on a consumer-bound configuration.
    Parity,
    Rubberband,
    Eviction,
    /// Mixed-speed consumers vs the slow consumer alone (run labelled `solo`).
    Pacing,
    /// Shared runs at increasing K.
    Scaling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Suite {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub compare: Comparison,
    pub runs: Vec<ScenarioSpec>,
}

/// Reads a suite file, or a single scenario which becomes a one-run suite.
pub fn load_suite(path: &Path) -> Result<Suite, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Invalid(format!("{}: {e}", path.display())))?;
    if let Ok(suite) = toml::from_str::<Suite>(&text) {
        return Ok(suite);
    }
    let spec: ScenarioSpec =
        toml::from_str(&text).map_err(|e| ScenarioError::Invalid(format!("{}: {e}", path.display())))?;
    Ok(Suite {
        name: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        description: String::new(),
        compare: Comparison::None,
        runs: vec![spec],
    })
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{name} exited with {status}:\n{log}")]
    ChildFailed { name: String, status: String, log: String },
    #[error("scenario {label} timed out after {seconds}s; logs:\n{logs}")]
    Timeout { label: String, seconds: u64, logs: String },
    #[error("reading report {path}: {reason}")]
    Report { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsumerMetrics {
    pub id: u64,
    pub samples_per_sec: f64,
    pub killed_at_unix_ms: Option<u64>,
    pub report: Option<ConsumerReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub spec: ScenarioSpec,
    pub consumers: Vec<ConsumerMetrics>,
    /// One per loader: a single entry in shared mode, K in non-shared mode.
    pub producers: Vec<RunReport>,
    pub aggregate_samples_per_sec: f64,
    pub producer_cpu_seconds: f64,
    pub consumer_cpu_seconds: f64,
    pub peak_live_segments: u64,
    pub max_drift: u64,
    /// Segment files left in the run's store after every process exited.
    pub leaked_segments: usize,
    pub oracle: OracleThroughput,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub suite: String,
    pub compare: Comparison,
    pub host_cores: usize,
    pub runs: Vec<RunMetrics>,
    pub wall_seconds: f64,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    suite: &'a str,
    run: &'a str,
    mode: Mode,
    k: usize,
    consumer: u64,
    samples_per_sec: f64,
    oracle_samples_per_sec: f64,
    batches: u64,
    cpu_seconds: f64,
}

/// Writes the JSON report to `out` and a per-consumer CSV next to it.
pub fn write_report(report: &MetricsReport, out: &Path) -> Result<(), ScenarioError> {
    let json = serde_json::to_string_pretty(report).map_err(std::io::Error::other)?;
    std::fs::write(out, json)?;
    let mut w = csv::Writer::from_path(out.with_extension("csv")).map_err(std::io::Error::other)?;
    for run in &report.runs {
        for (i, c) in run.consumers.iter().enumerate() {
            let r = c.report.as_ref();
            w.serialize(CsvRow {
                suite: &report.suite,
                run: &run.spec.label,
                mode: run.spec.mode,
                k: run.spec.consumers.len(),
                consumer: c.id,
                samples_per_sec: c.samples_per_sec,
                oracle_samples_per_sec: run.oracle.per_consumer_samples.get(i).copied().unwrap_or(0.0),
                batches: r.map_or(0, |r| r.batches_received),
                cpu_seconds: r.map_or(0.0, |r| r.cpu_seconds),
            })
            .map_err(std::io::Error::other)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn run_suite(exe: &Path, suite: &Suite) -> Result<MetricsReport, ScenarioError> {
    let started = Instant::now();
    let mut runs = Vec::with_capacity(suite.runs.len());
    for spec in &suite.runs {
        log::info!("suite {}: run {}", suite.name, spec.label);
        runs.push(run_scenario(exe, spec)?);
    }
    Ok(MetricsReport {
        suite: suite.name.clone(),
        compare: suite.compare,
        host_cores: host_cores(),
        runs,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Where segments for one run live; removed afterwards.
fn store_dir() -> std::io::Result<tempfile::TempDir> {
    let shm = Path::new(DEFAULT_SHM_DIR);
    let b = tempfile::Builder::new().prefix("batchsocket-").tempdir_in(shm);
    match b {
        Ok(d) => Ok(d),
        Err(_) => tempfile::Builder::new().prefix("batchsocket-shm-").tempdir(),
    }
}

struct Proc {
    name: String,
    child: Child,
    stdin: Option<ChildStdin>,
    log: PathBuf,
    report: PathBuf,
    status: Option<ExitStatus>,
    killed_at: Option<u64>,
}

impl Proc {
    fn log_tail(&self) -> String {
        let text = std::fs::read_to_string(&self.log).unwrap_or_default();
        let lines: Vec<&str> = text.lines().collect();
        lines[lines.len().saturating_sub(20)..].join("\n")
    }
}

struct Supervisor {
    dir: PathBuf,
    lines: mpsc::Sender<(String, String)>,
    procs: Vec<Proc>,
}

impl Supervisor {
    fn spawn(&mut self, exe: &Path, name: &str, args: Vec<String>) -> Result<usize, ScenarioError> {
        let log = self.dir.join(format!("{name}.log"));
        let report = self.dir.join(format!("{name}.json"));
        let mut cmd = Command::new(exe);
        cmd.args(&args)
            .arg("--report")
            .arg(&report)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(std::fs::File::create(&log)?)
            .env_remove(crate::producer::BROADCAST_ENV)
            .env_remove(crate::producer::AGGREGATE_ENV);
        log::debug!("spawning {name}: {args:?}");
        let mut child = cmd.spawn()?;
        let stdout = child.stdout.take().expect("piped");
        let tx = self.lines.clone();
        let tag = name.to_owned();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines().map_while(Result::ok) {
                if tx.send((tag.clone(), line)).is_err() {
                    return;
                }
            }
        });
        self.procs.push(Proc {
            name: name.to_owned(),
            stdin: child.stdin.take(),
            child,
            log,
            report,
            status: None,
            killed_at: None,
        });
        Ok(self.procs.len() - 1)
    }

    fn index(&self, name: &str) -> Option<usize> {
        self.procs.iter().position(|p| p.name == name)
    }

    fn poll_exits(&mut self) -> Result<bool, ScenarioError> {
        let mut all = true;
        for p in &mut self.procs {
            if p.status.is_none() {
                p.status = p.child.try_wait()?;
            }
            all &= p.status.is_some();
        }
        Ok(all)
    }

    fn kill_all(&mut self) {
        for p in &mut self.procs {
            if p.status.is_none() {
                let _ = p.child.kill();
                p.status = p.child.wait().ok();
            }
        }
    }

    fn logs(&self) -> String {
        self.procs
            .iter()
            .map(|p| format!("--- {} ---\n{}", p.name, p.log_tail()))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

impl Drop for Supervisor {
    fn drop(&mut self) {
        self.kill_all();
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Report {
        path: path.to_owned(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| ScenarioError::Report {
        path: path.to_owned(),
        reason: e.to_string(),
    })
}

fn producer_args(spec: &ScenarioSpec, workers: u16, awaits: usize, b: &Path, a: &Path, shm: &Path) -> Vec<String> {
    let ds = &spec.dataset;
    let p = &spec.producer;
    let mut args = vec![
        "produce".into(),
        format!("--epochs={}", spec.epochs),
        format!("--epoch-len={}", ds.epoch_len()),
        format!("--batch-size={}", ds.batch_size),
        format!("--buffer-depth={}", p.buffer_depth),
        format!("--rubberband={}", p.rubberband_fraction),
        format!("--heartbeat-ms={}", p.heartbeat_interval_ms),
        format!("--timeout-ms={}", p.heartbeat_timeout_ms),
        format!("--poll-ms={}", p.pause_poll_interval_ms),
        format!("--workers={workers}"),
        format!("--prep-cost-us={}", spec.prep.prep_cost_us_per_sample),
        format!("--aux-cost-us={}", spec.prep.aux_cost_us_per_batch),
        format!("--await-consumers={awaits}"),
        format!("--broadcast=unix:{}", b.display()),
        format!("--aggregate=unix:{}", a.display()),
        format!("--shm-dir={}", shm.display()),
    ];
    match &ds.source {
        SourceKind::Synthetic {
            seed,
            sample_shape,
            dtype,
        } => {
            let shape: Vec<String> = sample_shape.iter().map(u64::to_string).collect();
            args.push("--source=synthetic".into());
            args.push(format!("--seed={seed}"));
            args.push(format!("--shuffle-seed={}", ds.shuffle_seed));
            args.push(format!("--sample-shape={}", shape.join(",")));
            args.push(format!("--dtype={dtype}"));
        }
        SourceKind::Directory { path, .. } => {
            args.push(format!("--source=dir:{}", path.display()));
            args.push(format!("--shuffle-seed={}", ds.shuffle_seed));
        }
    }
    if ds.no_reshuffle {
        args.push("--no-reshuffle".into());
    }
    args
}

struct PendingJoin {
    joiner: u64,
    pacer: String,
    spawned: bool,
}

/// Runs one scenario to completion and collects its metrics.
pub fn run_scenario(exe: &Path, spec: &ScenarioSpec) -> Result<RunMetrics, ScenarioError> {
    spec.validate()?;
    let run_dir = tempfile::Builder::new().prefix("batchsocket-run-").tempdir()?;
    let store = store_dir()?;
    let (tx, rx) = mpsc::channel();
    let mut sup = Supervisor {
        dir: run_dir.path().to_owned(),
        lines: tx,
        procs: Vec::new(),
    };
    let k = spec.consumers.len();
    let joiners: Vec<u64> = (1..=k as u64).filter(|&c| spec.join_progress(c).is_some()).collect();
    let loaders = match spec.mode {
        Mode::Shared => 1,
        Mode::NonShared => k,
    };
    let workers = match spec.mode {
        Mode::Shared => spec.prep.workers,
        Mode::NonShared => (spec.prep.workers / k as u16).max(1),
    };
    let endpoint = |i: usize, side: &str| run_dir.path().join(format!("p{i}-{side}.sock"));
    let loader_of = |c: u64| if loaders == 1 { 0 } else { (c - 1) as usize };

    let started = Instant::now();
    for i in 0..loaders {
        let awaits = if loaders == 1 { k - joiners.len() } else { 1 };
        let args = producer_args(spec, workers, awaits, &endpoint(i, "b"), &endpoint(i, "a"), store.path());
        sup.spawn(exe, &format!("producer-{i}"), args)?;
    }
    let mut ready = 0;
    while ready < loaders {
        match rx.recv_timeout(READY_TIMEOUT) {
            Ok((_, line)) if line.starts_with("READY") => ready += 1,
            Ok(_) => {}
            Err(_) => {
                return Err(ScenarioError::Timeout {
                    label: spec.label.clone(),
                    seconds: READY_TIMEOUT.as_secs(),
                    logs: sup.logs(),
                })
            }
        }
    }

    let consumer_args = |c: u64, hold_after: Option<u64>| -> Vec<String> {
        let cs = &spec.consumers[(c - 1) as usize];
        let l = loader_of(c);
        let mut args = vec![
            "consume".into(),
            format!("--id={c}"),
            format!("--compute-us={}", cs.compute_us),
            format!("--compute-mode={}", if cs.compute_mode == ComputeMode::Spin { "spin" } else { "wait" }),
            format!("--heartbeat-ms={}", spec.producer.heartbeat_interval_ms),
            format!("--broadcast=unix:{}", endpoint(l, "b").display()),
            format!("--aggregate=unix:{}", endpoint(l, "a").display()),
            format!("--shm-dir={}", store.path().display()),
            "--verify".into(),
        ];
        if let Some(h) = hold_after {
            args.push(format!("--hold-after={h}"));
        }
        for f in &spec.faults {
            if let Fault::Stall { consumer, after_ms } = f {
                if *consumer == c {
                    args.push(format!("--stall-after-ms={after_ms}"));
                }
            }
        }
        args
    };

    let mut pending: Vec<PendingJoin> = Vec::new();
    let mut pacer_holds: HashMap<u64, u64> = HashMap::new();
    for &j in &joiners {
        let p = spec.join_progress(j).expect("joiner");
        pacer_holds.insert(j, p - spec.producer.buffer_depth as u64);
        pending.push(PendingJoin {
            joiner: j,
            pacer: String::new(),
            spawned: false,
        });
    }
    // Joins are served one at a time by the pacer, in order of progress.
    pending.sort_by_key(|p| pacer_holds[&p.joiner]);
    let hold_after = pending.first().map(|p| pacer_holds[&p.joiner]);
    let consumers_started = Instant::now();
    for c in 1..=k as u64 {
        if joiners.contains(&c) {
            continue;
        }
        let hold = if c == 1 { hold_after } else { None };
        sup.spawn(exe, &format!("consumer-{c}"), consumer_args(c, hold))?;
    }
    for p in &mut pending {
        p.pacer = "consumer-1".into();
    }

    let mut kills: Vec<(u64, u64)> = spec
        .faults
        .iter()
        .filter_map(|f| match f {
            Fault::Kill { consumer, after_ms } => Some((*consumer, *after_ms)),
            _ => None,
        })
        .collect();
    let deadline = started + Duration::from_secs(spec.timeout_s);
    loop {
        match rx.recv_timeout(Duration::from_millis(5)) {
            Ok((name, line)) => {
                log::debug!("{name}: {line}");
                if line == "HOLD" {
                    if let Some(p) = pending.iter_mut().find(|p| !p.spawned && p.pacer == name) {
                        std::thread::sleep(SETTLE);
                        let c = p.joiner;
                        sup.spawn(exe, &format!("consumer-{c}"), consumer_args(c, None))?;
                        p.spawned = true;
                    }
                } else if line.starts_with("WELCOME") {
                    let joiner = name.strip_prefix("consumer-").and_then(|s| s.parse::<u64>().ok());
                    if let Some(pos) = pending.iter().position(|p| p.spawned && Some(p.joiner) == joiner) {
                        let p = pending.remove(pos);
                        if let Some(i) = sup.index(&p.pacer) {
                            if let Some(stdin) = sup.procs[i].stdin.as_mut() {
                                let _ = stdin.write_all(b"\n");
                                let _ = stdin.flush();
                            }
                        }
                    }
                }
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {}
            Err(mpsc::RecvTimeoutError::Disconnected) => {}
        }
        let elapsed = consumers_started.elapsed().as_millis() as u64;
        kills.retain(|&(c, at)| {
            if elapsed < at {
                return true;
            }
            if let Some(i) = sup.index(&format!("consumer-{c}")) {
                let p = &mut sup.procs[i];
                if p.status.is_none() {
                    let _ = p.child.kill();
                    p.killed_at = Some(unix_millis());
                    log::info!("killed consumer {c}");
                }
            }
            false
        });
        if sup.poll_exits()? {
            break;
        }
        if Instant::now() > deadline {
            let logs = sup.logs();
            sup.kill_all();
            return Err(ScenarioError::Timeout {
                label: spec.label.clone(),
                seconds: spec.timeout_s,
                logs,
            });
        }
    }
    let wall_seconds = started.elapsed().as_secs_f64();

    for p in &sup.procs {
        let ok = p.status.is_some_and(|s| s.success());
        if !ok && p.killed_at.is_none() {
            return Err(ScenarioError::ChildFailed {
                name: p.name.clone(),
                status: p.status.map(|s| s.to_string()).unwrap_or_default(),
                log: p.log_tail(),
            });
        }
    }

    let mut producers = Vec::with_capacity(loaders);
    for i in 0..loaders {
        let p = &sup.procs[sup.index(&format!("producer-{i}")).expect("spawned")];
        producers.push(read_json::<RunReport>(&p.report)?);
    }
    let mut consumers = Vec::with_capacity(k);
    for c in 1..=k as u64 {
        let Some(i) = sup.index(&format!("consumer-{c}")) else {
            consumers.push(ConsumerMetrics {
                id: c,
                ..Default::default()
            });
            continue;
        };
        let p = &sup.procs[i];
        let report = if p.killed_at.is_some() {
            None
        } else {
            Some(read_json::<ConsumerReport>(&p.report)?)
        };
        consumers.push(ConsumerMetrics {
            id: c,
            samples_per_sec: report.as_ref().map_or(0.0, |r| r.samples_per_sec),
            killed_at_unix_ms: p.killed_at,
            report,
        });
    }
    let leaked_segments = std::fs::read_dir(store.path())?.count();

    Ok(RunMetrics {
        aggregate_samples_per_sec: consumers.iter().map(|c| c.samples_per_sec).sum(),
        producer_cpu_seconds: producers.iter().map(|p| p.cpu_seconds).sum(),
        consumer_cpu_seconds: consumers
            .iter()
            .filter_map(|c| c.report.as_ref())
            .map(|r| r.cpu_seconds)
            .sum(),
        peak_live_segments: producers.iter().map(|p| p.peak_live_segments).max().unwrap_or(0),
        max_drift: producers.iter().map(|p| p.max_drift).max().unwrap_or(0),
        leaked_segments,
        oracle: oracle_throughput(spec, host_cores() as f64),
        spec: spec.clone(),
        consumers,
        producers,
        wall_seconds,
    })
}
