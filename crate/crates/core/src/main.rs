use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use batchsocket::consumer::{drive, ComputeMode, ConsumerConfig, ConsumerSession, DriveOptions};
use batchsocket::harness::{self, builtin, Suite};
use batchsocket::payload::DEFAULT_SHM_DIR;
use batchsocket::pipeline::{read_manifest, DatasetSpec, Pipeline, PrepSpec, SourceKind};
use batchsocket::producer::{
    Producer, ProducerConfig, AGGREGATE_ENV, BROADCAST_ENV, DEFAULT_AGGREGATE, DEFAULT_BROADCAST,
};
use batchsocket::transport::Endpoint;
use batchsocket::wire::DType;

#[derive(Parser)]
#[command(name = "batchsocket", version, about = "Shared batch loader for collocated training processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prepare batches once and serve them to every connected consumer.
    Produce(ProduceArgs),
    /// Consume the shared stream, emulating a training loop.
    Consume(ConsumeArgs),
    /// Run benchmark scenarios.
    Bench(BenchArgs),
}

#[derive(Args)]
struct Endpoints {
    #[arg(long, env = BROADCAST_ENV, default_value = DEFAULT_BROADCAST)]
    broadcast: Endpoint,
    #[arg(long, env = AGGREGATE_ENV, default_value = DEFAULT_AGGREGATE)]
    aggregate: Endpoint,
    /// Directory holding the shared-memory segments.
    #[arg(long, default_value = DEFAULT_SHM_DIR)]
    shm_dir: PathBuf,
}

#[derive(Args)]
struct ProduceArgs {
    #[arg(long, default_value_t = 1)]
    epochs: u32,
    /// Batches per epoch; defaults to the manifest length for directory sources, else 100.
    #[arg(long)]
    epoch_len: Option<u64>,
    #[arg(long, default_value_t = 32)]
    batch_size: u32,
    /// Per-sample shape for the synthetic source, comma separated.
    #[arg(long, default_value = "16", value_delimiter = ',')]
    sample_shape: Vec<u64>,
    #[arg(long, default_value = "f32")]
    dtype: DType,
    #[arg(long, default_value_t = 2)]
    buffer_depth: u16,
    /// Rubberband window as a fraction of the epoch.
    #[arg(long, default_value_t = 0.02)]
    rubberband: f64,
    #[arg(long, default_value_t = 1000)]
    heartbeat_ms: u64,
    #[arg(long, default_value_t = 5000)]
    timeout_ms: u64,
    #[arg(long, default_value_t = 100)]
    poll_ms: u64,
    /// `synthetic` or `dir:PATH`.
    #[arg(long, default_value = "synthetic")]
    source: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the per-epoch shuffle; defaults to --seed.
    #[arg(long)]
    shuffle_seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    workers: u16,
    #[arg(long, default_value_t = 0)]
    prep_cost_us: u64,
    #[arg(long, default_value_t = 0)]
    aux_cost_us: u64,
    /// Consumers to wait for before the first epoch.
    #[arg(long, default_value_t = 1)]
    await_consumers: u32,
    #[arg(long)]
    no_reshuffle: bool,
    /// Re-read every segment after writing it.
    #[arg(long)]
    verify: bool,
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    endpoints: Endpoints,
}

#[derive(Args)]
struct ConsumeArgs {
    #[arg(long)]
    id: u64,
    /// Emulated step time per batch.
    #[arg(long, default_value_t = 0)]
    compute_us: u64,
    #[arg(long, default_value = "wait")]
    compute_mode: ComputeMode,
    /// Leave after this many epochs; by default run until the stream ends.
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long, default_value_t = 1000)]
    heartbeat_ms: u64,
    #[arg(long)]
    queue_capacity: Option<u16>,
    #[arg(long, default_value_t = 10_000)]
    connect_timeout_ms: u64,
    #[arg(long)]
    verify: bool,
    /// Print HOLD after this many batches and wait for a line on stdin.
    #[arg(long)]
    hold_after: Option<u64>,
    /// Stop heartbeating and fetching this long after connecting.
    #[arg(long)]
    stall_after_ms: Option<u64>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    endpoints: Endpoints,
}

#[derive(Args)]
struct BenchArgs {
    /// Scenario or suite TOML file.
    #[arg(long, conflicts_with = "builtin")]
    scenario: Option<PathBuf>,
    /// Name of a canned suite.
    #[arg(long)]
    builtin: Option<String>,
    #[arg(long)]
    list_builtin: bool,
    /// Print the selected suite as TOML instead of running it.
    #[arg(long)]
    print: bool,
    /// JSON report path; a CSV is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit non-zero when an acceptance check fails.
    #[arg(long)]
    check: bool,
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn dataset(args: &ProduceArgs) -> Result<DatasetSpec> {
    let (source, default_samples) = match args.source.as_str() {
        "synthetic" => (
            SourceKind::Synthetic {
                seed: args.seed,
                sample_shape: args.sample_shape.clone(),
                dtype: args.dtype,
            },
            100 * args.batch_size as u64,
        ),
        s => {
            let Some(path) = s.strip_prefix("dir:") else {
                bail!("unknown source {s:?}; expected synthetic or dir:PATH")
            };
            let path = PathBuf::from(path);
            let files = read_manifest(&path)?;
            let first = files.first().context("manifest lists no samples")?;
            let sample_bytes = std::fs::metadata(first)
                .with_context(|| format!("reading {}", first.display()))?
                .len();
            (SourceKind::Directory { path, sample_bytes }, files.len() as u64)
        }
    };
    let samples = match args.epoch_len {
        Some(e) => e * args.batch_size as u64,
        None => default_samples,
    };
    let spec = DatasetSpec {
        source,
        samples_per_epoch: samples,
        batch_size: args.batch_size,
        shuffle_seed: args.shuffle_seed.unwrap_or(args.seed),
        no_reshuffle: args.no_reshuffle,
    };
    spec.validate()?;
    Ok(spec)
}

fn produce(args: ProduceArgs) -> Result<()> {
    let spec = dataset(&args)?;
    let prep = PrepSpec {
        workers: args.workers,
        prep_cost_us_per_sample: args.prep_cost_us,
        aux_cost_us_per_batch: args.aux_cost_us,
    };
    let config = ProducerConfig {
        buffer_depth: args.buffer_depth,
        rubberband_fraction: args.rubberband,
        heartbeat_interval_ms: args.heartbeat_ms,
        heartbeat_timeout_ms: args.timeout_ms,
        epoch_count: args.epochs,
        pause_poll_interval_ms: args.poll_ms,
        verify_checksums: args.verify,
        broadcast: args.endpoints.broadcast,
        aggregate: args.endpoints.aggregate,
        shm_dir: args.endpoints.shm_dir,
        await_consumers: args.await_consumers,
    };
    let pipeline = Pipeline::new(spec, prep)?;
    let producer = Producer::bind(config)?;
    let (b, a) = producer.endpoints();
    println!("READY {b} {a}");
    std::io::stdout().flush()?;
    let report = producer.run(pipeline)?;
    log::info!(
        "announced {} batches, {} acks, {} evictions",
        report.announced,
        report.acks,
        report.evictions
    );
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    }
    Ok(())
}

fn consume(args: ConsumeArgs) -> Result<bool> {
    let config = ConsumerConfig {
        queue_capacity: args.queue_capacity,
        heartbeat_interval_ms: args.heartbeat_ms,
        broadcast: args.endpoints.broadcast,
        aggregate: args.endpoints.aggregate,
        verify_checksums: args.verify,
        shm_dir: args.endpoints.shm_dir,
        connect_timeout_ms: args.connect_timeout_ms,
        ..ConsumerConfig::new(args.id)
    };
    let session = ConsumerSession::connect(config)?;
    let w = session.welcome();
    println!("WELCOME {} {}", w.admitted, w.epoch);
    std::io::stdout().flush()?;
    let opts = DriveOptions {
        compute_us: args.compute_us,
        compute_mode: args.compute_mode,
        max_epochs: args.epochs,
        hold_after: args.hold_after,
        stall_after_ms: args.stall_after_ms,
    };
    let report = drive(session, &opts, || {
        println!("HOLD");
        let _ = std::io::stdout().flush();
        let mut line = String::new();
        let _ = std::io::stdin().lock().read_line(&mut line);
    });
    for e in &report.epochs {
        log::info!("epoch {}: {:.1} samples/s", e.epoch, e.samples_per_sec);
    }
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    }
    if let Some(err) = &report.error {
        eprintln!("consumer {}: {err}", args.id);
        return Ok(false);
    }
    Ok(true)
}

fn bench(args: BenchArgs) -> Result<bool> {
    if args.list_builtin {
        for (name, about) in builtin::list() {
            println!("{name:<22} {about}");
        }
        return Ok(true);
    }
    let suite: Suite = match (&args.scenario, &args.builtin) {
        (Some(path), _) => harness::load_suite(path)?,
        (None, Some(name)) => builtin::suite(name).with_context(|| format!("no builtin scenario {name:?}"))?,
        (None, None) => bail!("pass --scenario FILE, --builtin NAME or --list-builtin"),
    };
    if args.print {
        print!("{}", toml::to_string(&suite)?);
        return Ok(true);
    }
    let exe = std::env::current_exe()?;
    let report = harness::run_suite(&exe, &suite)?;
    if let Some(out) = &args.out {
        harness::write_report(&report, out)?;
    }
    let verdicts = harness::check_acceptance(&report, &harness::Tolerances::default());
    let mut ok = true;
    for v in &verdicts {
        println!("{v}");
        ok &= v.pass;
    }
    Ok(ok || !args.check)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Produce(a) => produce(a).map(|_| true),
        Command::Consume(a) => consume(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
