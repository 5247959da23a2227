//! `tta`: simulate streams, run adaptation sessions, evaluate and ablate.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use tta_core::io::{
    read_json, read_results, read_snapshot, read_stream, read_stream_all, run_pipelined,
    write_json, write_results, write_snapshot, write_stream, write_text_embeddings, Encoding,
    Precision, StreamHeader, TextEmbeddings,
};
use tta_core::metrics::{headline, parse_segments, plot_data, segment_report, write_segments_csv};
use tta_core::surrogate::{ShiftSpec, SimulationConfig};
use tta_core::{
    run_variant_suite, AdaptConfig, CacheState, Error, FusionStrategy, MatchScore, PriorMode,
    Session, SessionResult, TaskMode, UpdateStrategy, Variant,
};

const EXIT_FAILURE: u8 = 1;
const EXIT_SCHEMA: u8 = 2;
const EXIT_CONFIG: u8 = 3;

#[derive(Parser)]
#[command(
    name = "tta",
    version,
    about = "Training-free test-time adaptation over a class-prior cache"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic stream from a simulation config.
    Simulate(SimulateArgs),
    /// Run one adaptation session over a stream.
    Run(RunArgs),
    /// Per-segment metrics of a results file.
    Eval(EvalArgs),
    /// Run several variants over the same stream.
    Ablate(AblateArgs),
    /// Print a simulation config to start from.
    ExampleConfig(ExampleConfigArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Rec,
    Det,
}

impl From<Task> for TaskMode {
    fn from(t: Task) -> Self {
        match t {
            Task::Rec => TaskMode::Recognition,
            Task::Det => TaskMode::Detection,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Count,
    Momentum,
    Delayed,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fusion {
    Entropy,
    Average,
    InitOnly,
    CacheOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum Score {
    Posterior,
    Similarity,
}

#[derive(Clone, Copy, ValueEnum)]
enum Priors {
    Adaptive,
    FrozenOneHot,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the class text embeddings next to the stream.
    #[arg(long)]
    sidecar: Option<PathBuf>,
    /// Store features and probabilities as 32-bit floats.
    #[arg(long)]
    f32: bool,
    /// Length-prefixed binary records instead of JSON lines (implies --f32).
    #[arg(long)]
    binary: bool,
}

/// Engine settings. Unset flags keep the value from `--config`, or the
/// defaults when no config file is given.
#[derive(Args, Clone)]
struct AdaptArgs {
    /// Base engine config (JSON); task, K and d always come from the stream.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Expected task; a mismatch with the stream header is an error.
    #[arg(long, value_enum)]
    task: Option<Task>,
    #[arg(long)]
    tau1: Option<f64>,
    #[arg(long)]
    tau2: Option<f64>,
    #[arg(long)]
    ws: Option<f64>,
    #[arg(long, value_enum)]
    strategy: Option<Strategy>,
    #[arg(long, value_enum)]
    fusion: Option<Fusion>,
    #[arg(long)]
    similarity_scale: Option<f64>,
    #[arg(long, value_enum)]
    match_score: Option<Score>,
    #[arg(long, value_enum)]
    prior_mode: Option<Priors>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    stream: PathBuf,
    #[command(flatten)]
    adapt: AdaptArgs,
    /// Start from a saved cache instead of an empty one.
    #[arg(long)]
    snapshot_in: Option<PathBuf>,
    #[arg(long)]
    snapshot_out: Option<PathBuf>,
    #[arg(long)]
    results: Option<PathBuf>,
    /// Images buffered between the reader thread and the engine.
    #[arg(long, default_value_t = 64)]
    queue_capacity: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    results: PathBuf,
    /// Comma-separated `start:end` fractions of the stream.
    #[arg(long, default_value = "0:1")]
    segments: String,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Write windowed metric and cache-size series (JSON) here.
    #[arg(long)]
    plot: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    windows: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    stream: PathBuf,
    /// Comma-separated variant names.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "baseline,la,full,average,init-only,cache-only,momentum,delayed"
    )]
    variants: Vec<String>,
    #[command(flatten)]
    adapt: AdaptArgs,
    /// Directory for per-variant results and `summary.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExampleConfigArgs {
    #[arg(long, value_enum, default_value = "rec")]
    task: Task,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(err) if err.is_schema() => EXIT_SCHEMA,
        Some(Error::Config(_) | Error::BadShiftSpec(_) | Error::BadRange { .. }) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Simulate(a) => simulate(a),
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::ExampleConfig(a) => example_config(a),
    }
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let sim: SimulationConfig = read_json(&a.config)?;
    let bank = sim.bank()?;
    let records = sim.generate()?;
    let mut header = StreamHeader::new(sim.task, sim.k, sim.d, sim.class_names());
    if a.f32 || a.binary {
        header.precision = Precision::F32;
    }
    if a.binary {
        header.encoding = Encoding::Binary;
    }
    if let Some(sidecar) = &a.sidecar {
        let sidecar_text = TextEmbeddings::from_bank(&bank, sim.class_names(), sim.task);
        write_text_embeddings(sidecar, &sidecar_text)
            .with_context(|| format!("writing {}", sidecar.display()))?;
        header.text_embeddings = Some(relative_to(sidecar, &a.out));
    }
    write_stream(&a.out, &header, &records)
        .with_context(|| format!("writing {}", a.out.display()))?;
    info!("wrote {} images to {}", records.len(), a.out.display());
    Ok(())
}

/// `target` as referenced from a file living next to `from`.
fn relative_to(target: &Path, from: &Path) -> String {
    let same_dir = target.parent().map(Path::to_path_buf).unwrap_or_default()
        == from.parent().map(Path::to_path_buf).unwrap_or_default();
    match (same_dir, target.file_name()) {
        (true, Some(name)) => name.to_string_lossy().into_owned(),
        _ => std::path::absolute(target)
            .unwrap_or_else(|_| target.to_path_buf())
            .to_string_lossy()
            .into_owned(),
    }
}

fn adapt_config(args: &AdaptArgs, header: &StreamHeader) -> Result<AdaptConfig> {
    if let Some(t) = args.task {
        let wanted = TaskMode::from(t);
        if wanted != header.task {
            return Err(Error::Config(format!(
                "--task {wanted:?} but the stream holds {:?} records",
                header.task
            ))
            .into());
        }
    }
    let mut cfg = match &args.config {
        Some(path) => {
            let mut c: AdaptConfig = read_json(path)?;
            c.task = header.task;
            c.k = header.k;
            c.d = header.d;
            c
        }
        None => header.adapt_config(),
    };
    if let Some(v) = args.tau1 {
        cfg.tau1 = v;
    }
    if let Some(v) = args.tau2 {
        cfg.tau2 = v;
    }
    if let Some(v) = args.ws {
        cfg.ws = v;
    }
    if let Some(v) = args.similarity_scale {
        cfg.similarity_scale = v;
    }
    if let Some(s) = args.strategy {
        cfg.update_strategy = match s {
            Strategy::Count => UpdateStrategy::Count,
            Strategy::Momentum => UpdateStrategy::momentum(),
            Strategy::Delayed => UpdateStrategy::delayed(),
        };
    }
    if let Some(f) = args.fusion {
        cfg.fusion_strategy = match f {
            Fusion::Entropy => FusionStrategy::Entropy,
            Fusion::Average => FusionStrategy::Average,
            Fusion::InitOnly => FusionStrategy::InitOnly,
            Fusion::CacheOnly => FusionStrategy::CacheOnly,
        };
    }
    if let Some(m) = args.match_score {
        cfg.match_score = match m {
            Score::Posterior => MatchScore::Posterior,
            Score::Similarity => MatchScore::Similarity,
        };
    }
    if let Some(p) = args.prior_mode {
        cfg.prior_mode = match p {
            Priors::Adaptive => PriorMode::Adaptive,
            Priors::FrozenOneHot => PriorMode::FrozenOneHot,
        };
    }
    cfg.check()?;
    Ok(cfg)
}

fn summary_line(result: &SessionResult) -> Result<String> {
    let metric = match result.config.task {
        TaskMode::Recognition => "accuracy",
        TaskMode::Detection => "mAP50",
    };
    Ok(format!(
        "{metric} {:.2}  images {}  proposals {}  absorbed {}  M {}",
        100.0 * headline(result)?,
        result.stats.images,
        result.stats.proposals,
        result.stats.absorbed,
        result.cache.len()
    ))
}

fn run(a: RunArgs) -> Result<()> {
    let reader =
        read_stream(&a.stream).with_context(|| format!("reading {}", a.stream.display()))?;
    let header = reader.header().clone();
    let cfg = adapt_config(&a.adapt, &header)?;
    let start: CacheState = match &a.snapshot_in {
        Some(p) => read_snapshot(p).with_context(|| format!("reading {}", p.display()))?,
        None => CacheState::new(),
    };
    info!("starting with {} cache entries", start.len());
    let session = Session::new(cfg)?.with_cache(start);
    let result = run_pipelined(reader, session, a.queue_capacity)
        .with_context(|| format!("processing {}", a.stream.display()))?;
    if let Some(p) = &a.snapshot_out {
        write_snapshot(p, &result.cache)?;
    }
    if let Some(p) = &a.results {
        write_results(p, &result, &header.class_names, None)?;
    }
    println!("{}", summary_line(&result)?);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let segments = parse_segments(&a.segments)?;
    let (_, result) =
        read_results(&a.results).with_context(|| format!("reading {}", a.results.display()))?;
    let rows = segment_report(&result, &segments)?;
    let stdout = std::io::stdout();
    match a.format {
        Format::Csv => write_segments_csv(&rows, stdout.lock())?,
        Format::Json => {
            let mut out = stdout.lock();
            serde_json::to_writer_pretty(&mut out, &rows)?;
            writeln!(out)?;
        }
    }
    if let Some(p) = &a.plot {
        write_json(p, &plot_data(&result, a.windows)?)?;
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let variants = a
        .variants
        .iter()
        .map(|v| v.trim().parse::<Variant>())
        .collect::<Result<Vec<_>, _>>()?;
    if variants.is_empty() {
        bail!(Error::Config("no variants given".into()));
    }
    let (header, records) =
        read_stream_all(&a.stream).with_context(|| format!("reading {}", a.stream.display()))?;
    let cfg = adapt_config(&a.adapt, &header)?;
    std::fs::create_dir_all(&a.out)?;
    let results = run_variant_suite(&records, &cfg, &variants)?;

    let mut summary = String::from("variant,metric,value,final_m,absorbed\n");
    let metric = match header.task {
        TaskMode::Recognition => "accuracy",
        TaskMode::Detection => "map50",
    };
    for v in &variants {
        let r = &results[v];
        write_results(
            a.out.join(format!("{v}.results.jsonl")),
            r,
            &header.class_names,
            Some(v.name()),
        )?;
        let value = headline(r)?;
        summary += &format!(
            "{v},{metric},{value},{},{}\n",
            r.cache.len(),
            r.stats.absorbed
        );
        println!("{:<11} {}", v.name(), summary_line(r)?);
    }
    std::fs::write(a.out.join("summary.csv"), summary)?;
    Ok(())
}

fn example_config(a: ExampleConfigArgs) -> Result<()> {
    let task = TaskMode::from(a.task);
    let (k, logit_scale, proposals_per_image, background_rate) = match task {
        TaskMode::Recognition => (20, 10.0, 1, 0.0),
        TaskMode::Detection => (20, 40.0, 3, 0.2),
    };
    let sim = SimulationConfig {
        task,
        k,
        d: 32,
        n_images: 4000,
        proposals_per_image,
        bank_seed: 1000 + a.seed,
        logit_scale,
        bank: None,
        shift: ShiftSpec {
            prior_skew: ShiftSpec::concentrated_skew(k, 4, 0.8),
            prototype_drift: 0.85,
            noise_sigma: 0.24,
            scale_jitter: 0.1,
            background_rate,
            seed: 2000 + a.seed,
        },
        class_names: None,
    };
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, &sim)?;
    writeln!(out)?;
    Ok(())
}
