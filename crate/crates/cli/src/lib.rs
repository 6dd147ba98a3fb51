//! `tunnelwatch` command line: `run`, `simulate` and `evaluate`.
//!
//! Exit codes: 0 success, 1 evaluation failed, 2 configuration or scenario
//! error, 3 malformed input stream or record file.

pub mod config;

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, LineWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use thiserror::Error;
use tunnelwatch_core::detection::FrameDetections;
use tunnelwatch_core::evaluation::{score_latency, verdict, DEFAULT_MATCH_WINDOW};
use tunnelwatch_core::events::Event;
use tunnelwatch_core::ingestion::{frame_to_json, sample_frames, spawn_reader, IngestError};
use tunnelwatch_core::pipeline::{Pipeline, PipelineError};
use tunnelwatch_core::simulation::{builtin_scenario, generate_stream, write_ground_truth, GroundTruthEvent, Scenario};
use tunnelwatch_core::tracking::TrackingError;

pub use config::{load_config, OutputConfig, PipelineConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_EVALUATION_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PARSE: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("output error: {0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            // An unwritable output path is a configuration problem.
            CliError::Config(_) | CliError::Output(_) => EXIT_CONFIG,
            CliError::Parse(_) => EXIT_PARSE,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(m) => CliError::Config(m),
            PipelineError::Ingest(e) => e.into(),
            PipelineError::Tracking(e @ TrackingError::NonMonotonicTime { .. }) => CliError::Parse(e.to_string()),
            PipelineError::Tracking(e) => CliError::Config(e.to_string()),
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Parse { .. } | IngestError::NonMonotonicFrame { .. } | IngestError::Io(_) => {
                CliError::Parse(e.to_string())
            }
            IngestError::InvalidInterval(_) | IngestError::InvalidConfig(_) | IngestError::Geometry(_) => {
                CliError::Config(e.to_string())
            }
        }
    }
}

fn output_err(path: &Path) -> impl Fn(io::Error) -> CliError + '_ {
    move |e| CliError::Output(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "tunnelwatch", version, about = "Tunnel CCTV tracking and incident detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Track a detection stream and write the incident event log.
    Run(RunArgs),
    /// Compile a scenario into a detection stream and its ground truth.
    Simulate(SimulateArgs),
    /// Score an event log against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Configuration override `dotted.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Detection stream JSONL, or `-` for stdin.
    #[arg(long, conflicts_with = "scenario", required_unless_present = "scenario")]
    pub input: Option<String>,
    /// Simulate a builtin scenario name or scenario file in-process.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Seed override for `--scenario`.
    #[arg(long, requires = "scenario")]
    pub seed: Option<u64>,
    /// Event log path (overrides `output.events`; stdout by default).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Builtin scenario name (stop, wwd, fire, person, nominal) or a scenario file.
    #[arg(long)]
    pub scenario: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Detection stream path; stdout by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Ground-truth path; defaults to `<out>.truth.jsonl` next to `--out`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Event log produced by `run`.
    #[arg(long)]
    pub events: PathBuf,
    /// Ground-truth JSONL produced by `simulate`.
    #[arg(long)]
    pub truth: PathBuf,
    /// Matching window and pass threshold in seconds.
    #[arg(long, default_value_t = DEFAULT_MATCH_WINDOW)]
    pub window: f64,
    /// JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Do not fail the run on unmatched emitted events.
    #[arg(long)]
    pub allow_false_positives: bool,
}

/// Runs the parsed command line and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Simulate(a) => {
            init_logging(None);
            cmd_simulate(a)
        }
        Command::Evaluate(a) => {
            init_logging(None);
            cmd_evaluate(a)
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("tunnelwatch: {e}");
            e.exit_code()
        }
    }
}

fn init_logging(default: Option<&str>) {
    let env = env_logger::Env::new().filter_or("TUNNELWATCH_LOG", default.unwrap_or("warn"));
    let _ = env_logger::Builder::from_env(env).try_init();
}

/// Builtin name first, then a scenario JSON file.
pub fn resolve_scenario(name_or_path: &str) -> Result<Scenario, CliError> {
    if let Some(sc) = builtin_scenario(name_or_path) {
        return Ok(sc);
    }
    let path = Path::new(name_or_path);
    if !path.is_file() {
        return Err(CliError::Config(format!(
            "unknown scenario `{name_or_path}` (builtins: stop, wwd, fire, person, nominal)"
        )));
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("scenario {}: {e}", path.display())))
}

fn simulated_frames(name: &str, seed: Option<u64>) -> Result<(Scenario, Vec<FrameDetections>), CliError> {
    let mut sc = resolve_scenario(name)?;
    if let Some(seed) = seed {
        sc.seed = seed;
    }
    let (frames, _) = generate_stream(&sc).map_err(|e| CliError::Config(e.to_string()))?;
    Ok((sc, frames))
}

fn create(path: &Path) -> Result<File, CliError> {
    File::create(path).map_err(output_err(path))
}

pub fn cmd_run(args: RunArgs) -> Result<i32, CliError> {
    let mut cfg = load_config(args.config.as_deref(), &args.set)?;
    init_logging(cfg.log.as_deref());
    if let Some(out) = args.out {
        cfg.output.events = Some(out);
    }

    let frames: Box<dyn Iterator<Item = Result<FrameDetections, IngestError>>> =
        match (&args.input, &args.scenario) {
            (_, Some(name)) => {
                if cfg.stream.roi.is_some() {
                    return Err(CliError::Config(
                        "stream.roi cannot be used with --scenario: simulated boxes are already in ROI coordinates"
                            .into(),
                    ));
                }
                let (sc, frames) = simulated_frames(name, args.seed)?;
                cfg.stream.fps = sc.fps;
                Box::new(frames.into_iter().map(Ok))
            }
            (Some(input), None) => {
                cfg.stream
                    .validate()
                    .map_err(|e| CliError::Config(format!("stream: {e}")))?;
                let source: Box<dyn BufRead + Send> = if input == "-" {
                    Box::new(BufReader::new(io::stdin()))
                } else {
                    let f = File::open(input).map_err(|e| CliError::Config(format!("input {input}: {e}")))?;
                    Box::new(BufReader::new(f))
                };
                Box::new(spawn_reader(source, cfg.stream.fps, cfg.stream.queue_capacity).into_iter())
            }
            (None, None) => return Err(CliError::Config("one of --input or --scenario is required".into())),
        };

    let mut pipeline = Pipeline::new(&cfg.stream, cfg.tracker.clone(), cfg.cada.clone())?;

    // Line-buffered so every alarm is visible as soon as it is raised.
    let mut events_out: Box<dyn Write> = match &cfg.output.events {
        Some(p) => Box::new(LineWriter::new(create(p)?)),
        None => Box::new(io::stdout()),
    };
    let events_path = cfg.output.events.clone().unwrap_or_else(|| PathBuf::from("<stdout>"));
    let mut tracks_out = match &cfg.output.tracks {
        Some(p) => Some((BufWriter::new(create(p)?), p.clone())),
        None => None,
    };

    let mut emitted = 0usize;
    for frame in sample_frames(frames, cfg.stream.frame_interval)? {
        let out = pipeline.process(&frame?)?;
        if let Some((w, p)) = tracks_out.as_mut() {
            for rec in &out.tracks {
                let line = serde_json::to_string(rec).expect("track record serializes");
                writeln!(w, "{line}").map_err(output_err(p))?;
            }
        }
        for ev in &out.events {
            log::info!("{} at t={} (track {:?})", ev.kind, ev.t, ev.track_id);
            let line = serde_json::to_string(ev).expect("event serializes");
            writeln!(events_out, "{line}").map_err(output_err(&events_path))?;
            events_out.flush().map_err(output_err(&events_path))?;
            emitted += 1;
        }
    }
    if let Some((mut w, p)) = tracks_out {
        w.flush().map_err(output_err(&p))?;
    }
    events_out.flush().map_err(output_err(&events_path))?;
    log::info!(
        "emitted {emitted} events; {} track ids issued",
        pipeline.tracker().ids_issued()
    );
    Ok(EXIT_OK)
}

pub fn cmd_simulate(args: SimulateArgs) -> Result<i32, CliError> {
    let mut sc = resolve_scenario(&args.scenario)?;
    if let Some(seed) = args.seed {
        sc.seed = seed;
    }
    let (frames, truth) = generate_stream(&sc).map_err(|e| CliError::Config(e.to_string()))?;

    let write_stream = |w: &mut dyn Write| -> io::Result<()> {
        for f in &frames {
            writeln!(w, "{}", frame_to_json(f))?;
        }
        w.flush()
    };
    match &args.out {
        Some(p) => write_stream(&mut BufWriter::new(create(p)?)).map_err(output_err(p))?,
        None => write_stream(&mut io::stdout().lock()).map_err(output_err(Path::new("<stdout>")))?,
    }

    let truth_path = args
        .truth
        .or_else(|| args.out.as_ref().map(|p| p.with_extension("truth.jsonl")));
    match truth_path {
        Some(p) => write_ground_truth(BufWriter::new(create(&p)?), &truth).map_err(output_err(&p))?,
        None => log::warn!("no --out or --truth given; ground truth not written"),
    }
    log::info!(
        "scenario `{}`: {} frames, {} truth events",
        sc.name,
        frames.len(),
        truth.len()
    );
    Ok(EXIT_OK)
}

/// Parses a JSONL file of `T`, skipping blank lines; errors cite the line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::Parse(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| CliError::Parse(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn cmd_evaluate(args: EvaluateArgs) -> Result<i32, CliError> {
    if !(args.window > 0.0 && args.window.is_finite()) {
        return Err(CliError::Config(format!("--window must be > 0, got {}", args.window)));
    }
    let emitted: Vec<Event> = read_jsonl(&args.events)?;
    let truth: Vec<GroundTruthEvent> = read_jsonl(&args.truth)?;
    let report = score_latency(&emitted, &truth, args.window);
    let (v, table) = verdict(report, args.window, !args.allow_false_positives);
    print!("{table}");
    if let Some(p) = &args.out {
        let json = serde_json::to_string_pretty(&v).expect("report serializes");
        fs::write(p, json + "\n").map_err(output_err(p))?;
    }
    Ok(if v.pass { EXIT_OK } else { EXIT_EVALUATION_FAILED })
}
