mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use engage_core::pipeline::{run_pipeline, PipelineConfig, PipelineError, RunReport, Stage};
use engage_core::sessionizer::DETECTOR_URL_ENV;
use engage_core::synth::{enrollments_for_turns, gen_corpus, SynthSpec};

#[derive(Parser)]
#[command(name = "engage", version, about = "Engagement analytics for student-tutor conversation logs")]
#[command(after_help = "Environment:\n  ENGAGE_TOPIC_DETECTOR_URL  remote topic detector endpoint; overrides the config")]
struct Cli {
    /// Pipeline config (TOML). Relative paths inside resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the elbow search and for synthetic corpora.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Inputs {
    /// Turn log file (JSON lines); repeatable.
    #[arg(long = "turns")]
    turns: Vec<PathBuf>,
    /// Context document (JSON).
    #[arg(long)]
    context: Option<PathBuf>,
    /// Fix k instead of choosing it by the elbow rule.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Every stage, then the figures.
    Run(Inputs),
    /// Ingest and segment; writes sessions.csv.
    Segment(Inputs),
    /// Through feature extraction; adds features.csv.
    Featurize(Inputs),
    /// Through clustering and labeling; adds the model, assignments, stability, elbow and centroids.
    Cluster(Inputs),
    /// Through process mining; adds pooled and subgroup transition matrices.
    Mine(Inputs),
    /// Through the subgroup statistics; adds shares.csv and stats.csv.
    Stats(Inputs),
    /// Render SVG figures from an existing artifact directory.
    Report {
        /// Artifact directory; defaults to --out.
        #[arg(long)]
        artifacts: Option<PathBuf>,
    },
    /// Write a synthetic corpus with gold sidecar and a ready-to-run config.
    Synth(SynthArgs),
    /// Time every stage on a synthetic (or configured) corpus.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Synth spec (TOML); flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    enrollments: Option<usize>,
    /// Size the corpus to at least this many turns instead.
    #[arg(long, conflicts_with = "enrollments")]
    target_turns: Option<usize>,
    /// Share of boundaries planted as short-gap topic shifts.
    #[arg(long)]
    topic_fraction: Option<f64>,
    /// Prompts from topic words only, without engagement cues.
    #[arg(long)]
    no_cues: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 200_000)]
    target_turns: usize,
    #[arg(long, default_value_t = 1)]
    repeat: usize,
}

enum Failure {
    Input(anyhow::Error),
    Stage(anyhow::Error),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.is_input_error() {
            Failure::Input(e.into())
        } else {
            Failure::Stage(e.into())
        }
    }
}

impl From<report::ReportError> for Failure {
    fn from(e: report::ReportError) -> Self {
        match e {
            report::ReportError::MissingArtifact(_) | report::ReportError::Malformed { .. } => Failure::Input(e.into()),
            report::ReportError::Io { .. } => Failure::Stage(e.into()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn base_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        config.cluster.elbow_seed = seed;
    }
    Ok(config)
}

fn pipeline_config(cli: &Cli, inputs: &Inputs) -> Result<PipelineConfig, Failure> {
    let mut config = base_config(cli)?;
    if !inputs.turns.is_empty() {
        config.input.turns = inputs.turns.clone();
    }
    if let Some(c) = &inputs.context {
        config.input.context = Some(c.clone());
    }
    if inputs.k.is_some() {
        config.cluster.k = inputs.k;
    }
    Ok(config)
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let through = |inputs: &Inputs, stage: Stage| -> Result<RunReport, Failure> {
        let config = pipeline_config(cli, inputs)?;
        if let Ok(url) = std::env::var(DETECTOR_URL_ENV) {
            info!("topic detector endpoint from {DETECTOR_URL_ENV}: {url}");
        }
        let report = run_pipeline(&config, stage)?;
        for w in &report.manifest.warnings {
            warn!("{w}");
        }
        info!("artifacts in {}", config.output_dir.display());
        Ok(report)
    };
    match &cli.command {
        Command::Run(inputs) => {
            let config = pipeline_config(cli, inputs)?;
            through(inputs, Stage::Stats)?;
            render_report(&config.output_dir)
        }
        Command::Segment(i) => through(i, Stage::Segment).map(drop),
        Command::Featurize(i) => through(i, Stage::Featurize).map(drop),
        Command::Cluster(i) => through(i, Stage::Cluster).map(drop),
        Command::Mine(i) => through(i, Stage::Mine).map(drop),
        Command::Stats(i) => through(i, Stage::Stats).map(drop),
        Command::Report { artifacts } => {
            let dir = match (artifacts, &cli.out) {
                (Some(d), _) | (None, Some(d)) => d.clone(),
                (None, None) => base_config(cli)?.output_dir,
            };
            render_report(&dir)
        }
        Command::Synth(args) => synth(cli, args),
        Command::Bench(args) => bench(cli, args),
    }
}

fn render_report(dir: &Path) -> Result<(), Failure> {
    if !dir.is_dir() {
        return Err(Failure::Input(anyhow!("artifact directory not found: {}", dir.display())));
    }
    let summary = report::render(dir)?;
    for n in &summary.notices {
        warn!("{n}");
    }
    info!("wrote {} figures to {}", summary.figures.len(), dir.join("figures").display());
    Ok(())
}

fn synth_spec(cli: &Cli, args: &SynthArgs) -> Result<SynthSpec, Failure> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("input not found: {}", path.display()))
                .map_err(Failure::Input)?;
            toml::from_str(&text)
                .with_context(|| format!("invalid synth spec {}", path.display()))
                .map_err(Failure::Input)?
        }
        None => SynthSpec::default(),
    };
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    if let Some(f) = args.topic_fraction {
        spec.topic_boundary_fraction = f;
    }
    if args.no_cues {
        spec.engagement_cues = false;
    }
    if let Some(n) = args.enrollments {
        spec.n_enrollments = n;
    }
    if let Some(target) = args.target_turns {
        spec.n_enrollments = enrollments_for_turns(&spec, target).map_err(|e| Failure::Input(e.into()))?;
    }
    spec.validate().map_err(|e| Failure::Input(e.into()))?;
    Ok(spec)
}

/// Generates a corpus into `dir` and writes a config that runs it.
fn write_synth(spec: &SynthSpec, dir: &Path) -> Result<usize, Failure> {
    let corpus = gen_corpus(spec).map_err(|e| Failure::Input(e.into()))?;
    let files = corpus
        .write_to(dir)
        .with_context(|| format!("cannot write synthetic corpus to {}", dir.display()))
        .map_err(Failure::Stage)?;
    let config = format!(
        "# Generated alongside the synthetic corpus.\noutput_dir = \"out\"\n\n[input]\nturns = [\"{}\"]\ncontext = \"{}\"\n",
        files.turns.file_name().and_then(|n| n.to_str()).unwrap_or("turns.jsonl"),
        files.context.file_name().and_then(|n| n.to_str()).unwrap_or("context.json"),
    );
    std::fs::write(dir.join("pipeline.toml"), config)
        .with_context(|| format!("cannot write {}", dir.join("pipeline.toml").display()))
        .map_err(Failure::Stage)?;
    let spec_toml = toml::to_string(spec).map_err(|e| Failure::Stage(e.into()))?;
    std::fs::write(dir.join("synth_spec.toml"), spec_toml)
        .with_context(|| format!("cannot write {}", dir.join("synth_spec.toml").display()))
        .map_err(Failure::Stage)?;
    Ok(corpus.turns.len())
}

fn synth(cli: &Cli, args: &SynthArgs) -> Result<(), Failure> {
    let spec = synth_spec(cli, args)?;
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("synth"));
    let n = write_synth(&spec, &dir)?;
    info!("wrote {n} turns for {} enrollments to {}", spec.n_enrollments, dir.display());
    Ok(())
}

fn bench(cli: &Cli, args: &BenchArgs) -> Result<(), Failure> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("bench"));
    let mut config = base_config(cli)?;
    if config.input.turns.is_empty() {
        let spec = SynthSpec { seed: cli.seed.unwrap_or(0), ..SynthSpec::default() };
        let spec = SynthSpec {
            n_enrollments: enrollments_for_turns(&spec, args.target_turns).map_err(|e| Failure::Input(e.into()))?,
            ..spec
        };
        let t = Instant::now();
        let input = out.join("input");
        let n = write_synth(&spec, &input)?;
        info!("generated {n} synthetic turns in {:.2}s", t.elapsed().as_secs_f64());
        config.input.turns = vec![input.join("turns.jsonl")];
        config.input.context = Some(input.join("context.json"));
    }
    config.output_dir = out.join("run");

    let mut lines = vec!["repeat,stage,seconds,rows,rows_per_sec".to_string()];
    let mut totals = Vec::new();
    for r in 0..args.repeat.max(1) {
        let report = run_pipeline(&config, Stage::Stats)?;
        println!("run {}: {:>10} {:>10} {:>12} {:>14}", r + 1, "stage", "seconds", "rows", "rows/sec");
        let mut sum = 0.0;
        for t in &report.timings {
            let rate = t.rows as f64 / t.seconds.max(1e-9);
            println!("       {:>10} {:>10.3} {:>12} {:>14.0}", t.stage.to_string(), t.seconds, t.rows, rate);
            lines.push(format!("{},{},{},{},{}", r + 1, t.stage, t.seconds, t.rows, rate));
            sum += t.seconds;
        }
        println!("       {:>10} {:>10.3}   (stage sum {:.3})", "total", report.total_seconds, sum);
        lines.push(format!("{},total,{},{},", r + 1, report.total_seconds, report.manifest.counts.turns_read));
        totals.push(report.total_seconds);
    }
    if totals.len() > 1 {
        let mean = totals.iter().sum::<f64>() / totals.len() as f64;
        let spread = totals.iter().map(|t| (t - mean).abs()).fold(0.0, f64::max) / mean;
        println!("mean total {mean:.3}s over {} runs; max deviation {:.1}%", totals.len(), spread * 100.0);
    }
    let path = out.join("bench.csv");
    std::fs::write(&path, lines.join("\n") + "\n")
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(Failure::Stage)?;
    Ok(())
}
