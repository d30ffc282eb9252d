//! `tlm`: synthesize traffic, ingest captures, run the detect/mask loop and
//! re-render its reports.

mod config;
mod render;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tlm::features::FeatureError;
use tlm::framework::{self, read_report, write_run, FrameworkError, REPORT_FILE};
use tlm::ingest::{self, DirectionFilter, IngestError, LabeledDataset};
use tlm::models::ModelError;
use tlm::synth::{self, LeakageProfile};
use tracing::info;
use tracing_subscriber::EnvFilter;

use config::{DatasetSource, RunConfig};

#[derive(Parser)]
#[command(
    name = "tlm",
    version,
    about = "Find the bytes of encrypted sessions that leak their label"
)]
struct Cli {
    /// Cap on worker threads (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled dataset from a leakage profile.
    Synth(SynthArgs),
    /// Read pcaps or JSONL sessions and write them out as JSONL.
    Ingest(IngestArgs),
    /// Run the detect/mask loop described by a run config.
    Run(RunArgs),
    /// Re-render a run's report.json.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Pcap,
    Jsonl,
}

#[derive(Args)]
struct SynthArgs {
    /// Leakage profile JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Output format; inferred from the extension of --out when omitted.
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Replaces the profile's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct IngestArgs {
    /// Directory of pcaps, labeled by --labels or by parent directory name.
    #[arg(long, conflicts_with = "jsonl", required_unless_present = "jsonl")]
    pcap_dir: Option<PathBuf>,
    /// Flow-key or file-stem to label map (JSON object).
    #[arg(long, requires = "pcap_dir")]
    labels: Option<PathBuf>,
    #[arg(long)]
    jsonl: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Keep both directions, or only c2s or s2c.
    #[arg(long, default_value = "both")]
    direction: DirectionFilter,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Replaces the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replaces the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// A report.json, or the run directory holding one.
    report: PathBuf,
    /// Write one offset-importance TSV per iteration.
    #[arg(long)]
    plot_data: bool,
    /// Directory for the TSVs (default: next to the report).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure and the exit code it maps to.
enum Failure {
    Config(anyhow::Error),
    Data(anyhow::Error),
    Training(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Data(_) => 2,
            Failure::Training(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Data(e) | Failure::Training(e) => e,
        }
    }
}

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn data_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Data(e.into())
}

fn ingest_failure(e: IngestError) -> Failure {
    match e {
        IngestError::InvalidFraction(_) => config_err(e),
        _ => data_err(e),
    }
}

/// Sorts a framework error by who has to act on it.
fn framework_failure(e: FrameworkError) -> Failure {
    match e {
        FrameworkError::Config(_) | FrameworkError::Io { .. } | FrameworkError::Json(_) => config_err(e),
        FrameworkError::Ingest(inner) => ingest_failure(inner),
        FrameworkError::Feature(FeatureError::EmptyView { .. })
        | FrameworkError::Model(ModelError::EmptyData | ModelError::DegenerateData) => data_err(e),
        FrameworkError::Model(ModelError::InvalidHyperparams(_)) => config_err(e),
        _ => Failure::Training(e.into()),
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<(), Failure> {
    let mut profile = LeakageProfile::from_json_file(&a.config).map_err(config_err)?;
    if let Some(s) = a.seed {
        profile.seed = s;
    }
    let ds = synth::generate(&profile).map_err(config_err)?;
    let format = a.format.unwrap_or(match a.out.extension().and_then(|e| e.to_str()) {
        Some("pcap") => Format::Pcap,
        _ => Format::Jsonl,
    });
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))
            .map_err(config_err)?;
    }
    match format {
        Format::Pcap => {
            let labels = synth::write_pcap(&ds, &a.out).map_err(config_err)?;
            println!("wrote {} and {}", a.out.display(), labels.display());
        }
        Format::Jsonl => {
            ingest::write_sessions_jsonl(&ds, &a.out).map_err(config_err)?;
            println!("wrote {}", a.out.display());
        }
    }
    print_summary(&ds);
    Ok(())
}

fn print_summary(ds: &LabeledDataset) {
    println!(
        "classes {}  sessions {}  segments {}",
        ds.class_names.len(),
        ds.sessions.len(),
        ds.num_segments()
    );
}

fn cmd_ingest(a: &IngestArgs) -> Result<(), Failure> {
    let ds = match (&a.pcap_dir, &a.jsonl) {
        (Some(dir), _) => {
            let map = a
                .labels
                .as_deref()
                .map(ingest::read_label_map)
                .transpose()
                .map_err(ingest_failure)?;
            let (ds, summary) = ingest::read_pcap_dir(dir, map.as_ref()).map_err(ingest_failure)?;
            println!(
                "files {}  skipped frames {}  unlabeled flows {}  duplicate segments {}",
                summary.files,
                summary.skipped.total(),
                summary.unlabeled_flows,
                summary.duplicates
            );
            ds
        }
        (None, Some(path)) => ingest::read_sessions_jsonl(path).map_err(ingest_failure)?,
        (None, None) => return Err(config_err(anyhow!("one of --pcap-dir or --jsonl is required"))),
    };
    let ds = ds.filter_direction(a.direction);
    ingest::write_sessions_jsonl(&ds, &a.out).map_err(config_err)?;
    println!("wrote {}", a.out.display());
    print_summary(&ds);
    Ok(())
}

fn load_dataset(src: &DatasetSource) -> Result<LabeledDataset, Failure> {
    match src {
        DatasetSource::PcapDir { dir, labels } => {
            let map = labels
                .as_deref()
                .map(ingest::read_label_map)
                .transpose()
                .map_err(ingest_failure)?;
            let (ds, summary) = ingest::read_pcap_dir(dir, map.as_ref()).map_err(ingest_failure)?;
            info!(
                files = summary.files,
                skipped = summary.skipped.total(),
                unlabeled = summary.unlabeled_flows,
                "ingested pcaps"
            );
            Ok(ds)
        }
        DatasetSource::Jsonl { path } => ingest::read_sessions_jsonl(path).map_err(ingest_failure),
        DatasetSource::Synth { profile } => {
            // A missing profile is missing data; a bad one is a config error.
            if !profile.exists() {
                return Err(data_err(anyhow!("synth profile {} does not exist", profile.display())));
            }
            let p = LeakageProfile::from_json_file(profile).map_err(config_err)?;
            synth::generate(&p).map_err(config_err)
        }
    }
}

fn cmd_run(a: &RunArgs) -> Result<(), Failure> {
    let cfg = RunConfig::load(&a.config).map_err(config_err)?;
    let fw = cfg.framework_config(a.seed).map_err(config_err)?;
    let out_dir = a.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    RunConfig::prepare_output(&out_dir).map_err(config_err)?;

    let ds = load_dataset(&cfg.dataset)?.filter_direction(cfg.direction);
    if ds.sessions.is_empty() {
        return Err(data_err(anyhow!("the dataset holds no labeled sessions")));
    }
    info!(
        sessions = ds.sessions.len(),
        classes = ds.class_names.len(),
        "dataset loaded"
    );

    let mut outcomes = framework::run(&ds, &fw).map_err(framework_failure)?;
    let report = write_run(&out_dir, &fw, &ds, &mut outcomes).map_err(framework_failure)?;
    print!("{}", render::render_report(&report));
    eprintln!("report written to {}", out_dir.join(REPORT_FILE).display());
    Ok(())
}

fn report_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(REPORT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn cmd_report(a: &ReportArgs) -> Result<(), Failure> {
    let path = report_path(&a.report);
    let report = read_report(&path)
        .with_context(|| format!("reading report {}", path.display()))
        .map_err(config_err)?;
    print!("{}", render::render_report(&report));
    if a.plot_data {
        let dir = a
            .out
            .clone()
            .unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).join("plot"));
        let written = render::write_plot_data(&report, &dir)
            .with_context(|| format!("writing plot data to {}", dir.display()))
            .map_err(config_err)?;
        eprintln!("wrote {} TSV files to {}", written.len(), dir.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("TLM_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Ingest(a) => cmd_ingest(a),
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
