//! `egomem`: question answering and temporal grounding over caption tracks.
//!
//! Exit codes: 0 success, 1 fatal error, 2 some items failed (see
//! `<out>.failures.json`), 64 usage or configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use egomem::config::{extract_overrides, Command, PipelineConfig};
use egomem::metrics::summary_table;
use egomem::pipeline::{self, Backends, PipelineError, RunSummary, Split};
use tracing_subscriber::EnvFilter;

const EXIT_FATAL: u8 = 1;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "egomem", version)]
#[command(about = "Answer questions about long egocentric videos from their caption tracks")]
#[command(
    after_help = "Any config key can be overridden with --section.key=value, e.g. --refine.pad_alpha=0.\n\
Auth tokens are read from the environment variables named by llm.auth_env and embedder.auth_env."
)]
struct Cli {
    /// TOML config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every random stream (overrides `seed`)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Completions per QA question (overrides `runs`)
    #[arg(long, global = true)]
    runs: Option<usize>,

    /// Output file (overrides `paths.output`)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Log line format on stderr
    #[arg(long, global = true, value_enum, default_value_t = LogFormat::Json)]
    log_format: LogFormat,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum LogFormat {
    Json,
    Text,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Qa,
    Nlq,
}

#[derive(Subcommand)]
enum Cmd {
    /// Condense caption tracks and write them back in the captions format
    Digest,
    /// Answer multiple-choice questions
    Ask,
    /// Localize natural-language queries in time
    Localize,
    /// Score a predictions file against ground truth
    Eval {
        /// Which predictions file format to read
        #[arg(long, value_enum)]
        split: SplitArg,
        /// Predictions file (overrides `paths.predictions`)
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Generate labeled windows for training a candidate selector
    GenRefineData,
}

fn quoted(p: &std::path::Path) -> String {
    serde_json::to_string(&p.to_string_lossy()).expect("string serializes")
}

fn init_logging(format: LogFormat) {
    let filter = EnvFilter::try_from_env("EGOMEM_LOG").unwrap_or_else(|_| EnvFilter::new("info"));
    let builder = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr);
    match format {
        LogFormat::Json => builder.json().flatten_event(true).init(),
        LogFormat::Text => builder.init(),
    }
}

fn run(cli: &Cli, mut overrides: Vec<(String, String)>) -> Result<RunSummary, PipelineError> {
    if let Some(s) = cli.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(r) = cli.runs {
        overrides.push(("runs".into(), r.to_string()));
    }
    if let Some(o) = &cli.out {
        overrides.push(("paths.output".into(), quoted(o)));
    }
    if let Cmd::Eval {
        predictions: Some(p),
        ..
    } = &cli.command
    {
        overrides.push(("paths.predictions".into(), quoted(p)));
    }
    let cfg = PipelineConfig::load(cli.config.as_deref(), &overrides)?;

    let backends = |cmd: Command| -> Result<Backends, PipelineError> {
        cfg.validate_for(cmd)?;
        Backends::from_config(&cfg, cmd)
    };
    match &cli.command {
        Cmd::Digest => {
            let b = backends(Command::Digest)?;
            pipeline::cmd_digest(&cfg, b.llm.as_ref(), b.embedder.as_ref())
        }
        Cmd::Ask => {
            let b = backends(Command::Ask)?;
            pipeline::cmd_ask(&cfg, b.llm.as_ref(), b.embedder.as_ref())
        }
        Cmd::Localize => {
            let b = backends(Command::Localize)?;
            pipeline::cmd_localize(&cfg, b.llm.as_ref(), b.embedder.as_ref())
        }
        Cmd::Eval { split, .. } => {
            let split = match split {
                SplitArg::Qa => Split::Qa,
                SplitArg::Nlq => Split::Nlq,
            };
            pipeline::cmd_eval(&cfg, split)
        }
        Cmd::GenRefineData => pipeline::cmd_gen_refine_data(&cfg),
    }
}

fn print_summary(s: &RunSummary) {
    println!("{} finished", s.command);
    for (k, v) in &s.counts {
        println!("  {k:<24} {v}");
    }
    if let Some(report) = &s.report {
        print!("{}", summary_table(report));
    }
    for o in &s.outputs {
        println!("  wrote {}", o.display());
    }
    if !s.failures.is_empty() {
        println!("  {} item(s) failed:", s.failures.len());
        for f in &s.failures {
            println!(
                "    [{}] video {} qid {}: {}",
                f.stage,
                f.video_id.as_deref().unwrap_or("-"),
                f.qid.as_deref().unwrap_or("-"),
                f.error
            );
        }
    }
}

fn main() -> ExitCode {
    let (args, overrides) = match extract_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    init_logging(cli.log_format);

    match run(&cli, overrides) {
        Ok(summary) => {
            print_summary(&summary);
            ExitCode::from(summary.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let PipelineError::Aborted { failures } = &e {
                for f in failures {
                    eprintln!(
                        "  video {}: {}",
                        f.video_id.as_deref().unwrap_or("-"),
                        f.error
                    );
                }
            }
            ExitCode::from(if e.is_usage() { EXIT_USAGE } else { EXIT_FATAL })
        }
    }
}
