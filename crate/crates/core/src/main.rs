use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;
use tracing_subscriber::EnvFilter;

use atomcheck::config::{build_providers, load_config_with_warnings, ConfigError, PipelineConfig};
use atomcheck::datasets::{self, DatasetExample, DatasetKind, LoadError};
use atomcheck::metrics::{histogram_before_after, write_histogram_csv, NeiPolicy};
use atomcheck::pipeline::{read_traces, run_eval_to_dir, run_pipeline, PipelineError};
use atomcheck::types::{Ablation, Regime, TaskMode, Verdict, VerdictTrace};

/// Evidence-grounded claim verification with atomic facts and
/// uncertainty-gated web corroboration.
#[derive(Parser)]
#[command(name = "atomcheck", version)]
struct Cli {
    /// Log verbosity (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Verify one claim against one document.
    Verify(VerifyArgs),
    /// Run a dataset and write traces.jsonl, metrics.json and metrics.txt.
    Eval(EvalArgs),
    /// Export the before/after support histogram as CSV.
    Hist {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inspect trace files.
    Trace {
        #[command(subcommand)]
        command: TraceCommand,
    },
    /// Inspect configuration.
    Config {
        #[command(subcommand)]
        command: ConfigCommand,
    },
}

#[derive(Subcommand)]
enum TraceCommand {
    /// Pretty-print the trace of one example.
    Show {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        id: String,
    },
}

#[derive(Subcommand)]
enum ConfigCommand {
    /// Validate a config file and probe its providers.
    Check {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct Overrides {
    /// JSON config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    regime: Option<Regime>,
    #[arg(long, value_enum)]
    ablation: Option<Ablation>,
    #[arg(long, value_enum)]
    task: Option<TaskMode>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    claim: String,
    /// File holding the evidence document.
    #[arg(long)]
    doc: PathBuf,
    /// Emit the full trace as JSON.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    dataset: DatasetKind,
    #[arg(long)]
    path: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    nei_policy: Option<NeiPolicy>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("dataset: {0}")]
    Dataset(#[from] LoadError),
    #[error("pipeline: {0}")]
    Pipeline(#[from] PipelineError),
    #[error("io: {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("provider unreachable: {0}")]
    Unreachable(String),
    #[error("invalid input: {0}")]
    Input(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 3,
            CliError::Dataset(_) => 4,
            CliError::Pipeline(_) => 5,
            CliError::Io { .. } => 6,
            CliError::NotFound(_) => 7,
            CliError::Unreachable(_) => 8,
            CliError::Input(_) => 9,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn resolve_config(o: &Overrides) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &o.config {
        Some(path) => {
            let (cfg, warnings) = load_config_with_warnings(path)?;
            for w in warnings {
                eprintln!("warning: unknown config key `{w}` ignored");
            }
            cfg
        }
        None => PipelineConfig::default(),
    };
    if let Some(r) = o.regime {
        cfg.regime = r;
    }
    if let Some(a) = o.ablation {
        cfg.ablation = a;
    }
    if let Some(t) = o.task {
        cfg.task = t;
    }
    Ok(cfg)
}

fn print_trace_table(trace: &VerdictTrace, out: &mut impl std::io::Write) -> std::io::Result<()> {
    writeln!(out, "verdict:     {}", trace.judge_verdict)?;
    writeln!(out, "explanation: {}", trace.judge_explanation)?;
    writeln!(out, "baseline:    {}", trace.baseline_verdict.map_or("-".to_string(), |v| v.to_string()))?;
    writeln!(
        out,
        "used facts:  {}",
        if trace.used_facts.is_empty() { "-".into() } else { trace.used_facts.join(", ") }
    )?;
    writeln!(out)?;
    writeln!(out, "{:<5} {:<10} {:>8} {:>8} {:<8} citations", "id", "label", "p_local", "p_final", "rescored")?;
    for a in &trace.assessments {
        writeln!(
            out,
            "{:<5} {:<10} {:>8.4} {:>8.4} {:<8} {}",
            a.fact.id,
            a.label.to_string(),
            a.p_local,
            a.p_final,
            if a.rescored { "yes" } else { "no" },
            if a.citations.is_empty() { "-".into() } else { a.citations.join(" ") }
        )?;
    }
    for a in &trace.assessments {
        writeln!(out, "  {}: {}", a.fact.id, a.fact.text)?;
    }
    Ok(())
}

fn verify(args: VerifyArgs) -> Result<(), CliError> {
    let cfg = resolve_config(&args.overrides)?;
    cfg.validate()?;
    let document = std::fs::read_to_string(&args.doc).map_err(io_err(&args.doc))?;
    let providers = build_providers(&cfg)?;
    let example = DatasetExample {
        id: args.doc.file_stem().map_or("claim".into(), |s| s.to_string_lossy().into_owned()),
        claim: args.claim,
        document,
        gold: Verdict::Nei,
    };
    let trace = run_pipeline(&example, &cfg, &providers)?;
    let mut stdout = std::io::stdout().lock();
    let written = if args.json {
        writeln!(stdout, "{}", serde_json::to_string_pretty(&trace).expect("trace serializes"))
    } else {
        print_trace_table(&trace, &mut stdout)
    };
    written.map_err(io_err(Path::new("<stdout>")))
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    let mut cfg = resolve_config(&args.overrides)?;
    if let Some(p) = args.nei_policy {
        cfg.nei_policy = p;
    }
    if let Some(n) = args.parallelism {
        cfg.parallelism = n;
    }
    cfg.validate()?;
    let examples = datasets::load(args.dataset, &args.path)?;
    let providers = build_providers(&cfg)?;
    let run = run_eval_to_dir(&examples, &cfg, &providers, &args.out)?;
    print!("{}", run.report.to_table());
    eprintln!("wrote {} traces to {}", run.traces.len(), args.out.display());
    Ok(())
}

fn hist(traces: &Path, bins: usize, out: &Path) -> Result<(), CliError> {
    let traces = read_traces(traces)?;
    let table = histogram_before_after(&traces, bins).map_err(|e| CliError::Input(e.to_string()))?;
    let file = std::fs::File::create(out).map_err(io_err(out))?;
    write_histogram_csv(&table, file)
        .map_err(|e| CliError::Io { path: out.to_path_buf(), source: std::io::Error::other(e.to_string()) })
}

fn trace_show(traces: &Path, id: &str) -> Result<(), CliError> {
    let trace = read_traces(traces)?
        .into_iter()
        .find(|t| t.example_id == id)
        .ok_or_else(|| CliError::NotFound(format!("no trace with example_id `{id}` in {}", traces.display())))?;
    println!("{}", serde_json::to_string_pretty(&trace).expect("trace serializes"));
    Ok(())
}

fn config_check(path: &Path) -> Result<(), CliError> {
    let (cfg, warnings) = load_config_with_warnings(path)?;
    for w in &warnings {
        println!("warning: unknown key `{w}` ignored");
    }
    let providers = build_providers(&cfg)?;
    let mut failed = Vec::new();
    for probe in atomcheck::config::probe_providers(&cfg, &providers) {
        match &probe.outcome {
            Ok(()) => println!("{:<10} {:<9} ok", probe.kind.as_str(), probe.backend),
            Err(e) => {
                println!("{:<10} {:<9} FAILED: {e}", probe.kind.as_str(), probe.backend);
                failed.push(probe.kind.as_str());
            }
        }
    }
    if !failed.is_empty() {
        return Err(CliError::Unreachable(failed.join(", ")));
    }
    println!("config ok: regime {:?}, ablation {:?}, task {:?}", cfg.regime, cfg.ablation, cfg.task);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default_level)))
        .with_writer(std::io::stderr)
        .init();

    let result = match cli.command {
        Command::Verify(args) => verify(args),
        Command::Eval(args) => eval(args),
        Command::Hist { traces, bins, out } => hist(&traces, bins, &out),
        Command::Trace { command: TraceCommand::Show { traces, id } } => trace_show(&traces, &id),
        Command::Config { command: ConfigCommand::Check { config } } => config_check(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = std::io::stdout().flush();
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
