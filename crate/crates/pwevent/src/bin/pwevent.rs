//! Command-line experiment runner.
//!
//! `run` executes a parameter-grid experiment from a JSON config and/or
//! flags, `gen` emits a synthetic dataset as CSV, and `audit` re-checks a
//! saved trace's ledger against its recorded requirements.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pwevent::datagen;
use pwevent::harness::{
    run_experiment, DatasetSpec, ExperimentConfig, MechanismKind, SavedTrace,
};

#[derive(Parser)]
#[command(name = "pwevent", version, about = "Streaming histogram release under per-user sliding-window privacy budgets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a grid experiment and emit JSONL records plus a CSV summary.
    Run(RunArgs),
    /// Generate a synthetic stream and write it as a CSV event log.
    Gen(GenArgs),
    /// Re-audit a saved trace file.
    Audit(AuditArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// pbd | pba | dpbd | dpba | bd | ba | uniform
    #[arg(long)]
    mechanism: Option<String>,
    /// Comma-separated low-budget grid, e.g. 0.2,0.4,0.6
    #[arg(long, value_delimiter = ',')]
    budget_list: Option<Vec<f64>>,
    /// Comma-separated window grid, e.g. 40,80,120
    #[arg(long, value_delimiter = ',')]
    window_list: Option<Vec<u64>>,
    /// Low-pair user fraction(s).
    #[arg(long, value_delimiter = ',')]
    ratio: Option<Vec<f64>>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSONL output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Synthetic stream length.
    #[arg(long)]
    slots: Option<usize>,
    #[arg(long)]
    users: Option<usize>,
    /// sin | log | tlns (CSV datasets are configured in the config file).
    #[arg(long)]
    dataset: Option<String>,
    /// Directory to dump re-auditable per-trial traces into.
    #[arg(long)]
    dump_traces: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    /// sin | log | tlns
    #[arg(long, default_value = "sin")]
    dataset: String,
    #[arg(long, default_value_t = 2000)]
    slots: usize,
    #[arg(long, default_value_t = 1000)]
    users: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output CSV path (columns: user, slot, bucket).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AuditArgs {
    /// Trace file produced by `run --dump-traces`.
    #[arg(long)]
    trace: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Gen(args) => cmd_gen(args),
        Command::Audit(args) => cmd_audit(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn parse_dataset(name: &str, slots: usize) -> Result<DatasetSpec, pwevent::Error> {
    match name.to_ascii_lowercase().as_str() {
        "sin" => Ok(DatasetSpec::Sin { slots }),
        "log" => Ok(DatasetSpec::Log { slots }),
        "tlns" => Ok(DatasetSpec::Tlns { slots }),
        other => Err(pwevent::Error::Config(format!(
            "unknown dataset '{other}' (expected sin, log, or tlns)"
        ))),
    }
}

fn cmd_run(args: RunArgs) -> Result<ExitCode, pwevent::Error> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_json_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(m) = &args.mechanism {
        cfg.mechanism = MechanismKind::parse(m)?;
    }
    if let Some(b) = args.budget_list {
        cfg.budgets = b;
    }
    if let Some(w) = args.window_list {
        cfg.windows = w;
    }
    if let Some(r) = args.ratio {
        cfg.ratios = r;
    }
    if let Some(r) = args.repeats {
        cfg.repeats = r;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = args.out {
        cfg.out = Some(o);
    }
    if let Some(u) = args.users {
        cfg.users = u;
    }
    if let Some(d) = args.dump_traces {
        cfg.dump_traces = Some(d);
    }
    let slots = args.slots.unwrap_or(match &cfg.dataset {
        DatasetSpec::Tlns { slots } | DatasetSpec::Sin { slots } | DatasetSpec::Log { slots } => {
            *slots
        }
        DatasetSpec::Csv { .. } => 0,
    });
    if let Some(name) = &args.dataset {
        cfg.dataset = parse_dataset(name, slots)?;
    } else if args.slots.is_some() {
        cfg.dataset = match cfg.dataset {
            DatasetSpec::Tlns { .. } => DatasetSpec::Tlns { slots },
            DatasetSpec::Sin { .. } => DatasetSpec::Sin { slots },
            DatasetSpec::Log { .. } => DatasetSpec::Log { slots },
            csv @ DatasetSpec::Csv { .. } => csv,
        };
    }
    cfg.validate()?;

    let outcome = run_experiment(&cfg)?;
    let violations: usize = outcome.records.iter().map(|r| r.audit_violations).sum();
    println!(
        "{} trials, {} with audit violations ({} violations total)",
        outcome.records.len(),
        outcome.records.iter().filter(|r| !r.audit_ok).count(),
        violations
    );
    if let Some(out) = &cfg.out {
        println!("records: {}", out.display());
        println!("summary: {}", pwevent::harness::summary_path(out).display());
    }
    Ok(if outcome.any_violation { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn cmd_gen(args: GenArgs) -> Result<ExitCode, pwevent::Error> {
    let p = match args.dataset.to_ascii_lowercase().as_str() {
        "sin" => datagen::gen_sin(args.slots),
        "log" => datagen::gen_log(args.slots),
        "tlns" => datagen::gen_tlns(args.slots, args.seed),
        other => {
            return Err(pwevent::Error::Config(format!(
                "unknown dataset '{other}' (expected sin, log, or tlns)"
            )))
        }
    };
    let batches = datagen::realize_binary_stream(&p, args.users, args.seed.wrapping_add(1));
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut writer = csv::Writer::from_path(&args.out)?;
    writer.write_record(["user", "slot", "bucket"])?;
    for batch in &batches {
        for (user, assignment) in batch.assignments.iter().enumerate() {
            if let Some(bucket) = assignment {
                writer.write_record([
                    format!("u{user}"),
                    batch.slot.to_string(),
                    bucket.to_string(),
                ])?;
            }
        }
    }
    writer.flush()?;
    println!(
        "wrote {} slots x {} users to {} (clip fraction {:.4})",
        batches.len(),
        args.users,
        args.out.display(),
        p.clip_fraction()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_audit(args: AuditArgs) -> Result<ExitCode, pwevent::Error> {
    let saved = SavedTrace::from_json_file(&args.trace)?;
    let report = saved.audit();
    println!(
        "mechanism {}: {} constraints checked, min slack {:.3e}",
        saved.trace.mechanism, report.checked, report.min_slack
    );
    if report.passed() {
        println!("audit: PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("audit: FAIL ({} violations)", report.violations.len());
        for v in report.violations.iter().take(10) {
            println!(
                "  user {} slot {} {:?}: spent {:.6} > limit {:.6}",
                v.user, v.slot, v.kind, v.window_sum, v.limit
            );
        }
        Ok(ExitCode::from(1))
    }
}
