use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use pmdg_core::dataset::write_image_folder;
use pmdg_core::harness::{
    aggregate, apply_overrides, expand_grid, read_records, render_report, run_sweep, DatasetSpec,
    ExperimentConfig, Existing, RecordSink, ReportKind, SweepFile,
};
use pmdg_core::pseudodomain::preview::write_previews;
use pmdg_core::pseudodomain::TransformParams;
use pmdg_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "pmdg", version, about = "Pseudo multi-domain generalization experiments")]
struct Cli {
    /// Print failures as one JSON object on stderr.
    #[arg(long, global = true)]
    json_errors: bool,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Materialize a synthetic dataset as an image folder.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one experiment config.
    Run(RunArgs),
    /// Run every cell of a grid file.
    Sweep(RunArgs),
    /// Render a report from a records file.
    Report {
        /// table, gains, equal_data or correlation
        kind: String,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a before/after image grid for every registered transform.
    PreviewTransforms {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Base seed; trial t uses seed + t.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Dotted key=value, repeatable; values are parsed as JSON when possible.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory for records and training logs.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Records file; defaults to <out>/records.jsonl.
    #[arg(long)]
    records: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Replace records whose cell already exists instead of skipping it.
    #[arg(long)]
    overwrite: bool,
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::invalid("--config", format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::invalid("--config", format!("{}: {e}", path.display())))
}

/// Accepts an experiment config, a dataset spec or a bare synthetic spec.
fn dataset_spec(path: &Path) -> Result<DatasetSpec> {
    let v = read_json(path)?;
    let spec = if let Some(d) = v.get("dataset") {
        serde_json::from_value(d.clone())
    } else if v.get("synthetic").is_some() || v.get("folder").is_some() {
        serde_json::from_value(v)
    } else {
        serde_json::from_value(v).map(DatasetSpec::Synthetic)
    };
    spec.map_err(|e| Error::invalid("dataset", e.to_string()))
}

fn cli_overrides(args: &RunArgs) -> Vec<String> {
    let mut o = args.overrides.clone();
    if let Some(s) = args.seed {
        o.push(format!("train.seed={s}"));
    }
    if let Some(t) = args.trials {
        o.push(format!("trials={t}"));
    }
    o
}

fn prepare(mut cfg: ExperimentConfig, args: &RunArgs) -> Result<ExperimentConfig> {
    if cfg.train.log_dir.is_none() {
        cfg.train.log_dir = Some(args.out.join("logs"));
    }
    apply_overrides(&cfg, &cli_overrides(args))
}

fn execute(configs: Vec<ExperimentConfig>, args: &RunArgs) -> Result<()> {
    let records = args.records.clone().unwrap_or_else(|| args.out.join("records.jsonl"));
    let policy = if args.overwrite { Existing::Overwrite } else { Existing::Skip };
    let mut sink = RecordSink::open(&records, policy)?;
    let summary = run_sweep(&configs, args.jobs, &mut sink)?;
    if !summary.records.is_empty() {
        for row in aggregate(&summary.records)? {
            let flag = if row.single_trial { " (single trial)" } else { "" };
            println!("{}\t{}\t{}{flag}", row.method, row.target, row.cell);
        }
    }
    println!(
        "{} written, {} skipped -> {}",
        summary.written,
        summary.skipped,
        sink.path().display()
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let mut spec = dataset_spec(&config)?;
            let DatasetSpec::Synthetic(s) = &mut spec else {
                return Err(Error::invalid("dataset", "gen-data needs a synthetic spec"));
            };
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let n = write_image_folder(&spec.load()?, &out)?;
            println!("wrote {n} images to {}", out.display());
            Ok(())
        }
        Command::Run(args) => {
            let cfg: ExperimentConfig = serde_json::from_value(read_json(&args.config)?)?;
            let cfg = prepare(cfg, &args)?;
            execute(vec![cfg], &args)
        }
        Command::Sweep(args) => {
            let sweep: SweepFile = serde_json::from_value(read_json(&args.config)?)?;
            let configs = expand_grid(&sweep)?
                .into_iter()
                .map(|c| prepare(c, &args))
                .collect::<Result<Vec<_>>>()?;
            execute(configs, &args)
        }
        Command::Report { kind, records, out } => {
            let kind = ReportKind::parse(&kind)?;
            let recs = read_records(&records)?;
            for f in render_report(kind, &recs, &out)? {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::PreviewTransforms {
            dataset,
            out,
            seed,
            count,
        } => {
            let ds = dataset_spec(&dataset)?.load()?;
            for f in write_previews(&ds, count, seed, &TransformParams::default(), &out)? {
                println!("{}", f.display());
            }
            Ok(())
        }
    }
}

/// Config key behind an error; for parse errors, the first backticked name
/// serde reports (`unknown field `x``, `missing field `x``).
fn offending_key(e: &Error) -> Option<String> {
    if let Some(k) = e.key() {
        return Some(k.to_string());
    }
    match e {
        Error::Json(_) => e.to_string().split('`').nth(1).map(str::to_string),
        _ => None,
    }
}

fn report_error(e: &Error, code: u8, json: bool) {
    let key = offending_key(e);
    if json {
        let v = json!({"error": e.to_string(), "key": key, "exit_code": code});
        eprintln!("{v}");
    } else {
        eprintln!("error: {e}");
        if let Some(k) = key {
            eprintln!("offending key: {k}");
        }
    }
}

fn main() -> ExitCode {
    let json_errors = std::env::args().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if json_errors {
                let v = json!({"error": e.to_string().trim(), "key": Value::Null, "exit_code": 1});
                eprintln!("{v}");
            } else {
                let _ = e.print();
            }
            return ExitCode::from(1);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let json = cli.json_errors;
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if e.is_validation() { 1 } else { 2 };
            report_error(&e, code, json);
            ExitCode::from(code)
        }
    }
}
