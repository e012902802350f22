use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use advprop::config::ExperimentConfig;
use advprop::error::{Error, Result};
use advprop::report::cmd_report;
use advprop::run::{cmd_cost_audit, cmd_eval, cmd_train, reference_errors, resolve_path, EvalData, TrainOptions, CONFIG_FILE};

/// Vanilla, AdvProp and Fast AdvProp training with cost accounting.
///
/// Relative run paths resolve against $ADVPROP_HOME when it is set.
#[derive(Parser)]
#[command(name = "advprop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a configuration into a run directory.
    ///
    /// Any config field can be overridden as `--field value`, using dots
    /// for nested tables: `--p_adv 1/5 --attack.epsilon 0.0157`.
    Train {
        /// TOML experiment file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory to create (or continue with --resume).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue an interrupted run from its last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Finished run whose corruption errors normalize the score.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Stop after this many completed epochs (resume later).
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--FIELD VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on clean and, optionally, corrupted data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset container file; defaults to the test split of the
        /// config.toml next to the checkpoint.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Config whose test split to evaluate on.
        #[arg(long, conflicts_with = "dataset")]
        config: Option<PathBuf>,
        /// Run the corruption suite with this seed.
        #[arg(long)]
        corruptions: Option<u64>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 250)]
        batch_size: usize,
    },
    /// Summarize run directories as a table.
    Report {
        /// Run directories.
        runs: Vec<PathBuf>,
        /// Write CSV here instead of printing aligned text.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Audit a run's ledger against its cost formula.
    CostAudit { run: PathBuf },
}

/// Train flags that follow the first config override land in the trailing
/// arguments; they are picked out here.
#[derive(Default)]
struct TrainFlags {
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    resume: bool,
    reference: Option<PathBuf>,
    stop_after: Option<usize>,
}

/// `--a.b value`, `--a.b=value` pairs; hyphens in names become underscores.
fn parse_overrides(args: &[String], flags: &mut TrainFlags) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--resume" {
            flags.resume = true;
            continue;
        }
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| Error::config(a.clone(), "expected `--field value`"))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::config(key, "missing value"))?;
                (key.to_string(), v.clone())
            }
        };
        match key.as_str() {
            "config" => flags.config = Some(value.into()),
            "out" => flags.out = Some(value.into()),
            "reference" => flags.reference = Some(value.into()),
            "stop-after" | "stop_after" => {
                flags.stop_after = Some(
                    value
                        .parse()
                        .map_err(|_| Error::config("stop-after", format!("`{value}` is not an epoch count")))?,
                )
            }
            _ => out.push((key.replace('-', "_"), value)),
        }
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            resume,
            reference,
            stop_after,
            overrides,
        } => {
            let mut flags = TrainFlags {
                config,
                out,
                resume,
                reference,
                stop_after,
            };
            let overrides = parse_overrides(&overrides, &mut flags)?;
            let cfg = match flags.config {
                Some(p) => ExperimentConfig::load(&p, &overrides)?,
                None => ExperimentConfig::from_toml_with("", &overrides)?,
            };
            let out = flags
                .out
                .ok_or_else(|| Error::config("out", "train needs --out <run dir>"))?;
            let out = resolve_path(&out);
            let opts = TrainOptions {
                resume: flags.resume,
                reference: flags.reference.map(|r| resolve_path(&r)),
                stop_after: flags.stop_after,
            };
            match cmd_train(&cfg, &out, &opts)? {
                Some(s) => println!("{}", serde_json::to_string_pretty(&s)?),
                None => eprintln!("stopped early; continue with --resume"),
            }
        }
        Command::Eval {
            checkpoint,
            dataset,
            config,
            corruptions,
            reference,
            batch_size,
        } => {
            let checkpoint = resolve_path(&checkpoint);
            let data = match (dataset, config) {
                (Some(d), _) => EvalData::File(resolve_path(&d)),
                (None, Some(c)) => EvalData::Config(ExperimentConfig::load(&c, &[])?),
                (None, None) => {
                    let dir = checkpoint.parent().unwrap_or(std::path::Path::new("."));
                    EvalData::Config(ExperimentConfig::load(&dir.join(CONFIG_FILE), &[])?)
                }
            };
            let reference = reference.map(|r| reference_errors(&resolve_path(&r))).transpose()?;
            let s = cmd_eval(&checkpoint, &data, corruptions, reference.as_ref(), batch_size)?;
            if let Some(w) = &s.warning {
                eprintln!("warning: {w}");
            }
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Report { runs, csv, reference } => {
            let runs: Vec<PathBuf> = runs.iter().map(|r| resolve_path(r)).collect();
            let reference = reference.map(|r| resolve_path(&r));
            let report = cmd_report(&runs, reference.as_deref())?;
            match csv {
                Some(p) => std::fs::write(resolve_path(&p), report.to_csv())?,
                None => print!("{}", report.to_text()),
            }
        }
        Command::CostAudit { run } => {
            let report = cmd_cost_audit(&resolve_path(&run))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.matched {
                return Err(Error::Audit("measured pass-units differ from the cost formula".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
