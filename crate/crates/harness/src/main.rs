use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wdlab_core::checkpoint;
use wdlab_core::sharpness::{measure_all, SharpnessConfig};
use wdlab_harness::analyze::{analyze_to_file, find_runs};
use wdlab_harness::artifact::{default_out_root, train_file};
use wdlab_harness::config::{DataConfig, RunConfig};
use wdlab_harness::plot::{plot, PlotKind};
use wdlab_harness::sweep::{load_config_dir, summary_table, sweep};
use wdlab_harness::{HarnessError, Result};

/// Weight-decay experiment runner. Run artifacts go under $WDLAB_OUT (default `runs`).
#[derive(Debug, Parser)]
#[command(name = "wdlab", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Train one run from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train every `*.toml` config in a directory.
    Sweep {
        #[arg(long)]
        config_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Measure sharpness of a checkpoint on a dataset.
    ///
    /// `--data` is a run config file (its `[data]` table is used) or an inline
    /// list such as `source=blobs,classes=4,dim=32`. Inline specs without a
    /// seed use the seed stored in the checkpoint.
    Sharpness {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long, default_value_t = 0.1)]
        gamma: f64,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a JSON report over run directories matching a glob.
    Analyze {
        #[arg(long)]
        runs: String,
        #[arg(long)]
        report: PathBuf,
    },
    /// Render an SVG (plus CSV) from run directories matching a glob.
    Plot {
        #[arg(long)]
        runs: String,
        #[arg(long)]
        kind: PlotKind,
        #[arg(long)]
        out: PathBuf,
    },
}

fn inline_data_spec(spec: &str) -> Result<DataConfig> {
    let mut doc = toml::Table::new();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("data spec item `{item}` is not key=value")))?;
        let v = v.trim();
        let value = v
            .parse::<i64>()
            .map(toml::Value::Integer)
            .or_else(|_| v.parse::<f64>().map(toml::Value::Float))
            .or_else(|_| v.parse::<bool>().map(toml::Value::Boolean))
            .unwrap_or_else(|_| toml::Value::String(v.to_string()));
        doc.insert(k.trim().to_string(), value);
    }
    doc.try_into()
        .map_err(|e| HarnessError::Config(format!("data spec `{spec}`: {e}")))
}

fn sharpness_cmd(ckpt: &Path, data: &str, gamma: f64, samples: usize, seed: u64) -> Result<String> {
    let (model, meta) = checkpoint::load(ckpt)?;
    let run_seed = meta.pointer("/run/seed").and_then(|v| v.as_u64()).unwrap_or(0);
    let as_path = PathBuf::from(data);
    let (data_cfg, base) = if as_path.is_file() {
        let (cfg, _) = RunConfig::from_file(&as_path)?;
        let base = as_path.parent().map(PathBuf::from).unwrap_or_default();
        (cfg.data, base)
    } else {
        (inline_data_spec(data)?, PathBuf::from("."))
    };
    let (train, _) = data_cfg.load(run_seed, &base)?;
    let mut cfg = SharpnessConfig::default();
    cfg.perturbation.gamma = gamma;
    cfg.perturbation.samples = samples;
    cfg.perturbation.seed = seed;
    cfg.keskar.seed = seed;
    let report = measure_all(&model, &train, &cfg)?;
    Ok(serde_json::to_string_pretty(&report)?)
}

fn execute(cmd: Cmd) -> Result<String> {
    let root = default_out_root();
    match cmd {
        Cmd::Train { config } => {
            let a = train_file(&config, &root)?;
            Ok(serde_json::to_string_pretty(&a)?)
        }
        Cmd::Sweep { config_dir, parallel } => {
            let items = load_config_dir(&config_dir)?;
            let results = sweep(&items, parallel, &root)?;
            let table = summary_table(&items, &results);
            if let Some(e) = results.iter().find_map(|r| r.as_ref().err()) {
                let _ = write!(std::io::stdout(), "{table}");
                return Err(HarnessError::Config(format!("sweep had failing runs; first: {e}")));
            }
            Ok(table)
        }
        Cmd::Sharpness {
            checkpoint,
            data,
            gamma,
            samples,
            seed,
        } => sharpness_cmd(&checkpoint, &data, gamma, samples, seed),
        Cmd::Analyze { runs, report } => {
            let r = analyze_to_file(&runs, &report)?;
            Ok(format!(
                "{} runs, {} groups -> {}",
                r.runs.len(),
                r.groups.len(),
                report.display()
            ))
        }
        Cmd::Plot { runs, kind, out } => {
            let files = plot(&find_runs(&runs)?, kind, &out)?;
            Ok(format!("{} {}", files.svg.display(), files.csv.display()))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = serde_json::json!({ "error": { "kind": "usage", "message": e.to_string() } });
            eprintln!("{msg}");
            return ExitCode::from(2);
        }
    };
    match execute(cli.cmd) {
        Ok(out) => {
            // A closed pipe (e.g. `| head`) is not an error worth reporting.
            let _ = writeln!(std::io::stdout(), "{}", out.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
