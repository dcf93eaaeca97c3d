//! On-disk run artifacts.
//!
//! A run `id` writes `<root>/<id>/` containing:
//! - `config.toml`: the input config, byte for byte
//! - `resolved_config.json`: the config with every default filled in
//! - `metrics.jsonl` and `metrics.csv`: one [`MetricRecord`] per line/row
//! - `summary.json`: [`RunSummary`]
//! - `checkpoints/epoch_<e>.ckpt` and `checkpoints/final.ckpt`

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wdlab_core::checkpoint;
use wdlab_core::instrument::MetricRecord;

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::train::{run_config, RunOutput, RunStatus, RunSummary};

/// Environment variable naming the output root; `runs` under the working directory otherwise.
pub const OUT_ENV: &str = "WDLAB_OUT";

pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub dir: PathBuf,
    pub config_snapshot: PathBuf,
    pub metrics_jsonl: PathBuf,
    pub metrics_csv: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub summary: RunSummary,
}

impl RunArtifact {
    pub fn failed(&self) -> bool {
        self.summary.status == RunStatus::Failed
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| HarnessError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

/// Writes a finished (or failed) run under `root`, replacing any previous run with the same id.
pub fn write_artifact(root: &Path, raw_config: &[u8], out: &RunOutput) -> Result<RunArtifact> {
    let dir = root.join(&out.config.run.id);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    }
    let ckpt_dir = dir.join("checkpoints");
    create_dir(&ckpt_dir)?;

    let config_snapshot = dir.join("config.toml");
    write_file(&config_snapshot, raw_config)?;
    write_file(
        &dir.join("resolved_config.json"),
        serde_json::to_string_pretty(&out.config)?.as_bytes(),
    )?;

    let metrics_jsonl = dir.join("metrics.jsonl");
    let mut w = BufWriter::new(fs::File::create(&metrics_jsonl).map_err(|e| HarnessError::io(&metrics_jsonl, e))?);
    for r in &out.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| HarnessError::io(&metrics_jsonl, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(&metrics_jsonl, e))?;

    let metrics_csv = dir.join("metrics.csv");
    write_csv(&metrics_csv, &out.config.metrics.quantiles, &out.records)?;

    let meta = serde_json::to_value(&out.config)?;
    let mut checkpoints = Vec::new();
    for (epoch, model) in &out.checkpoints {
        let p = ckpt_dir.join(format!("epoch_{epoch}.ckpt"));
        checkpoint::save(&p, model, meta.clone())?;
        checkpoints.push(p);
    }
    let p = ckpt_dir.join("final.ckpt");
    checkpoint::save(&p, &out.model, meta)?;
    checkpoints.push(p);

    write_file(
        &dir.join("summary.json"),
        serde_json::to_string_pretty(&out.summary)?.as_bytes(),
    )?;
    Ok(RunArtifact {
        dir,
        config_snapshot,
        metrics_jsonl,
        metrics_csv,
        checkpoints,
        summary: out.summary.clone(),
    })
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

const BASE_COLUMNS: [&str; 26] = [
    "schema_version",
    "run_id",
    "kind",
    "epoch",
    "step",
    "lr",
    "wd_active",
    "weight_norm",
    "weight_norm_sq",
    "square_term",
    "cross_term",
    "cross_term_pos",
    "cross_term_neg",
    "realized_norm_sq_change",
    "cos_pos",
    "cos_neg",
    "cos_pos_max",
    "cos_neg_max",
    "cos_degenerate",
    "grad_norm",
    "dist_from_init",
    "train_loss",
    "train_acc",
    "test_loss",
    "test_acc",
    "norm_match_factor",
];

const SHARPNESS_COLUMNS: [&str; 6] = [
    "sharpness_hessian_top",
    "sharpness_keskar",
    "sharpness_multiplicative",
    "sharpness_multiplicative_stderr",
    "sharpness_additive",
    "sharpness_additive_stderr",
];

/// CSV mirror of the metric log. Nested fields become `q<quantile>`,
/// `sharpness_*` and `norm:<param>` columns.
pub fn write_csv(path: &Path, quantiles: &[f64], records: &[MetricRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let layers: Vec<String> = records
        .first()
        .map(|r| r.layer_norms.iter().map(|(n, _)| n.clone()).collect())
        .unwrap_or_default();
    let mut header: Vec<String> = BASE_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(SHARPNESS_COLUMNS.iter().map(|s| s.to_string()));
    header.extend(quantiles.iter().map(|q| format!("q{q}")));
    header.extend(layers.iter().map(|n| format!("norm:{n}")));
    w.write_record(&header)?;
    for r in records {
        let kind = match r.kind {
            wdlab_core::instrument::RecordKind::Step => "step",
            wdlab_core::instrument::RecordKind::Epoch => "epoch",
        };
        let mut row = vec![
            r.schema_version.to_string(),
            r.run_id.clone(),
            kind.to_string(),
            r.epoch.to_string(),
            r.step.to_string(),
            r.lr.to_string(),
            r.wd_active.to_string(),
            r.weight_norm.to_string(),
            r.weight_norm_sq.to_string(),
            opt(r.square_term),
            opt(r.cross_term),
            opt(r.cross_term_pos),
            opt(r.cross_term_neg),
            opt(r.realized_norm_sq_change),
            opt(r.cos_pos),
            opt(r.cos_neg),
            opt(r.cos_pos_max),
            opt(r.cos_neg_max),
            opt(r.cos_degenerate),
            opt(r.grad_norm),
            r.dist_from_init.to_string(),
            opt(r.train_loss),
            opt(r.train_acc),
            opt(r.test_loss),
            opt(r.test_acc),
            opt(r.norm_match_factor),
        ];
        let s = r.sharpness.unwrap_or_default();
        row.extend([
            opt(s.hessian_top),
            opt(s.keskar),
            opt(s.multiplicative),
            opt(s.multiplicative_stderr),
            opt(s.additive),
            opt(s.additive_stderr),
        ]);
        for q in quantiles {
            row.push(opt(r.ratio_quantiles.iter().find(|(k, _)| k == q).map(|(_, v)| *v)));
        }
        for name in &layers {
            row.push(opt(r.layer_norms.iter().find(|(n, _)| n == name).map(|(_, v)| *v)));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| HarnessError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| HarnessError::Format(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    let p = dir.join("summary.json");
    let text = fs::read_to_string(&p).map_err(|e| HarnessError::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Per-epoch norms of a finished run under `root`, used as norm-matching targets.
pub fn reference_norms(root: &Path, id: &str) -> Result<Vec<f64>> {
    let summary = read_summary(&root.join(id)).map_err(|e| HarnessError::Reference(id.into(), e.to_string()))?;
    if summary.status == RunStatus::Failed {
        return Err(HarnessError::Reference(id.into(), "reference run failed".into()));
    }
    Ok(summary.epoch_weight_norms)
}

/// Trains `cfg` and writes its artifact. Relative data paths resolve against `base_dir`.
pub fn train(cfg: &RunConfig, raw_config: &[u8], base_dir: &Path, root: &Path) -> Result<RunArtifact> {
    let reference = match &cfg.norm_match {
        Some(nm) => Some(reference_norms(root, &nm.reference)?),
        None => None,
    };
    let out = run_config(cfg, base_dir, reference.as_deref())?;
    write_artifact(root, raw_config, &out)
}

/// Reads a config file and trains it.
pub fn train_file(path: &Path, root: &Path) -> Result<RunArtifact> {
    let (cfg, raw) = RunConfig::from_file(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    train(&cfg, &raw, base, root)
}
