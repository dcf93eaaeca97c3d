//! Cross-run reports.
//!
//! Runs whose resolved configs differ only in `run.id` and `run.seed` form a
//! group; each group reports seed mean and sample standard deviation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use wdlab_core::instrument::MetricRecord;

use crate::artifact::{read_records, read_summary};
use crate::error::{HarnessError, Result};
use crate::train::{RunStatus, RunSummary};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// A finished run loaded back from disk.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub records: Vec<MetricRecord>,
    /// Resolved config with the id and seed blanked, used as the grouping key.
    group_key: String,
}

impl LoadedRun {
    pub fn load(dir: &Path) -> Result<Self> {
        let summary = read_summary(dir)?;
        let records = read_records(&dir.join("metrics.jsonl"))?;
        let p = dir.join("resolved_config.json");
        let text = fs::read_to_string(&p).map_err(|e| HarnessError::io(&p, e))?;
        let mut cfg: serde_json::Value = serde_json::from_str(&text)?;
        if let Some(run) = cfg.get_mut("run").and_then(|r| r.as_object_mut()) {
            run.remove("id");
            run.remove("seed");
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            summary,
            records,
            group_key: cfg.to_string(),
        })
    }

    pub fn id(&self) -> &str {
        &self.summary.run_id
    }
}

/// Run directories matching `pattern`, sorted by path. A match counts as a
/// run directory when it holds a `summary.json`.
pub fn find_runs(pattern: &str) -> Result<Vec<PathBuf>> {
    let paths = glob::glob(pattern).map_err(|e| HarnessError::Config(format!("bad glob `{pattern}`: {e}")))?;
    let mut dirs: Vec<PathBuf> = paths
        .filter_map(|p| p.ok())
        .filter(|p| p.join("summary.json").is_file())
        .collect();
    dirs.sort();
    dirs.dedup();
    if dirs.is_empty() {
        return Err(HarnessError::NoRuns(pattern.to_string()));
    }
    Ok(dirs)
}

pub fn load_runs(pattern: &str) -> Result<Vec<LoadedRun>> {
    find_runs(pattern)?.iter().map(|d| LoadedRun::load(d)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub sd: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, sd, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunEntry {
    pub id: String,
    pub dir: PathBuf,
    pub status: RunStatus,
    pub failure: Option<String>,
    pub epochs_completed: usize,
    pub final_test_acc: Option<f64>,
    pub best_test_acc: Option<f64>,
    pub final_train_acc: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub initial_weight_norm: f64,
    pub final_weight_norm: f64,
    pub norm_growth: f64,
    pub final_dist_from_init: f64,
    pub mean_cos_pos: Option<f64>,
    pub mean_cos_neg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupEntry {
    pub label: String,
    pub runs: Vec<String>,
    pub failed: usize,
    pub final_test_acc: Option<Stat>,
    pub best_test_acc: Option<Stat>,
    pub final_weight_norm: Option<Stat>,
    pub norm_growth: Option<Stat>,
    pub final_dist_from_init: Option<Stat>,
    pub mean_cos_pos: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub runs: Vec<RunEntry>,
    pub groups: Vec<GroupEntry>,
}

fn entry(r: &LoadedRun) -> RunEntry {
    let s = &r.summary;
    RunEntry {
        id: s.run_id.clone(),
        dir: r.dir.clone(),
        status: s.status,
        failure: s.failure.clone(),
        epochs_completed: s.epochs_completed,
        final_test_acc: s.final_test_acc,
        best_test_acc: s.best_test_acc,
        final_train_acc: s.final_train_acc,
        final_train_loss: s.final_train_loss,
        initial_weight_norm: s.initial_weight_norm,
        final_weight_norm: s.final_weight_norm,
        norm_growth: s.final_weight_norm / s.initial_weight_norm,
        final_dist_from_init: s.final_dist_from_init,
        mean_cos_pos: s.mean_cos_pos,
        mean_cos_neg: s.mean_cos_neg,
    }
}

fn common_prefix(ids: &[&str]) -> String {
    let first = ids[0];
    let mut len = first.len();
    for id in &ids[1..] {
        len = first
            .char_indices()
            .zip(id.chars())
            .take_while(|((_, a), b)| a == b)
            .last()
            .map_or(0, |((i, c), _)| i + c.len_utf8())
            .min(len);
    }
    if ids.iter().all(|id| id.len() == len) {
        return first.to_string();
    }
    match first[..len].rfind(['-', '_', '.']) {
        Some(cut) if cut > 0 => first[..cut].to_string(),
        _ => first.to_string(),
    }
}

/// Stats over completed runs only; failed runs are counted but not averaged.
fn group(members: &[&LoadedRun]) -> GroupEntry {
    let ids: Vec<&str> = members.iter().map(|r| r.id()).collect();
    let ok: Vec<&RunSummary> = members
        .iter()
        .map(|r| &r.summary)
        .filter(|s| s.status == RunStatus::Completed)
        .collect();
    let collect =
        |f: &dyn Fn(&RunSummary) -> Option<f64>| Stat::of(&ok.iter().filter_map(|s| f(s)).collect::<Vec<_>>());
    GroupEntry {
        label: common_prefix(&ids),
        runs: ids.iter().map(|s| s.to_string()).collect(),
        failed: members.len() - ok.len(),
        final_test_acc: collect(&|s| s.final_test_acc),
        best_test_acc: collect(&|s| s.best_test_acc),
        final_weight_norm: collect(&|s| Some(s.final_weight_norm)),
        norm_growth: collect(&|s| Some(s.final_weight_norm / s.initial_weight_norm)),
        final_dist_from_init: collect(&|s| Some(s.final_dist_from_init)),
        mean_cos_pos: collect(&|s| s.mean_cos_pos),
    }
}

pub fn analyze(runs: &[LoadedRun]) -> Result<Report> {
    if runs.is_empty() {
        return Err(HarnessError::NoRuns("empty run list".into()));
    }
    let mut groups: BTreeMap<&str, Vec<&LoadedRun>> = BTreeMap::new();
    for r in runs {
        groups.entry(&r.group_key).or_default().push(r);
    }
    let mut groups: Vec<GroupEntry> = groups.values().map(|m| group(m)).collect();
    groups.sort_by(|a, b| a.label.cmp(&b.label).then_with(|| a.runs.cmp(&b.runs)));
    Ok(Report {
        schema_version: REPORT_SCHEMA_VERSION,
        runs: runs.iter().map(entry).collect(),
        groups,
    })
}

/// Loads the runs matching `pattern` and writes the JSON report to `out`.
pub fn analyze_to_file(pattern: &str, out: &Path) -> Result<Report> {
    let report = analyze(&load_runs(pattern)?)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    fs::write(out, serde_json::to_string_pretty(&report)?).map_err(|e| HarnessError::io(out, e))?;
    Ok(report)
}
