//! Running many configs at once.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use wdlab_core::optim::AdamMode;

use crate::artifact::{train, RunArtifact};
use crate::config::{OptimizerConfig, RunConfig};
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone)]
pub struct SweepItem {
    pub config: RunConfig,
    /// Bytes written as the run's config snapshot.
    pub raw: Vec<u8>,
    /// Directory that relative data paths resolve against.
    pub base_dir: PathBuf,
}

impl SweepItem {
    /// An item for a programmatically built config; the snapshot is its TOML rendering.
    pub fn from_config(config: RunConfig) -> Result<Self> {
        let raw = config.to_toml()?.into_bytes();
        Ok(Self {
            config,
            raw,
            base_dir: PathBuf::from("."),
        })
    }
}

/// Every `*.toml` file in `dir`, sorted by file name.
pub fn load_config_dir(dir: &Path) -> Result<Vec<SweepItem>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| HarnessError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(HarnessError::NoRuns(format!("{}/*.toml", dir.display())));
    }
    let mut items = Vec::with_capacity(paths.len());
    let mut ids = std::collections::BTreeSet::new();
    for p in paths {
        let (config, raw) = RunConfig::from_file(&p)?;
        if !ids.insert(config.run.id.clone()) {
            return Err(HarnessError::Config(format!("duplicate run id `{}`", config.run.id)));
        }
        items.push(SweepItem {
            config,
            raw,
            base_dir: dir.to_path_buf(),
        });
    }
    Ok(items)
}

/// Runs every item with at most `parallelism` concurrent runs. Results keep
/// the input order. Norm-matched runs start after all other runs finish so
/// their references exist; a failing run does not affect the others.
pub fn sweep(items: &[SweepItem], parallelism: usize, root: &Path) -> Result<Vec<Result<RunArtifact>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    let mut results: Vec<Option<Result<RunArtifact>>> = (0..items.len()).map(|_| None).collect();
    for dependent in [false, true] {
        let batch: Vec<usize> = (0..items.len())
            .filter(|&i| items[i].config.norm_match.is_some() == dependent)
            .collect();
        let done: Vec<(usize, Result<RunArtifact>)> = pool.install(|| {
            batch
                .par_iter()
                .map(|&i| {
                    let it = &items[i];
                    (i, train(&it.config, &it.raw, &it.base_dir, root))
                })
                .collect()
        });
        for (i, r) in done {
            results[i] = Some(r);
        }
    }
    Ok(results.into_iter().map(|r| r.expect("every item ran")).collect())
}

/// `base` repeated over a λ grid and Adam decay modes, with ids `<base>-<mode>-l<λ>`.
pub fn lambda_mode_grid(base: &RunConfig, lambdas: &[f64], modes: &[AdamMode]) -> Vec<RunConfig> {
    let mut out = Vec::with_capacity(lambdas.len() * modes.len());
    for &mode in modes {
        for &lambda in lambdas {
            let mut c = base.clone();
            let mut adam = match base.optimizer {
                OptimizerConfig::Adam(a) => a,
                OptimizerConfig::Sgd(_) => Default::default(),
            };
            adam.mode = mode;
            adam.lambda = lambda;
            c.optimizer = OptimizerConfig::Adam(adam);
            let tag = match mode {
                AdamMode::CoupledL2 => "coupled",
                AdamMode::Decoupled => "decoupled",
                AdamMode::Separated => "separated",
            };
            c.run.id = format!("{}-{tag}-l{lambda:e}", base.run.id);
            out.push(c);
        }
    }
    out
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

/// Markdown table with one row per run.
pub fn summary_table(items: &[SweepItem], results: &[Result<RunArtifact>]) -> String {
    let mut s = String::from("| run | status | final test acc | best test acc | final train loss | final norm |\n");
    s.push_str("|---|---|---|---|---|---|\n");
    for (it, r) in items.iter().zip(results) {
        match r {
            Ok(a) => {
                let m = &a.summary;
                let status = if a.failed() { "failed" } else { "ok" };
                let _ = writeln!(
                    s,
                    "| {} | {status} | {} | {} | {} | {:.4} |",
                    m.run_id,
                    cell(m.final_test_acc),
                    cell(m.best_test_acc),
                    cell(m.final_train_loss),
                    m.final_weight_norm
                );
            }
            Err(e) => {
                let _ = writeln!(s, "| {} | error: {} | - | - | - | - |", it.config.run.id, e.kind());
            }
        }
    }
    s
}
