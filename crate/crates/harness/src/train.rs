//! The training loop and its telemetry.

use std::path::Path;

use serde::{Deserialize, Serialize};
use wdlab_core::data::{BatchIter, Dataset};
use wdlab_core::instrument::{
    self, buffer_ratio_quantiles, norm_decomposition, norm_match_scale, pos_neg_cosines, MetricRecord, RecordKind,
    SharpnessValues, RATIO_EPS,
};
use wdlab_core::models::Model;
use wdlab_core::optim::{Adam, AdamState, Sgd};
use wdlab_core::sharpness::measure_all;
use wdlab_core::{Error, ParamSet, Tensor};

use crate::config::{OptimizerConfig, RunConfig};
use crate::error::{HarnessError, Result};

pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig, params: &ParamSet) -> wdlab_core::Result<Self> {
        Ok(match cfg {
            OptimizerConfig::Sgd(c) => Optimizer::Sgd(Sgd::new(*c, params)?),
            OptimizerConfig::Adam(c) => Optimizer::Adam(Adam::new(*c, params)?),
        })
    }

    pub fn step(&mut self, params: &mut ParamSet, lr: f64, lambda: f64) -> wdlab_core::Result<()> {
        match self {
            Optimizer::Sgd(o) => o.step(params, lr, lambda),
            Optimizer::Adam(o) => o.step(params, lr, lambda),
        }
    }

    pub fn adam_state(&self) -> Option<&AdamState> {
        match self {
            Optimizer::Adam(o) => Some(&o.state),
            Optimizer::Sgd(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub status: RunStatus,
    pub failure: Option<String>,
    pub epochs_completed: usize,
    pub steps: usize,
    pub initial_weight_norm: f64,
    pub final_weight_norm: f64,
    pub final_dist_from_init: f64,
    pub final_train_loss: Option<f64>,
    pub final_train_acc: Option<f64>,
    pub final_test_acc: Option<f64>,
    pub best_test_acc: Option<f64>,
    /// Mean over all logged steps.
    pub mean_cos_pos: Option<f64>,
    pub mean_cos_neg: Option<f64>,
    /// `‖w‖` at the end of each epoch, index 0 being initialization; after any norm matching.
    pub epoch_weight_norms: Vec<f64>,
}

/// Everything a run produces, before it is written to disk.
pub struct RunOutput {
    pub config: RunConfig,
    pub records: Vec<MetricRecord>,
    pub summary: RunSummary,
    pub model: Model,
    pub checkpoints: Vec<(usize, Model)>,
}

/// Loads the run's data (relative paths against `base_dir`) and trains.
pub fn run_config(cfg: &RunConfig, base_dir: &Path, reference_norms: Option<&[f64]>) -> Result<RunOutput> {
    let data = cfg.data.load(cfg.run.seed, base_dir)?;
    run(cfg, &data.0, &data.1, reference_norms)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::Divergence(_))
}

/// Trains one model. A non-finite loss or update ends the run early with
/// [`RunStatus::Failed`] and whatever was logged so far.
pub fn run(cfg: &RunConfig, train: &Dataset, test: &Dataset, reference_norms: Option<&[f64]>) -> Result<RunOutput> {
    cfg.validate()?;
    if let (Some(nm), Some(norms)) = (&cfg.norm_match, reference_norms) {
        if norms.len() <= cfg.run.epochs {
            return Err(HarnessError::Reference(
                nm.reference.clone(),
                format!("has {} epoch norms, run needs {}", norms.len(), cfg.run.epochs + 1),
            ));
        }
    } else if let Some(nm) = &cfg.norm_match {
        return Err(HarnessError::Reference(
            nm.reference.clone(),
            "no reference norms supplied".into(),
        ));
    }
    if !test.is_empty() && test.dim() != train.dim() {
        return Err(HarnessError::Config(format!(
            "test features {} differ from train features {}",
            test.dim(),
            train.dim()
        )));
    }
    let mut model = Model::build(cfg.model_config(train.dim(), train.num_classes))?;
    let init = model.params.values();
    let mut opt = Optimizer::new(&cfg.optimizer, &model.params)?;
    let lr_schedule = cfg.optimizer.lr_schedule();
    let lambda = cfg.optimizer.lambda();
    let mut batches = BatchIter::new(train.len(), cfg.run.batch_size, cfg.run.seed)?;
    let id = cfg.run.id.as_str();

    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    let mut failure = None;
    let mut step = 0usize;
    let mut epochs_completed = 0;

    let eval = |model: &Model, rec: &mut MetricRecord| -> wdlab_core::Result<()> {
        let tr = model.evaluate(&train.x, &train.labels)?;
        rec.train_loss = Some(tr.loss);
        rec.train_acc = Some(tr.accuracy);
        if test.len() >= 2 || (!cfg.model.batch_norm && !test.is_empty()) {
            let te = model.evaluate(&test.x, &test.labels)?;
            rec.test_loss = Some(te.loss);
            rec.test_acc = Some(te.accuracy);
        }
        Ok(())
    };

    let mut first = MetricRecord::base(id, RecordKind::Epoch, 0, 0, &model.params, &init)?;
    first.lr = lr_schedule.at(0, 0);
    first.wd_active = cfg.schedule.is_active(0, 0);
    eval(&model, &mut first)?;
    attach_sharpness(cfg, 0, &model, train, &mut first)?;
    if cfg.metrics.checkpoint_epochs.contains(&0) {
        checkpoints.push((0, model.clone()));
    }
    records.push(first);

    'epochs: for epoch in 0..cfg.run.epochs {
        for batch in batches.next_epoch() {
            let lr = lr_schedule.at(epoch, step);
            let lambda_eff = cfg.schedule.lambda_at(lambda, epoch, step, lr);
            let (x, labels) = train.gather(&batch);
            let logged = step.is_multiple_of(cfg.metrics.every_steps);
            let outcome = (|| -> wdlab_core::Result<Option<MetricRecord>> {
                let mut rec = None;
                let grads = if logged {
                    let g = model.split_grads(&model.params, &x, &labels)?;
                    check_loss(g.eval.loss, step)?;
                    let mut r = MetricRecord::base(id, RecordKind::Step, epoch + 1, step, &model.params, &init)?;
                    let d = norm_decomposition(&model.params, &g.loss, lr)?;
                    r.square_term = Some(d.square_term);
                    r.cross_term = Some(d.cross_term);
                    r.cross_term_pos = Some(instrument::cross_term(&model.params, &g.pos, lr)?);
                    r.cross_term_neg = Some(instrument::cross_term(&model.params, &g.neg, lr)?);
                    r.set_cosines(pos_neg_cosines(&model.params, &g.pos, &g.neg)?);
                    r.grad_norm = Some(instrument::grad_norm(&g.loss));
                    r.train_loss = Some(g.eval.loss);
                    r.train_acc = Some(g.eval.accuracy);
                    r.lr = lr;
                    r.wd_active = lambda_eff > 0.0;
                    rec = Some(r);
                    g.loss
                } else {
                    let (e, g) = model.loss_grads(&model.params, &x, &labels)?;
                    check_loss(e.loss, step)?;
                    g
                };
                model.params.zero_grads();
                model.params.accumulate_grads(&grads)?;
                opt.step(&mut model.params, lr, lambda_eff)?;
                if let Some(r) = rec.as_mut() {
                    let after: f64 = model.params.iter().map(|p| p.value.norm_sq()).sum();
                    r.realized_norm_sq_change = Some(after - r.weight_norm_sq);
                }
                Ok(rec)
            })();
            step += 1;
            match outcome {
                Ok(Some(r)) => records.push(r),
                Ok(None) => {}
                Err(e) if is_divergence(&e) => {
                    failure = Some(e.to_string());
                    break 'epochs;
                }
                Err(e) => return Err(e.into()),
            }
        }

        let e = epoch + 1;
        let mut factor = None;
        if let (Some(nm), Some(norms)) = (&cfg.norm_match, reference_norms) {
            factor = Some(norm_match_scale(norms[e], &mut model.params, nm.scope)?);
        }
        let mut rec = MetricRecord::base(id, RecordKind::Epoch, e, step, &model.params, &init)?;
        rec.lr = lr_schedule.at(e, step);
        rec.wd_active = cfg.schedule.is_active(e, step);
        rec.norm_match_factor = factor;
        if let Some(state) = opt.adam_state().filter(|s| s.t > 0) {
            let qs = buffer_ratio_quantiles(state, &model.params, &cfg.metrics.quantiles, RATIO_EPS)?;
            rec.ratio_quantiles = cfg.metrics.quantiles.iter().copied().zip(qs).collect();
        }
        match eval(&model, &mut rec).and_then(|_| {
            if rec.train_loss.is_some_and(f64::is_finite) {
                Ok(())
            } else {
                Err(Error::Divergence(format!(
                    "training loss {:?} after epoch {e}",
                    rec.train_loss
                )))
            }
        }) {
            Ok(()) => {}
            Err(err) if is_divergence(&err) => {
                failure = Some(err.to_string());
                records.push(rec);
                break;
            }
            Err(err) => return Err(err.into()),
        }
        attach_sharpness(cfg, e, &model, train, &mut rec)?;
        records.push(rec);
        epochs_completed = e;
        if cfg.metrics.checkpoint_epochs.contains(&e) {
            checkpoints.push((e, model.clone()));
        }
    }

    let summary = summarize(cfg, &records, &model, &init, step, epochs_completed, failure)?;
    Ok(RunOutput {
        config: cfg.clone(),
        records,
        summary,
        model,
        checkpoints,
    })
}

fn check_loss(loss: f64, step: usize) -> wdlab_core::Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("loss {loss} at step {step}")))
    }
}

fn attach_sharpness(
    cfg: &RunConfig,
    epoch: usize,
    model: &Model,
    train: &Dataset,
    rec: &mut MetricRecord,
) -> Result<()> {
    let Some(s) = cfg.sharpness.as_ref().filter(|s| s.epochs.contains(&epoch)) else {
        return Ok(());
    };
    let r = measure_all(model, train, &s.config)?;
    rec.sharpness = Some(SharpnessValues {
        hessian_top: Some(r.hessian.eigenvalue),
        keskar: Some(r.keskar.value),
        multiplicative: Some(r.multiplicative.mean),
        multiplicative_stderr: Some(r.multiplicative.stderr),
        additive: Some(r.additive.mean),
        additive_stderr: Some(r.additive.stderr),
    });
    Ok(())
}

fn summarize(
    cfg: &RunConfig,
    records: &[MetricRecord],
    model: &Model,
    init: &[Tensor],
    steps: usize,
    epochs_completed: usize,
    failure: Option<String>,
) -> Result<RunSummary> {
    let epochs: Vec<&MetricRecord> = records.iter().filter(|r| r.kind == RecordKind::Epoch).collect();
    let step_recs = || records.iter().filter(|r| r.kind == RecordKind::Step);
    let last = epochs.last();
    Ok(RunSummary {
        run_id: cfg.run.id.clone(),
        status: if failure.is_some() {
            RunStatus::Failed
        } else {
            RunStatus::Completed
        },
        failure,
        epochs_completed,
        steps,
        initial_weight_norm: epochs.first().map_or(0.0, |r| r.weight_norm),
        final_weight_norm: instrument::global_norm(&model.params),
        final_dist_from_init: instrument::dist_from_init(&model.params, init)?,
        final_train_loss: last.and_then(|r| r.train_loss),
        final_train_acc: last.and_then(|r| r.train_acc),
        final_test_acc: last.and_then(|r| r.test_acc),
        best_test_acc: epochs.iter().filter_map(|r| r.test_acc).reduce(f64::max),
        mean_cos_pos: mean(step_recs().filter_map(|r| r.cos_pos)),
        mean_cos_neg: mean(step_recs().filter_map(|r| r.cos_neg)),
        epoch_weight_norms: epochs
            .iter()
            .filter(|r| r.train_loss.is_some_and(f64::is_finite))
            .map(|r| r.weight_norm)
            .collect(),
    })
}
