//! Sharpness metrics around a trained point.
//!
//! Every metric works on an [`Objective`]: a loss over a flat parameter vector.
//! [`ModelObjective`] adapts a model plus a fixed evaluation set; the raw
//! cross-entropy is used, without any l2 term.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::rng::{
    self,
    stream::{PERTURB, PROBE},
};
use crate::tensor::{ParamSet, Tensor};

pub trait Objective {
    fn dim(&self) -> usize;
    fn loss(&self, w: &[f64]) -> Result<f64>;
    fn grad(&self, w: &[f64]) -> Result<Vec<f64>>;
}

/// Cross-entropy of a model on a fixed set of examples, evaluated as one batch.
pub struct ModelObjective<'a> {
    model: &'a Model,
    x: &'a Tensor,
    labels: &'a [usize],
}

impl<'a> ModelObjective<'a> {
    pub fn new(model: &'a Model, data: &'a Dataset) -> Self {
        Self {
            model,
            x: &data.x,
            labels: &data.labels,
        }
    }

    fn params_at(&self, w: &[f64]) -> Result<ParamSet> {
        let mut ps = self.model.params.clone();
        ps.assign_flat(w)?;
        Ok(ps)
    }

    pub fn point(&self) -> Vec<f64> {
        self.model.params.flatten()
    }
}

impl Objective for ModelObjective<'_> {
    fn dim(&self) -> usize {
        self.model.params.num_scalars()
    }

    fn loss(&self, w: &[f64]) -> Result<f64> {
        let ps = self.params_at(w)?;
        Ok(self.model.evaluate_with(&ps, self.x, self.labels)?.loss)
    }

    fn grad(&self, w: &[f64]) -> Result<Vec<f64>> {
        let ps = self.params_at(w)?;
        let (_, grads) = self.model.loss_grads(&ps, self.x, self.labels)?;
        Ok(crate::tensor::flatten_all(&grads))
    }
}

/// `c · f`, used to check linearity of the curvature estimates.
pub struct Scaled<O>(pub O, pub f64);

impl<O: Objective> Objective for Scaled<O> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn loss(&self, w: &[f64]) -> Result<f64> {
        Ok(self.1 * self.0.loss(w)?)
    }
    fn grad(&self, w: &[f64]) -> Result<Vec<f64>> {
        Ok(self.0.grad(w)?.into_iter().map(|g| self.1 * g).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationSpec {
    pub gamma: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            samples: 64,
            seed: 0,
        }
    }
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.samples == 0 {
            return Err(Error::InvalidConfig("samples must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    /// Mean loss over the finite perturbed samples.
    pub mean: f64,
    pub stderr: f64,
    pub base_loss: f64,
    /// `mean − base_loss`
    pub delta: f64,
    pub samples: usize,
    pub non_finite: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    /// `w ⊙ (1 + γδ)`
    Multiplicative,
    /// `w + γδ`
    Additive,
}

fn check_point(obj: &dyn Objective, w: &[f64]) -> Result<f64> {
    if w.len() != obj.dim() {
        return Err(crate::error::shape_err(
            "sharpness",
            format!("point has {} entries, objective {}", w.len(), obj.dim()),
        ));
    }
    let base = obj.loss(w)?;
    if !base.is_finite() {
        return Err(Error::NonFinite {
            context: "unperturbed loss".into(),
        });
    }
    Ok(base)
}

/// Perturbed losses in draw order; `None` marks a non-finite evaluation.
/// The `δ` sequence depends only on `spec.seed` and `w.len()`.
fn perturbed_losses(
    obj: &dyn Objective,
    w: &[f64],
    spec: &PerturbationSpec,
    kind: PerturbationKind,
) -> Result<Vec<Option<f64>>> {
    let mut rng = rng::seeded(spec.seed, PERTURB);
    let mut out = Vec::with_capacity(spec.samples);
    let mut point = vec![0.0; w.len()];
    for _ in 0..spec.samples {
        for (p, &wi) in point.iter_mut().zip(w) {
            let d: f64 = StandardNormal.sample(&mut rng);
            *p = match kind {
                PerturbationKind::Multiplicative => wi * (1.0 + spec.gamma * d),
                PerturbationKind::Additive => wi + spec.gamma * d,
            };
        }
        match obj.loss(&point) {
            Ok(l) if l.is_finite() => out.push(Some(l)),
            Ok(_) | Err(Error::NonFinite { .. }) => out.push(None),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let stderr = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    (mean, stderr)
}

pub fn perturbed_expectation(
    obj: &dyn Objective,
    w: &[f64],
    spec: &PerturbationSpec,
    kind: PerturbationKind,
) -> Result<PerturbationReport> {
    spec.validate()?;
    let base_loss = check_point(obj, w)?;
    let all = perturbed_losses(obj, w, spec, kind)?;
    let values: Vec<f64> = all.iter().flatten().copied().collect();
    if values.is_empty() {
        return Err(Error::NonFinite {
            context: format!("all {} perturbed losses", spec.samples),
        });
    }
    let (mean, stderr) = mean_stderr(&values);
    Ok(PerturbationReport {
        mean,
        stderr,
        base_loss,
        delta: mean - base_loss,
        samples: spec.samples,
        non_finite: all.len() - values.len(),
    })
}

/// Difference of two perturbed-loss expectations under common random numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedChange {
    /// Mean of `L_b(perturbed w_b) − L_a(perturbed w_a)` over shared draws.
    pub change: f64,
    /// Standard error of the paired differences.
    pub stderr: f64,
    pub pairs: usize,
}

/// Compares the metric at two points of equal dimension, drawing the same
/// `δ` for both so shared noise cancels out of the difference.
pub fn paired_change(
    a: (&dyn Objective, &[f64]),
    b: (&dyn Objective, &[f64]),
    spec: &PerturbationSpec,
    kind: PerturbationKind,
) -> Result<PairedChange> {
    spec.validate()?;
    if a.1.len() != b.1.len() {
        return Err(crate::error::shape_err("paired_change", "points differ in dimension"));
    }
    check_point(a.0, a.1)?;
    check_point(b.0, b.1)?;
    let la = perturbed_losses(a.0, a.1, spec, kind)?;
    let lb = perturbed_losses(b.0, b.1, spec, kind)?;
    let diffs: Vec<f64> = la.iter().zip(&lb).filter_map(|(x, y)| Some((*y)? - (*x)?)).collect();
    if diffs.is_empty() {
        return Err(Error::NonFinite {
            context: "every paired perturbation".into(),
        });
    }
    let (change, stderr) = mean_stderr(&diffs);
    Ok(PairedChange {
        change,
        stderr,
        pairs: diffs.len(),
    })
}

/// Monte-Carlo estimate of `E[L(w ⊙ (1 + γδ))]` with standard normal `δ`.
pub fn multiplicative_sharpness(obj: &dyn Objective, w: &[f64], spec: &PerturbationSpec) -> Result<PerturbationReport> {
    perturbed_expectation(obj, w, spec, PerturbationKind::Multiplicative)
}

/// Monte-Carlo estimate of `E[L(w + γδ)]` with standard normal `δ`.
pub fn additive_sharpness(obj: &dyn Objective, w: &[f64], spec: &PerturbationSpec) -> Result<PerturbationReport> {
    perturbed_expectation(obj, w, spec, PerturbationKind::Additive)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeskarConfig {
    pub epsilon: f64,
    pub ascent_steps: usize,
    /// Step per coordinate, in units of that coordinate's box half-width `1 + |x_i|`.
    pub ascent_step_size: f64,
    /// Extra ascents started uniformly inside the box, after the one from `y = 0`.
    pub random_restarts: usize,
    pub seed: u64,
}

impl Default for KeskarConfig {
    fn default() -> Self {
        Self {
            epsilon: 5e-4,
            ascent_steps: 20,
            ascent_step_size: 5e-5,
            random_restarts: 3,
            seed: 0,
        }
    }
}

impl KeskarConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            epsilon,
            ascent_step_size: epsilon / 10.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.ascent_step_size > 0.0 && self.ascent_step_size.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "ascent step size must be > 0, got {}",
                self.ascent_step_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeskarReport {
    /// Best normalized increase found over all starts; a lower bound on the box maximum.
    pub value: f64,
    /// Standard error of the per-start best values.
    pub stderr: f64,
    pub per_start: Vec<f64>,
}

/// Projected sign-gradient ascent of `(L(x+y) − L(x)) / (1 + L(x))` over the box
/// `|y_i| ≤ ε(1 + |x_i|)`, keeping the best value seen (including `y = 0`).
pub fn keskar_sharpness(obj: &dyn Objective, x: &[f64], cfg: &KeskarConfig) -> Result<KeskarReport> {
    cfg.validate()?;
    let base = obj.loss(x)?;
    if !base.is_finite() {
        return Err(Error::NonFinite {
            context: "loss at the sharpness point".into(),
        });
    }
    let width: Vec<f64> = x.iter().map(|xi| cfg.epsilon * (1.0 + xi.abs())).collect();
    let mut rng = rng::seeded(cfg.seed, PERTURB);
    let mut per_start = Vec::with_capacity(cfg.random_restarts + 1);
    let mut point = vec![0.0; x.len()];
    for start in 0..=cfg.random_restarts {
        let mut y: Vec<f64> = if start == 0 {
            vec![0.0; x.len()]
        } else {
            width.iter().map(|&b| b * rng.random_range(-1.0..=1.0)).collect()
        };
        let mut best = 0.0f64;
        for step in 0..=cfg.ascent_steps {
            for ((p, xi), yi) in point.iter_mut().zip(x).zip(&y) {
                *p = xi + yi;
            }
            let l = obj.loss(&point)?;
            if !l.is_finite() {
                return Err(Error::Divergence(format!("non-finite loss during ascent step {step}")));
            }
            best = best.max((l - base) / (1.0 + base));
            if step == cfg.ascent_steps {
                break;
            }
            let g = obj.grad(&point)?;
            for ((yi, gi), &b) in y.iter_mut().zip(&g).zip(&width) {
                let s = cfg.ascent_step_size / cfg.epsilon * b;
                if *gi != 0.0 {
                    *yi = (*yi + s * gi.signum()).clamp(-b, b);
                }
            }
        }
        per_start.push(best);
    }
    let value = per_start.iter().copied().fold(0.0, f64::max);
    let (_, stderr) = mean_stderr(&per_start);
    Ok(KeskarReport {
        value,
        stderr,
        per_start,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenReport {
    pub eigenvalue: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Central finite-difference Hessian-vector product with `h = 1e-4 / ‖v‖`.
pub fn hvp(obj: &dyn Objective, w: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let h = 1e-4 / norm;
    let plus: Vec<f64> = w.iter().zip(v).map(|(a, b)| a + h * b).collect();
    let minus: Vec<f64> = w.iter().zip(v).map(|(a, b)| a - h * b).collect();
    let gp = obj.grad(&plus)?;
    let gm = obj.grad(&minus)?;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
}

fn power_iteration(
    obj: &dyn Objective,
    w: &[f64],
    shift: f64,
    iters: usize,
    tol: f64,
    seed: u64,
) -> Result<EigenReport> {
    let mut rng = rng::seeded(seed, PROBE);
    let mut v: Vec<f64> = (0..w.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v)?;
    let mut prev = f64::NAN;
    let mut estimate = 0.0;
    for it in 1..=iters.max(1) {
        let mut hv = hvp(obj, w, &v)?;
        if shift != 0.0 {
            hv.iter_mut().zip(&v).for_each(|(a, b)| *a -= shift * b);
        }
        estimate = v.iter().zip(&hv).map(|(a, b)| a * b).sum::<f64>();
        if !estimate.is_finite() {
            return Err(Error::NonFinite {
                context: "Rayleigh quotient".into(),
            });
        }
        if (estimate - prev).abs() < tol {
            return Ok(EigenReport {
                eigenvalue: estimate,
                iterations: it,
                converged: true,
            });
        }
        prev = estimate;
        v = hv;
        if normalize(&mut v).is_err() {
            // Hv = 0: v is an exact eigenvector with eigenvalue 0 (after shift).
            return Ok(EigenReport {
                eigenvalue: estimate,
                iterations: it,
                converged: true,
            });
        }
    }
    Ok(EigenReport {
        eigenvalue: estimate,
        iterations: iters.max(1),
        converged: false,
    })
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroNorm);
    }
    v.iter_mut().for_each(|a| *a /= n);
    Ok(())
}

/// Largest algebraic Hessian eigenvalue by power iteration on finite-difference
/// HVPs. If plain iteration settles on a negative eigenvalue, a second pass on
/// the shifted operator `H − λI` recovers the top of the spectrum.
pub fn hessian_top_eigenvalue(
    obj: &dyn Objective,
    w: &[f64],
    iters: usize,
    tol: f64,
    seed: u64,
) -> Result<EigenReport> {
    if w.is_empty() {
        return Err(Error::Empty("parameter vector"));
    }
    let first = power_iteration(obj, w, 0.0, iters, tol, seed)?;
    if first.eigenvalue >= 0.0 {
        return Ok(first);
    }
    let shifted = power_iteration(obj, w, first.eigenvalue, iters, tol, seed)?;
    Ok(EigenReport {
        eigenvalue: shifted.eigenvalue + first.eigenvalue,
        iterations: first.iterations + shifted.iterations,
        converged: first.converged && shifted.converged,
    })
}

/// Settings for measuring all four metrics at once.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SharpnessConfig {
    pub perturbation: PerturbationSpec,
    pub keskar: KeskarConfig,
    pub hessian_iters: usize,
    pub hessian_tol: f64,
    /// Number of leading examples of the evaluation set to use; all if unset.
    pub eval_examples: Option<usize>,
}

impl Default for SharpnessConfig {
    fn default() -> Self {
        Self {
            perturbation: PerturbationSpec::default(),
            keskar: KeskarConfig::default(),
            hessian_iters: 100,
            hessian_tol: 1e-4,
            eval_examples: Some(512),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpnessReport {
    pub config: SharpnessConfig,
    pub loss: f64,
    pub hessian: EigenReport,
    pub keskar: KeskarReport,
    pub multiplicative: PerturbationReport,
    pub additive: PerturbationReport,
}

pub fn measure_all(model: &Model, data: &Dataset, cfg: &SharpnessConfig) -> Result<SharpnessReport> {
    let subset;
    let data = match cfg.eval_examples {
        Some(n) if n < data.len() => {
            subset = data.head(n);
            &subset
        }
        _ => data,
    };
    let obj = ModelObjective::new(model, data);
    let w = obj.point();
    Ok(SharpnessReport {
        config: *cfg,
        loss: obj.loss(&w)?,
        hessian: hessian_top_eigenvalue(&obj, &w, cfg.hessian_iters, cfg.hessian_tol, cfg.perturbation.seed)?,
        keskar: keskar_sharpness(&obj, &w, &cfg.keskar)?,
        multiplicative: multiplicative_sharpness(&obj, &w, &cfg.perturbation)?,
        additive: additive_sharpness(&obj, &w, &cfg.perturbation)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `½ Σ a_i w_i²`
    struct Quadratic(Vec<f64>);

    impl Objective for Quadratic {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn loss(&self, w: &[f64]) -> Result<f64> {
            Ok(0.5 * self.0.iter().zip(w).map(|(a, x)| a * x * x).sum::<f64>())
        }
        fn grad(&self, w: &[f64]) -> Result<Vec<f64>> {
            Ok(self.0.iter().zip(w).map(|(a, x)| a * x).collect())
        }
    }

    #[test]
    fn zero_gamma_is_exact() {
        let q = Quadratic(vec![2.0, 3.0]);
        let spec = PerturbationSpec {
            gamma: 0.0,
            samples: 8,
            seed: 1,
        };
        for r in [
            multiplicative_sharpness(&q, &[1.0, -1.0], &spec).unwrap(),
            additive_sharpness(&q, &[1.0, -1.0], &spec).unwrap(),
        ] {
            assert_eq!(r.mean, 2.5);
            assert_eq!(r.stderr, 0.0);
            assert_eq!(r.delta, 0.0);
        }
    }

    #[test]
    fn quadratic_closed_forms() {
        let a = 3.0;
        let q = Quadratic(vec![a]);
        let spec = PerturbationSpec {
            gamma: 0.1,
            samples: 4000,
            seed: 7,
        };
        let m = multiplicative_sharpness(&q, &[1.0], &spec).unwrap();
        assert!((m.mean - 0.5 * a * 1.01).abs() < 3.0 * m.stderr, "{m:?}");
        let w = 2.0;
        let ad = additive_sharpness(&q, &[w], &spec).unwrap();
        assert!((ad.mean - 0.5 * a * (w * w + 0.01)).abs() < 3.0 * ad.stderr, "{ad:?}");
    }

    #[test]
    fn perturbation_is_reproducible() {
        let q = Quadratic(vec![1.0, 2.0, 3.0]);
        let spec = PerturbationSpec::default();
        let a = multiplicative_sharpness(&q, &[1.0, 2.0, 3.0], &spec).unwrap();
        let b = multiplicative_sharpness(&q, &[1.0, 2.0, 3.0], &spec).unwrap();
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
    }

    #[test]
    fn perturbation_spec_validation() {
        let q = Quadratic(vec![1.0]);
        let bad = PerturbationSpec {
            samples: 0,
            ..Default::default()
        };
        assert!(additive_sharpness(&q, &[1.0], &bad).is_err());
        let bad = PerturbationSpec {
            gamma: -1.0,
            ..Default::default()
        };
        assert!(additive_sharpness(&q, &[1.0], &bad).is_err());
    }

    #[test]
    fn keskar_quadratic_at_origin() {
        let eps = 5e-4;
        let r = keskar_sharpness(&Quadratic(vec![1.0]), &[0.0], &KeskarConfig::with_epsilon(eps)).unwrap();
        let exact = 0.5 * eps * eps;
        assert!((r.value - exact).abs() < 0.01 * exact, "{r:?}");
    }

    #[test]
    fn keskar_vanishes_with_epsilon() {
        let q = Quadratic(vec![2.0, 5.0]);
        let r = keskar_sharpness(&q, &[0.3, -0.4], &KeskarConfig::with_epsilon(1e-12)).unwrap();
        assert!(r.value >= 0.0 && r.value <= 1e-6);
    }

    #[test]
    fn keskar_monotone_in_steps() {
        let q = Quadratic(vec![2.0, 5.0, 0.1]);
        let x = [0.3, -0.4, 1.0];
        let mut last = 0.0;
        for steps in [0, 1, 2, 5, 10, 20] {
            let cfg = KeskarConfig {
                ascent_steps: steps,
                ..KeskarConfig::with_epsilon(1e-2)
            };
            let v = keskar_sharpness(&q, &x, &cfg).unwrap().value;
            assert!(v >= last);
            last = v;
        }
        assert!(last > 0.0);
    }

    #[test]
    fn power_iteration_known_spectrum() {
        let q = Quadratic(vec![3.0, 1.0]);
        let r = hessian_top_eigenvalue(&q, &[0.5, -0.2], 500, 1e-10, 0).unwrap();
        assert!((r.eigenvalue - 3.0).abs() < 1e-3, "{r:?}");
        assert!(r.converged);
    }

    #[test]
    fn power_iteration_prefers_largest_algebraic() {
        let q = Quadratic(vec![-5.0, 2.0]);
        let r = hessian_top_eigenvalue(&q, &[0.1, 0.1], 500, 1e-10, 0).unwrap();
        assert!((r.eigenvalue - 2.0).abs() < 1e-3, "{r:?}");
    }

    #[test]
    fn eigenvalue_is_linear_in_the_loss() {
        let q = Quadratic(vec![4.0, 1.5, 0.5]);
        let w = [0.2, 0.1, -0.3];
        let base = hessian_top_eigenvalue(&q, &w, 500, 1e-10, 3).unwrap().eigenvalue;
        let scaled = hessian_top_eigenvalue(&Scaled(Quadratic(vec![4.0, 1.5, 0.5]), 7.0), &w, 500, 1e-10, 3)
            .unwrap()
            .eigenvalue;
        assert!((scaled - 7.0 * base).abs() < 1e-3 * 7.0 * base);
    }

    #[test]
    fn non_convergence_is_flagged() {
        let q = Quadratic(vec![1.0, 0.999, 0.998]);
        let r = hessian_top_eigenvalue(&q, &[1.0, 1.0, 1.0], 2, 1e-14, 0).unwrap();
        assert!(!r.converged);
    }
}
