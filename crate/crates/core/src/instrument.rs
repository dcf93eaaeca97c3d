//! Training-dynamics telemetry.
//!
//! All norms, inner products and cosines are taken over the concatenation of
//! every parameter tensor (one global vector), with per-tensor norms logged
//! alongside for diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::optim::AdamState;
use crate::tensor::{ParamSet, Tensor};

/// Version of the [`MetricRecord`] layout written to metric logs.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Floor inside the buffer-ratio logarithm.
pub const RATIO_EPS: f64 = 1e-12;

/// The two parts of the squared-norm change of a plain SGD step `w − α∇ℓ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormDecomposition {
    /// `α²‖∇ℓ‖²`
    pub square_term: f64,
    /// `2α⟨−∇ℓ, w⟩`
    pub cross_term: f64,
}

impl NormDecomposition {
    pub fn total(&self) -> f64 {
        self.square_term + self.cross_term
    }
}

pub fn norm_decomposition(params: &ParamSet, grads: &[Tensor], alpha: f64) -> Result<NormDecomposition> {
    params.check_aligned(grads, "norm_decomposition")?;
    let mut sq = 0.0;
    let mut inner = 0.0;
    for (p, g) in params.iter().zip(grads) {
        sq += g.norm_sq();
        inner += g.dot(&p.value)?;
    }
    Ok(NormDecomposition {
        square_term: alpha * alpha * sq,
        cross_term: -2.0 * alpha * inner,
    })
}

/// `2α⟨−g, w⟩` for one gradient.
pub fn cross_term(params: &ParamSet, grads: &[Tensor], alpha: f64) -> Result<f64> {
    params.check_aligned(grads, "cross_term")?;
    let mut inner = 0.0;
    for (p, g) in params.iter().zip(grads) {
        inner += g.dot(&p.value)?;
    }
    Ok(-2.0 * alpha * inner)
}

/// Cosine of two flat vectors; `(0, true)` when either has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> (f64, bool) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return (0.0, true);
    }
    ((dot / (na * nb)).clamp(-1.0, 1.0), false)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCosines {
    /// `cos(w, −∇loss_pos)`, the correct-class part of the minimized loss.
    pub cos_pos: f64,
    /// `cos(w, −∇loss_neg)`, the log-partition part of the minimized loss.
    pub cos_neg: f64,
    /// Set when a zero-norm operand forced a cosine to 0.
    pub degenerate: bool,
}

/// Cosines between the weights and the negated gradients of the two loss parts.
pub fn pos_neg_cosines(params: &ParamSet, grad_pos: &[Tensor], grad_neg: &[Tensor]) -> Result<GradCosines> {
    params.check_aligned(grad_pos, "pos_neg_cosines")?;
    params.check_aligned(grad_neg, "pos_neg_cosines")?;
    let w = params.flatten();
    let neg = |gs: &[Tensor]| -> Vec<f64> { gs.iter().flat_map(|g| g.data().iter().map(|v| -v)).collect() };
    let (cos_pos, d1) = cosine(&w, &neg(grad_pos));
    let (cos_neg, d2) = cosine(&w, &neg(grad_neg));
    Ok(GradCosines {
        cos_pos,
        cos_neg,
        degenerate: d1 || d2,
    })
}

/// Nearest-rank quantile of sorted values: the `⌈q·n⌉`-th smallest (at least the first).
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = (q * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Quantiles of `log(|m_i| / (|w_i| + eps) + eps)` over every scalar weight.
pub fn buffer_ratio_quantiles(state: &AdamState, params: &ParamSet, quantiles: &[f64], eps: f64) -> Result<Vec<f64>> {
    if params.is_empty() || params.num_scalars() == 0 {
        return Err(Error::Empty("parameter set"));
    }
    params.check_aligned(&state.m, "buffer_ratio_quantiles")?;
    let mut values: Vec<f64> = params
        .iter()
        .zip(&state.m)
        .flat_map(|(p, m)| {
            p.value
                .data()
                .iter()
                .zip(m.data())
                .map(|(w, m)| (m.abs() / (w.abs() + eps) + eps).ln())
                .collect::<Vec<_>>()
        })
        .collect();
    values.sort_by(f64::total_cmp);
    Ok(quantiles.iter().map(|&q| nearest_rank(&values, q)).collect())
}

/// Which parameters a norm-matching rescale touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleScope {
    #[default]
    All,
    /// Everything except batch-norm gains and shifts.
    NonNormParams,
    /// Only weight matrices feeding a batch norm; leaves the network function unchanged.
    ScaleInvariant,
}

impl ScaleScope {
    fn includes(self, role: crate::tensor::ParamRole) -> bool {
        match self {
            ScaleScope::All => true,
            ScaleScope::NonNormParams => !role.is_norm_affine(),
            ScaleScope::ScaleInvariant => role == crate::tensor::ParamRole::NormalizedWeight,
        }
    }
}

pub fn global_norm(params: &ParamSet) -> f64 {
    params.iter().map(|p| p.value.norm_sq()).sum::<f64>().sqrt()
}

/// Rescales the in-scope parameters so the global norm becomes `target_norm`.
/// Returns the factor applied to in-scope parameters.
pub fn norm_match_scale(target_norm: f64, params: &mut ParamSet, scope: ScaleScope) -> Result<f64> {
    if !(target_norm.is_finite() && target_norm >= 0.0) {
        return Err(Error::InvalidConfig(format!("target norm {target_norm}")));
    }
    let (mut inside, mut outside) = (0.0, 0.0);
    for p in params.iter() {
        if scope.includes(p.role) {
            inside += p.value.norm_sq();
        } else {
            outside += p.value.norm_sq();
        }
    }
    if inside == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let wanted = target_norm * target_norm - outside;
    if wanted < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "target norm {target_norm} is below the norm of out-of-scope parameters {}",
            outside.sqrt()
        )));
    }
    let factor = if scope == ScaleScope::All {
        target_norm / inside.sqrt()
    } else {
        (wanted / inside).sqrt()
    };
    if factor != 1.0 {
        for p in params.iter_mut() {
            if scope.includes(p.role) {
                p.value.data_mut().iter_mut().for_each(|v| *v *= factor);
            }
        }
    }
    Ok(factor)
}

/// Euclidean distance between the current parameters and a snapshot.
pub fn dist_from_init(params: &ParamSet, init: &[Tensor]) -> Result<f64> {
    params.check_aligned(init, "dist_from_init")?;
    let mut acc = 0.0;
    for (p, w0) in params.iter().zip(init) {
        acc += p
            .value
            .data()
            .iter()
            .zip(w0.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(acc.sqrt())
}

pub fn grad_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// `(name, ‖w‖)` for every parameter tensor.
pub fn layer_norms(params: &ParamSet) -> Vec<(String, f64)> {
    params
        .iter()
        .map(|p| (p.name.clone(), p.value.norm_sq().sqrt()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Step,
    Epoch,
}

/// Sharpness values attached to an epoch record.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SharpnessValues {
    pub hessian_top: Option<f64>,
    pub keskar: Option<f64>,
    pub multiplicative: Option<f64>,
    pub multiplicative_stderr: Option<f64>,
    pub additive: Option<f64>,
    pub additive_stderr: Option<f64>,
}

/// One row of training telemetry.
///
/// Step rows carry the per-update quantities (decomposition, cosines, realized
/// norm change); epoch rows carry losses, accuracies and epoch means of the
/// step cosines. `cos_*_max` repeat the cosines for the maximized log-likelihood
/// convention, where each loss part has the opposite sign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub schema_version: u32,
    pub run_id: String,
    pub kind: RecordKind,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub wd_active: bool,
    pub weight_norm: f64,
    pub weight_norm_sq: f64,
    pub square_term: Option<f64>,
    pub cross_term: Option<f64>,
    pub cross_term_pos: Option<f64>,
    pub cross_term_neg: Option<f64>,
    /// `‖w_after‖² − ‖w_before‖²` for the actual optimizer step.
    pub realized_norm_sq_change: Option<f64>,
    pub cos_pos: Option<f64>,
    pub cos_neg: Option<f64>,
    pub cos_pos_max: Option<f64>,
    pub cos_neg_max: Option<f64>,
    pub cos_degenerate: Option<bool>,
    pub grad_norm: Option<f64>,
    pub dist_from_init: f64,
    pub ratio_quantiles: Vec<(f64, f64)>,
    pub train_loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
    pub norm_match_factor: Option<f64>,
    pub sharpness: Option<SharpnessValues>,
    pub layer_norms: Vec<(String, f64)>,
}

impl MetricRecord {
    /// A record with only the always-present fields filled in.
    pub fn base(
        run_id: &str,
        kind: RecordKind,
        epoch: usize,
        step: usize,
        params: &ParamSet,
        init: &[Tensor],
    ) -> Result<Self> {
        let sq: f64 = params.iter().map(|p| p.value.norm_sq()).sum();
        Ok(Self {
            schema_version: METRICS_SCHEMA_VERSION,
            run_id: run_id.to_string(),
            kind,
            epoch,
            step,
            lr: 0.0,
            wd_active: false,
            weight_norm: sq.sqrt(),
            weight_norm_sq: sq,
            square_term: None,
            cross_term: None,
            cross_term_pos: None,
            cross_term_neg: None,
            realized_norm_sq_change: None,
            cos_pos: None,
            cos_neg: None,
            cos_pos_max: None,
            cos_neg_max: None,
            cos_degenerate: None,
            grad_norm: None,
            dist_from_init: dist_from_init(params, init)?,
            ratio_quantiles: Vec::new(),
            train_loss: None,
            train_acc: None,
            test_loss: None,
            test_acc: None,
            norm_match_factor: None,
            sharpness: None,
            layer_norms: layer_norms(params),
        })
    }

    pub fn set_cosines(&mut self, c: GradCosines) {
        self.cos_pos = Some(c.cos_pos);
        self.cos_neg = Some(c.cos_neg);
        self.cos_pos_max = Some(-c.cos_pos);
        self.cos_neg_max = Some(-c.cos_neg);
        self.cos_degenerate = Some(c.degenerate);
    }

    /// Checks the documented invariants of a record.
    pub fn validate(&self) -> Result<()> {
        for c in [self.cos_pos, self.cos_neg].into_iter().flatten() {
            if !(-1.0..=1.0).contains(&c) {
                return Err(Error::InvalidConfig(format!("cosine {c} outside [-1, 1]")));
            }
        }
        if self.square_term.is_some_and(|s| s < 0.0) {
            return Err(Error::InvalidConfig("negative square term".into()));
        }
        if self
            .ratio_quantiles
            .windows(2)
            .any(|w| w[1].1 < w[0].1 || w[1].0 < w[0].0)
        {
            return Err(shape_err("metric record", "ratio quantiles not monotone"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamRole;

    fn vector(values: &[f64]) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.push(
            "w",
            ParamRole::Weight,
            Tensor::new(vec![values.len()], values.to_vec()).unwrap(),
        )
        .unwrap();
        ps
    }

    fn t(values: &[f64]) -> Vec<Tensor> {
        vec![Tensor::new(vec![values.len()], values.to_vec()).unwrap()]
    }

    #[test]
    fn zero_gradient_decomposes_to_zero() {
        let d = norm_decomposition(&vector(&[1.0, 2.0]), &t(&[0.0, 0.0]), 0.1).unwrap();
        assert_eq!((d.square_term, d.cross_term), (0.0, 0.0));
    }

    #[test]
    fn decomposition_by_hand() {
        let ps = vector(&[1.0, 0.0]);
        let d = norm_decomposition(&ps, &t(&[-1.0, 0.0]), 0.1).unwrap();
        assert!((d.square_term - 0.01).abs() < 1e-15);
        assert!((d.cross_term - 0.2).abs() < 1e-15);
        // (1 + 0.1)² = 1.21
        assert!((1.0 + d.total() - 1.21).abs() < 1e-15);
    }

    #[test]
    fn cosine_cases() {
        let ps = vector(&[1.0, -2.0, 0.5]);
        let c = pos_neg_cosines(&ps, &t(&[-1.0, 2.0, -0.5]), &t(&[2.0, 1.0, 0.0])).unwrap();
        assert!((c.cos_pos - 1.0).abs() < 1e-15);
        assert!(c.cos_neg.abs() < 1e-15);
        assert!(!c.degenerate);
        let z = pos_neg_cosines(&ps, &t(&[0.0; 3]), &t(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(z.cos_pos, 0.0);
        assert!(z.degenerate);
    }

    fn state_with(m: &[f64]) -> AdamState {
        let ps = vector(m);
        let mut st = AdamState::new(&ps, false);
        st.m = t(m);
        st.t = 1;
        st
    }

    #[test]
    fn ratio_quantiles_of_proportional_buffers() {
        let w = [0.5, -2.0, 3.0, 0.1, -0.7];
        let ps = vector(&w);
        let qs = [0.1, 0.5, 0.9];
        let same = buffer_ratio_quantiles(&state_with(&w), &ps, &qs, RATIO_EPS).unwrap();
        assert!(same.iter().all(|q| q.abs() < 1e-9));
        let hundred: Vec<f64> = w.iter().map(|v| 100.0 * v).collect();
        let big = buffer_ratio_quantiles(&state_with(&hundred), &ps, &qs, RATIO_EPS).unwrap();
        assert!(big.iter().all(|q| (q - 100f64.ln()).abs() < 1e-9));
    }

    #[test]
    fn ratio_quantiles_reject_empty() {
        let ps = ParamSet::new();
        let st = AdamState::new(&ps, false);
        assert!(matches!(
            buffer_ratio_quantiles(&st, &ps, &[0.5], RATIO_EPS),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn nearest_rank_picks_order_statistics() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        assert_eq!(nearest_rank(&v, 0.1), 1.0);
        assert_eq!(nearest_rank(&v, 0.5), 5.0);
        assert_eq!(nearest_rank(&v, 0.9), 9.0);
        assert_eq!(nearest_rank(&v, 0.0), 1.0);
        assert_eq!(nearest_rank(&v, 1.0), 10.0);
    }

    #[test]
    fn norm_match_factor() {
        let mut ps = vector(&[2.0, 0.0]);
        let f = norm_match_scale(1.0, &mut ps, ScaleScope::All).unwrap();
        assert_eq!(f, 0.5);
        assert_eq!(ps.flatten(), vec![1.0, 0.0]);
        let f = norm_match_scale(1.0, &mut ps, ScaleScope::All).unwrap();
        assert_eq!(f, 1.0);
        assert_eq!(ps.flatten(), vec![1.0, 0.0]);
        let mut zero = vector(&[0.0, 0.0]);
        assert!(matches!(
            norm_match_scale(1.0, &mut zero, ScaleScope::All),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn norm_match_partial_scope_hits_global_target() {
        let mut ps = ParamSet::new();
        ps.push(
            "w",
            ParamRole::NormalizedWeight,
            Tensor::new(vec![2], vec![3.0, 4.0]).unwrap(),
        )
        .unwrap();
        ps.push("g", ParamRole::NormGain, Tensor::new(vec![1], vec![1.0]).unwrap())
            .unwrap();
        norm_match_scale(3.0, &mut ps, ScaleScope::ScaleInvariant).unwrap();
        assert!((global_norm(&ps) - 3.0).abs() < 1e-12);
        assert_eq!(ps.get(1).unwrap().value.data(), &[1.0]);
        assert!(norm_match_scale(0.5, &mut ps, ScaleScope::NonNormParams).is_err());
    }

    #[test]
    fn distance_cases() {
        let ps = vector(&[1.0, 2.0, 3.0]);
        assert_eq!(dist_from_init(&ps, &t(&[1.0, 2.0, 3.0])).unwrap(), 0.0);
        assert_eq!(dist_from_init(&ps, &t(&[1.0, 1.0, 3.0])).unwrap(), 1.0);
        assert!(dist_from_init(&ps, &t(&[1.0, 2.0])).is_err());
    }
}
