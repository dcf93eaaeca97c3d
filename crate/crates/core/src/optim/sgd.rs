use serde::{Deserialize, Serialize};

use super::schedule::{LrDecayUnit, LrSchedule};
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

/// SGD hyper-parameters. Defaults follow the usual CIFAR ResNet recipe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub alpha: f64,
    pub momentum: f64,
    pub lambda: f64,
    pub lr_decay: f64,
    pub lr_decay_unit: LrDecayUnit,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            momentum: 0.9,
            lambda: 5e-4,
            lr_decay: 0.97,
            lr_decay_unit: LrDecayUnit::Epoch,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidConfig(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lr_decay must be > 0, got {}",
                self.lr_decay
            )));
        }
        Ok(())
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.alpha,
            decay: self.lr_decay,
            unit: self.lr_decay_unit,
        }
    }
}

/// SGD with heavy-ball momentum and coupled l2 decay:
/// `v ← μ·v + (∇ℓ + λ·w)`, `w ← w − α·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(config: SgdConfig, params: &ParamSet) -> Result<Self> {
        config.validate()?;
        let velocity = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Ok(Self { config, velocity })
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// One update from the gradients stored in `params`, with step size `lr`
    /// and decay coefficient `lambda` (0 when decay is inactive this step).
    pub fn step(&mut self, params: &mut ParamSet, lr: f64, lambda: f64) -> Result<()> {
        let mu = self.config.momentum;
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let w = p.value.data_mut();
            let g = p.grad.data();
            for ((wi, gi), vi) in w.iter_mut().zip(g).zip(v.data_mut()) {
                let g_eff = gi + lambda * *wi;
                *vi = if mu == 0.0 { g_eff } else { mu * *vi + g_eff };
                *wi -= lr * *vi;
            }
            super::check_finite(p)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamRole;

    fn single(w: f64, g: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.push("w", ParamRole::Weight, Tensor::new(vec![1], vec![w]).unwrap())
            .unwrap();
        ps.get_mut(0).unwrap().grad = Tensor::new(vec![1], vec![g]).unwrap();
        ps
    }

    fn value(ps: &ParamSet) -> f64 {
        ps.get(0).unwrap().value.data()[0]
    }

    fn plain(momentum: f64, lambda: f64) -> SgdConfig {
        SgdConfig {
            alpha: 0.1,
            momentum,
            lambda,
            lr_decay: 1.0,
            lr_decay_unit: LrDecayUnit::Epoch,
        }
    }

    #[test]
    fn pure_decay_factor() {
        let mut ps = single(1.0, 0.0);
        let mut opt = Sgd::new(plain(0.0, 0.5), &ps).unwrap();
        opt.step(&mut ps, 0.1, 0.5).unwrap();
        assert!((value(&ps) - 0.95).abs() < 1e-15);
    }

    #[test]
    fn no_decay_is_plain_sgd() {
        let mut ps = single(2.0, 1.0);
        let mut opt = Sgd::new(plain(0.0, 0.0), &ps).unwrap();
        opt.step(&mut ps, 0.1, 0.0).unwrap();
        assert!((value(&ps) - 1.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_matches_hand_unrolling() {
        // v1 = g, w1 = w0 − αg; v2 = 0.9g + g, w2 = w1 − α·1.9g
        let (w0, g, alpha) = (1.0, 0.5, 0.1);
        let mut ps = single(w0, g);
        let mut opt = Sgd::new(plain(0.9, 0.0), &ps).unwrap();
        opt.step(&mut ps, alpha, 0.0).unwrap();
        assert!((value(&ps) - (w0 - alpha * g)).abs() < 1e-15);
        opt.step(&mut ps, alpha, 0.0).unwrap();
        let expected = w0 - alpha * g - alpha * (0.9 * g + g);
        assert!((value(&ps) - expected).abs() < 1e-15);
    }

    #[test]
    fn decay_equals_prescaling_weights() {
        let (alpha, lambda) = (0.05, 0.3);
        for (w, g) in [(1.3, -0.4), (-2.0, 0.7), (0.01, 5.0)] {
            let mut coupled = single(w, g);
            Sgd::new(plain(0.0, lambda), &coupled)
                .unwrap()
                .step(&mut coupled, alpha, lambda)
                .unwrap();
            let mut split = single(w * (1.0 - alpha * lambda), g);
            Sgd::new(plain(0.0, 0.0), &split)
                .unwrap()
                .step(&mut split, alpha, 0.0)
                .unwrap();
            assert!((value(&coupled) - value(&split)).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_update_is_an_error() {
        let mut ps = single(1.0, 1e308);
        let mut opt = Sgd::new(plain(0.0, 0.0), &ps).unwrap();
        assert!(matches!(opt.step(&mut ps, -1e10, 0.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(plain(1.0, 0.0).validate().is_err());
        assert!(plain(0.5, -1.0).validate().is_err());
        assert!(SgdConfig::default().validate().is_ok());
    }
}
