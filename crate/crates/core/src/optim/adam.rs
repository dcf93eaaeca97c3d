use serde::{Deserialize, Serialize};

use super::schedule::{LrDecayUnit, LrSchedule};
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

/// How weight decay enters Adam.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdamMode {
    /// `λ·w` is added to the gradient and shares the moment buffers with it.
    CoupledL2,
    /// Buffers see only `∇ℓ`; weights are shrunk by `α·λ·w` outside the adaptive step.
    Decoupled,
    /// A second pair of moment buffers tracks `w` and drives its own adaptive decay step.
    Separated,
}

/// Which learning rate multiplies the decoupled and separated decay steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayLr {
    #[default]
    Scheduled,
    Base,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda: f64,
    pub mode: AdamMode,
    pub decay_lr: DecayLr,
    pub lr_decay: f64,
    pub lr_decay_unit: LrDecayUnit,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda: 1e-4,
            mode: AdamMode::Decoupled,
            decay_lr: DecayLr::Scheduled,
            lr_decay: 1.0,
            lr_decay_unit: LrDecayUnit::Epoch,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidConfig(format!("alpha must be > 0, got {}", self.alpha)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::InvalidConfig(format!("eps must be > 0, got {}", self.eps)));
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

/// Moment buffers, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Decay-branch buffers, present only in [`AdamMode::Separated`].
    pub m_prime: Option<Vec<Tensor>>,
    pub v_prime: Option<Vec<Tensor>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet, separated: bool) -> Self {
        let zeros = || -> Vec<Tensor> { params.iter().map(|p| Tensor::zeros(p.value.shape())).collect() };
        Self {
            m: zeros(),
            v: zeros(),
            m_prime: separated.then(zeros),
            v_prime: separated.then(zeros),
            t: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Result<Self> {
        config.validate()?;
        let state = AdamState::new(params, config.mode == AdamMode::Separated);
        Ok(Self { config, state })
    }

    /// One bias-corrected update from the gradients stored in `params`.
    ///
    /// `lr` is the scheduled step size and `lambda` the decay coefficient for
    /// this step (0 when decay is inactive).
    pub fn step(&mut self, params: &mut ParamSet, lr: f64, lambda: f64) -> Result<()> {
        let AdamConfig {
            beta1,
            beta2,
            eps,
            mode,
            ..
        } = self.config;
        let decay_lr = match self.config.decay_lr {
            DecayLr::Scheduled => lr,
            DecayLr::Base => self.config.alpha,
        };
        let st = &mut self.state;
        st.t += 1;
        let bc1 = 1.0 - beta1.powi(st.t as i32);
        let bc2 = 1.0 - beta2.powi(st.t as i32);

        for (i, p) in params.iter_mut().enumerate() {
            let w = p.value.data_mut();
            let g = p.grad.data();
            let m = st.m[i].data_mut();
            let v = st.v[i].data_mut();
            match mode {
                AdamMode::CoupledL2 => {
                    for j in 0..w.len() {
                        let ge = g[j] + lambda * w[j];
                        m[j] = beta1 * m[j] + (1.0 - beta1) * ge;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * ge * ge;
                        w[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                    }
                }
                AdamMode::Decoupled => {
                    for j in 0..w.len() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                        let decay = decay_lr * lambda * w[j];
                        w[j] = w[j] - lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps) - decay;
                    }
                }
                AdamMode::Separated => {
                    let mp = st.m_prime.as_mut().expect("separated buffers")[i].data_mut();
                    let vp = st.v_prime.as_mut().expect("separated buffers")[i].data_mut();
                    for j in 0..w.len() {
                        let w0 = w[j];
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                        mp[j] = beta1 * mp[j] + (1.0 - beta1) * w0;
                        vp[j] = beta2 * vp[j] + (1.0 - beta2) * w0 * w0;
                        let stepped = w0 - lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                        w[j] = stepped - decay_lr * lambda * separated_direction(mp[j], vp[j], bc1, bc2, eps);
                    }
                }
            }
            super::check_finite(p)?;
        }
        Ok(())
    }
}

/// `m̂′ / (√v̂′ + ε)` for the decay branch.
fn separated_direction(m: f64, v: f64, bc1: f64, bc2: f64, eps: f64) -> f64 {
    (m / bc1) / ((v / bc2).sqrt() + eps)
}

/// Size of the decay-branch update `|α·λ·m̂′/(√v̂′ + ε)|` per scalar, without applying it.
pub fn separated_decay_magnitudes(adam: &Adam, lr: f64, lambda: f64) -> Vec<f64> {
    let st = &adam.state;
    let (Some(mp), Some(vp)) = (&st.m_prime, &st.v_prime) else {
        return Vec::new();
    };
    let bc1 = 1.0 - adam.config.beta1.powi(st.t as i32);
    let bc2 = 1.0 - adam.config.beta2.powi(st.t as i32);
    mp.iter()
        .zip(vp)
        .flat_map(|(m, v)| m.data().iter().zip(v.data()).map(|(&m, &v)| (m, v)).collect::<Vec<_>>())
        .map(|(m, v)| (lr * lambda * separated_direction(m, v, bc1, bc2, adam.config.eps)).abs())
        .collect()
}
