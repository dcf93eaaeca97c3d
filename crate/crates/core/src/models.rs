//! Feed-forward ReLU classifiers with optional batch normalization.
//!
//! Layout for widths `[d, h1, ..., hk, c]`: each hidden layer is
//! `relu(bn(x·W))` when batch norm is on (no linear bias, the BN shift plays
//! that role) or `relu(x·W + b)` when it is off; the output layer is
//! `x·W + b`. Weights are `fan_in × fan_out` with He-normal initialization.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::{seeded, stream};
use crate::tape::{CrossEntropySplit, NodeId, Tape};
use crate::tensor::{ParamRole, ParamSet, Tensor};

pub const DEFAULT_BN_EPS: f64 = 1e-12;

fn default_bn_eps() -> f64 {
    DEFAULT_BN_EPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Input width, hidden widths, output width.
    pub layer_widths: Vec<usize>,
    pub use_batch_norm: bool,
    pub init_seed: u64,
    /// Variance floor inside batch norm. Kept tiny so rescaling invariance holds to ~1e-9.
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
}

impl MlpConfig {
    pub fn new(layer_widths: Vec<usize>, use_batch_norm: bool, init_seed: u64) -> Self {
        Self {
            layer_widths,
            use_batch_norm,
            init_seed,
            bn_eps: DEFAULT_BN_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "an MLP needs at least input and output widths, got {:?}",
                self.layer_widths
            )));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "layer widths must be positive, got {:?}",
                self.layer_widths
            )));
        }
        if !(self.bn_eps.is_finite() && self.bn_eps >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "bn_eps must be >= 0, got {}",
                self.bn_eps
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_widths.last().expect("validated widths")
    }

    fn num_hidden(&self) -> usize {
        self.layer_widths.len() - 2
    }
}

/// Loss and accuracy of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossEval {
    pub loss: f64,
    pub loss_pos: f64,
    pub loss_neg: f64,
    pub accuracy: f64,
}

/// Gradients of the loss and of its two cross-entropy parts, aligned with the parameters.
#[derive(Debug, Clone)]
pub struct SplitGrads {
    pub eval: LossEval,
    pub loss: Vec<Tensor>,
    pub pos: Vec<Tensor>,
    pub neg: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: MlpConfig,
    pub params: ParamSet,
}

impl Model {
    /// Builds the network and draws its initial weights from `config.init_seed`.
    pub fn build(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(config.init_seed, stream::INIT);
        let mut params = ParamSet::new();
        let widths = &config.layer_widths;
        let last = widths.len() - 2;
        for (layer, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
            let w = Tensor::new(vec![fan_in, fan_out], w)?;
            if layer == last {
                params.push("out.weight", ParamRole::Weight, w)?;
                params.push("out.bias", ParamRole::Bias, Tensor::zeros(&[fan_out]))?;
            } else if config.use_batch_norm {
                params.push(format!("hidden{layer}.weight"), ParamRole::NormalizedWeight, w)?;
                params.push(
                    format!("hidden{layer}.bn.gamma"),
                    ParamRole::NormGain,
                    Tensor::filled(&[fan_out], 1.0),
                )?;
                params.push(
                    format!("hidden{layer}.bn.beta"),
                    ParamRole::NormShift,
                    Tensor::zeros(&[fan_out]),
                )?;
            } else {
                params.push(format!("hidden{layer}.weight"), ParamRole::Weight, w)?;
                params.push(
                    format!("hidden{layer}.bias"),
                    ParamRole::Bias,
                    Tensor::zeros(&[fan_out]),
                )?;
            }
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a model around existing parameters, checking they match the layout.
    pub fn from_params(config: MlpConfig, params: ParamSet) -> Result<Self> {
        let reference = Model::build(config.clone())?;
        if reference.params.len() != params.len() {
            return Err(shape_err(
                "from_params",
                format!("expected {} tensors, got {}", reference.params.len(), params.len()),
            ));
        }
        for (a, b) in reference.params.iter().zip(params.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(shape_err(
                    "from_params",
                    format!(
                        "expected `{}` {:?}, got `{}` {:?}",
                        a.name,
                        a.value.shape(),
                        b.name,
                        b.value.shape()
                    ),
                ));
            }
        }
        Ok(Self { config, params })
    }

    /// Records the forward pass on `tape` and returns the logits node.
    pub fn forward(&self, x: &Tensor, tape: &mut Tape) -> Result<NodeId> {
        self.forward_with(&self.params, x, tape)
    }

    /// Forward pass using `params` in place of the model's own parameters.
    pub fn forward_with(&self, params: &ParamSet, x: &Tensor, tape: &mut Tape) -> Result<NodeId> {
        let (_, d) = x.dims2("forward")?;
        if d != self.config.input_width() {
            return Err(shape_err(
                "forward",
                format!("input has {d} features, model expects {}", self.config.input_width()),
            ));
        }
        let mut h = tape.input(x.clone());
        let mut idx = 0;
        for _ in 0..self.config.num_hidden() {
            let w = tape.param(params, idx)?;
            let z = tape.matmul(h, w)?;
            let z = if self.config.use_batch_norm {
                let gamma = tape.param(params, idx + 1)?;
                let beta = tape.param(params, idx + 2)?;
                idx += 3;
                tape.batch_norm(z, gamma, beta, self.config.bn_eps)?
            } else {
                let b = tape.param(params, idx + 1)?;
                idx += 2;
                tape.add_row(z, b)?
            };
            h = tape.relu(z);
        }
        let w = tape.param(params, idx)?;
        let b = tape.param(params, idx + 1)?;
        let z = tape.matmul(h, w)?;
        tape.add_row(z, b)
    }

    /// Logits for `x` without keeping the tape.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let id = self.forward(x, &mut tape)?;
        Ok(tape.value(id).clone())
    }

    pub fn evaluate(&self, x: &Tensor, labels: &[usize]) -> Result<LossEval> {
        self.evaluate_with(&self.params, x, labels)
    }

    pub fn evaluate_with(&self, params: &ParamSet, x: &Tensor, labels: &[usize]) -> Result<LossEval> {
        let mut tape = Tape::new();
        let split = self.record_loss(params, x, labels, &mut tape)?;
        Ok(read_eval(&tape, &split, labels))
    }

    /// Loss and its gradient with respect to `params`.
    pub fn loss_grads(&self, params: &ParamSet, x: &Tensor, labels: &[usize]) -> Result<(LossEval, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let split = self.record_loss(params, x, labels, &mut tape)?;
        let grads = tape.gradients(split.loss)?.param_grads(&tape, params)?;
        Ok((read_eval(&tape, &split, labels), grads))
    }

    /// Gradients of the loss and of both cross-entropy parts.
    pub fn split_grads(&self, params: &ParamSet, x: &Tensor, labels: &[usize]) -> Result<SplitGrads> {
        let mut tape = Tape::new();
        let split = self.record_loss(params, x, labels, &mut tape)?;
        let loss = tape.gradients(split.loss)?.param_grads(&tape, params)?;
        let pos = tape.gradients(split.pos)?.param_grads(&tape, params)?;
        let neg = tape.gradients(split.neg)?.param_grads(&tape, params)?;
        Ok(SplitGrads {
            eval: read_eval(&tape, &split, labels),
            loss,
            pos,
            neg,
        })
    }

    fn record_loss(
        &self,
        params: &ParamSet,
        x: &Tensor,
        labels: &[usize],
        tape: &mut Tape,
    ) -> Result<CrossEntropySplit> {
        let logits = self.forward_with(params, x, tape)?;
        tape.cross_entropy_split(logits, labels)
    }
}

fn read_eval(tape: &Tape, split: &CrossEntropySplit, labels: &[usize]) -> LossEval {
    let loss = tape.value(split.loss).data()[0];
    let loss_pos = tape.value(split.pos).data()[0];
    let loss_neg = tape.value(split.neg).data()[0];
    let logits = tape.value(split.logits);
    LossEval {
        loss,
        loss_pos,
        loss_neg,
        accuracy: accuracy(logits, labels),
    }
}

/// Fraction of rows whose arg-max logit (first on ties) equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let c = logits.shape().get(1).copied().unwrap_or(1);
    let correct = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    correct as f64 / labels.len() as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize, d: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        Tensor::new(vec![n, d], (0..n * d).map(|i| f(i / d, i % d)).collect()).unwrap()
    }

    #[test]
    fn parameter_count_with_batch_norm() {
        let m = Model::build(MlpConfig::new(vec![4, 8, 3], true, 0)).unwrap();
        assert_eq!(m.params.num_scalars(), 4 * 8 + (8 + 8) + 8 * 3 + 3);
        let names: Vec<_> = m.params.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "hidden0.weight",
                "hidden0.bn.gamma",
                "hidden0.bn.beta",
                "out.weight",
                "out.bias"
            ]
        );
    }

    #[test]
    fn logistic_regression_shape() {
        let m = Model::build(MlpConfig::new(vec![2, 2], false, 0)).unwrap();
        assert_eq!(m.params.len(), 2);
        assert_eq!(m.params.get(0).unwrap().value.shape(), &[2, 2]);
    }

    #[test]
    fn invalid_widths() {
        assert!(Model::build(MlpConfig::new(vec![4], false, 0)).is_err());
        assert!(Model::build(MlpConfig::new(vec![4, 0, 2], false, 0)).is_err());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = Model::build(MlpConfig::new(vec![5, 7, 3], true, 11)).unwrap();
        let b = Model::build(MlpConfig::new(vec![5, 7, 3], true, 11)).unwrap();
        let c = Model::build(MlpConfig::new(vec![5, 7, 3], true, 12)).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn zero_weights_and_input_give_zero_logits() {
        for bn in [false, true] {
            let mut m = Model::build(MlpConfig::new(vec![3, 4, 2], bn, 0)).unwrap();
            let n = m.params.num_scalars();
            m.params.assign_flat(&vec![0.0; n]).unwrap();
            let logits = m.logits(&Tensor::zeros(&[5, 3])).unwrap();
            assert!(logits.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rescaling_normalized_weights() {
        let x = rows(6, 3, |i, j| ((i * 3 + j) as f64 * 0.7).sin() * 2.0);
        for bn in [true, false] {
            let m = Model::build(MlpConfig::new(vec![3, 5, 4, 2], bn, 3)).unwrap();
            let mut scaled = m.clone();
            let w = scaled.params.by_name_mut("hidden1.weight").unwrap();
            w.value = w.value.scale(3.0);
            let a = m.logits(&x).unwrap();
            let b = scaled.logits(&x).unwrap();
            let diff = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max);
            if bn {
                assert!(diff < 1e-9, "BN network changed by {diff}");
            } else {
                assert!(diff > 1e-3, "plain network should change, diff {diff}");
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = Model::build(MlpConfig::new(vec![3, 2], false, 0)).unwrap();
        assert!(m.logits(&Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn accuracy_takes_first_max() {
        let logits = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 2.0], vec![3.0, 0.0]]).unwrap();
        assert!((accuracy(&logits, &[0, 1, 1]) - 2.0 / 3.0).abs() < 1e-15);
    }
}
