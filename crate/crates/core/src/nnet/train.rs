use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Model, NnetError, Scalar};
use crate::preprocess::{shift_slice, ShiftConfig};
use crate::rng;
use crate::trace::{Label, TraceSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Optimizer {
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Random shifts applied to training traces, redrawn every epoch.
    pub augmentation: Option<ShiftConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            seed: 0,
            augmentation: None,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), NnetError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NnetError::InvalidConfig(format!(
                "learning rate {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(NnetError::InvalidConfig("batch size 0".into()));
        }
        if let Some(aug) = &self.augmentation {
            aug.check().map_err(|e| NnetError::InvalidConfig(e.to_string()))?;
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return Err(NnetError::InvalidConfig("Adam needs beta in [0, 1) and eps > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training cross-entropy of every epoch.
    pub loss_history: Vec<f64>,
    pub epochs: usize,
    pub n_traces: usize,
}

/// First-order optimizer state over the flat parameter vector.
struct Stepper<F> {
    opt: Optimizer,
    lr: f64,
    m: Vec<F>,
    v: Vec<F>,
    t: i32,
}

impl<F: Scalar> Stepper<F> {
    fn new(opt: Optimizer, lr: f64, n: usize) -> Self {
        Self {
            opt,
            lr,
            m: vec![F::zero(); n],
            v: vec![F::zero(); n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [F], grads: &[F]) {
        self.t += 1;
        match self.opt {
            Optimizer::Sgd { momentum } => {
                let (mu, lr) = (F::of(momentum), F::of(self.lr));
                for ((p, &g), m) in params.iter_mut().zip(grads).zip(self.m.iter_mut()) {
                    *m = mu * *m + g;
                    *p -= lr * *m;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let step = self.lr * (1.0 - beta2.powi(self.t)).sqrt() / (1.0 - beta1.powi(self.t));
                let (b1, b2, eps, step) = (F::of(beta1), F::of(beta2), F::of(eps), F::of(step));
                let one = F::one();
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = b1 * self.m[i] + (one - b1) * g;
                    self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
                    params[i] -= step * self.m[i] / (self.v[i].sqrt() + eps);
                }
            }
        }
    }
}

/// Trains `model` on `profiling` with minibatch gradient descent.
///
/// The result depends only on the model, the data and `cfg`: batches are
/// drawn from seeded streams and per-sample gradients are reduced in a
/// fixed order, whatever the thread count.
pub fn train<F: Scalar>(
    mut model: Model<F>,
    profiling: &TraceSet,
    cfg: &TrainConfig,
) -> Result<(Model<F>, TrainReport), NnetError> {
    cfg.check()?;
    let len = profiling.fixed_len().ok_or(NnetError::VariableLength)?;
    if len != model.input_len() {
        return Err(NnetError::LengthMismatch {
            got: len,
            expected: model.input_len(),
        });
    }
    if profiling.is_empty() {
        return Err(NnetError::EmptyBatch);
    }
    let data: Vec<(Vec<F>, Label)> = profiling
        .traces()
        .iter()
        .map(|t| {
            if t.label as usize >= model.n_classes() {
                return Err(NnetError::LabelOutOfRange {
                    label: t.label,
                    n_classes: model.n_classes(),
                });
            }
            Ok((t.samples.iter().map(|&v| F::of(v as f64)).collect(), t.label))
        })
        .collect::<Result<_, _>>()?;

    let n = data.len();
    let mut stepper = Stepper::new(cfg.optimizer, cfg.learning_rate, model.n_params());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, epoch as u64));
        let mut epoch_loss = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(Vec<F>, Label)> = match &cfg.augmentation {
                Some(aug) if aug.max_offset(len) > 0 => {
                    let max = aug.max_offset(len) as i64;
                    let epoch_seed = rng::derive(aug.seed, epoch as u64);
                    chunk
                        .iter()
                        .map(|&i| {
                            let off = rng::stream(epoch_seed, i as u64).random_range(-max..=max);
                            (shift_scalar(&data[i].0, off, F::of(aug.pad_value as f64)), data[i].1)
                        })
                        .collect()
                }
                _ => chunk.iter().map(|&i| data[i].clone()).collect(),
            };
            let (loss, grads) = model.loss_and_grads(&batch)?;
            let loss = loss.to_f64().unwrap_or(f64::NAN);
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(NnetError::Divergence { epoch, batch: bi });
            }
            epoch_loss += loss * chunk.len() as f64;
            stepper.step(model.params_mut(), &grads);
        }
        history.push(epoch_loss / n as f64);
    }
    Ok((
        model,
        TrainReport {
            loss_history: history,
            epochs: cfg.epochs,
            n_traces: n,
        },
    ))
}

fn shift_scalar<F: Scalar>(x: &[F], offset: i64, pad: F) -> Vec<F> {
    shift_slice(x, offset, pad).expect("offset bounded by ratio < 1")
}
