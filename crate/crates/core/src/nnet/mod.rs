//! A small 1D-CNN classifier with hand-written backpropagation.
//!
//! The architecture is fixed: a stack of `Conv1d + ReLU` blocks, global
//! average pooling over time, and a dense softmax layer. Parameters live
//! in one flat vector so optimizers, checkpoints and gradient checks can
//! treat them uniformly.

mod checkpoint;
mod model;
mod ops;
mod train;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointError,
};
pub use model::{Gradients, Model, Workspace};
pub use train::{train, Optimizer, TrainConfig, TrainReport};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::Label;

/// Floating-point type the engine can run in. Training uses `f32`; `f64`
/// exists for high-precision gradient checks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + AddAssign + SubAssign + MulAssign + Debug + Default + Send + Sync + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Error, PartialEq)]
pub enum NnetError {
    #[error("input length {got} does not match model input length {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("invalid model: {0}")]
    InvalidSpec(String),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("label {label} outside {n_classes} classes")]
    LabelOutOfRange { label: Label, n_classes: usize },
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("set is not fixed-length")]
    VariableLength,
    #[error("no conv block {0}")]
    NoSuchLayer(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub channels: usize,
    pub stride: usize,
}

/// Architecture of the attack model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_len: usize,
    pub n_classes: usize,
    pub convs: Vec<ConvSpec>,
    /// Seed of the parameter initialization.
    pub seed: u64,
}

impl ModelSpec {
    /// Three conv blocks (k=11/c=8, k=9/c=16, k=7/c=32, all stride 2),
    /// then pooling and a dense layer: four learnable layers.
    pub fn default_cnn(input_len: usize, n_classes: usize, seed: u64) -> Self {
        Self {
            input_len,
            n_classes,
            convs: vec![
                ConvSpec {
                    kernel: 11,
                    channels: 8,
                    stride: 2,
                },
                ConvSpec {
                    kernel: 9,
                    channels: 16,
                    stride: 2,
                },
                ConvSpec {
                    kernel: 7,
                    channels: 32,
                    stride: 2,
                },
            ],
            seed,
        }
    }

    /// Output lengths of each conv block.
    pub fn conv_lengths(&self) -> Result<Vec<usize>, NnetError> {
        let mut len = self.input_len;
        let mut out = Vec::with_capacity(self.convs.len());
        for (i, c) in self.convs.iter().enumerate() {
            if c.kernel == 0 || c.channels == 0 || c.stride == 0 {
                return Err(NnetError::InvalidSpec(format!(
                    "conv {i}: zero kernel, channels or stride"
                )));
            }
            if len < c.kernel {
                return Err(NnetError::InvalidSpec(format!(
                    "conv {i}: input length {len} shorter than kernel {}",
                    c.kernel
                )));
            }
            len = (len - c.kernel) / c.stride + 1;
            out.push(len);
        }
        Ok(out)
    }

    pub fn check(&self) -> Result<(), NnetError> {
        if self.n_classes < 1 {
            return Err(NnetError::InvalidSpec("n_classes must be positive".into()));
        }
        if self.convs.is_empty() {
            return Err(NnetError::InvalidSpec("at least one conv block".into()));
        }
        self.conv_lengths().map(|_| ())
    }

    pub fn n_params(&self) -> usize {
        let mut in_ch = 1;
        let mut n = 0;
        for c in &self.convs {
            n += c.channels * in_ch * c.kernel + c.channels;
            in_ch = c.channels;
        }
        n + self.n_classes * in_ch + self.n_classes
    }

    /// Distance between adjacent outputs of conv block `layer`, in input
    /// samples, and the input position of the centre of output 0.
    pub fn receptive_field(&self, layer: usize) -> (usize, f64) {
        let mut jump = 1usize;
        let mut first_center = 0.0f64;
        for c in &self.convs[..=layer] {
            first_center += (c.kernel - 1) as f64 / 2.0 * jump as f64;
            jump *= c.stride;
        }
        (jump, first_center)
    }
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax<F: Scalar>(p: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Fraction of positions where `pred` equals `truth`.
pub fn accuracy(pred: &[Label], truth: &[Label]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "prediction and truth lengths differ");
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64
}
