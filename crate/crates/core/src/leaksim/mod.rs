//! Parametric EM emission simulator.
//!
//! A simulated victim runs a fixed schedule of operations; every operation
//! consumes one byte operand and emits `samples_per_op` samples of
//! `b + a * HW(operand) + N(0, sigma^2)`. Zero operands can be skipped,
//! either by suppressing the baseline (`amplitude`) or by emitting nothing
//! (`time`).

mod config;
mod llm;

pub use config::{LlmConfig, SimConfig, VictimConfig};
pub use llm::{simulate_llm, LlmSpec};

use std::ops::Range;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Rng};
use crate::trace::{Label, Trace, TraceSet};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("input has {got} elements, victim expects {expected}")]
    InputLength { got: usize, expected: usize },
    #[error("emitted {emitted} samples but the trace is fixed to {fixed_len}")]
    Overflow { emitted: usize, fixed_len: usize },
    #[error("token id {token} outside vocabulary of {vocab}")]
    UnknownToken { token: u32, vocab: usize },
    #[error("invalid simulator parameter: {0}")]
    InvalidParameter(String),
    #[error("could not draw {n_classes} templates {min_distance:.3} apart after {attempts} attempts")]
    TemplateSeparation {
        n_classes: usize,
        min_distance: f64,
        attempts: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZeroSkip {
    Off,
    Amplitude,
    Time,
}

/// Emission law shared by every operation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LeakageModel {
    /// Hamming-weight coefficient.
    pub a: f64,
    /// Baseline amplitude of an executed operation.
    pub b: f64,
    #[serde(alias = "sigma_noise")]
    pub sigma: f64,
    pub zero_skip: ZeroSkip,
    pub samples_per_op: usize,
}

impl Default for LeakageModel {
    fn default() -> Self {
        Self {
            a: 1.0,
            b: 0.5,
            sigma: 1.0,
            zero_skip: ZeroSkip::Amplitude,
            samples_per_op: 4,
        }
    }
}

impl LeakageModel {
    pub fn check(&self) -> Result<(), SimError> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(SimError::InvalidParameter(format!("sigma = {}", self.sigma)));
        }
        if !self.a.is_finite() || !self.b.is_finite() {
            return Err(SimError::InvalidParameter("a and b must be finite".into()));
        }
        if self.samples_per_op == 0 {
            return Err(SimError::InvalidParameter("samples_per_op = 0".into()));
        }
        Ok(())
    }
}

pub fn hamming_weight(v: u8) -> u32 {
    v.count_ones()
}

/// Samples emitted by one operation.
pub fn emit_op(operand: u8, m: &LeakageModel, rng: &mut Rng) -> Vec<f32> {
    let mut out = Vec::with_capacity(m.samples_per_op);
    emit_into(operand, m.a, m, rng, &mut out);
    out
}

fn emit_into(operand: u8, a: f64, m: &LeakageModel, rng: &mut Rng, out: &mut Vec<f32>) {
    let mean = match (m.zero_skip, operand) {
        (ZeroSkip::Time, 0) => return,
        (ZeroSkip::Amplitude, 0) => 0.0,
        _ => m.b + a * hamming_weight(operand) as f64,
    };
    for _ in 0..m.samples_per_op {
        out.push((mean + noise(m.sigma, rng)) as f32);
    }
}

fn noise(sigma: f64, rng: &mut Rng) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        sigma * rng.sample::<f64, _>(StandardNormal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Conv,
    Fc,
}

/// One layer of the simulated victim.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: OpKind,
    pub ops: usize,
    /// Multiplier on the model's `a` for this layer's operations.
    #[serde(default = "one")]
    pub leak_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl LayerSpec {
    pub fn new(kind: OpKind, ops: usize) -> Self {
        Self {
            kind,
            ops,
            leak_scale: 1.0,
        }
    }

    pub fn with_leak_scale(mut self, leak_scale: f64) -> Self {
        self.leak_scale = leak_scale;
        self
    }
}

/// The simulated victim network: its operation schedule and the class
/// templates its inputs are drawn around.
#[derive(Debug, Clone, PartialEq)]
pub struct VictimSpec {
    pub layers: Vec<LayerSpec>,
    pub input_dim: usize,
    pub n_classes: usize,
    pub templates: Vec<Vec<f64>>,
    pub input_noise: f64,
    /// Trace length for time-mode padding; defaults to the full schedule.
    pub pad_to: Option<usize>,
}

pub fn default_layers() -> Vec<LayerSpec> {
    vec![
        LayerSpec::new(OpKind::Conv, 256),
        LayerSpec::new(OpKind::Conv, 128),
        LayerSpec::new(OpKind::Fc, 64),
    ]
}

impl VictimSpec {
    pub fn new(
        layers: Vec<LayerSpec>,
        input_dim: usize,
        n_classes: usize,
        input_noise: f64,
        template_seed: u64,
    ) -> Result<Self, SimError> {
        if layers.is_empty() || layers.iter().any(|l| l.ops == 0) {
            return Err(SimError::InvalidParameter("every layer needs at least one op".into()));
        }
        if layers.iter().any(|l| !l.leak_scale.is_finite()) {
            return Err(SimError::InvalidParameter("leak_scale must be finite".into()));
        }
        if input_dim == 0 || n_classes == 0 {
            return Err(SimError::InvalidParameter(
                "input_dim and n_classes must be positive".into(),
            ));
        }
        if n_classes > Label::MAX as usize + 1 {
            return Err(SimError::InvalidParameter(format!(
                "{n_classes} classes exceed label width"
            )));
        }
        if !(input_noise >= 0.0 && input_noise.is_finite()) {
            return Err(SimError::InvalidParameter(format!("input_noise = {input_noise}")));
        }
        let templates = draw_templates(n_classes, input_dim, template_seed)?;
        Ok(Self {
            layers,
            input_dim,
            n_classes,
            templates,
            input_noise,
            pad_to: None,
        })
    }

    /// Ten classes, 64-element inputs, the default three-layer schedule.
    pub fn default_victim(template_seed: u64) -> Self {
        Self::new(default_layers(), 64, 10, 0.05, template_seed).expect("default victim is valid")
    }

    pub fn total_ops(&self) -> usize {
        self.layers.iter().map(|l| l.ops).sum()
    }

    /// Trace length when no operation is skipped.
    pub fn full_len(&self, m: &LeakageModel) -> usize {
        self.total_ops() * m.samples_per_op
    }

    /// Sample range covered by `layer` when no operation is skipped in time.
    pub fn layer_samples(&self, layer: usize, m: &LeakageModel) -> Range<usize> {
        let start: usize = self.layers[..layer].iter().map(|l| l.ops).sum();
        let end = start + self.layers[layer].ops;
        start * m.samples_per_op..end * m.samples_per_op
    }

    /// Input element read by operation `op` of layer `layer`.
    pub fn operand_index(&self, layer: usize, op: usize) -> usize {
        (rng::mix64(((layer as u64) << 32) | op as u64) % self.input_dim as u64) as usize
    }

    /// Operand sequence of one inference, in schedule order.
    pub fn operands(&self, input: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_ops());
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend((0..layer.ops).map(|j| input[self.operand_index(l, j)]));
        }
        out
    }

    /// A noisy quantized input around the template of `class`.
    pub fn draw_input(&self, class: usize, rng: &mut Rng) -> Vec<u8> {
        self.templates[class]
            .iter()
            .map(|&mu| quantize(mu + noise(self.input_noise, rng)))
            .collect()
    }
}

/// Maps `[0, 1]` to `0..=255`, clamping out-of-range values.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Templates look like sparse images: each element is 0 with probability
/// one half, otherwise uniform in [0.5, 1]. Candidates closer than
/// `0.5 * sqrt(d)` to an accepted template are redrawn.
fn draw_templates(n_classes: usize, d: usize, seed: u64) -> Result<Vec<Vec<f64>>, SimError> {
    const MAX_ATTEMPTS: usize = 10_000;
    let min_distance = 0.5 * (d as f64).sqrt();
    let mut rng = rng::stream(seed, 0x7e3d);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    let mut attempts = 0;
    while out.len() < n_classes {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(SimError::TemplateSeparation {
                n_classes,
                min_distance,
                attempts: MAX_ATTEMPTS,
            });
        }
        let candidate: Vec<f64> = (0..d)
            .map(|_| {
                if rng.random_bool(0.5) {
                    0.0
                } else {
                    rng.random_range(0.5..=1.0)
                }
            })
            .collect();
        if out.iter().all(|t| l2(t, &candidate) >= min_distance) {
            out.push(candidate);
        }
    }
    Ok(out)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Emission of one inference. Returns the samples and the number of
/// samples actually emitted before time-mode padding.
pub fn simulate_samples(
    input: &[u8],
    spec: &VictimSpec,
    m: &LeakageModel,
    rng: &mut Rng,
) -> Result<(Vec<f32>, usize), SimError> {
    if input.len() != spec.input_dim {
        return Err(SimError::InputLength {
            got: input.len(),
            expected: spec.input_dim,
        });
    }
    let full = spec.full_len(m);
    let target = spec.pad_to.unwrap_or(full);
    let mut out = Vec::with_capacity(target.max(full));
    for (l, layer) in spec.layers.iter().enumerate() {
        let a = m.a * layer.leak_scale;
        for j in 0..layer.ops {
            emit_into(input[spec.operand_index(l, j)], a, m, rng, &mut out);
        }
    }
    let active = out.len();
    if m.zero_skip == ZeroSkip::Time || spec.pad_to.is_some() {
        if active > target {
            return Err(SimError::Overflow {
                emitted: active,
                fixed_len: target,
            });
        }
        while out.len() < target {
            out.push(noise(m.sigma, rng) as f32);
        }
    }
    Ok((out, active))
}

/// One simulated inference on `input`, labelled 0. In time mode the
/// emitted length is recorded under the `active_len` meta key.
pub fn simulate_inference(input: &[u8], spec: &VictimSpec, m: &LeakageModel, seed: u64) -> Result<Trace, SimError> {
    m.check()?;
    let mut rng = rng::stream(seed, 0);
    let (samples, active) = simulate_samples(input, spec, m, &mut rng)?;
    let mut t = Trace::new(samples, 0);
    if m.zero_skip == ZeroSkip::Time {
        t = t.with_meta("active_len", active);
    }
    Ok(t)
}

/// Which attribute the trace labels carry.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum LabelMode {
    /// The class the input was drawn from.
    #[default]
    InputAttribute,
    /// The victim's output label: the input class, replaced by a uniformly
    /// drawn other class with probability `flip_prob`.
    OutputAttribute { flip_prob: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DatasetOptions {
    pub session_id: u32,
    pub labels: LabelMode,
}

/// `n_per_class` traces of every class, interleaved so that trace `k`
/// has input class `k % C`. Trace `k` uses random stream `(seed, k)`.
pub fn gen_dataset(spec: &VictimSpec, m: &LeakageModel, n_per_class: usize, seed: u64) -> Result<TraceSet, SimError> {
    gen_dataset_with(spec, m, n_per_class, seed, &DatasetOptions::default())
}

pub fn gen_dataset_with(
    spec: &VictimSpec,
    m: &LeakageModel,
    n_per_class: usize,
    seed: u64,
    opts: &DatasetOptions,
) -> Result<TraceSet, SimError> {
    m.check()?;
    if n_per_class == 0 {
        return Err(SimError::InvalidParameter("n_per_class = 0".into()));
    }
    let n_classes = spec.n_classes;
    if let LabelMode::OutputAttribute { flip_prob } = opts.labels {
        if !(0.0..=1.0).contains(&flip_prob) {
            return Err(SimError::InvalidParameter(format!("flip_prob = {flip_prob}")));
        }
    }
    let flip_seed = rng::derive(seed, 0xf11b);
    let traces = (0..n_per_class * n_classes)
        .into_par_iter()
        .map(|k| {
            let class = k % n_classes;
            let mut rng = rng::stream(seed, k as u64);
            let input = spec.draw_input(class, &mut rng);
            let (samples, active) = simulate_samples(&input, spec, m, &mut rng)?;
            let label = match opts.labels {
                LabelMode::InputAttribute => class,
                LabelMode::OutputAttribute { flip_prob } => {
                    let mut flip = rng::stream(flip_seed, k as u64);
                    if n_classes > 1 && flip.random_bool(flip_prob) {
                        (class + flip.random_range(1..n_classes)) % n_classes
                    } else {
                        class
                    }
                }
            };
            let mut t = Trace::new(samples, label as Label).with_session(opts.session_id);
            if m.zero_skip == ZeroSkip::Time {
                t = t.with_meta("active_len", active);
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    let mode = match opts.labels {
        LabelMode::InputAttribute => "input_attribute",
        LabelMode::OutputAttribute { .. } => "output_attribute",
    };
    Ok(TraceSet::new(traces, n_classes)
        .with_generator(format!("scaar leaksim {}", env!("CARGO_PKG_VERSION")))
        .with_meta("label_mode", mode)
        .with_meta("seed", seed))
}

/// `n` traces whose inputs come from `make_input(k, rng)`; all labelled
/// `label`. Used for fixed-vs-random style comparisons.
pub fn gen_with_inputs<F>(
    spec: &VictimSpec,
    m: &LeakageModel,
    n: usize,
    label: Label,
    seed: u64,
    make_input: F,
) -> Result<Vec<Trace>, SimError>
where
    F: Fn(usize, &mut Rng) -> Vec<u8> + Sync,
{
    m.check()?;
    (0..n)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng::stream(seed, k as u64);
            let input = make_input(k, &mut rng);
            let (samples, active) = simulate_samples(&input, spec, m, &mut rng)?;
            let mut t = Trace::new(samples, label);
            if m.zero_skip == ZeroSkip::Time {
                t = t.with_meta("active_len", active);
            }
            Ok(t)
        })
        .collect()
}

/// Uniformly random bytes.
pub fn random_input(d: usize, rng: &mut Rng) -> Vec<u8> {
    (0..d).map(|_| rng.random()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless() -> LeakageModel {
        LeakageModel {
            sigma: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn hamming_weights() {
        assert_eq!(hamming_weight(0), 0);
        assert_eq!(hamming_weight(255), 8);
        assert_eq!(hamming_weight(0b0000_1011), 3);
    }

    #[test]
    fn emission_law() {
        let mut rng = rng::stream(0, 0);
        assert_eq!(emit_op(255, &noiseless(), &mut rng), vec![8.5; 4]);
        assert_eq!(emit_op(0, &noiseless(), &mut rng), vec![0.0; 4]);
        let time = LeakageModel {
            zero_skip: ZeroSkip::Time,
            ..noiseless()
        };
        assert!(emit_op(0, &time, &mut rng).is_empty());
        let off = LeakageModel {
            zero_skip: ZeroSkip::Off,
            ..noiseless()
        };
        assert_eq!(emit_op(0, &off, &mut rng), vec![0.5; 4]);
    }

    #[test]
    fn noise_variance_matches_sigma() {
        let m = LeakageModel {
            sigma: 2.0,
            samples_per_op: 1,
            ..Default::default()
        };
        let mut rng = rng::stream(5, 0);
        let xs: Vec<f64> = (0..10_000).map(|_| emit_op(3, &m, &mut rng)[0] as f64).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!((var / 4.0 - 1.0).abs() < 0.05, "variance {var}");
        assert!((mean - 2.5).abs() < 0.1);
    }

    #[test]
    fn constant_trace_without_leakage() {
        let spec = VictimSpec::default_victim(0);
        let m = LeakageModel {
            a: 0.0,
            sigma: 0.0,
            zero_skip: ZeroSkip::Off,
            ..Default::default()
        };
        let input: Vec<u8> = (0..64).map(|i| i as u8 * 3).collect();
        let t = simulate_inference(&input, &spec, &m, 1).unwrap();
        assert_eq!(t.len(), 1792);
        assert!(t.samples.iter().all(|&s| s == 0.5));
    }

    #[test]
    fn inference_is_deterministic() {
        let spec = VictimSpec::default_victim(0);
        let m = LeakageModel::default();
        let input: Vec<u8> = (0..64).map(|i| i as u8).collect();
        let a = simulate_inference(&input, &spec, &m, 9).unwrap();
        let b = simulate_inference(&input, &spec, &m, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, simulate_inference(&input, &spec, &m, 10).unwrap());
    }

    #[test]
    fn zero_input_is_shorter_in_time_mode() {
        let spec = VictimSpec::default_victim(0);
        let m = LeakageModel {
            zero_skip: ZeroSkip::Time,
            ..Default::default()
        };
        let zeros = simulate_inference(&[0; 64], &spec, &m, 1).unwrap();
        let mut rng = rng::stream(3, 0);
        let random = simulate_inference(&random_input(64, &mut rng), &spec, &m, 1).unwrap();
        let active = |t: &Trace| t.meta["active_len"].parse::<usize>().unwrap();
        assert_eq!(zeros.len(), random.len());
        assert!(active(&zeros) < active(&random));
        assert_eq!(active(&zeros), 0);
    }

    #[test]
    fn padding_overflow_is_reported() {
        let mut spec = VictimSpec::default_victim(0);
        spec.pad_to = Some(100);
        let m = LeakageModel::default();
        let err = simulate_inference(&[7; 64], &spec, &m, 0).unwrap_err();
        assert_eq!(
            err,
            SimError::Overflow {
                emitted: 1792,
                fixed_len: 100
            }
        );
    }

    #[test]
    fn input_length_is_checked() {
        let spec = VictimSpec::default_victim(0);
        assert!(matches!(
            simulate_inference(&[1; 3], &spec, &LeakageModel::default(), 0),
            Err(SimError::InputLength { got: 3, expected: 64 })
        ));
    }

    #[test]
    fn templates_are_separated() {
        let spec = VictimSpec::default_victim(11);
        let min = 0.5 * 8.0;
        for i in 0..10 {
            for j in 0..i {
                assert!(l2(&spec.templates[i], &spec.templates[j]) >= min);
            }
        }
        assert!(spec.templates.iter().flatten().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn dataset_shape_and_balance() {
        let spec = VictimSpec::default_victim(0);
        let set = gen_dataset(&spec, &LeakageModel::default(), 3, 4).unwrap();
        assert_eq!(set.len(), 30);
        assert_eq!(set.class_counts(), vec![3; 10]);
        assert_eq!(set.fixed_len(), Some(1792));
        assert!(set.is_valid());
    }

    #[test]
    fn noiseless_classes_are_identical() {
        let mut spec = VictimSpec::default_victim(0);
        spec.input_noise = 0.0;
        let set = gen_dataset(&spec, &noiseless(), 3, 4).unwrap();
        for c in 0..10 {
            let members: Vec<&Trace> = set.traces().iter().filter(|t| t.label == c).collect();
            assert!(members.windows(2).all(|w| w[0].samples == w[1].samples));
        }
    }

    #[test]
    fn seeds_change_noise_not_labels() {
        let spec = VictimSpec::default_victim(0);
        let a = gen_dataset(&spec, &LeakageModel::default(), 2, 1).unwrap();
        let b = gen_dataset(&spec, &LeakageModel::default(), 2, 2).unwrap();
        assert_eq!(a.labels(), b.labels());
        assert_ne!(a.traces()[0].samples, b.traces()[0].samples);
    }

    #[test]
    fn output_labels_flip_at_the_configured_rate() {
        let spec = VictimSpec::default_victim(0);
        let m = LeakageModel {
            samples_per_op: 1,
            ..Default::default()
        };
        let opts = DatasetOptions {
            labels: LabelMode::OutputAttribute { flip_prob: 0.08 },
            ..Default::default()
        };
        let set = gen_dataset_with(&spec, &m, 500, 3, &opts).unwrap();
        let flipped = set
            .traces()
            .iter()
            .enumerate()
            .filter(|(k, t)| t.label as usize != k % 10)
            .count();
        // 5000 Bernoulli(0.08) draws: mean 400, sd ~19
        assert!((320..480).contains(&flipped), "{flipped}");
        assert_eq!(set.meta()["label_mode"], "output_attribute");
    }

    #[test]
    fn layer_ranges_tile_the_trace() {
        let spec = VictimSpec::default_victim(0);
        let m = LeakageModel::default();
        assert_eq!(spec.layer_samples(0, &m), 0..1024);
        assert_eq!(spec.layer_samples(1, &m), 1024..1536);
        assert_eq!(spec.layer_samples(2, &m), 1536..1792);
    }
}
