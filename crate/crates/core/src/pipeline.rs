//! Experiment orchestration: profiling and attack runs, trace-count and
//! shift-ratio sweeps, and cross-session evaluation.
//!
//! Every random choice in a run is drawn from a stream derived from the
//! top-level `seed`; the `seed` fields of the `split` and `train`
//! sections only offset those streams.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{Binomial, DiscreteCDF};
use thiserror::Error;

use crate::leaksim::{
    gen_dataset_with, DatasetOptions, LabelMode, LeakageModel, LlmConfig, SimError, VictimConfig, VictimSpec, ZeroSkip,
};
use crate::nnet::{train, Model, ModelSpec, NnetError, TrainConfig, TrainReport};
use crate::preprocess::{align_xcorr, random_shift, Conditioning, PreprocessError, ShiftConfig};
use crate::rng;
use crate::trace::{split, stratified_subset, Label, SplitConfig, SplitError, Trace, TraceSet};

const DATA: u64 = 0xda7a;
const SPLIT: u64 = 0x5917;
const MODEL: u64 = 0x30de1;
const TRAIN: u64 = 0x7ea1;
const AUGMENT: u64 = 0xa097;
const SUBSET: u64 = 0x50b5;
const SHIFT: u64 = 0x5f17;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Nnet(#[from] NnetError),
}

/// Which attribute the labels describe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeMode {
    #[default]
    InputAttribute,
    OutputAttribute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    NTraces(Vec<usize>),
    ShiftRatio(Vec<f64>),
}

/// Trace preprocessing shared by the profiling and attack phases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    #[serde(flatten)]
    pub conditioning: Conditioning,
    /// Align every trace to its set's mean trace within this lag, after
    /// conditioning. Off by default.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub align_max_lag: Option<usize>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            conditioning: Conditioning {
                smooth_window: 4,
                decimate: 4,
                standardize: true,
            },
            align_max_lag: None,
        }
    }
}

impl PreprocessConfig {
    pub fn apply(&self, set: &TraceSet) -> Result<TraceSet, PreprocessError> {
        let set = self.conditioning.apply(set)?;
        match self.align_max_lag {
            Some(lag) if !set.is_empty() => align_to_mean(&set, lag),
            _ => Ok(set),
        }
    }
}

fn align_to_mean(set: &TraceSet, max_lag: usize) -> Result<TraceSet, PreprocessError> {
    let len = set.fixed_len().ok_or(PreprocessError::VariableLength)?;
    let mut mean = vec![0.0f64; len];
    for t in set.traces() {
        for (m, &v) in mean.iter_mut().zip(&t.samples) {
            *m += v as f64;
        }
    }
    let reference = Trace::new(mean.iter().map(|m| (m / set.len() as f64) as f32).collect(), 0);
    let traces = set
        .traces()
        .par_iter()
        .map(|t| Ok(align_xcorr(&reference, t, max_lag)?.0.with_session(t.session_id)))
        .collect::<Result<Vec<_>, PreprocessError>>()?;
    let traces = traces
        .into_iter()
        .zip(set.traces())
        .map(|(a, t)| Trace {
            label: t.label,
            meta: t.meta.clone(),
            ..a
        })
        .collect();
    Ok(set.derive(traces))
}

/// One run: simulator, split, preprocessing and training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub leakage: LeakageModel,
    pub victim: VictimConfig,
    pub llm: LlmConfig,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
    pub mode: AttributeMode,
    /// Probability that an output label differs from the input class.
    pub flip_prob: f64,
    pub n_per_class: usize,
    pub seed: u64,
    /// Seeds averaged by [`run_repeated`].
    pub repeats: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Sweep>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            leakage: LeakageModel::default(),
            victim: VictimConfig::default(),
            llm: LlmConfig::default(),
            split: SplitConfig::default(),
            train: TrainConfig::default(),
            preprocess: PreprocessConfig::default(),
            mode: AttributeMode::InputAttribute,
            flip_prob: 0.08,
            n_per_class: 1000,
            seed: 0,
            repeats: 3,
            sweep: None,
        }
    }
}

impl ExperimentConfig {
    pub fn check(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.leakage.check()?;
        self.victim.build()?;
        self.train.check()?;
        if self.n_per_class == 0 {
            return bad("n_per_class must be at least 1".into());
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!("flip_prob {} outside [0, 1]", self.flip_prob));
        }
        match &self.sweep {
            Some(Sweep::NTraces(n)) => {
                if n.is_empty() || n.windows(2).any(|w| w[0] >= w[1]) || n[0] == 0 {
                    return bad("n_traces sweep must be nonempty, positive and strictly increasing".into());
                }
            }
            Some(Sweep::ShiftRatio(r)) => {
                if r.is_empty() || r.windows(2).any(|w| w[0] >= w[1]) {
                    return bad("shift_ratio sweep must be nonempty and strictly increasing".into());
                }
                if let Some(x) = r.iter().find(|x| !(0.0..1.0).contains(*x)) {
                    return bad(format!("shift ratio {x} outside [0, 1)"));
                }
            }
            None => {}
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn victim_spec(&self) -> Result<VictimSpec, PipelineError> {
        Ok(self.victim.build()?)
    }

    pub fn label_mode(&self) -> LabelMode {
        match self.mode {
            AttributeMode::InputAttribute => LabelMode::InputAttribute,
            AttributeMode::OutputAttribute => LabelMode::OutputAttribute {
                flip_prob: self.flip_prob,
            },
        }
    }

    /// The same experiment with class-independent emissions (`a = 0`,
    /// zero-skipping off).
    pub fn zero_leakage(&self) -> Self {
        let mut c = self.clone();
        c.leakage.a = 0.0;
        c.leakage.zero_skip = ZeroSkip::Off;
        c
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    fn split_config(&self) -> SplitConfig {
        SplitConfig {
            seed: rng::derive(rng::derive(self.seed, SPLIT), self.split.seed),
            ..self.split
        }
    }

    fn train_config(&self) -> TrainConfig {
        let mut t = self.train;
        t.seed = rng::derive(rng::derive(self.seed, TRAIN), self.train.seed);
        if let Some(aug) = &mut t.augmentation {
            aug.seed = rng::derive(rng::derive(self.seed, AUGMENT), aug.seed);
        }
        t
    }

    pub fn model_spec(&self, input_len: usize) -> ModelSpec {
        ModelSpec::default_cnn(input_len, self.victim.n_classes, rng::derive(self.seed, MODEL))
    }
}

/// Raw traces of one capture session. Sessions share the class templates
/// and differ only in their noise realization.
pub fn generate(cfg: &ExperimentConfig, session: u64) -> Result<TraceSet, PipelineError> {
    let spec = cfg.victim_spec()?;
    let opts = DatasetOptions {
        session_id: session as u32,
        labels: cfg.label_mode(),
    };
    let seed = rng::derive(rng::derive(cfg.seed, DATA), session);
    Ok(gen_dataset_with(&spec, &cfg.leakage, cfg.n_per_class, seed, &opts)?)
}

/// Splits raw traces into (profiling, attack) with the run's split
/// stream.
pub fn split_raw(cfg: &ExperimentConfig, raw: &TraceSet) -> Result<(TraceSet, TraceSet), PipelineError> {
    Ok(split(raw, &cfg.split_config())?)
}

/// Preprocessed (profiling, attack) sets of one session.
pub fn prepare(cfg: &ExperimentConfig, session: u64) -> Result<(TraceSet, TraceSet), PipelineError> {
    let (p, a) = split_raw(cfg, &generate(cfg, session)?)?;
    Ok((cfg.preprocess.apply(&p)?, cfg.preprocess.apply(&a)?))
}

/// Trains a fresh attack model on preprocessed profiling traces.
pub fn profile(cfg: &ExperimentConfig, profiling: &TraceSet) -> Result<(Model<f32>, TrainReport), PipelineError> {
    let len = profiling.fixed_len().ok_or(NnetError::VariableLength)?;
    let model = Model::new(cfg.model_spec(len))?;
    Ok(train(model, profiling, &cfg.train_config())?)
}

/// Attack-phase input: trace samples with the labels removed.
#[derive(Debug, Clone)]
pub struct AttackInput {
    samples: Vec<Vec<f32>>,
}

impl AttackInput {
    pub fn unlabeled(set: &TraceSet) -> Self {
        Self {
            samples: set.traces().iter().map(|t| t.samples.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Predicted attribute of every attack trace.
pub fn attack(model: &Model<f32>, input: &AttackInput) -> Result<Vec<Label>, PipelineError> {
    Ok(model.predict_samples(&input.samples)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub mode: AttributeMode,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub n_profiling: usize,
    pub n_attack: usize,
    pub seed: u64,
    pub config_digest: String,
}

/// Confusion matrix and accuracy of `pred` against `truth`.
pub fn score(pred: &[Label], truth: &[Label], n_classes: usize) -> (f64, Vec<Vec<usize>>) {
    assert_eq!(pred.len(), truth.len(), "prediction and truth lengths differ");
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[t as usize][p as usize] += 1;
    }
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let acc = if pred.is_empty() {
        0.0
    } else {
        correct as f64 / pred.len() as f64
    };
    (acc, confusion)
}

fn report(
    cfg: &ExperimentConfig,
    model: &Model<f32>,
    n_profiling: usize,
    attack_set: &TraceSet,
) -> Result<AttackReport, PipelineError> {
    let pred = attack(model, &AttackInput::unlabeled(attack_set))?;
    let (accuracy, confusion) = score(&pred, &attack_set.labels(), attack_set.n_classes());
    Ok(AttackReport {
        mode: cfg.mode,
        accuracy,
        confusion,
        n_profiling,
        n_attack: attack_set.len(),
        seed: cfg.seed,
        config_digest: cfg.digest(),
    })
}

/// Everything produced by one profiling and attack run.
#[derive(Debug, Clone)]
pub struct Run {
    pub report: AttackReport,
    pub model: Model<f32>,
    pub training: TrainReport,
    pub profiling: TraceSet,
    pub attack: TraceSet,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Run, PipelineError> {
    cfg.check()?;
    let (profiling, attack_set) = prepare(cfg, 0)?;
    let (model, training) = profile(cfg, &profiling)?;
    let report = report(cfg, &model, profiling.len(), &attack_set)?;
    Ok(Run {
        report,
        model,
        training,
        profiling,
        attack: attack_set,
    })
}

/// Generate, split, train and attack.
pub fn run_attack(cfg: &ExperimentConfig) -> Result<AttackReport, PipelineError> {
    Ok(run_experiment(cfg)?.report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub mean_accuracy: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std_accuracy: f64,
    pub reports: Vec<AttackReport>,
}

/// [`run_attack`] with seeds `seed, seed + 1, ...` (`cfg.repeats` runs).
pub fn run_repeated(cfg: &ExperimentConfig) -> Result<RepeatSummary, PipelineError> {
    cfg.check()?;
    let reports = (0..cfg.repeats as u64)
        .map(|i| run_attack(&cfg.with_seed(cfg.seed.wrapping_add(i))))
        .collect::<Result<Vec<_>, _>>()?;
    let acc: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
    let n = acc.len() as f64;
    let mean = acc.iter().sum::<f64>() / n;
    let std = if acc.len() > 1 {
        (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(RepeatSummary {
        mean_accuracy: mean,
        std_accuracy: std,
        reports,
    })
}

/// One point of a sweep; `value` is a trace count or a shift ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub report: AttackReport,
}

/// One training per profiling-set size, each on a stratified subset of
/// the same profiling pool and scored on the same attack set.
pub fn sweep_traces(cfg: &ExperimentConfig, n_list: &[usize]) -> Result<Vec<SweepPoint>, PipelineError> {
    let cfg = ExperimentConfig {
        sweep: Some(Sweep::NTraces(n_list.to_vec())),
        ..cfg.clone()
    };
    cfg.check()?;
    let (pool, attack_set) = prepare(&cfg, 0)?;
    if let Some(&n) = n_list.iter().find(|&&n| n > pool.len()) {
        return Err(SplitError::NotEnoughTraces {
            requested: n,
            available: pool.len(),
        }
        .into());
    }
    n_list
        .iter()
        .map(|&n| {
            let profiling = stratified_subset(&pool, n, rng::derive(rng::derive(cfg.seed, SUBSET), n as u64))?;
            let (model, _) = profile(&cfg, &profiling)?;
            Ok(SweepPoint {
                value: n as f64,
                report: report(&cfg, &model, n, &attack_set)?,
            })
        })
        .collect()
}

/// Trains once, then scores the attack set randomly shifted by each
/// ratio, with a fresh offset stream per point.
pub fn sweep_shift(cfg: &ExperimentConfig, ratios: &[f64]) -> Result<Vec<SweepPoint>, PipelineError> {
    let cfg = ExperimentConfig {
        sweep: Some(Sweep::ShiftRatio(ratios.to_vec())),
        ..cfg.clone()
    };
    cfg.check()?;
    let (profiling, attack_set) = prepare(&cfg, 0)?;
    let (model, _) = profile(&cfg, &profiling)?;
    ratios
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let shift = ShiftConfig::new(r, rng::derive(rng::derive(cfg.seed, SHIFT), i as u64));
            let shifted = random_shift(&attack_set, &shift)?;
            Ok(SweepPoint {
                value: r,
                report: report(&cfg, &model, profiling.len(), &shifted)?,
            })
        })
        .collect()
}

/// Trains on the profiling split of `sessions[0]` and attacks the attack
/// split of every listed session, the first one included.
pub fn cross_session(cfg: &ExperimentConfig, sessions: &[u64]) -> Result<Vec<AttackReport>, PipelineError> {
    cfg.check()?;
    if sessions.len() < 2 {
        return Err(PipelineError::Config(
            "cross-session needs at least two sessions".into(),
        ));
    }
    let (profiling, home) = prepare(cfg, sessions[0])?;
    let (model, _) = profile(cfg, &profiling)?;
    sessions
        .iter()
        .map(|&s| {
            if s == sessions[0] {
                report(cfg, &model, profiling.len(), &home)
            } else {
                let (_, away) = prepare(cfg, s)?;
                report(cfg, &model, profiling.len(), &away)
            }
        })
        .collect()
}

/// Central `level` band of the accuracy of a classifier guessing right
/// with probability `p` on `n` traces.
pub fn binomial_band(n: usize, p: f64, level: f64) -> (f64, f64) {
    let b = Binomial::new(p, n as u64).expect("valid binomial parameters");
    let tail = (1.0 - level) / 2.0;
    let lo = b.inverse_cdf(tail);
    let hi = b.inverse_cdf(1.0 - tail);
    (lo as f64 / n as f64, hi as f64 / n as f64)
}

/// `axis,accuracy,n_profiling,n_attack` rows.
pub fn sweep_csv(axis: &str, points: &[SweepPoint]) -> String {
    let mut out = format!("{axis},accuracy,n_profiling,n_attack\n");
    for p in points {
        writeln!(
            out,
            "{},{},{},{}",
            p.value, p.report.accuracy, p.report.n_profiling, p.report.n_attack
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::leaksim::{LayerSpec, OpKind};

    /// A few hundred short traces; trains in well under a second.
    fn small() -> ExperimentConfig {
        ExperimentConfig {
            victim: VictimConfig {
                layers: vec![LayerSpec::new(OpKind::Conv, 48), LayerSpec::new(OpKind::Fc, 16)],
                input_dim: 16,
                n_classes: 4,
                ..Default::default()
            },
            leakage: LeakageModel {
                sigma: 0.5,
                ..Default::default()
            },
            train: TrainConfig {
                epochs: 8,
                batch_size: 16,
                learning_rate: 3e-3,
                ..Default::default()
            },
            preprocess: PreprocessConfig {
                conditioning: Conditioning {
                    smooth_window: 2,
                    decimate: 2,
                    standardize: true,
                },
                align_max_lag: None,
            },
            n_per_class: 50,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn confusion_is_consistent_with_accuracy() {
        let (acc, conf) = score(&[0, 1, 1, 2], &[0, 1, 2, 2], 3);
        assert_eq!(acc, 0.75);
        assert_eq!(conf, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 1, 1]]);
    }

    #[test]
    fn small_run_learns_and_is_reproducible() {
        let cfg = small();
        let a = run_attack(&cfg).unwrap();
        assert!(a.accuracy > 0.8, "{}", a.accuracy);
        assert_eq!(a.n_profiling, 180);
        assert_eq!(a.n_attack, 20);
        for (c, row) in a.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), 5, "class {c}");
        }
        assert_eq!(run_attack(&cfg).unwrap(), a);
        assert_eq!(a.config_digest.len(), 64);
    }

    #[test]
    fn output_mode_without_flips_matches_input_mode() {
        let input = run_attack(&small()).unwrap();
        let cfg = ExperimentConfig {
            mode: AttributeMode::OutputAttribute,
            flip_prob: 0.0,
            ..small()
        };
        let output = run_attack(&cfg).unwrap();
        assert_eq!(output.mode, AttributeMode::OutputAttribute);
        assert_eq!(output.accuracy, input.accuracy);
        assert_ne!(output.config_digest, input.config_digest);
    }

    #[test]
    fn shift_sweep_at_zero_matches_baseline() {
        let cfg = small();
        let base = run_attack(&cfg).unwrap();
        let pts = sweep_shift(&cfg, &[0.0, 0.5]).unwrap();
        assert_eq!(pts[0].report.accuracy, base.accuracy);
        assert_eq!(pts[0].report.confusion, base.confusion);
    }

    #[test]
    fn trace_sweep_bounds() {
        let cfg = small();
        let pts = sweep_traces(&cfg, &[4, 180]).unwrap();
        assert_eq!(pts[0].report.n_profiling, 4);
        assert_eq!(pts[1].report.n_attack, 20);
        assert!(matches!(
            sweep_traces(&cfg, &[181]),
            Err(PipelineError::Split(SplitError::NotEnoughTraces { requested: 181, .. }))
        ));
        assert!(matches!(sweep_traces(&cfg, &[10, 10]), Err(PipelineError::Config(_))));
        let csv = sweep_csv("n_traces", &pts);
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn identical_sessions_give_identical_reports() {
        let r = cross_session(&small(), &[0, 0, 1]).unwrap();
        assert_eq!(r[0], r[1]);
        assert!(cross_session(&small(), &[0]).is_err());
    }

    #[test]
    fn binomial_band_brackets_the_mean() {
        let (lo, hi) = binomial_band(1000, 0.1, 0.99);
        assert!(lo < 0.1 && hi > 0.1);
        assert!((0.07..0.08).contains(&lo), "{lo}");
        assert!((0.12..0.13).contains(&hi), "{hi}");
    }

    #[test]
    fn config_round_trips_and_rejects_bad_sweeps() {
        let cfg = ExperimentConfig {
            sweep: Some(Sweep::ShiftRatio(vec![0.0, 0.1])),
            ..Default::default()
        };
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"shift_ratio\""));
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&json).unwrap(), cfg);
        let empty: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(empty, ExperimentConfig::default());
        assert_eq!(empty.preprocess.conditioning.decimate, 4);
        for bad in [
            Sweep::ShiftRatio(vec![0.2, 0.1]),
            Sweep::ShiftRatio(vec![1.0]),
            Sweep::NTraces(vec![]),
        ] {
            let c = ExperimentConfig {
                sweep: Some(bad),
                ..Default::default()
            };
            assert!(matches!(c.check(), Err(PipelineError::Config(_))));
        }
    }

    #[test]
    fn zero_leakage_control_removes_class_signal() {
        let c = small().zero_leakage();
        assert_eq!(c.leakage.a, 0.0);
        assert_eq!(c.leakage.zero_skip, ZeroSkip::Off);
    }
}
