//! Trace conditioning: standardization, shifting, alignment and filtering.

use std::ops::Range;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::trace::{Trace, TraceSet};

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("trace has zero variance")]
    ZeroVariance,
    #[error("trace too short: {len} samples, need {min}")]
    TooShort { len: usize, min: usize },
    #[error("offset {offset} out of range for length {len}")]
    OffsetOutOfRange { offset: i64, len: usize },
    #[error("lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("max lag {max_lag} must be below trace length {len}")]
    LagTooLarge { max_lag: usize, len: usize },
    #[error("{0} must be at least 1")]
    ZeroParameter(&'static str),
    #[error("set is not fixed-length")]
    VariableLength,
    #[error("shift ratio {0} outside [0, 1)")]
    BadRatio(f64),
}

/// Random misalignment: every trace is shifted by an independent offset
/// uniform in `[-floor(ratio * L), floor(ratio * L)]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftConfig {
    pub ratio: f64,
    pub seed: u64,
    pub pad_value: f32,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            ratio: 0.0,
            seed: 0,
            pad_value: 0.0,
        }
    }
}

impl ShiftConfig {
    pub fn new(ratio: f64, seed: u64) -> Self {
        Self {
            ratio,
            seed,
            ..Default::default()
        }
    }

    pub fn max_offset(&self, len: usize) -> usize {
        (self.ratio * len as f64).floor() as usize
    }

    pub fn check(&self) -> Result<(), PreprocessError> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(PreprocessError::BadRatio(self.ratio));
        }
        Ok(())
    }
}

/// Zero mean, unit population standard deviation.
pub fn standardize_samples(x: &[f32]) -> Result<Vec<f32>, PreprocessError> {
    if x.len() < 2 {
        return Err(PreprocessError::TooShort { len: x.len(), min: 2 });
    }
    let (mean, std) = mean_std(x);
    if std == 0.0 || !std.is_finite() {
        return Err(PreprocessError::ZeroVariance);
    }
    Ok(x.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect())
}

pub fn standardize(t: &Trace) -> Result<Trace, PreprocessError> {
    Ok(t.with_samples(standardize_samples(&t.samples)?))
}

fn mean_std(x: &[f32]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Moves content by `offset` samples (positive = later in time); vacated
/// positions get `pad_value` and content pushed past either end is lost.
pub fn shift_samples(x: &[f32], offset: i64, pad_value: f32) -> Result<Vec<f32>, PreprocessError> {
    shift_slice(x, offset, pad_value)
}

/// [`shift_samples`] for any element type.
pub fn shift_slice<T: Copy>(x: &[T], offset: i64, pad_value: T) -> Result<Vec<T>, PreprocessError> {
    let len = x.len();
    if offset.unsigned_abs() as usize >= len {
        return Err(PreprocessError::OffsetOutOfRange { offset, len });
    }
    let mut out = vec![pad_value; len];
    let k = offset.unsigned_abs() as usize;
    if offset >= 0 {
        out[k..].copy_from_slice(&x[..len - k]);
    } else {
        out[..len - k].copy_from_slice(&x[k..]);
    }
    Ok(out)
}

pub fn shift(t: &Trace, offset: i64, pad_value: f32) -> Result<Trace, PreprocessError> {
    Ok(t.with_samples(shift_samples(&t.samples, offset, pad_value)?))
}

/// Offsets `random_shift` applies to a set of `n` traces of length `len`.
pub fn shift_offsets(n: usize, len: usize, cfg: &ShiftConfig) -> Vec<i64> {
    let max = cfg.max_offset(len) as i64;
    (0..n)
        .map(|i| {
            if max == 0 {
                0
            } else {
                rng::stream(cfg.seed, i as u64).random_range(-max..=max)
            }
        })
        .collect()
}

pub fn random_shift(set: &TraceSet, cfg: &ShiftConfig) -> Result<TraceSet, PreprocessError> {
    cfg.check()?;
    let len = set.fixed_len().ok_or(PreprocessError::VariableLength)?;
    let offsets = shift_offsets(set.len(), len, cfg);
    let traces = set
        .traces()
        .par_iter()
        .zip(offsets)
        .map(|(t, o)| shift(t, o, cfg.pad_value))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(set.derive(traces))
}

/// Finds the lag in `[-max_lag, max_lag]` that maximizes the normalized
/// cross-correlation of `t` against `reference` (`t[i + lag]` is compared
/// with `reference[i]` over their overlap), then undoes it.
///
/// Ties go to the smaller `|lag|`, then to the negative lag.
pub fn align_xcorr(reference: &Trace, t: &Trace, max_lag: usize) -> Result<(Trace, i64), PreprocessError> {
    let lag = best_lag(&reference.samples, &t.samples, max_lag)?;
    Ok((shift(t, -lag, 0.0)?, lag))
}

pub fn best_lag(reference: &[f32], x: &[f32], max_lag: usize) -> Result<i64, PreprocessError> {
    let len = reference.len();
    if x.len() != len {
        return Err(PreprocessError::LengthMismatch(len, x.len()));
    }
    if max_lag >= len {
        return Err(PreprocessError::LagTooLarge { max_lag, len });
    }
    if mean_std(reference).1 == 0.0 || mean_std(x).1 == 0.0 {
        return Err(PreprocessError::ZeroVariance);
    }
    // Candidates ordered so that the first maximum wins the tie-break.
    let mut best: Option<(f64, i64)> = None;
    for mag in 0..=max_lag as i64 {
        for lag in if mag == 0 { vec![0] } else { vec![-mag, mag] } {
            let Some(r) = overlap_corr(reference, x, lag) else {
                continue;
            };
            if best.is_none_or(|(b, _)| r > b) {
                best = Some((r, lag));
            }
        }
    }
    best.map(|(_, lag)| lag).ok_or(PreprocessError::ZeroVariance)
}

/// Pearson correlation of `reference[i]` and `x[i + lag]` over the overlap.
fn overlap_corr(reference: &[f32], x: &[f32], lag: i64) -> Option<f64> {
    let len = reference.len() as i64;
    let start = (-lag).max(0);
    let end = (len - lag).min(len);
    let n = (end - start) as f64;
    if n < 2.0 {
        return None;
    }
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in start..end {
        let a = reference[i as usize] as f64;
        let b = x[(i + lag) as usize] as f64;
        sa += a;
        sb += b;
        saa += a * a;
        sbb += b * b;
        sab += a * b;
    }
    let cov = sab - sa * sb / n;
    let va = saa - sa * sa / n;
    let vb = sbb - sb * sb / n;
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Causal moving average; the first `w - 1` windows are truncated.
pub fn moving_average_samples(x: &[f32], w: usize) -> Result<Vec<f32>, PreprocessError> {
    if w == 0 {
        return Err(PreprocessError::ZeroParameter("window"));
    }
    let mut out = Vec::with_capacity(x.len());
    let mut acc = 0.0f64;
    for i in 0..x.len() {
        acc += x[i] as f64;
        if i >= w {
            acc -= x[i - w] as f64;
        }
        out.push((acc / (i + 1).min(w) as f64) as f32);
    }
    Ok(out)
}

pub fn moving_average(t: &Trace, w: usize) -> Result<Trace, PreprocessError> {
    Ok(t.with_samples(moving_average_samples(&t.samples, w)?))
}

/// Keeps samples `0, k, 2k, ...`.
pub fn decimate_samples(x: &[f32], k: usize) -> Result<Vec<f32>, PreprocessError> {
    if k == 0 {
        return Err(PreprocessError::ZeroParameter("decimation factor"));
    }
    Ok(x.iter().step_by(k).copied().collect())
}

pub fn decimate(t: &Trace, k: usize) -> Result<Trace, PreprocessError> {
    Ok(t.with_samples(decimate_samples(&t.samples, k)?))
}

/// Conditioning applied to every trace before it reaches the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Conditioning {
    /// Moving-average window; 1 disables smoothing.
    pub smooth_window: usize,
    /// Decimation factor; 1 keeps every sample.
    pub decimate: usize,
    pub standardize: bool,
}

impl Default for Conditioning {
    fn default() -> Self {
        Self {
            smooth_window: 1,
            decimate: 1,
            standardize: true,
        }
    }
}

impl Conditioning {
    pub fn apply_samples(&self, x: &[f32]) -> Result<Vec<f32>, PreprocessError> {
        let mut v = if self.smooth_window > 1 {
            moving_average_samples(x, self.smooth_window)?
        } else {
            x.to_vec()
        };
        if self.decimate > 1 {
            v = decimate_samples(&v, self.decimate)?;
        }
        if self.standardize {
            v = standardize_samples(&v)?;
        }
        Ok(v)
    }

    pub fn apply(&self, set: &TraceSet) -> Result<TraceSet, PreprocessError> {
        let traces = set
            .traces()
            .par_iter()
            .map(|t| Ok(t.with_samples(self.apply_samples(&t.samples)?)))
            .collect::<Result<Vec<_>, PreprocessError>>()?;
        Ok(set.derive(traces))
    }

    /// Output length for an input of `len` samples.
    pub fn output_len(&self, len: usize) -> usize {
        len.div_ceil(self.decimate.max(1))
    }

    /// Conditioned indices whose source sample lies in `raw`. Decimation
    /// keeps raw samples `0, k, 2k, ...`.
    pub fn to_output_range(&self, raw: Range<usize>) -> Range<usize> {
        let k = self.decimate.max(1);
        raw.start.div_ceil(k)..raw.end.div_ceil(k)
    }

    /// Raw samples represented by the conditioned indices `out`.
    pub fn to_raw_range(&self, out: Range<usize>) -> Range<usize> {
        let k = self.decimate.max(1);
        out.start * k..out.end * k
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn standardize_three_points() {
        let out = standardize_samples(&[1.0, 2.0, 3.0]).unwrap();
        let expected = [-1.224_744_9, 0.0, 1.224_744_9];
        for (o, e) in out.iter().zip(expected) {
            assert!((o - e).abs() < 1e-5);
        }
    }

    #[test]
    fn standardize_rejects_constant_and_short() {
        assert_eq!(standardize_samples(&[5.0; 3]), Err(PreprocessError::ZeroVariance));
        assert!(matches!(
            standardize_samples(&[5.0]),
            Err(PreprocessError::TooShort { .. })
        ));
    }

    #[test]
    fn shift_examples() {
        let x = [1.0, 2.0, 3.0];
        assert_eq!(shift_samples(&x, 0, 0.0).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(shift_samples(&x, 1, 0.0).unwrap(), vec![0.0, 1.0, 2.0]);
        assert_eq!(shift_samples(&x, -1, 0.0).unwrap(), vec![2.0, 3.0, 0.0]);
        assert_eq!(shift_samples(&x, 2, 9.0).unwrap(), vec![9.0, 9.0, 1.0]);
        assert!(shift_samples(&x, 3, 0.0).is_err());
        assert!(shift_samples(&x, -3, 0.0).is_err());
    }

    #[test]
    fn moving_average_and_decimation() {
        assert_eq!(
            moving_average_samples(&[1.0, 2.0, 3.0, 4.0], 2).unwrap(),
            vec![1.0, 1.5, 2.5, 3.5]
        );
        assert_eq!(moving_average_samples(&[1.0, 7.0], 1).unwrap(), vec![1.0, 7.0]);
        let x: Vec<f32> = (0..10).map(|i| i as f32).collect();
        assert_eq!(decimate_samples(&x, 2).unwrap(), vec![0.0, 2.0, 4.0, 6.0, 8.0]);
        assert!(moving_average_samples(&x, 0).is_err());
        assert!(decimate_samples(&x, 0).is_err());
    }

    #[test]
    fn random_shift_offsets() {
        let cfg = ShiftConfig::new(0.1, 7);
        assert_eq!(cfg.max_offset(1792), 179);
        let offs = shift_offsets(5000, 1792, &cfg);
        assert!(offs.iter().all(|o| o.abs() <= 179));
        assert_eq!(*offs.iter().max().unwrap(), 179);
        assert_eq!(*offs.iter().min().unwrap(), -179);
        assert_eq!(offs, shift_offsets(5000, 1792, &cfg));
        assert!(shift_offsets(10, 1792, &ShiftConfig::new(0.0, 7))
            .iter()
            .all(|&o| o == 0));
    }

    #[test]
    fn random_shift_identity_at_zero_ratio() {
        let set = TraceSet::new(
            (0..4).map(|i| Trace::new(vec![i as f32, 1.0, 2.0, 3.0], 0)).collect(),
            1,
        );
        assert_eq!(random_shift(&set, &ShiftConfig::new(0.0, 1)).unwrap(), set);
        assert!(random_shift(&set, &ShiftConfig::new(1.0, 1)).is_err());
    }

    #[test]
    fn alignment_recovers_noiseless_shift() {
        let reference: Vec<f32> = (0..200).map(|i| ((i * 37) % 11) as f32).collect();
        let r = Trace::new(reference.clone(), 0);
        let t = shift(&r, 5, 0.0).unwrap();
        let (aligned, lag) = align_xcorr(&r, &t, 20).unwrap();
        assert_eq!(lag, 5);
        assert_eq!(&aligned.samples[..195], &reference[..195]);
        assert_eq!(align_xcorr(&r, &r, 20).unwrap().1, 0);
    }

    #[test]
    fn alignment_errors() {
        let r = Trace::new(vec![1.0, 2.0, 3.0], 0);
        assert!(matches!(
            align_xcorr(&r, &Trace::new(vec![1.0; 3], 0), 1),
            Err(PreprocessError::ZeroVariance)
        ));
        assert!(matches!(
            align_xcorr(&r, &r, 3),
            Err(PreprocessError::LagTooLarge { .. })
        ));
        assert!(matches!(
            align_xcorr(&r, &Trace::new(vec![1.0, 2.0], 0), 1),
            Err(PreprocessError::LengthMismatch(3, 2))
        ));
    }

    #[test]
    fn alignment_tie_prefers_negative() {
        // Period-4 signal against its negation: lags -2 and +2 both match
        // perfectly and lag 0 is anti-correlated.
        let x: Vec<f32> = (0..40).map(|i| [1.0, 0.0, -1.0, 0.0][i % 4]).collect();
        let y: Vec<f32> = x.iter().map(|v| -v).collect();
        assert_eq!(best_lag(&x, &y, 2).unwrap(), -2);
    }

    #[test]
    fn ranges_map_through_decimation() {
        let c = Conditioning {
            smooth_window: 4,
            decimate: 4,
            standardize: true,
        };
        assert_eq!(c.output_len(1792), 448);
        assert_eq!(c.to_output_range(0..1024), 0..256);
        assert_eq!(c.to_output_range(1..9), 1..3);
        assert_eq!(c.to_raw_range(0..256), 0..1024);
    }

    proptest! {
        #[test]
        fn shift_round_trip_outside_padding(
            x in prop::collection::vec(-10.0f32..10.0, 2..64),
            k in 0usize..63,
        ) {
            let k = k % x.len();
            let back = shift_samples(&shift_samples(&x, k as i64, 0.0).unwrap(), -(k as i64), 0.0).unwrap();
            prop_assert_eq!(&back[..x.len() - k], &x[..x.len() - k]);
            prop_assert_eq!(back.len(), x.len());
        }

        #[test]
        fn alignment_recovers_every_offset(
            x in prop::collection::vec(-10.0f32..10.0, 40..80),
            offset in -10i64..=10,
        ) {
            prop_assume!(mean_std(&x).1 > 0.5);
            let y = shift_samples(&x, offset, 0.0).unwrap();
            prop_assume!(mean_std(&y).1 > 0.0);
            prop_assert_eq!(best_lag(&x, &y, 10).unwrap(), offset);
        }

        #[test]
        fn standardize_is_idempotent(x in prop::collection::vec(-100.0f32..100.0, 2..200)) {
            prop_assume!(mean_std(&x).1 > 1e-3);
            let once = standardize_samples(&x).unwrap();
            let (m, s) = mean_std(&once);
            prop_assert!(m.abs() < 1e-5 && (s - 1.0).abs() < 1e-5);
            let twice = standardize_samples(&once).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-5);
            }
        }
    }
}
