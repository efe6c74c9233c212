//! Leakage assessment: pointwise Welch's t-test between two trace groups
//! (TVLA) and mean-trace comparisons.

use std::fmt::Write as _;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::trace::{Label, Trace, TraceSet};

/// Conventional TVLA threshold.
pub const TVLA_THRESHOLD: f64 = 4.5;

#[derive(Debug, Error, PartialEq)]
pub enum AssessError {
    #[error("group {group} has {n} samples, need at least {min}")]
    TooFewSamples { group: char, n: usize, min: usize },
    #[error("both groups have zero variance; t is undefined")]
    Undefined,
    #[error("trace lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("set is empty")]
    Empty,
    #[error("set is not fixed-length")]
    VariableLength,
    #[error("class {0} has no traces")]
    EmptyClass(Label),
}

/// Welch's t statistic with unbiased variances:
/// `(mean_a - mean_b) / sqrt(var_a / n_a + var_b / n_b)`.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<f64, AssessError> {
    if a.len() < 2 {
        return Err(AssessError::TooFewSamples {
            group: 'A',
            n: a.len(),
            min: 2,
        });
    }
    if b.len() < 2 {
        return Err(AssessError::TooFewSamples {
            group: 'B',
            n: b.len(),
            min: 2,
        });
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    if va == 0.0 && vb == 0.0 {
        return Err(AssessError::Undefined);
    }
    Ok((ma - mb) / (va / a.len() as f64 + vb / b.len() as f64).sqrt())
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Running per-sample mean and variance of one group (Welford).
#[derive(Debug, Clone)]
pub struct Moments {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    pub fn new(len: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    pub fn update(&mut self, x: &[f32]) -> Result<(), AssessError> {
        if x.len() != self.mean.len() {
            return Err(AssessError::LengthMismatch(self.mean.len(), x.len()));
        }
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let v = v as f64;
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased variance per sample index.
    pub fn variance(&self) -> Vec<f64> {
        let d = (self.n as f64 - 1.0).max(1.0);
        self.m2.iter().map(|s| s / d).collect()
    }
}

/// Pointwise t-test result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvlaReport {
    pub t: Vec<f64>,
    pub threshold: f64,
    /// Maximal half-open ranges `[start, end)` where `|t| > threshold`.
    pub windows: Vec<(usize, usize)>,
    pub n_a: usize,
    pub n_b: usize,
    /// Indices where both groups had zero variance; `t` is 0 there.
    pub degenerate: Vec<usize>,
}

impl TvlaReport {
    pub fn max_abs_t(&self) -> f64 {
        self.t.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Index of the largest `|t|` (first one on ties).
    pub fn argmax_abs_t(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.t.iter().enumerate() {
            if v.abs() > self.t[best].abs() {
                best = i;
            }
        }
        best
    }

    /// The window that contains the largest `|t|`, if it crosses the
    /// threshold.
    pub fn peak_window(&self) -> Option<(usize, usize)> {
        let i = self.argmax_abs_t();
        self.windows.iter().copied().find(|&(s, e)| s <= i && i < e)
    }

    /// Number of indices flagged as leaking.
    pub fn leaky_count(&self) -> usize {
        self.windows.iter().map(|(s, e)| e - s).sum()
    }

    /// `index,t` rows for plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,t\n");
        for (i, t) in self.t.iter().enumerate() {
            writeln!(out, "{i},{t}").unwrap();
        }
        out
    }
}

/// Maximal runs of `|t| > threshold`.
pub fn leaky_windows(t: &[f64], threshold: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, v) in t.iter().enumerate() {
        match (v.abs() > threshold, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, t.len()));
    }
    out
}

/// Welch's t at every sample index between two groups of equal-length
/// traces.
pub fn tvla_traces(a: &[&Trace], b: &[&Trace], threshold: f64) -> Result<TvlaReport, AssessError> {
    if a.len() < 2 {
        return Err(AssessError::TooFewSamples {
            group: 'A',
            n: a.len(),
            min: 2,
        });
    }
    if b.len() < 2 {
        return Err(AssessError::TooFewSamples {
            group: 'B',
            n: b.len(),
            min: 2,
        });
    }
    let len = a[0].len();
    let mut ma = Moments::new(len);
    let mut mb = Moments::new(len);
    for t in a {
        ma.update(&t.samples)?;
    }
    for t in b {
        mb.update(&t.samples)?;
    }
    Ok(report_from_moments(&ma, &mb, threshold))
}

pub fn report_from_moments(a: &Moments, b: &Moments, threshold: f64) -> TvlaReport {
    let (va, vb) = (a.variance(), b.variance());
    let (na, nb) = (a.count() as f64, b.count() as f64);
    let mut degenerate = Vec::new();
    let t: Vec<f64> = (0..a.mean.len())
        .map(|i| {
            if va[i] == 0.0 && vb[i] == 0.0 {
                degenerate.push(i);
                0.0
            } else {
                (a.mean[i] - b.mean[i]) / (va[i] / na + vb[i] / nb).sqrt()
            }
        })
        .collect();
    TvlaReport {
        windows: leaky_windows(&t, threshold),
        t,
        threshold,
        n_a: a.count(),
        n_b: b.count(),
        degenerate,
    }
}

pub fn tvla(a: &TraceSet, b: &TraceSet, threshold: f64) -> Result<TvlaReport, AssessError> {
    let la = a.fixed_len().ok_or(AssessError::VariableLength)?;
    let lb = b.fixed_len().ok_or(AssessError::VariableLength)?;
    if la != lb {
        return Err(AssessError::LengthMismatch(la, lb));
    }
    let ta: Vec<&Trace> = a.traces().iter().collect();
    let tb: Vec<&Trace> = b.traces().iter().collect();
    tvla_traces(&ta, &tb, threshold)
}

/// Traces of `class` against an equally sized uniform sample (without
/// replacement) of all other traces.
pub fn class_vs_rest(set: &TraceSet, class: Label, seed: u64) -> Result<(TraceSet, TraceSet), AssessError> {
    let (inside, outside): (Vec<usize>, Vec<usize>) = (0..set.len()).partition(|&i| set.traces()[i].label == class);
    if inside.is_empty() {
        return Err(AssessError::EmptyClass(class));
    }
    let n = inside.len().min(outside.len());
    let mut picked: Vec<usize> = index::sample(&mut rng::stream(seed, 0xc1a55), outside.len(), n)
        .into_iter()
        .map(|k| outside[k])
        .collect();
    picked.sort_unstable();
    Ok((set.subset(&inside), set.subset(&picked)))
}

/// Mean traces of two groups and their pointwise difference `A - B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemaSummary {
    pub mean_a: Vec<f64>,
    pub mean_b: Vec<f64>,
    pub diff: Vec<f64>,
}

pub fn sema_summary(a: &TraceSet, b: &TraceSet) -> Result<SemaSummary, AssessError> {
    if a.is_empty() || b.is_empty() {
        return Err(AssessError::Empty);
    }
    let la = a.fixed_len().ok_or(AssessError::VariableLength)?;
    let lb = b.fixed_len().ok_or(AssessError::VariableLength)?;
    if la != lb {
        return Err(AssessError::LengthMismatch(la, lb));
    }
    let mean = |s: &TraceSet| -> Result<Vec<f64>, AssessError> {
        let mut m = Moments::new(la);
        for t in s.traces() {
            m.update(&t.samples)?;
        }
        Ok(m.mean().to_vec())
    };
    let (mean_a, mean_b) = (mean(a)?, mean(b)?);
    let diff = mean_a.iter().zip(&mean_b).map(|(x, y)| x - y).collect();
    Ok(SemaSummary { mean_a, mean_b, diff })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_groups_have_zero_t() {
        assert_eq!(welch_t(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn shifted_groups() {
        // means 2.5 and 3.5, both variances 5/3, n = 4
        let t = welch_t(&[1.0, 2.0, 3.0, 4.0], &[2.0, 3.0, 4.0, 5.0]).unwrap();
        let expected = -1.0 / (2.0 * (5.0 / 3.0) / 4.0f64).sqrt();
        assert!((t - expected).abs() < 1e-12);
        assert!((t + 1.095_445).abs() < 1e-6);
    }

    #[test]
    fn undefined_and_small_groups() {
        assert_eq!(welch_t(&[1.0, 1.0], &[2.0, 2.0]), Err(AssessError::Undefined));
        assert!(matches!(
            welch_t(&[1.0], &[2.0, 3.0]),
            Err(AssessError::TooFewSamples { group: 'A', .. })
        ));
        assert!(welch_t(&[1.0, 1.0], &[2.0, 3.0]).is_ok());
    }

    #[test]
    fn windows_are_maximal_runs() {
        let t = [0.0, 5.0, -6.0, 1.0, 4.5, 4.6, 7.0];
        assert_eq!(leaky_windows(&t, 4.5), vec![(1, 3), (5, 7)]);
        assert!(leaky_windows(&[0.0; 4], 4.5).is_empty());
    }

    #[test]
    fn degenerate_indices_are_flagged_not_fatal() {
        let a: Vec<Trace> = (0..3).map(|i| Trace::new(vec![1.0, i as f32], 0)).collect();
        let b: Vec<Trace> = (0..3).map(|i| Trace::new(vec![2.0, i as f32 * 2.0], 1)).collect();
        let r = tvla(&TraceSet::new(a, 2), &TraceSet::new(b, 2), 4.5).unwrap();
        assert_eq!(r.degenerate, vec![0]);
        assert_eq!(r.t[0], 0.0);
        assert!(r.t[1] < 0.0);
    }

    #[test]
    fn class_vs_rest_matches_sizes() {
        let traces = (0..30)
            .map(|i| Trace::new(vec![i as f32, 0.0], (i % 3) as Label))
            .collect();
        let set = TraceSet::new(traces, 3);
        let (a, b) = class_vs_rest(&set, 0, 1).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(b.len(), 10);
        assert!(b.traces().iter().all(|t| t.label != 0));
        assert_eq!(class_vs_rest(&set, 0, 1).unwrap(), (a, b));
    }

    #[test]
    fn sema_of_identical_sets_is_zero() {
        let traces = (0..4).map(|i| Trace::new(vec![i as f32, 2.0, -1.0], 0)).collect();
        let set = TraceSet::new(traces, 1);
        let s = sema_summary(&set, &set).unwrap();
        assert!(s.diff.iter().all(|&d| d == 0.0));
        assert_eq!(s.mean_a, vec![1.5, 2.0, -1.0]);
    }

    #[test]
    fn csv_has_one_row_per_index() {
        let r = TvlaReport {
            t: vec![0.5, -5.0],
            threshold: 4.5,
            windows: vec![(1, 2)],
            n_a: 2,
            n_b: 2,
            degenerate: vec![],
        };
        assert_eq!(r.to_csv(), "index,t\n0,0.5\n1,-5\n");
        assert_eq!(r.peak_window(), Some((1, 2)));
    }

    proptest! {
        #[test]
        fn antisymmetric_and_invariant(
            a in prop::collection::vec(-50.0f64..50.0, 2..30),
            b in prop::collection::vec(-50.0f64..50.0, 2..30),
            c in -100.0f64..100.0,
            k in 0.01f64..100.0,
        ) {
            let Ok(t) = welch_t(&a, &b) else { return Ok(()); };
            prop_assume!(t.is_finite());
            let tol = 1e-6 * t.abs().max(1.0);
            prop_assert!((welch_t(&b, &a).unwrap() + t).abs() < tol);
            let shift = |x: &[f64]| x.iter().map(|v| v + c).collect::<Vec<_>>();
            let scale = |x: &[f64]| x.iter().map(|v| v * k).collect::<Vec<_>>();
            prop_assert!((welch_t(&shift(&a), &shift(&b)).unwrap() - t).abs() < tol);
            prop_assert!((welch_t(&scale(&a), &scale(&b)).unwrap() - t).abs() < tol);
        }

        #[test]
        fn windows_tile_the_index_range(t in prop::collection::vec(-10.0f64..10.0, 0..100)) {
            let w = leaky_windows(&t, 4.5);
            let mut covered = vec![false; t.len()];
            let mut last_end = 0;
            for &(s, e) in &w {
                prop_assert!(s < e && s >= last_end);
                if s > 0 { prop_assert!(t[s - 1].abs() <= 4.5); }
                if e < t.len() { prop_assert!(t[e].abs() <= 4.5); }
                for i in s..e {
                    prop_assert!(t[i].abs() > 4.5);
                    covered[i] = true;
                }
                last_end = e;
            }
            for (i, c) in covered.iter().enumerate() {
                prop_assert_eq!(*c, t[i].abs() > 4.5);
            }
        }
    }
}
