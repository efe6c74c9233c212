//! Trace data model, validation and profiling/attack splitting.

mod scar;
mod split;

pub use scar::{read_scar, read_scar_bytes, write_scar, write_scar_bytes, ScarError, SCAR_MAGIC, SCAR_VERSION};
pub use split::{split, stratified_subset, SplitConfig, SplitError};

use std::collections::BTreeMap;
use std::fmt;

/// Class label. Labels are dense integers `0..n_classes`.
pub type Label = u16;

/// One sampled emission together with its attribute annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub samples: Vec<f32>,
    pub label: Label,
    pub session_id: u32,
    pub meta: BTreeMap<String, String>,
}

impl Trace {
    pub fn new(samples: Vec<f32>, label: Label) -> Self {
        Self {
            samples,
            label,
            session_id: 0,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_session(mut self, session_id: u32) -> Self {
        self.session_id = session_id;
        self
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.meta.insert(key.into(), value.to_string());
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same annotation, new samples.
    pub fn with_samples(&self, samples: Vec<f32>) -> Self {
        Self {
            samples,
            label: self.label,
            session_id: self.session_id,
            meta: self.meta.clone(),
        }
    }
}

/// What is wrong with a trace set, and where.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptySet,
    ZeroClasses,
    EmptyTrace {
        index: usize,
    },
    NonFinite {
        index: usize,
        sample: usize,
    },
    LabelOutOfRange {
        index: usize,
        label: Label,
        n_classes: usize,
    },
    LengthMismatch {
        index: usize,
        len: usize,
        fixed_len: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptySet => write!(f, "trace set is empty"),
            Violation::ZeroClasses => write!(f, "n_classes must be positive"),
            Violation::EmptyTrace { index } => write!(f, "trace {index}: no samples"),
            Violation::NonFinite { index, sample } => {
                write!(f, "trace {index}: non-finite sample at {sample}")
            }
            Violation::LabelOutOfRange {
                index,
                label,
                n_classes,
            } => write!(f, "trace {index}: label out of range ({label} >= {n_classes})"),
            Violation::LengthMismatch { index, len, fixed_len } => {
                write!(f, "trace {index}: length {len} != fixed length {fixed_len}")
            }
        }
    }
}

/// An ordered, immutable corpus of traces.
///
/// `fixed_len` is `Some(L)` when the set is declared fixed-length; every
/// trace then has exactly `L` samples (checked by [`TraceSet::validate`]).
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    traces: Vec<Trace>,
    n_classes: usize,
    fixed_len: Option<usize>,
    sample_rate_hz: f64,
    generator: String,
    meta: BTreeMap<String, String>,
}

impl TraceSet {
    /// Builds a set, declaring it fixed-length when every trace has the
    /// same nonzero length.
    pub fn new(traces: Vec<Trace>, n_classes: usize) -> Self {
        let fixed_len = match traces.first() {
            Some(first) if traces.iter().all(|t| t.len() == first.len()) && !first.is_empty() => Some(first.len()),
            _ => None,
        };
        Self::from_parts(traces, n_classes, fixed_len)
    }

    /// Builds a variable-length set regardless of the actual lengths.
    pub fn variable(traces: Vec<Trace>, n_classes: usize) -> Self {
        Self::from_parts(traces, n_classes, None)
    }

    /// Raw constructor; nothing is checked.
    pub fn from_parts(traces: Vec<Trace>, n_classes: usize, fixed_len: Option<usize>) -> Self {
        Self {
            traces,
            n_classes,
            fixed_len,
            sample_rate_hz: 0.0,
            generator: String::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn with_generator(mut self, generator: impl Into<String>) -> Self {
        self.generator = generator.into();
        self
    }

    pub fn with_sample_rate(mut self, hz: f64) -> Self {
        self.sample_rate_hz = hz;
        self
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.meta.insert(key.into(), value.to_string());
        self
    }

    pub fn traces(&self) -> &[Trace] {
        &self.traces
    }

    pub fn into_traces(self) -> Vec<Trace> {
        self.traces
    }

    pub fn get(&self, index: usize) -> Option<&Trace> {
        self.traces.get(index)
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn fixed_len(&self) -> Option<usize> {
        self.fixed_len
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn generator(&self) -> &str {
        &self.generator
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn labels(&self) -> Vec<Label> {
        self.traces.iter().map(|t| t.label).collect()
    }

    /// Number of traces per class, indexed by label. Out-of-range labels
    /// are ignored.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for t in &self.traces {
            if let Some(c) = counts.get_mut(t.label as usize) {
                *c += 1;
            }
        }
        counts
    }

    /// Every invariant violation, in trace order. Empty means valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.n_classes == 0 {
            out.push(Violation::ZeroClasses);
        }
        if self.traces.is_empty() {
            out.push(Violation::EmptySet);
        }
        for (index, t) in self.traces.iter().enumerate() {
            if t.samples.is_empty() {
                out.push(Violation::EmptyTrace { index });
            }
            if let Some(sample) = t.samples.iter().position(|v| !v.is_finite()) {
                out.push(Violation::NonFinite { index, sample });
            }
            if t.label as usize >= self.n_classes {
                out.push(Violation::LabelOutOfRange {
                    index,
                    label: t.label,
                    n_classes: self.n_classes,
                });
            }
            if let Some(fixed_len) = self.fixed_len {
                if t.len() != fixed_len {
                    out.push(Violation::LengthMismatch {
                        index,
                        len: t.len(),
                        fixed_len,
                    });
                }
            }
        }
        out
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }

    /// New set holding the traces at `indices`, in that order. Set-level
    /// annotations are kept.
    pub fn subset(&self, indices: &[usize]) -> Self {
        self.derive(indices.iter().map(|&i| self.traces[i].clone()).collect())
    }

    /// New set with the same annotations and `traces`; `fixed_len` is
    /// recomputed.
    pub fn derive(&self, traces: Vec<Trace>) -> Self {
        let mut out = if self.fixed_len.is_some() {
            Self::new(traces, self.n_classes)
        } else {
            Self::variable(traces, self.n_classes)
        };
        out.sample_rate_hz = self.sample_rate_hz;
        out.generator = self.generator.clone();
        out.meta = self.meta.clone();
        out
    }

    /// Applies `f` to every trace, producing a new set.
    pub fn map_traces<F>(&self, f: F) -> Self
    where
        F: Fn(&Trace) -> Trace,
    {
        self.derive(self.traces.iter().map(f).collect())
    }

    /// Fallible variant of [`TraceSet::map_traces`].
    pub fn try_map_traces<F, E>(&self, f: F) -> Result<Self, E>
    where
        F: Fn(&Trace) -> Result<Trace, E>,
    {
        let traces = self.traces.iter().map(f).collect::<Result<Vec<_>, E>>()?;
        Ok(self.derive(traces))
    }

    /// Relabels every trace; used for the shuffled-label control.
    pub fn relabel(&self, labels: &[Label]) -> Self {
        assert_eq!(labels.len(), self.len());
        self.derive(
            self.traces
                .iter()
                .zip(labels)
                .map(|(t, &l)| Trace { label: l, ..t.clone() })
                .collect(),
        )
    }

    /// Concatenates two sets with the same class count.
    pub fn concat(&self, other: &TraceSet) -> Self {
        let mut traces = self.traces.clone();
        traces.extend(other.traces.iter().cloned());
        self.derive(traces)
    }
}
