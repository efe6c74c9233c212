use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Label, TraceSet};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// Fraction of traces that go to the profiling side.
    pub profiling_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            profiling_fraction: 0.9,
            seed: 0,
            stratified: true,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("profiling fraction {0} outside (0, 1)")]
    BadFraction(f64),
    #[error("trace set is invalid: {0}")]
    InvalidSet(String),
    #[error("class {class} has {count} traces, too few to split with fraction {fraction}")]
    ClassTooSmall { class: Label, count: usize, fraction: f64 },
    #[error("set of {count} traces too small to split with fraction {fraction}")]
    SetTooSmall { count: usize, fraction: f64 },
    #[error("requested {requested} traces from a pool of {available}")]
    NotEnoughTraces { requested: usize, available: usize },
}

/// Partitions `set` into (profiling, attack).
///
/// Stratified splits take `round(fraction * n_c)` traces of every class
/// `c` for profiling. Both parts keep the original relative trace order.
pub fn split(set: &TraceSet, cfg: &SplitConfig) -> Result<(TraceSet, TraceSet), SplitError> {
    let rho = cfg.profiling_fraction;
    if !(rho > 0.0 && rho < 1.0) {
        return Err(SplitError::BadFraction(rho));
    }
    let violations = set.validate();
    if let Some(v) = violations.first() {
        return Err(SplitError::InvalidSet(v.to_string()));
    }

    let mut rng = rng::stream(cfg.seed, 0x5917);
    let mut profiling = Vec::with_capacity(set.len());
    if cfg.stratified {
        for (class, members) in class_members(set).into_iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let take = (rho * members.len() as f64).round() as usize;
            if take == 0 || take == members.len() {
                return Err(SplitError::ClassTooSmall {
                    class: class as Label,
                    count: members.len(),
                    fraction: rho,
                });
            }
            let mut members = members;
            members.shuffle(&mut rng);
            profiling.extend_from_slice(&members[..take]);
        }
    } else {
        let take = (rho * set.len() as f64).round() as usize;
        if take == 0 || take == set.len() {
            return Err(SplitError::SetTooSmall {
                count: set.len(),
                fraction: rho,
            });
        }
        let mut all: Vec<usize> = (0..set.len()).collect();
        all.shuffle(&mut rng);
        profiling.extend_from_slice(&all[..take]);
    }

    let mut in_profiling = vec![false; set.len()];
    for &i in &profiling {
        in_profiling[i] = true;
    }
    let (p, a): (Vec<usize>, Vec<usize>) = (0..set.len()).partition(|&i| in_profiling[i]);
    Ok((set.subset(&p), set.subset(&a)))
}

/// Draws `n` traces with class proportions kept as close as possible to
/// those of `set` (largest-remainder allocation, ties to lower classes).
pub fn stratified_subset(set: &TraceSet, n: usize, seed: u64) -> Result<TraceSet, SplitError> {
    if n > set.len() {
        return Err(SplitError::NotEnoughTraces {
            requested: n,
            available: set.len(),
        });
    }
    let members = class_members(set);
    let total = set.len() as f64;
    let exact: Vec<f64> = members.iter().map(|m| n as f64 * m.len() as f64 / total).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut remaining = n - quota.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &c in order.iter().cycle().take(members.len() * 2) {
        if remaining == 0 {
            break;
        }
        if quota[c] < members[c].len() {
            quota[c] += 1;
            remaining -= 1;
        }
    }

    let mut rng = rng::stream(seed, 0x50b5e7);
    let mut picked = Vec::with_capacity(n);
    for (m, q) in members.into_iter().zip(quota) {
        let mut m = m;
        m.shuffle(&mut rng);
        picked.extend_from_slice(&m[..q]);
    }
    picked.sort_unstable();
    Ok(set.subset(&picked))
}

fn class_members(set: &TraceSet) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); set.n_classes()];
    for (i, t) in set.traces().iter().enumerate() {
        members[t.label as usize].push(i);
    }
    members
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Trace;

    fn balanced(n_per_class: usize, n_classes: usize) -> TraceSet {
        let traces = (0..n_per_class * n_classes)
            .map(|i| Trace::new(vec![i as f32], (i % n_classes) as Label))
            .collect();
        TraceSet::new(traces, n_classes)
    }

    #[test]
    fn ninety_ten_of_ten_thousand() {
        let (p, a) = split(&balanced(1000, 10), &SplitConfig::default()).unwrap();
        assert_eq!((p.len(), a.len()), (9000, 1000));
        assert!(p.class_counts().iter().all(|&c| c == 900));
    }

    #[test]
    fn ten_traces_one_class() {
        let (p, a) = split(&balanced(10, 1), &SplitConfig::default()).unwrap();
        assert_eq!((p.len(), a.len()), (9, 1));
    }

    #[test]
    fn same_seed_same_partition() {
        let set = balanced(50, 4);
        let cfg = SplitConfig {
            seed: 42,
            ..Default::default()
        };
        let (p1, a1) = split(&set, &cfg).unwrap();
        let (p2, a2) = split(&set, &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(a1, a2);
        let (p3, _) = split(&set, &SplitConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(p1, p3);
    }

    #[test]
    fn deficient_class_is_named() {
        let mut traces = balanced(10, 2).into_traces();
        traces.push(Trace::new(vec![0.0], 2));
        let set = TraceSet::new(traces, 3);
        let err = split(&set, &SplitConfig::default()).unwrap_err();
        assert_eq!(
            err,
            SplitError::ClassTooSmall {
                class: 2,
                count: 1,
                fraction: 0.9
            }
        );
    }

    #[test]
    fn fraction_must_be_open_interval() {
        for rho in [0.0, 1.0, -0.5, f64::NAN] {
            let cfg = SplitConfig {
                profiling_fraction: rho,
                ..Default::default()
            };
            assert!(matches!(split(&balanced(10, 1), &cfg), Err(SplitError::BadFraction(_))));
        }
    }

    #[test]
    fn unstratified_split() {
        let cfg = SplitConfig {
            stratified: false,
            profiling_fraction: 0.75,
            seed: 1,
        };
        let (p, a) = split(&balanced(10, 2), &cfg).unwrap();
        assert_eq!((p.len(), a.len()), (15, 5));
    }

    #[test]
    fn stratified_subset_one_per_class() {
        let sub = stratified_subset(&balanced(90, 10), 10, 3).unwrap();
        assert_eq!(sub.class_counts(), vec![1; 10]);
        let sub = stratified_subset(&balanced(90, 10), 95, 3).unwrap();
        assert_eq!(sub.len(), 95);
        assert!(sub.class_counts().iter().all(|&c| c == 9 || c == 10));
        assert!(stratified_subset(&balanced(1, 2), 3, 0).is_err());
    }
}
