//! 1D Grad-CAM over the attack model.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nnet::{Model, NnetError};

#[derive(Debug, Error, PartialEq)]
pub enum AttributionError {
    #[error("relevance map is all zero")]
    ZeroMap,
    #[error("mass fraction must be in (0, 1], got {0}")]
    BadFraction(f64),
    #[error(transparent)]
    Model(#[from] NnetError),
}

/// Relevance of every input sample to one class score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    /// Non-negative, max-normalized to 1 unless `all_zero`.
    pub relevance: Vec<f64>,
    pub class: usize,
    /// Conv block whose activations were used.
    pub layer: usize,
    pub all_zero: bool,
}

impl AttributionMap {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,relevance\n");
        for (i, r) in self.relevance.iter().enumerate() {
            writeln!(out, "{i},{r}").unwrap();
        }
        out
    }
}

/// The conv block tapped by default: the last one.
pub fn default_layer(model: &Model<f32>) -> usize {
    model.n_conv() - 1
}

/// Grad-CAM of `class` for input `x` at conv block `layer`.
///
/// Channel weights are the time-averaged score gradients; the rectified
/// weighted activation sum is linearly interpolated onto input samples
/// using the receptive-field centres of the tapped block.
pub fn grad_cam(model: &Model<f32>, x: &[f32], class: usize, layer: usize) -> Result<AttributionMap, AttributionError> {
    let (acts, dact) = model.score_gradient(x, class, layer)?;
    let t_len = model.conv_len(layer);
    let channels = acts.len() / t_len;
    let mut cam = vec![0.0f64; t_len];
    for k in 0..channels {
        let row = k * t_len..(k + 1) * t_len;
        let alpha = dact[row.clone()].iter().map(|&g| g as f64).sum::<f64>() / t_len as f64;
        for (c, &a) in cam.iter_mut().zip(&acts[row]) {
            *c += alpha * a as f64;
        }
    }
    for c in cam.iter_mut() {
        *c = c.max(0.0);
    }
    let (jump, first) = model.spec().receptive_field(layer);
    let mut relevance = upsample(&cam, jump as f64, first, model.input_len());
    let max = relevance.iter().cloned().fold(0.0, f64::max);
    let all_zero = max <= 0.0;
    if !all_zero {
        for r in relevance.iter_mut() {
            *r /= max;
        }
    }
    Ok(AttributionMap {
        relevance,
        class,
        layer,
        all_zero,
    })
}

/// Grad-CAM for many inputs, each with its own target class.
pub fn grad_cam_batch<X: AsRef<[f32]> + Sync>(
    model: &Model<f32>,
    xs: &[X],
    classes: &[usize],
    layer: usize,
) -> Result<Vec<AttributionMap>, AttributionError> {
    assert_eq!(xs.len(), classes.len(), "one class per input");
    xs.par_iter()
        .zip(classes)
        .map(|(x, &c)| grad_cam(model, x.as_ref(), c, layer))
        .collect()
}

/// Linear interpolation of values located at `first + j * jump` onto
/// positions `0..len`, clamped at both ends.
fn upsample(v: &[f64], jump: f64, first: f64, len: usize) -> Vec<f64> {
    let last = (v.len() - 1) as f64;
    (0..len)
        .map(|i| {
            let u = ((i as f64 - first) / jump).clamp(0.0, last);
            let j = u.floor() as usize;
            let frac = u - j as f64;
            if j + 1 < v.len() {
                v[j] * (1.0 - frac) + v[j + 1] * frac
            } else {
                v[j]
            }
        })
        .collect()
}

/// Smallest half-open window holding at least `p` of the total relevance;
/// the earliest one on ties.
pub fn peak_window(map: &AttributionMap, p: f64) -> Result<(usize, usize), AttributionError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(AttributionError::BadFraction(p));
    }
    let r = &map.relevance;
    let total: f64 = r.iter().sum();
    if total <= 0.0 {
        return Err(AttributionError::ZeroMap);
    }
    let target = p * total * (1.0 - 1e-12);
    let mut best = (0, r.len());
    let mut end = 0;
    let mut mass = 0.0;
    for start in 0..r.len() {
        while end < r.len() && mass < target {
            mass += r[end];
            end += 1;
        }
        if mass < target {
            break;
        }
        if end - start < best.1 - best.0 {
            best = (start, end);
        }
        mass -= r[start];
    }
    Ok(best)
}

/// Intersection over union of two half-open index ranges.
pub fn iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter = a.1.min(b.1).saturating_sub(a.0.max(b.0));
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::ModelSpec;

    fn map(relevance: Vec<f64>) -> AttributionMap {
        AttributionMap {
            relevance,
            class: 0,
            layer: 0,
            all_zero: false,
        }
    }

    #[test]
    fn spike_window() {
        let mut r = vec![0.0; 20];
        r[7] = 1.0;
        assert_eq!(peak_window(&map(r), 0.9).unwrap(), (7, 8));
    }

    #[test]
    fn uniform_window_starts_at_zero() {
        assert_eq!(peak_window(&map(vec![1.0; 10]), 0.5).unwrap(), (0, 5));
        assert_eq!(peak_window(&map(vec![1.0; 9]), 0.5).unwrap(), (0, 5));
        assert_eq!(peak_window(&map(vec![1.0; 9]), 1.0).unwrap(), (0, 9));
    }

    #[test]
    fn window_prefers_dense_region() {
        let r = vec![0.1, 0.0, 1.0, 2.0, 1.0, 0.0, 0.1];
        assert_eq!(peak_window(&map(r), 0.8).unwrap(), (2, 5));
    }

    #[test]
    fn window_errors() {
        assert_eq!(peak_window(&map(vec![0.0; 5]), 0.5), Err(AttributionError::ZeroMap));
        assert_eq!(
            peak_window(&map(vec![1.0; 5]), 0.0),
            Err(AttributionError::BadFraction(0.0))
        );
        assert!(peak_window(&map(vec![1.0; 5]), 1.5).is_err());
    }

    #[test]
    fn iou_of_ranges() {
        assert_eq!(iou((0, 10), (5, 15)), 5.0 / 15.0);
        assert_eq!(iou((0, 4), (4, 8)), 0.0);
        assert_eq!(iou((2, 6), (2, 6)), 1.0);
    }

    #[test]
    fn upsampling_interpolates_between_centres() {
        let up = upsample(&[0.0, 2.0, 4.0], 2.0, 1.0, 7);
        assert_eq!(up, vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 4.0]);
    }

    fn model() -> Model<f32> {
        Model::new(ModelSpec::default_cnn(120, 3, 4)).unwrap()
    }

    #[test]
    fn zero_dense_layer_gives_flagged_zero_map() {
        let mut m = model();
        m.zero_dense();
        let x: Vec<f32> = (0..120).map(|i| (i as f32 * 0.3).sin()).collect();
        let g = grad_cam(&m, &x, 1, 2).unwrap();
        assert!(g.all_zero);
        assert!(g.relevance.iter().all(|&r| r == 0.0));
        assert_eq!(g.relevance.len(), 120);
    }

    #[test]
    fn maps_are_normalized_pure_and_full_length() {
        let m = model();
        for layer in 0..3 {
            for class in 0..3 {
                let x: Vec<f32> = (0..120).map(|i| ((i * (class + 2)) as f32 * 0.17).cos()).collect();
                let g = grad_cam(&m, &x, class, layer).unwrap();
                assert_eq!(g.relevance.len(), 120);
                assert!(g.relevance.iter().all(|&r| r >= 0.0));
                if !g.all_zero {
                    assert_eq!(g.relevance.iter().cloned().fold(0.0, f64::max), 1.0);
                }
                assert_eq!(grad_cam(&m, &x, class, layer).unwrap(), g);
            }
        }
    }

    #[test]
    fn unknown_layer_is_an_error() {
        let m = model();
        let err = grad_cam(&m, &[0.0; 120], 0, 3).unwrap_err();
        assert_eq!(err, AttributionError::Model(NnetError::NoSuchLayer(3)));
    }
}
