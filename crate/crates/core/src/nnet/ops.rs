//! Conv1d kernels on channel-major buffers.
//!
//! A strided input is first split into `stride` phases so that every inner
//! loop runs over contiguous memory: sample `t * s + k` of channel `i`
//! is element `t + k / s` of phase `k % s`.

use super::Scalar;

const LANES: usize = 8;

/// Dot product with a fixed eight-lane summation order.
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = F::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    let mut s = F::zero();
    for v in acc {
        s += v;
    }
    s + tail
}

pub fn sum<F: Scalar>(a: &[F]) -> F {
    let mut acc = [F::zero(); LANES];
    let c = a.chunks_exact(LANES);
    let r = c.remainder();
    for x in c {
        for l in 0..LANES {
            acc[l] += x[l];
        }
    }
    let mut s = F::zero();
    for v in acc {
        s += v;
    }
    r.iter().fold(s, |s, &x| s + x)
}

/// `y += alpha * x`
pub fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Geometry of one conv block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_ch: usize,
    pub in_len: usize,
    pub out_ch: usize,
    pub out_len: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvShape {
    /// Length of each phase buffer.
    pub fn phase_len(&self) -> usize {
        self.in_len.div_ceil(self.stride)
    }

    pub fn phases_size(&self) -> usize {
        self.in_ch * self.stride * self.phase_len()
    }

    pub fn weights(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel
    }
}

/// Splits channel-major `x` into phase buffers.
pub fn to_phases<F: Scalar>(x: &[F], sh: &ConvShape, phases: &mut [F]) {
    let plen = sh.phase_len();
    let s = sh.stride;
    for i in 0..sh.in_ch {
        let xi = &x[i * sh.in_len..(i + 1) * sh.in_len];
        for p in 0..s {
            let ph = &mut phases[(i * s + p) * plen..(i * s + p + 1) * plen];
            for (j, v) in ph.iter_mut().enumerate() {
                *v = xi.get(j * s + p).copied().unwrap_or_else(F::zero);
            }
        }
    }
}

/// Inverse of [`to_phases`]; padding positions are dropped.
pub fn from_phases<F: Scalar>(phases: &[F], sh: &ConvShape, x: &mut [F]) {
    let plen = sh.phase_len();
    let s = sh.stride;
    for i in 0..sh.in_ch {
        for p in 0..s {
            let ph = &phases[(i * s + p) * plen..(i * s + p + 1) * plen];
            for (j, &v) in ph.iter().enumerate() {
                let idx = j * s + p;
                if idx < sh.in_len {
                    x[i * sh.in_len + idx] = v;
                }
            }
        }
    }
}

/// `out[o][t] = relu(b[o] + sum_i sum_k w[o][i][k] * x[i][t*s + k])`
pub fn conv_relu_forward<F: Scalar>(phases: &[F], w: &[F], b: &[F], sh: &ConvShape, out: &mut [F]) {
    let plen = sh.phase_len();
    let (s, k, t_len) = (sh.stride, sh.kernel, sh.out_len);
    for o in 0..sh.out_ch {
        let row = &mut out[o * t_len..(o + 1) * t_len];
        row.fill(b[o]);
        for i in 0..sh.in_ch {
            let wo = &w[(o * sh.in_ch + i) * k..(o * sh.in_ch + i + 1) * k];
            for (kk, &wk) in wo.iter().enumerate() {
                let ph = &phases[(i * s + kk % s) * plen..];
                let off = kk / s;
                axpy(wk, &ph[off..off + t_len], row);
            }
        }
        for v in row.iter_mut() {
            if *v < F::zero() {
                *v = F::zero();
            }
        }
    }
}

/// Backward pass through one conv block given `dz`, the gradient with
/// respect to its pre-activation output. Accumulates weight and bias
/// gradients into `param_grads` and overwrites `dphases` with the
/// gradient with respect to the phase-split input; either may be skipped.
pub fn conv_backward<F: Scalar>(
    phases: &[F],
    w: &[F],
    dz: &[F],
    sh: &ConvShape,
    mut param_grads: Option<(&mut [F], &mut [F])>,
    mut dphases: Option<&mut [F]>,
) {
    let plen = sh.phase_len();
    let (s, k, t_len) = (sh.stride, sh.kernel, sh.out_len);
    if let Some(d) = dphases.as_deref_mut() {
        d.fill(F::zero());
    }
    for o in 0..sh.out_ch {
        let dzo = &dz[o * t_len..(o + 1) * t_len];
        if let Some((_, db)) = param_grads.as_mut() {
            db[o] += sum(dzo);
        }
        for i in 0..sh.in_ch {
            let base = (o * sh.in_ch + i) * k;
            for kk in 0..k {
                let pbase = (i * s + kk % s) * plen + kk / s;
                if let Some((dw, _)) = param_grads.as_mut() {
                    dw[base + kk] += dot(dzo, &phases[pbase..pbase + t_len]);
                }
                if let Some(d) = dphases.as_deref_mut() {
                    axpy(w[base + kk], dzo, &mut d[pbase..pbase + t_len]);
                }
            }
        }
    }
}
