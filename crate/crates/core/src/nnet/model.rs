use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::ops::{self, ConvShape};
use super::{argmax, ModelSpec, NnetError, Scalar};
use crate::rng;
use crate::trace::{Label, TraceSet};

/// Gradient of the loss with respect to every parameter, in the same flat
/// layout as [`Model::params`].
pub type Gradients<F> = Vec<F>;

#[derive(Debug, Clone, PartialEq)]
struct ConvLayout {
    shape: ConvShape,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    convs: Vec<ConvLayout>,
    features: usize,
    dense_w: usize,
    dense_b: usize,
    n_params: usize,
}

impl Layout {
    fn new(spec: &ModelSpec) -> Result<Self, NnetError> {
        spec.check()?;
        let lengths = spec.conv_lengths()?;
        let mut convs = Vec::with_capacity(spec.convs.len());
        let (mut in_ch, mut in_len, mut off) = (1, spec.input_len, 0);
        for (c, &out_len) in spec.convs.iter().zip(&lengths) {
            let shape = ConvShape {
                in_ch,
                in_len,
                out_ch: c.channels,
                out_len,
                kernel: c.kernel,
                stride: c.stride,
            };
            let w = off;
            let b = w + shape.weights();
            off = b + c.channels;
            convs.push(ConvLayout { shape, w, b });
            in_ch = c.channels;
            in_len = out_len;
        }
        let dense_w = off;
        let dense_b = dense_w + spec.n_classes * in_ch;
        let n_params = dense_b + spec.n_classes;
        debug_assert_eq!(n_params, spec.n_params());
        Ok(Self {
            convs,
            features: in_ch,
            dense_w,
            dense_b,
            n_params,
        })
    }
}

/// Scratch buffers for one forward/backward pass. Reusing a workspace
/// across calls avoids reallocating activations.
#[derive(Debug, Clone)]
pub struct Workspace<F> {
    input: Vec<F>,
    phases: Vec<Vec<F>>,
    acts: Vec<Vec<F>>,
    pooled: Vec<F>,
    logits: Vec<F>,
    probs: Vec<F>,
    dact: Vec<Vec<F>>,
    dz: Vec<F>,
    dphases: Vec<F>,
}

/// The attack classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F: Scalar = f32> {
    spec: ModelSpec,
    params: Vec<F>,
    layout: Layout,
}

impl<F: Scalar> Model<F> {
    /// He-initialized weights drawn from `spec.seed`; zero biases.
    pub fn new(spec: ModelSpec) -> Result<Self, NnetError> {
        let layout = Layout::new(&spec)?;
        let mut params = vec![F::zero(); layout.n_params];
        for (l, c) in layout.convs.iter().enumerate() {
            let fan_in = c.shape.in_ch * c.shape.kernel;
            let mut r = rng::stream(spec.seed, l as u64);
            he_fill(&mut params[c.w..c.b], fan_in, &mut r);
        }
        let mut r = rng::stream(spec.seed, layout.convs.len() as u64);
        he_fill(&mut params[layout.dense_w..layout.dense_b], layout.features, &mut r);
        Ok(Self { spec, params, layout })
    }

    pub fn from_params(spec: ModelSpec, params: Vec<F>) -> Result<Self, NnetError> {
        let layout = Layout::new(&spec)?;
        if params.len() != layout.n_params {
            return Err(NnetError::InvalidSpec(format!(
                "{} parameters given, architecture has {}",
                params.len(),
                layout.n_params
            )));
        }
        Ok(Self { spec, params, layout })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_len(&self) -> usize {
        self.spec.input_len
    }

    pub fn n_classes(&self) -> usize {
        self.spec.n_classes
    }

    pub fn n_conv(&self) -> usize {
        self.layout.convs.len()
    }

    /// Output length of conv block `layer`.
    pub fn conv_len(&self, layer: usize) -> usize {
        self.layout.convs[layer].shape.out_len
    }

    /// The same parameters in another precision.
    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            spec: self.spec.clone(),
            params: self.params.iter().map(|p| G::of(p.to_f64().unwrap())).collect(),
            layout: self.layout.clone(),
        }
    }

    /// Sets dense weights and biases to zero.
    pub fn zero_dense(&mut self) {
        let (w, end) = (self.layout.dense_w, self.layout.n_params);
        self.params[w..end].fill(F::zero());
    }

    /// Dense weight connecting pooled feature `feature` to class `class`.
    pub fn dense_weight(&self, class: usize, feature: usize) -> F {
        self.params[self.layout.dense_w + class * self.layout.features + feature]
    }

    pub fn dense_bias_mut(&mut self) -> &mut [F] {
        let b = self.layout.dense_b;
        &mut self.params[b..b + self.spec.n_classes]
    }

    pub fn workspace(&self) -> Workspace<F> {
        let convs = &self.layout.convs;
        let max_phases = convs.iter().map(|c| c.shape.phases_size()).max().unwrap_or(0);
        let max_act = convs
            .iter()
            .map(|c| c.shape.out_ch * c.shape.out_len)
            .max()
            .unwrap_or(0);
        Workspace {
            input: vec![F::zero(); self.spec.input_len],
            phases: convs.iter().map(|c| vec![F::zero(); c.shape.phases_size()]).collect(),
            acts: convs
                .iter()
                .map(|c| vec![F::zero(); c.shape.out_ch * c.shape.out_len])
                .collect(),
            pooled: vec![F::zero(); self.layout.features],
            logits: vec![F::zero(); self.spec.n_classes],
            probs: vec![F::zero(); self.spec.n_classes],
            dact: convs
                .iter()
                .map(|c| vec![F::zero(); c.shape.out_ch * c.shape.out_len])
                .collect(),
            dz: vec![F::zero(); max_act],
            dphases: vec![F::zero(); max_phases],
        }
    }

    fn check_len(&self, len: usize) -> Result<(), NnetError> {
        if len != self.spec.input_len {
            return Err(NnetError::LengthMismatch {
                got: len,
                expected: self.spec.input_len,
            });
        }
        Ok(())
    }

    /// Runs the network on `ws`'s input buffer.
    fn run(&self, ws: &mut Workspace<F>) {
        let convs = &self.layout.convs;
        for (l, c) in convs.iter().enumerate() {
            let (before, rest) = ws.acts.split_at_mut(l);
            let x: &[F] = if l == 0 { &ws.input } else { &before[l - 1] };
            ops::to_phases(x, &c.shape, &mut ws.phases[l]);
            ops::conv_relu_forward(
                &ws.phases[l],
                &self.params[c.w..c.b],
                &self.params[c.b..c.b + c.shape.out_ch],
                &c.shape,
                &mut rest[0],
            );
        }
        let last = convs.last().unwrap();
        let t_len = F::of(last.shape.out_len as f64);
        let act = ws.acts.last().unwrap();
        for (ch, g) in ws.pooled.iter_mut().enumerate() {
            *g = ops::sum(&act[ch * last.shape.out_len..(ch + 1) * last.shape.out_len]) / t_len;
        }
        let feat = self.layout.features;
        for (j, z) in ws.logits.iter_mut().enumerate() {
            let w = &self.params[self.layout.dense_w + j * feat..self.layout.dense_w + (j + 1) * feat];
            *z = self.params[self.layout.dense_b + j] + ops::dot(w, &ws.pooled);
        }
        let m = ws.logits.iter().copied().fold(F::neg_infinity(), F::max);
        let mut total = F::zero();
        for (p, &z) in ws.probs.iter_mut().zip(&ws.logits) {
            *p = (z - m).exp();
            total += *p;
        }
        for p in ws.probs.iter_mut() {
            *p = *p / total;
        }
    }

    /// Forward pass on `x`, leaving every intermediate in `ws`. Returns
    /// the class probabilities.
    pub fn forward_ws<'w>(&self, x: &[F], ws: &'w mut Workspace<F>) -> Result<&'w [F], NnetError> {
        self.check_len(x.len())?;
        ws.input.copy_from_slice(x);
        self.run(ws);
        Ok(&ws.probs)
    }

    /// Class probabilities for one trace.
    pub fn forward(&self, x: &[F]) -> Result<Vec<F>, NnetError> {
        let mut ws = self.workspace();
        Ok(self.forward_ws(x, &mut ws)?.to_vec())
    }

    /// Pre-softmax scores for one trace.
    pub fn logits(&self, x: &[F]) -> Result<Vec<F>, NnetError> {
        let mut ws = self.workspace();
        self.forward_ws(x, &mut ws)?;
        Ok(ws.logits.clone())
    }

    /// Cross-entropy of the last forward pass in `ws` against `label`.
    fn sample_loss(&self, ws: &Workspace<F>, label: usize) -> F {
        let m = ws.logits.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = m + ws.logits.iter().map(|&z| (z - m).exp()).sum::<F>().ln();
        lse - ws.logits[label]
    }

    /// Backpropagates `dlogits` from the last forward pass in `ws`.
    ///
    /// With `grads`, parameter gradients are accumulated into it and the
    /// pass runs down to the first layer. Without, it stops once
    /// `ws.dact[stop_at]` (gradient with respect to the output of conv
    /// block `stop_at`) is filled.
    fn backprop(&self, ws: &mut Workspace<F>, dlogits: &[F], mut grads: Option<&mut [F]>, stop_at: usize) {
        let feat = self.layout.features;
        let convs = &self.layout.convs;
        let n_conv = convs.len();
        let mut dpool = vec![F::zero(); feat];
        for (j, &d) in dlogits.iter().enumerate() {
            let wrow = self.layout.dense_w + j * feat;
            if let Some(g) = grads.as_deref_mut() {
                g[self.layout.dense_b + j] += d;
                ops::axpy(d, &ws.pooled, &mut g[wrow..wrow + feat]);
            }
            ops::axpy(d, &self.params[wrow..wrow + feat], &mut dpool);
        }
        let last = &convs[n_conv - 1].shape;
        let inv_t = F::one() / F::of(last.out_len as f64);
        for (ch, &d) in dpool.iter().enumerate() {
            ws.dact[n_conv - 1][ch * last.out_len..(ch + 1) * last.out_len].fill(d * inv_t);
        }

        let stop = if grads.is_some() { 0 } else { stop_at };
        for l in (stop..n_conv).rev() {
            let c = &convs[l];
            let size = c.shape.out_ch * c.shape.out_len;
            let need_input = l > stop;
            if l == stop && grads.is_none() {
                break;
            }
            for ((dz, &d), &a) in ws.dz[..size].iter_mut().zip(&ws.dact[l]).zip(&ws.acts[l]) {
                *dz = if a > F::zero() { d } else { F::zero() };
            }
            let pg = grads.as_deref_mut().map(|g| {
                let (head, tail) = g.split_at_mut(c.b);
                (&mut head[c.w..], &mut tail[..c.shape.out_ch])
            });
            let psize = c.shape.phases_size();
            ops::conv_backward(
                &ws.phases[l],
                &self.params[c.w..c.b],
                &ws.dz[..size],
                &c.shape,
                pg,
                if need_input {
                    Some(&mut ws.dphases[..psize])
                } else {
                    None
                },
            );
            if need_input {
                ops::from_phases(&ws.dphases[..psize], &c.shape, &mut ws.dact[l - 1]);
            }
        }
    }

    /// Loss and gradient of one labelled sample, scaled by `scale`, added
    /// into `grads`. Returns the unscaled loss.
    pub fn accumulate_sample(
        &self,
        x: &[F],
        label: Label,
        scale: F,
        ws: &mut Workspace<F>,
        grads: &mut [F],
    ) -> Result<F, NnetError> {
        if label as usize >= self.spec.n_classes {
            return Err(NnetError::LabelOutOfRange {
                label,
                n_classes: self.spec.n_classes,
            });
        }
        self.forward_ws(x, ws)?;
        let loss = self.sample_loss(ws, label as usize);
        let mut dlogits: Vec<F> = ws.probs.iter().map(|&p| p * scale).collect();
        dlogits[label as usize] -= scale;
        self.backprop(ws, &dlogits, Some(grads), 0);
        Ok(loss)
    }

    /// Mean cross-entropy over `batch` and its gradient.
    ///
    /// Per-sample gradients are computed in parallel and summed in batch
    /// order, so the result does not depend on the number of threads.
    pub fn loss_and_grads<X: AsRef<[F]> + Sync>(&self, batch: &[(X, Label)]) -> Result<(F, Gradients<F>), NnetError> {
        if batch.is_empty() {
            return Err(NnetError::EmptyBatch);
        }
        let scale = F::one() / F::of(batch.len() as f64);
        let per_sample = batch
            .par_iter()
            .map_init(
                || self.workspace(),
                |ws, (x, label)| {
                    let mut g = vec![F::zero(); self.n_params()];
                    let loss = self.accumulate_sample(x.as_ref(), *label, scale, ws, &mut g)?;
                    Ok((loss, g))
                },
            )
            .collect::<Result<Vec<_>, NnetError>>()?;
        let mut grads = vec![F::zero(); self.n_params()];
        let mut loss = F::zero();
        for (l, g) in per_sample {
            loss += l;
            for (a, b) in grads.iter_mut().zip(&g) {
                *a += *b;
            }
        }
        Ok((loss * scale, grads))
    }

    /// Gradient of the pre-softmax score of `class` with respect to the
    /// output of conv block `layer`, along with that output, both
    /// channel-major `[channels][len]`.
    pub fn score_gradient(&self, x: &[F], class: usize, layer: usize) -> Result<(Vec<F>, Vec<F>), NnetError> {
        if layer >= self.n_conv() {
            return Err(NnetError::NoSuchLayer(layer));
        }
        if class >= self.spec.n_classes {
            return Err(NnetError::LabelOutOfRange {
                label: class as Label,
                n_classes: self.spec.n_classes,
            });
        }
        let mut ws = self.workspace();
        self.forward_ws(x, &mut ws)?;
        let mut dlogits = vec![F::zero(); self.spec.n_classes];
        dlogits[class] = F::one();
        self.backprop(&mut ws, &dlogits, None, layer);
        Ok((ws.acts[layer].clone(), ws.dact[layer].clone()))
    }

    /// Arg-max class of every input.
    pub fn predict_samples<X: AsRef<[F]> + Sync>(&self, xs: &[X]) -> Result<Vec<Label>, NnetError> {
        xs.par_iter()
            .map_init(
                || self.workspace(),
                |ws, x| Ok(argmax(self.forward_ws(x.as_ref(), ws)?) as Label),
            )
            .collect()
    }
}

impl Model<f32> {
    /// Arg-max class of every trace in `set`.
    pub fn predict(&self, set: &TraceSet) -> Result<Vec<Label>, NnetError> {
        let xs: Vec<&[f32]> = set.traces().iter().map(|t| t.samples.as_slice()).collect();
        self.predict_samples(&xs)
    }
}

fn he_fill<F: Scalar>(w: &mut [F], fan_in: usize, r: &mut rng::Rng) {
    let std = (2.0 / fan_in as f64).sqrt();
    for v in w {
        *v = F::of(std * r.sample::<f64, _>(StandardNormal));
    }
}
