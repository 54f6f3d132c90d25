//! The segmentation network: a two-layer convolutional backbone shared by
//! one task head, or by the two selector heads.
//!
//! ```text
//! image 3×H×W ─ conv3×3(16) ─ ReLU ─ conv3×3(32) ─ ReLU ─┬─ conv1×1(K) ─ softmax   (head 0)
//!                                                          └─ conv1×1(K) ─ softmax   (head 1, selector only)
//! ```

mod checkpoint;
mod local;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use local::LocalLoss;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    conv2d_backward_cols, gemm_rows, im2col, relu_backward_inplace, relu_inplace, softmax_channels, ProbMap, Scalar,
    Tensor,
};

pub const IN_CHANNELS: usize = 3;
pub const HIDDEN_CHANNELS: usize = 16;
pub const FEATURE_CHANNELS: usize = 32;
pub(crate) const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T = f32> {
    /// `out×in×k×k`
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn zeros(out_ch: usize, in_ch: usize, k: usize) -> Self {
        ConvLayer {
            weight: Tensor::zeros(&[out_ch, in_ch, k, k]),
            bias: vec![T::zero(); out_ch],
        }
    }

    fn he_normal(out_ch: usize, in_ch: usize, k: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (in_ch * k * k) as f64;
        let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("positive std");
        let n = out_ch * in_ch * k * k;
        let data = (0..n).map(|_| T::from_f64(normal.sample(rng))).collect();
        ConvLayer {
            weight: Tensor::from_vec(&[out_ch, in_ch, k, k], data).expect("sized"),
            bias: vec![T::zero(); out_ch],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn cast<U: Scalar>(&self) -> ConvLayer<U> {
        ConvLayer {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Which part of the network a parameter array belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Head(usize),
}

/// Parameters (or gradients, or momentum buffers) laid out like the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T = f32> {
    pub conv1: ConvLayer<T>,
    pub conv2: ConvLayer<T>,
    pub heads: Vec<ConvLayer<T>>,
}

/// Gradients share the parameter layout.
pub type Gradients<T = f32> = ParamSet<T>;

impl<T: Scalar> ParamSet<T> {
    pub fn zeros(classes: usize, heads: usize) -> Self {
        ParamSet {
            conv1: ConvLayer::zeros(HIDDEN_CHANNELS, IN_CHANNELS, KERNEL),
            conv2: ConvLayer::zeros(FEATURE_CHANNELS, HIDDEN_CHANNELS, KERNEL),
            heads: (0..heads).map(|_| ConvLayer::zeros(classes, FEATURE_CHANNELS, 1)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet::zeros(self.classes(), self.heads.len())
    }

    pub fn classes(&self) -> usize {
        self.heads[0].out_channels()
    }

    /// Every parameter array with its name, group and shape, in checkpoint
    /// order.
    pub fn arrays(&self) -> Vec<(String, ParamGroup, Vec<usize>, &[T])> {
        let mut out = Vec::with_capacity(4 + 2 * self.heads.len());
        for (name, layer) in [("backbone.conv1", &self.conv1), ("backbone.conv2", &self.conv2)] {
            out.push((format!("{name}.weight"), ParamGroup::Backbone, layer.weight.shape().to_vec(), layer.weight.data()));
            out.push((format!("{name}.bias"), ParamGroup::Backbone, vec![layer.bias.len()], &layer.bias[..]));
        }
        for (i, layer) in self.heads.iter().enumerate() {
            out.push((format!("head{i}.weight"), ParamGroup::Head(i), layer.weight.shape().to_vec(), layer.weight.data()));
            out.push((format!("head{i}.bias"), ParamGroup::Head(i), vec![layer.bias.len()], &layer.bias[..]));
        }
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<(ParamGroup, &mut [T])> {
        let mut out = Vec::with_capacity(4 + 2 * self.heads.len());
        for layer in [&mut self.conv1, &mut self.conv2] {
            out.push((ParamGroup::Backbone, layer.weight.data_mut()));
            out.push((ParamGroup::Backbone, &mut layer.bias[..]));
        }
        for (i, layer) in self.heads.iter_mut().enumerate() {
            out.push((ParamGroup::Head(i), layer.weight.data_mut()));
            out.push((ParamGroup::Head(i), &mut layer.bias[..]));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.arrays().iter().map(|a| a.3.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.3.iter().all(|v| v.is_finite()))
    }

    /// `self += scale · other`
    pub fn add_scaled(&mut self, other: &ParamSet<T>, scale: T) {
        let src: Vec<&[T]> = other.arrays().into_iter().map(|a| a.3).collect();
        for ((_, dst), src) in self.arrays_mut().into_iter().zip(src) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    /// Sums gradient sets in order and scales by `1/len`.
    pub fn mean_of(grads: &[ParamSet<T>]) -> Option<ParamSet<T>> {
        let first = grads.first()?;
        let mut acc = first.clone();
        for g in &grads[1..] {
            acc.add_scaled(g, T::one());
        }
        let inv = T::from_f64(1.0 / grads.len() as f64);
        for (_, a) in acc.arrays_mut() {
            a.iter_mut().for_each(|v| *v = *v * inv);
        }
        Some(acc)
    }

    pub fn max_abs(&self) -> f64 {
        self.arrays()
            .iter()
            .flat_map(|a| a.3.iter())
            .fold(0.0, |m, v| m.max(v.as_f64().abs()))
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            conv1: self.conv1.cast(),
            conv2: self.conv2.cast(),
            heads: self.heads.iter().map(ConvLayer::cast).collect(),
        }
    }
}

/// Which parameters an update touches, and in which direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Update {
    /// Gradient descent on every parameter.
    Descend,
    /// Descent on the backbone only; heads frozen.
    DescendBackbone,
    /// Gradient ascent on the heads only; backbone frozen.
    AscendHeads,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient entry was NaN or infinite; nothing changed.
    SkippedNonFinite,
}

/// Backbone + heads, with SGD momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub params: ParamSet<T>,
    velocity: Option<ParamSet<T>>,
}

/// Output of [`ModelParams::forward`].
#[derive(Clone, Debug)]
pub struct Prediction<T = f32> {
    /// One map per head.
    pub probs: Vec<ProbMap<T>>,
    backbone: BackboneCache<T>,
}

impl<T: Scalar> Prediction<T> {
    /// Backbone output, `32×H×W` after ReLU.
    pub fn features(&self) -> &[T] {
        &self.backbone.features
    }

    pub fn backbone(&self) -> &BackboneCache<T> {
        &self.backbone
    }
}

/// Activations retained from the backbone pass for backprop.
#[derive(Clone, Debug)]
pub struct BackboneCache<T> {
    height: usize,
    width: usize,
    cols1: Vec<T>,
    hidden: Vec<T>,
    cols2: Vec<T>,
    features: Vec<T>,
}

impl<T: Scalar> BackboneCache<T> {
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }

    /// Which ReLU units are active, hidden layer first.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.hidden.iter().chain(&self.features).map(|&v| v > T::zero()).collect()
    }
}

/// How far back [`ModelParams::backward`] propagates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradScope {
    All,
    HeadsOnly,
}

impl<T: Scalar> ModelParams<T> {
    /// Single-head task model with He-initialized weights.
    pub fn init(classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 || classes > 254 {
            return Err(Error::InvalidArgument(format!("{classes} classes (need 2..=254)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ParamSet {
            conv1: ConvLayer::he_normal(HIDDEN_CHANNELS, IN_CHANNELS, KERNEL, 2.0, &mut rng),
            conv2: ConvLayer::he_normal(FEATURE_CHANNELS, HIDDEN_CHANNELS, KERNEL, 2.0, &mut rng),
            heads: vec![ConvLayer::he_normal(classes, FEATURE_CHANNELS, 1, 1.0, &mut rng)],
        };
        Ok(ModelParams { params, velocity: None })
    }

    pub fn from_params(params: ParamSet<T>) -> Result<Self> {
        let p = &params;
        let ok = p.conv1.weight.shape() == [HIDDEN_CHANNELS, IN_CHANNELS, KERNEL, KERNEL]
            && p.conv1.bias.len() == HIDDEN_CHANNELS
            && p.conv2.weight.shape() == [FEATURE_CHANNELS, HIDDEN_CHANNELS, KERNEL, KERNEL]
            && p.conv2.bias.len() == FEATURE_CHANNELS
            && !p.heads.is_empty()
            && p.heads.iter().all(|h| {
                h.weight.shape() == [p.heads[0].out_channels(), FEATURE_CHANNELS, 1, 1]
                    && h.bias.len() == p.heads[0].out_channels()
            });
        if !ok {
            return Err(Error::Shape("parameter set does not match the fixed architecture".into()));
        }
        Ok(ModelParams { params, velocity: None })
    }

    pub fn classes(&self) -> usize {
        self.params.classes()
    }

    pub fn num_heads(&self) -> usize {
        self.params.heads.len()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            params: self.params.cast(),
            velocity: None,
        }
    }

    /// Selector model: backbone copied, the single task head copied twice,
    /// optimizer state cleared.
    pub fn clone_selector(&self) -> Result<Self> {
        if self.num_heads() != 1 {
            return Err(Error::InvalidArgument(format!(
                "selector must be cloned from a single-head model, got {} heads",
                self.num_heads()
            )));
        }
        let head = self.params.heads[0].clone();
        Ok(ModelParams {
            params: ParamSet {
                conv1: self.params.conv1.clone(),
                conv2: self.params.conv2.clone(),
                heads: vec![head.clone(), head],
            },
            velocity: None,
        })
    }

    pub fn reset_optimizer(&mut self) {
        self.velocity = None;
    }

    pub fn backbone(&self, image: &Tensor<T>) -> Result<BackboneCache<T>> {
        let (c, h, w) = image.chw()?;
        if c != IN_CHANNELS {
            return Err(Error::Shape(format!("image has {c} channels, expected {IN_CHANNELS}")));
        }
        if !image.is_finite() {
            return Err(Error::NonFinite("input image".into()));
        }
        let hw = h * w;
        let p = &self.params;
        let cols1 = im2col(image.data(), IN_CHANNELS, h, w, KERNEL);
        let mut hidden = gemm_rows(p.conv1.weight.data(), Some(&p.conv1.bias), &cols1, HIDDEN_CHANNELS, hw);
        relu_inplace(&mut hidden);
        let cols2 = im2col(&hidden, HIDDEN_CHANNELS, h, w, KERNEL);
        let mut features = gemm_rows(p.conv2.weight.data(), Some(&p.conv2.bias), &cols2, FEATURE_CHANNELS, hw);
        relu_inplace(&mut features);
        Ok(BackboneCache {
            height: h,
            width: w,
            cols1,
            hidden,
            cols2,
            features,
        })
    }

    /// Head logits (`K×H×W`) on cached backbone features.
    pub fn head_logits(&self, head: usize, cache: &BackboneCache<T>) -> Tensor<T> {
        let layer = &self.params.heads[head];
        let (h, w) = (cache.height, cache.width);
        let k = layer.out_channels();
        let out = gemm_rows(layer.weight.data(), Some(&layer.bias), &cache.features, k, h * w);
        Tensor::from_vec(&[k, h, w], out).expect("sized")
    }

    /// Softmax output of every head on cached features.
    pub fn head_probs(&self, cache: &BackboneCache<T>) -> Result<Vec<ProbMap<T>>> {
        let probs = (0..self.num_heads())
            .map(|i| softmax_channels(&self.head_logits(i, cache)))
            .collect::<Result<Vec<_>>>()?;
        if probs.iter().any(|p| p.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("prediction".into()));
        }
        Ok(probs)
    }

    pub fn heads_forward(&self, cache: BackboneCache<T>) -> Result<Prediction<T>> {
        let probs = self.head_probs(&cache)?;
        Ok(Prediction { probs, backbone: cache })
    }

    /// Class probabilities from every head for a `3×H×W` image in `[0, 1]`.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Prediction<T>> {
        let cache = self.backbone(image)?;
        self.heads_forward(cache)
    }

    /// Backpropagates per-head logit gradients (`None` for a head that does
    /// not enter the loss).
    pub fn backward(&self, cache: &BackboneCache<T>, grad_logits: &[Option<&Tensor<T>>], scope: GradScope) -> Gradients<T> {
        let (h, w) = (cache.height, cache.width);
        let hw = h * w;
        let mut grads = self.params.zeros_like();
        let mut grad_features = vec![T::zero(); FEATURE_CHANNELS * hw];
        let want_backbone = scope == GradScope::All;
        for (i, g) in grad_logits.iter().enumerate() {
            let Some(g) = g else { continue };
            let head = &self.params.heads[i];
            let hg = conv2d_backward_cols(&cache.features, head.weight.data(), g.data(), FEATURE_CHANNELS, h, w, 1, want_backbone);
            grads.heads[i].weight.data_mut().copy_from_slice(&hg.weight);
            grads.heads[i].bias.copy_from_slice(&hg.bias);
            if let Some(gf) = hg.input {
                for (a, b) in grad_features.iter_mut().zip(gf) {
                    *a += b;
                }
            }
        }
        if !want_backbone {
            return grads;
        }
        relu_backward_inplace(&mut grad_features, &cache.features);
        let g2 = conv2d_backward_cols(&cache.cols2, self.params.conv2.weight.data(), &grad_features, HIDDEN_CHANNELS, h, w, KERNEL, true);
        grads.conv2.weight.data_mut().copy_from_slice(&g2.weight);
        grads.conv2.bias.copy_from_slice(&g2.bias);
        let mut grad_hidden = g2.input.expect("requested");
        relu_backward_inplace(&mut grad_hidden, &cache.hidden);
        let g1 = conv2d_backward_cols(&cache.cols1, self.params.conv1.weight.data(), &grad_hidden, IN_CHANNELS, h, w, KERNEL, false);
        grads.conv1.weight.data_mut().copy_from_slice(&g1.weight);
        grads.conv1.bias.copy_from_slice(&g1.bias);
        grads
    }

    /// One SGD-with-momentum step: `v ← μ·v + g`, `p ← p − lr·v`, with `g`
    /// negated for ascent. Groups outside `update` are left untouched, as are
    /// their momentum buffers.
    pub fn sgd_step(&mut self, grads: &Gradients<T>, lr: f64, momentum: f64, update: Update) -> Result<StepOutcome> {
        if grads.heads.len() != self.num_heads() || grads.classes() != self.classes() {
            return Err(Error::Shape("gradient layout does not match the model".into()));
        }
        if !grads.is_finite() {
            log::warn!("non-finite gradient; step skipped");
            return Ok(StepOutcome::SkippedNonFinite);
        }
        let velocity = self.velocity.get_or_insert_with(|| self.params.zeros_like());
        let (lr, mu) = (T::from_f64(lr), T::from_f64(momentum));
        let grad_arrays: Vec<&[T]> = grads.arrays().into_iter().map(|a| a.3).collect();
        let vel_arrays = velocity.arrays_mut();
        for (((group, param), vel), grad) in self.params.arrays_mut().into_iter().zip(vel_arrays).zip(grad_arrays) {
            let sign = match (update, group) {
                (Update::Descend, _) => T::one(),
                (Update::DescendBackbone, ParamGroup::Backbone) => T::one(),
                (Update::AscendHeads, ParamGroup::Head(_)) => -T::one(),
                _ => continue,
            };
            for ((p, v), &g) in param.iter_mut().zip(vel.1.iter_mut()).zip(grad) {
                *v = mu * *v + sign * g;
                *p -= lr * *v;
            }
        }
        if !self.params.is_finite() {
            return Err(Error::NonFinite("parameters after update".into()));
        }
        Ok(StepOutcome::Applied)
    }
}
