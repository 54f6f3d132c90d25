//! Dense array kernels for the fixed segmentation architecture.
//!
//! Everything here is generic over [`Scalar`] so the same code runs in `f32`
//! for training and in `f64` for finite-difference gradient checking.
//! Reductions that produce losses accumulate in `f64`; all loops run in a
//! fixed order, so results are bitwise reproducible.

mod gradcheck;

pub use gradcheck::{check_gradients, run_suite, suite_instance, GradCheckBatch, GradCheckConfig, GradCheckReport, Objective, SuiteConfig};

use std::fmt::Debug;

use crate::error::{Error, Result};
use crate::oracle::{SparseLabelMap, IGNORE};

pub trait Scalar:
    num_traits::Float + Default + Debug + Send + Sync + std::ops::AddAssign + std::ops::SubAssign + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Dimensions of a `C×H×W` tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!("expected C×H×W, got {:?}", self.shape))),
        }
    }
}

pub(crate) fn im2col<T: Scalar>(input: &[T], channels: usize, height: usize, width: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let hw = height * width;
    let mut cols = vec![T::zero(); channels * k * k * hw];
    for c in 0..channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..height {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * width..(sy as usize + 1) * width];
                    let dst_row = &mut dst[y * width..(y + 1) * width];
                    let x0 = (-dx).max(0);
                    let x1 = (width as isize - dx).min(width as isize);
                    if x0 < x1 {
                        let (x0, x1) = (x0 as usize, x1 as usize);
                        let s0 = (x0 as isize + dx) as usize;
                        dst_row[x0..x1].copy_from_slice(&src_row[s0..s0 + (x1 - x0)]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], channels: usize, height: usize, width: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let hw = height * width;
    let mut out = vec![T::zero(); channels * hw];
    for c in 0..channels {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..height {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0);
                    let x1 = (width as isize - dx).min(width as isize).max(x0);
                    let (x0, x1) = (x0 as usize, x1 as usize);
                    let src_row = &src[y * width..(y + 1) * width];
                    let dst_row = &mut plane[sy as usize * width..(sy as usize + 1) * width];
                    for x in x0..x1 {
                        dst_row[(x as isize + dx) as usize] += src_row[x];
                    }
                }
            }
        }
    }
    out
}

/// Pixel tile width for the blocked kernels.
const TILE: usize = 64;

/// `out[o, :] = bias[o] + Σ_r weight[o, r] · cols[r, :]`
///
/// Blocked four output rows by [`TILE`] pixels so each input row segment is
/// loaded once per block. Every output element still sums over `r` in
/// increasing order.
pub(crate) fn gemm_rows<T: Scalar>(weight: &[T], bias: Option<&[T]>, cols: &[T], out_ch: usize, hw: usize) -> Vec<T> {
    let rows = cols.len() / hw;
    let mut out = vec![T::zero(); out_ch * hw];
    let mut acc = [[T::zero(); TILE]; 4];
    for p0 in (0..hw).step_by(TILE) {
        let n = TILE.min(hw - p0);
        for o0 in (0..out_ch).step_by(4) {
            let m = 4.min(out_ch - o0);
            for (i, a) in acc.iter_mut().enumerate().take(m) {
                let b = bias.map_or(T::zero(), |b| b[o0 + i]);
                a[..n].iter_mut().for_each(|v| *v = b);
            }
            for r in 0..rows {
                let src = &cols[r * hw + p0..r * hw + p0 + n];
                for (i, a) in acc.iter_mut().enumerate().take(m) {
                    let w = weight[(o0 + i) * rows + r];
                    for (d, &s) in a[..n].iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
            for (i, a) in acc.iter().enumerate().take(m) {
                out[(o0 + i) * hw + p0..(o0 + i) * hw + p0 + n].copy_from_slice(&a[..n]);
            }
        }
    }
    out
}

fn check_conv_shapes<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, padding: usize) -> Result<(usize, usize, usize, usize, usize)> {
    let (c_in, h, w) = input.chw()?;
    let (c_out, kc, kh, kw) = match kernel.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(Error::Shape(format!("kernel must be 4-D, got {:?}", kernel.shape()))),
    };
    if kc != c_in {
        return Err(Error::Shape(format!("kernel expects {kc} input channels, input has {c_in}")));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::Shape(format!("kernel must be square with odd size, got {kh}×{kw}")));
    }
    if padding != (kh - 1) / 2 {
        return Err(Error::Shape(format!(
            "padding {padding} does not preserve size for a {kh}×{kh} kernel"
        )));
    }
    Ok((c_in, h, w, c_out, kh))
}

/// Same-size 2-D cross-correlation of a `C_in×H×W` input with a
/// `C_out×C_in×k×k` kernel.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, bias: Option<&[T]>, padding: usize) -> Result<Tensor<T>> {
    let (c_in, h, w, c_out, k) = check_conv_shapes(input, kernel, padding)?;
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::Shape(format!("bias has {} entries for {c_out} outputs", b.len())));
        }
    }
    let out = if k == 1 {
        gemm_rows(kernel.data(), bias, input.data(), c_out, h * w)
    } else {
        let cols = im2col(input.data(), c_in, h, w, k);
        gemm_rows(kernel.data(), bias, &cols, c_out, h * w)
    };
    Tensor::from_vec(&[c_out, h, w], out)
}

/// Gradients of a same-size convolution given the upstream gradient.
pub struct ConvGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    /// Present only when requested.
    pub input: Option<Vec<T>>,
}

/// Backward pass of [`conv2d`]. `cols` is the im2col expansion of the input
/// (or the input itself for 1×1 kernels).
pub(crate) fn conv2d_backward_cols<T: Scalar>(
    cols: &[T],
    weight: &[T],
    grad_out: &[T],
    c_in: usize,
    height: usize,
    width: usize,
    k: usize,
    want_input: bool,
) -> ConvGrads<T> {
    let hw = height * width;
    let rows = c_in * k * k;
    let c_out = grad_out.len() / hw;
    let gb: Vec<T> = grad_out.chunks_exact(hw).map(|g| g.iter().fold(T::zero(), |a, &v| a + v)).collect();
    // gwᵀ = cols · Gᵀ as a row GEMM: one pass over the pixels, an outer
    // product per pixel, each entry summed over pixels in order.
    let mut g_t = vec![T::zero(); hw * c_out];
    for o in 0..c_out {
        for (p, &v) in grad_out[o * hw..(o + 1) * hw].iter().enumerate() {
            g_t[p * c_out + o] = v;
        }
    }
    let gw_t = gemm_rows(cols, None, &g_t, rows, c_out);
    let mut gw = vec![T::zero(); c_out * rows];
    for r in 0..rows {
        for o in 0..c_out {
            gw[o * rows + r] = gw_t[r * c_out + o];
        }
    }
    let input = want_input.then(|| {
        let mut wt = vec![T::zero(); rows * c_out];
        for o in 0..c_out {
            for r in 0..rows {
                wt[r * c_out + o] = weight[o * rows + r];
            }
        }
        let gcols = gemm_rows(&wt, None, grad_out, rows, hw);
        if k == 1 {
            gcols
        } else {
            col2im(&gcols, c_in, height, width, k)
        }
    });
    ConvGrads { weight: gw, bias: gb, input }
}

/// Backward pass of [`conv2d`] from the raw input.
pub fn conv2d_backward<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, grad_out: &Tensor<T>, padding: usize) -> Result<ConvGrads<T>> {
    let (c_in, h, w, c_out, k) = check_conv_shapes(input, kernel, padding)?;
    if grad_out.shape() != [c_out, h, w] {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match output [{c_out}, {h}, {w}]",
            grad_out.shape()
        )));
    }
    let cols = if k == 1 {
        input.data().to_vec()
    } else {
        im2col(input.data(), c_in, h, w, k)
    };
    Ok(conv2d_backward_cols(&cols, kernel.data(), grad_out.data(), c_in, h, w, k, true))
}

pub(crate) fn relu_inplace<T: Scalar>(data: &mut [T]) {
    for v in data.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries where the ReLU output was clamped.
pub(crate) fn relu_backward_inplace<T: Scalar>(grad: &mut [T], activated: &[T]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Per-pixel class probabilities, stored `K×H×W` like the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap<T = f32> {
    classes: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> ProbMap<T> {
    /// Wraps raw probabilities, checking that each pixel lies on the simplex
    /// (to 1e-4).
    pub fn new(classes: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if classes == 0 || data.len() != classes * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {classes}×{height}×{width} probability map",
                data.len()
            )));
        }
        let map = ProbMap {
            classes,
            height,
            width,
            data,
        };
        for p in 0..height * width {
            let mut sum = 0.0;
            for k in 0..classes {
                let v = map.data[k * height * width + p].as_f64();
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::InvalidArgument(format!("probability {v} at pixel {p}")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-4 {
                return Err(Error::InvalidArgument(format!("pixel {p} sums to {sum}")));
            }
        }
        Ok(map)
    }

    /// Builds a map from per-pixel vectors listed in row-major order.
    pub fn from_pixels(height: usize, width: usize, pixels: &[Vec<T>]) -> Result<Self> {
        let classes = pixels.first().map_or(0, Vec::len);
        if pixels.len() != height * width || pixels.iter().any(|p| p.len() != classes) {
            return Err(Error::Shape("ragged or mis-sized pixel list".into()));
        }
        let hw = height * width;
        let mut data = vec![T::zero(); classes * hw];
        for (i, px) in pixels.iter().enumerate() {
            for (k, &v) in px.iter().enumerate() {
                data[k * hw + i] = v;
            }
        }
        ProbMap::new(classes, height, width, data)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn prob(&self, class: usize, index: usize) -> T {
        self.data[class * self.pixels() + index]
    }

    /// Probability vector at row-major pixel `index`.
    pub fn vector(&self, index: usize) -> Vec<T> {
        (0..self.classes).map(|k| self.prob(k, index)).collect()
    }

    /// Most likely class at `index`; ties go to the lowest class.
    #[inline]
    pub fn argmax(&self, index: usize) -> usize {
        let mut best = 0;
        let mut best_p = self.prob(0, index);
        for k in 1..self.classes {
            let p = self.prob(k, index);
            if p > best_p {
                best = k;
                best_p = p;
            }
        }
        best
    }

    pub fn argmax_map(&self) -> Vec<u8> {
        (0..self.pixels()).map(|i| self.argmax(i) as u8).collect()
    }

    pub fn same_dims(&self, other: &ProbMap<T>) -> bool {
        self.classes == other.classes && self.height == other.height && self.width == other.width
    }

    pub fn cast<U: Scalar>(&self) -> ProbMap<U> {
        ProbMap {
            classes: self.classes,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Channel-wise softmax of `K×H×W` logits with max subtraction.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Result<ProbMap<T>> {
    let (k, h, w) = logits.chw()?;
    if k == 0 {
        return Err(Error::Shape("softmax over zero classes".into()));
    }
    let hw = h * w;
    let src = logits.data();
    let mut data = vec![T::zero(); k * hw];
    for p in 0..hw {
        let mut max = src[p];
        for c in 1..k {
            max = max.max(src[c * hw + p]);
        }
        let mut sum = 0.0f64;
        for c in 0..k {
            let e = (src[c * hw + p] - max).exp();
            data[c * hw + p] = e;
            sum += e.as_f64();
        }
        let inv = 1.0 / sum;
        for c in 0..k {
            data[c * hw + p] = T::from_f64(data[c * hw + p].as_f64() * inv);
        }
    }
    Ok(ProbMap {
        classes: k,
        height: h,
        width: w,
        data,
    })
}

/// Loss value together with its gradient with respect to the logits that
/// produced the probability map.
#[derive(Clone, Debug)]
pub struct LossGrad<T> {
    pub value: f64,
    pub pixels: usize,
    pub grad_logits: Tensor<T>,
}

pub(crate) fn check_labels<T: Scalar>(pred: &ProbMap<T>, labels: &SparseLabelMap) -> Result<()> {
    if labels.width() != pred.width() || labels.height() != pred.height() {
        return Err(Error::Shape(format!(
            "labels are {}×{}, prediction is {}×{}",
            labels.width(),
            labels.height(),
            pred.width(),
            pred.height()
        )));
    }
    if let Some(&bad) = labels
        .as_slice()
        .iter()
        .find(|&&v| v != IGNORE && v as usize >= pred.classes())
    {
        return Err(Error::InvalidLabel {
            value: bad,
            classes: pred.classes(),
        });
    }
    Ok(())
}

/// Mean of `-ln p(y)` over non-IGNORE pixels, with the gradient with respect
/// to the logits (`(p - onehot(y)) / N` at labeled pixels, zero elsewhere).
pub fn masked_cross_entropy<T: Scalar>(pred: &ProbMap<T>, labels: &SparseLabelMap) -> Result<LossGrad<T>> {
    check_labels(pred, labels)?;
    let (k, hw) = (pred.classes(), pred.pixels());
    let mut grad = Tensor::zeros(&[k, pred.height(), pred.width()]);
    let labeled = labels.annotated_count();
    if labeled == 0 {
        return Ok(LossGrad {
            value: 0.0,
            pixels: 0,
            grad_logits: grad,
        });
    }
    let inv = 1.0 / labeled as f64;
    let scale = T::from_f64(inv);
    let g = grad.data_mut();
    let mut total = 0.0f64;
    for (p, &y) in labels.as_slice().iter().enumerate() {
        if y == IGNORE {
            continue;
        }
        let y = y as usize;
        let py = pred.prob(y, p).as_f64().max(f64::MIN_POSITIVE);
        total -= py.ln();
        for c in 0..k {
            let target = if c == y { T::one() } else { T::zero() };
            g[c * hw + p] = (pred.prob(c, p) - target) * scale;
        }
    }
    Ok(LossGrad {
        value: total * inv,
        pixels: labeled,
        grad_logits: grad,
    })
}

/// Shannon entropy (natural log) of a probability vector; `0·ln 0 = 0`.
pub fn entropy<T: Scalar>(p: impl IntoIterator<Item = T>) -> f64 {
    p.into_iter()
        .map(|v| v.as_f64())
        .filter(|&v| v > 0.0)
        .map(|v| -v * v.ln())
        .sum()
}
