//! Cross entropy on a handful of labeled pixels, evaluated only on their
//! receptive field.
//!
//! A labeled pixel's logits depend on the 3×3 hidden neighbourhood around
//! it and, through that, on a 5×5 input window. With a few dozen labels per
//! image this is a small fraction of the dense pass; the result is the same
//! loss and gradient up to floating-point summation order.

use super::{Gradients, ModelParams, FEATURE_CHANNELS, HIDDEN_CHANNELS, IN_CHANNELS, KERNEL};
use crate::error::{Error, Result};
use crate::numerics::{
    conv2d_backward_cols, gemm_rows, masked_cross_entropy, relu_backward_inplace, relu_inplace, softmax_channels,
    Scalar, Tensor,
};
use crate::oracle::SparseLabelMap;

const NONE: u32 = u32::MAX;

/// Mean cross entropy over annotated pixels and its parameter gradients.
#[derive(Clone, Debug)]
pub struct LocalLoss<T> {
    pub value: f64,
    pub pixels: usize,
    pub grads: Gradients<T>,
}

/// Offsets of the 3×3 window around `(x, y)` in im2col row order; `None`
/// outside the image.
fn window(x: usize, y: usize, w: usize, h: usize) -> impl Iterator<Item = Option<usize>> {
    (0..KERNEL).flat_map(move |ky| {
        (0..KERNEL).map(move |kx| {
            let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
            (sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w).then(|| sy as usize * w + sx as usize)
        })
    })
}

impl<T: Scalar> ModelParams<T> {
    /// Single-head cross entropy restricted to the annotated pixels' receptive
    /// fields.
    pub fn local_cross_entropy(&self, image: &Tensor<T>, labels: &SparseLabelMap) -> Result<LocalLoss<T>> {
        if self.num_heads() != 1 {
            return Err(Error::InvalidArgument("local loss is defined for the single-head task model".into()));
        }
        let (c, h, w) = image.chw()?;
        if c != IN_CHANNELS || labels.width() != w || labels.height() != h {
            return Err(Error::Shape(format!(
                "image {c}×{h}×{w} with labels {}×{}",
                labels.width(),
                labels.height()
            )));
        }
        labels.validate(self.classes())?;
        if !image.is_finite() {
            return Err(Error::NonFinite("input image".into()));
        }
        let hw = h * w;
        let labeled: Vec<usize> = (0..hw).filter(|&i| labels.is_annotated(i)).collect();
        let mut grads = self.params.zeros_like();
        if labeled.is_empty() {
            return Ok(LocalLoss {
                value: 0.0,
                pixels: 0,
                grads,
            });
        }

        // Hidden pixels feeding the labeled features, in row-major order.
        let mut hpos = vec![NONE; hw];
        for &i in &labeled {
            for j in window(i % w, i / w, w, h).flatten() {
                hpos[j] = 0;
            }
        }
        let hidden_px: Vec<usize> = (0..hw).filter(|&j| hpos[j] != NONE).collect();
        for (n, &j) in hidden_px.iter().enumerate() {
            hpos[j] = n as u32;
        }
        let (nh, nf) = (hidden_px.len(), labeled.len());

        let rows1 = IN_CHANNELS * KERNEL * KERNEL;
        let mut cols1 = vec![T::zero(); rows1 * nh];
        let img = image.data();
        for (n, &j) in hidden_px.iter().enumerate() {
            for (t, src) in window(j % w, j / w, w, h).enumerate() {
                if let Some(s) = src {
                    for ch in 0..IN_CHANNELS {
                        cols1[(ch * KERNEL * KERNEL + t) * nh + n] = img[ch * hw + s];
                    }
                }
            }
        }
        let p = &self.params;
        let mut hidden = gemm_rows(p.conv1.weight.data(), Some(&p.conv1.bias), &cols1, HIDDEN_CHANNELS, nh);
        relu_inplace(&mut hidden);

        let rows2 = HIDDEN_CHANNELS * KERNEL * KERNEL;
        let mut cols2 = vec![T::zero(); rows2 * nf];
        let mut links: Vec<[u32; KERNEL * KERNEL]> = Vec::with_capacity(nf);
        for (n, &i) in labeled.iter().enumerate() {
            let mut link = [NONE; KERNEL * KERNEL];
            for (t, src) in window(i % w, i / w, w, h).enumerate() {
                if let Some(s) = src {
                    let m = hpos[s] as usize;
                    link[t] = m as u32;
                    for ch in 0..HIDDEN_CHANNELS {
                        cols2[(ch * KERNEL * KERNEL + t) * nf + n] = hidden[ch * nh + m];
                    }
                }
            }
            links.push(link);
        }
        let mut features = gemm_rows(p.conv2.weight.data(), Some(&p.conv2.bias), &cols2, FEATURE_CHANNELS, nf);
        relu_inplace(&mut features);

        let head = &p.heads[0];
        let k = head.out_channels();
        let logits = gemm_rows(head.weight.data(), Some(&head.bias), &features, k, nf);
        let probs = softmax_channels(&Tensor::from_vec(&[k, 1, nf], logits)?)?;
        let picked = SparseLabelMap::from_vec(nf, 1, labeled.iter().map(|&i| labels.as_slice()[i]).collect())?;
        let ce = masked_cross_entropy(&probs, &picked)?;
        if !ce.value.is_finite() {
            return Err(Error::NonFinite("local cross entropy".into()));
        }

        let hg = conv2d_backward_cols(&features, head.weight.data(), ce.grad_logits.data(), FEATURE_CHANNELS, 1, nf, 1, true);
        grads.heads[0].weight.data_mut().copy_from_slice(&hg.weight);
        grads.heads[0].bias.copy_from_slice(&hg.bias);
        let mut g_feat = hg.input.expect("requested");
        relu_backward_inplace(&mut g_feat, &features);

        let g2 = conv2d_backward_cols(&cols2, p.conv2.weight.data(), &g_feat, HIDDEN_CHANNELS, 1, nf, KERNEL, false);
        grads.conv2.weight.data_mut().copy_from_slice(&g2.weight);
        grads.conv2.bias.copy_from_slice(&g2.bias);

        let w2 = p.conv2.weight.data();
        let mut w2_t = vec![T::zero(); rows2 * FEATURE_CHANNELS];
        for o in 0..FEATURE_CHANNELS {
            for r in 0..rows2 {
                w2_t[r * FEATURE_CHANNELS + o] = w2[o * rows2 + r];
            }
        }
        let g_cols2 = gemm_rows(&w2_t, None, &g_feat, rows2, nf);
        let mut g_hidden = vec![T::zero(); HIDDEN_CHANNELS * nh];
        for (n, link) in links.iter().enumerate() {
            for (t, &m) in link.iter().enumerate() {
                if m == NONE {
                    continue;
                }
                for ch in 0..HIDDEN_CHANNELS {
                    g_hidden[ch * nh + m as usize] += g_cols2[(ch * KERNEL * KERNEL + t) * nf + n];
                }
            }
        }
        relu_backward_inplace(&mut g_hidden, &hidden);
        let g1 = conv2d_backward_cols(&cols1, p.conv1.weight.data(), &g_hidden, IN_CHANNELS, 1, nh, KERNEL, false);
        grads.conv1.weight.data_mut().copy_from_slice(&g1.weight);
        grads.conv1.bias.copy_from_slice(&g1.bias);

        Ok(LocalLoss {
            value: ce.value,
            pixels: nf,
            grads,
        })
    }
}
