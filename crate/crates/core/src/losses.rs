//! Training objectives and the discrepancy min-max round.
//!
//! Head-level losses take a probability map and return the gradient with
//! respect to that head's logits; model-level losses run the selector
//! forward and return parameter gradients. All reductions are means.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BackboneCache, GradScope, Gradients, ModelParams, ParamSet, StepOutcome, Update};
use crate::numerics::{check_labels, entropy, masked_cross_entropy, ProbMap, Scalar, Tensor};
use crate::oracle::{SparseLabelMap, IGNORE};
use crate::par::{self, Execution};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossName {
    #[serde(rename = "L_s")]
    Source,
    #[serde(rename = "L_self")]
    SelfTraining,
    #[serde(rename = "L_dis")]
    Discrepancy,
    #[serde(rename = "L_t")]
    TargetSparse,
    #[serde(rename = "L_ent")]
    Entropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub name: LossName,
    pub value: f64,
    pub pixels_used: usize,
}

/// A head-level loss with its gradient w.r.t. that head's logits.
#[derive(Clone, Debug)]
pub struct HeadLoss<T> {
    pub report: LossReport,
    pub grad_logits: Tensor<T>,
}

/// A model-level loss with its parameter gradients.
#[derive(Clone, Debug)]
pub struct ModelLoss<T> {
    pub report: LossReport,
    pub grads: Gradients<T>,
}

fn finite(report: LossReport) -> Result<LossReport> {
    if report.value.is_finite() {
        Ok(report)
    } else {
        Err(Error::NonFinite(format!("{:?} loss", report.name)))
    }
}

/// Dense cross entropy on a fully labeled source image.
pub fn loss_source<T: Scalar>(pred: &ProbMap<T>, labels: &SparseLabelMap) -> Result<HeadLoss<T>> {
    check_labels(pred, labels)?;
    if !labels.is_dense() {
        return Err(Error::InvalidArgument("source labels must be dense".into()));
    }
    let lg = masked_cross_entropy(pred, labels)?;
    Ok(HeadLoss {
        report: finite(LossReport {
            name: LossName::Source,
            value: lg.value,
            pixels_used: lg.pixels,
        })?,
        grad_logits: lg.grad_logits,
    })
}

/// Cross entropy over annotated pixels only.
pub fn loss_target_sparse<T: Scalar>(pred: &ProbMap<T>, annotations: &SparseLabelMap) -> Result<HeadLoss<T>> {
    let lg = masked_cross_entropy(pred, annotations)?;
    Ok(HeadLoss {
        report: finite(LossReport {
            name: LossName::TargetSparse,
            value: lg.value,
            pixels_used: lg.pixels,
        })?,
        grad_logits: lg.grad_logits,
    })
}

/// Argmax class where its probability reaches `tau`, IGNORE elsewhere.
pub fn make_pseudo_labels<T: Scalar>(pred: &ProbMap<T>, tau: f64) -> SparseLabelMap {
    let labels = (0..pred.pixels())
        .map(|i| {
            let k = pred.argmax(i);
            if pred.prob(k, i).as_f64() >= tau {
                k as u8
            } else {
                IGNORE
            }
        })
        .collect();
    SparseLabelMap::from_vec(pred.width(), pred.height(), labels).expect("sized from the map")
}

/// Mean entropy over unannotated pixels, with
/// `∂H/∂z_j = −p_j (ln p_j + H)` per pixel.
pub fn loss_entropy_reg<T: Scalar>(pred: &ProbMap<T>, annotations: &SparseLabelMap) -> Result<HeadLoss<T>> {
    check_labels(pred, annotations)?;
    let (k, hw) = (pred.classes(), pred.pixels());
    let mut grad = Tensor::zeros(&[k, pred.height(), pred.width()]);
    let support = hw - annotations.annotated_count();
    let mut total = 0.0;
    if support > 0 {
        let inv = 1.0 / support as f64;
        let g = grad.data_mut();
        for i in (0..hw).filter(|&i| !annotations.is_annotated(i)) {
            let h = entropy((0..k).map(|c| pred.prob(c, i)));
            total += h;
            for c in 0..k {
                let p = pred.prob(c, i).as_f64();
                if p > 0.0 {
                    g[c * hw + i] = T::from_f64(-p * (p.ln() + h) * inv);
                }
            }
        }
        total *= inv;
    }
    Ok(HeadLoss {
        report: finite(LossReport {
            name: LossName::Entropy,
            value: total,
            pixels_used: support,
        })?,
        grad_logits: grad,
    })
}

/// `∂L/∂z_j = p_j (g_j − Σ_k p_k g_k)` at every pixel, given `g = ∂L/∂p`
/// stored class-major.
fn softmax_backward<T: Scalar>(pred: &ProbMap<T>, grad_probs: &mut [f64]) -> Tensor<T> {
    let (k, hw) = (pred.classes(), pred.pixels());
    let mut out = Tensor::zeros(&[k, pred.height(), pred.width()]);
    let o = out.data_mut();
    for i in 0..hw {
        let dot: f64 = (0..k).map(|c| pred.prob(c, i).as_f64() * grad_probs[c * hw + i]).sum();
        for c in 0..k {
            o[c * hw + i] = T::from_f64(pred.prob(c, i).as_f64() * (grad_probs[c * hw + i] - dot));
        }
    }
    out
}

/// Mean per-pixel L1 distance between two heads, with gradients w.r.t. both
/// heads' logits.
///
/// Where `p1_k = p2_k` exactly (always the case right after cloning) the
/// subgradient `+1` is taken on head 1's argmax class and `−1` on the
/// others, mirrored for head 2. Any sign choice in `[−1, 1]` is valid
/// there; a constant one would vanish through the softmax and leave cloned
/// heads stuck at zero discrepancy.
pub fn discrepancy_from_probs<T: Scalar>(p1: &ProbMap<T>, p2: &ProbMap<T>) -> Result<(f64, Tensor<T>, Tensor<T>)> {
    if !p1.same_dims(p2) {
        return Err(Error::Shape("heads disagree on output size".into()));
    }
    let (k, hw) = (p1.classes(), p1.pixels());
    let inv = 1.0 / hw as f64;
    let mut g1 = vec![0.0f64; k * hw];
    let mut total = 0.0;
    for i in 0..hw {
        let top = p1.argmax(i);
        for c in 0..k {
            let (a, b) = (p1.prob(c, i).as_f64(), p2.prob(c, i).as_f64());
            total += (a - b).abs();
            let s = if a > b {
                1.0
            } else if a < b {
                -1.0
            } else if c == top {
                1.0
            } else {
                -1.0
            };
            g1[c * hw + i] = s * inv;
        }
    }
    let mut g2: Vec<f64> = g1.iter().map(|v| -v).collect();
    let d1 = softmax_backward(p1, &mut g1);
    let d2 = softmax_backward(p2, &mut g2);
    Ok((total * inv, d1, d2))
}

fn require_two_heads<T: Scalar>(selector: &ModelParams<T>) -> Result<()> {
    if selector.num_heads() != 2 {
        return Err(Error::InvalidArgument(format!("selector needs 2 heads, has {}", selector.num_heads())));
    }
    Ok(())
}

/// Sum of both heads' cross entropies against shared pseudo labels.
pub fn loss_self<T: Scalar>(selector: &ModelParams<T>, image: &Tensor<T>, pseudo: &SparseLabelMap) -> Result<ModelLoss<T>> {
    require_two_heads(selector)?;
    let cache = selector.backbone(image)?;
    let probs = selector.head_probs(&cache)?;
    let a = masked_cross_entropy(&probs[0], pseudo)?;
    let b = masked_cross_entropy(&probs[1], pseudo)?;
    let grads = selector.backward(&cache, &[Some(&a.grad_logits), Some(&b.grad_logits)], GradScope::All);
    Ok(ModelLoss {
        report: finite(LossReport {
            name: LossName::SelfTraining,
            value: a.value + b.value,
            pixels_used: a.pixels,
        })?,
        grads,
    })
}

fn discrepancy_on_cache<T: Scalar>(
    selector: &ModelParams<T>,
    cache: &BackboneCache<T>,
    scope: Option<GradScope>,
) -> Result<ModelLoss<T>> {
    let probs = selector.head_probs(cache)?;
    let (value, d1, d2) = discrepancy_from_probs(&probs[0], &probs[1])?;
    let grads = match scope {
        Some(scope) => selector.backward(cache, &[Some(&d1), Some(&d2)], scope),
        None => selector.params.zeros_like(),
    };
    Ok(ModelLoss {
        report: finite(LossReport {
            name: LossName::Discrepancy,
            value,
            pixels_used: probs[0].pixels(),
        })?,
        grads,
    })
}

/// Mean L1 distance between the selector's heads on one image, with
/// gradients for every parameter.
pub fn loss_discrepancy<T: Scalar>(selector: &ModelParams<T>, image: &Tensor<T>) -> Result<ModelLoss<T>> {
    require_two_heads(selector)?;
    let cache = selector.backbone(image)?;
    discrepancy_on_cache(selector, &cache, Some(GradScope::All))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMaxSettings {
    pub inner_max_steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Re-run the backbone after the descent step to report the final L_dis.
    pub measure_descent: bool,
}

impl Default for MinMaxSettings {
    fn default() -> Self {
        MinMaxSettings {
            inner_max_steps: 4,
            lr: 1e-3,
            momentum: 0.9,
            measure_descent: false,
        }
    }
}

/// Mean L_dis over a batch at three points of one round.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMaxOutcome {
    pub before: f64,
    pub after_ascent: f64,
    pub after_descent: Option<f64>,
    pub skipped_steps: usize,
}

fn mean_loss<T: Scalar>(losses: Vec<ModelLoss<T>>) -> (f64, Gradients<T>) {
    let n = losses.len() as f64;
    let value = losses.iter().map(|l| l.report.value).sum::<f64>() / n;
    let grads: Vec<ParamSet<T>> = losses.into_iter().map(|l| l.grads).collect();
    (value, ParamSet::mean_of(&grads).expect("non-empty batch"))
}

fn batch_discrepancy<T: Scalar>(
    selector: &ModelParams<T>,
    caches: &[BackboneCache<T>],
    scope: Option<GradScope>,
    exec: Execution,
) -> Result<(f64, Gradients<T>)> {
    let losses = par::map(exec, caches, |_, c| discrepancy_on_cache(selector, c, scope))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_loss(losses))
}

/// One alternation of the min-max game on a batch: `inner_max_steps`
/// ascent steps on both heads with the backbone frozen, then one descent
/// step on the backbone with the heads frozen.
pub fn discrepancy_minmax_round<T: Scalar>(
    selector: &mut ModelParams<T>,
    batch: &[Tensor<T>],
    settings: &MinMaxSettings,
    exec: Execution,
) -> Result<MinMaxOutcome> {
    require_two_heads(selector)?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let caches = {
        let sel = &*selector;
        par::map(exec, batch, |_, img| sel.backbone(img))
            .into_iter()
            .collect::<Result<Vec<_>>>()?
    };
    let mut skipped = 0;
    let mut step = |sel: &mut ModelParams<T>, grads: &Gradients<T>, update| -> Result<()> {
        if sel.sgd_step(grads, settings.lr, settings.momentum, update)? == StepOutcome::SkippedNonFinite {
            skipped += 1;
        }
        Ok(())
    };

    let (before, mut grads) = batch_discrepancy(selector, &caches, Some(GradScope::HeadsOnly), exec)?;
    for i in 0..settings.inner_max_steps {
        if i > 0 {
            grads = batch_discrepancy(selector, &caches, Some(GradScope::HeadsOnly), exec)?.1;
        }
        step(selector, &grads, Update::AscendHeads)?;
    }
    let after_ascent = if settings.inner_max_steps == 0 {
        before
    } else {
        batch_discrepancy(selector, &caches, None, exec)?.0
    };

    let (_, grads) = batch_discrepancy(selector, &caches, Some(GradScope::All), exec)?;
    step(selector, &grads, Update::DescendBackbone)?;

    let after_descent = if settings.measure_descent {
        let sel = &*selector;
        let losses = par::map(exec, batch, |_, img| {
            let cache = sel.backbone(img)?;
            discrepancy_on_cache(sel, &cache, None)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Some(mean_loss(losses).0)
    } else {
        None
    };
    Ok(MinMaxOutcome {
        before,
        after_ascent,
        after_descent,
        skipped_steps: skipped,
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: usize,
    pub phase: String,
    pub step: usize,
    pub loss: LossName,
    pub value: f64,
    pub pixels_used: usize,
}

/// Line-delimited JSON sink for loss values. A log without a file only
/// keeps a count.
#[derive(Debug, Default)]
pub struct TrainLog {
    out: Option<BufWriter<File>>,
    records: usize,
}

impl TrainLog {
    pub fn discard() -> Self {
        Self::default()
    }

    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io_path(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io_path(path, e))?;
        Ok(TrainLog {
            out: Some(BufWriter::new(file)),
            records: 0,
        })
    }

    pub fn record(&mut self, stage: usize, phase: &str, step: usize, report: &LossReport) -> Result<()> {
        self.records += 1;
        if let Some(out) = &mut self.out {
            let rec = LogRecord {
                stage,
                phase: phase.to_string(),
                step,
                loss: report.name,
                value: report.value,
                pixels_used: report.pixels_used,
            };
            serde_json::to_writer(&mut *out, &rec).map_err(|e| Error::io("training log", e.into()))?;
            out.write_all(b"\n").map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }

    pub fn records(&self) -> usize {
        self.records
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(out) = &mut self.out {
            out.flush().map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(pixels: &[Vec<f64>], h: usize, w: usize) -> ProbMap<f64> {
        ProbMap::from_pixels(h, w, pixels).unwrap()
    }

    fn random_map(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize) -> ProbMap<f64> {
        let px: Vec<Vec<f64>> = (0..h * w)
            .map(|_| {
                let v: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect()
            })
            .collect();
        map(&px, h, w)
    }

    fn dense(w: usize, h: usize, v: Vec<u8>) -> SparseLabelMap {
        SparseLabelMap::from_vec(w, h, v).unwrap()
    }

    #[test]
    fn source_loss_cases() {
        let onehot = map(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1, 2);
        assert_eq!(loss_source(&onehot, &dense(2, 1, vec![0, 1])).unwrap().report.value, 0.0);
        let uniform = map(&vec![vec![0.2; 5]; 6], 2, 3);
        let l = loss_source(&uniform, &dense(3, 2, vec![0, 1, 2, 3, 4, 0])).unwrap();
        assert!((l.report.value - 5f64.ln()).abs() < 1e-12);
        assert!(loss_source(&uniform, &dense(3, 2, vec![0, 1, IGNORE, 3, 4, 0])).is_err());
    }

    #[test]
    fn source_loss_matches_reference_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_map(&mut rng, 4, 3, 5);
        let labels: Vec<u8> = (0..15).map(|_| rng.random_range(0..4)).collect();
        let got = loss_source(&p, &dense(5, 3, labels.clone())).unwrap().report.value;
        let mut want = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            want -= p.vector(i)[y as usize].ln();
        }
        assert!((got - want / 15.0).abs() < 1e-6);
    }

    #[test]
    fn target_sparse_cases() {
        let p = map(&[vec![0.25, 0.75], vec![0.5, 0.5]], 1, 2);
        let none = loss_target_sparse(&p, &SparseLabelMap::new_ignored(2, 1)).unwrap();
        assert_eq!(none.report.value, 0.0);
        assert!(none.grad_logits.data().iter().all(|&g| g == 0.0));
        let one = loss_target_sparse(&p, &dense(2, 1, vec![0, IGNORE])).unwrap();
        assert!((one.report.value - 4f64.ln()).abs() < 1e-12);
        let labels = dense(2, 1, vec![1, 0]);
        let a = loss_target_sparse(&p, &labels).unwrap();
        let b = loss_source(&p, &labels).unwrap();
        assert_eq!(a.report.value, b.report.value);
        assert_eq!(a.grad_logits, b.grad_logits);
    }

    #[test]
    fn pseudo_label_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_map(&mut rng, 3, 4, 4);
        assert!(make_pseudo_labels(&p, 0.0).is_dense());
        assert_eq!(make_pseudo_labels(&p, 1.0).annotated_count(), 0);
        let got = make_pseudo_labels(&p, 0.5);
        for i in 0..16 {
            let v = p.vector(i);
            let (mut best, mut k) = (v[0], 0);
            for (c, &x) in v.iter().enumerate() {
                if x > best {
                    best = x;
                    k = c;
                }
            }
            let want = if best >= 0.5 { k as u8 } else { IGNORE };
            assert_eq!(got.as_slice()[i], want);
        }
    }

    #[test]
    fn entropy_reg_cases() {
        let uniform = map(&vec![vec![0.25; 4]; 2], 1, 2);
        let l = loss_entropy_reg(&uniform, &SparseLabelMap::new_ignored(2, 1)).unwrap();
        assert!((l.report.value - 4f64.ln()).abs() < 1e-12);
        assert!(l.grad_logits.data().iter().all(|g| g.abs() < 1e-15));
        let onehot = map(&[vec![1.0, 0.0]], 1, 1);
        assert_eq!(loss_entropy_reg(&onehot, &SparseLabelMap::new_ignored(1, 1)).unwrap().report.value, 0.0);
        let all = loss_entropy_reg(&uniform, &dense(2, 1, vec![0, 1])).unwrap();
        assert_eq!((all.report.value, all.report.pixels_used), (0.0, 0));
    }

    #[test]
    fn discrepancy_cases() {
        let p1 = map(&[vec![0.6, 0.4]], 1, 1);
        let p2 = map(&[vec![0.2, 0.8]], 1, 1);
        assert!((discrepancy_from_probs(&p1, &p2).unwrap().0 - 0.8).abs() < 1e-12);
        assert_eq!(discrepancy_from_probs(&p1, &p1).unwrap().0, 0.0);
        let a = map(&[vec![1.0, 0.0]], 1, 1);
        let b = map(&[vec![0.0, 1.0]], 1, 1);
        assert_eq!(discrepancy_from_probs(&a, &b).unwrap().0, 2.0);
    }

    #[test]
    fn tie_subgradient_pushes_heads_apart() {
        let p = map(&[vec![0.5, 0.3, 0.2]], 1, 1);
        let (_, g1, g2) = discrepancy_from_probs(&p, &p).unwrap();
        assert!(g1.data()[0] > 0.0, "head 1 raises its top class");
        assert!(g2.data()[0] < 0.0, "head 2 lowers it");
        let s: f64 = g1.data().iter().sum();
        assert!(s.abs() < 1e-15);
    }

    fn image(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[3, h, w], (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn self_loss_duplicated_heads_and_symmetry() {
        let task = ModelParams::<f64>::init(4, 2).unwrap();
        let sel = task.clone_selector().unwrap();
        let img = image(9, 6, 6);
        let pred = task.forward(&img).unwrap();
        let pseudo = make_pseudo_labels(&pred.probs[0], 0.0);
        let single = masked_cross_entropy(&pred.probs[0], &pseudo).unwrap().value;
        let l = loss_self(&sel, &img, &pseudo).unwrap();
        assert!((l.report.value - 2.0 * single).abs() < 1e-12);

        let mut sel = ModelParams::<f64>::init(4, 3).unwrap().clone_selector().unwrap();
        sel.params.heads[1] = ModelParams::<f64>::init(4, 4).unwrap().params.heads[0].clone();
        let mut swapped = sel.clone();
        swapped.params.heads.swap(0, 1);
        let a = loss_self(&sel, &img, &pseudo).unwrap().report.value;
        let b = loss_self(&swapped, &img, &pseudo).unwrap().report.value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn zero_inner_steps_touch_only_the_backbone() {
        let mut sel = ModelParams::<f32>::init(3, 1).unwrap().clone_selector().unwrap();
        sel.params.heads[1] = ModelParams::<f32>::init(3, 2).unwrap().params.heads[0].clone();
        let heads = sel.params.heads.clone();
        let conv1 = sel.params.conv1.clone();
        let batch = vec![image(1, 6, 6).cast(), image(2, 6, 6).cast()];
        let settings = MinMaxSettings {
            inner_max_steps: 0,
            ..Default::default()
        };
        let out = discrepancy_minmax_round(&mut sel, &batch, &settings, Execution::Sequential).unwrap();
        assert_eq!(out.before, out.after_ascent);
        assert_eq!(sel.params.heads, heads);
        assert_ne!(sel.params.conv1, conv1);
    }

    #[test]
    fn ascent_separates_cloned_heads() {
        let mut sel = ModelParams::<f32>::init(4, 7).unwrap().clone_selector().unwrap();
        let batch = vec![image(3, 8, 8).cast()];
        let settings = MinMaxSettings {
            measure_descent: true,
            ..Default::default()
        };
        let out = discrepancy_minmax_round(&mut sel, &batch, &settings, Execution::Sequential).unwrap();
        assert_eq!(out.before, 0.0);
        assert!(out.after_ascent > 0.0);
        assert!(out.after_descent.is_some());
    }

    #[test]
    fn train_log_writes_one_line_per_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log/train.jsonl");
        let mut log = TrainLog::create(&path).unwrap();
        let r = LossReport {
            name: LossName::Discrepancy,
            value: 0.5,
            pixels_used: 4,
        };
        log.record(1, "minmax", 0, &r).unwrap();
        log.record(1, "minmax", 1, &r).unwrap();
        log.flush().unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<LogRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert!(text.contains("\"L_dis\""));
    }
}
