//! Central finite-difference check of the hand-written gradients.
//!
//! Runs in `f64`. A sampled parameter whose ±h perturbation flips a ReLU
//! unit or the sign of an L1 term sits on a kink, where the finite
//! difference is meaningless; it is skipped and another one drawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use super::masked_cross_entropy;
use crate::losses::{discrepancy_from_probs, loss_discrepancy, loss_entropy_reg, loss_self, loss_source, loss_target_sparse};
use crate::model::{GradScope, Gradients, ModelParams};
use crate::oracle::SparseLabelMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
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

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::Source,
        Objective::SelfTraining,
        Objective::Discrepancy,
        Objective::TargetSparse,
        Objective::Entropy,
    ];

    pub fn heads(self) -> usize {
        match self {
            Objective::SelfTraining | Objective::Discrepancy => 2,
            _ => 1,
        }
    }
}

/// One image with the labels the objective needs: dense ground truth for
/// `L_s`, pseudo labels for `L_self`, sparse annotations for `L_t` and
/// `L_ent`. Ignored by `L_dis`.
#[derive(Clone, Debug)]
pub struct GradCheckBatch {
    pub image: Tensor<f64>,
    pub labels: SparseLabelMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub samples: usize,
    pub h: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            samples: 50,
            h: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub objective: Objective,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// Parameter with the largest error, as `name[index]`.
    pub worst: Option<String>,
}

/// Gradients below this magnitude on both sides count as agreeing zeros.
const ZERO: f64 = 1e-10;

/// `|a − n| / max(|a|, |n|)`, or 0 when both are negligible.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ZERO {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn value_and_grads(model: &ModelParams<f64>, batch: &GradCheckBatch, objective: Objective) -> Result<(f64, Gradients<f64>)> {
    match objective {
        Objective::SelfTraining => loss_self(model, &batch.image, &batch.labels).map(|l| (l.report.value, l.grads)),
        Objective::Discrepancy => loss_discrepancy(model, &batch.image).map(|l| (l.report.value, l.grads)),
        _ => {
            let cache = model.backbone(&batch.image)?;
            let probs = model.head_probs(&cache)?;
            let loss = match objective {
                Objective::Source => loss_source(&probs[0], &batch.labels)?,
                Objective::TargetSparse => loss_target_sparse(&probs[0], &batch.labels)?,
                _ => loss_entropy_reg(&probs[0], &batch.labels)?,
            };
            let grads = model.backward(&cache, &[Some(&loss.grad_logits)], GradScope::All);
            Ok((loss.report.value, grads))
        }
    }
}

/// Forward-only loss value, plus everything that must stay fixed between
/// `−h` and `+h` for the finite difference to be valid.
fn value_and_pattern(model: &ModelParams<f64>, batch: &GradCheckBatch, objective: Objective) -> Result<(f64, Vec<bool>)> {
    let cache = model.backbone(&batch.image)?;
    let mut bits = cache.relu_pattern();
    let probs = model.head_probs(&cache)?;
    let value = match objective {
        Objective::Source => loss_source(&probs[0], &batch.labels)?.report.value,
        Objective::TargetSparse => loss_target_sparse(&probs[0], &batch.labels)?.report.value,
        Objective::Entropy => loss_entropy_reg(&probs[0], &batch.labels)?.report.value,
        Objective::SelfTraining => {
            masked_cross_entropy(&probs[0], &batch.labels)?.value + masked_cross_entropy(&probs[1], &batch.labels)?.value
        }
        Objective::Discrepancy => {
            bits.extend(probs[0].data().iter().zip(probs[1].data()).map(|(a, b)| a > b));
            discrepancy_from_probs(&probs[0], &probs[1])?.0
        }
    };
    Ok((value, bits))
}

/// Compares analytic gradients with central differences on `samples`
/// randomly drawn parameters and reports the largest relative error.
pub fn check_gradients(
    model: &ModelParams<f64>,
    batch: &GradCheckBatch,
    objective: Objective,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if model.num_heads() != objective.heads() {
        return Err(Error::InvalidArgument(format!(
            "{objective:?} needs a {}-head model, got {}",
            objective.heads(),
            model.num_heads()
        )));
    }
    let (c, h, w) = batch.image.chw()?;
    if h > 16 || w > 16 || c != 3 {
        return Err(Error::Shape(format!("grad-check images are at most 3×16×16, got {c}×{h}×{w}")));
    }
    if !(config.h > 0.0) || config.samples == 0 {
        return Err(Error::InvalidArgument("grad-check needs h > 0 and at least one sample".into()));
    }

    let (_, analytic) = value_and_grads(model, batch, objective)?;
    let (_, base_pattern) = value_and_pattern(model, batch, objective)?;
    let names: Vec<(String, usize)> = analytic.arrays().iter().map(|a| (a.0.clone(), a.3.len())).collect();
    let grads: Vec<Vec<f64>> = analytic.arrays().iter().map(|a| a.3.to_vec()).collect();
    let total: usize = names.iter().map(|n| n.1).sum();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport {
        objective,
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst: None,
    };
    let mut probe = model.clone();
    let max_draws = 20 * config.samples.max(names.len());
    let mut draws = 0;
    while report.checked < config.samples && draws < max_draws {
        // The first draws visit every array once so no layer goes unchecked.
        let (array, offset) = if draws < names.len() {
            (draws, rng.random_range(0..names[draws].1))
        } else {
            let mut flat = rng.random_range(0..total);
            let mut a = 0;
            while flat >= names[a].1 {
                flat -= names[a].1;
                a += 1;
            }
            (a, flat)
        };
        draws += 1;

        let original = model.params.arrays()[array].3[offset];
        let mut at = |delta: f64| -> Result<(f64, Vec<bool>)> {
            probe.params.arrays_mut()[array].1[offset] = original + delta;
            let out = value_and_pattern(&probe, batch, objective);
            probe.params.arrays_mut()[array].1[offset] = original;
            out
        };
        let (plus, p_plus) = at(config.h)?;
        let (minus, p_minus) = at(-config.h)?;
        if p_plus != base_pattern || p_minus != base_pattern {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * config.h);
        let err = relative_error(grads[array][offset], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(format!("{}[{offset}]", names[array].0));
        }
    }
    log::debug!(
        "{objective:?}: {} checked, {} kinks, max rel error {:.3e}",
        report.checked,
        report.skipped_kinks,
        report.max_rel_error
    );
    Ok(report)
}

/// Settings for the seeded suite: `instances` random models and images per
/// objective, each `size`×`size`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub instances: usize,
    pub size: usize,
    pub classes: usize,
    pub seed: u64,
    pub check: GradCheckConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            instances: 20,
            size: 16,
            classes: 4,
            seed: 0,
            check: GradCheckConfig::default(),
        }
    }
}

/// Random model and batch for one objective. Two-head objectives get heads
/// from independent initializations so `L_dis` is away from its tie kink.
pub fn suite_instance(objective: Objective, classes: usize, size: usize, seed: u64) -> Result<(ModelParams<f64>, GradCheckBatch)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::<f64>::init(classes, rng.random())?.params;
    if objective.heads() == 2 {
        let other = ModelParams::<f64>::init(classes, rng.random())?;
        params.heads.push(other.params.heads[0].clone());
    }
    let model = ModelParams::from_params(params)?;
    let n = size * size;
    let image = Tensor::from_vec(&[3, size, size], (0..3 * n).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let dense = matches!(objective, Objective::Source | Objective::SelfTraining);
    let labels = (0..n)
        .map(|_| {
            if dense || rng.random_bool(0.25) {
                rng.random_range(0..classes as u8)
            } else {
                crate::oracle::IGNORE
            }
        })
        .collect();
    let labels = SparseLabelMap::from_vec(size, size, labels)?;
    Ok((model, GradCheckBatch { image, labels }))
}

/// Runs every objective on `instances` seeded instances and keeps, per
/// objective, the report with the largest error.
pub fn run_suite(config: &SuiteConfig) -> Result<Vec<GradCheckReport>> {
    Objective::ALL
        .iter()
        .enumerate()
        .map(|(o, &objective)| {
            let mut worst: Option<GradCheckReport> = None;
            for i in 0..config.instances {
                let seed = config.seed.wrapping_mul(1_000_003).wrapping_add((o * 10_000 + i) as u64);
                let (model, batch) = suite_instance(objective, config.classes, config.size, seed)?;
                let check = GradCheckConfig {
                    seed,
                    ..config.check
                };
                let r = check_gradients(&model, &batch, objective, &check)?;
                if worst.as_ref().map_or(true, |w| r.max_rel_error > w.max_rel_error) {
                    worst = Some(r);
                }
            }
            worst.ok_or_else(|| Error::InvalidArgument("grad-check suite needs at least one instance".into()))
        })
        .collect()
}
