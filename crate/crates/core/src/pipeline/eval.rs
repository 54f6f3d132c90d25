//! Confusion-matrix segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::Scalar;
use crate::oracle::IGNORE;
use crate::par::{self, Execution};

/// `matrix[gt][pred]` pixel counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub matrix: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            matrix: vec![vec![0; classes]; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.matrix.len()
    }

    /// Counts one prediction against its ground truth; IGNORE pixels in
    /// the ground truth are skipped.
    pub fn add(&mut self, gt: &[u8], pred: &[u8]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::Shape(format!("{} ground-truth pixels vs {} predicted", gt.len(), pred.len())));
        }
        let k = self.classes();
        for (&g, &p) in gt.iter().zip(pred) {
            if g == IGNORE {
                continue;
            }
            if g as usize >= k || p as usize >= k {
                return Err(Error::InvalidLabel {
                    value: g.max(p),
                    classes: k,
                });
            }
            self.matrix[g as usize][p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, o) in self.matrix.iter_mut().zip(&other.matrix) {
            for (a, b) in row.iter_mut().zip(o) {
                *a += b;
            }
        }
    }

    /// `IoU_k = TP / (TP + FP + FN)`; classes that appear in neither ground
    /// truth nor prediction get `None` and are left out of the mean.
    pub fn metrics(&self) -> EvalResult {
        let k = self.classes();
        let per_class_iou: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.matrix[c][c];
                let fn_: u64 = self.matrix[c].iter().sum::<u64>() - tp;
                let fp: u64 = (0..k).map(|g| self.matrix[g][c]).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        EvalResult {
            per_class_iou,
            miou,
            confusion: self.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub confusion: ConfusionMatrix,
}

impl EvalResult {
    /// Plain-text table: one line per class, then the mean.
    pub fn table(&self, class_names: &[String]) -> String {
        let mut out = String::from("class        IoU\n");
        for (k, iou) in self.per_class_iou.iter().enumerate() {
            let name = class_names.get(k).map(String::as_str).unwrap_or("?");
            match iou {
                Some(v) => out.push_str(&format!("{k} {name:<10} {v:.4}\n")),
                None => out.push_str(&format!("{k} {name:<10} n/a\n")),
            }
        }
        out.push_str(&format!("mIoU         {:.4}\n", self.miou));
        out
    }
}

/// Predicts every image with head 0 and scores it against ground truth.
pub fn evaluate<T: Scalar>(model: &ModelParams<T>, images: &[LabeledImage], exec: Execution) -> Result<EvalResult> {
    let k = model.classes();
    let per_image = par::map(exec, images, |_, item| -> Result<ConfusionMatrix> {
        let pred = model.forward(&item.image.cast())?;
        let mut cm = ConfusionMatrix::new(k);
        cm.add(item.labels.as_slice(), &pred.probs[0].argmax_map())?;
        Ok(cm)
    });
    let mut total = ConfusionMatrix::new(k);
    for cm in per_image {
        total.merge(&cm?);
    }
    Ok(total.metrics())
}
