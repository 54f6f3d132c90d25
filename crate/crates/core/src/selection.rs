//! Pixel selection strategies and label-budget accounting.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{entropy, ProbMap, Scalar};
use crate::oracle::SparseLabelMap;

/// Labeling strategy for one experiment arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    /// Label every pixel of the inconsistency mask.
    #[serde(rename = "SPL")]
    Spl,
    /// One pixel per predicted class inside the mask, closest to the class prototype.
    #[serde(rename = "PPL_best")]
    PplBest,
    /// As `PplBest`, but the farthest pixel.
    #[serde(rename = "PPL_worst")]
    PplWorst,
    #[serde(rename = "RAND")]
    Rand,
    #[serde(rename = "SCONF")]
    Sconf,
    #[serde(rename = "ENT")]
    Ent,
    /// Dense target labels: the upper bound.
    #[serde(rename = "SUPERVISED")]
    Supervised,
    /// No target labels: the lower bound.
    #[serde(rename = "SOURCE_ONLY")]
    SourceOnly,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Spl,
        Strategy::PplBest,
        Strategy::PplWorst,
        Strategy::Rand,
        Strategy::Sconf,
        Strategy::Ent,
        Strategy::Supervised,
        Strategy::SourceOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Spl => "SPL",
            Strategy::PplBest => "PPL_best",
            Strategy::PplWorst => "PPL_worst",
            Strategy::Rand => "RAND",
            Strategy::Sconf => "SCONF",
            Strategy::Ent => "ENT",
            Strategy::Supervised => "SUPERVISED",
            Strategy::SourceOnly => "SOURCE_ONLY",
        }
    }

    /// Whether the strategy needs the two-head selector and its mask.
    pub fn uses_selector(self) -> bool {
        matches!(self, Strategy::Spl | Strategy::PplBest | Strategy::PplWorst)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

/// Pixels where the two selector heads disagree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InconsistencyMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl InconsistencyMask {
    pub fn empty(width: usize, height: usize) -> Self {
        InconsistencyMask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Shape(format!("{} bits for a {width}×{height} mask", bits.len())));
        }
        Ok(InconsistencyMask { width, height, bits })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Row-major indices of set pixels.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn to_points(&self) -> PointSet {
        PointSet {
            points: self
                .indices()
                .map(|i| ((i % self.width) as u32, (i / self.width) as u32))
                .collect(),
        }
    }
}

/// Selected pixel coordinates `(x, y)`, without duplicates.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointSet {
    points: Vec<(u32, u32)>,
}

impl PointSet {
    /// Builds a set, dropping repeated coordinates (first occurrence wins).
    pub fn new(points: impl IntoIterator<Item = (u32, u32)>) -> Self {
        let mut seen = std::collections::HashSet::new();
        PointSet {
            points: points.into_iter().filter(|p| seen.insert(*p)).collect(),
        }
    }

    fn from_indices(indices: impl IntoIterator<Item = usize>, width: usize) -> Self {
        PointSet::new(indices.into_iter().map(|i| ((i % width) as u32, (i / width) as u32)))
    }

    pub fn points(&self) -> &[(u32, u32)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        self.points.contains(&(x, y))
    }

    pub fn in_bounds(&self, width: usize, height: usize) -> bool {
        self.points
            .iter()
            .all(|&(x, y)| (x as usize) < width && (y as usize) < height)
    }

    pub fn to_indices(&self, width: usize) -> Vec<usize> {
        self.points.iter().map(|&(x, y)| y as usize * width + x as usize).collect()
    }
}

/// Masked pixels sharing a predicted class, with their mean probability vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCluster {
    pub class: usize,
    /// Row-major pixel indices, ascending.
    pub members: Vec<usize>,
    pub prototype: Vec<f64>,
}

/// Marks pixels whose argmax class differs between two heads. Ties in the
/// argmax go to the lowest class index on both sides.
pub fn inconsistency_mask<T: Scalar>(probs1: &ProbMap<T>, probs2: &ProbMap<T>) -> Result<InconsistencyMask> {
    if !probs1.same_dims(probs2) {
        return Err(Error::Shape("probability maps differ in size".into()));
    }
    let bits = (0..probs1.pixels())
        .map(|i| probs1.argmax(i) != probs2.argmax(i))
        .collect();
    InconsistencyMask::from_bits(probs1.width(), probs1.height(), bits)
}

/// Segment labeling: the whole mask is the selection.
pub fn select_spl(mask: &InconsistencyMask) -> InconsistencyMask {
    mask.clone()
}

/// `1 − a·b / (‖a‖‖b‖)`
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

fn check_mask_dims<T: Scalar>(mask: &InconsistencyMask, probs: &ProbMap<T>) -> Result<()> {
    if mask.width != probs.width() || mask.height != probs.height() {
        return Err(Error::Shape(format!(
            "mask is {}×{}, prediction is {}×{}",
            mask.width,
            mask.height,
            probs.width(),
            probs.height()
        )));
    }
    Ok(())
}

fn vector_f64<T: Scalar>(probs: &ProbMap<T>, index: usize) -> Vec<f64> {
    (0..probs.classes()).map(|k| probs.prob(k, index).as_f64()).collect()
}

/// Groups masked pixels by the predicted class and averages their
/// probability vectors. Only non-empty classes are returned, in class order.
pub fn class_clusters<T: Scalar>(mask: &InconsistencyMask, probs: &ProbMap<T>) -> Result<Vec<ClassCluster>> {
    check_mask_dims(mask, probs)?;
    let k = probs.classes();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for i in mask.indices() {
        members[probs.argmax(i)].push(i);
    }
    Ok(members
        .into_iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .map(|(class, members)| {
            let mut prototype = vec![0.0; k];
            for &i in &members {
                for (c, acc) in prototype.iter_mut().enumerate() {
                    *acc += probs.prob(c, i).as_f64();
                }
            }
            let n = members.len() as f64;
            prototype.iter_mut().for_each(|v| *v /= n);
            ClassCluster {
                class,
                members,
                prototype,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PplVariant {
    /// Closest to the prototype.
    Best,
    /// Farthest from the prototype.
    Worst,
}

/// Point labeling: one representative pixel per non-empty class cluster.
/// Distance ties go to the earliest pixel in row-major order.
pub fn select_ppl<T: Scalar>(mask: &InconsistencyMask, probs: &ProbMap<T>, variant: PplVariant) -> Result<PointSet> {
    let clusters = class_clusters(mask, probs)?;
    let picks = clusters.iter().map(|cluster| {
        let mut best = cluster.members[0];
        let mut best_d = cosine_distance(&cluster.prototype, &vector_f64(probs, best));
        for &i in &cluster.members[1..] {
            let d = cosine_distance(&cluster.prototype, &vector_f64(probs, i));
            let better = match variant {
                PplVariant::Best => d < best_d,
                PplVariant::Worst => d > best_d,
            };
            if better {
                best = i;
                best_d = d;
            }
        }
        best
    });
    Ok(PointSet::from_indices(picks, mask.width))
}

/// Per-pixel uncertainty scores, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreField {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

/// Shannon entropy of each pixel's prediction.
pub fn score_entropy<T: Scalar>(probs: &ProbMap<T>) -> ScoreField {
    ScoreField {
        width: probs.width(),
        height: probs.height(),
        values: (0..probs.pixels())
            .map(|i| entropy((0..probs.classes()).map(|k| probs.prob(k, i))))
            .collect(),
    }
}

/// `1 − max_k p_k` at each pixel.
pub fn score_sconf<T: Scalar>(probs: &ProbMap<T>) -> ScoreField {
    ScoreField {
        width: probs.width(),
        height: probs.height(),
        values: (0..probs.pixels())
            .map(|i| 1.0 - probs.prob(probs.argmax(i), i).as_f64())
            .collect(),
    }
}

/// What ranks candidate pixels in [`select_budgeted`].
#[derive(Clone, Copy, Debug)]
pub enum Scorer<'a> {
    /// Highest score first; ties in row-major order.
    Field(&'a ScoreField),
    /// Uniform sample without replacement from this seed.
    Random { width: usize, height: usize, seed: u64 },
}

/// Picks up to `budget` pixels that are not yet annotated in `exclude`.
pub fn select_budgeted(scorer: Scorer<'_>, budget: usize, exclude: &SparseLabelMap) -> Result<PointSet> {
    let (width, height) = match scorer {
        Scorer::Field(f) => (f.width, f.height),
        Scorer::Random { width, height, .. } => (width, height),
    };
    if exclude.width() != width || exclude.height() != height {
        return Err(Error::Shape("exclusion map differs in size from the image".into()));
    }
    if budget > width * height {
        return Err(Error::InvalidArgument(format!(
            "budget {budget} exceeds the {} pixels of the image",
            width * height
        )));
    }
    let candidates: Vec<usize> = (0..width * height).filter(|&i| !exclude.is_annotated(i)).collect();
    let take = budget.min(candidates.len());
    let chosen: Vec<usize> = match scorer {
        Scorer::Field(field) => {
            let mut ranked = candidates;
            ranked.sort_by(|&a, &b| field.values[b].total_cmp(&field.values[a]).then(a.cmp(&b)));
            ranked.truncate(take);
            ranked
        }
        Scorer::Random { seed, .. } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, candidates.len(), take)
                .into_iter()
                .map(|j| candidates[j])
                .collect();
            picked.sort_unstable();
            picked
        }
    };
    Ok(PointSet::from_indices(chosen, width))
}

/// Pixels one strategy picked in one image at one stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageSelection {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub points: PointSet,
}

/// JSON record of a selection, as written to dumps and served to annotators.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionDump {
    pub image_id: String,
    pub stage: usize,
    pub strategy: Strategy,
    pub points: Vec<[u32; 2]>,
}

impl SelectionDump {
    pub fn new(stage: usize, strategy: Strategy, sel: &ImageSelection) -> Self {
        SelectionDump {
            image_id: sel.image_id.clone(),
            stage,
            strategy,
            points: sel.points.points().iter().map(|&(x, y)| [x, y]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageBudget {
    pub image_id: String,
    pub selected: usize,
    pub newly_labeled: usize,
    pub cumulative: usize,
}

/// Label budget after one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub stage: usize,
    pub strategy: Strategy,
    pub images: usize,
    pub total_pixels: usize,
    /// Pixels proposed this stage, summed over images.
    pub selected: usize,
    /// Proposed pixels that were not labeled before.
    pub newly_labeled: usize,
    /// Union of all selections so far.
    pub cumulative: usize,
    pub stage_fraction: f64,
    pub cumulative_fraction: f64,
    pub mean_points_per_image: f64,
    pub mean_cumulative_per_image: f64,
    pub per_image: Vec<ImageBudget>,
}

/// Tracks, per image, the union of every selection made so far.
#[derive(Clone, Debug, Default)]
pub struct BudgetLedger {
    labeled: BTreeMap<String, Vec<bool>>,
}

impl BudgetLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one stage's selections and reports the running totals. Images
    /// seen in earlier stages but absent now keep their cumulative counts.
    pub fn record_stage(&mut self, stage: usize, strategy: Strategy, selections: &[ImageSelection]) -> Result<SelectionReport> {
        let mut per_image = Vec::with_capacity(selections.len());
        let mut selected = 0;
        let mut newly = 0;
        for sel in selections {
            if !sel.points.in_bounds(sel.width, sel.height) {
                return Err(Error::InvalidArgument(format!("selection for {} leaves the image", sel.image_id)));
            }
            let bits = self
                .labeled
                .entry(sel.image_id.clone())
                .or_insert_with(|| vec![false; sel.width * sel.height]);
            if bits.len() != sel.width * sel.height {
                return Err(Error::Shape(format!("{} changed size between stages", sel.image_id)));
            }
            let mut new_here = 0;
            for i in sel.points.to_indices(sel.width) {
                if !bits[i] {
                    bits[i] = true;
                    new_here += 1;
                }
            }
            selected += sel.points.len();
            newly += new_here;
            per_image.push(ImageBudget {
                image_id: sel.image_id.clone(),
                selected: sel.points.len(),
                newly_labeled: new_here,
                cumulative: bits.iter().filter(|&&b| b).count(),
            });
        }
        let total_pixels: usize = self.labeled.values().map(Vec::len).sum();
        let cumulative: usize = self.labeled.values().map(|b| b.iter().filter(|&&x| x).count()).sum();
        let images = self.labeled.len();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let stage_pixels: usize = selections.iter().map(|s| s.width * s.height).sum();
        Ok(SelectionReport {
            stage,
            strategy,
            images,
            total_pixels,
            selected,
            newly_labeled: newly,
            cumulative,
            stage_fraction: ratio(selected, stage_pixels),
            cumulative_fraction: ratio(cumulative, total_pixels),
            mean_points_per_image: ratio(selected, selections.len()),
            mean_cumulative_per_image: ratio(cumulative, images),
            per_image,
        })
    }
}

/// Report for a single stage with no history.
pub fn selection_report(stage: usize, strategy: Strategy, selections: &[ImageSelection]) -> Result<SelectionReport> {
    BudgetLedger::new().record_stage(stage, strategy, selections)
}
