//! Annotation side of the loop: sparse label maps, the simulated oracle, and
//! the append-only annotation store.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netpbm;
use crate::selection::{InconsistencyMask, PointSet};

/// Label value for "not annotated". Excluded from every loss and metric.
pub const IGNORE: u8 = 255;

/// Per-pixel class index or [`IGNORE`], row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SparseLabelMap {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl SparseLabelMap {
    pub fn new_ignored(width: usize, height: usize) -> Self {
        SparseLabelMap {
            width,
            height,
            labels: vec![IGNORE; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::Shape(format!("{} labels for a {width}×{height} map", labels.len())));
        }
        Ok(SparseLabelMap { width, height, labels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    #[inline]
    pub fn is_annotated(&self, index: usize) -> bool {
        self.labels[index] != IGNORE
    }

    pub fn annotated_count(&self) -> usize {
        self.labels.iter().filter(|&&v| v != IGNORE).count()
    }

    pub fn is_dense(&self) -> bool {
        self.labels.iter().all(|&v| v != IGNORE)
    }

    /// Every entry is a class below `classes` or IGNORE.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&v| v != IGNORE && v as usize >= classes) {
            Some(&value) => Err(Error::InvalidLabel { value, classes }),
            None => Ok(()),
        }
    }
}

/// Where the oracle is asked to reveal ground truth.
#[derive(Clone, Copy, Debug)]
pub enum Region<'a> {
    Mask(&'a InconsistencyMask),
    Points(&'a PointSet),
}

impl<'a> From<&'a InconsistencyMask> for Region<'a> {
    fn from(m: &'a InconsistencyMask) -> Self {
        Region::Mask(m)
    }
}

impl<'a> From<&'a PointSet> for Region<'a> {
    fn from(p: &'a PointSet) -> Self {
        Region::Points(p)
    }
}

/// Simulated perfect annotator: ground truth inside `region`, IGNORE
/// everywhere else.
pub fn reveal<'a>(gt: &SparseLabelMap, region: impl Into<Region<'a>>) -> Result<SparseLabelMap> {
    let mut out = SparseLabelMap::new_ignored(gt.width, gt.height);
    match region.into() {
        Region::Mask(mask) => {
            if mask.width() != gt.width || mask.height() != gt.height {
                return Err(Error::Shape("mask and ground truth differ in size".into()));
            }
            for i in mask.indices() {
                out.labels[i] = gt.labels[i];
            }
        }
        Region::Points(points) => {
            if !points.in_bounds(gt.width, gt.height) {
                return Err(Error::InvalidArgument("selected point outside the image".into()));
            }
            for i in points.to_indices(gt.width) {
                out.labels[i] = gt.labels[i];
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Simulated,
    Human,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: usize,
    pub strategy: String,
    pub source: LabelSource,
    /// Unix seconds; recorded for human labels only, so simulated runs stay
    /// byte-reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

impl Provenance {
    pub fn simulated(stage: usize, strategy: impl Into<String>) -> Self {
        Provenance {
            stage,
            strategy: strategy.into(),
            source: LabelSource::Simulated,
            timestamp: None,
        }
    }

    pub fn human(stage: usize, strategy: impl Into<String>) -> Self {
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Provenance {
            stage,
            strategy: strategy.into(),
            source: LabelSource::Human,
            timestamp: Some(now),
        }
    }
}

/// A merge that added pixels, with the coordinates it added.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceEvent {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub pixels: Vec<[u32; 2]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conflict {
    pub x: u32,
    pub y: u32,
    pub existing: u8,
    pub proposed: u8,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeOutcome {
    pub added: usize,
    pub unchanged: usize,
    pub rejected: Vec<Conflict>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageAnnotations {
    pub labels: SparseLabelMap,
    pub events: Vec<ProvenanceEvent>,
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    image_id: String,
    width: usize,
    height: usize,
    events: Vec<ProvenanceEvent>,
}

/// Append-only store of annotations per image. A pixel, once labeled, keeps
/// its class; conflicting re-labels are rejected per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotationStore {
    classes: usize,
    images: BTreeMap<String, ImageAnnotations>,
}

impl AnnotationStore {
    pub fn new(classes: usize) -> Self {
        AnnotationStore {
            classes,
            images: BTreeMap::new(),
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, image_id: &str) -> Option<&SparseLabelMap> {
        self.images.get(image_id).map(|a| &a.labels)
    }

    pub fn annotations(&self, image_id: &str) -> Option<&ImageAnnotations> {
        self.images.get(image_id)
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.images.keys().map(String::as_str)
    }

    pub fn annotated_count(&self, image_id: &str) -> usize {
        self.get(image_id).map_or(0, SparseLabelMap::annotated_count)
    }

    pub fn total_annotated(&self) -> usize {
        self.images.values().map(|a| a.labels.annotated_count()).sum()
    }

    /// Labels for `image_id`, or an all-IGNORE map of the given size.
    pub fn labels_or_empty(&self, image_id: &str, width: usize, height: usize) -> SparseLabelMap {
        self.get(image_id)
            .cloned()
            .unwrap_or_else(|| SparseLabelMap::new_ignored(width, height))
    }

    /// Unions `new` into the store. Pixels already labeled with the same
    /// class count as unchanged; a different class is rejected and the
    /// stored label kept.
    pub fn merge(&mut self, image_id: &str, new: &SparseLabelMap, provenance: Provenance) -> Result<MergeOutcome> {
        new.validate(self.classes)?;
        let entry = self.images.entry(image_id.to_string()).or_insert_with(|| ImageAnnotations {
            labels: SparseLabelMap::new_ignored(new.width, new.height),
            events: Vec::new(),
        });
        if entry.labels.width != new.width || entry.labels.height != new.height {
            return Err(Error::Shape(format!(
                "{image_id}: stored {}×{}, merging {}×{}",
                entry.labels.width, entry.labels.height, new.width, new.height
            )));
        }
        let mut outcome = MergeOutcome::default();
        let mut merged = entry.labels.clone();
        let mut added = Vec::new();
        for (i, &label) in new.labels.iter().enumerate() {
            if label == IGNORE {
                continue;
            }
            let (x, y) = ((i % new.width) as u32, (i / new.width) as u32);
            match merged.labels[i] {
                IGNORE => {
                    merged.labels[i] = label;
                    added.push([x, y]);
                }
                existing if existing == label => outcome.unchanged += 1,
                existing => {
                    log::warn!("{image_id}: pixel ({x}, {y}) is {existing}, rejecting {label}");
                    outcome.rejected.push(Conflict {
                        x,
                        y,
                        existing,
                        proposed: label,
                    });
                }
            }
        }
        outcome.added = added.len();
        entry.labels = merged;
        if !added.is_empty() {
            entry.events.push(ProvenanceEvent {
                provenance,
                pixels: added,
            });
        }
        Ok(outcome)
    }

    /// Writes `<id>.pgm` and `<id>.meta.json` for every image into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io_path(dir, e))?;
        for (id, ann) in &self.images {
            netpbm::write_pgm(&dir.join(format!("{id}.pgm")), &ann.labels)?;
            let meta = MetaFile {
                image_id: id.clone(),
                width: ann.labels.width,
                height: ann.labels.height,
                events: ann.events.clone(),
            };
            let path = dir.join(format!("{id}.meta.json"));
            let json = serde_json::to_vec_pretty(&meta).map_err(|e| Error::json(&path, e))?;
            fs::write(&path, json).map_err(|e| Error::io_path(&path, e))?;
        }
        Ok(())
    }

    /// Reads every `<id>.pgm` (with its optional meta file) from `dir`.
    pub fn load(dir: &Path, classes: usize) -> Result<Self> {
        let mut store = AnnotationStore::new(classes);
        let entries = fs::read_dir(dir).map_err(|e| Error::io_path(dir, e))?;
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
            .collect();
        paths.sort();
        for path in paths {
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let labels = netpbm::read_pgm(&path)?;
            labels.validate(classes)?;
            let meta_path = dir.join(format!("{id}.meta.json"));
            let events = if meta_path.exists() {
                let raw = fs::read(&meta_path).map_err(|e| Error::io_path(&meta_path, e))?;
                let meta: MetaFile = serde_json::from_slice(&raw).map_err(|e| Error::json(&meta_path, e))?;
                meta.events
            } else {
                Vec::new()
            };
            store.images.insert(id, ImageAnnotations { labels, events });
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt() -> SparseLabelMap {
        SparseLabelMap::from_vec(3, 2, vec![0, 1, 2, 2, 1, 0]).unwrap()
    }

    #[test]
    fn reveal_cases() {
        let empty = InconsistencyMask::empty(3, 2);
        assert_eq!(reveal(&gt(), &empty).unwrap().annotated_count(), 0);
        let full = InconsistencyMask::from_bits(3, 2, vec![true; 6]).unwrap();
        assert_eq!(reveal(&gt(), &full).unwrap(), gt());
        let pts = PointSet::new([(0, 0), (2, 1), (1, 1)]);
        let r = reveal(&gt(), &pts).unwrap();
        assert_eq!(r.annotated_count(), 3);
        assert_eq!((r.get(0, 0), r.get(2, 1), r.get(1, 1)), (0, 0, 1));
        assert!(reveal(&gt(), &PointSet::new([(3, 0)])).is_err());
    }

    fn sparse(pairs: &[(usize, usize, u8)]) -> SparseLabelMap {
        let mut m = SparseLabelMap::new_ignored(3, 2);
        for &(x, y, v) in pairs {
            m.set(x, y, v);
        }
        m
    }

    #[test]
    fn merge_disjoint_self_and_overlap() {
        let mut store = AnnotationStore::new(3);
        let a = sparse(&[(0, 0, 0), (1, 0, 1)]);
        let b = sparse(&[(2, 1, 0)]);
        store.merge("img", &a, Provenance::simulated(1, "SPL")).unwrap();
        store.merge("img", &b, Provenance::simulated(1, "SPL")).unwrap();
        assert_eq!(store.annotated_count("img"), 3);
        let again = store.merge("img", &a, Provenance::simulated(2, "SPL")).unwrap();
        assert_eq!((again.added, again.unchanged), (0, 2));
        assert_eq!(store.annotated_count("img"), 3);
        let c = sparse(&[(1, 0, 1), (1, 1, 1)]);
        store.merge("img", &c, Provenance::simulated(2, "SPL")).unwrap();
        assert_eq!(store.annotated_count("img"), 4);
        assert_eq!(store.annotations("img").unwrap().events.len(), 3);
    }

    #[test]
    fn merge_conflict_is_rejected_per_pixel() {
        let mut store = AnnotationStore::new(3);
        store.merge("img", &sparse(&[(0, 0, 0)]), Provenance::human(1, "PPL_best")).unwrap();
        let out = store
            .merge("img", &sparse(&[(0, 0, 2), (1, 1, 1)]), Provenance::human(1, "PPL_best"))
            .unwrap();
        assert_eq!(out.added, 1);
        assert_eq!(
            out.rejected,
            vec![Conflict {
                x: 0,
                y: 0,
                existing: 0,
                proposed: 2
            }]
        );
        assert_eq!(store.get("img").unwrap().get(0, 0), 0);
        assert_eq!(store.get("img").unwrap().get(1, 1), 1);
    }

    #[test]
    fn merge_validates_input() {
        let mut store = AnnotationStore::new(2);
        assert!(store.merge("a", &sparse(&[(0, 0, 2)]), Provenance::simulated(1, "SPL")).is_err());
        store.merge("a", &sparse(&[(0, 0, 1)]), Provenance::simulated(1, "SPL")).unwrap();
        let other = SparseLabelMap::new_ignored(2, 2);
        assert!(store.merge("a", &other, Provenance::simulated(1, "SPL")).is_err());
    }

    #[test]
    fn store_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = AnnotationStore::new(3);
        store.merge("0001", &sparse(&[(0, 0, 0), (2, 1, 2)]), Provenance::simulated(1, "SPL")).unwrap();
        store.merge("0002", &sparse(&[(1, 0, 1)]), Provenance::human(2, "PPL_best")).unwrap();
        store.save(dir.path()).unwrap();
        let back = AnnotationStore::load(dir.path(), 3).unwrap();
        assert_eq!(back, store);
        let first = fs::read(dir.path().join("0001.pgm")).unwrap();
        back.save(dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join("0001.pgm")).unwrap(), first);
    }
}
