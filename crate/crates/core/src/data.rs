//! Procedural two-domain segmentation data.
//!
//! Every scene is a horizon split into an upper (class 0) and lower
//! (class 1) background, with rectangles (class 2), discs (class 3) and
//! vertical strips (class 4) painted over it. Colours come from a fixed
//! per-class palette with per-image jitter and a sinusoidal texture. The
//! target domain rotates hue, darkens, adds sensor noise and changes the
//! texture frequency; layouts and labels are never touched by the shift.
//!
//! Image `i` (counted across source/train, source/val, target/train,
//! target/val in that order) is drawn from seed
//! `master_seed × 1_000_003 + i`, with separate ChaCha streams for layout,
//! appearance and noise.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netpbm;
use crate::numerics::Tensor;
use crate::oracle::SparseLabelMap;
use crate::par::{self, Execution};

pub const MAX_CLASSES: usize = 5;
const SEED_STRIDE: u64 = 1_000_003;

pub const CLASS_NAMES: [&str; MAX_CLASSES] = ["sky", "ground", "block", "disc", "pole"];

/// Base hue (degrees), saturation, value and texture frequency (cycles per
/// image width) of each class.
const STYLE: [(f64, f64, f64, f64); MAX_CLASSES] = [
    (210.0, 0.55, 0.85, 2.0),
    (100.0, 0.60, 0.55, 10.0),
    (30.0, 0.75, 0.80, 6.0),
    (300.0, 0.50, 0.70, 4.0),
    (165.0, 0.65, 0.65, 14.0),
];
/// Per-image colour jitter: hue in degrees, saturation and value.
const HUE_JITTER: f64 = 20.0;
const TONE_JITTER: f64 = 0.15;
const TEXTURE_AMPLITUDE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    pub hue_shift: f64,
    pub brightness_delta: f64,
    pub noise_sigma: f64,
    pub texture_scale: f64,
}

impl DomainShift {
    pub const NONE: DomainShift = DomainShift {
        hue_shift: 0.0,
        brightness_delta: 0.0,
        noise_sigma: 0.0,
        texture_scale: 1.0,
    };
}

impl Default for DomainShift {
    fn default() -> Self {
        DomainShift {
            hue_shift: 25.0,
            brightness_delta: -0.12,
            noise_sigma: 0.05,
            texture_scale: 1.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub seed: u64,
    pub shift: DomainShift,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 64,
            height: 64,
            classes: 5,
            seed: 0,
            shift: DomainShift::default(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.classes) {
            return Err(Error::Config(format!("classes must be in 2..={MAX_CLASSES}, got {}", self.classes)));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::Config("images must be at least 8×8".into()));
        }
        let s = &self.shift;
        if ![s.hue_shift, s.brightness_delta, s.noise_sigma, s.texture_scale].iter().all(|v| v.is_finite()) {
            return Err(Error::Config("domain shift values must be finite".into()));
        }
        if s.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counts {
    pub source_train: usize,
    pub source_val: usize,
    pub target_train: usize,
    pub target_val: usize,
}

impl Default for Counts {
    fn default() -> Self {
        Counts {
            source_train: 200,
            source_val: 50,
            target_train: 200,
            target_val: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// A `domain/split` pair such as `target/val`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SplitId {
    pub domain: Domain,
    pub split: Split,
}

impl SplitId {
    pub const SOURCE_TRAIN: SplitId = SplitId::new(Domain::Source, Split::Train);
    pub const SOURCE_VAL: SplitId = SplitId::new(Domain::Source, Split::Val);
    pub const TARGET_TRAIN: SplitId = SplitId::new(Domain::Target, Split::Train);
    pub const TARGET_VAL: SplitId = SplitId::new(Domain::Target, Split::Val);
    pub const ALL: [SplitId; 4] = [Self::SOURCE_TRAIN, Self::SOURCE_VAL, Self::TARGET_TRAIN, Self::TARGET_VAL];

    pub const fn new(domain: Domain, split: Split) -> Self {
        SplitId { domain, split }
    }

    pub fn dir(self) -> PathBuf {
        let d = match self.domain {
            Domain::Source => "source",
            Domain::Target => "target",
        };
        let s = match self.split {
            Split::Train => "train",
            Split::Val => "val",
        };
        Path::new(d).join(s)
    }

    fn count(self, counts: &Counts) -> usize {
        match (self.domain, self.split) {
            (Domain::Source, Split::Train) => counts.source_train,
            (Domain::Source, Split::Val) => counts.source_val,
            (Domain::Target, Split::Train) => counts.target_train,
            (Domain::Target, Split::Val) => counts.target_val,
        }
    }
}

impl std::fmt::Display for SplitId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.dir().display())
    }
}

impl std::str::FromStr for SplitId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SplitId::ALL
            .into_iter()
            .find(|id| id.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?} (expected e.g. target/val)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    /// `3×H×W`, 8-bit quantized values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Dense ground truth.
    pub labels: SparseLabelMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub id: u8,
    pub name: String,
    pub color: [u8; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec: SceneSpec,
    pub counts: Counts,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub palette: Vec<PaletteEntry>,
}

impl Manifest {
    pub fn new(spec: SceneSpec, counts: Counts) -> Self {
        Manifest {
            spec,
            counts,
            seed: spec.seed,
            class_names: CLASS_NAMES[..spec.classes].iter().map(|s| s.to_string()).collect(),
            palette: palette(spec.classes),
        }
    }
}

/// Display colour per class: the undistorted base colour.
pub fn palette(classes: usize) -> Vec<PaletteEntry> {
    (0..classes)
        .map(|k| {
            let (h, s, v, _) = STYLE[k];
            let rgb = hsv_to_rgb(h, s, v);
            PaletteEntry {
                id: k as u8,
                name: CLASS_NAMES[k].to_string(),
                color: rgb.map(|c| netpbm::quantize(c as f32)),
            }
        })
        .collect()
}

/// A generated or loaded dataset: every split in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub source_train: Vec<LabeledImage>,
    pub source_val: Vec<LabeledImage>,
    pub target_train: Vec<LabeledImage>,
    pub target_val: Vec<LabeledImage>,
}

impl Dataset {
    pub fn split(&self, id: SplitId) -> &[LabeledImage] {
        match (id.domain, id.split) {
            (Domain::Source, Split::Train) => &self.source_train,
            (Domain::Source, Split::Val) => &self.source_val,
            (Domain::Target, Split::Train) => &self.target_train,
            (Domain::Target, Split::Val) => &self.target_val,
        }
    }

    fn split_mut(&mut self, id: SplitId) -> &mut Vec<LabeledImage> {
        match (id.domain, id.split) {
            (Domain::Source, Split::Train) => &mut self.source_train,
            (Domain::Source, Split::Val) => &mut self.source_val,
            (Domain::Target, Split::Train) => &mut self.target_train,
            (Domain::Target, Split::Val) => &mut self.target_val,
        }
    }

    pub fn classes(&self) -> usize {
        self.manifest.spec.classes
    }

    /// Generates every split in memory.
    pub fn generate(spec: &SceneSpec, counts: &Counts, exec: Execution) -> Result<Self> {
        spec.validate()?;
        let mut ds = Dataset {
            manifest: Manifest::new(*spec, *counts),
            source_train: Vec::new(),
            source_val: Vec::new(),
            target_train: Vec::new(),
            target_val: Vec::new(),
        };
        let mut base = 0u64;
        for id in SplitId::ALL {
            let n = id.count(counts);
            let shift = match id.domain {
                Domain::Source => DomainShift::NONE,
                Domain::Target => spec.shift,
            };
            let images = par::map_range(exec, n, |i| {
                let seed = spec.seed.wrapping_mul(SEED_STRIDE).wrapping_add(base + i as u64);
                let (image, labels) = render_scene(spec.width, spec.height, spec.classes, seed, &shift);
                LabeledImage {
                    id: format!("{i:04}"),
                    image,
                    labels,
                }
            });
            *ds.split_mut(id) = images;
            base += n as u64;
        }
        Ok(ds)
    }

    /// Writes the dataset directory layout and `dataset.json`.
    pub fn save(&self, root: &Path) -> Result<()> {
        for id in SplitId::ALL {
            let dir = root.join(id.dir());
            for item in self.split(id) {
                netpbm::write_ppm(&dir.join("images").join(format!("{}.ppm", item.id)), &item.image)?;
                netpbm::write_pgm(&dir.join("labels").join(format!("{}.pgm", item.id)), &item.labels)?;
            }
        }
        let path = root.join("dataset.json");
        let json = serde_json::to_vec_pretty(&self.manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json).map_err(|e| Error::io_path(&path, e))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let manifest = load_manifest(root)?;
        let mut ds = Dataset {
            manifest: manifest.clone(),
            source_train: Vec::new(),
            source_val: Vec::new(),
            target_train: Vec::new(),
            target_val: Vec::new(),
        };
        for id in SplitId::ALL {
            let dir = root.join(id.dir());
            let mut items = Vec::new();
            for i in 0..id.count(&manifest.counts) {
                let name = format!("{i:04}");
                let image = netpbm::read_ppm(&dir.join("images").join(format!("{name}.ppm")))?;
                let labels = netpbm::read_pgm(&dir.join("labels").join(format!("{name}.pgm")))?;
                labels.validate(manifest.spec.classes)?;
                items.push(LabeledImage { id: name, image, labels });
            }
            *ds.split_mut(id) = items;
        }
        Ok(ds)
    }
}

pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("dataset.json");
    let raw = fs::read(&path).map_err(|e| Error::io_path(&path, e))?;
    serde_json::from_slice(&raw).map_err(|e| Error::json(&path, e))
}

/// Generates and writes a dataset; returns its manifest.
pub fn generate_dataset(spec: &SceneSpec, counts: &Counts, root: &Path, exec: Execution) -> Result<Manifest> {
    let ds = Dataset::generate(spec, counts, exec)?;
    ds.save(root)?;
    Ok(ds.manifest)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn stream(seed: u64, n: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(n);
    rng
}

/// Class map of one scene. Depends only on the seed.
fn layout(width: usize, height: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (w, h) = (width as f64, height as f64);
    let horizon = rng.random_range(0.3..0.7) * h;
    let tilt = rng.random_range(-0.25..0.25);
    let mut map: Vec<u8> = (0..width * height)
        .map(|i| {
            let (x, y) = ((i % width) as f64, (i / width) as f64);
            u8::from(y >= horizon + tilt * (x - w / 2.0))
        })
        .collect();
    let paint = |map: &mut Vec<u8>, class: u8, inside: &dyn Fn(f64, f64) -> bool| {
        for (i, v) in map.iter_mut().enumerate() {
            if inside((i % width) as f64 + 0.5, (i / width) as f64 + 0.5) {
                *v = class;
            }
        }
    };
    if classes > 4 {
        for _ in 0..rng.random_range(1..=2) {
            let x0 = rng.random_range(0.0..w - 3.0);
            let sw = rng.random_range(2.0..5.0);
            let top = rng.random_range(0.0..0.5) * h;
            let bottom = rng.random_range(0.6..1.0) * h;
            paint(&mut map, 4, &|x, y| x >= x0 && x < x0 + sw && y >= top && y < bottom);
        }
    }
    if classes > 2 {
        for _ in 0..rng.random_range(1..=3) {
            let rw = rng.random_range(0.12..0.35) * w;
            let rh = rng.random_range(0.12..0.35) * h;
            let x0 = rng.random_range(0.0..w - rw);
            let y0 = rng.random_range(0.0..h - rh);
            paint(&mut map, 2, &|x, y| x >= x0 && x < x0 + rw && y >= y0 && y < y0 + rh);
        }
    }
    if classes > 3 {
        for _ in 0..rng.random_range(1..=3) {
            let r = rng.random_range(0.06..0.16) * w;
            let cx = rng.random_range(r..w - r);
            let cy = rng.random_range(r..h - r);
            paint(&mut map, 3, &|x, y| (x - cx).powi(2) + (y - cy).powi(2) < r * r);
        }
    }
    map
}

/// `[1 2 1]ᵀ[1 2 1] / 16` with edge replication: a soft lens.
fn blur(rgb: &[[f64; 3]], width: usize, height: usize) -> Vec<[f64; 3]> {
    const W: [f64; 3] = [0.25, 0.5, 0.25];
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, width as isize - 1) as usize;
        let y = y.clamp(0, height as isize - 1) as usize;
        rgb[y * width + x]
    };
    (0..width * height)
        .map(|i| {
            let (x, y) = ((i % width) as isize, (i / width) as isize);
            let mut out = [0.0; 3];
            for (dy, wy) in W.iter().enumerate() {
                for (dx, wx) in W.iter().enumerate() {
                    let p = at(x + dx as isize - 1, y + dy as isize - 1);
                    for ch in 0..3 {
                        out[ch] += wy * wx * p[ch];
                    }
                }
            }
            out
        })
        .collect()
}

/// Renders one scene: its quantized image and dense labels.
pub fn render_scene(width: usize, height: usize, classes: usize, seed: u64, shift: &DomainShift) -> (Tensor<f32>, SparseLabelMap) {
    let labels = layout(width, height, classes, &mut stream(seed, 0));
    let mut look = stream(seed, 1);
    let styles: Vec<(f64, f64, f64, f64, f64, f64)> = STYLE[..classes]
        .iter()
        .map(|&(hue, sat, val, freq)| {
            let angle = look.random_range(0.0..TAU);
            let phase = look.random_range(0.0..TAU);
            (
                hue + look.random_range(-HUE_JITTER..HUE_JITTER),
                (sat + look.random_range(-TONE_JITTER..TONE_JITTER)).clamp(0.0, 1.0),
                (val + look.random_range(-TONE_JITTER..TONE_JITTER)).clamp(0.0, 1.0),
                freq,
                angle,
                phase,
            )
        })
        .collect();
    let hw = width * height;
    let mut clean = vec![[0.0f64; 3]; hw];
    for (i, &class) in labels.iter().enumerate() {
        let (hue, sat, val, freq, angle, phase) = styles[class as usize];
        let (x, y) = ((i % width) as f64 / width as f64, (i / width) as f64 / height as f64);
        let t = (x * angle.cos() + y * angle.sin()) * freq * shift.texture_scale;
        let v = val * (1.0 + TEXTURE_AMPLITUDE * (TAU * t + phase).sin());
        clean[i] = hsv_to_rgb(hue + shift.hue_shift, sat, v.clamp(0.0, 1.0));
    }
    let optics = blur(&clean, width, height);
    let mut noise_rng = stream(seed, 2);
    let noise = Normal::new(0.0, shift.noise_sigma.max(0.0)).expect("finite sigma");
    let mut data = vec![0.0f32; 3 * hw];
    for (i, rgb) in optics.iter().enumerate() {
        for ch in 0..3 {
            let n = if shift.noise_sigma > 0.0 { noise.sample(&mut noise_rng) } else { 0.0 };
            let c = (rgb[ch] + shift.brightness_delta + n).clamp(0.0, 1.0);
            data[ch * hw + i] = netpbm::quantize(c as f32) as f32 / 255.0;
        }
    }
    let image = Tensor::from_vec(&[3, height, width], data).expect("sized");
    let labels = SparseLabelMap::from_vec(width, height, labels).expect("sized");
    (image, labels)
}
