//! Run configuration: JSON with dotted `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{Counts, SceneSpec};
use crate::error::{Error, Result};
use crate::losses::MinMaxSettings;
use crate::par::Execution;
use crate::selection::Strategy;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Optimizer {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Epochs {
    pub pretrain: usize,
    pub self_train: usize,
    pub discrepancy: usize,
    pub retrain: usize,
}

impl Default for Epochs {
    fn default() -> Self {
        Epochs {
            pretrain: 30,
            self_train: 5,
            discrepancy: 5,
            retrain: 20,
        }
    }
}

/// Which per-stage budget the score baselines (RAND, SCONF, ENT) get.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineUnit {
    /// `⌈segment_fraction · W · H⌉` pixels per image.
    Segment,
    /// `points_per_stage` pixels per image, matched to point labeling.
    Point,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budget {
    pub segment_fraction: f64,
    pub points_per_stage: usize,
    pub baseline: BaselineUnit,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            segment_fraction: 0.01,
            points_per_stage: 5,
            baseline: BaselineUnit::Segment,
        }
    }
}

impl Budget {
    pub fn per_image(&self, width: usize, height: usize) -> usize {
        match self.baseline {
            BaselineUnit::Segment => (self.segment_fraction * (width * height) as f64).ceil() as usize,
            BaselineUnit::Point => self.points_per_stage,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root; `None` means the caller supplies the data.
    pub dir: Option<PathBuf>,
    /// Used by `gen-data` only. Runs read the spec from `dataset.json`.
    pub scene: SceneSpec,
    pub counts: Counts,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            scene: SceneSpec::default(),
            counts: Counts::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Defaults to `<strategy>-seed<seed>`.
    pub run_id: Option<String>,
    pub strategy: Strategy,
    pub stages: usize,
    pub seed: u64,
    pub data: DataConfig,
    pub epochs: Epochs,
    pub task_optimizer: Optimizer,
    pub selector_optimizer: Optimizer,
    pub inner_max_steps: usize,
    pub tau: f64,
    pub lambda_ent: f64,
    pub budget: Budget,
    pub execution: Execution,
    /// Also write selector checkpoints. They never affect any metric.
    pub save_selector: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: None,
            strategy: Strategy::Spl,
            stages: 3,
            seed: 0,
            data: DataConfig::default(),
            epochs: Epochs::default(),
            task_optimizer: Optimizer {
                lr: 1e-2,
                momentum: 0.9,
                batch_size: 8,
            },
            selector_optimizer: Optimizer {
                lr: 1e-3,
                momentum: 0.9,
                batch_size: 8,
            },
            inner_max_steps: 4,
            tau: 0.9,
            lambda_ent: 0.0,
            budget: Budget::default(),
            execution: Execution::Parallel,
            save_selector: true,
        }
    }
}

impl RunConfig {
    pub fn run_id(&self) -> String {
        self.run_id
            .clone()
            .unwrap_or_else(|| format!("{}-seed{}", self.strategy, self.seed))
    }

    pub fn minmax(&self) -> MinMaxSettings {
        MinMaxSettings {
            inner_max_steps: self.inner_max_steps,
            lr: self.selector_optimizer.lr,
            momentum: self.selector_optimizer.momentum,
            measure_descent: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages == 0 {
            return bad("stages must be at least 1".into());
        }
        if let Some(id) = &self.run_id {
            if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
                return bad(format!("run_id {id:?} is not a plain directory name"));
            }
        }
        for (name, o) in [("task_optimizer", &self.task_optimizer), ("selector_optimizer", &self.selector_optimizer)] {
            if !(o.lr.is_finite() && o.lr > 0.0) || !(0.0..1.0).contains(&o.momentum) || o.batch_size == 0 {
                return bad(format!("{name}: need lr > 0, momentum in [0, 1) and batch_size ≥ 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1]", self.tau));
        }
        if !(self.lambda_ent.is_finite() && self.lambda_ent >= 0.0) {
            return bad(format!("lambda_ent {} must be a non-negative number", self.lambda_ent));
        }
        let f = self.budget.segment_fraction;
        if !(0.0..=1.0).contains(&f) {
            return bad(format!("budget.segment_fraction {f} outside [0, 1]"));
        }
        self.data.scene.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Keys it omits keep their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io_path(path, e))?;
        let partial: Value = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let mut full = serde_json::to_value(RunConfig::default()).expect("config serializes");
        merge_json(&mut full, partial, "")?;
        Self::from_value(full)
    }

    fn from_value(value: Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key.path=value` overrides in order. The value is parsed as
    /// JSON when it parses, as a bare string otherwise.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut value = serde_json::to_value(self).expect("config serializes");
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            set_path(&mut value, key.trim(), parse_scalar(raw.trim()))?;
        }
        Self::from_value(value)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, new: Value) -> Result<()> {
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|obj| obj.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
    }
    *node = new;
    Ok(())
}

fn merge_json(base: &mut Value, patch: Value, prefix: &str) -> Result<()> {
    match patch {
        Value::Object(map) => {
            for (k, v) in map {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                let slot = base
                    .as_object_mut()
                    .and_then(|obj| obj.get_mut(&k))
                    .ok_or_else(|| Error::Config(format!("unknown config key {path:?}")))?;
                if v.is_object() && slot.is_object() {
                    merge_json(slot, v, &path)?;
                } else {
                    *slot = v;
                }
            }
            Ok(())
        }
        other => {
            *base = other;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json_pretty()).unwrap(), cfg);
        assert_eq!(cfg.run_id(), "SPL-seed0");
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = RunConfig::default()
            .with_overrides(&["strategy=RAND", "epochs.retrain=3", "task_optimizer.lr=0.05", "data.dir=/tmp/x"])
            .unwrap();
        assert_eq!(cfg.strategy, Strategy::Rand);
        assert_eq!(cfg.epochs.retrain, 3);
        assert_eq!(cfg.task_optimizer.lr, 0.05);
        assert_eq!(cfg.data.dir.as_deref(), Some(Path::new("/tmp/x")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::default().with_overrides(&["epochs.warmup=3"]).is_err());
        assert!(RunConfig::default().with_overrides(&["nonsense"]).is_err());
        assert!(RunConfig::default().with_overrides(&["strategy=BEST"]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"epochs": {"pretrain": 2, "typo": 1}}"#).unwrap();
        assert!(RunConfig::load(&path).is_err());
        fs::write(&path, r#"{"epochs": {"pretrain": 2}, "strategy": "ENT"}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.epochs.pretrain, 2);
        assert_eq!(cfg.epochs.retrain, 20);
        assert_eq!(cfg.strategy, Strategy::Ent);
    }

    #[test]
    fn validation_catches_bad_values() {
        for o in ["stages=0", "tau=1.5", "lambda_ent=-1", "task_optimizer.batch_size=0", "run_id=\"../x\""] {
            assert!(RunConfig::default().with_overrides(&[o]).is_err(), "{o}");
        }
    }

    #[test]
    fn baseline_budgets() {
        let mut b = Budget::default();
        assert_eq!(b.per_image(64, 64), 41);
        assert_eq!(b.per_image(10, 10), 1);
        b.baseline = BaselineUnit::Point;
        assert_eq!(b.per_image(64, 64), 5);
    }
}
