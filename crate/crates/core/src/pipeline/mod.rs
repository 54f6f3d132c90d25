//! The staged active-adaptation loop.
//!
//! [`Experiment`] owns the task model, the annotation store and the budget
//! ledger for one run. A stage proposes pixels (training a throwaway
//! selector when the strategy needs one), has them labeled, retrains the
//! task model on everything labeled so far and evaluates it on target val.
//! The simulated oracle and the HTTP service share these steps.

mod config;
mod eval;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{BaselineUnit, Budget, DataConfig, Epochs, Optimizer, RunConfig};
pub use eval::{evaluate, ConfusionMatrix, EvalResult};

use crate::data::{self, Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::losses::{
    discrepancy_minmax_round, loss_entropy_reg, loss_self, loss_source, loss_target_sparse, make_pseudo_labels,
    LossName, LossReport, TrainLog,
};
use crate::model::{save_checkpoint, GradScope, Gradients, ModelParams, ParamSet, StepOutcome, Update};
use crate::oracle::{reveal, AnnotationStore, Provenance, SparseLabelMap};
use crate::par::{self, Execution};
use crate::selection::{
    inconsistency_mask, score_entropy, score_sconf, select_budgeted, select_ppl, select_spl, BudgetLedger,
    ImageSelection, PointSet, PplVariant, Scorer, SelectionDump, SelectionReport, Strategy,
};

const TAG_INIT: u64 = 1;
const TAG_PRETRAIN: u64 = 2;
const TAG_SELF_TRAIN: u64 = 3;
const TAG_DISCREPANCY: u64 = 4;
const TAG_RETRAIN: u64 = 5;
const TAG_RAND: u64 = 6;

/// Mixes `parts` into `seed` (splitmix64 finalizer per part).
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(seed, |acc, &p| {
        let mut z = acc ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Where and how one training phase runs.
struct Phase<'a> {
    name: &'a str,
    stage: usize,
    seed: u64,
    epochs: usize,
    optimizer: &'a crate::pipeline::Optimizer,
    update: Update,
    exec: Execution,
}

/// Minibatch SGD over `n` items. `loss` returns `None` for an item with
/// nothing to learn from; a batch of such items is skipped. Returns the
/// mean loss over the final epoch.
fn train_epochs<F>(model: &mut ModelParams, n: usize, phase: &Phase<'_>, log: &mut TrainLog, loss: F) -> Result<Option<f64>>
where
    F: Fn(&ModelParams, usize) -> Result<Option<(LossReport, Gradients)>> + Sync + Send,
{
    model.reset_optimizer();
    let mut step = 0;
    let mut last = None;
    for epoch in 0..phase.epochs {
        let order = shuffled(n, derive_seed(phase.seed, &[epoch as u64]));
        let mut total = 0.0;
        let mut counted = 0usize;
        for batch in order.chunks(phase.optimizer.batch_size) {
            let snapshot = &*model;
            let results = par::map(phase.exec, batch, |_, &i| loss(snapshot, i));
            let mut reports = Vec::new();
            let mut grads = Vec::new();
            for r in results {
                if let Some((report, g)) = r? {
                    reports.push(report);
                    grads.push(g);
                }
            }
            let Some(mean) = ParamSet::mean_of(&grads) else { continue };
            let value = reports.iter().map(|r| r.value).sum::<f64>() / reports.len() as f64;
            let report = LossReport {
                name: reports[0].name,
                value,
                pixels_used: reports.iter().map(|r| r.pixels_used).sum(),
            };
            if model.sgd_step(&mean, phase.optimizer.lr, phase.optimizer.momentum, phase.update)? == StepOutcome::SkippedNonFinite {
                return Err(Error::NonFinite(format!("{} gradient at epoch {epoch}", phase.name)));
            }
            log.record(phase.stage, phase.name, step, &report)?;
            step += 1;
            total += value * reports.len() as f64;
            counted += reports.len();
        }
        if counted > 0 {
            last = Some(total / counted as f64);
        }
    }
    log.flush()?;
    Ok(last)
}

/// Dense source cross entropy for one image.
fn source_step(m: &ModelParams, item: &LabeledImage) -> Result<(LossReport, Gradients)> {
    let cache = m.backbone(&item.image)?;
    let probs = m.head_probs(&cache)?;
    let l = loss_source(&probs[0], &item.labels)?;
    Ok((l.report, m.backward(&cache, &[Some(&l.grad_logits)], GradScope::All)))
}

/// Sparse target loss plus the weighted entropy regularizer. Uses the
/// receptive-field pass when labels are sparse and the regularizer is off.
fn target_step(m: &ModelParams, image: &crate::Tensor, labels: &SparseLabelMap, lambda_ent: f64) -> Result<Option<(LossReport, Gradients)>> {
    let annotated = labels.annotated_count();
    let pixels = labels.width() * labels.height();
    if lambda_ent == 0.0 {
        if annotated == 0 {
            return Ok(None);
        }
        if annotated * 4 < pixels {
            let l = m.local_cross_entropy(image, labels)?;
            let report = LossReport {
                name: LossName::TargetSparse,
                value: l.value,
                pixels_used: l.pixels,
            };
            return Ok(Some((report, l.grads)));
        }
    }
    let cache = m.backbone(image)?;
    let probs = m.head_probs(&cache)?;
    let mut l = loss_target_sparse(&probs[0], labels)?;
    if lambda_ent > 0.0 {
        let e = loss_entropy_reg(&probs[0], labels)?;
        let lam = lambda_ent as f32;
        for (g, ge) in l.grad_logits.data_mut().iter_mut().zip(e.grad_logits.data()) {
            *g += lam * ge;
        }
        l.report.value += lambda_ent * e.report.value;
        l.report.pixels_used = pixels;
    }
    Ok(Some((l.report, m.backward(&cache, &[Some(&l.grad_logits)], GradScope::All))))
}

/// Trains a fresh task model on the source domain with `L_s`.
pub fn pretrain(config: &RunConfig, data: &Dataset, log: &mut TrainLog) -> Result<ModelParams> {
    config.validate()?;
    let mut model = ModelParams::init(data.classes(), derive_seed(config.seed, &[TAG_INIT]))?;
    let items = &data.source_train;
    let phase = Phase {
        name: "pretrain",
        stage: 0,
        seed: derive_seed(config.seed, &[TAG_PRETRAIN]),
        epochs: config.epochs.pretrain,
        optimizer: &config.task_optimizer,
        update: Update::Descend,
        exec: config.execution,
    };
    train_epochs(&mut model, items.len(), &phase, log, |m, i| source_step(m, &items[i]).map(Some))?;
    model.reset_optimizer();
    Ok(model)
}

/// Loads the dataset named by `config.data.dir`.
pub fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    let dir = config
        .data
        .dir
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset directory configured (data.dir)".into()))?;
    if !dir.join("dataset.json").is_file() {
        return Err(Error::Config(format!("dataset missing: {} has no dataset.json", dir.display())));
    }
    Dataset::load(dir)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub epochs: usize,
    pub source_val: EvalResult,
    pub target_val: EvalResult,
}

/// What the selector did in one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorStats {
    pub self_train_loss: Option<f64>,
    /// Batch-mean L_dis before the first and after the last ascent phase.
    pub discrepancy_first: Option<f64>,
    pub discrepancy_last: Option<f64>,
    pub mask_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub strategy: Strategy,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub budget: SelectionReport,
    /// Relative to the run directory.
    pub checkpoints: Vec<String>,
    pub retrain_loss: Option<f64>,
    pub selector: Option<SelectorStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub stages: usize,
    pub pretrain: PretrainRecord,
    pub records: Vec<StageRecord>,
    pub final_miou: f64,
}

/// Pixels proposed for one stage, one entry per target-train image.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub stage: usize,
    pub selections: Vec<ImageSelection>,
    pub masks: Option<Vec<crate::selection::InconsistencyMask>>,
    pub selector: Option<SelectorStats>,
}

/// One run: task model, annotations, budget and per-stage records.
pub struct Experiment {
    config: RunConfig,
    data: Arc<Dataset>,
    run_dir: Option<PathBuf>,
    log: TrainLog,
    ledger: BudgetLedger,
    store: AnnotationStore,
    task: Option<ModelParams>,
    pretrain: Option<PretrainRecord>,
    records: Vec<StageRecord>,
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io_path(dir, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io_path(path, e))
}

impl Experiment {
    /// Starts a run. With `out_root`, artifacts go to `out_root/<run_id>/`
    /// and the resolved config is written there first.
    pub fn new(config: RunConfig, data: Arc<Dataset>, out_root: Option<&Path>) -> Result<Self> {
        config.validate()?;
        if data.target_train.is_empty() || data.target_val.is_empty() {
            return Err(Error::Config("dataset has no target train or val images".into()));
        }
        let run_dir = out_root.map(|r| r.join(config.run_id()));
        let log = match &run_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io_path(dir, e))?;
                write_json(&dir.join("config.json"), &config)?;
                TrainLog::create(&dir.join("train_log.jsonl"))?
            }
            None => TrainLog::discard(),
        };
        let store = AnnotationStore::new(data.classes());
        Ok(Experiment {
            config,
            data,
            run_dir,
            log,
            ledger: BudgetLedger::new(),
            store,
            task: None,
            pretrain: None,
            records: Vec::new(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn data(&self) -> &Arc<Dataset> {
        &self.data
    }

    pub fn run_dir(&self) -> Option<&Path> {
        self.run_dir.as_deref()
    }

    pub fn store(&self) -> &AnnotationStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut AnnotationStore {
        &mut self.store
    }

    pub fn records(&self) -> &[StageRecord] {
        &self.records
    }

    pub fn task(&self) -> Option<&ModelParams> {
        self.task.as_ref()
    }

    pub fn pretrain_record(&self) -> Option<&PretrainRecord> {
        self.pretrain.as_ref()
    }

    fn exec(&self) -> Execution {
        self.config.execution
    }

    fn task_model(&self) -> Result<&ModelParams> {
        self.task
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("task model not pretrained yet".into()))
    }

    fn save_model(&self, model: &ModelParams, name: &str) -> Result<Option<String>> {
        let Some(dir) = &self.run_dir else { return Ok(None) };
        let rel = format!("checkpoints/{name}.bin");
        save_checkpoint(model, &dir.join(&rel))?;
        Ok(Some(rel))
    }

    /// Pretrains on the source domain (or adopts `model`, e.g. a shared
    /// pretrained checkpoint) and evaluates it on both val splits.
    pub fn pretrain(&mut self, model: Option<ModelParams>) -> Result<&PretrainRecord> {
        let model = match model {
            Some(m) if m.num_heads() == 1 && m.classes() == self.data.classes() => m,
            Some(_) => return Err(Error::InvalidArgument("pretrained model does not match the dataset".into())),
            None => pretrain(&self.config, &self.data, &mut self.log)?,
        };
        let record = PretrainRecord {
            epochs: self.config.epochs.pretrain,
            source_val: evaluate(&model, &self.data.source_val, self.exec())?,
            target_val: evaluate(&model, &self.data.target_val, self.exec())?,
        };
        log::info!(
            "pretrained: source val mIoU {:.4}, target val mIoU {:.4}",
            record.source_val.miou,
            record.target_val.miou
        );
        self.save_model(&model, "pretrain")?;
        self.task = Some(model);
        Ok(self.pretrain.insert(record))
    }

    /// Clones the task model into a two-head selector, self-trains it on
    /// confident task predictions, then plays the discrepancy game.
    pub fn train_selector(&mut self, stage: usize) -> Result<(ModelParams, SelectorStats)> {
        let task = self.task_model()?.clone();
        let cfg = self.config.clone();
        let exec = self.exec();
        let items = &self.data.target_train;
        let pseudo: Vec<SparseLabelMap> = par::map(exec, items, |_, item| {
            let pred = task.forward(&item.image)?;
            Ok(make_pseudo_labels(&pred.probs[0], cfg.tau))
        })
        .into_iter()
        .collect::<Result<_>>()?;

        let mut selector = task.clone_selector()?;
        let phase = Phase {
            name: "self_train",
            stage,
            seed: derive_seed(cfg.seed, &[TAG_SELF_TRAIN, stage as u64]),
            epochs: cfg.epochs.self_train,
            optimizer: &cfg.selector_optimizer,
            update: Update::Descend,
            exec,
        };
        let self_train_loss = train_epochs(&mut selector, items.len(), &phase, &mut self.log, |m, i| {
            if pseudo[i].annotated_count() == 0 {
                return Ok(None);
            }
            let l = loss_self(m, &items[i].image, &pseudo[i])?;
            Ok(Some((l.report, l.grads)))
        })?;

        selector.reset_optimizer();
        let settings = cfg.minmax();
        let (mut first, mut last) = (None, None);
        let mut step = 0;
        for epoch in 0..cfg.epochs.discrepancy {
            let order = shuffled(items.len(), derive_seed(cfg.seed, &[TAG_DISCREPANCY, stage as u64, epoch as u64]));
            for batch in order.chunks(cfg.selector_optimizer.batch_size) {
                let images: Vec<_> = batch.iter().map(|&i| items[i].image.clone()).collect();
                let out = discrepancy_minmax_round(&mut selector, &images, &settings, exec)?;
                if out.skipped_steps > 0 {
                    return Err(Error::NonFinite(format!("discrepancy round at epoch {epoch}")));
                }
                first.get_or_insert(out.before);
                last = Some(out.after_ascent);
                let report = LossReport {
                    name: LossName::Discrepancy,
                    value: out.after_ascent,
                    pixels_used: 0,
                };
                self.log.record(stage, "discrepancy", step, &report)?;
                step += 1;
            }
        }
        self.log.flush()?;
        let stats = SelectorStats {
            self_train_loss,
            discrepancy_first: first,
            discrepancy_last: last,
            mask_pixels: 0,
        };
        Ok((selector, stats))
    }

    /// Computes this stage's selections over target train.
    pub fn propose(&mut self, stage: usize) -> Result<Proposal> {
        self.propose_inner(stage).map_err(|e| e.in_stage(stage))
    }

    fn propose_inner(&mut self, stage: usize) -> Result<Proposal> {
        let strategy = self.config.strategy;
        let exec = self.exec();
        let mut masks = None;
        let mut selector_stats = None;
        let selections: Vec<ImageSelection> = if strategy.uses_selector() {
            let (selector, mut stats) = self.train_selector(stage)?;
            if self.config.save_selector {
                self.save_model(&selector, &format!("stage{stage}_selector"))?;
            }
            let task = self.task_model()?;
            let out = par::map(exec, &self.data.target_train, |_, item| {
                let sel = selector.forward(&item.image)?;
                let mask = inconsistency_mask(&sel.probs[0], &sel.probs[1])?;
                let points = match strategy {
                    Strategy::Spl => select_spl(&mask).to_points(),
                    _ => {
                        let variant = if strategy == Strategy::PplBest { PplVariant::Best } else { PplVariant::Worst };
                        select_ppl(&mask, &task.forward(&item.image)?.probs[0], variant)?
                    }
                };
                Ok((mask, selection(item, points)))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            stats.mask_pixels = out.iter().map(|(m, _)| m.count()).sum();
            log::info!("stage {stage}: selector mask covers {} pixels", stats.mask_pixels);
            selector_stats = Some(stats);
            let (m, s): (Vec<_>, Vec<_>) = out.into_iter().unzip();
            masks = Some(m);
            s
        } else {
            let items = &self.data.target_train;
            match strategy {
                Strategy::SourceOnly => items.iter().map(|i| selection(i, PointSet::default())).collect(),
                Strategy::Supervised => items
                    .iter()
                    .map(|i| {
                        let (w, h) = (i.labels.width() as u32, i.labels.height() as u32);
                        selection(i, PointSet::new((0..h).flat_map(|y| (0..w).map(move |x| (x, y)))))
                    })
                    .collect(),
                _ => {
                    let task = self.task_model()?;
                    let store = &self.store;
                    let seed = self.config.seed;
                    let budget = &self.config.budget;
                    par::map(exec, items, |idx, item| {
                        let (w, h) = (item.labels.width(), item.labels.height());
                        let exclude = store.labels_or_empty(&item.id, w, h);
                        let n = budget.per_image(w, h).min(w * h);
                        let points = if strategy == Strategy::Rand {
                            let s = derive_seed(seed, &[TAG_RAND, stage as u64, idx as u64]);
                            select_budgeted(Scorer::Random { width: w, height: h, seed: s }, n, &exclude)?
                        } else {
                            let probs = &task.forward(&item.image)?.probs[0];
                            let field = if strategy == Strategy::Sconf { score_sconf(probs) } else { score_entropy(probs) };
                            select_budgeted(Scorer::Field(&field), n, &exclude)?
                        };
                        Ok(selection(item, points))
                    })
                    .into_iter()
                    .collect::<Result<_>>()?
                }
            }
        };
        // Already-labeled pixels would be revealed with the same class; only
        // new pixels are proposed.
        let selections: Vec<ImageSelection> = selections
            .into_iter()
            .map(|mut sel| {
                if let Some(done) = self.store.get(&sel.image_id) {
                    let w = sel.width;
                    let fresh = sel.points.points().iter().copied();
                    sel.points = PointSet::new(fresh.filter(|&(x, y)| !done.is_annotated(y as usize * w + x as usize)));
                }
                sel
            })
            .collect();
        if let Some(dir) = &self.run_dir {
            let path = dir.join(format!("selections/stage{stage}.jsonl"));
            fs::create_dir_all(path.parent().expect("has parent")).map_err(|e| Error::io_path(&path, e))?;
            let mut out = Vec::new();
            for sel in &selections {
                serde_json::to_writer(&mut out, &SelectionDump::new(stage, strategy, sel)).map_err(|e| Error::json(&path, e))?;
                out.push(b'\n');
            }
            fs::File::create(&path)
                .and_then(|mut f| f.write_all(&out))
                .map_err(|e| Error::io_path(&path, e))?;
        }
        Ok(Proposal {
            stage,
            selections,
            masks,
            selector: selector_stats,
        })
    }

    /// Reveals ground truth at every proposed pixel and merges it into the
    /// store.
    pub fn annotate_simulated(&mut self, proposal: &Proposal) -> Result<()> {
        let strategy = self.config.strategy.to_string();
        for (item, sel) in self.data.target_train.iter().zip(&proposal.selections) {
            if sel.points.is_empty() {
                continue;
            }
            let revealed = reveal(&item.labels, &sel.points)?;
            let outcome = self
                .store
                .merge(&item.id, &revealed, Provenance::simulated(proposal.stage, strategy.clone()))?;
            if !outcome.rejected.is_empty() {
                return Err(Error::InvalidArgument(format!("simulated labels conflict in {}", item.id)).in_stage(proposal.stage));
            }
        }
        Ok(())
    }

    /// Retrains the task model on all annotations so far.
    pub fn retrain(&mut self, stage: usize) -> Result<Option<f64>> {
        let mut task = self.task_model()?.clone();
        let cfg = &self.config;
        let lambda = cfg.lambda_ent;
        let items: Vec<(&LabeledImage, SparseLabelMap)> = self
            .data
            .target_train
            .iter()
            .map(|item| (item, self.store.labels_or_empty(&item.id, item.labels.width(), item.labels.height())))
            .filter(|(_, labels)| lambda > 0.0 || labels.annotated_count() > 0)
            .collect();
        let phase = Phase {
            name: "retrain",
            stage,
            seed: derive_seed(cfg.seed, &[TAG_RETRAIN, stage as u64]),
            epochs: cfg.epochs.retrain,
            optimizer: &cfg.task_optimizer,
            update: Update::Descend,
            exec: cfg.execution,
        };
        let loss = train_epochs(&mut task, items.len(), &phase, &mut self.log, |m, i| {
            target_step(m, &items[i].0.image, &items[i].1, lambda)
        })?;
        task.reset_optimizer();
        self.task = Some(task);
        Ok(loss)
    }

    /// Books the stage's selections, retrains, evaluates and writes
    /// `stage<k>.json`.
    pub fn complete_stage(&mut self, proposal: Proposal) -> Result<&StageRecord> {
        let stage = proposal.stage;
        let inner = |this: &mut Self| -> Result<StageRecord> {
            let budget = this.ledger.record_stage(stage, this.config.strategy, &proposal.selections)?;
            let retrain_loss = this.retrain(stage)?;
            let task = this.task_model()?;
            let eval = evaluate(task, &this.data.target_val, this.exec())?;
            let mut checkpoints: Vec<String> = this.save_model(task, &format!("stage{stage}_task"))?.into_iter().collect();
            if this.config.strategy.uses_selector() && this.config.save_selector && this.run_dir.is_some() {
                checkpoints.push(format!("checkpoints/stage{stage}_selector.bin"));
            }
            if let Some(dir) = &this.run_dir {
                this.store.save(&dir.join("annotations"))?;
            }
            log::info!("stage {stage} ({}): target val mIoU {:.4}", this.config.strategy, eval.miou);
            Ok(StageRecord {
                stage,
                strategy: this.config.strategy,
                per_class_iou: eval.per_class_iou,
                miou: eval.miou,
                budget,
                checkpoints,
                retrain_loss,
                selector: proposal.selector.clone(),
            })
        };
        let record = inner(self).map_err(|e| e.in_stage(stage))?;
        if let Some(dir) = &self.run_dir {
            write_json(&dir.join(format!("stage{stage}.json")), &record)?;
        }
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }

    /// One simulated stage: propose, reveal, retrain, evaluate.
    pub fn run_stage(&mut self, stage: usize) -> Result<&StageRecord> {
        if stage == 0 {
            return Err(Error::InvalidArgument("stages are numbered from 1".into()));
        }
        let proposal = self.propose(stage)?;
        self.annotate_simulated(&proposal)?;
        self.complete_stage(proposal)
    }

    pub fn summary(&self) -> Result<RunSummary> {
        let pretrain = self
            .pretrain
            .clone()
            .ok_or_else(|| Error::InvalidArgument("run has not been pretrained".into()))?;
        let final_miou = self.records.last().map_or(pretrain.target_val.miou, |r| r.miou);
        Ok(RunSummary {
            run_id: self.config.run_id(),
            strategy: self.config.strategy,
            seed: self.config.seed,
            stages: self.config.stages,
            pretrain,
            records: self.records.clone(),
            final_miou,
        })
    }

    /// Runs every configured stage and writes `summary.json`.
    pub fn run(mut self) -> Result<RunSummary> {
        if self.task.is_none() {
            self.pretrain(None)?;
        }
        for stage in self.records.len() + 1..=self.config.stages {
            self.run_stage(stage)?;
        }
        let summary = self.summary()?;
        if let Some(dir) = &self.run_dir {
            write_json(&dir.join("summary.json"), &summary)?;
        }
        self.log.flush()?;
        Ok(summary)
    }
}

fn selection(item: &LabeledImage, points: PointSet) -> ImageSelection {
    ImageSelection {
        image_id: item.id.clone(),
        width: item.labels.width(),
        height: item.labels.height(),
        points,
    }
}

/// Full seeded run on `data`, optionally starting from a shared pretrained
/// model.
pub fn run_experiment(
    config: &RunConfig,
    data: Arc<Dataset>,
    out_root: Option<&Path>,
    pretrained: Option<ModelParams>,
) -> Result<RunSummary> {
    let mut exp = Experiment::new(config.clone(), data, out_root)?;
    exp.pretrain(pretrained)?;
    exp.run()
}

/// Convenience for small in-memory runs: generates the configured dataset.
pub fn generate_for(config: &RunConfig) -> Result<Dataset> {
    data::Dataset::generate(&config.data.scene, &config.data.counts, config.execution)
}
