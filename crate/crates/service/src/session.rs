//! A human-in-the-loop run: the experiment, its open stage and the
//! proposals shown to the annotator.

use std::path::Path;
use std::sync::Arc;

use adaseg_core::data::Dataset;
use adaseg_core::oracle::{Conflict, Provenance};
use adaseg_core::pipeline::{Experiment, Proposal, RunConfig, StageRecord};
use adaseg_core::{Error, ModelParams, SparseLabelMap};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelIn {
    pub x: u32,
    pub y: u32,
    pub class: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRequest {
    pub image_id: String,
    pub labels: Vec<LabelIn>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationResponse {
    pub image_id: String,
    pub added: usize,
    pub unchanged: usize,
    pub rejected: Vec<Conflict>,
    pub image_annotated: usize,
    pub total_annotated: usize,
}

#[derive(Debug)]
pub enum SessionError {
    NotFound(String),
    BadRequest(String),
    Core(Error),
}

impl From<Error> for SessionError {
    fn from(e: Error) -> Self {
        SessionError::Core(e)
    }
}

impl std::fmt::Display for SessionError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SessionError::NotFound(m) | SessionError::BadRequest(m) => f.write_str(m),
            SessionError::Core(e) => write!(f, "{e}"),
        }
    }
}

pub struct Session {
    exp: Experiment,
    stage: usize,
    proposal: Proposal,
}

impl Session {
    /// Pretrains (or adopts `pretrained`) and proposes stage 1.
    pub fn start(
        config: RunConfig,
        data: Arc<Dataset>,
        pretrained: Option<ModelParams>,
        out_root: Option<&Path>,
    ) -> Result<Self, Error> {
        let mut exp = Experiment::new(config, data, out_root)?;
        exp.pretrain(pretrained)?;
        let proposal = exp.propose(1)?;
        Ok(Session { exp, stage: 1, proposal })
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn proposal(&self) -> &Proposal {
        &self.proposal
    }

    pub fn experiment(&self) -> &Experiment {
        &self.exp
    }

    /// Merges human labels for one target-train image. Pixels that clash
    /// with stored labels are reported and skipped; the rest are applied.
    pub fn annotate(&mut self, req: &AnnotationRequest) -> Result<AnnotationResponse, SessionError> {
        let data = self.exp.data().clone();
        let item = data
            .target_train
            .iter()
            .find(|i| i.id == req.image_id)
            .ok_or_else(|| SessionError::NotFound(format!("unknown image {:?}", req.image_id)))?;
        let (w, h) = (item.labels.width(), item.labels.height());
        let classes = data.classes();
        let mut map = SparseLabelMap::new_ignored(w, h);
        for l in &req.labels {
            let (x, y) = (l.x as usize, l.y as usize);
            if x >= w || y >= h {
                return Err(SessionError::BadRequest(format!("pixel ({x}, {y}) outside the {w}×{h} image")));
            }
            if l.class as usize >= classes {
                return Err(SessionError::BadRequest(format!("class {} out of range for {classes} classes", l.class)));
            }
            let current = map.get(x, y);
            if map.is_annotated(y * w + x) && current != l.class {
                return Err(SessionError::BadRequest(format!("pixel ({x}, {y}) labeled twice with different classes")));
            }
            map.set(x, y, l.class);
        }
        let strategy = self.exp.config().strategy.to_string();
        let outcome = self.exp.store_mut().merge(&item.id, &map, Provenance::human(self.stage, strategy))?;
        if let Some(dir) = self.exp.run_dir() {
            self.exp.store().save(&dir.join("annotations"))?;
        }
        Ok(AnnotationResponse {
            image_id: item.id.clone(),
            added: outcome.added,
            unchanged: outcome.unchanged,
            rejected: outcome.rejected,
            image_annotated: self.exp.store().annotated_count(&item.id),
            total_annotated: self.exp.store().total_annotated(),
        })
    }

    /// Closes the open stage (budget, retraining, evaluation) and proposes
    /// the next one.
    pub fn advance(&mut self) -> Result<StageRecord, Error> {
        let record = self.exp.complete_stage(self.proposal.clone())?.clone();
        self.proposal = self.exp.propose(self.stage + 1)?;
        self.stage += 1;
        Ok(record)
    }
}
