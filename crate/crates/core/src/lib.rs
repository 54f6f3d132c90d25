//! Active domain adaptation for semantic segmentation.
//!
//! A task model is pretrained on a labeled source domain. Each stage clones
//! it into a two-head selector, self-trains the selector on target pseudo
//! labels, plays a discrepancy min-max game between its heads, and asks an
//! oracle to label the pixels where the heads disagree. The task model is
//! then retrained on the accumulated sparse labels.

pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod netpbm;
pub mod numerics;
pub mod oracle;
pub mod par;
pub mod pipeline;
pub mod selection;

pub use error::{Error, Result};
pub use model::ModelParams;
pub use numerics::{ProbMap, Tensor};
pub use oracle::{AnnotationStore, SparseLabelMap, IGNORE};
pub use par::Execution;
pub use selection::Strategy;
