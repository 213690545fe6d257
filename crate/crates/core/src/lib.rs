//! Unsupervised adaptation of compositional vMF generative classifiers.
//!
//! The pipeline learns a von Mises-Fisher kernel dictionary on labeled source
//! features, adapts it to unlabeled target features under a pull toward the
//! source kernels, learns per-class spatial kernel distributions on the source
//! maps with the adapted dictionary, and refines them with pseudo-labels from
//! the target domain. Classification optionally explains occluded positions
//! with a background density.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod corpus;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod head;
pub mod io;
pub mod math;
pub mod pipeline;
pub mod synth;
pub mod transition;
pub mod vmf;

pub use error::{Error, Result, ValidationKind};
pub use eval::{evaluate, EvalReport};
pub use finetune::{FinetuneConfig, FinetuneMode, PseudoLabelSet};
pub use head::{classify, GenerativeModel, OcclusionMask, OcclusionModel, SpatialCoefficients};
pub use pipeline::{run_pipeline, PipelineConfig, RunOptions};
pub use transition::{AdaptConfig, AdaptReport, PsiMode};
pub use vmf::{EmConfig, FeatureMap, FeatureSet, VmfDictionary};
