//! Long-tailed multi-label chest X-ray classification.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`datakit`]: manifests, class statistics, Head/Tail/All partitioning and
//!   a synthetic long-tailed dataset generator with an embedded image store.
//! - [`augment`]: the training-time augmentation policy.
//! - [`model`]: convolutional backbone, 2-D positional encoding, ML-Decoder
//!   classification head, Grad-CAM and the weight-manifest format.
//! - [`losses`]: BCE, weighted BCE and focal loss with analytic gradients.
//! - [`training`]: Lion optimizer, the training loop, checkpoints and
//!   classifier re-training (cRT).
//! - [`imbalance`]: cRT re-sampling and random oversampling.
//! - [`ensemble`]: Head/Tail/All branch prediction and combination.
//! - [`metrics`]: AP/mAP, macro-F1, ROC/AUC, Youden thresholds, per-group FNR
//!   and Equality of Opportunity, plus report and plot emission.

pub mod augment;
pub mod datakit;
pub mod ensemble;
pub mod imbalance;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod training;

pub use datakit::{ClassPartition, DatasetManifest, LabelMatrix, ScoreMatrix};
pub use ensemble::Branch;
