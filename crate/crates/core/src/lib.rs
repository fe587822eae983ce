//! Domain-robust 2D multi-class segmentation.
//!
//! A U-Net baseline trained slice-wise with multi-class cross-entropy, plus
//! three regularizers: mixup with loss interpolation, output-space
//! adversarial domain adaptation, and a two-level variant with an ASPP
//! auxiliary head. A synthetic phantom generator provides labeled source,
//! unlabeled target and annotated test domains; evaluation follows a
//! planar/volumetric Dice protocol with bootstrap slice profiles and paired
//! Wilcoxon comparisons.

pub mod data_model;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod optim;
pub mod par;
pub mod phantom;
pub mod preprocess;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
