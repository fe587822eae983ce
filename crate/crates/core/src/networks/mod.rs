//! Segmentation network, domain discriminator and checkpoints.

pub mod checkpoint;
pub mod discriminator;
pub mod prediction;
pub mod segmenter;

pub use checkpoint::{load_discriminator, load_segmenter};
pub use discriminator::{build_discriminator, DiscriminatorConfig, DomainDiscriminator};
pub use prediction::{PredictionBatch, ProbMaps};
pub use segmenter::{build_segmenter, AsppConfig, SegLogits, SegNetConfig, SegmentationNetwork};
