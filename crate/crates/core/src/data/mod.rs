//! Synthetic composites, trimaps and the region masks consumed by the losses.

pub mod dataset;
pub mod synth;
pub mod trimap;

pub use dataset::{Dataset, ManifestEntry};
pub use synth::{composite, make_sample, Attribute, CompositeSample, Generator};
pub use synth::{EVAL_TRIMAP_RADIUS, TRAIN_TRIMAP_RADII};
pub use trimap::{make_trimap, BG, FG, TR, region_mask, scaling_mask, Region, Trimap};
