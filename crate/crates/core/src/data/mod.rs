//! Long-tailed splits, dataset sources, augmentation and batch loading.

mod augment;
mod image;
mod loader;
mod longtail;
mod source;

pub use augment::{apply_op, hflip, reflect_crop, strong_augment, weak_augment, AugOp, AugmentPolicy, WEAK_TRANSFORMS};
pub use image::{stack_images, Image, Normalization};
pub use loader::{BatchConfig, BatchSource, EpochSampler, Loader, LoaderState, Prefetcher, TrainBatch};
pub use longtail::{build_splits, longtail_counts, SplitManifest, SplitSpec};
pub use source::{CifarDataset, CifarVariant, InMemoryDataset, SourceDataset, SyntheticShapes, DATA_DIR_ENV};
