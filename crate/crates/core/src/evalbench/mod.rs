//! Dataset ingestion, preprocessing and augmentation, train/validation
//! splitting, and classification metrics.

mod dataset;
mod image_ops;
mod metrics;

pub use dataset::{
    index_dataset, load_dataset, load_image, split, split_stratified, Dataset, DatasetIndex, DatasetSplit,
    LabeledImage, IMAGE_EXTENSIONS,
};
pub use image_ops::{augment, preprocess, resize_bilinear, AugmentSpec, MODEL_SIDE};
pub use metrics::{evaluate, evaluate_paths, ClassificationReport, ConfusionMatrix, PathEvaluation};
