//! Landmark alignment, normalization and augmentation of face crops.

mod augment;
mod image;
mod pipeline;
mod similarity;
mod warp;

pub use augment::{augment, augment_traced, AugmentationConfig, AugmentationPlan, ColorJitter};
pub use image::Image;
pub use pipeline::{
    align_dataset, align_image, crop_key, identity_of, AlignConfig, AlignedEntry, CsvLandmarks,
    LandmarkProvider, LANDMARK_CSV_HEADER,
};
pub use similarity::{
    estimate_similarity_transform, LandmarkSet, SimilarityTransform, ALIGNED_SIZE, DEFAULT_TEMPLATE,
};
pub use warp::{normalize_image, warp_and_crop, AlignedFace, Provenance};
