//! Datasets, the synthetic planted-instance generator, cross-validation
//! splits, class-balanced sampling and augmentations.

pub mod augment;
mod dataset;
mod folds;
mod synthetic;

pub use augment::{apply_augmentations, AugmentationSpec, CropView, MultiCropSpec, Transform};
pub use dataset::{
    BagRecord, Dataset, DatasetManifest, DATASET_FORMAT, DATASET_VERSION, InstancePool, PlantedTruth, Provenance, BLOB_FILE,
    MANIFEST_FILE, TRUTH_FILE,
};
pub use folds::{balanced_bag_sampler, stratified_kfold, FoldSplit, VALIDATION_SHARE};
pub use synthetic::{generate_synthetic, planted_count, SyntheticConfig};

use std::path::Path;

use crate::error::Result;
use crate::io::write_bytes;

/// Writes a generated dataset and its planted truth into `dir`.
pub fn write_with_truth(dir: &Path, dataset: &Dataset, truth: &PlantedTruth) -> Result<()> {
    dataset.write(dir)?;
    let json = serde_json::to_vec_pretty(truth).expect("truth serializes");
    write_bytes(&dir.join(TRUTH_FILE), &json)
}
