//! Dataset schema, label construction, folds, the on-disk format, and the
//! synthetic generator.

mod folds;
mod io;
mod sample;
mod schema;
mod synth;

pub use folds::{stratified_folds, stratified_holdout, stratum, FoldAssignment, Split, VALIDATION_FRACTION};
pub use io::{
    load_dataset, write_dataset, Dataset, DatasetManifest, DATASET_SCHEMA_VERSION, IMAGES_FILE, MANIFEST_FILE,
    MASKS_FILE, SAMPLES_FILE,
};
pub use sample::{
    exclusion_filter, is_excluded, malignancy_target, NoduleSample, SampleLabels, IMAGE_SIZE, MALIGNANCY_BINS,
    MIN_TARGET_STD,
};
pub use schema::{Attribute, AttributeSchema, LIDC_SHORT_NAMES};
pub use synth::{synth_generate, NoduleParams};
