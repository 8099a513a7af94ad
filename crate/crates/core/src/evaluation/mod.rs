//! Metrics, evaluation modes and experiment drivers.

mod explain;
mod metrics;
mod report;
mod sweep;

pub use explain::{explain_sample, AttributeExplanation, ExplanationBundle, EXPLANATION_FILE, SAMPLE_IMAGE_FILE};
pub use metrics::{dice, malignancy_scalar, within1, within1_accuracy, WITHIN1_SLACK};
pub use report::{evaluate, format_table, EvalReport, SampleRecord, Stat, TableRow};
pub use sweep::{label_fraction_sweep, SweepRow};
