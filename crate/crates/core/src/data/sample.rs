use serde::{Deserialize, Serialize};

use super::AttributeSchema;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Side length of stored image and mask planes.
pub const IMAGE_SIZE: usize = 32;
pub const MALIGNANCY_BINS: usize = 5;
/// Lower bound on the rater standard deviation used for the target.
pub const MIN_TARGET_STD: f64 = 0.25;

/// Per-sample labels, one line of `samples.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleLabels {
    pub id: String,
    pub mal_mean: f64,
    pub mal_std: f64,
    pub n_raters: u32,
    pub attr_means: Vec<f64>,
    /// 0 when attribute labels may be used for training, 1 when masked.
    pub b: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoduleSample {
    pub labels: SampleLabels,
    /// `[1, 32, 32]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[1, 32, 32]`, values in `{0, 1}`.
    pub mask: Tensor<f32>,
}

impl NoduleSample {
    pub fn id(&self) -> &str {
        &self.labels.id
    }

    pub fn has_attr_labels(&self) -> bool {
        self.labels.b == 0
    }

    pub fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        let l = &self.labels;
        let fail = |reason: String| Err(Error::sample(&l.id, reason));
        let plane = [1, IMAGE_SIZE, IMAGE_SIZE];
        if self.image.shape() != plane || self.mask.shape() != plane {
            return fail(format!(
                "image {:?} / mask {:?}, expected {plane:?}",
                self.image.shape(),
                self.mask.shape()
            ));
        }
        if let Some(v) = self.image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return fail(format!("image value {v} outside [0,1]"));
        }
        if let Some(v) = self.mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return fail(format!("mask value {v} is not binary"));
        }
        if !(1.0..=5.0).contains(&l.mal_mean) {
            return fail(format!("mal_mean {} outside [1,5]", l.mal_mean));
        }
        if !(l.mal_std >= 0.0 && l.mal_std.is_finite()) {
            return fail(format!("mal_std {} must be non-negative", l.mal_std));
        }
        if l.n_raters < 1 {
            return fail("n_raters must be at least 1".into());
        }
        if l.b > 1 {
            return fail(format!("b must be 0 or 1, got {}", l.b));
        }
        if l.attr_means.len() != schema.len() {
            return fail(format!(
                "{} attribute scores, schema has {}",
                l.attr_means.len(),
                schema.len()
            ));
        }
        for (attr, &v) in schema.iter().zip(&l.attr_means) {
            if !attr.contains(v) {
                return fail(format!(
                    "{} score {v} outside {}..={}",
                    attr.name, attr.min_score, attr.max_score
                ));
            }
        }
        Ok(())
    }
}

/// Drops samples whose mean malignancy is exactly 3 (indeterminate) or that
/// were scored by fewer than three raters.
pub fn exclusion_filter(samples: Vec<NoduleSample>) -> Vec<NoduleSample> {
    samples.into_iter().filter(|s| !is_excluded(&s.labels)).collect()
}

pub fn is_excluded(l: &SampleLabels) -> bool {
    l.mal_mean == 3.0 || l.n_raters < 3
}

/// Gaussian fitted to the rater malignancy scores, evaluated at the integer
/// scores 1..=5 and normalized.
pub fn malignancy_target(mal_mean: f64, mal_std: f64) -> [f64; MALIGNANCY_BINS] {
    let sigma = mal_std.max(MIN_TARGET_STD);
    let mut p = [0.0; MALIGNANCY_BINS];
    for (s, v) in p.iter_mut().enumerate() {
        let d = (s + 1) as f64 - mal_mean;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
    }
    let sum: f64 = p.iter().sum();
    for v in &mut p {
        *v /= sum;
    }
    p
}
