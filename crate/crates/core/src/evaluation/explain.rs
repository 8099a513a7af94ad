use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NoduleSample;
use crate::error::{Error, Result};
use crate::model::{ModelInput, ProtoCaps};
use crate::numerics::Scalar;
use crate::prototypes::{infer_attributes, write_pgm, PrototypeBank};

pub const EXPLANATION_FILE: &str = "explanation.json";
pub const SAMPLE_IMAGE_FILE: &str = "sample.pgm";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeExplanation {
    pub attribute: String,
    pub predicted_score: f64,
    pub prototype_id: usize,
    pub class_label: i32,
    pub distance: f64,
    pub source_sample_id: String,
    pub source_gt_score: f64,
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationBundle {
    pub sample_id: String,
    pub sample_image: String,
    pub malignancy_pred: f64,
    pub malignancy_dist: Vec<f64>,
    pub attributes: Vec<AttributeExplanation>,
}

/// Writes the sample's image, the source image of the nearest prototype of
/// each attribute, and a JSON summary into `dir`.
pub fn explain_sample<T: Scalar>(
    model: &ProtoCaps<T>,
    bank: &PrototypeBank<T>,
    sample: &NoduleSample,
    dir: &Path,
) -> Result<ExplanationBundle> {
    let input = ModelInput::<T>::from_sample(sample, model.config());
    let (out, _) = model.forward(&input.image)?;
    let (scores, explanations) = infer_attributes(&out.latent(), bank)?;
    fs::create_dir_all(dir)?;
    write_pgm(&dir.join(SAMPLE_IMAGE_FILE), &sample.image)?;
    let mut attributes = Vec::with_capacity(scores.len());
    for (score, ex) in scores.into_iter().zip(explanations) {
        let attr = bank.schema().get(ex.attr_index);
        let image = format!("attr{}_{}_prototype.pgm", ex.attr_index, attr.name);
        let source = bank
            .entry(ex.prototype_id)
            .source_image
            .as_ref()
            .ok_or_else(|| Error::Checkpoint(format!("prototype {} has no source image", ex.prototype_id)))?;
        write_pgm(&dir.join(&image), source)?;
        attributes.push(AttributeExplanation {
            attribute: attr.name.clone(),
            predicted_score: score,
            prototype_id: ex.prototype_id,
            class_label: ex.class_label,
            distance: ex.distance,
            source_sample_id: ex.source_sample_id,
            source_gt_score: ex.source_gt_score,
            image,
        });
    }
    let dist: Vec<f64> = out.malignancy_dist.data().iter().map(|v| v.as_f64()).collect();
    let bundle = ExplanationBundle {
        sample_id: sample.id().to_owned(),
        sample_image: SAMPLE_IMAGE_FILE.to_owned(),
        malignancy_pred: super::malignancy_scalar(&dist),
        malignancy_dist: dist,
        attributes,
    };
    fs::write(dir.join(EXPLANATION_FILE), serde_json::to_string_pretty(&bundle)?)?;
    Ok(bundle)
}
