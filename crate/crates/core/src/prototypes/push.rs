use serde::{Deserialize, Serialize};

use super::{Nearest, PrototypeBank};
use crate::data::NoduleSample;
use crate::error::{Error, Result};
use crate::numerics::{euclidean, Scalar};

/// Outcome of one push.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PushSummary {
    pub updated: usize,
    /// `(attribute, class)` groups without a candidate; left unchanged.
    pub empty_groups: Vec<(usize, i32)>,
}

/// Why an attribute was predicted the way it was.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub attr_index: usize,
    pub prototype_id: usize,
    pub class_label: i32,
    pub distance: f64,
    pub source_sample_id: String,
    pub source_gt_score: f64,
}

/// Replaces each prototype by the nearest latent among labeled samples of
/// the same class. `latents[i]` is the concatenated capsule output of
/// `samples[i]`; equal distances go to the lowest sample index.
pub fn push_prototypes<T: Scalar>(
    bank: &mut PrototypeBank<T>,
    latents: &[Vec<T>],
    samples: &[NoduleSample],
) -> Result<PushSummary> {
    if latents.len() != samples.len() {
        return Err(Error::shape(
            "push_prototypes",
            format!("{} latents for {} samples", latents.len(), samples.len()),
        ));
    }
    let d = bank.dim();
    let a_n = bank.num_attributes();
    if let Some(l) = latents.iter().find(|l| l.len() != a_n * d) {
        return Err(Error::shape("push_prototypes", format!("latent of length {}", l.len())));
    }
    let classes: Vec<Option<Vec<i32>>> = samples.iter().map(|s| bank.classes_of(s)).collect();
    let mut summary = PushSummary::default();
    for id in 0..bank.len() {
        let (a, class_label) = {
            let e = bank.entry(id);
            (e.attr_index, e.class_label)
        };
        let mut best: Option<(usize, T)> = None;
        for (i, c) in classes.iter().enumerate() {
            if c.as_ref().is_none_or(|c| c[a] != class_label) {
                continue;
            }
            let dist = euclidean(&latents[i][a * d..(a + 1) * d], bank.vector(id));
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((i, dist));
            }
        }
        match best {
            Some((i, _)) => {
                let v = latents[i][a * d..(a + 1) * d].to_vec();
                bank.set_source(id, &v, &samples[i], samples[i].labels.attr_means[a]);
                summary.updated += 1;
            }
            None => {
                if summary.empty_groups.last() != Some(&(a, class_label)) {
                    log::warn!(
                        "no labeled training sample of class {class_label} for attribute {}; prototypes left unchanged",
                        bank.schema().get(a).name
                    );
                    summary.empty_groups.push((a, class_label));
                }
            }
        }
    }
    Ok(summary)
}

/// Predicts each attribute as the source score of the nearest pushed
/// prototype of that attribute, bypassing the dense attribute head.
pub fn infer_attributes<T: Scalar>(latent: &[T], bank: &PrototypeBank<T>) -> Result<(Vec<f64>, Vec<Explanation>)> {
    let d = bank.dim();
    let a_n = bank.num_attributes();
    if latent.len() != a_n * d {
        return Err(Error::shape("infer_attributes", format!("latent has {} values", latent.len())));
    }
    let mut scores = Vec::with_capacity(a_n);
    let mut explanations = Vec::with_capacity(a_n);
    for a in 0..a_n {
        let v = &latent[a * d..(a + 1) * d];
        let mut best: Option<Nearest<T>> = None;
        for id in bank.attribute_range(a).filter(|&id| bank.entry(id).is_pushed()) {
            let distance = euclidean(v, bank.vector(id));
            if best.is_none_or(|b| distance < b.distance) {
                best = Some(Nearest { id, distance });
            }
        }
        let n = best.ok_or(Error::UnpushedBank)?;
        let e = bank.entry(n.id);
        let score = e.source_gt_score.expect("filtered to pushed entries");
        scores.push(score);
        explanations.push(Explanation {
            attr_index: a,
            prototype_id: n.id,
            class_label: e.class_label,
            distance: n.distance.as_f64(),
            source_sample_id: e.source_sample_id.clone().unwrap_or_default(),
            source_gt_score: score,
        });
    }
    Ok((scores, explanations))
}
