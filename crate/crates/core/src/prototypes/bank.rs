use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AttributeSchema, NoduleSample};
use crate::error::{Error, Result};
use crate::numerics::{euclidean, ParamStore, Scalar, Tensor};

pub const PROTOTYPES_PER_CLASS: usize = 2;
pub const PROTOTYPE_DIM: usize = 16;
pub const DEFAULT_DIST_MAX: f64 = 2.0;
/// Name of the `[P, dim]` tensor holding every prototype vector.
pub const PROTOTYPE_PARAM: &str = "prototypes";

/// Metadata of one prototype; the vector itself lives in the bank's
/// parameter store at the same index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeEntry {
    pub attr_index: usize,
    pub class_label: i32,
    /// Position within its class group (0 or 1).
    pub slot: usize,
    #[serde(skip)]
    pub source_image: Option<Tensor<f32>>,
    pub source_sample_id: Option<String>,
    pub source_gt_score: Option<f64>,
}

impl PrototypeEntry {
    pub fn is_pushed(&self) -> bool {
        self.source_gt_score.is_some()
    }
}

/// Per-attribute prototype groups, two vectors per score class.
#[derive(Debug, Clone)]
pub struct PrototypeBank<T> {
    schema: AttributeSchema,
    entries: Vec<PrototypeEntry>,
    params: ParamStore<T>,
    offsets: Vec<usize>,
    dist_max: f64,
}

/// Nearest prototype per attribute for one sample, with its distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nearest<T> {
    pub id: usize,
    pub distance: T,
}

/// Cluster and separation terms of one sample together with the nearest
/// prototypes they were computed from.
#[derive(Debug, Clone)]
pub struct ProtoLoss<T> {
    pub cluster: T,
    pub separation: T,
    correct: Vec<Nearest<T>>,
    wrong: Vec<Nearest<T>>,
}

/// LIDC-sized bank with default dimension and `dist_max`.
pub fn init_prototypes<T: Scalar>(schema: &AttributeSchema, seed: u64) -> Result<PrototypeBank<T>> {
    PrototypeBank::new(schema, PROTOTYPE_DIM, DEFAULT_DIST_MAX, seed)
}

impl<T: Scalar> PrototypeBank<T> {
    /// Vectors drawn i.i.d. from `U[0, 1)`.
    pub fn new(schema: &AttributeSchema, dim: usize, dist_max: f64, seed: u64) -> Result<Self> {
        if schema.is_empty() {
            return Err(Error::InvalidInput("attribute schema is empty".into()));
        }
        if dim == 0 || !(dist_max > 0.0) {
            return Err(Error::InvalidInput(format!(
                "prototype dim {dim} and dist_max {dist_max} must be positive"
            )));
        }
        let mut entries = Vec::new();
        let mut offsets = vec![0];
        for (a, attr) in schema.iter().enumerate() {
            for class_label in attr.classes() {
                for slot in 0..PROTOTYPES_PER_CLASS {
                    entries.push(PrototypeEntry {
                        attr_index: a,
                        class_label,
                        slot,
                        source_image: None,
                        source_sample_id: None,
                        source_gt_score: None,
                    });
                }
            }
            offsets.push(entries.len());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        params.insert(PROTOTYPE_PARAM, Tensor::uniform(&[entries.len(), dim], 0.0, 1.0, &mut rng))?;
        Ok(Self {
            schema: schema.clone(),
            entries,
            params,
            offsets,
            dist_max,
        })
    }

    /// Rebuilds a bank from stored parts, checking them against `schema`.
    pub fn from_parts(
        schema: &AttributeSchema,
        entries: Vec<PrototypeEntry>,
        vectors: Tensor<T>,
        dist_max: f64,
    ) -> Result<Self> {
        let mut bank = Self::new(schema, vectors.shape().get(1).copied().unwrap_or(0), dist_max, 0)?;
        if vectors.shape() != [bank.len(), bank.dim()] {
            return Err(Error::Checkpoint(format!(
                "prototype tensor {:?} does not fit {} prototypes",
                vectors.shape(),
                bank.len()
            )));
        }
        for (have, want) in entries.iter().zip(&bank.entries) {
            if (have.attr_index, have.class_label, have.slot) != (want.attr_index, want.class_label, want.slot) {
                return Err(Error::Checkpoint("prototype entries do not match the attribute schema".into()));
            }
        }
        if entries.len() != bank.len() {
            return Err(Error::Checkpoint(format!("{} prototype entries, expected {}", entries.len(), bank.len())));
        }
        bank.entries = entries;
        bank.params.assign(0, vectors.data())?;
        Ok(bank)
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.params.get(0).shape()[1]
    }

    pub fn dist_max(&self) -> f64 {
        self.dist_max
    }

    pub fn num_attributes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Prototype count per attribute.
    pub fn counts(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Prototype ids of attribute `a`.
    pub fn attribute_range(&self, a: usize) -> Range<usize> {
        self.offsets[a]..self.offsets[a + 1]
    }

    /// Prototype ids of class `class_label` of attribute `a`.
    pub fn group(&self, a: usize, class_label: i32) -> Result<Range<usize>> {
        let attr = self.schema.get(a);
        if !attr.classes().contains(&class_label) {
            return Err(Error::InvalidInput(format!(
                "class {class_label} outside {} range {}..={}",
                attr.name, attr.min_score, attr.max_score
            )));
        }
        let start = self.offsets[a] + (class_label - attr.min_score) as usize * PROTOTYPES_PER_CLASS;
        Ok(start..start + PROTOTYPES_PER_CLASS)
    }

    pub fn entries(&self) -> &[PrototypeEntry] {
        &self.entries
    }

    pub fn entry(&self, id: usize) -> &PrototypeEntry {
        &self.entries[id]
    }

    pub fn vector(&self, id: usize) -> &[T] {
        let d = self.dim();
        &self.params.get(0).data()[id * d..(id + 1) * d]
    }

    /// All vectors as one `[P, dim]` tensor.
    pub fn vectors(&self) -> &Tensor<T> {
        self.params.get(0)
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// True once any prototype carries a pushed source.
    pub fn is_pushed(&self) -> bool {
        self.entries.iter().any(PrototypeEntry::is_pushed)
    }

    /// Per-attribute class of a sample, or `None` if it has no usable
    /// attribute labels.
    pub fn classes_of(&self, sample: &NoduleSample) -> Option<Vec<i32>> {
        sample.has_attr_labels().then(|| {
            self.schema
                .iter()
                .zip(&sample.labels.attr_means)
                .map(|(attr, &m)| attr.class_of(m))
                .collect()
        })
    }

    fn check_latent(&self, latent: &[T], classes: &[i32]) -> Result<()> {
        let a = self.num_attributes();
        if latent.len() != a * self.dim() || classes.len() != a {
            return Err(Error::shape(
                "prototype loss",
                format!(
                    "need {a} vectors of dim {} and {a} classes, got {} values and {} classes",
                    self.dim(),
                    latent.len(),
                    classes.len()
                ),
            ));
        }
        Ok(())
    }

    fn nearest_in(&self, v: &[T], ids: impl Iterator<Item = usize>) -> Option<Nearest<T>> {
        let mut best: Option<Nearest<T>> = None;
        for id in ids {
            let d = euclidean(v, self.vector(id));
            if best.is_none_or(|b| d < b.distance) {
                best = Some(Nearest { id, distance: d });
            }
        }
        best
    }

    /// Cluster and separation terms for one sample, each averaged over
    /// attributes. The separation hinge uses the nearest wrong-class
    /// prototype.
    pub fn losses(&self, latent: &[T], classes: &[i32]) -> Result<ProtoLoss<T>> {
        self.check_latent(latent, classes)?;
        let d = self.dim();
        let a_n = T::of(self.num_attributes() as f64);
        let dmax = T::of(self.dist_max);
        let mut out = ProtoLoss {
            cluster: T::zero(),
            separation: T::zero(),
            correct: Vec::with_capacity(classes.len()),
            wrong: Vec::with_capacity(classes.len()),
        };
        for (a, &c) in classes.iter().enumerate() {
            let v = &latent[a * d..(a + 1) * d];
            let group = self.group(a, c)?;
            let correct = self.nearest_in(v, group.clone()).expect("groups are non-empty");
            let wrong = self
                .nearest_in(v, self.attribute_range(a).filter(|id| !group.contains(id)))
                .ok_or_else(|| Error::InvalidInput(format!("attribute {a} has no wrong-class prototypes")))?;
            out.cluster += correct.distance / a_n;
            out.separation += (dmax - wrong.distance).max(T::zero()) / a_n;
            out.correct.push(correct);
            out.wrong.push(wrong);
        }
        Ok(out)
    }

    /// Accumulates `w_cluster * d(cluster)/d(.) + w_sep * d(separation)/d(.)`
    /// into the latent and prototype gradients. Zero distances contribute no
    /// gradient.
    pub fn losses_backward(
        &self,
        latent: &[T],
        loss: &ProtoLoss<T>,
        w_cluster: T,
        w_sep: T,
        grad_latent: &mut [T],
        grad_protos: &mut [T],
    ) {
        let d = self.dim();
        let a_n = T::of(self.num_attributes() as f64);
        let dmax = T::of(self.dist_max);
        let mut apply = |a: usize, n: &Nearest<T>, w: T| {
            if n.distance <= T::zero() || w == T::zero() {
                return;
            }
            let scale = w / (a_n * n.distance);
            let p = self.vector(n.id);
            for k in 0..d {
                let g = scale * (latent[a * d + k] - p[k]);
                grad_latent[a * d + k] += g;
                grad_protos[n.id * d + k] -= g;
            }
        };
        for (a, (c, w)) in loss.correct.iter().zip(&loss.wrong).enumerate() {
            apply(a, c, w_cluster);
            if w.distance < dmax {
                apply(a, w, -w_sep);
            }
        }
    }

    /// Nearest prototype per attribute over all of that attribute's
    /// classes; equal distances go to the lowest id.
    pub fn nearest(&self, latent: &[T]) -> Result<Vec<Nearest<T>>> {
        let a_n = self.num_attributes();
        if latent.len() != a_n * self.dim() {
            return Err(Error::shape("nearest prototype", format!("latent has {} values", latent.len())));
        }
        let d = self.dim();
        Ok((0..a_n)
            .map(|a| {
                self.nearest_in(&latent[a * d..(a + 1) * d], self.attribute_range(a))
                    .expect("attributes have prototypes")
            })
            .collect())
    }

    pub(crate) fn set_source(&mut self, id: usize, vector: &[T], sample: &NoduleSample, score: f64) {
        let d = self.dim();
        self.params.get_mut(0).data_mut()[id * d..(id + 1) * d].copy_from_slice(vector);
        let e = &mut self.entries[id];
        e.source_image = Some(sample.image.clone());
        e.source_sample_id = Some(sample.id().to_owned());
        e.source_gt_score = Some(score);
    }

    pub(crate) fn set_source_image(&mut self, id: usize, image: Tensor<f32>) {
        self.entries[id].source_image = Some(image);
    }
}

/// `(1/A) Σ_a min_{p in correct group} ‖O_a − p‖`.
pub fn cluster_loss<T: Scalar>(attr_vectors: &[Tensor<T>], gt_classes: &[i32], bank: &PrototypeBank<T>) -> Result<T> {
    let latent: Vec<T> = attr_vectors.iter().flat_map(|v| v.data().iter().copied()).collect();
    Ok(bank.losses(&latent, gt_classes)?.cluster)
}

/// `(1/A) Σ_a max(0, dist_max − min_{p not in correct group} ‖O_a − p‖)`.
pub fn separation_loss<T: Scalar>(
    attr_vectors: &[Tensor<T>],
    gt_classes: &[i32],
    bank: &PrototypeBank<T>,
) -> Result<T> {
    let latent: Vec<T> = attr_vectors.iter().flat_map(|v| v.data().iter().copied()).collect();
    Ok(bank.losses(&latent, gt_classes)?.separation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Attribute;

    fn one_attr_bank(vectors: &[[f64; 2]]) -> PrototypeBank<f64> {
        let schema = AttributeSchema::new(vec![Attribute::new("x", 1, vectors.len() as i32 / 2)]).unwrap();
        let mut bank = PrototypeBank::new(&schema, 2, 2.0, 0).unwrap();
        let flat: Vec<f64> = vectors.iter().flatten().copied().collect();
        bank.params.assign(0, &flat).unwrap();
        bank
    }

    #[test]
    fn lidc_counts() {
        let bank = init_prototypes::<f32>(&AttributeSchema::lidc(), 1).unwrap();
        assert_eq!(bank.counts(), vec![10, 8, 12, 10, 10, 10, 10, 10]);
        assert_eq!(bank.len(), 80);
        assert!(bank.vectors().data().iter().all(|&v| (0.0..1.0).contains(&v)));
        assert_eq!(bank.group(2, 6).unwrap(), 28..30);
        assert!(bank.group(1, 5).is_err());
    }

    #[test]
    fn cluster_example() {
        // correct group {(0,0), (2,0)}, O = (1,0)
        let bank = one_attr_bank(&[[0.0, 0.0], [2.0, 0.0], [9.0, 9.0], [9.0, 9.0]]);
        let l = bank.losses(&[1.0, 0.0], &[1]).unwrap();
        assert_eq!(l.cluster, 1.0);
        assert_eq!(l.separation, 0.0);
    }

    #[test]
    fn separation_examples() {
        let bank = one_attr_bank(&[[0.0, 0.0], [0.0, 0.0], [0.5, 0.0], [3.0, 0.0]]);
        assert_eq!(bank.losses(&[0.0, 0.0], &[1]).unwrap().separation, 1.5);
        let bank = one_attr_bank(&[[0.0, 0.0], [0.0, 0.0], [4.0, 0.0], [0.0, 0.0]]);
        assert_eq!(bank.losses(&[0.0, 0.0], &[1]).unwrap().separation, 2.0);
        assert_eq!(bank.losses(&[0.0, 0.0], &[1]).unwrap().cluster, 0.0);
    }

    #[test]
    fn equidistant_goes_to_lowest_id() {
        let bank = one_attr_bank(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]);
        let n = bank.nearest(&[0.0, 0.0]).unwrap();
        assert_eq!(n[0].id, 0);
    }
}
