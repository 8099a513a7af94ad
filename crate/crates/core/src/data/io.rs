//! On-disk dataset directory:
//!
//! ```text
//! manifest.json   { schema_version, sample_count, image_size, attributes, folds? }
//! samples.jsonl   one SampleLabels object per line, in storage order
//! images.bin      sample_count planes of image_size^2 little-endian f32
//! masks.bin       sample_count planes of image_size^2 u8 (0 or 1)
//! ```

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Attribute, AttributeSchema, FoldAssignment, NoduleSample, SampleLabels, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const IMAGES_FILE: &str = "images.bin";
pub const MASKS_FILE: &str = "masks.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub sample_count: usize,
    pub image_size: usize,
    pub attributes: Vec<Attribute>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folds: Option<FoldAssignment>,
}

impl DatasetManifest {
    pub fn new(sample_count: usize, schema: &AttributeSchema) -> Self {
        Self {
            schema_version: DATASET_SCHEMA_VERSION,
            sample_count,
            image_size: IMAGE_SIZE,
            attributes: schema.iter().cloned().collect(),
            folds: None,
        }
    }

    pub fn schema(&self) -> Result<AttributeSchema> {
        AttributeSchema::new(self.attributes.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<NoduleSample>,
}

fn dataset_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes `samples` into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, samples: &[NoduleSample], schema: &AttributeSchema, folds: Option<FoldAssignment>) -> Result<()> {
    for s in samples {
        s.validate(schema)?;
    }
    fs::create_dir_all(dir)?;
    let mut manifest = DatasetManifest::new(samples.len(), schema);
    manifest.folds = folds;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;

    let mut labels = BufWriter::new(File::create(dir.join(SAMPLES_FILE))?);
    let mut images = BufWriter::new(File::create(dir.join(IMAGES_FILE))?);
    let mut masks = BufWriter::new(File::create(dir.join(MASKS_FILE))?);
    for s in samples {
        serde_json::to_writer(&mut labels, &s.labels)?;
        labels.write_all(b"\n")?;
        for &v in s.image.data() {
            images.write_all(&v.to_le_bytes())?;
        }
        let bytes: Vec<u8> = s.mask.data().iter().map(|&v| v as u8).collect();
        masks.write_all(&bytes)?;
    }
    labels.flush()?;
    images.flush()?;
    masks.flush()?;
    Ok(())
}

/// Reads and validates a dataset directory; the first invalid sample aborts
/// the load with its id.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: DatasetManifest = serde_json::from_str(
        &fs::read_to_string(&manifest_path).map_err(|e| dataset_err(&manifest_path, e.to_string()))?,
    )
    .map_err(|e| dataset_err(&manifest_path, e.to_string()))?;
    if manifest.schema_version != DATASET_SCHEMA_VERSION {
        return Err(dataset_err(
            &manifest_path,
            format!(
                "schema version {} (supported: {DATASET_SCHEMA_VERSION})",
                manifest.schema_version
            ),
        ));
    }
    if manifest.image_size != IMAGE_SIZE {
        return Err(dataset_err(
            &manifest_path,
            format!("image_size {} (expected {IMAGE_SIZE})", manifest.image_size),
        ));
    }
    let schema = manifest.schema()?;
    if schema != AttributeSchema::lidc() {
        return Err(dataset_err(&manifest_path, "attribute schema differs from the LIDC schema"));
    }

    let labels_path = dir.join(SAMPLES_FILE);
    let reader = BufReader::new(File::open(&labels_path).map_err(|e| dataset_err(&labels_path, e.to_string()))?);
    let mut labels = Vec::with_capacity(manifest.sample_count);
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: SampleLabels =
            serde_json::from_str(&line).map_err(|e| dataset_err(&labels_path, format!("line {}: {e}", n + 1)))?;
        labels.push(l);
    }
    if labels.len() != manifest.sample_count {
        return Err(dataset_err(
            &labels_path,
            format!("{} records, manifest declares {}", labels.len(), manifest.sample_count),
        ));
    }
    let mut ids = HashSet::new();
    for l in &labels {
        if !ids.insert(l.id.as_str()) {
            return Err(Error::sample(&l.id, "duplicate id"));
        }
    }

    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let images = read_planes(dir, IMAGES_FILE, &labels, plane * 4)?;
    let masks = read_planes(dir, MASKS_FILE, &labels, plane)?;
    let mut samples = Vec::with_capacity(labels.len());
    for (i, l) in labels.into_iter().enumerate() {
        let img: Vec<f32> = images[i * plane * 4..(i + 1) * plane * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mask: Vec<f32> = masks[i * plane..(i + 1) * plane].iter().map(|&b| b as f32).collect();
        let s = NoduleSample {
            image: Tensor::from_vec(&[1, IMAGE_SIZE, IMAGE_SIZE], img)?,
            mask: Tensor::from_vec(&[1, IMAGE_SIZE, IMAGE_SIZE], mask)?,
            labels: l,
        };
        s.validate(&schema)?;
        samples.push(s);
    }
    if let Some(f) = &manifest.folds {
        if f.fold_of.len() != samples.len() || f.fold_of.iter().any(|&x| x >= f.k) {
            return Err(dataset_err(&manifest_path, "fold assignment does not match samples"));
        }
    }
    Ok(Dataset { manifest, samples })
}

fn read_planes(dir: &Path, name: &str, labels: &[SampleLabels], bytes_per_sample: usize) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let first = labels.first().map(|l| l.id.as_str()).unwrap_or("<none>");
    let data = fs::read(&path).map_err(|e| Error::sample(first, format!("cannot read {}: {e}", path.display())))?;
    let complete = data.len() / bytes_per_sample;
    if complete < labels.len() {
        return Err(Error::sample(
            &labels[complete].id,
            format!("no data in {} ({} bytes)", path.display(), data.len()),
        ));
    }
    if data.len() != labels.len() * bytes_per_sample {
        return Err(dataset_err(
            &path,
            format!("{} trailing bytes", data.len() - labels.len() * bytes_per_sample),
        ));
    }
    Ok(data)
}
