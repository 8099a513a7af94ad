use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PrototypeBank;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedPrototype {
    pub prototype_id: usize,
    /// `None` for prototypes that were never pushed.
    pub file: Option<String>,
    pub attr_index: usize,
    pub class_label: i32,
    pub source_sample_id: Option<String>,
    pub source_gt_score: Option<f64>,
}

pub fn prototype_file_name(attr_index: usize, class_label: i32, slot: usize) -> String {
    format!("attr{attr_index}_class{class_label}_proto{slot}.pgm")
}

/// Encodes a `[1, h, w]` plane with values in `[0, 1]` as binary 8-bit PGM.
pub fn encode_pgm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        [1, h, w] => (*h, *w),
        s => return Err(Error::shape("encode_pgm", format!("expected [1,h,w], got {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Parses the subset of PGM written by [`encode_pgm`].
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let bad = |m: &str| Error::InvalidInput(format!("PGM: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?.to_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("only 8-bit P5 is supported"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let body = &bytes[pos + 1..];
    if body.len() != w * h {
        return Err(bad("pixel count"));
    }
    Tensor::from_vec(&[1, h, w], body.iter().map(|&b| b as f32 / 255.0).collect())
}

pub(crate) fn write_pgm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_pgm(image)?)?;
    Ok(())
}

/// Writes one PGM per pushed prototype and an index of all prototypes.
pub fn export_prototypes<T: Scalar>(bank: &PrototypeBank<T>, dir: &Path) -> Result<Vec<ExportedPrototype>> {
    fs::create_dir_all(dir)?;
    let mut index = Vec::with_capacity(bank.len());
    for (id, e) in bank.entries().iter().enumerate() {
        let file = match &e.source_image {
            Some(img) => {
                let name = prototype_file_name(e.attr_index, e.class_label, e.slot);
                write_pgm(&dir.join(&name), img)?;
                Some(name)
            }
            None => None,
        };
        index.push(ExportedPrototype {
            prototype_id: id,
            file,
            attr_index: e.attr_index,
            class_label: e.class_label,
            source_sample_id: e.source_sample_id.clone(),
            source_gt_score: e.source_gt_score,
        });
    }
    fs::write(dir.join(INDEX_FILE), serde_json::to_string_pretty(&index)?)?;
    Ok(index)
}

/// Path of a prototype's image inside an export directory.
pub fn exported_path<T: Scalar>(bank: &PrototypeBank<T>, dir: &Path, id: usize) -> PathBuf {
    let e = bank.entry(id);
    dir.join(prototype_file_name(e.attr_index, e.class_label, e.slot))
}
