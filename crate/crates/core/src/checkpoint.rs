//! Binary checkpoint container:
//!
//! ```text
//! "PCAP"  u32 format version
//! u32 length, JSON metadata (backbone, train config, prototype entries)
//! u32 tensor count, then per tensor:
//!     u32 name length, name bytes, u32 rank, u64 extents, f32 LE data
//! ```
//!
//! Network parameters are stored under their registered names, prototype
//! vectors as `prototypes`, and pushed source images as
//! `prototype_source.{id}`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::AttributeSchema;
use crate::error::{Error, Result};
use crate::model::{BackboneConfig, ProtoCaps};
use crate::numerics::{ParamStore, Scalar, Tensor};
use crate::prototypes::{PrototypeBank, PrototypeEntry, PROTOTYPE_PARAM};
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 4] = b"PCAP";
pub const FORMAT_VERSION: u32 = 1;
const SOURCE_PREFIX: &str = "prototype_source.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub backbone: BackboneConfig,
    pub train_config: Option<TrainConfig>,
    pub best_epoch: Option<usize>,
    pub dist_max: f64,
    pub prototypes: Vec<PrototypeEntry>,
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn write_tensor<T: Scalar>(w: &mut impl Write, name: &str, t: &Tensor<T>) -> Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    write_u32(w, t.shape().len() as u32)?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &ProtoCaps<T>,
    bank: &PrototypeBank<T>,
    train_config: Option<&TrainConfig>,
    best_epoch: Option<usize>,
) -> Result<()> {
    let meta = CheckpointMeta {
        backbone: model.config().clone(),
        train_config: train_config.cloned(),
        best_epoch,
        dist_max: bank.dist_max(),
        prototypes: bank.entries().to_vec(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;
    let json = serde_json::to_vec(&meta)?;
    write_u32(&mut w, json.len() as u32)?;
    w.write_all(&json)?;

    let sources: Vec<(usize, &Tensor<f32>)> = bank
        .entries()
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.source_image.as_ref().map(|img| (i, img)))
        .collect();
    write_u32(&mut w, (model.params().len() + 1 + sources.len()) as u32)?;
    for (name, t) in model.params().iter() {
        write_tensor(&mut w, name, t)?;
    }
    write_tensor(&mut w, PROTOTYPE_PARAM, bank.vectors())?;
    for (i, img) in sources {
        write_tensor(&mut w, &format!("{SOURCE_PREFIX}{i}"), img)?;
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("eight bytes")))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.bytes(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| Ok(self.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.bytes(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let t = Tensor::from_vec(&shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        Ok((name, t))
    }
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ProtoCaps<T>, PrototypeBank<T>, CheckpointMeta)> {
    let file = File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut r = Reader {
        inner: BufReader::new(file),
    };
    if r.bytes(4)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a PCAP file", path.display())));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} (supported: {FORMAT_VERSION})"
        )));
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(&r.bytes(meta_len)?)?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    let mut vectors = None;
    let mut sources = Vec::new();
    for _ in 0..count {
        let (name, t) = r.tensor::<T>()?;
        if name == PROTOTYPE_PARAM {
            vectors = Some(t);
        } else if let Some(id) = name.strip_prefix(SOURCE_PREFIX) {
            let id: usize = id
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad source tensor `{name}`")))?;
            sources.push((id, t.cast::<f32>()));
        } else {
            params.insert(name, t)?;
        }
    }
    let model = ProtoCaps::from_params(meta.backbone.clone(), params)?;
    let vectors = vectors.ok_or_else(|| Error::Checkpoint("missing prototype tensor".into()))?;
    let mut bank = PrototypeBank::from_parts(&AttributeSchema::lidc(), meta.prototypes.clone(), vectors, meta.dist_max)?;
    for (id, img) in sources {
        if id >= bank.len() {
            return Err(Error::Checkpoint(format!("source image for unknown prototype {id}")));
        }
        bank.set_source_image(id, img);
    }
    Ok((model, bank, meta))
}
