//! Model checkpoints: a JSON manifest followed by one tensor record per parameter.
//!
//! Layout: `GCKP`, manifest length (u64 LE), manifest JSON, then the tensors in
//! manifest order, each in the plain tensor record format.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, Model};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GCKP";
const MAX_MANIFEST_BYTES: u64 = 16 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub backbone: BackboneConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint(out: &mut impl Write, model: &Model) -> Result<()> {
    let manifest = Manifest {
        backbone: model.config().clone(),
        tensors: model
            .params()
            .iter()
            .map(|(name, t)| TensorEntry { name: name.to_string(), shape: t.shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for (_, t) in model.params().iter() {
        t.write_to(out)?;
    }
    Ok(())
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<Model> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > MAX_MANIFEST_BYTES {
        return Err(Error::Format(format!("manifest of {len} bytes is too large")));
    }
    let mut json = vec![0u8; len as usize];
    input.read_exact(&mut json)?;
    let manifest: Manifest =
        serde_json::from_slice(&json).map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
    let mut params = ParamStore::new();
    for entry in &manifest.tensors {
        let t = Tensor::read_from(input)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Format(format!(
                "{}: manifest shape {:?}, stored {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        params.insert(entry.name.clone(), t)?;
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    Model::from_params(manifest.backbone, params)
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write_checkpoint(&mut out, model)?;
    out.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    read_checkpoint(&mut BufReader::new(fs::File::open(path)?))
}
