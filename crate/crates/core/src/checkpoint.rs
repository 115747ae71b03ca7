//! Single-file binary checkpoints.
//!
//! Layout: magic `RCTCKPT1`, version u32, length-prefixed JSON metadata
//! (variant, model config, schema, preprocessing state), then the parameter
//! blob: per tensor a name, dtype tag, shape and little-endian f32 bits.
//! Round trips are bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CostModel, ModelConfig, ModelError, ModelRegistry};
use crate::preprocess::PreprocessState;
use crate::schema::FeatureSchema;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RCTCKPT1";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint schema does not match: {0}")]
    SchemaMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub variant: String,
    pub model: ModelConfig,
    pub schema: FeatureSchema,
    pub preprocess: PreprocessState,
}

impl CheckpointMeta {
    pub fn ensure_schema(&self, schema: &FeatureSchema) -> Result<(), CheckpointError> {
        if &self.schema != schema {
            return Err(CheckpointError::SchemaMismatch(
                "data schema differs from the schema the model was trained on".into(),
            ));
        }
        Ok(())
    }
}

pub fn save_checkpoint(
    model: &dyn CostModel<f32>,
    state: &PreprocessState,
    path: &Path,
) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut meta_model = model.config().clone();
    meta_model.variant = model.variant().to_string();
    let meta = CheckpointMeta {
        variant: model.variant().to_string(),
        model: meta_model,
        schema: model.schema().clone(),
        preprocess: state.clone(),
    };
    let meta_json =
        serde_json::to_vec(&meta).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;

    let params = model.parameters();
    {
        let mut names: Vec<String> = params.iter().map(|p| p.name()).collect();
        names.sort();
        names.dedup();
        if names.len() != params.len() {
            return Err(CheckpointError::Corrupt(
                "duplicate parameter names".into(),
            ));
        }
    }

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in &params {
        let name = p.name();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F32);
        let shape = p.shape();
        buf.push(shape.len() as u8);
        for d in &shape {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for &x in p.value().data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&buf).map_err(io_err)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.data.len() {
            return Err(CheckpointError::Corrupt(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
}

/// Rebuild the stored variant via the registry and load every parameter
/// bit-exactly. Fails without side effects on any mismatch.
pub fn load_checkpoint(
    path: &Path,
    registry: &ModelRegistry<f32>,
) -> Result<(Box<dyn CostModel<f32>>, CheckpointMeta), CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
    let mut r = Reader {
        data: &bytes,
        pos: 0,
    };
    if r.take(8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let meta_len = r.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| CheckpointError::Corrupt(format!("metadata: {e}")))?;

    let n_params = r.u32()? as usize;
    let mut tensors: Vec<(String, Tensor<f32>)> = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| CheckpointError::Corrupt(format!("parameter name: {e}")))?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(CheckpointError::Corrupt(format!(
                "parameter '{name}' has unsupported dtype tag {dtype}"
            )));
        }
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }

    let model = registry.build(&meta.model, &meta.schema, 0)?;
    let params = model.parameters();
    if params.len() != tensors.len() {
        return Err(CheckpointError::Corrupt(format!(
            "parameter count {} differs from model's {}",
            tensors.len(),
            params.len()
        )));
    }
    let by_name: std::collections::BTreeMap<String, Tensor<f32>> = tensors.into_iter().collect();
    for p in &params {
        let stored = by_name.get(&p.name()).ok_or_else(|| {
            CheckpointError::Corrupt(format!("missing parameter '{}'", p.name()))
        })?;
        if stored.shape() != p.shape() {
            return Err(CheckpointError::Corrupt(format!(
                "parameter '{}' has shape {:?}, expected {:?}",
                p.name(),
                stored.shape(),
                p.shape()
            )));
        }
        p.set_value(stored.clone());
    }
    Ok((model, meta))
}
