//! Binary model checkpoints.
//!
//! Layout: the 8-byte magic `WDLABCK1`, a little-endian `u64` header length,
//! a JSON header, then every tensor's data as little-endian `f64` in header
//! order. The header records the model config, free-form run metadata and
//! each tensor's name, role, shape and offset (in scalars) into the data block.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{MlpConfig, Model};
use crate::tensor::{ParamRole, ParamSet, Tensor};

pub const MAGIC: &[u8; 8] = b"WDLABCK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: ParamRole,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: MlpConfig,
    /// Arbitrary run metadata (for example the run config), stored verbatim.
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn save(path: &Path, model: &Model, metadata: serde_json::Value) -> Result<()> {
    let mut offset = 0;
    let tensors = model
        .params
        .iter()
        .map(|p| {
            let e = TensorEntry {
                name: p.name.clone(),
                role: p.role,
                shape: p.value.shape().to_vec(),
                offset,
            };
            offset += p.value.len();
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        model: model.config.clone(),
        metadata,
        tensors,
    })?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for p in model.params.iter() {
        for v in p.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Parse {
        source_name: "checkpoint".into(),
        record: 0,
        detail: detail.into(),
    }
}

pub fn load(path: &Path) -> Result<(Model, serde_json::Value)> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| corrupt("header length overflow"))?;
    if len > 1 << 30 {
        return Err(corrupt(format!("implausible header length {len}")));
    }
    let mut header = vec![0u8; len];
    input.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    if data.len() % 8 != 0 {
        return Err(corrupt("data block is not a whole number of f64 values"));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut params = ParamSet::new();
    let mut expected_offset = 0;
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected_offset || e.offset + n > values.len() {
            return Err(corrupt(format!("tensor `{}` lies outside the data block", e.name)));
        }
        params.push(
            e.name.clone(),
            e.role,
            Tensor::new(e.shape.clone(), values[e.offset..e.offset + n].to_vec())?,
        )?;
        expected_offset += n;
    }
    if expected_offset != values.len() {
        return Err(corrupt(format!(
            "{} trailing values after the last tensor",
            values.len() - expected_offset
        )));
    }
    Ok((Model::from_params(header.model, params)?, header.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::build(MlpConfig::new(vec![3, 5, 2], true, 4)).unwrap();
        let meta = serde_json::json!({"run": "x", "epoch": 3});
        save(&path, &model, meta.clone()).unwrap();
        let (back, back_meta) = load(&path).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.config, model.config);
        assert_eq!(back_meta, meta);
    }

    #[test]
    fn rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::build(MlpConfig::new(vec![2, 2], false, 0)).unwrap();
        save(&path, &model, serde_json::Value::Null).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(load(&path).is_err());
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Parse { .. })));
    }
}
