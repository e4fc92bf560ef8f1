//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `LEXTCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then the
//! parameter values in header order (little-endian, header `dtype`), then
//! the optimizer moments as little-endian `f64` if present.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, SeparatorModel};
use crate::autodiff::{Adam, AdamConfig, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LEXTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    dtype: String,
    step_count: u64,
    params: Vec<(String, Vec<usize>)>,
    optimizer: Option<(AdamConfig, u64)>,
    extra: serde_json::Value,
}

/// A model with optional optimizer state and free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: SeparatorModel<T>,
    pub optimizer: Option<Adam>,
    pub extra: serde_json::Value,
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let m = &ckpt.model;
    let header = Header {
        config: m.config,
        dtype: T::DTYPE.to_string(),
        step_count: m.step_count,
        params: m.params.iter().map(|(n, t)| (n.to_string(), t.shape.clone())).collect(),
        optimizer: ckpt.optimizer.as_ref().map(|o| (o.config, o.step)),
        extra: ckpt.extra.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    // write to a sibling file first so a crash never leaves a torn checkpoint
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::new();
        for (_, t) in m.params.iter() {
            for &v in &t.data {
                v.write_le(&mut buf);
            }
        }
        if let Some(o) = &ckpt.optimizer {
            for v in o.m.iter().chain(&o.v).flatten() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0;
    if take(&bytes, &mut pos, 8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(take(&bytes, &mut pos, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(take(&bytes, &mut pos, 8)?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(&bytes, &mut pos, hlen)?)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!("checkpoint holds {} values, requested {}", header.dtype, T::DTYPE)));
    }
    header.config.validate()?;
    let mut params = ParamStore::new();
    for (name, shape) in &header.params {
        let n: usize = shape.iter().product();
        let raw = take(&bytes, &mut pos, n * T::BYTES)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        params.add(name.clone(), Tensor::new(shape.clone(), data));
    }
    if params.num_values() != header.config.param_count() {
        return Err(Error::Checkpoint("parameter count does not match the stored config".into()));
    }
    if !params.all_finite() {
        return Err(Error::Checkpoint("non-finite parameter values".into()));
    }
    let optimizer = match header.optimizer {
        Some((config, step)) => {
            let mut read = || -> Result<Vec<Vec<f64>>> {
                params
                    .iter()
                    .map(|(_, t)| {
                        let raw = take(&bytes, &mut pos, t.len() * 8)?;
                        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
                    })
                    .collect()
            };
            let m = read()?;
            let v = read()?;
            Some(Adam { config, step, m, v })
        }
        None => None,
    };
    if pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint {
        model: SeparatorModel { config: header.config, params, step_count: header.step_count },
        optimizer,
        extra: header.extra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = init_model::<f32>(ModelConfig::micro(), 4).unwrap();
        model.step_count = 17;
        let mut opt = Adam::new(AdamConfig::default(), &model.params);
        opt.step = 3;
        opt.m[0][0] = 0.125;
        let ckpt = Checkpoint { model, optimizer: Some(opt), extra: serde_json::json!({"best": 1.5}) };
        save_checkpoint(&path, &ckpt).unwrap();
        let back: Checkpoint<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        assert!(load_checkpoint::<f64>(&path).is_err());
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"LEXTCKPT\x01\x00\x00\x00").unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
        fs::write(&path, b"nonsense").unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }
}
