//! Tensor file format and checkpoint directories.
//!
//! A tensor file is: an 8-byte magic (`MXT0` padded with four zero bytes),
//! a little-endian u32 byte length, that many bytes of UTF-8 JSON header
//! `{"shape":[...],"dtype":"f32"|"f64"}`, then the raw little-endian data.
//!
//! A checkpoint is a directory of `.mxt` tensors (one per parameter, named
//! after it) plus `manifest.json` holding the model configuration.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: [u8; 8] = *b"MXT0\0\0\0\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
    dtype: DType,
}

pub fn write_tensor(path: &Path, tensor: &Tensor, dtype: DType) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        shape: tensor.shape().to_vec(),
        dtype,
    })?;
    let mut file = fs::File::create(path)?;
    file.write_all(&MAGIC)?;
    file.write_all(&(header.len() as u32).to_le_bytes())?;
    file.write_all(&header)?;
    match dtype {
        DType::F64 => {
            let mut buf = Vec::with_capacity(tensor.numel() * 8);
            for &v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            file.write_all(&buf)?;
        }
        DType::F32 => {
            let mut buf = Vec::with_capacity(tensor.numel() * 4);
            for &v in tensor.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            file.write_all(&buf)?;
        }
    }
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut file = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    let numel: usize = header.shape.iter().product();
    let tensor = match header.dtype {
        DType::F64 => {
            let mut buf = vec![0u8; numel * 8];
            file.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::new(header.shape, data)?
        }
        DType::F32 => {
            let mut buf = vec![0u8; numel * 4];
            file.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            Tensor::new(header.shape, data)?
        }
    };
    Ok(tensor)
}

pub fn save_checkpoint(dir: &Path, config: &ModelConfig, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = serde_json::to_string_pretty(config)?;
    fs::write(dir.join("manifest.json"), manifest)?;
    for (name, tensor) in store.iter() {
        write_tensor(&dir.join(format!("{name}.mxt")), tensor, DType::F64)?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelConfig, ParamStore)> {
    let manifest = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?;
    let config: ModelConfig = serde_json::from_str(&manifest)?;
    let mut store = ParamStore::new();
    for name in config.parameter_names() {
        let tensor = read_tensor(&dir.join(format!("{name}.mxt")))?;
        store.insert(name, tensor);
    }
    Ok((config, store))
}
