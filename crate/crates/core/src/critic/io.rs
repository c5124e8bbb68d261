//! Flat little-endian `f64` tensor files behind a one-line JSON header.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CriticConfig, CriticParams, TensorInfo};
use crate::error::{Error, Result};

const FORMAT: &str = "chunkq-tensors";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
    sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Vec<f64>)>,
    pub sha256: String,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }
}

fn payload(tensors: &[(&str, &[f64])]) -> Vec<u8> {
    let total: usize = tensors.iter().map(|(_, v)| v.len()).sum();
    let mut bytes = Vec::with_capacity(total * 8);
    for (_, values) in tensors {
        for v in *values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

/// SHA-256 of the binary payload, hex encoded.
pub fn tensor_checksum(tensors: &[(&str, &[f64])]) -> String {
    hex::encode(Sha256::digest(payload(tensors)))
}

pub fn write_tensor_file(
    path: &Path,
    meta: serde_json::Value,
    tensors: &[(&str, &[f64])],
) -> Result<String> {
    let bytes = payload(tensors);
    let sha256 = hex::encode(Sha256::digest(&bytes));
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        meta,
        tensors: tensors
            .iter()
            .map(|(name, v)| TensorEntry {
                name: (*name).into(),
                len: v.len(),
            })
            .collect(),
        sha256: sha256.clone(),
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(sha256)
}

pub fn read_tensor_file(path: &Path) -> Result<TensorFile> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header: Header = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Format(format!("tensor header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported tensor file {} v{}",
            header.format, header.version
        )));
    }
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    let expected: usize = header.tensors.iter().map(|t| t.len * 8).sum();
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "payload has {} bytes, header declares {expected}",
            bytes.len()
        )));
    }
    let sha256 = hex::encode(Sha256::digest(&bytes));
    if sha256 != header.sha256 {
        return Err(Error::Format("tensor payload checksum mismatch".into()));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let tensors = header
        .tensors
        .into_iter()
        .map(|t| {
            let v: Vec<f64> = values.by_ref().take(t.len).collect();
            (t.name, v)
        })
        .collect();
    Ok(TensorFile {
        meta: header.meta,
        tensors,
        sha256,
    })
}

#[derive(Serialize, Deserialize)]
struct CriticMeta {
    config: CriticConfig,
    layout: Vec<TensorInfo>,
}

impl CriticParams {
    pub fn checksum(&self) -> String {
        tensor_checksum(&[("params", self.values())])
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let meta = serde_json::to_value(CriticMeta {
            config: self.config().clone(),
            layout: self.tensors().to_vec(),
        })?;
        write_tensor_file(path, meta, &[("params", self.values())])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = read_tensor_file(path)?;
        let meta: CriticMeta = serde_json::from_value(file.meta.clone())?;
        let values = file
            .get("params")
            .ok_or_else(|| Error::Format("missing params tensor".into()))?;
        let params = Self::from_values(meta.config, values.to_vec())?;
        if params.tensors() != meta.layout.as_slice() {
            return Err(Error::Format("stored layout does not match config".into()));
        }
        Ok(params)
    }
}
