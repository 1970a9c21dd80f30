//! Single-file tensor container: a little-endian `u32` header length, a JSON
//! header (format version, dtype, free-form config, tensor directory), then
//! raw row-major tensor data in directory order.
//!
//! The same container carries frozen backbone weights (f32 payload) and
//! trainable state (f64 payload). Loaders here validate structure; shape
//! checks against an expected configuration live with the caller.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: Dtype,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// An in-memory container: config plus named tensors in a fixed order.
#[derive(Debug, Clone)]
pub struct Container {
    pub dtype: Dtype,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Mat)>,
}

impl Container {
    pub fn new(dtype: Dtype, config: serde_json::Value) -> Self {
        Container { dtype, config, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: &str, tensor: Mat) {
        self.tensors.push((name.to_string(), tensor));
    }

    /// Look up a tensor by name; the error names what is missing.
    pub fn tensor(&self, name: &str) -> Result<&Mat> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    /// Look up a tensor and check its shape in one step.
    pub fn tensor_shaped(&self, name: &str, rows: usize, cols: usize) -> Result<&Mat> {
        let t = self.tensor(name)?;
        if t.rows != rows || t.cols != cols {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {}x{}, expected {rows}x{cols}",
                t.rows, t.cols
            )));
        }
        Ok(t)
    }
}

pub fn save(path: &Path, container: &Container) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: container.dtype,
        config: container.config.clone(),
        tensors: container
            .tensors
            .iter()
            .map(|(name, t)| TensorEntry { name: name.clone(), rows: t.rows, cols: t.cols })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;

    let payload: usize = container
        .tensors
        .iter()
        .map(|(_, t)| t.numel() * container.dtype.width())
        .sum();
    let mut out = Vec::with_capacity(4 + header_bytes.len() + payload);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (name, t) in &container.tensors {
        if !t.is_finite() {
            return Err(Error::Numerical(format!("tensor {name} contains non-finite values")));
        }
        match container.dtype {
            Dtype::F32 => {
                for &v in &t.data {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for &v in &t.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }

    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Container> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 {
        return Err(Error::Checkpoint("file too short for header length".into()));
    }
    let header_len = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if bytes.len() < 4 + header_len {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[4..4 + header_len])
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} unsupported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }

    let width = header.dtype.width();
    let expected: usize = header.tensors.iter().map(|t| t.rows * t.cols * width).sum();
    let data = &bytes[4 + header_len..];
    if data.len() != expected {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, tensor directory requires {expected}",
            data.len()
        )));
    }

    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut offset = 0usize;
    for entry in &header.tensors {
        let n = entry.rows * entry.cols;
        let mut values = Vec::with_capacity(n);
        match header.dtype {
            Dtype::F32 => {
                for i in 0..n {
                    let b = &data[offset + 4 * i..offset + 4 * i + 4];
                    values.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
                }
            }
            Dtype::F64 => {
                for i in 0..n {
                    let b = &data[offset + 8 * i..offset + 8 * i + 8];
                    values.push(f64::from_le_bytes([
                        b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
                    ]));
                }
            }
        }
        offset += n * width;
        let t = Mat::from_vec(entry.rows, entry.cols, values);
        if !t.is_finite() {
            return Err(Error::Checkpoint(format!(
                "tensor {} contains non-finite values",
                entry.name
            )));
        }
        tensors.push((entry.name.clone(), t));
    }

    Ok(Container { dtype: header.dtype, config: header.config, tensors })
}
