//! Binary parameter container.
//!
//! ```text
//! offset  size  field
//! 0       8     magic b"RACECKPT"
//! 8       4     format version, u32 little-endian (currently 1)
//! 12      8     header length H, u64 little-endian
//! 20      H     header, UTF-8 JSON:
//!                 {"dtype": "f32" | "f64",
//!                  "metadata": <caller-defined JSON>,
//!                  "tensors": [{"name": str, "shape": [usize]}, ...]}
//! 20+H    ...   tensor values in header order, row-major, little-endian
//!               floats of the stated dtype, no padding
//! ```
//!
//! Values are converted to the requested precision on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::{ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RACECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    metadata: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub metadata: Value,
    pub params: ParamSet<T>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(metadata: Value, params: ParamSet<T>) -> Self {
        Self { metadata, params }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            dtype: T::DTYPE.to_string(),
            metadata: self.metadata.clone(),
            tensors: self
                .params
                .iter()
                .map(|(_, name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)
            .map_err(|e| TensorError::Format(format!("header encoding: {e}")))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for (_, _, t) in self.params.iter() {
            for &v in t.data() {
                match T::DTYPE {
                    "f32" => w.write_all(&(v.as_f64() as f32).to_le_bytes())?,
                    _ => w.write_all(&v.as_f64().to_le_bytes())?,
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(TensorError::Format("bad magic".into()));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b)?;
        let version = u32::from_le_bytes(u32b);
        if version != CHECKPOINT_VERSION {
            return Err(TensorError::Format(format!("unsupported version {version}")));
        }
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b)?;
        let hlen = usize::try_from(u64::from_le_bytes(u64b))
            .map_err(|_| TensorError::Format("header too large".into()))?;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf)?;
        let header: Header = serde_json::from_slice(&hbuf)
            .map_err(|e| TensorError::Format(format!("header: {e}")))?;
        let width = match header.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(TensorError::Format(format!("unknown dtype {other:?}"))),
        };
        let mut params = ParamSet::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let mut raw = vec![0u8; n * width];
            r.read_exact(&mut raw)?;
            let data: Vec<T> = if width == 4 {
                raw.chunks_exact(4)
                    .map(|b| T::from_f64_lossy(f32::from_le_bytes(b.try_into().unwrap()) as f64))
                    .collect()
            } else {
                raw.chunks_exact(8)
                    .map(|b| T::from_f64_lossy(f64::from_le_bytes(b.try_into().unwrap())))
                    .collect()
            };
            params.add(entry.name, Tensor::new(entry.shape, data)?)?;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(TensorError::Format("trailing bytes after tensor data".into()));
        }
        Ok(Self {
            metadata: header.metadata,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
