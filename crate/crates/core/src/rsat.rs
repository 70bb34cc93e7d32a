//! `RSAT` tensor files.
//!
//! Layout: magic `RSAT`, version `u8 = 1`, dtype `u8` (0 = f32, 1 = f64),
//! rank `u8`, `rank` little-endian `u64` dims, then row-major little-endian
//! data.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Precision};

pub const MAGIC: &[u8; 4] = b"RSAT";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub precision: Precision,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            precision: m.precision(),
            data: m.data().to_vec(),
        }
    }

    pub fn vector(data: Vec<f64>, precision: Precision) -> Self {
        Self {
            dims: vec![data.len()],
            precision,
            data,
        }
    }

    pub fn into_matrix(self) -> Result<Matrix> {
        match self.dims[..] {
            [rows, cols] => Matrix::new(rows, cols, self.data, self.precision),
            _ => Err(Error::Format(format!(
                "expected rank 2, found rank {}",
                self.dims.len()
            ))),
        }
    }
}

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let count: usize = t.dims.iter().product();
    if count != t.data.len() {
        return Err(Error::Shape(format!(
            "dims cover {count} values, have {}",
            t.data.len()
        )));
    }
    let rank = u8::try_from(t.dims.len()).map_err(|_| Error::Format("rank exceeds 255".into()))?;
    let width = match t.precision {
        Precision::Single => 4,
        Precision::Double => 8,
    };
    let mut buf = Vec::with_capacity(7 + 8 * t.dims.len() + width * count);
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(match t.precision {
        Precision::Single => 0,
        Precision::Double => 1,
    });
    buf.push(rank);
    for &d in &t.dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in &t.data {
        match t.precision {
            Precision::Single => buf.extend_from_slice(&(x as f32).to_le_bytes()),
            Precision::Double => buf.extend_from_slice(&x.to_le_bytes()),
        }
    }
    Ok(buf)
}

pub fn decode(mut bytes: &[u8]) -> Result<Tensor> {
    let mut header = [0u8; 7];
    bytes
        .read_exact(&mut header)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if &header[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if header[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", header[4])));
    }
    let precision = match header[5] {
        0 => Precision::Single,
        1 => Precision::Double,
        other => return Err(Error::Format(format!("unknown dtype {other}"))),
    };
    let rank = header[6] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut raw = [0u8; 8];
        bytes
            .read_exact(&mut raw)
            .map_err(|_| Error::Format("truncated dims".into()))?;
        dims.push(usize::try_from(u64::from_le_bytes(raw)).map_err(|_| Error::Format("dim overflow".into()))?);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflow".into()))?;
    let width = match precision {
        Precision::Single => 4,
        Precision::Double => 8,
    };
    if bytes.len() != count * width {
        return Err(Error::Format(format!(
            "expected {} data bytes, found {}",
            count * width,
            bytes.len()
        )));
    }
    let data = match precision {
        Precision::Single => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Precision::Double => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok(Tensor { dims, precision, data })
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let bytes = encode(t)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    write_tensor(path, &Tensor::from_matrix(m))
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    read_tensor(path)?.into_matrix()
}
