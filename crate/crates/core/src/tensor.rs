//! Dense row-major tensors (plain values, no autodiff) and the on-disk
//! tensor file format.
//!
//! File format: one JSON header line `{"shape":[..],"dtype":"f32"|"f64",
//! "byte_order":"LE"}` terminated by `\n`, followed by the raw
//! little-endian values. Used by corpus sample files and checkpoints.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

/// Dense n-dimensional array of f64 values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::BadShape {
                op: "Tensor::new",
                shape,
                why: format!("shape product != data length {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            shape: vec![r, c],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major offset of a multi-index. Debug-checked.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::BadShape {
                op: "reshape",
                shape,
                why: format!("incompatible with {} elements", self.data.len()),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Fill with deterministic normal draws (used by parameter init).
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut crate::rng::DeterministicRng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| std * rng.normal()).collect();
        Self { shape, data }
    }

    pub fn write(&self, path: &Path, dtype: Dtype) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        write_tensor(&mut w, &self.shape, &self.data, dtype)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut r = BufReader::new(file);
        let (shape, data) = read_tensor(&mut r, &path.display().to_string())?;
        Ok(Self { shape, data })
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
    dtype: Dtype,
    byte_order: String,
}

pub fn write_tensor<W: Write>(
    w: &mut W,
    shape: &[usize],
    data: &[f64],
    dtype: Dtype,
) -> Result<()> {
    let header = Header {
        shape: shape.to_vec(),
        dtype,
        byte_order: "LE".to_string(),
    };
    let mut line = serde_json::to_string(&header)
        .map_err(|e| Error::Format {
            path: "<tensor header>".into(),
            why: e.to_string(),
        })?;
    line.push('\n');
    w.write_all(line.as_bytes())?;
    match dtype {
        Dtype::F32 => {
            for &v in data {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for &v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R, path: &str) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut br = BufReader::new(r);
    let mut line = String::new();
    br.read_line(&mut line)?;
    let header: Header = serde_json::from_str(line.trim_end()).map_err(|e| Error::Format {
        path: path.to_string(),
        why: format!("bad header: {e}"),
    })?;
    if header.byte_order != "LE" {
        return Err(Error::Format {
            path: path.to_string(),
            why: format!("unsupported byte order {}", header.byte_order),
        });
    }
    let numel: usize = header.shape.iter().product();
    let width = match header.dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    let mut bytes = vec![0u8; numel * width];
    br.read_exact(&mut bytes).map_err(|_| Error::Format {
        path: path.to_string(),
        why: format!("truncated payload, expected {} bytes", numel * width),
    })?;
    let data = match header.dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect(),
    };
    Ok((header.shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn offset_is_row_major() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        assert_eq!(t.at(&[0, 0]), 0.0);
        assert_eq!(t.at(&[0, 2]), 2.0);
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert_eq!(t.at(&[1, 2]), 5.0);
    }

    #[test]
    fn file_roundtrip_f64_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tsr");
        let t = Tensor::new(vec![3, 2], vec![1.5, -2.25, 3.0, 0.1, f64::MIN_POSITIVE, 9.9]).unwrap();
        t.write(&path, Dtype::F64).unwrap();
        let u = Tensor::read(&path).unwrap();
        assert_eq!(t.shape(), u.shape());
        for (a, b) in t.data().iter().zip(u.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn file_roundtrip_f32_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tsr");
        let t = Tensor::new(vec![2], vec![0.1, 1.0]).unwrap();
        t.write(&path, Dtype::F32).unwrap();
        let u = Tensor::read(&path).unwrap();
        assert_eq!(u.data()[0], 0.1f32 as f64);
        assert_eq!(u.data()[1], 1.0);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tsr");
        let t = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        t.write(&path, Dtype::F64).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 5]).unwrap();
        match Tensor::read(&path) {
            Err(Error::Format { why, .. }) => assert!(why.contains("truncated")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn header_is_a_single_json_line() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &[2, 2], &[1.0, 2.0, 3.0, 4.0], Dtype::F32).unwrap();
        let newline = buf.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&buf[..newline]).unwrap();
        assert_eq!(header["dtype"], "f32");
        assert_eq!(header["byte_order"], "LE");
        assert_eq!(header["shape"][0], 2);
        assert_eq!(buf.len(), newline + 1 + 4 * 4);
    }
}
