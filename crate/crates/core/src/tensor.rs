//! Dense row-major tensors and their binary record format.
//!
//! A record is `"CAT1"`, a `u8` dtype tag, a `u8` rank, `rank` little-endian
//! `u64` extents, then the little-endian payload.

use std::io::{Read, Write};

use crate::error::{shape_err, Error, Result};

/// Element type of a serialized record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64 = 0,
    F32 = 1,
}

impl DType {
    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            t => Err(Error::CorruptFile(format!("unknown dtype tag {t}"))),
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

pub const MAGIC: &[u8; 4] = b"CAT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {:?} holds {} elements, data has {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Largest absolute elementwise difference; `inf` if shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Writes one record. With `DType::F32` values are narrowed.
    pub fn write_record<W: Write>(&self, w: &mut W, dtype: DType) -> Result<()> {
        write_record(w, &self.shape, &self.data, dtype)
    }

    pub fn read_record<R: Read>(r: &mut R) -> Result<Self> {
        let (shape, data) = read_record(r)?;
        Tensor::new(shape, data)
    }
}

/// Byte length of a record with the given shape and dtype.
pub fn record_len(shape: &[usize], dtype: DType) -> usize {
    4 + 2 + 8 * shape.len() + dtype.width() * shape.iter().product::<usize>()
}

pub fn write_record<W: Write>(w: &mut W, shape: &[usize], data: &[f64], dtype: DType) -> Result<()> {
    let rank = u8::try_from(shape.len())
        .map_err(|_| Error::InvalidArgument(format!("rank {} too large", shape.len())))?;
    let mut buf = Vec::with_capacity(record_len(shape, dtype));
    buf.extend_from_slice(MAGIC);
    buf.push(dtype as u8);
    buf.push(rank);
    for &e in shape {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    match dtype {
        DType::F64 => data.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => data
            .iter()
            .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact_or_corrupt<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::CorruptFile("truncated tensor record".into()),
        _ => Error::Io(e),
    })
}

/// Reads one record, widening to f64.
pub fn read_record<R: Read>(r: &mut R) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut head = [0u8; 6];
    read_exact_or_corrupt(r, &mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::CorruptFile("bad tensor magic".into()));
    }
    let dtype = DType::from_tag(head[4])?;
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut e = [0u8; 8];
        read_exact_or_corrupt(r, &mut e)?;
        shape.push(u64::from_le_bytes(e) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::CorruptFile("extent overflow".into()))?;
    let mut raw = vec![0u8; n * dtype.width()];
    read_exact_or_corrupt(r, &mut raw)?;
    let data = match dtype {
        DType::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Ok((shape, data))
}

/// Files that pair a JSON manifest with a run of tensor records.
///
/// Layout: `u64` little-endian manifest length, the manifest bytes, then the
/// records back to back. Offsets in manifests are relative to the first
/// record.
pub mod container {
    use std::fs::File;
    use std::io::{BufReader, BufWriter, Read, Write};
    use std::path::Path;

    use serde::{de::DeserializeOwned, Serialize};

    use crate::error::{Error, Result};

    pub fn write<M: Serialize>(path: &Path, manifest: &M, records: &[u8]) -> Result<()> {
        let json = serde_json::to_vec(manifest)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(records)?;
        w.flush()?;
        Ok(())
    }

    /// Returns the manifest and the raw record region.
    pub fn read<M: DeserializeOwned>(path: &Path) -> Result<(M, Vec<u8>)> {
        let mut r = BufReader::new(File::open(path)?);
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 8 {
            return Err(Error::CorruptFile("missing manifest header".into()));
        }
        let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let end = 8usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::CorruptFile("manifest length exceeds file".into()))?;
        let manifest = serde_json::from_slice(&bytes[8..end])
            .map_err(|e| Error::CorruptFile(format!("manifest: {e}")))?;
        Ok((manifest, bytes[end..].to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(matches!(
            Tensor::new([2, 3], vec![0.0; 5]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn record_layout_is_little_endian() {
        let t = Tensor::new([2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        t.write_record(&mut buf, DType::F64).unwrap();
        assert_eq!(&buf[..4], b"CAT1");
        assert_eq!(buf[4], 0);
        assert_eq!(buf[5], 1);
        assert_eq!(&buf[6..14], &2u64.to_le_bytes());
        assert_eq!(&buf[14..22], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), record_len(&[2], DType::F64));
        let back = Tensor::read_record(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn truncated_record_is_corrupt() {
        let t = Tensor::zeros([3, 3]);
        let mut buf = Vec::new();
        t.write_record(&mut buf, DType::F32).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(
            Tensor::read_record(&mut buf.as_slice()),
            Err(Error::CorruptFile(_))
        ));
        let mut bad = b"CAT2".to_vec();
        bad.extend_from_slice(&[0, 0]);
        assert!(matches!(
            Tensor::read_record(&mut bad.as_slice()),
            Err(Error::CorruptFile(_))
        ));
    }

    #[test]
    fn scalar_record_has_rank_zero() {
        let mut buf = Vec::new();
        Tensor::scalar(3.0).write_record(&mut buf, DType::F64).unwrap();
        assert_eq!(buf[5], 0);
        assert_eq!(Tensor::read_record(&mut buf.as_slice()).unwrap().item(), 3.0);
    }
}
