//! Binary weight container.
//!
//! Little-endian layout:
//!
//! ```text
//! "CALF" | u32 version (=1) | u32 tensor_count
//! per tensor: u32 name_len | name (UTF-8) | u8 dtype (0=f32, 1=f64) | u8 rank
//!             | rank × u64 dims | row-major data
//! ```
//!
//! Tensor order is preserved, so writing a loaded container reproduces the
//! original bytes.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"CALF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl StoredTensor {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let data = match T::DTYPE {
            DType::F32 => TensorData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => TensorData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        Self {
            shape: t.shape().to_vec(),
            data,
        }
    }

    /// Converts to the requested element type (lossless for matching dtypes).
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data: Vec<T> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| T::lit(f64::from(x))).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
        };
        Tensor::new(&self.shape, data).expect("validated on construction")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    tensors: IndexMap<String, StoredTensor>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        self.tensors.insert(name.into(), StoredTensor::from_tensor(tensor));
    }

    pub fn insert_stored(&mut self, name: impl Into<String>, tensor: StoredTensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn stored(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.get(name)
    }

    /// Fetches a tensor, failing with a manifest error naming it when absent.
    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.tensors
            .get(name)
            .map(StoredTensor::to_tensor)
            .ok_or_else(|| Error::Manifest(name.to_string()))
    }

    /// Like [`Container::get`] but also checks the shape.
    pub fn get_shaped<T: Scalar>(&self, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
        let t = self.get::<T>(name)?;
        if t.shape() != shape {
            return Err(Error::config(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                shape
            )));
        }
        Ok(t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &StoredTensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.data.dtype().code());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let count = r.u32("tensor count")?;
        let mut tensors = IndexMap::new();
        for i in 0..count {
            let record = r.pos as u64;
            let name_len = r.u32("name length")? as usize;
            let name_at = r.pos as u64;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::format(name_at, format!("tensor {i} name is not UTF-8")))?
                .to_string();
            let dtype_at = r.pos as u64;
            let code = r.u8("dtype")?;
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::format(dtype_at, format!("unknown dtype {code} for `{name}`")))?;
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut numel: u64 = 1;
            for _ in 0..rank {
                let d = r.u64("dimension")?;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::format(r.pos as u64, format!("`{name}` is too large")))?;
                shape.push(d as usize);
            }
            let nbytes = numel
                .checked_mul(dtype.size() as u64)
                .filter(|&n| n <= (r.buf.len() - r.pos) as u64)
                .ok_or_else(|| {
                    Error::format(r.pos as u64, format!("truncated data for tensor `{name}`"))
                })? as usize;
            let raw = r.take(nbytes, "tensor data")?;
            let data = match dtype {
                DType::F32 => TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::F64 => TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            if tensors.insert(name.clone(), StoredTensor { shape, data }).is_some() {
                return Err(Error::format(record, format!("duplicate tensor `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format(
                r.pos as u64,
                format!("{} trailing bytes after last tensor", bytes.len() - r.pos),
            ));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| with_path(e, path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| with_path(e, path))?)
    }
}

fn with_path(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("unexpected end of file reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.insert("a", &Tensor::<f32>::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap());
        c.insert("evr", &Tensor::<f64>::scalar(0.5));
        c
    }

    #[test]
    fn header_layout_is_exact() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[0..4], b"CALF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        // name_len, "a", dtype 0, rank 2, two u64 dims, 4 f32 values.
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(bytes[16], b'a');
        assert_eq!(bytes[17], 0);
        assert_eq!(bytes[18], 2);
        assert_eq!(u64::from_le_bytes(bytes[19..27].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(bytes[35..39].try_into().unwrap()), 1.0);
        // Second record is a rank-0 f64.
        let second = 35 + 16;
        assert_eq!(&bytes[second + 4..second + 7], b"evr");
        assert_eq!(bytes[second + 7], 1);
        assert_eq!(bytes[second + 8], 0);
        assert_eq!(bytes.len(), second + 9 + 8);
    }

    #[test]
    fn bad_magic_version_and_truncation() {
        let good = sample().to_bytes();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Format { offset: 4, .. })));
        for cut in [0, 3, 11, 14, 30, good.len() - 1] {
            let err = Container::from_bytes(&good[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
        let mut extra = good;
        extra.push(0);
        assert!(matches!(Container::from_bytes(&extra), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_tensor_is_a_manifest_error() {
        let c = sample();
        assert!(matches!(c.get::<f32>("nope"), Err(Error::Manifest(n)) if n == "nope"));
        assert!(matches!(c.get_shaped::<f32>("a", &[4]), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn bytes_round_trip(values in proptest::collection::vec(-1e6f32..1e6, 1..40), split in 1usize..5) {
            let rows = split.min(values.len());
            let cols = values.len() / rows;
            let t = Tensor::<f32>::new(&[rows, cols], values[..rows * cols].to_vec()).unwrap();
            let mut c = Container::new();
            c.insert("x", &t);
            c.insert("y", &t.cast::<f64>());
            let bytes = c.to_bytes();
            let back = Container::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert!(back.get::<f32>("x").unwrap().bit_eq(&t));
        }
    }
}
