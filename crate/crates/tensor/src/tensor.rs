use std::io::{Read, Write};

use crate::element::Element;
use crate::error::{Result, TensorError};

/// Magic prefix of the on-disk tensor format.
pub const TENSOR_MAGIC: &[u8; 5] = b"BSTEN";
pub const TENSOR_FORMAT_VERSION: u16 = 1;

/// Dense row-major tensor. Rank 0 (empty `dims`) holds a single scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(TensorError::shape(
                "tensor",
                format!("dims {:?} need {} values, got {}", dims, expected, data.len()),
            ));
        }
        Ok(Tensor { dims, data })
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            dims: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Converts element type, e.g. an `f64` field into `f32` for training.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a tensor with {} values", self.data.len());
        self.data[0]
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(TensorError::shape("reshape", format!("{:?} -> {:?}", self.dims, dims)));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Serializes as `BSTEN`, version, rank, little-endian u32 dims, then
    /// raw little-endian values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + T::BYTES * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&TENSOR_FORMAT_VERSION.to_le_bytes());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    /// Reads one tensor from a stream positioned at its magic bytes. The
    /// element width is implied by `T`.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut head = [0u8; 8];
        r.read_exact(&mut head)?;
        if &head[..5] != TENSOR_MAGIC {
            return Err(TensorError::Format("missing BSTEN magic".into()));
        }
        let version = u16::from_le_bytes([head[5], head[6]]);
        if version != TENSOR_FORMAT_VERSION {
            return Err(TensorError::Format(format!("unsupported version {version}")));
        }
        let rank = head[7] as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut raw = [0u8; 4];
        for _ in 0..rank {
            r.read_exact(&mut raw)?;
            dims.push(u32::from_le_bytes(raw) as usize);
        }
        let n: usize = dims.iter().product();
        let mut bytes = vec![0u8; n * T::BYTES];
        r.read_exact(&mut bytes)?;
        let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        Ok(Tensor { dims, data })
    }

    /// Parses a buffer that must contain exactly one tensor.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let t = Self::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(TensorError::Format(format!(
                "{} trailing bytes; element type is not {}?",
                cursor.len(),
                T::NAME
            )));
        }
        Ok(t)
    }
}
