//! Dense row-major tensors and the binary tensor dump format.
//!
//! Two-dimensional tensors follow a `[features, tokens]` layout throughout the
//! crate: element `(r, c)` lives at `r * cols + c`, so a token is a column.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Magic bytes opening every tensor dump.
pub const DUMP_MAGIC: &[u8; 4] = b"MPTD";
/// Current dump format version.
pub const DUMP_VERSION: u8 = 1;

/// Element type used when writing a tensor dump.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Shape(format!("dims must be positive, got {dims:?}")));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!("dims {dims:?} hold {numel} values but {} were given", data.len())));
        }
        Ok(Self { dims, data })
    }

    /// Builds a tensor without validating dims; internal callers guarantee the
    /// element count.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Self::from_parts(dims.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![r, c], rows.iter().flat_map(|row| row.iter().copied()).collect())
    }

    pub fn vector(values: &[f64]) -> Result<Self> {
        Self::new(vec![values.len()], values.to_vec())
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = dims.iter().product();
        Self::from_parts(dims.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn randn<R: Rng + ?Sized>(dims: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(dims, |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
    }

    pub fn uniform<R: Rng + ?Sized>(dims: &[usize], bound: f64, rng: &mut R) -> Self {
        Self::from_fn(dims, |_| rng.random_range(-bound..=bound))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Row count of a matrix (the leading dim for any rank).
    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    /// Column count of a matrix; 1 for vectors.
    pub fn cols(&self) -> usize {
        if self.dims.len() >= 2 {
            self.dims[1..].iter().product()
        } else {
            1
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows()).map(|r| self.at(r, c)).collect()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {dims:?}", self.dims)));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.dims.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.data.len(), other.data.len());
        Self::from_parts(self.dims.clone(), self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn same_dims(&self, other: &Tensor) -> bool {
        self.dims == other.dims
    }

    /// Matrix transpose of a 2-D tensor.
    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::from_parts(vec![c, r], out)
    }

    /// Columns `[start, start + len)` of a matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + start + len]);
        }
        Self::from_parts(vec![r, len], out)
    }

    /// Concatenates matrices with equal row counts along the token axis.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Self> {
        let r = parts.first().map(|t| t.rows()).ok_or_else(|| Error::Shape("empty concat".into()))?;
        if parts.iter().any(|t| t.rows() != r) {
            return Err(Error::Shape("row counts differ in column concat".into()));
        }
        let total: usize = parts.iter().map(|t| t.cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for t in parts {
                out.extend_from_slice(t.row(i));
            }
        }
        Ok(Self::from_parts(vec![r, total], out))
    }

    /// Writes the tensor in the `MPTD` dump format.
    pub fn write_dump<W: Write>(&self, w: &mut W, dtype: DType) -> Result<()> {
        if self.dims.len() > u8::MAX as usize {
            return Err(Error::Format("rank exceeds 255".into()));
        }
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&[DUMP_VERSION, dtype.code(), self.dims.len() as u8])?;
        for &d in &self.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        match dtype {
            DType::F64 => {
                for &x in &self.data {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            DType::F32 => {
                for &x in &self.data {
                    w.write_all(&(x as f32).to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn to_dump_bytes(&self, dtype: DType) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_dump(&mut buf, dtype).expect("writing to a Vec cannot fail");
        buf
    }

    /// Reads a tensor from the `MPTD` dump format; f32 payloads are widened.
    pub fn read_dump<R: Read>(r: &mut R) -> Result<(Self, DType)> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let mut head = [0u8; 3];
        r.read_exact(&mut head)?;
        if head[0] != DUMP_VERSION {
            return Err(Error::Format(format!("unsupported dump version {}", head[0])));
        }
        let dtype = DType::from_code(head[1])?;
        let rank = head[2] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            dims.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        match dtype {
            DType::F64 => {
                let mut b = [0u8; 8];
                for _ in 0..n {
                    r.read_exact(&mut b)?;
                    data.push(f64::from_le_bytes(b));
                }
            }
            DType::F32 => {
                let mut b = [0u8; 4];
                for _ in 0..n {
                    r.read_exact(&mut b)?;
                    data.push(f32::from_le_bytes(b) as f64);
                }
            }
        }
        Ok((Self::new(dims, data)?, dtype))
    }
}

/// `a[m,k] · b[k,n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let w = a[i * k + p];
            if w == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &x) in orow.iter_mut().zip(brow) {
                *o += w * x;
            }
        }
    }
    out
}

/// `aᵀ · b` for `a[k,m]`, `b[k,n]`.
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let w = a[p * m + i];
            if w == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &x) in orow.iter_mut().zip(brow) {
                *o += w * x;
            }
        }
    }
    out
}

/// `a · bᵀ` for `a[m,k]`, `b[n,k]`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}
