//! Dense double-precision tensors and a tape-based reverse-mode engine.
//!
//! Layout is row-major with the logical axis order `N, H, W, C`. Lower-rank
//! tensors drop trailing axes (`[N, C]` for dense activations, `[N]` or `[]`
//! for scalars).

mod graph;
mod gradcheck;
mod params;

pub use graph::{Gradients, Graph, NodeId, Padding};
pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use params::{ParamId, ParamStore};

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"GTNS";
pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::Shape(format!("rank {} exceeds {MAX_RANK}", shape.len())));
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {count} values, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor value {bad}")));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Construct without the finiteness scan. Callers guarantee the invariants.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!("item() on shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Shape padded to rank 4 by appending unit axes.
    pub fn nhwc(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            [n, h, w, c] => Ok([*n, *h, *w, *c]),
            other => Err(Error::Shape(format!("expected N,H,W,C tensor, got {other:?}"))),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Binary record: magic, rank (u64), dims (u64 each), payload (f64), all little-endian.
    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(TENSOR_MAGIC)?;
        out.write_all(&(self.shape.len() as u64).to_le_bytes())?;
        for &d in &self.shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Format(format!("bad tensor magic {magic:?}")));
        }
        let rank = read_u64(input)? as usize;
        if rank > MAX_RANK {
            return Err(Error::Format(format!("tensor rank {rank} exceeds {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(input)? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor dims overflow".into()))?;
        let mut data = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            input.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        Self::new(&shape, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * (self.shape.len() + self.data.len()));
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        Self::read_from(&mut cursor)
    }
}

fn read_u64(input: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
