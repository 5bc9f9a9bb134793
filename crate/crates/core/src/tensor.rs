//! Dense row-major `f32` tensors.
//!
//! There is no broadcasting: every binary op requires equal shapes, and the
//! few shape coercions the models need (bias expansion, row sums) are
//! explicit operations on the autodiff graph.

use crate::error::{Error, Result};

/// Elementwise binary operation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }

    #[inline]
    fn apply(self, a: f32, b: f32) -> f32 {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
        }
    }
}

/// A dense tensor of finite `f32` values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn ensure_finite(data: &[f32], context: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NonFinite(format!("{context} (element {i})"))),
    }
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let t = Self::new_allow_nonfinite(shape, data)?;
        ensure_finite(&t.data, "tensor construction")?;
        Ok(t)
    }

    /// Like [`Tensor::new`] but keeps NaN/Inf payloads. Only the checkpoint
    /// loader uses this, behind an explicit opt-in.
    pub fn new_allow_nonfinite(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "construct",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel_of(shape)],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel_of(shape)],
        }
    }

    /// A rank-0 tensor holding one value.
    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidConfig("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f32> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::ShapeMismatch {
                op: "dims2",
                left: self.shape.clone(),
                right: vec![0, 0],
            }),
        }
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Elementwise `a (+|-|*) b` for equal shapes.
    pub fn ew_binary(kind: BinaryKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.check_same_shape(b, kind.name())?;
        let data: Vec<f32> = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| kind.apply(x, y))
            .collect();
        ensure_finite(&data, kind.name())?;
        Ok(Tensor {
            shape: a.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        Self::ew_binary(BinaryKind::Add, self, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        Self::ew_binary(BinaryKind::Sub, self, other)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        Self::ew_binary(BinaryKind::Mul, self, other)
    }

    /// Multiplies every element by `c`.
    pub fn scale(&self, c: f32) -> Result<Tensor> {
        if !c.is_finite() {
            return Err(Error::NonFinite(format!("scale factor {c}")));
        }
        let data: Vec<f32> = self.data.iter().map(|v| v * c).collect();
        ensure_finite(&data, "scale")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Maps every element through `f`; the result must stay finite.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Tensor> {
        let data: Vec<f32> = self.data.iter().map(|&v| f(v)).collect();
        ensure_finite(&data, "map")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Standard matrix product `[m×k] · [k×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        ensure_finite(&out, "matmul")?;
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Sum of all elements, accumulated in `f64` in row-major order.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Inner product of the flattened tensors, accumulated in `f64`.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Copies rows `[start, start+len)` of a matrix.
    pub fn rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        if start + len > m {
            return Err(Error::IndexOutOfRange {
                index: start + len,
                len: m,
            });
        }
        Ok(Tensor {
            shape: vec![len, n],
            data: self.data[start * n..(start + len) * n].to_vec(),
        })
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidConfig("vstack of nothing".into()))?;
        let (_, n) = first.dims2()?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c) = p.dims2()?;
            if c != n {
                return Err(Error::ShapeMismatch {
                    op: "vstack",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: vec![rows, n],
            data,
        })
    }
}
