//! Dense row-major tensors and the element traits shared by every module.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage type of a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::U8 => "u8",
        }
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            "u8" => Ok(DType::U8),
            other => Err(Error::Config(format!("unknown dtype `{other}`"))),
        }
    }
}

/// Wire representation of a buffer moved between workers.
#[derive(Debug)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    Empty,
}

impl Payload {
    pub fn byte_len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len() * 4,
            Payload::F64(v) => v.len() * 8,
            Payload::U8(v) => v.len(),
            Payload::Empty => 0,
        }
    }
}

/// Scalar types a tensor can hold.
pub trait Element: Copy + Default + PartialEq + Debug + Send + Sync + 'static {
    const DTYPE: DType;

    fn into_payload(v: Vec<Self>) -> Payload;
    fn from_payload(p: Payload) -> Option<Vec<Self>>;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn into_payload(v: Vec<Self>) -> Payload {
        Payload::F32(v)
    }

    fn from_payload(p: Payload) -> Option<Vec<Self>> {
        match p {
            Payload::F32(v) => Some(v),
            _ => None,
        }
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn into_payload(v: Vec<Self>) -> Payload {
        Payload::F64(v)
    }

    fn from_payload(p: Payload) -> Option<Vec<Self>> {
        match p {
            Payload::F64(v) => Some(v),
            _ => None,
        }
    }
}

impl Element for u8 {
    const DTYPE: DType = DType::U8;

    fn into_payload(v: Vec<Self>) -> Payload {
        Payload::U8(v)
    }

    fn from_payload(p: Payload) -> Option<Vec<Self>> {
        match p {
            Payload::U8(v) => Some(v),
            _ => None,
        }
    }
}

/// Floating-point element used by the differentiable operators.
pub trait Real: Element + Float + AddAssign + SubAssign + MulAssign {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense N-dimensional array, row-major with the last dimension fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::default())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                what: "tensor data".into(),
                expected: vec![n],
                got: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn byte_len(&self) -> usize {
        self.data.len() * T::DTYPE.size()
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for d in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * self.shape[d + 1];
        }
        strides
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, (&x, &n)) in idx.iter().zip(&self.shape).enumerate() {
            debug_assert!(x < n, "index {x} out of bounds {n} on dim {i}");
            off = off * n + x;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let off = self.offset(idx);
        self.data[off] = v;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                what: "reshape".into(),
                expected: self.shape.clone(),
                got: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// (outer, extent, inner) decomposition around `dim`.
    fn split_at_dim(&self, dim: usize) -> (usize, usize, usize) {
        let outer = self.shape[..dim].iter().product();
        let inner = self.shape[dim + 1..].iter().product();
        (outer, self.shape[dim], inner)
    }

    /// Copies `len` slices starting at `start` along `dim`.
    pub fn slice_dim(&self, dim: usize, start: usize, len: usize) -> Tensor<T> {
        assert!(start + len <= self.shape[dim], "slice out of range");
        let (outer, ext, inner) = self.split_at_dim(dim);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[dim] = len;
        Tensor { shape, data }
    }

    /// Overwrites the slices starting at `start` along `dim` with `src`.
    pub fn write_slice_dim(&mut self, dim: usize, start: usize, src: &Tensor<T>) {
        let len = src.shape[dim];
        assert!(start + len <= self.shape[dim], "slice out of range");
        let (outer, ext, inner) = self.split_at_dim(dim);
        let chunk = len * inner;
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            self.data[base..base + chunk].copy_from_slice(&src.data[o * chunk..(o + 1) * chunk]);
        }
    }

    /// Concatenates tensors along `dim`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<T>], dim: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::Config("concat of nothing".into()))?;
        for p in parts {
            let same = p.ndim() == first.ndim()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == dim || a == b);
            if !same {
                return Err(Error::ShapeMismatch {
                    what: format!("concat along dim {dim}"),
                    expected: first.shape.clone(),
                    got: p.shape.clone(),
                });
            }
        }
        let mut shape = first.shape.clone();
        shape[dim] = parts.iter().map(|p| p.shape[dim]).sum();
        let outer: usize = shape[..dim].iter().product();
        let inner: usize = shape[dim + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[dim] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Copies the axis-aligned box `[starts, starts + extents)`.
    pub fn sub_box(&self, starts: &[usize], extents: &[usize]) -> Tensor<T> {
        assert_eq!(starts.len(), self.ndim());
        assert_eq!(extents.len(), self.ndim());
        let mut out = Vec::with_capacity(extents.iter().product());
        if self.ndim() == 0 {
            return self.clone();
        }
        let last = self.ndim() - 1;
        let run = extents[last];
        let strides = self.strides();
        for_each_prefix(&extents[..last], |prefix| {
            let mut off = starts[last];
            for (d, &p) in prefix.iter().enumerate() {
                off += (starts[d] + p) * strides[d];
            }
            out.extend_from_slice(&self.data[off..off + run]);
        });
        Tensor {
            shape: extents.to_vec(),
            data: out,
        }
    }

    /// Writes `src` into the box starting at `starts`.
    pub fn write_box(&mut self, starts: &[usize], src: &Tensor<T>) {
        assert_eq!(starts.len(), self.ndim());
        if self.ndim() == 0 {
            self.data.copy_from_slice(&src.data);
            return;
        }
        let last = self.ndim() - 1;
        let run = src.shape[last];
        let strides = self.strides();
        let mut cursor = 0;
        for_each_prefix(&src.shape[..last], |prefix| {
            let mut off = starts[last];
            for (d, &p) in prefix.iter().enumerate() {
                off += (starts[d] + p) * strides[d];
            }
            self.data[off..off + run].copy_from_slice(&src.data[cursor..cursor + run]);
            cursor += run;
        });
    }
}

impl<T: Real> Tensor<T> {
    /// Adds `src` into the slices starting at `start` along `dim`.
    pub fn add_slice_dim(&mut self, dim: usize, start: usize, src: &Tensor<T>) {
        let len = src.shape[dim];
        assert!(start + len <= self.shape[dim], "slice out of range");
        let (outer, ext, inner) = self.split_at_dim(dim);
        let chunk = len * inner;
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            for (d, &s) in self.data[base..base + chunk]
                .iter_mut()
                .zip(&src.data[o * chunk..(o + 1) * chunk])
            {
                *d += s;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Sum of element-wise products, accumulated in storage order.
    pub fn dot(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape, "dot shape mismatch");
        let mut acc = T::zero();
        for (&a, &b) in self.data.iter().zip(&other.data) {
            acc += a * b;
        }
        acc
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        self.map(|v| U::from_f64(v.as_f64()))
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max)
    }
}

/// Calls `f` for every multi-index of `extents` in row-major order.
pub(crate) fn for_each_prefix(extents: &[usize], mut f: impl FnMut(&[usize])) {
    if extents.iter().any(|&e| e == 0) {
        return;
    }
    let mut idx = vec![0usize; extents.len()];
    loop {
        f(&idx);
        let mut d = extents.len();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < extents[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn slice_and_write_back() {
        let t = ramp(&[2, 3, 4]);
        let s = t.slice_dim(1, 1, 2);
        assert_eq!(s.shape(), &[2, 2, 4]);
        assert_eq!(s.get(&[1, 0, 3]), t.get(&[1, 1, 3]));
        let mut z = Tensor::<f64>::zeros(&[2, 3, 4]);
        z.write_slice_dim(1, 1, &s);
        assert_eq!(z.get(&[0, 2, 1]), t.get(&[0, 2, 1]));
        assert_eq!(z.get(&[0, 0, 1]), 0.0);
    }

    #[test]
    fn concat_matches_manual_layout() {
        let a = ramp(&[2, 1, 2]);
        let b = ramp(&[2, 2, 2]);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(c.get(&[1, 0, 1]), a.get(&[1, 0, 1]));
        assert_eq!(c.get(&[1, 2, 0]), b.get(&[1, 1, 0]));
        assert!(Tensor::concat(&[&a, &ramp(&[3, 1, 2])], 1).is_err());
    }

    #[test]
    fn box_roundtrip() {
        let t = ramp(&[4, 5, 6]);
        let b = t.sub_box(&[1, 2, 3], &[2, 3, 2]);
        assert_eq!(b.get(&[1, 2, 1]), t.get(&[2, 4, 4]));
        let mut z = Tensor::<f64>::zeros(&[4, 5, 6]);
        z.write_box(&[1, 2, 3], &b);
        assert_eq!(z.get(&[2, 4, 4]), t.get(&[2, 4, 4]));
        assert_eq!(z.get(&[0, 0, 0]), 0.0);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0f32; 3]).is_err());
    }
}
