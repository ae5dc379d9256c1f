//! Dense row-major tensors and the resampling primitives built on them.
//!
//! Axis order is never inferred: 2D images are `H×W`, volumes are `H×W×D`,
//! matrices are `rows×cols`, and each caller states which one it holds.

use std::fmt::Debug;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type tag used by the on-disk format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub trait Scalar:
    num_traits::Float + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte chunk"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte chunk"))
    }
}

/// Dense n-dimensional array stored in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub fn shape_str(shape: &[usize]) -> String {
    let parts: Vec<String> = shape.iter().map(|e| e.to_string()).collect();
    format!("[{}]", parts.join("×"))
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::dim("tensor must have at least one axis"));
        }
        if let Some(axis) = shape.iter().position(|&e| e == 0) {
            return Err(Error::dim(format!(
                "extent of axis {axis} is zero in shape {}",
                shape_str(&shape)
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {} holds {n} elements but buffer has {}",
                shape_str(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    /// Builds a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Result<Self> {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            advance(&mut idx, shape);
        }
        Self::new(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (&i, &e) in idx.iter().zip(&self.shape) {
            debug_assert!(i < e);
            off = off * e + i;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: T) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {} into {}",
                shape_str(&self.shape),
                shape_str(shape)
            )));
        }
        Self::new(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    /// Inner product over all elements, summed in storage order.
    pub fn dot(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.as_matrix()?;
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], data)
    }

    pub(crate) fn as_matrix(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(format!(
                "expected a matrix, got shape {}",
                shape_str(&self.shape)
            ))),
        }
    }

    pub(crate) fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "shape mismatch: {} vs {}",
                shape_str(&self.shape),
                shape_str(&other.shape)
            )));
        }
        Ok(())
    }

    pub(crate) fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::dim(format!(
                "{what} must have rank {rank}, got shape {}",
                shape_str(&self.shape)
            )));
        }
        Ok(())
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for ax in (0..shape.len().saturating_sub(1)).rev() {
        strides[ax] = strides[ax + 1] * shape[ax + 1];
    }
    strides
}

/// Row-major odometer step.
pub(crate) fn advance(idx: &mut [usize], shape: &[usize]) {
    for ax in (0..idx.len()).rev() {
        idx[ax] += 1;
        if idx[ax] < shape[ax] {
            return;
        }
        idx[ax] = 0;
    }
}

/// Matrix product `a[M×K] · b[K×N]`.
///
/// Every output element is accumulated over `K` in ascending order, so the
/// result is bit-identical across runs and thread counts. Rows are computed in
/// parallel.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.as_matrix()?;
    let (k2, n) = b.as_matrix()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner extents differ: {} × {}",
            shape_str(a.shape()),
            shape_str(b.shape())
        )));
    }
    let mut out = vec![T::zero(); m * n];
    let bd = b.data();
    out.par_chunks_mut(n)
        .zip(a.data().par_chunks(k))
        .for_each(|(row, arow)| {
            for (kk, &av) in arow.iter().enumerate() {
                let brow = &bd[kk * n..(kk + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        });
    Tensor::new(vec![m, n], out)
}

/// `a + t·(b − a)`, clamped to the span of the endpoints so rounding can never
/// leave `[min(a,b), max(a,b)]`. Equal endpoints return `a` exactly.
#[inline]
pub(crate) fn lerp<T: Scalar>(a: T, b: T, t: T) -> T {
    let v = a + t * (b - a);
    v.max(a.min(b)).min(a.max(b))
}

/// Corner-aligned source coordinate for output index `i`.
#[inline]
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out == 1 {
        0.0
    } else {
        (i * (n_in - 1)) as f64 / (n_out - 1) as f64
    }
}

/// One linear-interpolation pass along `axis`.
fn resize_axis<T: Scalar>(t: &Tensor<T>, axis: usize, n_out: usize) -> Tensor<T> {
    let shape = t.shape();
    let n_in = shape[axis];
    if n_in == n_out {
        return t.clone();
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let taps: Vec<(usize, usize, T)> = (0..n_out)
        .map(|i| {
            let x = source_coord(i, n_in, n_out);
            let i0 = (x.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, T::from_f64(x - i0 as f64))
        })
        .collect();

    let src = t.data();
    let mut data = vec![T::zero(); outer * n_out * inner];
    data.par_chunks_mut(n_out * inner)
        .enumerate()
        .for_each(|(o, block)| {
            let base = o * n_in * inner;
            for (i, &(i0, i1, w)) in taps.iter().enumerate() {
                let r0 = &src[base + i0 * inner..base + (i0 + 1) * inner];
                let r1 = &src[base + i1 * inner..base + (i1 + 1) * inner];
                for ((dst, &a), &b) in block[i * inner..(i + 1) * inner]
                    .iter_mut()
                    .zip(r0)
                    .zip(r1)
                {
                    *dst = lerp(a, b, w);
                }
            }
        });
    let mut new_shape = shape.to_vec();
    new_shape[axis] = n_out;
    Tensor { shape: new_shape, data }
}

fn resize_linear<T: Scalar>(t: &Tensor<T>, target: &[usize]) -> Result<Tensor<T>> {
    if let Some(axis) = target.iter().position(|&e| e == 0) {
        return Err(Error::dim(format!(
            "resize target {} has zero extent on axis {axis}",
            shape_str(target)
        )));
    }
    let mut out = t.clone();
    for (axis, &n) in target.iter().enumerate() {
        out = resize_axis(&out, axis, n);
    }
    Ok(out)
}

/// Trilinear resize of an `H×W×D` volume with a corner-aligned grid.
///
/// Implemented as three separable linear passes, which is algebraically the
/// same as trilinear interpolation.
pub fn resize_trilinear<T: Scalar>(v: &Tensor<T>, target: [usize; 3]) -> Result<Tensor<T>> {
    v.expect_rank(3, "trilinear resize input")?;
    resize_linear(v, &target)
}

/// Bilinear resize of an `H×W` image with a corner-aligned grid.
pub fn resize_bilinear<T: Scalar>(img: &Tensor<T>, target: [usize; 2]) -> Result<Tensor<T>> {
    img.expect_rank(2, "bilinear resize input")?;
    resize_linear(img, &target)
}

/// Copies the sub-block starting at `origin` with the given `extent`.
pub fn crop<T: Scalar>(t: &Tensor<T>, origin: &[usize], extent: &[usize]) -> Result<Tensor<T>> {
    let rank = t.rank();
    if origin.len() != rank || extent.len() != rank {
        return Err(Error::dim(format!(
            "crop of rank-{rank} tensor needs {rank} origin and extent values, got {} and {}",
            origin.len(),
            extent.len()
        )));
    }
    for axis in 0..rank {
        if extent[axis] == 0 {
            return Err(Error::dim(format!("crop extent on axis {axis} is zero")));
        }
        if origin[axis] + extent[axis] > t.shape[axis] {
            return Err(Error::Range {
                axis,
                msg: format!(
                    "origin {} + extent {} exceeds size {}",
                    origin[axis], extent[axis], t.shape[axis]
                ),
            });
        }
    }
    let strides = t.strides();
    let row = extent[rank - 1];
    let rows: usize = extent[..rank - 1].iter().product();
    let mut data = Vec::with_capacity(rows * row);
    let mut idx = vec![0usize; rank - 1];
    for _ in 0..rows {
        let mut off = origin[rank - 1];
        for ax in 0..rank - 1 {
            off += (origin[ax] + idx[ax]) * strides[ax];
        }
        data.extend_from_slice(&t.data[off..off + row]);
        advance(&mut idx, &extent[..rank - 1]);
    }
    Tensor::new(extent.to_vec(), data)
}

/// Pads each axis up to `extent` by replicating edge values, splitting the
/// padding as evenly as possible before and after. Axes already at least
/// `extent` long are left alone.
pub fn pad_edge<T: Scalar>(t: &Tensor<T>, extent: &[usize]) -> Result<Tensor<T>> {
    if extent.len() != t.rank() {
        return Err(Error::dim("pad extent rank does not match tensor rank"));
    }
    let out_shape: Vec<usize> = t
        .shape
        .iter()
        .zip(extent)
        .map(|(&s, &e)| s.max(e))
        .collect();
    let before: Vec<usize> = t
        .shape
        .iter()
        .zip(&out_shape)
        .map(|(&s, &o)| (o - s) / 2)
        .collect();
    Tensor::from_fn(&out_shape, |idx| {
        let src: Vec<usize> = idx
            .iter()
            .zip(&before)
            .zip(&t.shape)
            .map(|((&i, &b), &s)| i.saturating_sub(b).min(s - 1))
            .collect();
        t.get(&src)
    })
}
