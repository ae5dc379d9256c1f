//! im2col / col2im lowering and GEMM-backed convolution.
//!
//! Inputs are channel-last (`H×W×C`, or `H×W×D×C` for volumes). A lowered
//! patch matrix has one row per `(window offset, channel)` pair and one column
//! per output position. Window offsets are enumerated row-major over the
//! spatial axes with the channel varying fastest, and output positions are
//! enumerated row-major. Kernel tensors `M×k×…×k×C` flatten to rows in exactly
//! the same order, so `K̂ · Î` is the convolution.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{advance, matmul, shape_str, Scalar, Tensor};

/// Square (cubic) convolution geometry with symmetric zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    /// Kernel side length.
    pub k: usize,
    /// Input channels.
    pub c: usize,
    /// Number of kernels (output channels).
    pub m: usize,
    /// Zero padding on every side.
    pub p: usize,
    /// Stride.
    pub s: usize,
}

impl ConvSpec {
    pub fn new(k: usize, c: usize, m: usize, p: usize, s: usize) -> Result<Self> {
        let spec = Self { k, c, m, p, s };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("k", self.k), ("C", self.c), ("M", self.m), ("s", self.s)] {
            if v == 0 {
                return Err(Error::config(format!("conv parameter {name} must be ≥ 1")));
            }
        }
        Ok(())
    }

    /// Number of output positions along one axis of extent `n`.
    pub fn out_extent(&self, n: usize) -> Result<usize> {
        let padded = n + 2 * self.p;
        if padded < self.k {
            return Err(Error::dim(format!(
                "window {} larger than padded extent {padded} (extent {n}, padding {})",
                self.k, self.p
            )));
        }
        let residue = (padded - self.k) % self.s;
        if residue != 0 {
            return Err(Error::config(format!(
                "stride {} does not tile extent {n}: ({n} + 2·{} − {}) mod {} = {residue}",
                self.s, self.p, self.k, self.s
            )));
        }
        Ok((padded - self.k) / self.s + 1)
    }

    /// Rows of the patch matrix for `nd` spatial axes: `k^nd · C`.
    pub fn patch_len(&self, nd: usize) -> usize {
        self.k.pow(nd as u32) * self.c
    }

    fn kernel_shape(&self, nd: usize) -> Vec<usize> {
        let mut s = vec![self.m];
        s.extend(std::iter::repeat_n(self.k, nd));
        s.push(self.c);
        s
    }
}

/// Spatial extents and channel count of a channel-last input of `nd` spatial axes.
fn split_input<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec, nd: usize) -> Result<Vec<usize>> {
    spec.validate()?;
    if input.rank() != nd + 1 {
        return Err(Error::dim(format!(
            "expected a rank-{} channel-last input, got {}",
            nd + 1,
            shape_str(input.shape())
        )));
    }
    let c = input.shape()[nd];
    if c != spec.c {
        return Err(Error::dim(format!(
            "input has {c} channels but spec says C = {}",
            spec.c
        )));
    }
    Ok(input.shape()[..nd].to_vec())
}

fn out_extents(spatial: &[usize], spec: &ConvSpec) -> Result<Vec<usize>> {
    spatial.iter().map(|&n| spec.out_extent(n)).collect()
}

/// Source offset of `(pos, window offset)` in an input of `spatial` extents,
/// or `None` when the tap lands in padding.
#[inline]
fn tap(
    pos: &[usize],
    win: &[usize],
    spatial: &[usize],
    spec: &ConvSpec,
) -> Option<usize> {
    let mut off = 0usize;
    for ax in 0..spatial.len() {
        let x = (pos[ax] * spec.s + win[ax]) as isize - spec.p as isize;
        if x < 0 || x as usize >= spatial[ax] {
            return None;
        }
        off = off * spatial[ax] + x as usize;
    }
    Some(off)
}

pub(crate) fn im2col_nd<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    nd: usize,
) -> Result<Tensor<T>> {
    let spatial = split_input(input, spec, nd)?;
    let out = out_extents(&spatial, spec)?;
    let rows = spec.patch_len(nd);
    let cols: usize = out.iter().product();
    let c = spec.c;
    let win_shape = vec![spec.k; nd];
    let src = input.data();

    let mut data = vec![T::zero(); rows * cols];
    data.par_chunks_mut(cols * c)
        .enumerate()
        .for_each(|(w, block)| {
            // block holds the C rows belonging to window offset `w`
            let win = unravel(w, &win_shape);
            let mut pos = vec![0usize; nd];
            for col in 0..cols {
                if let Some(off) = tap(&pos, &win, &spatial, spec) {
                    for ch in 0..c {
                        block[ch * cols + col] = src[off * c + ch];
                    }
                }
                advance(&mut pos, &out);
            }
        });
    Tensor::new(vec![rows, cols], data)
}

pub(crate) fn col2im_nd<T: Scalar>(
    cols: &Tensor<T>,
    spatial: &[usize],
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let nd = spatial.len();
    let out = out_extents(spatial, spec)?;
    let rows = spec.patch_len(nd);
    let ncols: usize = out.iter().product();
    if cols.shape() != [rows, ncols] {
        return Err(Error::dim(format!(
            "patch matrix {} does not match expected [{rows}×{ncols}] for input {} and k={}, P={}, s={}",
            shape_str(cols.shape()),
            shape_str(spatial),
            spec.k,
            spec.p,
            spec.s
        )));
    }
    let c = spec.c;
    let mut shape = spatial.to_vec();
    shape.push(c);
    let mut acc = vec![T::zero(); spatial.iter().product::<usize>() * c];
    let src = cols.data();
    let win_shape = vec![spec.k; nd];
    let mut win = vec![0usize; nd];
    for w in 0..spec.k.pow(nd as u32) {
        let mut pos = vec![0usize; nd];
        for col in 0..ncols {
            if let Some(off) = tap(&pos, &win, spatial, spec) {
                for ch in 0..c {
                    let v = src[(w * c + ch) * ncols + col];
                    acc[off * c + ch] = acc[off * c + ch] + v;
                }
            }
            advance(&mut pos, &out);
        }
        advance(&mut win, &win_shape);
    }
    Tensor::new(shape, acc)
}

fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for ax in (0..shape.len()).rev() {
        idx[ax] = flat % shape[ax];
        flat /= shape[ax];
    }
    idx
}

fn check_kernels<T: Scalar>(kernels: &Tensor<T>, spec: &ConvSpec, nd: usize) -> Result<()> {
    let want = spec.kernel_shape(nd);
    if kernels.shape() != want.as_slice() {
        return Err(Error::dim(format!(
            "kernel tensor {} does not match spec shape {}",
            shape_str(kernels.shape()),
            shape_str(&want)
        )));
    }
    Ok(())
}

pub(crate) fn conv_gemm_nd<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    spec: &ConvSpec,
    nd: usize,
) -> Result<Tensor<T>> {
    check_kernels(kernels, spec, nd)?;
    let cols = im2col_nd(input, spec, nd)?;
    let out = out_extents(&input.shape()[..nd], spec)?;
    let kmat = kernels.clone().reshape(&[spec.m, spec.patch_len(nd)])?;
    let prod = matmul(&kmat, &cols)?.transpose()?;
    let mut shape = out;
    shape.push(spec.m);
    prod.reshape(&shape)
}

/// Gradients of `conv_gemm_nd` with respect to its input and kernels.
pub(crate) fn conv_backward_nd<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    spec: &ConvSpec,
    nd: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_kernels(kernels, spec, nd)?;
    let spatial = split_input(input, spec, nd)?;
    let mut want = out_extents(&spatial, spec)?;
    want.push(spec.m);
    if grad_out.shape() != want.as_slice() {
        return Err(Error::dim(format!(
            "output gradient {} does not match forward output {}",
            shape_str(grad_out.shape()),
            shape_str(&want)
        )));
    }
    let positions = grad_out.len() / spec.m;
    let g = grad_out
        .clone()
        .reshape(&[positions, spec.m])?
        .transpose()?;
    let cols = im2col_nd(input, spec, nd)?;
    let grad_k = matmul(&g, &cols.transpose()?)?.reshape(&spec.kernel_shape(nd))?;
    let kmat = kernels.clone().reshape(&[spec.m, spec.patch_len(nd)])?;
    let grad_cols = matmul(&kmat.transpose()?, &g)?;
    let grad_in = col2im_nd(&grad_cols, &spatial, spec)?;
    Ok((grad_in, grad_k))
}

/// Lowers an `H×W×C` input into its `(k·k·C) × (H_o·W_o)` patch matrix.
pub fn im2col<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    im2col_nd(input, spec, 2)
}

/// Adjoint of [`im2col`]: scatters every patch-matrix entry back onto its
/// source pixel, summing overlaps, and returns an `H×W×C` tensor.
pub fn col2im<T: Scalar>(cols: &Tensor<T>, h: usize, w: usize, spec: &ConvSpec) -> Result<Tensor<T>> {
    col2im_nd(cols, &[h, w], spec)
}

/// 2D convolution (cross-correlation) as `K̂ · Î`, returning `H_o×W_o×M`.
pub fn conv2d_gemm<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    conv_gemm_nd(input, kernels, spec, 2)
}

/// Returns `(grad_input, grad_kernels)` for [`conv2d_gemm`].
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<(Tensor<T>, Tensor<T>)> {
    conv_backward_nd(grad_out, input, kernels, spec, 2)
}

/// Straightforward nested-loop 2D convolution, used as the baseline in
/// benchmarks.
pub fn conv2d_direct<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    check_kernels(kernels, spec, 2)?;
    let spatial = split_input(input, spec, 2)?;
    let (h, w) = (spatial[0], spatial[1]);
    let (ho, wo) = (spec.out_extent(h)?, spec.out_extent(w)?);
    let (k, c, m) = (spec.k, spec.c, spec.m);
    let x = input.data();
    let kd = kernels.data();
    let mut out = vec![T::zero(); ho * wo * m];
    out.par_chunks_mut(wo * m).enumerate().for_each(|(oi, row)| {
        for oj in 0..wo {
            for mm in 0..m {
                let mut acc = T::zero();
                for di in 0..k {
                    let ii = (oi * spec.s + di) as isize - spec.p as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    for dj in 0..k {
                        let jj = (oj * spec.s + dj) as isize - spec.p as isize;
                        if jj < 0 || jj as usize >= w {
                            continue;
                        }
                        let xo = (ii as usize * w + jj as usize) * c;
                        let ko = ((mm * k + di) * k + dj) * c;
                        for ch in 0..c {
                            acc = acc + x[xo + ch] * kd[ko + ch];
                        }
                    }
                }
                row[oj * m + mm] = acc;
            }
        }
    });
    Tensor::new(vec![ho, wo, m], out)
}
