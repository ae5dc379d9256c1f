//! Pseudo-3D transformation: every `k×k` sliding window of a 2D image becomes
//! the depth fiber at that window's position, turning an `H×W` image into an
//! `H_t×W_t×k²` volume with `H_t = (H−k)/s + 1` and `W_t = (W−k)/s + 1`.
//!
//! Fibers hold their window in row-major order. Reshaping the volume to
//! `k² × (H_t·W_t)` with fibers as columns gives exactly the single-channel,
//! unpadded im2col patch matrix of the same image.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{resize_trilinear, shape_str, Scalar, Tensor};

/// Window size and stride of the transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct P3DConfig {
    pub window: usize,
    pub stride: usize,
}

impl Default for P3DConfig {
    fn default() -> Self {
        Self {
            window: 5,
            stride: 1,
        }
    }
}

impl P3DConfig {
    pub fn new(window: usize, stride: usize) -> Result<Self> {
        let cfg = Self { window, stride };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::config(format!(
                "window and stride must be ≥ 1 (got k={}, s={})",
                self.window, self.stride
            )));
        }
        Ok(())
    }

    /// Depth of the resulting volume, `k²`.
    pub fn depth(&self) -> usize {
        self.window * self.window
    }

    /// Number of window positions along an image axis of length `n`.
    pub fn positions(&self, n: usize) -> Result<usize> {
        self.validate()?;
        let k = self.window;
        if n < k {
            return Err(Error::dim(format!("window {k} exceeds image extent {n}")));
        }
        let residue = (n - k) % self.stride;
        if residue != 0 {
            return Err(Error::config(format!(
                "stride {} does not tile extent {n}: ({n} − {k}) mod {} = {residue}",
                self.stride, self.stride
            )));
        }
        Ok((n - k) / self.stride + 1)
    }

    /// `(H_t, W_t, D_t)` for an `h×w` image.
    pub fn output_shape(&self, h: usize, w: usize) -> Result<[usize; 3]> {
        Ok([self.positions(h)?, self.positions(w)?, self.depth()])
    }

    /// Image extent reproduced by `n` window positions.
    pub fn source_extent(&self, n: usize) -> usize {
        (n - 1) * self.stride + self.window
    }

    /// Largest extent `≤ n` that the window and stride tile exactly, or
    /// `None` if the window does not fit at all.
    pub fn compatible_extent(&self, n: usize) -> Option<usize> {
        if n < self.window || self.stride == 0 {
            return None;
        }
        Some(n - (n - self.window) % self.stride)
    }
}

fn image_dims<T: Scalar>(img: &Tensor<T>) -> Result<(usize, usize)> {
    img.expect_rank(2, "pseudo-3D input image")?;
    Ok((img.shape()[0], img.shape()[1]))
}

/// Converts an `H×W` image into its `H_t×W_t×k²` pseudo-3D volume.
pub fn to_pseudo3d<T: Scalar>(img: &Tensor<T>, cfg: &P3DConfig) -> Result<Tensor<T>> {
    let (h, w) = image_dims(img)?;
    let [ht, wt, dt] = cfg.output_shape(h, w)?;
    let (k, s) = (cfg.window, cfg.stride);
    let src = img.data();
    let mut data = vec![T::zero(); ht * wt * dt];
    data.par_chunks_mut(wt * dt).enumerate().for_each(|(i, row)| {
        for j in 0..wt {
            let fiber = &mut row[j * dt..(j + 1) * dt];
            for a in 0..k {
                let start = (i * s + a) * w + j * s;
                fiber[a * k..(a + 1) * k].copy_from_slice(&src[start..start + k]);
            }
        }
    });
    Tensor::new(vec![ht, wt, dt], data)
}

/// Transforms each channel of an `H×W×C` image separately.
pub fn to_pseudo3d_channels<T: Scalar>(img: &Tensor<T>, cfg: &P3DConfig) -> Result<Vec<Tensor<T>>> {
    img.expect_rank(3, "multi-channel image")?;
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    (0..c)
        .map(|ch| {
            let plane = Tensor::from_fn(&[h, w], |i| img.get(&[i[0], i[1], ch]))?;
            to_pseudo3d(&plane, cfg)
        })
        .collect()
}

fn check_volume<T: Scalar>(vol: &Tensor<T>, cfg: &P3DConfig) -> Result<(usize, usize)> {
    cfg.validate()?;
    vol.expect_rank(3, "pseudo-3D volume")?;
    let d = vol.shape()[2];
    if d != cfg.depth() {
        return Err(Error::dim(format!(
            "volume {} has depth {d}, window {} needs {}",
            shape_str(vol.shape()),
            cfg.window,
            cfg.depth()
        )));
    }
    Ok((vol.shape()[0], vol.shape()[1]))
}

/// Visits every `(source pixel, fiber value)` pair of a pseudo-3D volume.
fn for_each_copy<T: Scalar>(
    vol: &Tensor<T>,
    cfg: &P3DConfig,
    w2d: usize,
    mut f: impl FnMut(usize, T),
) {
    let (ht, wt, dt) = (vol.shape()[0], vol.shape()[1], vol.shape()[2]);
    let (k, s) = (cfg.window, cfg.stride);
    let data = vol.data();
    for i in 0..ht {
        for j in 0..wt {
            let base = (i * wt + j) * dt;
            for a in 0..k {
                for b in 0..k {
                    let pixel = (i * s + a) * w2d + j * s + b;
                    f(pixel, data[base + a * k + b]);
                }
            }
        }
    }
}

/// Reconstructs an `H×W` image by averaging every copy of each pixel.
///
/// The mean is taken relative to the first copy seen, so a volume produced by
/// [`to_pseudo3d`] reproduces its source image bit for bit. Pixels covered by
/// no window (possible only when `s > k`) are zero.
pub fn from_pseudo3d<T: Scalar>(
    vol: &Tensor<T>,
    cfg: &P3DConfig,
    h2d: usize,
    w2d: usize,
) -> Result<Tensor<T>> {
    let (ht, wt) = check_volume(vol, cfg)?;
    let [eh, ew, _] = cfg.output_shape(h2d, w2d)?;
    if (eh, ew) != (ht, wt) {
        return Err(Error::dim(format!(
            "volume {} does not come from a {h2d}×{w2d} image with k={}, s={} (expected {eh}×{ew} positions)",
            shape_str(vol.shape()),
            cfg.window,
            cfg.stride
        )));
    }
    let n = h2d * w2d;
    let mut first = vec![T::zero(); n];
    let mut dev = vec![T::zero(); n];
    let mut count = vec![0usize; n];
    for_each_copy(vol, cfg, w2d, |p, v| {
        if count[p] == 0 {
            first[p] = v;
        } else {
            dev[p] = dev[p] + (v - first[p]);
        }
        count[p] += 1;
    });
    let data = (0..n)
        .map(|p| match count[p] {
            0 => T::zero(),
            c => first[p] + dev[p] / T::from_f64(c as f64),
        })
        .collect();
    Tensor::new(vec![h2d, w2d], data)
}

/// Largest spread between copies of the same source pixel; zero exactly when
/// the volume is the image of some 2D input.
pub fn consistency_residual<T: Scalar>(vol: &Tensor<T>, cfg: &P3DConfig) -> Result<T> {
    let (ht, wt) = check_volume(vol, cfg)?;
    let (h2d, w2d) = (cfg.source_extent(ht), cfg.source_extent(wt));
    let n = h2d * w2d;
    let mut lo = vec![T::infinity(); n];
    let mut hi = vec![T::neg_infinity(); n];
    for_each_copy(vol, cfg, w2d, |p, v| {
        lo[p] = lo[p].min(v);
        hi[p] = hi[p].max(v);
    });
    Ok(lo
        .iter()
        .zip(&hi)
        .filter(|(l, _)| l.is_finite())
        .fold(T::zero(), |acc, (&l, &h)| acc.max(h - l)))
}

/// Pseudo-3D transform followed by a trilinear resize to the model input shape.
pub fn pseudo3d_for_model<T: Scalar>(
    img: &Tensor<T>,
    cfg: &P3DConfig,
    target: [usize; 3],
) -> Result<Tensor<T>> {
    let vol = to_pseudo3d(img, cfg)?;
    resize_trilinear(&vol, target)
}
