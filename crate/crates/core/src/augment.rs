//! Seeded two-stage augmentation for volumes and pseudo-3D inputs.
//!
//! The global stage applies flips and an affine warp. The local stage applies
//! noise, Gaussian blur, patch swapping and gamma. Each op draws its parameters
//! from the item's stream in declaration order. Every op consumes the same
//! number of draws whether or not it fires, so one op's outcome never shifts
//! the next op's randomness.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stage, Stream};
use crate::tensor::{crop, pad_edge, resize_bilinear, resize_trilinear, shape_str, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum GlobalOp {
    /// Flip each axis independently with the given probability.
    Flip { probabilities: [f64; 3] },
    /// Rotation about each axis in `[-max, max]` degrees, isotropic scale in
    /// `[1 - max_scale, 1 + max_scale]`, and translation in
    /// `[-max_translation, max_translation]` times the axis extent.
    Affine {
        #[serde(default = "one")]
        probability: f64,
        max_rotation_deg: [f64; 3],
        max_scale: f64,
        max_translation: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LocalOp {
    /// Additive Gaussian noise; `std` is a fraction of the intensity range.
    Noise {
        #[serde(default = "one")]
        probability: f64,
        std: f64,
    },
    /// Separable Gaussian blur with sigma (in voxels) drawn from `sigma`.
    GaussianBlur {
        #[serde(default = "one")]
        probability: f64,
        sigma: [f64; 2],
    },
    /// Swaps `count` random pairs of `patch`-sized blocks.
    Swap {
        #[serde(default = "one")]
        probability: f64,
        patch: [usize; 3],
        count: usize,
    },
    /// `v ↦ v^γ` with `γ` drawn from `range`.
    Gamma {
        #[serde(default = "one")]
        probability: f64,
        range: [f64; 2],
    },
}

fn one() -> f64 {
    1.0
}

/// Random-crop geometry for both corpora.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropSpec {
    /// Candidate 3D crop sizes, one drawn uniformly per item.
    pub sizes_3d: Vec<[usize; 3]>,
    /// Shape every 3D crop is resized to.
    pub target_3d: [usize; 3],
    /// Range of the crop's area fraction for 2D images.
    pub area_fraction: [f64; 2],
    /// Shape every 2D crop is resized to.
    pub target_2d: [usize; 2],
    /// Smallest image side accepted for 2D cropping.
    pub min_side_2d: usize,
}

impl Default for CropSpec {
    fn default() -> Self {
        Self {
            sizes_3d: vec![[64, 64, 32], [96, 96, 48], [112, 112, 56], [128, 128, 64]],
            target_3d: [64, 64, 32],
            area_fraction: [0.6, 1.0],
            target_2d: [224, 224],
            min_side_2d: 64,
        }
    }
}

/// Omitted fields take the default recipe; an explicit empty list disables
/// a stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSpec {
    pub seed: u64,
    pub global_ops: Vec<GlobalOp>,
    pub local_ops: Vec<LocalOp>,
    pub crop: CropSpec,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            global_ops: vec![
                GlobalOp::Flip {
                    probabilities: [0.5, 0.5, 0.5],
                },
                GlobalOp::Affine {
                    probability: 0.8,
                    max_rotation_deg: [15.0, 15.0, 15.0],
                    max_scale: 0.1,
                    max_translation: 0.05,
                },
            ],
            local_ops: vec![
                LocalOp::Noise {
                    probability: 0.5,
                    std: 0.05,
                },
                LocalOp::GaussianBlur {
                    probability: 0.5,
                    sigma: [0.5, 1.5],
                },
                LocalOp::Swap {
                    probability: 0.5,
                    patch: [8, 8, 4],
                    count: 8,
                },
                LocalOp::Gamma {
                    probability: 0.5,
                    range: [0.7, 1.5],
                },
            ],
            crop: CropSpec::default(),
        }
    }
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(format!("{name} probability {p} outside [0, 1]")));
    }
    Ok(())
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite()) || r[0] > r[1] {
        return Err(Error::config(format!(
            "{name} range [{}, {}] is not an ordered finite interval",
            r[0], r[1]
        )));
    }
    Ok(())
}

impl AugmentSpec {
    /// A recipe whose every op is present but does nothing.
    pub fn identity(seed: u64) -> Self {
        Self {
            seed,
            global_ops: vec![
                GlobalOp::Flip {
                    probabilities: [0.0; 3],
                },
                GlobalOp::Affine {
                    probability: 1.0,
                    max_rotation_deg: [0.0; 3],
                    max_scale: 0.0,
                    max_translation: 0.0,
                },
            ],
            local_ops: vec![
                LocalOp::Noise {
                    probability: 1.0,
                    std: 0.0,
                },
                LocalOp::Swap {
                    probability: 1.0,
                    patch: [1, 1, 1],
                    count: 0,
                },
                LocalOp::Gamma {
                    probability: 1.0,
                    range: [1.0, 1.0],
                },
            ],
            crop: CropSpec {
                sizes_3d: vec![[64, 64, 32]],
                area_fraction: [1.0, 1.0],
                ..CropSpec::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        for op in &self.global_ops {
            match op {
                GlobalOp::Flip { probabilities } => {
                    for &p in probabilities {
                        check_probability("flip", p)?;
                    }
                }
                GlobalOp::Affine {
                    probability,
                    max_rotation_deg,
                    max_scale,
                    max_translation,
                } => {
                    check_probability("affine", *probability)?;
                    if max_rotation_deg.iter().any(|r| !(0.0..=180.0).contains(r)) {
                        return Err(Error::config("affine rotation bounds must lie in [0, 180]"));
                    }
                    if !(0.0..1.0).contains(max_scale) {
                        return Err(Error::config("affine max_scale must lie in [0, 1)"));
                    }
                    if !(0.0..=1.0).contains(max_translation) {
                        return Err(Error::config("affine max_translation must lie in [0, 1]"));
                    }
                }
            }
        }
        for op in &self.local_ops {
            match op {
                LocalOp::Noise { probability, std } => {
                    check_probability("noise", *probability)?;
                    if !(std.is_finite() && *std >= 0.0) {
                        return Err(Error::config("noise std must be finite and ≥ 0"));
                    }
                }
                LocalOp::GaussianBlur { probability, sigma } => {
                    check_probability("blur", *probability)?;
                    check_range("blur sigma", *sigma)?;
                    if sigma[0] <= 0.0 {
                        return Err(Error::config("blur sigma must be > 0"));
                    }
                }
                LocalOp::Swap {
                    probability, patch, ..
                } => {
                    check_probability("swap", *probability)?;
                    if patch.contains(&0) {
                        return Err(Error::config("swap patch extents must be ≥ 1"));
                    }
                }
                LocalOp::Gamma { probability, range } => {
                    check_probability("gamma", *probability)?;
                    check_range("gamma", *range)?;
                    if range[0] < 0.25 || range[1] > 4.0 {
                        return Err(Error::config("gamma range must lie within [0.25, 4]"));
                    }
                }
            }
        }
        let c = &self.crop;
        if c.sizes_3d.is_empty() || c.sizes_3d.iter().any(|s| s.contains(&0)) {
            return Err(Error::config("3D crop sizes must be a non-empty list of positive extents"));
        }
        if c.target_3d.contains(&0) || c.target_2d.contains(&0) {
            return Err(Error::config("crop targets must have positive extents"));
        }
        check_range("crop area fraction", c.area_fraction)?;
        if c.area_fraction[0] <= 0.0 || c.area_fraction[1] > 1.0 {
            return Err(Error::config("crop area fraction must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[inline]
fn uniform(rng: &mut Stream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn volume_dims(v: &Tensor<f32>) -> Result<[usize; 3]> {
    v.expect_rank(3, "augmentation input")?;
    Ok([v.shape()[0], v.shape()[1], v.shape()[2]])
}

/// Global stage for item `item_index`: flips then affine, in declaration order.
pub fn augment_global(v: &Tensor<f32>, spec: &AugmentSpec, item_index: u64) -> Result<Tensor<f32>> {
    let mut rng = rng::stream(spec.seed, &[item_index, stage::GLOBAL]);
    augment_global_with(v, spec, &mut rng)
}

/// Local stage for item `item_index`; output is clamped to `[0, 1]`.
pub fn augment_local(v: &Tensor<f32>, spec: &AugmentSpec, item_index: u64) -> Result<Tensor<f32>> {
    let mut rng = rng::stream(spec.seed, &[item_index, stage::LOCAL]);
    augment_local_with(v, spec, &mut rng)
}

pub fn augment_global_with(
    v: &Tensor<f32>,
    spec: &AugmentSpec,
    rng: &mut Stream,
) -> Result<Tensor<f32>> {
    spec.validate()?;
    volume_dims(v)?;
    let mut out = v.clone();
    for op in &spec.global_ops {
        match *op {
            GlobalOp::Flip { probabilities } => {
                for (axis, &p) in probabilities.iter().enumerate() {
                    if rng.random::<f64>() < p {
                        out = flip(&out, axis)?;
                    }
                }
            }
            GlobalOp::Affine {
                probability,
                max_rotation_deg,
                max_scale,
                max_translation,
            } => {
                let fire = rng.random::<f64>() < probability;
                let angles = max_rotation_deg.map(|m| uniform(rng, -m, m).to_radians());
                let scale = uniform(rng, 1.0 - max_scale, 1.0 + max_scale);
                let shift = [(); 3].map(|_| uniform(rng, -max_translation, max_translation));
                if fire {
                    let dims = volume_dims(&out)?;
                    let t = Affine::new(angles, scale, shift, dims);
                    if !t.is_identity() {
                        out = t.apply(&out)?;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn augment_local_with(
    v: &Tensor<f32>,
    spec: &AugmentSpec,
    rng: &mut Stream,
) -> Result<Tensor<f32>> {
    spec.validate()?;
    let dims = volume_dims(v)?;
    let mut out = v.clone();
    for op in &spec.local_ops {
        match *op {
            LocalOp::Noise { probability, std } => {
                let fire = rng.random::<f64>() < probability;
                let sigma = std * (out.max_value() - out.min_value()) as f64;
                if fire && sigma > 0.0 {
                    let normal = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
                    for x in out.data_mut() {
                        *x += normal.sample(rng) as f32;
                    }
                }
            }
            LocalOp::GaussianBlur { probability, sigma } => {
                let fire = rng.random::<f64>() < probability;
                let s = uniform(rng, sigma[0], sigma[1]);
                if fire {
                    out = gaussian_blur(&out, s)?;
                }
            }
            LocalOp::Swap {
                probability,
                patch,
                count,
            } => {
                for (axis, (&p, &n)) in patch.iter().zip(&dims).enumerate() {
                    if p >= n {
                        return Err(Error::dim(format!(
                            "swap patch {:?} not smaller than volume {} on axis {axis}",
                            patch,
                            shape_str(&dims)
                        )));
                    }
                }
                let fire = rng.random::<f64>() < probability;
                let pairs: Vec<([usize; 3], [usize; 3])> = (0..count)
                    .map(|_| {
                        let a = [0, 1, 2].map(|ax| rng.random_range(0..=dims[ax] - patch[ax]));
                        let b = [0, 1, 2].map(|ax| rng.random_range(0..=dims[ax] - patch[ax]));
                        (a, b)
                    })
                    .collect();
                if fire {
                    for (a, b) in pairs {
                        swap_blocks(&mut out, a, b, patch);
                    }
                }
            }
            LocalOp::Gamma { probability, range } => {
                let fire = rng.random::<f64>() < probability;
                let gamma = uniform(rng, range[0], range[1]);
                if fire && gamma != 1.0 {
                    let g = gamma as f32;
                    for x in out.data_mut() {
                        *x = x.clamp(0.0, 1.0).powf(g);
                    }
                }
            }
        }
    }
    for x in out.data_mut() {
        *x = x.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Reverses `v` along `axis`.
pub fn flip(v: &Tensor<f32>, axis: usize) -> Result<Tensor<f32>> {
    let dims = volume_dims(v)?;
    Tensor::from_fn(&dims, |i| {
        let mut j = [i[0], i[1], i[2]];
        j[axis] = dims[axis] - 1 - j[axis];
        v.get(&j)
    })
}

/// Inverse-mapped affine warp about the volume centre.
struct Affine {
    /// Inverse linear part: `Rᵀ / scale`.
    inv: [[f64; 3]; 3],
    centre: [f64; 3],
    shift: [f64; 3],
    identity: bool,
}

impl Affine {
    fn new(angles: [f64; 3], scale: f64, shift_frac: [f64; 3], dims: [usize; 3]) -> Self {
        let rot = |axis: usize, t: f64| {
            let (s, c) = t.sin_cos();
            let (a, b) = match axis {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let mut m = [[0.0; 3]; 3];
            for (i, row) in m.iter_mut().enumerate() {
                row[i] = 1.0;
            }
            m[a][a] = c;
            m[a][b] = -s;
            m[b][a] = s;
            m[b][b] = c;
            m
        };
        let mul = |x: [[f64; 3]; 3], y: [[f64; 3]; 3]| {
            let mut z = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    z[i][j] = (0..3).map(|k| x[i][k] * y[k][j]).sum();
                }
            }
            z
        };
        let r = mul(mul(rot(0, angles[0]), rot(1, angles[1])), rot(2, angles[2]));
        let mut inv = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                inv[i][j] = r[j][i] / scale;
            }
        }
        let shift = [0, 1, 2].map(|ax| shift_frac[ax] * dims[ax] as f64);
        let identity = angles.iter().all(|&a| a == 0.0)
            && scale == 1.0
            && shift.iter().all(|&t| t == 0.0);
        Self {
            inv,
            centre: dims.map(|n| (n as f64 - 1.0) / 2.0),
            shift,
            identity,
        }
    }

    fn is_identity(&self) -> bool {
        self.identity
    }

    fn apply(&self, v: &Tensor<f32>) -> Result<Tensor<f32>> {
        let dims = volume_dims(v)?;
        let lo = v.min_value().min(0.0);
        let hi = v.max_value().max(0.0);
        Tensor::from_fn(&dims, |i| {
            let q = [0, 1, 2].map(|ax| i[ax] as f64 - self.centre[ax] - self.shift[ax]);
            let src = [0, 1, 2].map(|r| {
                self.inv[r][0] * q[0] + self.inv[r][1] * q[1] + self.inv[r][2] * q[2]
                    + self.centre[r]
            });
            sample_trilinear_zero(v, dims, src).clamp(lo, hi)
        })
    }
}

/// Trilinear sample at a fractional position; taps outside the volume read 0.
fn sample_trilinear_zero(v: &Tensor<f32>, dims: [usize; 3], p: [f64; 3]) -> f32 {
    let base = p.map(f64::floor);
    let frac = [0, 1, 2].map(|ax| p[ax] - base[ax]);
    let mut acc = 0.0f64;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for ax in 0..3 {
            let hi = (corner >> (2 - ax)) & 1 == 1;
            w *= if hi { frac[ax] } else { 1.0 - frac[ax] };
            let x = base[ax] as i64 + hi as i64;
            if x < 0 || x >= dims[ax] as i64 {
                inside = false;
            } else {
                idx[ax] = x as usize;
            }
        }
        if inside && w != 0.0 {
            acc += w * v.get(&idx) as f64;
        }
    }
    acc as f32
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Separable Gaussian blur truncated at ±3σ with reflect padding.
///
/// Each tap is applied as a weighted deviation from the centre voxel, which
/// equals the plain weighted sum for a normalized kernel and leaves constant
/// regions bit-identical.
pub fn gaussian_blur(v: &Tensor<f32>, sigma: f64) -> Result<Tensor<f32>> {
    let dims = volume_dims(v)?;
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::config(format!("blur sigma must be > 0, got {sigma}")));
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let mut cur = v.clone();
    for axis in 0..3 {
        let src = cur.clone();
        cur = Tensor::from_fn(&dims, |i| {
            let centre = src.get(i) as f64;
            let mut j = [i[0], i[1], i[2]];
            let mut acc = 0.0;
            for (t, &w) in kernel.iter().enumerate() {
                j[axis] = reflect(i[axis] as isize + t as isize - radius, dims[axis]);
                acc += w * (src.get(&j) as f64 - centre);
            }
            (centre + acc) as f32
        })?;
    }
    Ok(cur)
}

fn swap_blocks(v: &mut Tensor<f32>, a: [usize; 3], b: [usize; 3], patch: [usize; 3]) {
    for x in 0..patch[0] {
        for y in 0..patch[1] {
            for z in 0..patch[2] {
                let ia = v.offset(&[a[0] + x, a[1] + y, a[2] + z]);
                let ib = v.offset(&[b[0] + x, b[1] + y, b[2] + z]);
                v.data_mut().swap(ia, ib);
            }
        }
    }
}

/// Random 3D crop at one of the listed sizes, resized to `crop.target_3d`.
///
/// A drawn size that does not fit falls back to the largest listed size that
/// does. If none fits, the volume is edge-padded up to the smallest listed
/// size, provided every axis is at least half that size; otherwise the volume
/// is rejected.
pub fn random_crop_3d(v: &Tensor<f32>, rng: &mut Stream, crop_spec: &CropSpec) -> Result<Tensor<f32>> {
    let dims = volume_dims(v)?;
    let sizes = &crop_spec.sizes_3d;
    if sizes.is_empty() {
        return Err(Error::config("no 3D crop sizes configured"));
    }
    let fits = |s: &[usize; 3]| s.iter().zip(&dims).all(|(a, b)| a <= b);
    let drawn = sizes[rng.random_range(0..sizes.len())];
    let (size, source) = if fits(&drawn) {
        (drawn, v.clone())
    } else if let Some(s) = sizes
        .iter()
        .filter(|s| fits(s))
        .max_by_key(|s| s.iter().product::<usize>())
    {
        (*s, v.clone())
    } else {
        let smallest = *sizes
            .iter()
            .min_by_key(|s| s.iter().product::<usize>())
            .expect("non-empty");
        if dims.iter().zip(&smallest).any(|(&d, &s)| 2 * d < s) {
            return Err(Error::data(format!(
                "volume {} too small for crop size {}",
                shape_str(&dims),
                shape_str(&smallest)
            )));
        }
        (smallest, pad_edge(v, &smallest)?)
    };
    let sdims = source.shape().to_vec();
    let origin: Vec<usize> = (0..3).map(|ax| rng.random_range(0..=sdims[ax] - size[ax])).collect();
    let patch = crop(&source, &origin, &size)?;
    resize_trilinear(&patch, crop_spec.target_3d)
}

/// Random 2D crop covering a uniformly drawn fraction of the image area
/// (aspect ratio kept), resized to `crop.target_2d`.
pub fn random_crop_resize_2d(
    img: &Tensor<f32>,
    rng: &mut Stream,
    crop_spec: &CropSpec,
) -> Result<Tensor<f32>> {
    img.expect_rank(2, "2D crop input")?;
    let (h, w) = (img.shape()[0], img.shape()[1]);
    if h < crop_spec.min_side_2d || w < crop_spec.min_side_2d {
        return Err(Error::data(format!(
            "image {h}×{w} smaller than the minimum {0}×{0}",
            crop_spec.min_side_2d
        )));
    }
    let [lo, hi] = crop_spec.area_fraction;
    let side = uniform(rng, lo, hi).sqrt();
    let ch = ((side * h as f64).round() as usize).clamp(1, h);
    let cw = ((side * w as f64).round() as usize).clamp(1, w);
    let oy = rng.random_range(0..=h - ch);
    let ox = rng.random_range(0..=w - cw);
    let patch = crop(img, &[oy, ox], &[ch, cw])?;
    resize_bilinear(&patch, crop_spec.target_2d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> Tensor<f32> {
        let n = (dims[0] * dims[1] * dims[2]) as f32;
        let mut k = 0.0;
        Tensor::from_fn(&dims, |_| {
            k += 1.0;
            (k * 0.618_034f32).fract() * 0.5 + (k / n) * 0.5
        })
        .unwrap()
    }

    fn only_local(ops: Vec<LocalOp>) -> AugmentSpec {
        AugmentSpec {
            seed: 3,
            global_ops: vec![],
            local_ops: ops,
            crop: CropSpec::default(),
        }
    }

    #[test]
    fn identity_recipes_are_exact() {
        let v = ramp([6, 5, 4]);
        let spec = AugmentSpec::identity(11);
        assert_eq!(augment_global(&v, &spec, 0).unwrap(), v);
        assert_eq!(augment_local(&v, &spec, 0).unwrap(), v);
    }

    #[test]
    fn flip_is_involution() {
        let v = ramp([4, 3, 5]);
        let spec = AugmentSpec {
            seed: 1,
            global_ops: vec![GlobalOp::Flip {
                probabilities: [0.0, 1.0, 0.0],
            }],
            local_ops: vec![],
            crop: CropSpec::default(),
        };
        let once = augment_global(&v, &spec, 9).unwrap();
        assert_ne!(once, v);
        assert_eq!(once.get(&[0, 0, 0]), v.get(&[0, 2, 0]));
        assert_eq!(augment_global(&once, &spec, 9).unwrap(), v);
    }

    #[test]
    fn deterministic_per_item() {
        let v = ramp([8, 8, 6]);
        let spec = AugmentSpec {
            local_ops: vec![
                LocalOp::Noise {
                    probability: 1.0,
                    std: 0.1,
                },
                LocalOp::Swap {
                    probability: 1.0,
                    patch: [2, 2, 2],
                    count: 3,
                },
            ],
            ..AugmentSpec::default()
        };
        let a = augment_global(&v, &spec, 5).unwrap();
        let b = augment_global(&v, &spec, 5).unwrap();
        assert_eq!(a, b);
        let la = augment_local(&v, &spec, 5).unwrap();
        assert_eq!(la, augment_local(&v, &spec, 5).unwrap());
        assert_ne!(la, augment_local(&v, &spec, 6).unwrap());
    }

    #[test]
    fn gamma_one_is_identity() {
        let v = ramp([3, 3, 3]);
        let spec = only_local(vec![LocalOp::Gamma {
            probability: 1.0,
            range: [1.0, 1.0],
        }]);
        assert_eq!(augment_local(&v, &spec, 0).unwrap(), v);
    }

    #[test]
    fn blur_keeps_constants() {
        let v = Tensor::full(&[5, 4, 3], 0.3f32).unwrap();
        let spec = only_local(vec![LocalOp::GaussianBlur {
            probability: 1.0,
            sigma: [0.5, 2.0],
        }]);
        assert_eq!(augment_local(&v, &spec, 2).unwrap(), v);
        assert_eq!(gaussian_blur(&v, 3.0).unwrap(), v);
    }

    #[test]
    fn blur_preserves_mass_on_symmetric_impulse() {
        let mut v = Tensor::zeros(&[9, 9, 9]).unwrap();
        v.set(&[4, 4, 4], 1.0);
        let b = gaussian_blur(&v, 0.8).unwrap();
        assert!((b.sum() - 1.0).abs() < 1e-5);
        assert!(b.get(&[4, 4, 4]) < 1.0);
        assert_eq!(b.get(&[3, 4, 4]), b.get(&[5, 4, 4]));
    }

    #[test]
    fn swap_preserves_multiset() {
        let v = ramp([6, 6, 4]);
        let spec = only_local(vec![LocalOp::Swap {
            probability: 1.0,
            patch: [3, 2, 2],
            count: 1,
        }]);
        let out = augment_local(&v, &spec, 4).unwrap();
        let mut a: Vec<u32> = v.data().iter().map(|x| x.to_bits()).collect();
        let mut b: Vec<u32> = out.data().iter().map(|x| x.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn swap_patch_must_be_smaller_than_volume() {
        let v = ramp([4, 4, 4]);
        let spec = only_local(vec![LocalOp::Swap {
            probability: 1.0,
            patch: [2, 4, 2],
            count: 1,
        }]);
        assert!(matches!(
            augment_local(&v, &spec, 0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = AugmentSpec::default();
        spec.global_ops = vec![GlobalOp::Flip {
            probabilities: [0.5, 1.5, 0.0],
        }];
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        let spec = only_local(vec![LocalOp::Gamma {
            probability: 1.0,
            range: [0.1, 1.0],
        }]);
        assert!(spec.validate().is_err());
        let spec = only_local(vec![LocalOp::GaussianBlur {
            probability: 1.0,
            sigma: [0.0, 1.0],
        }]);
        assert!(spec.validate().is_err());
        assert!(AugmentSpec::default().validate().is_ok());
    }

    #[test]
    fn affine_stays_in_range_and_moves_mass() {
        let v = ramp([10, 9, 8]);
        let spec = AugmentSpec {
            seed: 4,
            global_ops: vec![GlobalOp::Affine {
                probability: 1.0,
                max_rotation_deg: [30.0, 30.0, 30.0],
                max_scale: 0.2,
                max_translation: 0.1,
            }],
            local_ops: vec![],
            crop: CropSpec::default(),
        };
        let out = augment_global(&v, &spec, 1).unwrap();
        assert_eq!(out.shape(), v.shape());
        assert_ne!(out, v);
        assert!(out.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = AugmentSpec::default();
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"op\":\"gaussian_blur\""));
        let back: AugmentSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        let minimal: AugmentSpec = serde_json::from_str(r#"{"seed": 5}"#).unwrap();
        assert_eq!(minimal.global_ops, spec.global_ops);
        assert_eq!(minimal.crop, CropSpec::default());
        let off: AugmentSpec = serde_json::from_str(r#"{"local_ops": []}"#).unwrap();
        assert!(off.local_ops.is_empty());
        assert_eq!(off.seed, 0);
    }

    #[test]
    fn crop_3d_cases() {
        let crop_spec = CropSpec {
            sizes_3d: vec![[64, 64, 32]],
            ..CropSpec::default()
        };
        let v = ramp([64, 64, 32]);
        let mut rng = rng::stream(1, &[0]);
        assert_eq!(random_crop_3d(&v, &mut rng, &crop_spec).unwrap(), v);

        let c = Tensor::full(&[70, 100, 40], 0.4f32).unwrap();
        let mut rng = rng::stream(1, &[0]);
        let out = random_crop_3d(&c, &mut rng, &CropSpec::default()).unwrap();
        assert_eq!(out.shape(), &[64, 64, 32]);
        assert!(out.data().iter().all(|&x| x == 0.4));

        let big = ramp([128, 128, 64]);
        let a = random_crop_3d(&big, &mut rng::stream(9, &[3]), &CropSpec::default()).unwrap();
        let b = random_crop_3d(&big, &mut rng::stream(9, &[3]), &CropSpec::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn crop_3d_padding_policy() {
        let small = ramp([40, 64, 32]);
        let out = random_crop_3d(&small, &mut rng::stream(0, &[]), &CropSpec::default()).unwrap();
        assert_eq!(out.shape(), &[64, 64, 32]);
        let tiny = ramp([20, 64, 32]);
        assert!(matches!(
            random_crop_3d(&tiny, &mut rng::stream(0, &[]), &CropSpec::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn crop_2d_cases() {
        let pinned = CropSpec {
            area_fraction: [1.0, 1.0],
            ..CropSpec::default()
        };
        let img = Tensor::from_fn(&[224, 224], |i| ((i[0] * 3 + i[1]) % 17) as f32 / 17.0).unwrap();
        let out = random_crop_resize_2d(&img, &mut rng::stream(2, &[]), &pinned).unwrap();
        assert!(out.max_abs_diff(&img).unwrap() <= 1e-6);

        let c = Tensor::full(&[300, 250], 0.7f32).unwrap();
        let out = random_crop_resize_2d(&c, &mut rng::stream(2, &[]), &CropSpec::default()).unwrap();
        assert_eq!(out.shape(), &[224, 224]);
        assert!(out.data().iter().all(|&x| x == 0.7));

        let a = random_crop_resize_2d(&img, &mut rng::stream(5, &[1]), &CropSpec::default()).unwrap();
        let b = random_crop_resize_2d(&img, &mut rng::stream(5, &[1]), &CropSpec::default()).unwrap();
        assert_eq!(a, b);

        let small = Tensor::full(&[63, 200], 0.0f32).unwrap();
        assert!(matches!(
            random_crop_resize_2d(&small, &mut rng::stream(0, &[]), &CropSpec::default()),
            Err(Error::Data(_))
        ));
    }
}
