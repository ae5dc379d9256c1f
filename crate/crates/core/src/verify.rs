//! Built-in self-check suite.
//!
//! Every check compares a fast path against an independent reference: nested
//! loop convolutions, brute-force window enumeration, inner-product adjoint
//! identities, and central finite differences.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::im2col::{col2im, conv2d_gemm, im2col, ConvSpec};
use crate::p3d::{from_pseudo3d, to_pseudo3d, P3DConfig};
use crate::rng::{self, Stream};
use crate::ssl::{
    conv3d_backward, conv3d_forward, loss_feature_compare, loss_reconstruction, train_smoke,
    with_channel, MiniNet,
};
use crate::tensor::Tensor;

/// Step for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error bound for gradient checks.
pub const GRAD_TOL: f64 = 1e-5;
/// Absolute bound for oracle comparisons in `f64`.
pub const ORACLE_TOL: f64 = 1e-12;

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub cases: usize,
    /// Largest observed error (0 for exact checks).
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
}

pub fn random_tensor(rng: &mut Stream, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).expect("positive extents")
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or 0 when both are zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Nested-loop 2D cross-correlation with zero padding.
pub fn naive_conv2d(x: &Tensor, k: &Tensor, spec: &ConvSpec) -> Tensor {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = (h + 2 * spec.p - spec.k) / spec.s + 1;
    let wo = (w + 2 * spec.p - spec.k) / spec.s + 1;
    Tensor::from_fn(&[ho, wo, spec.m], |o| {
        let mut acc = 0.0;
        for a in 0..spec.k {
            for b in 0..spec.k {
                let i = (o[0] * spec.s + a) as isize - spec.p as isize;
                let j = (o[1] * spec.s + b) as isize - spec.p as isize;
                if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
                    continue;
                }
                for ch in 0..c {
                    acc += x.get(&[i as usize, j as usize, ch]) * k.get(&[o[2], a, b, ch]);
                }
            }
        }
        acc
    })
    .expect("valid shape")
}

/// Nested-loop 3D cross-correlation with zero padding.
pub fn naive_conv3d(x: &Tensor, k: &Tensor, spec: &ConvSpec) -> Tensor {
    let dims = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let c = x.shape()[3];
    let out = dims.map(|n| (n + 2 * spec.p - spec.k) / spec.s + 1);
    Tensor::from_fn(&[out[0], out[1], out[2], spec.m], |o| {
        let mut acc = 0.0;
        for a in 0..spec.k {
            for b in 0..spec.k {
                for e in 0..spec.k {
                    let src = [(o[0], a), (o[1], b), (o[2], e)]
                        .map(|(q, t)| (q * spec.s + t) as isize - spec.p as isize);
                    if (0..3).any(|ax| src[ax] < 0 || src[ax] >= dims[ax] as isize) {
                        continue;
                    }
                    for ch in 0..c {
                        acc += x.get(&[src[0] as usize, src[1] as usize, src[2] as usize, ch])
                            * k.get(&[o[3], a, b, e, ch]);
                    }
                }
            }
        }
        acc
    })
    .expect("valid shape")
}

/// Draws a random extent `n ≤ max` that `(k, s, p)` tiles exactly.
fn tiled_extent(rng: &mut Stream, k: usize, s: usize, p: usize, max: usize) -> Option<usize> {
    let lo = k.saturating_sub(2 * p).max(1);
    let options: Vec<usize> = (lo..=max).filter(|n| (n + 2 * p - k).is_multiple_of(s)).collect();
    if options.is_empty() {
        None
    } else {
        Some(options[rng.random_range(0..options.len())])
    }
}

struct Runner {
    outcomes: Vec<CheckOutcome>,
}

impl Runner {
    fn run(
        &mut self,
        name: &str,
        tolerance: f64,
        body: impl FnOnce() -> Result<(usize, f64)>,
    ) {
        let start = Instant::now();
        let (cases, worst, passed) = match body() {
            Ok((cases, worst)) => (cases, worst, worst <= tolerance),
            Err(e) => {
                log::error!("{name}: {e}");
                (0, f64::INFINITY, false)
            }
        };
        self.outcomes.push(CheckOutcome {
            name: name.to_string(),
            cases,
            worst,
            tolerance,
            passed,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
}

/// Runs every check with `instances` random cases each.
pub fn run_suite(instances: usize, seed: u64) -> Vec<CheckOutcome> {
    let mut r = Runner {
        outcomes: Vec::new(),
    };
    let n = instances.max(1);

    r.run("shape laws (im2col, pseudo-3D)", 0.0, || {
        let mut rng = rng::stream(seed, &[1]);
        let mut bad = 0usize;
        let mut cases = 0;
        while cases < n {
            let k = rng.random_range(1..=5);
            let s = rng.random_range(1..=3);
            let p = rng.random_range(0..=2);
            let c = rng.random_range(1..=3);
            let (Some(h), Some(w)) = (
                tiled_extent(&mut rng, k, s, p, 16),
                tiled_extent(&mut rng, k, s, p, 16),
            ) else {
                continue;
            };
            let spec = ConvSpec::new(k, c, 1, p, s)?;
            let cols = im2col(&Tensor::<f64>::zeros(&[h, w, c])?, &spec)?;
            let wp = ((h + 2 * p - k) / s + 1) * ((w + 2 * p - k) / s + 1);
            bad += (cols.shape() != [k * k * c, wp]) as usize;
            if let (Some(h2), Some(w2)) = (
                tiled_extent(&mut rng, k, s, 0, 16),
                tiled_extent(&mut rng, k, s, 0, 16),
            ) {
                let v = to_pseudo3d(&Tensor::<f64>::zeros(&[h2, w2])?, &P3DConfig::new(k, s)?)?;
                bad += (v.shape() != [(h2 - k) / s + 1, (w2 - k) / s + 1, k * k]) as usize;
            }
            cases += 1;
        }
        Ok((cases, bad as f64))
    });

    r.run("pseudo-3D equals single-channel im2col", 0.0, || {
        let mut rng = rng::stream(seed, &[2]);
        let mut worst = 0.0f64;
        let mut cases = 0;
        while cases < n {
            let k = rng.random_range(1..=5);
            let s = rng.random_range(1..=3);
            let (Some(h), Some(w)) = (
                tiled_extent(&mut rng, k, s, 0, 16),
                tiled_extent(&mut rng, k, s, 0, 16),
            ) else {
                continue;
            };
            let img = random_tensor(&mut rng, &[h, w]);
            let vol = to_pseudo3d(&img, &P3DConfig::new(k, s)?)?;
            let cols = im2col(&img.clone().reshape(&[h, w, 1])?, &ConvSpec::new(k, 1, 1, 0, s)?)?;
            let (ht, wt, d) = (vol.shape()[0], vol.shape()[1], vol.shape()[2]);
            let fibers = vol.reshape(&[ht * wt, d])?.transpose()?;
            let same = fibers
                .data()
                .iter()
                .zip(cols.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                worst = worst.max(1.0);
            }
            cases += 1;
        }
        Ok((cases, worst))
    });

    r.run("conv2d GEMM vs nested loops", ORACLE_TOL, || {
        let mut rng = rng::stream(seed, &[3]);
        let mut worst = 0.0f64;
        let mut cases = 0;
        while cases < n {
            let k = rng.random_range(1..=5);
            let s = rng.random_range(1..=2);
            let p = rng.random_range(0..=2);
            let c = rng.random_range(1..=4);
            let m = rng.random_range(1..=4);
            let (Some(h), Some(w)) = (
                tiled_extent(&mut rng, k, s, p, 16),
                tiled_extent(&mut rng, k, s, p, 16),
            ) else {
                continue;
            };
            let spec = ConvSpec::new(k, c, m, p, s)?;
            let x = random_tensor(&mut rng, &[h, w, c]);
            let kern = random_tensor(&mut rng, &[m, k, k, c]);
            let fast = conv2d_gemm(&x, &kern, &spec)?;
            worst = worst.max(fast.max_abs_diff(&naive_conv2d(&x, &kern, &spec))?);
            cases += 1;
        }
        Ok((cases, worst))
    });

    r.run("conv3d GEMM vs nested loops", ORACLE_TOL, || {
        let mut rng = rng::stream(seed, &[4]);
        let mut worst = 0.0f64;
        let mut cases = 0;
        while cases < n {
            let k = rng.random_range(1..=3);
            let s = rng.random_range(1..=2);
            let p = rng.random_range(0..=1);
            let c = rng.random_range(1..=2);
            let m = rng.random_range(1..=2);
            let dims: Vec<Option<usize>> =
                (0..3).map(|_| tiled_extent(&mut rng, k, s, p, 8)).collect();
            let Some(dims) = dims.into_iter().collect::<Option<Vec<_>>>() else {
                continue;
            };
            let spec = ConvSpec::new(k, c, m, p, s)?;
            let x = random_tensor(&mut rng, &[dims[0], dims[1], dims[2], c]);
            let kern = random_tensor(&mut rng, &[m, k, k, k, c]);
            let fast = conv3d_forward(&x, &kern, &spec)?;
            worst = worst.max(fast.max_abs_diff(&naive_conv3d(&x, &kern, &spec))?);
            cases += 1;
        }
        Ok((cases, worst))
    });

    r.run("pseudo-3D round trip", 0.0, || {
        let mut rng = rng::stream(seed, &[5]);
        let mut bad = 0usize;
        let mut cases = 0;
        while cases < n {
            let k = [1, 3, 5, 7][rng.random_range(0..4)];
            let s = rng.random_range(1..=3.min(k));
            let (Some(h), Some(w)) = (
                tiled_extent(&mut rng, k, s, 0, 24),
                tiled_extent(&mut rng, k, s, 0, 24),
            ) else {
                continue;
            };
            let cfg = P3DConfig::new(k, s)?;
            let img = random_tensor(&mut rng, &[h, w]);
            let back = from_pseudo3d(&to_pseudo3d(&img, &cfg)?, &cfg, h, w)?;
            bad += (back != img) as usize;
            cases += 1;
        }
        Ok((cases, bad as f64))
    });

    r.run("im2col/col2im adjointness", ORACLE_TOL, || {
        let mut rng = rng::stream(seed, &[6]);
        let mut worst = 0.0f64;
        let mut cases = 0;
        while cases < n {
            let k = rng.random_range(1..=4);
            let s = rng.random_range(1..=2);
            let p = rng.random_range(0..=1);
            let c = rng.random_range(1..=3);
            let (Some(h), Some(w)) = (
                tiled_extent(&mut rng, k, s, p, 10),
                tiled_extent(&mut rng, k, s, p, 10),
            ) else {
                continue;
            };
            let spec = ConvSpec::new(k, c, 1, p, s)?;
            let x = random_tensor(&mut rng, &[h, w, c]);
            let cols = im2col(&x, &spec)?;
            let y = random_tensor(&mut rng, cols.shape());
            let lhs = cols.dot(&y)?;
            let rhs = x.dot(&col2im(&y, h, w, &spec)?)?;
            worst = worst.max((lhs - rhs).abs());
            cases += 1;
        }
        Ok((cases, worst))
    });

    r.run("conv3d backward vs finite differences", GRAD_TOL, || {
        let mut rng = rng::stream(seed, &[7]);
        let mut worst = 0.0f64;
        for case in 0..n {
            let (p, s) = [(0, 1), (1, 1), (0, 2), (1, 2)][case % 4];
            let spec = ConvSpec::new(3, 1, 2, p, s)?;
            let x = random_tensor(&mut rng, &[5, 5, 5, 1]);
            let kern = random_tensor(&mut rng, &[2, 3, 3, 3, 1]);
            let out_shape = conv3d_forward(&x, &kern, &spec)?.shape().to_vec();
            let proj = random_tensor(&mut rng, &out_shape);
            let (gx, gk) = conv3d_backward(&proj, &x, &kern, &spec)?;
            let fx = numeric_gradient(x.data(), FD_STEP, |d| {
                let xt = Tensor::new(x.shape().to_vec(), d.to_vec()).expect("same shape");
                conv3d_forward(&xt, &kern, &spec)
                    .and_then(|y| y.dot(&proj))
                    .expect("valid conv")
            });
            let fk = numeric_gradient(kern.data(), FD_STEP, |d| {
                let kt = Tensor::new(kern.shape().to_vec(), d.to_vec()).expect("same shape");
                conv3d_forward(&x, &kt, &spec)
                    .and_then(|y| y.dot(&proj))
                    .expect("valid conv")
            });
            worst = worst
                .max(relative_error(gx.data(), &fx))
                .max(relative_error(gk.data(), &fk));
        }
        Ok((n, worst))
    });

    r.run("reconstruction loss vs finite differences", GRAD_TOL, || {
        let mut rng = rng::stream(seed, &[8]);
        let mut worst = 0.0f64;
        for _ in 0..n {
            let shape = [rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4)];
            let pred = random_tensor(&mut rng, &shape);
            let target = random_tensor(&mut rng, &shape);
            let (_, g) = loss_reconstruction(&pred, &target)?;
            let fd = numeric_gradient(pred.data(), FD_STEP, |d| {
                let p = Tensor::new(shape.to_vec(), d.to_vec()).expect("same shape");
                loss_reconstruction(&p, &target).expect("same shape").0
            });
            worst = worst.max(relative_error(g.data(), &fd));
        }
        Ok((n, worst))
    });

    r.run("feature-compare loss vs finite differences", GRAD_TOL, || {
        let mut rng = rng::stream(seed, &[9]);
        let mut worst = 0.0f64;
        for _ in 0..n {
            let len = rng.random_range(2..=16);
            let a: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fc = loss_feature_compare(&a, &b)?;
            let fa = numeric_gradient(&a, FD_STEP, |d| {
                loss_feature_compare(d, &b).expect("non-zero").loss
            });
            let fb = numeric_gradient(&b, FD_STEP, |d| {
                loss_feature_compare(&a, d).expect("non-zero").loss
            });
            worst = worst
                .max(relative_error(&fc.grad_a, &fa))
                .max(relative_error(&fc.grad_b, &fb));
        }
        Ok((n, worst))
    });

    r.run("training smoke decreases loss", 0.0, || {
        let (first, last) = smoke_run(seed)?;
        Ok((1, if last < first { 0.0 } else { last - first }))
    });

    r.outcomes
}

/// Synthetic view pair used by the training smoke check: two smooth
/// `8×8×8×1` volumes in `[0, 1]`, the second a shifted copy of the first.
pub fn synthetic_pair(seed: u64) -> Result<(Tensor, Tensor)> {
    let mut rng = rng::stream(seed, &[10]);
    let phase: f64 = rng.random_range(0.0..1.0);
    let a = Tensor::from_fn(&[8, 8, 8], |i| {
        let t = i[0] as f64 * 0.7 + i[1] as f64 * 0.4 + i[2] as f64 * 0.3 + phase;
        0.5 + 0.4 * t.sin()
    })?;
    let b = Tensor::from_fn(&[8, 8, 8], |i| {
        let t = i[0] as f64 * 0.7 + i[1] as f64 * 0.4 + i[2] as f64 * 0.3 + phase + 0.2;
        0.5 + 0.4 * t.sin()
    })?;
    Ok((with_channel(&a)?, with_channel(&b)?))
}

/// 50 gradient-descent steps on one synthetic pair; returns first and last loss.
pub fn smoke_run(seed: u64) -> Result<(f64, f64)> {
    let mut net = MiniNet::small(2, seed)?;
    let pair = synthetic_pair(seed)?;
    let traj = train_smoke(&mut net, &[pair], 50, 0.05)?;
    Ok((traj[0], *traj.last().expect("50 steps")))
}
