//! Micro-benchmarks for the lowering paths.
//!
//! Each case first cross-checks its outputs against a reference and only then
//! times the operations. A failed cross-check aborts the whole run.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::im2col::{conv2d_direct, conv2d_gemm, im2col, ConvSpec};
use crate::p3d::{to_pseudo3d, P3DConfig};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BenchCase {
    /// `H×W×C` input convolved with `M` kernels of side `k` (stride 1,
    /// padding `k/2`).
    Conv {
        h: usize,
        w: usize,
        c: usize,
        m: usize,
        k: usize,
    },
    /// Pseudo-3D transform of an `H×W` image.
    Pseudo3d { h: usize, w: usize, k: usize, s: usize },
}

impl BenchCase {
    pub fn default_set() -> Vec<Self> {
        vec![
            BenchCase::Conv {
                h: 64,
                w: 64,
                c: 16,
                m: 16,
                k: 3,
            },
            BenchCase::Pseudo3d {
                h: 224,
                w: 224,
                k: 5,
                s: 1,
            },
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub op: String,
    pub shape: Vec<usize>,
    pub config: String,
    pub repetitions: usize,
    pub median_ns: u128,
    pub min_ns: u128,
    /// Largest deviation found by the pre-timing cross-check.
    pub check_max_abs_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub threads: usize,
    pub entries: Vec<BenchEntry>,
}

fn time<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<(u128, u128)> {
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        std::hint::black_box(f()?);
        samples.push(start.elapsed().as_nanos());
    }
    samples.sort_unstable();
    Ok((samples[samples.len() / 2], samples[0]))
}

fn random(shape: &[usize], seed: u64) -> Result<Tensor> {
    let mut r = rng::stream(seed, &[]);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Checks and times every case; returns one entry per timed operation.
pub fn run_bench(cases: &[BenchCase], repetitions: usize, seed: u64) -> Result<BenchReport> {
    let mut entries = Vec::new();
    for (i, case) in cases.iter().enumerate() {
        let seed = seed.wrapping_add(i as u64);
        match *case {
            BenchCase::Conv { h, w, c, m, k } => {
                let spec = ConvSpec::new(k, c, m, k / 2, 1)?;
                let x = random(&[h, w, c], seed)?;
                let kern = random(&[m, k, k, c], seed ^ 0x5a5a)?;
                let fast = conv2d_gemm(&x, &kern, &spec)?;
                let slow = conv2d_direct(&x, &kern, &spec)?;
                let diff = fast.max_abs_diff(&slow)?;
                if diff > 1e-12 {
                    return Err(Error::Check(format!(
                        "conv {h}×{w}×{c}, M={m}, k={k}: GEMM and direct differ by {diff:e}"
                    )));
                }
                let config = format!("k={k} M={m} P={} s=1", k / 2);
                let (med, min) = time(repetitions, || conv2d_gemm(&x, &kern, &spec))?;
                entries.push(BenchEntry {
                    op: "conv2d_gemm".into(),
                    shape: vec![h, w, c],
                    config: config.clone(),
                    repetitions,
                    median_ns: med,
                    min_ns: min,
                    check_max_abs_diff: diff,
                });
                let (med, min) = time(repetitions, || conv2d_direct(&x, &kern, &spec))?;
                entries.push(BenchEntry {
                    op: "conv2d_direct".into(),
                    shape: vec![h, w, c],
                    config,
                    repetitions,
                    median_ns: med,
                    min_ns: min,
                    check_max_abs_diff: diff,
                });
            }
            BenchCase::Pseudo3d { h, w, k, s } => {
                let cfg = P3DConfig::new(k, s)?;
                let img = random(&[h, w], seed)?;
                let vol = to_pseudo3d(&img, &cfg)?;
                let cols = im2col(&img.clone().reshape(&[h, w, 1])?, &ConvSpec::new(k, 1, 1, 0, s)?)?;
                let (ht, wt, d) = (vol.shape()[0], vol.shape()[1], vol.shape()[2]);
                let fibers = vol.reshape(&[ht * wt, d])?.transpose()?;
                let diff = fibers.max_abs_diff(&cols)?;
                if diff != 0.0 {
                    return Err(Error::Check(format!(
                        "pseudo-3D {h}×{w}, k={k}, s={s}: differs from im2col by {diff:e}"
                    )));
                }
                let (med, min) = time(repetitions, || to_pseudo3d(&img, &cfg))?;
                entries.push(BenchEntry {
                    op: "to_pseudo3d".into(),
                    shape: vec![h, w],
                    config: format!("k={k} s={s}"),
                    repetitions,
                    median_ns: med,
                    min_ns: min,
                    check_max_abs_diff: diff,
                });
            }
        }
    }
    Ok(BenchReport {
        threads: rayon::current_num_threads(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_case_gives_one_entry() {
        let r = run_bench(&[BenchCase::Pseudo3d { h: 6, w: 6, k: 3, s: 1 }], 1, 0).unwrap();
        assert_eq!(r.entries.len(), 1);
        assert_eq!(r.entries[0].repetitions, 1);
    }

    #[test]
    fn conv_case_reports_both_paths() {
        let r = run_bench(
            &[BenchCase::Conv {
                h: 12,
                w: 12,
                c: 2,
                m: 3,
                k: 3,
            }],
            2,
            0,
        )
        .unwrap();
        let ops: Vec<&str> = r.entries.iter().map(|e| e.op.as_str()).collect();
        assert_eq!(ops, ["conv2d_gemm", "conv2d_direct"]);
        assert!(r.entries[0].check_max_abs_diff <= 1e-12);
    }

    #[test]
    fn invalid_case_is_error() {
        assert!(run_bench(&[BenchCase::Pseudo3d { h: 6, w: 6, k: 3, s: 2 }], 1, 0).is_err());
    }
}
