//! Desk-scale learning core: GEMM-lowered 3D convolution with its backward
//! pass, the pixel-reconstruction and siamese feature-comparison losses, a
//! small encoder-decoder, and a plain gradient-descent smoke loop.
//!
//! Volumes in this module are channel-last `H×W×D×C` tensors in `f64`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::im2col::{conv_backward_nd, conv_gemm_nd, ConvSpec};
use crate::rng::{self, stage};
use crate::tensor::{shape_str, Tensor};

/// 3D convolution via `k³·C`-row patch matrices and one GEMM.
/// `kernels` is `M×k×k×k×C`; output is `H_o×W_o×D_o×M`.
pub fn conv3d_forward(input: &Tensor, kernels: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    conv_gemm_nd(input, kernels, spec, 3)
}

/// Returns `(grad_input, grad_kernels)` of [`conv3d_forward`] for the
/// upstream gradient `grad_out`.
pub fn conv3d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    kernels: &Tensor,
    spec: &ConvSpec,
) -> Result<(Tensor, Tensor)> {
    conv_backward_nd(grad_out, input, kernels, spec, 3)
}

/// Mean squared error and its gradient `2(pred − target)/N`.
pub fn loss_reconstruction(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    let diff = pred.sub(target)?;
    let n = diff.len() as f64;
    let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff.scale(2.0 / n)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureLoss {
    pub loss: f64,
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `1 − cos(a, b)` with gradients for both arguments.
pub fn loss_feature_compare(a: &[f64], b: &[f64]) -> Result<FeatureLoss> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::dim(format!(
            "feature vectors must share a length ≥ 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate(
            "cosine comparison of a zero-norm feature vector".into(),
        ));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let cos = dot / (na * nb);
    // d cos / d a = b/(|a||b|) − cos·a/|a|²
    let grad = |x: &[f64], y: &[f64], nx: f64, ny: f64| -> Vec<f64> {
        x.iter()
            .zip(y)
            .map(|(&xi, &yi)| -(yi / (nx * ny) - cos * xi / (nx * nx)))
            .collect()
    };
    Ok(FeatureLoss {
        loss: 1.0 - cos,
        grad_a: grad(a, b, na, nb),
        grad_b: grad(b, a, nb, na),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv3d(ConvSpec),
    Relu,
    /// 2×2×2 average pooling.
    AvgPool2,
    /// 2×2×2 nearest-neighbour upsampling.
    Upsample2,
}

fn spatial(t: &Tensor) -> Result<[usize; 4]> {
    t.expect_rank(4, "network activation")?;
    let s = t.shape();
    Ok([s[0], s[1], s[2], s[3]])
}

fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let [h, w, d, c] = spatial(x)?;
    if h % 2 != 0 || w % 2 != 0 || d % 2 != 0 {
        return Err(Error::dim(format!(
            "2× pooling needs even extents, got {}",
            shape_str(x.shape())
        )));
    }
    Tensor::from_fn(&[h / 2, w / 2, d / 2, c], |i| {
        let mut acc = 0.0;
        for corner in 0..8 {
            let (a, b, e) = (corner >> 2, (corner >> 1) & 1, corner & 1);
            acc += x.get(&[2 * i[0] + a, 2 * i[1] + b, 2 * i[2] + e, i[3]]);
        }
        acc / 8.0
    })
}

fn avg_pool2_backward(g: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    Tensor::from_fn(input_shape, |i| g.get(&[i[0] / 2, i[1] / 2, i[2] / 2, i[3]]) / 8.0)
}

fn upsample2(x: &Tensor) -> Result<Tensor> {
    let [h, w, d, c] = spatial(x)?;
    Tensor::from_fn(&[2 * h, 2 * w, 2 * d, c], |i| {
        x.get(&[i[0] / 2, i[1] / 2, i[2] / 2, i[3]])
    })
}

fn upsample2_backward(g: &Tensor) -> Result<Tensor> {
    let [h, w, d, c] = spatial(g)?;
    Tensor::from_fn(&[h / 2, w / 2, d / 2, c], |i| {
        let mut acc = 0.0;
        for corner in 0..8 {
            let (a, b, e) = (corner >> 2, (corner >> 1) & 1, corner & 1);
            acc += g.get(&[2 * i[0] + a, 2 * i[1] + b, 2 * i[2] + e, i[3]]);
        }
        acc
    })
}

/// Small convolutional encoder-decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniNet {
    layers: Vec<Layer>,
    params: Vec<Tensor>,
    /// Activation index read out as the feature vector (`0` is the input).
    feature_at: usize,
}

/// Activations recorded during a forward pass; `acts[0]` is the input.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub acts: Vec<Tensor>,
    feature_at: usize,
}

impl ForwardPass {
    pub fn output(&self) -> &Tensor {
        self.acts.last().expect("input is always recorded")
    }

    pub fn features(&self) -> &[f64] {
        self.acts[self.feature_at].data()
    }
}

impl MiniNet {
    /// Builds a network from explicit layers; conv weights are drawn uniformly
    /// from `[-b, b]` with `b = 1/sqrt(fan_in)` using `seed`.
    pub fn new(layers: Vec<Layer>, feature_at: usize, seed: u64) -> Result<Self> {
        if feature_at > layers.len() {
            return Err(Error::config(format!(
                "feature index {feature_at} beyond {} layers",
                layers.len()
            )));
        }
        let mut params = Vec::new();
        let mut channels: Option<usize> = None;
        for (i, layer) in layers.iter().enumerate() {
            if let Layer::Conv3d(spec) = layer {
                spec.validate()?;
                if let Some(c) = channels {
                    if c != spec.c {
                        return Err(Error::dim(format!(
                            "layer {i} expects {} channels but receives {c}",
                            spec.c
                        )));
                    }
                }
                channels = Some(spec.m);
                let fan_in = spec.k.pow(3) * spec.c;
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut r = rng::stream(seed, &[stage::INIT, i as u64]);
                let shape = [spec.m, spec.k, spec.k, spec.k, spec.c];
                params.push(Tensor::from_fn(&shape, |_| r.random_range(-bound..=bound))?);
            }
        }
        Ok(Self {
            layers,
            params,
            feature_at,
        })
    }

    /// `conv(1→c) → relu → pool → [features] → upsample → conv(c→1)` with
    /// 3³ kernels and unit padding.
    pub fn small(channels: usize, seed: u64) -> Result<Self> {
        let enc = ConvSpec::new(3, 1, channels, 1, 1)?;
        let dec = ConvSpec::new(3, channels, 1, 1, 1)?;
        Self::new(
            vec![
                Layer::Conv3d(enc),
                Layer::Relu,
                Layer::AvgPool2,
                Layer::Upsample2,
                Layer::Conv3d(dec),
            ],
            3,
            seed,
        )
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Shape of every activation for an input of `input_shape`.
    pub fn activation_shapes(&self, input_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
        let x = Tensor::zeros(input_shape)?;
        Ok(self.forward(&x)?.acts.iter().map(|a| a.shape().to_vec()).collect())
    }

    pub fn forward(&self, input: &Tensor) -> Result<ForwardPass> {
        let mut acts = vec![input.clone()];
        let mut p = 0;
        for layer in &self.layers {
            let x = acts.last().expect("non-empty");
            let y = match layer {
                Layer::Conv3d(spec) => {
                    let y = conv3d_forward(x, &self.params[p], spec)?;
                    p += 1;
                    y
                }
                Layer::Relu => x.map(|v| v.max(0.0)),
                Layer::AvgPool2 => avg_pool2(x)?,
                Layer::Upsample2 => upsample2(x)?,
            };
            acts.push(y);
        }
        Ok(ForwardPass {
            acts,
            feature_at: self.feature_at,
        })
    }

    /// Parameter gradients given upstream gradients for the output and for
    /// the feature activation (either may be absent).
    pub fn backward(
        &self,
        pass: &ForwardPass,
        grad_output: Option<&Tensor>,
        grad_features: Option<&[f64]>,
    ) -> Result<Vec<Tensor>> {
        let n = self.layers.len();
        let mut g = match grad_output {
            Some(g) => {
                pass.output().check_same_shape(g)?;
                g.clone()
            }
            None => Tensor::zeros(pass.output().shape())?,
        };
        let mut grads: Vec<Option<Tensor>> = vec![None; self.params.len()];
        let mut p = self.params.len();
        for i in (0..n).rev() {
            if i + 1 == self.feature_at {
                if let Some(gf) = grad_features {
                    let gf = Tensor::new(g.shape().to_vec(), gf.to_vec())?;
                    g = g.add(&gf)?;
                }
            }
            let x = &pass.acts[i];
            g = match self.layers[i] {
                Layer::Conv3d(spec) => {
                    p -= 1;
                    let (gi, gk) = conv3d_backward(&g, x, &self.params[p], &spec)?;
                    grads[p] = Some(gk);
                    gi
                }
                Layer::Relu => x.zip_with(&g, |xv, gv| if xv > 0.0 { gv } else { 0.0 })?,
                Layer::AvgPool2 => avg_pool2_backward(&g, x.shape())?,
                Layer::Upsample2 => upsample2_backward(&g)?,
            };
        }
        Ok(grads.into_iter().map(|g| g.expect("every conv visited")).collect())
    }
}

/// Adds a trailing unit channel axis to an `H×W×D` volume.
pub fn with_channel(v: &Tensor) -> Result<Tensor> {
    let mut shape = v.shape().to_vec();
    shape.push(1);
    v.clone().reshape(&shape)
}

/// Combined loss of one view pair and its parameter gradients.
///
/// The network reconstructs the second view from the first, and the feature
/// activations of both views are compared by cosine. The two terms are
/// weighted equally.
pub fn pair_loss(net: &MiniNet, a: &Tensor, b: &Tensor) -> Result<(f64, Vec<Tensor>)> {
    let pa = net.forward(a)?;
    let pb = net.forward(b)?;
    let target = if pa.output().shape() == b.shape() {
        b.clone()
    } else {
        return Err(Error::dim(format!(
            "network output {} does not match view {}",
            shape_str(pa.output().shape()),
            shape_str(b.shape())
        )));
    };
    let (rec, grad_rec) = loss_reconstruction(pa.output(), &target)?;
    let fc = loss_feature_compare(pa.features(), pb.features())?;
    let ga = net.backward(&pa, Some(&grad_rec), Some(&fc.grad_a))?;
    let gb = net.backward(&pb, None, Some(&fc.grad_b))?;
    let grads = ga
        .into_iter()
        .zip(gb)
        .map(|(x, y)| x.add(&y))
        .collect::<Result<Vec<_>>>()?;
    Ok((rec + fc.loss, grads))
}

/// Plain gradient descent over view pairs (each `H×W×D×1`).
///
/// Returns the mean combined loss observed at each step before that step's
/// update.
pub fn train_smoke(
    net: &mut MiniNet,
    pairs: &[(Tensor, Tensor)],
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::config("training needs at least one view pair"));
    }
    let mut trajectory = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut total = 0.0;
        let mut acc: Option<Vec<Tensor>> = None;
        for (a, b) in pairs {
            let (loss, grads) = pair_loss(net, a, b)?;
            total += loss;
            acc = Some(match acc {
                None => grads,
                Some(prev) => prev
                    .iter()
                    .zip(&grads)
                    .map(|(x, y)| x.add(y))
                    .collect::<Result<_>>()?,
            });
        }
        let n = pairs.len() as f64;
        let loss = total / n;
        if !loss.is_finite() {
            return Err(Error::Training { step, loss });
        }
        trajectory.push(loss);
        for (param, grad) in net.params_mut().iter_mut().zip(acc.expect("non-empty")) {
            for (w, g) in param.data_mut().iter_mut().zip(grad.data()) {
                *w -= lr * g / n;
            }
        }
    }
    Ok(trajectory)
}
