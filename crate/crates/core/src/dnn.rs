//! Minimal neural-network layer kernels with exact backward passes: fully
//! connected, 2-D same-padded convolution, batch normalization, 2×2
//! max-pooling, elementwise activations (ReLU and the sign pair), and a
//! terminal softmax.
//!
//! Forward and backward are pure functions of (spec, params, input, rng
//! state); batch-norm running statistics are updated in a separate explicit
//! step so the forward pass itself never mutates.

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::quant::{self, DnnQuantConfig};

/// Elementwise nonlinearity choices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActKind {
    Relu,
    /// Deterministic sign; backward uses the tanh surrogate derivative.
    Sign,
    /// Random rounding to ±1 during training, deterministic sign at
    /// inference; same surrogate backward.
    StochasticSign,
}

/// One layer of the network. Shapes are inferred from the input as the
/// layers compose; `fc` flattens image inputs implicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Fc {
        units: usize,
        #[serde(default)]
        has_bias: bool,
    },
    Conv {
        channels: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default)]
        has_bias: bool,
    },
    Batchnorm,
    Maxpool,
    Activation { act: ActKind },
    Softmax,
}

fn default_kernel() -> usize {
    3
}

/// Shape of one sample's tensor between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TensorShape {
    Flat { features: usize },
    Image { channels: usize, height: usize, width: usize },
}

impl TensorShape {
    pub fn element_count(&self) -> usize {
        match *self {
            TensorShape::Flat { features } => features,
            TensorShape::Image { channels, height, width } => channels * height * width,
        }
    }

    /// Units batch normalization acts over: features when flat, channels
    /// when spatial.
    pub fn unit_count(&self) -> usize {
        match *self {
            TensorShape::Flat { features } => features,
            TensorShape::Image { channels, .. } => channels,
        }
    }
}

/// A batch of activations: row-major `N x F`, or `N x C x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Flat(Array2<f64>),
    Image(Array4<f64>),
}

impl Tensor {
    pub fn batch_len(&self) -> usize {
        match self {
            Tensor::Flat(a) => a.dim().0,
            Tensor::Image(a) => a.dim().0,
        }
    }

    pub fn shape(&self) -> TensorShape {
        match self {
            Tensor::Flat(a) => TensorShape::Flat { features: a.dim().1 },
            Tensor::Image(a) => {
                let (_, c, h, w) = a.dim();
                TensorShape::Image { channels: c, height: h, width: w }
            }
        }
    }

    fn as_flat(&self) -> Array2<f64> {
        match self {
            Tensor::Flat(a) => a.clone(),
            Tensor::Image(a) => {
                let (n, c, h, w) = a.dim();
                Array2::from_shape_vec((n, c * h * w), a.iter().copied().collect())
                    .expect("row-major image flatten")
            }
        }
    }
}

/// Per-unit batch-norm state: learned affine (gamma, beta) and running
/// statistics for inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
}

impl BatchNormParams {
    pub fn new(units: usize) -> Self {
        BatchNormParams {
            gamma: vec![1.0; units],
            beta: vec![0.0; units],
            running_mean: vec![0.0; units],
            running_var: vec![1.0; units],
            eps: 1e-5,
        }
    }
}

/// Momentum of the running-statistics moving average.
const BN_MOMENTUM: f64 = 0.9;

/// Parameters owned by one layer; `None` for parameterless layers.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    None,
    /// `w` is `units x fan_in`; the optional bias is one value per unit.
    Fc { w: Array2<f64>, b: Option<Vec<f64>> },
    /// `w` is `out_channels x in_channels x k x k`.
    Conv { w: Array4<f64>, b: Option<Vec<f64>> },
    Batchnorm(BatchNormParams),
}

/// Train vs inference behaviour (batch vs running statistics, stochastic
/// vs deterministic sign).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Values captured by a forward pass that its backward pass needs.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Fc {
        input: Array2<f64>,
        w_used: Array2<f64>,
        image_input: Option<(usize, usize, usize)>,
        has_bias: bool,
    },
    Conv {
        input: Array4<f64>,
        w_used: Array4<f64>,
        has_bias: bool,
    },
    Batchnorm {
        x_hat: Tensor,
        inv_std: Vec<f64>,
        batch_mean: Vec<f64>,
        batch_var: Vec<f64>,
        gamma: Vec<f64>,
    },
    /// Inference-mode batchnorm: folded scale per unit; backward is refused.
    BatchnormInfer,
    Maxpool {
        in_shape: (usize, usize, usize, usize),
        argmax: Vec<usize>,
    },
    Activation { pre: Tensor, act: ActKind },
    Softmax { probs: Array2<f64> },
}

/// Gradients with respect to one layer's parameters.
#[derive(Debug, Clone)]
pub enum ParamGrads {
    None,
    Fc { w: Array2<f64>, b: Option<Vec<f64>> },
    Conv { w: Array4<f64>, b: Option<Vec<f64>> },
    Batchnorm { gamma: Vec<f64>, beta: Vec<f64> },
}

/// Output shape of `spec` applied to `input`, or an error when the shapes
/// do not compose.
pub fn output_shape(spec: &LayerSpec, input: TensorShape) -> Result<TensorShape> {
    match (spec, input) {
        (LayerSpec::Fc { units, .. }, _) => Ok(TensorShape::Flat { features: *units }),
        (LayerSpec::Conv { channels, kernel, .. }, TensorShape::Image { height, width, .. }) => {
            if kernel % 2 == 0 || *kernel == 0 {
                return Err(Error::config("convolution kernel must be odd"));
            }
            Ok(TensorShape::Image { channels: *channels, height, width })
        }
        (LayerSpec::Conv { .. }, TensorShape::Flat { .. }) => {
            Err(Error::config("convolution needs a spatial input"))
        }
        (LayerSpec::Maxpool, TensorShape::Image { channels, height, width }) => {
            if height < 2 || width < 2 {
                return Err(Error::config("max-pool input must be at least 2x2"));
            }
            Ok(TensorShape::Image { channels, height: height / 2, width: width / 2 })
        }
        (LayerSpec::Maxpool, TensorShape::Flat { .. }) => {
            Err(Error::config("max-pool needs a spatial input"))
        }
        (LayerSpec::Softmax, TensorShape::Flat { features }) => {
            Ok(TensorShape::Flat { features })
        }
        (LayerSpec::Softmax, TensorShape::Image { .. }) => {
            Err(Error::config("softmax needs a flat input"))
        }
        (LayerSpec::Batchnorm | LayerSpec::Activation { .. }, shape) => Ok(shape),
    }
}

/// Max-stabilized softmax of one logit vector.
pub fn softmax(a: &[f64]) -> Vec<f64> {
    let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = a.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn quantize_weights_fc(w: &Array2<f64>, cfg: Option<DnnQuantConfig>) -> Array2<f64> {
    match cfg {
        None => w.clone(),
        Some(q) => w.mapv(|v| quant::quantize_dnn(v, q)),
    }
}

fn quantize_weights_conv(w: &Array4<f64>, cfg: Option<DnnQuantConfig>) -> Array4<f64> {
    match cfg {
        None => w.clone(),
        Some(q) => w.mapv(|v| quant::quantize_dnn(v, q)),
    }
}

/// Copies a tensor into a `(rows, units)` matrix for per-unit statistics:
/// flat tensors as-is, images with the channel axis as the columns.
fn bn_matrix(t: &Tensor) -> Array2<f64> {
    match t {
        Tensor::Flat(a) => a.clone(),
        Tensor::Image(a) => {
            let (n, c, h, w) = a.dim();
            let mut m = Array2::zeros((n * h * w, c));
            for i in 0..n {
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            m[[(i * h + y) * w + x, ch]] = a[[i, ch, y, x]];
                        }
                    }
                }
            }
            m
        }
    }
}

/// Inverse of [`bn_matrix`]: scatters the matrix back into `like`'s shape.
fn bn_unmatrix(m: &Array2<f64>, like: &Tensor) -> Tensor {
    match like {
        Tensor::Flat(_) => Tensor::Flat(m.clone()),
        Tensor::Image(a) => {
            let (n, c, h, w) = a.dim();
            let mut out = Array4::zeros((n, c, h, w));
            for i in 0..n {
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            out[[i, ch, y, x]] = m[[(i * h + y) * w + x, ch]];
                        }
                    }
                }
            }
            Tensor::Image(out)
        }
    }
}

/// Applies one layer. Pure: batch-norm running statistics are *not* updated
/// here (see [`update_running_stats`]). `quant` quantizes fc/conv weights on
/// the way in; `rng` is required only by stochastic sign in training mode.
pub fn layer_forward(
    spec: &LayerSpec,
    params: &LayerParams,
    input: &Tensor,
    mode: Mode,
    quant_cfg: Option<DnnQuantConfig>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor, LayerCache)> {
    match (spec, params) {
        (LayerSpec::Fc { units, has_bias }, LayerParams::Fc { w, b }) => {
            let image_input = match input {
                Tensor::Image(a) => {
                    let (_, c, h, wd) = a.dim();
                    Some((c, h, wd))
                }
                Tensor::Flat(_) => None,
            };
            let x = input.as_flat();
            if w.dim() != (*units, x.dim().1) {
                return Err(Error::config(format!(
                    "fc weight shape {:?} does not match input width {}",
                    w.dim(),
                    x.dim().1
                )));
            }
            let w_used = quantize_weights_fc(w, quant_cfg);
            let mut out = x.dot(&w_used.t());
            if let Some(bias) = b {
                if !*has_bias {
                    return Err(Error::config("bias present on a bias-free fc layer"));
                }
                for mut row in out.rows_mut() {
                    for (o, bb) in row.iter_mut().zip(bias) {
                        *o += bb;
                    }
                }
            }
            Ok((
                Tensor::Flat(out),
                LayerCache::Fc { input: x, w_used, image_input, has_bias: *has_bias },
            ))
        }
        (LayerSpec::Conv { channels, kernel, has_bias }, LayerParams::Conv { w, b }) => {
            let a = match input {
                Tensor::Image(a) => a,
                Tensor::Flat(_) => return Err(Error::config("convolution needs a spatial input")),
            };
            let (n, in_c, h, wd) = a.dim();
            if w.dim() != (*channels, in_c, *kernel, *kernel) {
                return Err(Error::config(format!(
                    "conv weight shape {:?} does not match input channels {}",
                    w.dim(),
                    in_c
                )));
            }
            let w_used = quantize_weights_conv(w, quant_cfg);
            let pad = kernel / 2;
            let mut out = Array4::zeros((n, *channels, h, wd));
            for i in 0..n {
                for co in 0..*channels {
                    let bias = match (b, has_bias) {
                        (Some(bias), true) => bias[co],
                        (None, _) => 0.0,
                        (Some(_), false) => {
                            return Err(Error::config("bias present on a bias-free conv layer"))
                        }
                    };
                    for y in 0..h {
                        for x in 0..wd {
                            let mut acc = bias;
                            for ci in 0..in_c {
                                for dy in 0..*kernel {
                                    let iy = (y + dy).wrapping_sub(pad);
                                    if iy >= h {
                                        continue;
                                    }
                                    for dx in 0..*kernel {
                                        let ix = (x + dx).wrapping_sub(pad);
                                        if ix >= wd {
                                            continue;
                                        }
                                        acc += w_used[[co, ci, dy, dx]] * a[[i, ci, iy, ix]];
                                    }
                                }
                            }
                            out[[i, co, y, x]] = acc;
                        }
                    }
                }
            }
            Ok((
                Tensor::Image(out),
                LayerCache::Conv { input: a.clone(), w_used, has_bias: *has_bias },
            ))
        }
        (LayerSpec::Batchnorm, LayerParams::Batchnorm(bn)) => {
            let units = input.shape().unit_count();
            if bn.gamma.len() != units {
                return Err(Error::config(format!(
                    "batchnorm has {} units but the input carries {units}",
                    bn.gamma.len()
                )));
            }
            let m = bn_matrix(input);
            let rows = m.dim().0 as f64;
            match mode {
                Mode::Train => {
                    let mut mean = vec![0.0; units];
                    let mut var = vec![0.0; units];
                    for r in m.rows() {
                        for (u, &v) in r.iter().enumerate() {
                            mean[u] += v;
                        }
                    }
                    mean.iter_mut().for_each(|v| *v /= rows);
                    for r in m.rows() {
                        for (u, &v) in r.iter().enumerate() {
                            var[u] += (v - mean[u]) * (v - mean[u]);
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= rows);
                    let inv_std: Vec<f64> =
                        var.iter().map(|&v| 1.0 / (v + bn.eps).sqrt()).collect();
                    let mut x_hat = m;
                    for mut r in x_hat.rows_mut() {
                        for (u, v) in r.iter_mut().enumerate() {
                            *v = (*v - mean[u]) * inv_std[u];
                        }
                    }
                    let mut out = x_hat.clone();
                    for mut r in out.rows_mut() {
                        for (u, v) in r.iter_mut().enumerate() {
                            *v = bn.gamma[u] * *v + bn.beta[u];
                        }
                    }
                    Ok((
                        bn_unmatrix(&out, input),
                        LayerCache::Batchnorm {
                            x_hat: bn_unmatrix(&x_hat, input),
                            inv_std,
                            batch_mean: mean,
                            batch_var: var,
                            gamma: bn.gamma.clone(),
                        },
                    ))
                }
                Mode::Infer => {
                    let mut out = m;
                    for mut r in out.rows_mut() {
                        for (u, v) in r.iter_mut().enumerate() {
                            let x_hat =
                                (*v - bn.running_mean[u]) / (bn.running_var[u] + bn.eps).sqrt();
                            *v = bn.gamma[u] * x_hat + bn.beta[u];
                        }
                    }
                    Ok((bn_unmatrix(&out, input), LayerCache::BatchnormInfer))
                }
            }
        }
        (LayerSpec::Maxpool, LayerParams::None) => {
            let a = match input {
                Tensor::Image(a) => a,
                Tensor::Flat(_) => return Err(Error::config("max-pool needs a spatial input")),
            };
            let (n, c, h, w) = a.dim();
            let (oh, ow) = (h / 2, w / 2);
            if oh == 0 || ow == 0 {
                return Err(Error::config("max-pool input must be at least 2x2"));
            }
            let mut out = Array4::zeros((n, c, oh, ow));
            let mut argmax = Vec::with_capacity(n * c * oh * ow);
            for i in 0..n {
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = 0;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let (iy, ix) = (2 * y + dy, 2 * x + dx);
                                    let v = a[[i, ch, iy, ix]];
                                    if v > best {
                                        best = v;
                                        best_idx = ((i * c + ch) * h + iy) * w + ix;
                                    }
                                }
                            }
                            out[[i, ch, y, x]] = best;
                            argmax.push(best_idx);
                        }
                    }
                }
            }
            Ok((
                Tensor::Image(out),
                LayerCache::Maxpool { in_shape: (n, c, h, w), argmax },
            ))
        }
        (LayerSpec::Activation { act }, LayerParams::None) => {
            let apply = |src: &Tensor, f: &mut dyn FnMut(f64) -> f64| -> Tensor {
                match src {
                    Tensor::Flat(a) => Tensor::Flat(a.mapv(|v| f(v))),
                    Tensor::Image(a) => Tensor::Image(a.mapv(|v| f(v))),
                }
            };
            let out = match (act, mode) {
                (ActKind::Relu, _) => apply(input, &mut |v| v.max(0.0)),
                (ActKind::Sign, _) | (ActKind::StochasticSign, Mode::Infer) => {
                    apply(input, &mut quant::hard_sign)
                }
                (ActKind::StochasticSign, Mode::Train) => {
                    let rng = rng.ok_or_else(|| {
                        Error::config("stochastic sign needs an rng in training mode")
                    })?;
                    apply(input, &mut |v| quant::stochastic_sign(v, rng.random::<f64>()))
                }
            };
            Ok((out, LayerCache::Activation { pre: input.clone(), act: *act }))
        }
        (LayerSpec::Softmax, LayerParams::None) => {
            let x = match input {
                Tensor::Flat(a) => a,
                Tensor::Image(_) => return Err(Error::config("softmax needs a flat input")),
            };
            let mut probs = x.clone();
            for mut row in probs.rows_mut() {
                let p = softmax(row.as_slice().expect("contiguous row"));
                for (dst, src) in row.iter_mut().zip(p) {
                    *dst = src;
                }
            }
            Ok((
                Tensor::Flat(probs.clone()),
                LayerCache::Softmax { probs },
            ))
        }
        _ => Err(Error::config("layer parameters do not match the layer kind")),
    }
}

/// Backward over a whole forward pass: feeds `output_grad` through the layer
/// caches in reverse, returning the input gradient and one [`ParamGrads`]
/// per layer (aligned with the layer order).
pub fn network_backward(
    caches: &[LayerCache],
    output_grad: &Tensor,
) -> Result<(Tensor, Vec<ParamGrads>)> {
    let mut grads = vec![ParamGrads::None; caches.len()];
    let mut current = output_grad.clone();
    for (i, cache) in caches.iter().enumerate().rev() {
        let (dx, pg) = layer_backward(cache, &current)?;
        grads[i] = pg;
        current = dx;
    }
    Ok((current, grads))
}

/// Folds the batch statistics recorded in `cache` into the running averages:
/// `running ← 0.9 · running + 0.1 · batch`.
pub fn update_running_stats(params: &mut LayerParams, cache: &LayerCache) {
    if let (LayerParams::Batchnorm(bn), LayerCache::Batchnorm { batch_mean, batch_var, .. }) =
        (params, cache)
    {
        for u in 0..bn.running_mean.len() {
            bn.running_mean[u] = BN_MOMENTUM * bn.running_mean[u] + (1.0 - BN_MOMENTUM) * batch_mean[u];
            bn.running_var[u] = BN_MOMENTUM * bn.running_var[u] + (1.0 - BN_MOMENTUM) * batch_var[u];
        }
    }
}

/// Exact chain rule through one layer: gradient with respect to the input
/// plus this layer's parameter gradients. Sign activations use the tanh
/// surrogate derivative; max-pool routes to the recorded argmax.
pub fn layer_backward(cache: &LayerCache, upstream: &Tensor) -> Result<(Tensor, ParamGrads)> {
    match cache {
        LayerCache::Fc { input, w_used, image_input, has_bias } => {
            let g = match upstream {
                Tensor::Flat(g) => g,
                Tensor::Image(_) => return Err(Error::config("fc upstream gradient must be flat")),
            };
            let dw = g.t().dot(input);
            let db = has_bias.then(|| g.sum_axis(ndarray::Axis(0)).to_vec());
            let dx = g.dot(w_used);
            let input_grad = match image_input {
                None => Tensor::Flat(dx),
                Some((c, h, w)) => {
                    let n = dx.dim().0;
                    Tensor::Image(
                        Array4::from_shape_vec((n, *c, *h, *w), dx.iter().copied().collect())
                            .expect("row-major unflatten"),
                    )
                }
            };
            Ok((input_grad, ParamGrads::Fc { w: dw, b: db }))
        }
        LayerCache::Conv { input, w_used, has_bias } => {
            let g = match upstream {
                Tensor::Image(g) => g,
                Tensor::Flat(_) => {
                    return Err(Error::config("conv upstream gradient must be spatial"))
                }
            };
            let (n, out_c, h, wd) = g.dim();
            let (_, in_c, k, _) = w_used.dim();
            let pad = k / 2;
            let mut dw = Array4::zeros(w_used.dim());
            let mut dx = Array4::zeros(input.dim());
            let mut db = vec![0.0; out_c];
            for i in 0..n {
                for co in 0..out_c {
                    for y in 0..h {
                        for x in 0..wd {
                            let gv = g[[i, co, y, x]];
                            if gv == 0.0 {
                                continue;
                            }
                            db[co] += gv;
                            for ci in 0..in_c {
                                for dy in 0..k {
                                    let iy = (y + dy).wrapping_sub(pad);
                                    if iy >= h {
                                        continue;
                                    }
                                    for dxk in 0..k {
                                        let ix = (x + dxk).wrapping_sub(pad);
                                        if ix >= wd {
                                            continue;
                                        }
                                        dw[[co, ci, dy, dxk]] += gv * input[[i, ci, iy, ix]];
                                        dx[[i, ci, iy, ix]] += gv * w_used[[co, ci, dy, dxk]];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let b_grad = if *has_bias { Some(db) } else { None };
            Ok((Tensor::Image(dx), ParamGrads::Conv { w: dw, b: b_grad }))
        }
        LayerCache::Batchnorm { x_hat, inv_std, gamma, .. } => {
            let g = bn_matrix(upstream);
            let xh = bn_matrix(x_hat);
            let (rows, units) = g.dim();
            let m = rows as f64;
            let mut dgamma = vec![0.0; units];
            let mut dbeta = vec![0.0; units];
            for r in 0..rows {
                for u in 0..units {
                    dgamma[u] += g[[r, u]] * xh[[r, u]];
                    dbeta[u] += g[[r, u]];
                }
            }
            let mut dx = Array2::zeros((rows, units));
            for u in 0..units {
                let scale = gamma[u] * inv_std[u] / m;
                for r in 0..rows {
                    dx[[r, u]] = scale * (m * g[[r, u]] - dbeta[u] - xh[[r, u]] * dgamma[u]);
                }
            }
            Ok((
                bn_unmatrix(&dx, upstream),
                ParamGrads::Batchnorm { gamma: dgamma, beta: dbeta },
            ))
        }
        LayerCache::BatchnormInfer => Err(Error::config(
            "cannot backpropagate through an inference-mode batchnorm",
        )),
        LayerCache::Maxpool { in_shape, argmax } => {
            let g = match upstream {
                Tensor::Image(g) => g,
                Tensor::Flat(_) => {
                    return Err(Error::config("max-pool upstream gradient must be spatial"))
                }
            };
            let mut dx = Array4::zeros(*in_shape);
            let flat = dx.as_slice_mut().expect("standard layout");
            for (gv, &idx) in g.iter().zip(argmax) {
                flat[idx] += *gv;
            }
            Ok((Tensor::Image(dx), ParamGrads::None))
        }
        LayerCache::Activation { pre, act } => {
            let bwd = |a: f64, g: f64| -> f64 {
                match act {
                    ActKind::Relu => {
                        if a > 0.0 {
                            g
                        } else {
                            0.0
                        }
                    }
                    ActKind::Sign | ActKind::StochasticSign => quant::sign_backward(a, g),
                }
            };
            let out = match (pre, upstream) {
                (Tensor::Flat(a), Tensor::Flat(g)) => {
                    let mut dx = a.clone();
                    dx.zip_mut_with(g, |v, &gv| *v = bwd(*v, gv));
                    Tensor::Flat(dx)
                }
                (Tensor::Image(a), Tensor::Image(g)) => {
                    let mut dx = a.clone();
                    dx.zip_mut_with(g, |v, &gv| *v = bwd(*v, gv));
                    Tensor::Image(dx)
                }
                _ => return Err(Error::config("activation gradient shape mismatch")),
            };
            Ok((out, ParamGrads::None))
        }
        LayerCache::Softmax { probs } => {
            let g = match upstream {
                Tensor::Flat(g) => g,
                Tensor::Image(_) => {
                    return Err(Error::config("softmax upstream gradient must be flat"))
                }
            };
            let mut dx = Array2::zeros(g.dim());
            for ((mut drow, grow), prow) in dx.rows_mut().into_iter().zip(g.rows()).zip(probs.rows())
            {
                let dot: f64 = grow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
                for ((d, &gv), &p) in drow.iter_mut().zip(grow).zip(prow) {
                    *d = p * (gv - dot);
                }
            }
            Ok((Tensor::Flat(dx), ParamGrads::None))
        }
    }
}

/// A feed-forward network: layer specs, their parameters, the expected input
/// shape, and the weight grid when trained quantization-aware.
#[derive(Debug, Clone, PartialEq)]
pub struct DnnModel {
    pub input_shape: TensorShape,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<LayerParams>,
    pub quant: Option<DnnQuantConfig>,
}

impl DnnModel {
    /// Validates that the layers compose over `input_shape` and initializes
    /// weights with uniform Glorot draws from `rng`; batchnorm starts at the
    /// identity affine.
    pub fn new(
        input_shape: TensorShape,
        layers: Vec<LayerSpec>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("a network needs at least one layer"));
        }
        let mut shape = input_shape;
        let mut params = Vec::with_capacity(layers.len());
        for (i, spec) in layers.iter().enumerate() {
            if matches!(spec, LayerSpec::Softmax) && i + 1 != layers.len() {
                return Err(Error::config("softmax must be the terminal layer"));
            }
            let prev = shape;
            shape = output_shape(spec, prev)?;
            params.push(match spec {
                LayerSpec::Fc { units, has_bias } => {
                    let fan_in = prev.element_count();
                    let limit = (6.0 / (fan_in + units) as f64).sqrt();
                    let mut w = Array2::zeros((*units, fan_in));
                    for v in w.iter_mut() {
                        *v = rng.random_range(-limit..limit);
                    }
                    let b = has_bias.then(|| vec![0.0; *units]);
                    LayerParams::Fc { w, b }
                }
                LayerSpec::Conv { channels, kernel, has_bias } => {
                    let in_c = prev.unit_count();
                    // Fan counts follow receptive fields: in_c*k^2 in,
                    // channels*k^2 out.
                    let k2 = kernel * kernel;
                    let limit = (6.0 / ((in_c + channels) * k2) as f64).sqrt();
                    let mut w = Array4::zeros((*channels, in_c, *kernel, *kernel));
                    for v in w.iter_mut() {
                        *v = rng.random_range(-limit..limit);
                    }
                    let b = has_bias.then(|| vec![0.0; *channels]);
                    LayerParams::Conv { w, b }
                }
                LayerSpec::Batchnorm => {
                    LayerParams::Batchnorm(BatchNormParams::new(shape.unit_count()))
                }
                LayerSpec::Maxpool | LayerSpec::Activation { .. } | LayerSpec::Softmax => {
                    LayerParams::None
                }
            });
        }
        Ok(DnnModel { input_shape, layers, params, quant: None })
    }

    pub fn output_shape(&self) -> TensorShape {
        let mut shape = self.input_shape;
        for spec in &self.layers {
            shape = output_shape(spec, shape).expect("shapes validated at construction");
        }
        shape
    }

    /// Runs the whole stack. Caches are returned for a subsequent backward
    /// pass; inference callers can drop them.
    pub fn forward(
        &self,
        input: &Tensor,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor, Vec<LayerCache>)> {
        if input.shape() != self.input_shape {
            return Err(Error::config(format!(
                "input shape {:?} does not match the network's {:?}",
                input.shape(),
                self.input_shape
            )));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut current = input.clone();
        for (spec, params) in self.layers.iter().zip(&self.params) {
            let (out, cache) =
                layer_forward(spec, params, &current, mode, self.quant, rng.as_deref_mut())?;
            caches.push(cache);
            current = out;
        }
        Ok((current, caches))
    }

    /// Arg-max class per sample from an inference-mode pass.
    pub fn predict(&self, input: &Tensor) -> Result<Vec<usize>> {
        let (out, _) = self.forward(input, Mode::Infer, None)?;
        let probs = match out {
            Tensor::Flat(p) => p,
            Tensor::Image(_) => return Err(Error::config("network output is not flat")),
        };
        Ok(probs
            .rows()
            .into_iter()
            .map(|r| crate::math::argmax(r.as_slice().expect("contiguous row")))
            .collect())
    }

    pub fn error_rate(&self, input: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(input)?;
        if pred.len() != labels.len() {
            return Err(Error::data("label count does not match the batch"));
        }
        let wrong = pred.iter().zip(labels).filter(|(p, y)| p != y).count();
        Ok(wrong as f64 / labels.len() as f64)
    }

    /// Number of fc/conv weights (excluding biases).
    pub fn weight_count(&self) -> usize {
        self.params
            .iter()
            .map(|p| match p {
                LayerParams::Fc { w, .. } => w.len(),
                LayerParams::Conv { w, .. } => w.len(),
                _ => 0,
            })
            .sum()
    }

    /// Saves a JSON manifest at `json_path` and the weights as a
    /// little-endian binary blob next to it (same stem, `.bin`). Quantized
    /// weights are stored as grid level indices.
    pub fn save(&self, json_path: &Path) -> Result<()> {
        let blob_path = json_path.with_extension("bin");
        let mut blob: Vec<u8> = Vec::new();
        for params in &self.params {
            match params {
                LayerParams::None => {}
                LayerParams::Fc { w, b } => {
                    write_weights(&mut blob, w.iter(), self.quant);
                    if let Some(bias) = b {
                        write_f64s(&mut blob, bias.iter());
                    }
                }
                LayerParams::Conv { w, b } => {
                    write_weights(&mut blob, w.iter(), self.quant);
                    if let Some(bias) = b {
                        write_f64s(&mut blob, bias.iter());
                    }
                }
                LayerParams::Batchnorm(bn) => {
                    write_f64s(&mut blob, bn.gamma.iter());
                    write_f64s(&mut blob, bn.beta.iter());
                    write_f64s(&mut blob, bn.running_mean.iter());
                    write_f64s(&mut blob, bn.running_var.iter());
                }
            }
        }
        let manifest = Manifest {
            input_shape: self.input_shape,
            layers: self.layers.clone(),
            quant: self.quant,
            weights_file: blob_path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            blob_bytes: blob.len(),
        };
        std::fs::File::create(&blob_path)?.write_all(&blob)?;
        std::fs::write(json_path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads a model saved by [`DnnModel::save`]. A quantized model comes
    /// back with its weights reconstructed from the stored grid indices.
    pub fn load(json_path: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(json_path)?)?;
        let blob_path = json_path
            .parent()
            .unwrap_or_else(|| Path::new(""))
            .join(&manifest.weights_file);
        let mut blob = Vec::new();
        std::fs::File::open(&blob_path)?.read_to_end(&mut blob)?;
        if blob.len() != manifest.blob_bytes {
            return Err(Error::data(format!(
                "weight blob is {} bytes, manifest expects {}",
                blob.len(),
                manifest.blob_bytes
            )));
        }
        // Rebuild shapes with a throwaway rng, then overwrite every value
        // from the blob.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = DnnModel::new(manifest.input_shape, manifest.layers, &mut rng)?;
        model.quant = manifest.quant;
        let mut cursor = 0usize;
        for params in &mut model.params {
            match params {
                LayerParams::None => {}
                LayerParams::Fc { w, b } => {
                    read_weights(&blob, &mut cursor, w.iter_mut(), model.quant)?;
                    if let Some(bias) = b {
                        read_f64s(&blob, &mut cursor, bias.iter_mut())?;
                    }
                }
                LayerParams::Conv { w, b } => {
                    read_weights(&blob, &mut cursor, w.iter_mut(), model.quant)?;
                    if let Some(bias) = b {
                        read_f64s(&blob, &mut cursor, bias.iter_mut())?;
                    }
                }
                LayerParams::Batchnorm(bn) => {
                    read_f64s(&blob, &mut cursor, bn.gamma.iter_mut())?;
                    read_f64s(&blob, &mut cursor, bn.beta.iter_mut())?;
                    read_f64s(&blob, &mut cursor, bn.running_mean.iter_mut())?;
                    read_f64s(&blob, &mut cursor, bn.running_var.iter_mut())?;
                }
            }
        }
        if cursor != blob.len() {
            return Err(Error::data("weight blob has trailing bytes"));
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    input_shape: TensorShape,
    layers: Vec<LayerSpec>,
    quant: Option<DnnQuantConfig>,
    weights_file: String,
    blob_bytes: usize,
}

fn write_f64s<'a>(blob: &mut Vec<u8>, values: impl Iterator<Item = &'a f64>) {
    for v in values {
        blob.extend_from_slice(&v.to_le_bytes());
    }
}

/// Weights go out as raw f64 bits, or as `u32` grid level indices
/// `k = (n·q + n)/2` when a quantization grid is attached.
fn write_weights<'a>(
    blob: &mut Vec<u8>,
    values: impl Iterator<Item = &'a f64>,
    cfg: Option<DnnQuantConfig>,
) {
    match cfg {
        None => write_f64s(blob, values),
        Some(q) => {
            let n = q.levels();
            for v in values {
                let quantized = quant::quantize_dnn(*v, q);
                let k = ((quantized * n + n) / 2.0).round() as u32;
                blob.extend_from_slice(&k.to_le_bytes());
            }
        }
    }
}

fn read_f64s<'a>(
    blob: &[u8],
    cursor: &mut usize,
    dst: impl Iterator<Item = &'a mut f64>,
) -> Result<()> {
    for v in dst {
        let end = *cursor + 8;
        let bytes = blob
            .get(*cursor..end)
            .ok_or_else(|| Error::data("weight blob truncated"))?;
        *v = f64::from_le_bytes(bytes.try_into().unwrap());
        *cursor = end;
    }
    Ok(())
}

fn read_weights<'a>(
    blob: &[u8],
    cursor: &mut usize,
    dst: impl Iterator<Item = &'a mut f64>,
    cfg: Option<DnnQuantConfig>,
) -> Result<()> {
    match cfg {
        None => read_f64s(blob, cursor, dst),
        Some(q) => {
            let n = q.levels();
            for v in dst {
                let end = *cursor + 4;
                let bytes = blob
                    .get(*cursor..end)
                    .ok_or_else(|| Error::data("weight blob truncated"))?;
                let k = u32::from_le_bytes(bytes.try_into().unwrap()) as f64;
                if k > n {
                    return Err(Error::data("weight index above the grid range"));
                }
                *v = (2.0 * k - n) / n;
                *cursor = end;
            }
            Ok(())
        }
    }
}
