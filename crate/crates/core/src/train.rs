//! Losses, the Adam optimizer with exponential learning-rate decay, and the
//! quantization-aware training loops.
//!
//! The classifier trainer keeps real-valued unnormalized log-probabilities ρ
//! and, on every forward pass, normalizes them to θ, optionally quantizes to
//! θ_q, and evaluates the loss on the quantized tables. The backward pass
//! treats the quantizer as the identity (straight-through) and updates ρ.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DiscreteDataset, RawDataset};
use crate::dnn::{
    network_backward, update_running_stats, DnnModel, LayerParams, LayerSpec, Mode, ParamGrads,
    Tensor, TensorShape,
};
use crate::error::{Error, Result};
use crate::math::{logsumexp_skip, sigmoid, softplus};
use crate::model::{BncModel, Cpt, TanStructure};
use crate::quant::{BnQuantConfig, DnnQuantConfig};

/// Weighting of the margin term inside the hybrid loss, plus the margin's own
/// target `gamma_hyb` and sharpness `eta_hyb`. `lambda_hyb = 0` recovers the
/// pure negative log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HybridConfig {
    pub lambda_hyb: f64,
    pub gamma_hyb: f64,
    pub eta_hyb: f64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        HybridConfig {
            lambda_hyb: 0.0,
            gamma_hyb: 1.0,
            eta_hyb: 10.0,
        }
    }
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_hyb >= 0.0 && self.lambda_hyb.is_finite()) {
            return Err(Error::config("lambda_hyb must be finite and >= 0"));
        }
        if !(self.gamma_hyb > 0.0 && self.gamma_hyb.is_finite()) {
            return Err(Error::config("gamma_hyb must be finite and > 0"));
        }
        if !(self.eta_hyb > 0.0 && self.eta_hyb.is_finite()) {
            return Err(Error::config("eta_hyb must be finite and > 0"));
        }
        Ok(())
    }
}

/// Optimizer settings. `decay_factor` is the total learning-rate decay over
/// the whole run: the rate at epoch `e` is `lr0 * decay_factor^(e/epochs)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr0: 3e-2,
            epochs: 500,
            batch_size: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_factor: 1e-3,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("lr0 must be finite and >= 0"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must be in [0, 1)")));
            }
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return Err(Error::config("decay_factor must be finite and > 0"));
        }
        Ok(())
    }
}

/// Learning rate at the start of `epoch`: exponential interpolation from
/// `lr0` down to `lr0 * decay_factor` at the final epoch.
pub fn lr_schedule(epoch: usize, cfg: &OptimizerConfig) -> f64 {
    cfg.lr0 * cfg.decay_factor.powf(epoch as f64 / cfg.epochs as f64)
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update in place:
/// `m ← β1 m + (1-β1) g`, `v ← β2 v + (1-β2) g²`,
/// `param ← param - lr · m̂ / (√v̂ + ε)`.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &OptimizerConfig,
    lr: f64,
) {
    assert_eq!(params.len(), grads.len(), "gradient shape mismatch");
    assert_eq!(params.len(), state.m.len(), "state shape mismatch");
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_err: f64,
    /// NaN when no test set was supplied.
    pub test_err: f64,
}

/// Loss/error trajectory of one training run; one entry per epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn final_test_err(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.test_err)
    }

    pub fn final_train_err(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.train_err)
    }

    /// Writes `epoch, lr, train_loss, train_err, test_err` rows; a missing
    /// test set leaves that field empty.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "lr", "train_loss", "train_err", "test_err"])?;
        for e in &self.epochs {
            let test = if e.test_err.is_nan() {
                String::new()
            } else {
                format!("{}", e.test_err)
            };
            w.write_record([
                e.epoch.to_string(),
                format!("{}", e.lr),
                format!("{}", e.train_loss),
                format!("{}", e.train_err),
                test,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean negative log-joint of the observed (sample, label) pairs. With
/// normalized tables this is the generative negative log-likelihood; with
/// quantized tables it is the same accumulation over the quantized entries.
pub fn nll_loss(model: &BncModel, data: &DiscreteDataset) -> Result<f64> {
    let mut total = 0.0;
    for n in 0..data.len() {
        let lj = model.log_joint(data.row(n))?;
        total -= lj[data.labels[n]];
    }
    Ok(total / data.len() as f64)
}

/// Smoothed hinge on the log-joint margin: per sample,
/// `softplus(eta · (gamma - m)) / eta` with
/// `m = lj[label] - logsumexp over the competing classes`.
pub fn margin_loss(model: &BncModel, data: &DiscreteDataset, gamma: f64, eta: f64) -> Result<f64> {
    if !(gamma > 0.0 && eta > 0.0) {
        return Err(Error::config("margin loss needs gamma > 0 and eta > 0"));
    }
    let mut total = 0.0;
    for n in 0..data.len() {
        let lj = model.log_joint(data.row(n))?;
        let y = data.labels[n];
        let m = lj[y] - logsumexp_skip(&lj, y);
        total += softplus(eta * (gamma - m)) / eta;
    }
    Ok(total / data.len() as f64)
}

/// `nll + lambda_hyb * margin`.
pub fn hybrid_loss(model: &BncModel, data: &DiscreteDataset, cfg: &HybridConfig) -> Result<f64> {
    cfg.validate()?;
    let nll = nll_loss(model, data)?;
    if cfg.lambda_hyb == 0.0 {
        return Ok(nll);
    }
    Ok(nll + cfg.lambda_hyb * margin_loss(model, data, cfg.gamma_hyb, cfg.eta_hyb)?)
}

/// Mean `-log p[label]` over rows of a row-major `N x C` probability matrix
/// (softmax output).
pub fn cross_entropy_loss(probs: &[f64], num_classes: usize, labels: &[usize]) -> f64 {
    let n = labels.len();
    assert_eq!(probs.len(), n * num_classes, "probability matrix shape mismatch");
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        total -= probs[i * num_classes + y].ln();
    }
    total / n as f64
}

/// Gradient buffers shaped like a model's parameter tables.
#[derive(Debug, Clone)]
pub struct BncGrads {
    pub prior: Vec<f64>,
    pub cpts: Vec<Vec<f64>>,
}

impl BncGrads {
    pub fn zeros_like(model: &BncModel) -> Self {
        BncGrads {
            prior: vec![0.0; model.class_prior.len()],
            cpts: model.cpts.iter().map(|c| vec![0.0; c.len()]).collect(),
        }
    }

    fn zero(&mut self) {
        self.prior.iter_mut().for_each(|g| *g = 0.0);
        for c in &mut self.cpts {
            c.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

/// Per-sample hybrid loss and its gradient with respect to the per-class
/// log-joints, both scaled by `inv_b`. Overwrites `dlj`.
pub(crate) fn hybrid_sample_grad(
    lj: &[f64],
    y: usize,
    hyb: &HybridConfig,
    inv_b: f64,
    dlj: &mut [f64],
) -> f64 {
    dlj.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = -lj[y] * inv_b;
    dlj[y] -= inv_b;

    if hyb.lambda_hyb > 0.0 {
        let lse = logsumexp_skip(lj, y);
        let m = lj[y] - lse;
        let z = hyb.eta_hyb * (hyb.gamma_hyb - m);
        loss += hyb.lambda_hyb * softplus(z) / hyb.eta_hyb * inv_b;
        if lse.is_finite() {
            let sz = sigmoid(z);
            dlj[y] -= hyb.lambda_hyb * sz * inv_b;
            for c in 0..lj.len() {
                if c != y {
                    let p = (lj[c] - lse).exp();
                    dlj[c] += hyb.lambda_hyb * sz * p * inv_b;
                }
            }
        }
    }
    loss
}

/// Hybrid loss over the given rows plus its gradient with respect to ρ.
///
/// The forward pass reads the model's effective tables (quantized when
/// present). Table gradients pass through the quantizer unchanged and are then
/// pulled through the log-softmax normalization, whose Jacobian uses the
/// normalized θ — the straight-through rule.
pub fn bnc_loss_and_grads(
    model: &BncModel,
    data: &DiscreteDataset,
    rows: &[usize],
    hyb: &HybridConfig,
    grads: &mut BncGrads,
) -> Result<f64> {
    grads.zero();
    let c_n = model.num_classes();
    let inv_b = 1.0 / rows.len() as f64;
    let mut loss = 0.0;
    let mut dlj = vec![0.0; c_n];

    for &n in rows {
        let row = data.row(n);
        let y = data.labels[n];
        let lj = model.log_joint(row)?;
        loss += hybrid_sample_grad(&lj, y, hyb, inv_b, &mut dlj);

        for (c, &g) in dlj.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.prior[c] += g;
            for (i, cpt) in model.cpts.iter().enumerate() {
                let pv = model.structure.parents[i].map_or(0, |j| row[j]);
                grads.cpts[i][cpt.idx(row[i], c, pv)] += g;
            }
        }
    }

    // Pull through normalization: for each configuration,
    // g_rho = g_theta - exp(theta) * sum(g_theta).
    through_normalization(&model.class_prior, &mut grads.prior);
    for (cpt, g) in model.cpts.iter().zip(&mut grads.cpts) {
        through_normalization(cpt, g);
    }
    Ok(loss)
}

pub(crate) fn through_normalization(cpt: &Cpt, grads: &mut [f64]) {
    let k = cpt.child_card;
    for cfg in 0..cpt.len() / k {
        let slice = &mut grads[cfg * k..(cfg + 1) * k];
        let total: f64 = slice.iter().sum();
        for (v, g) in slice.iter_mut().enumerate() {
            *g -= cpt.theta[cfg * k + v].exp() * total;
        }
    }
}

fn refresh_tables(model: &mut BncModel, quant: Option<BnQuantConfig>) {
    model.class_prior.normalize();
    for cpt in &mut model.cpts {
        cpt.normalize();
    }
    if let Some(cfg) = quant {
        model.class_prior.quantize(cfg);
        for cpt in &mut model.cpts {
            cpt.quantize(cfg);
        }
    }
}

/// Initial values for ρ when resuming or fine-tuning; shapes must match the
/// structure being trained.
pub struct WarmStart {
    pub prior_rho: Vec<f64>,
    pub cpt_rhos: Vec<Vec<f64>>,
}

/// Trains a classifier with the given structure. Fresh runs draw
/// ρ ~ Unif([-0.1, 0.1]); `warm` overrides that for fine-tuning. The returned
/// model carries quantized tables when `quant` is set.
pub fn train_bnc(
    train: &DiscreteDataset,
    test: Option<&DiscreteDataset>,
    structure: TanStructure,
    quant: Option<BnQuantConfig>,
    hyb: &HybridConfig,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<(BncModel, TrainHistory)> {
    train_bnc_warm(train, test, structure, quant, hyb, opt, seed, None)
}

#[allow(clippy::too_many_arguments)]
pub fn train_bnc_warm(
    train: &DiscreteDataset,
    test: Option<&DiscreteDataset>,
    structure: TanStructure,
    quant: Option<BnQuantConfig>,
    hyb: &HybridConfig,
    opt: &OptimizerConfig,
    seed: u64,
    warm: Option<WarmStart>,
) -> Result<(BncModel, TrainHistory)> {
    hyb.validate()?;
    opt.validate()?;
    if train.is_empty() {
        return Err(Error::data("cannot train on an empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = BncModel::uniform(&train.cardinalities, train.num_classes, structure)?;

    match warm {
        Some(w) => {
            if w.prior_rho.len() != model.class_prior.len()
                || w.cpt_rhos.len() != model.cpts.len()
                || w.cpt_rhos
                    .iter()
                    .zip(&model.cpts)
                    .any(|(r, c)| r.len() != c.len())
            {
                return Err(Error::config("warm start shapes do not match the structure"));
            }
            model.class_prior.rho = w.prior_rho;
            for (cpt, rho) in model.cpts.iter_mut().zip(w.cpt_rhos) {
                cpt.rho = rho;
            }
        }
        None => {
            for r in &mut model.class_prior.rho {
                *r = rng.random_range(-0.1..0.1);
            }
            for cpt in &mut model.cpts {
                for r in &mut cpt.rho {
                    *r = rng.random_range(-0.1..0.1);
                }
            }
        }
    }
    refresh_tables(&mut model, quant);

    let mut prior_state = AdamState::new(model.class_prior.len());
    let mut cpt_states: Vec<AdamState> =
        model.cpts.iter().map(|c| AdamState::new(c.len())).collect();
    let mut grads = BncGrads::zeros_like(&model);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory::default();

    for epoch in 0..opt.epochs {
        let lr = lr_schedule(epoch, opt);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(opt.batch_size) {
            epoch_loss += bnc_loss_and_grads(&model, train, batch, hyb, &mut grads)?;
            batches += 1;
            adam_step(&mut model.class_prior.rho, &grads.prior, &mut prior_state, opt, lr);
            for ((cpt, g), st) in model.cpts.iter_mut().zip(&grads.cpts).zip(&mut cpt_states) {
                adam_step(&mut cpt.rho, g, st, opt, lr);
            }
            refresh_tables(&mut model, quant);
        }
        let train_err = model.error_rate(train)?;
        let test_err = match test {
            Some(t) => model.error_rate(t)?,
            None => f64::NAN,
        };
        history.epochs.push(EpochStats {
            epoch,
            lr,
            train_loss: epoch_loss / batches as f64,
            train_err,
            test_err,
        });
    }
    model.quant = quant;
    Ok((model, history))
}

/// Adam state for one layer: weights-or-gamma slot plus bias-or-beta slot.
struct LayerAdam {
    main: Option<AdamState>,
    aux: Option<AdamState>,
}

fn layer_adam_states(params: &[LayerParams]) -> Vec<LayerAdam> {
    params
        .iter()
        .map(|p| match p {
            LayerParams::None => LayerAdam { main: None, aux: None },
            LayerParams::Fc { w, b } => LayerAdam {
                main: Some(AdamState::new(w.len())),
                aux: b.as_ref().map(|b| AdamState::new(b.len())),
            },
            LayerParams::Conv { w, b } => LayerAdam {
                main: Some(AdamState::new(w.len())),
                aux: b.as_ref().map(|b| AdamState::new(b.len())),
            },
            LayerParams::Batchnorm(bn) => LayerAdam {
                main: Some(AdamState::new(bn.gamma.len())),
                aux: Some(AdamState::new(bn.beta.len())),
            },
        })
        .collect()
}

fn gather_batch(data: &RawDataset, rows: &[usize], shape: TensorShape) -> Result<Tensor> {
    let d = data.num_features;
    if shape.element_count() != d {
        return Err(Error::config(format!(
            "input shape covers {} values but samples have {d}",
            shape.element_count()
        )));
    }
    let mut flat = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        flat.extend_from_slice(data.row(r));
    }
    Ok(match shape {
        TensorShape::Flat { features } => Tensor::Flat(
            ndarray::Array2::from_shape_vec((rows.len(), features), flat)
                .expect("gathered batch is rectangular"),
        ),
        TensorShape::Image { channels, height, width } => Tensor::Image(
            ndarray::Array4::from_shape_vec((rows.len(), channels, height, width), flat)
                .expect("gathered batch is rectangular"),
        ),
    })
}

fn dnn_error_rate(model: &DnnModel, data: &RawDataset) -> Result<f64> {
    let rows: Vec<usize> = (0..data.len()).collect();
    let input = gather_batch(data, &rows, model.input_shape)?;
    model.error_rate(&input, &data.labels)
}

/// Trains a feed-forward network with cross-entropy loss. Real master
/// weights are kept throughout; the forward pass quantizes them when `quant`
/// is set and gradients pass straight through to the masters. The returned
/// model's weights are snapped onto the grid.
#[allow(clippy::too_many_arguments)]
pub fn train_dnn(
    train: &RawDataset,
    test: Option<&RawDataset>,
    input_shape: TensorShape,
    layers: Vec<LayerSpec>,
    quant: Option<DnnQuantConfig>,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<(DnnModel, TrainHistory)> {
    opt.validate()?;
    if train.is_empty() {
        return Err(Error::data("cannot train on an empty dataset"));
    }
    if !matches!(layers.last(), Some(LayerSpec::Softmax)) {
        return Err(Error::config("training needs a terminal softmax layer"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = DnnModel::new(input_shape, layers, &mut rng)?;
    model.quant = quant;
    match model.output_shape() {
        TensorShape::Flat { features } if features == train.num_classes => {}
        other => {
            return Err(Error::config(format!(
                "network outputs {other:?} but the data has {} classes",
                train.num_classes
            )))
        }
    }

    let mut states = layer_adam_states(&model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory::default();

    for epoch in 0..opt.epochs {
        let lr = lr_schedule(epoch, opt);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(opt.batch_size) {
            let input = gather_batch(train, batch, model.input_shape)?;
            let (out, caches) = model.forward(&input, Mode::Train, Some(&mut rng))?;
            let probs = match out {
                Tensor::Flat(p) => p,
                Tensor::Image(_) => unreachable!("terminal softmax output is flat"),
            };
            let labels: Vec<usize> = batch.iter().map(|&r| train.labels[r]).collect();
            epoch_loss +=
                cross_entropy_loss(probs.as_slice().expect("contiguous"), train.num_classes, &labels);
            batches += 1;

            let b_n = batch.len() as f64;
            let mut gp = ndarray::Array2::zeros(probs.dim());
            for (i, &y) in labels.iter().enumerate() {
                gp[[i, y]] = -1.0 / (b_n * probs[[i, y]].max(f64::MIN_POSITIVE));
            }
            let (_, grads) = network_backward(&caches, &Tensor::Flat(gp))?;

            for ((params, grad), st) in model.params.iter_mut().zip(&grads).zip(&mut states) {
                match (params, grad) {
                    (LayerParams::Fc { w, b }, ParamGrads::Fc { w: gw, b: gb }) => {
                        adam_step(
                            w.as_slice_mut().expect("standard layout"),
                            gw.as_slice().expect("standard layout"),
                            st.main.as_mut().unwrap(),
                            opt,
                            lr,
                        );
                        if let (Some(b), Some(gb)) = (b, gb) {
                            adam_step(b, gb, st.aux.as_mut().unwrap(), opt, lr);
                        }
                    }
                    (LayerParams::Conv { w, b }, ParamGrads::Conv { w: gw, b: gb }) => {
                        adam_step(
                            w.as_slice_mut().expect("standard layout"),
                            gw.as_slice().expect("standard layout"),
                            st.main.as_mut().unwrap(),
                            opt,
                            lr,
                        );
                        if let (Some(b), Some(gb)) = (b, gb) {
                            adam_step(b, gb, st.aux.as_mut().unwrap(), opt, lr);
                        }
                    }
                    (LayerParams::Batchnorm(bn), ParamGrads::Batchnorm { gamma, beta }) => {
                        adam_step(&mut bn.gamma, gamma, st.main.as_mut().unwrap(), opt, lr);
                        adam_step(&mut bn.beta, beta, st.aux.as_mut().unwrap(), opt, lr);
                    }
                    _ => {}
                }
            }
            for (params, cache) in model.params.iter_mut().zip(&caches) {
                update_running_stats(params, cache);
            }
        }
        history.epochs.push(EpochStats {
            epoch,
            lr,
            train_loss: epoch_loss / batches as f64,
            train_err: dnn_error_rate(&model, train)?,
            test_err: match test {
                Some(t) => dnn_error_rate(&model, t)?,
                None => f64::NAN,
            },
        });
    }

    // The published model carries the quantized weights themselves.
    if let Some(q) = quant {
        for params in &mut model.params {
            match params {
                LayerParams::Fc { w, .. } => w.mapv_inplace(|v| crate::quant::quantize_dnn(v, q)),
                LayerParams::Conv { w, .. } => w.mapv_inplace(|v| crate::quant::quantize_dnn(v, q)),
                _ => {}
            }
        }
    }
    Ok((model, history))
}
