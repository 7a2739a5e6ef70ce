//! Mini-batch training, optimizers and the finite-difference gradient checker.
//!
//! Randomness in [`train`] comes from `Rng::new(seed)`:
//! fork 0 initializes the model (see [`init_model`]), fork 1 shuffles each
//! epoch, and fork 2 seeds dropout. The sample at position `k` of epoch `e`
//! draws its masks from `fork(2).fork(e).fork(k)`, so results do not depend on
//! how samples are spread over threads. Batch gradients are summed in sample
//! order.

use std::time::Instant;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment8, PatchSequence};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::model::{model_backward, model_forward, parameter_names, BiClstmModel, ModelConfig, ModelGrads, ModelTape};
use crate::nn::softmax_xent;
use crate::rng::{rng_uniform, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    /// Expand the training set with the eight flips/rotations of each patch.
    pub augment: bool,
    pub seed: u64,
    /// Initial forget-gate bias of both directions.
    pub forget_bias: f64,
    /// Worker threads; `None` uses the ambient rayon pool. Never affects results.
    #[serde(skip)]
    pub threads: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 100,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 5.0,
            augment: false,
            seed: 0,
            forget_bias: 0.0,
            threads: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return arg_err(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return arg_err("batch_size must be at least 1");
        }
        if !(self.clip_norm > 0.0) {
            return arg_err(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return arg_err(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return arg_err("adam betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return arg_err("epsilon must be positive");
        }
        if self.threads == Some(0) {
            return arg_err("threads must be at least 1");
        }
        Ok(())
    }
}

/// Optimizer moments, aligned with [`BiClstmModel::tensors`]. SGD keeps its
/// velocity in `first` and leaves `second` empty.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &[&Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptimizerState {
            kind,
            step: 0,
            first: zeros(),
            second: if kind == OptimizerKind::Adam {
                zeros()
            } else {
                Vec::new()
            },
        }
    }

    /// Apply one update of the configured kind.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], cfg: &TrainConfig) -> Result<()> {
        match self.kind {
            OptimizerKind::Adam => adam_step(params, grads, self, cfg),
            OptimizerKind::SgdMomentum => sgd_momentum_step(params, grads, self, cfg),
        }
    }
}

fn check_aligned(params: &[&mut Tensor], grads: &[&Tensor], moments: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() || params.len() != moments.len() {
        return shape_err(format!(
            "optimizer got {} params, {} grads, {} state tensors",
            params.len(),
            grads.len(),
            moments.len()
        ));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != moments[k].shape() {
            return shape_err(format!(
                "optimizer tensor {k}: param {:?}, grad {:?}, state {:?}",
                p.shape(),
                g.shape(),
                moments[k].shape()
            ));
        }
    }
    Ok(())
}

/// `v <- mu v - lr g; theta <- theta + v`.
pub fn sgd_momentum_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    check_aligned(params, grads, &state.first)?;
    let (mu, lr) = (cfg.momentum, cfg.learning_rate);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.first) {
        for ((x, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = mu * *vi - lr * gi;
            *x += *vi;
        }
    }
    state.step += 1;
    Ok(())
}

/// Adam with bias-corrected moments.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    check_aligned(params, grads, &state.first)?;
    check_aligned(params, grads, &state.second)?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps, lr) = (cfg.beta1, cfg.beta2, cfg.epsilon, cfg.learning_rate);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[k].data_mut();
        let v = state.second[k].data_mut();
        for (i, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescale `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ModelGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale_assign(max_norm / norm);
    }
    norm
}

/// Model initialization used by [`train`] for `cfg.seed`.
pub fn init_model(config: ModelConfig, cfg: &TrainConfig) -> Result<BiClstmModel> {
    BiClstmModel::new(config, &mut Rng::new(cfg.seed).fork(0), cfg.forget_bias)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training-mode cross-entropy over the epoch's samples.
    pub loss: f64,
    /// Inference-mode accuracy on the (un-augmented) training samples after
    /// the epoch's updates.
    pub train_oa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub training_samples: usize,
    pub checkpoint: Option<String>,
    /// Seconds spent in [`train`]; excluded from JSON so reports stay
    /// reproducible.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    pub fn final_train_oa(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_oa)
    }
}

/// Loss and gradients for one sample with the given dropout stream.
pub fn sample_gradient(model: &BiClstmModel, sample: &PatchSequence, rng: &mut Rng) -> Result<(f64, ModelGrads)> {
    let (logits, tape) = model_forward(sample, model, rng, true)?;
    let (loss, _, grad) = softmax_xent(&logits, sample.class_index()?)?;
    Ok((loss, model_backward(model, &tape, &grad)?))
}

fn run_pool<T: Send>(threads: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(job()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Argument(format!("cannot build thread pool: {e}")))?;
            Ok(pool.install(job))
        }
    }
}

/// Fraction of samples whose inference-mode prediction matches the label.
pub fn accuracy(model: &BiClstmModel, samples: &[PatchSequence]) -> Result<f64> {
    if samples.is_empty() {
        return arg_err("accuracy of an empty sample set");
    }
    let hits = samples
        .par_iter()
        .map(|s| Ok((crate::model::predict(s, model)?.0 == s.class_index()?) as usize))
        .collect::<Result<Vec<usize>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / samples.len() as f64)
}

/// Train `model` in place on `samples`, continuing from `optimizer` if given.
pub fn train_with_state(
    model: &mut BiClstmModel,
    samples: &[PatchSequence],
    cfg: &TrainConfig,
    optimizer: Option<OptimizerState>,
) -> Result<(OptimizerState, TrainReport)> {
    train_observed(model, samples, cfg, optimizer, |_| true)
}

/// [`train_with_state`] that hands each finished epoch to `observer`; the run
/// ends early when it returns false.
pub fn train_observed(
    model: &mut BiClstmModel,
    samples: &[PatchSequence],
    cfg: &TrainConfig,
    optimizer: Option<OptimizerState>,
    mut observer: impl FnMut(&EpochRecord) -> bool + Send,
) -> Result<(OptimizerState, TrainReport)> {
    cfg.validate()?;
    if samples.is_empty() {
        return arg_err("training set is empty");
    }
    for s in samples {
        if s.class_index()? >= model.config().classes {
            return arg_err(format!(
                "sample at {:?} has label {} but the model has {} classes",
                s.origin,
                s.label,
                model.config().classes
            ));
        }
    }
    let started = Instant::now();
    let expanded;
    let data: &[PatchSequence] = if cfg.augment {
        expanded = samples.iter().map(augment8).collect::<Result<Vec<_>>>()?.concat();
        &expanded
    } else {
        samples
    };
    let mut state = match optimizer {
        Some(s) if s.kind == cfg.optimizer => s,
        Some(_) => return arg_err("optimizer state does not match the configured optimizer"),
        None => OptimizerState::new(cfg.optimizer, &model.tensors()),
    };
    let root = Rng::new(cfg.seed);
    let mut shuffle_rng = root.fork(1);
    let dropout_root = root.fork(2);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.epochs),
        training_samples: data.len(),
        checkpoint: None,
        wall_clock_secs: 0.0,
    };

    run_pool(cfg.threads, || -> Result<()> {
        for epoch in 0..cfg.epochs {
            shuffle_rng.shuffle(&mut order);
            let epoch_rng = dropout_root.fork(epoch as u64);
            let mut loss_sum = 0.0;
            for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let start = batch * cfg.batch_size;
                let frozen: &BiClstmModel = model;
                let results = chunk
                    .par_iter()
                    .enumerate()
                    .map(|(k, &idx)| {
                        let mut rng = epoch_rng.fork((start + k) as u64);
                        sample_gradient(frozen, &data[idx], &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut grads = ModelGrads::zeros_like(model);
                let mut batch_loss = 0.0;
                for (loss, g) in &results {
                    batch_loss += loss;
                    grads.add_assign(g)?;
                }
                let n = chunk.len() as f64;
                grads.scale_assign(1.0 / n);
                batch_loss /= n;
                let grad_norm = grads.global_norm();
                if !batch_loss.is_finite() || !grad_norm.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        batch,
                        loss: batch_loss,
                        param_norm: model.param_norm(),
                    });
                }
                clip_global_norm(&mut grads, cfg.clip_norm);
                state.update(&mut model.tensors_mut(), &grads.tensors(), cfg)?;
                loss_sum += batch_loss * n;
            }
            let record = EpochRecord {
                epoch,
                loss: loss_sum / data.len() as f64,
                train_oa: accuracy(model, samples)?,
            };
            info!(
                "epoch {:>4}  loss {:.6}  train OA {:.4}",
                record.epoch, record.loss, record.train_oa
            );
            let go_on = observer(&record);
            report.epochs.push(record);
            if !go_on {
                break;
            }
        }
        Ok(())
    })??;
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    debug!("training took {:.2}s", report.wall_clock_secs);
    Ok((state, report))
}

/// Initialize from `config` and `cfg.seed`, then train.
pub fn train(
    config: ModelConfig,
    samples: &[PatchSequence],
    cfg: &TrainConfig,
) -> Result<(BiClstmModel, OptimizerState, TrainReport)> {
    cfg.validate()?;
    let mut model = init_model(config, cfg)?;
    let (state, report) = train_with_state(&mut model, samples, cfg, None)?;
    Ok((model, state, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub batch: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub abs_floor: f64,
    pub step: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            model: ModelConfig {
                hidden_channels: 2,
                ..ModelConfig::new(3, 2)
            },
            batch: 2,
            seed: 0,
            tolerance: 1e-5,
            abs_floor: 1e-8,
            step: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub blocks: Vec<BlockReport>,
    pub passed: bool,
}

/// Random model, samples and labels used by [`gradcheck`].
pub fn gradcheck_fixture(cfg: &GradcheckConfig) -> Result<(BiClstmModel, Vec<PatchSequence>)> {
    let root = Rng::new(cfg.seed);
    let mut model = BiClstmModel::zeros(cfg.model.clone())?;
    let mut prng = root.fork(0);
    for t in model.tensors_mut() {
        *t = rng_uniform(&mut prng, t.shape(), -0.5, 0.5)?;
    }
    let (p, g) = (cfg.model.patch_size, cfg.model.band_group);
    let mut drng = root.fork(1);
    let samples = (0..cfg.batch)
        .map(|_| {
            let steps = (0..cfg.model.steps())
                .map(|_| rng_uniform(&mut drng, &[g, p, p], -1.0, 1.0))
                .collect::<Result<_>>()?;
            Ok(PatchSequence {
                steps,
                label: drng.below(cfg.model.classes as u64) as u16 + 1,
                origin: (0, 0),
            })
        })
        .collect::<Result<_>>()?;
    Ok((model, samples))
}

/// Compare analytic and central-difference gradients of the mean batch loss.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    gradcheck_with(cfg, model_backward)
}

/// [`gradcheck`] with a substitute analytic backward pass.
pub fn gradcheck_with(
    cfg: &GradcheckConfig,
    backward: impl Fn(&BiClstmModel, &ModelTape, &Tensor) -> Result<ModelGrads>,
) -> Result<GradcheckReport> {
    cfg.model.validate()?;
    if cfg.batch == 0 {
        return arg_err("gradcheck batch must be at least 1");
    }
    if !(cfg.step > 0.0) {
        return arg_err("finite-difference step must be positive");
    }
    let (model, samples) = gradcheck_fixture(cfg)?;
    let mask_root = Rng::new(cfg.seed).fork(2);
    let n = samples.len() as f64;

    // Each sample re-uses its own dropout stream, so masks are identical
    // between the analytic pass and every perturbed evaluation.
    let batch_loss = |m: &BiClstmModel, s: &[PatchSequence]| -> Result<f64> {
        let mut total = 0.0;
        for (k, sample) in s.iter().enumerate() {
            let (logits, _) = model_forward(sample, m, &mut mask_root.fork(k as u64), true)?;
            total += softmax_xent(&logits, sample.class_index()?)?.0;
        }
        Ok(total / n)
    };

    let mut analytic = ModelGrads::zeros_like(&model);
    let mut input_grads = Vec::with_capacity(samples.len());
    for (k, sample) in samples.iter().enumerate() {
        let (logits, tape) = model_forward(sample, &model, &mut mask_root.fork(k as u64), true)?;
        let (_, _, grad) = softmax_xent(&logits, sample.class_index()?)?;
        let mut g = backward(&model, &tape, &grad)?;
        g.scale_assign(1.0 / n);
        analytic.add_assign(&g)?;
        input_grads.push(g.input.iter().map(|t| t.scale(1.0 / n)).collect::<Vec<_>>());
    }

    let compare = |name: String, analytic: &Tensor, numeric: &[f64]| -> BlockReport {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for (&a, &num) in analytic.data().iter().zip(numeric) {
            let diff = (a - num).abs();
            max_abs = max_abs.max(diff);
            if diff > cfg.abs_floor {
                max_rel = max_rel.max(diff / a.abs().max(num.abs()));
            }
        }
        BlockReport {
            name,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            passed: max_rel < cfg.tolerance,
        }
    };

    let mut blocks = Vec::new();
    let names = parameter_names();
    let mut probe = model.clone();
    for (idx, name) in names.into_iter().enumerate() {
        let len = model.tensors()[idx].len();
        let mut numeric = Vec::with_capacity(len);
        for i in 0..len {
            let orig = model.tensors()[idx].data()[i];
            probe.tensors_mut()[idx].data_mut()[i] = orig + cfg.step;
            let up = batch_loss(&probe, &samples)?;
            probe.tensors_mut()[idx].data_mut()[i] = orig - cfg.step;
            let down = batch_loss(&probe, &samples)?;
            probe.tensors_mut()[idx].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * cfg.step));
        }
        blocks.push(compare(name, analytic.tensors()[idx], &numeric));
    }

    let mut perturbed = samples.clone();
    let mut input_analytic = Vec::new();
    let mut input_numeric = Vec::new();
    for (k, sample) in samples.iter().enumerate() {
        for (s, step) in sample.steps.iter().enumerate() {
            for i in 0..step.len() {
                let orig = step.data()[i];
                perturbed[k].steps[s].data_mut()[i] = orig + cfg.step;
                let up = batch_loss(&model, &perturbed)?;
                perturbed[k].steps[s].data_mut()[i] = orig - cfg.step;
                let down = batch_loss(&model, &perturbed)?;
                perturbed[k].steps[s].data_mut()[i] = orig;
                input_numeric.push((up - down) / (2.0 * cfg.step));
            }
            input_analytic.extend_from_slice(input_grads[k][s].data());
        }
    }
    blocks.push(compare("input".into(), &Tensor::vector(input_analytic), &input_numeric));

    let passed = blocks.iter().all(|b| b.passed);
    Ok(GradcheckReport { blocks, passed })
}
