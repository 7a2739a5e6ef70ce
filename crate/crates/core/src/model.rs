//! The bidirectional network: two CLSTM layers reading the band sequence in
//! opposite orders, per-step 2x2 max pooling and dropout, and a dense softmax
//! head over the concatenated features.
//!
//! Feature layout is `[forward blocks..., backward blocks...]`, each direction
//! in its own processing order, one block of `hidden * (p/2)^2` values per
//! kept step. With [`FeatureMode::LastState`] each direction contributes only
//! its final step.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::clstm::{clstm_layer_backward, clstm_layer_forward, ClstmParams, ClstmState, LayerTape, PARAM_NAMES};
use crate::data::{is_valid_patch_size, PatchSequence};
use crate::error::{arg_err, shape_err, Result};
use crate::nn::{
    dense_backward, dense_forward, dropout_backward, dropout_forward, maxpool2x2_backward, maxpool2x2_forward, softmax,
    DenseParams, DropoutMask, PoolIndices,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Every step's pooled hidden state from both directions.
    FullSequence,
    /// Only the final hidden state of each direction.
    LastState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub bands: usize,
    pub hidden_channels: usize,
    pub kernel_size: usize,
    pub dropout: f64,
    pub band_group: usize,
    pub feature_mode: FeatureMode,
    /// When false the backward branch is skipped and its feature half is zero.
    pub bidirectional: bool,
    pub classes: usize,
}

impl ModelConfig {
    /// Defaults for everything except the data-dependent sizes.
    pub fn new(bands: usize, classes: usize) -> Self {
        ModelConfig {
            patch_size: 8,
            bands,
            hidden_channels: 32,
            kernel_size: 3,
            dropout: 0.6,
            band_group: 1,
            feature_mode: FeatureMode::FullSequence,
            bidirectional: true,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(is_valid_patch_size(self.patch_size) && self.patch_size >= 8) {
            return arg_err(format!(
                "patch_size must be a power of two >= 8, got {}",
                self.patch_size
            ));
        }
        if self.bands == 0 {
            return arg_err("bands must be positive");
        }
        if self.band_group == 0 || !self.bands.is_multiple_of(self.band_group) {
            return arg_err(format!(
                "band_group {} does not divide {} bands",
                self.band_group, self.bands
            ));
        }
        if self.hidden_channels == 0 {
            return arg_err("hidden_channels must be positive");
        }
        if self.kernel_size.is_multiple_of(2) {
            return arg_err(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return arg_err(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.classes < 2 {
            return arg_err(format!("need at least 2 classes, got {}", self.classes));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.bands / self.band_group
    }

    /// Steps per direction that contribute features.
    pub fn kept_steps(&self) -> usize {
        match self.feature_mode {
            FeatureMode::FullSequence => self.steps(),
            FeatureMode::LastState => 1,
        }
    }

    pub fn block_len(&self) -> usize {
        let q = self.patch_size / 2;
        self.hidden_channels * q * q
    }

    pub fn feature_len(&self) -> usize {
        2 * self.kept_steps() * self.block_len()
    }

    fn kept_indices(&self) -> std::ops::Range<usize> {
        let l = self.steps();
        l - self.kept_steps()..l
    }
}

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed)
}

/// Parameters plus a version stamp. Any mutable access bumps the version so
/// tapes recorded before the change are rejected by [`model_backward`].
#[derive(Debug)]
pub struct BiClstmModel {
    config: ModelConfig,
    forward_params: ClstmParams,
    backward_params: ClstmParams,
    head: DenseParams,
    id: u64,
    generation: u64,
}

impl Clone for BiClstmModel {
    fn clone(&self) -> Self {
        BiClstmModel {
            config: self.config.clone(),
            forward_params: self.forward_params.clone(),
            backward_params: self.backward_params.clone(),
            head: self.head.clone(),
            id: fresh_id(),
            generation: 0,
        }
    }
}

impl PartialEq for BiClstmModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.forward_params == other.forward_params
            && self.backward_params == other.backward_params
            && self.head == other.head
    }
}

/// Names of the parameter tensors, in [`BiClstmModel::tensors`] order.
pub fn parameter_names() -> Vec<String> {
    let mut names = Vec::with_capacity(26);
    for dir in ["forward", "backward"] {
        names.extend(PARAM_NAMES.iter().map(|n| format!("{dir}.{n}")));
    }
    names.push("head.weights".into());
    names.push("head.bias".into());
    names
}

impl BiClstmModel {
    /// Glorot-uniform kernels and head, zero biases. `forget_bias` initializes
    /// the forget gate bias of both directions.
    pub fn new(config: ModelConfig, rng: &mut Rng, forget_bias: f64) -> Result<Self> {
        config.validate()?;
        let g = config.band_group;
        let (hid, k) = (config.hidden_channels, config.kernel_size);
        let mut forward_params = ClstmParams::glorot(g, hid, k, &mut rng.fork(0));
        let mut backward_params = ClstmParams::glorot(g, hid, k, &mut rng.fork(1));
        forward_params.b_f.fill(forget_bias);
        backward_params.b_f.fill(forget_bias);
        let (fan_in, fan_out) = (config.feature_len(), config.classes);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weights = crate::rng::rng_uniform(&mut rng.fork(2), &[fan_out, fan_in], -limit, limit)?;
        let head = DenseParams::new(weights, Tensor::zeros(&[fan_out]))?;
        Self::from_parts(config, forward_params, backward_params, head)
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (g, hid, k) = (config.band_group, config.hidden_channels, config.kernel_size);
        let head = DenseParams::zeros(config.feature_len(), config.classes);
        Self::from_parts(
            config,
            ClstmParams::zeros(g, hid, k),
            ClstmParams::zeros(g, hid, k),
            head,
        )
    }

    pub fn from_parts(
        config: ModelConfig,
        forward_params: ClstmParams,
        backward_params: ClstmParams,
        head: DenseParams,
    ) -> Result<Self> {
        config.validate()?;
        let model = BiClstmModel {
            config,
            forward_params,
            backward_params,
            head,
            id: fresh_id(),
            generation: 0,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let c = &self.config;
        for (name, p) in [("forward", &self.forward_params), ("backward", &self.backward_params)] {
            p.validate()?;
            let want = (c.band_group, c.hidden_channels, (c.kernel_size, c.kernel_size));
            let got = (p.input_channels(), p.hidden_channels(), p.kernel_shape());
            if got != want {
                return shape_err(format!(
                    "{name} params have (inputs, hidden, kernel) {got:?}, config implies {want:?}"
                ));
            }
        }
        self.head
            .weights
            .check_shape(&[c.classes, c.feature_len()], "head weights")?;
        self.head.bias.check_shape(&[c.classes], "head bias")
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn forward_params(&self) -> &ClstmParams {
        &self.forward_params
    }

    pub fn backward_params(&self) -> &ClstmParams {
        &self.backward_params
    }

    pub fn head(&self) -> &DenseParams {
        &self.head
    }

    pub fn forward_params_mut(&mut self) -> &mut ClstmParams {
        self.generation += 1;
        &mut self.forward_params
    }

    pub fn backward_params_mut(&mut self) -> &mut ClstmParams {
        self.generation += 1;
        &mut self.backward_params
    }

    pub fn head_mut(&mut self) -> &mut DenseParams {
        self.generation += 1;
        &mut self.head
    }

    /// All parameter tensors: forward cell, backward cell, head weights, head bias.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::with_capacity(26);
        out.extend(self.forward_params.tensors());
        out.extend(self.backward_params.tensors());
        out.push(&self.head.weights);
        out.push(&self.head.bias);
        out
    }

    /// Mutable view in [`BiClstmModel::tensors`] order. Shapes must not change.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.generation += 1;
        let mut out: Vec<&mut Tensor> = Vec::with_capacity(26);
        out.extend(self.forward_params.tensors_mut());
        out.extend(self.backward_params.tensors_mut());
        out.push(&mut self.head.weights);
        out.push(&mut self.head.bias);
        out
    }

    pub fn param_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.sq_norm()).sum::<f64>().sqrt()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// The model that, run on the band-reversed sample, reproduces this
    /// model's logits: directions swapped and the head's two feature halves
    /// exchanged.
    pub fn direction_swapped(&self) -> Result<Self> {
        let half = self.config.feature_len() / 2;
        let mut head = self.head.clone();
        for row in head.weights.data_mut().chunks_exact_mut(2 * half) {
            let (a, b) = row.split_at_mut(half);
            a.swap_with_slice(b);
        }
        Self::from_parts(
            self.config.clone(),
            self.backward_params.clone(),
            self.forward_params.clone(),
            head,
        )
    }
}

struct DirectionTape {
    layer: LayerTape,
    pools: Vec<PoolIndices>,
    masks: Vec<DropoutMask>,
}

/// Everything [`model_backward`] needs from a forward pass.
pub struct ModelTape {
    model_id: u64,
    generation: u64,
    forward: DirectionTape,
    backward: Option<DirectionTape>,
    features: Tensor,
}

impl ModelTape {
    /// The concatenated feature vector fed to the head.
    pub fn features(&self) -> &Tensor {
        &self.features
    }
}

/// Gradients with the same layout as the model, plus the sample gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub forward: ClstmParams,
    pub backward: ClstmParams,
    pub head: DenseParams,
    /// Gradient with respect to each step of the input sample.
    pub input: Vec<Tensor>,
}

impl ModelGrads {
    pub fn zeros_like(model: &BiClstmModel) -> Self {
        ModelGrads {
            forward: model.forward_params.zeros_like(),
            backward: model.backward_params.zeros_like(),
            head: DenseParams::zeros(model.head.in_dim(), model.head.out_dim()),
            input: Vec::new(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::with_capacity(26);
        out.extend(self.forward.tensors());
        out.extend(self.backward.tensors());
        out.push(&self.head.weights);
        out.push(&self.head.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::with_capacity(26);
        out.extend(self.forward.tensors_mut());
        out.extend(self.backward.tensors_mut());
        out.push(&mut self.head.weights);
        out.push(&mut self.head.bias);
        out
    }

    /// Parameter gradients only; input gradients are not accumulated.
    pub fn add_assign(&mut self, other: &ModelGrads) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.scale_assign(k);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.sq_norm()).sum::<f64>().sqrt()
    }
}

fn check_sample(sample: &PatchSequence, config: &ModelConfig) -> Result<()> {
    let (l, g, p) = (config.steps(), config.band_group, config.patch_size);
    if sample.steps.len() != l {
        return shape_err(format!(
            "sample has {} steps, config expects {l} ({} bands in groups of {g})",
            sample.steps.len(),
            config.bands
        ));
    }
    for (k, s) in sample.steps.iter().enumerate() {
        s.check_shape(&[g, p, p], &format!("sample step {k}"))?;
    }
    Ok(())
}

fn run_direction(
    seq: &[Tensor],
    params: &ClstmParams,
    config: &ModelConfig,
    rng: &mut Rng,
    training: bool,
    features: &mut Vec<f64>,
) -> Result<DirectionTape> {
    let p = config.patch_size;
    let initial = ClstmState::zeros(config.hidden_channels, p, p);
    let (hidden, layer) = clstm_layer_forward(seq, params, &initial)?;
    let mut pools = Vec::with_capacity(config.kept_steps());
    let mut masks = Vec::with_capacity(config.kept_steps());
    for h in &hidden[config.kept_indices()] {
        let (pooled, idx) = maxpool2x2_forward(h)?;
        let (dropped, mask) = dropout_forward(&pooled, config.dropout, rng, training)?;
        features.extend_from_slice(dropped.data());
        pools.push(idx);
        masks.push(mask);
    }
    Ok(DirectionTape { layer, pools, masks })
}

/// Logits for one sample. In training mode dropout masks are drawn from `rng`
/// (forward direction first, steps in processing order); inference draws nothing.
pub fn model_forward(
    sample: &PatchSequence,
    model: &BiClstmModel,
    rng: &mut Rng,
    training: bool,
) -> Result<(Tensor, ModelTape)> {
    let config = &model.config;
    check_sample(sample, config)?;
    let mut features = Vec::with_capacity(config.feature_len());
    let forward = run_direction(
        &sample.steps,
        &model.forward_params,
        config,
        rng,
        training,
        &mut features,
    )?;
    let backward = if config.bidirectional {
        let reversed: Vec<Tensor> = sample.steps.iter().rev().cloned().collect();
        Some(run_direction(
            &reversed,
            &model.backward_params,
            config,
            rng,
            training,
            &mut features,
        )?)
    } else {
        features.resize(config.feature_len(), 0.0);
        None
    };
    let features = Tensor::vector(features);
    let logits = dense_forward(&features, &model.head)?;
    Ok((
        logits,
        ModelTape {
            model_id: model.id,
            generation: model.generation,
            forward,
            backward,
            features,
        },
    ))
}

fn direction_backward(
    params: &ClstmParams,
    tape: &DirectionTape,
    grad_features: &[f64],
    config: &ModelConfig,
) -> Result<crate::clstm::LayerGrads> {
    let p = config.patch_size;
    let mut grad_hidden = vec![Tensor::zeros(&[config.hidden_channels, p, p]); config.steps()];
    let q = p / 2;
    let pooled_shape = [config.hidden_channels, q, q];
    for (slot, ((chunk, pool), mask)) in config.kept_indices().zip(
        grad_features
            .chunks_exact(config.block_len())
            .zip(&tape.pools)
            .zip(&tape.masks),
    ) {
        let g = Tensor::from_vec(&pooled_shape, chunk.to_vec())?;
        let g = dropout_backward(mask, &g)?;
        grad_hidden[slot] = maxpool2x2_backward(pool, &g)?;
    }
    clstm_layer_backward(params, &tape.layer, &grad_hidden)
}

/// Exact gradients of `<grad_logits, logits>` for the pass recorded in `tape`.
pub fn model_backward(model: &BiClstmModel, tape: &ModelTape, grad_logits: &Tensor) -> Result<ModelGrads> {
    if tape.model_id != model.id || tape.generation != model.generation {
        return arg_err("tape was recorded on a different model or before a parameter update");
    }
    let config = &model.config;
    let (grad_features, grad_w, grad_b) = dense_backward(&tape.features, &model.head, grad_logits)?;
    let half = config.feature_len() / 2;
    let (gf_fwd, gf_bwd) = grad_features.data().split_at(half);

    let fwd = direction_backward(&model.forward_params, &tape.forward, gf_fwd, config)?;
    let mut input = fwd.inputs;
    let backward = match &tape.backward {
        Some(bt) => {
            let bwd = direction_backward(&model.backward_params, bt, gf_bwd, config)?;
            // Backward step k read sample step l-1-k.
            for (slot, g) in input.iter_mut().zip(bwd.inputs.iter().rev()) {
                slot.add_assign(g)?;
            }
            bwd.params
        }
        None => model.backward_params.zeros_like(),
    };
    Ok(ModelGrads {
        forward: fwd.params,
        backward,
        head: DenseParams::new(grad_w, grad_b)?,
        input,
    })
}

/// Most probable class (lowest index on ties) and the class probabilities,
/// with dropout disabled.
pub fn predict(sample: &PatchSequence, model: &BiClstmModel) -> Result<(usize, Tensor)> {
    // Inference consumes no randomness; the generator is a placeholder.
    let (logits, _) = model_forward(sample, model, &mut Rng::new(0), false)?;
    let probs = softmax(&logits);
    Ok((probs.argmax(), probs))
}
