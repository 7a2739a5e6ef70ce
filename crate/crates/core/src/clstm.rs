//! Convolutional LSTM: the gate block, its unrolled layer and
//! backpropagation through time.
//!
//! For input `x` and previous state `(h, C)` one step computes
//!
//! ```text
//! F  = sigmoid(W_hf * h + W_xf * x + b_f)
//! I  = sigmoid(W_hi * h + W_xi * x + b_i)
//! C~ = tanh   (W_hc * h + W_xc * x + b_c)
//! C' = F o C + I o C~
//! O  = sigmoid(W_ho * h + W_xo * x + b_o)
//! h' = O o tanh(C')
//! ```
//!
//! where `*` is same-padded correlation and `o` the elementwise product.
//! There are no peephole connections.

use crate::error::{arg_err, shape_err, Result};
use crate::linalg::{accumulate_row_sums, col2im_add, gemm, im2col};
use crate::nn::check_kernel_weights;
use crate::rng::Rng;
use crate::tensor::{sigmoid, Tensor};

/// Number of gate blocks (forget, input, candidate, output).
const GATES: usize = 4;

/// Weights and biases of one CLSTM layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClstmParams {
    pub w_hf: Tensor,
    pub w_xf: Tensor,
    pub w_hi: Tensor,
    pub w_xi: Tensor,
    pub w_hc: Tensor,
    pub w_xc: Tensor,
    pub w_ho: Tensor,
    pub w_xo: Tensor,
    pub b_f: Tensor,
    pub b_i: Tensor,
    pub b_c: Tensor,
    pub b_o: Tensor,
}

/// Names in the order used by [`ClstmParams::tensors`].
pub const PARAM_NAMES: [&str; 12] = [
    "w_hf", "w_xf", "w_hi", "w_xi", "w_hc", "w_xc", "w_ho", "w_xo", "b_f", "b_i", "b_c", "b_o",
];

impl ClstmParams {
    pub fn zeros(input_channels: usize, hidden_channels: usize, kernel_size: usize) -> Self {
        let wh = || Tensor::zeros(&[hidden_channels, hidden_channels, kernel_size, kernel_size]);
        let wx = || Tensor::zeros(&[hidden_channels, input_channels, kernel_size, kernel_size]);
        let b = || Tensor::zeros(&[hidden_channels]);
        ClstmParams {
            w_hf: wh(),
            w_xf: wx(),
            w_hi: wh(),
            w_xi: wx(),
            w_hc: wh(),
            w_xc: wx(),
            w_ho: wh(),
            w_xo: wx(),
            b_f: b(),
            b_i: b(),
            b_c: b(),
            b_o: b(),
        }
    }

    /// Uniform in `+-sqrt(6 / (fan_in + fan_out))` per kernel, zero biases.
    pub fn glorot(input_channels: usize, hidden_channels: usize, kernel_size: usize, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(input_channels, hidden_channels, kernel_size);
        for w in p.tensors_mut().into_iter().take(8) {
            let s = w.shape().to_vec();
            let area = s[2] * s[3];
            let limit = (6.0 / ((s[0] + s[1]) * area) as f64).sqrt();
            for v in w.data_mut() {
                *v = rng.uniform(-limit, limit);
            }
        }
        p
    }

    pub fn hidden_channels(&self) -> usize {
        self.w_hf.shape()[0]
    }

    pub fn input_channels(&self) -> usize {
        self.w_xf.shape()[1]
    }

    pub fn kernel_shape(&self) -> (usize, usize) {
        let s = self.w_hf.shape();
        (s[2], s[3])
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.tensors().into_iter().take(8) {
            check_kernel_weights(w)?;
        }
        let hid = self.hidden_channels();
        let cin = self.input_channels();
        let (kh, kw) = self.kernel_shape();
        for (i, w) in self.tensors().into_iter().take(8).enumerate() {
            let want_in = if i % 2 == 0 { hid } else { cin };
            w.check_shape(&[hid, want_in, kh, kw], PARAM_NAMES[i])?;
        }
        for (i, b) in self.tensors().into_iter().enumerate().skip(8) {
            b.check_shape(&[hid], PARAM_NAMES[i])?;
        }
        Ok(())
    }

    pub fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.w_hf, &self.w_xf, &self.w_hi, &self.w_xi, &self.w_hc, &self.w_xc, &self.w_ho, &self.w_xo, &self.b_f,
            &self.b_i, &self.b_c, &self.b_o,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.w_hf,
            &mut self.w_xf,
            &mut self.w_hi,
            &mut self.w_xi,
            &mut self.w_hc,
            &mut self.w_xc,
            &mut self.w_ho,
            &mut self.w_xo,
            &mut self.b_f,
            &mut self.b_i,
            &mut self.b_c,
            &mut self.b_o,
        ]
    }

    pub fn zeros_like(&self) -> Self {
        let (kh, _) = self.kernel_shape();
        Self::zeros(self.input_channels(), self.hidden_channels(), kh)
    }

    /// `(hidden-side weights, input-side weights, bias)` of gate `g` in
    /// forget, input, candidate, output order.
    fn gate(&self, g: usize) -> (&Tensor, &Tensor, &Tensor) {
        match g {
            0 => (&self.w_hf, &self.w_xf, &self.b_f),
            1 => (&self.w_hi, &self.w_xi, &self.b_i),
            2 => (&self.w_hc, &self.w_xc, &self.b_c),
            _ => (&self.w_ho, &self.w_xo, &self.b_o),
        }
    }

    fn gate_mut(&mut self, g: usize) -> (&mut Tensor, &mut Tensor, &mut Tensor) {
        match g {
            0 => (&mut self.w_hf, &mut self.w_xf, &mut self.b_f),
            1 => (&mut self.w_hi, &mut self.w_xi, &mut self.b_i),
            2 => (&mut self.w_hc, &mut self.w_xc, &mut self.b_c),
            _ => (&mut self.w_ho, &mut self.w_xo, &mut self.b_o),
        }
    }
}

/// Hidden and cell state, both `[hidden_channels, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl ClstmState {
    pub fn zeros(hidden_channels: usize, height: usize, width: usize) -> Self {
        ClstmState {
            h: Tensor::zeros(&[hidden_channels, height, width]),
            c: Tensor::zeros(&[hidden_channels, height, width]),
        }
    }
}

/// Activations of one step kept for the backward pass.
#[derive(Debug, Clone)]
pub struct StepTape {
    pub input: Tensor,
    pub forget: Tensor,
    pub input_gate: Tensor,
    pub candidate: Tensor,
    pub output: Tensor,
    pub c_prev: Tensor,
    pub c: Tensor,
    pub tanh_c: Tensor,
    cols_x: Vec<f64>,
    cols_h: Vec<f64>,
}

/// Per-step tapes of one unrolled sequence, in order.
#[derive(Debug, Clone)]
pub struct LayerTape {
    pub steps: Vec<StepTape>,
}

/// Gradients of an unrolled layer.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub params: ClstmParams,
    pub inputs: Vec<Tensor>,
    pub initial: ClstmState,
}

fn image_dims(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => shape_err(format!("{what}: expected [channels, height, width], got {s:?}")),
    }
}

fn check_step_shapes(x: &Tensor, prev: &ClstmState, params: &ClstmParams) -> Result<(usize, usize)> {
    let (cin, h, w) = image_dims(x, "clstm input")?;
    if cin != params.input_channels() {
        return shape_err(format!(
            "clstm input has {cin} channels, parameters expect {}",
            params.input_channels()
        ));
    }
    let hid = params.hidden_channels();
    prev.h.check_shape(&[hid, h, w], "clstm previous hidden state")?;
    prev.c.check_shape(&[hid, h, w], "clstm previous cell state")?;
    Ok((h, w))
}

/// One application of the gate block.
pub fn clstm_step(x: &Tensor, prev: &ClstmState, params: &ClstmParams) -> Result<(ClstmState, StepTape)> {
    let (h, w) = check_step_shapes(x, prev, params)?;
    let hid = params.hidden_channels();
    let cin = params.input_channels();
    let (kh, kw) = params.kernel_shape();
    let hw = h * w;
    let cols_x = im2col(x.data(), cin, h, w, kh, kw);
    let cols_h = im2col(prev.h.data(), hid, h, w, kh, kw);

    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(GATES);
    for g in 0..GATES {
        let (wh, wx, b) = params.gate(g);
        let mut pre = vec![0.0; hid * hw];
        for (row, &bias) in pre.chunks_exact_mut(hw).zip(b.data()) {
            row.fill(bias);
        }
        gemm(hid, hw, cin * kh * kw, wx.data(), false, &cols_x, false, 1.0, &mut pre);
        gemm(hid, hw, hid * kh * kw, wh.data(), false, &cols_h, false, 1.0, &mut pre);
        let act: fn(f64) -> f64 = if g == 2 { f64::tanh } else { sigmoid };
        pre.iter_mut().for_each(|v| *v = act(*v));
        acts.push(pre);
    }
    let shape = [hid, h, w];
    let mut acts = acts.into_iter().map(|a| Tensor::from_vec(&shape, a));
    let forget = acts.next().unwrap()?;
    let input_gate = acts.next().unwrap()?;
    let candidate = acts.next().unwrap()?;
    let output = acts.next().unwrap()?;

    let mut c = Vec::with_capacity(hid * hw);
    for k in 0..hid * hw {
        c.push(forget.data()[k] * prev.c.data()[k] + input_gate.data()[k] * candidate.data()[k]);
    }
    let c = Tensor::from_vec(&shape, c)?;
    let tanh_c = c.map(f64::tanh);
    let h_new = output.zip_map(&tanh_c, "clstm output", |o, t| o * t)?;

    let tape = StepTape {
        input: x.clone(),
        forget,
        input_gate,
        candidate,
        output,
        c_prev: prev.c.clone(),
        c: c.clone(),
        tanh_c,
        cols_x,
        cols_h,
    };
    Ok((ClstmState { h: h_new, c }, tape))
}

/// Backward through one step. `grad_h` and `grad_c` are the total gradients
/// reaching this step's outputs; parameter gradients are added into `acc`.
/// Returns `(grad_x, grad of previous state)`.
fn step_backward_into(
    params: &ClstmParams,
    tape: &StepTape,
    grad_h: &Tensor,
    grad_c: &Tensor,
    acc: &mut ClstmParams,
) -> Result<(Tensor, ClstmState)> {
    let shape = tape.c.shape().to_vec();
    grad_h.check_shape(&shape, "clstm grad_h")?;
    grad_c.check_shape(&shape, "clstm grad_c")?;
    let (hid, h, w) = (shape[0], shape[1], shape[2]);
    let hw = h * w;
    let cin = params.input_channels();
    let (kh, kw) = params.kernel_shape();
    let n = hid * hw;

    let (f, i, g, o) = (
        tape.forget.data(),
        tape.input_gate.data(),
        tape.candidate.data(),
        tape.output.data(),
    );
    let (tc, c_prev) = (tape.tanh_c.data(), tape.c_prev.data());
    let (dh, dc_next) = (grad_h.data(), grad_c.data());

    let mut d_pre = vec![vec![0.0; n]; GATES];
    let mut dc_prev = vec![0.0; n];
    for k in 0..n {
        let d_o = dh[k] * tc[k];
        let dc = dc_next[k] + dh[k] * o[k] * (1.0 - tc[k] * tc[k]);
        d_pre[0][k] = dc * c_prev[k] * f[k] * (1.0 - f[k]);
        d_pre[1][k] = dc * g[k] * i[k] * (1.0 - i[k]);
        d_pre[2][k] = dc * i[k] * (1.0 - g[k] * g[k]);
        d_pre[3][k] = d_o * o[k] * (1.0 - o[k]);
        dc_prev[k] = dc * f[k];
    }

    let kx = cin * kh * kw;
    let khd = hid * kh * kw;
    let mut dcols_x = vec![0.0; kx * hw];
    let mut dcols_h = vec![0.0; khd * hw];
    for (gate, dp) in d_pre.iter().enumerate() {
        let (wh, wx, _) = params.gate(gate);
        gemm(kx, hw, hid, wx.data(), true, dp, false, 1.0, &mut dcols_x);
        gemm(khd, hw, hid, wh.data(), true, dp, false, 1.0, &mut dcols_h);
        let (gwh, gwx, gb) = acc.gate_mut(gate);
        gemm(hid, kx, hw, dp, false, &tape.cols_x, true, 1.0, gwx.data_mut());
        gemm(hid, khd, hw, dp, false, &tape.cols_h, true, 1.0, gwh.data_mut());
        accumulate_row_sums(dp, hw, gb.data_mut());
    }
    let mut dx = vec![0.0; cin * hw];
    col2im_add(&dcols_x, cin, h, w, kh, kw, &mut dx);
    let mut dh_prev = vec![0.0; n];
    col2im_add(&dcols_h, hid, h, w, kh, kw, &mut dh_prev);

    Ok((
        Tensor::from_vec(&[cin, h, w], dx)?,
        ClstmState {
            h: Tensor::from_vec(&shape, dh_prev)?,
            c: Tensor::from_vec(&shape, dc_prev)?,
        },
    ))
}

/// Gradients of a single step given gradients on its new `h` and `C`:
/// `(parameter grads, grad_x, grad of previous state)`.
pub fn clstm_step_backward(
    params: &ClstmParams,
    tape: &StepTape,
    grad_h: &Tensor,
    grad_c: &Tensor,
) -> Result<(ClstmParams, Tensor, ClstmState)> {
    let mut acc = params.zeros_like();
    let (dx, dprev) = step_backward_into(params, tape, grad_h, grad_c, &mut acc)?;
    Ok((acc, dx, dprev))
}

/// Run the cell over `seq` from `initial`, returning every hidden state.
pub fn clstm_layer_forward(
    seq: &[Tensor],
    params: &ClstmParams,
    initial: &ClstmState,
) -> Result<(Vec<Tensor>, LayerTape)> {
    let Some(first) = seq.first() else {
        return arg_err("clstm layer needs a non-empty sequence");
    };
    for (k, x) in seq.iter().enumerate() {
        if x.shape() != first.shape() {
            return shape_err(format!(
                "clstm sequence step {k} has shape {:?}, step 0 has {:?}",
                x.shape(),
                first.shape()
            ));
        }
    }
    let mut state = initial.clone();
    let mut hidden = Vec::with_capacity(seq.len());
    let mut steps = Vec::with_capacity(seq.len());
    for x in seq {
        let (next, tape) = clstm_step(x, &state, params)?;
        hidden.push(next.h.clone());
        steps.push(tape);
        state = next;
    }
    Ok((hidden, LayerTape { steps }))
}

/// Backpropagation through time. `grad_hidden_seq[k]` is the gradient on the
/// k-th emitted hidden state (zeros for unused steps).
pub fn clstm_layer_backward(params: &ClstmParams, tape: &LayerTape, grad_hidden_seq: &[Tensor]) -> Result<LayerGrads> {
    if tape.steps.len() != grad_hidden_seq.len() {
        return arg_err(format!(
            "tape has {} steps but {} hidden-state gradients were given",
            tape.steps.len(),
            grad_hidden_seq.len()
        ));
    }
    let Some(last) = tape.steps.last() else {
        return arg_err("empty tape");
    };
    let shape = last.c.shape().to_vec();
    let mut acc = params.zeros_like();
    let mut carry = ClstmState {
        h: Tensor::zeros(&shape),
        c: Tensor::zeros(&shape),
    };
    let mut inputs = vec![Tensor::zeros(&[0]); tape.steps.len()];
    for k in (0..tape.steps.len()).rev() {
        let mut dh = carry.h;
        dh.add_assign(&grad_hidden_seq[k])?;
        let (dx, prev) = step_backward_into(params, &tape.steps[k], &dh, &carry.c, &mut acc)?;
        inputs[k] = dx;
        carry = prev;
    }
    Ok(LayerGrads {
        params: acc,
        inputs,
        initial: carry,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{dot, max_rel_err, numeric_grad, random};

    fn random_params(rng: &mut Rng, cin: usize, hid: usize, k: usize) -> ClstmParams {
        let mut p = ClstmParams::zeros(cin, hid, k);
        for t in p.tensors_mut() {
            let r = random(rng, t.shape());
            *t = r;
        }
        p
    }

    /// Textbook scalar LSTM written without any tensor machinery. Weights in
    /// order (hf, xf, hi, xi, hc, xc, ho, xo), biases (f, i, c, o).
    fn scalar_lstm(w: [f64; 8], b: [f64; 4], xs: &[f64], h0: f64, c0: f64) -> Vec<(f64, f64)> {
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let (mut h, mut c) = (h0, c0);
        let mut out = Vec::new();
        for &x in xs {
            let f = sig(w[0] * h + w[1] * x + b[0]);
            let i = sig(w[2] * h + w[3] * x + b[1]);
            let g = (w[4] * h + w[5] * x + b[2]).tanh();
            let o = sig(w[6] * h + w[7] * x + b[3]);
            c = f * c + i * g;
            h = o * c.tanh();
            out.push((h, c));
        }
        out
    }

    fn scalar_params(w: [f64; 8], b: [f64; 4]) -> ClstmParams {
        let mut p = ClstmParams::zeros(1, 1, 1);
        for (t, v) in p.tensors_mut().into_iter().zip(w.iter().chain(&b)) {
            t.data_mut()[0] = *v;
        }
        p
    }

    #[test]
    fn zero_params_give_half_gates_and_zero_state() {
        let mut rng = Rng::new(1);
        let p = ClstmParams::zeros(2, 3, 3);
        let x = random(&mut rng, &[2, 4, 4]);
        let (next, tape) = clstm_step(&x, &ClstmState::zeros(3, 4, 4), &p).unwrap();
        for gate in [&tape.forget, &tape.input_gate, &tape.output] {
            assert!(gate.data().iter().all(|&v| v == 0.5));
        }
        assert_eq!(tape.candidate.max_abs(), 0.0);
        assert_eq!(next.c.max_abs(), 0.0);
        assert_eq!(next.h.max_abs(), 0.0);
    }

    #[test]
    fn saturated_forget_gate_copies_cell() {
        let mut rng = Rng::new(2);
        let mut p = ClstmParams::zeros(1, 2, 3);
        p.b_f.fill(50.0);
        p.b_i.fill(-50.0);
        let c0 = random(&mut rng, &[2, 4, 4]);
        let prev = ClstmState {
            h: Tensor::zeros(&[2, 4, 4]),
            c: c0.clone(),
        };
        let seq: Vec<Tensor> = (0..4).map(|_| random(&mut rng, &[1, 4, 4])).collect();
        let (_, tape) = clstm_layer_forward(&seq, &p, &prev).unwrap();
        for step in &tape.steps {
            assert!(step.c.sub(&c0).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_configuration_matches_textbook_lstm() {
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let w: [f64; 8] = std::array::from_fn(|_| rng.uniform(-2.0, 2.0));
            let b: [f64; 4] = std::array::from_fn(|_| rng.uniform(-1.0, 1.0));
            let xs: Vec<f64> = (0..4).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let want = scalar_lstm(w, b, &xs, 0.0, 0.0);
            let seq: Vec<Tensor> = xs
                .iter()
                .map(|&x| Tensor::from_vec(&[1, 1, 1], vec![x]).unwrap())
                .collect();
            let p = scalar_params(w, b);
            let (hs, tape) = clstm_layer_forward(&seq, &p, &ClstmState::zeros(1, 1, 1)).unwrap();
            for (k, (h, c)) in want.iter().enumerate() {
                assert!((hs[k].data()[0] - h).abs() < 1e-12);
                assert!((tape.steps[k].c.data()[0] - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_step_layer_equals_step() {
        let mut rng = Rng::new(4);
        let p = random_params(&mut rng, 2, 3, 3);
        let x = random(&mut rng, &[2, 4, 4]);
        let init = ClstmState::zeros(3, 4, 4);
        let (state, _) = clstm_step(&x, &init, &p).unwrap();
        let (hs, _) = clstm_layer_forward(std::slice::from_ref(&x), &p, &init).unwrap();
        assert_eq!(hs[0], state.h);
    }

    #[test]
    fn all_zero_params_emit_zero_hidden_states() {
        let mut rng = Rng::new(5);
        let p = ClstmParams::zeros(1, 2, 3);
        let seq: Vec<Tensor> = (0..5).map(|_| random(&mut rng, &[1, 4, 4])).collect();
        let (hs, _) = clstm_layer_forward(&seq, &p, &ClstmState::zeros(2, 4, 4)).unwrap();
        assert!(hs.iter().all(|h| h.max_abs() == 0.0));
    }

    #[test]
    fn gates_stay_in_range() {
        let mut rng = Rng::new(6);
        let p = random_params(&mut rng, 2, 3, 3);
        let seq: Vec<Tensor> = (0..3).map(|_| random(&mut rng, &[2, 4, 4]).scale(3.0)).collect();
        let (_, tape) = clstm_layer_forward(&seq, &p, &ClstmState::zeros(3, 4, 4)).unwrap();
        for s in &tape.steps {
            for gate in [&s.forget, &s.input_gate, &s.output] {
                assert!(gate.data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
            assert!(s.candidate.data().iter().all(|&v| v > -1.0 && v < 1.0));
        }
    }

    #[test]
    fn forward_rejects_bad_sequences() {
        let p = ClstmParams::zeros(1, 2, 3);
        let init = ClstmState::zeros(2, 4, 4);
        assert!(clstm_layer_forward(&[], &p, &init).is_err());
        let seq = vec![Tensor::zeros(&[1, 4, 4]), Tensor::zeros(&[1, 2, 2])];
        assert!(clstm_layer_forward(&seq, &p, &init).is_err());
        assert!(clstm_layer_forward(&[Tensor::zeros(&[2, 4, 4])], &p, &init).is_err());
    }

    #[test]
    fn backward_length_mismatch_and_zero_grads() {
        let mut rng = Rng::new(7);
        let p = random_params(&mut rng, 1, 2, 3);
        let seq: Vec<Tensor> = (0..3).map(|_| random(&mut rng, &[1, 4, 4])).collect();
        let (_, tape) = clstm_layer_forward(&seq, &p, &ClstmState::zeros(2, 4, 4)).unwrap();
        assert!(clstm_layer_backward(&p, &tape, &[Tensor::zeros(&[2, 4, 4])]).is_err());
        let zeros = vec![Tensor::zeros(&[2, 4, 4]); 3];
        let g = clstm_layer_backward(&p, &tape, &zeros).unwrap();
        assert!(g.params.tensors().iter().all(|t| t.max_abs() == 0.0));
        assert!(g.inputs.iter().all(|t| t.max_abs() == 0.0));
    }

    #[test]
    fn one_step_layer_backward_equals_step_backward() {
        let mut rng = Rng::new(8);
        let p = random_params(&mut rng, 2, 2, 3);
        let x = random(&mut rng, &[2, 4, 4]);
        let init = ClstmState::zeros(2, 4, 4);
        let (_, tape) = clstm_layer_forward(std::slice::from_ref(&x), &p, &init).unwrap();
        let gh = random(&mut rng, &[2, 4, 4]);
        let layer = clstm_layer_backward(&p, &tape, std::slice::from_ref(&gh)).unwrap();
        let (gp, gx, _) = clstm_step_backward(&p, &tape.steps[0], &gh, &Tensor::zeros(&[2, 4, 4])).unwrap();
        assert_eq!(layer.params, gp);
        assert_eq!(layer.inputs[0], gx);
    }

    fn bptt_check(len: usize, seed: u64) {
        let mut rng = Rng::new(seed);
        let (cin, hid, side) = (2, 2, 4);
        let p = random_params(&mut rng, cin, hid, 3);
        let seq: Vec<Tensor> = (0..len).map(|_| random(&mut rng, &[cin, side, side])).collect();
        let init = ClstmState {
            h: random(&mut rng, &[hid, side, side]).scale(0.5),
            c: random(&mut rng, &[hid, side, side]).scale(0.5),
        };
        let probes: Vec<Tensor> = (0..len).map(|_| random(&mut rng, &[hid, side, side])).collect();
        let loss = |p: &ClstmParams, seq: &[Tensor], init: &ClstmState| {
            let (hs, _) = clstm_layer_forward(seq, p, init).unwrap();
            hs.iter().zip(&probes).map(|(h, q)| dot(h, q)).sum::<f64>()
        };
        let (_, tape) = clstm_layer_forward(&seq, &p, &init).unwrap();
        let grads = clstm_layer_backward(&p, &tape, &probes).unwrap();

        for (idx, analytic) in grads.params.tensors().into_iter().enumerate() {
            let numeric = numeric_grad(p.tensors()[idx], |t| {
                let mut q = p.clone();
                *q.tensors_mut()[idx] = t.clone();
                loss(&q, &seq, &init)
            });
            let err = max_rel_err(analytic, &numeric, 1e-8);
            assert!(err < 1e-5, "len {len}: {} rel err {err}", PARAM_NAMES[idx]);
        }
        for k in 0..len {
            let numeric = numeric_grad(&seq[k], |t| {
                let mut s = seq.clone();
                s[k] = t.clone();
                loss(&p, &s, &init)
            });
            assert!(max_rel_err(&grads.inputs[k], &numeric, 1e-8) < 1e-5, "input {k}");
        }
        let nh = numeric_grad(&init.h, |t| {
            loss(
                &p,
                &seq,
                &ClstmState {
                    h: t.clone(),
                    c: init.c.clone(),
                },
            )
        });
        let nc = numeric_grad(&init.c, |t| {
            loss(
                &p,
                &seq,
                &ClstmState {
                    h: init.h.clone(),
                    c: t.clone(),
                },
            )
        });
        assert!(max_rel_err(&grads.initial.h, &nh, 1e-8) < 1e-5);
        assert!(max_rel_err(&grads.initial.c, &nc, 1e-8) < 1e-5);
    }

    #[test]
    fn bptt_matches_finite_differences() {
        for (len, seed) in [(1, 10), (2, 11), (3, 12), (5, 13)] {
            bptt_check(len, seed);
        }
    }

    #[test]
    fn glorot_respects_limits() {
        let mut rng = Rng::new(9);
        let p = ClstmParams::glorot(1, 4, 3, &mut rng);
        p.validate().unwrap();
        let limit = (6.0f64 / ((4 + 4) * 9) as f64).sqrt();
        assert!(p.w_hf.max_abs() <= limit && p.w_hf.max_abs() > 0.5 * limit);
        assert_eq!(p.b_f.max_abs(), 0.0);
    }
}
