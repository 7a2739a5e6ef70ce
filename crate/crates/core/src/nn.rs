//! Non-recurrent operators with hand-written backward passes: same-padded
//! 2-D correlation, 2x2 max pooling, inverted dropout, dense layers and
//! softmax cross-entropy.

use crate::error::{arg_err, shape_err, Result};
use crate::linalg::{accumulate_row_sums, add_row_bias, col2im_add, gemm, im2col};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Convolution weights `[out, in, kh, kw]` and per-output-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl ConvKernel {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        check_kernel_weights(&weights)?;
        bias.check_shape(&[weights.shape()[0]], "conv bias")?;
        Ok(ConvKernel { weights, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }
}

pub(crate) fn check_kernel_weights(weights: &Tensor) -> Result<()> {
    let s = weights.shape();
    if s.len() != 4 {
        return shape_err(format!("conv weights must be rank 4, got {s:?}"));
    }
    if s[2].is_multiple_of(2) || s[3].is_multiple_of(2) {
        return shape_err(format!("conv kernel sides must be odd, got {}x{}", s[2], s[3]));
    }
    Ok(())
}

fn check_image(input: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *input.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => shape_err(format!("{what}: expected [channels, height, width], got {s:?}")),
    }
}

/// Accumulate the bias-free correlation of `cols` (an unfolded image) with
/// `weights` into `out`, i.e. `out += W * cols`.
pub(crate) fn correlate_cols_into(weights: &Tensor, cols: &[f64], hw: usize, out: &mut [f64]) {
    let s = weights.shape();
    let (co, kdim) = (s[0], s[1] * s[2] * s[3]);
    gemm(co, hw, kdim, weights.data(), false, cols, false, 1.0, out);
}

/// Same-padded (zero fill) cross-correlation plus per-channel bias.
pub fn conv2d_forward(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    let (c, h, w) = check_image(input, "conv2d input")?;
    if kernel.in_channels() != c {
        return shape_err(format!(
            "conv2d: kernel expects {} input channels, input has {c}",
            kernel.in_channels()
        ));
    }
    let s = kernel.weights.shape();
    let (kh, kw) = (s[2], s[3]);
    let cols = im2col(input.data(), c, h, w, kh, kw);
    let mut out = vec![0.0; kernel.out_channels() * h * w];
    correlate_cols_into(&kernel.weights, &cols, h * w, &mut out);
    add_row_bias(&mut out, kernel.bias.data(), h * w);
    Tensor::from_vec(&[kernel.out_channels(), h, w], out)
}

/// Gradients of [`conv2d_forward`]: `(grad_input, grad_weights, grad_bias)`.
pub fn conv2d_backward(input: &Tensor, kernel: &ConvKernel, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, h, w) = check_image(input, "conv2d input")?;
    if kernel.in_channels() != c {
        return shape_err(format!(
            "conv2d backward: kernel expects {} input channels, input has {c}",
            kernel.in_channels()
        ));
    }
    let co = kernel.out_channels();
    grad_out.check_shape(&[co, h, w], "conv2d grad_out")?;
    let s = kernel.weights.shape();
    let (kh, kw) = (s[2], s[3]);
    let kdim = c * kh * kw;
    let hw = h * w;

    let cols = im2col(input.data(), c, h, w, kh, kw);
    let mut grad_w = vec![0.0; co * kdim];
    gemm(co, kdim, hw, grad_out.data(), false, &cols, true, 0.0, &mut grad_w);
    let mut grad_b = vec![0.0; co];
    accumulate_row_sums(grad_out.data(), hw, &mut grad_b);

    let mut grad_cols = vec![0.0; kdim * hw];
    gemm(
        kdim,
        hw,
        co,
        kernel.weights.data(),
        true,
        grad_out.data(),
        false,
        0.0,
        &mut grad_cols,
    );
    let mut grad_in = vec![0.0; c * hw];
    col2im_add(&grad_cols, c, h, w, kh, kw, &mut grad_in);

    Ok((
        Tensor::from_vec(&[c, h, w], grad_in)?,
        Tensor::from_vec(s, grad_w)?,
        Tensor::vector(grad_b),
    ))
}

/// Flat input offsets of each pooling window's maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// Disjoint 2x2 max pooling. Ties go to the first entry in row-major window
/// order.
pub fn maxpool2x2_forward(input: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let (c, h, w) = check_image(input, "maxpool input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("maxpool2x2 needs even height and width, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let top = base + 2 * y * w + 2 * xx;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::from_vec(&[c, oh, ow], out)?,
        PoolIndices {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2x2_backward(indices: &PoolIndices, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != indices.argmax.len() {
        return shape_err(format!(
            "maxpool backward: grad_out {:?} does not match {} pooled outputs",
            grad_out.shape(),
            indices.argmax.len()
        ));
    }
    let mut grad = Tensor::zeros(&indices.input_shape);
    let g = grad.data_mut();
    for (&i, &d) in indices.argmax.iter().zip(grad_out.data()) {
        g[i] += d;
    }
    Ok(grad)
}

/// Per-entry multipliers applied by dropout: `0` or `1 / (1 - rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub scale: Tensor,
}

/// Inverted dropout. Inference mode is the identity and draws nothing from
/// `rng`.
pub fn dropout_forward(input: &Tensor, rate: f64, rng: &mut Rng, training: bool) -> Result<(Tensor, DropoutMask)> {
    if !(0.0..1.0).contains(&rate) {
        return arg_err(format!("dropout rate must lie in [0, 1), got {rate}"));
    }
    if !training {
        return Ok((
            input.clone(),
            DropoutMask {
                scale: Tensor::full(input.shape(), 1.0),
            },
        ));
    }
    let keep = 1.0 / (1.0 - rate);
    let draws = (0..input.len())
        .map(|_| if rng.uniform01() < rate { 0.0 } else { keep })
        .collect();
    let scale = Tensor::from_vec(input.shape(), draws)?;
    let out = input.zip_map(&scale, "dropout", |x, m| x * m)?;
    Ok((out, DropoutMask { scale }))
}

pub fn dropout_backward(mask: &DropoutMask, grad_out: &Tensor) -> Result<Tensor> {
    grad_out.zip_map(&mask.scale, "dropout backward", |g, m| g * m)
}

/// Fully-connected layer parameters: `weights [out, in]`, `bias [out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl DenseParams {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        if weights.rank() != 2 {
            return shape_err(format!("dense weights must be rank 2, got {:?}", weights.shape()));
        }
        bias.check_shape(&[weights.shape()[0]], "dense bias")?;
        Ok(DenseParams { weights, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        DenseParams {
            weights: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[0]
    }
}

pub fn dense_forward(input: &Tensor, params: &DenseParams) -> Result<Tensor> {
    input.check_shape(&[params.in_dim()], "dense input")?;
    let mut out = params.bias.data().to_vec();
    gemm(
        params.out_dim(),
        1,
        params.in_dim(),
        params.weights.data(),
        false,
        input.data(),
        false,
        1.0,
        &mut out,
    );
    Ok(Tensor::vector(out))
}

/// `(grad_input, grad_weights, grad_bias)`.
pub fn dense_backward(input: &Tensor, params: &DenseParams, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (o, i) = (params.out_dim(), params.in_dim());
    input.check_shape(&[i], "dense input")?;
    grad_out.check_shape(&[o], "dense grad_out")?;
    let mut grad_in = vec![0.0; i];
    gemm(
        i,
        1,
        o,
        params.weights.data(),
        true,
        grad_out.data(),
        false,
        0.0,
        &mut grad_in,
    );
    let mut grad_w = vec![0.0; o * i];
    gemm(o, i, 1, grad_out.data(), false, input.data(), false, 0.0, &mut grad_w);
    Ok((
        Tensor::vector(grad_in),
        Tensor::from_vec(&[o, i], grad_w)?,
        grad_out.clone(),
    ))
}

/// Numerically stable softmax.
pub fn softmax(logits: &Tensor) -> Tensor {
    let max = logits.data().iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let exp = logits.map(|z| (z - max).exp());
    let total = exp.sum();
    exp.scale(1.0 / total)
}

/// Cross-entropy of `softmax(logits)` against `true_class`:
/// `(loss, probs, grad_logits)`.
pub fn softmax_xent(logits: &Tensor, true_class: usize) -> Result<(f64, Tensor, Tensor)> {
    if logits.rank() != 1 || logits.is_empty() {
        return shape_err(format!("softmax expects a non-empty vector, got {:?}", logits.shape()));
    }
    if true_class >= logits.len() {
        return arg_err(format!(
            "class index {true_class} out of range for {} logits",
            logits.len()
        ));
    }
    let z = logits.data();
    let max = z.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let log_total = z.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    let loss = max + log_total - z[true_class];
    let probs = softmax(logits);
    let mut grad = probs.clone();
    grad.data_mut()[true_class] -= 1.0;
    Ok((loss, probs, grad))
}
