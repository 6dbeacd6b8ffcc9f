//! Individual differentiable layer operations: valid 2-D convolution, max
//! pooling, ReLU, dense, softmax and cross-entropy, each with a forward pass
//! and an analytic backward pass.
//!
//! Every operation has a plain sequential implementation (`*_seq`). With the
//! `parallel` feature (the default) the unsuffixed entry points run the
//! convolution loops data-parallel over maps/channels via rayon; the split is
//! deterministic because each task writes a disjoint output slice.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Convolution layer parameters: kernels `[out_maps, in_maps, k, k]` and
/// one bias per output map.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub kernels: Tensor,
    pub biases: Tensor,
}

impl ConvParams {
    pub fn out_maps(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn in_maps(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.shape()[2]
    }
}

/// Dense layer parameters: weights `[out_units, in_units]` and biases `[out_units]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub weights: Tensor,
    pub biases: Tensor,
}

impl DenseParams {
    pub fn out_units(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_units(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// Argmax bookkeeping from a pooling forward pass, consumed by the backward
/// pass to route gradients.
#[derive(Debug, Clone)]
pub struct PoolTrace {
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    /// Flat input index of the window maximum, one per pooled output cell,
    /// in row-major output order. Ties resolve to the first occurrence in
    /// row-major window order.
    pub argmax: Vec<usize>,
}

fn conv_output_shape(input: &Tensor, p: &ConvParams) -> Result<[usize; 3]> {
    let (c_in, h, w) = unpack3(input.shape())?;
    let k = p.kernel_size();
    if p.in_maps() != c_in {
        return Err(Error::Shape(format!(
            "conv expects {} input maps, image has {c_in}",
            p.in_maps()
        )));
    }
    if h < k || w < k {
        return Err(Error::Shape(format!(
            "input {h}x{w} smaller than {k}x{k} kernel"
        )));
    }
    Ok([p.out_maps(), h - k + 1, w - k + 1])
}

fn unpack3(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        &[c, h, w] => Ok((c, h, w)),
        other => Err(Error::Shape(format!("expected [C,H,W] tensor, got {other:?}"))),
    }
}

fn conv_forward_one_map(
    out_map: &mut [f64],
    o: usize,
    input: &Tensor,
    p: &ConvParams,
    out_h: usize,
    out_w: usize,
) {
    let (c_in, _h, w) = unpack3(input.shape()).expect("checked by caller");
    let k = p.kernel_size();
    let inp = input.data();
    let ker = p.kernels.data();
    let bias = p.biases.data()[o];
    let in_plane = input.shape()[1] * w;
    for y in 0..out_h {
        for x in 0..out_w {
            let mut acc = bias;
            for c in 0..c_in {
                let in_base = c * in_plane;
                let k_base = ((o * c_in + c) * k) * k;
                for i in 0..k {
                    let row = in_base + (y + i) * w + x;
                    let krow = k_base + i * k;
                    for j in 0..k {
                        acc += inp[row + j] * ker[krow + j];
                    }
                }
            }
            out_map[y * out_w + x] = acc;
        }
    }
}

/// Valid (no-padding) stride-1 convolution, sequential loops.
pub fn conv2d_forward_seq(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let [c_out, out_h, out_w] = conv_output_shape(input, p)?;
    let mut out = Tensor::zeros(&[c_out, out_h, out_w])?;
    let plane = out_h * out_w;
    for (o, out_map) in out.data_mut().chunks_mut(plane).enumerate() {
        conv_forward_one_map(out_map, o, input, p, out_h, out_w);
    }
    Ok(out)
}

/// Valid (no-padding) stride-1 convolution. Parallel over output maps when
/// the `parallel` feature is enabled.
pub fn conv2d_forward(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    #[cfg(feature = "parallel")]
    {
        let [c_out, out_h, out_w] = conv_output_shape(input, p)?;
        let mut out = Tensor::zeros(&[c_out, out_h, out_w])?;
        let plane = out_h * out_w;
        out.data_mut()
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(o, out_map)| conv_forward_one_map(out_map, o, input, p, out_h, out_w));
        Ok(out)
    }
    #[cfg(not(feature = "parallel"))]
    conv2d_forward_seq(input, p)
}

fn conv_backward_kernels_one_map(
    gk_map: &mut [f64],
    gb: &mut f64,
    o: usize,
    input: &Tensor,
    grad_out: &Tensor,
    c_in: usize,
    k: usize,
) {
    let (_c, _h, w) = unpack3(input.shape()).expect("checked by caller");
    let (_, out_h, out_w) = unpack3(grad_out.shape()).expect("checked by caller");
    let inp = input.data();
    let go = grad_out.data();
    let in_plane = input.shape()[1] * w;
    let go_base = o * out_h * out_w;
    let mut bias_acc = 0.0;
    for y in 0..out_h {
        for x in 0..out_w {
            let g = go[go_base + y * out_w + x];
            if g == 0.0 {
                continue;
            }
            bias_acc += g;
            for c in 0..c_in {
                let in_base = c * in_plane;
                for i in 0..k {
                    let row = in_base + (y + i) * w + x;
                    let krow = (c * k + i) * k;
                    for j in 0..k {
                        gk_map[krow + j] += g * inp[row + j];
                    }
                }
            }
        }
    }
    *gb = bias_acc;
}

fn conv_backward_input_one_channel(
    gi_plane: &mut [f64],
    c: usize,
    p: &ConvParams,
    grad_out: &Tensor,
    w: usize,
) {
    let k = p.kernel_size();
    let c_in = p.in_maps();
    let (c_out, out_h, out_w) = unpack3(grad_out.shape()).expect("checked by caller");
    let ker = p.kernels.data();
    let go = grad_out.data();
    for o in 0..c_out {
        let go_base = o * out_h * out_w;
        let k_base = ((o * c_in + c) * k) * k;
        for y in 0..out_h {
            for x in 0..out_w {
                let g = go[go_base + y * out_w + x];
                if g == 0.0 {
                    continue;
                }
                for i in 0..k {
                    let row = (y + i) * w + x;
                    let krow = k_base + i * k;
                    for j in 0..k {
                        gi_plane[row + j] += g * ker[krow + j];
                    }
                }
            }
        }
    }
}

/// Gradients of `sum(grad_out * conv2d_forward(input, p))` with respect to
/// input, kernels and biases. Sequential loops.
pub fn conv2d_backward_seq(
    input: &Tensor,
    p: &ConvParams,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let expected = conv_output_shape(input, p)?;
    if grad_out.shape() != expected {
        return Err(Error::Shape(format!(
            "grad_out shape {:?} does not match conv output {expected:?}",
            grad_out.shape()
        )));
    }
    let (c_in, h, w) = unpack3(input.shape())?;
    let k = p.kernel_size();
    let c_out = p.out_maps();

    let mut grad_kernels = Tensor::zeros(p.kernels.shape())?;
    let mut grad_biases = Tensor::zeros(p.biases.shape())?;
    let gk_plane = c_in * k * k;
    {
        let gb = grad_biases.data_mut();
        let mut bias_tmp = vec![0.0; c_out];
        for (o, gk_map) in grad_kernels.data_mut().chunks_mut(gk_plane).enumerate() {
            conv_backward_kernels_one_map(gk_map, &mut bias_tmp[o], o, input, grad_out, c_in, k);
        }
        gb.copy_from_slice(&bias_tmp);
    }

    let mut grad_input = Tensor::zeros(&[c_in, h, w])?;
    for (c, gi_plane) in grad_input.data_mut().chunks_mut(h * w).enumerate() {
        conv_backward_input_one_channel(gi_plane, c, p, grad_out, w);
    }
    Ok((grad_input, grad_kernels, grad_biases))
}

/// Convolution backward pass; parallel over output maps (kernel/bias grads)
/// and input channels (input grad) when the `parallel` feature is enabled.
pub fn conv2d_backward(
    input: &Tensor,
    p: &ConvParams,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    #[cfg(feature = "parallel")]
    {
        let expected = conv_output_shape(input, p)?;
        if grad_out.shape() != expected {
            return Err(Error::Shape(format!(
                "grad_out shape {:?} does not match conv output {expected:?}",
                grad_out.shape()
            )));
        }
        let (c_in, h, w) = unpack3(input.shape())?;
        let k = p.kernel_size();

        let mut grad_kernels = Tensor::zeros(p.kernels.shape())?;
        let mut grad_biases = Tensor::zeros(p.biases.shape())?;
        let gk_plane = c_in * k * k;
        grad_kernels
            .data_mut()
            .par_chunks_mut(gk_plane)
            .zip(grad_biases.data_mut().par_iter_mut())
            .enumerate()
            .for_each(|(o, (gk_map, gb))| {
                conv_backward_kernels_one_map(gk_map, gb, o, input, grad_out, c_in, k)
            });

        let mut grad_input = Tensor::zeros(&[c_in, h, w])?;
        grad_input
            .data_mut()
            .par_chunks_mut(h * w)
            .enumerate()
            .for_each(|(c, gi_plane)| conv_backward_input_one_channel(gi_plane, c, p, grad_out, w));
        Ok((grad_input, grad_kernels, grad_biases))
    }
    #[cfg(not(feature = "parallel"))]
    conv2d_backward_seq(input, p, grad_out)
}

/// Non-overlapping max pooling by `factor`; trailing rows/columns beyond
/// `floor(extent / factor) * factor` are dropped.
pub fn maxpool_forward(input: &Tensor, factor: usize) -> Result<(Tensor, PoolTrace)> {
    let (c, h, w) = unpack3(input.shape())?;
    if factor < 1 {
        return Err(Error::Shape("pool factor must be >= 1".into()));
    }
    if h < factor || w < factor {
        return Err(Error::Shape(format!(
            "pool window {factor}x{factor} larger than input {h}x{w}"
        )));
    }
    let out_h = h / factor;
    let out_w = w / factor;
    let mut out = Tensor::zeros(&[c, out_h, out_w])?;
    let mut argmax = vec![0usize; c * out_h * out_w];
    let inp = input.data();
    let out_data = out.data_mut();
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..out_h {
            for x in 0..out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for i in 0..factor {
                    let row = base + (y * factor + i) * w + x * factor;
                    for j in 0..factor {
                        let v = inp[row + j];
                        if v > best {
                            best = v;
                            best_idx = row + j;
                        }
                    }
                }
                let oi = (ch * out_h + y) * out_w + x;
                out_data[oi] = best;
                argmax[oi] = best_idx;
            }
        }
    }
    let trace = PoolTrace {
        input_shape: input.shape().to_vec(),
        output_shape: out.shape().to_vec(),
        argmax,
    };
    Ok((out, trace))
}

/// Routes `grad_out` back to the argmax positions recorded in `trace`;
/// every other input position gets zero.
pub fn maxpool_backward(trace: &PoolTrace, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != trace.output_shape.as_slice() {
        return Err(Error::Shape(format!(
            "grad_out shape {:?} does not match pooled shape {:?}",
            grad_out.shape(),
            trace.output_shape
        )));
    }
    let mut grad_input = Tensor::zeros(&trace.input_shape)?;
    let gi = grad_input.data_mut();
    for (&src, &g) in trace.argmax.iter().zip(grad_out.data()) {
        gi[src] += g;
    }
    Ok(grad_input)
}

/// Elementwise `max(0, x)`.
pub fn relu_forward(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_data(input.shape(), data).expect("same shape as input")
}

/// Passes `grad_out` where the forward input was strictly positive
/// (subgradient 0 at exactly 0).
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(Error::Shape(format!(
            "shape mismatch {:?} vs {:?}",
            input.shape(),
            grad_out.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_data(input.shape(), data)
}

/// `W * input + b` over a flat input vector.
pub fn dense_forward(input: &Tensor, p: &DenseParams) -> Result<Tensor> {
    let n = input.len();
    if input.shape().len() != 1 || n != p.in_units() {
        return Err(Error::Shape(format!(
            "dense expects input [{}], got {:?}",
            p.in_units(),
            input.shape()
        )));
    }
    let m = p.out_units();
    let w = p.weights.data();
    let x = input.data();
    let data = (0..m)
        .map(|i| {
            let row = &w[i * n..(i + 1) * n];
            p.biases.data()[i] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    Tensor::from_data(&[m], data)
}

/// Dense backward: `grad_input = W^T g`, `grad_W = outer(g, input)`, `grad_b = g`.
pub fn dense_backward(
    input: &Tensor,
    p: &DenseParams,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let n = p.in_units();
    let m = p.out_units();
    if input.len() != n || grad_out.len() != m {
        return Err(Error::Shape(format!(
            "dense backward shapes: input {:?}, grad_out {:?}, weights {:?}",
            input.shape(),
            grad_out.shape(),
            p.weights.shape()
        )));
    }
    let w = p.weights.data();
    let x = input.data();
    let g = grad_out.data();

    let mut grad_input = vec![0.0; n];
    let mut grad_w = vec![0.0; m * n];
    for i in 0..m {
        let gi = g[i];
        let row = &w[i * n..(i + 1) * n];
        for j in 0..n {
            grad_input[j] += row[j] * gi;
            grad_w[i * n + j] = gi * x[j];
        }
    }
    Ok((
        Tensor::from_data(&[n], grad_input)?,
        Tensor::from_data(&[m, n], grad_w)?,
        Tensor::from_data(&[m], g.to_vec())?,
    ))
}

/// Numerically stable softmax over a flat vector.
pub fn softmax(input: &Tensor) -> Tensor {
    let max = input.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = input.data().iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let data = exps.iter().map(|&e| e / sum).collect();
    Tensor::from_data(input.shape(), data).expect("same shape as input")
}

const CE_EPSILON: f64 = 1e-12;

/// `-ln(max(probs[label], 1e-12))`.
pub fn cross_entropy(probs: &Tensor, label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(Error::Index(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    Ok(-probs.data()[label].max(CE_EPSILON).ln())
}

/// Fused gradient of `cross_entropy(softmax(logits), label)` with respect to
/// the logits: `softmax(logits) - one_hot(label)`.
pub fn softmax_ce_backward(logits: &Tensor, label: usize) -> Result<Tensor> {
    if label >= logits.len() {
        return Err(Error::Index(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let mut grad = softmax(logits);
    grad.data_mut()[label] -= 1.0;
    Ok(grad)
}
