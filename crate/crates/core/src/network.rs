//! Assembles layers into full networks from a declarative config, performs
//! shape inference, and runs forward/backward passes over the whole stack.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, ConvParams, DenseParams, PoolTrace};
use crate::tensor::{Rng, Tensor};

/// One layer in a declarative network description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { kernel_size: usize, out_maps: usize },
    Pool { factor: usize },
    Relu,
    Flatten,
    Dense { out_units: usize },
    Softmax,
}

impl LayerSpec {
    fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Pool { .. } => "pool",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Softmax => "softmax",
        }
    }
}

/// Declarative network description: input shape, ordered layers, class names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub class_names: Vec<String>,
}

/// Built-in architectures from the two experiment setups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuiltinArch {
    /// Two conv + two pool stages (3x3 kernels; 6 then 12 maps).
    Paper2Conv,
    /// Three conv + three pool stages (3x3 kernels; 6, 12, 24 maps).
    Paper3Conv,
}

impl std::str::FromStr for BuiltinArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<BuiltinArch> {
        match s {
            "paper2conv" => Ok(BuiltinArch::Paper2Conv),
            "paper3conv" => Ok(BuiltinArch::Paper3Conv),
            other => Err(Error::Config(format!(
                "unknown architecture {other:?} (expected paper2conv or paper3conv)"
            ))),
        }
    }
}

/// Builds one of the built-in configs, validated against the input shape.
pub fn builtin_config(
    arch: BuiltinArch,
    input_shape: [usize; 3],
    class_names: Vec<String>,
) -> Result<NetworkConfig> {
    let stages: &[usize] = match arch {
        BuiltinArch::Paper2Conv => &[6, 12],
        BuiltinArch::Paper3Conv => &[6, 12, 24],
    };
    let mut layers = Vec::new();
    for &maps in stages {
        layers.push(LayerSpec::Conv { kernel_size: 3, out_maps: maps });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::Pool { factor: 2 });
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::Dense { out_units: class_names.len() });
    layers.push(LayerSpec::Softmax);
    let config = NetworkConfig { input_shape, layers, class_names };
    config.validate()?;
    Ok(config)
}

impl NetworkConfig {
    /// Checks structural invariants: a dense(classes) + softmax tail and a
    /// feasible shape chain.
    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        let n = self.layers.len();
        if n < 2 {
            return Err(Error::Config("network must end in dense + softmax".into()));
        }
        match (&self.layers[n - 2], &self.layers[n - 1]) {
            (LayerSpec::Dense { out_units }, LayerSpec::Softmax)
                if *out_units == self.class_names.len() => {}
            _ => {
                return Err(Error::Config(format!(
                    "last two layers must be dense({}) then softmax",
                    self.class_names.len()
                )))
            }
        }
        self.infer_shapes()?;
        Ok(())
    }

    /// Output shape of every layer in order, or a shape error naming the
    /// first layer whose input is undersized.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape: Vec<usize> = self.input_shape.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            let fail = |msg: String| {
                Error::Shape(format!("layer {idx} ({}): {msg}", layer.name()))
            };
            shape = match layer {
                LayerSpec::Conv { kernel_size, out_maps } => {
                    let (k, m) = (*kernel_size, *out_maps);
                    if k < 1 || m < 1 {
                        return Err(fail("kernel_size and out_maps must be >= 1".into()));
                    }
                    match shape.as_slice() {
                        &[_, h, w] if h >= k && w >= k => vec![m, h - k + 1, w - k + 1],
                        &[_, h, w] => {
                            return Err(fail(format!("input {h}x{w} smaller than {k}x{k} kernel")))
                        }
                        other => return Err(fail(format!("needs [C,H,W] input, got {other:?}"))),
                    }
                }
                LayerSpec::Pool { factor } => {
                    let f = *factor;
                    if f < 1 {
                        return Err(fail("pool factor must be >= 1".into()));
                    }
                    match shape.as_slice() {
                        &[c, h, w] if h >= f && w >= f => vec![c, h / f, w / f],
                        &[_, h, w] => {
                            return Err(fail(format!("input {h}x{w} smaller than pool factor {f}")))
                        }
                        other => return Err(fail(format!("needs [C,H,W] input, got {other:?}"))),
                    }
                }
                LayerSpec::Relu => shape,
                LayerSpec::Flatten => vec![shape.iter().product()],
                LayerSpec::Dense { out_units } => {
                    if shape.len() != 1 {
                        return Err(fail(format!("needs flat input, got {shape:?}")));
                    }
                    vec![*out_units]
                }
                LayerSpec::Softmax => shape,
            };
            out.push(shape.clone());
        }
        Ok(out)
    }
}

/// Per-layer parameter storage, aligned with `NetworkConfig::layers`.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Conv(ConvParams),
    Dense(DenseParams),
    None,
}

/// A configured network with initialized parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: Vec<LayerParams>,
    pub init_seed: u64,
    pub trained_steps: u64,
}

/// One gradient tensor per parameter tensor, in the order of
/// [`Network::param_tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub tensors: Vec<Tensor>,
}

impl GradientSet {
    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }
}

/// Per-layer cache from a forward pass, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input tensor to each layer (inputs[0] is the image).
    inputs: Vec<Tensor>,
    pool_traces: Vec<Option<PoolTrace>>,
    pub logits: Tensor,
    pub probs: Tensor,
}

/// He-uniform initialization of all parameters, deterministic in `seed`.
/// The classifier head (the final dense layer) is drawn at a tenth of the
/// He bound so that fresh networks start near the uniform-prediction point:
/// initial loss sits at ~ln(classes) regardless of the seed, while the
/// argmax behavior is unchanged (both logits scale together).
pub fn init(config: &NetworkConfig, seed: u64) -> Result<Network> {
    config.validate()?;
    let shapes = config.infer_shapes()?;
    let last_dense = config
        .layers
        .iter()
        .rposition(|l| matches!(l, LayerSpec::Dense { .. }))
        .expect("validate guarantees a dense layer");
    let mut rng = Rng::new(seed);
    let mut params = Vec::with_capacity(config.layers.len());
    for (idx, layer) in config.layers.iter().enumerate() {
        let in_shape: &[usize] = if idx == 0 { &config.input_shape } else { &shapes[idx - 1] };
        let p = match layer {
            LayerSpec::Conv { kernel_size, out_maps } => {
                let (k, m) = (*kernel_size, *out_maps);
                let in_maps = in_shape[0];
                let fan_in = (in_maps * k * k) as f64;
                let bound = (6.0 / fan_in).sqrt();
                LayerParams::Conv(ConvParams {
                    kernels: Tensor::rand_uniform(&mut rng, &[m, in_maps, k, k], -bound, bound)?,
                    biases: Tensor::zeros(&[m])?,
                })
            }
            LayerSpec::Dense { out_units } => {
                let in_units = in_shape[0];
                let fan_in = in_units as f64;
                let mut bound = (6.0 / fan_in).sqrt();
                if idx == last_dense {
                    bound /= 10.0;
                }
                LayerParams::Dense(DenseParams {
                    weights: Tensor::rand_uniform(&mut rng, &[*out_units, in_units], -bound, bound)?,
                    biases: Tensor::zeros(&[*out_units])?,
                })
            }
            _ => LayerParams::None,
        };
        params.push(p);
    }
    Ok(Network { config: config.clone(), params, init_seed: seed, trained_steps: 0 })
}

impl Network {
    pub fn class_count(&self) -> usize {
        self.config.class_names.len()
    }

    /// Parameter tensors in declaration order: kernels then biases per conv
    /// layer, weights then biases per dense layer.
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for p in &self.params {
            match p {
                LayerParams::Conv(c) => {
                    out.push(&c.kernels);
                    out.push(&c.biases);
                }
                LayerParams::Dense(d) => {
                    out.push(&d.weights);
                    out.push(&d.biases);
                }
                LayerParams::None => {}
            }
        }
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for p in &mut self.params {
            match p {
                LayerParams::Conv(c) => {
                    out.push(&mut c.kernels);
                    out.push(&mut c.biases);
                }
                LayerParams::Dense(d) => {
                    out.push(&mut d.weights);
                    out.push(&mut d.biases);
                }
                LayerParams::None => {}
            }
        }
        out
    }
}

/// Full forward pass, caching per-layer inputs for the backward pass.
pub fn forward(net: &Network, image: &Tensor) -> Result<ForwardTrace> {
    if image.shape() != net.config.input_shape {
        return Err(Error::Shape(format!(
            "image shape {:?} does not match network input {:?}",
            image.shape(),
            net.config.input_shape
        )));
    }
    let mut inputs = Vec::with_capacity(net.config.layers.len());
    let mut pool_traces = Vec::with_capacity(net.config.layers.len());
    let mut current = image.clone();
    let mut logits = None;
    for (layer, params) in net.config.layers.iter().zip(&net.params) {
        inputs.push(current.clone());
        let mut trace = None;
        current = match (layer, params) {
            (LayerSpec::Conv { .. }, LayerParams::Conv(p)) => layers::conv2d_forward(&current, p)?,
            (LayerSpec::Pool { factor }, _) => {
                let (out, t) = layers::maxpool_forward(&current, *factor)?;
                trace = Some(t);
                out
            }
            (LayerSpec::Relu, _) => layers::relu_forward(&current),
            (LayerSpec::Flatten, _) => current.reshaped(&[current.len()])?,
            (LayerSpec::Dense { .. }, LayerParams::Dense(p)) => {
                let out = layers::dense_forward(&current, p)?;
                logits = Some(out.clone());
                out
            }
            (LayerSpec::Softmax, _) => layers::softmax(&current),
            (spec, _) => {
                return Err(Error::Config(format!(
                    "parameter storage out of sync at {} layer",
                    spec.name()
                )))
            }
        };
        pool_traces.push(trace);
    }
    let logits = logits.ok_or_else(|| Error::Config("network has no dense layer".into()))?;
    let probs = current;
    Ok(ForwardTrace { inputs, pool_traces, logits, probs })
}

/// Backward pass for `cross_entropy(softmax(logits), label)`, producing one
/// gradient tensor per parameter tensor.
pub fn backward(net: &Network, trace: &ForwardTrace, label: usize) -> Result<GradientSet> {
    if label >= net.class_count() {
        return Err(Error::Index(format!(
            "label {label} out of range for {} classes",
            net.class_count()
        )));
    }
    // Gradient flowing back from the loss. The softmax layer itself is
    // skipped: its gradient is fused with cross-entropy at the logits.
    let mut grad = layers::softmax_ce_backward(&trace.logits, label)?;
    let mut param_grads_rev: Vec<Tensor> = Vec::new();
    for idx in (0..net.config.layers.len()).rev() {
        let input = &trace.inputs[idx];
        match (&net.config.layers[idx], &net.params[idx]) {
            (LayerSpec::Softmax, _) => {}
            (LayerSpec::Dense { .. }, LayerParams::Dense(p)) => {
                let (gi, gw, gb) = layers::dense_backward(input, p, &grad)?;
                param_grads_rev.push(gb);
                param_grads_rev.push(gw);
                grad = gi;
            }
            (LayerSpec::Flatten, _) => {
                grad = grad.reshaped(input.shape())?;
            }
            (LayerSpec::Relu, _) => {
                grad = layers::relu_backward(input, &grad)?;
            }
            (LayerSpec::Pool { .. }, _) => {
                let t = trace.pool_traces[idx]
                    .as_ref()
                    .ok_or_else(|| Error::Config("missing pool trace".into()))?;
                grad = layers::maxpool_backward(t, &grad)?;
            }
            (LayerSpec::Conv { .. }, LayerParams::Conv(p)) => {
                let (gi, gk, gb) = layers::conv2d_backward(input, p, &grad)?;
                param_grads_rev.push(gb);
                param_grads_rev.push(gk);
                grad = gi;
            }
            (spec, _) => {
                return Err(Error::Config(format!(
                    "parameter storage out of sync at {} layer",
                    spec.name()
                )))
            }
        }
    }
    param_grads_rev.reverse();
    Ok(GradientSet { tensors: param_grads_rev })
}

/// Argmax class and its softmax probability; ties break toward the lower
/// class index.
pub fn predict(net: &Network, image: &Tensor) -> Result<(usize, f64)> {
    let trace = forward(net, image)?;
    let mut best = 0;
    let mut best_p = trace.probs.data()[0];
    for (i, &p) in trace.probs.data().iter().enumerate().skip(1) {
        if p > best_p {
            best = i;
            best_p = p;
        }
    }
    Ok((best, best_p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names2() -> Vec<String> {
        vec!["bad".into(), "OK".into()]
    }

    #[test]
    fn paper2conv_shape_chain_at_400() {
        let cfg = builtin_config(BuiltinArch::Paper2Conv, [1, 400, 400], names2()).unwrap();
        let shapes = cfg.infer_shapes().unwrap();
        // conv, relu, pool, conv, relu, pool, flatten, dense, softmax
        assert_eq!(shapes[0], vec![6, 398, 398]);
        assert_eq!(shapes[2], vec![6, 199, 199]);
        assert_eq!(shapes[3], vec![12, 197, 197]);
        assert_eq!(shapes[5], vec![12, 98, 98]);
        assert_eq!(shapes[6], vec![115_248]);
        assert_eq!(shapes[7], vec![2]);
    }

    #[test]
    fn paper2conv_shape_chain_at_28() {
        let cfg = builtin_config(BuiltinArch::Paper2Conv, [1, 28, 28], names2()).unwrap();
        let shapes = cfg.infer_shapes().unwrap();
        assert_eq!(shapes[0], vec![6, 26, 26]);
        assert_eq!(shapes[2], vec![6, 13, 13]);
        assert_eq!(shapes[3], vec![12, 11, 11]);
        assert_eq!(shapes[5], vec![12, 5, 5]);
        assert_eq!(shapes[6], vec![300]);
        assert_eq!(shapes[7], vec![2]);
    }

    #[test]
    fn paper3conv_too_small_input() {
        let err = builtin_config(BuiltinArch::Paper3Conv, [1, 10, 10], names2()).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
    }

    #[test]
    fn init_determinism_and_bounds() {
        let cfg = builtin_config(BuiltinArch::Paper2Conv, [1, 16, 16], names2()).unwrap();
        let a = init(&cfg, 42).unwrap();
        let b = init(&cfg, 42).unwrap();
        assert_eq!(a, b);

        // First conv: fan_in = 1*3*3 = 9, bound = sqrt(6/9).
        let bound = (6.0f64 / 9.0).sqrt();
        match &a.params[0] {
            LayerParams::Conv(c) => {
                assert!(c.kernels.data().iter().all(|v| v.abs() < bound));
                assert!(c.biases.data().iter().all(|&v| v == 0.0));
            }
            other => panic!("expected conv params, got {other:?}"),
        }
        // All biases exactly zero.
        for p in &a.params {
            match p {
                LayerParams::Conv(c) => assert!(c.biases.data().iter().all(|&v| v == 0.0)),
                LayerParams::Dense(d) => assert!(d.biases.data().iter().all(|&v| v == 0.0)),
                LayerParams::None => {}
            }
        }
    }

    #[test]
    fn forward_probs_sum_to_one() {
        let cfg = builtin_config(BuiltinArch::Paper2Conv, [1, 16, 16], names2()).unwrap();
        let net = init(&cfg, 1).unwrap();
        let mut rng = Rng::new(5);
        let img = Tensor::rand_uniform(&mut rng, &[1, 16, 16], 0.0, 1.0).unwrap();
        let trace = forward(&net, &img).unwrap();
        assert!((trace.probs.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_shapes_match_inference() {
        for arch in [BuiltinArch::Paper2Conv, BuiltinArch::Paper3Conv] {
            let cfg = builtin_config(arch, [1, 24, 24], names2()).unwrap();
            let net = init(&cfg, 3).unwrap();
            let shapes = cfg.infer_shapes().unwrap();
            let mut rng = Rng::new(8);
            let img = Tensor::rand_uniform(&mut rng, &[1, 24, 24], 0.0, 1.0).unwrap();
            let trace = forward(&net, &img).unwrap();
            assert_eq!(trace.probs.shape(), shapes.last().unwrap().as_slice());
            assert_eq!(trace.logits.shape(), &[2]);
        }
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let cfg = builtin_config(BuiltinArch::Paper2Conv, [1, 16, 16], names2()).unwrap();
        let net = init(&cfg, 1).unwrap();
        let img = Tensor::zeros(&[1, 8, 8]).unwrap();
        assert!(matches!(forward(&net, &img), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_deterministic() {
        let cfg = builtin_config(BuiltinArch::Paper2Conv, [1, 12, 12], names2()).unwrap();
        let net = init(&cfg, 2).unwrap();
        let mut rng = Rng::new(4);
        let img = Tensor::rand_uniform(&mut rng, &[1, 12, 12], 0.0, 1.0).unwrap();
        let trace = forward(&net, &img).unwrap();
        let g1 = backward(&net, &trace, 1).unwrap();
        let g2 = backward(&net, &trace, 1).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(g1.tensors.len(), net.param_tensors().len());
        for (g, p) in g1.tensors.iter().zip(net.param_tensors()) {
            assert_eq!(g.shape(), p.shape());
        }
    }

    #[test]
    fn backward_rejects_bad_label() {
        let cfg = builtin_config(BuiltinArch::Paper2Conv, [1, 12, 12], names2()).unwrap();
        let net = init(&cfg, 2).unwrap();
        let img = Tensor::zeros(&[1, 12, 12]).unwrap();
        let trace = forward(&net, &img).unwrap();
        assert!(matches!(backward(&net, &trace, 2), Err(Error::Index(_))));
    }

    #[test]
    fn predict_tie_breaks_low() {
        // Zero-weight dense-only net produces uniform probabilities; the tie
        // goes to class 0.
        let cfg = NetworkConfig {
            input_shape: [1, 2, 2],
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { out_units: 2 },
                LayerSpec::Softmax,
            ],
            class_names: names2(),
        };
        let mut net = init(&cfg, 0).unwrap();
        for t in net.param_tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let img = Tensor::from_data(&[1, 2, 2], vec![0.3, 0.4, 0.5, 0.6]).unwrap();
        let (class, p) = predict(&net, &img).unwrap();
        assert_eq!(class, 0);
        assert!((p - 0.5).abs() < 1e-12);
    }

    #[test]
    fn predict_shift_invariance() {
        let cfg = builtin_config(BuiltinArch::Paper2Conv, [1, 12, 12], names2()).unwrap();
        let mut net = init(&cfg, 6).unwrap();
        let mut rng = Rng::new(10);
        let img = Tensor::rand_uniform(&mut rng, &[1, 12, 12], 0.0, 1.0).unwrap();
        let (c1, p1) = predict(&net, &img).unwrap();
        // Shifting every logit by a constant means adding c to all dense biases.
        if let LayerParams::Dense(d) = &mut net.params[7] {
            for v in d.biases.data_mut() {
                *v += 3.25;
            }
        } else {
            panic!("layer 7 should be dense");
        }
        let (c2, p2) = predict(&net, &img).unwrap();
        assert_eq!(c1, c2);
        assert!((p1 - p2).abs() < 1e-12);
    }
}
