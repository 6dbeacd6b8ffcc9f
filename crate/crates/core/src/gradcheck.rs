//! Finite-difference verification harness: compares analytic backprop
//! gradients against central finite differences, per layer and end-to-end.

use crate::error::Result;
use crate::layers;
use crate::network::{self, GradientSet, LayerSpec, Network, NetworkConfig};
use crate::tensor::{Rng, Tensor};

/// Worst relative error observed for one checked unit.
#[derive(Debug, Clone)]
pub struct LayerCheck {
    pub name: String,
    pub worst_rel_err: f64,
}

/// Full gradcheck outcome.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub layers: Vec<LayerCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.layers.iter().map(|l| l.worst_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() <= self.tolerance
    }
}

const FD_STEP: f64 = 1e-6;

/// Relative error with a small absolute floor so that near-zero gradient
/// pairs do not blow up on float noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

/// Compares a given analytic gradient set against finite differences of the
/// composed loss on (net, image, label). Exposed separately so tests can
/// feed it a deliberately corrupted gradient and watch it fail.
pub fn compare_network_gradients(
    net: &Network,
    image: &Tensor,
    label: usize,
    analytic: &GradientSet,
) -> Result<f64> {
    let loss_of = |n: &Network| -> Result<f64> {
        let trace = network::forward(n, image)?;
        layers::cross_entropy(&trace.probs, label)
    };
    let mut worst = 0.0f64;
    let n_params = net.param_tensors().len();
    for ti in 0..n_params {
        let len = net.param_tensors()[ti].len();
        for i in 0..len {
            let orig = net.param_tensors()[ti].data()[i];
            let mut probe = net.clone();
            let numeric = central_diff(
                |v| {
                    probe.param_tensors_mut()[ti].data_mut()[i] = v;
                    loss_of(&probe).expect("forward succeeded on the unperturbed net")
                },
                orig,
            );
            let err = relative_error(analytic.tensors[ti].data()[i], numeric);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// End-to-end check of every parameter coordinate of `net` on a random
/// tie-free image.
pub fn check_network(net: &Network, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let shape = net.config.input_shape;
    let image = Tensor::rand_uniform(&mut rng, &shape, 0.05, 0.95)?;
    let label = rng.next_below(net.class_count());
    let trace = network::forward(net, &image)?;
    let analytic = network::backward(net, &trace, label)?;
    compare_network_gradients(net, &image, label, &analytic)
}

/// Per-layer check: for each parameterized or routing layer kind in the
/// config, a small standalone instance is verified against finite
/// differences of `sum(grad_out * forward)`.
fn check_conv_layer(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let input = Tensor::rand_uniform(&mut rng, &[2, 5, 5], -1.0, 1.0)?;
    let p = layers::ConvParams {
        kernels: Tensor::rand_uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0)?,
        biases: Tensor::rand_uniform(&mut rng, &[3], -1.0, 1.0)?,
    };
    let grad_out = Tensor::rand_uniform(&mut rng, &[3, 3, 3], -1.0, 1.0)?;
    let (gi, gk, gb) = layers::conv2d_backward(&input, &p, &grad_out)?;
    let loss = |input: &Tensor, p: &layers::ConvParams| -> f64 {
        layers::conv2d_forward(input, p)
            .and_then(|o| o.mul(&grad_out))
            .map(|t| t.sum())
            .expect("shapes fixed")
    };
    let mut worst = 0.0f64;
    for i in 0..input.len() {
        let mut t = input.clone();
        let num = central_diff(
            |v| {
                t.data_mut()[i] = v;
                loss(&t, &p)
            },
            input.data()[i],
        );
        worst = worst.max(relative_error(gi.data()[i], num));
    }
    for i in 0..p.kernels.len() {
        let mut pp = p.clone();
        let num = central_diff(
            |v| {
                pp.kernels.data_mut()[i] = v;
                loss(&input, &pp)
            },
            p.kernels.data()[i],
        );
        worst = worst.max(relative_error(gk.data()[i], num));
    }
    for i in 0..p.biases.len() {
        let mut pp = p.clone();
        let num = central_diff(
            |v| {
                pp.biases.data_mut()[i] = v;
                loss(&input, &pp)
            },
            p.biases.data()[i],
        );
        worst = worst.max(relative_error(gb.data()[i], num));
    }
    Ok(worst)
}

fn check_pool_layer(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let input = Tensor::rand_uniform(&mut rng, &[1, 6, 6], -1.0, 1.0)?;
    let grad_out = Tensor::rand_uniform(&mut rng, &[1, 3, 3], -1.0, 1.0)?;
    let (_, trace) = layers::maxpool_forward(&input, 2)?;
    let gi = layers::maxpool_backward(&trace, &grad_out)?;
    let mut worst = 0.0f64;
    for i in 0..input.len() {
        let mut t = input.clone();
        let num = central_diff(
            |v| {
                t.data_mut()[i] = v;
                layers::maxpool_forward(&t, 2)
                    .and_then(|(o, _)| o.mul(&grad_out))
                    .map(|t| t.sum())
                    .expect("shapes fixed")
            },
            input.data()[i],
        );
        worst = worst.max(relative_error(gi.data()[i], num));
    }
    Ok(worst)
}

fn check_relu_layer(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let input = Tensor::rand_uniform(&mut rng, &[12], -1.0, 1.0)?;
    let grad_out = Tensor::rand_uniform(&mut rng, &[12], -1.0, 1.0)?;
    let gi = layers::relu_backward(&input, &grad_out)?;
    let mut worst = 0.0f64;
    for i in 0..input.len() {
        let mut t = input.clone();
        let num = central_diff(
            |v| {
                t.data_mut()[i] = v;
                layers::relu_forward(&t).mul(&grad_out).map(|t| t.sum()).expect("same shape")
            },
            input.data()[i],
        );
        worst = worst.max(relative_error(gi.data()[i], num));
    }
    Ok(worst)
}

fn check_dense_layer(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let input = Tensor::rand_uniform(&mut rng, &[5], -1.0, 1.0)?;
    let p = layers::DenseParams {
        weights: Tensor::rand_uniform(&mut rng, &[3, 5], -1.0, 1.0)?,
        biases: Tensor::rand_uniform(&mut rng, &[3], -1.0, 1.0)?,
    };
    let grad_out = Tensor::rand_uniform(&mut rng, &[3], -1.0, 1.0)?;
    let (gi, gw, gb) = layers::dense_backward(&input, &p, &grad_out)?;
    let loss = |input: &Tensor, p: &layers::DenseParams| -> f64 {
        layers::dense_forward(input, p)
            .and_then(|o| o.mul(&grad_out))
            .map(|t| t.sum())
            .expect("shapes fixed")
    };
    let mut worst = 0.0f64;
    for i in 0..input.len() {
        let mut t = input.clone();
        let num = central_diff(
            |v| {
                t.data_mut()[i] = v;
                loss(&t, &p)
            },
            input.data()[i],
        );
        worst = worst.max(relative_error(gi.data()[i], num));
    }
    for i in 0..p.weights.len() {
        let mut pp = p.clone();
        let num = central_diff(
            |v| {
                pp.weights.data_mut()[i] = v;
                loss(&input, &pp)
            },
            p.weights.data()[i],
        );
        worst = worst.max(relative_error(gw.data()[i], num));
    }
    for i in 0..p.biases.len() {
        let mut pp = p.clone();
        let num = central_diff(
            |v| {
                pp.biases.data_mut()[i] = v;
                loss(&input, &pp)
            },
            p.biases.data()[i],
        );
        worst = worst.max(relative_error(gb.data()[i], num));
    }
    Ok(worst)
}

fn check_softmax_ce(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let logits = Tensor::rand_uniform(&mut rng, &[5], -2.0, 2.0)?;
    let label = rng.next_below(5);
    let g = layers::softmax_ce_backward(&logits, label)?;
    let mut worst = 0.0f64;
    for i in 0..logits.len() {
        let mut t = logits.clone();
        let num = central_diff(
            |v| {
                t.data_mut()[i] = v;
                layers::cross_entropy(&layers::softmax(&t), label).expect("valid label")
            },
            logits.data()[i],
        );
        worst = worst.max(relative_error(g.data()[i], num));
    }
    Ok(worst)
}

/// Runs per-layer checks for every layer kind present in `config`, plus an
/// end-to-end check over the full network, and reports the worst relative
/// error of each.
pub fn run(config: &NetworkConfig, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let net = network::init(config, seed)?;
    let mut checks = Vec::new();
    let mut kinds_seen = Vec::new();
    for layer in &config.layers {
        let name = match layer {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Pool { .. } => "pool",
            LayerSpec::Relu => "relu",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Softmax => "softmax_ce",
            LayerSpec::Flatten => continue,
        };
        if kinds_seen.contains(&name) {
            continue;
        }
        kinds_seen.push(name);
        let err = match layer {
            LayerSpec::Conv { .. } => check_conv_layer(seed)?,
            LayerSpec::Pool { .. } => check_pool_layer(seed)?,
            LayerSpec::Relu => check_relu_layer(seed)?,
            LayerSpec::Dense { .. } => check_dense_layer(seed)?,
            LayerSpec::Softmax => check_softmax_ce(seed)?,
            LayerSpec::Flatten => unreachable!(),
        };
        checks.push(LayerCheck { name: name.to_string(), worst_rel_err: err });
    }
    let e2e = check_network(&net, seed.wrapping_add(1))?;
    checks.push(LayerCheck { name: "network".to_string(), worst_rel_err: e2e });
    Ok(GradCheckReport { layers: checks, tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{builtin_config, BuiltinArch};

    #[test]
    fn paper2conv_small_passes() {
        let cfg = builtin_config(
            BuiltinArch::Paper2Conv,
            [1, 12, 12],
            vec!["bad".into(), "OK".into()],
        )
        .unwrap();
        let report = run(&cfg, 0, 1e-4).unwrap();
        assert!(report.passed(), "worst {}", report.worst());
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let cfg = builtin_config(
            BuiltinArch::Paper2Conv,
            [1, 10, 10],
            vec!["bad".into(), "OK".into()],
        )
        .unwrap();
        let net = network::init(&cfg, 3).unwrap();
        let mut rng = Rng::new(5);
        let image = Tensor::rand_uniform(&mut rng, &[1, 10, 10], 0.05, 0.95).unwrap();
        let trace = network::forward(&net, &image).unwrap();
        let mut grads = network::backward(&net, &trace, 0).unwrap();
        let worst_ok = compare_network_gradients(&net, &image, 0, &grads).unwrap();
        assert!(worst_ok <= 1e-4, "clean gradient failed: {worst_ok}");

        // Corrupt one conv kernel coordinate by a visible amount.
        grads.tensors[0].data_mut()[0] += 0.5;
        let worst_bad = compare_network_gradients(&net, &image, 0, &grads).unwrap();
        assert!(worst_bad > 1e-4, "corruption not detected: {worst_bad}");
    }

    #[test]
    fn deterministic_report() {
        let cfg = builtin_config(
            BuiltinArch::Paper2Conv,
            [1, 10, 10],
            vec!["bad".into(), "OK".into()],
        )
        .unwrap();
        let a = run(&cfg, 2, 1e-4).unwrap();
        let b = run(&cfg, 2, 1e-4).unwrap();
        let ea: Vec<f64> = a.layers.iter().map(|l| l.worst_rel_err).collect();
        let eb: Vec<f64> = b.layers.iter().map(|l| l.worst_rel_err).collect();
        assert_eq!(ea, eb);
    }
}
