//! Central finite-difference verification of every differentiable operation.
//!
//! The oracle perturbs each input component by +-h, evaluates the scalarized
//! forward twice, and compares the quotient against the analytic gradient.
//! It exercises only the forward path, so it is independent of the backward
//! rules it checks.

use cafo_core::tensor::{Graph, Tensor, Var};
use rand::Rng;

const H: f64 = 1e-5;
const TOL_REL: f64 = 1e-4;
const TOL_ABS: f64 = 1e-7;

fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    cafo_core::rng::seed_stream(seed, 0x67726164)
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Scalarize an arbitrary output by a fixed random projection so every
/// output component influences the check.
fn project(g: &mut Graph, out: Var, coeffs: &Tensor) -> Var {
    let c = g.constant(coeffs.clone());
    let prod = g.mul(out, c).unwrap();
    g.sum_all(prod)
}

/// Verify d(project(f(inputs)))/d(inputs) against central differences.
fn gradcheck(
    name: &str,
    inputs: &[Tensor],
    f: &dyn Fn(&mut Graph, &[Var]) -> Var,
    seed: u64,
) {
    let mut r = rng(seed);
    // fixed projection coefficients sized from a probe evaluation
    let probe_shape = {
        let mut g = Graph::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.shape(out).to_vec()
    };
    let coeffs = random_tensor(&probe_shape, &mut r);

    let eval = |tensors: &[Tensor]| -> f64 {
        let mut g = Graph::inference();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars);
        let scalar = project(&mut g, out, &coeffs);
        g.value(scalar).data()[0]
    };

    // analytic gradients
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars);
    let scalar = project(&mut g, out, &coeffs);
    g.backward(scalar).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();

    let mut worst: f64 = 0.0;
    for (ti, t) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[ti].data_mut()[i] += H;
            minus[ti].data_mut()[i] -= H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let an = analytic[ti].data()[i];
            let err = (an - fd).abs();
            let scale = an.abs().max(fd.abs());
            let rel = err / scale.max(1.0);
            worst = worst.max(rel);
            assert!(
                err <= TOL_ABS + TOL_REL * scale,
                "{name}: input {ti} component {i}: analytic {an}, fd {fd}, err {err}"
            );
        }
    }
    eprintln!("gradcheck {name}: max scaled error {worst:.3e}");
}

#[test]
fn elementwise_binary_ops() {
    let mut r = rng(1);
    for trial in 0..3 {
        let a = random_tensor(&[2, 3], &mut r);
        let mut b = random_tensor(&[2, 3], &mut r);
        // keep divisors away from zero
        for v in b.data_mut() {
            *v = v.signum() * (v.abs() + 0.5);
        }
        gradcheck("add", &[a.clone(), b.clone()], &|g, v| g.add(v[0], v[1]).unwrap(), 10 + trial);
        gradcheck("sub", &[a.clone(), b.clone()], &|g, v| g.sub(v[0], v[1]).unwrap(), 20 + trial);
        gradcheck("mul", &[a.clone(), b.clone()], &|g, v| g.mul(v[0], v[1]).unwrap(), 30 + trial);
        gradcheck("div", &[a, b], &|g, v| g.div(v[0], v[1]).unwrap(), 40 + trial);
    }
}

#[test]
fn scalar_and_activation_ops() {
    let mut r = rng(2);
    for trial in 0..3 {
        let mut a = random_tensor(&[7], &mut r);
        // keep relu/abs kinks away from the probe
        for v in a.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        gradcheck("add_scalar", &[a.clone()], &|g, v| g.add_scalar(v[0], 0.7), 50 + trial);
        gradcheck("mul_scalar", &[a.clone()], &|g, v| g.mul_scalar(v[0], -1.3), 60 + trial);
        gradcheck("sigmoid", &[a.clone()], &|g, v| g.sigmoid(v[0]), 70 + trial);
        gradcheck("relu", &[a.clone()], &|g, v| g.relu(v[0]), 80 + trial);
        gradcheck("abs", &[a], &|g, v| g.abs(v[0]), 90 + trial);
    }
}

#[test]
fn reduction_and_shape_ops() {
    let mut r = rng(3);
    for trial in 0..3 {
        let a = random_tensor(&[2, 3, 4], &mut r);
        gradcheck("sum_all", &[a.clone()], &|g, v| g.sum_all(v[0]), 100 + trial);
        gradcheck("mean_all", &[a.clone()], &|g, v| g.mean_all(v[0]), 110 + trial);
        gradcheck("sum_axis0", &[a.clone()], &|g, v| g.sum_axis(v[0], 0).unwrap(), 120 + trial);
        gradcheck("mean_axis1", &[a.clone()], &|g, v| g.mean_axis(v[0], 1).unwrap(), 130 + trial);
        gradcheck("sum_axis2", &[a.clone()], &|g, v| g.sum_axis(v[0], 2).unwrap(), 140 + trial);
        gradcheck(
            "reshape",
            &[a.clone()],
            &|g, v| g.reshape(v[0], vec![6, 4]).unwrap(),
            150 + trial,
        );
        let m = random_tensor(&[3, 5], &mut r);
        gradcheck("transpose", &[m.clone()], &|g, v| g.transpose(v[0]).unwrap(), 160 + trial);
        gradcheck("row", &[m], &|g, v| g.row(v[0], 1).unwrap(), 170 + trial);
    }
}

#[test]
fn vector_and_linear_ops() {
    let mut r = rng(4);
    for trial in 0..3 {
        let a = random_tensor(&[6], &mut r);
        let b = random_tensor(&[6], &mut r);
        gradcheck("dot", &[a.clone(), b.clone()], &|g, v| g.dot(v[0], v[1]).unwrap(), 200 + trial);
        gradcheck("l2_norm", &[a.clone()], &|g, v| g.l2_norm(v[0]).unwrap(), 210 + trial);
        let s = Tensor::new(vec![], vec![1.4 + trial as f64 * 0.3]).unwrap();
        gradcheck(
            "scale",
            &[a.clone(), s.clone()],
            &|g, v| g.scale(v[0], v[1]).unwrap(),
            220 + trial,
        );
        gradcheck(
            "div_scalar_node",
            &[a, s],
            &|g, v| g.div_scalar_node(v[0], v[1]).unwrap(),
            230 + trial,
        );
        let m1 = random_tensor(&[3, 4], &mut r);
        let m2 = random_tensor(&[4, 2], &mut r);
        gradcheck(
            "matmul",
            &[m1, m2],
            &|g, v| g.matmul(v[0], v[1]).unwrap(),
            240 + trial,
        );
        let x = random_tensor(&[3, 4], &mut r);
        let bias = random_tensor(&[4], &mut r);
        gradcheck(
            "add_bias",
            &[x, bias],
            &|g, v| g.add_bias(v[0], v[1]).unwrap(),
            250 + trial,
        );
    }
}

#[test]
fn convolution_ops() {
    let mut r = rng(5);
    for (trial, (stride, pad)) in [(1usize, 0usize), (1, 1), (2, 1)].into_iter().enumerate() {
        let x = random_tensor(&[2, 3, 6, 6], &mut r);
        let w = random_tensor(&[4, 3, 3, 3], &mut r);
        let b = random_tensor(&[4], &mut r);
        gradcheck(
            &format!("conv2d s{stride} p{pad}"),
            &[x, w, b],
            &move |g, v| g.conv2d(v[0], v[1], v[2], stride, pad).unwrap(),
            300 + trial as u64,
        );
        let x = random_tensor(&[2, 3, 5, 5], &mut r);
        let w = random_tensor(&[2, 3, 3, 3], &mut r);
        let b = random_tensor(&[6], &mut r);
        gradcheck(
            &format!("depthwise s{stride} p{pad}"),
            &[x, w, b],
            &move |g, v| g.depthwise_conv2d(v[0], v[1], v[2], stride, pad).unwrap(),
            310 + trial as u64,
        );
        let x = random_tensor(&[2, 3, 5, 5], &mut r);
        let w = random_tensor(&[2, 3, 3, 3], &mut r);
        let b = random_tensor(&[6], &mut r);
        gradcheck(
            &format!("depthwise_avgmax s{stride} p{pad}"),
            &[x, w, b],
            &move |g, v| g.depthwise_conv_avgmax_sum(v[0], v[1], v[2], stride, pad).unwrap(),
            320 + trial as u64,
        );
    }
}

#[test]
fn pooling_ops() {
    let mut r = rng(6);
    for trial in 0..3 {
        let x = random_tensor(&[2, 3, 6, 6], &mut r);
        gradcheck("avg_pool", &[x.clone()], &|g, v| g.avg_pool2d(v[0], 2, 2).unwrap(), 400 + trial);
        gradcheck("max_pool", &[x.clone()], &|g, v| g.max_pool2d(v[0], 2, 2).unwrap(), 410 + trial);
        gradcheck(
            "global_avg_pool",
            &[x.clone()],
            &|g, v| g.global_avg_pool(v[0]).unwrap(),
            420 + trial,
        );
        gradcheck(
            "global_max_pool",
            &[x],
            &|g, v| g.global_max_pool(v[0]).unwrap(),
            430 + trial,
        );
    }
}

#[test]
fn channel_gating_and_cross_entropy() {
    let mut r = rng(7);
    for trial in 0..3 {
        let x = random_tensor(&[2, 3, 4, 4], &mut r);
        let a = random_tensor(&[2, 3], &mut r);
        gradcheck(
            "mul_channel",
            &[x, a],
            &|g, v| g.mul_channel(v[0], v[1]).unwrap(),
            500 + trial,
        );
        let logits = random_tensor(&[4, 3], &mut r);
        gradcheck(
            "softmax_cross_entropy",
            &[logits],
            &|g, v| g.softmax_cross_entropy(v[0], &[0, 2, 1, 1]).unwrap(),
            510 + trial,
        );
    }
}

#[test]
fn qr_ortho_loss_gradient() {
    // away from degeneracies (pivots bounded from zero) the loss is smooth
    let mut r = rng(9);
    for trial in 0..10 {
        let a = loop {
            let cand = random_tensor(&[3, 5], &mut r);
            let f = cafo_core::qr::qr_decompose(&cand).unwrap();
            if (0..3).all(|i| f.r.at2(i, i).abs() > 1e-3) {
                break cand;
            }
        };
        gradcheck(
            "qr_ortho_loss",
            &[a],
            &|g, v| cafo_core::qr::qr_ortho_loss_graph(g, v[0]).unwrap(),
            600 + trial,
        );
    }
}

#[test]
fn full_model_gradient() {
    // attention head + backbone + cross-entropy on a small random instance
    use cafo_core::model::{insert_params, model_forward, BackboneConfig, ConvBlock, DepCaConfig, ModelConfig, ModelParams};
    let cfg = ModelConfig {
        depca: DepCaConfig { gamma: 2, kernel_size: 3, stride: 1, padding: 1 },
        backbone: BackboneConfig {
            conv_blocks: vec![ConvBlock { out_channels: 3, kernel_size: 3, stride: 2 }],
            hidden_width: None,
            num_classes: 3,
        },
    };
    let mut r = rng(10);
    for trial in 0..10 {
        let mut params = ModelParams::init(&cfg, 3, 7000 + trial).unwrap();
        // perturb biases and the classifier so no gradient path starts at zero
        for t in params.tensors.iter_mut() {
            for v in t.data_mut() {
                *v += r.gen_range(-0.3..0.3);
            }
        }
        let stack = random_tensor(&[2, 3, 6, 6], &mut r);
        let labels = vec![(trial % 3) as usize, ((trial + 1) % 3) as usize];
        let inputs: Vec<Tensor> = params.tensors.clone();
        let stack_for_eval = stack.clone();
        let cfg_ref = cfg.clone();
        let f = move |g: &mut Graph, vars: &[Var]| -> Var {
            let stack_var = g.constant(stack_for_eval.clone());
            let shell = ModelParams {
                cfg: cfg_ref.clone(),
                in_features: 3,
                tensors: vec![],
            };
            let mv = cafo_core::model::ModelVars { vars: vars.to_vec() };
            let (logits, _) = model_forward(g, stack_var, &shell, &mv).unwrap();
            g.softmax_cross_entropy(logits, &labels).unwrap()
        };
        gradcheck(&format!("full model {trial}"), &inputs, &f, 700 + trial);
    }
}

#[test]
fn fused_depthwise_pool_matches_composition() {
    let mut r = rng(8);
    for _ in 0..5 {
        let x = random_tensor(&[2, 4, 6, 6], &mut r);
        let w = random_tensor(&[3, 4, 3, 3], &mut r);
        let b = random_tensor(&[12], &mut r);
        let mut g = Graph::inference();
        let (xv, wv, bv) = (g.leaf(x.clone()), g.leaf(w.clone()), g.leaf(b.clone()));
        let fused = g.depthwise_conv_avgmax_sum(xv, wv, bv, 1, 1).unwrap();
        let conv = g.depthwise_conv2d(xv, wv, bv, 1, 1).unwrap();
        let avg = g.global_avg_pool(conv).unwrap();
        let max = g.global_max_pool(conv).unwrap();
        let composed = g.add(avg, max).unwrap();
        for (f, c) in g.value(fused).data().iter().zip(g.value(composed).data()) {
            assert!((f - c).abs() < 1e-12);
        }
    }
}
