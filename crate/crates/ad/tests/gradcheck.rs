//! Central finite-difference oracles for every primitive, the nested
//! forward-over-reverse check, and bit-level determinism.
//!
//! The FD oracle itself has error ~ f'''(x) h^2 / 6, so inputs are kept away
//! from the few spots where that term, not the gradient, dominates: kinks of
//! abs/leaky-relu/max and the high-curvature core of softplus(beta=100).
//! Errors are measured per element as |g - g_fd| / max(1, |g_fd|).

use std::rc::Rc;

use dynbody_ad::graph::{Graph, Var};
use dynbody_ad::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-4;
const TOL: f64 = 1e-6;

fn rng(tag: &str) -> ChaCha8Rng {
    dynbody_ad::init::stream(0x5eed, tag)
}

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| r.gen::<f64>() * (hi - lo) + lo).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Uniform in [-2,2] excluding a band around zero.
fn rand_tensor_no_zero(r: &mut ChaCha8Rng, shape: &[usize], band: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = band + r.gen::<f64>() * (2.0 - band);
            if r.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Scalarize an arbitrary output with fixed mixing weights so every output
/// element participates in the loss.
fn mix(g: &Graph, y: &Var, tag: &str) -> Var {
    let mut r = rng(&format!("mix-{tag}"));
    let w = rand_tensor(&mut r, &y.shape(), -1.0, 1.0);
    y.mul(&g.leaf(w)).sum_all()
}

fn loss_value(inputs: &[Tensor], build: &dyn Fn(&Graph, &[Var]) -> Var, tag: &str) -> f64 {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let y = build(&g, &vars);
    mix(&g, &y, tag).value().item().unwrap()
}

fn gradcheck(tag: &str, inputs: &[Tensor], build: &dyn Fn(&Graph, &[Var]) -> Var) {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let y = build(&g, &vars);
    let loss = mix(&g, &y, tag);
    let refs: Vec<&Var> = vars.iter().collect();
    let grads = g.backward(&loss, &refs).unwrap();

    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= FD_STEP;
            let fd = (loss_value(&plus, build, tag) - loss_value(&minus, build, tag))
                / (2.0 * FD_STEP);
            let got = grads[i].data()[e];
            let rel = (got - fd).abs() / fd.abs().max(1.0);
            assert!(
                rel < TOL,
                "{tag}: input {i} elem {e}: reverse {got} vs fd {fd} (rel {rel:.3e})"
            );
        }
    }
}

#[test]
fn elementwise_binary_ops() {
    let mut r = rng("ewbin");
    let a = rand_tensor(&mut r, &[3, 4], -2.0, 2.0);
    let b = rand_tensor(&mut r, &[3, 4], -2.0, 2.0);
    gradcheck("add", &[a.clone(), b.clone()], &|_, v| v[0].add(&v[1]));
    gradcheck("sub", &[a.clone(), b.clone()], &|_, v| v[0].sub(&v[1]));
    gradcheck("mul", &[a.clone(), b], &|_, v| v[0].mul(&v[1]));
    let denom = rand_tensor_no_zero(&mut r, &[3, 4], 0.3);
    gradcheck("div", &[a, denom], &|_, v| v[0].div(&v[1]));
}

#[test]
fn elementwise_unary_ops() {
    let mut r = rng("ewun");
    let x = rand_tensor(&mut r, &[2, 5], -2.0, 2.0);
    gradcheck("neg", &[x.clone()], &|_, v| v[0].neg());
    gradcheck("add_scalar", &[x.clone()], &|_, v| v[0].add_scalar(0.7));
    gradcheck("mul_scalar", &[x.clone()], &|_, v| v[0].mul_scalar(-1.3));
    gradcheck("exp", &[x.clone()], &|_, v| v[0].exp());
    gradcheck("sin", &[x.clone()], &|_, v| v[0].sin());
    gradcheck("cos", &[x.clone()], &|_, v| v[0].cos());
    gradcheck("tanh", &[x.clone()], &|_, v| v[0].tanh());
    let pos = rand_tensor(&mut r, &[2, 5], 0.5, 2.0);
    gradcheck("ln", &[pos.clone()], &|_, v| v[0].ln());
    gradcheck("sqrt", &[pos], &|_, v| v[0].sqrt());
    let off_kink = rand_tensor_no_zero(&mut r, &[2, 5], 0.05);
    gradcheck("abs", &[off_kink.clone()], &|_, v| v[0].abs());
    gradcheck("leaky_relu", &[off_kink.clone()], &|_, v| {
        v[0].leaky_relu(0.2)
    });
    gradcheck("softplus", &[off_kink.clone()], &|_, v| {
        v[0].softplus(100.0, 20.0)
    });
    gradcheck("softplus_soft", &[off_kink.clone()], &|_, v| {
        v[0].softplus(1.0, 20.0)
    });
    gradcheck("sigmoid_beta", &[off_kink], &|_, v| {
        v[0].sigmoid_beta(1.0, 20.0)
    });
}

#[test]
fn matmul_and_linear_layers() {
    let mut r = rng("mm");
    let a = rand_tensor(&mut r, &[4, 3], -2.0, 2.0);
    let b = rand_tensor(&mut r, &[3, 5], -2.0, 2.0);
    gradcheck("matmul", &[a, b], &|_, v| v[0].matmul(&v[1]));
    let x = rand_tensor(&mut r, &[6, 4], -2.0, 2.0);
    let bias = rand_tensor(&mut r, &[4], -2.0, 2.0);
    gradcheck("add_row", &[x, bias], &|_, v| v[0].add_row(&v[1]));
}

#[test]
fn conv_ops() {
    let mut r = rng("conv");
    let x = rand_tensor(&mut r, &[2, 6, 6], -2.0, 2.0);
    let w = rand_tensor(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
    gradcheck("conv2d_s1", &[x.clone(), w.clone()], &|_, v| {
        v[0].conv2d(&v[1], 1, 1)
    });
    gradcheck("conv2d_s2", &[x, w], &|_, v| v[0].conv2d(&v[1], 2, 1));

    let xt = rand_tensor(&mut r, &[3, 4, 4], -2.0, 2.0);
    let wt = rand_tensor(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
    gradcheck("convt2d_s1", &[xt.clone(), wt.clone()], &|_, v| {
        v[0].conv2d_transpose(&v[1], 1, 1, 0)
    });
    gradcheck("convt2d_s2", &[xt, wt], &|_, v| {
        v[0].conv2d_transpose(&v[1], 2, 1, 1)
    });
}

#[test]
fn conv_and_transpose_are_adjoint() {
    // <conv(x; w), y> == <x, convT(y; w')> with w' the [Ci,Co,k,k] view of w.
    let mut r = rng("adjoint");
    let x = rand_tensor(&mut r, &[2, 8, 8], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
    let mut wt = Tensor::zeros(&[3, 2, 3, 3]);
    wt.data_mut().copy_from_slice(w.data());
    for stride in [1usize, 2] {
        let g = Graph::new();
        let xv = g.leaf(x.clone());
        let wv = g.leaf(w.clone());
        let yv = xv.conv2d(&wv, stride, 1);
        let yshape = yv.shape();
        let y = rand_tensor(&mut r, &yshape, -1.0, 1.0);
        let lhs: f64 = yv
            .value()
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| a * b)
            .sum();
        // convT with weights indexed [Cout(=co of conv), Cin-of-output, ...]
        let gv = g.leaf(y.clone());
        let wtv = g.leaf(wt.clone());
        let out_pad = x.shape()[1] - ((y.shape()[1] - 1) * stride + 3 - 2);
        let back = gv.conv2d_transpose(&wtv, stride, 1, out_pad);
        let rhs: f64 = back
            .value()
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| a * b)
            .sum();
        assert!(
            (lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0),
            "adjoint identity failed at stride {stride}: {lhs} vs {rhs}"
        );
    }
}

#[test]
fn reductions_and_broadcasts() {
    let mut r = rng("red");
    let x = rand_tensor(&mut r, &[3, 4], -2.0, 2.0);
    gradcheck("sum_all", &[x.clone()], &|_, v| v[0].sum_all());
    gradcheck("mean_all", &[x.clone()], &|_, v| v[0].mean_all());
    gradcheck("sum_last", &[x.clone()], &|_, v| v[0].sum_last());
    gradcheck("norm_last", &[x.clone()], &|_, v| v[0].norm_last(1e-24));

    // Rows with well-separated maxima keep the FD oracle valid for max.
    let mut xm = x.clone();
    for row in 0..3 {
        xm.data_mut()[row * 4 + row] = 5.0 + row as f64;
    }
    gradcheck("max_last", &[xm], &|_, v| v[0].max_last());

    let b = rand_tensor_no_zero(&mut r, &[3, 1], 0.3);
    gradcheck("add_bcast", &[x.clone(), b.clone()], &|_, v| {
        v[0].add_bcast_last(&v[1])
    });
    gradcheck("sub_bcast", &[x.clone(), b.clone()], &|_, v| {
        v[0].sub_bcast_last(&v[1])
    });
    gradcheck("mul_bcast", &[x.clone(), b.clone()], &|_, v| {
        v[0].mul_bcast_last(&v[1])
    });
    gradcheck("div_bcast", &[x.clone(), b], &|_, v| {
        v[0].div_bcast_last(&v[1])
    });
    gradcheck("softmax_last", &[x], &|_, v| v[0].softmax_last());
}

#[test]
fn structural_ops() {
    let mut r = rng("struct");
    let a = rand_tensor(&mut r, &[3, 4], -2.0, 2.0);
    let b = rand_tensor(&mut r, &[3, 2], -2.0, 2.0);
    gradcheck("concat_last", &[a.clone(), b], &|_, v| {
        Var::concat(1, &[&v[0], &v[1]])
    });
    let c0 = rand_tensor(&mut r, &[2, 3, 3], -2.0, 2.0);
    let c1 = rand_tensor(&mut r, &[1, 3, 3], -2.0, 2.0);
    gradcheck("concat_axis0", &[c0, c1], &|_, v| {
        Var::concat(0, &[&v[0], &v[1]])
    });
    gradcheck("narrow_last", &[a.clone()], &|_, v| v[0].narrow_last(1, 2));
    gradcheck("reshape", &[a.clone()], &|_, v| v[0].reshape(&[2, 6]));
    gradcheck("repeat_rows", &[a.clone()], &|_, v| v[0].repeat_rows(3));
    let idx = Rc::new(vec![2usize, 0, 2, 1]);
    gradcheck("index_select0", &[a.clone()], &|_, v| {
        v[0].index_select0(idx.clone())
    });

    let grid = rand_tensor(&mut r, &[2, 5, 5], -2.0, 2.0);
    let coords = Rc::new(vec![(0.31, 0.77), (0.5, 0.5), (0.02, 0.98), (0.9, 0.11)]);
    gradcheck("bilinear_sample", &[grid], &|_, v| {
        v[0].bilinear_sample(coords.clone())
    });

    let feat = rand_tensor(&mut r, &[2, 3, 4], -2.0, 2.0);
    let w = rand_tensor(&mut r, &[2, 3], -2.0, 2.0);
    gradcheck("weighted_pool", &[feat, w], &|_, v| {
        v[0].weighted_pool(&v[1])
    });
}

/// Nested check: the forward tangent of a small MLP enters a scalar loss and
/// the loss gradient w.r.t. the MLP parameters is compared against central
/// finite differences of the inner directional derivative.
#[test]
fn forward_over_reverse_matches_fd() {
    use dynbody_ad::dual::Dual;

    let mut r = rng("nested");
    // Two-layer MLP: R^3 -> R, softplus activations. ~10^2 params.
    let w1 = rand_tensor(&mut r, &[3, 16], -0.5, 0.5);
    let b1 = rand_tensor(&mut r, &[16], -0.5, 0.5);
    let w2 = rand_tensor(&mut r, &[16, 1], -0.5, 0.5);
    let q = rand_tensor(&mut r, &[4, 3], -1.0, 1.0);
    let seed = rand_tensor(&mut r, &[4, 3], -1.0, 1.0);

    let inner = |params: &[Tensor]| -> f64 {
        let g = Graph::new();
        let qv = Dual::seeded(g.leaf(q.clone()), vec![g.leaf(seed.clone())]);
        let w1v = Dual::constant(g.leaf(params[0].clone()), 1);
        let b1v = Dual::constant(g.leaf(params[1].clone()), 1);
        let w2v = Dual::constant(g.leaf(params[2].clone()), 1);
        let h = qv.matmul(&w1v).add_row(&b1v).softplus(100.0, 20.0);
        let y = h.matmul(&w2v);
        // Loss on the tangent itself: sum of squared directional derivatives.
        let t = y.t[0].clone().unwrap();
        t.square().sum_all().value().item().unwrap()
    };

    // Reverse gradients of that same loss w.r.t. parameters.
    let g = Graph::new();
    let w1v = g.leaf(w1.clone());
    let b1v = g.leaf(b1.clone());
    let w2v = g.leaf(w2.clone());
    let qv = Dual::seeded(g.leaf(q.clone()), vec![g.leaf(seed.clone())]);
    let h = qv
        .matmul(&Dual::constant(w1v.clone(), 1))
        .add_row(&Dual::constant(b1v.clone(), 1))
        .softplus(100.0, 20.0);
    let y = h.matmul(&Dual::constant(w2v.clone(), 1));
    let t = y.t[0].clone().unwrap();
    let loss = t.square().sum_all();
    let grads = g.backward(&loss, &[&w1v, &b1v, &w2v]).unwrap();

    let params = [w1, b1, w2];
    for (pi, p) in params.iter().enumerate() {
        // Probe a deterministic subset of elements to keep runtime low.
        let stride = (p.numel() / 6).max(1);
        for e in (0..p.numel()).step_by(stride) {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[e] += FD_STEP;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[e] -= FD_STEP;
            let fd = (inner(&plus) - inner(&minus)) / (2.0 * FD_STEP);
            let got = grads[pi].data()[e];
            let rel = (got - fd).abs() / fd.abs().max(1.0);
            assert!(
                rel < 1e-5,
                "nested param {pi} elem {e}: reverse {got} vs fd {fd} (rel {rel:.3e})"
            );
        }
    }
}

/// Two identically seeded optimization runs produce bit-identical parameter
/// trajectories.
#[test]
fn training_is_bit_deterministic()  {
    use dynbody_ad::adam::AdamState;

    let run = || -> Vec<u64> {
        let mut w = dynbody_ad::init::uniform_fan_in(&[4, 4], 4, 99, "w");
        let mut adam = AdamState::new(1e-2, &[vec![4, 4]]);
        let x = Tensor::new(vec![2, 4], vec![0.3, -1.0, 0.7, 2.0, 1.1, 0.0, -0.5, 0.25]).unwrap();
        for _ in 0..50 {
            let g = Graph::new();
            let wv = g.leaf(w.clone());
            let xv = g.leaf(x.clone());
            let y = xv.matmul(&wv).tanh();
            let loss = y.square().mean_all();
            let grads = g.backward(&loss, &[&wv]).unwrap();
            adam.step(std::slice::from_mut(&mut w), &grads).unwrap();
        }
        w.data().iter().map(|v| v.to_bits()).collect()
    };
    assert_eq!(run(), run());
}
