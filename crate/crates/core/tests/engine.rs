//! Finite-difference verification of every engine op's backward pass.
//!
//! Each case builds a scalar loss from one op applied to seeded inputs,
//! computes the analytic input gradient via the tape, and compares against
//! central differences at double precision.

use ndarray::{ArrayD, IxDyn};
use pdm_core::check::{finite_diff_grad, rel_err};
use pdm_core::graph::{Arr, Graph, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn rand_arr(shape: &[usize], seed: u64, scale: f64, offset: f64) -> Arr {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen::<f64>() * scale + offset)
}

/// Check d(loss)/d(inputs[0]) where `build` maps input vars to an output var
/// and the loss is a fixed weighted sum of the output (so reductions are
/// exercised too).
fn check_op(inputs: &[Arr], build: &dyn Fn(&Graph, &[Var]) -> Var, tol: f64) {
    // Loss = sum(out * w) with fixed pseudo-random weights to make the
    // incoming gradient non-uniform.
    let run = |vals: &[Arr]| -> (f64, Vec<Vec<f64>>) {
        let g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|a| g.input(a.clone())).collect();
        let out = build(&g, &vars);
        let w = rand_arr(&g.shape(out), 999, 2.0, -1.0);
        let wv = g.input(w);
        let loss = g.sum_all(g.mul(out, wv));
        let lv = g.scalar_value(loss);
        let grads = g.backward(loss);
        let gs = vars
            .iter()
            .map(|v| {
                grads
                    .get(*v)
                    .map(|a| a.iter().cloned().collect::<Vec<f64>>())
                    .unwrap_or_else(|| vec![0.0; g.value(*v).len()])
            })
            .collect();
        (lv, gs)
    };

    let (_, analytic) = run(inputs);
    for (i, input) in inputs.iter().enumerate() {
        let flat: Vec<f64> = input.iter().cloned().collect();
        let mut f = |x: &[f64]| {
            let mut vals = inputs.to_vec();
            vals[i] = ArrayD::from_shape_vec(input.raw_dim(), x.to_vec()).unwrap();
            run(&vals).0
        };
        let fd = finite_diff_grad(&mut f, &flat, 1e-6);
        let err = rel_err(&analytic[i], &fd);
        assert!(
            err < tol,
            "input {i}: rel err {err} (analytic {:?} vs fd {:?})",
            &analytic[i][..analytic[i].len().min(4)],
            &fd[..fd.len().min(4)]
        );
    }
}

#[test]
fn grad_elementwise_ops() {
    let a = rand_arr(&[2, 3], 1, 2.0, -1.0);
    let b = rand_arr(&[2, 3], 2, 2.0, 0.5); // positive, usable as divisor
    check_op(&[a.clone(), b.clone()], &|g, v| g.add(v[0], v[1]), 1e-7);
    check_op(&[a.clone(), b.clone()], &|g, v| g.sub(v[0], v[1]), 1e-7);
    check_op(&[a.clone(), b.clone()], &|g, v| g.mul(v[0], v[1]), 1e-7);
    check_op(&[a.clone(), b.clone()], &|g, v| g.div(v[0], v[1]), 1e-6);
    check_op(&[a.clone()], &|g, v| g.neg(v[0]), 1e-7);
    check_op(&[a.clone()], &|g, v| g.scale(v[0], -2.5), 1e-7);
    check_op(&[a.clone()], &|g, v| g.add_scalar(v[0], 3.0), 1e-7);
    check_op(&[a.clone()], &|g, v| g.tanh(v[0]), 1e-6);
    check_op(&[a.clone()], &|g, v| g.silu(v[0]), 1e-6);
    check_op(&[a.clone()], &|g, v| g.elu1p(v[0]), 1e-6);
    check_op(&[a.clone()], &|g, v| g.exp(v[0]), 1e-6);
    check_op(&[b.clone()], &|g, v| g.sqrt(v[0]), 1e-6);
    // abs away from the kink
    let c = rand_arr(&[2, 3], 3, 2.0, 1.0);
    check_op(&[c.clone()], &|g, v| g.abs(v[0]), 1e-6);
    check_op(&[c], &|g, v| g.abs(g.neg(v[0])), 1e-6);
}

#[test]
fn grad_reductions_and_scalar_ops() {
    let a = rand_arr(&[3, 2], 4, 2.0, -1.0);
    let s = rand_arr(&[], 5, 1.0, 1.5); // positive scalar
    check_op(&[a.clone()], &|g, v| g.sum_all(v[0]), 1e-7);
    check_op(&[a.clone()], &|g, v| g.mean_all(v[0]), 1e-7);
    check_op(
        &[a.clone(), s.clone()],
        &|g, v| g.mul_scalar_var(v[0], v[1]),
        1e-6,
    );
    check_op(
        &[a.clone(), s.clone()],
        &|g, v| g.div_scalar_var(v[0], v[1]),
        1e-6,
    );
}

#[test]
fn grad_broadcast_affines() {
    let x = rand_arr(&[2, 3, 2, 2], 6, 2.0, -1.0);
    let bias = rand_arr(&[3], 7, 1.0, -0.5);
    let w = rand_arr(&[3], 8, 1.0, 0.5);
    check_op(
        &[x.clone(), bias.clone()],
        &|g, v| g.add_bias_chan(v[0], v[1]),
        1e-7,
    );
    check_op(
        &[x.clone(), w.clone(), bias.clone()],
        &|g, v| g.chan_affine_static(v[0], v[1], v[2]),
        1e-7,
    );
    let s = rand_arr(&[2, 3], 9, 1.0, 0.5);
    let t = rand_arr(&[2, 3], 10, 1.0, -0.5);
    check_op(
        &[x.clone(), s, t],
        &|g, v| g.chan_affine_batch(v[0], v[1], v[2]),
        1e-7,
    );
    let x2 = rand_arr(&[4, 3], 11, 2.0, -1.0);
    check_op(&[x2, bias], &|g, v| g.add_rowvec(v[0], v[1]), 1e-7);
}

#[test]
fn grad_matmul_family() {
    let a = rand_arr(&[3, 4], 12, 1.0, -0.5);
    let b = rand_arr(&[4, 2], 13, 1.0, -0.5);
    check_op(&[a, b], &|g, v| g.matmul(v[0], v[1]), 1e-6);
    let ba = rand_arr(&[2, 3, 4], 14, 1.0, -0.5);
    let bb = rand_arr(&[2, 4, 2], 15, 1.0, -0.5);
    check_op(&[ba.clone(), bb], &|g, v| g.bmm(v[0], v[1]), 1e-6);
    check_op(&[ba.clone()], &|g, v| g.transpose12(v[0]), 1e-7);
    check_op(&[ba], &|g, v| g.reshape(v[0], &[4, 6]), 1e-7);
}

#[test]
fn grad_softmax() {
    let a = rand_arr(&[2, 3, 4], 16, 3.0, -1.5);
    check_op(&[a], &|g, v| g.softmax_last(v[0]), 1e-6);
}

#[test]
fn grad_conv_pool_upsample() {
    let x = rand_arr(&[2, 3, 4, 4], 17, 1.0, -0.5);
    let w3 = rand_arr(&[2, 3, 3, 3], 18, 0.5, -0.25);
    let w1 = rand_arr(&[4, 3, 1, 1], 19, 0.5, -0.25);
    let bias = rand_arr(&[2], 20, 0.5, -0.25);
    check_op(
        &[x.clone(), w3.clone(), bias],
        &|g, v| g.conv2d(v[0], v[1], Some(v[2])),
        1e-6,
    );
    check_op(
        &[x.clone(), w1],
        &|g, v| g.conv2d(v[0], v[1], None),
        1e-6,
    );
    check_op(&[x.clone()], &|g, v| g.avg_pool2(v[0]), 1e-7);
    check_op(&[x], &|g, v| g.upsample2(v[0]), 1e-7);
}

#[test]
fn grad_group_norm() {
    let x = rand_arr(&[2, 4, 3, 3], 21, 2.0, -1.0);
    check_op(&[x.clone()], &|g, v| g.group_norm(v[0], 2, 1e-6), 1e-5);
    check_op(&[x], &|g, v| g.group_norm(v[0], 4, 1e-6), 1e-5);
}

#[test]
fn grad_composed_network_fragment() {
    // conv -> group_norm -> silu -> pool -> upsample -> tanh chain, checking
    // that gradients survive composition.
    let x = rand_arr(&[1, 2, 4, 4], 22, 1.0, -0.5);
    let w = rand_arr(&[2, 2, 3, 3], 23, 0.5, -0.25);
    check_op(
        &[x, w],
        &|g, v| {
            let c = g.conv2d(v[0], v[1], None);
            let n = g.group_norm(c, 1, 1e-6);
            let s = g.silu(n);
            let p = g.avg_pool2(s);
            let u = g.upsample2(p);
            g.tanh(u)
        },
        1e-5,
    );
}
