//! Reverse-mode gradients against central finite differences (double precision).

#![allow(clippy::needless_range_loop, clippy::type_complexity)]

use proptest::prelude::*;
use sdci::tensor::{NormStats, Tape, Tensor, Var};

const H: f64 = 1e-6;
const TOL: f64 = 1e-5;

/// Projects any output to a scalar with fixed pseudo-random weights so every
/// output element contributes a distinct coefficient.
fn project(tape: &mut Tape<f64>, out: Var) -> Var {
    let n = tape.value(out).len();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.731 + 0.2).sin()).collect();
    let shape = tape.shape(out).to_vec();
    let wv = tape.constant_from(shape, w).unwrap();
    let prod = tape.mul(out, wv).unwrap();
    tape.sum(prod)
}

fn loss_at(build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = build(&mut tape, &vars);
    let loss = project(&mut tape, out);
    tape.scalar_value(loss)
}

/// Largest normwise relative error over all inputs.
fn gradcheck(build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var, inputs: Vec<Tensor<f64>>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = build(&mut tape, &vars);
    let loss = project(&mut tape, out);
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&tape, v);
        let mut numeric = vec![0.0; analytic.len()];
        for i in 0..analytic.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            numeric[i] = (loss_at(build, &plus) - loss_at(build, &minus)) / (2.0 * H);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = analytic
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt())
            .max(1e-8);
        worst = worst.max(diff / scale);
    }
    worst
}

fn t(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| ((i as f64 + 1.0) * 1.618 + seed as f64 * 2.39).sin() * 1.3)
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    let base = t(shape, seed);
    let data = base.data().iter().map(|v| v.abs() + 0.5).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

macro_rules! check {
    ($name:ident, [$($input:expr),*], |$tape:ident, $v:ident| $body:expr) => {
        #[test]
        fn $name() {
            let build = |$tape: &mut Tape<f64>, $v: &[Var]| -> Var { $body };
            let err = gradcheck(&build, vec![$($input),*]);
            assert!(err < TOL, "relative error {err:e}");
        }
    };
}

check!(matmul_grad, [t(&[3, 4], 1), t(&[4, 2], 2)], |tp, v| tp
    .matmul(v[0], v[1])
    .unwrap());
check!(add_sub_mul_grad, [t(&[2, 3], 1), t(&[2, 3], 2)], |tp, v| {
    let a = tp.add(v[0], v[1]).unwrap();
    let s = tp.sub(v[0], v[1]).unwrap();
    tp.mul(a, s).unwrap()
});
check!(
    row_broadcast_grad,
    [t(&[4, 3], 1), t(&[3], 2), t(&[3], 3)],
    |tp, v| {
        let a = tp.add_row(v[0], v[1]).unwrap();
        tp.mul_row(a, v[2]).unwrap()
    }
);
check!(
    col_broadcast_grad,
    [t(&[4, 3], 1), t(&[4, 1], 2)],
    |tp, v| tp.mul_col(v[0], v[1]).unwrap()
);
check!(scale_by_grad, [t(&[2, 3], 4), t(&[1], 5)], |tp, v| {
    let a = tp.scale_by(v[0], v[1]).unwrap();
    let b = tp.scale(a, -1.7);
    tp.add_scalar(b, 0.3)
});
check!(elu_grad, [t(&[3, 5], 6)], |tp, v| tp.elu(v[0]));
check!(relu_grad, [t(&[3, 5], 7)], |tp, v| tp.relu(v[0]));
check!(exp_log_grad, [positive(&[2, 4], 8)], |tp, v| {
    let e = tp.exp(v[0]);
    let l = tp.log(v[0]);
    tp.add(e, l).unwrap()
});
check!(softmax_grad, [t(&[3, 4], 9)], |tp, v| tp
    .softmax(v[0], 0.5)
    .unwrap());
check!(log_softmax_grad, [t(&[3, 4], 10)], |tp, v| tp
    .log_softmax(v[0], 0.7)
    .unwrap());
check!(sum_mean_grad, [t(&[3, 4], 11)], |tp, v| {
    let sq = tp.mul(v[0], v[0]).unwrap();
    let s = tp.sum(sq);
    let m = tp.mean(v[0]);
    tp.add(s, m).unwrap()
});
check!(
    concat_slice_grad,
    [t(&[3, 2], 12), t(&[3, 3], 13)],
    |tp, v| {
        let c = tp.concat_cols(&[v[0], v[1], v[0]]).unwrap();
        tp.slice_cols(c, 1, 6).unwrap()
    }
);
check!(gather_scatter_grad, [t(&[4, 3], 14)], |tp, v| {
    let g = tp.gather_rows(v[0], &[0, 2, 2, 3, 1, 0]).unwrap();
    let e = tp.elu(g);
    tp.scatter_add_rows(e, &[1, 0, 1, 2, 2, 0], 3).unwrap()
});
check!(reshape_transpose_grad, [t(&[2, 6], 15)], |tp, v| {
    let r = tp.reshape(v[0], [3, 4]).unwrap();
    let tr = tp.transpose(r).unwrap();
    tp.elu(tr)
});
check!(
    batch_norm_grad,
    [t(&[5, 3], 16), t(&[3], 17), t(&[3], 18)],
    |tp, v| {
        tp.batch_norm(v[0], v[1], v[2], 1e-5, NormStats::Batch)
            .unwrap()
            .0
    }
);
check!(
    batch_norm_running_grad,
    [t(&[5, 3], 19), t(&[3], 20), t(&[3], 21)],
    |tp, v| {
        let mean = [0.1, -0.2, 0.3];
        let var = [1.5, 0.7, 2.0];
        tp.batch_norm(
            v[0],
            v[1],
            v[2],
            1e-5,
            NormStats::Running {
                mean: &mean,
                var: &var,
            },
        )
        .unwrap()
        .0
    }
);
check!(
    conv1d_grad,
    [t(&[2, 6, 3], 22), t(&[4, 3, 3], 23)],
    |tp, v| tp.conv1d(v[0], v[1]).unwrap()
);
check!(
    conv1d_temporal_grad,
    [t(&[3, 5], 24), t(&[2, 3, 2], 25)],
    |tp, v| tp.conv1d_temporal(v[0], v[1]).unwrap()
);
check!(max_pool_time_grad, [t(&[2, 5, 3], 26)], |tp, v| tp
    .max_pool_time(v[0])
    .unwrap());

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Random two-layer composites: matmul, bias, ELU, softmax and a reduction.
    #[test]
    fn random_composites_match_finite_differences(
        m in 1usize..4, k in 1usize..5, n in 2usize..5, seed in 0u64..1000,
    ) {
        let build = |tp: &mut Tape<f64>, v: &[Var]| -> Var {
            let h = tp.matmul(v[0], v[1]).unwrap();
            let h = tp.add_row(h, v[2]).unwrap();
            let h = tp.elu(h);
            let p = tp.log_softmax(h, 0.5).unwrap();
            let q = tp.softmax(h, 1.3).unwrap();
            tp.mul(p, q).unwrap()
        };
        let err = gradcheck(&build, vec![t(&[m, k], seed), t(&[k, n], seed + 7), t(&[n], seed + 13)]);
        prop_assert!(err < TOL, "relative error {err:e}");
    }
}

#[test]
fn square_has_derivative_six_at_three() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(&Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    let grads = tape.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[6.0]);
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(&Tensor::scalar(3.0));
    let unused = tape.param(&Tensor::scalar(-1.0));
    let y = tape.mul(x, x).unwrap();
    let grads = tape.backward(y).unwrap();
    assert!(grads.get(unused).is_none());
    assert_eq!(grads.get_or_zeros(&tape, unused), vec![0.0]);
}

#[test]
fn non_scalar_loss_is_a_contract_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(&Tensor::new([2], vec![1.0, 2.0]).unwrap());
    assert!(matches!(tape.backward(x), Err(sdci::Error::Contract(_))));
}
