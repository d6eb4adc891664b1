//! Per-primitive gradient checks: for every tape op, the analytic gradient
//! must match central finite differences within relative error 1e-5 on
//! randomized shapes up to 16x16. The scalar probe is a fixed random linear
//! functional of the op output, so every output element contributes.

use proptest::prelude::*;

use refusal_geometry::gradcheck::finite_diff_check;
use refusal_geometry::tape::{Tape, Var};
use refusal_geometry::tensor::{Tensor, TensorError};

const TOL: f64 = 1e-5;
const H: f64 = 1e-5;

/// Deterministic pseudo-random probe weights for the linear functional.
fn probe_weights(n: usize, salt: u64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let x = (i as u64 + 1).wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(salt);
            ((x >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

/// Checks the gradient of `probe . flatten(op(inputs))` with respect to
/// input `wrt`, holding the other inputs fixed.
fn check_op<F>(inputs: &[Tensor], wrt: usize, op: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let run = |xs: &[Tensor]| -> Result<(f64, Option<Vec<f64>>), TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == wrt {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let out = op(&mut tape, &vars)?;
        let n = tape.value(out).numel();
        let flat = tape.reshape(out, vec![n])?;
        let w = tape.constant(Tensor::vector(probe_weights(n, 7)));
        let loss = tape.dot(flat, w)?;
        let value = tape.value(loss).item()?;
        let grads = tape.backward(loss)?;
        Ok((value, grads.wrt(vars[wrt]).map(|g| g.to_vec())))
    };
    let (_, grad) = run(inputs).expect("forward/backward");
    let grad = grad.unwrap_or_else(|| vec![0.0; inputs[wrt].numel()]);
    let mut probe_inputs = inputs.to_vec();
    let err = finite_diff_check(
        |t| {
            probe_inputs[wrt] = t.clone();
            run(&probe_inputs).map(|(v, _)| v)
        },
        &inputs[wrt],
        &grad,
        H,
    )
    .expect("finite differences");
    assert!(err < TOL, "rel err {err:.3e} >= {TOL:.0e}");
}

fn matrix_strategy(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-2.0f64..2.0, r * c)
            .prop_map(move |data| Tensor::matrix(r, c, data).unwrap())
    })
}

/// Values bounded away from zero (for divisors and norms).
fn nonzero_matrix_strategy(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        proptest::collection::vec(
            prop_oneof![0.5f64..2.0, -2.0f64..-0.5],
            r * c,
        )
        .prop_map(move |data| Tensor::matrix(r, c, data).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn matmul_gradients(
        a in matrix_strategy(16, 8),
        bcols in 1usize..=16,
        bseed in any::<u64>(),
    ) {
        let k = a.shape()[1];
        let data = probe_weights(k * bcols, bseed);
        let b = Tensor::matrix(k, bcols, data).unwrap();
        check_op(&[a.clone(), b.clone()], 0, |t, v| t.matmul(v[0], v[1]));
        check_op(&[a, b], 1, |t, v| t.matmul(v[0], v[1]));
    }

    #[test]
    fn matmul_nt_gradients(a in matrix_strategy(12, 8), nrows in 1usize..=12, seed in any::<u64>()) {
        let k = a.shape()[1];
        let b = Tensor::matrix(nrows, k, probe_weights(nrows * k, seed)).unwrap();
        check_op(&[a.clone(), b.clone()], 0, |t, v| t.matmul_nt(v[0], v[1]));
        check_op(&[a, b], 1, |t, v| t.matmul_nt(v[0], v[1]));
    }

    #[test]
    fn elementwise_gradients(a in matrix_strategy(16, 16), seed in any::<u64>()) {
        let b = Tensor::new(
            a.shape().to_vec(),
            probe_weights(a.numel(), seed).iter().map(|v| v + 2.5).collect(),
        ).unwrap();
        check_op(&[a.clone(), b.clone()], 0, |t, v| t.add(v[0], v[1]));
        check_op(&[a.clone(), b.clone()], 1, |t, v| t.sub(v[0], v[1]));
        check_op(&[a.clone(), b.clone()], 0, |t, v| t.mul(v[0], v[1]));
        check_op(&[a.clone(), b.clone()], 0, |t, v| t.div(v[0], v[1]));
        check_op(&[a.clone(), b], 1, |t, v| t.div(v[0], v[1]));
        check_op(&[a.clone()], 0, |t, v| Ok(t.scale(v[0], -1.7)));
        check_op(&[a], 0, |t, v| Ok(t.silu(v[0])));
    }

    #[test]
    fn scalar_broadcast_gradients(a in matrix_strategy(8, 8)) {
        let s = Tensor::scalar(1.3);
        check_op(&[a.clone(), s.clone()], 0, |t, v| t.mul_scalar(v[0], v[1]));
        check_op(&[a.clone(), s.clone()], 1, |t, v| t.mul_scalar(v[0], v[1]));
        check_op(&[a.clone(), s.clone()], 0, |t, v| t.div_scalar(v[0], v[1]));
        check_op(&[a, s], 1, |t, v| t.div_scalar(v[0], v[1]));
    }

    #[test]
    fn softmax_family_gradients(a in matrix_strategy(8, 12)) {
        check_op(&[a.clone()], 0, |t, v| t.softmax(v[0]));
        check_op(&[a], 0, |t, v| t.log_softmax(v[0]));
    }

    #[test]
    fn rms_norm_gradients(a in nonzero_matrix_strategy(8, 12), seed in any::<u64>()) {
        let cols = a.shape()[1];
        let gain = Tensor::vector(probe_weights(cols, seed).iter().map(|v| v + 1.5).collect());
        check_op(&[a.clone(), gain.clone()], 0, |t, v| t.rms_norm(v[0], v[1]));
        check_op(&[a, gain], 1, |t, v| t.rms_norm(v[0], v[1]));
    }

    #[test]
    fn selection_gradients(a in matrix_strategy(10, 6)) {
        let rows = a.shape()[0];
        let idx: Vec<usize> = (0..rows).chain([0, rows - 1]).collect();
        check_op(&[a.clone()], 0, move |t, v| t.gather_rows(v[0], &idx));
        let ids: Vec<usize> = vec![0, rows - 1, rows / 2];
        check_op(&[a], 0, move |t, v| t.embedding(v[0], &ids));
    }

    #[test]
    fn concat_gradients(a in matrix_strategy(6, 5), seed in any::<u64>()) {
        let rows = a.shape()[0];
        let b = Tensor::matrix(rows, 3, probe_weights(rows * 3, seed)).unwrap();
        check_op(&[a.clone(), b.clone()], 0, |t, v| t.concat_cols(&[v[0], v[1]]));
        check_op(&[a, b], 1, |t, v| t.concat_cols(&[v[0], v[1]]));
    }

    #[test]
    fn reduction_gradients(a in nonzero_matrix_strategy(16, 4), seed in any::<u64>()) {
        let b = Tensor::new(a.shape().to_vec(), probe_weights(a.numel(), seed)).unwrap();
        check_op(&[a.clone(), b.clone()], 0, |t, v| t.dot(v[0], v[1]));
        check_op(&[a.clone(), b], 1, |t, v| t.dot(v[0], v[1]));
        check_op(&[a.clone()], 0, |t, v| Ok(t.l2norm(v[0])));
        check_op(&[a.clone()], 0, |t, v| Ok(t.sum(v[0])));
        check_op(&[a.clone()], 0, |t, v| Ok(t.mean(v[0])));
        check_op(&[a], 0, |t, v| t.row_norms(v[0]));
    }

    #[test]
    fn broadcast_and_reshape_gradients(a in matrix_strategy(8, 8), seed in any::<u64>()) {
        let cols = a.shape()[1];
        let vrow = Tensor::vector(probe_weights(cols, seed));
        check_op(&[a.clone(), vrow.clone()], 0, |t, v| t.add_row_broadcast(v[0], v[1]));
        check_op(&[a.clone(), vrow], 1, |t, v| t.add_row_broadcast(v[0], v[1]));
        let n = a.numel();
        check_op(&[a], 0, move |t, v| t.reshape(v[0], vec![n]));
    }

    #[test]
    fn cross_entropy_gradients(a in matrix_strategy(8, 9), pick in any::<u64>()) {
        let rows = a.shape()[0];
        let cols = a.shape()[1];
        let targets: Vec<usize> = (0..rows).map(|r| (pick as usize + r * 3) % cols).collect();
        check_op(&[a], 0, move |t, v| t.cross_entropy(v[0], &targets));
    }
}
