//! Algebraic invariants of the numeric primitives.

use pda_core::tape::Tape;
use pda_core::tensor::Tensor;

use proptest::prelude::*;

fn finite_elem() -> impl Strategy<Value = f64> {
    (-3.0f64..3.0).prop_filter("finite", |v| v.is_finite())
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(finite_elem(), rows * cols)
        .prop_map(move |data| Tensor::new(rows, cols, data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_rows_sum_to_one(x in matrix(3, 5), t in 0.05f64..3.0) {
        let mut tape = Tape::new();
        let id = tape.constant(x);
        let y = tape.softmax_rows(id, t).unwrap();
        for i in 0..3 {
            let s: f64 = tape.value(y).row_slice(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9, "row {i} sums to {s}");
        }
    }

    #[test]
    fn softmax_shift_invariant(x in matrix(2, 4), shift in -5.0f64..5.0) {
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let shifted = {
            let data = x.data().iter().map(|v| v + shift).collect();
            tape.constant(Tensor::new(2, 4, data).unwrap())
        };
        let ya = tape.softmax_rows(a, 1.0).unwrap();
        let yb = tape.softmax_rows(shifted, 1.0).unwrap();
        let diff = tape.value(ya).max_abs_diff(tape.value(yb)).unwrap();
        prop_assert!(diff < 1e-12, "shift changed softmax by {diff}");
    }

    #[test]
    fn l2_normalize_idempotent(x in matrix(4, 3)) {
        let norms: Vec<f64> = (0..4)
            .map(|i| x.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        prop_assume!(norms.iter().all(|&n| n > 1e-3));

        let mut tape = Tape::new();
        let id = tape.constant(x);
        let once = tape.l2_normalize_rows(id).unwrap();
        let twice = tape.l2_normalize_rows(once).unwrap();
        let diff = tape.value(once).max_abs_diff(tape.value(twice)).unwrap();
        prop_assert!(diff < 1e-12, "not idempotent: {diff}");
    }

    #[test]
    fn matmul_associative(a in matrix(2, 3), b in matrix(3, 4), c in matrix(4, 2)) {
        let mut tape = Tape::new();
        let (ia, ib, ic) = (tape.constant(a), tape.constant(b), tape.constant(c));
        let ab = tape.matmul(ia, ib).unwrap();
        let ab_c = tape.matmul(ab, ic).unwrap();
        let bc = tape.matmul(ib, ic).unwrap();
        let a_bc = tape.matmul(ia, bc).unwrap();
        let diff = tape.value(ab_c).max_abs_diff(tape.value(a_bc)).unwrap();
        prop_assert!(diff < 1e-9, "associativity violated by {diff}");
    }
}

#[test]
fn tape_replay_is_bit_identical() {
    use rand::{Rng, SeedableRng};

    let run = || {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(271828);
        let w = Tensor::new(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let x = Tensor::new(4, 2, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let iw = tape.param(w);
        let ix = tape.constant(x);
        let prod = tape.matmul(iw, ix).unwrap();
        let act = tape.gelu(prod);
        let probs = tape.softmax_rows(act, 0.7).unwrap();
        let loss = tape
            .cross_entropy_from_probs(probs, &[0, 1, 0], &[true, true, false])
            .unwrap();
        let grads = tape.backward(loss).unwrap();
        (
            tape.value(loss).scalar_value().unwrap().to_bits(),
            grads.get(iw).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        )
    };

    assert_eq!(run(), run());
}

#[test]
fn full_graph_gradient_matches_finite_differences() {
    use pda_core::gradcheck::{finite_diff_check, DiffFn};
    use pda_core::tape::ValueId;
    use pda_core::Result;

    type Built = (f64, Tape, ValueId, ValueId);

    // An arbitrary composed graph touching most primitives at once.
    struct Composed;

    impl Composed {
        fn build(theta: &[f64]) -> Result<Built> {
            let mut tape = Tape::new();
            let w = tape.param(Tensor::new(2, 3, theta[..6].to_vec())?);
            let v = tape.param(Tensor::new(2, 3, theta[6..].to_vec())?);
            let cat = tape.concat_rows(&[w, v])?; // 4x3
            let gain = tape.constant(Tensor::row(vec![1.0, 0.9, 1.1]));
            let bias = tape.constant(Tensor::row(vec![0.0, 0.1, -0.1]));
            let ln = tape.layer_norm(cat, gain, bias)?;
            let act = tape.gelu(ln);
            let sim = tape.cosine_sim(act, act)?; // 4x4
            let probs = tape.softmax_rows(sim, 0.5)?;
            let loss = tape.cross_entropy_from_probs(
                probs,
                &[0, 1, 2, 3],
                &[true, false, true, true],
            )?;
            Ok((tape.value(loss).scalar_value()?, tape, w, loss))
        }
    }

    // Check the first parameter block; the second stays fixed.
    struct FirstParamOnly;

    impl DiffFn for FirstParamOnly {
        fn value(&self, theta: &[f64]) -> Result<f64> {
            let mut full = theta.to_vec();
            full.extend_from_slice(&FIXED_SECOND);
            Ok(Composed::build(&full)?.0)
        }
        fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
            let mut full = theta.to_vec();
            full.extend_from_slice(&FIXED_SECOND);
            let (val, tape, w, loss) = Composed::build(&full)?;
            let grads = tape.backward(loss)?;
            Ok((val, grads.get(w).unwrap().data().to_vec()))
        }
    }

    const FIXED_SECOND: [f64; 6] = [0.3, -0.7, 1.2, 0.4, -0.2, 0.9];
    let theta = [0.5, -1.1, 0.8, 1.4, -0.3, 0.2];
    let report = finite_diff_check(&FirstParamOnly, &theta, 1e-5).unwrap();
    assert!(report.max_rel_err < 1e-4, "{report}");
}
