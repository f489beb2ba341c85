//! Central-difference verification for every tape primitive: 100 random
//! small cases each, max relative error below 1e-4 at 64-bit.

use pda_core::gradcheck::{finite_diff_check, DiffFn};
use pda_core::tape::{Tape, ValueId};
use pda_core::tensor::Tensor;
use pda_core::Result;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CASES: usize = 100;
const TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

/// Scalar objective: random fixed projection of `build(inputs)`, so
/// gradient errors cannot cancel the way a plain sum would let them.
struct Projected<'a> {
    shapes: Vec<[usize; 2]>,
    projection: Vec<f64>,
    build: &'a (dyn Fn(&mut Tape, &[ValueId]) -> Result<ValueId> + Sync),
}

impl Projected<'_> {
    fn run(&self, theta: &[f64]) -> Result<(f64, Tape, Vec<ValueId>, ValueId)> {
        let mut tape = Tape::new();
        let mut ids = Vec::new();
        let mut offset = 0;
        for &[r, c] in &self.shapes {
            let n = r * c;
            ids.push(tape.param(Tensor::new(r, c, theta[offset..offset + n].to_vec())?));
            offset += n;
        }
        let out = (self.build)(&mut tape, &ids)?;
        let [r, c] = tape.shape(out);
        let proj = tape.constant(Tensor::new(r, c, self.projection.clone())?);
        let weighted = tape.mul(out, proj)?;
        let loss = tape.sum_all(weighted);
        Ok((tape.value(loss).scalar_value()?, tape, ids, loss))
    }
}

impl DiffFn for Projected<'_> {
    fn value(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.run(theta)?.0)
    }

    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (v, tape, ids, loss) = self.run(theta)?;
        let grads = tape.backward(loss)?;
        let mut flat = Vec::with_capacity(theta.len());
        for (id, &[r, c]) in ids.iter().zip(&self.shapes) {
            match grads.get(*id) {
                Some(g) => flat.extend_from_slice(g.data()),
                None => flat.extend(std::iter::repeat_n(0.0, r * c)),
            }
        }
        Ok((v, flat))
    }
}

fn sample(rng: &mut ChaCha8Rng, n: usize, away_from_zero: bool) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mut v: f64 = rng.random_range(-2.0..2.0);
            if away_from_zero {
                while v.abs() < 5e-2 {
                    v = rng.random_range(-2.0..2.0);
                }
            }
            v
        })
        .collect()
}

fn check_primitive(
    name: &str,
    shapes_for: impl Fn(&mut ChaCha8Rng) -> Vec<[usize; 2]>,
    away_from_zero: bool,
    build: impl Fn(&mut Tape, &[ValueId]) -> Result<ValueId> + Sync,
) {
    for case in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e37 + case as u64);
        let shapes = shapes_for(&mut rng);
        let theta: Vec<f64> = shapes
            .iter()
            .flat_map(|&[r, c]| sample(&mut rng, r * c, away_from_zero))
            .collect();

        // Probe output size with a throwaway run to size the projection.
        let probe = Projected { shapes: shapes.clone(), projection: vec![], build: &build };
        let out_len = {
            let mut tape = Tape::new();
            let mut ids = Vec::new();
            let mut offset = 0;
            for &[r, c] in &probe.shapes {
                ids.push(tape.param(Tensor::new(r, c, theta[offset..offset + r * c].to_vec()).unwrap()));
                offset += r * c;
            }
            let out = (build)(&mut tape, &ids).unwrap();
            tape.value(out).len()
        };
        let projection = sample(&mut rng, out_len, false);

        let objective = Projected { shapes, projection, build: &build };
        let report = finite_diff_check(&objective, &theta, STEP)
            .unwrap_or_else(|e| panic!("{name} case {case}: {e}"));
        assert!(
            report.max_rel_err < TOL,
            "{name} case {case}: {report}"
        );
    }
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

#[test]
fn grad_matmul() {
    check_primitive(
        "matmul",
        |rng| {
            let (m, k, n) = (dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 4));
            vec![[m, k], [k, n]]
        },
        false,
        |tape, ids| tape.matmul(ids[0], ids[1]),
    );
}

#[test]
fn grad_matmul_transpose_b() {
    check_primitive(
        "matmul_tb",
        |rng| {
            let (m, k, n) = (dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 4));
            vec![[m, k], [n, k]]
        },
        false,
        |tape, ids| tape.matmul_tb(ids[0], ids[1]),
    );
}

#[test]
fn grad_add_and_mul() {
    check_primitive(
        "add",
        |rng| {
            let s = [dims(rng, 1, 4), dims(rng, 1, 4)];
            vec![s, s]
        },
        false,
        |tape, ids| tape.add(ids[0], ids[1]),
    );
    check_primitive(
        "mul",
        |rng| {
            let s = [dims(rng, 1, 4), dims(rng, 1, 4)];
            vec![s, s]
        },
        false,
        |tape, ids| tape.mul(ids[0], ids[1]),
    );
}

#[test]
fn grad_scale() {
    check_primitive(
        "scale",
        |rng| vec![[dims(rng, 1, 4), dims(rng, 1, 4)]],
        false,
        |tape, ids| Ok(tape.scale(ids[0], -1.7)),
    );
}

#[test]
fn grad_add_row_broadcast() {
    check_primitive(
        "add_row_broadcast",
        |rng| {
            let c = dims(rng, 1, 5);
            vec![[dims(rng, 1, 4), c], [1, c]]
        },
        false,
        |tape, ids| tape.add_row_broadcast(ids[0], ids[1]),
    );
}

#[test]
fn grad_concat_and_slice_rows() {
    check_primitive(
        "concat_rows",
        |rng| {
            let c = dims(rng, 1, 4);
            vec![[dims(rng, 1, 3), c], [dims(rng, 1, 3), c], [dims(rng, 1, 3), c]]
        },
        false,
        |tape, ids| tape.concat_rows(ids),
    );
    check_primitive(
        "slice_rows",
        |rng| vec![[dims(rng, 3, 5), dims(rng, 1, 4)]],
        false,
        |tape, ids| {
            let rows = tape.shape(ids[0])[0];
            tape.slice_rows(ids[0], 1, rows - 2)
        },
    );
}

#[test]
fn grad_layer_norm() {
    check_primitive(
        "layer_norm",
        |rng| {
            let c = dims(rng, 2, 6);
            vec![[dims(rng, 1, 4), c], [1, c], [1, c]]
        },
        false,
        |tape, ids| tape.layer_norm(ids[0], ids[1], ids[2]),
    );
}

#[test]
fn grad_gelu_and_relu() {
    check_primitive(
        "gelu",
        |rng| vec![[dims(rng, 1, 4), dims(rng, 1, 4)]],
        false,
        |tape, ids| Ok(tape.gelu(ids[0])),
    );
    // ReLU has a kink at zero; keep samples clear of it.
    check_primitive(
        "relu",
        |rng| vec![[dims(rng, 1, 4), dims(rng, 1, 4)]],
        true,
        |tape, ids| Ok(tape.relu(ids[0])),
    );
}

#[test]
fn grad_softmax_rows() {
    check_primitive(
        "softmax_rows",
        |rng| vec![[dims(rng, 1, 4), dims(rng, 2, 5)]],
        false,
        |tape, ids| tape.softmax_rows(ids[0], 0.8),
    );
}

#[test]
fn grad_l2_normalize_rows() {
    check_primitive(
        "l2_normalize_rows",
        |rng| vec![[dims(rng, 1, 4), dims(rng, 2, 5)]],
        true,
        |tape, ids| tape.l2_normalize_rows(ids[0]),
    );
}

#[test]
fn grad_mean_rows_and_sum_all() {
    check_primitive(
        "mean_rows",
        |rng| vec![[dims(rng, 1, 5), dims(rng, 1, 4)]],
        false,
        |tape, ids| Ok(tape.mean_rows(ids[0])),
    );
    check_primitive(
        "sum_all",
        |rng| vec![[dims(rng, 1, 4), dims(rng, 1, 4)]],
        false,
        |tape, ids| Ok(tape.sum_all(ids[0])),
    );
}

#[test]
fn grad_cross_entropy_from_softmax_probs() {
    check_primitive(
        "cross_entropy_from_probs",
        |rng| vec![[dims(rng, 1, 4), dims(rng, 2, 5)]],
        false,
        |tape, ids| {
            let [r, c] = tape.shape(ids[0]);
            let probs = tape.softmax_rows(ids[0], 1.0)?;
            // Deterministic labels/mask derived from the case dims.
            let labels: Vec<usize> = (0..r).map(|i| i % c).collect();
            let mut mask: Vec<bool> = (0..r).map(|i| i % 3 != 2).collect();
            mask[0] = true;
            tape.cross_entropy_from_probs(probs, &labels, &mask)
        },
    );
}

#[test]
fn grad_cosine_sim() {
    check_primitive(
        "cosine_sim",
        |rng| {
            let d = dims(rng, 2, 5);
            vec![[dims(rng, 1, 4), d], [dims(rng, 1, 4), d]]
        },
        true,
        |tape, ids| tape.cosine_sim(ids[0], ids[1]),
    );
}
