//! Forward math shared by the tape and the no-grad paths.
//!
//! Every kernel has a sequential implementation in [`seq`]. With the
//! `parallel` feature enabled, large inputs dispatch to a rayon version that
//! is bit-identical to the sequential one: work is a parallel map over
//! disjoint output rows (or index slots) and any reduction over those slots
//! happens afterwards in fixed index order, so results do not depend on the
//! worker count.

use crate::error::{Error, Result};

/// Minimum norm accepted by row normalization.
pub const NORM_EPS: f64 = 1e-12;

/// Multiply-add count above which matmul goes parallel.
#[cfg(feature = "parallel")]
const MATMUL_PAR_FLOPS: usize = 64 * 64 * 64;

/// Element count above which row-wise kernels go parallel.
#[cfg(feature = "parallel")]
const ROWWISE_PAR_ELEMS: usize = 64 * 1024;

pub mod seq {
    //! Sequential reference implementations.

    /// `C = A·B` or `C = A·Bᵀ`. `a` is `m x k`; `b` is `k x n`
    /// (or `n x k` when `transpose_b`). Output is `m x n`.
    pub fn matmul(
        a: &[f64],
        b: &[f64],
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
        out: &mut [f64],
    ) {
        debug_assert_eq!(out.len(), m * n);
        for (i, out_row) in out.chunks_mut(n).enumerate() {
            matmul_row(a, b, i, k, n, transpose_b, out_row);
        }
    }

    pub(super) fn matmul_row(
        a: &[f64],
        b: &[f64],
        i: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
        out_row: &mut [f64],
    ) {
        let a_row = &a[i * k..(i + 1) * k];
        if transpose_b {
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &b[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a_row[l] * b_row[l];
                }
                *o = acc;
            }
        } else {
            out_row.fill(0.0);
            for (l, &av) in a_row.iter().enumerate() {
                let b_row = &b[l * n..(l + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }

    /// Row softmax with temperature, max-subtracted per row.
    pub fn softmax_rows(x: &[f64], cols: usize, t: f64, out: &mut [f64]) {
        for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
            softmax_row(xr, t, or);
        }
    }

    pub(super) fn softmax_row(xr: &[f64], t: f64, or: &mut [f64]) {
        let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            let e = ((v - max) / t).exp();
            *o = e;
            sum += e;
        }
        for o in or.iter_mut() {
            *o /= sum;
        }
    }

    /// Row-wise L2 norms.
    pub fn row_norms(x: &[f64], cols: usize) -> Vec<f64> {
        x.chunks(cols)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }
}

#[cfg(feature = "parallel")]
pub mod par {
    //! Rayon implementations; bit-identical to [`super::seq`].

    use rayon::prelude::*;

    pub fn matmul(
        a: &[f64],
        b: &[f64],
        _m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
        out: &mut [f64],
    ) {
        out.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| {
            super::seq::matmul_row(a, b, i, k, n, transpose_b, out_row);
        });
    }

    pub fn softmax_rows(x: &[f64], cols: usize, t: f64, out: &mut [f64]) {
        out.par_chunks_mut(cols)
            .zip(x.par_chunks(cols))
            .for_each(|(or, xr)| super::seq::softmax_row(xr, t, or));
    }
}

/// `A·B` (or `A·Bᵀ`), dispatching to rayon above the size threshold.
pub fn matmul(
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    transpose_b: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    #[cfg(feature = "parallel")]
    if m * k * n >= MATMUL_PAR_FLOPS && m > 1 {
        par::matmul(a, b, m, k, n, transpose_b, &mut out);
        return out;
    }
    seq::matmul(a, b, m, k, n, transpose_b, &mut out);
    out
}

/// Row softmax with temperature `t > 0`; rows sum to one.
pub fn softmax_rows(x: &[f64], rows: usize, cols: usize, t: f64) -> Result<Vec<f64>> {
    if t <= 0.0 || !t.is_finite() {
        return Err(Error::Parameter(format!(
            "softmax temperature must be positive and finite, got {t}"
        )));
    }
    let mut out = vec![0.0; rows * cols];
    #[cfg(feature = "parallel")]
    if rows * cols >= ROWWISE_PAR_ELEMS {
        par::softmax_rows(x, cols, t, &mut out);
        return Ok(out);
    }
    seq::softmax_rows(x, cols, t, &mut out);
    Ok(out)
}

/// Row-wise L2 normalization. Rejects rows with norm below [`NORM_EPS`].
pub fn l2_normalize_rows(x: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let r = &x[i * cols..(i + 1) * cols];
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < NORM_EPS {
            return Err(Error::Degenerate(format!(
                "row {i} has L2 norm {norm:.3e} < {NORM_EPS:.0e}; cannot normalize"
            )));
        }
        for (o, &v) in out[i * cols..(i + 1) * cols].iter_mut().zip(r) {
            *o = v / norm;
        }
    }
    Ok(out)
}

/// Per-row layer normalization with affine gain/bias.
pub fn layer_norm_rows(
    x: &[f64],
    rows: usize,
    cols: usize,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let r = &x[i * cols..(i + 1) * cols];
        let (_, _, normed) = layer_norm_row(r, eps);
        for (j, nv) in normed.iter().enumerate() {
            out[i * cols + j] = nv * gain[j] + bias[j];
        }
    }
    out
}

/// Returns (mean, inverse std, normalized row) for one row.
pub fn layer_norm_row(r: &[f64], eps: f64) -> (f64, f64, Vec<f64>) {
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + eps).sqrt();
    let normed = r.iter().map(|v| (v - mean) * rstd).collect();
    (mean, rstd, normed)
}

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of the tanh-form GELU.
pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    let sech2 = 1.0 - th * th;
    0.5 * (1.0 + th) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Dot product of equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Squared Euclidean distance between equal-length slices.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Map `f` over `0..n` into index order, in parallel when the feature is on
/// and `n` is large enough. Slot `i` depends only on `i`, so the result is
/// identical for any worker count; reduce over the returned Vec afterwards.
pub fn indexed_map<T, F>(n: usize, min_parallel: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if n >= min_parallel {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = min_parallel;
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let i2 = [1.0, 0.0, 0.0, 1.0];
        let b = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(matmul(&i2, &b, 2, 2, 2, false), b.to_vec());
    }

    #[test]
    fn matmul_1x2_by_2x1() {
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        assert_eq!(matmul(&a, &b, 1, 2, 1, false), vec![11.0]);
    }

    #[test]
    fn matmul_transpose_b_matches_plain() {
        // A (2x3) x B (3x2) == A x (Bt)t with Bt stored 2x3.
        let a = [1., 2., 3., 4., 5., 6.];
        let b = [7., 8., 9., 10., 11., 12.]; // 3x2
        let bt = [7., 9., 11., 8., 10., 12.]; // 2x3
        assert_eq!(
            matmul(&a, &b, 2, 3, 2, false),
            matmul(&a, &bt, 2, 3, 2, true)
        );
    }

    #[test]
    fn softmax_symmetry_and_sharpening() {
        let p = softmax_rows(&[0.0, 0.0], 1, 2, 1.0).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);

        let p = softmax_rows(&[1.0, 0.0], 1, 2, 0.01).unwrap();
        assert!(p[0] > 1.0 - 1e-9);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        assert!(softmax_rows(&[0.0], 1, 1, 0.0).is_err());
        assert!(softmax_rows(&[0.0], 1, 1, -1.0).is_err());
    }

    #[test]
    fn l2_normalize_345() {
        let out = l2_normalize_rows(&[3.0, 4.0], 1, 2).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-15 && (out[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_zero_row_errors() {
        assert!(l2_normalize_rows(&[0.0, 0.0], 1, 2).is_err());
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-2.0, -0.5, 0.0, 0.3, 1.7] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matmul_bitwise_equals_sequential() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (m, k, n) = (80, 70, 90); // above the flop threshold
        let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut seq_out = vec![0.0; m * n];
        seq::matmul(&a, &b, m, k, n, false, &mut seq_out);
        assert_eq!(matmul(&a, &b, m, k, n, false), seq_out);
    }
}
