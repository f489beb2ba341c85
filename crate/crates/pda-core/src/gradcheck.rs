//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::kernels::indexed_map;

/// A deterministic scalar objective over a flat parameter vector, with a
/// tape-computed gradient. Implementations must not consume outside
/// randomness between calls.
pub trait DiffFn: Sync {
    fn value(&self, theta: &[f64]) -> Result<f64>;
    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Outcome of [`finite_diff_check`]; `max_rel_err` is the quantity the
/// acceptance gate thresholds.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub worst_tape: f64,
    pub worst_fd: f64,
    pub n_params: usize,
}

impl std::fmt::Display for FdReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "max relative error {:.3e} over {} parameters (worst coord {}: tape {:.6e} vs fd {:.6e})",
            self.max_rel_err, self.n_params, self.worst_coord, self.worst_tape, self.worst_fd
        )
    }
}

/// Compare the tape gradient of `f` at `theta` against central differences
/// with step `h`, coordinate by coordinate. The relative error per
/// coordinate is `|g_tape - g_fd| / max(1, |g_fd|)`.
pub fn finite_diff_check<F: DiffFn>(f: &F, theta: &[f64], h: f64) -> Result<FdReport> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Parameter(format!(
            "finite-difference step {h:e} outside [1e-7, 1e-3]"
        )));
    }

    // Two evaluations must agree bitwise, otherwise the check is meaningless.
    let v1 = f.value(theta)?;
    let v2 = f.value(theta)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(Error::Determinism(format!(
            "objective returned {v1:?} then {v2:?} for identical parameters"
        )));
    }

    let (_, grad) = f.value_and_grad(theta)?;
    if grad.len() != theta.len() {
        return Err(Error::Contract(format!(
            "gradient has {} entries for {} parameters",
            grad.len(),
            theta.len()
        )));
    }

    // Coordinates are independent; evaluate them in parallel.
    let per_coord: Vec<Result<f64>> = indexed_map(theta.len(), 8, |i| {
        let mut plus = theta.to_vec();
        let mut minus = theta.to_vec();
        plus[i] += h;
        minus[i] -= h;
        Ok((f.value(&plus)? - f.value(&minus)?) / (2.0 * h))
    });

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        worst_tape: 0.0,
        worst_fd: 0.0,
        n_params: theta.len(),
    };
    for (i, fd) in per_coord.into_iter().enumerate() {
        let fd = fd?;
        let rel = (grad[i] - fd).abs() / fd.abs().max(1.0);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = i;
            report.worst_tape = grad[i];
            report.worst_fd = fd;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    struct Square;

    impl DiffFn for Square {
        fn value(&self, theta: &[f64]) -> Result<f64> {
            Ok(theta[0] * theta[0])
        }
        fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((theta[0] * theta[0], vec![2.0 * theta[0]]))
        }
    }

    #[test]
    fn quadratic_is_exact_to_1e8() {
        let report = finite_diff_check(&Square, &[3.0], 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-8, "{report}");
    }

    struct CeSoftmax;

    type Built = (f64, Tape, crate::tape::ValueId, crate::tape::ValueId);

    impl CeSoftmax {
        fn build(&self, theta: &[f64]) -> Result<Built> {
            let mut tape = Tape::new();
            let logits = tape.param(Tensor::row(theta.to_vec()));
            let probs = tape.softmax_rows(logits, 1.0)?;
            let loss = tape.cross_entropy_from_probs(probs, &[1], &[true])?;
            Ok((tape.value(loss).scalar_value()?, tape, logits, loss))
        }
    }

    impl DiffFn for CeSoftmax {
        fn value(&self, theta: &[f64]) -> Result<f64> {
            Ok(self.build(theta)?.0)
        }
        fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
            let (v, tape, logits, loss) = self.build(theta)?;
            let grads = tape.backward(loss)?;
            Ok((v, grads.get(logits).unwrap().data().to_vec()))
        }
    }

    #[test]
    fn cross_entropy_of_softmax_checks_to_1e6() {
        let report = finite_diff_check(&CeSoftmax, &[0.9, 0.5, 0.1], 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-6, "{report}");
    }

    #[test]
    fn step_outside_range_is_rejected() {
        assert!(matches!(
            finite_diff_check(&Square, &[1.0], 1e-2),
            Err(Error::Parameter(_))
        ));
    }

    struct Flaky(std::sync::atomic::AtomicU64);

    impl DiffFn for Flaky {
        fn value(&self, _theta: &[f64]) -> Result<f64> {
            let n = self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Ok(n as f64)
        }
        fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((self.value(theta)?, vec![0.0; theta.len()]))
        }
    }

    #[test]
    fn nondeterministic_objective_is_rejected() {
        let f = Flaky(std::sync::atomic::AtomicU64::new(0));
        assert!(matches!(
            finite_diff_check(&f, &[1.0], 1e-5),
            Err(Error::Determinism(_))
        ));
    }
}
