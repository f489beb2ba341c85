//! Domain-discrepancy and feature-geometry metrics: accuracy, inner/inter
//! class distances with the compactness ratio, RBF MMD and diagonal
//! Gaussian KL. All pure functions of their inputs.

use crate::error::{Error, Result};
use crate::kernels::{self, indexed_map};
use crate::tensor::Tensor;

/// Estimator identifiers printed in metric reports so numbers are
/// comparable across runs.
pub const ESTIMATOR_ACCURACY: &str = "exact-match";
pub const ESTIMATOR_CLASS_DISTANCE: &str = "l2-to-class-centroid";
pub const ESTIMATOR_MMD: &str = "rbf-vstat-median-bandwidth";
pub const ESTIMATOR_KL: &str = "diag-gaussian-ridge-1e-6";

const KL_RIDGE: f64 = 1e-6;

/// Fraction of positions where prediction equals label.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "accuracy: {} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Data("accuracy of an empty set is undefined".into()));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Feature-geometry summary around class centroids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassDistanceStats {
    /// Mean distance of each sample to its own class centroid (D1).
    pub inner_distance: f64,
    /// Mean distance of each sample to every other class centroid (D2).
    pub inter_distance: f64,
    /// Mean squared deviation of samples from their class centroid.
    pub inner_variance: f64,
    /// D2 / D1; infinite when classes collapse to points (D1 = 0).
    pub compactness_ratio: f64,
}

pub fn class_distance_stats(features: &Tensor, labels: &[usize]) -> Result<ClassDistanceStats> {
    let n = features.rows();
    if labels.len() != n {
        return Err(Error::Data(format!(
            "class_distance_stats: {n} feature rows vs {} labels",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::Data("class_distance_stats of an empty set".into()));
    }
    let d = features.cols();
    let k = labels.iter().max().unwrap() + 1;

    let mut counts = vec![0usize; k];
    let mut centroids = vec![vec![0.0; d]; k];
    for (i, &label) in labels.iter().enumerate() {
        counts[label] += 1;
        for (c, &v) in centroids[label].iter_mut().zip(features.row_slice(i)) {
            *c += v;
        }
    }
    let present: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();
    if present.len() < 2 {
        return Err(Error::Degenerate(
            "inter-class distance D2 is undefined with fewer than two classes present".into(),
        ));
    }
    for &c in &present {
        for v in &mut centroids[c] {
            *v /= counts[c] as f64;
        }
    }

    let mut inner_sum = 0.0;
    let mut inner_sq_sum = 0.0;
    let mut inter_sum = 0.0;
    let mut inter_pairs = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = features.row_slice(i);
        let own_sq = kernels::sq_dist(row, &centroids[label]);
        inner_sum += own_sq.sqrt();
        inner_sq_sum += own_sq;
        for &other in &present {
            if other != label {
                inter_sum += kernels::sq_dist(row, &centroids[other]).sqrt();
                inter_pairs += 1;
            }
        }
    }

    let inner_distance = inner_sum / n as f64;
    let inter_distance = inter_sum / inter_pairs as f64;
    let compactness_ratio = if inner_distance > 0.0 {
        inter_distance / inner_distance
    } else {
        f64::INFINITY
    };
    Ok(ClassDistanceStats {
        inner_distance,
        inter_distance,
        inner_variance: inner_sq_sum / n as f64,
        compactness_ratio,
    })
}

fn pooled_median_sq_dist(x: &Tensor, y: &Tensor) -> f64 {
    let rows: Vec<&[f64]> = (0..x.rows())
        .map(|i| x.row_slice(i))
        .chain((0..y.rows()).map(|j| y.row_slice(j)))
        .collect();
    let n = rows.len();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(kernels::sq_dist(rows[i], rows[j]));
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let m = dists.len();
    if m == 0 {
        return 1.0;
    }
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    if median > 0.0 {
        median
    } else {
        1.0 // all pooled points coincide; any bandwidth gives mmd 0
    }
}

/// Squared maximum mean discrepancy, biased V-statistic with an RBF kernel
/// `exp(-||a-b||^2 / bandwidth)`.
pub fn mmd_with_bandwidth(x: &Tensor, y: &Tensor, bandwidth: f64) -> Result<f64> {
    if x.rows() < 2 || y.rows() < 2 {
        return Err(Error::Data(format!(
            "mmd needs at least two samples per side, got {} and {}",
            x.rows(),
            y.rows()
        )));
    }
    if x.cols() != y.cols() {
        return Err(Error::Dim {
            context: "mmd",
            left: x.shape().to_vec(),
            right: y.shape().to_vec(),
        });
    }
    if bandwidth <= 0.0 {
        return Err(Error::Parameter(format!(
            "mmd bandwidth must be positive, got {bandwidth}"
        )));
    }

    // Parallel over the i index with a fixed-order reduce, so the result is
    // identical for any worker count.
    let mean_kernel = |a: &Tensor, b: &Tensor| -> f64 {
        let row_sums = indexed_map(a.rows(), 64, |i| {
            let ra = a.row_slice(i);
            let mut acc = 0.0;
            for j in 0..b.rows() {
                acc += (-kernels::sq_dist(ra, b.row_slice(j)) / bandwidth).exp();
            }
            acc
        });
        row_sums.iter().sum::<f64>() / (a.rows() * b.rows()) as f64
    };

    let xx = mean_kernel(x, x);
    let yy = mean_kernel(y, y);
    let xy = mean_kernel(x, y);
    Ok((xx + yy - 2.0 * xy).max(0.0))
}

/// MMD with the median heuristic: bandwidth is the median pairwise squared
/// distance over the pooled sample.
pub fn mmd(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.rows() < 2 || y.rows() < 2 {
        return Err(Error::Data(format!(
            "mmd needs at least two samples per side, got {} and {}",
            x.rows(),
            y.rows()
        )));
    }
    mmd_with_bandwidth(x, y, pooled_median_sq_dist(x, y))
}

/// Closed-form KL between diagonal Gaussians with the given parameters.
pub fn kl_diag_params(mu_x: &[f64], var_x: &[f64], mu_y: &[f64], var_y: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..mu_x.len() {
        acc += (var_y[i] / var_x[i]).ln() + (var_x[i] + (mu_x[i] - mu_y[i]).powi(2)) / var_y[i]
            - 1.0;
    }
    0.5 * acc
}

/// KL(N_X || N_Y) after fitting diagonal Gaussians to each sample set
/// (sample mean, population variance plus a 1e-6 ridge).
pub fn kl_gaussian(x: &Tensor, y: &Tensor) -> Result<f64> {
    for (name, t) in [("left", x), ("right", y)] {
        if t.rows() < 2 {
            return Err(Error::Data(format!(
                "kl_gaussian needs at least two {name} samples, got {}",
                t.rows()
            )));
        }
    }
    if x.cols() != y.cols() {
        return Err(Error::Dim {
            context: "kl_gaussian",
            left: x.shape().to_vec(),
            right: y.shape().to_vec(),
        });
    }

    let fit = |t: &Tensor| -> (Vec<f64>, Vec<f64>) {
        let (n, d) = (t.rows(), t.cols());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(t.row_slice(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for i in 0..n {
            for (j, &v) in t.row_slice(i).iter().enumerate() {
                var[j] += (v - mean[j]) * (v - mean[j]);
            }
        }
        for v in &mut var {
            *v = *v / n as f64 + KL_RIDGE;
        }
        (mean, var)
    };

    let (mu_x, var_x) = fit(x);
    let (mu_y, var_y) = fit(y);
    Ok(kl_diag_params(&mu_x, &var_x, &mu_y, &var_y))
}

/// One self-describing report line per metric.
#[derive(Debug, Clone)]
pub struct MetricRecord {
    pub name: String,
    pub value: f64,
    pub estimator: &'static str,
    pub provenance: String,
}

impl MetricRecord {
    pub fn new(name: impl Into<String>, value: f64, estimator: &'static str, provenance: impl Into<String>) -> Self {
        MetricRecord { name: name.into(), value, estimator, provenance: provenance.into() }
    }
}

impl std::fmt::Display for MetricRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}\t{:.17e}\t{}\t{}",
            self.name, self.value, self.estimator, self.provenance
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn accuracy_counting() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0, 0], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn two_point_distance_stats() {
        let features = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let stats = class_distance_stats(&features, &[0, 1]).unwrap();
        assert_eq!(stats.inner_distance, 0.0);
        assert_eq!(stats.inter_distance, 1.0);
        assert!(stats.compactness_ratio.is_infinite());
    }

    #[test]
    fn collapsed_classes_flag_infinite_ratio() {
        let features = Tensor::from_rows(&[
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![5.0, 0.0],
            vec![5.0, 0.0],
        ])
        .unwrap();
        let stats = class_distance_stats(&features, &[0, 0, 1, 1]).unwrap();
        assert_eq!(stats.inner_distance, 0.0);
        assert!(stats.compactness_ratio.is_infinite());
    }

    #[test]
    fn single_class_names_the_undefined_metric() {
        let features = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        match class_distance_stats(&features, &[0, 0]) {
            Err(Error::Degenerate(msg)) => assert!(msg.contains("D2"), "{msg}"),
            other => panic!("expected Degenerate, got {other:?}"),
        }
    }

    #[test]
    fn distance_stats_match_brute_force_on_hand_case() {
        // 4 samples, 2 classes.
        let rows = [
            vec![0.0, 0.0],
            vec![2.0, 0.0],
            vec![5.0, 1.0],
            vec![7.0, 1.0],
        ];
        let labels = [0usize, 0, 1, 1];
        let features = Tensor::from_rows(&rows).unwrap();
        let stats = class_distance_stats(&features, &labels).unwrap();

        // brute force
        let c0 = [1.0, 0.0];
        let c1 = [6.0, 1.0];
        let dist = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        };
        let inner: Vec<f64> = vec![
            dist(&rows[0], &c0),
            dist(&rows[1], &c0),
            dist(&rows[2], &c1),
            dist(&rows[3], &c1),
        ];
        let d1 = inner.iter().sum::<f64>() / 4.0;
        let variance = inner.iter().map(|v| v * v).sum::<f64>() / 4.0;
        let d2 = (dist(&rows[0], &c1)
            + dist(&rows[1], &c1)
            + dist(&rows[2], &c0)
            + dist(&rows[3], &c0))
            / 4.0;
        assert!((stats.inner_distance - d1).abs() < 1e-12);
        assert!((stats.inner_variance - variance).abs() < 1e-12);
        assert!((stats.inter_distance - d2).abs() < 1e-12);
        assert!((stats.compactness_ratio - d2 / d1).abs() < 1e-12);
    }

    #[test]
    fn distance_stats_rotation_invariant() {
        let mut r = rng::seeded(12);
        let features = rng::gaussian(&mut r, 12, 5, 1.0);
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let base = class_distance_stats(&features, &labels).unwrap();

        let q = rng::orthogonal(&mut r, 5);
        let rotated = Tensor::new(
            12,
            5,
            kernels::matmul(features.data(), q.data(), 12, 5, 5, false),
        )
        .unwrap();
        let rot = class_distance_stats(&rotated, &labels).unwrap();
        assert!((base.inner_distance - rot.inner_distance).abs() < 1e-9);
        assert!((base.inter_distance - rot.inter_distance).abs() < 1e-9);
        assert!((base.inner_variance - rot.inner_variance).abs() < 1e-9);
        assert!((base.compactness_ratio - rot.compactness_ratio).abs() < 1e-9);
    }

    #[test]
    fn mmd_of_identical_samples_is_zero() {
        let x = rng::gaussian(&mut rng::seeded(3), 10, 4, 1.0);
        assert!(mmd(&x, &x).unwrap() < 1e-12);
    }

    #[test]
    fn mmd_two_point_fixed_bandwidth_scalar_oracle() {
        // X = {(0), (1)}, Y = {(2), (3)}, bandwidth 1.
        let x = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let y = Tensor::from_rows(&[vec![2.0], vec![3.0]]).unwrap();
        let got = mmd_with_bandwidth(&x, &y, 1.0).unwrap();

        let k = |a: f64, b: f64| (-(a - b) * (a - b)).exp();
        let xx = (k(0., 0.) + k(0., 1.) + k(1., 0.) + k(1., 1.)) / 4.0;
        let yy = (k(2., 2.) + k(2., 3.) + k(3., 2.) + k(3., 3.)) / 4.0;
        let xy = (k(0., 2.) + k(0., 3.) + k(1., 2.) + k(1., 3.)) / 4.0;
        assert!((got - (xx + yy - 2.0 * xy)).abs() < 1e-15);
    }

    #[test]
    fn mmd_separates_shifted_gaussians_over_seeds() {
        for seed in 0..5 {
            let mut r = rng::seeded_stream(100 + seed, 0);
            let x = rng::gaussian(&mut r, 60, 2, 1.0);
            let y_same = rng::gaussian(&mut r, 60, 2, 1.0);
            let mut y_shifted = rng::gaussian(&mut r, 60, 2, 1.0);
            for v in y_shifted.data_mut() {
                *v += 5.0;
            }
            let same = mmd(&x, &y_same).unwrap();
            let shifted = mmd(&x, &y_shifted).unwrap();
            assert!(
                shifted > same,
                "seed {seed}: shifted {shifted} vs same {same}"
            );
        }
    }

    #[test]
    fn mmd_symmetric_and_permutation_invariant() {
        let mut r = rng::seeded(31);
        let x = rng::gaussian(&mut r, 8, 3, 1.0);
        let y = rng::gaussian(&mut r, 9, 3, 1.0);
        let a = mmd(&x, &y).unwrap();
        let b = mmd(&y, &x).unwrap();
        assert!((a - b).abs() < 1e-15);

        // common permutation of rows of x
        let perm = [5usize, 2, 7, 0, 3, 6, 1, 4];
        let xp = Tensor::from_rows(
            &perm.iter().map(|&i| x.row_slice(i).to_vec()).collect::<Vec<_>>(),
        )
        .unwrap();
        let c = mmd(&xp, &y).unwrap();
        assert!((a - c).abs() < 1e-12);
    }

    #[test]
    fn kl_identical_fit_is_zero_and_closed_form_case() {
        let x = rng::gaussian(&mut rng::seeded(4), 20, 3, 1.0);
        assert!(kl_gaussian(&x, &x).unwrap().abs() < 1e-9);

        // d=1, mu 0 vs 1, unit variances: KL = 0.5.
        let v = kl_diag_params(&[0.0], &[1.0], &[1.0], &[1.0]);
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_grows_with_mean_shift() {
        let base = rng::gaussian(&mut rng::seeded(5), 200, 2, 1.0);
        let shifted_by = |delta: f64| {
            let mut t = base.clone();
            for v in t.data_mut() {
                *v += delta;
            }
            t
        };
        let k0 = kl_gaussian(&base, &shifted_by(0.0)).unwrap();
        let k1 = kl_gaussian(&base, &shifted_by(1.0)).unwrap();
        let k2 = kl_gaussian(&base, &shifted_by(2.0)).unwrap();
        assert!(k0 < k1 && k1 < k2, "{k0} {k1} {k2}");
    }

    #[test]
    fn kl_is_asymmetric_on_unequal_variances() {
        let mut narrow = rng::gaussian(&mut rng::seeded(6), 300, 1, 0.3);
        let wide = rng::gaussian(&mut rng::seeded(7), 300, 1, 2.0);
        for v in narrow.data_mut() {
            *v += 0.5;
        }
        let ab = kl_gaussian(&narrow, &wide).unwrap();
        let ba = kl_gaussian(&wide, &narrow).unwrap();
        assert!((ab - ba).abs() > 1e-3, "kl should be asymmetric: {ab} vs {ba}");
    }

    #[test]
    fn record_format_is_tab_separated() {
        let rec = MetricRecord::new("mmd", 0.25, ESTIMATOR_MMD, "source=a.pdae,target=b.pdae");
        let line = rec.to_string();
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 4);
        assert_eq!(fields[0], "mmd");
        assert_eq!(fields[2], ESTIMATOR_MMD);
    }
}
