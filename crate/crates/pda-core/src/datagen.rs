//! Synthetic domain-shift benchmarks: well-separated Gaussian class
//! clusters in patch space, with the target domain rotated and translated
//! away from the source.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::io::{self, Dtype};
use crate::manifest::{DatasetManifest, FeatureKind};
use crate::rng;
use crate::tensor::Tensor;

/// Rotation angle (radians) applied to the target per unit of
/// `domain_shift`, alongside a translation of that magnitude.
const ROTATION_PER_UNIT_SHIFT: f64 = 0.15;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticShiftSpec {
    pub n_classes: usize,
    /// Samples per class in each domain.
    pub n_source: usize,
    pub n_target: usize,
    /// Patch feature width.
    pub d_in: usize,
    pub n_patches: usize,
    /// Pairwise distance between class means.
    pub class_sep: f64,
    /// Translation magnitude and rotation strength applied to the target.
    pub domain_shift: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticShiftSpec {
    fn default() -> Self {
        SyntheticShiftSpec {
            n_classes: 5,
            n_source: 40,
            n_target: 40,
            d_in: 32,
            n_patches: 9,
            class_sep: 8.0,
            domain_shift: 3.0,
            noise_std: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Parameter("need at least two classes".into()));
        }
        if self.class_sep <= 0.0 {
            return Err(Error::Parameter(format!(
                "class_sep must be positive, got {}",
                self.class_sep
            )));
        }
        if self.noise_std <= 0.0 {
            return Err(Error::Parameter(format!(
                "noise_std must be positive, got {}",
                self.noise_std
            )));
        }
        if self.domain_shift < 0.0 {
            return Err(Error::Parameter("domain_shift must be >= 0".into()));
        }
        if self.n_source == 0 || self.n_target == 0 {
            return Err(Error::Parameter("need samples in both domains".into()));
        }
        if self.d_in < self.n_classes + 3 {
            return Err(Error::Parameter(format!(
                "patch width {} too small for {} classes plus shift directions",
                self.d_in, self.n_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedData {
    /// Per-sample `n_patches x d_in` inputs, class-major order.
    pub source: Vec<Tensor>,
    pub source_labels: Vec<usize>,
    pub target: Vec<Tensor>,
    /// Ground truth for evaluation only; never loaded by training.
    pub target_labels: Vec<usize>,
    /// Flattened class means before the domain transform.
    pub class_means: Vec<Vec<f64>>,
}

fn orthonormal_rows(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    while rows.len() < k {
        let mut v: Vec<f64> = (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z
            })
            .collect();
        for prev in &rows {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (vi, pi) in v.iter_mut().zip(prev) {
                *vi -= dot * pi;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        for vi in &mut v {
            *vi /= norm;
        }
        rows.push(v);
    }
    rows
}

/// Rotate `x` by `angle` in the plane spanned by orthonormal `a`, `b`.
fn rotate_in_plane(x: &mut [f64], a: &[f64], b: &[f64], angle: f64) {
    let xa: f64 = x.iter().zip(a).map(|(v, w)| v * w).sum();
    let xb: f64 = x.iter().zip(b).map(|(v, w)| v * w).sum();
    let (sin, cos) = angle.sin_cos();
    let ca = (cos - 1.0) * xa - sin * xb;
    let cb = sin * xa + (cos - 1.0) * xb;
    for i in 0..x.len() {
        x[i] += ca * a[i] + cb * b[i];
    }
}

/// Deterministic synthetic benchmark. Class directions are mutually
/// orthogonal in patch space and repeated coherently across the patch
/// positions of a sample, scaled so flattened class means sit exactly
/// `class_sep` apart; target samples get a seeded in-plane rotation plus a
/// translation of magnitude `domain_shift`, both patch-coherent.
pub fn generate_synthetic(spec: &SyntheticShiftSpec) -> Result<GeneratedData> {
    spec.validate()?;
    let d = spec.n_patches * spec.d_in;
    let mut rng = rng::seeded_stream(spec.seed, 4);

    // Class directions plus a rotation plane and a shift direction, all
    // orthonormal rows of patch width, replicated across patch positions.
    let dirs = orthonormal_rows(&mut rng, spec.n_classes + 3, spec.d_in);
    let replicate = |row: &[f64], scale: f64| -> Vec<f64> {
        let mut out = Vec::with_capacity(d);
        for _ in 0..spec.n_patches {
            out.extend(row.iter().map(|v| v * scale));
        }
        out
    };
    // Flattened norm of a replicated row is sqrt(n_patches) times the row
    // norm; pairwise flattened distance of orthonormal directions at radius
    // r is r * sqrt(2), so this radius puts means exactly class_sep apart.
    let radius = spec.class_sep / std::f64::consts::SQRT_2;
    let per_row = radius / (spec.n_patches as f64).sqrt();
    let class_means: Vec<Vec<f64>> =
        dirs[..spec.n_classes].iter().map(|u| replicate(u, per_row)).collect();
    let unit = 1.0 / (spec.n_patches as f64).sqrt();
    let plane_a = replicate(&dirs[spec.n_classes], unit);
    let plane_b = replicate(&dirs[spec.n_classes + 1], unit);
    let shift_dir = replicate(&dirs[spec.n_classes + 2], unit);
    let (plane_a, plane_b, shift_dir) = (&plane_a, &plane_b, &shift_dir);
    let angle = ROTATION_PER_UNIT_SHIFT * spec.domain_shift;

    let sample = |rng: &mut ChaCha8Rng, mean: &[f64]| -> Vec<f64> {
        mean.iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + z * spec.noise_std
            })
            .collect()
    };

    let mut source = Vec::with_capacity(spec.n_classes * spec.n_source);
    let mut source_labels = Vec::with_capacity(source.capacity());
    for (k, mean) in class_means.iter().enumerate() {
        for _ in 0..spec.n_source {
            let x = sample(&mut rng, mean);
            source.push(Tensor::new(spec.n_patches, spec.d_in, x)?);
            source_labels.push(k);
        }
    }

    let mut target = Vec::with_capacity(spec.n_classes * spec.n_target);
    let mut target_labels = Vec::with_capacity(target.capacity());
    for (k, mean) in class_means.iter().enumerate() {
        for _ in 0..spec.n_target {
            let mut x = sample(&mut rng, mean);
            if spec.domain_shift > 0.0 {
                rotate_in_plane(&mut x, plane_a, plane_b, angle);
                for (xi, s) in x.iter_mut().zip(shift_dir) {
                    *xi += spec.domain_shift * s;
                }
            }
            target.push(Tensor::new(spec.n_patches, spec.d_in, x)?);
            target_labels.push(k);
        }
    }

    Ok(GeneratedData { source, source_labels, target, target_labels, class_means })
}

/// Flatten per-sample tensors into one matrix, row per sample.
pub fn flatten_samples(samples: &[Tensor]) -> Result<Tensor> {
    let width = samples
        .first()
        .map(|t| t.len())
        .ok_or_else(|| Error::Data("no samples to flatten".into()))?;
    let mut data = Vec::with_capacity(samples.len() * width);
    for s in samples {
        if s.len() != width {
            return Err(Error::Data("inconsistent sample widths".into()));
        }
        data.extend_from_slice(s.data());
    }
    Tensor::new(samples.len(), width, data)
}

/// Generate and persist a benchmark: `source.pdae`, `target.pdae` and
/// `manifest.txt` under `dir`. Target ground truth goes to the
/// evaluation-only section.
pub fn write_synthetic_dataset(dir: &Path, spec: &SyntheticShiftSpec) -> Result<DatasetManifest> {
    let data = generate_synthetic(spec)?;
    std::fs::create_dir_all(dir)?;

    let source_matrix = flatten_samples(&data.source)?;
    let source_labels: Vec<u32> = data.source_labels.iter().map(|&l| l as u32).collect();
    io::write_embeddings(&dir.join("source.pdae"), &source_matrix, Some(&source_labels), Dtype::F64)?;

    let target_matrix = flatten_samples(&data.target)?;
    let target_labels: Vec<u32> = data.target_labels.iter().map(|&l| l as u32).collect();
    io::write_embeddings_with_eval_labels(
        &dir.join("target.pdae"),
        &target_matrix,
        &target_labels,
        Dtype::F64,
    )?;

    let manifest = DatasetManifest {
        format_version: io::FORMAT_VERSION,
        class_names: (0..spec.n_classes).map(|k| format!("class_{k}")).collect(),
        feature_kind: FeatureKind::RawPatches,
        n_patches: spec.n_patches,
        d_in: spec.d_in,
        source_path: "source.pdae".into(),
        target_path: "target.pdae".into(),
    };
    manifest.save(&dir.join("manifest.txt"))?;
    Ok(manifest)
}
