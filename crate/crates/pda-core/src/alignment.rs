//! Alignment branch: per-domain K-way C-shot feature banks and the
//! image-guided feature-tuning attention module that lets image features
//! attend to both banks.

use crate::encoder::Domain;
use crate::error::{Error, Result};
use crate::kernels;
use crate::rng;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

/// Samples backing one class centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSupport {
    pub sample_ids: Vec<usize>,
    pub confidences: Vec<f64>,
}

/// Per-class centroid features for one domain. Frozen after construction;
/// never receives gradients.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    /// `K x d_proj`, unit rows.
    pub centroids: Tensor,
    pub domain: Domain,
    /// Shot budget the bank was built with.
    pub shots: usize,
    pub support: Vec<ClassSupport>,
}

/// Top-C most confident samples per class, averaged and L2-normalized.
/// Ties break toward the lower sample id, so the bank is independent of
/// input ordering. Classes without a single candidate are an error.
pub fn build_feature_bank(
    features: &Tensor,
    confidences: &[f64],
    labels: &[usize],
    n_classes: usize,
    shots: usize,
    domain: Domain,
) -> Result<FeatureBank> {
    let n = features.rows();
    if confidences.len() != n || labels.len() != n {
        return Err(Error::Data(format!(
            "bank inputs disagree: {n} feature rows, {} confidences, {} labels",
            confidences.len(),
            labels.len()
        )));
    }
    if shots == 0 {
        return Err(Error::Parameter("bank shots must be >= 1".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Data(format!(
            "bank label {bad} out of range for {n_classes} classes"
        )));
    }

    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (id, &label) in labels.iter().enumerate() {
        per_class[label].push(id);
    }
    let empty: Vec<usize> = (0..n_classes).filter(|&k| per_class[k].is_empty()).collect();
    if !empty.is_empty() {
        return Err(Error::EmptyClasses(empty));
    }

    let d = features.cols();
    let mut centroid_rows = Vec::with_capacity(n_classes);
    let mut support = Vec::with_capacity(n_classes);
    for candidates in per_class.iter_mut() {
        candidates.sort_by(|&a, &b| {
            confidences[b]
                .partial_cmp(&confidences[a])
                .expect("confidences must be comparable")
                .then(a.cmp(&b))
        });
        candidates.truncate(shots);

        let mut mean = vec![0.0; d];
        for &id in candidates.iter() {
            for (m, &v) in mean.iter_mut().zip(features.row_slice(id)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= candidates.len() as f64;
        }
        centroid_rows.push(mean);
        support.push(ClassSupport {
            sample_ids: candidates.clone(),
            confidences: candidates.iter().map(|&id| confidences[id]).collect(),
        });
    }

    let raw = Tensor::from_rows(&centroid_rows)?;
    let centroids = Tensor::new(
        n_classes,
        d,
        kernels::l2_normalize_rows(raw.data(), n_classes, d)?,
    )?;
    Ok(FeatureBank { centroids, domain, shots, support })
}

/// Target-side bank construction where classes missing from the confident
/// set fall back to the source centroid. Returns the bank and the list of
/// classes that needed the fallback.
pub fn build_bank_with_fallback(
    features: &Tensor,
    confidences: &[f64],
    labels: &[usize],
    n_classes: usize,
    shots: usize,
    domain: Domain,
    fallback: &FeatureBank,
) -> Result<(FeatureBank, Vec<usize>)> {
    match build_feature_bank(features, confidences, labels, n_classes, shots, domain) {
        Ok(bank) => Ok((bank, Vec::new())),
        Err(Error::EmptyClasses(missing)) => {
            // Rebuild with the missing classes patched from the fallback bank.
            let d = features.cols();
            let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
            let mut support = Vec::with_capacity(n_classes);
            let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
            for (id, &label) in labels.iter().enumerate() {
                per_class[label].push(id);
            }
            for (k, candidates) in per_class.iter_mut().enumerate() {
                if candidates.is_empty() {
                    rows.push(fallback.centroids.row_slice(k).to_vec());
                    support.push(ClassSupport { sample_ids: vec![], confidences: vec![] });
                    continue;
                }
                candidates.sort_by(|&a, &b| {
                    confidences[b]
                        .partial_cmp(&confidences[a])
                        .expect("comparable")
                        .then(a.cmp(&b))
                });
                candidates.truncate(shots);
                let mut mean = vec![0.0; d];
                for &id in candidates.iter() {
                    for (m, &v) in mean.iter_mut().zip(features.row_slice(id)) {
                        *m += v;
                    }
                }
                for m in &mut mean {
                    *m /= candidates.len() as f64;
                }
                let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < kernels::NORM_EPS {
                    return Err(Error::Degenerate(format!(
                        "class {k} centroid collapsed to zero"
                    )));
                }
                rows.push(mean.iter().map(|v| v / norm).collect());
                support.push(ClassSupport {
                    sample_ids: candidates.clone(),
                    confidences: candidates.iter().map(|&id| confidences[id]).collect(),
                });
            }
            let centroids = Tensor::from_rows(&rows)?;
            Ok((FeatureBank { centroids, domain, shots, support }, missing))
        }
        Err(e) => Err(e),
    }
}

/// Three linear layers with ReLU between them, widths `d -> d -> d -> d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp3 {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

impl Mlp3 {
    pub fn seeded(rng: &mut rand_chacha::ChaCha8Rng, d: usize) -> Self {
        Mlp3 {
            w1: rng::gaussian(rng, d, d, INIT_STD),
            b1: Tensor::zeros(1, d),
            w2: rng::gaussian(rng, d, d, INIT_STD),
            b2: Tensor::zeros(1, d),
            w3: rng::gaussian(rng, d, d, INIT_STD),
            b3: Tensor::zeros(1, d),
        }
    }

    /// Identity weights, zero bias: the network is the identity map on
    /// non-negative inputs (ReLU passes them through).
    pub fn identity(d: usize) -> Self {
        Mlp3 {
            w1: Tensor::identity(d),
            b1: Tensor::zeros(1, d),
            w2: Tensor::identity(d),
            b2: Tensor::zeros(1, d),
            w3: Tensor::identity(d),
            b3: Tensor::zeros(1, d),
        }
    }
}

/// Learnable parameters of the image-guided feature tuner.
#[derive(Debug, Clone, PartialEq)]
pub struct IftParams {
    /// Shared query/key/value projector.
    pub f_pre: Mlp3,
    /// Output projector after attention.
    pub f_post: Mlp3,
    /// Attention scale; positive.
    pub epsilon: f64,
    /// Fusion weight of the source-attended feature.
    pub beta_source: f64,
    /// Fusion weight of the target-attended feature.
    pub beta_target: f64,
}

impl IftParams {
    pub fn seeded(d_proj: usize, seed: u64, beta_source: f64, beta_target: f64) -> Self {
        let mut rng = rng::seeded_stream(seed, 2);
        IftParams {
            f_pre: Mlp3::seeded(&mut rng, d_proj),
            f_post: Mlp3::seeded(&mut rng, d_proj),
            epsilon: (d_proj as f64).sqrt(),
            beta_source,
            beta_target,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 {
            return Err(Error::Parameter(format!(
                "attention scale must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let name = |net: &str, part: &str| format!("ift.{net}.{part}");
        let mut out = Vec::new();
        for (net, mlp) in [("f_pre", &self.f_pre), ("f_post", &self.f_post)] {
            out.push((name(net, "w1"), &mlp.w1));
            out.push((name(net, "b1"), &mlp.b1));
            out.push((name(net, "w2"), &mlp.w2));
            out.push((name(net, "b2"), &mlp.b2));
            out.push((name(net, "w3"), &mlp.w3));
            out.push((name(net, "b3"), &mlp.b3));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (net, mlp) in [("f_pre", &mut self.f_pre), ("f_post", &mut self.f_post)] {
            out.push((format!("ift.{net}.w1"), &mut mlp.w1));
            out.push((format!("ift.{net}.b1"), &mut mlp.b1));
            out.push((format!("ift.{net}.w2"), &mut mlp.w2));
            out.push((format!("ift.{net}.b2"), &mut mlp.b2));
            out.push((format!("ift.{net}.w3"), &mut mlp.w3));
            out.push((format!("ift.{net}.b3"), &mut mlp.b3));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

// ── tape wiring ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct MlpIds {
    w1: ValueId,
    b1: ValueId,
    w2: ValueId,
    b2: ValueId,
    w3: ValueId,
    b3: ValueId,
}

#[derive(Debug, Clone, Copy)]
pub struct IftIds {
    pub f_pre: MlpIds,
    pub f_post: MlpIds,
    pub epsilon: f64,
    pub beta_source: f64,
    pub beta_target: f64,
}

impl IftIds {
    /// Learnable handles in the same order as [`IftParams::tensors`].
    pub fn learnable_ids(&self) -> Vec<ValueId> {
        let mut out = Vec::with_capacity(12);
        for mlp in [&self.f_pre, &self.f_post] {
            out.extend_from_slice(&[mlp.w1, mlp.b1, mlp.w2, mlp.b2, mlp.w3, mlp.b3]);
        }
        out
    }
}

pub fn register_ift(tape: &mut Tape, params: &IftParams, learnable: bool) -> IftIds {
    let mut reg = |t: &Tensor| {
        if learnable {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    let mlp = |m: &Mlp3, reg: &mut dyn FnMut(&Tensor) -> ValueId| MlpIds {
        w1: reg(&m.w1),
        b1: reg(&m.b1),
        w2: reg(&m.w2),
        b2: reg(&m.b2),
        w3: reg(&m.w3),
        b3: reg(&m.b3),
    };
    IftIds {
        f_pre: mlp(&params.f_pre, &mut reg),
        f_post: mlp(&params.f_post, &mut reg),
        epsilon: params.epsilon,
        beta_source: params.beta_source,
        beta_target: params.beta_target,
    }
}

fn mlp3_forward(tape: &mut Tape, ids: &MlpIds, x: ValueId) -> Result<ValueId> {
    let h1 = tape.matmul(x, ids.w1)?;
    let h1 = tape.add_row_broadcast(h1, ids.b1)?;
    let a1 = tape.relu(h1);
    let h2 = tape.matmul(a1, ids.w2)?;
    let h2 = tape.add_row_broadcast(h2, ids.b2)?;
    let a2 = tape.relu(h2);
    let h3 = tape.matmul(a2, ids.w3)?;
    tape.add_row_broadcast(h3, ids.b3)
}

/// Query/key/value projections through the one shared projector. The key
/// and value of a bank are the identical projected matrix.
#[derive(Debug, Clone, Copy)]
pub struct Qkv {
    pub q: ValueId,
    pub k_source: ValueId,
    pub v_source: ValueId,
    pub k_target: ValueId,
    pub v_target: ValueId,
}

pub fn project_qkv(
    tape: &mut Tape,
    ift: &IftIds,
    image: ValueId,
    source_centroids: ValueId,
    target_centroids: ValueId,
) -> Result<Qkv> {
    let q = mlp3_forward(tape, &ift.f_pre, image)?;
    let s = mlp3_forward(tape, &ift.f_pre, source_centroids)?;
    let t = mlp3_forward(tape, &ift.f_pre, target_centroids)?;
    Ok(Qkv { q, k_source: s, v_source: s, k_target: t, v_target: t })
}

/// `f_post(softmax(Q·Kᵀ / epsilon) · V)`.
pub fn attend(
    tape: &mut Tape,
    q: ValueId,
    keys: ValueId,
    values: ValueId,
    epsilon: f64,
    f_post: &MlpIds,
) -> Result<ValueId> {
    if epsilon <= 0.0 {
        return Err(Error::Parameter(format!(
            "attention scale must be positive, got {epsilon}"
        )));
    }
    let scores = tape.matmul_tb(q, keys)?;
    let weights = tape.softmax_rows(scores, epsilon)?;
    let mixed = tape.matmul(weights, values)?;
    mlp3_forward(tape, f_post, mixed)
}

/// Residual add with row normalization: `(attended + image) / ||.||_2`.
pub fn add_norm(tape: &mut Tape, attended: ValueId, image: ValueId) -> Result<ValueId> {
    let sum = tape.add(attended, image)?;
    tape.l2_normalize_rows(sum)
}

/// Full tuner: attend to both banks, add-norm each against the original
/// feature, and fuse `beta_source * z_vs + beta_target * z_vt`. Banks enter
/// as constants, so gradients flow only to the projectors and the image.
pub fn ift_forward(
    tape: &mut Tape,
    ift: &IftIds,
    image: ValueId,
    source_bank: &FeatureBank,
    target_bank: &FeatureBank,
) -> Result<ValueId> {
    let sc = tape.constant(source_bank.centroids.clone());
    let tc = tape.constant(target_bank.centroids.clone());
    let qkv = project_qkv(tape, ift, image, sc, tc)?;
    let source_attended = attend(tape, qkv.q, qkv.k_source, qkv.v_source, ift.epsilon, &ift.f_post)?;
    let target_attended = attend(tape, qkv.q, qkv.k_target, qkv.v_target, ift.epsilon, &ift.f_post)?;
    let z_vs = add_norm(tape, source_attended, image)?;
    let z_vt = add_norm(tape, target_attended, image)?;
    let ws = tape.scale(z_vs, ift.beta_source);
    let wt = tape.scale(z_vt, ift.beta_target);
    tape.add(ws, wt)
}
