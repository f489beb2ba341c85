//! Model state: frozen dual encoder plus all learnable parameters, with
//! no-grad forward helpers for evaluation, bank building and prediction.

use crate::alignment::{ift_forward, register_ift, FeatureBank, IftParams};
use crate::config::RunConfig;
use crate::encoder::{
    self, encode_text, register_model, EncoderConfig, FrozenWeights, PromptSet,
};
use crate::error::{Error, Result};
use crate::kernels::{self, indexed_map};
use crate::manifest::FeatureKind;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Samples per no-grad encoding tape; chunks run in parallel.
const EVAL_CHUNK: usize = 16;

#[derive(Debug, Clone)]
pub struct Model {
    pub encoder_cfg: EncoderConfig,
    pub weights: FrozenWeights,
    pub prompts: PromptSet,
    pub ift: IftParams,
}

impl Model {
    /// Fresh model: seeded frozen weights, seeded prompts and tuner.
    pub fn seeded(cfg: &RunConfig, n_classes: usize) -> Result<Model> {
        let weights = FrozenWeights::seeded(&cfg.encoder, n_classes)?;
        let prompts = PromptSet::seeded(&cfg.encoder, cfg.train.seed)?;
        let mut ift = IftParams::seeded(
            cfg.encoder.d_proj,
            cfg.train.seed,
            cfg.train.beta_source,
            cfg.train.beta_target,
        );
        ift.validate()?;
        ift.epsilon = (cfg.encoder.d_proj as f64).sqrt();
        Ok(Model { encoder_cfg: cfg.encoder.clone(), weights, prompts, ift })
    }

    /// Model for a concrete dataset. Raw-patch datasets get the aligned
    /// frozen construction: per-class source prototypes (patch-position
    /// means over the labeled source samples) seed the class embeddings,
    /// giving the fresh model a real zero-shot signal to adapt from.
    /// Precomputed-embedding datasets fall back to the plain seeded model.
    pub fn for_dataset(cfg: &RunConfig, dataset: &crate::manifest::Dataset) -> Result<Model> {
        let k = dataset.n_classes();
        match dataset.kind {
            FeatureKind::Embeddings => Model::seeded(cfg, k),
            FeatureKind::RawPatches => {
                let (rows, cols) = (cfg.encoder.n_patches, cfg.encoder.d_model);
                let mut sums = vec![Tensor::zeros(rows, cols); k];
                let mut counts = vec![0usize; k];
                for (x, &label) in dataset.source.iter().zip(&dataset.source_labels) {
                    if x.shape() != [rows, cols] {
                        return Err(Error::Data(format!(
                            "source sample has shape {:?}, encoder expects [{rows}, {cols}]",
                            x.shape()
                        )));
                    }
                    counts[label] += 1;
                    for (acc, &v) in sums[label].data_mut().iter_mut().zip(x.data()) {
                        *acc += v;
                    }
                }
                if let Some(missing) = counts.iter().position(|&c| c == 0) {
                    return Err(Error::Data(format!(
                        "class {missing} has no source samples to build a prototype from"
                    )));
                }
                for (sum, &count) in sums.iter_mut().zip(&counts) {
                    for v in sum.data_mut() {
                        *v /= count as f64;
                    }
                }
                let prompts = PromptSet::seeded(&cfg.encoder, cfg.train.seed)?;
                let weights = FrozenWeights::seeded_aligned(&cfg.encoder, &sums, &prompts)?;
                let mut ift = IftParams::seeded(
                    cfg.encoder.d_proj,
                    cfg.train.seed,
                    cfg.train.beta_source,
                    cfg.train.beta_target,
                );
                ift.validate()?;
                Ok(Model { encoder_cfg: cfg.encoder.clone(), weights, prompts, ift })
            }
        }
    }

    pub fn n_classes(&self) -> usize {
        self.weights.n_classes()
    }

    /// All learnable tensors in checkpoint order.
    pub fn learnable_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.prompts.tensors();
        out.extend(self.ift.tensors());
        out
    }

    pub fn learnable_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.prompts.tensors_mut();
        out.extend(self.ift.tensors_mut());
        out
    }

    /// Overwrite learnable tensors by name; shapes must match.
    pub fn load_learnable(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        use std::collections::HashMap;
        let incoming: HashMap<&str, &Tensor> =
            named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, slot) in self.learnable_tensors_mut() {
            let src = incoming.get(name.as_str()).ok_or_else(|| {
                Error::Data(format!("checkpoint is missing tensor {name:?}"))
            })?;
            if src.shape() != slot.shape() {
                return Err(Error::Data(format!(
                    "checkpoint tensor {name:?} has shape {:?}, model expects {:?}",
                    src.shape(),
                    slot.shape()
                )));
            }
            *slot = (*src).clone();
        }
        Ok(())
    }

    /// Flat parameter vector over all learnable tensors (gradient checks).
    pub fn flat_params(&self) -> Vec<f64> {
        self.learnable_tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, theta: &[f64]) -> Result<()> {
        let expect: usize = self.learnable_tensors().iter().map(|(_, t)| t.len()).sum();
        if theta.len() != expect {
            return Err(Error::Contract(format!(
                "parameter vector has {} entries, model has {expect}",
                theta.len()
            )));
        }
        let mut offset = 0;
        for (_, t) in self.learnable_tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&theta[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Unit-row text features for every class, no gradients.
    pub fn text_features(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let ids = register_model(&mut tape, &self.weights, &self.prompts, &self.encoder_cfg, false);
        let classes: Vec<usize> = (0..self.n_classes()).collect();
        let w = encode_text(&mut tape, &ids, &classes)?;
        Ok(tape.value(w).clone())
    }

    /// Unit-row image features for a batch of samples, no gradients.
    /// Raw patches run through the encoder in parallel chunks; precomputed
    /// embeddings pass straight through.
    pub fn image_features(&self, samples: &[Tensor], kind: FeatureKind) -> Result<Tensor> {
        if samples.is_empty() {
            return Tensor::new(0, self.encoder_cfg.d_proj, vec![]);
        }
        match kind {
            FeatureKind::Embeddings => {
                let d = self.encoder_cfg.d_proj;
                let mut data = Vec::with_capacity(samples.len() * d);
                for (i, s) in samples.iter().enumerate() {
                    if s.shape() != [1, d] {
                        return Err(Error::Data(format!(
                            "precomputed embedding {i} has shape {:?}, expected [1, {d}]",
                            s.shape()
                        )));
                    }
                    data.extend_from_slice(s.data());
                }
                Tensor::new(samples.len(), d, data)
            }
            FeatureKind::RawPatches => {
                let n_chunks = samples.len().div_ceil(EVAL_CHUNK);
                let chunks: Vec<Result<Vec<Vec<f64>>>> = indexed_map(n_chunks, 2, |ci| {
                    let lo = ci * EVAL_CHUNK;
                    let hi = (lo + EVAL_CHUNK).min(samples.len());
                    let mut tape = Tape::new();
                    let ids = register_model(
                        &mut tape,
                        &self.weights,
                        &self.prompts,
                        &self.encoder_cfg,
                        false,
                    );
                    samples[lo..hi]
                        .iter()
                        .map(|x| {
                            let z = encoder::encode_image(&mut tape, &ids, x)?;
                            Ok(tape.value(z).data().to_vec())
                        })
                        .collect()
                });
                let mut rows = Vec::with_capacity(samples.len());
                for chunk in chunks {
                    rows.extend(chunk?);
                }
                Tensor::from_rows(&rows)
            }
        }
    }

    /// Bank-augmented image features `h(z)`, no gradients.
    pub fn augmented_features(
        &self,
        features: &Tensor,
        source_bank: &FeatureBank,
        target_bank: &FeatureBank,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let ift_ids = register_ift(&mut tape, &self.ift, false);
        let z = tape.constant(features.clone());
        let h = ift_forward(&mut tape, &ift_ids, z, source_bank, target_bank)?;
        Ok(tape.value(h).clone())
    }
}

/// Class probabilities for arbitrary feature rows: softmax of cosine
/// similarity to the text rows over the temperature. Rows need not be unit.
pub fn branch_probs(text: &Tensor, features: &Tensor, temperature: f64) -> Result<Tensor> {
    let (b, d) = (features.rows(), features.cols());
    if d != text.cols() {
        return Err(Error::Dim {
            context: "branch_probs",
            left: text.shape().to_vec(),
            right: features.shape().to_vec(),
        });
    }
    let fn_rows = kernels::l2_normalize_rows(features.data(), b, d)?;
    let tn_rows = kernels::l2_normalize_rows(text.data(), text.rows(), d)?;
    let sims = kernels::matmul(&fn_rows, &tn_rows, b, d, text.rows(), true);
    let probs = kernels::softmax_rows(&sims, b, text.rows(), temperature)?;
    Tensor::new(b, text.rows(), probs)
}

/// Argmax with ties broken toward the lower class index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct Predictions {
    pub classes: Vec<usize>,
    /// `B x K` ensembled probabilities.
    pub probs: Tensor,
}

/// Weighted-sum prediction across branches:
/// `lambda * base + (1 - lambda) * alignment`. Without banks only the base
/// branch contributes.
pub fn predict(
    model: &Model,
    banks: Option<(&FeatureBank, &FeatureBank)>,
    samples: &[Tensor],
    kind: FeatureKind,
    lambda: f64,
) -> Result<Predictions> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Parameter(format!(
            "ensemble weight must be in [0, 1], got {lambda}"
        )));
    }
    let text = model.text_features()?;
    let features = model.image_features(samples, kind)?;
    let t = model.weights.temperature;
    let base = branch_probs(&text, &features, t)?;
    let probs = match banks {
        Some((source_bank, target_bank)) => {
            let augmented = model.augmented_features(&features, source_bank, target_bank)?;
            let aligned = branch_probs(&text, &augmented, t)?;
            let data = base
                .data()
                .iter()
                .zip(aligned.data())
                .map(|(b, a)| lambda * b + (1.0 - lambda) * a)
                .collect();
            Tensor::new(base.rows(), base.cols(), data)?
        }
        None => base,
    };
    let classes = (0..probs.rows()).map(|i| argmax_row(probs.row_slice(i))).collect();
    Ok(Predictions { classes, probs })
}
