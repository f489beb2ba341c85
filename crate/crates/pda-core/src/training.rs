//! Two-branch training loop: thresholded pseudo-labeling with an optional
//! zero-shot warm-up, four contrastive losses combined into one objective,
//! plain SGD under cosine annealing, and bit-reproducible checkpointing.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{
    build_bank_with_fallback, build_feature_bank, ift_forward, register_ift, FeatureBank,
};
use crate::config::RunConfig;
use crate::encoder::{self, register_model, Domain, ModelIds};
use crate::error::{Error, Result};
use crate::io::{Checkpoint, RngState};
use crate::manifest::{Dataset, FeatureKind};
use crate::metrics;
use crate::model::{argmax_row, branch_probs, Model};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// Per-step loss record; one log line each.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub l_x: f64,
    pub l_u: f64,
    pub l_xa: f64,
    pub l_ua: f64,
    pub total: f64,
    pub n_pseudo_kept: usize,
}

impl LossReport {
    /// Tab-separated record: step, lr, L_x, L_u, L_xa, L_ua, total, kept.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{}",
            self.step, self.lr, self.l_x, self.l_u, self.l_xa, self.l_ua, self.total,
            self.n_pseudo_kept
        )
    }

    pub fn parse_log_line(line: &str) -> Result<LossReport> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 8 {
            return Err(Error::Data(format!(
                "log record has {} fields, expected 8: {line:?}",
                fields.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| Error::Data(format!("bad numeric field {i} in {line:?}")))
        };
        Ok(LossReport {
            epoch: 0,
            step: fields[0]
                .parse()
                .map_err(|_| Error::Data(format!("bad step field in {line:?}")))?,
            lr: num(1)?,
            l_x: num(2)?,
            l_u: num(3)?,
            l_xa: num(4)?,
            l_ua: num(5)?,
            total: num(6)?,
            n_pseudo_kept: fields[7]
                .parse()
                .map_err(|_| Error::Data(format!("bad kept field in {line:?}")))?,
        })
    }
}

/// Replay a training log and check `total == L_x + L_u + gamma*(L_xa + L_ua)`
/// for every record, within 1e-9. Returns the number of records verified.
pub fn verify_log_additivity(log_text: &str) -> Result<usize> {
    let mut gamma = None;
    let mut checked = 0;
    for line in log_text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((key, value)) = rest.split_once('=') {
                if key.trim() == "gamma" {
                    gamma = Some(value.trim().parse::<f64>().map_err(|_| {
                        Error::Data(format!("bad gamma in log header: {line:?}"))
                    })?);
                }
            }
            continue;
        }
        let gamma = gamma.ok_or_else(|| {
            Error::Data("log records appear before the gamma header line".into())
        })?;
        let rec = LossReport::parse_log_line(line)?;
        let recomputed = rec.l_x + rec.l_u + gamma * (rec.l_xa + rec.l_ua);
        if (rec.total - recomputed).abs() > 1e-9 {
            return Err(Error::Numerical(format!(
                "step {}: total {:.17e} differs from recomputed {:.17e}",
                rec.step, rec.total, recomputed
            )));
        }
        checked += 1;
    }
    Ok(checked)
}

/// Argmax labels and a confidence mask: a row is kept when its max
/// probability reaches `tau`.
pub fn pseudo_label(probs: &Tensor, tau: f64) -> Result<(Vec<usize>, Vec<bool>)> {
    let (b, k) = (probs.rows(), probs.cols());
    let mut labels = Vec::with_capacity(b);
    let mut mask = Vec::with_capacity(b);
    for i in 0..b {
        let row = probs.row_slice(i);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
            return Err(Error::Contract(format!(
                "probability row {i} is malformed (sum {sum}); cannot pseudo-label"
            )));
        }
        let label = argmax_row(row);
        debug_assert!(label < k);
        labels.push(label);
        mask.push(row[label] >= tau);
    }
    Ok((labels, mask))
}

/// Cosine annealing from `lr0` at step 0 to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
}

/// Masked mean of `-log softmax(sim(features, text)/t)[label]` on the tape.
/// Feature rows need not be unit; similarity normalizes internally.
pub fn contrastive_loss(
    tape: &mut Tape,
    text: ValueId,
    features: ValueId,
    labels: &[usize],
    mask: &[bool],
    temperature: f64,
) -> Result<ValueId> {
    let sims = tape.cosine_sim(features, text)?;
    let probs = tape.softmax_rows(sims, temperature)?;
    tape.cross_entropy_from_probs(probs, labels, mask)
}

/// Frozen zero-shot state captured from the freshly seeded model before
/// any training: features, probabilities, confidences and pseudo labels
/// for both domains. Warm-up labeling and bank construction read from here.
#[derive(Debug, Clone)]
pub struct ZeroShotCache {
    pub text: Tensor,
    pub source_features: Tensor,
    pub target_features: Tensor,
    pub source_probs: Tensor,
    pub target_probs: Tensor,
    pub source_confidence: Vec<f64>,
    pub target_confidence: Vec<f64>,
    pub target_pseudo: Vec<usize>,
}

impl ZeroShotCache {
    pub fn compute(model: &Model, dataset: &Dataset) -> Result<Self> {
        let text = model.text_features()?;
        let t = model.weights.temperature;
        let source_features = model.image_features(&dataset.source, dataset.kind)?;
        let target_features = model.image_features(&dataset.target, dataset.kind)?;
        let source_probs = branch_probs(&text, &source_features, t)?;
        let target_probs = if dataset.target.is_empty() {
            Tensor::new(0, text.rows(), vec![])?
        } else {
            branch_probs(&text, &target_features, t)?
        };
        let max_of = |p: &Tensor| -> Vec<f64> {
            (0..p.rows())
                .map(|i| p.row_slice(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                .collect()
        };
        let target_pseudo = (0..target_probs.rows())
            .map(|i| argmax_row(target_probs.row_slice(i)))
            .collect();
        Ok(ZeroShotCache {
            source_confidence: max_of(&source_probs),
            target_confidence: max_of(&target_probs),
            target_pseudo,
            text,
            source_features,
            target_features,
            source_probs,
            target_probs,
        })
    }
}

/// Loss means for one epoch plus the domain gap under the current model.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_l_x: f64,
    pub mean_l_u: f64,
    pub mean_l_xa: f64,
    pub mean_l_ua: f64,
    pub mean_total: f64,
    pub mean_pseudo_kept: f64,
    /// MMD between source and target image features.
    pub mmd_source_target: f64,
}

pub struct Trainer<'a> {
    pub model: Model,
    pub cfg: RunConfig,
    dataset: &'a Dataset,
    zero_shot: ZeroShotCache,
    pub source_bank: FeatureBank,
    pub target_bank: FeatureBank,
    /// Classes whose target-bank centroid fell back to the source bank.
    pub bank_fallback_classes: Vec<usize>,
    step: usize,
    epochs_done: usize,
    rng: ChaCha8Rng,
}

fn check_dataset(dataset: &Dataset) -> Result<()> {
    let k = dataset.n_classes();
    if dataset.source.is_empty() {
        return Err(Error::Data("training needs source samples".into()));
    }
    if dataset.source_labels.len() != dataset.source.len() {
        return Err(Error::Data(format!(
            "{} source samples but {} labels",
            dataset.source.len(),
            dataset.source_labels.len()
        )));
    }
    let mut seen = vec![false; k];
    for &l in &dataset.source_labels {
        if l >= k {
            return Err(Error::Data(format!("source label {l} out of range for {k} classes")));
        }
        seen[l] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Data(format!(
            "class {missing} has no source samples; every class needs at least one"
        )));
    }
    Ok(())
}

fn build_banks(
    cache: &ZeroShotCache,
    dataset: &Dataset,
    shots: usize,
) -> Result<(FeatureBank, FeatureBank, Vec<usize>)> {
    let k = dataset.n_classes();
    let source_bank = build_feature_bank(
        &cache.source_features,
        &cache.source_confidence,
        &dataset.source_labels,
        k,
        shots,
        Domain::Source,
    )?;
    if dataset.target.is_empty() {
        // Degenerate but legal: the target bank mirrors the source bank.
        let mut tb = source_bank.clone();
        tb.domain = Domain::Target;
        let all: Vec<usize> = (0..k).collect();
        return Ok((source_bank, tb, all));
    }
    let (target_bank, fallback) = build_bank_with_fallback(
        &cache.target_features,
        &cache.target_confidence,
        &cache.target_pseudo,
        k,
        shots,
        Domain::Target,
        &source_bank,
    )?;
    Ok((source_bank, target_bank, fallback))
}

/// True when pseudo labels must come from the frozen zero-shot outputs:
/// either warm-up is still running, or warm-up is disabled entirely
/// (zero means zero-shot labels for the whole run).
fn use_frozen_pseudo_labels(warmup_epochs: usize, epoch: usize) -> bool {
    warmup_epochs == 0 || epoch < warmup_epochs
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, cfg: &RunConfig) -> Result<Self> {
        let cfg = cfg.clone().normalized()?;
        check_dataset(dataset)?;
        let model = Model::for_dataset(&cfg, dataset)?;
        let zero_shot = ZeroShotCache::compute(&model, dataset)?;
        let (source_bank, target_bank, bank_fallback_classes) =
            build_banks(&zero_shot, dataset, cfg.train.shots)?;
        let rng = crate::rng::seeded_stream(cfg.train.seed, 8);
        Ok(Trainer {
            model,
            cfg,
            dataset,
            zero_shot,
            source_bank,
            target_bank,
            bank_fallback_classes,
            step: 0,
            epochs_done: 0,
            rng,
        })
    }

    /// Resume from a checkpoint; the config must hash to the value the
    /// checkpoint was written with.
    pub fn from_checkpoint(
        dataset: &'a Dataset,
        cfg: &RunConfig,
        checkpoint: &Checkpoint,
    ) -> Result<Self> {
        let cfg = cfg.clone().normalized()?;
        if cfg.hash() != checkpoint.config_hash {
            return Err(Error::Contract(format!(
                "config hash {:#x} does not match checkpoint hash {:#x}",
                cfg.hash(),
                checkpoint.config_hash
            )));
        }
        let mut trainer = Trainer::new(dataset, &cfg)?;
        trainer.model.load_learnable(&checkpoint.tensors)?;
        let bank_of = |name: &str, domain: Domain| -> Result<FeatureBank> {
            let centroids = checkpoint
                .tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Data(format!("checkpoint is missing {name:?}")))?;
            let k = centroids.rows();
            Ok(FeatureBank {
                centroids,
                domain,
                shots: cfg.train.shots,
                support: vec![
                    crate::alignment::ClassSupport { sample_ids: vec![], confidences: vec![] };
                    k
                ],
            })
        };
        trainer.source_bank = bank_of("bank.source", Domain::Source)?;
        trainer.target_bank = bank_of("bank.target", Domain::Target)?;
        trainer.step = checkpoint.step as usize;
        trainer.epochs_done = checkpoint.epochs_done as usize;
        trainer.rng = checkpoint.rng.restore();
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = self
            .model
            .learnable_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        tensors.push(("bank.source".into(), self.source_bank.centroids.clone()));
        tensors.push(("bank.target".into(), self.target_bank.centroids.clone()));
        Checkpoint {
            config_hash: self.cfg.hash(),
            step: self.step as u64,
            epochs_done: self.epochs_done as u32,
            rng: RngState::capture(&self.rng),
            tensors,
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn zero_shot(&self) -> &ZeroShotCache {
        &self.zero_shot
    }

    /// `# key = value` block identifying the run; written atop every log.
    pub fn log_header(&self) -> String {
        let mut out = String::from("# resolved run configuration\n");
        for line in self.cfg.echo().lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
        out.push_str("# columns: step\tlr\tL_x\tL_u\tL_xa\tL_ua\ttotal\tn_pseudo_kept\n");
        out
    }

    fn steps_per_epoch(&self) -> usize {
        let ns = self.dataset.source.len();
        let nt = self.dataset.target.len();
        ns.max(nt).div_ceil(self.cfg.train.batch_size)
    }

    /// Train from the current epoch up to `cfg.train.epochs`, invoking
    /// `sink` once per step with the loss record.
    pub fn run(&mut self, sink: impl FnMut(&LossReport)) -> Result<Vec<EpochRecord>> {
        self.run_until(self.cfg.train.epochs, sink)
    }

    /// Train up to `epoch_limit` (capped by the configured epoch count);
    /// the learning-rate schedule always spans the full configured run, so
    /// stopping early and resuming reproduces the uninterrupted run.
    pub fn run_until(
        &mut self,
        epoch_limit: usize,
        mut sink: impl FnMut(&LossReport),
    ) -> Result<Vec<EpochRecord>> {
        let epochs = self.cfg.train.epochs.min(epoch_limit);
        let steps_per_epoch = self.steps_per_epoch();
        let total_steps = self.cfg.train.epochs * steps_per_epoch;
        let mut records = Vec::new();

        while self.epochs_done < epochs {
            let epoch = self.epochs_done;
            let mut source_order: Vec<usize> = (0..self.dataset.source.len()).collect();
            source_order.shuffle(&mut self.rng);
            let mut target_order: Vec<usize> = (0..self.dataset.target.len()).collect();
            target_order.shuffle(&mut self.rng);

            let batch = self.cfg.train.batch_size;
            let mut sums = [0.0f64; 5];
            let mut kept_sum = 0usize;
            for s in 0..steps_per_epoch {
                let pick = |order: &[usize]| -> Vec<usize> {
                    if order.is_empty() {
                        return Vec::new();
                    }
                    (0..batch).map(|i| order[(s * batch + i) % order.len()]).collect()
                };
                let source_batch = pick(&source_order);
                let target_batch = pick(&target_order);
                let lr = cosine_lr(self.step, total_steps, self.cfg.train.lr0);
                let report = self.step_once(epoch, &source_batch, &target_batch, lr)?;
                sums[0] += report.l_x;
                sums[1] += report.l_u;
                sums[2] += report.l_xa;
                sums[3] += report.l_ua;
                sums[4] += report.total;
                kept_sum += report.n_pseudo_kept;
                sink(&report);
            }

            self.epochs_done += 1;
            let n = steps_per_epoch as f64;
            records.push(EpochRecord {
                epoch,
                mean_l_x: sums[0] / n,
                mean_l_u: sums[1] / n,
                mean_l_xa: sums[2] / n,
                mean_l_ua: sums[3] / n,
                mean_total: sums[4] / n,
                mean_pseudo_kept: kept_sum as f64 / n,
                mmd_source_target: self.domain_gap()?,
            });

            // Refresh gating uses the configured epoch count, not the stop
            // limit, so interrupting at a refresh boundary checkpoints the
            // refreshed banks the uninterrupted run would train with.
            let refresh = self.cfg.train.bank_refresh_epochs;
            if refresh > 0
                && self.epochs_done % refresh == 0
                && self.epochs_done < self.cfg.train.epochs
            {
                self.refresh_banks()?;
            }
        }
        Ok(records)
    }

    /// MMD between current source and target image features.
    pub fn domain_gap(&self) -> Result<f64> {
        if self.dataset.target.len() < 2 || self.dataset.source.len() < 2 {
            return Ok(f64::NAN);
        }
        let sf = self.model.image_features(&self.dataset.source, self.dataset.kind)?;
        let tf = self.model.image_features(&self.dataset.target, self.dataset.kind)?;
        metrics::mmd(&sf, &tf)
    }

    /// Rebuild both banks from the current model (refresh mode).
    fn refresh_banks(&mut self) -> Result<()> {
        let cache = ZeroShotCache::compute(&self.model, self.dataset)?;
        let (sb, tb, fallback) = build_banks(&cache, self.dataset, self.cfg.train.shots)?;
        self.source_bank = sb;
        self.target_bank = tb;
        self.bank_fallback_classes = fallback;
        Ok(())
    }

    fn zero_scalar(tape: &mut Tape) -> ValueId {
        tape.constant(Tensor::scalar(0.0))
    }

    fn encode_batch(
        &self,
        tape: &mut Tape,
        mids: &ModelIds,
        indices: &[usize],
        samples: &[Tensor],
    ) -> Result<Option<ValueId>> {
        if indices.is_empty() {
            return Ok(None);
        }
        match self.dataset.kind {
            FeatureKind::RawPatches => {
                let rows: Vec<ValueId> = indices
                    .iter()
                    .map(|&i| encoder::encode_image(tape, mids, &samples[i]))
                    .collect::<Result<_>>()?;
                Ok(Some(tape.concat_rows(&rows)?))
            }
            FeatureKind::Embeddings => {
                let d = self.cfg.encoder.d_proj;
                let mut data = Vec::with_capacity(indices.len() * d);
                for &i in indices {
                    if samples[i].shape() != [1, d] {
                        return Err(Error::Data(format!(
                            "precomputed embedding has shape {:?}, expected [1, {d}]",
                            samples[i].shape()
                        )));
                    }
                    data.extend_from_slice(samples[i].data());
                }
                Ok(Some(tape.constant(Tensor::new(indices.len(), d, data)?)))
            }
        }
    }

    fn step_once(
        &mut self,
        epoch: usize,
        source_batch: &[usize],
        target_batch: &[usize],
        lr: f64,
    ) -> Result<LossReport> {
        let terms = self.cfg.train.loss_terms;
        let t = self.cfg.train.temperature;
        let gamma = self.cfg.train.gamma;
        let tau = self.cfg.train.tau;

        let mut tape = Tape::new();
        let mids = register_model(
            &mut tape,
            &self.model.weights,
            &self.model.prompts,
            &self.model.encoder_cfg,
            true,
        );
        let iids = register_ift(&mut tape, &self.model.ift, true);

        let classes: Vec<usize> = (0..self.model.n_classes()).collect();
        let text = encoder::encode_text(&mut tape, &mids, &classes)?;
        let source_feats = self.encode_batch(&mut tape, &mids, source_batch, &self.dataset.source)?;
        let target_feats = self.encode_batch(&mut tape, &mids, target_batch, &self.dataset.target)?;

        let source_labels: Vec<usize> =
            source_batch.iter().map(|&i| self.dataset.source_labels[i]).collect();
        let source_mask = vec![true; source_labels.len()];

        // Base branch, source.
        let l_x = match source_feats {
            Some(zs) if terms.l_x => {
                contrastive_loss(&mut tape, text, zs, &source_labels, &source_mask, t)?
            }
            _ => Self::zero_scalar(&mut tape),
        };

        // Pseudo labels for the target batch: frozen zero-shot logits during
        // warm-up (or throughout, when warm-up is disabled), the current
        // model's logits afterwards. One labeling serves both target losses.
        let (target_probs_id, target_labels, target_mask) = match target_feats {
            Some(zt) => {
                let sims = tape.cosine_sim(zt, text)?;
                let probs = tape.softmax_rows(sims, t)?;
                let label_source = if use_frozen_pseudo_labels(self.cfg.train.warmup_epochs, epoch)
                {
                    let rows: Vec<Vec<f64>> = target_batch
                        .iter()
                        .map(|&i| self.zero_shot.target_probs.row_slice(i).to_vec())
                        .collect();
                    Tensor::from_rows(&rows)?
                } else {
                    tape.value(probs).clone()
                };
                let (labels, mask) = pseudo_label(&label_source, tau)?;
                (Some(probs), labels, mask)
            }
            None => (None, Vec::new(), Vec::new()),
        };
        let n_pseudo_kept = target_mask.iter().filter(|&&m| m).count();

        let l_u = match target_probs_id {
            Some(probs) if terms.l_u => {
                tape.cross_entropy_from_probs(probs, &target_labels, &target_mask)?
            }
            _ => Self::zero_scalar(&mut tape),
        };

        // Alignment branch.
        let l_xa = match source_feats {
            Some(zs) if terms.l_xa => {
                let h = ift_forward(&mut tape, &iids, zs, &self.source_bank, &self.target_bank)?;
                contrastive_loss(&mut tape, text, h, &source_labels, &source_mask, t)?
            }
            _ => Self::zero_scalar(&mut tape),
        };
        let l_ua = match target_feats {
            Some(zt) if terms.l_ua => {
                let h = ift_forward(&mut tape, &iids, zt, &self.source_bank, &self.target_bank)?;
                contrastive_loss(&mut tape, text, h, &target_labels, &target_mask, t)?
            }
            _ => Self::zero_scalar(&mut tape),
        };

        let base_sum = tape.add(l_x, l_u)?;
        let align_sum = tape.add(l_xa, l_ua)?;
        let align_scaled = tape.scale(align_sum, gamma);
        let total = tape.add(base_sum, align_scaled)?;

        let report = LossReport {
            epoch,
            step: self.step,
            lr,
            l_x: tape.value(l_x).scalar_value()?,
            l_u: tape.value(l_u).scalar_value()?,
            l_xa: tape.value(l_xa).scalar_value()?,
            l_ua: tape.value(l_ua).scalar_value()?,
            total: tape.value(total).scalar_value()?,
            n_pseudo_kept,
        };
        if !report.total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at step {}: {}",
                report.step,
                report.log_line()
            )));
        }

        let grads = tape.backward(total)?;
        let mut ids = mids.learnable_ids();
        ids.extend(iids.learnable_ids());
        for ((_, tensor), id) in self.model.learnable_tensors_mut().into_iter().zip(ids) {
            if let Some(g) = grads.get(id) {
                for (p, gv) in tensor.data_mut().iter_mut().zip(g.data()) {
                    *p -= lr * gv;
                }
            }
        }

        self.step += 1;
        Ok(report)
    }
}
