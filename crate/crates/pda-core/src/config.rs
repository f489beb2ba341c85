//! Run configuration: every hyperparameter of the two-branch trainer, a
//! documented key-value file format, and a canonical echo for logging and
//! checkpoint hashes.

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::hash::hash_str;

/// Which loss terms participate in the total objective (ablation axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerms {
    /// Supervised contrastive loss on labeled source features.
    pub l_x: bool,
    /// Pseudo-labeled contrastive loss on target features.
    pub l_u: bool,
    /// Supervised loss on bank-augmented source features.
    pub l_xa: bool,
    /// Pseudo-labeled loss on bank-augmented target features.
    pub l_ua: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        LossTerms { l_x: true, l_u: true, l_xa: true, l_ua: true }
    }
}

/// Trainer hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Pseudo-label confidence threshold; values above 1 keep nothing.
    pub tau: f64,
    /// Weight of the alignment-branch losses.
    pub gamma: f64,
    pub beta_source: f64,
    pub beta_target: f64,
    /// Softmax temperature for similarity logits.
    pub temperature: f64,
    /// Initial learning rate; zero freezes the parameters.
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Bank shots per class (C).
    pub shots: usize,
    /// Prompt tokens per layer (M).
    pub context_len: usize,
    /// Epochs that pseudo-label from frozen zero-shot logits before
    /// switching to the current model; zero means zero-shot throughout.
    pub warmup_epochs: usize,
    /// Test-time mix of base vs alignment predictions, in [0, 1].
    pub ensemble_weight: f64,
    pub seed: u64,
    pub loss_terms: LossTerms,
    /// Rebuild banks from the current model every E epochs; zero disables.
    pub bank_refresh_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 0.8,
            gamma: 1.0,
            beta_source: 0.1,
            beta_target: 0.1,
            temperature: 0.01,
            lr0: 0.003,
            epochs: 10,
            batch_size: 32,
            shots: 5,
            context_len: 2,
            warmup_epochs: 0,
            ensemble_weight: 0.5,
            seed: 0,
            loss_terms: LossTerms::default(),
            bank_refresh_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() || self.tau < 0.0 {
            return Err(Error::Parameter(format!("tau must be >= 0, got {}", self.tau)));
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::Parameter(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.ensemble_weight) {
            return Err(Error::Parameter(format!(
                "ensemble_weight must be in [0, 1], got {}",
                self.ensemble_weight
            )));
        }
        if !self.lr0.is_finite() || self.lr0 < 0.0 {
            return Err(Error::Parameter(format!("lr0 must be >= 0, got {}", self.lr0)));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be >= 1".into()));
        }
        if self.shots == 0 {
            return Err(Error::Parameter("shots must be >= 1".into()));
        }
        Ok(())
    }
}

/// Full resolved run configuration: trainer plus encoder dimensions.
/// `context_len` and `seed` flow from the trainer into the encoder.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
}

impl RunConfig {
    /// Propagate shared fields and validate everything.
    pub fn normalized(mut self) -> Result<Self> {
        self.encoder.context_len = self.train.context_len;
        self.encoder.seed = self.train.seed;
        self.train.validate()?;
        self.encoder.validate()?;
        Ok(self)
    }

    /// Parse the documented `key = value` format; unknown keys are data
    /// errors so typos cannot silently fall back to defaults.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Data(format!("config line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.normalized()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::Data(format!("config key {key}: cannot parse {value:?}"))
            })
        }
        match key {
            "tau" => self.train.tau = parse(key, value)?,
            "gamma" => self.train.gamma = parse(key, value)?,
            "beta_source" => self.train.beta_source = parse(key, value)?,
            "beta_target" => self.train.beta_target = parse(key, value)?,
            "temperature" => self.train.temperature = parse(key, value)?,
            "lr0" => self.train.lr0 = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "shots" => self.train.shots = parse(key, value)?,
            "context_len" => self.train.context_len = parse(key, value)?,
            "warmup_epochs" => self.train.warmup_epochs = parse(key, value)?,
            "ensemble_weight" => self.train.ensemble_weight = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "loss_l_x" => self.train.loss_terms.l_x = parse(key, value)?,
            "loss_l_u" => self.train.loss_terms.l_u = parse(key, value)?,
            "loss_l_xa" => self.train.loss_terms.l_xa = parse(key, value)?,
            "loss_l_ua" => self.train.loss_terms.l_ua = parse(key, value)?,
            "bank_refresh_epochs" => self.train.bank_refresh_epochs = parse(key, value)?,
            "d_model" => self.encoder.d_model = parse(key, value)?,
            "n_layers" => self.encoder.n_layers = parse(key, value)?,
            "n_heads" => self.encoder.n_heads = parse(key, value)?,
            "d_proj" => self.encoder.d_proj = parse(key, value)?,
            "n_patches" => self.encoder.n_patches = parse(key, value)?,
            "coupled_layers" => self.encoder.coupled_layers = parse(key, value)?,
            other => {
                return Err(Error::Data(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Canonical echo of every resolved field, one `key = value` per line.
    /// Runs are reproducible from this block alone.
    pub fn echo(&self) -> String {
        let t = &self.train;
        let e = &self.encoder;
        format!(
            "tau = {}\ngamma = {}\nbeta_source = {}\nbeta_target = {}\n\
             temperature = {}\nlr0 = {}\nepochs = {}\nbatch_size = {}\n\
             shots = {}\ncontext_len = {}\nwarmup_epochs = {}\n\
             ensemble_weight = {}\nseed = {}\nloss_l_x = {}\nloss_l_u = {}\n\
             loss_l_xa = {}\nloss_l_ua = {}\nbank_refresh_epochs = {}\n\
             d_model = {}\nn_layers = {}\nn_heads = {}\nd_proj = {}\n\
             n_patches = {}\ncoupled_layers = {}\n",
            t.tau,
            t.gamma,
            t.beta_source,
            t.beta_target,
            t.temperature,
            t.lr0,
            t.epochs,
            t.batch_size,
            t.shots,
            t.context_len,
            t.warmup_epochs,
            t.ensemble_weight,
            t.seed,
            t.loss_terms.l_x,
            t.loss_terms.l_u,
            t.loss_terms.l_xa,
            t.loss_terms.l_ua,
            t.bank_refresh_epochs,
            e.d_model,
            e.n_layers,
            e.n_heads,
            e.d_proj,
            e.n_patches,
            e.coupled_layers,
        )
    }

    pub fn hash(&self) -> u64 {
        hash_str(&self.echo())
    }
}
