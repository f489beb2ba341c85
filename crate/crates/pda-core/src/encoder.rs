//! Toy frozen dual encoder with learnable multi-modal prompts.
//!
//! Both encoders are small pre-norm transformers with seeded random frozen
//! weights. Learnable state is confined to the prompt set: per-layer text
//! context vectors, a text-to-visual coupling projection for the early
//! image layers, and independent visual prompts for the deep image layers.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hash::Fnv1a;
use crate::kernels;
use crate::rng;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// Standard deviation for frozen-weight and prompt initialization.
const INIT_STD: f64 = 0.02;
/// Noise added to the identity-initialized coupling projection.
const COUPLING_NOISE_STD: f64 = 0.01;

/// Dimensions of the dual encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Transformer width.
    pub d_model: usize,
    /// Transformer depth per encoder.
    pub n_layers: usize,
    pub n_heads: usize,
    /// Output feature width after the final projection.
    pub d_proj: usize,
    /// Image tokens per input.
    pub n_patches: usize,
    /// Early image layers whose prompts are projected from text prompts.
    pub coupled_layers: usize,
    /// Prompt tokens inserted per layer.
    pub context_len: usize,
    /// Frozen-weight RNG seed.
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 32,
            n_layers: 4,
            n_heads: 4,
            d_proj: 16,
            n_patches: 9,
            coupled_layers: 2,
            context_len: 2,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Parameter(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::Parameter("n_layers must be >= 1".into()));
        }
        if self.coupled_layers == 0 || self.coupled_layers > self.n_layers {
            return Err(Error::Parameter(format!(
                "coupled_layers {} must be in 1..={}",
                self.coupled_layers, self.n_layers
            )));
        }
        if self.context_len == 0 {
            return Err(Error::Parameter("context_len must be >= 1".into()));
        }
        if self.d_proj == 0 || self.n_patches == 0 {
            return Err(Error::Parameter("d_proj and n_patches must be >= 1".into()));
        }
        Ok(())
    }

    fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn mlp_hidden(&self) -> usize {
        2 * self.d_model
    }
}

/// One attention head, stored pre-split.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub bq: Tensor,
    pub bk: Tensor,
    pub bv: Tensor,
    /// Per-head slice of the output projection; head outputs sum.
    pub wo: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub heads: Vec<HeadWeights>,
    pub attn_out_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub layers: Vec<LayerWeights>,
    pub ln_final_gain: Tensor,
    pub ln_final_bias: Tensor,
    pub proj: Tensor,
}

/// Frozen parameters of both encoders. Never receives gradients and must
/// stay byte-identical across a run.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenWeights {
    pub text: EncoderWeights,
    pub image: EncoderWeights,
    /// One embedding row per class id.
    pub class_embeddings: Tensor,
    /// Image-side class token, carried through every layer.
    pub image_class_token: Tensor,
    /// Softmax temperature for similarity logits.
    pub temperature: f64,
}

fn seeded_layer(rng: &mut ChaCha8Rng, cfg: &EncoderConfig, std: f64) -> LayerWeights {
    let (d, dh, h) = (cfg.d_model, cfg.d_head(), cfg.mlp_hidden());
    let heads = (0..cfg.n_heads)
        .map(|_| HeadWeights {
            wq: rng::gaussian(rng, d, dh, std),
            wk: rng::gaussian(rng, d, dh, std),
            wv: rng::gaussian(rng, d, dh, std),
            bq: Tensor::zeros(1, dh),
            bk: Tensor::zeros(1, dh),
            bv: Tensor::zeros(1, dh),
            wo: rng::gaussian(rng, dh, d, std),
        })
        .collect();
    LayerWeights {
        ln1_gain: Tensor::filled(1, d, 1.0),
        ln1_bias: Tensor::zeros(1, d),
        heads,
        attn_out_bias: Tensor::zeros(1, d),
        ln2_gain: Tensor::filled(1, d, 1.0),
        ln2_bias: Tensor::zeros(1, d),
        mlp_w1: rng::gaussian(rng, d, h, std),
        mlp_b1: Tensor::zeros(1, h),
        mlp_w2: rng::gaussian(rng, h, d, std),
        mlp_b2: Tensor::zeros(1, d),
    }
}

fn seeded_encoder(rng: &mut ChaCha8Rng, cfg: &EncoderConfig, std: f64) -> EncoderWeights {
    EncoderWeights {
        layers: (0..cfg.n_layers).map(|_| seeded_layer(rng, cfg, std)).collect(),
        ln_final_gain: Tensor::filled(1, cfg.d_model, 1.0),
        ln_final_bias: Tensor::zeros(1, cfg.d_model),
        proj: rng::gaussian(rng, cfg.d_model, cfg.d_proj, INIT_STD),
    }
}

impl FrozenWeights {
    /// Seeded random frozen model for `n_classes` class ids. A loader for
    /// externally trained weights exists in the io module; this is the
    /// default desk-scale construction.
    pub fn seeded(cfg: &EncoderConfig, n_classes: usize) -> Result<Self> {
        cfg.validate()?;
        if n_classes == 0 {
            return Err(Error::Parameter("need at least one class".into()));
        }
        let mut rng = rng::seeded_stream(cfg.seed, 0);
        Ok(FrozenWeights {
            text: seeded_encoder(&mut rng, cfg, INIT_STD),
            image: seeded_encoder(&mut rng, cfg, INIT_STD),
            class_embeddings: rng::gaussian(&mut rng, n_classes, cfg.d_model, 1.0),
            image_class_token: rng::gaussian(&mut rng, 1, cfg.d_model, 1.0),
            temperature: 0.01,
        })
    }

    /// Frozen model with built-in cross-modal alignment, the desk-scale
    /// stand-in for a pretrained dual encoder.
    ///
    /// The image trunk uses a `1/sqrt(d_model)` init so features genuinely
    /// depend on the input, and a small class token so attention reads of
    /// the patches dominate the class-token stream. The norm-projection
    /// head is shared across encoders. Each class embedding is then solved
    /// (by a fixed-point correction through the near-identity text trunk)
    /// so that, under the given initial prompts, the text feature of class
    /// `k` lands exactly on the image feature of that class's prototype
    /// patches. Zero-shot inference starts as a nearest-prototype
    /// classifier, which training adapts.
    pub fn seeded_aligned(
        cfg: &EncoderConfig,
        prototypes: &[Tensor],
        prompts: &PromptSet,
    ) -> Result<Self> {
        cfg.validate()?;
        if prototypes.is_empty() {
            return Err(Error::Parameter("need at least one class prototype".into()));
        }
        let mut rng = rng::seeded_stream(cfg.seed, 0);
        let text = seeded_encoder(&mut rng, cfg, INIT_STD);
        let mut image = seeded_encoder(&mut rng, cfg, 1.0 / (cfg.d_model as f64).sqrt());
        image.ln_final_gain = text.ln_final_gain.clone();
        image.ln_final_bias = text.ln_final_bias.clone();
        image.proj = text.proj.clone();
        let image_class_token = rng::gaussian(&mut rng, 1, cfg.d_model, 0.1);

        // Materialize the initial visual prompts once.
        let visual: Vec<Tensor> = {
            let mut v: Vec<Tensor> = (0..cfg.coupled_layers)
                .map(|j| {
                    let data = kernels::matmul(
                        prompts.text_ctx[j].data(),
                        prompts.coupling.data(),
                        cfg.context_len,
                        cfg.d_model,
                        cfg.d_model,
                        false,
                    );
                    Tensor::new(cfg.context_len, cfg.d_model, data)
                })
                .collect::<Result<_>>()?;
            v.extend(prompts.deep_visual.iter().cloned());
            v
        };

        let mut rows = Vec::with_capacity(prototypes.len());
        for (k, proto) in prototypes.iter().enumerate() {
            if proto.rows() != cfg.n_patches || proto.cols() != cfg.d_model {
                return Err(Error::Data(format!(
                    "prototype {k} has shape {:?}, expected [{}, {}]",
                    proto.shape(),
                    cfg.n_patches,
                    cfg.d_model
                )));
            }
            // Anchor: pre-projection class token of the prompted image pass.
            let anchor = prompted_cls_preproj(
                &image,
                cfg,
                &visual,
                &[proto.clone(), image_class_token.clone()],
            )?;
            // Solve text_cls(c) = anchor; the text trunk is near identity,
            // so a few fixed-point corrections converge.
            let mut c = anchor.clone();
            for _ in 0..3 {
                let through = prompted_cls_preproj(
                    &text,
                    cfg,
                    &prompts.text_ctx,
                    &[Tensor::row(c.clone())],
                )?;
                for (ci, (a, t)) in c.iter_mut().zip(anchor.iter().zip(&through)) {
                    *ci += a - t;
                }
            }
            rows.push(c);
        }

        Ok(FrozenWeights {
            text,
            image,
            class_embeddings: Tensor::from_rows(&rows)?,
            image_class_token,
            temperature: 0.01,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_embeddings.rows()
    }

    /// Order-stable FNV fingerprint over every value; used to assert the
    /// frozen weights stay byte-identical across training.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a::new();
        for enc in [&self.text, &self.image] {
            for layer in &enc.layers {
                for t in [
                    &layer.ln1_gain,
                    &layer.ln1_bias,
                    &layer.attn_out_bias,
                    &layer.ln2_gain,
                    &layer.ln2_bias,
                    &layer.mlp_w1,
                    &layer.mlp_b1,
                    &layer.mlp_w2,
                    &layer.mlp_b2,
                ] {
                    h.update_f64s(t.data());
                }
                for head in &layer.heads {
                    for t in [&head.wq, &head.wk, &head.wv, &head.bq, &head.bk, &head.bv, &head.wo]
                    {
                        h.update_f64s(t.data());
                    }
                }
            }
            h.update_f64s(enc.ln_final_gain.data());
            h.update_f64s(enc.ln_final_bias.data());
            h.update_f64s(enc.proj.data());
        }
        h.update_f64s(self.class_embeddings.data());
        h.update_f64s(self.image_class_token.data());
        h.update_f64s(&[self.temperature]);
        h.finish()
    }
}

/// All learnable prompt parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    /// Per-layer text context vectors, `n_layers` of `context_len x d_model`.
    pub text_ctx: Vec<Tensor>,
    /// Text-to-visual coupling projection, `d_model x d_model`.
    pub coupling: Tensor,
    /// Independent deep visual prompts for layers past `coupled_layers`.
    pub deep_visual: Vec<Tensor>,
}

impl PromptSet {
    pub fn seeded(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::seeded_stream(seed, 1);
        let text_ctx = (0..cfg.n_layers)
            .map(|_| rng::gaussian(&mut rng, cfg.context_len, cfg.d_model, INIT_STD))
            .collect();
        // Identity plus small noise keeps coupled prompts near text prompts
        // at the start of training.
        let mut coupling = rng::gaussian(&mut rng, cfg.d_model, cfg.d_model, COUPLING_NOISE_STD);
        for i in 0..cfg.d_model {
            let v = coupling.at(i, i) + 1.0;
            coupling.set(i, i, v);
        }
        let deep_visual = (0..cfg.n_layers - cfg.coupled_layers)
            .map(|_| rng::gaussian(&mut rng, cfg.context_len, cfg.d_model, INIT_STD))
            .collect();
        Ok(PromptSet { text_ctx, coupling, deep_visual })
    }

    /// Total learnable element count:
    /// `J*M*d + d^2 + (J - Jc)*M*d`.
    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Named views in a stable order (checkpoint + gradient plumbing).
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (j, t) in self.text_ctx.iter().enumerate() {
            out.push((format!("prompt.text_ctx.{j}"), t));
        }
        out.push(("prompt.coupling".to_string(), &self.coupling));
        for (j, t) in self.deep_visual.iter().enumerate() {
            out.push((format!("prompt.deep_visual.{j}"), t));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (j, t) in self.text_ctx.iter_mut().enumerate() {
            out.push((format!("prompt.text_ctx.{j}"), t));
        }
        out.push(("prompt.coupling".to_string(), &mut self.coupling));
        for (j, t) in self.deep_visual.iter_mut().enumerate() {
            out.push((format!("prompt.deep_visual.{j}"), t));
        }
        out
    }
}

/// Which domain a batch of features came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::Source => write!(f, "source"),
            Domain::Target => write!(f, "target"),
        }
    }
}

/// Unit-row text and image features for one encoded batch.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    /// `K x d_proj` text features, unit rows.
    pub text: Tensor,
    /// `B x d_proj` image features, unit rows.
    pub image: Tensor,
    pub domain: Domain,
}

impl EncodedBatch {
    pub fn new(text: Tensor, image: Tensor, domain: Domain) -> Result<Self> {
        for (name, t) in [("text", &text), ("image", &image)] {
            for (i, n) in kernels::seq::row_norms(t.data(), t.cols()).iter().enumerate() {
                if (n - 1.0).abs() > 1e-9 {
                    return Err(Error::Contract(format!(
                        "{name} row {i} has norm {n}, expected unit"
                    )));
                }
            }
        }
        Ok(EncodedBatch { text, image, domain })
    }
}

// ── tape wiring ──────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct HeadIds {
    wq: ValueId,
    wk: ValueId,
    wv: ValueId,
    bq: ValueId,
    bk: ValueId,
    bv: ValueId,
    wo: ValueId,
}

#[derive(Debug, Clone)]
pub struct LayerIds {
    ln1_gain: ValueId,
    ln1_bias: ValueId,
    heads: Vec<HeadIds>,
    attn_out_bias: ValueId,
    ln2_gain: ValueId,
    ln2_bias: ValueId,
    mlp_w1: ValueId,
    mlp_b1: ValueId,
    mlp_w2: ValueId,
    mlp_b2: ValueId,
    d_head: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderIds {
    layers: Vec<LayerIds>,
    ln_final_gain: ValueId,
    ln_final_bias: ValueId,
    proj: ValueId,
}

/// Tape handles for the dual encoder plus prompt parameters; build one per
/// tape with [`register_model`].
#[derive(Debug, Clone)]
pub struct ModelIds {
    pub text_ctx: Vec<ValueId>,
    pub coupling: ValueId,
    pub deep_visual: Vec<ValueId>,
    text_encoder: EncoderIds,
    image_encoder: EncoderIds,
    class_embeddings: ValueId,
    image_class_token: ValueId,
    coupled_layers: usize,
    context_len: usize,
    n_patches: usize,
}

impl ModelIds {
    /// Learnable handles in the same order as [`PromptSet::tensors`].
    pub fn learnable_ids(&self) -> Vec<ValueId> {
        let mut out = self.text_ctx.clone();
        out.push(self.coupling);
        out.extend_from_slice(&self.deep_visual);
        out
    }
}

fn register_encoder(tape: &mut Tape, enc: &EncoderWeights, d_head: usize) -> EncoderIds {
    EncoderIds {
        layers: enc
            .layers
            .iter()
            .map(|l| LayerIds {
                ln1_gain: tape.constant(l.ln1_gain.clone()),
                ln1_bias: tape.constant(l.ln1_bias.clone()),
                heads: l
                    .heads
                    .iter()
                    .map(|h| HeadIds {
                        wq: tape.constant(h.wq.clone()),
                        wk: tape.constant(h.wk.clone()),
                        wv: tape.constant(h.wv.clone()),
                        bq: tape.constant(h.bq.clone()),
                        bk: tape.constant(h.bk.clone()),
                        bv: tape.constant(h.bv.clone()),
                        wo: tape.constant(h.wo.clone()),
                    })
                    .collect(),
                attn_out_bias: tape.constant(l.attn_out_bias.clone()),
                ln2_gain: tape.constant(l.ln2_gain.clone()),
                ln2_bias: tape.constant(l.ln2_bias.clone()),
                mlp_w1: tape.constant(l.mlp_w1.clone()),
                mlp_b1: tape.constant(l.mlp_b1.clone()),
                mlp_w2: tape.constant(l.mlp_w2.clone()),
                mlp_b2: tape.constant(l.mlp_b2.clone()),
                d_head,
            })
            .collect(),
        ln_final_gain: tape.constant(enc.ln_final_gain.clone()),
        ln_final_bias: tape.constant(enc.ln_final_bias.clone()),
        proj: tape.constant(enc.proj.clone()),
    }
}

/// Register frozen weights as constants and prompts as learnable params
/// (or constants too, for no-grad evaluation passes).
pub fn register_model(
    tape: &mut Tape,
    weights: &FrozenWeights,
    prompts: &PromptSet,
    cfg: &EncoderConfig,
    learnable: bool,
) -> ModelIds {
    let mut reg = |t: &Tensor| {
        if learnable {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    let text_ctx: Vec<ValueId> = prompts.text_ctx.iter().map(&mut reg).collect();
    let coupling = reg(&prompts.coupling);
    let deep_visual: Vec<ValueId> = prompts.deep_visual.iter().map(&mut reg).collect();
    ModelIds {
        text_ctx,
        coupling,
        deep_visual,
        text_encoder: register_encoder(tape, &weights.text, cfg.d_head()),
        image_encoder: register_encoder(tape, &weights.image, cfg.d_head()),
        class_embeddings: tape.constant(weights.class_embeddings.clone()),
        image_class_token: tape.constant(weights.image_class_token.clone()),
        coupled_layers: cfg.coupled_layers,
        context_len: cfg.context_len,
        n_patches: cfg.n_patches,
    }
}

/// Pass carried tokens through a trunk under per-layer prompts, exactly as
/// the encode paths do, returning the pre-projection final-token row.
/// Construction-time helper for aligned class embeddings.
fn prompted_cls_preproj(
    enc: &EncoderWeights,
    cfg: &EncoderConfig,
    layer_prompts: &[Tensor],
    carried_parts: &[Tensor],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let ids = register_encoder(&mut tape, enc, cfg.d_head());
    let parts: Vec<ValueId> = carried_parts.iter().map(|t| tape.constant(t.clone())).collect();
    let mut carried = tape.concat_rows(&parts)?;
    let carried_rows = tape.shape(carried)[0];
    for (layer, prompt) in ids.layers.iter().zip(layer_prompts) {
        let p = tape.constant(prompt.clone());
        let seq = tape.concat_rows(&[p, carried])?;
        let out = layer_forward(&mut tape, layer, seq)?;
        carried = tape.slice_rows(out, cfg.context_len, carried_rows)?;
    }
    let last = tape.slice_rows(carried, carried_rows - 1, 1)?;
    Ok(tape.value(last).row_slice(0).to_vec())
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
fn layer_forward(tape: &mut Tape, layer: &LayerIds, x: ValueId) -> Result<ValueId> {
    let normed = tape.layer_norm(x, layer.ln1_gain, layer.ln1_bias)?;
    let scale = (layer.d_head as f64).sqrt();
    let mut attn: Option<ValueId> = None;
    for head in &layer.heads {
        let q = tape.matmul(normed, head.wq)?;
        let q = tape.add_row_broadcast(q, head.bq)?;
        let k = tape.matmul(normed, head.wk)?;
        let k = tape.add_row_broadcast(k, head.bk)?;
        let v = tape.matmul(normed, head.wv)?;
        let v = tape.add_row_broadcast(v, head.bv)?;
        let scores = tape.matmul_tb(q, k)?;
        let weights = tape.softmax_rows(scores, scale)?;
        let mixed = tape.matmul(weights, v)?;
        let out = tape.matmul(mixed, head.wo)?;
        attn = Some(match attn {
            Some(acc) => tape.add(acc, out)?,
            None => out,
        });
    }
    let attn = tape.add_row_broadcast(attn.expect("n_heads >= 1"), layer.attn_out_bias)?;
    let x2 = tape.add(x, attn)?;

    let normed2 = tape.layer_norm(x2, layer.ln2_gain, layer.ln2_bias)?;
    let h1 = tape.matmul(normed2, layer.mlp_w1)?;
    let h1 = tape.add_row_broadcast(h1, layer.mlp_b1)?;
    let act = tape.gelu(h1);
    let h2 = tape.matmul(act, layer.mlp_w2)?;
    let h2 = tape.add_row_broadcast(h2, layer.mlp_b2)?;
    tape.add(x2, h2)
}

fn project_and_normalize(
    tape: &mut Tape,
    enc: &EncoderIds,
    token: ValueId,
) -> Result<ValueId> {
    let normed = tape.layer_norm(token, enc.ln_final_gain, enc.ln_final_bias)?;
    let projected = tape.matmul(normed, enc.proj)?;
    tape.l2_normalize_rows(projected)
}

/// Text features for the given class ids: layer `j` consumes
/// `[ctx_j, class_token]` with fresh context vectors each layer and the
/// class token carried forward. Returns unit-norm `K x d_proj`.
pub fn encode_text(tape: &mut Tape, ids: &ModelIds, class_ids: &[usize]) -> Result<ValueId> {
    let n_classes = tape.shape(ids.class_embeddings)[0];
    let mut rows = Vec::with_capacity(class_ids.len());
    for &cid in class_ids {
        if cid >= n_classes {
            return Err(Error::Data(format!(
                "unknown class id {cid}; embedding table has {n_classes} classes"
            )));
        }
        let mut carried = tape.slice_rows(ids.class_embeddings, cid, 1)?;
        for (j, layer) in ids.text_encoder.layers.iter().enumerate() {
            let seq = tape.concat_rows(&[ids.text_ctx[j], carried])?;
            let out = layer_forward(tape, layer, seq)?;
            carried = tape.slice_rows(out, ids.context_len, 1)?;
        }
        rows.push(project_and_normalize(tape, &ids.text_encoder, carried)?);
    }
    tape.concat_rows(&rows)
}

/// Coupled visual prompts for the early image layers: `ctx_j x coupling`
/// for each `j < coupled_layers`.
pub fn couple_visual_prompts(tape: &mut Tape, ids: &ModelIds) -> Result<Vec<ValueId>> {
    (0..ids.coupled_layers)
        .map(|j| tape.matmul(ids.text_ctx[j], ids.coupling))
        .collect()
}

/// Visual prompt for every layer: coupled for the early layers, independent
/// deep prompts after.
fn visual_prompts(tape: &mut Tape, ids: &ModelIds) -> Result<Vec<ValueId>> {
    let mut prompts = couple_visual_prompts(tape, ids)?;
    prompts.extend_from_slice(&ids.deep_visual);
    Ok(prompts)
}

/// Image feature for one `n_patches x d_model` input: layer `j` consumes
/// `[prompt_j, patches, class_token]`; patches and class token are carried
/// forward, prompts are replaced each layer. Returns unit-norm `1 x d_proj`.
pub fn encode_image(tape: &mut Tape, ids: &ModelIds, patches: &Tensor) -> Result<ValueId> {
    let d_model = tape.shape(ids.image_class_token)[1];
    if patches.rows() != ids.n_patches || patches.cols() != d_model {
        return Err(Error::Data(format!(
            "expected {} x {d_model} patch features, got {} x {}",
            ids.n_patches,
            patches.rows(),
            patches.cols()
        )));
    }
    let prompts = visual_prompts(tape, ids)?;
    let x = tape.constant(patches.clone());
    let mut carried = tape.concat_rows(&[x, ids.image_class_token])?;
    for (j, layer) in ids.image_encoder.layers.iter().enumerate() {
        let seq = tape.concat_rows(&[prompts[j], carried])?;
        let out = layer_forward(tape, layer, seq)?;
        carried = tape.slice_rows(out, ids.context_len, ids.n_patches + 1)?;
    }
    let cls = tape.slice_rows(carried, ids.n_patches, 1)?;
    project_and_normalize(tape, &ids.image_encoder, cls)
}

/// Encode a batch of images into a stacked `B x d_proj` value.
pub fn encode_images(tape: &mut Tape, ids: &ModelIds, batch: &[Tensor]) -> Result<ValueId> {
    let rows: Vec<ValueId> = batch
        .iter()
        .map(|x| encode_image(tape, ids, x))
        .collect::<Result<_>>()?;
    tape.concat_rows(&rows)
}

/// Zero-shot class probabilities for one unit-norm image feature against
/// unit-norm text rows: softmax of cosine similarities over temperature.
pub fn zero_shot_probs(text: &Tensor, image_row: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if temperature <= 0.0 {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if image_row.len() != text.cols() {
        return Err(Error::Dim {
            context: "zero_shot_probs",
            left: vec![text.rows(), text.cols()],
            right: vec![1, image_row.len()],
        });
    }
    let z_norm = kernels::dot(image_row, image_row).sqrt();
    if (z_norm - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!(
            "image feature norm {z_norm} deviates from 1 beyond 1e-6"
        )));
    }
    for (i, n) in kernels::seq::row_norms(text.data(), text.cols()).iter().enumerate() {
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "text row {i} norm {n} deviates from 1 beyond 1e-6"
            )));
        }
    }
    let sims: Vec<f64> = (0..text.rows())
        .map(|i| kernels::dot(text.row_slice(i), image_row))
        .collect();
    kernels::softmax_rows(&sims, 1, text.rows(), temperature)
}
