//! Toy text encoder and transformer denoiser.
//!
//! The latent is the image itself, cut into `patch × patch` RGB patches on a
//! `grid × grid` token grid (pixel values mapped to [-1, 1]). Each block runs
//! self-attention over the L = grid² image tokens, cross-attention from image
//! tokens to the prompt's text features, and a feed-forward layer, all
//! pre-norm with residual connections.
//!
//! Every forward pass can record the head- and block-averaged attention
//! probabilities and can overwrite chosen cross-attention columns after the
//! softmax.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::image::Image;
use crate::tensor::{Reduce, Tape, Tensor, TensorError, Var};

/// Token id of the start token; the unconditional prompt is just `[BOS]`.
pub const BOS: usize = 0;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("token id {id} outside vocabulary of {vocab}")]
    UnknownToken { id: usize, vocab: usize },
    #[error("prompt of {len} tokens exceeds the limit of {max}")]
    PromptTooLong { len: usize, max: usize },
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("latent has shape {got:?}, expected {expected:?}")]
    LatentShape { got: Vec<usize>, expected: Vec<usize> },
    #[error("text features have shape {got:?}, expected [n, {d_text}]")]
    TextShape { got: Vec<usize>, d_text: usize },
    #[error("timestep {t} outside 0..{max}")]
    Timestep { t: usize, max: usize },
    #[error("override for token {token}: {reason}")]
    Override { token: usize, reason: String },
    #[error("parameter {name}: shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("invalid model config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Token grid side; L = grid².
    pub grid: usize,
    /// Pixel side of one latent patch.
    pub patch: usize,
    pub channels: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub d_text: usize,
    pub vocab: usize,
    pub ff_mult: usize,
    pub max_tokens: usize,
    /// Length of the diffusion schedule the time embedding is scaled for.
    pub timesteps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: 16,
            patch: 2,
            channels: 3,
            d_model: 32,
            heads: 4,
            blocks: 2,
            d_text: 16,
            vocab: 64,
            ff_mult: 4,
            max_tokens: 16,
            timesteps: 1000,
        }
    }
}

impl ModelConfig {
    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn latent_channels(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn image_size(&self) -> usize {
        self.grid * self.patch
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn latent_shape(&self) -> [usize; 2] {
        [self.tokens(), self.latent_channels()]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            self.grid,
            self.patch,
            self.channels,
            self.d_model,
            self.heads,
            self.blocks,
            self.d_text,
            self.vocab,
            self.ff_mult,
            self.max_tokens,
            self.timesteps,
        ];
        if positive.contains(&0) {
            return Err(ModelError::Config("all extents must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !self.d_model.is_multiple_of(4) || !self.d_text.is_multiple_of(2) {
            return Err(ModelError::Config("d_model must be a multiple of 4 and d_text even".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// N(0, 1/fan_in).
    Scaled(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
struct BlockSlots {
    ln1_g: usize,
    ln1_b: usize,
    self_q: usize,
    self_k: usize,
    self_v: usize,
    self_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    cross_q: usize,
    cross_k: usize,
    cross_v: usize,
    cross_o: usize,
    ln3_g: usize,
    ln3_b: usize,
    ff_w1: usize,
    ff_b1: usize,
    ff_w2: usize,
    ff_b2: usize,
}

/// Positions of each named parameter in the flat parameter list.
#[derive(Debug, Clone)]
struct Slots {
    token_embedding: usize,
    patch_w: usize,
    patch_b: usize,
    time_w1: usize,
    time_b1: usize,
    time_w2: usize,
    time_b2: usize,
    blocks: Vec<BlockSlots>,
    out_ln_g: usize,
    out_ln_b: usize,
    out_w: usize,
    out_b: usize,
    skip_w: usize,
    skip_b: usize,
    gate_w: usize,
    gate_b: usize,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct Registry {
    specs: Vec<Spec>,
}

impl Registry {
    fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> usize {
        self.specs.push(Spec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
        self.specs.len() - 1
    }

    fn matrix(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> usize {
        self.add(name, &[rows, cols], Init::Scaled(rows))
    }
}

fn layout_params(cfg: &ModelConfig) -> (Slots, Vec<Spec>) {
    let d = cfg.d_model;
    let ff = d * cfg.ff_mult;
    let mut r = Registry::default();
    // A one-hot lookup has fan-in 1.
    let token_embedding = r.add("token_embedding", &[cfg.vocab, cfg.d_text], Init::Scaled(1));
    let patch_w = r.matrix("patch.w", cfg.latent_channels(), d);
    let patch_b = r.add("patch.b", &[d], Init::Zeros);
    let time_w1 = r.matrix("time.w1", d, d);
    let time_b1 = r.add("time.b1", &[d], Init::Zeros);
    let time_w2 = r.matrix("time.w2", d, d);
    let time_b2 = r.add("time.b2", &[d], Init::Zeros);
    let blocks = (0..cfg.blocks)
        .map(|b| {
            let p = |s: &str| format!("block{b}.{s}");
            BlockSlots {
                ln1_g: r.add(p("ln1.g"), &[d], Init::Ones),
                ln1_b: r.add(p("ln1.b"), &[d], Init::Zeros),
                self_q: r.matrix(p("self.q"), d, d),
                self_k: r.matrix(p("self.k"), d, d),
                self_v: r.matrix(p("self.v"), d, d),
                self_o: r.matrix(p("self.o"), d, d),
                ln2_g: r.add(p("ln2.g"), &[d], Init::Ones),
                ln2_b: r.add(p("ln2.b"), &[d], Init::Zeros),
                cross_q: r.matrix(p("cross.q"), d, d),
                cross_k: r.matrix(p("cross.k"), cfg.d_text, d),
                cross_v: r.matrix(p("cross.v"), cfg.d_text, d),
                cross_o: r.matrix(p("cross.o"), d, d),
                ln3_g: r.add(p("ln3.g"), &[d], Init::Ones),
                ln3_b: r.add(p("ln3.b"), &[d], Init::Zeros),
                ff_w1: r.matrix(p("ff.w1"), d, ff),
                ff_b1: r.add(p("ff.b1"), &[ff], Init::Zeros),
                ff_w2: r.matrix(p("ff.w2"), ff, d),
                ff_b2: r.add(p("ff.b2"), &[d], Init::Zeros),
            }
        })
        .collect();
    let out_ln_g = r.add("out.ln.g", &[d], Init::Ones);
    let out_ln_b = r.add("out.ln.b", &[d], Init::Zeros);
    let out_w = r.matrix("out.w", d, cfg.latent_channels());
    let out_b = r.add("out.b", &[cfg.latent_channels()], Init::Zeros);
    let skip_w = r.add("skip.w", &[d, cfg.latent_channels()], Init::Zeros);
    let skip_b = r.add("skip.b", &[cfg.latent_channels()], Init::Ones);
    let gate_w = r.add("gate.w", &[d, cfg.latent_channels()], Init::Zeros);
    let gate_b = r.add("gate.b", &[cfg.latent_channels()], Init::Ones);
    let slots = Slots {
        token_embedding,
        patch_w,
        patch_b,
        time_w1,
        time_b1,
        time_w2,
        time_b2,
        blocks,
        out_ln_g,
        out_ln_b,
        out_w,
        out_b,
        skip_w,
        skip_b,
        gate_w,
        gate_b,
    };
    (slots, r.specs)
}

/// All weights of the text embedding and denoiser, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl DenoiserParams {
    /// Pseudo-random initialization, N(0, 1/fan_in) for matrices.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (_, specs) = layout_params(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Scaled(fan_in) => {
                    let std = 1.0 / (fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                        .collect()
                }
            };
            names.push(spec.name);
            tensors.push(Tensor::new(&spec.shape, data)?);
        }
        Ok(Self { config, names, tensors })
    }

    /// Assembles parameters from named tensors, checking names and shapes.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        config.validate()?;
        let (_, specs) = layout_params(&config);
        if specs.len() != named.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (spec, (name, t)) in specs.into_iter().zip(named) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(ModelError::ParamShape {
                    name,
                    got: t.shape().to_vec(),
                    expected: spec.shape,
                });
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { config, names, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// SHA-256 over the raw little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Pushes every parameter onto the tape, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        BoundParams { vars }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parameters pushed onto one tape, in [`DenoiserParams`] order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

pub fn init_params(config: ModelConfig, seed: u64) -> Result<DenoiserParams, ModelError> {
    DenoiserParams::init(config, seed)
}

/// Cross-attention columns to overwrite, per prompt position.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionOverride {
    maps: Vec<(usize, Vec<f64>)>,
}

impl AttentionOverride {
    pub fn new(maps: Vec<(usize, Vec<f64>)>) -> Result<Self, ModelError> {
        for (token, map) in &maps {
            if let Some(v) = map.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(ModelError::Override {
                    token: *token,
                    reason: format!("value {v} outside [0, 1]"),
                });
            }
        }
        Ok(Self { maps })
    }

    pub fn maps(&self) -> &[(usize, Vec<f64>)] {
        &self.maps
    }

    pub fn get(&self, token: usize) -> Option<&[f64]> {
        self.maps.iter().find(|(t, _)| *t == token).map(|(_, m)| m.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// Head- and block-averaged attention probabilities of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub timestep: usize,
    /// One length-L map per prompt position.
    pub cross: Vec<Vec<f64>>,
    /// L×L, rows are queries.
    pub self_attn: Tensor,
    /// Per block and head, L×n cross probabilities (debug mode only).
    pub cross_per_head: Option<Vec<Tensor>>,
}

impl AttentionRecord {
    pub fn cross_map(&self, token: usize) -> &[f64] {
        &self.cross[token]
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    pub record: bool,
    /// Also keep every per-head cross map.
    pub per_head: bool,
    pub attention_override: Option<&'a AttentionOverride>,
}

/// Tape handles produced by [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub eps: Var,
    /// Averaged cross-attention, L×n.
    pub cross: Option<Var>,
    /// Averaged self-attention, L×L.
    pub self_attn: Option<Var>,
    pub cross_per_head: Vec<Var>,
}

impl ForwardVars {
    /// Copies the recorded maps off the tape.
    pub fn record(&self, tape: &Tape, timestep: usize) -> Option<AttentionRecord> {
        let cross = tape.value(self.cross?);
        let self_attn = tape.value(self.self_attn?).clone();
        let (l, n) = (cross.shape()[0], cross.shape()[1]);
        let maps = (0..n).map(|j| (0..l).map(|r| cross.data()[r * n + j]).collect()).collect();
        let per_head = (!self.cross_per_head.is_empty())
            .then(|| self.cross_per_head.iter().map(|&v| tape.value(v).clone()).collect());
        Some(AttentionRecord {
            timestep,
            cross: maps,
            self_attn,
            cross_per_head: per_head,
        })
    }
}

fn sinusoid(position: f64, freqs: &[f64], out: &mut Vec<f64>) {
    for &w in freqs {
        out.push((position * w).sin());
        out.push((position * w).cos());
    }
}

/// Geometric frequencies from half a period across `span` up to `top`.
fn frequencies(count: usize, span: f64, top: f64) -> Vec<f64> {
    let low = PI / span;
    if count == 1 {
        return vec![low];
    }
    (0..count)
        .map(|k| low * (top / low).powf(k as f64 / (count - 1) as f64))
        .collect()
}

/// Fixed 2-D sinusoidal code of each grid cell, L×d.
pub fn grid_positions(cfg: &ModelConfig) -> Tensor {
    let quarter = cfg.d_model / 4;
    let freqs = frequencies(quarter, cfg.grid as f64, PI / 2.0);
    let mut data = Vec::with_capacity(cfg.tokens() * cfg.d_model);
    for r in 0..cfg.grid {
        for c in 0..cfg.grid {
            sinusoid(c as f64, &freqs, &mut data);
            sinusoid(r as f64, &freqs, &mut data);
        }
    }
    Tensor::new(&[cfg.tokens(), cfg.d_model], data).expect("grid positions")
}

fn text_positions(cfg: &ModelConfig, n: usize) -> Tensor {
    let freqs = frequencies(cfg.d_text / 2, cfg.max_tokens as f64, PI / 2.0);
    let mut data = Vec::with_capacity(n * cfg.d_text);
    for p in 0..n {
        sinusoid(p as f64, &freqs, &mut data);
    }
    Tensor::new(&[n, cfg.d_text], data).expect("text positions")
}

fn time_features(cfg: &ModelConfig, t: usize) -> Tensor {
    let freqs = frequencies(cfg.d_model / 2, 2.0 * cfg.timesteps as f64, PI / 2.0);
    let mut data = Vec::with_capacity(cfg.d_model);
    sinusoid(t as f64, &freqs, &mut data);
    Tensor::new(&[1, cfg.d_model], data).expect("time features")
}

fn check_prompt(cfg: &ModelConfig, prompt: &[usize]) -> Result<(), ModelError> {
    if prompt.is_empty() {
        return Err(ModelError::EmptyPrompt);
    }
    if prompt.len() > cfg.max_tokens {
        return Err(ModelError::PromptTooLong {
            len: prompt.len(),
            max: cfg.max_tokens,
        });
    }
    if let Some(&id) = prompt.iter().find(|&&id| id >= cfg.vocab) {
        return Err(ModelError::UnknownToken { id, vocab: cfg.vocab });
    }
    Ok(())
}

/// Text features on a tape: embedding rows plus a fixed positional code.
pub fn encode_tokens_var(
    tape: &mut Tape,
    params: &DenoiserParams,
    bound: &BoundParams,
    prompt: &[usize],
) -> Result<Var, ModelError> {
    let cfg = params.config();
    check_prompt(cfg, prompt)?;
    let slots = layout_params(cfg).0;
    let rows = tape.gather_rows(bound.vars[slots.token_embedding], prompt)?;
    let pos = tape.constant(text_positions(cfg, prompt.len()));
    Ok(tape.add(rows, pos)?)
}

/// Text features for a prompt, `len(prompt) × d_text`.
pub fn encode_tokens(params: &DenoiserParams, prompt: &[usize]) -> Result<Tensor, ModelError> {
    let cfg = params.config();
    check_prompt(cfg, prompt)?;
    let table = &params.tensors[layout_params(cfg).0.token_embedding];
    let d = cfg.d_text;
    let mut data = Vec::with_capacity(prompt.len() * d);
    for &id in prompt {
        data.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
    }
    let rows = Tensor::new(&[prompt.len(), d], data)?;
    Ok(rows.add(&text_positions(cfg, prompt.len()))?)
}

fn affine_norm(tape: &mut Tape, x: Var, g: Var, b: Var) -> Result<Var, TensorError> {
    let n = tape.layer_norm(x, LN_EPS)?;
    let n = tape.mul_row(n, g)?;
    tape.add_row(n, b)
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

struct Accum {
    sum: Option<Var>,
}

impl Accum {
    fn add(&mut self, tape: &mut Tape, v: Var) -> Result<(), TensorError> {
        self.sum = Some(match self.sum {
            Some(s) => tape.add(s, v)?,
            None => v,
        });
        Ok(())
    }

    fn mean(self, tape: &mut Tape, count: usize) -> Option<Var> {
        self.sum.map(|s| tape.scale(s, 1.0 / count as f64))
    }
}

/// One denoiser evaluation on a tape.
///
/// `z` is the L×c latent and `text` the n×d_text prompt features. Recorded
/// cross maps are taken after the softmax and before any override.
pub fn forward(
    tape: &mut Tape,
    params: &DenoiserParams,
    bound: &BoundParams,
    z: Var,
    t: usize,
    text: Var,
    opts: ForwardOptions<'_>,
) -> Result<ForwardVars, ModelError> {
    let cfg = params.config();
    let expected = cfg.latent_shape();
    if tape.value(z).shape() != expected {
        return Err(ModelError::LatentShape {
            got: tape.value(z).shape().to_vec(),
            expected: expected.to_vec(),
        });
    }
    let text_shape = tape.value(text).shape().to_vec();
    if text_shape.len() != 2 || text_shape[1] != cfg.d_text || text_shape[0] == 0 {
        return Err(ModelError::TextShape {
            got: text_shape,
            d_text: cfg.d_text,
        });
    }
    if t >= cfg.timesteps {
        return Err(ModelError::Timestep { t, max: cfg.timesteps });
    }
    let n_text = text_shape[0];
    let l = cfg.tokens();
    let overrides: Vec<(usize, &[f64])> = match opts.attention_override {
        Some(o) => o
            .maps()
            .iter()
            .map(|(tok, m)| {
                if *tok >= n_text {
                    Err(ModelError::Override {
                        token: *tok,
                        reason: format!("prompt has {n_text} tokens"),
                    })
                } else if m.len() != l {
                    Err(ModelError::Override {
                        token: *tok,
                        reason: format!("map has {} values, grid has {l}", m.len()),
                    })
                } else {
                    Ok((*tok, m.as_slice()))
                }
            })
            .collect::<Result<_, _>>()?,
        None => Vec::new(),
    };

    let slots = layout_params(cfg).0;
    let p = |i: usize| bound.vars[i];
    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    let mut h = linear(tape, z, p(slots.patch_w), p(slots.patch_b))?;
    let pos = tape.constant(grid_positions(cfg));
    h = tape.add(h, pos)?;
    let tf = tape.constant(time_features(cfg, t));
    let temb = linear(tape, tf, p(slots.time_w1), p(slots.time_b1))?;
    let temb = tape.silu(temb);
    let temb_row = linear(tape, temb, p(slots.time_w2), p(slots.time_b2))?;
    let temb = tape.reshape(temb_row, &[cfg.d_model])?;
    h = tape.add_row(h, temb)?;

    let mut cross_acc = Accum { sum: None };
    let mut self_acc = Accum { sum: None };
    let mut per_head = Vec::new();

    for b in &slots.blocks {
        // Self-attention.
        let x = affine_norm(tape, h, p(b.ln1_g), p(b.ln1_b))?;
        let q = tape.matmul(x, p(b.self_q))?;
        let k = tape.matmul(x, p(b.self_k))?;
        let v = tape.matmul(x, p(b.self_v))?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let (s, e) = (hd * dh, (hd + 1) * dh);
            let qh = tape.slice_cols(q, s, e)?;
            let kh = tape.slice_cols(k, s, e)?;
            let vh = tape.slice_cols(v, s, e)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, inv_sqrt);
            let probs = tape.softmax(scores, 1)?;
            if opts.record {
                self_acc.add(tape, probs)?;
            }
            heads.push(tape.matmul(probs, vh)?);
        }
        let o = tape.concat_cols(&heads)?;
        let o = tape.matmul(o, p(b.self_o))?;
        h = tape.add(h, o)?;

        // Cross-attention to the prompt.
        let x = affine_norm(tape, h, p(b.ln2_g), p(b.ln2_b))?;
        let q = tape.matmul(x, p(b.cross_q))?;
        let k = tape.matmul(text, p(b.cross_k))?;
        let v = tape.matmul(text, p(b.cross_v))?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let (s, e) = (hd * dh, (hd + 1) * dh);
            let qh = tape.slice_cols(q, s, e)?;
            let kh = tape.slice_cols(k, s, e)?;
            let vh = tape.slice_cols(v, s, e)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, inv_sqrt);
            let mut probs = tape.softmax(scores, 1)?;
            if opts.record {
                cross_acc.add(tape, probs)?;
                if opts.per_head {
                    per_head.push(probs);
                }
            }
            if !overrides.is_empty() {
                probs = tape.replace_cols(probs, &overrides)?;
            }
            heads.push(tape.matmul(probs, vh)?);
        }
        let o = tape.concat_cols(&heads)?;
        let o = tape.matmul(o, p(b.cross_o))?;
        h = tape.add(h, o)?;

        // Feed-forward.
        let x = affine_norm(tape, h, p(b.ln3_g), p(b.ln3_b))?;
        let f = linear(tape, x, p(b.ff_w1), p(b.ff_b1))?;
        let f = tape.silu(f);
        let f = linear(tape, f, p(b.ff_w2), p(b.ff_b2))?;
        h = tape.add(h, f)?;
    }

    // eps = a(t) * z + b(t) * head(h), with per-channel gates read off the time embedding.
    let x = affine_norm(tape, h, p(slots.out_ln_g), p(slots.out_ln_b))?;
    let head = linear(tape, x, p(slots.out_w), p(slots.out_b))?;
    let a = linear(tape, temb_row, p(slots.skip_w), p(slots.skip_b))?;
    let a = tape.reshape(a, &[cfg.latent_channels()])?;
    let g = linear(tape, temb_row, p(slots.gate_w), p(slots.gate_b))?;
    let g = tape.reshape(g, &[cfg.latent_channels()])?;
    let skip = tape.mul_row(z, a)?;
    let head = tape.mul_row(head, g)?;
    let eps = tape.add(skip, head)?;

    let count = cfg.blocks * cfg.heads;
    Ok(ForwardVars {
        eps,
        cross: cross_acc.mean(tape, count),
        self_attn: self_acc.mean(tape, count),
        cross_per_head: per_head,
    })
}

/// Predicted noise and averaged attention maps for one latent.
pub fn denoise(
    params: &DenoiserParams,
    z: &Tensor,
    t: usize,
    text: &Tensor,
    attention_override: Option<&AttentionOverride>,
) -> Result<(Tensor, AttentionRecord), ModelError> {
    let (eps, record) = denoise_with(
        params,
        z,
        t,
        text,
        ForwardOptions {
            record: true,
            per_head: false,
            attention_override,
        },
    )?;
    Ok((eps, record.expect("recording requested")))
}

/// [`denoise`] with explicit recording options.
pub fn denoise_with(
    params: &DenoiserParams,
    z: &Tensor,
    t: usize,
    text: &Tensor,
    opts: ForwardOptions<'_>,
) -> Result<(Tensor, Option<AttentionRecord>), ModelError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let zv = tape.constant(z.clone());
    let tv = tape.constant(text.clone());
    let out = forward(&mut tape, params, &bound, zv, t, tv, opts)?;
    let record = out.record(&tape, t);
    Ok((tape.value(out.eps).clone(), record))
}

/// Mean squared error between two tensors on a tape.
pub fn mse_var(tape: &mut Tape, a: Var, b: Var) -> Result<Var, TensorError> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d);
    let total = tape.sum(sq, Reduce::All)?;
    let n = tape.value(d).len() as f64;
    Ok(tape.scale(total, 1.0 / n))
}

/// Image (values in [0, 1]) → L×c latent in [-1, 1].
pub fn latent_from_image(cfg: &ModelConfig, image: &Image) -> Tensor {
    assert_eq!(image.width, cfg.image_size());
    assert_eq!(image.height, cfg.image_size());
    assert_eq!(image.channels, cfg.channels);
    let (g, p, ch) = (cfg.grid, cfg.patch, cfg.channels);
    let mut data = Vec::with_capacity(cfg.tokens() * cfg.latent_channels());
    for gr in 0..g {
        for gc in 0..g {
            for dy in 0..p {
                for dx in 0..p {
                    for c in 0..ch {
                        data.push(image.pixel(gc * p + dx, gr * p + dy)[c] * 2.0 - 1.0);
                    }
                }
            }
        }
    }
    Tensor::new(&cfg.latent_shape(), data).expect("latent shape")
}

/// Inverse of [`latent_from_image`], clamping to [0, 1].
pub fn image_from_latent(cfg: &ModelConfig, z: &Tensor) -> Image {
    let (g, p, ch) = (cfg.grid, cfg.patch, cfg.channels);
    let size = cfg.image_size();
    let mut img = Image::new(size, size, ch);
    let mut it = z.data().iter();
    for gr in 0..g {
        for gc in 0..g {
            for dy in 0..p {
                for dx in 0..p {
                    let px = img.pixel_mut(gc * p + dx, gr * p + dy);
                    for v in px.iter_mut().take(ch) {
                        *v = ((it.next().expect("latent length") + 1.0) / 2.0).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    img
}
