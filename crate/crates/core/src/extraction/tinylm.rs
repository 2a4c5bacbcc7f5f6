// SPDX-License-Identifier: MIT OR Apache-2.0

//! A deterministic desk-scale decoder-only transformer.
//!
//! Pre-LayerNorm blocks (attention then GELU MLP, both residual), learned
//! positional embeddings, untied unembedding. Weights are 32-bit and drawn
//! from a seeded Gaussian; [`train`](super::train) can fit them to the two
//! synthetic token-range languages.
//!
//! The tokenizer is byte level: text is encoded one id per Latin-1 character
//! (characters above U+00FF fall back to their UTF-8 bytes) and ids decode to
//! the Latin-1 character with the same code point. A BOS id is prepended and
//! masked out of pooling unless special tokens are requested.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    reborrow_hook, DecodeSession, LayerTap, ModelAdapter, SamplerConfig, StateHook, StepOutput, TokenizedSequence,
};
use crate::error::{Error, Result};
use crate::extraction::generate::{generate, Generation, GenerationRequest};

/// Beginning-of-sequence id. Never produced by the synthetic languages.
pub const BOS: u32 = 255;

pub(crate) const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
}

impl Default for TinyConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            d_model: 32,
            n_layers: 4,
            n_heads: 4,
            d_ff: 128,
            max_positions: 512,
        }
    }
}

impl TinyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.vocab == 0 || self.max_positions == 0 {
            return Err(Error::InvalidModel("zero-sized dimension".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidModel(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Offsets of each tensor inside the flat parameter buffer. Matrices are
/// stored `in_dim x out_dim`, row-major, so a layer computes `x W`.
#[derive(Debug, Clone)]
pub(crate) struct BlockOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub blocks: Vec<BlockOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub unembed: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(c: &TinyConfig) -> Self {
        let d = c.d_model;
        let mut at = 0;
        let mut take = |n: usize| {
            let start = at;
            at += n;
            start
        };
        let tok_emb = take(c.vocab * d);
        let pos_emb = take(c.max_positions * d);
        let blocks = (0..c.n_layers)
            .map(|_| BlockOffsets {
                ln1_g: take(d),
                ln1_b: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                ln2_g: take(d),
                ln2_b: take(d),
                w1: take(d * c.d_ff),
                b1: take(c.d_ff),
                w2: take(c.d_ff * d),
                b2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let unembed = take(d * c.vocab);
        Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            unembed,
            total: at,
        }
    }

    /// Ranges of LayerNorm gains, which start at one instead of noise.
    pub fn gain_ranges(&self, d: usize) -> Vec<std::ops::Range<usize>> {
        let mut r: Vec<_> = self
            .blocks
            .iter()
            .flat_map(|b| [b.ln1_g..b.ln1_g + d, b.ln2_g..b.ln2_g + d])
            .collect();
        r.push(self.lnf_g..self.lnf_g + d);
        r
    }

    /// Ranges of biases and LayerNorm offsets, which start at zero.
    pub fn zero_ranges(&self, d: usize, d_ff: usize) -> Vec<std::ops::Range<usize>> {
        let mut r: Vec<_> = self
            .blocks
            .iter()
            .flat_map(|b| {
                [
                    b.ln1_b..b.ln1_b + d,
                    b.ln2_b..b.ln2_b + d,
                    b.b1..b.b1 + d_ff,
                    b.b2..b.b2 + d,
                ]
            })
            .collect();
        r.push(self.lnf_b..self.lnf_b + d);
        r
    }
}

/// Seeded initial parameters in `f64`: N(0, 0.02) weights, unit gains, zero
/// biases.
pub(crate) fn init_params(c: &TinyConfig, seed: u64) -> Vec<f64> {
    let layout = Layout::new(c);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut p: Vec<f64> = (0..layout.total).map(|_| normal.sample(&mut rng)).collect();
    for r in layout.gain_ranges(c.d_model) {
        p[r].iter_mut().for_each(|x| *x = 1.0);
    }
    for r in layout.zero_ranges(c.d_model, c.d_ff) {
        p[r].iter_mut().for_each(|x| *x = 0.0);
    }
    p
}

#[derive(Serialize, Deserialize)]
struct WeightsFile {
    model_id: String,
    config: TinyConfig,
    params: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct TinyLm {
    model_id: String,
    config: TinyConfig,
    layout: Layout,
    params: Vec<f32>,
}

impl TinyLm {
    /// Randomly initialised model with the default shape.
    pub fn random(seed: u64) -> Self {
        Self::random_with_config(TinyConfig::default(), seed).expect("default config is valid")
    }

    pub fn random_with_config(config: TinyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed);
        Self::from_params(format!("tiny:{seed}"), config, &params)
    }

    pub(crate) fn from_params(model_id: String, config: TinyConfig, params: &[f64]) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::InvalidModel(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self {
            model_id,
            config,
            layout,
            params: params.iter().map(|&x| x as f32).collect(),
        })
    }

    pub fn config(&self) -> &TinyConfig {
        &self.config
    }

    pub fn with_model_id(mut self, id: impl Into<String>) -> Self {
        self.model_id = id.into();
        self
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    #[cfg(test)]
    pub(crate) fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = WeightsFile {
            model_id: self.model_id.clone(),
            config: self.config,
            params: self.params.clone(),
        };
        fs::write(path, serde_json::to_vec(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: WeightsFile = serde_json::from_slice(&fs::read(path)?)?;
        file.config.validate()?;
        let layout = Layout::new(&file.config);
        if file.params.len() != layout.total || file.params.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidModel(format!(
                "{}: bad parameter buffer",
                path.display()
            )));
        }
        Ok(Self {
            model_id: file.model_id,
            config: file.config,
            layout,
            params: file.params,
        })
    }

    /// Autoregressive decode with an optional hook on one layer.
    pub fn generate(
        &self,
        prompt: &TokenizedSequence,
        max_new: usize,
        sampler: SamplerConfig,
        seed: u64,
        hook: Option<&mut dyn StateHook>,
    ) -> Result<Generation> {
        let req = GenerationRequest {
            prompt: prompt.clone(),
            max_new_tokens: max_new,
            sampler,
            seed,
        };
        generate(self, &req, &[], hook)
    }

    fn slice(&self, offset: usize, len: usize) -> &[f32] {
        &self.params[offset..offset + len]
    }
}

/// Forward of an arbitrary token sequence through a freshly seeded model.
pub fn tinylm_forward(
    seq: &TokenizedSequence,
    seed: u64,
    taps: &[LayerTap],
) -> Result<super::ForwardPass> {
    TinyLm::random(seed).forward(seq.token_ids(), taps, None)
}

/// Latin-1 byte tokenizer with a leading BOS.
pub fn encode_text(text: &str, include_special: bool) -> Result<TokenizedSequence> {
    let mut ids = vec![BOS];
    let mut buf = [0u8; 4];
    for ch in text.chars() {
        let cp = ch as u32;
        if cp <= 0xFF {
            ids.push(cp);
        } else {
            ids.extend(ch.encode_utf8(&mut buf).bytes().map(u32::from));
        }
    }
    let mut mask = vec![true; ids.len()];
    mask[0] = include_special;
    TokenizedSequence::new(ids, mask)
}

pub fn decode_ids(ids: &[u32]) -> String {
    ids.iter()
        .filter_map(|&id| char::from_u32(id).filter(|_| id <= 0xFF))
        .collect()
}

impl ModelAdapter for TinyLm {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn hidden_size(&self) -> usize {
        self.config.d_model
    }

    fn depth(&self) -> usize {
        self.config.n_layers
    }

    fn vocab_size(&self) -> usize {
        self.config.vocab
    }

    fn max_positions(&self) -> usize {
        self.config.max_positions
    }

    fn tokenize(&self, text: &str, include_special: bool) -> Result<TokenizedSequence> {
        encode_text(text, include_special)
    }

    fn detokenize(&self, ids: &[u32]) -> String {
        decode_ids(ids)
    }

    fn start_session(&self) -> Box<dyn DecodeSession + '_> {
        Box::new(TinySession::new(self))
    }
}

struct TinySession<'a> {
    model: &'a TinyLm,
    pos: usize,
    /// Per layer, position-major `pos x d` keys and values.
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
}

impl<'a> TinySession<'a> {
    fn new(model: &'a TinyLm) -> Self {
        let n = model.config.n_layers;
        Self {
            model,
            pos: 0,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
        }
    }
}

impl DecodeSession for TinySession<'_> {
    fn position(&self) -> usize {
        self.pos
    }

    fn step(
        &mut self,
        token: u32,
        taps: &[LayerTap],
        mut hook: Option<&mut dyn StateHook>,
    ) -> Result<StepOutput> {
        let m = self.model;
        let c = &m.config;
        let lay = &m.layout;
        let d = c.d_model;
        if token as usize >= c.vocab {
            return Err(Error::InvalidToken {
                token,
                vocab: c.vocab,
            });
        }
        if self.pos >= c.max_positions {
            return Err(Error::SequenceTooLong {
                len: self.pos + 1,
                max: c.max_positions,
            });
        }
        m.check_taps(taps)?;
        let t = self.pos;

        let mut x: Vec<f32> = m
            .slice(lay.tok_emb + token as usize * d, d)
            .iter()
            .zip(m.slice(lay.pos_emb + t * d, d))
            .map(|(a, b)| a + b)
            .collect();
        let mut tap_out = vec![Vec::new(); taps.len()];
        let hd = c.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();

        for (l, b) in lay.blocks.iter().enumerate() {
            let a = layer_norm(&x, m.slice(b.ln1_g, d), m.slice(b.ln1_b, d));
            let q = vecmat(&a, m.slice(b.wq, d * d), d);
            self.keys[l].extend(vecmat(&a, m.slice(b.wk, d * d), d));
            self.values[l].extend(vecmat(&a, m.slice(b.wv, d * d), d));
            let (keys, values) = (&self.keys[l], &self.values[l]);

            let mut attn = vec![0.0f32; d];
            let mut scores = vec![0.0f32; t + 1];
            for h in 0..c.n_heads {
                let qh = &q[h * hd..(h + 1) * hd];
                for (s, score) in scores.iter_mut().enumerate() {
                    let kh = &keys[s * d + h * hd..s * d + (h + 1) * hd];
                    *score = dot32(qh, kh) * scale;
                }
                softmax_in_place(&mut scores);
                let out = &mut attn[h * hd..(h + 1) * hd];
                for (s, &p) in scores.iter().enumerate() {
                    let vh = &values[s * d + h * hd..s * d + (h + 1) * hd];
                    for (o, &v) in out.iter_mut().zip(vh) {
                        *o += p * v;
                    }
                }
            }
            let proj = vecmat(&attn, m.slice(b.wo, d * d), d);
            x.iter_mut().zip(&proj).for_each(|(xi, pi)| *xi += pi);

            let a2 = layer_norm(&x, m.slice(b.ln2_g, d), m.slice(b.ln2_b, d));
            let mut f = vecmat(&a2, m.slice(b.w1, d * c.d_ff), c.d_ff);
            f.iter_mut()
                .zip(m.slice(b.b1, c.d_ff))
                .for_each(|(fi, bi)| *fi = gelu32(*fi + bi));
            let y = vecmat(&f, m.slice(b.w2, c.d_ff * d), d);
            x.iter_mut()
                .zip(y.iter().zip(m.slice(b.b2, d)))
                .for_each(|(xi, (yi, bi))| *xi += yi + bi);

            for (slot, tap) in tap_out.iter_mut().zip(taps) {
                if tap.layer_index == l {
                    *slot = x.clone();
                }
            }
            if let Some(h) = reborrow_hook(&mut hook) {
                if h.layer() == l {
                    h.apply(t, &mut x);
                }
            }
        }

        let af = layer_norm(&x, m.slice(lay.lnf_g, d), m.slice(lay.lnf_b, d));
        let logits = vecmat(&af, m.slice(lay.unembed, d * c.vocab), c.vocab);
        self.pos += 1;
        Ok(StepOutput {
            logits,
            taps: tap_out,
        })
    }
}

fn dot32(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x W` for `W` stored `x.len() x cols`.
fn vecmat(x: &[f32], w: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; cols];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wij) in out.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
            *o += xi * wij;
        }
    }
    out
}

fn layer_norm(x: &[f32], g: &[f32], b: &[f32]) -> Vec<f32> {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let rstd = 1.0 / (var + LN_EPS as f32).sqrt();
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (gi, bi))| (v - mean) * rstd * gi + bi)
        .collect()
}

fn softmax_in_place(xs: &mut [f32]) {
    let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    xs.iter_mut().for_each(|x| *x /= sum);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu32(x: f32) -> f32 {
    let c = GELU_C as f32;
    0.5 * x * (1.0 + (c * (x + 0.044_715 * x * x * x)).tanh())
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044_715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

pub const BILINGUAL_ID: &str = "tiny-bilingual";

pub(crate) fn registry_lookup(model_id: &str) -> Result<TinyLm> {
    if model_id == "tiny" {
        return Ok(TinyLm::random(0).with_model_id("tiny"));
    }
    if let Some(seed) = model_id.strip_prefix("tiny:") {
        let seed = seed
            .parse::<u64>()
            .map_err(|_| Error::UnknownModel(model_id.to_owned()))?;
        return Ok(TinyLm::random(seed));
    }
    if model_id == BILINGUAL_ID {
        return bilingual_cached();
    }
    if let Some(path) = model_id.strip_prefix("file:") {
        return Ok(TinyLm::load(Path::new(path))?.with_model_id(model_id));
    }
    Err(Error::UnknownModel(model_id.to_owned()))
}

fn cache_dir() -> Option<PathBuf> {
    std::env::var_os("LANGSTEER_CACHE").map(PathBuf::from)
}

fn bilingual_cached() -> Result<TinyLm> {
    let cfg = super::train::TrainConfig::default();
    let file = cache_dir().map(|d| d.join(format!("{BILINGUAL_ID}-{}.json", cfg.fingerprint())));
    if let Some(path) = file.as_ref().filter(|p| p.exists()) {
        return Ok(TinyLm::load(path)?.with_model_id(BILINGUAL_ID));
    }
    let model = super::train::train_bilingual(&cfg)?.model.with_model_id(BILINGUAL_ID);
    if let Some(path) = file {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        model.save(&path)?;
    }
    Ok(model)
}
