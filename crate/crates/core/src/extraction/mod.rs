// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hidden-state extraction through a uniform model adapter contract.
//!
//! A [`ModelAdapter`] exposes three things: a tokenizer, a forward pass that
//! reports block outputs at requested layers, and an incremental decode
//! session with a KV cache. A [`StateHook`] registered at layer `m` sees the
//! output of block `m` for each position and may rewrite it before block
//! `m + 1` reads it; the rewritten state is what lands in the cache.

pub mod corpus;
pub mod generate;
pub mod sampler;
pub mod tinylm;
pub mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::numkit::{mean_pool, DenseMatrix, RealVector};

pub use corpus::CorpusRecord;
pub use generate::{generate, Generation, GenerationRequest};
pub use sampler::SamplerConfig;

/// Token ids plus the flags that decide which positions are pooled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSequence {
    token_ids: Vec<u32>,
    validity_mask: Vec<bool>,
}

impl TokenizedSequence {
    pub fn new(token_ids: Vec<u32>, validity_mask: Vec<bool>) -> Result<Self> {
        if token_ids.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if token_ids.len() != validity_mask.len() {
            return Err(Error::DimError {
                expected: token_ids.len(),
                got: validity_mask.len(),
            });
        }
        Ok(Self {
            token_ids,
            validity_mask,
        })
    }

    /// Every token contributes to pooling.
    pub fn all_valid(token_ids: Vec<u32>) -> Result<Self> {
        let mask = vec![true; token_ids.len()];
        Self::new(token_ids, mask)
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    pub fn validity_mask(&self) -> &[bool] {
        &self.validity_mask
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Tap at the output of transformer block `layer_index` (0-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerTap {
    pub layer_index: usize,
}

impl LayerTap {
    pub fn new(layer_index: usize) -> Self {
        Self { layer_index }
    }
}

/// Which layer to read, resolved against a model depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSelector {
    First,
    Middle,
    Last,
    Index(usize),
}

impl LayerSelector {
    pub fn resolve(self, depth: usize) -> Result<usize> {
        if depth == 0 {
            return Err(Error::InvalidModel("model depth is zero".into()));
        }
        let idx = match self {
            LayerSelector::First => 0,
            LayerSelector::Middle => middle_layer_index(depth)?,
            LayerSelector::Last => depth - 1,
            LayerSelector::Index(i) => i,
        };
        if idx >= depth {
            return Err(Error::LayerOutOfRange { layer: idx, depth });
        }
        Ok(idx)
    }
}

impl std::str::FromStr for LayerSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(Self::First),
            "middle" => Ok(Self::Middle),
            "last" => Ok(Self::Last),
            other => other
                .parse::<usize>()
                .map(Self::Index)
                .map_err(|_| Error::InvalidInput(format!("bad layer selector `{other}`"))),
        }
    }
}

/// `floor(depth / 2)`.
pub fn middle_layer_index(depth: usize) -> Result<usize> {
    if depth == 0 {
        return Err(Error::InvalidModel("model depth is zero".into()));
    }
    Ok(depth / 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Mean,
    First,
}

impl std::str::FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "first" | "first-token" | "cls" => Ok(Self::First),
            other => Err(Error::InvalidInput(format!("bad pool mode `{other}`"))),
        }
    }
}

/// One pooled sentence representation. Serialized as one JSON-lines record:
/// `{"id", "lang", "layer", "pool", "vec"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenStateRecord {
    #[serde(rename = "id")]
    pub sentence_id: String,
    pub lang: String,
    #[serde(rename = "layer")]
    pub layer_index: usize,
    #[serde(rename = "pool")]
    pub pool_mode: PoolMode,
    #[serde(rename = "vec")]
    pub vector: RealVector,
}

/// Rewrites the block output of one layer, position by position.
pub trait StateHook {
    fn layer(&self) -> usize;

    /// Called once per processed position with the output of block
    /// [`layer`](StateHook::layer).
    fn apply(&mut self, position: usize, state: &mut [f32]);
}

/// Reborrow an optional hook for one call without giving it away.
pub fn reborrow_hook<'b>(hook: &'b mut Option<&mut dyn StateHook>) -> Option<&'b mut dyn StateHook> {
    match hook {
        Some(h) => Some(&mut **h),
        None => None,
    }
}

/// Per-step result of a decode session.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<f32>,
    /// One block-output state per requested tap, in request order, observed
    /// before any hook rewrites it.
    pub taps: Vec<Vec<f32>>,
}

/// Incremental decoding with a KV cache.
pub trait DecodeSession {
    /// Number of positions already consumed.
    fn position(&self) -> usize;

    /// Consume `token` at position [`position`](DecodeSession::position).
    fn step(
        &mut self,
        token: u32,
        taps: &[LayerTap],
        hook: Option<&mut dyn StateHook>,
    ) -> Result<StepOutput>;
}

/// Full-sequence forward result.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    /// T rows of vocabulary logits.
    pub logits: Vec<Vec<f32>>,
    /// One T x d matrix per requested tap.
    pub taps: Vec<DenseMatrix>,
}

pub trait ModelAdapter: Send + Sync {
    fn model_id(&self) -> &str;
    fn hidden_size(&self) -> usize;
    fn depth(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn max_positions(&self) -> usize;

    fn tokenize(&self, text: &str, include_special: bool) -> Result<TokenizedSequence>;
    fn detokenize(&self, ids: &[u32]) -> String;

    fn start_session(&self) -> Box<dyn DecodeSession + '_>;

    fn forward(
        &self,
        tokens: &[u32],
        taps: &[LayerTap],
        mut hook: Option<&mut dyn StateHook>,
    ) -> Result<ForwardPass> {
        self.check_taps(taps)?;
        let d = self.hidden_size();
        let mut session = self.start_session();
        let mut logits = Vec::with_capacity(tokens.len());
        let mut tap_rows: Vec<Vec<f32>> = vec![Vec::with_capacity(tokens.len() * d); taps.len()];
        for &tok in tokens {
            let out = session.step(tok, taps, reborrow_hook(&mut hook))?;
            logits.push(out.logits);
            for (acc, state) in tap_rows.iter_mut().zip(out.taps) {
                acc.extend_from_slice(&state);
            }
        }
        let taps = tap_rows
            .iter()
            .map(|rows| DenseMatrix::from_f32(tokens.len(), d, rows))
            .collect::<Result<_>>()?;
        Ok(ForwardPass { logits, taps })
    }

    fn check_taps(&self, taps: &[LayerTap]) -> Result<()> {
        let depth = self.depth();
        match taps.iter().find(|t| t.layer_index >= depth) {
            Some(t) => Err(Error::LayerOutOfRange {
                layer: t.layer_index,
                depth,
            }),
            None => Ok(()),
        }
    }
}

/// Block-output hidden states for each tap, one T x d matrix per tap.
pub fn extract_hidden_states(
    adapter: &dyn ModelAdapter,
    seq: &TokenizedSequence,
    taps: &[LayerTap],
) -> Result<Vec<DenseMatrix>> {
    adapter.check_taps(taps)?;
    Ok(adapter.forward(seq.token_ids(), taps, None)?.taps)
}

/// Reduce a T x d state matrix to one vector.
pub fn pool_sequence(states: &DenseMatrix, mask: &[bool], mode: PoolMode) -> Result<RealVector> {
    match mode {
        PoolMode::Mean => mean_pool(states, mask),
        PoolMode::First => {
            if states.rows() == 0 {
                return Err(Error::EmptyPool);
            }
            RealVector::new(states.row(0).to_vec())
        }
    }
}

/// Extraction settings for a whole corpus.
#[derive(Debug, Clone)]
pub struct ExtractOptions {
    pub layers: Vec<usize>,
    pub pool: PoolMode,
    /// Let BOS and other special tokens contribute to mean pooling.
    pub include_special: bool,
    pub exec: Exec,
}

/// One record per (sentence, layer), sentence-major, layers in request order.
pub fn extract_corpus(
    adapter: &dyn ModelAdapter,
    corpus: &[CorpusRecord],
    opts: &ExtractOptions,
) -> Result<Vec<HiddenStateRecord>> {
    let taps: Vec<LayerTap> = opts.layers.iter().copied().map(LayerTap::new).collect();
    adapter.check_taps(&taps)?;
    let per_sentence = opts.exec.try_map(corpus, |rec| {
        let seq = adapter.tokenize(&rec.text, opts.include_special)?;
        let states = extract_hidden_states(adapter, &seq, &taps)?;
        states
            .iter()
            .zip(&taps)
            .map(|(m, tap)| {
                Ok(HiddenStateRecord {
                    sentence_id: rec.id.clone(),
                    lang: rec.lang.clone(),
                    layer_index: tap.layer_index,
                    pool_mode: opts.pool,
                    vector: pool_sequence(m, seq.validity_mask(), opts.pool)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(per_sentence.into_iter().flatten().collect())
}

pub fn write_records(path: &Path, records: &[HiddenStateRecord]) -> Result<()> {
    corpus::write_jsonl(path, records)
}

pub fn read_records(path: &Path) -> Result<Vec<HiddenStateRecord>> {
    corpus::read_jsonl(path)
}

/// Resolve a model id to an adapter.
///
/// - `tiny` / `tiny:<seed>`: randomly initialised tiny model (seed 0 by default).
/// - `tiny-bilingual`: tiny model trained on the two synthetic token-range
///   languages; cached under `$LANGSTEER_CACHE` when that is set.
/// - `file:<path>`: tiny model weights saved with [`tinylm::TinyLm::save`].
pub fn load_adapter(model_id: &str) -> Result<Box<dyn ModelAdapter>> {
    tinylm::registry_lookup(model_id).map(|m| Box::new(m) as Box<dyn ModelAdapter>)
}
