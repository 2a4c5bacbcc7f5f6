// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{reborrow_hook, LayerTap, ModelAdapter, SamplerConfig, StateHook, TokenizedSequence};
use crate::error::{Error, Result};
use crate::numkit::DenseMatrix;

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub prompt: TokenizedSequence,
    pub max_new_tokens: usize,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Newly generated ids, prompt excluded.
    pub tokens: Vec<u32>,
    /// One matrix per capture tap; row `t` is the block output at position
    /// `t` (before any hook) for every position fed through the model.
    pub captured: Vec<DenseMatrix>,
}

/// Number of positions a request feeds through the model. The last sampled
/// token is never fed back.
pub fn positions_fed(prompt_len: usize, max_new: usize) -> usize {
    prompt_len + max_new.saturating_sub(1)
}

/// Autoregressive decode. The prompt is prefilled one position at a time
/// through the same KV-cached path as generated tokens, so a hook sees every
/// position exactly once.
pub fn generate(
    adapter: &dyn ModelAdapter,
    req: &GenerationRequest,
    capture: &[LayerTap],
    mut hook: Option<&mut dyn StateHook>,
) -> Result<Generation> {
    req.sampler.validate()?;
    adapter.check_taps(capture)?;
    if let Some(h) = hook.as_deref() {
        if h.layer() >= adapter.depth() {
            return Err(Error::LayerOutOfRange {
                layer: h.layer(),
                depth: adapter.depth(),
            });
        }
    }
    let prompt = req.prompt.token_ids();
    let fed = positions_fed(prompt.len(), req.max_new_tokens);
    if fed > adapter.max_positions() {
        return Err(Error::SequenceTooLong {
            len: fed,
            max: adapter.max_positions(),
        });
    }

    let d = adapter.hidden_size();
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut session = adapter.start_session();
    let mut history: Vec<u32> = Vec::with_capacity(prompt.len() + req.max_new_tokens);
    let mut captured: Vec<Vec<f32>> = vec![Vec::with_capacity(fed * d); capture.len()];
    let mut tokens = Vec::with_capacity(req.max_new_tokens);

    let mut feed = |tok: u32, history: &mut Vec<u32>, hook: Option<&mut dyn StateHook>| {
        let out = session.step(tok, capture, hook)?;
        history.push(tok);
        for (acc, s) in captured.iter_mut().zip(&out.taps) {
            acc.extend_from_slice(s);
        }
        Ok::<_, Error>(out.logits)
    };

    let mut logits = Vec::new();
    for &tok in prompt {
        logits = feed(tok, &mut history, reborrow_hook(&mut hook))?;
    }
    for i in 0..req.max_new_tokens {
        let next = req.sampler.sample(&logits, &history, &mut rng);
        tokens.push(next);
        if i + 1 < req.max_new_tokens {
            logits = feed(next, &mut history, reborrow_hook(&mut hook))?;
        }
    }
    let captured = captured
        .iter()
        .map(|rows| DenseMatrix::from_f32(rows.len() / d.max(1), d, rows))
        .collect::<Result<_>>()?;
    Ok(Generation { tokens, captured })
}
