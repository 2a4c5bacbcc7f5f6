// SPDX-License-Identifier: MIT OR Apache-2.0

//! Inference-time injection `h'_t = h_t + alpha * delta` at one layer.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::confusion::{
    evaluate_responses, Averages, Detector, EvalMode, LangScores, ResponseRecord,
    UnicodeScriptTable,
};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::extraction::{
    generate, Generation, GenerationRequest, LayerTap, ModelAdapter, SamplerConfig, StateHook,
};
use crate::langvec::{make_shift_vector, ShiftMode, ShiftVector, SteeringPack};
use crate::numkit::{check_dim, RealVector};

/// Which positions receive the shift, relative to the prompt length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    PromptOnly,
    GenOnly,
    PromptAndGen,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Self::PromptOnly, Self::GenOnly, Self::PromptAndGen];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::PromptOnly => "prompt-only",
            Self::GenOnly => "gen-only",
            Self::PromptAndGen => "prompt-and-gen",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectionConfig {
    pub alpha: f64,
    pub strategy: Strategy,
    pub layer_index: usize,
    /// Number of prompt positions (`T_input`), special tokens included.
    pub prompt_len: usize,
}

impl InjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() {
            return Err(Error::InvalidInput(format!(
                "alpha must be finite, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// 0-based positions: prompt-only covers `t < T_input`, gen-only covers
/// `t >= T_input`, prompt-and-gen covers everything.
pub fn position_covered(cfg: &InjectionConfig, t: usize) -> bool {
    match cfg.strategy {
        Strategy::PromptOnly => t < cfg.prompt_len,
        Strategy::GenOnly => t >= cfg.prompt_len,
        Strategy::PromptAndGen => true,
    }
}

/// `h + alpha * delta`; returns `h` untouched when `alpha` is zero.
pub fn inject_hidden(h: &RealVector, delta: &ShiftVector, alpha: f64) -> Result<RealVector> {
    check_dim(h.dim(), delta.delta.dim())?;
    if alpha == 0.0 {
        return Ok(h.clone());
    }
    RealVector::new(
        h.iter()
            .zip(delta.delta.iter())
            .map(|(x, d)| x + alpha * d)
            .collect(),
    )
}

/// Hook adding the scaled shift at covered positions and recording them.
#[derive(Debug, Clone)]
pub struct InjectionHook {
    cfg: InjectionConfig,
    scaled: Vec<f32>,
    trace: Vec<usize>,
}

impl InjectionHook {
    pub fn new(cfg: InjectionConfig, delta: &RealVector) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            scaled: delta.iter().map(|&d| (cfg.alpha * d) as f32).collect(),
            trace: Vec::new(),
        })
    }

    /// Covered positions seen so far, in order.
    pub fn trace(&self) -> &[usize] {
        &self.trace
    }

    pub fn into_trace(self) -> Vec<usize> {
        self.trace
    }
}

impl StateHook for InjectionHook {
    fn layer(&self) -> usize {
        self.cfg.layer_index
    }

    fn apply(&mut self, position: usize, state: &mut [f32]) {
        if !position_covered(&self.cfg, position) {
            return;
        }
        self.trace.push(position);
        // Skipping the add keeps alpha = 0 bit-exact (-0.0 + 0.0 = +0.0).
        if self.cfg.alpha != 0.0 {
            state.iter_mut().zip(&self.scaled).for_each(|(s, d)| *s += d);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeredGeneration {
    pub generation: Generation,
    pub text: String,
    /// Positions whose state was shifted.
    pub trace: Vec<usize>,
}

/// The pack must belong to this model and layer.
pub fn check_pack(adapter: &dyn ModelAdapter, pack: &SteeringPack) -> Result<()> {
    if pack.model_id != adapter.model_id() {
        return Err(Error::PackModelMismatch(format!(
            "pack built for {:?}, model is {:?}",
            pack.model_id,
            adapter.model_id()
        )));
    }
    if pack.hidden_dim() != adapter.hidden_size() {
        return Err(Error::PackModelMismatch(format!(
            "pack hidden size {} vs model {}",
            pack.hidden_dim(),
            adapter.hidden_size()
        )));
    }
    if pack.layer_index >= adapter.depth() {
        return Err(Error::PackModelMismatch(format!(
            "pack layer {} beyond model depth {}",
            pack.layer_index,
            adapter.depth()
        )));
    }
    Ok(())
}

pub fn steered_generate(
    adapter: &dyn ModelAdapter,
    req: &GenerationRequest,
    pack: &SteeringPack,
    shift: &ShiftVector,
    cfg: &InjectionConfig,
) -> Result<SteeredGeneration> {
    steered_generate_with_capture(adapter, req, pack, shift, cfg, &[])
}

/// As [`steered_generate`], also recording the pre-hook block outputs of
/// the requested layers.
pub fn steered_generate_with_capture(
    adapter: &dyn ModelAdapter,
    req: &GenerationRequest,
    pack: &SteeringPack,
    shift: &ShiftVector,
    cfg: &InjectionConfig,
    capture: &[LayerTap],
) -> Result<SteeredGeneration> {
    check_pack(adapter, pack)?;
    if cfg.layer_index != pack.layer_index {
        return Err(Error::PackModelMismatch(format!(
            "injection layer {} differs from pack layer {}",
            cfg.layer_index, pack.layer_index
        )));
    }
    if shift.delta.dim() != adapter.hidden_size() {
        return Err(Error::PackModelMismatch(format!(
            "shift dimension {} vs model {}",
            shift.delta.dim(),
            adapter.hidden_size()
        )));
    }
    if cfg.prompt_len != req.prompt.len() {
        return Err(Error::InvalidInput(format!(
            "injection prompt length {} but prompt has {} tokens",
            cfg.prompt_len,
            req.prompt.len()
        )));
    }
    let mut hook = InjectionHook::new(*cfg, &shift.delta)?;
    let generation = generate(adapter, req, capture, Some(&mut hook))?;
    Ok(SteeredGeneration {
        text: adapter.detokenize(&generation.tokens),
        generation,
        trace: hook.into_trace(),
    })
}

/// Published per-model alpha values; lookup ignores case and any
/// `org/` prefix.
pub const ALPHA_DEFAULTS: [(&str, f64); 6] = [
    ("qwen2.5-0.5b", 0.5),
    ("qwen2.5-0.5b-instruct", 0.5),
    ("qwen2.5-7b", 1.3),
    ("qwen2.5-7b-instruct", 1.3),
    ("llama-3.1-8b", 0.15),
    ("llama-3.1-8b-instruct", 0.10),
];

/// Fallback for models without a published value.
pub const FALLBACK_ALPHA: f64 = 0.5;

/// Alpha for a model id and whether it came from the table.
pub fn default_alpha(model_id: &str) -> (f64, bool) {
    let key = model_id.rsplit('/').next().unwrap_or(model_id).to_lowercase();
    ALPHA_DEFAULTS
        .iter()
        .find(|(m, _)| *m == key)
        .map_or((FALLBACK_ALPHA, false), |&(_, a)| (a, true))
}

/// One prompt to steer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerPrompt {
    pub id: String,
    pub prompt: String,
    #[serde(default)]
    pub source_lang: Option<String>,
    pub target_lang: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
}

/// Settings shared by every prompt in a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteerSettings {
    pub alpha: f64,
    pub strategy: Strategy,
    pub mode: ShiftMode,
    pub sampler: SamplerConfig,
    pub max_new_tokens: usize,
    /// Prompt `i` samples with seed `seed + i`.
    pub seed: u64,
}

/// Steer every prompt and package the results as response records.
pub fn generate_responses(
    adapter: &dyn ModelAdapter,
    prompts: &[SteerPrompt],
    pack: &SteeringPack,
    s: &SteerSettings,
    exec: Exec,
) -> Result<Vec<ResponseRecord>> {
    check_pack(adapter, pack)?;
    let idx: Vec<usize> = (0..prompts.len()).collect();
    exec.try_map(&idx, |&i| {
        let p = &prompts[i];
        let shift = make_shift_vector(pack, p.source_lang.as_deref(), &p.target_lang, s.mode)?;
        let tokens = adapter.tokenize(&p.prompt, true)?;
        let cfg = InjectionConfig {
            alpha: s.alpha,
            strategy: s.strategy,
            layer_index: pack.layer_index,
            prompt_len: tokens.len(),
        };
        let req = GenerationRequest {
            prompt: tokens,
            max_new_tokens: s.max_new_tokens,
            sampler: s.sampler,
            seed: s.seed.wrapping_add(i as u64),
        };
        let out = steered_generate(adapter, &req, pack, &shift, &cfg)?;
        Ok(ResponseRecord {
            id: p.id.clone(),
            prompt: p.prompt.clone(),
            target_lang: p.target_lang.clone(),
            source_lang: match s.mode {
                ShiftMode::CrossLingual => p.source_lang.clone(),
                ShiftMode::Monolingual => None,
            },
            alpha: Some(s.alpha),
            strategy: Some(s.strategy.to_string()),
            text: out.text,
            dataset: p.dataset.clone(),
        })
    })
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    pub strategies: Vec<Strategy>,
    pub mode: ShiftMode,
    pub eval_mode: EvalMode,
    pub sampler: SamplerConfig,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub exec: Exec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: Strategy,
    pub alpha: f64,
    pub avg: Averages,
    pub per_lang: BTreeMap<String, LangScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn row(&self, strategy: Strategy, alpha: f64) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.strategy == strategy && r.alpha == alpha)
    }

    /// Strategy x alpha grid of `LCPR / LPR / WPR` averages.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<16}{:>7}{:>9}{:>9}{:>9}\n",
            "strategy", "alpha", "LCPR", "LPR", "WPR"
        );
        for r in &self.rows {
            let wpr = r.avg.wpr.map_or("-".into(), |w| format!("{w:.2}"));
            let _ = writeln!(
                out,
                "{:<16}{:>7}{:>9.2}{:>9.2}{:>9}",
                r.strategy.as_str(),
                r.alpha,
                r.avg.lcpr,
                r.avg.lpr,
                wpr
            );
        }
        out
    }
}

/// Steer every prompt for each (strategy, alpha) cell and score the
/// responses. Cells run in parallel; every cell reuses the same per-prompt
/// seeds so cells differ only by the injection.
pub fn alpha_sweep(
    adapter: &dyn ModelAdapter,
    prompts: &[SteerPrompt],
    pack: &SteeringPack,
    cfg: &SweepConfig,
    detector: &dyn Detector,
    table: &UnicodeScriptTable,
) -> Result<SweepTable> {
    if cfg.alphas.is_empty() || cfg.strategies.is_empty() {
        return Err(Error::InvalidInput(
            "sweep needs at least one alpha and one strategy".into(),
        ));
    }
    let cells: Vec<(Strategy, f64)> = cfg
        .strategies
        .iter()
        .flat_map(|&s| cfg.alphas.iter().map(move |&a| (s, a)))
        .collect();
    let rows = cfg.exec.try_map(&cells, |&(strategy, alpha)| {
        let settings = SteerSettings {
            alpha,
            strategy,
            mode: cfg.mode,
            sampler: cfg.sampler,
            max_new_tokens: cfg.max_new_tokens,
            seed: cfg.seed,
        };
        let responses = generate_responses(adapter, prompts, pack, &settings, Exec::Sequential)?;
        let report =
            evaluate_responses(&responses, detector, table, cfg.eval_mode, Exec::Sequential)?;
        Ok::<_, Error>(SweepRow {
            strategy,
            alpha,
            avg: report.avg,
            per_lang: report.per_lang,
        })
    })?;
    Ok(SweepTable { rows })
}
