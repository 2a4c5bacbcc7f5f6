// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: a flat JSON file overlaid by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use langsteer::confusion::EvalMode;
use langsteer::extraction::{LayerSelector, PoolMode};
use langsteer::langvec::ShiftMode;
use langsteer::steer::Strategy;

use crate::exit::CliError;

/// Every knob a command may read. Unknown keys in a config file are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model_id: Option<String>,
    /// Comma-separated selectors: `first`, `middle`, `last` or an index.
    pub layer: Option<String>,
    pub pool: Option<String>,
    pub k: Option<usize>,
    pub tau: Option<f64>,
    pub alpha: Option<f64>,
    /// One strategy, or a comma-separated list for `sweep`.
    pub strategy: Option<String>,
    pub seed: Option<u64>,
    pub source: Option<String>,
    pub target: Option<String>,
    pub mode: Option<String>,
    pub detector: Option<String>,
    pub sampler: Option<String>,
    pub max_new_tokens: Option<usize>,
    pub method: Option<String>,
    pub k_nn: Option<usize>,
    pub sweep_k: Option<Vec<usize>>,
    pub sweep_alpha: Option<Vec<f64>>,

    pub corpus: Option<PathBuf>,
    pub states: Option<PathBuf>,
    pub pack: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub responses: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    /// `name=path` evaluation sets for `probe`.
    pub eval: Option<Vec<String>>,
    pub out: Option<PathBuf>,
}

/// Flags shared by all subcommands; each overrides the config-file value.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// JSON config file with the same (snake_case) keys as the flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    /// first | middle | last | <index>, comma-separated where several apply.
    #[arg(long, global = true)]
    pub layer: Option<String>,
    /// mean | first
    #[arg(long, global = true)]
    pub pool: Option<String>,
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    /// prompt-only | gen-only | prompt-and-gen
    #[arg(long, global = true)]
    pub strategy: Option<String>,
    #[arg(long, global = true)]
    pub source: Option<String>,
    #[arg(long, global = true)]
    pub target: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// builtin | exec:<path> | ranges:<lang>,<lang>
    #[arg(long, global = true)]
    pub detector: Option<String>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub sweep_k: Option<Vec<usize>>,
    #[arg(long, global = true, value_delimiter = ',', allow_negative_numbers = true)]
    pub sweep_alpha: Option<Vec<f64>>,

    /// Hidden-state JSONL.
    #[arg(long, global = true)]
    pub states: Option<PathBuf>,
    #[arg(long, global = true)]
    pub pack: Option<PathBuf>,
    /// Prompt JSONL: {"id","prompt","target_lang","source_lang"?,"dataset"?}.
    #[arg(long, global = true)]
    pub prompts: Option<PathBuf>,
    #[arg(long, global = true)]
    pub responses: Option<PathBuf>,
    /// monolingual | cross-lingual
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// confusion | greedy | retention
    #[arg(long, global = true)]
    pub sampler: Option<String>,
    #[arg(long, global = true)]
    pub max_new_tokens: Option<usize>,
    /// knn | linear-probe
    #[arg(long, global = true)]
    pub method: Option<String>,
    #[arg(long, global = true)]
    pub k_nn: Option<usize>,
    /// Extra evaluation set for `probe`, as name=path. Repeatable.
    #[arg(long, global = true)]
    pub eval: Option<Vec<String>>,
    /// JSON map of language to task score, correlated by `align`.
    #[arg(long, global = true)]
    pub scores: Option<PathBuf>,
}

macro_rules! overlay {
    ($cfg:ident, $flags:ident, $($field:ident <- $flag:ident),* $(,)?) => {
        $(if $flags.$flag.is_some() { $cfg.$field = $flags.$flag.clone(); })*
    };
}

impl RunConfig {
    pub fn load(flags: &Flags) -> Result<Self, CliError> {
        let mut cfg = match &flags.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Missing(format!("config {}: {e}", path.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        overlay!(cfg, flags,
            model_id <- model, corpus <- corpus, layer <- layer, pool <- pool, k <- k,
            tau <- tau, alpha <- alpha, strategy <- strategy, source <- source,
            target <- target, seed <- seed, out <- out, detector <- detector,
            sweep_k <- sweep_k, sweep_alpha <- sweep_alpha, states <- states, pack <- pack,
            prompts <- prompts, responses <- responses, mode <- mode, sampler <- sampler,
            max_new_tokens <- max_new_tokens, method <- method, k_nn <- k_nn, eval <- eval,
            scores <- scores,
        );
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse every present field so bad values fail before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        if let Some(a) = self.alpha {
            if !a.is_finite() {
                return Err(CliError::Config(format!("alpha must be finite, got {a}")));
            }
        }
        if let Some(t) = self.tau {
            if !(t.is_finite() && t >= 0.0) {
                return Err(CliError::Config(format!("tau must be finite and >= 0, got {t}")));
            }
        }
        if self.k == Some(0) || self.k_nn == Some(0) || self.max_new_tokens == Some(0) {
            return Err(CliError::Config("k, k_nn and max_new_tokens must be positive".into()));
        }
        if let Some(ks) = &self.sweep_k {
            if ks.is_empty() || ks.contains(&0) {
                return Err(CliError::Config("sweep_k needs positive entries".into()));
            }
        }
        if let Some(alphas) = &self.sweep_alpha {
            if alphas.is_empty() || alphas.iter().any(|a| !a.is_finite()) {
                return Err(CliError::Config("sweep_alpha needs finite entries".into()));
            }
        }
        self.layers()?;
        self.pool()?;
        self.strategies()?;
        self.shift_mode()?;
        self.eval_mode()?;
        self.sampler()?;
        self.lid_method_name()?;
        self.eval_sets()?;
        if let Some(d) = &self.detector {
            let known = d == "builtin" || d.starts_with("exec:") || d.starts_with("ranges:");
            if !known {
                return Err(CliError::Config(format!("unknown detector `{d}`")));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> Result<Option<Vec<LayerSelector>>, CliError> {
        self.layer
            .as_deref()
            .map(|s| {
                s.split(',')
                    .map(|p| p.trim().parse::<LayerSelector>().map_err(config))
                    .collect()
            })
            .transpose()
    }

    pub fn pool(&self) -> Result<PoolMode, CliError> {
        self.pool.as_deref().unwrap_or("mean").parse().map_err(config)
    }

    pub fn strategies(&self) -> Result<Option<Vec<Strategy>>, CliError> {
        self.strategy
            .as_deref()
            .map(|s| s.split(',').map(|p| p.trim().parse().map_err(config)).collect())
            .transpose()
    }

    pub fn shift_mode(&self) -> Result<Option<ShiftMode>, CliError> {
        self.mode.as_deref().map(kebab).transpose()
    }

    pub fn eval_mode(&self) -> Result<Option<EvalMode>, CliError> {
        self.mode.as_deref().map(kebab).transpose()
    }

    pub fn sampler(&self) -> Result<langsteer::extraction::SamplerConfig, CliError> {
        use langsteer::extraction::SamplerConfig;
        match self.sampler.as_deref().unwrap_or("confusion") {
            "confusion" => Ok(SamplerConfig::confusion_default()),
            "greedy" => Ok(SamplerConfig::greedy()),
            "retention" => Ok(SamplerConfig::retention_default()),
            other => Err(CliError::Config(format!("unknown sampler `{other}`"))),
        }
    }

    pub fn lid_method_name(&self) -> Result<&str, CliError> {
        match self.method.as_deref().unwrap_or("knn") {
            m @ ("knn" | "linear-probe") => Ok(m),
            other => Err(CliError::Config(format!("unknown method `{other}`"))),
        }
    }

    pub fn eval_sets(&self) -> Result<Vec<(String, PathBuf)>, CliError> {
        self.eval
            .iter()
            .flatten()
            .map(|s| match s.split_once('=') {
                Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok((n.to_owned(), p.into())),
                _ => Err(CliError::Config(format!("--eval expects name=path, got `{s}`"))),
            })
            .collect()
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn require_model(&self) -> Result<&str, CliError> {
        self.model_id
            .as_deref()
            .ok_or_else(|| CliError::Config("no model given (--model)".into()))
    }

    pub fn require_out(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Config("no output path given (--out)".into()))
    }
}

/// An input path that must name an existing file.
pub fn input<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    match path {
        None => Err(CliError::Missing(format!("--{flag} is required"))),
        Some(p) if !p.is_file() => {
            Err(CliError::Missing(format!("--{flag}: {} not found", p.display())))
        }
        Some(p) => Ok(p),
    }
}

fn kebab<T: DeserializeOwned>(s: &str) -> Result<T, CliError> {
    serde_json::from_value(serde_json::Value::String(s.to_owned()))
        .map_err(|_| CliError::Config(format!("unknown mode `{s}`")))
}

fn config(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"model_id":"tiny","alpha":0.3,"k":4}"#).unwrap();
        let flags = Flags {
            config: Some(path),
            alpha: Some(0.9),
            ..Flags::default()
        };
        let cfg = RunConfig::load(&flags).unwrap();
        assert_eq!(cfg.alpha, Some(0.9));
        assert_eq!(cfg.k, Some(4));
        assert_eq!(cfg.model_id.as_deref(), Some("tiny"));
    }

    #[test]
    fn bad_values_are_rejected() {
        let bad = |cfg: RunConfig| matches!(cfg.validate(), Err(CliError::Config(_)));
        assert!(bad(RunConfig { alpha: Some(f64::NAN), ..Default::default() }));
        assert!(bad(RunConfig { strategy: Some("sideways".into()), ..Default::default() }));
        assert!(bad(RunConfig { layer: Some("middle,x".into()), ..Default::default() }));
        assert!(bad(RunConfig { mode: Some("bilingual".into()), ..Default::default() }));
        assert!(RunConfig { alpha: Some(-7.5), ..Default::default() }.validate().is_ok());
        let text = r#"{"modle_id":"tiny"}"#;
        assert!(serde_json::from_str::<RunConfig>(text).is_err());
    }
}
