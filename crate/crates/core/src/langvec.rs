// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-language vectors in LDA space, their back-projections, shift vectors
//! and the persisted [`SteeringPack`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lda::{fit_lda, fit_linear_probe_with, LabeledEmbeddingSet, LdaProjection, LinearProbe, ProbeConfig};
use crate::numkit::{check_dim, DenseMatrix, RealVector};

/// Probe-weight threshold for active dimensions.
pub const DEFAULT_TAU: f64 = 0.01;

pub const FORMAT_VERSION: i64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageVector {
    pub lang: String,
    /// Mean projected state on the active dimensions, zero elsewhere.
    pub v: RealVector,
    /// Sorted, unique.
    pub active_dims: Vec<usize>,
    pub sample_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftMode {
    Monolingual,
    CrossLingual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftVector {
    pub source: Option<String>,
    pub target: String,
    pub delta: RealVector,
    pub mode: ShiftMode,
}

/// `{ j : |u_lj| > tau }` for the probe row of `lang`.
pub fn active_dimensions(probe: &LinearProbe, lang: &str, tau: f64) -> Result<Vec<usize>> {
    let row = probe
        .languages
        .iter()
        .position(|l| l == lang)
        .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))?;
    let dims: Vec<usize> = probe
        .weights
        .row(row)
        .iter()
        .enumerate()
        .filter(|(_, u)| u.abs() > tau)
        .map(|(j, _)| j)
        .collect();
    if dims.is_empty() {
        return Err(Error::NoActiveDimensions {
            lang: lang.to_string(),
            tau,
        });
    }
    Ok(dims)
}

/// Mean of the projected states of `lang`, kept only on `dims`.
pub fn build_language_vector(
    p: &LdaProjection,
    data: &LabeledEmbeddingSet,
    lang: &str,
    dims: &[usize],
) -> Result<LanguageVector> {
    check_dim(p.dim(), data.dim())?;
    let li = data
        .language_index(lang)
        .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))?;
    if let Some(&j) = dims.iter().find(|&&j| j >= p.k) {
        return Err(Error::InvalidInput(format!(
            "active dimension {j} outside {} components",
            p.k
        )));
    }
    let mut sum = vec![0.0; p.k];
    let mut n = 0usize;
    for row in data.rows_of(li) {
        let z = p.w.vecmat(row)?;
        sum.iter_mut().zip(&z).for_each(|(s, x)| *s += x);
        n += 1;
    }
    if n == 0 {
        return Err(Error::InsufficientSamples(format!("no samples for {lang}")));
    }
    let mut active = dims.to_vec();
    active.sort_unstable();
    active.dedup();
    let mut v = vec![0.0; p.k];
    for &j in &active {
        v[j] = sum[j] / n as f64;
    }
    Ok(LanguageVector {
        lang: lang.to_string(),
        v: RealVector::new(v)?,
        active_dims: active,
        sample_count: n,
    })
}

/// `v W^+`.
pub fn back_project(p: &LdaProjection, v: &LanguageVector) -> Result<RealVector> {
    back_project_with(&p.w_pinv, &v.v)
}

pub fn back_project_with(w_pinv: &DenseMatrix, v: &RealVector) -> Result<RealVector> {
    check_dim(w_pinv.rows(), v.dim())?;
    RealVector::new(w_pinv.vecmat(v.as_slice())?)
}

/// Cross-lingual: `-v_source + v_target` (back-projected). Monolingual:
/// `v_target`; any source is ignored.
pub fn make_shift_vector(
    pack: &SteeringPack,
    source: Option<&str>,
    target: &str,
    mode: ShiftMode,
) -> Result<ShiftVector> {
    let tgt = pack.origspace(target)?;
    match mode {
        ShiftMode::Monolingual => Ok(ShiftVector {
            source: None,
            target: target.to_string(),
            delta: tgt.clone(),
            mode,
        }),
        ShiftMode::CrossLingual => {
            let source = source.ok_or_else(|| {
                Error::InvalidInput("cross-lingual shift needs a source language".into())
            })?;
            let src = pack.origspace(source)?;
            let delta = tgt.iter().zip(src.iter()).map(|(t, s)| t - s).collect();
            Ok(ShiftVector {
                source: Some(source.to_string()),
                target: target.to_string(),
                delta: RealVector::new(delta)?,
                mode,
            })
        }
    }
}

/// Everything needed to steer one model at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringPack {
    pub model_id: String,
    pub layer_index: usize,
    pub tau: f64,
    pub languages: Vec<String>,
    /// d x k.
    pub projection: DenseMatrix,
    /// k x d.
    pub projection_pinv: DenseMatrix,
    /// K x k.
    pub probe_weights: DenseMatrix,
    pub probe_bias: RealVector,
    pub vectors: BTreeMap<String, LanguageVector>,
    pub vectors_origspace: BTreeMap<String, RealVector>,
}

impl SteeringPack {
    pub fn hidden_dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn n_components(&self) -> usize {
        self.projection.cols()
    }

    pub fn vector(&self, lang: &str) -> Result<&LanguageVector> {
        self.vectors
            .get(lang)
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    pub fn origspace(&self, lang: &str) -> Result<&RealVector> {
        self.vectors_origspace
            .get(lang)
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    /// Classify a hidden state with the stored projection and probe.
    pub fn predict(&self, h: &[f64]) -> Result<&str> {
        check_dim(self.hidden_dim(), h.len())?;
        let z = self.projection.vecmat(h)?;
        let logits = self.probe_weights.matvec(&z)?;
        let mut best = 0;
        for (i, (&l, b)) in logits.iter().zip(self.probe_bias.iter()).enumerate() {
            if l + b > logits[best] + self.probe_bias[best] {
                best = i;
            }
        }
        Ok(&self.languages[best])
    }

    /// Check that every dimension and key agrees.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::CorruptPack(m));
        let (d, k) = self.projection.shape();
        let n_lang = self.languages.len();
        if self.projection_pinv.shape() != (k, d) {
            return bad("projection_pinv shape mismatch".into());
        }
        if self.probe_weights.shape() != (n_lang, k) || self.probe_bias.dim() != n_lang {
            return bad("probe shape mismatch".into());
        }
        let mut sorted = self.languages.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != n_lang {
            return bad("duplicate language codes".into());
        }
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return bad("tau must be finite and non-negative".into());
        }
        if self.vectors.len() != n_lang || self.vectors_origspace.len() != n_lang {
            return bad("every language needs a vector and a back-projection".into());
        }
        for lang in &self.languages {
            let (Some(v), Some(o)) = (self.vectors.get(lang), self.vectors_origspace.get(lang))
            else {
                return bad(format!("missing vectors for {lang}"));
            };
            if v.lang != *lang || v.v.dim() != k || o.dim() != d {
                return bad(format!("vector dimensions for {lang}"));
            }
            if v.sample_count == 0 {
                return bad(format!("zero sample count for {lang}"));
            }
            if v.active_dims.windows(2).any(|w| w[0] >= w[1])
                || v.active_dims.iter().any(|&j| j >= k)
            {
                return bad(format!("active dims for {lang} not sorted or out of range"));
            }
            let outside = v
                .v
                .iter()
                .enumerate()
                .any(|(j, &x)| x != 0.0 && v.active_dims.binary_search(&j).is_err());
            if outside {
                return bad(format!("vector for {lang} non-zero outside active dims"));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PackFile {
    format_version: i64,
    model_id: String,
    layer_index: usize,
    hidden_dim: usize,
    n_components: usize,
    tau: f64,
    languages: Vec<String>,
    projection: Vec<Vec<f64>>,
    projection_pinv: Vec<Vec<f64>>,
    probe_weights: Vec<Vec<f64>>,
    probe_bias: Vec<f64>,
    vectors: BTreeMap<String, Vec<f64>>,
    vectors_origspace: BTreeMap<String, Vec<f64>>,
    active_dims: BTreeMap<String, Vec<usize>>,
    sample_counts: BTreeMap<String, usize>,
}

fn matrix(rows: Vec<Vec<f64>>, cols: usize, what: &str) -> Result<DenseMatrix> {
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::CorruptPack(format!("{what}: ragged rows")));
    }
    let n = rows.len();
    DenseMatrix::new(n, cols, rows.into_iter().flatten().collect())
        .map_err(|e| Error::CorruptPack(format!("{what}: {e}")))
}

impl SteeringPack {
    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        let file = PackFile {
            format_version: FORMAT_VERSION,
            model_id: self.model_id.clone(),
            layer_index: self.layer_index,
            hidden_dim: self.hidden_dim(),
            n_components: self.n_components(),
            tau: self.tau,
            languages: self.languages.clone(),
            projection: self.projection.to_rows(),
            projection_pinv: self.projection_pinv.to_rows(),
            probe_weights: self.probe_weights.to_rows(),
            probe_bias: self.probe_bias.to_vec(),
            vectors: self
                .vectors
                .iter()
                .map(|(l, v)| (l.clone(), v.v.to_vec()))
                .collect(),
            vectors_origspace: self
                .vectors_origspace
                .iter()
                .map(|(l, v)| (l.clone(), v.to_vec()))
                .collect(),
            active_dims: self
                .vectors
                .iter()
                .map(|(l, v)| (l.clone(), v.active_dims.clone()))
                .collect(),
            sample_counts: self
                .vectors
                .iter()
                .map(|(l, v)| (l.clone(), v.sample_count))
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::CorruptPack(e.to_string()))?;
        let found = value
            .get("format_version")
            .and_then(|v| v.as_i64())
            .ok_or_else(|| Error::CorruptPack("missing integer format_version".into()))?;
        if found != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found,
                expected: FORMAT_VERSION,
            });
        }
        let f: PackFile =
            serde_json::from_value(value).map_err(|e| Error::CorruptPack(e.to_string()))?;
        let (d, k) = (f.hidden_dim, f.n_components);
        let n_lang = f.languages.len();
        if f.projection.len() != d || f.projection_pinv.len() != k || f.probe_weights.len() != n_lang
        {
            return Err(Error::CorruptPack("matrix row counts disagree with header".into()));
        }
        let mut vectors = BTreeMap::new();
        let mut orig = BTreeMap::new();
        for lang in &f.languages {
            let get = |what: &str, present: bool| {
                if present {
                    Ok(())
                } else {
                    Err(Error::CorruptPack(format!("{what} missing for {lang}")))
                }
            };
            get("vector", f.vectors.contains_key(lang))?;
            get("back-projection", f.vectors_origspace.contains_key(lang))?;
            get("active dims", f.active_dims.contains_key(lang))?;
            get("sample count", f.sample_counts.contains_key(lang))?;
            let corrupt = |e: Error| Error::CorruptPack(format!("{lang}: {e}"));
            vectors.insert(
                lang.clone(),
                LanguageVector {
                    lang: lang.clone(),
                    v: RealVector::new(f.vectors[lang].clone()).map_err(corrupt)?,
                    active_dims: f.active_dims[lang].clone(),
                    sample_count: f.sample_counts[lang],
                },
            );
            orig.insert(
                lang.clone(),
                RealVector::new(f.vectors_origspace[lang].clone()).map_err(corrupt)?,
            );
        }
        let pack = SteeringPack {
            model_id: f.model_id,
            layer_index: f.layer_index,
            tau: f.tau,
            languages: f.languages,
            projection: matrix(f.projection, k, "projection")?,
            projection_pinv: matrix(f.projection_pinv, d, "projection_pinv")?,
            probe_weights: matrix(f.probe_weights, k, "probe_weights")?,
            probe_bias: RealVector::new(f.probe_bias)
                .map_err(|e| Error::CorruptPack(e.to_string()))?,
            vectors,
            vectors_origspace: orig,
        };
        pack.validate()?;
        Ok(pack)
    }
}

pub fn save_pack(pack: &SteeringPack, path: &Path) -> Result<()> {
    fs::write(path, pack.to_json()?)?;
    Ok(())
}

pub fn load_pack(path: &Path) -> Result<SteeringPack> {
    SteeringPack::from_json(&fs::read_to_string(path)?)
}

/// Settings for [`build_pack`].
#[derive(Debug, Clone)]
pub struct PackConfig {
    pub model_id: String,
    pub layer_index: usize,
    pub k: usize,
    pub tau: f64,
    pub probe: ProbeConfig,
}

/// Fit LDA and probe, then derive every language's vector and
/// back-projection.
pub fn build_pack(data: &LabeledEmbeddingSet, cfg: &PackConfig) -> Result<SteeringPack> {
    let p = fit_lda(data, cfg.k)?;
    let probe = fit_linear_probe_with(&p, data, &cfg.probe)?;
    pack_from_parts(data, &p, &probe, cfg)
}

pub fn pack_from_parts(
    data: &LabeledEmbeddingSet,
    p: &LdaProjection,
    probe: &LinearProbe,
    cfg: &PackConfig,
) -> Result<SteeringPack> {
    let mut vectors = BTreeMap::new();
    let mut orig = BTreeMap::new();
    for lang in &p.languages {
        let dims = active_dimensions(probe, lang, cfg.tau)?;
        let v = build_language_vector(p, data, lang, &dims)?;
        orig.insert(lang.clone(), back_project(p, &v)?);
        vectors.insert(lang.clone(), v);
    }
    let pack = SteeringPack {
        model_id: cfg.model_id.clone(),
        layer_index: cfg.layer_index,
        tau: cfg.tau,
        languages: p.languages.clone(),
        projection: p.w.clone(),
        projection_pinv: p.w_pinv.clone(),
        probe_weights: probe.weights.clone(),
        probe_bias: probe.bias.clone(),
        vectors,
        vectors_origspace: orig,
    };
    pack.validate()?;
    Ok(pack)
}
