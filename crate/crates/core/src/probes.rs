// SPDX-License-Identifier: MIT OR Apache-2.0

//! Representation analysis: cross-lingual alignment, KNN and linear-probe
//! language identification, correlation statistics.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::extraction::HiddenStateRecord;
use crate::lda::{fit_softmax, ProbeConfig};
use crate::numkit::{check_dim, cosine, pearson, pearson_p_value, DenseMatrix, RealVector};

/// Pooled states keyed by layer, sentence id and language.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParallelCorpusIndex {
    layers: BTreeMap<usize, BTreeMap<String, BTreeMap<String, RealVector>>>,
}

impl ParallelCorpusIndex {
    pub fn from_records(records: &[HiddenStateRecord]) -> Result<Self> {
        let mut idx = Self::default();
        for r in records {
            let slot = idx
                .layers
                .entry(r.layer_index)
                .or_default()
                .entry(r.sentence_id.clone())
                .or_default();
            if slot.insert(r.lang.clone(), r.vector.clone()).is_some() {
                return Err(Error::InvalidInput(format!(
                    "duplicate record ({}, {}) at layer {}",
                    r.sentence_id, r.lang, r.layer_index
                )));
            }
        }
        Ok(idx)
    }

    pub fn layers(&self) -> Vec<usize> {
        self.layers.keys().copied().collect()
    }

    pub fn languages(&self, layer: usize) -> Vec<String> {
        self.layers
            .get(&layer)
            .into_iter()
            .flat_map(|ids| ids.values().flat_map(|m| m.keys().cloned()))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSimilarity {
    pub lang_a: String,
    pub lang_b: String,
    pub mean: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub layer: usize,
    pub pairs: Vec<PairSimilarity>,
    /// Mean over every (sentence, language pair) cosine.
    pub mean: f64,
    /// Population standard deviation of the same values.
    pub std: f64,
    /// Sentence/pair combinations with a missing or zero-norm state.
    pub skipped: usize,
}

impl AlignmentReport {
    pub fn to_table(&self) -> String {
        let mut out = format!("layer {}\n{:<8}{:<8}{:>8}{:>10}\n", self.layer, "a", "b", "n", "cosine");
        for p in &self.pairs {
            let _ = writeln!(out, "{:<8}{:<8}{:>8}{:>10.4}", p.lang_a, p.lang_b, p.n, p.mean);
        }
        let _ = writeln!(
            out,
            "overall mean {:.4} std {:.4} (skipped {})",
            self.mean, self.std, self.skipped
        );
        out
    }
}

/// Mean cosine between parallel sentences for every language pair.
pub fn alignment_similarity(index: &ParallelCorpusIndex, layer: usize) -> Result<AlignmentReport> {
    let langs = index.languages(layer);
    if langs.len() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "layer {layer} has {} language(s), need 2",
            langs.len()
        )));
    }
    let ids = &index.layers[&layer];
    let mut pairs = Vec::new();
    let mut all = Vec::new();
    let mut skipped = 0;
    for (i, a) in langs.iter().enumerate() {
        for b in &langs[i + 1..] {
            let mut vals = Vec::new();
            for by_lang in ids.values() {
                match (by_lang.get(a), by_lang.get(b)) {
                    (Some(x), Some(y)) => match cosine(x, y) {
                        Ok(c) => vals.push(c),
                        Err(Error::ZeroNorm) => skipped += 1,
                        Err(e) => return Err(e),
                    },
                    _ => skipped += 1,
                }
            }
            if !vals.is_empty() {
                pairs.push(PairSimilarity {
                    lang_a: a.clone(),
                    lang_b: b.clone(),
                    mean: vals.iter().sum::<f64>() / vals.len() as f64,
                    n: vals.len(),
                });
            }
            all.extend(vals);
        }
    }
    if all.is_empty() {
        return Err(Error::InsufficientSamples(
            "no parallel sentence pairs".into(),
        ));
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n;
    Ok(AlignmentReport {
        layer,
        pairs,
        mean,
        std: var.sqrt(),
        skipped,
    })
}

/// Default neighbour count: 256 at 40,800 references, scaled down as
/// `ceil(n / 160)` for smaller sets.
pub fn default_k_nn(n: usize) -> usize {
    n.div_ceil(160).clamp(1, 256)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnReferenceSet {
    vectors: DenseMatrix,
    labels: Vec<String>,
    k_nn: usize,
}

impl KnnReferenceSet {
    /// `k_nn` is clamped to the reference size; `None` picks
    /// [`default_k_nn`].
    pub fn new(vectors: DenseMatrix, labels: Vec<String>, k_nn: Option<usize>) -> Result<Self> {
        if vectors.rows() == 0 {
            return Err(Error::EmptyReference);
        }
        check_dim(vectors.rows(), labels.len())?;
        let n = vectors.rows();
        let k = k_nn.unwrap_or_else(|| default_k_nn(n));
        if k == 0 {
            return Err(Error::InvalidInput("k_nn must be at least 1".into()));
        }
        Ok(Self {
            vectors,
            labels,
            k_nn: k.min(n),
        })
    }

    pub fn from_records(records: &[HiddenStateRecord], k_nn: Option<usize>) -> Result<Self> {
        let Some(first) = records.first() else {
            return Err(Error::EmptyReference);
        };
        let d = first.vector.dim();
        let mut data = Vec::with_capacity(records.len() * d);
        for r in records {
            check_dim(d, r.vector.dim())?;
            data.extend_from_slice(&r.vector);
        }
        let labels = records.iter().map(|r| r.lang.clone()).collect();
        Self::new(DenseMatrix::new(records.len(), d, data)?, labels, k_nn)
    }

    pub fn k_nn(&self) -> usize {
        self.k_nn
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn languages(&self) -> BTreeSet<&str> {
        self.labels.iter().map(String::as_str).collect()
    }

    pub fn predict(&self, query: &[f64]) -> Result<String> {
        check_dim(self.vectors.cols(), query.len())?;
        let mut dist: Vec<(f64, usize)> = self
            .vectors
            .row_iter()
            .enumerate()
            .map(|(i, r)| {
                let d: f64 = r.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, i)
            })
            .collect();
        let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        let k = self.k_nn;
        if k < dist.len() {
            dist.select_nth_unstable_by(k - 1, by_key);
            dist.truncate(k);
        }
        // label -> (votes, summed distance)
        let mut votes: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
        for &(d, i) in &dist {
            let v = votes.entry(self.labels[i].as_str()).or_default();
            v.0 += 1;
            v.1 += d;
        }
        let winner = votes
            .iter()
            .min_by(|(la, a), (lb, b)| {
                b.0.cmp(&a.0)
                    .then(a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal))
                    .then(la.cmp(lb))
            })
            .map(|(l, _)| l.to_string())
            .expect("k_nn >= 1");
        Ok(winner)
    }
}

/// Majority label among the `k_nn` nearest references (squared L2, ties in
/// distance broken by reference order). Vote ties go to the label with the
/// smaller summed distance, then the lexicographically smaller code.
pub fn knn_predict(reference: &KnnReferenceSet, query: &RealVector) -> Result<String> {
    reference.predict(query)
}

pub fn knn_predict_batch(
    reference: &KnnReferenceSet,
    queries: &DenseMatrix,
    exec: Exec,
) -> Result<Vec<String>> {
    let rows: Vec<&[f64]> = queries.row_iter().collect();
    exec.try_map(&rows, |q| reference.predict(q))
}

/// Macro-averaged F1 over the classes present in `truth`, in percent.
pub fn macro_f1<S: AsRef<str>>(truth: &[S], pred: &[S]) -> Result<f64> {
    check_dim(truth.len(), pred.len())?;
    let classes: BTreeSet<&str> = truth.iter().map(AsRef::as_ref).collect();
    if classes.is_empty() {
        return Err(Error::InsufficientSamples("no labels".into()));
    }
    let mut total = 0.0;
    for c in &classes {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (t, p) in truth.iter().zip(pred) {
            match (t.as_ref() == *c, p.as_ref() == *c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            total += 2.0 * tp as f64 / denom as f64;
        }
    }
    Ok(100.0 * total / classes.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "method")]
pub enum LidMethod {
    Knn { k_nn: Option<usize> },
    LinearProbe { config: ProbeConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidCell {
    pub layer: usize,
    pub set: String,
    pub macro_f1: f64,
    pub n: usize,
    /// Neighbour count actually used (KNN only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_nn: Option<usize>,
    /// Evaluation records dropped because their language is not in the
    /// reference set.
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidReport {
    pub method: LidMethod,
    pub cells: Vec<LidCell>,
}

impl LidReport {
    /// Sets as rows, layers as columns.
    pub fn to_table(&self) -> String {
        let layers: BTreeSet<usize> = self.cells.iter().map(|c| c.layer).collect();
        let sets: BTreeSet<&str> = self.cells.iter().map(|c| c.set.as_str()).collect();
        let mut out = format!("{:<16}", "set");
        for l in &layers {
            let _ = write!(out, "{:>10}", format!("L{l}"));
        }
        out.push('\n');
        for s in sets {
            let _ = write!(out, "{s:<16}");
            for l in &layers {
                let cell = self.cells.iter().find(|c| c.set == s && c.layer == *l);
                let txt = cell.map_or("-".into(), |c| format!("{:.2}", c.macro_f1));
                let _ = write!(out, "{txt:>10}");
            }
            out.push('\n');
        }
        out
    }
}

/// Macro-F1 language identification for each (layer, evaluation set).
/// References and evaluation records are matched by layer; evaluation
/// languages absent from the reference are dropped.
pub fn lid_report(
    method: LidMethod,
    layers: &[usize],
    reference: &[HiddenStateRecord],
    eval_sets: &[(String, Vec<HiddenStateRecord>)],
    exec: Exec,
) -> Result<LidReport> {
    let mut cells = Vec::new();
    for &layer in layers {
        let refs: Vec<HiddenStateRecord> = reference
            .iter()
            .filter(|r| r.layer_index == layer)
            .cloned()
            .collect();
        if refs.is_empty() {
            return Err(Error::InsufficientSamples(format!(
                "no reference states at layer {layer}"
            )));
        }
        let classify = Classifier::fit(method, &refs)?;
        let known: BTreeSet<&str> = refs.iter().map(|r| r.lang.as_str()).collect();
        for (name, records) in eval_sets {
            let at_layer: Vec<&HiddenStateRecord> =
                records.iter().filter(|r| r.layer_index == layer).collect();
            let kept: Vec<&HiddenStateRecord> = at_layer
                .iter()
                .copied()
                .filter(|r| known.contains(r.lang.as_str()))
                .collect();
            if kept.is_empty() {
                return Err(Error::InsufficientSamples(format!(
                    "set {name} has no overlapping records at layer {layer}"
                )));
            }
            let pred = exec.try_map(&kept, |r| classify.predict(&r.vector))?;
            let truth: Vec<String> = kept.iter().map(|r| r.lang.clone()).collect();
            cells.push(LidCell {
                layer,
                set: name.clone(),
                macro_f1: macro_f1(&truth, &pred)?,
                n: kept.len(),
                k_nn: classify.k_nn(),
                dropped: at_layer.len() - kept.len(),
            });
        }
    }
    Ok(LidReport { method, cells })
}

enum Classifier {
    Knn(KnnReferenceSet),
    Probe(crate::lda::LinearProbe),
}

impl Classifier {
    fn fit(method: LidMethod, refs: &[HiddenStateRecord]) -> Result<Self> {
        match method {
            LidMethod::Knn { k_nn } => Ok(Self::Knn(KnnReferenceSet::from_records(refs, k_nn)?)),
            LidMethod::LinearProbe { config } => {
                let langs: Vec<String> = refs
                    .iter()
                    .map(|r| r.lang.clone())
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                let d = refs[0].vector.dim();
                let mut data = Vec::with_capacity(refs.len() * d);
                let mut labels = Vec::with_capacity(refs.len());
                for r in refs {
                    check_dim(d, r.vector.dim())?;
                    data.extend_from_slice(&r.vector);
                    labels.push(langs.binary_search(&r.lang).expect("collected above"));
                }
                let x = DenseMatrix::new(refs.len(), d, data)?;
                Ok(Self::Probe(fit_softmax(&x, &labels, langs, &config)?))
            }
        }
    }

    fn predict(&self, v: &RealVector) -> Result<String> {
        match self {
            Self::Knn(k) => k.predict(v),
            Self::Probe(p) => {
                check_dim(p.input_dim(), v.dim())?;
                Ok(p.languages[p.predict_index(v)].clone())
            }
        }
    }

    fn k_nn(&self) -> Option<usize> {
        match self {
            Self::Knn(k) => Some(k.k_nn()),
            Self::Probe(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub r: f64,
    pub r2: f64,
    /// Two-sided, from the t distribution with n - 2 degrees of freedom.
    pub p: f64,
    pub n: usize,
}

impl CorrelationReport {
    pub fn to_table(&self) -> String {
        format!(
            "{:>8}{:>10}{:>10}{:>12}\n{:>8}{:>10.4}{:>10.4}{:>12.3e}\n",
            "n", "r", "R2", "p", self.n, self.r, self.r2, self.p
        )
    }
}

/// Pearson r, R² and p-value between paired series.
pub fn correlation_report(similarities: &[f64], scores: &[f64]) -> Result<CorrelationReport> {
    check_dim(similarities.len(), scores.len())?;
    if similarities.len() < 3 {
        return Err(Error::DegenerateSeries(
            "correlation report needs at least three points".into(),
        ));
    }
    let c = pearson(similarities, scores)?;
    Ok(CorrelationReport {
        r: c.r,
        r2: c.r2,
        p: pearson_p_value(c.r, similarities.len())?,
        n: similarities.len(),
    })
}
