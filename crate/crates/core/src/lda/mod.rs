// SPDX-License-Identifier: MIT OR Apache-2.0

//! SVD-solver linear discriminant analysis and the linear probe trained on
//! its output.
//!
//! The fit whitens the (regularised) within-class covariance through its SVD,
//! then takes the SVD of the count-weighted, whitened class-mean deviations.
//! The leading right singular vectors, mapped back through the whitening,
//! are the discriminant directions.

mod probe;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use probe::{
    fit_linear_probe, fit_linear_probe_with, fit_softmax, probe_predict, LinearProbe, ProbeConfig,
};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::extraction::HiddenStateRecord;
use crate::numkit::{check_dim, pinv, svd, DenseMatrix, RealVector};

/// Number of LDA components used for the published packs.
pub const DEFAULT_COMPONENTS: usize = 100;

/// Relative ridge added to the within-class covariance before whitening.
pub const SCATTER_RIDGE: f64 = 1e-6;

/// Labelled embeddings with a fixed language order (sorted codes).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbeddingSet {
    ids: Vec<String>,
    vectors: DenseMatrix,
    labels: Vec<usize>,
    languages: Vec<String>,
    counts: Vec<usize>,
}

impl LabeledEmbeddingSet {
    pub fn from_records(records: &[HiddenStateRecord]) -> Result<Self> {
        if let Some(first) = records.first() {
            if records.iter().any(|r| r.layer_index != first.layer_index) {
                return Err(Error::InvalidInput(
                    "records span more than one layer".into(),
                ));
            }
        }
        Self::build(
            records
                .iter()
                .map(|r| (r.sentence_id.clone(), r.lang.clone(), r.vector.as_slice())),
        )
    }

    /// Build from `(lang, vector)` pairs; ids are the pair positions.
    pub fn from_pairs<S: AsRef<str>, V: AsRef<[f64]>>(pairs: &[(S, V)]) -> Result<Self> {
        Self::build(
            pairs
                .iter()
                .enumerate()
                .map(|(i, (l, v))| (i.to_string(), l.as_ref().to_string(), v.as_ref())),
        )
    }

    fn build<'a>(items: impl Iterator<Item = (String, String, &'a [f64])>) -> Result<Self> {
        let items: Vec<_> = items.collect();
        let Some(d) = items.first().map(|(_, _, v)| v.len()) else {
            return Err(Error::InsufficientSamples("no embeddings".into()));
        };
        if d == 0 {
            return Err(Error::InvalidInput("zero-dimensional embeddings".into()));
        }
        let order: BTreeMap<&str, usize> = items
            .iter()
            .map(|(_, l, _)| (l.as_str(), 0))
            .collect::<BTreeMap<_, _>>()
            .into_keys()
            .enumerate()
            .map(|(i, l)| (l, i))
            .collect();
        if order.len() < 2 {
            return Err(Error::InsufficientSamples(
                "need at least two languages".into(),
            ));
        }
        let languages: Vec<String> = order.keys().map(|l| l.to_string()).collect();
        let mut counts = vec![0; languages.len()];
        let mut data = Vec::with_capacity(items.len() * d);
        let mut labels = Vec::with_capacity(items.len());
        let mut ids = Vec::with_capacity(items.len());
        for (id, lang, v) in &items {
            check_dim(d, v.len())?;
            let li = order[lang.as_str()];
            counts[li] += 1;
            labels.push(li);
            ids.push(id.clone());
            data.extend_from_slice(v);
        }
        Ok(Self {
            ids,
            vectors: DenseMatrix::new(items.len(), d, data)?,
            labels,
            languages,
            counts,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// N x d matrix of embeddings, one row per record.
    pub fn vectors(&self) -> &DenseMatrix {
        &self.vectors
    }

    pub fn language_index(&self, lang: &str) -> Option<usize> {
        self.languages.iter().position(|l| l == lang)
    }

    /// Rows belonging to one language, in input order.
    pub fn rows_of(&self, lang: usize) -> impl Iterator<Item = &[f64]> {
        self.labels
            .iter()
            .zip(self.vectors.row_iter())
            .filter(move |(&l, _)| l == lang)
            .map(|(_, r)| r)
    }

    /// Subset by record positions. The language list is kept as is so that
    /// label indices stay comparable; counts are recomputed.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        let mut counts = vec![0; self.languages.len()];
        for &i in idx {
            data.extend_from_slice(self.vectors.row(i));
            counts[self.labels[i]] += 1;
        }
        Ok(Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            vectors: DenseMatrix::new(idx.len(), d, data)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            languages: self.languages.clone(),
            counts,
        })
    }

    fn class_means(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        let mut means = vec![vec![0.0; d]; self.languages.len()];
        for (&l, row) in self.labels.iter().zip(self.vectors.row_iter()) {
            means[l].iter_mut().zip(row).for_each(|(m, x)| *m += x);
        }
        for (m, &n) in means.iter_mut().zip(&self.counts) {
            if n > 0 {
                m.iter_mut().for_each(|x| *x /= n as f64);
            }
        }
        means
    }
}

/// A fitted discriminant projection `z = h^T W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaProjection {
    /// d x k.
    pub w: DenseMatrix,
    /// k x d.
    pub w_pinv: DenseMatrix,
    /// K x k projected per-language means.
    pub class_means: DenseMatrix,
    pub global_mean: RealVector,
    pub k: usize,
    pub languages: Vec<String>,
    /// Squared singular values of the whitened between-class matrix, all
    /// `min(K-1, d)` of them, descending.
    pub discriminant_variances: Vec<f64>,
}

impl LdaProjection {
    pub fn dim(&self) -> usize {
        self.w.rows()
    }

    /// Fraction of discriminant variance carried by the dropped components.
    pub fn unused_variance(&self) -> f64 {
        let total: f64 = self.discriminant_variances.iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        // An empty float sum is -0.0.
        let unused: f64 = self.discriminant_variances.iter().skip(self.k).fold(0.0, |a, b| a + b);
        unused / total
    }

    /// Keep only the leading `k` components.
    pub fn truncate(&self, k: usize) -> Result<Self> {
        let max = self.discriminant_variances.len();
        if k == 0 || k > max {
            return Err(Error::RankError { k, max });
        }
        if k > self.k {
            return Err(Error::RankError { k, max: self.k });
        }
        let w = self.w.take_cols(k);
        Ok(Self {
            w_pinv: pinv(&w)?,
            class_means: self.class_means.take_cols(k),
            w,
            k,
            global_mean: self.global_mean.clone(),
            languages: self.languages.clone(),
            discriminant_variances: self.discriminant_variances.clone(),
        })
    }
}

/// Fit the SVD-solver LDA with `k` components.
pub fn fit_lda(data: &LabeledEmbeddingSet, k: usize) -> Result<LdaProjection> {
    let n_lang = data.languages.len();
    let d = data.dim();
    let max = (n_lang - 1).min(d);
    if k == 0 || k > max {
        return Err(Error::RankError { k, max });
    }
    if let Some((l, n)) = data
        .languages
        .iter()
        .zip(&data.counts)
        .find(|(_, &n)| n < 2)
    {
        return Err(Error::InsufficientSamples(format!(
            "language {l} has {n} sample(s), need at least 2"
        )));
    }
    let n = data.len();
    let means = data.class_means();
    let mut global = vec![0.0; d];
    for row in data.vectors.row_iter() {
        global.iter_mut().zip(row).for_each(|(g, x)| *g += x);
    }
    global.iter_mut().for_each(|g| *g /= n as f64);

    // Within-class covariance, pooled over N - K degrees of freedom.
    let mut sw = DenseMatrix::zeros(d, d);
    let mut dev = vec![0.0; d];
    for (&l, row) in data.labels.iter().zip(data.vectors.row_iter()) {
        dev.iter_mut()
            .zip(row.iter().zip(&means[l]))
            .for_each(|(o, (x, m))| *o = x - m);
        for i in 0..d {
            let a = dev[i];
            if a == 0.0 {
                continue;
            }
            for (o, &b) in sw.row_mut(i)[i..].iter_mut().zip(&dev[i..]) {
                *o += a * b;
            }
        }
    }
    let dof = (n - n_lang).max(1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = sw[(i, j)] / dof;
            sw[(i, j)] = v;
            sw[(j, i)] = v;
        }
    }
    let trace: f64 = (0..d).map(|i| sw[(i, i)]).sum();
    let ridge = if trace > 0.0 {
        SCATTER_RIDGE * trace / d as f64
    } else {
        SCATTER_RIDGE
    };

    // S_w is symmetric PSD, so its SVD is an eigendecomposition.
    let sw_svd = svd(&sw)?;
    let mut whiten = sw_svd.u.clone();
    for j in 0..d {
        let s = 1.0 / (sw_svd.s[j] + ridge).sqrt();
        for i in 0..d {
            whiten[(i, j)] *= s;
        }
    }

    let mut between = DenseMatrix::zeros(n_lang, d);
    for (l, m) in means.iter().enumerate() {
        let w = (data.counts[l] as f64).sqrt();
        let row: Vec<f64> = m.iter().zip(&global).map(|(a, g)| w * (a - g)).collect();
        between.row_mut(l).copy_from_slice(&whiten.vecmat(&row)?);
    }
    let b_svd = svd(&between)?;
    let variances: Vec<f64> = b_svd.s.iter().take(max).map(|s| s * s).collect();

    let mut w = DenseMatrix::zeros(d, k);
    for c in 0..k {
        let dir = whiten.matvec(b_svd.vt.row(c))?;
        let pivot = dir
            .iter()
            .copied()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (i, x) in dir.iter().enumerate() {
            w[(i, c)] = sign * x;
        }
    }

    let mut class_means = DenseMatrix::zeros(n_lang, k);
    for (l, m) in means.iter().enumerate() {
        class_means.row_mut(l).copy_from_slice(&w.vecmat(m)?);
    }
    Ok(LdaProjection {
        w_pinv: pinv(&w)?,
        w,
        class_means,
        global_mean: RealVector::new(global)?,
        k,
        languages: data.languages.clone(),
        discriminant_variances: variances,
    })
}

/// `z = h^T W`.
pub fn project(p: &LdaProjection, h: &RealVector) -> Result<RealVector> {
    check_dim(p.dim(), h.dim())?;
    RealVector::new(p.w.vecmat(h.as_slice())?)
}

/// Project every row of an embedding set; returns N x k.
pub fn project_set(p: &LdaProjection, data: &LabeledEmbeddingSet) -> Result<DenseMatrix> {
    check_dim(p.dim(), data.dim())?;
    data.vectors.matmul(&p.w)
}

/// One row of the component-count sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRow {
    pub k: usize,
    pub accuracy: f64,
    pub unused_variance: f64,
}

/// Sweep settings. When every language has at least `holdout_every`
/// samples, every `holdout_every`-th sample of each language is held out and
/// accuracy is measured on those; otherwise on the training data.
#[derive(Debug, Clone, Copy)]
pub struct SweepConfig {
    pub holdout_every: usize,
    pub probe: ProbeConfig,
    pub exec: Exec,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            holdout_every: 5,
            probe: ProbeConfig::default(),
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSweep {
    pub rows: Vec<ComponentRow>,
    /// True when accuracy comes from held-out samples.
    pub held_out: bool,
}

impl ComponentSweep {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>6}{:>12}{:>10}   ({})\n",
            "k",
            "accuracy",
            "unused",
            if self.held_out { "held-out" } else { "training set" }
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:>6}{:>12.2}{:>10.4}\n",
                r.k,
                100.0 * r.accuracy,
                r.unused_variance
            ));
        }
        out
    }
}

/// Fit, probe and score each candidate component count. The discriminant
/// directions are nested, so one fit at the largest `k` serves every row.
pub fn select_components(
    data: &LabeledEmbeddingSet,
    candidate_ks: &[usize],
    cfg: &SweepConfig,
) -> Result<ComponentSweep> {
    let Some(&k_max) = candidate_ks.iter().max() else {
        return Err(Error::InvalidInput("no candidate component counts".into()));
    };
    let (train, test, held_out) = split(data, cfg.holdout_every)?;
    let full = fit_lda(&train, k_max)?;
    let rows = cfg.exec.try_map(candidate_ks, |&k| {
        let p = full.truncate(k)?;
        let probe = fit_linear_probe_with(&p, &train, &cfg.probe)?;
        let z = project_set(&p, &test)?;
        let hits = z
            .row_iter()
            .zip(test.labels())
            .filter(|(row, &l)| probe.predict_index(row) == l)
            .count();
        Ok::<_, Error>(ComponentRow {
            k,
            accuracy: hits as f64 / test.len() as f64,
            unused_variance: p.unused_variance(),
        })
    })?;
    Ok(ComponentSweep { rows, held_out })
}

fn split(
    data: &LabeledEmbeddingSet,
    every: usize,
) -> Result<(LabeledEmbeddingSet, LabeledEmbeddingSet, bool)> {
    if every < 2 || data.counts.iter().any(|&n| n < every) {
        return Ok((data.clone(), data.clone(), false));
    }
    let mut seen = vec![0usize; data.languages.len()];
    let (mut tr, mut te) = (Vec::new(), Vec::new());
    for (i, &l) in data.labels.iter().enumerate() {
        seen[l] += 1;
        if seen[l] % every == 0 {
            te.push(i);
        } else {
            tr.push(i);
        }
    }
    Ok((data.subset(&tr)?, data.subset(&te)?, true))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class() -> LabeledEmbeddingSet {
        LabeledEmbeddingSet::from_pairs(&[
            ("A", [0.0, 0.0]),
            ("A", [0.0, 1.0]),
            ("B", [4.0, 0.0]),
            ("B", [4.0, 1.0]),
        ])
        .unwrap()
    }

    #[test]
    fn two_class_direction_is_first_axis() {
        let p = fit_lda(&two_class(), 1).unwrap();
        let c = p.w.col(0);
        let norm = (c[0] * c[0] + c[1] * c[1]).sqrt();
        assert!((c[0] / norm - 1.0).abs() < 1e-9);
        assert!((c[1] / norm).abs() < 1e-9);
        assert!(p.class_means[(0, 0)] != p.class_means[(1, 0)]);
        assert_eq!(p.unused_variance(), 0.0);
    }

    #[test]
    fn rank_and_sample_errors() {
        assert!(matches!(
            fit_lda(&two_class(), 2),
            Err(Error::RankError { k: 2, max: 1 })
        ));
        let thin =
            LabeledEmbeddingSet::from_pairs(&[("A", [0.0]), ("A", [1.0]), ("B", [3.0])]).unwrap();
        assert!(matches!(
            fit_lda(&thin, 1),
            Err(Error::InsufficientSamples(_))
        ));
        assert!(LabeledEmbeddingSet::from_pairs(&[("A", [0.0]), ("A", [1.0])]).is_err());
    }

    #[test]
    fn language_order_is_sorted() {
        let s = LabeledEmbeddingSet::from_pairs(&[("fr", [0.0]), ("de", [1.0]), ("fr", [2.0])])
            .unwrap();
        assert_eq!(s.languages(), ["de", "fr"]);
        assert_eq!(s.counts(), [1, 2]);
        assert_eq!(s.labels(), [1, 0, 1]);
    }

    #[test]
    fn project_selects_coordinates() {
        let mut p = fit_lda(&two_class(), 1).unwrap();
        p.w = DenseMatrix::from_rows(&[[1.0], [0.0]]).unwrap();
        let z = project(&p, &RealVector::new(vec![7.0, -3.0]).unwrap()).unwrap();
        assert_eq!(z.as_slice(), [7.0]);
        assert_eq!(project(&p, &RealVector::zeros(2)).unwrap().as_slice(), [0.0]);
        assert!(matches!(
            project(&p, &RealVector::zeros(3)),
            Err(Error::DimError { .. })
        ));
    }

    #[test]
    fn truncation_matches_direct_fit() {
        let pairs: Vec<(&str, [f64; 3])> = vec![
            ("a", [0.0, 0.1, 0.0]),
            ("a", [0.2, 0.0, 0.1]),
            ("a", [0.1, 0.3, 0.2]),
            ("b", [3.0, 0.0, 0.1]),
            ("b", [3.1, 0.2, 0.0]),
            ("b", [2.9, 0.1, 0.3]),
            ("c", [0.0, 2.0, 1.0]),
            ("c", [0.1, 2.2, 0.9]),
            ("c", [0.3, 1.9, 1.2]),
        ];
        let s = LabeledEmbeddingSet::from_pairs(&pairs).unwrap();
        let full = fit_lda(&s, 2).unwrap();
        let one = fit_lda(&s, 1).unwrap();
        let cut = full.truncate(1).unwrap();
        assert!(cut.w.sub(&one.w).unwrap().max_abs() < 1e-12);
        assert!(one.unused_variance() > 0.0 && one.unused_variance() < 1.0);
    }
}
