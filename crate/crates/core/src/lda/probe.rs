// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single linear layer trained with softmax cross-entropy and Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{project_set, LabeledEmbeddingSet, LdaProjection};
use crate::error::{Error, Result};
use crate::extraction::train::Adam;
use crate::numkit::{check_dim, DenseMatrix, RealVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Logits are `U x + b`; row `l` of `U` belongs to `languages[l]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    /// K x k.
    pub weights: DenseMatrix,
    pub bias: RealVector,
    pub languages: Vec<String>,
    pub training: ProbeConfig,
}

impl LinearProbe {
    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .row_iter()
            .zip(self.bias.iter())
            .map(|(u, b)| u.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b)
            .collect()
    }

    /// Argmax of the logits; the lowest index wins ties.
    pub fn predict_index(&self, x: &[f64]) -> usize {
        let logits = self.logits(x);
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate().skip(1) {
            if v > logits[best] {
                best = i;
            }
        }
        best
    }

    /// Fraction of rows whose prediction equals the label.
    pub fn accuracy(&self, x: &DenseMatrix, labels: &[usize]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        let hits = x
            .row_iter()
            .zip(labels)
            .filter(|(r, &l)| self.predict_index(r) == l)
            .count();
        hits as f64 / labels.len() as f64
    }
}

pub fn probe_predict(probe: &LinearProbe, z: &RealVector) -> Result<String> {
    check_dim(probe.input_dim(), z.dim())?;
    Ok(probe.languages[probe.predict_index(z.as_slice())].clone())
}

/// Probe on projected states with the default regimen, overriding epochs
/// and seed.
pub fn fit_linear_probe(
    p: &LdaProjection,
    data: &LabeledEmbeddingSet,
    epochs: usize,
    seed: u64,
) -> Result<LinearProbe> {
    let cfg = ProbeConfig {
        epochs,
        seed,
        ..ProbeConfig::default()
    };
    fit_linear_probe_with(p, data, &cfg)
}

pub fn fit_linear_probe_with(
    p: &LdaProjection,
    data: &LabeledEmbeddingSet,
    cfg: &ProbeConfig,
) -> Result<LinearProbe> {
    if data.is_empty() {
        return Err(Error::InsufficientSamples("no samples to probe".into()));
    }
    if data.languages() != p.languages.as_slice() {
        return Err(Error::InvalidInput(
            "probe data languages differ from the projection".into(),
        ));
    }
    let z = project_set(p, data)?;
    fit_softmax(&z, data.labels(), data.languages().to_vec(), cfg)
}

/// Train a softmax classifier on arbitrary features. Weights start at zero;
/// features are centred internally and the centring is folded into the bias,
/// so the returned probe applies to raw features.
pub fn fit_softmax(
    features: &DenseMatrix,
    labels: &[usize],
    languages: Vec<String>,
    cfg: &ProbeConfig,
) -> Result<LinearProbe> {
    let (n, k) = features.shape();
    let n_cls = languages.len();
    if n == 0 || labels.len() != n {
        return Err(Error::InsufficientSamples(
            "features and labels must be non-empty and aligned".into(),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_cls) {
        return Err(Error::InvalidInput(format!("label {bad} out of range")));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidInput(
            "probe batch size and learning rate must be positive".into(),
        ));
    }

    let mut mean = vec![0.0; k];
    for row in features.row_iter() {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centred = features.clone();
    for i in 0..n {
        centred
            .row_mut(i)
            .iter_mut()
            .zip(&mean)
            .for_each(|(x, m)| *x -= m);
    }

    // params = [U row-major | b]
    let n_w = n_cls * k;
    let mut params = vec![0.0; n_w + n_cls];
    let mut grad = vec![0.0; params.len()];
    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut logits = vec![0.0; n_cls];

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let x = centred.row(i);
                for (c, out) in logits.iter_mut().enumerate() {
                    let u = &params[c * k..(c + 1) * k];
                    *out = u.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + params[n_w + c];
                }
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
                for c in 0..n_cls {
                    let p = (logits[c] - max).exp() / z;
                    let g = p - if c == labels[i] { 1.0 } else { 0.0 };
                    grad[c * k..(c + 1) * k]
                        .iter_mut()
                        .zip(x)
                        .for_each(|(o, xv)| *o += g * xv);
                    grad[n_w + c] += g;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            adam.step(&mut params, &grad);
        }
    }

    let weights = DenseMatrix::new(n_cls, k, params[..n_w].to_vec())?;
    let shift = weights.matvec(&mean)?;
    let bias: Vec<f64> = params[n_w..].iter().zip(&shift).map(|(b, s)| b - s).collect();
    Ok(LinearProbe {
        weights,
        bias: RealVector::new(bias)?,
        languages,
        training: *cfg,
    })
}
