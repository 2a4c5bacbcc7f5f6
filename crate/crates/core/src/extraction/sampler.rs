// SPDX-License-Identifier: MIT OR Apache-2.0

//! Next-token selection: greedy, or temperature + top-k + nucleus sampling
//! with an optional repetition penalty.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub greedy: bool,
    pub temperature: f64,
    /// 0 keeps the whole vocabulary.
    pub top_k: usize,
    pub top_p: f64,
    /// 1.0 disables the penalty.
    pub repetition_penalty: f64,
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        Self {
            greedy: true,
            temperature: 1.0,
            top_k: 0,
            top_p: 1.0,
            repetition_penalty: 1.0,
        }
    }

    /// Language-confusion profile: top-k 50, top-p 0.9, temperature 0.7.
    pub fn confusion_default() -> Self {
        Self {
            greedy: false,
            temperature: 0.7,
            top_k: 50,
            top_p: 0.9,
            repetition_penalty: 1.0,
        }
    }

    /// Semantic-retention profile: the confusion profile plus a repetition
    /// penalty of 1.5.
    pub fn retention_default() -> Self {
        Self {
            repetition_penalty: 1.5,
            ..Self::confusion_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.greedy && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidInput(
                "temperature must be positive when sampling".into(),
            ));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidInput("top_p must lie in (0, 1]".into()));
        }
        if !(self.repetition_penalty > 0.0 && self.repetition_penalty.is_finite()) {
            return Err(Error::InvalidInput(
                "repetition penalty must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Pick the next token. `history` holds every token seen so far (prompt
    /// and generated) for the repetition penalty.
    pub fn sample<R: Rng + ?Sized>(&self, logits: &[f32], history: &[u32], rng: &mut R) -> u32 {
        let mut scores: Vec<f64> = logits.iter().map(|&l| f64::from(l)).collect();
        if self.repetition_penalty != 1.0 {
            let mut seen = vec![false; scores.len()];
            for &t in history {
                if let Some(s) = seen.get_mut(t as usize) {
                    *s = true;
                }
            }
            for (s, _) in scores.iter_mut().zip(&seen).filter(|(_, &hit)| hit) {
                *s = if *s > 0.0 {
                    *s / self.repetition_penalty
                } else {
                    *s * self.repetition_penalty
                };
            }
        }
        if self.greedy {
            return argmax(&scores) as u32;
        }

        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        if self.top_k > 0 {
            order.truncate(self.top_k);
        }
        let max = scores[order[0]] / self.temperature;
        let mut probs: Vec<f64> = order
            .iter()
            .map(|&i| (scores[i] / self.temperature - max).exp())
            .collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);

        let mut cum = 0.0;
        let mut keep = probs.len();
        for (i, p) in probs.iter().enumerate() {
            cum += p;
            if cum >= self.top_p {
                keep = i + 1;
                break;
            }
        }
        let kept = &probs[..keep];
        let mass: f64 = kept.iter().sum();
        let mut u = rng.random::<f64>() * mass;
        for (i, &p) in kept.iter().enumerate() {
            if u < p {
                return order[i] as u32;
            }
            u -= p;
        }
        order[keep - 1] as u32
    }
}

/// Index of the largest value; lowest index wins ties.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn greedy_picks_lowest_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = SamplerConfig::greedy();
        assert_eq!(s.sample(&[0.0, 2.0, 2.0, 1.0], &[], &mut rng), 1);
    }

    #[test]
    fn repetition_penalty_demotes_seen_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = SamplerConfig {
            repetition_penalty: 3.0,
            ..SamplerConfig::greedy()
        };
        assert_eq!(s.sample(&[2.0, 1.0], &[0], &mut rng), 1);
        // Negative logits get multiplied, i.e. pushed further down.
        assert_eq!(s.sample(&[-1.0, -2.5], &[0], &mut rng), 1);
    }

    #[test]
    fn top_k_one_is_greedy() {
        let s = SamplerConfig {
            top_k: 1,
            ..SamplerConfig::confusion_default()
        };
        let logits = [0.3, 0.1, 0.9, 0.2];
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(s.sample(&logits, &[], &mut rng), 2);
        }
    }

    #[test]
    fn nucleus_excludes_tail() {
        // After softmax the head token holds ~0.9999 of the mass.
        let s = SamplerConfig {
            top_p: 0.9,
            temperature: 1.0,
            top_k: 0,
            ..SamplerConfig::confusion_default()
        };
        let logits = [10.0, 0.0, 0.0, 0.0];
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(s.sample(&logits, &[], &mut rng), 0);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let s = SamplerConfig::confusion_default();
        let logits: Vec<f32> = (0..64).map(|i| (i % 7) as f32 * 0.1).collect();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10).map(|_| s.sample(&logits, &[], &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn validation() {
        assert!(SamplerConfig::confusion_default().validate().is_ok());
        let bad = SamplerConfig {
            temperature: 0.0,
            ..SamplerConfig::confusion_default()
        };
        assert!(bad.validate().is_err());
        let greedy_zero_temp = SamplerConfig {
            temperature: 0.0,
            ..SamplerConfig::greedy()
        };
        assert!(greedy_zero_temp.validate().is_ok());
    }
}
