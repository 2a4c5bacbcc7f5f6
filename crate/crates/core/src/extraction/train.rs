// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic two-language data and a full-backprop trainer for the tiny model.
//!
//! Language `A` emits ids 0..100 and language `B` emits ids 128..228. Half
//! of the tokens follow deterministically from the previous one, and a
//! sequence occasionally switches language for good, as code-switching text
//! does. Training runs in `f64` on a flat parameter buffer (same layout
//! as the `f32` inference model) with Adam.

use std::ops::Range;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tinylm::{gelu, gelu_grad, init_params, Layout, TinyConfig, TinyLm, BOS, LN_EPS};
use super::CorpusRecord;
use crate::error::{Error, Result};
use crate::exec::Exec;

pub const LANG_A: &str = "A";
pub const LANG_B: &str = "B";
pub const RANGE_A: Range<u32> = 0..100;
pub const RANGE_B: Range<u32> = 128..228;

/// Token-id range of a synthetic language code.
pub fn synthetic_range(lang: &str) -> Option<Range<u32>> {
    match lang {
        LANG_A => Some(RANGE_A),
        LANG_B => Some(RANGE_B),
        _ => None,
    }
}

/// Probability that a token is the fixed successor of the previous one
/// rather than a uniform draw. Gives each language some content to model.
pub const SUCCESSOR_PROB: f64 = 0.5;

/// `len` tokens starting in `lang`. Before each token the language flips
/// with probability `switch_prob` and stays flipped. No BOS.
pub fn synthetic_tokens<R: Rng + ?Sized>(
    lang: &str,
    len: usize,
    switch_prob: f64,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let (mut own, mut other) = match lang {
        LANG_A => (RANGE_A, RANGE_B),
        LANG_B => (RANGE_B, RANGE_A),
        _ => return Err(Error::UnknownLanguage(lang.to_owned())),
    };
    let mut prev: Option<u32> = None;
    Ok((0..len)
        .map(|_| {
            if rng.random::<f64>() < switch_prob {
                std::mem::swap(&mut own, &mut other);
            }
            let t = match prev {
                Some(p) if rng.random::<f64>() < SUCCESSOR_PROB => own.start + successor(p),
                _ => rng.random_range(own.clone()),
            };
            prev = Some(t);
            t
        })
        .collect())
}

/// Successor index (within either range) of token `t`: a fixed permutation
/// shared by both languages.
pub fn successor(t: u32) -> u32 {
    let idx = if RANGE_B.contains(&t) {
        t - RANGE_B.start
    } else {
        t - RANGE_A.start
    };
    (7 * idx + 3) % 100
}

/// A parallel-shaped synthetic corpus: ids `synth-0000..`, one sentence per
/// language per id, text decoded with the tiny tokenizer.
pub fn synthetic_corpus(
    n_per_lang: usize,
    len: usize,
    switch_prob: f64,
    seed: u64,
) -> Vec<CorpusRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * n_per_lang);
    for i in 0..n_per_lang {
        for lang in [LANG_A, LANG_B] {
            let ids = synthetic_tokens(lang, len, switch_prob, &mut rng).expect("known language");
            out.push(CorpusRecord {
                id: format!("synth-{i:04}"),
                lang: lang.to_owned(),
                text: super::tinylm::decode_ids(&ids),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: TinyConfig,
    pub init_seed: u64,
    pub data_seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    /// Tokens per training sequence, BOS included.
    pub seq_len: usize,
    pub learning_rate: f64,
    pub switch_prob: f64,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: TinyConfig::default(),
            init_seed: 0,
            data_seed: 1,
            steps: 150,
            batch_size: 16,
            seq_len: 64,
            learning_rate: 1e-2,
            switch_prob: 0.05,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    /// Stable key for caching trained weights.
    pub fn fingerprint(&self) -> String {
        let m = &self.model;
        format!(
            "v{}d{}l{}h{}f{}p{}-s{}-{}-n{}b{}t{}-lr{:e}-sw{:e}",
            m.vocab,
            m.d_model,
            m.n_layers,
            m.n_heads,
            m.d_ff,
            m.max_positions,
            self.init_seed,
            self.data_seed,
            self.steps,
            self.batch_size,
            self.seq_len,
            self.learning_rate,
            self.switch_prob
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: TinyLm,
    /// Mean next-token cross-entropy per step.
    pub losses: Vec<f64>,
    pub elapsed: Duration,
}

/// Train the tiny model on the two synthetic languages.
pub fn train_bilingual(cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.model.validate()?;
    if cfg.seq_len < 2 || cfg.seq_len > cfg.model.max_positions {
        return Err(Error::InvalidInput(format!(
            "seq_len {} must lie in 2..={}",
            cfg.seq_len, cfg.model.max_positions
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidInput("batch_size must be positive".into()));
    }
    let start = Instant::now();
    let layout = Layout::new(&cfg.model);
    let mut params = init_params(&cfg.model, cfg.init_seed);
    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    let mut losses = Vec::with_capacity(cfg.steps);

    for _ in 0..cfg.steps {
        let batch: Vec<Vec<u32>> = (0..cfg.batch_size)
            .map(|_| {
                let lang = if rng.random::<bool>() { LANG_A } else { LANG_B };
                let mut seq = vec![BOS];
                seq.extend(
                    synthetic_tokens(lang, cfg.seq_len - 1, cfg.switch_prob, &mut rng)
                        .expect("known language"),
                );
                seq
            })
            .collect();
        let per_seq = cfg
            .exec
            .map(&batch, |seq| loss_and_grad(&cfg.model, &layout, &params, seq));
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        let mut count = 0usize;
        for (l, g, n) in per_seq {
            loss += l;
            count += n;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let inv = 1.0 / count as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        losses.push(loss * inv);
        adam.step(&mut params, &grad);
    }

    let model = TinyLm::from_params(
        format!("tiny-trained-{}", cfg.fingerprint()),
        cfg.model,
        &params,
    )?;
    Ok(TrainReport {
        model,
        losses,
        elapsed: start.elapsed(),
    })
}

pub(crate) struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Forward / backward over one sequence
// ---------------------------------------------------------------------------

struct LayerCache {
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    a1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// head-major `H x T x T`, lower triangle used.
    probs: Vec<f64>,
    o: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    a2: Vec<f64>,
    f_pre: Vec<f64>,
    f_act: Vec<f64>,
}

/// Summed next-token cross-entropy, its gradient and the number of predicted
/// positions.
pub(crate) fn loss_and_grad(
    c: &TinyConfig,
    lay: &Layout,
    p: &[f64],
    tokens: &[u32],
) -> (f64, Vec<f64>, usize) {
    let t_len = tokens.len();
    let d = c.d_model;
    let ff = c.d_ff;
    let nh = c.n_heads;
    let hd = c.head_dim();
    let v_len = c.vocab;
    let scale = 1.0 / (hd as f64).sqrt();

    // Embeddings.
    let mut x = vec![0.0; t_len * d];
    for (t, &tok) in tokens.iter().enumerate() {
        let e = &p[lay.tok_emb + tok as usize * d..][..d];
        let pe = &p[lay.pos_emb + t * d..][..d];
        for j in 0..d {
            x[t * d + j] = e[j] + pe[j];
        }
    }

    let mut caches = Vec::with_capacity(c.n_layers);
    for b in &lay.blocks {
        let (a1, xhat1, rstd1) = ln_forward(&x, d, &p[b.ln1_g..][..d], &p[b.ln1_b..][..d]);
        let q = mm(&a1, t_len, d, &p[b.wq..][..d * d], d);
        let k = mm(&a1, t_len, d, &p[b.wk..][..d * d], d);
        let v = mm(&a1, t_len, d, &p[b.wv..][..d * d], d);
        let mut probs = vec![0.0; nh * t_len * t_len];
        let mut o = vec![0.0; t_len * d];
        for h in 0..nh {
            for t in 0..t_len {
                let row = &mut probs[(h * t_len + t) * t_len..][..t_len];
                let qh = &q[t * d + h * hd..][..hd];
                let mut max = f64::NEG_INFINITY;
                for s in 0..=t {
                    let kh = &k[s * d + h * hd..][..hd];
                    row[s] = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
                    max = max.max(row[s]);
                }
                let mut sum = 0.0;
                for r in row.iter_mut().take(t + 1) {
                    *r = (*r - max).exp();
                    sum += *r;
                }
                for s in 0..=t {
                    row[s] /= sum;
                    let vh = &v[s * d + h * hd..][..hd];
                    let out = &mut o[t * d + h * hd..][..hd];
                    for (oi, vi) in out.iter_mut().zip(vh) {
                        *oi += row[s] * vi;
                    }
                }
            }
        }
        let attn = mm(&o, t_len, d, &p[b.wo..][..d * d], d);
        x.iter_mut().zip(&attn).for_each(|(xi, ai)| *xi += ai);

        let (a2, xhat2, rstd2) = ln_forward(&x, d, &p[b.ln2_g..][..d], &p[b.ln2_b..][..d]);
        let mut f_pre = mm(&a2, t_len, d, &p[b.w1..][..d * ff], ff);
        for t in 0..t_len {
            for j in 0..ff {
                f_pre[t * ff + j] += p[b.b1 + j];
            }
        }
        let f_act: Vec<f64> = f_pre.iter().map(|&z| gelu(z)).collect();
        let y = mm(&f_act, t_len, ff, &p[b.w2..][..ff * d], d);
        for t in 0..t_len {
            for j in 0..d {
                x[t * d + j] += y[t * d + j] + p[b.b2 + j];
            }
        }
        caches.push(LayerCache {
            xhat1,
            rstd1,
            a1,
            q,
            k,
            v,
            probs,
            o,
            xhat2,
            rstd2,
            a2,
            f_pre,
            f_act,
        });
    }

    let (af, xhatf, rstdf) = ln_forward(&x, d, &p[lay.lnf_g..][..d], &p[lay.lnf_b..][..d]);
    let logits = mm(&af, t_len, d, &p[lay.unembed..][..d * v_len], v_len);

    // Loss and dlogits.
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; t_len * v_len];
    for t in 0..t_len - 1 {
        let row = &logits[t * v_len..][..v_len];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let target = tokens[t + 1] as usize;
        loss += sum.ln() + max - row[target];
        let drow = &mut dlogits[t * v_len..][..v_len];
        for (dz, z) in drow.iter_mut().zip(row) {
            *dz = (z - max).exp() / sum;
        }
        drow[target] -= 1.0;
    }

    let mut g = vec![0.0; p.len()];
    mm_tn_acc(&af, t_len, d, &dlogits, v_len, &mut g[lay.unembed..][..d * v_len]);
    let daf = mm_nt(&dlogits, t_len, v_len, &p[lay.unembed..][..d * v_len], d);
    let mut dx = ln_backward(
        &daf,
        &xhatf,
        &rstdf,
        d,
        &p[lay.lnf_g..][..d],
        &mut g,
        lay.lnf_g,
        lay.lnf_b,
    );

    for (b, cache) in lay.blocks.iter().zip(&caches).rev() {
        // MLP residual branch.
        for t in 0..t_len {
            for j in 0..d {
                g[b.b2 + j] += dx[t * d + j];
            }
        }
        mm_tn_acc(&cache.f_act, t_len, ff, &dx, d, &mut g[b.w2..][..ff * d]);
        let mut df = mm_nt(&dx, t_len, d, &p[b.w2..][..ff * d], ff);
        for (dfi, &z) in df.iter_mut().zip(&cache.f_pre) {
            *dfi *= gelu_grad(z);
        }
        for t in 0..t_len {
            for j in 0..ff {
                g[b.b1 + j] += df[t * ff + j];
            }
        }
        mm_tn_acc(&cache.a2, t_len, d, &df, ff, &mut g[b.w1..][..d * ff]);
        let da2 = mm_nt(&df, t_len, ff, &p[b.w1..][..d * ff], d);
        let dln2 = ln_backward(
            &da2,
            &cache.xhat2,
            &cache.rstd2,
            d,
            &p[b.ln2_g..][..d],
            &mut g,
            b.ln2_g,
            b.ln2_b,
        );
        dx.iter_mut().zip(&dln2).for_each(|(a, b)| *a += b);

        // Attention residual branch.
        mm_tn_acc(&cache.o, t_len, d, &dx, d, &mut g[b.wo..][..d * d]);
        let d_o = mm_nt(&dx, t_len, d, &p[b.wo..][..d * d], d);
        let mut dq = vec![0.0; t_len * d];
        let mut dk = vec![0.0; t_len * d];
        let mut dv = vec![0.0; t_len * d];
        let mut dp = vec![0.0; t_len];
        for h in 0..nh {
            for t in 0..t_len {
                let row = &cache.probs[(h * t_len + t) * t_len..][..t_len];
                let doh = &d_o[t * d + h * hd..][..hd];
                let mut weighted = 0.0;
                for s in 0..=t {
                    let vh = &cache.v[s * d + h * hd..][..hd];
                    dp[s] = doh.iter().zip(vh).map(|(a, b)| a * b).sum();
                    weighted += row[s] * dp[s];
                    let dvh = &mut dv[s * d + h * hd..][..hd];
                    for (dvi, &doi) in dvh.iter_mut().zip(doh) {
                        *dvi += row[s] * doi;
                    }
                }
                for s in 0..=t {
                    let ds = row[s] * (dp[s] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for j in 0..hd {
                        dq[t * d + h * hd + j] += ds * cache.k[s * d + h * hd + j];
                        dk[s * d + h * hd + j] += ds * cache.q[t * d + h * hd + j];
                    }
                }
            }
        }
        mm_tn_acc(&cache.a1, t_len, d, &dq, d, &mut g[b.wq..][..d * d]);
        mm_tn_acc(&cache.a1, t_len, d, &dk, d, &mut g[b.wk..][..d * d]);
        mm_tn_acc(&cache.a1, t_len, d, &dv, d, &mut g[b.wv..][..d * d]);
        let mut da1 = mm_nt(&dq, t_len, d, &p[b.wq..][..d * d], d);
        let da1k = mm_nt(&dk, t_len, d, &p[b.wk..][..d * d], d);
        let da1v = mm_nt(&dv, t_len, d, &p[b.wv..][..d * d], d);
        for ((a, bk), bv) in da1.iter_mut().zip(&da1k).zip(&da1v) {
            *a += bk + bv;
        }
        let dln1 = ln_backward(
            &da1,
            &cache.xhat1,
            &cache.rstd1,
            d,
            &p[b.ln1_g..][..d],
            &mut g,
            b.ln1_g,
            b.ln1_b,
        );
        dx.iter_mut().zip(&dln1).for_each(|(a, b)| *a += b);
    }

    for (t, &tok) in tokens.iter().enumerate() {
        for j in 0..d {
            g[lay.tok_emb + tok as usize * d + j] += dx[t * d + j];
            g[lay.pos_emb + t * d + j] += dx[t * d + j];
        }
    }
    (loss, g, t_len - 1)
}

/// Logits of the `f64` training forward, for cross-checking the inference path.
#[cfg(test)]
pub(crate) fn forward_logits(c: &TinyConfig, p: &[f64], tokens: &[u32]) -> Vec<f64> {
    // Loss gradient w.r.t. logits is softmax - onehot, so recover logits by
    // running a forward through a copy of the loss routine would be indirect;
    // instead replicate the final projection here on top of a plain forward.
    let lay = Layout::new(c);
    let d = c.d_model;
    let t_len = tokens.len();
    let mut x = vec![0.0; t_len * d];
    for (t, &tok) in tokens.iter().enumerate() {
        for j in 0..d {
            x[t * d + j] = p[lay.tok_emb + tok as usize * d + j] + p[lay.pos_emb + t * d + j];
        }
    }
    let hd = c.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    for b in &lay.blocks {
        let (a1, _, _) = ln_forward(&x, d, &p[b.ln1_g..][..d], &p[b.ln1_b..][..d]);
        let q = mm(&a1, t_len, d, &p[b.wq..][..d * d], d);
        let k = mm(&a1, t_len, d, &p[b.wk..][..d * d], d);
        let v = mm(&a1, t_len, d, &p[b.wv..][..d * d], d);
        let mut o = vec![0.0; t_len * d];
        for h in 0..c.n_heads {
            for t in 0..t_len {
                let s_scores: Vec<f64> = (0..=t)
                    .map(|s| {
                        (0..hd)
                            .map(|j| q[t * d + h * hd + j] * k[s * d + h * hd + j])
                            .sum::<f64>()
                            * scale
                    })
                    .collect();
                let max = s_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s_scores.iter().map(|z| (z - max).exp()).collect();
                let sum: f64 = e.iter().sum();
                for (s, w) in e.iter().enumerate() {
                    for j in 0..hd {
                        o[t * d + h * hd + j] += w / sum * v[s * d + h * hd + j];
                    }
                }
            }
        }
        let attn = mm(&o, t_len, d, &p[b.wo..][..d * d], d);
        x.iter_mut().zip(&attn).for_each(|(xi, ai)| *xi += ai);
        let (a2, _, _) = ln_forward(&x, d, &p[b.ln2_g..][..d], &p[b.ln2_b..][..d]);
        let mut f = mm(&a2, t_len, d, &p[b.w1..][..d * c.d_ff], c.d_ff);
        for t in 0..t_len {
            for j in 0..c.d_ff {
                f[t * c.d_ff + j] = gelu(f[t * c.d_ff + j] + p[b.b1 + j]);
            }
        }
        let y = mm(&f, t_len, c.d_ff, &p[b.w2..][..c.d_ff * d], d);
        for t in 0..t_len {
            for j in 0..d {
                x[t * d + j] += y[t * d + j] + p[b.b2 + j];
            }
        }
    }
    let (af, _, _) = ln_forward(&x, d, &p[lay.lnf_g..][..d], &p[lay.lnf_b..][..d]);
    mm(&af, t_len, d, &p[lay.unembed..][..d * c.vocab], c.vocab)
}

fn ln_forward(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..][..d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * g[j] + b[j];
        }
    }
    (y, xhat, rstd)
}

#[allow(clippy::too_many_arguments)]
fn ln_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    d: usize,
    gain: &[f64],
    grads: &mut [f64],
    g_off: usize,
    b_off: usize,
) -> Vec<f64> {
    let rows = rstd.len();
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..][..d];
        let xr = &xhat[r * d..][..d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_x = 0.0;
        for j in 0..d {
            grads[g_off + j] += dyr[j] * xr[j];
            grads[b_off + j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_x += dxhat[j] * xr[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_x /= d as f64;
        for j in 0..d {
            dx[r * d + j] = rstd[r] * (dxhat[j] - mean_dxhat - xr[j] * mean_dxhat_x);
        }
    }
    dx
}

/// `a (m x k) * b (k x n)`.
fn mm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..][..n];
        for (p, &aip) in a[i * k..][..k].iter().enumerate() {
            for (o, &bpj) in row.iter_mut().zip(&b[p * n..][..n]) {
                *o += aip * bpj;
            }
        }
    }
    out
}

/// `out += a^T b` for `a (m x k)`, `b (m x n)`.
fn mm_tn_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..][..n];
        for (p, &aip) in a[i * k..][..k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (o, &bij) in out[p * n..][..n].iter_mut().zip(brow) {
                *o += aip * bij;
            }
        }
    }
}

/// `a (m x n) * b^T` for `b (k x n)`.
fn mm_nt(a: &[f64], m: usize, n: usize, b: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..][..n];
        for p in 0..k {
            out[i * k + p] = arow.iter().zip(&b[p * n..][..n]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::ModelAdapter;
    use rand_distr::{Distribution, Normal};

    fn small() -> TinyConfig {
        TinyConfig {
            vocab: 12,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            max_positions: 8,
        }
    }

    fn noisy_params(c: &TinyConfig, seed: u64) -> Vec<f64> {
        let mut p = init_params(c, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let n = Normal::new(0.0, 0.4).unwrap();
        p.iter_mut().for_each(|x| *x += n.sample(&mut rng));
        p
    }

    #[test]
    fn gradient_matches_central_differences() {
        let c = small();
        let lay = Layout::new(&c);
        let p = noisy_params(&c, 3);
        let tokens = [0u32, 5, 3, 11, 7, 2];
        let (_, grad, n) = loss_and_grad(&c, &lay, &p, &tokens);
        assert_eq!(n, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // Every tensor kind gets probed: sample indices across the buffer,
        // plus the embedding rows actually used.
        let mut idx: Vec<usize> = (0..300).map(|_| rng.random_range(0..lay.total)).collect();
        idx.push(lay.tok_emb + 5 * c.d_model + 1);
        idx.push(lay.pos_emb + 3 * c.d_model + 2);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for &i in &idx {
            let mut pp = p.clone();
            pp[i] += h;
            let (lp, _, _) = loss_and_grad(&c, &lay, &pp, &tokens);
            pp[i] -= 2.0 * h;
            let (lm, _, _) = loss_and_grad(&c, &lay, &pp, &tokens);
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - grad[i]).abs() / (1e-6 + fd.abs().max(grad[i].abs()));
            worst = worst.max(err);
        }
        assert!(worst < 1e-5, "worst relative gradient error {worst}");
    }

    #[test]
    fn training_forward_matches_inference() {
        let c = small();
        let p = noisy_params(&c, 5);
        let tokens = [1u32, 4, 9, 0, 3];
        let reference = forward_logits(&c, &p, &tokens);
        let model = TinyLm::from_params("t".into(), c, &p).unwrap();
        let out = model.forward(&tokens, &[], None).unwrap();
        for (t, row) in out.logits.iter().enumerate() {
            for (j, &z) in row.iter().enumerate() {
                let r = reference[t * c.vocab + j];
                assert!((f64::from(z) - r).abs() < 1e-4 * (1.0 + r.abs()));
            }
        }
    }

    #[test]
    fn synthetic_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = synthetic_tokens(LANG_A, 500, 0.0, &mut rng).unwrap();
        assert!(a.iter().all(|t| RANGE_A.contains(t)));
        let b = synthetic_tokens(LANG_B, 500, 0.0, &mut rng).unwrap();
        assert!(b.iter().all(|t| RANGE_B.contains(t)));
        let mixed = synthetic_tokens(LANG_A, 2000, 0.5, &mut rng).unwrap();
        let in_b = mixed.iter().filter(|t| RANGE_B.contains(t)).count();
        assert!(in_b > 800 && in_b < 1200);
        // Switches persist: language changes happen about switch_prob * len times.
        let sticky = synthetic_tokens(LANG_A, 4000, 0.02, &mut rng).unwrap();
        let changes = sticky
            .windows(2)
            .filter(|w| RANGE_A.contains(&w[0]) != RANGE_A.contains(&w[1]))
            .count();
        assert!((40..=120).contains(&changes), "{changes}");
        let follow = a.windows(2).filter(|w| w[1] == successor(w[0])).count();
        let expect = 499.0 * (SUCCESSOR_PROB + (1.0 - SUCCESSOR_PROB) / 100.0);
        assert!((follow as f64 - expect).abs() < 60.0, "{follow}");
        assert!(synthetic_tokens("C", 3, 0.0, &mut rng).is_err());
        let corpus = synthetic_corpus(3, 10, 0.0, 7);
        assert_eq!(corpus.len(), 6);
        assert_eq!(corpus[0].id, corpus[1].id);
        assert_eq!(corpus, synthetic_corpus(3, 10, 0.0, 7));
    }

    #[test]
    fn short_training_reduces_loss() {
        let cfg = TrainConfig {
            steps: 80,
            batch_size: 4,
            seq_len: 24,
            ..TrainConfig::default()
        };
        let rep = train_bilingual(&cfg).unwrap();
        let first = rep.losses[0];
        let last = *rep.losses.last().unwrap();
        // Uniform over 256 ids is ln 256 = 5.55; the task optimum is ~ln 100.
        assert!(first > 5.0);
        assert!(last < first - 0.3, "{first} -> {last}");
        let again = train_bilingual(&cfg).unwrap();
        assert_eq!(rep.losses, again.losses);
        assert_eq!(rep.model.params(), again.model.params());
    }
}
