// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use langsteer::confusion::{
    judge_all, lcpr, ReferenceDetector, ResponseRecord, ScoreTable, UnicodeScriptTable,
};
use langsteer::extraction::corpus::{read_jsonl, write_jsonl};
use langsteer::extraction::tinylm::{decode_ids, TinyLm};
use langsteer::extraction::train::{
    synthetic_corpus, synthetic_tokens, train_bilingual, TrainConfig, LANG_A, LANG_B, RANGE_B,
};
use langsteer::extraction::{
    extract_corpus, generate, CorpusRecord, ExtractOptions, GenerationRequest, HiddenStateRecord,
    LayerTap, ModelAdapter, PoolMode, SamplerConfig,
};
use langsteer::langvec::{
    build_pack, load_pack, make_shift_vector, save_pack, PackConfig, ShiftMode, SteeringPack,
};
use langsteer::lda::{
    fit_lda, fit_linear_probe, project_set, LabeledEmbeddingSet, ProbeConfig,
};
use langsteer::numkit::{pearson, pinv, DenseMatrix, RealVector};
use langsteer::probes::{alignment_similarity, knn_predict_batch, KnnReferenceSet, ParallelCorpusIndex};
use langsteer::steer::{
    generate_responses, steered_generate_with_capture, InjectionConfig, InjectionHook,
    SteerPrompt, SteerSettings, Strategy,
};
use langsteer::{Error, Exec};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("LDA matches generalized-eigenproblem oracle", lda_oracle),
        ("Moore-Penrose identities and round-trip", moore_penrose),
        ("alpha = 0 identity and coverage traces", injection_identity),
        ("shift-vector laws", shift_laws),
        ("synthetic end-to-end steering A -> B", end_to_end),
        ("KNN matches exhaustive scan", knn_oracle),
        ("confusion metric fixtures", metric_fixtures),
        ("linear probe training", probe_training),
        ("statistics", statistics),
        ("persistence round-trips", persistence),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} [{secs:.1}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::new(rows, cols, (0..rows * cols).map(|_| normal(rng)).collect()).unwrap()
}

fn to_na(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

// ---------------------------------------------------------------- 1

/// Top-`k` generalized eigenvectors of `S_b v = lambda (S_w + r I) v`.
fn lda_eigen_oracle(classes: &[Vec<Vec<f64>>], k: usize) -> DMatrix<f64> {
    let d = classes[0][0].len();
    let n: usize = classes.iter().map(Vec::len).sum();
    let mean = |rows: &[Vec<f64>]| {
        let mut m = vec![0.0; d];
        for r in rows {
            for j in 0..d {
                m[j] += r[j] / rows.len() as f64;
            }
        }
        m
    };
    let all: Vec<Vec<f64>> = classes.iter().flatten().cloned().collect();
    let mu = mean(&all);
    let mut sw = DMatrix::<f64>::zeros(d, d);
    let mut sb = DMatrix::<f64>::zeros(d, d);
    for c in classes {
        let m = mean(c);
        for r in c {
            let dev = nalgebra::DVector::from_iterator(d, r.iter().zip(&m).map(|(a, b)| a - b));
            sw += &dev * dev.transpose();
        }
        let dm = nalgebra::DVector::from_iterator(d, m.iter().zip(&mu).map(|(a, b)| a - b));
        sb += (&dm * dm.transpose()) * c.len() as f64;
    }
    sw /= (n - classes.len()) as f64;
    let ridge = 1e-6 * sw.trace() / d as f64;
    sw += DMatrix::<f64>::identity(d, d) * ridge;
    let chol = sw.cholesky().expect("S_w + ridge is positive definite");
    let l = chol.l();
    let x = l.solve_lower_triangular(&sb).unwrap();
    let m = l.solve_lower_triangular(&x.transpose()).unwrap();
    let m = (&m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let y = DMatrix::from_fn(d, k, |i, j| eig.eigenvectors[(i, order[j])]);
    l.transpose().solve_upper_triangular(&y).unwrap()
}

/// Largest principal angle between the column spans of `a` and `b`.
fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let resid = &qb - &qa * (qa.transpose() * &qb);
    let s = resid.svd(false, false).singular_values.max();
    s.min(1.0).asin()
}

fn lda_oracle() -> Outcome {
    // (classes, dim, components)
    let instances = [
        (2, 5, 1),
        (2, 10, 1),
        (2, 20, 1),
        (3, 5, 2),
        (3, 10, 1),
        (3, 20, 2),
        (5, 5, 4),
        (5, 10, 2),
        (5, 20, 4),
        (5, 20, 3),
    ];
    let mut worst: f64 = 0.0;
    let mut slowest = Duration::ZERO;
    for (seed, &(n_cls, d, k)) in instances.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed as u64);
        let mix = random_matrix(d, d, &mut rng);
        let mut classes = Vec::new();
        let mut pairs = Vec::new();
        for c in 0..n_cls {
            let centre: Vec<f64> = (0..d).map(|_| 2.0 * normal(&mut rng)).collect();
            let n = rng.random_range(30..=100);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let g: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
                    let x = mix.matvec(&g).unwrap();
                    x.iter().zip(&centre).map(|(a, b)| a + b).collect()
                })
                .collect();
            for r in &rows {
                pairs.push((format!("c{c}"), r.clone()));
            }
            classes.push(rows);
        }
        ensure!(pairs.len() <= 500, "instance {seed} has {} samples", pairs.len());
        let data = LabeledEmbeddingSet::from_pairs(&pairs).map_err(|e| e.to_string())?;
        let t = Instant::now();
        let p = fit_lda(&data, k).map_err(|e| e.to_string())?;
        let took = t.elapsed();
        slowest = slowest.max(took);
        ensure!(took < Duration::from_secs(1), "instance {seed} took {took:?}");
        let angle = max_principal_angle(&to_na(&p.w), &lda_eigen_oracle(&classes, k));
        ensure!(angle < 1e-6, "instance {seed} (K={n_cls}, d={d}, k={k}): angle {angle:e}");
        worst = worst.max(angle);
    }
    Ok(format!(
        "10 instances, max principal angle {worst:.1e} rad, slowest fit {:.1} ms",
        slowest.as_secs_f64() * 1e3
    ))
}

// ---------------------------------------------------------------- 2

fn max_diff(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.sub(b).unwrap().max_abs()
}

fn moore_penrose() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut deficient = 0;
    for i in 0..50 {
        let m = rng.random_range(1..=12);
        let n = rng.random_range(1..=12);
        let a = if i % 2 == 0 {
            random_matrix(m, n, &mut rng)
        } else {
            // Rank r < min(m, n) by construction (r = 0 gives the zero matrix).
            let r = rng.random_range(0..m.min(n).max(1));
            deficient += 1;
            if r == 0 {
                DenseMatrix::zeros(m, n)
            } else {
                random_matrix(m, r, &mut rng)
                    .matmul(&random_matrix(r, n, &mut rng))
                    .unwrap()
            }
        };
        let ap = pinv(&a).map_err(|e| e.to_string())?;
        ensure!(ap.shape() == (n, m), "matrix {i}: pinv shape {:?}", ap.shape());
        let aap = a.matmul(&ap).unwrap();
        let apa = ap.matmul(&a).unwrap();
        let errs = [
            max_diff(&aap.matmul(&a).unwrap(), &a),
            max_diff(&apa.matmul(&ap).unwrap(), &ap),
            max_diff(&aap.transpose(), &aap),
            max_diff(&apa.transpose(), &apa),
        ];
        for (j, e) in errs.iter().enumerate() {
            ensure!(*e <= 1e-8, "matrix {i} ({m}x{n}) identity {}: {e:e}", j + 1);
            worst = worst.max(*e);
        }
    }
    let w = random_matrix(64, 8, &mut rng);
    let wp = pinv(&w).map_err(|e| e.to_string())?;
    let mut trip: f64 = 0.0;
    for _ in 0..20 {
        let v: Vec<f64> = (0..8).map(|_| normal(&mut rng)).collect();
        let back = w.vecmat(&wp.vecmat(&v).unwrap()).unwrap();
        let e = back.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure!(e <= 1e-8, "round-trip error {e:e}");
        trip = trip.max(e);
    }
    Ok(format!(
        "50 matrices ({deficient} rank-deficient), max identity error {worst:.1e}, round-trip {trip:.1e}"
    ))
}

// ---------------------------------------------------------------- 3

fn tiny_pack(model: &TinyLm, layer: usize) -> SteeringPack {
    let corpus = synthetic_corpus(40, 16, 0.0, 3);
    let opts = ExtractOptions {
        layers: vec![layer],
        pool: PoolMode::Mean,
        include_special: false,
        exec: Exec::default(),
    };
    let recs = extract_corpus(model, &corpus, &opts).unwrap();
    let data = LabeledEmbeddingSet::from_records(&recs).unwrap();
    build_pack(
        &data,
        &PackConfig {
            model_id: model.model_id().to_string(),
            layer_index: layer,
            k: 1,
            tau: 0.01,
            probe: ProbeConfig::default(),
        },
    )
    .unwrap()
}

fn expected_coverage(strategy: Strategy, prompt_len: usize, positions: usize) -> Vec<usize> {
    (0..positions)
        .filter(|&t| match strategy {
            Strategy::PromptOnly => t < prompt_len,
            Strategy::GenOnly => t >= prompt_len,
            Strategy::PromptAndGen => true,
        })
        .collect()
}

fn injection_identity() -> Outcome {
    let model = TinyLm::random(0);
    let layer = 2;
    let pack = tiny_pack(&model, layer);
    let shift = make_shift_vector(&pack, Some(LANG_A), LANG_B, ShiftMode::CrossLingual).unwrap();
    let taps: Vec<LayerTap> = (0..model.depth()).map(LayerTap::new).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut decodes = 0;
    for (i, len) in [1usize, 3, 8, 17, 30].into_iter().enumerate() {
        let ids = synthetic_tokens(LANG_A, len, 0.0, &mut rng).unwrap();
        let prompt = model.tokenize(&decode_ids(&ids), true).unwrap();
        let req = GenerationRequest {
            prompt: prompt.clone(),
            max_new_tokens: 24,
            sampler: SamplerConfig::confusion_default(),
            seed: 40 + i as u64,
        };
        let plain = generate(&model, &req, &taps, None).map_err(|e| e.to_string())?;
        for strategy in Strategy::ALL {
            let cfg = InjectionConfig {
                alpha: 0.0,
                strategy,
                layer_index: layer,
                prompt_len: prompt.len(),
            };
            let steered = steered_generate_with_capture(&model, &req, &pack, &shift, &cfg, &taps)
                .map_err(|e| e.to_string())?;
            ensure!(
                steered.generation.tokens == plain.tokens,
                "{strategy}, prompt {len}: tokens differ"
            );
            for (l, (a, b)) in steered.generation.captured.iter().zip(&plain.captured).enumerate() {
                ensure!(
                    a.shape() == b.shape() && bits_equal(a.as_slice(), b.as_slice()),
                    "{strategy}, prompt {len}: layer {l} states differ"
                );
            }
            decodes += 1;
        }
    }

    // Coverage through a raw forward pass, then through decoding.
    let positions = 24;
    let tokens: Vec<u32> = (0..positions as u32).map(|t| t % 100).collect();
    let mut traces = 0;
    for t_input in [0usize, 1, 3, 17] {
        for strategy in Strategy::ALL {
            let cfg = InjectionConfig {
                alpha: 0.5,
                strategy,
                layer_index: layer,
                prompt_len: t_input,
            };
            let mut hook = InjectionHook::new(cfg, &shift.delta).unwrap();
            model.forward(&tokens, &[], Some(&mut hook)).map_err(|e| e.to_string())?;
            let want = expected_coverage(strategy, t_input, positions);
            ensure!(
                hook.trace() == want.as_slice(),
                "forward {strategy} T={t_input}: trace {:?}",
                hook.trace()
            );
            let at_boundary = hook.trace().contains(&t_input);
            ensure!(
                at_boundary == (strategy != Strategy::PromptOnly),
                "{strategy} T={t_input}: boundary position coverage wrong"
            );
            traces += 1;

            if t_input == 0 {
                continue;
            }
            let mut ids = vec![langsteer::extraction::tinylm::BOS];
            ids.extend((1..t_input as u32).map(|t| t % 100));
            let prompt = langsteer::extraction::TokenizedSequence::all_valid(ids).unwrap();
            let req = GenerationRequest {
                prompt,
                max_new_tokens: 8,
                sampler: SamplerConfig::confusion_default(),
                seed: 3,
            };
            let out = steered_generate_with_capture(&model, &req, &pack, &shift, &cfg, &[])
                .map_err(|e| e.to_string())?;
            let want = expected_coverage(strategy, t_input, t_input + 7);
            ensure!(
                out.trace == want,
                "decode {strategy} T={t_input}: trace {:?}",
                out.trace
            );
            traces += 1;
        }
    }
    Ok(format!(
        "{decodes} alpha=0 decodes token- and state-identical; {traces} coverage traces exact"
    ))
}

// ---------------------------------------------------------------- 4

fn three_language_pack() -> SteeringPack {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut pairs = Vec::new();
    for (c, lang) in ["de", "en", "fr"].iter().enumerate() {
        for _ in 0..40 {
            let v: Vec<f64> = (0..8)
                .map(|j| normal(&mut rng) + if j == c { 4.0 } else { 0.0 })
                .collect();
            pairs.push((lang.to_string(), v));
        }
    }
    let data = LabeledEmbeddingSet::from_pairs(&pairs).unwrap();
    build_pack(
        &data,
        &PackConfig {
            model_id: "fixture".into(),
            layer_index: 0,
            k: 2,
            tau: 0.01,
            probe: ProbeConfig::default(),
        },
    )
    .unwrap()
}

fn shift_laws() -> Outcome {
    let pack = three_language_pack();
    let langs = pack.languages.clone();
    let mut checked = 0;
    for x in &langs {
        let same = make_shift_vector(&pack, Some(x), x, ShiftMode::CrossLingual).unwrap();
        ensure!(
            same.delta.iter().all(|&v| v == 0.0),
            "{x}->{x} shift is not zero"
        );
        let mono = make_shift_vector(&pack, None, x, ShiftMode::Monolingual).unwrap();
        ensure!(
            bits_equal(&mono.delta, pack.origspace(x).unwrap()),
            "monolingual {x} differs from its back-projection"
        );
        for y in &langs {
            let xy = make_shift_vector(&pack, Some(x), y, ShiftMode::CrossLingual).unwrap();
            let yx = make_shift_vector(&pack, Some(y), x, ShiftMode::CrossLingual).unwrap();
            ensure!(
                xy.delta.iter().zip(yx.delta.iter()).all(|(a, b)| *a == -*b),
                "{x}->{y} is not -({y}->{x})"
            );
            checked += 1;
        }
    }
    ensure!(
        pack.origspace(&langs[0]).unwrap().norm() > 0.0,
        "degenerate fixture: zero back-projection"
    );
    Ok(format!("{} languages, {checked} ordered pairs exact", langs.len()))
}

// ---------------------------------------------------------------- 5

fn majority_b(text: &str) -> bool {
    let total = text.chars().count();
    let b = text.chars().filter(|&c| RANGE_B.contains(&(c as u32))).count();
    2 * b > total
}

fn end_to_end() -> Outcome {
    let report = train_bilingual(&TrainConfig::default()).map_err(|e| e.to_string())?;
    let train_secs = report.elapsed.as_secs_f64();
    ensure!(train_secs <= 120.0, "training took {train_secs:.1}s");
    let model = report.model;
    let layer = 2;
    let corpus = synthetic_corpus(200, 32, 0.0, 3);
    let opts = ExtractOptions {
        layers: vec![layer],
        pool: PoolMode::Mean,
        include_special: false,
        exec: Exec::default(),
    };
    let recs = extract_corpus(&model, &corpus, &opts).map_err(|e| e.to_string())?;
    let data = LabeledEmbeddingSet::from_records(&recs).map_err(|e| e.to_string())?;
    let pack = build_pack(
        &data,
        &PackConfig {
            model_id: model.model_id().to_string(),
            layer_index: layer,
            k: 1,
            tau: 0.01,
            probe: ProbeConfig::default(),
        },
    )
    .map_err(|e| e.to_string())?;

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let prompts: Vec<SteerPrompt> = (0..100)
        .map(|i| SteerPrompt {
            id: format!("p{i:03}"),
            prompt: decode_ids(&synthetic_tokens(LANG_A, 16, 0.0, &mut rng).unwrap()),
            source_lang: Some(LANG_A.into()),
            target_lang: LANG_B.into(),
            dataset: None,
        })
        .collect();
    let flips = |alpha: f64, strategy: Strategy| -> Result<usize, String> {
        let s = SteerSettings {
            alpha,
            strategy,
            mode: ShiftMode::CrossLingual,
            sampler: SamplerConfig::confusion_default(),
            max_new_tokens: 32,
            seed: 0,
        };
        let out = generate_responses(&model, &prompts, &pack, &s, Exec::default())
            .map_err(|e| e.to_string())?;
        Ok(out.iter().filter(|r| majority_b(&r.text)).count())
    };
    let alpha = 4.0;
    let unsteered = flips(0.0, Strategy::PromptAndGen)?;
    let both = flips(alpha, Strategy::PromptAndGen)?;
    let gen = flips(alpha, Strategy::GenOnly)?;
    let prompt = flips(alpha, Strategy::PromptOnly)?;
    let detail = format!(
        "train {train_secs:.1}s; flips/100 at alpha {alpha}: prompt-and-gen {both}, gen-only {gen}, prompt-only {prompt}, unsteered {unsteered}"
    );
    ensure!(both >= 90, "{detail}");
    ensure!(unsteered <= 10, "{detail}");
    ensure!(gen > unsteered && prompt > unsteered, "{detail}");
    ensure!(both >= gen && both >= prompt, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- 6

/// Full sort by (distance, index), count votes, then apply the tie rule.
fn knn_scan(refs: &[Vec<f64>], labels: &[String], q: &[f64], k: usize) -> String {
    let mut all: Vec<(f64, usize)> = refs
        .iter()
        .enumerate()
        .map(|(i, r)| (r.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum(), i))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut tally: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for &(d, i) in all.iter().take(k.min(refs.len())) {
        let e = tally.entry(labels[i].as_str()).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += d;
    }
    let mut best: Option<(&str, usize, f64)> = None;
    for (&l, &(n, s)) in &tally {
        best = match best {
            Some((_, bn, bs)) if bn > n || (bn == n && bs <= s) => best,
            _ => Some((l, n, s)),
        };
    }
    best.unwrap().0.to_string()
}

fn knn_oracle() -> Outcome {
    let (n, d) = (1000, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // Integer coordinates: exact distances and plenty of ties.
    let point = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..d).map(|_| rng.random_range(0..3) as f64).collect()
    };
    let refs: Vec<Vec<f64>> = (0..n).map(|_| point(&mut rng)).collect();
    let labels: Vec<String> = refs
        .iter()
        .map(|r| {
            let bias = (r[0] + r[1]) as usize;
            ["ar", "de", "en", "fr", "ja"][(bias + rng.random_range(0..2)) % 5].to_string()
        })
        .collect();
    let queries: Vec<Vec<f64>> = (0..n).map(|_| point(&mut rng)).collect();
    let qm = DenseMatrix::from_rows(&queries).unwrap();
    let mut report = Vec::new();
    for requested in [1usize, 15, 256, 5000] {
        let set = KnnReferenceSet::new(
            DenseMatrix::from_rows(&refs).unwrap(),
            labels.clone(),
            Some(requested),
        )
        .map_err(|e| e.to_string())?;
        let k = requested.min(n);
        ensure!(set.k_nn() == k, "k_nn {requested} resolved to {}", set.k_nn());
        let got = knn_predict_batch(&set, &qm, Exec::default()).map_err(|e| e.to_string())?;
        let mismatches = queries
            .iter()
            .zip(&got)
            .filter(|(q, g)| knn_scan(&refs, &labels, q, k) != **g)
            .count();
        ensure!(mismatches == 0, "k_nn {requested}: {mismatches} mismatches");
        report.push(format!("k={k}"));
    }
    // Equidistant neighbours with different labels: lexicographic winner.
    let tie = KnnReferenceSet::new(
        DenseMatrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap(),
        vec!["B".into(), "A".into()],
        Some(2),
    )
    .unwrap();
    ensure!(tie.predict(&[0.0, 0.0]).unwrap() == "A", "tie fixture not resolved to A");
    Ok(format!("N={n}, d={d}, {} with 0 mismatches", report.join(", ")))
}

// ---------------------------------------------------------------- 7

/// (target, text, passes line check, passes word check)
const FIXTURES: [(&str, &str, bool, bool); 25] = [
    ("en", "the cat and the dog", true, true),
    ("en", "hello world\nthey have been there", true, true),
    ("en", "the café is open", true, true),
    ("en", "the word мир is here", true, false),
    ("en", "bonjour le monde", false, false),
    ("en", "the sky\nхорошо", false, false),
    ("es", "hola mundo", true, true),
    ("es", "el niño está muy bien", true, true),
    ("es", "gracias por todo\nhoy es un buen día", true, true),
    ("es", "thank you very much", false, false),
    ("es", "hola amigo 你好", true, false),
    ("fr", "bonjour le monde", true, true),
    ("fr", "merci beaucoup\n\n  nous sommes très contents  ", true, true),
    ("fr", "je suis ici avec vous", true, true),
    ("fr", "das ist gut", false, false),
    ("de", "hallo welt", true, true),
    ("de", "ich bin sehr müde", true, true),
    ("de", "123 456", false, false),
    ("ja", "今日はいい天気です。", true, true),
    ("ja", "日本語を話します", true, true),
    ("ja", "中国很大", false, false),
    ("zh", "我爱北京", true, true),
    ("zh", "我们喜欢北京 ok", true, false),
    ("ru", "hello мир", false, false),
    ("ru", "", false, false),
];

/// Unicode Latin blocks used for the word-level check.
const LATIN_BLOCKS: [(u32, u32); 10] = [
    (0x0000, 0x007F),
    (0x0080, 0x00FF),
    (0x0100, 0x017F),
    (0x0180, 0x024F),
    (0x1E00, 0x1EFF),
    (0x2C60, 0x2C7F),
    (0xA720, 0xA7FF),
    (0xAB30, 0xAB6F),
    (0x10780, 0x107BF),
    (0x1DF00, 0x1DFFF),
];

fn metric_fixtures() -> Outcome {
    let responses: Vec<ResponseRecord> = FIXTURES
        .iter()
        .enumerate()
        .map(|(i, (lang, text, _, _))| ResponseRecord::new(format!("r{i:02}"), *lang, *text))
        .collect();
    let table = UnicodeScriptTable::builtin();
    let verdicts = judge_all(&responses, &ReferenceDetector::default(), &table, Exec::default())
        .map_err(|e| e.to_string())?;
    for (v, (lang, text, line, word)) in verdicts.iter().zip(FIXTURES) {
        ensure!(v.line_pass == line, "{lang} {text:?}: line pass {}", v.line_pass);
        let want_word = line.then_some(word);
        ensure!(v.word_pass == want_word, "{lang} {text:?}: word pass {:?}", v.word_pass);
    }

    // Hand tallies: (responses, line passes, word passes).
    let tallies = [
        ("de", 3, 2, 2),
        ("en", 6, 4, 3),
        ("es", 5, 4, 3),
        ("fr", 4, 3, 3),
        ("ja", 3, 2, 2),
        ("ru", 2, 0, 0),
        ("zh", 2, 2, 1),
    ];
    let scores = ScoreTable::from_verdicts(&verdicts);
    ensure!(scores.per_lang.len() == tallies.len(), "language rows differ");
    let (mut sum_l, mut sum_c, mut sum_w, mut n_w) = (0.0, 0.0, 0.0, 0);
    for (lang, n, lp, wp) in tallies {
        let s = &scores.per_lang[lang];
        let l = 100.0 * lp as f64 / n as f64;
        let w = (lp > 0).then(|| 100.0 * wp as f64 / lp as f64);
        let c = match w {
            Some(w) if l + w > 0.0 => 2.0 * l * w / (l + w),
            _ => 0.0,
        };
        ensure!(s.n == n, "{lang}: n {}", s.n);
        ensure!(s.lpr == l, "{lang}: LPR {} vs {l}", s.lpr);
        ensure!(s.wpr == w, "{lang}: WPR {:?} vs {w:?}", s.wpr);
        ensure!(s.lcpr == c, "{lang}: LCPR {} vs {c}", s.lcpr);
        sum_l += l;
        sum_c += c;
        if let Some(w) = w {
            sum_w += w;
            n_w += 1;
        }
    }
    ensure!(scores.avg.lpr == sum_l / 7.0, "average LPR {}", scores.avg.lpr);
    ensure!(scores.avg.lcpr == sum_c / 7.0, "average LCPR {}", scores.avg.lcpr);
    ensure!(scores.avg.wpr == Some(sum_w / n_w as f64), "average WPR {:?}", scores.avg.wpr);

    let mut boundaries = 0;
    let listed = |cp: u32| LATIN_BLOCKS.iter().any(|&(a, b)| (a..=b).contains(&cp));
    for lang in ["de", "en", "es", "fr", "id", "it", "pt", "tr", "vi"] {
        for &(first, last) in &LATIN_BLOCKS {
            for cp in [first.checked_sub(1), Some(first), Some(last), Some(last + 1)]
                .into_iter()
                .flatten()
            {
                let c = char::from_u32(cp).expect("block edges are scalar values");
                ensure!(
                    table.allows(lang, c) == listed(cp),
                    "{lang}: U+{cp:04X} membership wrong"
                );
                boundaries += 1;
            }
        }
    }
    let published = lcpr(85.08, 77.15);
    ensure!((published - 80.92).abs() <= 0.01, "LCPR(85.08, 77.15) = {published}");
    Ok(format!(
        "25 responses exact over 7 languages; {boundaries} Latin boundary checks; LCPR(85.08, 77.15) = {published:.4}"
    ))
}

// ---------------------------------------------------------------- 8

fn probe_training() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut pairs = Vec::new();
    for (c, lang) in ["en", "fr", "id"].iter().enumerate() {
        for _ in 0..100 {
            let v: Vec<f64> = (0..6)
                .map(|j| 0.5 * normal(&mut rng) + if j == c { 3.0 } else { 0.0 })
                .collect();
            pairs.push((lang.to_string(), v));
        }
    }
    let data = LabeledEmbeddingSet::from_pairs(&pairs).unwrap();
    let p = fit_lda(&data, 2).map_err(|e| e.to_string())?;
    let z = project_set(&p, &data).unwrap();
    let mut first_full = None;
    for epochs in 1..=10 {
        let probe = fit_linear_probe(&p, &data, epochs, 0).map_err(|e| e.to_string())?;
        if probe.accuracy(&z, data.labels()) == 1.0 {
            first_full = Some(epochs);
            break;
        }
    }
    let Some(epochs) = first_full else {
        let probe = fit_linear_probe(&p, &data, 10, 0).unwrap();
        return Err(format!(
            "accuracy after 10 epochs {:.4}",
            probe.accuracy(&z, data.labels())
        ));
    };
    let a = fit_linear_probe(&p, &data, 10, 0).unwrap();
    let b = fit_linear_probe(&p, &data, 10, 0).unwrap();
    ensure!(a.accuracy(&z, data.labels()) == 1.0, "10-epoch probe below 100%");
    ensure!(
        bits_equal(a.weights.as_slice(), b.weights.as_slice()) && bits_equal(&a.bias, &b.bias),
        "two runs with seed 0 differ"
    );
    Ok(format!(
        "100% training accuracy after {epochs} epoch(s) on 300 samples; repeat runs bit-identical"
    ))
}

// ---------------------------------------------------------------- 9

fn statistics() -> Outcome {
    let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.7 - 3.0).collect();
    let up: Vec<f64> = x.iter().map(|v| 3.0 * v + 2.0).collect();
    let down: Vec<f64> = x.iter().map(|v| -0.25 * v + 1.0).collect();
    let r_up = pearson(&x, &up).map_err(|e| e.to_string())?.r;
    let r_down = pearson(&x, &down).map_err(|e| e.to_string())?.r;
    ensure!((r_up - 1.0).abs() <= 1e-12, "r(x, 3x+2) = {r_up}");
    ensure!((r_down + 1.0).abs() <= 1e-12, "r(x, -x/4+1) = {r_down}");

    let xs: Vec<f64> = (1..=20).map(|i| i as f64).collect();
    let ys: Vec<f64> = xs.iter().map(|&v| (v * 1.3).sin() * 4.0 + 0.2 * v).collect();
    let n = 20.0;
    let (sx, sy) = (xs.iter().sum::<f64>(), ys.iter().sum::<f64>());
    let sxx: f64 = xs.iter().map(|v| v * v).sum();
    let syy: f64 = ys.iter().map(|v| v * v).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(a, b)| a * b).sum();
    let closed = (n * sxy - sx * sy) / ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt();
    let r = pearson(&xs, &ys).map_err(|e| e.to_string())?.r;
    ensure!((r - closed).abs() <= 1e-12, "20-point r {r} vs closed form {closed}");

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut recs = Vec::new();
    for i in 0..20 {
        let v = RealVector::new((0..16).map(|_| normal(&mut rng)).collect()).unwrap();
        for lang in ["en", "fr", "id", "ja"] {
            recs.push(HiddenStateRecord {
                sentence_id: format!("s{i:02}"),
                lang: lang.into(),
                layer_index: 4,
                pool_mode: PoolMode::Mean,
                vector: v.clone(),
            });
        }
    }
    let index = ParallelCorpusIndex::from_records(&recs).map_err(|e| e.to_string())?;
    let a = alignment_similarity(&index, 4).map_err(|e| e.to_string())?;
    ensure!((a.mean - 1.0).abs() <= 1e-7, "alignment mean {}", a.mean);
    Ok(format!(
        "r = {r_up} / {r_down}; 20-point |r - closed| = {:.1e}; alignment {:.12}",
        (r - closed).abs(),
        a.mean
    ))
}

// ---------------------------------------------------------------- 10

fn roundtrip<T>(dir: &std::path::Path, name: &str, records: &[T]) -> Result<(), String>
where
    T: serde::Serialize + serde::de::DeserializeOwned + PartialEq + std::fmt::Debug,
{
    let path = dir.join(name);
    write_jsonl(&path, records).map_err(|e| e.to_string())?;
    let back: Vec<T> = read_jsonl(&path).map_err(|e| e.to_string())?;
    ensure!(back == records, "{name}: records differ after reload");
    let again = dir.join(format!("again-{name}"));
    write_jsonl(&again, &back).map_err(|e| e.to_string())?;
    ensure!(
        std::fs::read(&path).unwrap() == std::fs::read(&again).unwrap(),
        "{name}: rewritten bytes differ"
    );
    Ok(())
}

fn awkward_floats(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v = vec![0.1 + 0.2, 1.0 / 3.0, -0.0, 5e-324, f64::MIN_POSITIVE, f64::MAX, -1e300];
    v.extend((0..9).map(|_| normal(rng) * 1e-3));
    v
}

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let pack = three_language_pack();
    let path = dir.path().join("pack.json");
    save_pack(&pack, &path).map_err(|e| e.to_string())?;
    let loaded = load_pack(&path).map_err(|e| e.to_string())?;
    ensure!(loaded == pack, "pack differs after reload");
    let mats = [
        (&pack.projection, &loaded.projection),
        (&pack.projection_pinv, &loaded.projection_pinv),
        (&pack.probe_weights, &loaded.probe_weights),
    ];
    for (a, b) in mats {
        ensure!(bits_equal(a.as_slice(), b.as_slice()), "pack matrix bits differ");
    }
    ensure!(bits_equal(&pack.probe_bias, &loaded.probe_bias), "probe bias bits differ");
    for l in &pack.languages {
        ensure!(
            bits_equal(pack.origspace(l).unwrap(), loaded.origspace(l).unwrap())
                && bits_equal(&pack.vector(l).unwrap().v, &loaded.vector(l).unwrap().v),
            "{l}: vector bits differ"
        );
    }
    let text = std::fs::read_to_string(&path).unwrap();
    ensure!(loaded.to_json().unwrap() == text, "re-serialized pack differs");

    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["format_version"] = 2.into();
    match SteeringPack::from_json(&value.to_string()) {
        Err(Error::UnsupportedVersion { found: 2, expected: 1 }) => {}
        other => return Err(format!("version 2 gave {other:?}")),
    }
    for cut in [text.len() / 2, text.len() - 1, 10] {
        match SteeringPack::from_json(&text[..cut]) {
            Err(Error::CorruptPack(_)) => {}
            other => return Err(format!("truncated at {cut} gave {:?}", other.map(|_| ()))),
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let states: Vec<HiddenStateRecord> = (0..6)
        .map(|i| HiddenStateRecord {
            sentence_id: format!("s{i}"),
            lang: ["en", "ja"][i % 2].into(),
            layer_index: i,
            pool_mode: if i % 3 == 0 { PoolMode::First } else { PoolMode::Mean },
            vector: RealVector::new(awkward_floats(&mut rng)).unwrap(),
        })
        .collect();
    roundtrip(dir.path(), "states.jsonl", &states)?;
    let back: Vec<HiddenStateRecord> = read_jsonl(&dir.path().join("states.jsonl")).unwrap();
    for (a, b) in states.iter().zip(&back) {
        ensure!(bits_equal(&a.vector, &b.vector), "{}: vector bits differ", a.sentence_id);
    }
    let corpus = vec![
        CorpusRecord { id: "1".into(), lang: "ja".into(), text: "今日は\t\"quoted\"\n改行".into() },
        CorpusRecord { id: "2".into(), lang: "en".into(), text: "plain \\ backslash".into() },
    ];
    roundtrip(dir.path(), "corpus.jsonl", &corpus)?;
    let prompts = vec![
        SteerPrompt {
            id: "p1".into(),
            prompt: "Bonjour\u{0}!".into(),
            source_lang: Some("fr".into()),
            target_lang: "en".into(),
            dataset: Some("okapi".into()),
        },
        SteerPrompt {
            id: "p2".into(),
            prompt: "Hi".into(),
            source_lang: None,
            target_lang: "ja".into(),
            dataset: None,
        },
    ];
    roundtrip(dir.path(), "prompts.jsonl", &prompts)?;
    let mut response = ResponseRecord::new("r1", "en", "line one\nline two");
    response.alpha = Some(0.1 + 0.2);
    response.strategy = Some("gen-only".into());
    response.source_lang = Some("fr".into());
    let responses = vec![response, ResponseRecord::new("r2", "zh", "")];
    roundtrip(dir.path(), "responses.jsonl", &responses)?;
    let back: Vec<ResponseRecord> = read_jsonl(&dir.path().join("responses.jsonl")).unwrap();
    ensure!(
        back[0].alpha.map(f64::to_bits) == Some((0.1f64 + 0.2).to_bits()),
        "alpha bits differ"
    );

    let raw = std::fs::read_to_string(dir.path().join("states.jsonl")).unwrap();
    let cut = dir.path().join("cut.jsonl");
    std::fs::write(&cut, &raw[..raw.len() / 2]).unwrap();
    match read_jsonl::<HiddenStateRecord>(&cut) {
        Err(Error::Json(_)) => {}
        other => return Err(format!("truncated JSONL gave {:?}", other.map(|v| v.len()))),
    }
    Ok("pack + 4 JSONL kinds bit-exact; version 2 -> UnsupportedVersion; truncation -> CorruptPack / JSON error".into())
}
