// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use langsteer::confusion::scripts::UnicodeScriptTable;
use langsteer::confusion::{detect::detector_from_spec, evaluate_benchmark, EvalMode};
use langsteer::extraction::corpus::{read_corpus, read_jsonl, write_corpus, write_jsonl};
use langsteer::extraction::train::{synthetic_corpus, train_bilingual, TrainConfig};
use langsteer::extraction::{
    extract_corpus, load_adapter, read_records, write_records, ExtractOptions, HiddenStateRecord,
    LayerSelector, ModelAdapter,
};
use langsteer::langvec::{build_pack, load_pack, save_pack, PackConfig, ShiftMode, SteeringPack};
use langsteer::lda::{
    select_components, LabeledEmbeddingSet, ProbeConfig, SweepConfig as KSweep, DEFAULT_COMPONENTS,
};
use langsteer::probes::{
    alignment_similarity, correlation_report, lid_report, AlignmentReport, CorrelationReport,
    LidMethod, ParallelCorpusIndex,
};
use langsteer::steer::{
    alpha_sweep, check_pack, default_alpha, generate_responses, SteerPrompt, SteerSettings,
    Strategy, SweepConfig,
};
use langsteer::Exec;

use crate::config::{input, RunConfig};
use crate::exit::CliError;

const DEFAULT_MAX_NEW_TOKENS: usize = 32;
const DEFAULT_SWEEP_ALPHAS: [f64; 7] = [0.1, 0.3, 0.5, 0.7, 0.9, 1.1, 1.3];

fn adapter(cfg: &RunConfig) -> Result<Box<dyn ModelAdapter>> {
    let id = cfg.require_model()?;
    Ok(load_adapter(id).with_context(|| format!("loading model {id}"))?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn synth(cfg: &RunConfig, n: usize, len: usize, switch_prob: f64) -> Result<()> {
    let out = cfg.require_out()?;
    let corpus = synthetic_corpus(n, len, switch_prob, cfg.seed());
    write_corpus(out, &corpus)?;
    println!("wrote {} sentences to {}", corpus.len(), out.display());
    Ok(())
}

pub fn train_tiny(cfg: &RunConfig, steps: Option<usize>) -> Result<()> {
    let out = cfg.require_out()?;
    let mut tc = TrainConfig::default();
    if let Some(s) = steps {
        tc.steps = s;
    }
    if let Some(seed) = cfg.seed {
        tc.init_seed = seed;
    }
    let report = train_bilingual(&tc)?;
    report.model.save(out)?;
    println!(
        "trained {} steps in {:.1}s, loss {:.3} -> {:.3}; use --model file:{}",
        tc.steps,
        report.elapsed.as_secs_f64(),
        report.losses.first().copied().unwrap_or(f64::NAN),
        report.losses.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

pub fn extract(cfg: &RunConfig) -> Result<()> {
    let corpus_path = input(&cfg.corpus, "corpus")?;
    let out = cfg.require_out()?;
    let corpus = read_corpus(corpus_path)?;
    let model = adapter(cfg)?;
    let selectors = cfg.layers()?.unwrap_or(vec![LayerSelector::Middle]);
    let layers = selectors
        .iter()
        .map(|s| s.resolve(model.depth()))
        .collect::<langsteer::Result<Vec<_>>>()?;
    let opts = ExtractOptions {
        layers: layers.clone(),
        pool: cfg.pool()?,
        include_special: false,
        exec: Exec::default(),
    };
    let records = extract_corpus(model.as_ref(), &corpus, &opts)?;
    write_records(out, &records)?;
    println!(
        "extracted {} records ({} sentences x layers {:?}) to {}",
        records.len(),
        corpus.len(),
        layers,
        out.display()
    );
    Ok(())
}

/// Layers present in `records`, or the requested selectors resolved against
/// them. Named selectors need the model depth.
fn pick_layers(cfg: &RunConfig, records: &[HiddenStateRecord]) -> Result<Vec<usize>> {
    let present: BTreeSet<usize> = records.iter().map(|r| r.layer_index).collect();
    let Some(selectors) = cfg.layers()? else {
        return Ok(present.into_iter().collect());
    };
    let needs_depth = selectors.iter().any(|s| !matches!(s, LayerSelector::Index(_)));
    let depth = if needs_depth { Some(adapter(cfg)?.depth()) } else { None };
    let mut layers = Vec::new();
    for s in selectors {
        let l = match (s, depth) {
            (LayerSelector::Index(i), _) => i,
            (s, Some(d)) => s.resolve(d)?,
            (_, None) => unreachable!("depth loaded for named selectors"),
        };
        if !present.contains(&l) {
            return Err(CliError::Config(format!("no states for layer {l}")).into());
        }
        layers.push(l);
    }
    Ok(layers)
}

fn probe_config(cfg: &RunConfig) -> ProbeConfig {
    ProbeConfig {
        seed: cfg.seed(),
        ..ProbeConfig::default()
    }
}

pub fn fit(cfg: &RunConfig) -> Result<()> {
    let states = input(&cfg.states, "states")?;
    let model_id = cfg.require_model()?.to_owned();
    let out = cfg.require_out()?;
    let records = read_records(states)?;
    let layers = pick_layers(cfg, &records)?;
    let [layer] = layers[..] else {
        return Err(CliError::Config(format!(
            "states hold layers {layers:?}; choose one with --layer"
        ))
        .into());
    };
    let at_layer: Vec<HiddenStateRecord> =
        records.into_iter().filter(|r| r.layer_index == layer).collect();
    let data = LabeledEmbeddingSet::from_records(&at_layer)?;
    let max_k = (data.languages().len() - 1).min(data.dim());
    let k = match cfg.k {
        Some(k) => k,
        None => {
            let k = DEFAULT_COMPONENTS.min(max_k);
            if k < DEFAULT_COMPONENTS {
                eprintln!("note: k defaults to {DEFAULT_COMPONENTS}; only {k} available");
            }
            k
        }
    };
    let probe = probe_config(cfg);
    if let Some(ks) = &cfg.sweep_k {
        let sweep = select_components(
            &data,
            ks,
            &KSweep {
                probe,
                ..KSweep::default()
            },
        )?;
        print!("{}", sweep.to_table());
    }
    let pc = PackConfig {
        model_id,
        layer_index: layer,
        k,
        tau: cfg.tau.unwrap_or(langsteer::langvec::DEFAULT_TAU),
        probe,
    };
    let pack = build_pack(&data, &pc)?;
    save_pack(&pack, out)?;
    println!(
        "pack for {} at layer {}: {} languages, k={}, tau={}",
        pack.model_id,
        pack.layer_index,
        pack.languages.len(),
        pack.n_components(),
        pack.tau
    );
    for (lang, v) in &pack.vectors {
        println!("  {lang:<8} active dims {:?} from {} samples", v.active_dims, v.sample_count);
    }
    Ok(())
}

/// Prompts from `--prompts`, or corpus sentences in the source language.
/// `--source` / `--target` override per-prompt languages.
fn load_prompts(cfg: &RunConfig) -> Result<Vec<SteerPrompt>> {
    let mut prompts: Vec<SteerPrompt> = if cfg.prompts.is_some() {
        read_jsonl(input(&cfg.prompts, "prompts")?)?
    } else {
        let path = input(&cfg.corpus, "prompts")?;
        let target = cfg.target.clone().ok_or_else(|| {
            CliError::Config("--target is required when prompting from a corpus".into())
        })?;
        read_corpus(path)?
            .into_iter()
            .filter(|r| cfg.source.as_ref().is_none_or(|s| *s == r.lang))
            .map(|r| SteerPrompt {
                id: r.id,
                prompt: r.text,
                source_lang: Some(r.lang),
                target_lang: target.clone(),
                dataset: None,
            })
            .collect()
    };
    for p in &mut prompts {
        if let Some(s) = &cfg.source {
            p.source_lang = Some(s.clone());
        }
        if let Some(t) = &cfg.target {
            p.target_lang = t.clone();
        }
    }
    if prompts.is_empty() {
        return Err(CliError::Config("no prompts selected".into()).into());
    }
    Ok(prompts)
}

struct SteerInputs {
    pack: SteeringPack,
    model: Box<dyn ModelAdapter>,
    prompts: Vec<SteerPrompt>,
    mode: ShiftMode,
}

fn steer_inputs(cfg: &RunConfig) -> Result<SteerInputs> {
    let pack = load_pack(input(&cfg.pack, "pack")?)?;
    let prompts = load_prompts(cfg)?;
    let mut cfg = cfg.clone();
    cfg.model_id.get_or_insert_with(|| pack.model_id.clone());
    let model = adapter(&cfg)?;
    check_pack(model.as_ref(), &pack)?;
    let mode = match cfg.shift_mode()? {
        Some(m) => m,
        None if prompts.iter().all(|p| p.source_lang.is_some()) => ShiftMode::CrossLingual,
        None => ShiftMode::Monolingual,
    };
    Ok(SteerInputs {
        pack,
        model,
        prompts,
        mode,
    })
}

fn alpha_for(cfg: &RunConfig, model_id: &str) -> f64 {
    cfg.alpha.unwrap_or_else(|| {
        let (a, known) = default_alpha(model_id);
        if !known {
            eprintln!("warning: no alpha default for model {model_id}; using {a}");
        }
        a
    })
}

pub fn generate(cfg: &RunConfig) -> Result<()> {
    let out = cfg.require_out()?;
    let inp = steer_inputs(cfg)?;
    let strategy = match cfg.strategies()?.as_deref() {
        None => Strategy::PromptAndGen,
        Some([s]) => *s,
        Some(_) => return Err(CliError::Config("generate takes one strategy".into()).into()),
    };
    let settings = SteerSettings {
        alpha: alpha_for(cfg, inp.model.model_id()),
        strategy,
        mode: inp.mode,
        sampler: cfg.sampler()?,
        max_new_tokens: cfg.max_new_tokens.unwrap_or(DEFAULT_MAX_NEW_TOKENS),
        seed: cfg.seed(),
    };
    let responses = generate_responses(
        inp.model.as_ref(),
        &inp.prompts,
        &inp.pack,
        &settings,
        Exec::default(),
    )?;
    write_jsonl(out, &responses)?;
    println!(
        "wrote {} responses (alpha {}, {}) to {}",
        responses.len(),
        settings.alpha,
        strategy,
        out.display()
    );
    Ok(())
}

fn detector(cfg: &RunConfig, table: &UnicodeScriptTable) -> Result<Box<dyn langsteer::confusion::detect::Detector>> {
    Ok(detector_from_spec(cfg.detector.as_deref().unwrap_or("builtin"), table)?)
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let path = input(&cfg.responses, "responses")?;
    let table = UnicodeScriptTable::with_synthetic();
    let det = detector(cfg, &table)?;
    let mode = cfg.eval_mode()?.unwrap_or(EvalMode::Monolingual);
    let report = evaluate_benchmark(path, det.as_ref(), &table, mode, Exec::default())?;
    print!("{}", report.to_table());
    if let Some(out) = &cfg.out {
        write_json(out, &report)?;
    }
    Ok(())
}

pub fn probe(cfg: &RunConfig) -> Result<()> {
    let reference = read_records(input(&cfg.states, "states")?)?;
    let mut sets = Vec::new();
    for (name, path) in cfg.eval_sets()? {
        let p = Some(path);
        sets.push((name, read_records(input(&p, "eval")?)?));
    }
    if sets.is_empty() {
        sets.push(("reference".to_owned(), reference.clone()));
    }
    let layers = pick_layers(cfg, &reference)?;
    let method = match cfg.lid_method_name()? {
        "knn" => LidMethod::Knn { k_nn: cfg.k_nn },
        _ => LidMethod::LinearProbe {
            config: probe_config(cfg),
        },
    };
    let report = lid_report(method, &layers, &reference, &sets, Exec::default())?;
    print!("{}", report.to_table());
    if let Some(k) = report.cells.first().and_then(|c| c.k_nn) {
        println!("k_nn = {k}");
    }
    if let Some(out) = &cfg.out {
        write_json(out, &report)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct AlignOutput {
    layers: Vec<AlignmentReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    correlation: Option<CorrelationOutput>,
}

#[derive(Serialize)]
struct CorrelationOutput {
    layer: usize,
    anchor: String,
    languages: Vec<String>,
    similarities: Vec<f64>,
    scores: Vec<f64>,
    report: CorrelationReport,
}

pub fn align(cfg: &RunConfig) -> Result<()> {
    let records = read_records(input(&cfg.states, "states")?)?;
    let index = ParallelCorpusIndex::from_records(&records)?;
    let layers = pick_layers(cfg, &records)?;
    let reports = layers
        .iter()
        .map(|&l| alignment_similarity(&index, l))
        .collect::<langsteer::Result<Vec<_>>>()?;
    for r in &reports {
        print!("{}", r.to_table());
    }
    let correlation = match &cfg.scores {
        None => None,
        Some(_) => {
            let scores: BTreeMap<String, f64> =
                serde_json::from_str(&fs::read_to_string(input(&cfg.scores, "scores")?)?)
                    .map_err(|e| CliError::Config(format!("scores: {e}")))?;
            let anchor = cfg.source.clone().unwrap_or_else(|| "en".to_owned());
            let last = reports.last().expect("at least one layer");
            let (mut langs, mut sims, mut ys) = (Vec::new(), Vec::new(), Vec::new());
            for p in &last.pairs {
                let other = if p.lang_a == anchor {
                    &p.lang_b
                } else if p.lang_b == anchor {
                    &p.lang_a
                } else {
                    continue;
                };
                if let Some(&y) = scores.get(other) {
                    langs.push(other.clone());
                    sims.push(p.mean);
                    ys.push(y);
                }
            }
            let report = correlation_report(&sims, &ys)?;
            print!("correlation with {anchor} at layer {}\n{}", last.layer, report.to_table());
            Some(CorrelationOutput {
                layer: last.layer,
                anchor,
                languages: langs,
                similarities: sims,
                scores: ys,
                report,
            })
        }
    };
    if let Some(out) = &cfg.out {
        write_json(
            out,
            &AlignOutput {
                layers: reports,
                correlation,
            },
        )?;
    }
    Ok(())
}

pub fn sweep(cfg: &RunConfig) -> Result<()> {
    let inp = steer_inputs(cfg)?;
    let table = UnicodeScriptTable::with_synthetic();
    let det = detector(cfg, &table)?;
    let sc = SweepConfig {
        alphas: cfg.sweep_alpha.clone().unwrap_or(DEFAULT_SWEEP_ALPHAS.to_vec()),
        strategies: cfg.strategies()?.unwrap_or(Strategy::ALL.to_vec()),
        mode: inp.mode,
        eval_mode: match inp.mode {
            ShiftMode::CrossLingual => EvalMode::CrossLingual,
            ShiftMode::Monolingual => EvalMode::Monolingual,
        },
        sampler: cfg.sampler()?,
        max_new_tokens: cfg.max_new_tokens.unwrap_or(DEFAULT_MAX_NEW_TOKENS),
        seed: cfg.seed(),
        exec: Exec::default(),
    };
    let result = alpha_sweep(inp.model.as_ref(), &inp.prompts, &inp.pack, &sc, det.as_ref(), &table)?;
    print!("{}", result.to_table());
    if let Some(out) = &cfg.out {
        write_json(out, &result)?;
    }
    Ok(())
}
