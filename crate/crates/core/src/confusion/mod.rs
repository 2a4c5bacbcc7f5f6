// SPDX-License-Identifier: MIT OR Apache-2.0

//! Language-confusion metrics.
//!
//! * LPR: share of responses whose every non-empty line is detected as the
//!   target language.
//! * WPR: among line-passing responses, share whose every word keeps its
//!   letters inside the target language's Unicode blocks.
//! * LCPR: harmonic mean of the two.

pub mod detect;
pub mod scripts;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use detect::{
    detect_line, detector_from_spec, Detector, DetectorVerdict, ExternalDetector, RangeDetector,
    ReferenceDetector, UNDETERMINED,
};
pub use scripts::{ScriptBlock, UnicodeScriptTable};

use crate::error::{Error, Result};
use crate::exec::Exec;

/// Targets whose WPR uses whitespace tokens only (no word segmentation).
pub const SCRIPT_CHECKED: [&str; 3] = ["ja", "th", "zh"];

/// Languages of the language-confusion benchmark.
pub const LCB_LANGUAGES: [&str; 15] = [
    "ar", "de", "en", "es", "fr", "hi", "id", "it", "ja", "ko", "pt", "ru", "tr", "vi", "zh",
];

/// One generated response, as written by steered generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub id: String,
    #[serde(default)]
    pub prompt: String,
    pub target_lang: String,
    #[serde(default)]
    pub source_lang: Option<String>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub strategy: Option<String>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
}

impl ResponseRecord {
    pub fn new(id: impl Into<String>, target_lang: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            prompt: String::new(),
            target_lang: target_lang.into(),
            source_lang: None,
            alpha: None,
            strategy: None,
            text: text.into(),
            dataset: None,
        }
    }
}

/// Split on newlines, trim each line, drop empty ones.
pub fn split_lines(text: &str) -> Vec<&str> {
    text.split('\n')
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect()
}

/// Every whitespace token keeps its letters inside the target's blocks.
/// Digits, punctuation and other non-letters are ignored.
pub fn words_in_script(text: &str, lang: &str, table: &UnicodeScriptTable) -> bool {
    text.split_whitespace()
        .flat_map(|w| w.chars().filter(|c| c.is_alphabetic()))
        .all(|c| table.allows(lang, c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseVerdict {
    pub id: String,
    pub target_lang: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    pub lines: Vec<DetectorVerdict>,
    pub line_pass: bool,
    /// Only judged for line-passing responses.
    pub word_pass: Option<bool>,
}

pub fn judge_response(
    r: &ResponseRecord,
    detector: &dyn Detector,
    table: &UnicodeScriptTable,
) -> Result<ResponseVerdict> {
    let lines = split_lines(&r.text)
        .into_iter()
        .map(|l| detect_line(l, detector))
        .collect::<Result<Vec<_>>>()?;
    let line_pass = !lines.is_empty() && lines.iter().all(|v| v.lang == r.target_lang);
    Ok(ResponseVerdict {
        id: r.id.clone(),
        target_lang: r.target_lang.clone(),
        dataset: r.dataset.clone(),
        lines,
        line_pass,
        word_pass: line_pass.then(|| words_in_script(&r.text, &r.target_lang, table)),
    })
}

pub fn judge_all(
    responses: &[ResponseRecord],
    detector: &dyn Detector,
    table: &UnicodeScriptTable,
    exec: Exec,
) -> Result<Vec<ResponseVerdict>> {
    exec.try_map(responses, |r| judge_response(r, detector, table))
}

/// Harmonic mean of LPR and WPR; zero when both are zero.
pub fn lcpr(lpr: f64, wpr: f64) -> f64 {
    if lpr + wpr == 0.0 {
        0.0
    } else {
        2.0 * lpr * wpr / (lpr + wpr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangScores {
    pub lpr: f64,
    /// Absent when no response passed the line check.
    pub wpr: Option<f64>,
    pub lcpr: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub lpr: f64,
    pub wpr: Option<f64>,
    pub lcpr: f64,
}

/// Per-language scores and their arithmetic means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub per_lang: BTreeMap<String, LangScores>,
    pub avg: Averages,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl ScoreTable {
    pub fn from_verdicts<'a>(verdicts: impl IntoIterator<Item = &'a ResponseVerdict>) -> Self {
        // (responses, line passes, word passes)
        let mut tally: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
        for v in verdicts {
            let t = tally.entry(v.target_lang.clone()).or_default();
            t.0 += 1;
            if v.line_pass {
                t.1 += 1;
                if v.word_pass == Some(true) {
                    t.2 += 1;
                }
            }
        }
        let per_lang: BTreeMap<String, LangScores> = tally
            .into_iter()
            .map(|(lang, (n, lp, wp))| {
                let l = 100.0 * lp as f64 / n as f64;
                let w = (lp > 0).then(|| 100.0 * wp as f64 / lp as f64);
                let scores = LangScores {
                    lpr: l,
                    wpr: w,
                    lcpr: lcpr(l, w.unwrap_or(0.0)),
                    n,
                };
                (lang, scores)
            })
            .collect();
        let avg = Averages {
            lpr: mean(per_lang.values().map(|s| s.lpr)).unwrap_or(0.0),
            wpr: mean(per_lang.values().filter_map(|s| s.wpr)),
            lcpr: mean(per_lang.values().map(|s| s.lcpr)).unwrap_or(0.0),
        };
        Self { per_lang, avg }
    }

    /// Aligned-column text table.
    pub fn to_table(&self) -> String {
        let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.2}"));
        let mut out = format!("{:<8}{:>6}{:>9}{:>9}{:>9}\n", "lang", "n", "LPR", "WPR", "LCPR");
        for (lang, s) in &self.per_lang {
            let _ = writeln!(
                out,
                "{:<8}{:>6}{:>9}{:>9}{:>9}",
                lang,
                s.n,
                fmt(Some(s.lpr)),
                fmt(s.wpr),
                fmt(Some(s.lcpr))
            );
        }
        let _ = writeln!(
            out,
            "{:<8}{:>6}{:>9}{:>9}{:>9}",
            "avg",
            "",
            fmt(Some(self.avg.lpr)),
            fmt(self.avg.wpr),
            fmt(Some(self.avg.lcpr))
        );
        out
    }
}

/// LPR per target language.
pub fn lpr(responses: &[ResponseRecord], detector: &dyn Detector) -> Result<BTreeMap<String, f64>> {
    let table = UnicodeScriptTable::builtin();
    let v = judge_all(responses, detector, &table, Exec::Sequential)?;
    Ok(ScoreTable::from_verdicts(&v)
        .per_lang
        .into_iter()
        .map(|(l, s)| (l, s.lpr))
        .collect())
}

/// WPR per target language; `None` where nothing passed the line check.
pub fn wpr(
    responses: &[ResponseRecord],
    detector: &dyn Detector,
    table: &UnicodeScriptTable,
) -> Result<BTreeMap<String, Option<f64>>> {
    let v = judge_all(responses, detector, table, Exec::Sequential)?;
    Ok(ScoreTable::from_verdicts(&v)
        .per_lang
        .into_iter()
        .map(|(l, s)| (l, s.wpr))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Monolingual,
    /// English is excluded as a target row.
    CrossLingual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionReport {
    /// Pooled over all datasets.
    pub per_lang: BTreeMap<String, LangScores>,
    pub avg: Averages,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_dataset: BTreeMap<String, ScoreTable>,
    pub mode: EvalMode,
    pub detector: String,
    /// Targets whose WPR is a script-range check on whitespace tokens only.
    pub script_checked: Vec<String>,
    pub skipped: Vec<SkippedRecord>,
    pub verdicts: Vec<ResponseVerdict>,
}

impl ConfusionReport {
    pub fn pooled(&self) -> ScoreTable {
        ScoreTable {
            per_lang: self.per_lang.clone(),
            avg: self.avg.clone(),
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = self.pooled().to_table();
        for (ds, t) in &self.per_dataset {
            let _ = write!(out, "\n[{ds}]\n{}", t.to_table());
        }
        if !self.script_checked.is_empty() {
            let _ = writeln!(
                out,
                "\nscript-checked WPR (no word segmentation): {}",
                self.script_checked.join(", ")
            );
        }
        if !self.skipped.is_empty() {
            let _ = writeln!(out, "skipped {} malformed record(s)", self.skipped.len());
        }
        out
    }
}

/// Score responses already in memory. Unknown target languages are an
/// error here; [`evaluate_benchmark`] skips them instead.
pub fn evaluate_responses(
    responses: &[ResponseRecord],
    detector: &dyn Detector,
    table: &UnicodeScriptTable,
    mode: EvalMode,
    exec: Exec,
) -> Result<ConfusionReport> {
    if let Some(r) = responses.iter().find(|r| !table.knows(&r.target_lang)) {
        return Err(Error::UnknownLanguage(r.target_lang.clone()));
    }
    let kept: Vec<ResponseRecord> = responses
        .iter()
        .filter(|r| mode == EvalMode::Monolingual || r.target_lang != "en")
        .cloned()
        .collect();
    let verdicts = judge_all(&kept, detector, table, exec)?;
    let pooled = ScoreTable::from_verdicts(&verdicts);
    let mut by_ds: BTreeMap<String, Vec<&ResponseVerdict>> = BTreeMap::new();
    for v in &verdicts {
        if let Some(ds) = &v.dataset {
            by_ds.entry(ds.clone()).or_default().push(v);
        }
    }
    let per_dataset = by_ds
        .into_iter()
        .map(|(ds, vs)| (ds, ScoreTable::from_verdicts(vs)))
        .collect();
    let script_checked = pooled
        .per_lang
        .keys()
        .filter(|l| SCRIPT_CHECKED.contains(&l.as_str()))
        .cloned()
        .collect();
    Ok(ConfusionReport {
        per_lang: pooled.per_lang,
        avg: pooled.avg,
        per_dataset,
        mode,
        detector: detector.name().to_string(),
        script_checked,
        skipped: Vec::new(),
        verdicts,
    })
}

/// Read a responses JSONL file, skipping malformed records (bad JSON,
/// missing fields, unknown target). More than 10% skipped is an error.
pub fn parse_responses(
    text: &str,
    table: &UnicodeScriptTable,
) -> Result<(Vec<ResponseRecord>, Vec<SkippedRecord>)> {
    let mut good = Vec::new();
    let mut skipped = Vec::new();
    let mut total = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let reason = match serde_json::from_str::<ResponseRecord>(line) {
            Ok(r) if table.knows(&r.target_lang) => {
                good.push(r);
                continue;
            }
            Ok(r) => format!("unknown target language {:?}", r.target_lang),
            Err(e) => e.to_string(),
        };
        skipped.push(SkippedRecord { line: i + 1, reason });
    }
    if skipped.len() * 10 > total {
        return Err(Error::TooManySkipped {
            skipped: skipped.len(),
            total,
        });
    }
    Ok((good, skipped))
}

pub fn evaluate_benchmark(
    path: &Path,
    detector: &dyn Detector,
    table: &UnicodeScriptTable,
    mode: EvalMode,
    exec: Exec,
) -> Result<ConfusionReport> {
    let text = fs::read_to_string(path)?;
    let (records, skipped) = parse_responses(&text, table)?;
    let mut report = evaluate_responses(&records, detector, table, mode, exec)?;
    report.skipped = skipped;
    Ok(report)
}
