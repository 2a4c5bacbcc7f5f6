// SPDX-License-Identifier: MIT OR Apache-2.0

//! Line-level language detectors.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::scripts::UnicodeScriptTable;
use crate::error::{Error, Result};

/// Code returned when no language can be decided.
pub const UNDETERMINED: &str = "und";

const LEXICON: &str = include_str!("assets/lexicon.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorVerdict {
    pub lang: String,
    pub confidence: f64,
}

impl DetectorVerdict {
    pub fn new(lang: impl Into<String>, confidence: f64) -> Self {
        Self {
            lang: lang.into(),
            confidence: confidence.clamp(0.0, 1.0),
        }
    }

    pub fn undetermined() -> Self {
        Self::new(UNDETERMINED, 0.0)
    }
}

pub trait Detector: Send + Sync {
    fn name(&self) -> &str;
    fn detect(&self, line: &str) -> Result<DetectorVerdict>;
}

/// Run a detector on one line; blank lines are undetermined.
pub fn detect_line(line: &str, detector: &dyn Detector) -> Result<DetectorVerdict> {
    if line.trim().is_empty() {
        return Ok(DetectorVerdict::undetermined());
    }
    detector.detect(line)
}

/// Script-majority detector with a small lexicon for Latin-script lines.
///
/// A line whose letters are at least half in one identifying script gets
/// that script's language (kana anywhere turns Han into Japanese). Otherwise
/// a mostly-Latin line is scored word by word against the lexicon, each hit
/// weighted by one over the number of languages listing the word.
#[derive(Debug, Clone)]
pub struct ReferenceDetector {
    table: UnicodeScriptTable,
    /// word -> languages listing it
    lexicon: HashMap<String, Vec<String>>,
}

const IDENTIFYING: [(&str, &str); 6] = [
    ("hangul", "ko"),
    ("thai", "th"),
    ("devanagari", "hi"),
    ("arabic", "ar"),
    ("cyrillic", "ru"),
    ("han", "zh"),
];

impl Default for ReferenceDetector {
    fn default() -> Self {
        let words: BTreeMap<String, Vec<String>> =
            serde_json::from_str(LEXICON).expect("bundled lexicon is valid");
        Self::with_lexicon(UnicodeScriptTable::builtin(), &words)
    }
}

impl ReferenceDetector {
    pub fn with_lexicon(table: UnicodeScriptTable, words: &BTreeMap<String, Vec<String>>) -> Self {
        let mut lexicon: HashMap<String, Vec<String>> = HashMap::new();
        for (lang, ws) in words {
            for w in ws {
                let entry = lexicon.entry(w.to_lowercase()).or_default();
                if !entry.contains(lang) {
                    entry.push(lang.clone());
                }
            }
        }
        Self { table, lexicon }
    }

    fn lexicon_verdict(&self, line: &str) -> DetectorVerdict {
        let mut scores: BTreeMap<&str, f64> = BTreeMap::new();
        let mut n_words = 0usize;
        for word in line.split(|c: char| !c.is_alphabetic()).filter(|w| !w.is_empty()) {
            n_words += 1;
            if let Some(langs) = self.lexicon.get(&word.to_lowercase()) {
                let w = 1.0 / langs.len() as f64;
                for l in langs {
                    *scores.entry(l.as_str()).or_default() += w;
                }
            }
        }
        let best = scores.values().copied().fold(0.0f64, f64::max);
        let leaders: Vec<&str> = scores
            .iter()
            .filter(|(_, &s)| s == best)
            .map(|(&l, _)| l)
            .collect();
        match leaders.as_slice() {
            [only] if best > 0.0 => DetectorVerdict::new(*only, best / n_words as f64),
            _ => DetectorVerdict::undetermined(),
        }
    }
}

impl Detector for ReferenceDetector {
    fn name(&self) -> &str {
        "builtin"
    }

    fn detect(&self, line: &str) -> Result<DetectorVerdict> {
        let letters: Vec<char> = line.chars().filter(|c| c.is_alphabetic()).collect();
        if letters.is_empty() {
            return Ok(DetectorVerdict::undetermined());
        }
        let n = letters.len() as f64;
        let count = |script: &str| {
            letters
                .iter()
                .filter(|&&c| self.table.script_contains(script, c))
                .count()
        };
        let kana = count("kana");
        let han = count("han");
        let mut best = if kana > 0 {
            ("ja", (kana + han) as f64 / n)
        } else {
            ("zh", han as f64 / n)
        };
        for (script, lang) in IDENTIFYING.iter().filter(|(s, _)| *s != "han") {
            let f = count(script) as f64 / n;
            if f > best.1 {
                best = (lang, f);
            }
        }
        if best.1 >= 0.5 {
            return Ok(DetectorVerdict::new(best.0, best.1));
        }
        if count("latin") as f64 / n >= 0.5 {
            return Ok(self.lexicon_verdict(line));
        }
        Ok(DetectorVerdict::undetermined())
    }
}

/// Majority vote of non-whitespace characters over per-language code-point
/// ranges. Suited to the synthetic token-range languages.
#[derive(Debug, Clone)]
pub struct RangeDetector {
    langs: Vec<(String, Vec<(u32, u32)>)>,
}

impl RangeDetector {
    pub fn new(langs: Vec<(String, Vec<(u32, u32)>)>) -> Self {
        Self { langs }
    }

    pub fn from_table(table: &UnicodeScriptTable, langs: &[&str]) -> Result<Self> {
        let mut out = Vec::new();
        for &l in langs {
            if !table.knows(l) {
                return Err(Error::UnknownLanguage(l.to_string()));
            }
            out.push((l.to_string(), table.ranges(l)));
        }
        Ok(Self::new(out))
    }
}

impl Detector for RangeDetector {
    fn name(&self) -> &str {
        "ranges"
    }

    fn detect(&self, line: &str) -> Result<DetectorVerdict> {
        let chars: Vec<u32> = line
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| c as u32)
            .collect();
        if chars.is_empty() {
            return Ok(DetectorVerdict::undetermined());
        }
        let counts: Vec<usize> = self
            .langs
            .iter()
            .map(|(_, rs)| {
                chars
                    .iter()
                    .filter(|&&c| rs.iter().any(|&(a, b)| (a..=b).contains(&c)))
                    .count()
            })
            .collect();
        let best = counts.iter().copied().max().unwrap_or(0);
        let leaders: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] == best).collect();
        match leaders.as_slice() {
            [i] if best > 0 => Ok(DetectorVerdict::new(
                self.langs[*i].0.clone(),
                best as f64 / chars.len() as f64,
            )),
            _ => Ok(DetectorVerdict::undetermined()),
        }
    }
}

struct Worker {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl Drop for Worker {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// An external process speaking line-delimited JSON: `{"text": ...}` in,
/// `{"lang": ..., "confidence": ...}` out, one request per line. Each
/// process is used by one caller at a time; a small pool allows overlap.
pub struct ExternalDetector {
    name: String,
    workers: Vec<Mutex<Worker>>,
}

#[derive(Serialize)]
struct Request<'a> {
    text: &'a str,
}

impl ExternalDetector {
    pub fn spawn(program: &Path, processes: usize) -> Result<Self> {
        let workers = (0..processes.max(1))
            .map(|_| {
                let mut child = Command::new(program)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| Error::Detector(format!("{}: {e}", program.display())))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
                Ok(Mutex::new(Worker {
                    child,
                    stdin,
                    stdout,
                }))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            name: format!("exec:{}", program.display()),
            workers,
        })
    }

    fn ask(worker: &mut Worker, line: &str) -> Result<DetectorVerdict> {
        let req = serde_json::to_string(&Request { text: line })?;
        writeln!(worker.stdin, "{req}")
            .and_then(|_| worker.stdin.flush())
            .map_err(|e| Error::Detector(format!("write: {e}")))?;
        let mut reply = String::new();
        let n = worker
            .stdout
            .read_line(&mut reply)
            .map_err(|e| Error::Detector(format!("read: {e}")))?;
        if n == 0 {
            return Err(Error::Detector("detector closed its output".into()));
        }
        let v: DetectorVerdict = serde_json::from_str(reply.trim())
            .map_err(|e| Error::Detector(format!("bad reply {reply:?}: {e}")))?;
        Ok(DetectorVerdict::new(v.lang, v.confidence))
    }
}

impl Detector for ExternalDetector {
    fn name(&self) -> &str {
        &self.name
    }

    fn detect(&self, line: &str) -> Result<DetectorVerdict> {
        for w in &self.workers {
            if let Ok(mut guard) = w.try_lock() {
                return Self::ask(&mut guard, line);
            }
        }
        let mut guard = self.workers[0]
            .lock()
            .map_err(|_| Error::Detector("detector worker poisoned".into()))?;
        Self::ask(&mut guard, line)
    }
}

/// Parse a detector spec: `builtin`, `ranges:<lang>,<lang>...` or
/// `exec:<path>`.
pub fn detector_from_spec(spec: &str, table: &UnicodeScriptTable) -> Result<Box<dyn Detector>> {
    if spec == "builtin" {
        return Ok(Box::new(ReferenceDetector::default()));
    }
    if let Some(path) = spec.strip_prefix("exec:") {
        return Ok(Box::new(ExternalDetector::spawn(&PathBuf::from(path), 1)?));
    }
    if let Some(list) = spec.strip_prefix("ranges:") {
        let langs: Vec<&str> = list.split(',').filter(|s| !s.is_empty()).collect();
        return Ok(Box::new(RangeDetector::from_table(table, &langs)?));
    }
    Err(Error::InvalidInput(format!("unknown detector {spec:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lang(line: &str) -> String {
        ReferenceDetector::default().detect(line).unwrap().lang
    }

    #[test]
    fn script_examples() {
        assert_eq!(lang("これはテスト"), "ja");
        assert_eq!(lang("漢字とかな"), "ja");
        assert_eq!(lang("你好世界"), "zh");
        assert_eq!(lang("Привет мир"), "ru");
        assert_eq!(lang("안녕하세요"), "ko");
        assert_eq!(lang("สวัสดีครับ"), "th");
        assert_eq!(lang("नमस्ते दुनिया"), "hi");
        assert_eq!(lang("مرحبا بالعالم"), "ar");
        let v = ReferenceDetector::default().detect("Привет hi").unwrap();
        assert_eq!(v.lang, "ru");
        assert!((v.confidence - 6.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn lexicon_examples() {
        assert_eq!(lang("Hola mundo"), "es");
        assert_eq!(lang("The cat is on the mat"), "en");
        assert_eq!(lang("Der Hund und die Katze"), "de");
        assert_eq!(lang("Je suis très content"), "fr");
        assert_eq!(lang("Saya tidak tahu"), "id");
        assert_eq!(lang("Xin chào thế giới"), "vi");
        assert_eq!(lang("zzz qqq"), UNDETERMINED);
        assert_eq!(lang("123 !!"), UNDETERMINED);
    }

    #[test]
    fn ranges_vote() {
        let t = UnicodeScriptTable::with_synthetic();
        let d = RangeDetector::from_table(&t, &["A", "B"]).unwrap();
        assert_eq!(d.detect("ab\u{90}").unwrap().lang, "A");
        assert_eq!(d.detect("\u{90}\u{91}a").unwrap().lang, "B");
        assert_eq!(d.detect("a\u{90}").unwrap().lang, UNDETERMINED);
        assert!(RangeDetector::from_table(&t, &["Q"]).is_err());
    }

    #[test]
    fn blank_lines_are_undetermined() {
        let d = ReferenceDetector::default();
        assert_eq!(detect_line("   ", &d).unwrap(), DetectorVerdict::undetermined());
    }
}
