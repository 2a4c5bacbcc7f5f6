// SPDX-License-Identifier: MIT OR Apache-2.0

//! Parallel corpus ingestion and JSON-lines helpers.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One sentence of a parallel corpus. Sentences sharing `id` across
/// languages are translations of each other.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub lang: String,
    pub text: String,
}

/// Read a corpus from JSON-lines (`{"id","lang","text"}`) or, for `.tsv`
/// files, three tab-separated columns `id<TAB>lang<TAB>text`.
pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let is_tsv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("tsv"));
    let records = if is_tsv {
        read_tsv(path)?
    } else {
        read_jsonl(path)?
    };
    let mut seen = HashSet::new();
    for r in &records {
        if !seen.insert((r.id.as_str(), r.lang.as_str())) {
            return Err(Error::InvalidInput(format!(
                "duplicate corpus record ({}, {})",
                r.id, r.lang
            )));
        }
    }
    Ok(records)
}

fn read_tsv(path: &Path) -> Result<Vec<CorpusRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.splitn(3, '\t');
        match (cols.next(), cols.next(), cols.next()) {
            (Some(id), Some(lang), Some(text)) => out.push(CorpusRecord {
                id: id.to_owned(),
                lang: lang.to_owned(),
                text: text.to_owned(),
            }),
            _ => {
                return Err(Error::InvalidInput(format!(
                    "{}:{}: expected 3 tab-separated columns",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsv_and_jsonl_agree() {
        let dir = tempfile::tempdir().unwrap();
        let tsv = dir.path().join("c.tsv");
        fs::write(&tsv, "1\ten\tHello world\n1\tes\tHola\tmundo\n\n").unwrap();
        let a = read_corpus(&tsv).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[1].text, "Hola\tmundo");
        let jl = dir.path().join("c.jsonl");
        write_corpus(&jl, &a).unwrap();
        assert_eq!(read_corpus(&jl).unwrap(), a);
    }

    #[test]
    fn rejects_duplicates_and_short_rows() {
        let dir = tempfile::tempdir().unwrap();
        let tsv = dir.path().join("c.tsv");
        fs::write(&tsv, "1\ten\ta\n1\ten\tb\n").unwrap();
        assert!(read_corpus(&tsv).is_err());
        fs::write(&tsv, "1\ten\n").unwrap();
        assert!(read_corpus(&tsv).is_err());
    }
}
