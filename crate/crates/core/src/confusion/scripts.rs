// SPDX-License-Identifier: MIT OR Apache-2.0

//! Unicode block tables per script and the scripts each language may use.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BUILTIN: &str = include_str!("assets/unicode_scripts.json");

/// One inclusive code-point range. Serialized with hex bounds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptBlock {
    pub name: String,
    #[serde(with = "hex")]
    pub first: u32,
    #[serde(with = "hex")]
    pub last: u32,
}

impl ScriptBlock {
    pub fn new(name: impl Into<String>, first: u32, last: u32) -> Self {
        Self {
            name: name.into(),
            first,
            last,
        }
    }

    pub fn contains(&self, c: char) -> bool {
        (self.first..=self.last).contains(&(c as u32))
    }
}

mod hex {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u32, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:04X}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u32, D::Error> {
        let s = String::deserialize(d)?;
        u32::from_str_radix(&s, 16).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnicodeScriptTable {
    pub scripts: BTreeMap<String, Vec<ScriptBlock>>,
    /// Language code to the scripts its words may use.
    pub languages: BTreeMap<String, Vec<String>>,
}

/// Token-range languages emitted by the tiny model (ids are code points).
pub const SYNTHETIC_SCRIPTS: [(&str, u32, u32); 2] = [("A", 0x00, 0x63), ("B", 0x80, 0xE3)];

impl UnicodeScriptTable {
    /// The checked-in table.
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN).expect("bundled script table is valid")
    }

    /// Builtin table plus the two synthetic token-range languages.
    pub fn with_synthetic() -> Self {
        let mut t = Self::builtin();
        for (lang, first, last) in SYNTHETIC_SCRIPTS {
            let script = format!("synthetic-{}", lang.to_lowercase());
            t.scripts.insert(
                script.clone(),
                vec![ScriptBlock::new(format!("Synthetic {lang}"), first, last)],
            );
            t.languages.insert(lang.to_string(), vec![script]);
        }
        t
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    /// Blocks within a script must be sorted and disjoint; languages must
    /// refer to known scripts.
    pub fn validate(&self) -> Result<()> {
        for (name, blocks) in &self.scripts {
            for b in blocks {
                if b.first > b.last || b.last > 0x10FFFF {
                    return Err(Error::InvalidInput(format!(
                        "script {name}: bad block {}",
                        b.name
                    )));
                }
            }
            let mut sorted: Vec<_> = blocks.iter().collect();
            sorted.sort_by_key(|b| b.first);
            if sorted.windows(2).any(|w| w[0].last >= w[1].first) {
                return Err(Error::InvalidInput(format!(
                    "script {name}: overlapping blocks"
                )));
            }
        }
        for (lang, scripts) in &self.languages {
            if let Some(s) = scripts.iter().find(|s| !self.scripts.contains_key(*s)) {
                return Err(Error::InvalidInput(format!(
                    "language {lang} uses unknown script {s}"
                )));
            }
        }
        Ok(())
    }

    pub fn knows(&self, lang: &str) -> bool {
        self.languages.contains_key(lang)
    }

    pub fn script_contains(&self, script: &str, c: char) -> bool {
        self.scripts
            .get(script)
            .is_some_and(|bs| bs.iter().any(|b| b.contains(c)))
    }

    /// Whether `c` lies in one of the scripts of `lang`.
    pub fn allows(&self, lang: &str, c: char) -> bool {
        self.languages
            .get(lang)
            .is_some_and(|ss| ss.iter().any(|s| self.script_contains(s, c)))
    }

    /// All blocks usable by `lang`, sorted by start.
    pub fn ranges(&self, lang: &str) -> Vec<(u32, u32)> {
        let mut r: Vec<(u32, u32)> = self
            .languages
            .get(lang)
            .into_iter()
            .flatten()
            .flat_map(|s| self.scripts[s].iter().map(|b| (b.first, b.last)))
            .collect();
        r.sort_unstable();
        r
    }
}
