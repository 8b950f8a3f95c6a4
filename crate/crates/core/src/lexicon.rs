//! Word-to-sememe knowledge base with a HowNet-compatible JSON shape.
//!
//! Document layout:
//!
//! ```json
//! {"sememes": ["fruit", "place"], "words": {"apple": ["fruit"]}}
//! ```
//!
//! A word may also list senses as nested arrays (`"bank": [["place"], ["institution"]]`);
//! senses are flattened into one order-stable, deduplicated sememe set.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SememeLexicon {
    sememe_vocab: Vec<String>,
    entries: HashMap<String, Vec<usize>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum WordEntry {
    Flat(Vec<String>),
    Senses(Vec<Vec<String>>),
}

impl WordEntry {
    fn names(&self) -> Vec<&str> {
        match self {
            WordEntry::Flat(v) => v.iter().map(String::as_str).collect(),
            WordEntry::Senses(s) => s.iter().flatten().map(String::as_str).collect(),
        }
    }
}

/// JSON object read as an ordered list, keeping repeated keys.
#[derive(Debug, Clone)]
struct OrderedPairs(Vec<(String, WordEntry)>);

impl<'de> Deserialize<'de> for OrderedPairs {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct PairsVisitor;
        impl<'de> Visitor<'de> for PairsVisitor {
            type Value = OrderedPairs;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map from word to sememe names")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, WordEntry>()? {
                    out.push((k, v));
                }
                Ok(OrderedPairs(out))
            }
        }
        d.deserialize_map(PairsVisitor)
    }
}

#[derive(Debug, Deserialize)]
struct LexiconDoc {
    sememes: Vec<String>,
    words: OrderedPairs,
}

#[derive(Serialize)]
struct LexiconOut<'a> {
    sememes: &'a [String],
    words: BTreeMap<&'a str, Vec<&'a str>>,
}

/// Problems found while reading a lexicon document.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LexiconValidation {
    /// `(word, sememe name)` pairs naming an undeclared sememe.
    pub dangling: Vec<(String, String)>,
    /// Words appearing more than once after case folding.
    pub duplicate_words: Vec<String>,
    /// Sememe names declared more than once in the vocabulary.
    pub duplicate_sememes: Vec<String>,
    /// `(word, sememe name)` pairs listed more than once for the same word.
    pub repeated_sememes: Vec<(String, String)>,
}

impl LexiconValidation {
    pub fn is_clean(&self) -> bool {
        self.dangling.is_empty()
            && self.duplicate_words.is_empty()
            && self.duplicate_sememes.is_empty()
            && self.repeated_sememes.is_empty()
    }
}

pub fn normalize(word: &str) -> String {
    word.to_lowercase()
}

impl SememeLexicon {
    /// Builds a lexicon from `(word, sememe names)` pairs. Unknown sememe
    /// names are an error.
    pub fn new<W, S>(sememes: Vec<String>, words: W) -> Result<Self>
    where
        W: IntoIterator<Item = (String, Vec<S>)>,
        S: AsRef<str>,
    {
        let (lex, report) = Self::build(
            sememes,
            words
                .into_iter()
                .map(|(w, names)| (w, names.iter().map(|n| n.as_ref().to_owned()).collect()))
                .collect(),
        );
        if let Some((w, s)) = report.dangling.first() {
            return Err(Error::Lexicon(format!("word `{w}` references unknown sememe `{s}`")));
        }
        Ok(lex)
    }

    fn build(sememes: Vec<String>, words: Vec<(String, Vec<String>)>) -> (Self, LexiconValidation) {
        let mut report = LexiconValidation::default();
        let mut vocab: Vec<String> = Vec::new();
        let mut ids: HashMap<String, usize> = HashMap::new();
        for s in sememes {
            if ids.contains_key(&s) {
                report.duplicate_sememes.push(s);
                continue;
            }
            ids.insert(s.clone(), vocab.len());
            vocab.push(s);
        }
        let mut entries: HashMap<String, Vec<usize>> = HashMap::new();
        for (word, names) in words {
            let key = normalize(&word);
            if entries.contains_key(&key) && !report.duplicate_words.contains(&key) {
                report.duplicate_words.push(key.clone());
            }
            let list = entries.entry(key).or_default();
            for name in names {
                match ids.get(&name) {
                    None => report.dangling.push((word.clone(), name)),
                    Some(&id) if list.contains(&id) => {
                        report.repeated_sememes.push((word.clone(), name));
                    }
                    Some(&id) => list.push(id),
                }
            }
        }
        (
            SememeLexicon {
                sememe_vocab: vocab,
                entries,
            },
            report,
        )
    }

    fn parse(text: &str) -> Result<(Self, LexiconValidation)> {
        let doc: LexiconDoc =
            serde_json::from_str(text).map_err(|e| Error::Lexicon(format!("malformed document: {e}")))?;
        let words = doc
            .words
            .0
            .into_iter()
            .map(|(w, e)| (w, e.names().into_iter().map(str::to_owned).collect()))
            .collect();
        Ok(Self::build(doc.sememes, words))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let (lex, report) = Self::parse(text)?;
        if let Some((w, s)) = report.dangling.first() {
            return Err(Error::Lexicon(format!("word `{w}` references unknown sememe `{s}`")));
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// Reports dangling names and duplicates without rejecting the document.
    pub fn validate(text: &str) -> Result<LexiconValidation> {
        Ok(Self::parse(text)?.1)
    }

    pub fn to_json(&self) -> Result<String> {
        let out = LexiconOut {
            sememes: &self.sememe_vocab,
            words: self
                .entries
                .iter()
                .map(|(w, ids)| (w.as_str(), ids.iter().map(|&i| self.sememe_vocab[i].as_str()).collect()))
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&out)?)
    }

    /// Sememe ids for `word` after case folding; empty when absent.
    pub fn lookup(&self, word: &str) -> &[usize] {
        self.entries.get(&normalize(word)).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn sememe_name(&self, id: usize) -> &str {
        &self.sememe_vocab[id]
    }

    pub fn sememes(&self) -> &[String] {
        &self.sememe_vocab
    }

    pub fn num_entries(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
