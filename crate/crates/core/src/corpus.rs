//! Sentences, BIO label schemas, CoNLL column files and k-shot sampling.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tagger::decode_spans;

/// Placeholder word filling description slots past the real tokens.
pub const PAD_TOKEN: &str = "[PAD]";
pub const OUTSIDE_LABEL: &str = "O";
pub const DEFAULT_MAX_LEN: usize = 128;
pub const DEFAULT_DESCRIPTION_LEN: usize = 10;

/// Role of a BIO tag id within a schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    Outside,
    Begin(usize),
    Inside(usize),
}

/// BIO label universe with natural-language label descriptions.
///
/// Tag ids are laid out as `O`, then `B-t`, `I-t` for each entity type in
/// order, so `L = 2 * types + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSchema {
    pub entity_types: Vec<String>,
    pub bio_labels: Vec<String>,
    /// Description words per BIO label, truncated to `l` (unpadded).
    pub descriptions: Vec<Vec<String>>,
    pub l: usize,
}

impl LabelSchema {
    pub fn num_labels(&self) -> usize {
        self.bio_labels.len()
    }

    pub fn num_types(&self) -> usize {
        self.entity_types.len()
    }

    pub fn tag_id(&self, label: &str) -> Option<usize> {
        self.bio_labels.iter().position(|l| l == label)
    }

    pub fn label(&self, id: usize) -> &str {
        &self.bio_labels[id]
    }

    pub fn tag(&self, id: usize) -> Tag {
        match id {
            0 => Tag::Outside,
            i if i % 2 == 1 => Tag::Begin((i - 1) / 2),
            i => Tag::Inside((i - 2) / 2),
        }
    }

    pub fn begin_id(&self, entity_type: usize) -> usize {
        1 + 2 * entity_type
    }

    pub fn inside_id(&self, entity_type: usize) -> usize {
        2 + 2 * entity_type
    }

    /// Description of label `j` padded to exactly `l` words, with a {0,1}
    /// mask marking real words.
    pub fn padded_description(&self, j: usize) -> (Vec<String>, Vec<f64>) {
        let real = &self.descriptions[j];
        let mut words = real.clone();
        let mut mask = vec![1.0; real.len()];
        words.resize(self.l, PAD_TOKEN.to_owned());
        mask.resize(self.l, 0.0);
        (words, mask)
    }
}

fn description_words(text: &str, l: usize) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).take(l).collect()
}

/// Builds the BIO schema: `B-t` reads "begin of <form>", `I-t` reads
/// "inside of <form>" and `O` reads "others".
pub fn expand_labels(
    entity_types: &[String],
    surface_forms: &BTreeMap<String, String>,
    l: usize,
) -> Result<LabelSchema> {
    if l == 0 {
        return Err(Error::Invalid("description length l must be positive".into()));
    }
    let mut bio_labels = vec![OUTSIDE_LABEL.to_owned()];
    let mut descriptions = vec![description_words("others", l)];
    for t in entity_types {
        let form = surface_forms
            .get(t)
            .ok_or_else(|| Error::MissingSurfaceForm(t.clone()))?;
        bio_labels.push(format!("B-{t}"));
        descriptions.push(description_words(&format!("begin of {form}"), l));
        bio_labels.push(format!("I-{t}"));
        descriptions.push(description_words(&format!("inside of {form}"), l));
    }
    Ok(LabelSchema {
        entity_types: entity_types.to_vec(),
        bio_labels,
        descriptions,
        l,
    })
}

/// Parses a `TYPE<TAB>surface form` table, preserving line order.
pub fn parse_surface_forms(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (ty, form) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            msg: "expected `TYPE<TAB>surface form`".into(),
        })?;
        out.push((ty.trim().to_owned(), form.trim().to_owned()));
    }
    Ok(out)
}

/// Reads a surface-form table and expands it into a schema.
pub fn load_schema(path: &Path, l: usize) -> Result<LabelSchema> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let pairs = parse_surface_forms(&text, path)?;
    let types: Vec<String> = pairs.iter().map(|(t, _)| t.clone()).collect();
    let forms: BTreeMap<String, String> = pairs.into_iter().collect();
    expand_labels(&types, &forms, l)
}

pub fn write_surface_forms(schema: &LabelSchema) -> String {
    let mut out = String::new();
    for (t, j) in schema.entity_types.iter().zip((1..).step_by(2)) {
        // "begin of <form>" -> "<form>"
        let form = schema.descriptions[j][2..].join(" ");
        out.push_str(&format!("{t}\t{form}\n"));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: usize,
    pub tokens: Vec<String>,
    pub gold_tags: Vec<usize>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: LabelSchema,
    pub train: Vec<Sentence>,
    pub dev: Vec<Sentence>,
    pub test: Vec<Sentence>,
}

/// Parses CoNLL column text (`surface<TAB>tag`, blank line between
/// sentences). Sentences longer than `max_len` are truncated.
pub fn parse_conll(text: &str, path: &Path, schema: &LabelSchema, max_len: usize) -> Result<Vec<Sentence>> {
    let mut sentences = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<usize>, line: usize| {
        if tokens.is_empty() {
            return;
        }
        if tokens.len() > max_len {
            warn!(
                "{}: sentence ending at line {line} has {} tokens, truncated to {max_len}",
                path.display(),
                tokens.len()
            );
            tokens.truncate(max_len);
            tags.truncate(max_len);
        }
        sentences.push(Sentence {
            id: sentences.len(),
            tokens: std::mem::take(tokens),
            gold_tags: std::mem::take(tags),
        });
    };
    let mut last = 0;
    for (i, raw) in text.lines().enumerate() {
        last = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut tokens, &mut tags, i + 1);
            continue;
        }
        let mut cols = line.split('\t');
        let (Some(surface), Some(tag)) = (cols.next(), cols.next()) else {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                msg: "expected `surface<TAB>tag`".into(),
            });
        };
        let id = schema.tag_id(tag.trim()).ok_or_else(|| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            msg: format!("unknown tag `{}`", tag.trim()),
        })?;
        tokens.push(surface.to_owned());
        tags.push(id);
    }
    flush(&mut tokens, &mut tags, last);
    Ok(sentences)
}

pub fn load_conll(path: &Path, schema: &LabelSchema, max_len: usize) -> Result<Vec<Sentence>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_conll(&text, path, schema, max_len)
}

pub fn write_conll(sentences: &[Sentence], schema: &LabelSchema) -> String {
    let mut out = String::new();
    for s in sentences {
        for (tok, &tag) in s.tokens.iter().zip(&s.gold_tags) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(schema.label(tag));
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// CoNLL with a third column holding predicted tags.
pub fn write_predictions(sentences: &[Sentence], predictions: &[Vec<usize>], schema: &LabelSchema) -> String {
    let mut out = String::new();
    for (s, pred) in sentences.iter().zip(predictions) {
        for ((tok, &gold), &p) in s.tokens.iter().zip(&s.gold_tags).zip(pred) {
            out.push_str(&format!("{tok}\t{}\t{}\n", schema.label(gold), schema.label(p)));
        }
        out.push('\n');
    }
    out
}

/// A k-shot training subset drawn from a train split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KShotSample {
    pub seed: u64,
    pub k: usize,
    #[serde(rename = "ids")]
    pub selected: Vec<usize>,
    #[serde(rename = "counts")]
    pub per_type_counts: BTreeMap<String, usize>,
    /// Types with no occurrence in the source split.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unsatisfiable: Vec<String>,
}

impl KShotSample {
    pub fn sentences<'a>(&self, train: &'a [Sentence]) -> Vec<&'a Sentence> {
        self.selected.iter().map(|&i| &train[i]).collect()
    }
}

fn entity_types_in(s: &Sentence, schema: &LabelSchema) -> Vec<usize> {
    decode_spans(&s.gold_tags, schema)
        .into_iter()
        .map(|sp| sp.entity_type)
        .collect()
}

/// Greedy k-shot sampler: walks a seed-shuffled permutation of `train` and
/// keeps a sentence iff one of its entities belongs to a type still below
/// `k`. Counts are updated with every entity of a kept sentence, so some
/// types may end above `k`. Returned ids are positions in `train`.
pub fn sample_kshot(train: &[Sentence], schema: &LabelSchema, k: usize, seed: u64) -> KShotSample {
    let types: Vec<Vec<usize>> = train.iter().map(|s| entity_types_in(s, schema)).collect();
    let mut present = vec![false; schema.num_types()];
    for t in types.iter().flatten() {
        present[*t] = true;
    }
    let mut counts = vec![0usize; schema.num_types()];
    let mut selected = Vec::new();
    if k > 0 {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        for i in order {
            let done = (0..counts.len()).all(|t| !present[t] || counts[t] >= k);
            if done {
                break;
            }
            if types[i].iter().any(|&t| counts[t] < k) {
                for &t in &types[i] {
                    counts[t] += 1;
                }
                selected.push(i);
            }
        }
    }
    KShotSample {
        seed,
        k,
        selected,
        per_type_counts: schema.entity_types.iter().cloned().zip(counts).collect(),
        unsatisfiable: schema
            .entity_types
            .iter()
            .zip(&present)
            .filter(|(_, &p)| !p)
            .map(|(t, _)| t.clone())
            .collect(),
    }
}

/// `n` distinct seeds derived from `master`.
pub fn derive_seeds(master: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let s = rng.next_u64();
        if seen.insert(s) {
            out.push(s);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodePlan {
    pub master_seed: u64,
    pub k: usize,
    pub episodes: Vec<KShotSample>,
}

pub fn episode_plan(
    train: &[Sentence],
    schema: &LabelSchema,
    k: usize,
    num_seeds: usize,
    master_seed: u64,
) -> Result<EpisodePlan> {
    if num_seeds == 0 {
        return Err(Error::Invalid("num_seeds must be at least 1".into()));
    }
    let episodes = derive_seeds(master_seed, num_seeds)
        .into_iter()
        .map(|seed| sample_kshot(train, schema, k, seed))
        .collect();
    Ok(EpisodePlan {
        master_seed,
        k,
        episodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema(types: &[(&str, &str)]) -> LabelSchema {
        let names: Vec<String> = types.iter().map(|(t, _)| t.to_string()).collect();
        let forms = types.iter().map(|(t, f)| (t.to_string(), f.to_string())).collect();
        expand_labels(&names, &forms, DEFAULT_DESCRIPTION_LEN).unwrap()
    }

    #[test]
    fn expands_person() {
        let s = schema(&[("PER", "person")]);
        assert_eq!(s.bio_labels, ["O", "B-PER", "I-PER"]);
        assert_eq!(s.descriptions[1], ["begin", "of", "person"]);
        assert_eq!(s.descriptions[2], ["inside", "of", "person"]);
        assert_eq!(s.descriptions[0], ["others"]);
        let (words, mask) = s.padded_description(0);
        assert_eq!(words.len(), 10);
        assert_eq!(mask.iter().filter(|&&m| m == 0.0).count(), 9);
    }

    #[test]
    fn expands_multiword_form() {
        let s = schema(&[("DNA", "deoxyribonucleic acid")]);
        assert_eq!(s.descriptions[1].join(" "), "begin of deoxyribonucleic acid");
    }

    #[test]
    fn empty_type_list_is_outside_only() {
        let s = schema(&[]);
        assert_eq!(s.num_labels(), 1);
        assert_eq!(s.descriptions, vec![vec!["others".to_string()]]);
    }

    #[test]
    fn missing_surface_form_names_type() {
        let err = expand_labels(&["GENE".into()], &BTreeMap::new(), 10).unwrap_err();
        assert!(err.to_string().contains("GENE"));
    }

    #[test]
    fn tag_layout() {
        let s = schema(&[("PER", "person"), ("LOC", "location")]);
        assert_eq!(s.tag(0), Tag::Outside);
        assert_eq!(s.tag(3), Tag::Begin(1));
        assert_eq!(s.tag(4), Tag::Inside(1));
        assert_eq!(s.label(s.begin_id(1)), "B-LOC");
        assert_eq!(s.label(s.inside_id(0)), "I-PER");
    }

    #[test]
    fn parses_two_line_file() {
        let s = schema(&[("ORG", "organization")]);
        let out = parse_conll("EU\tB-ORG\nrejects\tO\n\n", Path::new("x"), &s, 128).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].tokens, ["EU", "rejects"]);
        assert_eq!(out[0].gold_tags, [1, 0]);
    }

    #[test]
    fn unknown_tag_reports_line() {
        let s = schema(&[("ORG", "organization")]);
        let err = parse_conll("EU\tB-ORG\n\nX\tB-XYZ\n", Path::new("f.conll"), &s, 128).unwrap_err();
        match err {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 3);
                assert!(msg.contains("B-XYZ"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_split() {
        let s = schema(&[]);
        assert!(parse_conll("", Path::new("x"), &s, 128).unwrap().is_empty());
    }

    #[test]
    fn long_sentences_truncated() {
        let s = schema(&[]);
        let text = "a\tO\nb\tO\nc\tO\n";
        let out = parse_conll(text, Path::new("x"), &s, 2).unwrap();
        assert_eq!(out[0].tokens, ["a", "b"]);
    }

    #[test]
    fn surface_form_table_round_trips() {
        let s = schema(&[("PER", "person"), ("cell_type", "cell type")]);
        let text = write_surface_forms(&s);
        assert_eq!(text, "PER\tperson\ncell_type\tcell type\n");
        let pairs = parse_surface_forms(&text, Path::new("x")).unwrap();
        assert_eq!(pairs[1], ("cell_type".into(), "cell type".into()));
    }

    /// 3 types x 10 single-entity sentences; greedy counting by hand.
    #[test]
    fn kshot_counting_oracle() {
        let s = schema(&[("A", "a"), ("B", "b"), ("C", "c")]);
        let mut train = Vec::new();
        for t in 0..3 {
            for _ in 0..10 {
                train.push(Sentence {
                    id: train.len(),
                    tokens: vec!["w".into(), "x".into()],
                    gold_tags: vec![s.begin_id(t), 0],
                });
            }
        }
        let sample = sample_kshot(&train, &s, 5, 9);
        assert_eq!(sample.selected.len(), 15);
        assert!(sample.per_type_counts.values().all(|&c| c == 5));
        assert!(sample.unsatisfiable.is_empty());
    }

    #[test]
    fn kshot_zero_is_empty() {
        let s = schema(&[("A", "a")]);
        let train = vec![Sentence {
            id: 0,
            tokens: vec!["w".into()],
            gold_tags: vec![1],
        }];
        assert!(sample_kshot(&train, &s, 0, 1).selected.is_empty());
    }

    #[test]
    fn kshot_reports_unsatisfiable() {
        let s = schema(&[("A", "a"), ("B", "b")]);
        let train = vec![Sentence {
            id: 0,
            tokens: vec!["w".into()],
            gold_tags: vec![1],
        }];
        let sample = sample_kshot(&train, &s, 3, 1);
        assert_eq!(sample.unsatisfiable, ["B"]);
        assert_eq!(sample.per_type_counts["A"], 1);
    }

    #[test]
    fn plan_seeds_distinct_and_deterministic() {
        let s = schema(&[("A", "a")]);
        let train: Vec<Sentence> = (0..20)
            .map(|i| Sentence {
                id: i,
                tokens: vec!["w".into()],
                gold_tags: vec![1],
            })
            .collect();
        let p = episode_plan(&train, &s, 2, 5, 42).unwrap();
        assert_eq!(p.episodes.len(), 5);
        let seeds: HashSet<u64> = p.episodes.iter().map(|e| e.seed).collect();
        assert_eq!(seeds.len(), 5);
        assert_eq!(p, episode_plan(&train, &s, 2, 5, 42).unwrap());
        assert_eq!(episode_plan(&train, &s, 2, 1, 42).unwrap().episodes.len(), 1);
        assert!(episode_plan(&train, &s, 2, 0, 42).is_err());

        let json = serde_json::to_value(&p).unwrap();
        assert!(json["episodes"][0]["ids"].is_array());
        assert!(json["episodes"][0]["counts"]["A"].is_number());
    }
}
