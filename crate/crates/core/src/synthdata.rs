//! Deterministic toy corpora and lexicons.
//!
//! * `gen_separable`: every surface word has one fixed tag.
//! * `gen_sememe_critical`: both types share the same contexts and use
//!   disjoint entity words per split, so only the lexicon tells the types apart.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    expand_labels, load_conll, load_schema, write_conll, write_surface_forms, Dataset, LabelSchema, Sentence,
    DEFAULT_DESCRIPTION_LEN,
};
use crate::error::{Error, Result};
use crate::lexicon::SememeLexicon;

/// Bumped whenever generator output changes for a given seed.
pub const GENERATOR_VERSION: u32 = 1;

const TYPES: [(&str, &str, [&str; 3]); 6] = [
    ("PER", "person", ["human", "name", "family"]),
    ("LOC", "location", ["place", "land", "region"]),
    ("ORG", "organization", ["institution", "group", "office"]),
    ("EVT", "event", ["fact", "time", "occasion"]),
    ("PRD", "product", ["artifact", "goods", "tool"]),
    ("LAW", "law", ["rule", "document", "regulation"]),
];

const FILLERS: [&str; 12] = [
    "the", "report", "said", "on", "and", "visited", "today", "with", "a", "new", "from", "near",
];

struct TypeSpec {
    name: String,
    form: String,
    sememes: Vec<String>,
    stem: String,
}

fn type_spec(t: usize) -> TypeSpec {
    match TYPES.get(t) {
        Some((name, form, sem)) => TypeSpec {
            name: name.to_string(),
            form: form.to_string(),
            sememes: sem.iter().map(|s| s.to_string()).collect(),
            stem: name.to_lowercase(),
        },
        None => TypeSpec {
            name: format!("T{t}"),
            form: format!("type {t}"),
            sememes: (0..3).map(|j| format!("t{t}sem{j}")).collect(),
            stem: format!("t{t}"),
        },
    }
}

fn schema_for(specs: &[TypeSpec]) -> Result<LabelSchema> {
    let names: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
    let forms: BTreeMap<String, String> = specs.iter().map(|s| (s.name.clone(), s.form.clone())).collect();
    expand_labels(&names, &forms, DEFAULT_DESCRIPTION_LEN)
}

fn split_sizes(n: usize) -> (usize, usize) {
    let held = (n / 2).max(1);
    (held, held)
}

const HEADS_PER_TYPE: usize = 4;
const TAILS_PER_TYPE: usize = 3;

fn separable_sentence(rng: &mut ChaCha8Rng, id: usize, num_types: usize, schema: &LabelSchema) -> Sentence {
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let entities = rng.gen_range(1..=2);
    let fillers = rng.gen_range(2..=5);
    let mut slots: Vec<bool> = (0..fillers + entities).map(|i| i < entities).collect();
    slots.shuffle(rng);
    for is_entity in slots {
        if is_entity {
            let t = rng.gen_range(0..num_types);
            let stem = type_spec(t).stem;
            tokens.push(format!("{stem}{}", rng.gen_range(0..HEADS_PER_TYPE)));
            tags.push(schema.begin_id(t));
            if rng.gen_bool(0.5) {
                tokens.push(format!("{stem}x{}", rng.gen_range(0..TAILS_PER_TYPE)));
                tags.push(schema.inside_id(t));
            }
        } else {
            tokens.push(FILLERS.choose(rng).unwrap().to_string());
            tags.push(0);
        }
    }
    Sentence {
        id,
        tokens,
        gold_tags: tags,
    }
}

/// Template sentences whose words each carry one fixed tag, with a lexicon
/// giving every entity word sememes of its type.
pub fn gen_separable(num_sentences: usize, num_types: usize, seed: u64) -> Result<(Dataset, SememeLexicon)> {
    if num_types == 0 {
        return Err(Error::Invalid("gen_separable needs at least one entity type".into()));
    }
    let specs: Vec<TypeSpec> = (0..num_types).map(type_spec).collect();
    let schema = schema_for(&specs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_dev, n_test) = split_sizes(num_sentences);
    let split = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Sentence> {
        (0..n).map(|i| separable_sentence(rng, i, num_types, &schema)).collect()
    };
    let train = split(num_sentences, &mut rng);
    let dev = split(n_dev, &mut rng);
    let test = split(n_test, &mut rng);

    let mut sememes = Vec::new();
    let mut words = Vec::new();
    for spec in &specs {
        sememes.extend(spec.sememes.iter().cloned());
        for j in 0..HEADS_PER_TYPE {
            let mut pick = spec.sememes.clone();
            pick.shuffle(&mut rng);
            pick.truncate(2);
            words.push((format!("{}{j}", spec.stem), pick));
        }
        for j in 0..TAILS_PER_TYPE {
            words.push((
                format!("{}x{j}", spec.stem),
                vec![spec.sememes[j % spec.sememes.len()].clone()],
            ));
        }
    }
    let lexicon = SememeLexicon::new(sememes, words)?;
    Ok((
        Dataset {
            schema,
            train,
            dev,
            test,
        },
        lexicon,
    ))
}

const CRITICAL_TYPES: [(&str, &str, [&str; 6]); 2] = [
    ("ANI", "animal", ["animal", "fauna", "beast", "wing", "fur", "hoof"]),
    ("PLA", "plant", ["plant", "flora", "leaf", "root", "bloom", "seed"]),
];

const TEMPLATES: [&[&str]; 6] = [
    &["we", "saw", "the", "*", "near", "the", "river"],
    &["a", "*", "was", "found", "in", "the", "field"],
    &["the", "*", "appeared", "after", "the", "rain"],
    &["they", "photographed", "one", "*", "yesterday"],
    &["near", "the", "hill", "a", "*", "was", "seen"],
    &["every", "*", "in", "the", "valley", "was", "counted"],
];

/// Entity words per type in each split.
pub const CRITICAL_WORDS_PER_SPLIT: usize = 24;
const SEMEMES_PER_WORD: usize = 3;

/// Two entity types placed in the same templates. Entity words are opaque
/// tokens drawn from disjoint train, dev and test pools, and each word lists
/// sememes from its type's set only.
pub fn gen_sememe_critical(num_sentences: usize, seed: u64) -> Result<(Dataset, SememeLexicon)> {
    let specs: Vec<TypeSpec> = CRITICAL_TYPES
        .iter()
        .map(|(name, form, sem)| TypeSpec {
            name: name.to_string(),
            form: form.to_string(),
            sememes: sem.iter().map(|s| s.to_string()).collect(),
            stem: String::new(),
        })
        .collect();
    let schema = schema_for(&specs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // pools[split][type] -> words
    let total = 3 * 2 * CRITICAL_WORDS_PER_SPLIT;
    let mut ids: Vec<usize> = (0..total).collect();
    ids.shuffle(&mut rng);
    let mut chunks = ids.chunks(CRITICAL_WORDS_PER_SPLIT);
    let mut pools: Vec<Vec<Vec<String>>> = Vec::new();
    for _ in 0..3 {
        let mut per_type = Vec::new();
        for _ in 0..2 {
            per_type.push(chunks.next().unwrap().iter().map(|i| format!("w{i:03}")).collect());
        }
        pools.push(per_type);
    }

    let mut words = Vec::new();
    for split in &pools {
        for (t, pool) in split.iter().enumerate() {
            for w in pool {
                let mut pick = specs[t].sememes.clone();
                pick.shuffle(&mut rng);
                pick.truncate(SEMEMES_PER_WORD);
                words.push((w.clone(), pick));
            }
        }
    }
    let sememes = specs.iter().flat_map(|s| s.sememes.iter().cloned()).collect();
    let lexicon = SememeLexicon::new(sememes, words)?;

    let (n_dev, n_test) = split_sizes(num_sentences);
    let make = |n: usize, split: usize, rng: &mut ChaCha8Rng| -> Vec<Sentence> {
        (0..n)
            .map(|i| {
                let t = i % 2;
                let word = pools[split][t].choose(rng).unwrap().clone();
                let template = TEMPLATES.choose(rng).unwrap();
                let mut tokens = Vec::with_capacity(template.len());
                let mut tags = Vec::with_capacity(template.len());
                for &w in template.iter() {
                    if w == "*" {
                        tokens.push(word.clone());
                        tags.push(schema.begin_id(t));
                    } else {
                        tokens.push(w.to_string());
                        tags.push(0);
                    }
                }
                Sentence {
                    id: i,
                    tokens,
                    gold_tags: tags,
                }
            })
            .collect()
    };
    let mut train = make(num_sentences, 0, &mut rng);
    let dev = make(n_dev, 1, &mut rng);
    let test = make(n_test, 2, &mut rng);
    train.shuffle(&mut rng);
    for (i, s) in train.iter_mut().enumerate() {
        s.id = i;
    }
    Ok((
        Dataset {
            schema,
            train,
            dev,
            test,
        },
        lexicon,
    ))
}

pub const TRAIN_FILE: &str = "train.conll";
pub const DEV_FILE: &str = "dev.conll";
pub const TEST_FILE: &str = "test.conll";
pub const LABELS_FILE: &str = "labels.tsv";
pub const LEXICON_FILE: &str = "lexicon.json";

/// Writes the splits as CoNLL, the surface-form table and the lexicon JSON.
pub fn write_corpus(dir: &Path, dataset: &Dataset, lexicon: &SememeLexicon) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        (TRAIN_FILE, write_conll(&dataset.train, &dataset.schema)),
        (DEV_FILE, write_conll(&dataset.dev, &dataset.schema)),
        (TEST_FILE, write_conll(&dataset.test, &dataset.schema)),
        (LABELS_FILE, write_surface_forms(&dataset.schema)),
        (LEXICON_FILE, lexicon.to_json()?),
    ];
    for (name, text) in files {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Reads a corpus directory in the layout written by [`write_corpus`].
pub fn read_corpus(dir: &Path, description_len: usize, max_len: usize) -> Result<(Dataset, SememeLexicon)> {
    let schema = load_schema(&dir.join(LABELS_FILE), description_len)?;
    let split = |name: &str| load_conll(&dir.join(name), &schema, max_len);
    let (train, dev, test) = (split(TRAIN_FILE)?, split(DEV_FILE)?, split(TEST_FILE)?);
    let lexicon = SememeLexicon::load(&dir.join(LEXICON_FILE))?;
    Ok((
        Dataset {
            schema,
            train,
            dev,
            test,
        },
        lexicon,
    ))
}
