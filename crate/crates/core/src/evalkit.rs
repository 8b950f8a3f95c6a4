//! Exact-match span metrics, seed aggregation and an independent tag-level oracle.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{LabelSchema, Sentence};
use crate::error::{Error, Result};
use crate::tagger::{decode_spans, Span};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    #[serde(rename = "P")]
    pub precision: f64,
    #[serde(rename = "R")]
    pub recall: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
}

/// Match counts, summed over sentences for corpus-level micro scores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanCounts {
    pub true_positive: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl SpanCounts {
    pub fn add(&mut self, other: SpanCounts) {
        self.true_positive += other.true_positive;
        self.predicted += other.predicted;
        self.gold += other.gold;
    }

    pub fn prf(&self) -> Prf {
        let precision = match (self.predicted, self.gold) {
            (0, 0) => 1.0,
            (0, _) => 0.0,
            (p, _) => self.true_positive as f64 / p as f64,
        };
        let recall = match self.gold {
            0 => 1.0,
            g => self.true_positive as f64 / g as f64,
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf { precision, recall, f1 }
    }
}

fn check(spans: &[Span]) -> Result<HashSet<Span>> {
    let mut set = HashSet::with_capacity(spans.len());
    for s in spans {
        if s.start > s.end {
            return Err(Error::Invalid(format!("malformed span {}..{}", s.start, s.end)));
        }
        set.insert(*s);
    }
    Ok(set)
}

pub fn span_counts(gold: &[Span], pred: &[Span]) -> Result<SpanCounts> {
    let gold = check(gold)?;
    let pred = check(pred)?;
    Ok(SpanCounts {
        true_positive: gold.intersection(&pred).count(),
        predicted: pred.len(),
        gold: gold.len(),
    })
}

/// Exact `(start, end, type)` matching. Empty sets: `P = 1` iff both are
/// empty, `R = 1` whenever gold is empty.
pub fn span_prf(gold: &[Span], pred: &[Span]) -> Result<Prf> {
    Ok(span_counts(gold, pred)?.prf())
}

/// Micro-averaged scores over a corpus given predicted tag sequences.
pub fn corpus_prf(sentences: &[Sentence], predictions: &[Vec<usize>], schema: &LabelSchema) -> Result<Prf> {
    if sentences.len() != predictions.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} sentences",
            predictions.len(),
            sentences.len()
        )));
    }
    let mut total = SpanCounts::default();
    for (s, p) in sentences.iter().zip(predictions) {
        total.add(span_counts(
            &decode_spans(&s.gold_tags, schema),
            &decode_spans(p, schema),
        )?);
    }
    Ok(total.prf())
}

/// Arithmetic mean and population standard deviation.
pub fn aggregate(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Invalid("cannot aggregate an empty list".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Same scores as `span_prf ∘ decode_spans`, computed from label strings with
/// a separate scanner and a pairwise matcher.
pub fn oracle_prf(gold: &[usize], pred: &[usize], schema: &LabelSchema) -> Prf {
    let g = oracle_chunks(gold, schema);
    let p = oracle_chunks(pred, schema);
    let mut tp = 0;
    for a in &p {
        if g.iter().any(|b| b == a) {
            tp += 1;
        }
    }
    let (np, ng) = (p.len() as f64, g.len() as f64);
    let precision = if p.is_empty() {
        if g.is_empty() {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / np
    };
    let recall = if g.is_empty() { 1.0 } else { tp as f64 / ng };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Prf { precision, recall, f1 }
}

fn oracle_chunks(tags: &[usize], schema: &LabelSchema) -> Vec<(usize, usize, String)> {
    let labels: Vec<&str> = tags.iter().map(|&t| schema.label(t)).collect();
    let mut chunks = Vec::new();
    let mut i = 0;
    while i < labels.len() {
        let Some((_, ty)) = labels[i].split_once('-') else {
            i += 1;
            continue;
        };
        let mut j = i + 1;
        while j < labels.len() && labels[j].strip_prefix("I-") == Some(ty) {
            j += 1;
        }
        chunks.push((i, j - 1, ty.to_string()));
        i = j;
    }
    chunks
}

/// Predicts each word's most frequent training tag (ties to the smaller id),
/// `O` for unseen words.
pub fn majority_tag_baseline(train: &[Sentence], test: &[Sentence]) -> Vec<Vec<usize>> {
    let mut counts: HashMap<&str, HashMap<usize, usize>> = HashMap::new();
    for s in train {
        for (w, &t) in s.tokens.iter().zip(&s.gold_tags) {
            *counts.entry(w.as_str()).or_default().entry(t).or_default() += 1;
        }
    }
    let best: HashMap<&str, usize> = counts
        .into_iter()
        .map(|(w, c)| {
            let t = c
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(t, _)| t)
                .unwrap_or(0);
            (w, t)
        })
        .collect();
    test.iter()
        .map(|s| {
            s.tokens
                .iter()
                .map(|w| best.get(w.as_str()).copied().unwrap_or(0))
                .collect()
        })
        .collect()
}
