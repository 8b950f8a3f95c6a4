//! Linear BIO classification head, negative log-likelihood and IOB2 span decoding.

use serde::{Deserialize, Serialize};

use crate::corpus::{LabelSchema, Tag};
use crate::error::Result;
use crate::substrate::{Graph, ParamId, ParamStore, Tensor, Var};

/// Entity span, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub entity_type: usize,
}

/// IOB2 decoding. An `I-t` that does not continue a span of type `t` opens a
/// new span, so every tag sequence decodes to maximal, non-overlapping spans.
pub fn decode_spans(tags: &[usize], schema: &LabelSchema) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<Span> = None;
    for (i, &id) in tags.iter().enumerate() {
        match schema.tag(id) {
            Tag::Outside => spans.extend(open.take()),
            Tag::Begin(t) => {
                spans.extend(open.take());
                open = Some(Span {
                    start: i,
                    end: i,
                    entity_type: t,
                });
            }
            Tag::Inside(t) => match open.as_mut() {
                Some(sp) if sp.entity_type == t => sp.end = i,
                _ => {
                    spans.extend(open.take());
                    open = Some(Span {
                        start: i,
                        end: i,
                        entity_type: t,
                    });
                }
            },
        }
    }
    spans.extend(open);
    spans
}

pub const HEAD_WEIGHT: &str = "head.w";
pub const HEAD_BIAS: &str = "head.b";

/// `d_h -> L` projection feeding the BIO softmax.
#[derive(Debug, Clone, Copy)]
pub struct TagHead {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl TagHead {
    pub fn register(store: &mut ParamStore, d_h: usize, num_labels: usize) -> Result<Self> {
        let weight = store.add_normal(HEAD_WEIGHT, &[d_h, num_labels], 1.0 / (d_h as f64).sqrt(), true)?;
        let bias = store.add(HEAD_BIAS, Tensor::zeros(&[num_labels]), true)?;
        Ok(TagHead { weight, bias })
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        Ok(TagHead {
            weight: store.id(HEAD_WEIGHT)?,
            bias: store.id(HEAD_BIAS)?,
        })
    }

    /// `O W_out + b_out`, shape `n x L`.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, output: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let z = g.matmul(output, w)?;
        g.add(z, b)
    }

    /// Row-wise BIO distribution `softmax(O W_out + b_out)`.
    pub fn predict_tags(&self, g: &mut Graph, store: &ParamStore, output: Var) -> Result<Var> {
        let z = self.logits(g, store, output)?;
        g.softmax(z, 1, None)
    }
}

/// Mean gold negative log-likelihood over the non-pad rows of `probs`.
pub fn nll_loss(g: &mut Graph, probs: Var, gold: &[usize], active: &[bool]) -> Result<Var> {
    g.nll(probs, gold, active)
}

/// Row-wise argmax (first maximum wins).
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
