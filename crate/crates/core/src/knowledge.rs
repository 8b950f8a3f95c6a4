//! Residual sememe enrichment: `e = h + Σ r_i h^s_i` with distance-derived weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::substrate::{Graph, Var};

/// Offset keeping `1 / d` finite when a sememe coincides with the word.
pub const INVERSE_DISTANCE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SememeWeighting {
    /// `r_i = d_i / Σ d_j`.
    #[default]
    Distance,
    /// `r_i ∝ 1 / (d_i + eps)`.
    InverseDistance,
}

/// Per-position sememe rows for one token sequence: `ids[i]` are the token
/// table rows of the sememes attached to position `i` (possibly empty).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SememeBatch {
    pub ids: Vec<Vec<usize>>,
}

impl SememeBatch {
    pub fn hits(&self) -> usize {
        self.ids.iter().filter(|v| !v.is_empty()).count()
    }
}

/// Weights over the `m` rows of `sememes` (shape `m x d`) for word vector `h` (shape `d`).
pub fn sememe_weights(g: &mut Graph, h: Var, sememes: Var, mode: SememeWeighting) -> Result<Var> {
    if g.shape(sememes).first().copied().unwrap_or(0) == 0 {
        return Err(Error::Invalid("sememe_weights needs at least one sememe".into()));
    }
    let d = g.euclidean_distance_rows(h, sememes)?;
    match mode {
        SememeWeighting::Distance => g.normalize_sum(d),
        SememeWeighting::InverseDistance => {
            let inv = g.reciprocal(d, INVERSE_DISTANCE_EPS)?;
            g.normalize_sum(inv)
        }
    }
}

/// `h + Σ r_i h^s_i`; returns `h` itself when there are no sememes.
pub fn enhance_word(g: &mut Graph, h: Var, sememes: Option<Var>, mode: SememeWeighting) -> Result<Var> {
    let Some(s) = sememes.filter(|&s| g.shape(s)[0] > 0) else {
        return Ok(h);
    };
    let m = g.shape(s)[0];
    let r = sememe_weights(g, h, s, mode)?;
    let r = g.reshape(r, &[1, m])?;
    let mix = g.matmul(r, s)?;
    let d = g.shape(h)[0];
    let mix = g.reshape(mix, &[d])?;
    g.add(h, mix)
}

/// Enhances every row of `hidden` (`n x d`, or `L x l x d` flattened over
/// the leading axes) that has sememes. `lookup` turns sememe token ids into
/// an `m x d` embedding block. Rows without hits are passed through, and a
/// sequence without hits returns `hidden` unchanged.
pub fn enhance_sequence<F>(
    g: &mut Graph,
    hidden: Var,
    batch: &SememeBatch,
    mode: SememeWeighting,
    mut lookup: F,
) -> Result<Var>
where
    F: FnMut(&mut Graph, &[usize]) -> Result<Var>,
{
    let shape = g.shape(hidden).to_vec();
    let d = *shape
        .last()
        .ok_or_else(|| Error::shape("enhance_sequence", "scalar input"))?;
    let rows: usize = shape[..shape.len() - 1].iter().product();
    if batch.ids.len() != rows {
        return Err(Error::shape(
            "enhance_sequence",
            format!("{} sememe lists for {rows} rows", batch.ids.len()),
        ));
    }
    if batch.hits() == 0 {
        return Ok(hidden);
    }
    let flat = g.reshape(hidden, &[rows, d])?;
    let mut parts = Vec::new();
    let mut run_start = 0;
    for (i, ids) in batch.ids.iter().enumerate() {
        if ids.is_empty() {
            continue;
        }
        if run_start < i {
            parts.push(g.slice(flat, 0, run_start, i)?);
        }
        let row = g.slice(flat, 0, i, i + 1)?;
        let h = g.reshape(row, &[d])?;
        let s = lookup(g, ids)?;
        let e = enhance_word(g, h, Some(s), mode)?;
        parts.push(g.reshape(e, &[1, d])?);
        run_start = i + 1;
    }
    if run_start < rows {
        parts.push(g.slice(flat, 0, run_start, rows)?);
    }
    let out = g.concat(&parts, 0)?;
    g.reshape(out, &shape)
}
