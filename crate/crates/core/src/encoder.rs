//! Shared embedding table and a pre-LN transformer encoder that takes a
//! fresh prompt block at each layer.
//!
//! Layer `i` consumes `[Q_i; O_{i-1}]` (with `O_0` the text embeddings) and
//! only the trailing text rows of its output are carried forward, so prompt
//! outputs never leak between layers.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabelSchema, PAD_TOKEN};
use crate::error::{Error, Result};
use crate::substrate::{Graph, ParamId, ParamStore, Tensor, Var};

pub const UNK_TOKEN: &str = "[UNK]";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_h: usize,
    /// Number of layers, which is also the prompt depth.
    pub n_p: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    /// Filled from the run config's top-level `dropout`.
    #[serde(skip)]
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_h: 32,
            n_p: 2,
            heads: 2,
            d_ff: 64,
            max_len: 128,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 || self.heads == 0 || !self.d_h.is_multiple_of(self.heads) {
            return Err(Error::Invalid(format!(
                "encoder.d_h ({}) must be a positive multiple of encoder.heads ({})",
                self.d_h, self.heads
            )));
        }
        if self.n_p == 0 {
            return Err(Error::Invalid("encoder.n_p must be at least 1".into()));
        }
        if self.d_ff == 0 || self.max_len == 0 {
            return Err(Error::Invalid(
                "encoder.d_ff and encoder.max_len must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!(
                "encoder.dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Token vocabulary shared by text words, description words and sememe names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocab::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Ids follow first occurrence; `[PAD]` and `[UNK]` come first.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.insert(PAD_TOKEN);
        v.insert(UNK_TOKEN);
        for w in words {
            v.insert(w);
        }
        v
    }

    fn insert(&mut self, w: &str) {
        if !self.index.contains_key(w) {
            self.index.insert(w.to_owned(), self.tokens.len());
            self.tokens.push(w.to_owned());
        }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(PAD_TOKEN) || tokens.get(1).map(String::as_str) != Some(UNK_TOKEN)
        {
            return Err(Error::Invalid("vocabulary must start with [PAD], [UNK]".into()));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocab { tokens, index })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, w: &str) -> usize {
        self.index.get(w).copied().unwrap_or(UNK_ID)
    }

    pub fn ids<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }
}

pub const TOKEN_TABLE: &str = "embed.token";
pub const POSITION_TABLE: &str = "embed.position";

/// Token and learned position tables.
#[derive(Debug, Clone, Copy)]
pub struct SharedEmbedding {
    pub token: ParamId,
    pub position: ParamId,
}

impl SharedEmbedding {
    pub fn register(store: &mut ParamStore, vocab_size: usize, cfg: &EncoderConfig) -> Result<Self> {
        Ok(SharedEmbedding {
            token: store.add_normal(TOKEN_TABLE, &[vocab_size, cfg.d_h], 1.0, true)?,
            position: store.add_normal(POSITION_TABLE, &[cfg.max_len, cfg.d_h], 0.5, true)?,
        })
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        Ok(SharedEmbedding {
            token: store.id(TOKEN_TABLE)?,
            position: store.id(POSITION_TABLE)?,
        })
    }

    /// Rows of the token table alone (used for sememe names).
    pub fn lookup_tokens(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let table = g.param(store, self.token);
        g.embedding_lookup(table, ids)
    }

    /// Token plus position embeddings for one id sequence, shape `n x d_h`.
    pub fn embed_ids(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let max_len = store.get(self.position).value.shape()[0];
        if ids.is_empty() {
            return Err(Error::Invalid("cannot embed an empty sequence".into()));
        }
        if ids.len() > max_len {
            return Err(Error::Invalid(format!(
                "sequence of {} tokens exceeds max_len {max_len}",
                ids.len()
            )));
        }
        let tok = self.lookup_tokens(g, store, ids)?;
        let table = g.param(store, self.position);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = g.embedding_lookup(table, &positions)?;
        g.add(tok, pos)
    }

    /// `Hˣ` for a token sequence, with an all-ones padding mask.
    pub fn embed_text<S: AsRef<str>>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        vocab: &Vocab,
        tokens: &[S],
    ) -> Result<(Var, Tensor)> {
        let h = self.embed_ids(g, store, &vocab.ids(tokens))?;
        Ok((h, Tensor::filled(&[tokens.len()], 1.0)))
    }

    /// `H^C` of shape `L x l x d_h` and its `L x l` pad mask.
    pub fn embed_labels(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        vocab: &Vocab,
        schema: &LabelSchema,
    ) -> Result<(Var, Tensor)> {
        let mut rows = Vec::with_capacity(schema.num_labels());
        let mut mask = Vec::with_capacity(schema.num_labels() * schema.l);
        for j in 0..schema.num_labels() {
            let (words, m) = schema.padded_description(j);
            rows.push(self.embed_ids(g, store, &vocab.ids(&words))?);
            mask.extend(m);
        }
        let flat = g.concat(&rows, 0)?;
        let d = g.shape(flat)[1];
        let h = g.reshape(flat, &[schema.num_labels(), schema.l, d])?;
        Ok((h, Tensor::new(vec![schema.num_labels(), schema.l], mask)?))
    }
}

#[derive(Debug, Clone)]
struct LayerParams {
    ln1: (ParamId, ParamId),
    query: (ParamId, ParamId),
    key: (ParamId, ParamId),
    value: (ParamId, ParamId),
    out: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff_in: (ParamId, ParamId),
    ff_out: (ParamId, ParamId),
}

/// Result of one encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Final text representation `O_{n_p}`, shape `n x d_h`.
    pub output: Var,
    /// Attention probabilities per layer and head, each `T_i x T_i` where
    /// `T_i` is prompt rows plus text rows at that layer.
    pub attention: Vec<Vec<Var>>,
    /// Prompt rows fed to each layer.
    pub prompt_rows: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    layers: Vec<LayerParams>,
    final_norm: (ParamId, ParamId),
}

fn linear(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<(ParamId, ParamId)> {
    let w = store.add_normal(&format!("{name}.w"), &[d_in, d_out], 1.0 / (d_in as f64).sqrt(), true)?;
    let b = store.add(&format!("{name}.b"), Tensor::zeros(&[d_out]), true)?;
    Ok((w, b))
}

fn norm(store: &mut ParamStore, name: &str, d: usize) -> Result<(ParamId, ParamId)> {
    let g = store.add(&format!("{name}.gain"), Tensor::filled(&[d], 1.0), true)?;
    let b = store.add(&format!("{name}.bias"), Tensor::zeros(&[d]), true)?;
    Ok((g, b))
}

fn lookup_pair(store: &ParamStore, name: &str, a: &str, b: &str) -> Result<(ParamId, ParamId)> {
    Ok((store.id(&format!("{name}.{a}"))?, store.id(&format!("{name}.{b}"))?))
}

impl Encoder {
    pub fn register(store: &mut ParamStore, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_h;
        let mut layers = Vec::with_capacity(cfg.n_p);
        for i in 0..cfg.n_p {
            let p = format!("encoder.layer{i}");
            layers.push(LayerParams {
                ln1: norm(store, &format!("{p}.ln1"), d)?,
                query: linear(store, &format!("{p}.attn.query"), d, d)?,
                key: linear(store, &format!("{p}.attn.key"), d, d)?,
                value: linear(store, &format!("{p}.attn.value"), d, d)?,
                out: linear(store, &format!("{p}.attn.out"), d, d)?,
                ln2: norm(store, &format!("{p}.ln2"), d)?,
                ff_in: linear(store, &format!("{p}.ff.in"), d, cfg.d_ff)?,
                ff_out: linear(store, &format!("{p}.ff.out"), cfg.d_ff, d)?,
            });
        }
        let final_norm = norm(store, "encoder.final_norm", d)?;
        Ok(Encoder {
            cfg: cfg.clone(),
            layers,
            final_norm,
        })
    }

    pub fn from_store(store: &ParamStore, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.n_p);
        for i in 0..cfg.n_p {
            let p = format!("encoder.layer{i}");
            let lin = |n: &str| lookup_pair(store, &format!("{p}.{n}"), "w", "b");
            let ln = |n: &str| lookup_pair(store, &format!("{p}.{n}"), "gain", "bias");
            layers.push(LayerParams {
                ln1: ln("ln1")?,
                query: lin("attn.query")?,
                key: lin("attn.key")?,
                value: lin("attn.value")?,
                out: lin("attn.out")?,
                ln2: ln("ln2")?,
                ff_in: lin("ff.in")?,
                ff_out: lin("ff.out")?,
            });
        }
        Ok(Encoder {
            cfg: cfg.clone(),
            layers,
            final_norm: lookup_pair(store, "encoder.final_norm", "gain", "bias")?,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn affine(&self, g: &mut Graph, store: &ParamStore, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let wv = g.param(store, w);
        let bv = g.param(store, b);
        let y = g.matmul(x, wv)?;
        g.add(y, bv)
    }

    fn layer_norm(&self, g: &mut Graph, store: &ParamStore, x: Var, (gain, bias): (ParamId, ParamId)) -> Result<Var> {
        let gv = g.param(store, gain);
        let bv = g.param(store, bias);
        g.layer_norm(x, gv, bv, LN_EPS)
    }

    /// Runs all `n_p` layers. `prompts[i]` is the `rows x d_h` block prepended
    /// at layer `i` (`None` or zero rows for no prompt); `text_mask` marks real
    /// text positions with 1. Prompt positions are always visible as keys.
    #[allow(clippy::too_many_arguments)]
    pub fn encode_with_prompts<R: Rng>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        text: Var,
        prompts: &[Option<Var>],
        text_mask: &Tensor,
        train: bool,
        rng: &mut R,
    ) -> Result<EncoderOutput> {
        let n = g.shape(text)[0];
        if g.shape(text) != [n, self.cfg.d_h] || text_mask.shape() != [n] {
            return Err(Error::shape(
                "encode_with_prompts",
                format!(
                    "text {:?}, mask {:?}, d_h {}",
                    g.shape(text),
                    text_mask.shape(),
                    self.cfg.d_h
                ),
            ));
        }
        if prompts.len() != self.cfg.n_p {
            return Err(Error::shape(
                "encode_with_prompts",
                format!("{} prompt layers for n_p = {}", prompts.len(), self.cfg.n_p),
            ));
        }
        let mut hidden = text;
        let mut attention = Vec::with_capacity(self.cfg.n_p);
        let mut prompt_rows = Vec::with_capacity(self.cfg.n_p);
        for (layer, prompt) in self.layers.iter().zip(prompts) {
            let prompt = prompt.filter(|&q| g.shape(q)[0] > 0);
            let p = match prompt {
                Some(q) => {
                    if g.shape(q).len() != 2 || g.shape(q)[1] != self.cfg.d_h {
                        return Err(Error::shape(
                            "encode_with_prompts",
                            format!("prompt block {:?}", g.shape(q)),
                        ));
                    }
                    g.shape(q)[0]
                }
                None => 0,
            };
            let x = match prompt {
                Some(q) => g.concat(&[q, hidden], 0)?,
                None => hidden,
            };
            let mut key_mask = vec![1.0; p];
            key_mask.extend_from_slice(text_mask.data());
            let key_mask = Tensor::new(vec![p + n], key_mask)?;
            let (y, probs) = self.block(g, store, layer, x, &key_mask, train, rng)?;
            hidden = if p > 0 { g.slice(y, 0, p, p + n)? } else { y };
            attention.push(probs);
            prompt_rows.push(p);
        }
        let output = self.layer_norm(g, store, hidden, self.final_norm)?;
        Ok(EncoderOutput {
            output,
            attention,
            prompt_rows,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn block<R: Rng>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        lp: &LayerParams,
        x: Var,
        key_mask: &Tensor,
        train: bool,
        rng: &mut R,
    ) -> Result<(Var, Vec<Var>)> {
        let d = self.cfg.d_h;
        let dk = d / self.cfg.heads;
        let scale = 1.0 / (dk as f64).sqrt();

        let a = self.layer_norm(g, store, x, lp.ln1)?;
        let q = self.affine(g, store, a, lp.query)?;
        let k = self.affine(g, store, a, lp.key)?;
        let v = self.affine(g, store, a, lp.value)?;
        let mut heads = Vec::with_capacity(self.cfg.heads);
        let mut probs = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = g.slice(q, 1, h * dk, (h + 1) * dk)?;
            let kh = g.slice(k, 1, h * dk, (h + 1) * dk)?;
            let vh = g.slice(v, 1, h * dk, (h + 1) * dk)?;
            let kt = g.transpose(kh)?;
            let raw = g.matmul(qh, kt)?;
            let scores = g.scale(raw, scale)?;
            let p = g.softmax(scores, 1, Some(key_mask))?;
            probs.push(p);
            heads.push(g.matmul(p, vh)?);
        }
        let ctx = g.concat(&heads, 1)?;
        let attn = self.affine(g, store, ctx, lp.out)?;
        let attn = g.dropout(attn, self.cfg.dropout, train, rng)?;
        let x = g.add(x, attn)?;

        let b = self.layer_norm(g, store, x, lp.ln2)?;
        let f = self.affine(g, store, b, lp.ff_in)?;
        let f = g.gelu(f)?;
        let f = self.affine(g, store, f, lp.ff_out)?;
        let f = g.dropout(f, self.cfg.dropout, train, rng)?;
        Ok((g.add(x, f)?, probs))
    }
}
