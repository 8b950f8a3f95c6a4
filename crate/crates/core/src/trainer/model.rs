use rand::Rng;

use crate::corpus::{Dataset, LabelSchema, Sentence};
use crate::encoder::{Encoder, EncoderConfig, EncoderOutput, SharedEmbedding, Vocab};
use crate::error::Result;
use crate::knowledge::{enhance_sequence, SememeBatch};
use crate::lexicon::SememeLexicon;
use crate::promptgen::{FusionSwitches, LabelState, PromptConfig, PromptGenerator, Prompts};
use crate::substrate::{Graph, ParamStore, Tensor, Var};
use crate::tagger::{argmax_rows, TagHead};

use super::config::{Freezing, ParamGroup, TrainConfig};

/// Vocabulary over every split, the label descriptions and the lexicon's sememe names.
pub fn build_vocab(dataset: &Dataset, lexicon: &SememeLexicon) -> Vocab {
    let text = dataset
        .train
        .iter()
        .chain(&dataset.dev)
        .chain(&dataset.test)
        .flat_map(|s| s.tokens.iter());
    let descriptions = dataset.schema.descriptions.iter().flatten();
    let sememes = lexicon.sememes().iter();
    Vocab::build(text.chain(descriptions).chain(sememes).map(String::as_str))
}

/// Token ids and sememe rows for one sentence.
#[derive(Debug, Clone)]
pub struct SentenceFeatures {
    pub ids: Vec<usize>,
    pub sememes: SememeBatch,
    pub mask: Tensor,
}

/// Everything needed to run the tagger over a parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub vocab: Vocab,
    pub schema: LabelSchema,
    pub lexicon: SememeLexicon,
    pub encoder_config: EncoderConfig,
    pub prompt_config: PromptConfig,
    pub embedding: SharedEmbedding,
    pub encoder: Encoder,
    pub prompts: PromptGenerator,
    pub head: TagHead,
    label_sememes: SememeBatch,
}

/// Graph nodes of one sentence's forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    pub prompts: Prompts,
    pub encoder: EncoderOutput,
}

fn sememe_rows<S: AsRef<str>>(words: &[S], lexicon: &SememeLexicon, vocab: &Vocab) -> SememeBatch {
    SememeBatch {
        ids: words
            .iter()
            .map(|w| {
                lexicon
                    .lookup(w.as_ref())
                    .iter()
                    .map(|&s| vocab.id(lexicon.sememe_name(s)))
                    .collect()
            })
            .collect(),
    }
}

fn label_sememes(schema: &LabelSchema, lexicon: &SememeLexicon, vocab: &Vocab) -> SememeBatch {
    let mut ids = Vec::with_capacity(schema.num_labels() * schema.l);
    for j in 0..schema.num_labels() {
        let (words, mask) = schema.padded_description(j);
        for (w, m) in words.iter().zip(mask) {
            if m > 0.0 {
                ids.extend(sememe_rows(&[w], lexicon, vocab).ids);
            } else {
                ids.push(Vec::new());
            }
        }
    }
    SememeBatch { ids }
}

impl Model {
    /// Registers all parameters in `store` in a fixed order.
    pub fn register(
        store: &mut ParamStore,
        vocab: Vocab,
        schema: LabelSchema,
        lexicon: SememeLexicon,
        encoder_config: EncoderConfig,
        prompt_config: PromptConfig,
    ) -> Result<Self> {
        encoder_config.validate()?;
        let embedding = SharedEmbedding::register(store, vocab.len(), &encoder_config)?;
        let encoder = Encoder::register(store, &encoder_config)?;
        let prompts = PromptGenerator::register(store, &prompt_config, encoder_config.n_p, encoder_config.d_h)?;
        let head = TagHead::register(store, encoder_config.d_h, schema.num_labels())?;
        let label_sememes = label_sememes(&schema, &lexicon, &vocab);
        Ok(Model {
            vocab,
            schema,
            lexicon,
            encoder_config,
            prompt_config,
            embedding,
            encoder,
            prompts,
            head,
            label_sememes,
        })
    }

    /// Rebinds a model to parameters already present in `store`.
    pub fn from_store(
        store: &ParamStore,
        vocab: Vocab,
        schema: LabelSchema,
        lexicon: SememeLexicon,
        encoder_config: EncoderConfig,
        prompt_config: PromptConfig,
    ) -> Result<Self> {
        let embedding = SharedEmbedding::from_store(store)?;
        let encoder = Encoder::from_store(store, &encoder_config)?;
        let prompts = PromptGenerator::from_store(store, &prompt_config, encoder_config.n_p, encoder_config.d_h)?;
        let head = TagHead::from_store(store)?;
        let label_sememes = label_sememes(&schema, &lexicon, &vocab);
        Ok(Model {
            vocab,
            schema,
            lexicon,
            encoder_config,
            prompt_config,
            embedding,
            encoder,
            prompts,
            head,
            label_sememes,
        })
    }

    /// Builds vocabulary, schema and parameters for a dataset from a run config.
    pub fn for_dataset(
        dataset: &Dataset,
        lexicon: &SememeLexicon,
        cfg: &TrainConfig,
        seed: u64,
    ) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new(seed);
        let model = Model::register(
            &mut store,
            build_vocab(dataset, lexicon),
            dataset.schema.clone(),
            lexicon.clone(),
            cfg.encoder_config(),
            cfg.prompt_config(),
        )?;
        Ok((model, store))
    }

    pub fn switches(&self) -> FusionSwitches {
        self.prompts.switches
    }

    pub fn with_switches(mut self, switches: FusionSwitches) -> Self {
        self.prompts = self.prompts.with_switches(switches);
        self
    }

    /// Sets trainable flags from a freezing policy and returns `(name, trainable)`
    /// for every parameter.
    pub fn apply_freezing(store: &mut ParamStore, policy: Freezing) -> Result<Vec<(String, bool)>> {
        let mut out = Vec::with_capacity(store.len());
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_owned();
            let on = policy.trains(ParamGroup::of(&name)?);
            store.set_trainable(id, on);
            out.push((name, on));
        }
        Ok(out)
    }

    pub fn features(&self, sentence: &Sentence) -> SentenceFeatures {
        SentenceFeatures {
            ids: self.vocab.ids(&sentence.tokens),
            sememes: sememe_rows(&sentence.tokens, &self.lexicon, &self.vocab),
            mask: Tensor::filled(&[sentence.len()], 1.0),
        }
    }

    fn enhance(&self, g: &mut Graph, store: &ParamStore, hidden: Var, batch: &SememeBatch) -> Result<Var> {
        if !self.prompts.switches.sememes {
            return Ok(hidden);
        }
        let emb = self.embedding;
        enhance_sequence(g, hidden, batch, self.prompt_config.sememe_weighting, |g, ids| {
            emb.lookup_tokens(g, store, ids)
        })
    }

    /// Label-side prompt state; build once per graph.
    pub fn prepare_labels(&self, g: &mut Graph, store: &ParamStore) -> Result<LabelState> {
        let (h_c, mask) = self.embedding.embed_labels(g, store, &self.vocab, &self.schema)?;
        let e_c = self.enhance(g, store, h_c, &self.label_sememes)?;
        self.prompts.prepare_labels(g, store, e_c, &mask)
    }

    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        labels: &LabelState,
        feats: &SentenceFeatures,
        train: bool,
        rng: &mut R,
    ) -> Result<Forward> {
        let h_x = self.embedding.embed_ids(g, store, &feats.ids)?;
        let e_x = self.enhance(g, store, h_x, &feats.sememes)?;
        let prompts = self.prompts.build_prompts(g, store, labels, e_x, &feats.mask)?;
        let encoder = self
            .encoder
            .encode_with_prompts(g, store, h_x, &prompts.layers, &feats.mask, train, rng)?;
        let logits = self.head.logits(g, store, encoder.output)?;
        Ok(Forward {
            logits,
            prompts,
            encoder,
        })
    }

    /// Mean token cross-entropy of one sentence.
    pub fn sentence_loss<R: Rng>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        labels: &LabelState,
        sentence: &Sentence,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let feats = self.features(sentence);
        let fwd = self.forward(g, store, labels, &feats, train, rng)?;
        g.cross_entropy(fwd.logits, &sentence.gold_tags, &vec![true; sentence.len()])
    }

    /// Argmax tag ids for each sentence (dropout off).
    pub fn predict(&self, store: &ParamStore, sentences: &[Sentence]) -> Result<Vec<Vec<usize>>> {
        const CHUNK: usize = 64;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut out = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(CHUNK) {
            let mut g = Graph::new();
            let labels = self.prepare_labels(&mut g, store)?;
            for s in chunk {
                let fwd = self.forward(&mut g, store, &labels, &self.features(s), false, &mut rng)?;
                out.push(argmax_rows(g.value(fwd.logits)));
            }
        }
        Ok(out)
    }

    /// Final-layer attention from each text position to each prompt position,
    /// averaged over heads: `n x p` where `p` is the prompt rows at that layer.
    pub fn prompt_attention(&self, store: &ParamStore, sentence: &Sentence) -> Result<Tensor> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut g = Graph::new();
        let labels = self.prepare_labels(&mut g, store)?;
        let fwd = self.forward(&mut g, store, &labels, &self.features(sentence), false, &mut rng)?;
        let n = sentence.len();
        let last = fwd.encoder.attention.len() - 1;
        let p = fwd.encoder.prompt_rows[last];
        let heads = &fwd.encoder.attention[last];
        let mut data = vec![0.0; n * p];
        for &h in heads {
            let probs = g.value(h);
            for i in 0..n {
                for j in 0..p {
                    data[i * p + j] += probs.at(&[p + i, j]) / heads.len() as f64;
                }
            }
        }
        Tensor::new(vec![n, p], data)
    }
}
