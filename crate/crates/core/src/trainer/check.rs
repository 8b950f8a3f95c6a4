use serde::Serialize;

use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::substrate::{grad_check, op_suite, GradCheckConfig, GradCheckReport, Graph, OpCheck};
use crate::synthdata::gen_separable;

use super::{Freezing, Model, TrainConfig};

/// Small configuration used for the full-model gradient check.
pub fn desk_config() -> TrainConfig {
    TrainConfig {
        l_p: 2,
        dropout: 0.0,
        freezing: Freezing::Full,
        encoder: EncoderConfig {
            d_h: 8,
            n_p: 2,
            heads: 2,
            d_ff: 16,
            max_len: 16,
            dropout: 0.0,
        },
        ..TrainConfig::default()
    }
}

/// Central-difference check of the mean tagging loss over `num_sentences`
/// synthetic sentences, every parameter trainable.
pub fn model_grad_check(cfg: &TrainConfig, num_sentences: usize, seed: u64) -> Result<GradCheckReport> {
    let (dataset, lexicon) = gen_separable(num_sentences.max(1), 2, seed)?;
    let sentences = &dataset.train[..num_sentences.max(1)];
    let (model, mut store) = Model::for_dataset(&dataset, &lexicon, cfg, seed)?;
    Model::apply_freezing(&mut store, Freezing::Full)?;
    let loss = |store: &_, g: &mut Graph| {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let labels = model.prepare_labels(g, store)?;
        let mut parts = Vec::with_capacity(sentences.len());
        for s in sentences {
            let l = model.sentence_loss(g, store, &labels, s, false, &mut rng)?;
            parts.push(g.reshape(l, &[1])?);
        }
        let stacked = g.concat(&parts, 0)?;
        let total = g.sum(stacked)?;
        g.scale(total, 1.0 / sentences.len() as f64)
    };
    grad_check(
        &mut store,
        loss,
        &GradCheckConfig {
            seed,
            ..Default::default()
        },
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct GradSuite {
    pub ops: Vec<OpCheck>,
    pub model: GradCheckReport,
    pub passed: bool,
}

/// Every primitive plus the full model loss at `cfg`.
pub fn grad_suite(cfg: &TrainConfig, num_sentences: usize, seed: u64) -> Result<GradSuite> {
    let ops = op_suite(seed)?;
    let model = model_grad_check(cfg, num_sentences, seed)?;
    let passed = model.passed && ops.iter().all(|o| o.report.passed);
    Ok(GradSuite { ops, model, passed })
}
