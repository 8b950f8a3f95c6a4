//! Mini-batch training, multi-seed episodes and hyper-parameter sweeps.

mod check;
mod config;
mod model;
mod protocol;

pub use check::{desk_config, grad_suite, model_grad_check, GradSuite};
pub use config::{Freezing, ParamGroup, TrainConfig, DEFAULT_SEED};
pub use model::{build_vocab, Forward, Model, SentenceFeatures};
pub use protocol::{
    dev_set, run_episode, run_protocol, sweep, sweep_table, EpisodeOutcome, EpisodeReport, EpisodeResult, SweepAxis,
    SweepRow,
};

use log::{error, info};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::evalkit::{corpus_prf, Prf};
use crate::substrate::{AdamConfig, Graph, ParamStore};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Freezing {
        trainable: Vec<String>,
        frozen: Vec<String>,
        trainable_elements: usize,
    },
    Epoch {
        epoch: usize,
        loss: Option<f64>,
        grad_norm: Option<f64>,
        train_f1: f64,
        dev: Prf,
    },
    Best {
        epoch: usize,
        dev_f1: f64,
    },
    EarlyStop {
        epoch: usize,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainingLog {
    pub events: Vec<LogEvent>,
}

impl TrainingLog {
    pub fn push(&mut self, e: LogEvent) {
        self.events.push(e);
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// `(epoch, loss)` for every trained epoch.
    pub fn losses(&self) -> Vec<(usize, f64)> {
        self.events
            .iter()
            .filter_map(|e| match e {
                LogEvent::Epoch {
                    epoch, loss: Some(l), ..
                } => Some((*epoch, *l)),
                _ => None,
            })
            .collect()
    }

    pub fn train_f1(&self) -> Vec<f64> {
        self.events
            .iter()
            .filter_map(|e| match e {
                LogEvent::Epoch { train_f1, .. } => Some(*train_f1),
                _ => None,
            })
            .collect()
    }

    pub fn dev_f1(&self) -> Vec<f64> {
        self.events
            .iter()
            .filter_map(|e| match e {
                LogEvent::Epoch { dev, .. } => Some(dev.f1),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_dev: Prf,
    pub epochs_run: usize,
}

pub fn evaluate(model: &Model, store: &ParamStore, sentences: &[Sentence]) -> Result<Prf> {
    let pred = model.predict(store, sentences)?;
    corpus_prf(sentences, &pred, &model.schema)
}

/// Trains `store` in place and leaves it holding the best-dev parameters.
///
/// Epoch 0 is the untrained model; a later epoch replaces the kept
/// parameters only when its dev F1 is strictly higher. When `dev` is empty
/// the training sentences are used for selection.
pub fn train(
    model: &Model,
    store: &mut ParamStore,
    train_set: &[Sentence],
    dev: &[Sentence],
    cfg: &TrainConfig,
    log: &mut TrainingLog,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let dev = if dev.is_empty() { train_set } else { dev };
    let classes = Model::apply_freezing(store, cfg.freezing)?;
    let (on, off): (Vec<_>, Vec<_>) = classes.into_iter().partition(|(_, t)| *t);
    for (name, _) in &on {
        info!("trainable: {name}");
    }
    log.push(LogEvent::Freezing {
        trainable: on.into_iter().map(|(n, _)| n).collect(),
        frozen: off.into_iter().map(|(n, _)| n).collect(),
        trainable_elements: store.num_trainable_elements(),
    });

    let adam = AdamConfig::with_lr(cfg.lr);
    let mut best_dev = evaluate(model, store, dev)?;
    let mut best_epoch = 0;
    let mut best_params = store.snapshot();
    log.push(LogEvent::Epoch {
        epoch: 0,
        loss: None,
        grad_norm: None,
        train_f1: evaluate(model, store, train_set)?.f1,
        dev: best_dev,
    });

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(store.rng_mut());
        let mut loss_sum = 0.0;
        let mut norm_sum = 0.0;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (b, batch) in batches.iter().enumerate() {
            let mut rng = store.fork_rng();
            let mut g = Graph::new();
            let labels = model.prepare_labels(&mut g, store)?;
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch.iter() {
                let l = model
                    .sentence_loss(&mut g, store, &labels, &train_set[i], true, &mut rng)
                    .map_err(|e| diverged(e, epoch, b))?;
                losses.push(g.reshape(l, &[1])?);
            }
            let stacked = g.concat(&losses, 0)?;
            let total = g.sum(stacked)?;
            let loss = g.scale(total, 1.0 / batch.len() as f64)?;
            let grads = g.backward(loss).map_err(|e| diverged(e, epoch, b))?;
            g.accumulate_into(&grads, store)?;
            let norm = store.grad_norm();
            if !norm.is_finite() {
                return Err(diverged(Error::NonFinite { op: "grad_norm" }, epoch, b));
            }
            store.adam_step(&adam);
            store.zero_grad();
            loss_sum += g.value(loss).item();
            norm_sum += norm;
        }
        epochs_run = epoch;
        let dev_prf = evaluate(model, store, dev)?;
        let n = batches.len() as f64;
        log.push(LogEvent::Epoch {
            epoch,
            loss: Some(loss_sum / n),
            grad_norm: Some(norm_sum / n),
            train_f1: evaluate(model, store, train_set)?.f1,
            dev: dev_prf,
        });
        if dev_prf.f1 > best_dev.f1 {
            best_dev = dev_prf;
            best_epoch = epoch;
            best_params = store.snapshot();
            log.push(LogEvent::Best {
                epoch,
                dev_f1: dev_prf.f1,
            });
        } else if cfg.patience.is_some_and(|p| epoch - best_epoch >= p) {
            log.push(LogEvent::EarlyStop { epoch });
            break;
        }
    }
    store.restore(&best_params);
    Ok(TrainSummary {
        best_epoch,
        best_dev,
        epochs_run,
    })
}

fn diverged(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { op } => {
            error!("non-finite value in `{op}` at epoch {epoch}, batch {batch}");
            Error::Diverged { epoch, batch }
        }
        other => other,
    }
}
