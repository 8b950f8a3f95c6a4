use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{episode_plan, sample_kshot, Dataset, KShotSample, Sentence};
use crate::error::{Error, Result};
use crate::evalkit::{aggregate, Prf};
use crate::lexicon::SememeLexicon;
use crate::substrate::ParamStore;

use super::{evaluate, train, Model, TrainConfig, TrainingLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    #[serde(flatten)]
    pub test: Prf,
    /// Prompt length chosen on dev.
    pub lp: usize,
    pub dev_f1: f64,
    pub best_epoch: usize,
    pub train_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub episodes: Vec<EpisodeResult>,
    pub mean: Prf,
    pub std: Prf,
}

impl EpisodeReport {
    pub fn from_episodes(episodes: Vec<EpisodeResult>) -> Result<Self> {
        let col = |f: fn(&Prf) -> f64| -> Result<(f64, f64)> {
            aggregate(&episodes.iter().map(|e| f(&e.test)).collect::<Vec<_>>())
        };
        let (p, r, f) = (col(|x| x.precision)?, col(|x| x.recall)?, col(|x| x.f1)?);
        Ok(EpisodeReport {
            mean: Prf {
                precision: p.0,
                recall: r.0,
                f1: f.0,
            },
            std: Prf {
                precision: p.1,
                recall: r.1,
                f1: f.1,
            },
            episodes,
        })
    }
}

/// Trained artifacts of one episode at its selected prompt length.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub result: EpisodeResult,
    pub log: TrainingLog,
    pub model: Model,
    pub store: ParamStore,
}

/// Dev sentences used for model selection: one k-shot sample per run,
/// drawn with the master seed.
pub fn dev_set(dataset: &Dataset, cfg: &TrainConfig) -> Vec<Sentence> {
    if cfg.full_dev {
        return dataset.dev.clone();
    }
    let k = cfg.dev_k.unwrap_or(cfg.k);
    sample_kshot(&dataset.dev, &dataset.schema, k, cfg.seed)
        .sentences(&dataset.dev)
        .into_iter()
        .cloned()
        .collect()
}

/// Trains one episode at every length in the grid, keeps the best dev F1
/// (ties go to the shorter prompt) and scores it on the test split.
pub fn run_episode(
    dataset: &Dataset,
    lexicon: &SememeLexicon,
    cfg: &TrainConfig,
    sample: &KShotSample,
    dev: &[Sentence],
) -> Result<EpisodeOutcome> {
    let train_set: Vec<Sentence> = sample.sentences(&dataset.train).into_iter().cloned().collect();
    let mut best: Option<(f64, EpisodeOutcome)> = None;
    for lp in cfg.lengths() {
        let run_cfg = TrainConfig { l_p: lp, ..cfg.clone() };
        let (model, mut store) = Model::for_dataset(dataset, lexicon, &run_cfg, sample.seed)?;
        let mut log = TrainingLog::default();
        let summary = train(&model, &mut store, &train_set, dev, &run_cfg, &mut log)?;
        if best.as_ref().is_some_and(|(f, _)| summary.best_dev.f1 <= *f) {
            continue;
        }
        let result = EpisodeResult {
            seed: sample.seed,
            test: Prf::default(),
            lp,
            dev_f1: summary.best_dev.f1,
            best_epoch: summary.best_epoch,
            train_size: train_set.len(),
        };
        best = Some((
            summary.best_dev.f1,
            EpisodeOutcome {
                result,
                log,
                model,
                store,
            },
        ));
    }
    let (_, mut out) = best.ok_or_else(|| Error::Invalid("empty prompt-length grid".into()))?;
    out.result.test = evaluate(&out.model, &out.store, &dataset.test)?;
    Ok(out)
}

fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Runs `num_seeds` k-shot episodes derived from `cfg.seed`, in parallel
/// when `jobs > 1`. Results are ordered by episode index.
pub fn run_protocol(
    dataset: &Dataset,
    lexicon: &SememeLexicon,
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<(EpisodeReport, Vec<EpisodeOutcome>)> {
    cfg.validate()?;
    if cfg.k == 0 {
        return Err(Error::Invalid("k: must be at least 1 for a protocol run".into()));
    }
    let plan = episode_plan(&dataset.train, &dataset.schema, cfg.k, cfg.num_seeds, cfg.seed)?;
    let dev = dev_set(dataset, cfg);
    let outcomes = with_jobs(jobs, || {
        plan.episodes
            .par_iter()
            .map(|s| run_episode(dataset, lexicon, cfg, s, &dev))
            .collect::<Result<Vec<_>>>()
    })??;
    let report = EpisodeReport::from_episodes(outcomes.iter().map(|o| o.result.clone()).collect())?;
    Ok((report, outcomes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Prompt depth `n_p` (also the encoder layer count).
    Depth,
    /// Prompt length `l_p`.
    Length,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub mean_f1: f64,
    pub std_f1: f64,
}

/// One protocol run per value; rows sorted by value.
pub fn sweep(
    axis: SweepAxis,
    values: &[usize],
    base: &TrainConfig,
    dataset: &Dataset,
    lexicon: &SememeLexicon,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Invalid("sweep needs at least one value".into()));
    }
    let mut values = values.to_vec();
    values.sort_unstable();
    values.dedup();
    let mut rows = Vec::with_capacity(values.len());
    for v in values {
        let mut cfg = base.clone();
        match axis {
            SweepAxis::Depth => cfg.encoder.n_p = v,
            SweepAxis::Length => {
                cfg.l_p = v;
                cfg.lp_grid = Vec::new();
            }
        }
        let (report, _) = run_protocol(dataset, lexicon, &cfg, jobs)?;
        rows.push(SweepRow {
            value: v,
            mean_f1: report.mean.f1,
            std_f1: report.std.f1,
        });
    }
    Ok(rows)
}

/// Tab-separated `value  mean_f1  std_f1` table with a header row.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::from("value\tmean_f1\tstd_f1\n");
    for r in rows {
        out.push_str(&format!("{}\t{}\t{}\n", r.value, r.mean_f1, r.std_f1));
    }
    out
}
