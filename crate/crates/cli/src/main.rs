use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use kprompt_core::corpus::{
    episode_plan, load_conll, sample_kshot, write_predictions, Dataset, KShotSample, LabelSchema, Sentence,
};
use kprompt_core::encoder::{EncoderConfig, Vocab};
use kprompt_core::evalkit::corpus_prf;
use kprompt_core::lexicon::SememeLexicon;
use kprompt_core::promptgen::{PromptConfig, PromptMode};
use kprompt_core::substrate::{Checkpoint, ParamStore};
use kprompt_core::synthdata::{gen_sememe_critical, gen_separable, read_corpus, write_corpus};
use kprompt_core::trainer::{
    desk_config, dev_set, grad_suite, run_episode, run_protocol, sweep, sweep_table, Model, SweepAxis, TrainConfig,
    DEFAULT_SEED,
};

const SEED_ENV: &str = "TKDP_SEED";
const RESOLVED_CONFIG: &str = "resolved-config.json";
const CHECKPOINT_FILE: &str = "checkpoint.json";
const BUNDLE_FILE: &str = "model.json";
const LEXICON_FILE: &str = "lexicon.json";

#[derive(Parser)]
#[command(
    name = "kprompt",
    version,
    about = "Few-shot BIO tagging with sememe- and label-aware layer prompts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus targeted overrides, shared by every subcommand.
#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    /// Prompt mode (tkdp, tkdp_minus_sk, tkdp_minus_lk, tkdp_minus_ck, dpt, prompt_tuning, prefix_tuning, discrete).
    #[arg(long)]
    mode: Option<PromptMode>,
    /// Prompt length; replaces any length grid from the config.
    #[arg(long)]
    lp: Option<usize>,
    /// Prompt depth, equal to the number of encoder layers.
    #[arg(long)]
    np: Option<usize>,
    /// Master seed. Falls back to the config, then TKDP_SEED, then 42.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "kprompt-out")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct DataArg {
    /// Corpus directory with train/dev/test .conll, labels.tsv and lexicon.json.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    fn file(self) -> &'static str {
        match self {
            Split::Train => "train.conll",
            Split::Dev => "dev.conll",
            Split::Test => "test.conll",
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Corpus {
    Separable,
    SememeCritical,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Axis {
    Depth,
    Length,
}

#[derive(Subcommand)]
enum Command {
    /// Train one k-shot episode (k = 0 uses the whole train split).
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Score a trained model on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Multi-seed k-shot protocol with mean and std.
    Protocol {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// One protocol run per depth or length value.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write the k-shot episode plan.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Finite-difference check of every op and the full model loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2)]
        sentences: usize,
    },
    /// Generate a synthetic corpus directory.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "separable")]
        kind: Corpus,
        /// Training sentences.
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Entity types (separable corpus only).
        #[arg(long, default_value_t = 2)]
        types: usize,
    },
    /// Per-sentence CSV of final-layer attention from text to prompt positions.
    ExportAttention {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Export at most this many sentences.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Report dangling sememe names and duplicate entries.
    ValidateLexicon {
        #[command(flatten)]
        common: Common,
        lexicon: PathBuf,
    },
}

/// Applies config file, overrides and seed precedence on top of `base`.
fn resolve(common: &Common, base: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = base;
    let mut seed_in_file = false;
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let raw: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        seed_in_file = raw.get("seed").is_some();
        cfg = TrainConfig::from_json(&text).with_context(|| format!("invalid config {}", path.display()))?;
    }
    if let Some(k) = common.k {
        cfg.k = k;
    }
    if let Some(mode) = common.mode {
        cfg.mode = mode;
    }
    if let Some(lp) = common.lp {
        cfg.l_p = lp;
        cfg.lp_grid.clear();
    }
    if let Some(np) = common.np {
        cfg.encoder.n_p = np;
    }
    cfg.seed = match (common.seed, seed_in_file) {
        (Some(s), _) => s,
        (None, true) => cfg.seed,
        (None, false) => match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={v:?} is not a u64"))?,
            Err(_) if common.config.is_none() => DEFAULT_SEED,
            Err(_) => cfg.seed,
        },
    };
    cfg.validate().context("invalid configuration")?;
    Ok(cfg)
}

fn prepare_out(common: &Common, cfg: &TrainConfig) -> Result<PathBuf> {
    let out = common.out.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join(RESOLVED_CONFIG), cfg)?;
    Ok(out)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_data(data: &DataArg, cfg: &TrainConfig) -> Result<(Dataset, SememeLexicon)> {
    read_corpus(&data.data, cfg.description_len, cfg.encoder.max_len)
        .with_context(|| format!("loading corpus from {}", data.data.display()))
}

/// Everything besides the parameters needed to rebuild a trained model.
#[derive(Serialize, Deserialize)]
struct Bundle {
    vocab: Vocab,
    schema: LabelSchema,
    encoder: EncoderConfig,
    prompt: PromptConfig,
}

fn save_model(dir: &Path, model: &Model, store: &ParamStore) -> Result<()> {
    store.to_checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
    write_text(&dir.join(LEXICON_FILE), &model.lexicon.to_json()?)?;
    write_json(
        &dir.join(BUNDLE_FILE),
        &Bundle {
            vocab: model.vocab.clone(),
            schema: model.schema.clone(),
            encoder: model.encoder_config.clone(),
            prompt: model.prompt_config.clone(),
        },
    )
}

fn load_model(dir: &Path, seed: u64) -> Result<(Model, ParamStore)> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))
    };
    let bundle: Bundle = serde_json::from_str(&read(BUNDLE_FILE)?).context("parsing model bundle")?;
    let lexicon = SememeLexicon::from_json_str(&read(LEXICON_FILE)?)?;
    let store = ParamStore::from_checkpoint(&Checkpoint::load(&dir.join(CHECKPOINT_FILE))?, seed)?;
    let model = Model::from_store(
        &store,
        bundle.vocab,
        bundle.schema,
        lexicon,
        bundle.encoder,
        bundle.prompt,
    )?;
    Ok((model, store))
}

fn load_split(data: &DataArg, model: &Model, split: Split) -> Result<Vec<Sentence>> {
    let path = data.data.join(split.file());
    Ok(load_conll(&path, &model.schema, model.encoder_config.max_len)?)
}

fn whole_split(train: &[Sentence], seed: u64) -> KShotSample {
    KShotSample {
        seed,
        k: 0,
        selected: (0..train.len()).collect(),
        per_type_counts: Default::default(),
        unsatisfiable: Vec::new(),
    }
}

#[derive(Serialize)]
struct TrainMetrics {
    #[serde(flatten)]
    result: kprompt_core::trainer::EpisodeResult,
    dev_size: usize,
}

fn cmd_train(common: &Common, data: &DataArg) -> Result<()> {
    let cfg = resolve(common, TrainConfig::default())?;
    let out = prepare_out(common, &cfg)?;
    let (dataset, lexicon) = load_data(data, &cfg)?;
    let sample = if cfg.k == 0 {
        whole_split(&dataset.train, cfg.seed)
    } else {
        sample_kshot(&dataset.train, &dataset.schema, cfg.k, cfg.seed)
    };
    let dev = dev_set(&dataset, &cfg);
    info!(
        "training {} on {} sentences, {} dev",
        cfg.mode,
        sample.selected.len(),
        dev.len()
    );
    let outcome = run_episode(&dataset, &lexicon, &cfg, &sample, &dev)?;
    save_model(&out, &outcome.model, &outcome.store)?;
    write_text(&out.join("train-log.jsonl"), &outcome.log.to_jsonl()?)?;
    let r = &outcome.result;
    println!(
        "best epoch {} dev F1 {:.4} test P {:.4} R {:.4} F1 {:.4}",
        r.best_epoch, r.dev_f1, r.test.precision, r.test.recall, r.test.f1
    );
    write_json(
        &out.join("metrics.json"),
        &TrainMetrics {
            result: outcome.result,
            dev_size: dev.len(),
        },
    )
}

fn cmd_eval(common: &Common, data: &DataArg, model_dir: &Path, split: Split) -> Result<()> {
    let cfg = resolve(common, TrainConfig::default())?;
    let out = prepare_out(common, &cfg)?;
    let (model, store) = load_model(model_dir, cfg.seed)?;
    let sentences = load_split(data, &model, split)?;
    let pred = model.predict(&store, &sentences)?;
    let prf = corpus_prf(&sentences, &pred, &model.schema)?;
    write_text(
        &out.join("predictions.conll"),
        &write_predictions(&sentences, &pred, &model.schema),
    )?;
    write_json(&out.join("metrics.json"), &prf)?;
    println!("P {:.4} R {:.4} F1 {:.4}", prf.precision, prf.recall, prf.f1);
    Ok(())
}

fn cmd_protocol(common: &Common, data: &DataArg, jobs: usize) -> Result<()> {
    let cfg = resolve(common, TrainConfig::default())?;
    let out = prepare_out(common, &cfg)?;
    let (dataset, lexicon) = load_data(data, &cfg)?;
    let (report, outcomes) = run_protocol(&dataset, &lexicon, &cfg, jobs)?;
    for (i, o) in outcomes.iter().enumerate() {
        write_text(&out.join(format!("episode-{i}.jsonl")), &o.log.to_jsonl()?)?;
    }
    write_json(&out.join("report.json"), &report)?;
    println!(
        "{} episodes: F1 {:.4} ± {:.4} (P {:.4} R {:.4})",
        report.episodes.len(),
        report.mean.f1,
        report.std.f1,
        report.mean.precision,
        report.mean.recall
    );
    Ok(())
}

fn cmd_sweep(common: &Common, data: &DataArg, axis: Axis, values: &[usize], jobs: usize) -> Result<()> {
    let cfg = resolve(common, TrainConfig::default())?;
    let out = prepare_out(common, &cfg)?;
    let (dataset, lexicon) = load_data(data, &cfg)?;
    let axis = match axis {
        Axis::Depth => SweepAxis::Depth,
        Axis::Length => SweepAxis::Length,
    };
    let rows = sweep(axis, values, &cfg, &dataset, &lexicon, jobs)?;
    let table = sweep_table(&rows);
    write_text(&out.join("sweep.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_sample(common: &Common, data: &DataArg) -> Result<()> {
    let cfg = resolve(common, TrainConfig::default())?;
    let out = prepare_out(common, &cfg)?;
    let (dataset, _) = load_data(data, &cfg)?;
    let plan = episode_plan(&dataset.train, &dataset.schema, cfg.k, cfg.num_seeds, cfg.seed)?;
    write_json(&out.join("plan.json"), &plan)?;
    for (i, e) in plan.episodes.iter().enumerate() {
        println!(
            "episode {i}: seed {} {} sentences {:?}",
            e.seed,
            e.selected.len(),
            e.per_type_counts
        );
    }
    Ok(())
}

fn cmd_gradcheck(common: &Common, sentences: usize) -> Result<()> {
    let cfg = resolve(common, desk_config())?;
    let out = prepare_out(common, &cfg)?;
    let suite = grad_suite(&cfg, sentences, cfg.seed)?;
    for op in &suite.ops {
        let r = &op.report;
        let verdict = if r.passed { "ok" } else { "FAIL" };
        println!("{:<28} {:.3e} < {:.0e} {verdict}", op.op, r.max_rel_error, r.threshold);
    }
    for p in &suite.model.params {
        println!(
            "{:<28} {:.3e} ({} elements)",
            p.name, p.max_rel_error, p.elements_checked
        );
    }
    println!(
        "model loss: max relative error {:.3e} (threshold {:.0e})",
        suite.model.max_rel_error, suite.model.threshold
    );
    write_json(&out.join("gradcheck.json"), &suite)?;
    if !suite.passed {
        bail!("gradient check failed");
    }
    println!("gradient check passed");
    Ok(())
}

fn cmd_gen_data(common: &Common, kind: Corpus, n: usize, types: usize) -> Result<()> {
    let cfg = resolve(common, TrainConfig::default())?;
    let out = prepare_out(common, &cfg)?;
    let (dataset, lexicon) = match kind {
        Corpus::Separable => gen_separable(n, types, cfg.seed)?,
        Corpus::SememeCritical => gen_sememe_critical(n, cfg.seed)?,
    };
    write_corpus(&out, &dataset, &lexicon)?;
    println!(
        "wrote {} / {} / {} sentences to {}",
        dataset.train.len(),
        dataset.dev.len(),
        dataset.test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_export_attention(
    common: &Common,
    data: &DataArg,
    model_dir: &Path,
    split: Split,
    limit: Option<usize>,
) -> Result<()> {
    let cfg = resolve(common, TrainConfig::default())?;
    let out = prepare_out(common, &cfg)?;
    let (model, store) = load_model(model_dir, cfg.seed)?;
    let sentences = load_split(data, &model, split)?;
    let dir = out.join("attention");
    fs::create_dir_all(&dir)?;
    let take = limit.unwrap_or(sentences.len()).min(sentences.len());
    for (i, s) in sentences.iter().take(take).enumerate() {
        let att = model.prompt_attention(&store, s)?;
        let p = att.cols();
        let mut csv = String::from("token");
        for j in 0..p {
            csv.push_str(&format!(",prompt{j}"));
        }
        csv.push('\n');
        for (r, tok) in s.tokens.iter().enumerate() {
            csv.push_str(&csv_field(tok));
            for v in att.row(r) {
                csv.push_str(&format!(",{v}"));
            }
            csv.push('\n');
        }
        write_text(&dir.join(format!("sentence-{i:04}.csv")), &csv)?;
    }
    println!("wrote {take} heatmaps to {}", dir.display());
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

fn cmd_validate_lexicon(common: &Common, path: &Path) -> Result<()> {
    let cfg = resolve(common, TrainConfig::default())?;
    let out = prepare_out(common, &cfg)?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let report = SememeLexicon::validate(&text)?;
    write_json(&out.join("lexicon-report.json"), &report)?;
    for (w, s) in &report.dangling {
        println!("dangling: word `{w}` names unknown sememe `{s}`");
    }
    for w in &report.duplicate_words {
        println!("duplicate word: {w}");
    }
    for s in &report.duplicate_sememes {
        println!("duplicate sememe: {s}");
    }
    for (w, s) in &report.repeated_sememes {
        println!("repeated sememe `{s}` for word `{w}`");
    }
    if !report.is_clean() {
        bail!("lexicon {} has problems", path.display());
    }
    println!("lexicon is clean");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, data } => cmd_train(&common, &data),
        Command::Eval {
            common,
            data,
            model,
            split,
        } => cmd_eval(&common, &data, &model, split),
        Command::Protocol { common, data, jobs } => cmd_protocol(&common, &data, jobs),
        Command::Sweep {
            common,
            data,
            axis,
            values,
            jobs,
        } => cmd_sweep(&common, &data, axis, &values, jobs),
        Command::Sample { common, data } => cmd_sample(&common, &data),
        Command::Gradcheck { common, sentences } => cmd_gradcheck(&common, sentences),
        Command::GenData { common, kind, n, types } => cmd_gen_data(&common, kind, n, types),
        Command::ExportAttention {
            common,
            data,
            model,
            split,
            limit,
        } => cmd_export_attention(&common, &data, &model, split, limit),
        Command::ValidateLexicon { common, lexicon } => cmd_validate_lexicon(&common, &lexicon),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
