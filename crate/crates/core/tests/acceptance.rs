//! Acceptance suite. Runs every criterion, prints one line each and exits
//! nonzero if any fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kprompt_core::corpus::{expand_labels, sample_kshot, Dataset, LabelSchema, Sentence};
use kprompt_core::evalkit::{oracle_prf, span_prf};
use kprompt_core::knowledge::{enhance_word, sememe_weights, SememeWeighting, INVERSE_DISTANCE_EPS};
use kprompt_core::lexicon::SememeLexicon;
use kprompt_core::promptgen::PromptMode;
use kprompt_core::substrate::{Graph, ParamStore, Tensor};
use kprompt_core::synthdata::{gen_sememe_critical, gen_separable};
use kprompt_core::tagger::decode_spans;
use kprompt_core::trainer::{
    desk_config, grad_suite, run_protocol, train, Freezing, Model, ParamGroup, TrainConfig, TrainingLog,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.1?}, limit {limit:?}"))
}

struct Pass {
    q: Option<Tensor>,
    layers: Vec<Option<Tensor>>,
    output: Tensor,
}

fn run_forward(model: &Model, store: &ParamStore, sentence: &Sentence) -> Pass {
    let mut g = Graph::new();
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let labels = model.prepare_labels(&mut g, store).unwrap();
    let feats = model.features(sentence);
    let fwd = model.forward(&mut g, store, &labels, &feats, false, &mut rng).unwrap();
    Pass {
        q: fwd.prompts.q.map(|v| g.value(v).clone()),
        layers: fwd
            .prompts
            .layers
            .iter()
            .map(|l| l.map(|v| g.value(v).clone()))
            .collect(),
        output: g.value(fwd.encoder.output).clone(),
    }
}

fn small_config(mode: PromptMode, l_p: usize) -> TrainConfig {
    TrainConfig {
        mode,
        l_p,
        ..desk_config()
    }
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let suite = grad_suite(&desk_config(), 2, 0).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    for op in &suite.ops {
        ensure(op.report.passed, || {
            format!(
                "op {} rel err {:.2e} >= {:.0e}",
                op.op, op.report.max_rel_error, op.report.threshold
            )
        })?;
    }
    ensure(suite.model.passed, || {
        format!("model rel err {:.2e}", suite.model.max_rel_error)
    })?;
    within(elapsed, Duration::from_secs(60))?;
    let worst_op = suite.ops.iter().map(|o| o.report.max_rel_error).fold(0.0, f64::max);
    Ok(format!(
        "{} ops (worst {:.1e}), model {} tensors (worst {:.1e}), {:.1?}",
        suite.ops.len(),
        worst_op,
        suite.model.params.len(),
        suite.model.max_rel_error,
        elapsed
    ))
}

fn shape_suite() -> Outcome {
    let (data, lex) = gen_separable(4, 2, 1).map_err(|e| e.to_string())?;
    let s = &data.train[0];
    for l_p in [0, 1, 4] {
        let cfg = small_config(PromptMode::Tkdp, l_p);
        let (model, store) = Model::for_dataset(&data, &lex, &cfg, 5).map_err(|e| e.to_string())?;
        let pass = run_forward(&model, &store, s);
        let (n_p, d_h) = (cfg.encoder.n_p, cfg.encoder.d_h);
        ensure(pass.output.shape() == [s.len(), d_h], || {
            format!("l_p={l_p}: output {:?}", pass.output.shape())
        })?;
        match (&pass.q, l_p) {
            (None, 0) => {}
            (Some(q), _) => ensure(q.shape() == [2 * l_p, n_p, d_h], || {
                format!("l_p={l_p}: Q {:?}", q.shape())
            })?,
            (None, _) => return Err(format!("l_p={l_p}: no Q")),
        }
        if l_p == 0 {
            let mut g = Graph::new();
            let mut rng = rand::rngs::mock::StepRng::new(0, 0);
            let h = model
                .embedding
                .embed_ids(&mut g, &store, &model.vocab.ids(&s.tokens))
                .unwrap();
            let mask = Tensor::filled(&[s.len()], 1.0);
            let plain = model
                .encoder
                .encode_with_prompts(&mut g, &store, h, &vec![None; n_p], &mask, false, &mut rng)
                .unwrap();
            ensure(g.value(plain.output) == &pass.output, || {
                "l_p=0 differs from promptless encoder".into()
            })?;
        }
    }
    Ok("Q 2l_p x n_p x d_h, output n x d_h for l_p in {0,1,4}, l_p=0 bitwise promptless".into())
}

fn switch_identities() -> Outcome {
    let t = Instant::now();
    let (data, lex) = gen_separable(6, 2, 2).map_err(|e| e.to_string())?;
    let (a, b) = (&data.train[0], &data.train[1]);
    let empty = SememeLexicon::new(Vec::new(), Vec::<(String, Vec<String>)>::new()).map_err(|e| e.to_string())?;

    let (tkdp, store) = Model::for_dataset(&data, &empty, &small_config(PromptMode::Tkdp, 2), 3).unwrap();
    let minus_sk = tkdp.clone().with_switches(PromptMode::TkdpMinusSk.switches());
    let (p, q) = (run_forward(&tkdp, &store, a), run_forward(&minus_sk, &store, a));
    ensure(p.q == q.q && p.output == q.output, || {
        "empty lexicon: tkdp != tkdp_minus_sk".into()
    })?;

    let sentence_independent = |mode: PromptMode| -> Result<(), String> {
        let (m, st) = Model::for_dataset(&data, &lex, &small_config(mode, 2), 3).unwrap();
        let (x, y) = (run_forward(&m, &st, a), run_forward(&m, &st, b));
        ensure(x.q.is_some() && x.q == y.q, || {
            format!("{mode}: prompts depend on the sentence")
        })
    };
    sentence_independent(PromptMode::Dpt)?;
    sentence_independent(PromptMode::TkdpMinusCk)?;

    let (m, st) = Model::for_dataset(&data, &lex, &small_config(PromptMode::PrefixTuning, 2), 3).unwrap();
    let layers = run_forward(&m, &st, a).layers;
    ensure(layers.iter().all(|l| l.is_some() && *l == layers[0]), || {
        "prefix_tuning layers differ".into()
    })?;
    within(t.elapsed(), Duration::from_secs(30))?;
    Ok(format!("all four identities exact, {:.1?}", t.elapsed()))
}

/// Scalar form of the sememe weighting and word enhancement.
fn scalar_enhance(h: &[f64], s: &[Vec<f64>], mode: SememeWeighting) -> (Vec<f64>, Vec<f64>) {
    if s.is_empty() {
        return (Vec::new(), h.to_vec());
    }
    let mut d = Vec::new();
    for row in s {
        let mut acc = 0.0;
        for k in 0..h.len() {
            acc += (h[k] - row[k]) * (h[k] - row[k]);
        }
        d.push(acc.sqrt());
    }
    if mode == SememeWeighting::InverseDistance {
        for x in d.iter_mut() {
            *x = 1.0 / (*x + INVERSE_DISTANCE_EPS);
        }
    }
    let total: f64 = d.iter().sum();
    let m = s.len() as f64;
    let r: Vec<f64> = d
        .iter()
        .map(|x| if total == 0.0 { 1.0 / m } else { x / total })
        .collect();
    let mut e = h.to_vec();
    for (ri, row) in r.iter().zip(s) {
        for k in 0..e.len() {
            e[k] += ri * row[k];
        }
    }
    (r, e)
}

fn sememe_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut branches = BTreeMap::new();
    for i in 0..500 {
        let d = rng.gen_range(1..=8);
        let m = match i % 10 {
            0 => 0,
            1 => 1,
            _ => rng.gen_range(1..=5),
        };
        let h: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let s: Vec<Vec<f64>> = if i % 10 == 2 {
            vec![h.clone(); m]
        } else {
            (0..m)
                .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect()
        };
        let branch = match (m, i % 10) {
            (0, _) => "m=0",
            (1, _) => "m=1",
            (_, 2) => "zero-distance",
            _ => "general",
        };
        *branches.entry(branch).or_insert(0) += 1;
        for mode in [SememeWeighting::Distance, SememeWeighting::InverseDistance] {
            let (r_ref, e_ref) = scalar_enhance(&h, &s, mode);
            let mut g = Graph::new();
            let hv = g.input(Tensor::new(vec![d], h.clone()).unwrap());
            let sv = (m > 0).then(|| g.input(Tensor::new(vec![m, d], s.concat()).unwrap()));
            if let Some(sv) = sv {
                let r = sememe_weights(&mut g, hv, sv, mode).map_err(|e| e.to_string())?;
                for (a, b) in g.value(r).data().iter().zip(&r_ref) {
                    worst = worst.max((a - b).abs());
                }
            }
            let e = enhance_word(&mut g, hv, sv, mode).map_err(|e| e.to_string())?;
            for (a, b) in g.value(e).data().iter().zip(&e_ref) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    ensure(worst < 1e-12, || format!("max abs diff {worst:.2e}"))?;
    Ok(format!(
        "500 instances x 2 weightings, max abs diff {worst:.1e}, branches {branches:?}"
    ))
}

fn toy_schema(types: usize) -> LabelSchema {
    let names: Vec<String> = (0..types).map(|t| format!("T{t}")).collect();
    let forms: BTreeMap<String, String> = names.iter().map(|n| (n.clone(), format!("kind {n}"))).collect();
    expand_labels(&names, &forms, 4).unwrap()
}

fn evaluation_oracle() -> Outcome {
    let schema = toy_schema(3);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for i in 0..1000 {
        let n = rng.gen_range(0..20);
        let mut draw = || -> Vec<usize> { (0..n).map(|_| rng.gen_range(0..schema.num_labels())).collect() };
        let (gold, pred) = (draw(), draw());
        let ours = span_prf(&decode_spans(&gold, &schema), &decode_spans(&pred, &schema)).map_err(|e| e.to_string())?;
        let oracle = oracle_prf(&gold, &pred, &schema);
        ensure(ours == oracle, || format!("sequence {i}: {ours:?} vs {oracle:?}"))?;
    }
    Ok("1000 random sequences agree exactly".into())
}

fn learnability() -> Outcome {
    let t = Instant::now();
    let (data, lex) = gen_separable(32, 2, 0).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        mode: PromptMode::Tkdp,
        freezing: Freezing::Full,
        epochs: 300,
        patience: Some(20),
        ..TrainConfig::default()
    };
    let (model, mut store) = Model::for_dataset(&data, &lex, &cfg, cfg.seed).map_err(|e| e.to_string())?;
    let mut log = TrainingLog::default();
    // Selecting on the training set stops the run shortly after it is fit.
    train(&model, &mut store, &data.train, &data.train, &cfg, &mut log).map_err(|e| e.to_string())?;
    let f1 = log.train_f1();
    let hit = f1.iter().position(|&x| x == 1.0);
    within(t.elapsed(), Duration::from_secs(300))?;
    match hit {
        Some(epoch) => Ok(format!("train F1 = 1.0 at epoch {epoch}, {:.1?}", t.elapsed())),
        None => Err(format!(
            "best train F1 {:.3} after {} epochs",
            f1.iter().cloned().fold(0.0, f64::max),
            f1.len() - 1
        )),
    }
}

fn mechanism() -> Outcome {
    let t = Instant::now();
    let (data, lex) = gen_sememe_critical(300, 1).map_err(|e| e.to_string())?;
    let base = TrainConfig {
        k: 50,
        epochs: 60,
        lr: 3e-3,
        freezing: Freezing::Full,
        num_seeds: 5,
        seed: 3,
        full_dev: true,
        ..TrainConfig::default()
    };
    let mean_f1 = |mode: PromptMode| -> Result<(f64, f64), String> {
        let cfg = TrainConfig { mode, ..base.clone() };
        let (report, _) = run_protocol(&data, &lex, &cfg, 1).map_err(|e| e.to_string())?;
        Ok((report.mean.f1, report.std.f1))
    };
    let (tkdp, tkdp_sd) = mean_f1(PromptMode::Tkdp)?;
    let (dpt, dpt_sd) = mean_f1(PromptMode::Dpt)?;
    let detail = format!(
        "tkdp {tkdp:.3} ± {tkdp_sd:.3}, dpt {dpt:.3} ± {dpt_sd:.3}, gap {:.3}, {:.1?}",
        tkdp - dpt,
        t.elapsed()
    );
    ensure(tkdp - dpt >= 0.10, || detail.clone())?;
    within(t.elapsed(), Duration::from_secs(15 * 60))?;
    Ok(detail)
}

fn protocol_determinism() -> Outcome {
    let (data, lex) = gen_separable(24, 2, 4).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        k: 2,
        epochs: 4,
        num_seeds: 3,
        seed: 11,
        lp_grid: vec![1, 2],
        ..small_config(PromptMode::Tkdp, 2)
    };
    let report = |jobs| -> Result<String, String> {
        let (r, _) = run_protocol(&data, &lex, &cfg, jobs).map_err(|e| e.to_string())?;
        serde_json::to_string_pretty(&r).map_err(|e| e.to_string())
    };
    let (a, b, c) = (report(1)?, report(1)?, report(2)?);
    ensure(a == b, || "sequential runs differ".into())?;
    ensure(a == c, || "parallel run differs from sequential".into())?;
    Ok(format!(
        "identical report JSON ({} bytes) across 3 runs incl. --jobs 2",
        a.len()
    ))
}

fn random_corpus(rng: &mut ChaCha8Rng, schema: &LabelSchema) -> Vec<Sentence> {
    let types = schema.num_types();
    let rare = rng.gen_range(0..types);
    let absent = rng.gen_bool(0.3).then(|| rng.gen_range(0..types));
    (0..rng.gen_range(1..60))
        .map(|id| {
            let mut tags = Vec::new();
            for _ in 0..rng.gen_range(1..8) {
                let t = rng.gen_range(0..types);
                if rng.gen_bool(0.6) || Some(t) == absent || (t == rare && rng.gen_bool(0.8)) {
                    tags.push(0);
                } else {
                    tags.push(schema.begin_id(t));
                    if rng.gen_bool(0.3) {
                        tags.push(schema.inside_id(t));
                    }
                }
            }
            Sentence {
                id,
                tokens: (0..tags.len()).map(|i| format!("w{i}")).collect(),
                gold_tags: tags,
            }
        })
        .collect()
}

fn kshot_property() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut short = 0;
    for c in 0..200 {
        let schema = toy_schema(rng.gen_range(1..5));
        let train = random_corpus(&mut rng, &schema);
        let k = rng.gen_range(1..6);
        let seed = rng.gen();
        let sample = sample_kshot(&train, &schema, k, seed);
        ensure(sample == sample_kshot(&train, &schema, k, seed), || {
            format!("corpus {c}: not deterministic")
        })?;
        let mut available = vec![0; schema.num_types()];
        let mut got = vec![0; schema.num_types()];
        for s in &train {
            for sp in decode_spans(&s.gold_tags, &schema) {
                available[sp.entity_type] += 1;
            }
        }
        for s in sample.sentences(&train) {
            for sp in decode_spans(&s.gold_tags, &schema) {
                got[sp.entity_type] += 1;
            }
        }
        for t in 0..schema.num_types() {
            ensure(got[t] >= k.min(available[t]), || {
                format!("corpus {c}: type {t} has {} of {} (k={k})", got[t], available[t])
            })?;
            if available[t] > 0 && available[t] < k {
                short += 1;
            }
        }
    }
    Ok(format!(
        "200 corpora, every satisfiable type covered ({short} capped by availability)"
    ))
}

fn frozen_regime() -> Outcome {
    let (data, lex): (Dataset, _) = gen_separable(32, 2, 6).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        freezing: Freezing::PromptOnly,
        epochs: 30,
        lr: 1e-2,
        ..TrainConfig::default()
    };
    let (model, mut store) = Model::for_dataset(&data, &lex, &cfg, cfg.seed).map_err(|e| e.to_string())?;
    let before: Vec<(String, Tensor)> = store.iter().map(|(n, v)| (n.to_owned(), v.value.clone())).collect();
    let mut log = TrainingLog::default();
    let summary = train(&model, &mut store, &data.train, &data.dev, &cfg, &mut log).map_err(|e| e.to_string())?;
    let mut prompt_moved = false;
    for ((name, old), (_, now)) in before.iter().zip(store.iter()) {
        let changed = old != &now.value;
        match ParamGroup::of(name).map_err(|e| e.to_string())? {
            ParamGroup::Prompt => prompt_moved |= changed,
            _ => ensure(!changed, || format!("{name} changed under prompt_only"))?,
        }
    }
    ensure(prompt_moved, || "no prompt parameter changed".into())?;
    let dev = log.dev_f1();
    ensure(summary.best_dev.f1 > dev[0], || {
        format!("dev F1 stuck at epoch-0 value {:.3}", dev[0])
    })?;
    Ok(format!(
        "backbone and head bit-identical, dev F1 {:.3} -> {:.3} (epoch {})",
        dev[0], summary.best_dev.f1, summary.best_epoch
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient suite", gradient_suite),
        ("shape/structure", shape_suite),
        ("knowledge-switch identities", switch_identities),
        ("sememe weighting oracle", sememe_oracle),
        ("evaluation oracle", evaluation_oracle),
        ("learnability", learnability),
        ("mechanism", mechanism),
        ("protocol determinism", protocol_determinism),
        ("k-shot property", kshot_property),
        ("frozen regime", frozen_regime),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
