use std::collections::BTreeMap;
use std::path::Path;

use proptest::prelude::*;

use kprompt_core::corpus::{expand_labels, parse_conll, sample_kshot, write_conll, LabelSchema, Sentence};
use kprompt_core::evalkit::{aggregate, oracle_prf, span_prf};
use kprompt_core::tagger::decode_spans;

fn schema(types: usize) -> LabelSchema {
    let names: Vec<String> = (0..types).map(|t| format!("T{t}")).collect();
    let forms: BTreeMap<String, String> = names.iter().map(|n| (n.clone(), n.to_lowercase())).collect();
    expand_labels(&names, &forms, 3).unwrap()
}

fn tags(types: usize, max_len: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..2 * types + 1, 0..max_len)
}

fn corpus(types: usize) -> impl Strategy<Value = Vec<Sentence>> {
    prop::collection::vec((prop::collection::vec("[a-z]{1,6}", 1..8), any::<u64>()), 1..40).prop_map(move |rows| {
        rows.into_iter()
            .enumerate()
            .map(|(id, (tokens, bits))| {
                let gold_tags = (0..tokens.len())
                    .map(|i| ((bits >> (3 * (i % 20))) as usize) % (2 * types + 1))
                    .collect();
                Sentence { id, tokens, gold_tags }
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn decoding_is_total_and_well_formed(types in 1usize..5, seq in tags(4, 40)) {
        let s = schema(types);
        let seq: Vec<usize> = seq.into_iter().map(|t| t % s.num_labels()).collect();
        let spans = decode_spans(&seq, &s);
        let mut last_end: Option<usize> = None;
        for sp in &spans {
            prop_assert!(sp.start <= sp.end && sp.end < seq.len());
            prop_assert!(sp.entity_type < types);
            prop_assert!(last_end.is_none_or(|e| sp.start > e));
            last_end = Some(sp.end);
        }
        let covered: usize = spans.iter().map(|sp| sp.end - sp.start + 1).sum();
        prop_assert_eq!(covered, seq.iter().filter(|&&t| t != 0).count());
    }

    #[test]
    fn scores_bounded_and_match_oracle(gold in tags(3, 30), pred in tags(3, 30)) {
        let s = schema(3);
        let n = gold.len().min(pred.len());
        let (gold, pred) = (&gold[..n], &pred[..n]);
        let prf = span_prf(&decode_spans(gold, &s), &decode_spans(pred, &s)).unwrap();
        for v in [prf.precision, prf.recall, prf.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(prf.f1 <= prf.precision.max(prf.recall) + 1e-12);
        prop_assert_eq!(prf, oracle_prf(gold, pred, &s));
    }

    #[test]
    fn swapping_gold_and_prediction_swaps_p_and_r(gold in tags(2, 30), pred in tags(2, 30)) {
        let s = schema(2);
        let n = gold.len().min(pred.len());
        let (g, p) = (decode_spans(&gold[..n], &s), decode_spans(&pred[..n], &s));
        prop_assume!(!g.is_empty() && !p.is_empty());
        let ab = span_prf(&g, &p).unwrap();
        let ba = span_prf(&p, &g).unwrap();
        prop_assert_eq!(ab.precision, ba.recall);
        prop_assert_eq!(ab.recall, ba.precision);
        prop_assert!((ab.f1 - ba.f1).abs() < 1e-12);
    }

    #[test]
    fn identical_sequences_score_one(seq in tags(3, 30)) {
        let s = schema(3);
        let prf = span_prf(&decode_spans(&seq, &s), &decode_spans(&seq, &s)).unwrap();
        prop_assert_eq!(prf.f1, 1.0);
    }

    #[test]
    fn conll_round_trip(types in 1usize..4, sentences in corpus(3)) {
        let s = schema(types);
        let sentences: Vec<Sentence> = sentences
            .into_iter()
            .map(|mut x| {
                x.gold_tags.iter_mut().for_each(|t| *t %= s.num_labels());
                x
            })
            .collect();
        let text = write_conll(&sentences, &s);
        let back = parse_conll(&text, Path::new("mem.conll"), &s, 128).unwrap();
        prop_assert_eq!(back, sentences);
    }

    #[test]
    fn kshot_covers_satisfiable_types(types in 1usize..4, sentences in corpus(3), k in 1usize..6, seed in any::<u64>()) {
        let s = schema(types);
        let train: Vec<Sentence> = sentences
            .into_iter()
            .map(|mut x| {
                x.gold_tags.iter_mut().for_each(|t| *t %= s.num_labels());
                x
            })
            .collect();
        let sample = sample_kshot(&train, &s, k, seed);
        prop_assert_eq!(&sample, &sample_kshot(&train, &s, k, seed));

        let mut ids = sample.selected.clone();
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), sample.selected.len());

        let count = |rows: &mut dyn Iterator<Item = &Sentence>| {
            let mut c = vec![0usize; types];
            for x in rows {
                for sp in decode_spans(&x.gold_tags, &s) {
                    c[sp.entity_type] += 1;
                }
            }
            c
        };
        let available = count(&mut train.iter());
        let got = count(&mut sample.sentences(&train).into_iter());
        for t in 0..types {
            prop_assert!(got[t] >= k.min(available[t]));
            prop_assert_eq!(sample.per_type_counts[&s.entity_types[t]], got[t]);
            prop_assert_eq!(available[t] == 0, sample.unsatisfiable.contains(&s.entity_types[t]));
        }
    }

    #[test]
    fn aggregate_is_mean_and_population_std(values in prop::collection::vec(-1.0f64..1.0, 1..20)) {
        let (mean, std) = aggregate(&values).unwrap();
        let n = values.len() as f64;
        let m: f64 = values.iter().sum::<f64>() / n;
        let v: f64 = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        prop_assert!((mean - m).abs() < 1e-12);
        prop_assert!((std - v.sqrt()).abs() < 1e-12);
        let (_, flat) = aggregate(&vec![values[0]; values.len()]).unwrap();
        prop_assert!(flat.abs() < 1e-12);
    }
}
