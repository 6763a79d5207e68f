mod common;

use ammsnn::attention::{attention_matrix, attention_vectors, init_attention};
use ammsnn::config::RunConfig;
use ammsnn::data::checkpoint::{decode_checkpoint, encode_checkpoint};
use ammsnn::embedding::{pad_truncate, Vocabulary};
use ammsnn::encoder::{encode_feature_map, init_encoder, parse_branches, EncoderConfig};
use ammsnn::metrics::{average_precision, reciprocal_rank};
use ammsnn::model::{Model, ModelConfig};
use ammsnn::scoring::{cosine, order_candidates, rank_candidates, PairRepresentation, ScoredCandidate};
use ammsnn::tensor::{Activation, ParamStore, Tape};
use ammsnn::trainer::dropout_mask;
use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;

fn activation() -> impl Strategy<Value = Activation> {
    prop_oneof![Just(Activation::Tanh), Just(Activation::Relu), Just(Activation::Sigmoid)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_weights_are_distributions(
        seed in any::<u64>(),
        c in 1usize..6,
        l in 1usize..9,
        lq in 1usize..9,
        la in 1usize..9,
    ) {
        let (lq, la) = (lq.min(l), la.min(l));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let att = init_attention(&mut store, c, &mut rng).unwrap();
        let mut tape = Tape::new();
        let q = tape.constant(vec![c, l], padded_feature_values(&mut rng, c, l, lq)).unwrap();
        let a = tape.constant(vec![c, l], padded_feature_values(&mut rng, c, l, la)).unwrap();
        let qf = ammsnn::encoder::FeatureMap { values: q, len: lq };
        let af = ammsnn::encoder::FeatureMap { values: a, len: la };
        let t = attention_matrix(&mut tape, &store, &qf, &af, &att).unwrap();
        let (sq, sa) = attention_vectors(&mut tape, t, lq, la).unwrap();
        prop_assert!(tape.value(t).iter().all(|x| x.abs() < 1.0));
        for (sigma, len) in [(sq, lq), (sa, la)] {
            let v = tape.value(sigma);
            prop_assert!(v.iter().all(|&x| x >= 0.0));
            prop_assert!(v[len..].iter().all(|&x| x == 0.0));
            prop_assert!((v[..len].iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn encoder_padding_columns_are_exactly_zero(
        seed in any::<u64>(),
        len in 1usize..8,
        act in activation(),
        variant in 0usize..3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let l = 8;
        let cfg = match variant {
            0 => EncoderConfig { activation: act, ..EncoderConfig::msnn(parse_branches("1:2,3:2,5:1").unwrap()) },
            1 => EncoderConfig { activation: act, ..EncoderConfig::single_cnn(3, 3) },
            _ => EncoderConfig { activation: act, layers: 2, ..EncoderConfig::multi_cnn(5, 2) },
        };
        let mut store = ParamStore::new();
        let params = init_encoder(&mut store, &cfg, d, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(vec![d, l], padded_feature_values(&mut rng, d, l, len)).unwrap();
        let fm = encode_feature_map(&mut tape, &store, x, len, &cfg, &params).unwrap();
        let v = tape.value(fm.values);
        let c = cfg.total_channels();
        prop_assert_eq!(v.len(), c * l);
        for r in 0..c {
            prop_assert!(v[r * l + len..(r + 1) * l].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn padding_tokens_do_not_change_scores(seed in any::<u64>(), extra in 0usize..4) {
        // the same sentences under a longer fixed length score identically
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = ModelConfig::new(15);
        cfg.embed_dim = 4;
        cfg.seq_len = 6;
        cfg.encoder = EncoderConfig::msnn(parse_branches("1:2,3:2").unwrap());
        let model = Model::init(cfg.clone(), &mut rng).unwrap();
        let mut long_cfg = cfg.clone();
        long_cfg.seq_len += extra;
        let long = Model::from_params(long_cfg, model.params.clone()).unwrap();
        let q = [2usize, 5, 7];
        let a = [3usize, 9, 4, 11];
        let s1 = model.score_candidates(&model.prepare(&q).unwrap(), &[model.prepare(&a).unwrap()]);
        let s2 = long.score_candidates(&long.prepare(&q).unwrap(), &[long.prepare(&a).unwrap()]);
        match (s1, s2) {
            (Ok(x), Ok(y)) => prop_assert_eq!(x, y),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "only one length failed"),
        }
    }

    #[test]
    fn single_relevant_run_has_map_equal_mrr(n in 1usize..30, pos in 0usize..30) {
        let pos = pos % n;
        let mut labels = vec![0u8; n];
        labels[pos] = 1;
        prop_assert_eq!(average_precision(&labels), reciprocal_rank(&labels));
    }

    #[test]
    fn metrics_match_brute_force(labels in prop::collection::vec(0u8..2, 1..12)) {
        prop_assert_eq!(average_precision(&labels), brute_average_precision(&labels));
        prop_assert_eq!(reciprocal_rank(&labels), brute_reciprocal_rank(&labels));
        if let Some(ap) = average_precision(&labels) {
            prop_assert!(ap > 0.0 && ap <= 1.0);
        }
    }

    #[test]
    fn cosine_is_bounded_and_scale_free(
        a in prop::collection::vec(-5.0f64..5.0, 4),
        b in prop::collection::vec(-5.0f64..5.0, 4),
        s in 0.01f64..100.0,
    ) {
        if let Ok(c) = cosine(&a, &b) {
            prop_assert!(c.abs() <= 1.0 + 1e-12);
            let scaled: Vec<f64> = a.iter().map(|x| x * s).collect();
            prop_assert!((cosine(&scaled, &b).unwrap() - c).abs() <= 1e-12);
        }
    }

    #[test]
    fn ordering_is_a_sorted_permutation(scores in prop::collection::vec(-1.0f64..1.0, 1..20)) {
        let scored: Vec<ScoredCandidate> = scores
            .iter()
            .enumerate()
            .map(|(id, &score)| ScoredCandidate { id, score, label: 0 })
            .collect();
        let ordered = order_candidates(scored).unwrap();
        let mut ids: Vec<usize> = ordered.iter().map(|c| c.id).collect();
        for w in ordered.windows(2) {
            prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].id < w[1].id));
        }
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..scores.len()).collect::<Vec<_>>());
    }

    #[test]
    fn ranking_ignores_positive_rescaling(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs: Vec<PairRepresentation> = (0..n)
            .map(|id| PairRepresentation {
                id,
                label: (id % 2) as u8,
                question: random_vec(&mut rng, 6),
                answer: random_vec(&mut rng, 6),
            })
            .collect();
        let base: Vec<usize> = rank_candidates(&pairs).unwrap().iter().map(|c| c.id).collect();
        let scaled: Vec<PairRepresentation> = pairs
            .iter()
            .map(|p| {
                let (sq, sa) = (rand::Rng::random_range(&mut rng, 0.01..100.0), rand::Rng::random_range(&mut rng, 0.01..100.0));
                PairRepresentation {
                    question: p.question.iter().map(|x| x * sq).collect(),
                    answer: p.answer.iter().map(|x| x * sa).collect(),
                    ..p.clone()
                }
            })
            .collect();
        let again: Vec<usize> = rank_candidates(&scaled).unwrap().iter().map(|c| c.id).collect();
        prop_assert_eq!(base, again);
    }

    #[test]
    fn dropout_mask_values(seed in any::<u64>(), n in 1usize..50, p in 0.0f64..0.95) {
        let mask = dropout_mask(n, p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let keep = 1.0 / (1.0 - p);
        prop_assert_eq!(mask.len(), n);
        prop_assert!(mask.iter().all(|&m| m == 0.0 || m == keep));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise(seed in any::<u64>(), attention in any::<bool>(), act in activation()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = Vocabulary::from_tokens(["a", "b", "c", "d"]).unwrap();
        let mut cfg = ModelConfig::new(vocab.len());
        cfg.embed_dim = 3;
        cfg.seq_len = 5;
        cfg.attention = attention;
        cfg.encoder = EncoderConfig { activation: act, ..EncoderConfig::msnn(parse_branches("1:2,3:1").unwrap()) };
        let model = Model::init(cfg, &mut rng).unwrap();
        let mut run = BTreeMap::new();
        run.insert("seed".to_string(), seed.to_string());
        let bytes = encode_checkpoint(&model, &vocab, &run).unwrap();
        let back = decode_checkpoint(&bytes, vocab.clone()).unwrap();
        prop_assert_eq!(&back.model.config, &model.config);
        prop_assert_eq!(&back.run, &run);
        for ((_, n1, t1), (_, n2, t2)) in model.params.iter().zip(back.model.params.iter()) {
            prop_assert_eq!(n1, n2);
            prop_assert_eq!(t1.shape(), t2.shape());
            let bits1: Vec<u64> = t1.data().iter().map(|x| x.to_bits()).collect();
            let bits2: Vec<u64> = t2.data().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(bits1, bits2);
        }
    }

    #[test]
    fn config_text_round_trips(
        margin in 0.01f64..2.0,
        lr in 1e-5f64..1.0,
        dropout in 0.0f64..0.9,
        epochs in 1usize..500,
        seed in any::<u64>(),
        attention in any::<bool>(),
    ) {
        let mut cfg = RunConfig::default();
        cfg.train.margin = margin;
        cfg.train.learning_rate = lr;
        cfg.train.dropout = dropout;
        cfg.train.epochs = epochs;
        cfg.train.seed = seed;
        cfg.attention = attention;
        let back = RunConfig::parse_str(&cfg.to_text(), Path::new("")).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn pad_truncate_keeps_prefix(ids in prop::collection::vec(1usize..50, 1..20), l in 1usize..25) {
        let p = pad_truncate(&ids, l).unwrap();
        prop_assert_eq!(p.ids.len(), l);
        prop_assert_eq!(p.len, ids.len().min(l));
        prop_assert_eq!(&p.ids[..p.len], &ids[..p.len]);
        prop_assert!(p.ids[p.len..].iter().all(|&i| i == 0));
    }
}
