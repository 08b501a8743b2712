use cpner::backbone::{BackboneModel, ModelConfig};
use cpner::composer::{aggregate_sources, compose, transfer_tune, ComposeError, TransferConfig};
use cpner::corpus::Vocabulary;
use cpner::numerics::Tensor;
use cpner::prefixstore::{init_prefix, DomainPrefix, TaskEncoder};
use cpner::taskformat::{AnnotatedSentence, Domain, EntitySpan};
use proptest::prelude::*;

fn small_config(vocab: usize) -> ModelConfig {
    let mut c = ModelConfig::toy(vocab);
    c.d_model = 16;
    c.num_heads = 2;
    c.d_ff = 32;
    c.prefix_length = 3;
    c.num_encoder_layers = 1;
    c.num_decoder_layers = 1;
    c
}

fn prefix(seed: u64) -> DomainPrefix {
    init_prefix(&small_config(40), &format!("p{seed}"), seed).unwrap()
}

fn filled(like: &DomainPrefix, v: f32) -> DomainPrefix {
    like.map_matrices(|_, _, t| Tensor::filled(t.shape(), v))
}

fn max_diff(a: &DomainPrefix, b: &DomainPrefix) -> f32 {
    a.matrices.iter().zip(b.matrices.iter()).flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs())).fold(0.0, f32::max)
}

#[test]
fn single_source_is_returned_bitwise() {
    let p = prefix(1);
    let agg = aggregate_sources(&[&p], &[1.0]).unwrap();
    assert_eq!(agg.matrices, p.matrices);
}

#[test]
fn opposite_sources_cancel() {
    let p = prefix(2);
    let n = p.map_matrices(|_, _, t| t.map(|x| -x));
    let agg = aggregate_sources(&[&p, &n], &[0.5, 0.5]).unwrap();
    assert!(agg.matrices.iter().all(|t| t.data().iter().all(|&x| x == 0.0)));
}

#[test]
fn one_hot_weights_pick_a_source() {
    let (a, b) = (prefix(3), prefix(4));
    let agg = aggregate_sources(&[&a, &b], &[1.0, 0.0]).unwrap();
    assert_eq!(agg.matrices, a.matrices);
    assert_eq!(agg.provenance.as_ref().unwrap().sources, vec!["p3".to_string(), "p4".to_string()]);
}

#[test]
fn invalid_weights_and_shapes_rejected() {
    let (a, b) = (prefix(3), prefix(4));
    assert!(matches!(aggregate_sources(&[], &[]), Err(ComposeError::NoSources)));
    assert!(matches!(aggregate_sources(&[&a, &b], &[1.0]), Err(ComposeError::WeightCount { .. })));
    assert!(matches!(aggregate_sources(&[&a, &b], &[0.7, 0.7]), Err(ComposeError::Weights(_))));
    let mut c = small_config(40);
    c.prefix_length = 5;
    let other = init_prefix(&c, "x", 1).unwrap();
    assert!(aggregate_sources(&[&a, &other], &[0.5, 0.5]).is_err());
    assert!(compose(&a, &other).is_err());
}

#[test]
fn compose_is_the_elementwise_mean() {
    let t = prefix(5);
    assert_eq!(compose(&t, &t).unwrap().matrices, t.matrices);
    let half = compose(&t, &filled(&t, 0.0)).unwrap();
    assert_eq!(half.matrices, t.map_matrices(|_, _, m| m.map(|x| x / 2.0)).matrices);
    let c = compose(&filled(&t, 4.0), &filled(&t, 2.0)).unwrap();
    assert!(c.matrices.iter().all(|m| m.data().iter().all(|&x| x == 3.0)));
}

#[test]
fn single_source_reduction() {
    let (t, s) = (prefix(6), prefix(7));
    let agg = aggregate_sources(&[&s], &[1.0]).unwrap();
    let c = compose(&t, &agg).unwrap();
    let expected = t.map_matrices(|site, j, m| {
        let o = s.matrices.get(site, j).unwrap();
        Tensor::new(m.shape().to_vec(), m.data().iter().zip(o.data()).map(|(a, b)| (a + b) / 2.0).collect()).unwrap()
    });
    assert!(max_diff(&c, &expected) < 1e-6);
    assert_eq!(c.domain, t.domain);
}

proptest! {
    #[test]
    fn aggregation_is_linear_in_the_weights(raw1 in prop::collection::vec(0.01f64..1.0, 3), raw2 in prop::collection::vec(0.01f64..1.0, 3), mix in 0.0f64..=1.0) {
        let ps = [prefix(11), prefix(12), prefix(13)];
        let refs: Vec<&DomainPrefix> = ps.iter().collect();
        let norm = |r: &[f64]| { let s: f64 = r.iter().sum(); r.iter().map(|x| x / s).collect::<Vec<_>>() };
        let (w1, w2) = (norm(&raw1), norm(&raw2));
        let a = aggregate_sources(&refs, &w1).unwrap();
        let b = aggregate_sources(&refs, &w2).unwrap();
        let mixed: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| mix * x + (1.0 - mix) * y).collect();
        let direct = aggregate_sources(&refs, &mixed).unwrap();
        let combo = aggregate_sources(&[&a, &b], &[mix, 1.0 - mix]).unwrap();
        prop_assert!(max_diff(&direct, &combo) < 1e-6);
    }

    #[test]
    fn aggregation_equals_weighted_sum_oracle(raw in prop::collection::vec(0.01f64..1.0, 4)) {
        let ps = [prefix(21), prefix(22), prefix(23), prefix(24)];
        let s: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let agg = aggregate_sources(&ps.iter().collect::<Vec<_>>(), &w).unwrap();
        for (k, m) in agg.matrices.iter().enumerate() {
            for (i, &x) in m.data().iter().enumerate() {
                let oracle: f64 = ps.iter().zip(&w).map(|(p, wi)| wi * p.matrices.iter().nth(k).unwrap().data()[i] as f64).sum();
                prop_assert!((x as f64 - oracle).abs() < 1e-6);
            }
        }
    }
}

fn toy_task() -> (Vocabulary, Domain, Vec<AnnotatedSentence>) {
    let domain = Domain::new("toy", vec!["person".into(), "city".into()]).unwrap();
    let sents: Vec<AnnotatedSentence> = [("ada visits rome", 0, 2), ("bob likes paris", 0, 2), ("cy saw oslo", 0, 2)]
        .iter()
        .map(|(s, p, c)| {
            let tokens: Vec<String> = s.split(' ').map(String::from).collect();
            let entities = vec![
                EntitySpan::from_tokens("person", &tokens, *p, p + 1).unwrap(),
                EntitySpan::from_tokens("city", &tokens, *c, c + 1).unwrap(),
            ];
            AnnotatedSentence { tokens, entities }
        })
        .collect();
    let split = cpner::corpus::CorpusSplit { domain: "toy".into(), split: cpner::corpus::Split::Train, sentences: sents.clone() };
    let vocab = Vocabulary::build(&[&split], std::slice::from_ref(&domain), &[cpner::taskformat::INSTRUCTION]);
    (vocab, domain, sents)
}

#[test]
fn transfer_tune_keeps_backbone_and_lowers_loss() {
    let (vocab, domain, sents) = toy_task();
    let mut model = BackboneModel::init(small_config(vocab.len()), 3).unwrap();
    model.freeze();
    let before = model.content_hash();
    let enc = TaskEncoder::new(&vocab, true);
    let examples: Vec<_> = sents.iter().map(|s| enc.encode(&domain, s).unwrap()).collect();
    let start = init_prefix(model.config(), "toy", 1).unwrap();
    let cfg = TransferConfig { steps: 60, batch_size: 3, learning_rate: 5e-3, eval_every: 20, bottleneck: 8 };
    let out = transfer_tune(&model, &start, &examples, &cfg, 0, None).unwrap();
    assert_eq!(model.content_hash(), before);
    let head: f32 = out.losses[..5].iter().sum::<f32>() / 5.0;
    let tail: f32 = out.losses[out.losses.len() - 5..].iter().sum::<f32>() / 5.0;
    assert!(tail < head, "{head} -> {tail}");

    let zero = TransferConfig { steps: 0, ..cfg.clone() };
    let same = transfer_tune(&model, &start, &examples, &zero, 0, None).unwrap();
    assert_eq!(same.prefix.matrices, start.matrices);

    // Dev selection returns the best evaluated step.
    let mut calls = 0;
    let scorer = Box::new(move |_: &cpner::backbone::PrefixMatrices| {
        calls += 1;
        Ok(if calls == 2 { 1.0 } else { 0.0 })
    });
    let sel = transfer_tune(&model, &start, &examples, &cfg, 0, Some(scorer)).unwrap();
    assert_eq!(sel.selected_step, 20);
    assert_eq!(sel.evaluations.iter().map(|e| e.0).collect::<Vec<_>>(), vec![0, 20, 40, 60]);
}

#[test]
fn transfer_requires_frozen_backbone() {
    let (vocab, domain, sents) = toy_task();
    let model = BackboneModel::init(small_config(vocab.len()), 3).unwrap();
    let enc = TaskEncoder::new(&vocab, true);
    let examples: Vec<_> = sents.iter().map(|s| enc.encode(&domain, s).unwrap()).collect();
    let start = init_prefix(model.config(), "toy", 1).unwrap();
    assert!(transfer_tune(&model, &start, &examples, &TransferConfig::default(), 0, None).is_err());
}
