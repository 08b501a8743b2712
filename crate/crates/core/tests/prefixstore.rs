use cpner::backbone::{BackboneModel, ModelConfig, Site};
use cpner::corpus::{CorpusSplit, Split, Vocabulary};
use cpner::prefixstore::{
    init_prefix, load_prefix, load_prefix_for, prefix_from_bytes, prefix_to_bytes, save_prefix, train_prefix, warmup, PrefixError,
    TaskEncoder, WarmupConfig, INIT_STD,
};
use cpner::taskformat::{AnnotatedSentence, Domain, EntitySpan, INSTRUCTION};

fn config(vocab: usize) -> ModelConfig {
    let mut c = ModelConfig::toy(vocab);
    c.d_model = 16;
    c.num_heads = 2;
    c.d_ff = 32;
    c.prefix_length = 3;
    c.num_encoder_layers = 1;
    c.num_decoder_layers = 1;
    c
}

fn task() -> (Vocabulary, Domain, CorpusSplit) {
    let domain = Domain::new("toy", vec!["person".into(), "city".into()]).unwrap();
    let sentences = ["ada visits rome", "bob likes paris", "cy saw oslo", "di left rome"]
        .iter()
        .map(|s| {
            let tokens: Vec<String> = s.split(' ').map(String::from).collect();
            let entities =
                vec![EntitySpan::from_tokens("person", &tokens, 0, 1).unwrap(), EntitySpan::from_tokens("city", &tokens, 2, 3).unwrap()];
            AnnotatedSentence { tokens, entities }
        })
        .collect();
    let split = CorpusSplit { domain: "toy".into(), split: Split::Train, sentences };
    let vocab = Vocabulary::build(&[&split], std::slice::from_ref(&domain), &[INSTRUCTION]);
    (vocab, domain, split)
}

fn frozen(vocab: &Vocabulary) -> BackboneModel {
    let mut m = BackboneModel::init(config(vocab.len()), 2).unwrap();
    m.freeze();
    m
}

#[test]
fn init_shapes_and_seeding() {
    let c = config(30);
    let p = init_prefix(&c, "d", 5).unwrap();
    for site in Site::ALL {
        for j in 0..c.layers(site) {
            assert_eq!(p.matrices.get(site, j).unwrap().shape(), &[3, 32]);
        }
    }
    assert_eq!(p.matrices.count(), 3);
    assert_eq!(init_prefix(&c, "other", 5).unwrap().matrices, p.matrices);
    assert_ne!(init_prefix(&c, "d", 6).unwrap().matrices, p.matrices);
    let vals: Vec<f64> = p.matrices.iter().flat_map(|t| t.data().iter().map(|&x| x as f64)).collect();
    let std = (vals.iter().map(|x| x * x).sum::<f64>() / vals.len() as f64).sqrt();
    assert!((std - INIT_STD).abs() < 0.005, "{std}");
    let mut zero = c.clone();
    zero.prefix_length = 0;
    assert!(init_prefix(&zero, "d", 1).is_err());
}

#[test]
fn options_change_the_input() {
    let (vocab, domain, split) = task();
    let with = TaskEncoder::new(&vocab, true).encode(&domain, &split.sentences[0]).unwrap();
    let without = TaskEncoder::new(&vocab, false).encode(&domain, &split.sentences[0]).unwrap();
    assert!(with.input.len() > without.input.len());
    assert_eq!(with.target, without.target);
    assert!(with.input.iter().all(|&t| t > 1), "no unknown tokens expected");
}

#[test]
fn warmup_lowers_loss_and_keeps_backbone() {
    let (vocab, domain, split) = task();
    let model = frozen(&vocab);
    let hash = model.content_hash();
    let start = init_prefix(model.config(), "toy", 1).unwrap();
    let cfg = WarmupConfig { steps: 80, batch_size: 4, learning_rate: 5e-3, seed: 3, bottleneck: 8 };
    let enc = TaskEncoder::new(&vocab, true);
    let out = warmup(&model, &start, &split, &domain, &enc, &cfg).unwrap();
    assert_eq!(model.content_hash(), hash);
    let head: f32 = out.losses[..5].iter().sum::<f32>() / 5.0;
    let tail: f32 = out.losses[out.losses.len() - 5..].iter().sum::<f32>() / 5.0;
    assert!(tail < head * 0.8, "{head} -> {tail}");
    assert_eq!(out.prefix.steps, 80);
    assert_eq!(out.prefix.domain, "toy");

    let again = warmup(&model, &start, &split, &domain, &enc, &cfg).unwrap();
    assert_eq!(again.prefix.matrices, out.prefix.matrices, "seeded warm-up is deterministic");
}

#[test]
fn zero_steps_returns_the_start() {
    let (vocab, domain, split) = task();
    let model = frozen(&vocab);
    let start = init_prefix(model.config(), "toy", 1).unwrap();
    let examples = TaskEncoder::new(&vocab, true).encode_split(&domain, &split).unwrap();
    let out = train_prefix(&model, &start, &examples, &WarmupConfig { steps: 0, ..WarmupConfig::default() }, None).unwrap();
    assert_eq!(out.prefix.matrices, start.matrices);
}

#[test]
fn training_preconditions() {
    let (vocab, domain, split) = task();
    let enc = TaskEncoder::new(&vocab, true);
    let unfrozen = BackboneModel::init(config(vocab.len()), 2).unwrap();
    let start = init_prefix(unfrozen.config(), "toy", 1).unwrap();
    let r = warmup(&unfrozen, &start, &split, &domain, &enc, &WarmupConfig::default());
    assert!(matches!(r, Err(PrefixError::NotFrozen)));
    let model = frozen(&vocab);
    let empty = CorpusSplit { sentences: vec![], ..split.clone() };
    assert!(matches!(warmup(&model, &start, &empty, &domain, &enc, &WarmupConfig::default()), Err(PrefixError::EmptyCorpus)));
    let bad = WarmupConfig { learning_rate: 0.0, ..WarmupConfig::default() };
    assert!(matches!(warmup(&model, &start, &split, &domain, &enc, &bad), Err(PrefixError::Config(_))));
}

#[test]
fn file_round_trip_and_corruption() {
    let (vocab, _, _) = task();
    let model = frozen(&vocab);
    let p = init_prefix(model.config(), "toy", 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.cpnp");
    save_prefix(&p, &path).unwrap();
    let back = load_prefix_for(&path, &model).unwrap();
    assert_eq!(back, p);

    let bytes = prefix_to_bytes(&p);
    for cut in [3, 7, 20, bytes.len() - 1] {
        assert!(prefix_from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    assert!(matches!(prefix_from_bytes(&bytes[..bytes.len() - 4]), Err(PrefixError::Truncated { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(prefix_from_bytes(&bad), Err(PrefixError::BadMagic)));
    let mut long = bytes.clone();
    long.push(0);
    assert!(prefix_from_bytes(&long).is_err());

    let mut other_cfg = config(vocab.len());
    other_cfg.d_ff = 48;
    let mut other = BackboneModel::init(other_cfg, 1).unwrap();
    other.freeze();
    assert!(matches!(load_prefix_for(&path, &other), Err(PrefixError::HashMismatch { .. })));
    assert!(load_prefix(&dir.path().join("missing")).is_err());
}
