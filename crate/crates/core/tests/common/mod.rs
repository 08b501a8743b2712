#![allow(dead_code)]

use cpner::numerics::Rng;
use cpner::taskformat::{Domain, EntitySpan};

pub const LABELS: [&str; 5] = ["person", "location", "musical artist", "misc", "organisation"];

pub fn domain() -> Domain {
    Domain::new("fuzz", LABELS.iter().map(|s| s.to_string()).collect()).unwrap()
}

const WORD_CHARS: &[char] = &['a', 'b', 'k', 'z', 'Q', 'é', 'ß', '0', '7', '.', '-', '\'', '&', '/', '"', '!', '?', ';'];

fn word(rng: &mut Rng) -> String {
    (0..1 + rng.below(6)).map(|_| WORD_CHARS[rng.below(WORD_CHARS.len())]).collect()
}

/// A well-formed entity set: distinct (label, mention) pairs whose mentions
/// are non-empty, single-spaced and free of separator characters.
pub fn entity_set(rng: &mut Rng) -> Vec<(String, String)> {
    let n = rng.below(6);
    let mut out: Vec<(String, String)> = Vec::new();
    while out.len() < n {
        let label = LABELS[rng.below(LABELS.len())].to_string();
        let mention = (0..1 + rng.below(3)).map(|_| word(rng)).collect::<Vec<_>>().join(" ");
        if !out.iter().any(|(l, m)| *l == label && *m == mention) {
            out.push((label, mention));
        }
    }
    out
}

pub fn spans(set: &[(String, String)]) -> Vec<EntitySpan> {
    set.iter().map(|(l, m)| EntitySpan { label: l.clone(), mention: m.clone(), start: 0, end: 1 }).collect()
}

const FUZZ_PIECES: &[&str] = &["(", ")", ":", " ", "  ", "\n", "person", "misc", "musical artist", "bogus", "x", "é", ",", "((", "))", ": :", "\t"];

/// Arbitrary text biased towards the linearization's own vocabulary.
pub fn fuzz_string(rng: &mut Rng) -> String {
    let n = rng.below(40);
    let mut s = String::new();
    for _ in 0..n {
        if rng.below(8) == 0 {
            s.push(char::from_u32(rng.below(0x3000) as u32).unwrap_or('?'));
        } else {
            s.push_str(FUZZ_PIECES[rng.below(FUZZ_PIECES.len())]);
        }
    }
    s
}

use std::path::Path;

use cpner::backbone::{BackboneModel, ModelConfig};
use cpner::bench::{suite_vocabulary, SuiteCorpora};
use cpner::composer::TransferConfig;
use cpner::corpus::{self, Vocabulary};
use cpner::pipeline::{PipelineConfig, PipelineFiles, SourceFiles};
use cpner::prefixstore::WarmupConfig;
use cpner::synth::{SuiteConfig, SyntheticSuite};

/// A small suite around an untrained, frozen model.
pub struct Tiny {
    pub suite: SyntheticSuite,
    pub corpora: SuiteCorpora,
    pub vocab: Vocabulary,
    pub model: BackboneModel,
}

pub fn tiny_config(vocab: usize) -> ModelConfig {
    let mut c = ModelConfig::toy(vocab);
    c.d_model = 16;
    c.num_heads = 2;
    c.d_ff = 32;
    c.prefix_length = 2;
    c.num_encoder_layers = 1;
    c.num_decoder_layers = 1;
    c
}

pub fn tiny() -> Tiny {
    let cfg = SuiteConfig {
        num_sources: 2,
        source_sentences: 12,
        target_train_sentences: 12,
        target_dev_sentences: 3,
        target_test_sentences: 4,
        pretrain_worlds: 1,
        domains_per_world: 1,
        pretrain_sentences: 2,
        ..SuiteConfig::default()
    };
    let suite = SyntheticSuite::generate(cfg).unwrap();
    let corpora = SuiteCorpora::generate(&suite).unwrap();
    let vocab = suite_vocabulary(&suite, &corpora).unwrap();
    let mut model = BackboneModel::init(tiny_config(vocab.len()), 1).unwrap();
    model.freeze();
    Tiny { suite, corpora, vocab, model }
}

/// Budgets small enough for a test run.
pub fn quick_pipeline(seed: u64) -> PipelineConfig {
    let w = WarmupConfig { steps: 4, batch_size: 2, learning_rate: 1e-2, seed: 0, bottleneck: 4 };
    PipelineConfig {
        seed,
        k_shot: 3,
        source_warmup: w.clone(),
        target_warmup: w,
        transfer: TransferConfig { steps: 4, batch_size: 2, learning_rate: 1e-2, eval_every: 2, bottleneck: 4 },
        max_new_tokens: 6,
        ..PipelineConfig::default()
    }
}

/// Writes every artifact a file-based run needs and returns its file list.
pub fn write_tiny(t: &Tiny, dir: &Path) -> PipelineFiles {
    let p = |n: &str| dir.join(n);
    t.model.save(&p("backbone.cpnb")).unwrap();
    t.vocab.save(&p("vocab.json")).unwrap();
    t.suite.registry().save(&p("registry.json")).unwrap();
    let mut sources = Vec::new();
    for split in &t.corpora.sources {
        let path = p(&format!("{}.jsonl", split.domain));
        corpus::write_jsonl(split, &path).unwrap();
        sources.push(SourceFiles { domain: split.domain.clone(), train: path, prefix: None });
    }
    for (s, n) in [(&t.corpora.target_train, "train"), (&t.corpora.target_dev, "dev"), (&t.corpora.target_test, "test")] {
        corpus::write_jsonl(s, &p(&format!("target.{n}.jsonl"))).unwrap();
    }
    PipelineFiles {
        backbone: p("backbone.cpnb"),
        vocab: p("vocab.json"),
        registry: p("registry.json"),
        target: t.suite.target.name.clone(),
        target_train: p("target.train.jsonl"),
        target_dev: p("target.dev.jsonl"),
        target_test: p("target.test.jsonl"),
        sources,
    }
}
