//! The synthetic benchmark end to end: suite corpora, vocabulary and a
//! backbone pretrained on the pretraining domains, then frozen.

use serde::{Deserialize, Serialize};

use crate::backbone::{pretrain, BackboneError, BackboneModel, ModelConfig, PrefixMatrices, PretrainConfig, Seq2SeqExample};
use crate::corpus::{CorpusSplit, Vocabulary};
use crate::numerics::Rng;
use crate::pipeline::{self, PipelineConfig, PipelineError, PipelineInputs, RunOutcome, SourceInput};
use crate::synth::{self, SuiteConfig, SynthError, SyntheticSuite, LABEL_CLASSES};
use crate::taskformat::{self, AnnotatedSentence, Domain, EntitySpan, FormatError};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}

/// How the pretraining mixture is assembled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub seed: u64,
    /// Copies of each pretraining sentence with options, each with freshly
    /// drawn label names and shuffled option order.
    pub option_variants: usize,
    /// Copies without options, under the domain's own label names.
    pub plain_variants: usize,
    /// Copies with options under a mix of same-world prefixes.
    pub mixture_variants: usize,
    /// Chance that a mix also contains the sentence's own prefix.
    pub own_in_mix: f64,
    /// Prefix-free single-label examples over the pretraining mention pool.
    pub copy_examples: usize,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self { seed: 3, option_variants: 1, plain_variants: 1, mixture_variants: 2, own_in_mix: 0.5, copy_examples: 800 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub suite: SuiteConfig,
    pub mixture: MixtureConfig,
    pub pretrain: PretrainConfig,
    pub model_seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            suite: SuiteConfig::default(),
            mixture: MixtureConfig::default(),
            pretrain: PretrainConfig { steps: 8000, batch_size: 8, learning_rate: 2e-3, seed: 5, train_embeddings: false, groups: 0, shared_init: true },
            model_seed: 11,
        }
    }
}

/// Corpora of every suite domain. Pretraining and source domains have one
/// training split each; the target has train, dev and test.
#[derive(Clone, Debug)]
pub struct SuiteCorpora {
    pub pretrain: Vec<CorpusSplit>,
    pub sources: Vec<CorpusSplit>,
    pub target_train: CorpusSplit,
    pub target_dev: CorpusSplit,
    pub target_test: CorpusSplit,
}

impl SuiteCorpora {
    pub fn generate(suite: &SyntheticSuite) -> Result<Self, SynthError> {
        let (target_train, target_dev, target_test) = suite.target_splits()?;
        Ok(Self {
            pretrain: synth::generate_synthetic_suite(&suite.pretrain)?,
            sources: synth::generate_synthetic_suite(&suite.sources)?,
            target_train,
            target_dev,
            target_test,
        })
    }

    pub fn all(&self) -> Vec<&CorpusSplit> {
        let mut v: Vec<&CorpusSplit> = self.pretrain.iter().chain(&self.sources).collect();
        v.extend([&self.target_train, &self.target_dev, &self.target_test]);
        v
    }
}

/// Vocabulary over every suite corpus, every label word and the instruction.
pub fn suite_vocabulary(suite: &SyntheticSuite, corpora: &SuiteCorpora) -> Result<Vocabulary, FormatError> {
    let mut domains: Vec<Domain> = suite.all_specs().map(|s| s.domain()).collect::<Result<_, _>>()?;
    let every_label: Vec<String> = LABEL_CLASSES.iter().flat_map(|c| c.iter().map(|s| s.to_string())).collect();
    domains.push(Domain::new("all-labels", every_label)?);
    let pool = suite.pretrain_pool.join(" ");
    let tags = suite.tag_pool.join(" ");
    Ok(Vocabulary::build(&corpora.all(), &domains, &[taskformat::INSTRUCTION, &pool, &tags]))
}

fn encode(vocab: &Vocabulary, input: &str, entities: &[EntitySpan]) -> Result<(Vec<usize>, Vec<usize>), FormatError> {
    Ok((vocab.encode(input), vocab.encode(&taskformat::serialize_entities(entities)?)))
}

fn fresh_label(rng: &mut Rng, class: usize, tags: &[String]) -> String {
    format!("{} {}", LABEL_CLASSES[class][rng.below(LABEL_CLASSES[class].len())], tags[rng.below(tags.len())])
}

/// Label names drawn afresh per class, applied to a sentence, with the
/// options shown in shuffled order. Fresh tags can only be copied.
fn renamed_with_options(
    rng: &mut Rng,
    vocab: &Vocabulary,
    labels: &[String],
    tags: &[String],
    s: &AnnotatedSentence,
) -> Result<(Vec<usize>, Vec<usize>), BenchError> {
    let names: Vec<String> = labels
        .iter()
        .map(|l| fresh_label(rng, synth::label_class(l).expect("suite labels start with a class word"), tags))
        .collect();
    let rename = |l: &str| names[labels.iter().position(|x| x == l).expect("known label")].clone();
    let entities: Vec<EntitySpan> = s.entities.iter().map(|e| EntitySpan { label: rename(&e.label), ..e.clone() }).collect();
    let mut shown = names.clone();
    rng.shuffle(&mut shown);
    let input = taskformat::build_input(taskformat::INSTRUCTION, &Domain::new("mix", shown)?, &s.tokens)?;
    Ok(encode(vocab, &input, &entities)?)
}

/// The pretraining mixture. Prefix indices are the pretraining domains.
///
/// Each sentence appears under its own prefix with options (fresh label
/// names), under its own prefix without options (the domain's names), and
/// with options under a convex mix of prefixes from its world, which teaches
/// the backbone to read composed prefixes of related domains.
pub fn pretraining_examples(
    suite: &SyntheticSuite,
    corpora: &SuiteCorpora,
    vocab: &Vocabulary,
    cfg: &MixtureConfig,
) -> Result<Vec<Seq2SeqExample>, BenchError> {
    let mut rng = Rng::derive(cfg.seed, "mixture");
    let mut out = Vec::new();
    for (g, (spec, split)) in suite.pretrain.iter().zip(&corpora.pretrain).enumerate() {
        let world = suite.pretrain_world[g];
        let mates: Vec<usize> = (0..suite.pretrain.len()).filter(|&o| o != g && suite.pretrain_world[o] == world).collect();
        for s in &split.sentences {
            for _ in 0..cfg.option_variants {
                let (input, target) = renamed_with_options(&mut rng, vocab, &spec.labels, &suite.tag_pool, s)?;
                out.push(Seq2SeqExample { input, target, prefix_mix: vec![(g, 1.0)] });
            }
            for _ in 0..cfg.plain_variants {
                let (input, target) = encode(vocab, &taskformat::build_input_without_options(taskformat::INSTRUCTION, &s.tokens)?, &s.entities)?;
                out.push(Seq2SeqExample { input, target, prefix_mix: vec![(g, 1.0)] });
            }
            if mates.is_empty() {
                continue;
            }
            for _ in 0..cfg.mixture_variants {
                let k = 1 + rng.below(mates.len());
                let mut members: Vec<usize> = rng.sample_indices(mates.len(), k).into_iter().map(|i| mates[i]).collect();
                let raw: Vec<f32> = members.iter().map(|_| 0.2 + rng.unit() as f32).collect();
                let sum: f32 = raw.iter().sum();
                let mut mix: Vec<(usize, f32)> = members.drain(..).zip(raw.iter().map(|r| r / sum)).collect();
                if rng.unit() < cfg.own_in_mix {
                    // Composition with the domain's own prefix: (P_own + Σ w·P)/2.
                    mix.iter_mut().for_each(|m| m.1 *= 0.5);
                    mix.push((g, 0.5));
                }
                let (input, target) = renamed_with_options(&mut rng, vocab, &spec.labels, &suite.tag_pool, s)?;
                out.push(Seq2SeqExample { input, target, prefix_mix: mix });
            }
        }
    }
    // Prefix-free copy examples: one label, every slot of that type.
    for _ in 0..cfg.copy_examples {
        let class = rng.below(LABEL_CLASSES.len());
        let label = fresh_label(&mut rng, class, &suite.tag_pool);
        let slots = 1 + rng.below(3);
        let words = 3 + rng.below(4);
        let mut tokens: Vec<String> = (0..words).map(|_| suite.fillers[rng.below(suite.fillers.len())].clone()).collect();
        let mut inserts: Vec<(usize, &str)> = Vec::new();
        for m in rng.sample_indices(suite.pretrain_pool.len(), slots) {
            inserts.push((rng.below(tokens.len() + 1), suite.pretrain_pool[m].as_str()));
        }
        inserts.sort_by_key(|a| std::cmp::Reverse(a.0));
        for (at, m) in &inserts {
            let words: Vec<String> = m.split_whitespace().map(String::from).collect();
            tokens.splice(*at..*at, words);
        }
        let sentence = annotate(&tokens, &suite.pretrain_pool, &label)?;
        let (input, target) = encode(
            vocab,
            &taskformat::build_input(taskformat::INSTRUCTION, &Domain::new("copy", vec![label.clone()])?, &sentence.tokens)?,
            &sentence.entities,
        )?;
        out.push(Seq2SeqExample { input, target, prefix_mix: Vec::new() });
    }
    Ok(out)
}

/// Labels every non-overlapping pool mention in `tokens`, longest first.
fn annotate(tokens: &[String], pool: &[String], label: &str) -> Result<AnnotatedSentence, FormatError> {
    let mut entities = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let hit = [2usize, 1].into_iter().find(|&n| i + n <= tokens.len() && pool.contains(&tokens[i..i + n].join(" ")));
        match hit {
            Some(n) => {
                entities.push(EntitySpan::from_tokens(label, tokens, i, i + n)?);
                i += n;
            }
            None => i += 1,
        }
    }
    Ok(AnnotatedSentence { tokens: tokens.to_vec(), entities })
}

/// A generated suite with its vocabulary and frozen, pretrained backbone.
pub struct Benchmark {
    pub config: BenchConfig,
    pub suite: SyntheticSuite,
    pub corpora: SuiteCorpora,
    pub vocab: Vocabulary,
    pub model: BackboneModel,
    pub pretrain_losses: Vec<f32>,
    /// Jointly trained prefix of each pretraining domain.
    pub pretrain_prefixes: Vec<PrefixMatrices>,
}

impl Benchmark {
    pub fn build(config: BenchConfig) -> Result<Self, BenchError> {
        let suite = SyntheticSuite::generate(config.suite.clone())?;
        let corpora = SuiteCorpora::generate(&suite)?;
        let vocab = suite_vocabulary(&suite, &corpora)?;
        let examples = pretraining_examples(&suite, &corpora, &vocab, &config.mixture)?;
        let mut model = BackboneModel::init(ModelConfig::toy(vocab.len()), config.model_seed)?;
        let mut pcfg = config.pretrain.clone();
        pcfg.groups = suite.pretrain.len();
        let report = pretrain(&mut model, &examples, &pcfg)?;
        model.freeze();
        Ok(Self { config, suite, corpora, vocab, model, pretrain_losses: report.losses, pretrain_prefixes: report.prefixes })
    }

    /// Same suite around an already pretrained backbone.
    pub fn with_model(config: BenchConfig, mut model: BackboneModel) -> Result<Self, BenchError> {
        let suite = SyntheticSuite::generate(config.suite.clone())?;
        let corpora = SuiteCorpora::generate(&suite)?;
        let vocab = suite_vocabulary(&suite, &corpora)?;
        model.freeze();
        Ok(Self { config, suite, corpora, vocab, model, pretrain_losses: Vec::new(), pretrain_prefixes: Vec::new() })
    }

    pub fn target_domain(&self) -> Result<Domain, FormatError> {
        self.suite.target.domain()
    }

    /// Source inputs without prefixes.
    pub fn sources(&self) -> Result<Vec<SourceInput>, FormatError> {
        self.suite
            .sources
            .iter()
            .zip(&self.corpora.sources)
            .map(|(spec, train)| Ok(SourceInput { domain: spec.domain()?, train: train.clone(), prefix: None }))
            .collect()
    }

    /// Sources with prefixes warmed under `cfg`'s options setting.
    pub fn warmed_sources(&self, cfg: &PipelineConfig) -> Result<Vec<SourceInput>, PipelineError> {
        let mut sources = self.sources().map_err(|e| PipelineError::new("setup", e))?;
        for s in &mut sources {
            s.prefix = Some(pipeline::warm_source(&self.model, &self.vocab, s, cfg).map_err(|e| PipelineError::new("warm-up", e))?);
        }
        Ok(sources)
    }

    pub fn inputs(&self, sources: Vec<SourceInput>) -> Result<PipelineInputs<'_>, PipelineError> {
        Ok(PipelineInputs {
            model: &self.model,
            vocab: &self.vocab,
            sources,
            target: self.target_domain().map_err(|e| PipelineError::new("setup", e))?,
            target_pool: &self.corpora.target_train,
            dev: &self.corpora.target_dev,
            test: &self.corpora.target_test,
        })
    }

    /// One run of `cfg` per seed.
    pub fn run_seeds(&self, sources: &[SourceInput], cfg: &PipelineConfig, seeds: std::ops::Range<u64>) -> Result<Vec<RunOutcome>, PipelineError> {
        let inputs = self.inputs(sources.to_vec())?;
        seeds.map(|seed| pipeline::run_pipeline(&inputs, &PipelineConfig { seed, ..cfg.clone() })).collect()
    }
}
