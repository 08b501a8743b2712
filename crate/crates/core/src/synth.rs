//! Synthetic cross-domain NER corpora.
//!
//! Every entity type belongs to a latent class (person-like, place-like, ...);
//! each class has several label words, and a domain names each of its classes
//! with one of them plus a tag word (`city vom`). A mention's type follows from its gazetteer and from the
//! cue word in front of it. Domains of one "world" agree on which cues
//! belong to which class; different worlds disagree, so the knowledge a
//! domain contributes has to travel in its prefix.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplit, DomainRecord, Split};
use crate::numerics::Rng;
use crate::taskformat::{AnnotatedSentence, Domain, EntitySpan, FormatError};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("template {0:?} has no entity slots")]
    NoSlots(String),
    #[error("template {template:?} names unknown label {label:?}")]
    UnknownSlotLabel { template: String, label: String },
    #[error("label {0:?} has an empty gazetteer")]
    EmptyGazetteer(String),
    #[error("domain {name:?}: {reason}")]
    Invalid { name: String, reason: String },
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// One synthetic domain. Templates are whitespace-separated words in which
/// `{}` is an untyped slot and `{label}` a typed one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    pub name: String,
    pub labels: Vec<String>,
    pub gazetteer: BTreeMap<String, Vec<String>>,
    pub templates: Vec<String>,
    pub sentences: usize,
    pub seed: u64,
}

impl SyntheticDomainSpec {
    pub fn domain(&self) -> Result<Domain, FormatError> {
        Domain::new(self.name.clone(), self.labels.clone())
    }

    pub fn record(&self) -> DomainRecord {
        DomainRecord { name: self.name.clone(), labels: self.labels.clone(), tag_map: BTreeMap::new() }
    }

    /// All mention strings in the gazetteer.
    pub fn mentions(&self) -> BTreeSet<&str> {
        self.gazetteer.values().flatten().map(String::as_str).collect()
    }

    fn validate(&self) -> Result<(), SynthError> {
        self.domain()?;
        for l in &self.labels {
            if self.gazetteer.get(l).is_none_or(Vec::is_empty) {
                return Err(SynthError::EmptyGazetteer(l.clone()));
            }
        }
        if self.templates.is_empty() {
            return Err(SynthError::Invalid { name: self.name.clone(), reason: "no templates".into() });
        }
        for t in &self.templates {
            let slots = parse_template(t);
            if !slots.iter().any(|s| matches!(s, Piece::Slot(_))) {
                return Err(SynthError::NoSlots(t.clone()));
            }
            for s in slots {
                if let Piece::Slot(Some(l)) = s {
                    if !self.labels.contains(&l) {
                        return Err(SynthError::UnknownSlotLabel { template: t.clone(), label: l });
                    }
                }
            }
        }
        Ok(())
    }
}

enum Piece {
    Word(String),
    Slot(Option<String>),
}

/// Splits on whitespace; a `{...}` slot may span several words.
fn parse_template(t: &str) -> Vec<Piece> {
    let mut out = Vec::new();
    let mut open: Option<String> = None;
    for w in t.split_whitespace() {
        let word = match open.take() {
            Some(acc) => format!("{acc} {w}"),
            None => w.to_string(),
        };
        if word.starts_with('{') && !word.ends_with('}') {
            open = Some(word);
            continue;
        }
        out.push(match word.strip_prefix('{').and_then(|r| r.strip_suffix('}')) {
            Some("") => Piece::Slot(None),
            Some(l) => Piece::Slot(Some(l.to_string())),
            None => Piece::Word(word),
        });
    }
    out.extend(open.map(Piece::Word));
    out
}

/// Number of entity slots in a template.
pub fn slot_count(template: &str) -> usize {
    parse_template(template).iter().filter(|p| matches!(p, Piece::Slot(_))).count()
}

/// Fills templates with gazetteer mentions. Within a sentence no mention repeats.
pub fn generate_domain(spec: &SyntheticDomainSpec) -> Result<Vec<AnnotatedSentence>, SynthError> {
    spec.validate()?;
    let mut rng = Rng::derive(spec.seed, &format!("synth:{}", spec.name));
    let templates: Vec<Vec<Piece>> = spec.templates.iter().map(|t| parse_template(t)).collect();
    let mut out = Vec::with_capacity(spec.sentences);
    for _ in 0..spec.sentences {
        let t = &templates[rng.below(templates.len())];
        let mut tokens = Vec::new();
        let mut entities = Vec::new();
        let mut used: BTreeSet<&str> = BTreeSet::new();
        for piece in t {
            match piece {
                Piece::Word(w) => tokens.push(w.clone()),
                Piece::Slot(label) => {
                    let label = match label {
                        Some(l) => l.as_str(),
                        None => spec.labels[rng.below(spec.labels.len())].as_str(),
                    };
                    let pool = &spec.gazetteer[label];
                    let free: Vec<&String> = pool.iter().filter(|m| !used.contains(m.as_str())).collect();
                    let mention = if free.is_empty() { &pool[rng.below(pool.len())] } else { free[rng.below(free.len())] };
                    used.insert(mention);
                    let start = tokens.len();
                    tokens.extend(mention.split_whitespace().map(String::from));
                    entities.push(EntitySpan::from_tokens(label, &tokens, start, tokens.len())?);
                }
            }
        }
        let s = AnnotatedSentence { tokens, entities };
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

/// Generates one training split per spec, in order.
pub fn generate_synthetic_suite(specs: &[SyntheticDomainSpec]) -> Result<Vec<CorpusSplit>, SynthError> {
    specs
        .iter()
        .map(|s| Ok(CorpusSplit { domain: s.name.clone(), split: Split::Train, sentences: generate_domain(s)? }))
        .collect()
}

/// Label words per latent class.
pub const LABEL_CLASSES: [&[&str]; 6] = [
    &["person", "musician", "scientist"],
    &["location", "city", "country"],
    &["organization", "band", "university"],
    &["work", "song", "book"],
    &["event", "festival", "award"],
    &["product", "device", "software"],
];

/// Latent class of a label, read from its first word.
pub fn label_class(label: &str) -> Option<usize> {
    let head = label.split_whitespace().next()?;
    LABEL_CLASSES.iter().position(|c| c.contains(&head))
}

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Deterministic pseudo-word factory; never repeats a word.
struct WordMaker {
    rng: Rng,
    taken: BTreeSet<String>,
}

impl WordMaker {
    fn new(seed: u64, reserved: &[&str]) -> Self {
        Self { rng: Rng::derive(seed, "words"), taken: reserved.iter().map(|s| s.to_string()).collect() }
    }

    fn word(&mut self, syllables: usize) -> String {
        loop {
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS[self.rng.below(ONSETS.len())]);
                w.push_str(VOWELS[self.rng.below(VOWELS.len())]);
            }
            if self.rng.below(3) == 0 {
                w.push_str(ONSETS[self.rng.below(ONSETS.len())]);
            }
            if self.taken.insert(w.clone()) {
                return w;
            }
        }
    }

    fn words(&mut self, n: usize, syllables: usize) -> Vec<String> {
        (0..n).map(|_| self.word(syllables)).collect()
    }
}

/// Parameters of the default benchmark suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    pub num_sources: usize,
    /// Fraction of the target gazetteer each source shares (same classes).
    pub overlap: f64,
    /// Every source shares the same part of the target gazetteer.
    #[serde(default)]
    pub shared_overlap: bool,
    /// Classes per source or target domain.
    pub classes_per_domain: usize,
    pub mentions_per_label: usize,
    /// Share of mentions spanning two tokens.
    pub two_token_fraction: f64,
    pub filler_words: usize,
    /// Cue words per class; every slot is preceded by one of its class's cues.
    pub cues_per_class: usize,
    pub templates_per_domain: usize,
    pub source_sentences: usize,
    pub target_train_sentences: usize,
    pub target_dev_sentences: usize,
    pub target_test_sentences: usize,
    /// Groups of pretraining domains that agree on which cue marks which class.
    pub pretrain_worlds: usize,
    pub domains_per_world: usize,
    pub pretrain_sentences: usize,
    /// Size of the mention pool shared by the pretraining domains.
    pub pretrain_mention_pool: usize,
    /// Mentions each pretraining label draws from the pool.
    pub pretrain_mentions_per_label: usize,
    /// Templates per pretraining domain; many templates leave the cue as the
    /// only reliable signal.
    pub pretrain_templates_per_domain: usize,
    /// Tag words pretraining label names draw from.
    pub pretrain_tag_pool: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            num_sources: 4,
            overlap: 0.5,
            shared_overlap: true,
            classes_per_domain: 4,
            mentions_per_label: 12,
            two_token_fraction: 0.2,
            filler_words: 48,
            cues_per_class: 4,
            templates_per_domain: 48,
            source_sentences: 400,
            target_train_sentences: 200,
            target_dev_sentences: 24,
            target_test_sentences: 120,
            pretrain_worlds: 4,
            domains_per_world: 4,
            pretrain_sentences: 200,
            pretrain_mention_pool: 320,
            pretrain_mentions_per_label: 64,
            pretrain_templates_per_domain: 96,
            pretrain_tag_pool: 64,
        }
    }
}

/// The generated benchmark: pretraining domains, sources and one target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSuite {
    pub config: SuiteConfig,
    pub fillers: Vec<String>,
    /// Words that precede entity slots; their class differs between worlds.
    pub cue_words: Vec<String>,
    pub pretrain: Vec<SyntheticDomainSpec>,
    /// World index of each pretraining domain.
    pub pretrain_world: Vec<usize>,
    pub sources: Vec<SyntheticDomainSpec>,
    pub target: SyntheticDomainSpec,
    /// Pools for single-label pretraining examples.
    pub pretrain_pool: Vec<String>,
    /// Tag words of pretraining label names.
    pub tag_pool: Vec<String>,
}

/// Templates of filler words whose slots are typed, each preceded by one of
/// the cue words of its class.
fn make_templates(rng: &mut Rng, fillers: &[String], labels: &[String], cues: &[Vec<String>], n: usize) -> Vec<String> {
    (0..n)
        .map(|_| {
            let slots = 1 + rng.below(2);
            let words = 2 + rng.below(4);
            let mut pieces: Vec<String> = (0..words).map(|_| fillers[rng.below(fillers.len())].clone()).collect();
            for _ in 0..slots {
                let j = rng.below(labels.len());
                let cue = &cues[j][rng.below(cues[j].len())];
                let at = rng.below(pieces.len() + 1);
                pieces.insert(at, format!("{cue} {{{}}}", labels[j]));
            }
            pieces.join(" ")
        })
        .collect()
}

fn pick_classes(rng: &mut Rng, k: usize) -> Vec<usize> {
    let mut c = rng.sample_indices(LABEL_CLASSES.len(), k);
    c.sort_unstable();
    c
}

/// One class word plus a tag word per class, e.g. `city vom`.
fn name_classes(rng: &mut Rng, classes: &[usize], mut tag: impl FnMut(&mut Rng) -> String) -> Vec<String> {
    classes.iter().map(|&c| format!("{} {}", LABEL_CLASSES[c][rng.below(LABEL_CLASSES[c].len())], tag(rng))).collect()
}

/// A random split of the cue inventory into one cue list per class.
fn assign_cues(rng: &mut Rng, inventory: &[String], classes: usize, per_class: usize) -> Vec<Vec<String>> {
    let mut order: Vec<String> = inventory.to_vec();
    rng.shuffle(&mut order);
    order.chunks(per_class).take(classes).map(<[String]>::to_vec).collect()
}

fn rename_template(t: &str, from: &[String], to: &[String]) -> String {
    from.iter().zip(to).fold(t.to_string(), |acc, (f, n)| acc.replace(&format!("{{{f}}}"), &format!("{{{n}}}")))
}

impl SyntheticSuite {
    pub fn generate(config: SuiteConfig) -> Result<Self, SynthError> {
        if config.classes_per_domain == 0 || config.classes_per_domain > LABEL_CLASSES.len() || config.cues_per_class == 0 {
            return Err(SynthError::Invalid { name: "suite".into(), reason: "classes and cues per class must be positive".into() });
        }
        let mut rng = Rng::derive(config.seed, "suite");
        let mut reserved: Vec<&str> = LABEL_CLASSES.iter().flat_map(|c| c.iter().copied()).collect();
        reserved.extend(["options", "sentence"]);
        let mut words = WordMaker::new(config.seed, &reserved);
        let fillers = words.words(config.filler_words, 1);
        let cue_words = words.words(config.cues_per_class * config.classes_per_domain, 1);
        let mention = |words: &mut WordMaker, rng: &mut Rng| {
            if rng.unit() < config.two_token_fraction {
                format!("{} {}", words.word(2), words.word(2))
            } else {
                words.word(2)
            }
        };
        let k = config.classes_per_domain;

        // Pretraining worlds share one cue inventory, each with its own class
        // assignment. Every label draws its mentions from one shared pool, so
        // a mention says nothing about its class: the cue decides, and the
        // mention has to be copied from the input.
        let pretrain_pool: Vec<String> = (0..config.pretrain_mention_pool).map(|_| mention(&mut words, &mut rng)).collect();
        let tag_pool = words.words(config.pretrain_tag_pool, 1);
        let mut pretrain = Vec::new();
        let mut pretrain_world = Vec::new();
        for w in 0..config.pretrain_worlds {
            let classes = pick_classes(&mut rng, k);
            let cues = assign_cues(&mut rng, &cue_words, k, config.cues_per_class);
            for d in 0..config.domains_per_world {
                let labels = name_classes(&mut rng, &classes, |r| tag_pool[r.below(tag_pool.len())].clone());
                let gazetteer = labels
                    .iter()
                    .map(|l| {
                        let take = rng.sample_indices(pretrain_pool.len(), config.pretrain_mentions_per_label.min(pretrain_pool.len()));
                        (l.clone(), take.into_iter().map(|i| pretrain_pool[i].clone()).collect())
                    })
                    .collect();
                let i = pretrain.len();
                pretrain.push(SyntheticDomainSpec {
                    name: format!("pretrain{w}-{d}"),
                    templates: make_templates(&mut rng, &fillers, &labels, &cues, config.pretrain_templates_per_domain),
                    labels,
                    gazetteer,
                    sentences: config.pretrain_sentences,
                    seed: config.seed.wrapping_add(100 + i as u64),
                });
                pretrain_world.push(w);
            }
        }

        // The target and its sources form one more world.
        let target_classes = pick_classes(&mut rng, k);
        // Target and source tags never occur in pretraining.
        let target_labels = name_classes(&mut rng, &target_classes, |_| words.word(1));
        let target_cues = assign_cues(&mut rng, &cue_words, k, config.cues_per_class);
        let target_gaz: BTreeMap<String, Vec<String>> = target_labels
            .iter()
            .map(|l| (l.clone(), (0..config.mentions_per_label).map(|_| mention(&mut words, &mut rng)).collect()))
            .collect();
        let target_templates = make_templates(&mut rng, &fillers, &target_labels, &target_cues, config.templates_per_domain);
        let target = SyntheticDomainSpec {
            name: "target".into(),
            labels: target_labels.clone(),
            gazetteer: target_gaz.clone(),
            templates: target_templates.clone(),
            sentences: config.target_train_sentences + config.target_dev_sentences + config.target_test_sentences,
            seed: config.seed.wrapping_add(1),
        };

        let shared = (config.mentions_per_label as f64 * config.overlap).round() as usize;
        // With a shared core every source knows the same target mentions.
        let core: Vec<Vec<usize>> =
            target_labels.iter().map(|l| rng.sample_indices(target_gaz[l].len(), shared)).collect();
        let mut sources = Vec::new();
        for i in 0..config.num_sources {
            let names = name_classes(&mut rng, &target_classes, |_| words.word(1));
            let mut gazetteer = BTreeMap::new();
            for (j, (tl, sl)) in target_labels.iter().zip(&names).enumerate() {
                let pool = &target_gaz[tl];
                let picks = if config.shared_overlap { core[j].clone() } else { rng.sample_indices(pool.len(), shared) };
                let mut ms: Vec<String> = picks.into_iter().map(|p| pool[p].clone()).collect();
                while ms.len() < config.mentions_per_label {
                    ms.push(mention(&mut words, &mut rng));
                }
                gazetteer.insert(sl.clone(), ms);
            }
            // Half of each source's templates are a random subset of the target's.
            let own = config.templates_per_domain / 2;
            let mut templates = make_templates(&mut rng, &fillers, &names, &target_cues, own);
            let borrowed = rng.sample_indices(target_templates.len(), (config.templates_per_domain - own).min(target_templates.len()));
            templates.extend(borrowed.into_iter().map(|t| rename_template(&target_templates[t], &target_labels, &names)));
            sources.push(SyntheticDomainSpec {
                name: format!("source{i}"),
                labels: names,
                gazetteer,
                templates,
                sentences: config.source_sentences,
                seed: config.seed.wrapping_add(10 + i as u64),
            });
        }
        let suite = Self { config, fillers, cue_words, pretrain, pretrain_world, sources, target, pretrain_pool, tag_pool };
        for s in suite.all_specs() {
            s.validate()?;
        }
        Ok(suite)
    }

    pub fn all_specs(&self) -> impl Iterator<Item = &SyntheticDomainSpec> {
        self.pretrain.iter().chain(&self.sources).chain(std::iter::once(&self.target))
    }

    /// Target train pool, dev and test splits (disjoint, in that order).
    pub fn target_splits(&self) -> Result<(CorpusSplit, CorpusSplit, CorpusSplit), SynthError> {
        let all = generate_domain(&self.target)?;
        let (a, b) = (self.config.target_train_sentences, self.config.target_dev_sentences);
        let mk = |split, s: &[AnnotatedSentence]| CorpusSplit { domain: self.target.name.clone(), split, sentences: s.to_vec() };
        Ok((mk(Split::Train, &all[..a]), mk(Split::Dev, &all[a..a + b]), mk(Split::Test, &all[a + b..])))
    }

    pub fn registry(&self) -> crate::corpus::DomainRegistry {
        crate::corpus::DomainRegistry { domains: self.all_specs().map(SyntheticDomainSpec::record).collect() }
    }
}
