//! End-to-end runs: warm-up, selection, composition, transfer and evaluation,
//! plus run manifests that can be replayed bit for bit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneModel, PrefixMatrices};
use crate::composer::{self, CompositionPlan, TransferConfig};
use crate::corpus::{self, CorpusSplit, DomainRegistry, Split, Vocabulary};
use crate::eval::{self, EvalResult};
use crate::prefixstore::{self, DomainPrefix, PrefixError, TaskEncoder, WarmupConfig};
use crate::selector::{self, Pooling, SimilarityReport};
use crate::taskformat::{self, AnnotatedSentence, Domain, ParsedOutput};

#[derive(Debug, thiserror::Error)]
#[error("{stage}: {source}")]
pub struct PipelineError {
    pub stage: &'static str,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

impl PipelineError {
    pub fn new(stage: &'static str, e: impl std::error::Error + Send + Sync + 'static) -> Self {
        Self { stage, source: Box::new(e) }
    }

    pub fn msg(stage: &'static str, m: impl Into<String>) -> Self {
        Self { stage, source: m.into().into() }
    }

    /// True when the root cause is a diverging loss.
    pub fn is_numeric(&self) -> bool {
        let mut e: Option<&(dyn std::error::Error + 'static)> = Some(self.source.as_ref());
        while let Some(err) = e {
            if let Some(PrefixError::NonFinite { .. } | PrefixError::Numerics(_)) = err.downcast_ref::<PrefixError>() {
                return true;
            }
            e = err.source();
        }
        false
    }
}

fn stage<T, E: std::error::Error + Send + Sync + 'static>(name: &'static str, r: Result<T, E>) -> Result<T, PipelineError> {
    r.map_err(|e| PipelineError::new(name, e))
}

/// Components switched off for ablation runs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Forces α = 0.
    pub no_entity_similarity: bool,
    /// Forces α = 1.
    pub no_prefix_similarity: bool,
    /// Source prefixes are fresh initializations instead of warmed ones.
    pub no_warmup: bool,
    /// Inputs omit the label options everywhere.
    pub no_options: bool,
    /// Target-only baseline: no sources are composed in.
    pub no_sources: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Drives the few-shot sample and the target training order.
    pub seed: u64,
    pub k_shot: usize,
    pub alpha: f64,
    #[serde(default)]
    pub per_source_alpha: Option<Vec<f64>>,
    pub pooling: Pooling,
    /// Seed for every freshly initialized prefix.
    pub prefix_init_seed: u64,
    /// Source warm-up settings (its seed is used for source warm-ups).
    pub source_warmup: WarmupConfig,
    /// Target warm-up settings on the few-shot sample.
    pub target_warmup: WarmupConfig,
    pub transfer: TransferConfig,
    pub max_new_tokens: usize,
    #[serde(default)]
    pub ablation: Ablation,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            k_shot: 10,
            alpha: 0.5,
            per_source_alpha: None,
            pooling: Pooling::Mean,
            prefix_init_seed: 1234,
            source_warmup: WarmupConfig { steps: 1500, learning_rate: 1e-2, ..WarmupConfig::default() },
            target_warmup: WarmupConfig { steps: 300, batch_size: 4, learning_rate: 3e-3, ..WarmupConfig::default() },
            transfer: TransferConfig { steps: 500, learning_rate: 1e-3, ..TransferConfig::default() },
            max_new_tokens: 48,
            ablation: Ablation::default(),
        }
    }
}

impl PipelineConfig {
    pub fn with_options(&self) -> bool {
        !self.ablation.no_options
    }

    /// α after ablation overrides.
    pub fn effective_alpha(&self) -> f64 {
        match (self.ablation.no_entity_similarity, self.ablation.no_prefix_similarity) {
            (true, _) => 0.0,
            (false, true) => 1.0,
            _ => self.alpha,
        }
    }
}

/// One source domain with its training corpus and, optionally, a prefix that
/// was already warmed up under the same options setting.
#[derive(Clone, Debug)]
pub struct SourceInput {
    pub domain: Domain,
    pub train: CorpusSplit,
    pub prefix: Option<DomainPrefix>,
}

pub struct PipelineInputs<'a> {
    pub model: &'a BackboneModel,
    pub vocab: &'a Vocabulary,
    pub sources: Vec<SourceInput>,
    pub target: Domain,
    /// Pool the few-shot sample is drawn from.
    pub target_pool: &'a CorpusSplit,
    pub dev: &'a CorpusSplit,
    pub test: &'a CorpusSplit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub test: EvalResult,
    /// Dev span-F1 of the selected prefix.
    pub dev_f1: f64,
    pub selected_step: usize,
    /// `(step, dev span-F1)` during transfer.
    pub dev_curve: Vec<(usize, f64)>,
    pub transfer_losses_first_last: Option<(f32, f32)>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub prefix: DomainPrefix,
    pub report: Option<SimilarityReport>,
    pub plan: Option<CompositionPlan>,
    pub metrics: RunMetrics,
    /// Backbone content hash before and after the run.
    pub backbone_hash: (String, String),
    pub source_prefixes: Vec<DomainPrefix>,
}

/// Greedy predictions for `sentences` under `prefix`, decoded and aligned.
pub fn predict(
    model: &BackboneModel,
    prefix: Option<&PrefixMatrices>,
    encoder: &TaskEncoder<'_>,
    domain: &Domain,
    sentences: &[AnnotatedSentence],
    max_new_tokens: usize,
) -> Result<Vec<(String, ParsedOutput)>, PrefixError> {
    sentences
        .iter()
        .map(|s| {
            let input = encoder.input_ids(domain, &s.tokens)?;
            let out = model.generate(prefix, &input, max_new_tokens)?;
            let text = taskformat::detokenize(&encoder.vocab.decode(&out.ids));
            let parsed = taskformat::parse_and_align(&text, domain, &s.tokens);
            Ok((text, parsed))
        })
        .collect()
}

/// Span-level scores of `prefix` on a split.
pub fn evaluate(
    model: &BackboneModel,
    prefix: &PrefixMatrices,
    encoder: &TaskEncoder<'_>,
    domain: &Domain,
    split: &CorpusSplit,
    max_new_tokens: usize,
) -> Result<EvalResult, PrefixError> {
    let preds: Vec<ParsedOutput> =
        predict(model, Some(prefix), encoder, domain, &split.sentences, max_new_tokens)?.into_iter().map(|(_, p)| p).collect();
    eval::score(&preds, &split.sentences).map_err(|e| PrefixError::Shape(e.to_string()))
}

/// Fresh prefix for a named domain. Every domain starts from the same
/// initialization, so warmed prefixes share a common origin.
pub fn fresh_prefix(model: &BackboneModel, domain: &str, init_seed: u64) -> Result<DomainPrefix, PrefixError> {
    prefixstore::init_prefix(model.config(), domain, init_seed)
}

/// Warms one source prefix from its fresh initialization.
pub fn warm_source(
    model: &BackboneModel,
    vocab: &Vocabulary,
    source: &SourceInput,
    cfg: &PipelineConfig,
) -> Result<DomainPrefix, PrefixError> {
    let encoder = TaskEncoder::new(vocab, cfg.with_options());
    let start = fresh_prefix(model, &source.domain.name, cfg.prefix_init_seed)?;
    // Every source uses the same warm-up seed, so prefixes differ only by data.
    let out = prefixstore::warmup(model, &start, &source.train, &source.domain, &encoder, &cfg.source_warmup)?;
    Ok(out.prefix)
}

/// Runs every stage for one target.
pub fn run_pipeline(inputs: &PipelineInputs<'_>, cfg: &PipelineConfig) -> Result<RunOutcome, PipelineError> {
    let model = inputs.model;
    let hash_before = model.content_hash();
    if !model.is_frozen() {
        return Err(PipelineError::new("setup", PrefixError::NotFrozen));
    }
    let encoder = TaskEncoder::new(inputs.vocab, cfg.with_options());
    let shots = stage("few-shot", corpus::sample_few_shot(inputs.target_pool, cfg.k_shot, cfg.seed))?;
    let shot_examples = stage("encode", encoder.encode_split(&inputs.target, &shots))?;

    // Warm-up.
    let use_sources = !cfg.ablation.no_sources && !inputs.sources.is_empty();
    let mut source_prefixes = Vec::new();
    if use_sources {
        for s in &inputs.sources {
            let p = if cfg.ablation.no_warmup {
                stage("warm-up", fresh_prefix(model, &s.domain.name, cfg.prefix_init_seed))?
            } else if let Some(p) = &s.prefix {
                stage("warm-up", p.check_attach(model))?;
                p.clone()
            } else {
                stage("warm-up", warm_source(model, inputs.vocab, s, cfg))?
            };
            source_prefixes.push(p);
        }
    }
    let target_start = stage("warm-up", fresh_prefix(model, &inputs.target.name, cfg.prefix_init_seed))?;
    let mut twcfg = cfg.target_warmup.clone();
    twcfg.seed = cfg.seed;
    let target_prefix = stage("warm-up", prefixstore::train_prefix(model, &target_start, &shot_examples, &twcfg, None))?.prefix;

    // Selection and composition.
    let (report, plan, composed) = if use_sources {
        let pairs: Vec<(&Domain, &DomainPrefix)> = inputs.sources.iter().map(|s| &s.domain).zip(&source_prefixes).collect();
        let alpha = cfg.effective_alpha();
        let per = if cfg.ablation.no_entity_similarity || cfg.ablation.no_prefix_similarity {
            None
        } else {
            cfg.per_source_alpha.as_deref()
        };
        let report = stage(
            "select",
            selector::select(model.token_embeddings(), inputs.vocab, &pairs, (&inputs.target, &target_prefix), alpha, per, cfg.pooling),
        )?;
        let weights = report.weights();
        let aggregated = stage("aggregate", composer::aggregate_sources(&source_prefixes.iter().collect::<Vec<_>>(), &weights))?;
        let composed = stage("compose", composer::compose(&target_prefix, &aggregated))?;
        let plan = CompositionPlan::from_report(&report, cfg.seed, cfg.transfer.clone(), cfg.k_shot);
        (Some(report), Some(plan), composed)
    } else {
        (None, None, target_prefix)
    };

    // Transfer with dev selection.
    let dev_score = {
        let (enc, domain, dev, max_new) = (&encoder, &inputs.target, inputs.dev, cfg.max_new_tokens);
        Box::new(move |m: &PrefixMatrices| Ok(evaluate(model, m, enc, domain, dev, max_new)?.span.f1))
            as prefixstore::ScoreFn<'_>
    };
    let dev_score = if inputs.dev.is_empty() { None } else { Some(dev_score) };
    let outcome =
        stage("transfer", composer::transfer_tune(model, &composed, &shot_examples, &cfg.transfer, cfg.seed, dev_score))?;
    let mut prefix = outcome.prefix;
    prefix.domain = inputs.target.name.clone();

    let test = stage("evaluate", evaluate(model, &prefix.matrices, &encoder, &inputs.target, inputs.test, cfg.max_new_tokens))?;
    let dev_f1 = outcome.evaluations.iter().find(|(s, _)| *s == outcome.selected_step).map_or(0.0, |e| e.1);
    let hash_after = model.content_hash();
    if hash_after != hash_before {
        return Err(PipelineError::msg("evaluate", "backbone parameters changed during the run"));
    }
    let metrics = RunMetrics {
        test,
        dev_f1,
        selected_step: outcome.selected_step,
        dev_curve: outcome.evaluations.clone(),
        transfer_losses_first_last: outcome.losses.first().zip(outcome.losses.last()).map(|(a, b)| (*a, *b)),
    };
    Ok(RunOutcome { prefix, report, plan, metrics, backbone_hash: (hash_before, hash_after), source_prefixes })
}

/// File locations of everything a run reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineFiles {
    pub backbone: PathBuf,
    pub vocab: PathBuf,
    pub registry: PathBuf,
    pub target: String,
    pub target_train: PathBuf,
    pub target_dev: PathBuf,
    pub target_test: PathBuf,
    pub sources: Vec<SourceFiles>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceFiles {
    pub domain: String,
    pub train: PathBuf,
    #[serde(default)]
    pub prefix: Option<PathBuf>,
}

impl PipelineFiles {
    fn all_paths(&self) -> Vec<PathBuf> {
        let mut v = vec![
            self.backbone.clone(),
            self.vocab.clone(),
            self.registry.clone(),
            self.target_train.clone(),
            self.target_dev.clone(),
            self.target_test.clone(),
        ];
        for s in &self.sources {
            v.push(s.train.clone());
            v.extend(s.prefix.clone());
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceWeight {
    pub domain: String,
    pub weight: f64,
}

/// Everything needed to re-execute a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub files: PipelineFiles,
    /// sha256 of every input file, keyed by path.
    pub file_hashes: BTreeMap<String, String>,
    pub backbone_hash: String,
    pub weights: Vec<SourceWeight>,
    pub metrics: RunMetrics,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Loaded artifacts for a file-based run.
pub struct LoadedRun {
    pub model: BackboneModel,
    pub vocab: Vocabulary,
    pub target: Domain,
    pub target_train: CorpusSplit,
    pub dev: CorpusSplit,
    pub test: CorpusSplit,
    pub sources: Vec<SourceInput>,
}

impl LoadedRun {
    pub fn load(files: &PipelineFiles) -> Result<Self, PipelineError> {
        let mut model = stage("load backbone", BackboneModel::load(&files.backbone))?;
        model.freeze();
        let vocab = stage("load vocabulary", Vocabulary::load(&files.vocab))?;
        let registry = stage("load registry", DomainRegistry::load(&files.registry))?;
        let record = stage("load registry", registry.get(&files.target))?.clone();
        let target = stage("load registry", record.domain())?;
        let load = |p: &Path, rec: &corpus::DomainRecord, split| stage("load corpus", corpus::load_corpus(p, rec, split)).map(|r| r.0);
        let target_train = load(&files.target_train, &record, Split::Train)?;
        let dev = load(&files.target_dev, &record, Split::Dev)?;
        let test = load(&files.target_test, &record, Split::Test)?;
        let mut sources = Vec::new();
        for s in &files.sources {
            let rec = stage("load registry", registry.get(&s.domain))?.clone();
            let train = load(&s.train, &rec, Split::Train)?;
            let prefix = match &s.prefix {
                Some(p) => Some(stage("load prefix", prefixstore::load_prefix_for(p, &model))?),
                None => None,
            };
            sources.push(SourceInput { domain: stage("load registry", rec.domain())?, train, prefix });
        }
        Ok(Self { model, vocab, target, target_train, dev, test, sources })
    }

    pub fn inputs(&self) -> PipelineInputs<'_> {
        PipelineInputs {
            model: &self.model,
            vocab: &self.vocab,
            sources: self.sources.clone(),
            target: self.target.clone(),
            target_pool: &self.target_train,
            dev: &self.dev,
            test: &self.test,
        }
    }
}

fn hash_inputs(files: &PipelineFiles) -> Result<BTreeMap<String, String>, PipelineError> {
    files
        .all_paths()
        .into_iter()
        .map(|p| {
            let h = sha256_file(&p).map_err(|e| PipelineError::new("hash inputs", PrefixError::Io { path: p.display().to_string(), source: e }))?;
            Ok((p.display().to_string(), h))
        })
        .collect()
}

/// Runs from files and returns the outcome with its manifest.
pub fn run_from_files(files: &PipelineFiles, cfg: &PipelineConfig) -> Result<(RunOutcome, RunManifest), PipelineError> {
    let file_hashes = hash_inputs(files)?;
    let loaded = LoadedRun::load(files)?;
    let outcome = run_pipeline(&loaded.inputs(), cfg)?;
    let weights = outcome
        .report
        .as_ref()
        .map(|r| r.sources.iter().map(|s| SourceWeight { domain: s.domain.clone(), weight: s.weight }).collect())
        .unwrap_or_default();
    let manifest = RunManifest {
        config: cfg.clone(),
        files: files.clone(),
        file_hashes,
        backbone_hash: outcome.backbone_hash.0.clone(),
        weights,
        metrics: outcome.metrics.clone(),
    };
    Ok((outcome, manifest))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayReport {
    pub original: RunMetrics,
    pub reproduced: RunMetrics,
    /// Inputs whose current hash differs from the recorded one.
    pub changed_inputs: Vec<String>,
    pub identical: bool,
}

/// Bitwise comparison through each metric's canonical serialization.
pub fn metrics_identical(a: &RunMetrics, b: &RunMetrics) -> bool {
    let bits = |m: &RunMetrics| {
        let mut v = vec![m.dev_f1.to_bits(), m.selected_step as u64];
        for p in [&m.test.span, &m.test.mention] {
            v.extend([p.precision.to_bits(), p.recall.to_bits(), p.f1.to_bits(), p.correct as u64, p.predicted as u64, p.gold as u64]);
        }
        for (s, f) in &m.dev_curve {
            v.extend([*s as u64, f.to_bits()]);
        }
        v
    };
    bits(a) == bits(b) && serde_json::to_string(a).ok() == serde_json::to_string(b).ok()
}

/// Re-executes a manifest after verifying its input hashes.
pub fn replay(manifest: &RunManifest) -> Result<ReplayReport, PipelineError> {
    let now = hash_inputs(&manifest.files)?;
    let changed: Vec<String> =
        manifest.file_hashes.iter().filter(|(p, h)| now.get(*p) != Some(*h)).map(|(p, _)| p.clone()).collect();
    if !changed.is_empty() {
        return Err(PipelineError::msg("replay", format!("input files changed since the run: {}", changed.join(", "))));
    }
    let (outcome, _) = run_from_files(&manifest.files, &manifest.config)?;
    let identical = metrics_identical(&manifest.metrics, &outcome.metrics);
    Ok(ReplayReport { original: manifest.metrics.clone(), reproduced: outcome.metrics, changed_inputs: changed, identical })
}

pub fn save_manifest(m: &RunManifest, path: &Path) -> Result<(), PipelineError> {
    let json = serde_json::to_vec_pretty(m).map_err(|e| PipelineError::new("manifest", e))?;
    corpus::atomic_write(path, &json)
        .map_err(|e| PipelineError::new("manifest", PrefixError::Io { path: path.display().to_string(), source: e }))
}

pub fn load_manifest(path: &Path) -> Result<RunManifest, PipelineError> {
    let bytes = std::fs::read(path)
        .map_err(|e| PipelineError::new("manifest", PrefixError::Io { path: path.display().to_string(), source: e }))?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::new("manifest", e))
}

/// One line of a prediction file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub tokens: Vec<String>,
    pub predicted: String,
    #[serde(flatten)]
    pub parsed: ParsedOutput,
}

pub fn write_predictions(records: &[PredictionRecord], path: &Path) -> Result<(), PipelineError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| PipelineError::new("predictions", e))?);
        out.push('\n');
    }
    corpus::atomic_write(path, out.as_bytes())
        .map_err(|e| PipelineError::new("predictions", PrefixError::Io { path: path.display().to_string(), source: e }))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::new("predictions", PrefixError::Io { path: path.display().to_string(), source: e }))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| PipelineError::msg("predictions", format!("line {}: {e}", i + 1))))
        .collect()
}
