//! Command-line entry point. Exit codes: 0 success, 1 usage error, 2 data
//! error, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cpner::backbone::{check_toy_model, BackboneModel, ToyCheck};
use cpner::bench::{suite_vocabulary, BenchConfig, Benchmark, SuiteCorpora};
use cpner::composer::{aggregate_sources, compose, transfer_tune};
use cpner::config::Config;
use cpner::corpus::{self, CorpusSplit, DomainRecord, DomainRegistry, Split, Vocabulary};
use cpner::eval;
use cpner::numerics::GradcheckConfig;
use cpner::pipeline::{self, PipelineConfig, PipelineError, PipelineFiles, PredictionRecord, SourceFiles};
use cpner::prefixstore::{self, DomainPrefix, PrefixError, TaskEncoder};
use cpner::selector::{self, Pooling};
use cpner::synth::SyntheticSuite;
use cpner::taskformat::Domain;

#[derive(Parser)]
#[command(name = "cpner", version, about = "Cross-domain NER with composable domain prefixes on a frozen backbone")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary from corpora and the registry's label words.
    BuildVocab(BuildVocabArgs),
    /// Generate the synthetic suite as corpus files.
    Synth(SynthArgs),
    /// Pretrain and freeze the backbone on the synthetic suite.
    Pretrain(PretrainArgs),
    /// Warm up one domain prefix on its training corpus.
    Warmup(WarmupArgs),
    /// Score sources against a target; JSON report on stdout.
    Similarity(SimilarityArgs),
    /// Aggregate source prefixes with weights and compose with the target.
    Compose(ComposeArgs),
    /// Tune a composed prefix on few-shot target data.
    Transfer(TransferArgs),
    /// Generate predictions for a corpus as JSONL.
    Predict(PredictArgs),
    /// Score a prediction file against gold; JSON on stdout.
    Eval(EvalArgs),
    /// Finite-difference check of the full toy model's gradients.
    Gradcheck(GradcheckArgs),
    /// End-to-end run that writes a replayable manifest.
    Run(RunArgs),
    /// Re-run a manifest and compare metrics bit for bit.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    registry: PathBuf,
}

#[derive(Args)]
struct BuildVocabArgs {
    #[arg(long)]
    registry: PathBuf,
    /// `DOMAIN=PATH`, repeatable.
    #[arg(long = "corpus", required = true)]
    corpora: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct WarmupArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    domain: String,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    no_options: bool,
}

#[derive(Args)]
struct SimilarityArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    target: String,
    #[arg(long)]
    target_prefix: PathBuf,
    /// `DOMAIN=PREFIX_PATH`, repeatable.
    #[arg(long = "source", required = true)]
    sources: Vec<String>,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value = "mean")]
    pooling: Pooling,
    /// Pair-similarity matrices as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ComposeArgs {
    #[arg(long)]
    target_prefix: PathBuf,
    #[arg(long = "source", required = true)]
    sources: Vec<PathBuf>,
    /// Comma-separated, one per source, summing to 1.
    #[arg(long)]
    weights: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TransferArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    domain: String,
    /// Pool the few-shot sample is drawn from.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    prefix: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    no_options: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    domain: String,
    #[arg(long)]
    prefix: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 48)]
    max_new_tokens: usize,
    #[arg(long)]
    no_options: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    /// Label mapping for the gold file; without it, gold labels are used as is.
    #[arg(long, requires = "domain")]
    registry: Option<PathBuf>,
    #[arg(long)]
    domain: Option<String>,
    /// Per-type breakdown as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// JSON file listing every input path.
    #[arg(long)]
    files: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// Where to store the final target prefix.
    #[arg(long)]
    out_prefix: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
}

enum Failure {
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

fn data(e: impl std::fmt::Display) -> Failure {
    Failure::Data(e.to_string())
}

fn prefix_failure(e: PrefixError) -> Failure {
    match e {
        PrefixError::NonFinite { .. } | PrefixError::Numerics(_) => Failure::Numeric(e.to_string()),
        other => data(other),
    }
}

fn pipeline_failure(e: PipelineError) -> Failure {
    if e.is_numeric() {
        Failure::Numeric(e.to_string())
    } else {
        data(e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::BuildVocab(a) => build_vocab(a),
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Warmup(a) => warmup(a),
        Command::Similarity(a) => similarity(a),
        Command::Compose(a) => compose_cmd(a),
        Command::Transfer(a) => transfer(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Run(a) => run(a),
        Command::Replay(a) => replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Data(m) | Failure::Numeric(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}

fn config(path: Option<&Path>) -> Result<Config, Failure> {
    Config::from_env(path).map_err(data)
}

fn pipeline_config(path: Option<&Path>) -> Result<PipelineConfig, Failure> {
    config(path)?.pipeline(PipelineConfig::default()).map_err(data)
}

fn bench_config(path: Option<&Path>) -> Result<BenchConfig, Failure> {
    let c = config(path)?;
    let mut b = BenchConfig::default();
    for key in c.keys() {
        macro_rules! set {
            ($field:expr) => {
                $field = c.get(key).map_err(data)?.expect("key present")
            };
        }
        match key {
            "seed" | "suite.seed" => set!(b.suite.seed),
            "suite.num_sources" => set!(b.suite.num_sources),
            "suite.overlap" => set!(b.suite.overlap),
            "suite.mentions_per_label" => set!(b.suite.mentions_per_label),
            "suite.source_sentences" => set!(b.suite.source_sentences),
            "pretrain.steps" => set!(b.pretrain.steps),
            "pretrain.seed" => set!(b.pretrain.seed),
            "pretrain.learning_rate" => set!(b.pretrain.learning_rate),
            "pretrain.batch_size" => set!(b.pretrain.batch_size),
            "model_seed" => set!(b.model_seed),
            other => return Err(data(format!("unknown key {other:?}"))),
        }
    }
    Ok(b)
}

struct Loaded {
    model: BackboneModel,
    vocab: Vocabulary,
    registry: DomainRegistry,
}

impl Loaded {
    fn new(a: &ModelArgs) -> Result<Self, Failure> {
        let mut model = BackboneModel::load(&a.backbone).map_err(data)?;
        model.freeze();
        let vocab = Vocabulary::load(&a.vocab).map_err(data)?;
        let registry = DomainRegistry::load(&a.registry).map_err(data)?;
        Ok(Self { model, vocab, registry })
    }

    fn domain(&self, name: &str) -> Result<(DomainRecord, Domain), Failure> {
        let rec = self.registry.get(name).map_err(data)?.clone();
        let d = rec.domain().map_err(data)?;
        Ok((rec, d))
    }

    fn prefix(&self, path: &Path) -> Result<DomainPrefix, Failure> {
        prefixstore::load_prefix_for(path, &self.model).map_err(data)
    }
}

fn load_split(path: &Path, rec: &DomainRecord, split: Split) -> Result<CorpusSplit, Failure> {
    let (s, report) = corpus::load_corpus(path, rec, split).map_err(data)?;
    log::info!("{}: {} sentences, {:?}", path.display(), s.len(), report);
    Ok(s)
}

fn print_json(v: &impl serde::Serialize) -> Outcome {
    println!("{}", serde_json::to_string_pretty(v).map_err(data)?);
    Ok(())
}

fn split_pair(s: &str) -> Result<(&str, &str), Failure> {
    s.split_once('=').ok_or_else(|| data(format!("expected DOMAIN=PATH, got {s:?}")))
}

fn build_vocab(a: BuildVocabArgs) -> Outcome {
    let registry = DomainRegistry::load(&a.registry).map_err(data)?;
    let mut splits = Vec::new();
    for c in &a.corpora {
        let (name, path) = split_pair(c)?;
        let rec = registry.get(name).map_err(data)?;
        splits.push(load_split(Path::new(path), rec, Split::Train)?);
    }
    let domains: Vec<Domain> = registry.domains.iter().map(DomainRecord::domain).collect::<Result<_, _>>().map_err(data)?;
    let vocab = Vocabulary::build(&splits.iter().collect::<Vec<_>>(), &domains, &[cpner::taskformat::INSTRUCTION]);
    vocab.save(&a.out).map_err(data)?;
    println!("{} tokens", vocab.len());
    Ok(())
}

/// Writes every suite corpus plus a `files.json` for `run`.
fn synth(a: SynthArgs) -> Outcome {
    let cfg = bench_config(a.config.as_deref())?;
    let suite = SyntheticSuite::generate(cfg.suite.clone()).map_err(data)?;
    let corpora = SuiteCorpora::generate(&suite).map_err(data)?;
    let vocab = suite_vocabulary(&suite, &corpora).map_err(data)?;
    std::fs::create_dir_all(&a.out).map_err(data)?;
    let p = |name: &str| a.out.join(name);
    suite.registry().save(&p("registry.json")).map_err(data)?;
    vocab.save(&p("vocab.json")).map_err(data)?;
    let spec = serde_json::to_vec_pretty(&suite).map_err(data)?;
    corpus::atomic_write(&p("suite.json"), &spec).map_err(data)?;
    for split in corpora.pretrain.iter().chain(&corpora.sources) {
        corpus::write_jsonl(split, &p(&format!("{}.train.jsonl", split.domain))).map_err(data)?;
    }
    for (split, tag) in [(&corpora.target_train, "train"), (&corpora.target_dev, "dev"), (&corpora.target_test, "test")] {
        corpus::write_jsonl(split, &p(&format!("{}.{tag}.jsonl", split.domain))).map_err(data)?;
    }
    let t = &suite.target.name;
    let files = PipelineFiles {
        backbone: p("backbone.cpnb"),
        vocab: p("vocab.json"),
        registry: p("registry.json"),
        target: t.clone(),
        target_train: p(&format!("{t}.train.jsonl")),
        target_dev: p(&format!("{t}.dev.jsonl")),
        target_test: p(&format!("{t}.test.jsonl")),
        sources: suite
            .sources
            .iter()
            .map(|s| SourceFiles { domain: s.name.clone(), train: p(&format!("{}.train.jsonl", s.name)), prefix: None })
            .collect(),
    };
    let json = serde_json::to_vec_pretty(&files).map_err(data)?;
    corpus::atomic_write(&p("files.json"), &json).map_err(data)?;
    println!("wrote {} domains to {}", suite.all_specs().count(), a.out.display());
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Outcome {
    let cfg = bench_config(a.config.as_deref())?;
    let bench = Benchmark::build(cfg).map_err(|e| match e {
        cpner::bench::BenchError::Backbone(cpner::backbone::BackboneError::Numerics(n)) => Failure::Numeric(n.to_string()),
        other => data(other),
    })?;
    bench.model.save(&a.out).map_err(data)?;
    let last = bench.pretrain_losses.last().copied().unwrap_or(f32::NAN);
    println!("{{\"backbone_hash\": \"{}\", \"final_loss\": {last}}}", bench.model.content_hash());
    Ok(())
}

fn warmup(a: WarmupArgs) -> Outcome {
    let l = Loaded::new(&a.model)?;
    let (rec, domain) = l.domain(&a.domain)?;
    let train = load_split(&a.train, &rec, Split::Train)?;
    let mut cfg = pipeline_config(a.config.as_deref())?;
    cfg.ablation.no_options |= a.no_options;
    let source = pipeline::SourceInput { domain, train, prefix: None };
    let p = pipeline::warm_source(&l.model, &l.vocab, &source, &cfg).map_err(prefix_failure)?;
    prefixstore::save_prefix(&p, &a.out).map_err(data)?;
    println!("{{\"domain\": {:?}, \"steps\": {}, \"final_loss\": {:?}}}", p.domain, p.steps, p.final_loss);
    Ok(())
}

fn similarity(a: SimilarityArgs) -> Outcome {
    let l = Loaded::new(&a.model)?;
    let (_, target) = l.domain(&a.target)?;
    let tp = l.prefix(&a.target_prefix)?;
    let mut sources = Vec::new();
    for s in &a.sources {
        let (name, path) = split_pair(s)?;
        let (_, d) = l.domain(name)?;
        sources.push((d, l.prefix(Path::new(path))?));
    }
    let pairs: Vec<(&Domain, &DomainPrefix)> = sources.iter().map(|(d, p)| (d, p)).collect();
    let report = selector::select(l.model.token_embeddings(), &l.vocab, &pairs, (&target, &tp), a.alpha, None, a.pooling)
        .map_err(data)?;
    if let Some(path) = &a.csv {
        corpus::atomic_write(path, report.pair_csv().as_bytes()).map_err(data)?;
    }
    print_json(&report)
}

fn compose_cmd(a: ComposeArgs) -> Outcome {
    let target = prefixstore::load_prefix(&a.target_prefix).map_err(data)?;
    let sources: Vec<DomainPrefix> = a.sources.iter().map(|p| prefixstore::load_prefix(p)).collect::<Result<_, _>>().map_err(data)?;
    let weights: Vec<f64> = a
        .weights
        .split(',')
        .map(|w| w.trim().parse::<f64>().map_err(|_| data(format!("bad weight {w:?}"))))
        .collect::<Result<_, _>>()?;
    let agg = aggregate_sources(&sources.iter().collect::<Vec<_>>(), &weights).map_err(data)?;
    let composed = compose(&target, &agg).map_err(data)?;
    prefixstore::save_prefix(&composed, &a.out).map_err(data)?;
    println!("composed {} sources into {}", sources.len(), a.out.display());
    Ok(())
}

fn transfer(a: TransferArgs) -> Outcome {
    let l = Loaded::new(&a.model)?;
    let (rec, domain) = l.domain(&a.domain)?;
    let pool = load_split(&a.train, &rec, Split::Train)?;
    let cfg = pipeline_config(a.config.as_deref())?;
    let encoder = TaskEncoder::new(&l.vocab, cfg.with_options() && !a.no_options);
    let shots = corpus::sample_few_shot(&pool, cfg.k_shot, cfg.seed).map_err(data)?;
    let examples = encoder.encode_split(&domain, &shots).map_err(data)?;
    let start = l.prefix(&a.prefix)?;
    let dev = match &a.dev {
        Some(p) => Some(load_split(p, &rec, Split::Dev)?),
        None => None,
    };
    let scorer = dev.as_ref().map(|dev| {
        let (m, enc, d, n) = (&l.model, &encoder, &domain, cfg.max_new_tokens);
        Box::new(move |p: &cpner::backbone::PrefixMatrices| Ok(pipeline::evaluate(m, p, enc, d, dev, n)?.span.f1))
            as cpner::prefixstore::ScoreFn<'_>
    });
    let out = transfer_tune(&l.model, &start, &examples, &cfg.transfer, cfg.seed, scorer).map_err(prefix_failure)?;
    prefixstore::save_prefix(&out.prefix, &a.out).map_err(data)?;
    println!(
        "{{\"selected_step\": {}, \"evaluations\": {}}}",
        out.selected_step,
        serde_json::to_string(&out.evaluations).map_err(data)?
    );
    Ok(())
}

fn predict(a: PredictArgs) -> Outcome {
    let l = Loaded::new(&a.model)?;
    let (rec, domain) = l.domain(&a.domain)?;
    let split = load_split(&a.input, &rec, Split::Test)?;
    let prefix = l.prefix(&a.prefix)?;
    let encoder = TaskEncoder::new(&l.vocab, !a.no_options);
    let preds = pipeline::predict(&l.model, Some(&prefix.matrices), &encoder, &domain, &split.sentences, a.max_new_tokens)
        .map_err(prefix_failure)?;
    let records: Vec<PredictionRecord> = preds
        .into_iter()
        .zip(&split.sentences)
        .map(|((predicted, parsed), s)| PredictionRecord { tokens: s.tokens.clone(), predicted, parsed })
        .collect();
    pipeline::write_predictions(&records, &a.out).map_err(data)?;
    println!("{} predictions", records.len());
    Ok(())
}

/// Gold labels as they appear, when no registry maps them.
fn identity_record(path: &Path) -> Result<DomainRecord, Failure> {
    let text = std::fs::read_to_string(path).map_err(data)?;
    let mut labels = std::collections::BTreeSet::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line).map_err(data)?;
        for e in v["entities"].as_array().into_iter().flatten() {
            if let Some(t) = e["type"].as_str() {
                labels.insert(t.to_string());
            }
        }
    }
    if labels.is_empty() {
        labels.insert("entity".to_string());
    }
    Ok(DomainRecord { name: "gold".into(), labels: labels.into_iter().collect(), tag_map: Default::default() })
}

fn eval_cmd(a: EvalArgs) -> Outcome {
    let rec = match (&a.registry, &a.domain) {
        (Some(r), Some(d)) => DomainRegistry::load(r).map_err(data)?.get(d).map_err(data)?.clone(),
        _ => identity_record(&a.gold)?,
    };
    let gold = load_split(&a.gold, &rec, Split::Test)?;
    let preds = pipeline::read_predictions(&a.pred).map_err(data)?;
    let parsed: Vec<_> = preds.into_iter().map(|p| p.parsed).collect();
    let result = eval::score(&parsed, &gold.sentences).map_err(data)?;
    if let Some(path) = &a.csv {
        corpus::atomic_write(path, eval::breakdown_csv(&result).as_bytes()).map_err(data)?;
    }
    print_json(&result)
}

/// Keys: `seed`, `configs`, `coords`, `tolerance`, `step`, and any
/// [`ToyCheck`] field. Config `i` uses seed `seed + i`.
fn gradcheck(a: GradcheckArgs) -> Outcome {
    let c = config(a.config.as_deref())?;
    let mut toy = ToyCheck::default();
    let mut gc = GradcheckConfig { max_coords: Some(16), wide_analytic: true, ..GradcheckConfig::default() };
    let mut configs = 5u64;
    for key in c.keys() {
        let v = |k| c.get::<usize>(k).map_err(data).map(|x| x.expect("key present"));
        match key {
            "seed" => toy.seed = c.get(key).map_err(data)?.expect("key present"),
            "configs" => configs = c.get(key).map_err(data)?.expect("key present"),
            "coords" => gc.max_coords = Some(v(key)?),
            "tolerance" => gc.tolerance = c.get(key).map_err(data)?.expect("key present"),
            "step" => gc.step = c.get(key).map_err(data)?.expect("key present"),
            "vocab_size" => toy.vocab_size = v(key)?,
            "d_model" => toy.d_model = v(key)?,
            "num_heads" => toy.num_heads = v(key)?,
            "d_ff" => toy.d_ff = v(key)?,
            "num_encoder_layers" => toy.num_encoder_layers = v(key)?,
            "num_decoder_layers" => toy.num_decoder_layers = v(key)?,
            "prefix_length" => toy.prefix_length = v(key)?,
            "input_len" => toy.input_len = v(key)?,
            "target_len" => toy.target_len = v(key)?,
            "batch" => toy.batch = v(key)?,
            other => return Err(data(format!("unknown key {other:?}"))),
        }
    }
    let base = toy.seed;
    let mut worst = 0.0f64;
    for i in 0..configs {
        let t = ToyCheck { seed: base + i, ..toy.clone() };
        let report = check_toy_model(&t, &GradcheckConfig { seed: base + i, ..gc.clone() }).map_err(|e| Failure::Numeric(e.to_string()))?;
        println!("{{\"seed\": {}, \"max_rel_error\": {:e}, \"passed\": {}}}", t.seed, report.max_rel_error, report.passed);
        worst = worst.max(report.max_rel_error);
    }
    if worst < gc.tolerance {
        Ok(())
    } else {
        Err(Failure::Numeric(format!("max relative error {worst:e} exceeds {:e}", gc.tolerance)))
    }
}

fn run(a: RunArgs) -> Outcome {
    let bytes = std::fs::read(&a.files).map_err(data)?;
    let files: PipelineFiles = serde_json::from_slice(&bytes).map_err(data)?;
    let cfg = pipeline_config(a.config.as_deref())?;
    let (outcome, manifest) = pipeline::run_from_files(&files, &cfg).map_err(pipeline_failure)?;
    pipeline::save_manifest(&manifest, &a.manifest).map_err(data)?;
    if let Some(p) = &a.out_prefix {
        prefixstore::save_prefix(&outcome.prefix, p).map_err(data)?;
    }
    print_json(&manifest.metrics)
}

fn replay(a: ReplayArgs) -> Outcome {
    let manifest = pipeline::load_manifest(&a.manifest).map_err(data)?;
    let report = pipeline::replay(&manifest).map_err(pipeline_failure)?;
    println!(
        "{{\"identical\": {}, \"original_f1\": {}, \"reproduced_f1\": {}}}",
        report.identical, report.original.test.span.f1, report.reproduced.test.span.f1
    );
    if report.identical {
        Ok(())
    } else {
        Err(Failure::Numeric("replayed metrics differ from the manifest".into()))
    }
}
