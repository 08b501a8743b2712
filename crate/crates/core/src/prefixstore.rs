//! Domain prefixes: initialization, warm-up against a frozen backbone, and the
//! `CPNX1` file format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneError, BackboneModel, ModelConfig, PrefixMatrices, PrefixVars, Site};
use crate::corpus::{atomic_write, CorpusSplit, Vocabulary};
use crate::numerics::{Adam, AdamConfig, Graph, NumericsError, Rng, Tensor, Var};
use crate::taskformat::{self, AnnotatedSentence, Domain, FormatError};

pub const MAGIC: &[u8; 5] = b"CPNX1";
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum PrefixError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a prefix file (bad magic)")]
    BadMagic,
    #[error("prefix file truncated: need {need} bytes, found {found}")]
    Truncated { need: usize, found: usize },
    #[error("malformed prefix header: {0}")]
    Header(String),
    #[error("prefix was trained against config {prefix:#018x}, backbone has {model:#018x}")]
    HashMismatch { prefix: u64, model: u64 },
    #[error("prefix shape: {0}")]
    Shape(String),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("backbone must be frozen for prefix training")]
    NotFrozen,
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Where a composed prefix came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub sources: Vec<String>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainPrefix {
    pub domain: String,
    pub config_hash: u64,
    pub matrices: PrefixMatrices,
    pub seed: u64,
    pub steps: usize,
    pub final_loss: Option<f32>,
    pub provenance: Option<Provenance>,
}

impl DomainPrefix {
    /// Refuses a prefix trained against a different backbone config.
    pub fn check_attach(&self, model: &BackboneModel) -> Result<(), PrefixError> {
        if self.config_hash != model.config_hash() {
            return Err(PrefixError::HashMismatch { prefix: self.config_hash, model: model.config_hash() });
        }
        self.matrices.check(model.config())?;
        Ok(())
    }

    pub fn same_shape(&self, other: &DomainPrefix) -> Result<(), PrefixError> {
        if self.config_hash != other.config_hash {
            return Err(PrefixError::HashMismatch { prefix: other.config_hash, model: self.config_hash });
        }
        let a: Vec<_> = self.matrices.iter().map(|t| t.shape().to_vec()).collect();
        let b: Vec<_> = other.matrices.iter().map(|t| t.shape().to_vec()).collect();
        if a != b || self.matrices.sites.iter().map(Vec::len).ne(other.matrices.sites.iter().map(Vec::len)) {
            return Err(PrefixError::Shape(format!("{} and {} differ in layout", self.domain, other.domain)));
        }
        Ok(())
    }

    /// Same layout and metadata with every matrix replaced by `f(site, layer, matrix)`.
    pub fn map_matrices(&self, mut f: impl FnMut(Site, usize, &Tensor<f32>) -> Tensor<f32>) -> DomainPrefix {
        let mut out = self.clone();
        for site in Site::ALL {
            if let Some(layers) = out.matrices.sites.get_mut(site.index()) {
                for (j, t) in layers.iter_mut().enumerate() {
                    *t = f(site, j, t);
                }
            }
        }
        out
    }
}

/// Fresh prefix with N(0, 0.02) entries.
pub fn init_prefix(config: &ModelConfig, domain: &str, seed: u64) -> Result<DomainPrefix, PrefixError> {
    config.validate()?;
    if config.prefix_length == 0 {
        return Err(PrefixError::Config("prefix length must be at least 1".into()));
    }
    let mut rng = Rng::derive(seed, "prefix-init");
    let mut matrices = PrefixMatrices::zeros(config);
    for t in matrices.iter_mut() {
        *t = Tensor::randn(t.shape(), INIT_STD, &mut rng);
    }
    Ok(DomainPrefix {
        domain: domain.to_string(),
        config_hash: config.hash(),
        matrices,
        seed,
        steps: 0,
        final_loss: None,
        provenance: None,
    })
}

/// Turns annotated sentences into token-id pairs.
#[derive(Clone, Debug)]
pub struct TaskEncoder<'a> {
    pub vocab: &'a Vocabulary,
    pub instruction: &'a str,
    /// Whether inputs carry the domain's label options.
    pub with_options: bool,
}

/// One encoded training or evaluation pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

impl<'a> TaskEncoder<'a> {
    pub fn new(vocab: &'a Vocabulary, with_options: bool) -> Self {
        Self { vocab, instruction: taskformat::INSTRUCTION, with_options }
    }

    pub fn input_text(&self, domain: &Domain, tokens: &[String]) -> Result<String, FormatError> {
        if self.with_options {
            taskformat::build_input(self.instruction, domain, tokens)
        } else {
            taskformat::build_input_without_options(self.instruction, tokens)
        }
    }

    pub fn input_ids(&self, domain: &Domain, tokens: &[String]) -> Result<Vec<usize>, FormatError> {
        Ok(self.vocab.encode(&self.input_text(domain, tokens)?))
    }

    pub fn encode(&self, domain: &Domain, sentence: &AnnotatedSentence) -> Result<EncodedExample, FormatError> {
        let input = self.input_ids(domain, &sentence.tokens)?;
        let target = self.vocab.encode(&taskformat::serialize_entities(&sentence.entities)?);
        Ok(EncodedExample { input, target })
    }

    pub fn encode_split(&self, domain: &Domain, split: &CorpusSplit) -> Result<Vec<EncodedExample>, FormatError> {
        split.sentences.iter().map(|s| self.encode(domain, s)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    /// Hidden width of the reparameterization network.
    pub bottleneck: usize,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 8, learning_rate: 1e-3, seed: 0, bottleneck: 32 }
    }
}

impl WarmupConfig {
    pub fn validate(&self) -> Result<(), PrefixError> {
        if self.batch_size == 0 || self.bottleneck == 0 || self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(PrefixError::Config(format!("batch size, bottleneck and learning rate must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Scores materialized prefix matrices; higher is better.
pub type ScoreFn<'a> = Box<dyn FnMut(&PrefixMatrices) -> Result<f64, PrefixError> + 'a>;

/// Periodic evaluation hook for [`train_prefix`]: called with the current
/// materialized matrices, returns a score to maximize.
pub struct Evaluator<'a> {
    pub every: usize,
    pub score: ScoreFn<'a>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub prefix: DomainPrefix,
    /// Mean batch loss per step.
    pub losses: Vec<f32>,
    /// `(step, score)` for each evaluation, including step 0.
    pub evaluations: Vec<(usize, f64)>,
    /// Step whose prefix was returned.
    pub selected_step: usize,
}

/// Residual reparameterization per site: `P = base + tanh(S·W1 + b1)·W2 + b2`,
/// where the output columns hold every layer's matrix side by side. `W2` and
/// `b2` start at zero, so the untrained network reproduces `base` exactly.
struct Reparam {
    /// Per site with prefixes: `[S, W1, b1, W2, b2]`.
    sites: Vec<(Site, [Tensor<f32>; 5])>,
}

impl Reparam {
    fn new(config: &ModelConfig, bottleneck: usize, rng: &mut Rng) -> Self {
        let (m, d) = (config.prefix_length, config.d_model);
        let sites = config
            .sites()
            .into_iter()
            .map(|site| {
                let out = config.layers(site) * 2 * d;
                let s = Tensor::randn(&[m, d], 1.0, rng);
                let w1 = Tensor::randn(&[d, bottleneck], 1.0 / (d as f64).sqrt(), rng);
                let b1 = Tensor::zeros(&[bottleneck]);
                let w2 = Tensor::zeros(&[bottleneck, out]);
                let b2 = Tensor::zeros(&[out]);
                (site, [s, w1, b1, w2, b2])
            })
            .collect();
        Self { sites }
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<f32>> {
        self.sites.iter_mut().flat_map(|(_, t)| t.iter_mut())
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor<f32>> {
        self.sites.iter().flat_map(|(_, t)| t.iter())
    }

    /// Records the network and returns its trainable leaves and the prefix vars.
    fn record(&self, g: &mut Graph<f32>, base: &PrefixMatrices, d: usize) -> Result<(Vec<Var>, PrefixVars), PrefixError> {
        let mut leaves = Vec::new();
        let mut vars = PrefixVars { sites: vec![Vec::new(); Site::ALL.len()] };
        for (site, [s, w1, b1, w2, b2]) in &self.sites {
            let ls: Vec<Var> =
                [s, w1, b1, w2, b2].iter().map(|t| g.leaf((*t).clone(), true)).collect::<Result<_, _>>()?;
            let h = g.matmul(ls[0], ls[1])?;
            let h = g.add_bias(h, ls[2])?;
            let h = g.tanh(h)?;
            let o = g.matmul(h, ls[3])?;
            let o = g.add_bias(o, ls[4])?;
            leaves.extend(ls);
            let layers = &base.sites[site.index()];
            for (j, b) in layers.iter().enumerate() {
                let delta = g.slice_cols(o, j * 2 * d, 2 * d)?;
                let bv = g.constant(b.clone())?;
                vars.sites[site.index()].push(g.add(bv, delta)?);
            }
        }
        Ok((leaves, vars))
    }

    fn materialize(&self, base: &PrefixMatrices, d: usize) -> Result<PrefixMatrices, PrefixError> {
        let mut g = Graph::<f32>::new();
        let (_, vars) = self.record(&mut g, base, d)?;
        let mut out = base.clone();
        for (site, layers) in vars.sites.iter().enumerate() {
            for (j, v) in layers.iter().enumerate() {
                out.sites[site][j] = g.value(*v).clone();
            }
        }
        Ok(out)
    }
}

/// Shared trainer for warm-up and transfer: updates only the prefix (through a
/// transient reparameterization network) on `examples`, backbone frozen.
pub fn train_prefix(
    model: &BackboneModel,
    start: &DomainPrefix,
    examples: &[EncodedExample],
    cfg: &WarmupConfig,
    mut evaluator: Option<Evaluator<'_>>,
) -> Result<TrainOutcome, PrefixError> {
    if !model.is_frozen() {
        return Err(PrefixError::NotFrozen);
    }
    cfg.validate()?;
    start.check_attach(model)?;
    if examples.is_empty() {
        return Err(PrefixError::EmptyCorpus);
    }
    let d = model.config().d_model;
    let mut rng = Rng::derive(cfg.seed, "prefix-train");
    let mut net = Reparam::new(model.config(), cfg.bottleneck, &mut rng);
    let shapes: Vec<&Tensor<f32>> = net.tensors().collect();
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.learning_rate), &shapes)?;
    let base = &start.matrices;

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut evaluations = Vec::new();
    let mut best: Option<(f64, usize, PrefixMatrices)> = None;
    let mut consider = |step: usize, mats: &PrefixMatrices, ev: &mut Option<Evaluator<'_>>, evals: &mut Vec<(usize, f64)>| -> Result<(), PrefixError> {
        if let Some(ev) = ev.as_mut() {
            let score = (ev.score)(mats)?;
            evals.push((step, score));
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, step, mats.clone()));
            }
        }
        Ok(())
    };
    consider(0, base, &mut evaluator, &mut evaluations)?;

    for step in 0..cfg.steps {
        let mut g = Graph::<f32>::new();
        let pv = model.leaves(&mut g, false)?;
        let (leaves, vars) = net.record(&mut g, base, d)?;
        let mut batch_losses = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = (0..examples.len()).collect();
                rng.shuffle(&mut order);
                cursor = 0;
            }
            let ex = &examples[order[cursor]];
            cursor += 1;
            batch_losses.push(model.loss_graph(&mut g, &pv, Some(&vars), &ex.input, &ex.target)?);
        }
        let total = g.concat_rows(&batch_losses)?;
        let total = g.sum(total)?;
        let loss = g.scale(total, 1.0 / cfg.batch_size as f32)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(PrefixError::NonFinite { step });
        }
        g.backward(loss).map_err(|e| match e {
            NumericsError::NonFinite { .. } => PrefixError::NonFinite { step },
            other => other.into(),
        })?;
        let mut grads: Vec<Vec<f32>> = leaves.iter().map(|v| g.grad_or_zeros(*v)).collect();
        drop(g);
        let mut params: Vec<&mut Tensor<f32>> = net.tensors_mut().collect();
        opt.step(&mut params, &mut grads)?;
        losses.push(value);
        if step % 100 == 0 {
            log::debug!("{} step {step}: loss {value:.4}", start.domain);
        }
        if let Some(ev) = evaluator.as_ref() {
            if ev.every > 0 && (step + 1) % ev.every == 0 && step + 1 < cfg.steps {
                let mats = net.materialize(base, d)?;
                consider(step + 1, &mats, &mut evaluator, &mut evaluations)?;
            }
        }
    }
    let last = if cfg.steps == 0 { base.clone() } else { net.materialize(base, d)? };
    if cfg.steps > 0 {
        consider(cfg.steps, &last, &mut evaluator, &mut evaluations)?;
    }
    let (matrices, selected_step) = match best {
        Some((_, step, m)) => (m, step),
        None => (last, cfg.steps),
    };
    let mut prefix = start.clone();
    prefix.matrices = matrices;
    prefix.steps = start.steps + selected_step;
    prefix.final_loss = losses.last().copied().or(start.final_loss);
    Ok(TrainOutcome { prefix, losses, evaluations, selected_step })
}

/// Domain-specific warm-up on a corpus.
pub fn warmup(
    model: &BackboneModel,
    prefix: &DomainPrefix,
    corpus: &CorpusSplit,
    domain: &Domain,
    encoder: &TaskEncoder<'_>,
    cfg: &WarmupConfig,
) -> Result<TrainOutcome, PrefixError> {
    if corpus.is_empty() {
        return Err(PrefixError::EmptyCorpus);
    }
    let examples = encoder.encode_split(domain, corpus)?;
    let mut out = train_prefix(model, prefix, &examples, cfg, None)?;
    out.prefix.seed = cfg.seed;
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Header {
    domain: String,
    config_hash: u64,
    sites: Vec<Site>,
    layers: Vec<usize>,
    m: usize,
    d_model: usize,
    seed: u64,
    steps: usize,
    final_loss: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

pub fn prefix_to_bytes(p: &DomainPrefix) -> Vec<u8> {
    let mut sites = Vec::new();
    let mut layers = Vec::new();
    let (mut m, mut d) = (0, 0);
    for site in Site::ALL {
        if let Some(ls) = p.matrices.sites.get(site.index()).filter(|l| !l.is_empty()) {
            sites.push(site);
            layers.push(ls.len());
            m = ls[0].rows();
            d = ls[0].cols() / 2;
        }
    }
    let header = Header {
        domain: p.domain.clone(),
        config_hash: p.config_hash,
        sites,
        layers,
        m,
        d_model: d,
        seed: p.seed,
        steps: p.steps,
        final_loss: p.final_loss,
        provenance: p.provenance.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in p.matrices.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn prefix_from_bytes(bytes: &[u8]) -> Result<DomainPrefix, PrefixError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(PrefixError::BadMagic);
    }
    let need = MAGIC.len() + 4;
    if bytes.len() < need {
        return Err(PrefixError::Truncated { need, found: bytes.len() });
    }
    let hlen = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    if bytes.len() < need + hlen {
        return Err(PrefixError::Truncated { need: need + hlen, found: bytes.len() });
    }
    let h: Header = serde_json::from_slice(&bytes[need..need + hlen]).map_err(|e| PrefixError::Header(e.to_string()))?;
    if h.sites.len() != h.layers.len() || h.m == 0 || h.d_model == 0 {
        return Err(PrefixError::Header("inconsistent site layout".into()));
    }
    let per = h.m * 2 * h.d_model;
    let total = h.layers.iter().sum::<usize>() * per * 4;
    let payload = &bytes[need + hlen..];
    if payload.len() < total {
        return Err(PrefixError::Truncated { need: need + hlen + total, found: bytes.len() });
    }
    if payload.len() > total {
        return Err(PrefixError::Header(format!("{} trailing bytes", payload.len() - total)));
    }
    let mut sites = vec![Vec::new(); Site::ALL.len()];
    let mut values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    for (site, &n) in h.sites.iter().zip(&h.layers) {
        for _ in 0..n {
            let data: Vec<f32> = values.by_ref().take(per).collect();
            sites[site.index()].push(Tensor::new(vec![h.m, 2 * h.d_model], data)?);
        }
    }
    let matrices = PrefixMatrices { sites };
    if matrices.iter().any(|t| !t.is_finite()) {
        return Err(PrefixError::Shape("non-finite prefix value".into()));
    }
    Ok(DomainPrefix {
        domain: h.domain,
        config_hash: h.config_hash,
        matrices,
        seed: h.seed,
        steps: h.steps,
        final_loss: h.final_loss,
        provenance: h.provenance,
    })
}

pub fn save_prefix(p: &DomainPrefix, path: &Path) -> Result<(), PrefixError> {
    atomic_write(path, &prefix_to_bytes(p)).map_err(|source| PrefixError::Io { path: path.display().to_string(), source })
}

pub fn load_prefix(path: &Path) -> Result<DomainPrefix, PrefixError> {
    let bytes = fs::read(path).map_err(|source| PrefixError::Io { path: path.display().to_string(), source })?;
    prefix_from_bytes(&bytes)
}

/// Loads a prefix and verifies it fits `model`.
pub fn load_prefix_for(path: &Path, model: &BackboneModel) -> Result<DomainPrefix, PrefixError> {
    let p = load_prefix(path)?;
    p.check_attach(model)?;
    Ok(p)
}
