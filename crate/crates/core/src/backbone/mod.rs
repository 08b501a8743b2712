//! Toy encoder-decoder transformer with key/value prefixes at every layer and
//! attention site.

mod attention;
mod checkpoint;
mod objective;
mod pretrain;

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numerics::{Float, Graph, Mask, NumericsError, Rng, Tensor, Var};

pub use attention::{prefix_attention_concat, prefix_attention_interpolated, InterpolatedAttention};
pub use checkpoint::CheckpointError;
pub use objective::{check_toy_model, LossObjective, ToyCheck};
pub use pretrain::{pretrain, PretrainConfig, PretrainReport, Seq2SeqExample};

pub const PAD_ID: usize = 0;
pub const EOS_ID: usize = 1;

#[derive(Debug, thiserror::Error)]
pub enum BackboneError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{what} length {len} exceeds the limit of {limit}")]
    TooLong { what: &'static str, len: usize, limit: usize },
    #[error("{what} is empty")]
    Empty { what: &'static str },
    #[error("token id {id} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("prefix mismatch: {0}")]
    PrefixShape(String),
    #[error("backbone is frozen")]
    Frozen,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// One of the three attention sites that receive prefixes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Site {
    EncoderSelf,
    DecoderSelf,
    DecoderCross,
}

impl Site {
    pub const ALL: [Site; 3] = [Site::EncoderSelf, Site::DecoderSelf, Site::DecoderCross];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Site::EncoderSelf => "encoder-self",
            Site::DecoderSelf => "decoder-self",
            Site::DecoderCross => "decoder-cross",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_sequence_length: usize,
    pub prefix_length: usize,
    /// Sites that receive prefixes; the others run plain attention.
    pub prefix_sites: Vec<Site>,
}

impl ModelConfig {
    /// The default desk-scale configuration for a given vocabulary.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            num_encoder_layers: 2,
            num_decoder_layers: 2,
            d_model: 64,
            num_heads: 4,
            d_ff: 128,
            vocab_size,
            max_sequence_length: 128,
            prefix_length: 8,
            prefix_sites: Site::ALL.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        let positive = [
            ("num_encoder_layers", self.num_encoder_layers),
            ("num_decoder_layers", self.num_decoder_layers),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_sequence_length", self.max_sequence_length),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(BackboneError::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(BackboneError::Config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.vocab_size <= EOS_ID {
            return Err(BackboneError::Config("vocabulary must hold pad and end tokens".into()));
        }
        let mut sites = self.prefix_sites.clone();
        sites.sort();
        sites.dedup();
        if sites.len() != self.prefix_sites.len() {
            return Err(BackboneError::Config("duplicate prefix site".into()));
        }
        Ok(())
    }

    pub fn layers(&self, site: Site) -> usize {
        match site {
            Site::EncoderSelf => self.num_encoder_layers,
            Site::DecoderSelf | Site::DecoderCross => self.num_decoder_layers,
        }
    }

    /// Prefix-bearing sites in canonical order.
    pub fn sites(&self) -> Vec<Site> {
        if self.prefix_length == 0 {
            return Vec::new();
        }
        Site::ALL.iter().copied().filter(|s| self.prefix_sites.contains(s)).collect()
    }

    /// Truncated SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> u64 {
        let mut canon = self.clone();
        canon.prefix_sites = self.sites();
        let json = serde_json::to_vec(&canon).expect("config serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 8 bytes"))
    }
}

/// Prefix matrices `P` (m × 2d) per site and layer. The left half holds the
/// key prefix, the right half the value prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixMatrices {
    /// Indexed by [`Site::index`], then layer. Empty for sites without prefixes.
    pub sites: Vec<Vec<Tensor<f32>>>,
}

impl PrefixMatrices {
    pub fn zeros(config: &ModelConfig) -> Self {
        let mut sites = vec![Vec::new(); 3];
        for s in config.sites() {
            sites[s.index()] =
                (0..config.layers(s)).map(|_| Tensor::zeros(&[config.prefix_length, 2 * config.d_model])).collect();
        }
        Self { sites }
    }

    pub fn get(&self, site: Site, layer: usize) -> Option<&Tensor<f32>> {
        self.sites.get(site.index()).and_then(|l| l.get(layer))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<f32>> {
        self.sites.iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor<f32>> {
        self.sites.iter_mut().flatten()
    }

    pub fn count(&self) -> usize {
        self.sites.iter().map(Vec::len).sum()
    }

    pub fn check(&self, config: &ModelConfig) -> Result<(), BackboneError> {
        let want = [config.prefix_length, 2 * config.d_model];
        for site in Site::ALL {
            let expect = if config.sites().contains(&site) { config.layers(site) } else { 0 };
            let got = self.sites.get(site.index()).map_or(0, Vec::len);
            if got != expect {
                return Err(BackboneError::PrefixShape(format!("{site}: expected {expect} layers, got {got}")));
            }
            for (j, p) in self.sites.get(site.index()).into_iter().flatten().enumerate() {
                if p.shape() != want {
                    return Err(BackboneError::PrefixShape(format!(
                        "{site} layer {j}: expected shape {want:?}, got {:?}",
                        p.shape()
                    )));
                }
            }
        }
        if self.iter().any(|p| !p.is_finite()) {
            return Err(BackboneError::PrefixShape("non-finite prefix value".into()));
        }
        Ok(())
    }

    /// Registers every matrix on the graph.
    pub fn leaves<T: Float>(&self, g: &mut Graph<T>, requires_grad: bool) -> Result<PrefixVars, BackboneError> {
        let mut sites = Vec::with_capacity(self.sites.len());
        for layers in &self.sites {
            let mut vars = Vec::with_capacity(layers.len());
            for p in layers {
                vars.push(g.leaf(p.cast(), requires_grad)?);
            }
            sites.push(vars);
        }
        Ok(PrefixVars { sites })
    }
}

/// Graph handles to per-site, per-layer prefix matrices (m × 2d).
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct PrefixVars {
    pub sites: Vec<Vec<Var>>,
}

impl PrefixVars {
    pub fn get(&self, site: Site, layer: usize) -> Option<Var> {
        self.sites.get(site.index()).and_then(|l| l.get(layer)).copied()
    }
}

#[derive(Clone, Copy, Debug)]
struct AttnIdx {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Clone, Copy, Debug)]
struct NormIdx {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Copy, Debug)]
struct FfnIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Copy, Debug)]
struct EncLayer {
    ln1: NormIdx,
    attn: AttnIdx,
    ln2: NormIdx,
    ffn: FfnIdx,
}

#[derive(Clone, Copy, Debug)]
struct DecLayer {
    ln1: NormIdx,
    self_attn: AttnIdx,
    ln2: NormIdx,
    cross: AttnIdx,
    ln3: NormIdx,
    ffn: FfnIdx,
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
struct Layout {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
    tok_emb: usize,
    pos_enc: usize,
    pos_dec: usize,
    enc: Vec<EncLayer>,
    enc_norm: NormIdx,
    dec: Vec<DecLayer>,
    dec_norm: NormIdx,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let mut l = Layout {
            names: Vec::new(),
            shapes: Vec::new(),
            inits: Vec::new(),
            tok_emb: 0,
            pos_enc: 0,
            pos_dec: 0,
            enc: Vec::new(),
            enc_norm: NormIdx { gamma: 0, beta: 0 },
            dec: Vec::new(),
            dec_norm: NormIdx { gamma: 0, beta: 0 },
        };
        let d = c.d_model;
        let proj = 1.0 / (d as f64).sqrt();
        let depth = (2 * (c.num_encoder_layers + c.num_decoder_layers)) as f64;
        let resid = proj / depth.sqrt();
        l.tok_emb = l.add("token_embedding", vec![c.vocab_size, d], Init::Normal(1.0));
        l.pos_enc = l.add("encoder.position", vec![c.max_sequence_length, d], Init::Normal(0.1));
        l.pos_dec = l.add("decoder.position", vec![c.max_sequence_length, d], Init::Normal(0.1));
        for j in 0..c.num_encoder_layers {
            let p = format!("encoder.{j}");
            let ln1 = l.norm(&format!("{p}.norm1"), d);
            let attn = l.attn(&format!("{p}.self"), d, proj, resid);
            let ln2 = l.norm(&format!("{p}.norm2"), d);
            let ffn = l.ffn(&format!("{p}.ffn"), d, c.d_ff, resid);
            l.enc.push(EncLayer { ln1, attn, ln2, ffn });
        }
        l.enc_norm = l.norm("encoder.final_norm", d);
        for j in 0..c.num_decoder_layers {
            let p = format!("decoder.{j}");
            let ln1 = l.norm(&format!("{p}.norm1"), d);
            let self_attn = l.attn(&format!("{p}.self"), d, proj, resid);
            let ln2 = l.norm(&format!("{p}.norm2"), d);
            let cross = l.attn(&format!("{p}.cross"), d, proj, resid);
            let ln3 = l.norm(&format!("{p}.norm3"), d);
            let ffn = l.ffn(&format!("{p}.ffn"), d, c.d_ff, resid);
            l.dec.push(DecLayer { ln1, self_attn, ln2, cross, ln3, ffn });
        }
        l.dec_norm = l.norm("decoder.final_norm", d);
        l
    }

    fn add(&mut self, name: &str, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name.to_string());
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn norm(&mut self, name: &str, d: usize) -> NormIdx {
        NormIdx {
            gamma: self.add(&format!("{name}.gamma"), vec![d], Init::Ones),
            beta: self.add(&format!("{name}.beta"), vec![d], Init::Zeros),
        }
    }

    fn attn(&mut self, name: &str, d: usize, std: f64, out_std: f64) -> AttnIdx {
        AttnIdx {
            wq: self.add(&format!("{name}.wq"), vec![d, d], Init::Normal(std)),
            wk: self.add(&format!("{name}.wk"), vec![d, d], Init::Normal(std)),
            wv: self.add(&format!("{name}.wv"), vec![d, d], Init::Normal(std)),
            wo: self.add(&format!("{name}.wo"), vec![d, d], Init::Normal(out_std)),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, dff: usize, out_std: f64) -> FfnIdx {
        FfnIdx {
            w1: self.add(&format!("{name}.w1"), vec![d, dff], Init::Normal(1.0 / (d as f64).sqrt())),
            b1: self.add(&format!("{name}.b1"), vec![dff], Init::Zeros),
            w2: self.add(&format!("{name}.w2"), vec![dff, d], Init::Normal(out_std)),
            b2: self.add(&format!("{name}.b2"), vec![d], Init::Zeros),
        }
    }
}

/// Output of greedy decoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generated {
    /// Generated ids, excluding the end token.
    pub ids: Vec<usize>,
    /// Whether decoding stopped on the end token rather than the length cap.
    pub finished: bool,
}

const LN_EPS: f64 = 1e-5;

/// Backbone parameters θ plus architecture config.
#[derive(Clone, Debug)]
pub struct BackboneModel {
    config: ModelConfig,
    layout: Layout,
    params: Vec<Tensor<f32>>,
    frozen: bool,
}

impl BackboneModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, BackboneError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = Rng::derive(seed, "backbone-init");
        let params = layout
            .shapes
            .iter()
            .zip(&layout.inits)
            .map(|(shape, init)| match init {
                Init::Normal(std) => Tensor::randn(shape, *std, &mut rng),
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::filled(shape, 1.0),
            })
            .collect();
        Ok(Self { config, layout, params, frozen: false })
    }

    fn from_parts(config: ModelConfig, params: Vec<Tensor<f32>>, frozen: bool) -> Result<Self, BackboneError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.shapes.len() {
            return Err(BackboneError::Config(format!(
                "expected {} parameter tensors, got {}",
                layout.shapes.len(),
                params.len()
            )));
        }
        for ((p, s), n) in params.iter().zip(&layout.shapes).zip(&layout.names) {
            if p.shape() != s.as_slice() {
                return Err(BackboneError::Config(format!("{n}: expected shape {s:?}, got {:?}", p.shape())));
            }
        }
        Ok(Self { config, layout, params, frozen })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn config_hash(&self) -> u64 {
        self.config.hash()
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.layout.names
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Mutable parameter access; refused once frozen.
    pub fn params_mut(&mut self) -> Result<&mut [Tensor<f32>], BackboneError> {
        if self.frozen {
            return Err(BackboneError::Frozen);
        }
        Ok(&mut self.params)
    }

    /// The token embedding table (vocab × d).
    pub fn token_embeddings(&self) -> &Tensor<f32> {
        &self.params[self.layout.tok_emb]
    }

    pub(crate) fn token_embedding_index(&self) -> usize {
        self.layout.tok_emb
    }

    /// SHA-256 over config hash, parameter names, shapes and value bits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config_hash().to_le_bytes());
        for (name, p) in self.layout.names.iter().zip(&self.params) {
            h.update(name.as_bytes());
            for &d in p.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Registers all parameters on `g`.
    pub fn leaves<T: Float>(&self, g: &mut Graph<T>, requires_grad: bool) -> Result<Vec<Var>, BackboneError> {
        let mut out = Vec::with_capacity(self.params.len());
        for p in &self.params {
            out.push(g.leaf(p.cast(), requires_grad)?);
        }
        Ok(out)
    }

    fn check_ids(&self, ids: &[usize], what: &'static str) -> Result<(), BackboneError> {
        if ids.is_empty() {
            return Err(BackboneError::Empty { what });
        }
        if ids.len() > self.config.max_sequence_length {
            return Err(BackboneError::TooLong { what, len: ids.len(), limit: self.config.max_sequence_length });
        }
        if let Some(&id) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(BackboneError::TokenOutOfRange { id, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    fn check_prefix_vars(&self, prefix: Option<&PrefixVars>) -> Result<(), BackboneError> {
        if let Some(p) = prefix {
            for site in Site::ALL {
                let expect = if self.config.sites().contains(&site) { self.config.layers(site) } else { 0 };
                let got = p.sites.get(site.index()).map_or(0, Vec::len);
                if got != expect {
                    return Err(BackboneError::PrefixShape(format!("{site}: expected {expect} layers, got {got}")));
                }
            }
        }
        Ok(())
    }

    fn embed<T: Float>(&self, g: &mut Graph<T>, pv: &[Var], pos: usize, ids: &[usize], start: usize) -> Result<Var, BackboneError> {
        let tok = g.embedding(pv[self.layout.tok_emb], ids)?;
        let positions: Vec<usize> = (start..start + ids.len()).collect();
        let p = g.embedding(pv[pos], &positions)?;
        Ok(g.add(tok, p)?)
    }

    fn norm<T: Float>(g: &mut Graph<T>, pv: &[Var], x: Var, n: NormIdx) -> Result<Var, BackboneError> {
        Ok(g.layer_norm(x, pv[n.gamma], pv[n.beta], LN_EPS)?)
    }

    fn ffn<T: Float>(g: &mut Graph<T>, pv: &[Var], x: Var, f: FfnIdx) -> Result<Var, BackboneError> {
        let h = g.matmul(x, pv[f.w1])?;
        let h = g.add_bias(h, pv[f.b1])?;
        let h = g.gelu(h)?;
        let h = g.matmul(h, pv[f.w2])?;
        Ok(g.add_bias(h, pv[f.b2])?)
    }

    /// Prefix-augmented attention: keys `[δ_k; kv·W_k]`, values `[δ_v; kv·W_v]`.
    #[allow(clippy::too_many_arguments)]
    fn attention<T: Float>(
        &self,
        g: &mut Graph<T>,
        pv: &[Var],
        x: Var,
        kv: Var,
        a: AttnIdx,
        prefix: Option<Var>,
        causal: bool,
    ) -> Result<Var, BackboneError> {
        let d = self.config.d_model;
        let q = g.matmul(x, pv[a.wq])?;
        let mut k = g.matmul(kv, pv[a.wk])?;
        let mut v = g.matmul(kv, pv[a.wv])?;
        let mut m = 0;
        if let Some(p) = prefix {
            let dk = g.slice_cols(p, 0, d)?;
            let dv = g.slice_cols(p, d, d)?;
            k = g.concat_rows(&[dk, k])?;
            v = g.concat_rows(&[dv, v])?;
            m = self.config.prefix_length;
        }
        let mask = if causal { Mask::Causal { prefix: m, offset: 0 } } else { Mask::None };
        let o = g.attention(q, k, v, self.config.num_heads, mask)?;
        Ok(g.matmul(o, pv[a.wo])?)
    }

    fn encode_graph<T: Float>(
        &self,
        g: &mut Graph<T>,
        pv: &[Var],
        prefix: Option<&PrefixVars>,
        input_ids: &[usize],
    ) -> Result<Var, BackboneError> {
        let mut x = self.embed(g, pv, self.layout.pos_enc, input_ids, 0)?;
        for (j, layer) in self.layout.enc.iter().enumerate() {
            let h = Self::norm(g, pv, x, layer.ln1)?;
            let p = prefix.and_then(|p| p.get(Site::EncoderSelf, j));
            let a = self.attention(g, pv, h, h, layer.attn, p, false)?;
            x = g.add(x, a)?;
            let h = Self::norm(g, pv, x, layer.ln2)?;
            let f = Self::ffn(g, pv, h, layer.ffn)?;
            x = g.add(x, f)?;
        }
        Self::norm(g, pv, x, self.layout.enc_norm)
    }

    /// Decoder pass over `decoder_ids` (positions `0..`) returning hidden states.
    fn decode_graph<T: Float>(
        &self,
        g: &mut Graph<T>,
        pv: &[Var],
        prefix: Option<&PrefixVars>,
        enc: Var,
        decoder_ids: &[usize],
    ) -> Result<Var, BackboneError> {
        let mut x = self.embed(g, pv, self.layout.pos_dec, decoder_ids, 0)?;
        for (j, layer) in self.layout.dec.iter().enumerate() {
            let h = Self::norm(g, pv, x, layer.ln1)?;
            let p = prefix.and_then(|p| p.get(Site::DecoderSelf, j));
            let a = self.attention(g, pv, h, h, layer.self_attn, p, true)?;
            x = g.add(x, a)?;
            let h = Self::norm(g, pv, x, layer.ln2)?;
            let p = prefix.and_then(|p| p.get(Site::DecoderCross, j));
            let a = self.attention(g, pv, h, enc, layer.cross, p, false)?;
            x = g.add(x, a)?;
            let h = Self::norm(g, pv, x, layer.ln3)?;
            let f = Self::ffn(g, pv, h, layer.ffn)?;
            x = g.add(x, f)?;
        }
        Self::norm(g, pv, x, self.layout.dec_norm)
    }

    fn logits_graph<T: Float>(&self, g: &mut Graph<T>, pv: &[Var], h: Var) -> Result<Var, BackboneError> {
        let l = g.matmul_nt(h, pv[self.layout.tok_emb])?;
        Ok(g.scale(l, T::cst(1.0 / (self.config.d_model as f64).sqrt()))?)
    }

    /// Logits (decoder length × vocab) recorded on `g`. `pv` comes from
    /// [`BackboneModel::leaves`].
    pub fn forward_graph<T: Float>(
        &self,
        g: &mut Graph<T>,
        pv: &[Var],
        prefix: Option<&PrefixVars>,
        input_ids: &[usize],
        decoder_ids: &[usize],
    ) -> Result<Var, BackboneError> {
        self.check_ids(input_ids, "input")?;
        self.check_ids(decoder_ids, "decoder input")?;
        self.check_prefix_vars(prefix)?;
        let enc = self.encode_graph(g, pv, prefix, input_ids)?;
        let h = self.decode_graph(g, pv, prefix, enc, decoder_ids)?;
        self.logits_graph(g, pv, h)
    }

    /// Teacher-forced loss for one pair: the decoder reads `[pad] + target`
    /// and predicts `target + [eos]`.
    pub fn loss_graph<T: Float>(
        &self,
        g: &mut Graph<T>,
        pv: &[Var],
        prefix: Option<&PrefixVars>,
        input_ids: &[usize],
        target_ids: &[usize],
    ) -> Result<Var, BackboneError> {
        let (dec_in, labels) = teacher_forcing(target_ids);
        let logits = self.forward_graph(g, pv, prefix, input_ids, &dec_in)?;
        Ok(g.cross_entropy(logits, &labels, PAD_ID)?)
    }

    /// Logits without gradient tracking.
    pub fn forward(
        &self,
        prefix: Option<&PrefixMatrices>,
        input_ids: &[usize],
        decoder_ids: &[usize],
    ) -> Result<Tensor<f32>, BackboneError> {
        let mut g = Graph::<f32>::new();
        let pv = self.leaves(&mut g, false)?;
        let px = self.prefix_constants(&mut g, prefix)?;
        let out = self.forward_graph(&mut g, &pv, px.as_ref(), input_ids, decoder_ids)?;
        Ok(g.value(out).clone())
    }

    fn prefix_constants(&self, g: &mut Graph<f32>, prefix: Option<&PrefixMatrices>) -> Result<Option<PrefixVars>, BackboneError> {
        match prefix {
            Some(p) => {
                p.check(&self.config)?;
                Ok(Some(p.leaves(g, false)?))
            }
            None => Ok(None),
        }
    }

    /// Greedy decoding with cached keys and values.
    pub fn generate(
        &self,
        prefix: Option<&PrefixMatrices>,
        input_ids: &[usize],
        max_new_tokens: usize,
    ) -> Result<Generated, BackboneError> {
        if max_new_tokens == 0 {
            return Err(BackboneError::Config("max_new_tokens must be at least 1".into()));
        }
        self.check_ids(input_ids, "input")?;
        if let Some(p) = prefix {
            p.check(&self.config)?;
        }
        let cap = max_new_tokens.min(self.config.max_sequence_length);
        let d = self.config.d_model;
        let m = self.config.prefix_length;

        // Encoder and cross-attention keys/values, computed once.
        let mut g = Graph::<f32>::new();
        let pv = self.leaves(&mut g, false)?;
        let px = self.prefix_constants(&mut g, prefix)?;
        let enc = self.encode_graph(&mut g, &pv, px.as_ref(), input_ids)?;
        let mut cross_kv = Vec::with_capacity(self.layout.dec.len());
        let mut self_kv: Vec<(Vec<f32>, Vec<f32>)> = Vec::with_capacity(self.layout.dec.len());
        for (j, layer) in self.layout.dec.iter().enumerate() {
            let mut k = g.matmul(enc, pv[layer.cross.wk])?;
            let mut v = g.matmul(enc, pv[layer.cross.wv])?;
            if let Some(p) = px.as_ref().and_then(|p| p.get(Site::DecoderCross, j)) {
                let dk = g.slice_cols(p, 0, d)?;
                let dv = g.slice_cols(p, d, d)?;
                k = g.concat_rows(&[dk, k])?;
                v = g.concat_rows(&[dv, v])?;
            }
            cross_kv.push((g.value(k).clone(), g.value(v).clone()));
            self_kv.push(match prefix.and_then(|p| p.get(Site::DecoderSelf, j)) {
                Some(p) => {
                    let (dk, dv) = split_prefix(p, d);
                    debug_assert_eq!(dk.rows(), m);
                    (dk.into_data(), dv.into_data())
                }
                None => (Vec::new(), Vec::new()),
            });
        }
        drop(g);

        let mut out = Vec::new();
        let mut last = PAD_ID;
        for t in 0..cap {
            let mut g = Graph::<f32>::new();
            let pv = self.leaves(&mut g, false)?;
            let mut x = self.embed(&mut g, &pv, self.layout.pos_dec, &[last], t)?;
            for (j, layer) in self.layout.dec.iter().enumerate() {
                let h = Self::norm(&mut g, &pv, x, layer.ln1)?;
                let a = layer.self_attn;
                let q = g.matmul(h, pv[a.wq])?;
                let k_new = g.matmul(h, pv[a.wk])?;
                let v_new = g.matmul(h, pv[a.wv])?;
                let (ck, cv) = &mut self_kv[j];
                ck.extend_from_slice(g.value(k_new).data());
                cv.extend_from_slice(g.value(v_new).data());
                let rows = ck.len() / d;
                let kc = g.constant(Tensor::new(vec![rows, d], ck.clone())?)?;
                let vc = g.constant(Tensor::new(vec![rows, d], cv.clone())?)?;
                let o = g.attention(q, kc, vc, self.config.num_heads, Mask::None)?;
                let o = g.matmul(o, pv[a.wo])?;
                x = g.add(x, o)?;
                let h = Self::norm(&mut g, &pv, x, layer.ln2)?;
                let q = g.matmul(h, pv[layer.cross.wq])?;
                let kc = g.constant(cross_kv[j].0.clone())?;
                let vc = g.constant(cross_kv[j].1.clone())?;
                let o = g.attention(q, kc, vc, self.config.num_heads, Mask::None)?;
                let o = g.matmul(o, pv[layer.cross.wo])?;
                x = g.add(x, o)?;
                let h = Self::norm(&mut g, &pv, x, layer.ln3)?;
                let f = Self::ffn(&mut g, &pv, h, layer.ffn)?;
                x = g.add(x, f)?;
            }
            let h = Self::norm(&mut g, &pv, x, self.layout.dec_norm)?;
            let logits = self.logits_graph(&mut g, &pv, h)?;
            let next = argmax(g.value(logits).data());
            if next == EOS_ID {
                return Ok(Generated { ids: out, finished: true });
            }
            out.push(next);
            last = next;
        }
        Ok(Generated { ids: out, finished: false })
    }
}

fn split_prefix(p: &Tensor<f32>, d: usize) -> (Tensor<f32>, Tensor<f32>) {
    let m = p.rows();
    let mut k = Vec::with_capacity(m * d);
    let mut v = Vec::with_capacity(m * d);
    for r in 0..m {
        let row = p.row(r);
        k.extend_from_slice(&row[..d]);
        v.extend_from_slice(&row[d..]);
    }
    (Tensor::new(vec![m, d], k).expect("prefix half"), Tensor::new(vec![m, d], v).expect("prefix half"))
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Decoder input `[pad] + target` and labels `target + [eos]`.
pub fn teacher_forcing(target_ids: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut dec_in = Vec::with_capacity(target_ids.len() + 1);
    dec_in.push(PAD_ID);
    dec_in.extend_from_slice(target_ids);
    let mut labels = target_ids.to_vec();
    labels.push(EOS_ID);
    (dec_in, labels)
}
