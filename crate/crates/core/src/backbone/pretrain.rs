//! Backbone pretraining on a seq2seq mixture, optionally with jointly trained
//! prefixes. An example runs under a convex mix of those prefixes, or none.

use serde::{Deserialize, Serialize};

use super::{BackboneError, BackboneModel, PrefixMatrices, PrefixVars};
use crate::numerics::{Adam, AdamConfig, Graph, Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seq2SeqExample {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    /// `(prefix index, weight)` pairs; the example sees `Σ w·P`. Empty means no prefix.
    pub prefix_mix: Vec<(usize, f32)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    /// Whether the token embedding table is updated.
    pub train_embeddings: bool,
    /// Number of prefixes trained alongside the backbone.
    pub groups: usize,
    /// All prefixes start from the same N(0, 0.02) draw.
    #[serde(default)]
    pub shared_init: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 1000, batch_size: 8, learning_rate: 2e-3, seed: 0, train_embeddings: false, groups: 0, shared_init: false }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub losses: Vec<f32>,
    pub prefixes: Vec<PrefixMatrices>,
}

fn random_prefix(model: &BackboneModel, rng: &mut Rng) -> PrefixMatrices {
    let mut p = PrefixMatrices::zeros(model.config());
    for t in p.iter_mut() {
        *t = Tensor::randn(t.shape(), 0.02, rng);
    }
    p
}

/// Trains the (unfrozen) backbone in place.
pub fn pretrain(
    model: &mut BackboneModel,
    examples: &[Seq2SeqExample],
    cfg: &PretrainConfig,
) -> Result<PretrainReport, BackboneError> {
    if model.is_frozen() {
        return Err(BackboneError::Frozen);
    }
    if examples.is_empty() {
        return Err(BackboneError::Empty { what: "pretraining set" });
    }
    if let Some(bad) = examples.iter().flat_map(|e| e.prefix_mix.iter().map(|m| m.0)).find(|&g| g >= cfg.groups) {
        return Err(BackboneError::Config(format!("example prefix {bad} exceeds the {} prefixes", cfg.groups)));
    }
    let mut rng = Rng::derive(cfg.seed, "pretrain");
    let mut prefixes: Vec<PrefixMatrices> = if cfg.shared_init && cfg.groups > 0 {
        vec![random_prefix(model, &mut rng); cfg.groups]
    } else {
        (0..cfg.groups).map(|_| random_prefix(model, &mut rng)).collect()
    };
    let emb = model.token_embedding_index();
    let trainable: Vec<usize> = (0..model.params().len()).filter(|&i| cfg.train_embeddings || i != emb).collect();
    let prefix_count = prefixes.first().map_or(0, PrefixMatrices::count);

    let mut shapes: Vec<&Tensor<f32>> = trainable.iter().map(|&i| &model.params()[i]).collect();
    for p in &prefixes {
        shapes.extend(p.iter());
    }
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.learning_rate), &shapes)?;

    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut grads: Vec<Vec<f32>> = zero_grads(model, &trainable, &prefixes);
        let mut total = 0.0f32;
        for _ in 0..cfg.batch_size {
            let ex = &examples[rng.below(examples.len())];
            let mut g = Graph::<f32>::new();
            let pv = model.leaves(&mut g, true)?;
            let mut used: Vec<(usize, PrefixVars)> = Vec::new();
            for &(i, _) in &ex.prefix_mix {
                used.push((i, prefixes[i].leaves(&mut g, true)?));
            }
            let mixed = mix(&mut g, &ex.prefix_mix, &used)?;
            let loss = model.loss_graph(&mut g, &pv, mixed.as_ref(), &ex.input, &ex.target)?;
            total += g.value(loss).data()[0];
            g.backward(loss)?;
            for (slot, &i) in grads.iter_mut().zip(&trainable) {
                if let Some(gr) = g.grad(pv[i]) {
                    for (a, b) in slot.iter_mut().zip(gr) {
                        *a += b;
                    }
                }
            }
            for (i, vars) in &used {
                let base = trainable.len() + i * prefix_count;
                for (k, var) in vars.sites.iter().flatten().enumerate() {
                    if let Some(gr) = g.grad(*var) {
                        for (a, b) in grads[base + k].iter_mut().zip(gr) {
                            *a += b;
                        }
                    }
                }
            }
        }
        let inv = 1.0 / cfg.batch_size as f32;
        for gv in grads.iter_mut() {
            gv.iter_mut().for_each(|x| *x *= inv);
        }
        let mean = total * inv;
        if !mean.is_finite() {
            return Err(BackboneError::Numerics(crate::numerics::NumericsError::NonFinite { op: "pretrain loss" }));
        }
        losses.push(mean);
        if step % 100 == 0 {
            log::debug!("pretrain step {step}: loss {mean:.4}");
        }
        let params = model.params_mut()?;
        let mut targets: Vec<&mut Tensor<f32>> = Vec::with_capacity(grads.len());
        for (i, p) in params.iter_mut().enumerate() {
            if cfg.train_embeddings || i != emb {
                targets.push(p);
            }
        }
        for p in prefixes.iter_mut() {
            targets.extend(p.iter_mut());
        }
        opt.step(&mut targets, &mut grads)?;
    }
    Ok(PretrainReport { losses, prefixes })
}

/// `Σ w_i·P_i` over the recorded prefix leaves; a single unit weight passes through.
fn mix(g: &mut Graph<f32>, weights: &[(usize, f32)], used: &[(usize, PrefixVars)]) -> Result<Option<PrefixVars>, BackboneError> {
    match used {
        [] => Ok(None),
        [(_, only)] if weights[0].1 == 1.0 => Ok(Some(only.clone())),
        _ => {
            let mut sites = Vec::with_capacity(used[0].1.sites.len());
            for s in 0..used[0].1.sites.len() {
                let mut layers = Vec::with_capacity(used[0].1.sites[s].len());
                for j in 0..used[0].1.sites[s].len() {
                    let mut acc = None;
                    for ((_, w), (_, vars)) in weights.iter().zip(used) {
                        let term = g.scale(vars.sites[s][j], *w)?;
                        acc = Some(match acc {
                            None => term,
                            Some(a) => g.add(a, term)?,
                        });
                    }
                    layers.push(acc.expect("at least one prefix"));
                }
                sites.push(layers);
            }
            Ok(Some(PrefixVars { sites }))
        }
    }
}

fn zero_grads(model: &BackboneModel, trainable: &[usize], prefixes: &[PrefixMatrices]) -> Vec<Vec<f32>> {
    let mut out: Vec<Vec<f32>> = trainable.iter().map(|&i| vec![0.0; model.params()[i].len()]).collect();
    for p in prefixes {
        out.extend(p.iter().map(|t| vec![0.0; t.len()]));
    }
    out
}
