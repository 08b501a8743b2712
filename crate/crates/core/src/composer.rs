//! Intrinsic collaboration: weighted aggregation of source prefixes, averaging
//! with the target prefix, and target fine-tuning with the backbone frozen.

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneModel;
use crate::numerics::Tensor;
use crate::prefixstore::{self, DomainPrefix, EncodedExample, Evaluator, PrefixError, Provenance, TrainOutcome, WarmupConfig};
use crate::selector::SimilarityReport;

#[derive(Debug, thiserror::Error)]
pub enum ComposeError {
    #[error("no source prefixes")]
    NoSources,
    #[error("{sources} sources but {weights} weights")]
    WeightCount { sources: usize, weights: usize },
    #[error("weights must be finite, non-negative and sum to 1 (sum {0})")]
    Weights(f64),
    #[error(transparent)]
    Prefix(#[from] PrefixError),
}

/// Transfer-stage hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    /// Dev span-F1 is evaluated every this many steps (0 disables).
    pub eval_every: usize,
    pub bottleneck: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self { steps: 1000, batch_size: 4, learning_rate: 5e-4, eval_every: 100, bottleneck: 32 }
    }
}

/// What gets composed for one target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionPlan {
    pub target: String,
    pub sources: Vec<String>,
    pub weights: Vec<f64>,
    pub alpha: f64,
    pub seed: u64,
    pub transfer: TransferConfig,
    pub k_shot: usize,
}

impl CompositionPlan {
    pub fn from_report(report: &SimilarityReport, seed: u64, transfer: TransferConfig, k_shot: usize) -> Self {
        Self {
            target: report.target.clone(),
            sources: report.sources.iter().map(|s| s.domain.clone()).collect(),
            weights: report.weights(),
            alpha: report.alpha,
            seed,
            transfer,
            k_shot,
        }
    }
}

fn check_weights(n: usize, weights: &[f64]) -> Result<(), ComposeError> {
    if n == 0 {
        return Err(ComposeError::NoSources);
    }
    if weights.len() != n {
        return Err(ComposeError::WeightCount { sources: n, weights: weights.len() });
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(ComposeError::Weights(sum));
    }
    Ok(())
}

/// `Σ_i w_i · P_i` per (site, layer). One source is returned as is.
pub fn aggregate_sources(sources: &[&DomainPrefix], weights: &[f64]) -> Result<DomainPrefix, ComposeError> {
    check_weights(sources.len(), weights)?;
    let first = sources[0];
    for s in &sources[1..] {
        first.same_shape(s)?;
    }
    let mut out = if sources.len() == 1 {
        first.clone()
    } else {
        let mut flat: Vec<Vec<f64>> = first.matrices.iter().map(|t| vec![0.0; t.len()]).collect();
        for (s, &w) in sources.iter().zip(weights) {
            for (acc, t) in flat.iter_mut().zip(s.matrices.iter()) {
                for (a, &x) in acc.iter_mut().zip(t.data()) {
                    *a += w * x as f64;
                }
            }
        }
        let mut it = flat.into_iter();
        first.map_matrices(|_, _, t| {
            let data = it.next().expect("one buffer per matrix").into_iter().map(|x| x as f32).collect();
            Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
        })
    };
    out.domain = "aggregated".into();
    out.steps = 0;
    out.final_loss = None;
    out.provenance = Some(Provenance { sources: sources.iter().map(|s| s.domain.clone()).collect(), weights: weights.to_vec() });
    Ok(out)
}

/// Elementwise mean of the target prefix and the aggregated sources.
pub fn compose(target: &DomainPrefix, aggregated: &DomainPrefix) -> Result<DomainPrefix, ComposeError> {
    target.same_shape(aggregated)?;
    let mut others = aggregated.matrices.iter();
    let mut out = target.map_matrices(|_, _, t| {
        let a = others.next().expect("same layout");
        let data = t.data().iter().zip(a.data()).map(|(&x, &y)| (x + y) * 0.5).collect();
        Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
    });
    out.provenance = aggregated.provenance.clone();
    Ok(out)
}

/// Fine-tunes the composed prefix on target examples, selecting the step with
/// the best `dev_score` when one is given.
pub fn transfer_tune(
    model: &BackboneModel,
    composed: &DomainPrefix,
    examples: &[EncodedExample],
    cfg: &TransferConfig,
    seed: u64,
    dev_score: Option<crate::prefixstore::ScoreFn<'_>>,
) -> Result<TrainOutcome, PrefixError> {
    let wcfg = WarmupConfig {
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        seed,
        bottleneck: cfg.bottleneck,
    };
    let evaluator = dev_score.map(|score| Evaluator { every: cfg.eval_every, score });
    let mut out = prefixstore::train_prefix(model, composed, examples, &wcfg, evaluator)?;
    out.prefix.provenance = composed.provenance.clone();
    Ok(out)
}
