//! Seq2seq loss as a [`Objective`] over all backbone and prefix parameters.

use super::{BackboneModel, PrefixMatrices, PrefixVars};
use crate::numerics::{Float, Graph, NumericsError, Objective, Tensor, Var};

/// Mean token cross-entropy over a batch, as a function of the backbone
/// parameters followed by the prefix matrices (site-major, then layer).
pub struct LossObjective<'a> {
    pub model: &'a BackboneModel,
    /// Layers per site of the prefix part; empty sites have none.
    pub prefix_layout: Vec<usize>,
    pub batch: Vec<(Vec<usize>, Vec<usize>)>,
}

impl<'a> LossObjective<'a> {
    pub fn new(model: &'a BackboneModel, prefix: Option<&PrefixMatrices>, batch: Vec<(Vec<usize>, Vec<usize>)>) -> Self {
        let prefix_layout = prefix.map(|p| p.sites.iter().map(Vec::len).collect()).unwrap_or_default();
        Self { model, prefix_layout, batch }
    }

    /// The parameter list this objective expects.
    pub fn params(&self, prefix: Option<&PrefixMatrices>) -> Vec<Tensor<f32>> {
        let mut v = self.model.params().to_vec();
        if let Some(p) = prefix {
            v.extend(p.iter().cloned());
        }
        v
    }
}

impl Objective for LossObjective<'_> {
    fn eval<T: Float>(&self, g: &mut Graph<T>, params: &[Var]) -> Result<Var, NumericsError> {
        let n = self.model.params().len();
        let (pv, rest) = params.split_at(n);
        let prefix = if self.prefix_layout.is_empty() {
            None
        } else {
            let mut sites = Vec::with_capacity(self.prefix_layout.len());
            let mut k = 0;
            for &layers in &self.prefix_layout {
                sites.push(rest[k..k + layers].to_vec());
                k += layers;
            }
            Some(PrefixVars { sites })
        };
        let mut total = None;
        for (input, target) in &self.batch {
            let loss = self.model.loss_graph(g, pv, prefix.as_ref(), input, target).map_err(into_numerics)?;
            total = Some(match total {
                None => loss,
                Some(t) => g.add(t, loss)?,
            });
        }
        let total = total.ok_or(NumericsError::EmptyAxis { op: "loss objective batch" })?;
        g.scale(total, T::cst(1.0 / self.batch.len() as f64))
    }
}

fn into_numerics(e: super::BackboneError) -> NumericsError {
    match e {
        super::BackboneError::Numerics(n) => n,
        other => NumericsError::Invalid(other.to_string()),
    }
}

/// A randomized toy configuration for checking the full model's gradients.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ToyCheck {
    pub seed: u64,
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub prefix_length: usize,
    pub input_len: usize,
    pub target_len: usize,
    pub batch: usize,
}

impl Default for ToyCheck {
    fn default() -> Self {
        Self {
            seed: 0,
            vocab_size: 12,
            d_model: 8,
            num_heads: 2,
            d_ff: 12,
            num_encoder_layers: 1,
            num_decoder_layers: 1,
            prefix_length: 2,
            input_len: 5,
            target_len: 4,
            batch: 2,
        }
    }
}

/// Gradient check of the loss with respect to every backbone parameter and
/// every prefix matrix. Zero and unit initializations are jittered so no
/// path is trivially dead.
pub fn check_toy_model(
    check: &ToyCheck,
    cfg: &crate::numerics::GradcheckConfig,
) -> Result<crate::numerics::GradcheckReport, super::BackboneError> {
    use crate::numerics::Rng;
    let config = super::ModelConfig {
        num_encoder_layers: check.num_encoder_layers,
        num_decoder_layers: check.num_decoder_layers,
        d_model: check.d_model,
        num_heads: check.num_heads,
        d_ff: check.d_ff,
        vocab_size: check.vocab_size,
        max_sequence_length: check.input_len.max(check.target_len) + 2,
        prefix_length: check.prefix_length,
        prefix_sites: super::Site::ALL.to_vec(),
    };
    let mut model = BackboneModel::init(config, check.seed)?;
    let mut rng = Rng::derive(check.seed, "toy-gradcheck");
    for p in model.params_mut()? {
        let noise = Tensor::randn(p.shape(), 0.1, &mut rng);
        p.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
    }
    let mut prefix = PrefixMatrices::zeros(model.config());
    for t in prefix.iter_mut() {
        *t = Tensor::randn(t.shape(), 0.3, &mut rng);
    }
    let token = |rng: &mut Rng| 2 + rng.below(check.vocab_size - 2);
    let batch = (0..check.batch)
        .map(|_| {
            let input: Vec<usize> = (0..check.input_len).map(|_| token(&mut rng)).collect();
            let target: Vec<usize> = (0..check.target_len).map(|_| token(&mut rng)).collect();
            (input, target)
        })
        .collect();
    let objective = LossObjective::new(&model, Some(&prefix), batch);
    let params = objective.params(Some(&prefix));
    Ok(crate::numerics::gradcheck(&objective, &params, cfg)?)
}
