//! Central finite-difference gradient oracle.
//!
//! The analytic side runs in `f32` through [`Graph::backward`]; the numerical
//! side re-evaluates the same objective in `f64` with perturbed parameters and
//! never touches a backward rule.

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::rng::Rng;
use super::tensor::{Float, Tensor};
use super::NumericsError;

/// A scalar function of a parameter list, evaluable at any precision.
pub trait Objective {
    fn eval<T: Float>(&self, graph: &mut Graph<T>, params: &[Var]) -> Result<Var, NumericsError>;
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many coordinates per parameter (sampled); `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Run the analytic backward pass in `f64` instead of `f32`.
    #[serde(default)]
    pub wide_analytic: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { step: 1e-3, tolerance: 1e-4, max_coords: None, seed: 0, wide_analytic: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamCheck {
    pub index: usize,
    pub coords_checked: usize,
    pub max_abs_error: f64,
    /// Largest gradient magnitude seen among the checked coordinates.
    pub scale: f64,
    /// `max_abs_error / max(scale, 1e-7)`.
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn eval_f64<F: Objective>(f: &F, params: &[Tensor<f64>]) -> Result<f64, NumericsError> {
    let mut g = Graph::<f64>::new();
    let vars = params.iter().map(|p| g.constant(p.clone())).collect::<Result<Vec<_>, _>>()?;
    let out = f.eval(&mut g, &vars)?;
    let v = g.value(out).data()[0];
    if !v.is_finite() {
        return Err(NumericsError::NonFinite { op: "gradcheck objective" });
    }
    Ok(v)
}

/// Analytic gradients of `f` at `params` (f32 tape).
pub fn analytic_grads<F: Objective>(f: &F, params: &[Tensor<f32>]) -> Result<(f32, Vec<Vec<f32>>), NumericsError> {
    analytic_grads_as::<f32, F>(f, params)
}

/// Analytic gradients on a tape of precision `T`.
pub fn analytic_grads_as<T: Float, F: Objective>(f: &F, params: &[Tensor<f32>]) -> Result<(T, Vec<Vec<T>>), NumericsError> {
    let mut g = Graph::<T>::new();
    let vars = params.iter().map(|p| g.leaf(p.cast(), true)).collect::<Result<Vec<_>, _>>()?;
    let out = f.eval(&mut g, &vars)?;
    let loss = g.value(out).data()[0];
    if !loss.is_finite() {
        return Err(NumericsError::NonFinite { op: "gradcheck objective" });
    }
    g.backward(out)?;
    Ok((loss, vars.iter().map(|&v| g.grad_or_zeros(v)).collect()))
}

pub fn gradcheck<F: Objective>(
    f: &F,
    params: &[Tensor<f32>],
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport, NumericsError> {
    let analytic: Vec<Vec<f64>> = if cfg.wide_analytic {
        analytic_grads_as::<f64, F>(f, params)?.1
    } else {
        analytic_grads(f, params)?.1.into_iter().map(|g| g.into_iter().map(f64::from).collect()).collect()
    };
    let mut wide: Vec<Tensor<f64>> = params.iter().map(|p| p.cast()).collect();
    eval_f64(f, &wide)?;
    let mut rng = Rng::derive(cfg.seed, "gradcheck");
    let mut checks = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let coords = match cfg.max_coords {
            Some(k) if k < n => rng.sample_indices(n, k),
            _ => (0..n).collect(),
        };
        let mut max_abs = 0.0f64;
        let mut scale = 0.0f64;
        for &c in &coords {
            let orig = wide[pi].data()[c];
            wide[pi].data_mut()[c] = orig + cfg.step;
            let up = eval_f64(f, &wide)?;
            wide[pi].data_mut()[c] = orig - cfg.step;
            let down = eval_f64(f, &wide)?;
            wide[pi].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = grad[c];
            max_abs = max_abs.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        checks.push(ParamCheck {
            index: pi,
            coords_checked: coords.len(),
            max_abs_error: max_abs,
            scale,
            rel_error: max_abs / scale.max(1e-7),
        });
    }
    let max_rel = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport { params: checks, max_rel_error: max_rel, tolerance: cfg.tolerance, passed: max_rel < cfg.tolerance })
}
