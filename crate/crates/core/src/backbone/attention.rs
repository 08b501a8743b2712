//! Stand-alone prefix attention on plain tensors, in the two algebraically
//! equivalent forms. Output projection is left out; both forms share it.

use crate::numerics::{attend, AttnShape, Float, Mask, NumericsError, Tensor};

fn project<T: Float>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Vec<T>, NumericsError> {
    let (n, k) = (x.rows(), x.cols());
    if w.shape() != [k, k] {
        return Err(NumericsError::Shape { op: "prefix_attention", left: x.shape().to_vec(), right: w.shape().to_vec() });
    }
    let mut out = vec![T::zero(); n * k];
    for i in 0..n {
        for p in 0..k {
            let a = x.data()[i * k + p];
            for j in 0..k {
                out[i * k + j] += a * w.data()[p * k + j];
            }
        }
    }
    Ok(out)
}

fn check_prefix<T: Float>(d: usize, prefix: Option<(&Tensor<T>, &Tensor<T>)>) -> Result<usize, NumericsError> {
    match prefix {
        None => Ok(0),
        Some((dk, dv)) => {
            if dk.shape().len() != 2 || dk.cols() != d || dk.shape() != dv.shape() {
                return Err(NumericsError::Shape { op: "prefix_attention", left: dk.shape().to_vec(), right: vec![dk.rows(), d] });
            }
            Ok(dk.rows())
        }
    }
}

/// Attention whose keys and values are the prefix rows followed by the
/// projected inputs.
pub fn prefix_attention_concat<T: Float>(
    x: &Tensor<T>,
    wq: &Tensor<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
    prefix: Option<(&Tensor<T>, &Tensor<T>)>,
    heads: usize,
) -> Result<Tensor<T>, NumericsError> {
    let (n, d) = (x.rows(), x.cols());
    if heads == 0 || d % heads != 0 {
        return Err(NumericsError::Invalid(format!("{heads} heads do not divide width {d}")));
    }
    let m = check_prefix(d, prefix)?;
    let q = project(x, wq)?;
    let mut k = Vec::with_capacity((m + n) * d);
    let mut v = Vec::with_capacity((m + n) * d);
    if let Some((dk, dv)) = prefix {
        k.extend_from_slice(dk.data());
        v.extend_from_slice(dv.data());
    }
    k.extend(project(x, wk)?);
    v.extend(project(x, wv)?);
    let shape = AttnShape { n, s: m + n, d, heads };
    let mut out = vec![T::zero(); n * d];
    let mut probs = vec![T::zero(); heads * n * (m + n)];
    attend(&q, &k, &v, shape, Mask::None, &mut out, &mut probs);
    Tensor::new(vec![n, d], out)
}

/// Result of the interpolated form.
#[derive(Clone, Debug)]
pub struct InterpolatedAttention<T: Float> {
    pub output: Tensor<T>,
    /// Prefix attention mass per query row and head (n × heads).
    pub lambda: Tensor<T>,
}

/// Softmax-weighted sum computed directly from unnormalized scores. Returns
/// the weighted value vector and the partition sum.
fn weighted<T: Float>(scores: &[T], values: &[&[T]], dh: usize, shift: T) -> (Vec<T>, T) {
    let mut acc = vec![T::zero(); dh];
    let mut z = T::zero();
    for (s, v) in scores.iter().zip(values) {
        let e = (*s - shift).exp();
        z += e;
        for (a, &x) in acc.iter_mut().zip(v.iter()) {
            *a += e * x;
        }
    }
    if z > T::zero() {
        for a in acc.iter_mut() {
            *a = *a / z;
        }
    }
    (acc, z)
}

/// `(1 − λ)·Attn(xW_q, xW_k, xW_v) + λ·Attn(xW_q, δ_k, δ_v)` per head, with λ
/// the normalized attention mass on prefix positions.
pub fn prefix_attention_interpolated<T: Float>(
    x: &Tensor<T>,
    wq: &Tensor<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
    prefix: Option<(&Tensor<T>, &Tensor<T>)>,
    heads: usize,
) -> Result<InterpolatedAttention<T>, NumericsError> {
    let (n, d) = (x.rows(), x.cols());
    if heads == 0 || d % heads != 0 {
        return Err(NumericsError::Invalid(format!("{heads} heads do not divide width {d}")));
    }
    let m = check_prefix(d, prefix)?;
    let dh = d / heads;
    let scale = T::cst(1.0 / (dh as f64).sqrt());
    let q = project(x, wq)?;
    let k = project(x, wk)?;
    let v = project(x, wv)?;
    let mut out = vec![T::zero(); n * d];
    let mut lambda = vec![T::zero(); n * heads];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let head = |buf: &[T], r: usize| buf[r * d + cols.start..r * d + cols.end].to_vec();
        let xk: Vec<Vec<T>> = (0..n).map(|r| head(&k, r)).collect();
        let xv: Vec<Vec<T>> = (0..n).map(|r| head(&v, r)).collect();
        let (pk, pv): (Vec<Vec<T>>, Vec<Vec<T>>) = match prefix {
            Some((dk, dvv)) => ((0..m).map(|r| head(dk.data(), r)).collect(), (0..m).map(|r| head(dvv.data(), r)).collect()),
            None => (Vec::new(), Vec::new()),
        };
        for i in 0..n {
            let qi = head(&q, i);
            let score = |key: &Vec<T>| qi.iter().zip(key).map(|(&a, &b)| a * b).sum::<T>() * scale;
            let s_x: Vec<T> = xk.iter().map(score).collect();
            let s_p: Vec<T> = pk.iter().map(score).collect();
            let shift = s_x.iter().chain(&s_p).fold(T::neg_infinity(), |a, &b| a.max(b));
            let xv_refs: Vec<&[T]> = xv.iter().map(Vec::as_slice).collect();
            let pv_refs: Vec<&[T]> = pv.iter().map(Vec::as_slice).collect();
            let (std_attn, z_x) = weighted(&s_x, &xv_refs, dh, shift);
            let (pre_attn, z_p) = weighted(&s_p, &pv_refs, dh, shift);
            let lam = z_p / (z_p + z_x);
            lambda[i * heads + h] = lam;
            for (c, (a, b)) in std_attn.iter().zip(&pre_attn).enumerate() {
                out[i * d + cols.start + c] = (T::one() - lam) * *a + lam * *b;
            }
        }
    }
    Ok(InterpolatedAttention { output: Tensor::new(vec![n, d], out)?, lambda: Tensor::new(vec![n, heads], lambda)? })
}
