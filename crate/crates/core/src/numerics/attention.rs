//! Multi-head scaled dot-product attention on raw row-major buffers.

use super::tensor::{axpy, dot, Float};

/// Which keys a query row may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    None,
    /// The first `prefix` keys are visible to every query; the remaining keys
    /// are positions `0..`, and query row `i` sits at position `i + offset`.
    Causal { prefix: usize, offset: usize },
}

impl Mask {
    #[inline]
    fn visible_keys(self, row: usize, total: usize) -> usize {
        match self {
            Mask::None => total,
            Mask::Causal { prefix, offset } => (prefix + row + offset + 1).min(total),
        }
    }
}

/// Shapes of one attention call: `n` queries, `s` keys, model width `d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub n: usize,
    pub s: usize,
    pub d: usize,
    pub heads: usize,
}

impl AttnShape {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// Writes attention output into `out` (n × d) and the probabilities into
/// `probs` (heads × n × s, zero where masked).
pub fn attend<T: Float>(q: &[T], k: &[T], v: &[T], shape: AttnShape, mask: Mask, out: &mut [T], probs: &mut [T]) {
    let AttnShape { n, s, d, heads } = shape;
    let dh = shape.head_dim();
    let scale = T::cst(1.0 / (dh as f64).sqrt());
    out.iter_mut().for_each(|x| *x = T::zero());
    probs.iter_mut().for_each(|x| *x = T::zero());
    let mut kh = vec![T::zero(); s * dh];
    let mut vh = vec![T::zero(); s * dh];
    for h in 0..heads {
        let c0 = h * dh;
        for c in 0..s {
            kh[c * dh..(c + 1) * dh].copy_from_slice(&k[c * d + c0..c * d + c0 + dh]);
            vh[c * dh..(c + 1) * dh].copy_from_slice(&v[c * d + c0..c * d + c0 + dh]);
        }
        for i in 0..n {
            let vis = mask.visible_keys(i, s);
            let qi = &q[i * d + c0..i * d + c0 + dh];
            let p = &mut probs[(h * n + i) * s..(h * n + i) * s + vis];
            let mut mx = T::neg_infinity();
            for (c, pc) in p.iter_mut().enumerate() {
                *pc = dot(qi, &kh[c * dh..(c + 1) * dh]) * scale;
                mx = mx.max(*pc);
            }
            let mut sum = T::zero();
            for pc in p.iter_mut() {
                *pc = (*pc - mx).exp();
                sum += *pc;
            }
            let inv = T::one() / sum;
            let o = &mut out[i * d + c0..i * d + c0 + dh];
            for (c, pc) in p.iter_mut().enumerate() {
                *pc *= inv;
                axpy(*pc, &vh[c * dh..(c + 1) * dh], o);
            }
        }
    }
}

/// Accumulates gradients of [`attend`] into `gq`, `gk`, `gv` (each optional).
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_backward<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    shape: AttnShape,
    mask: Mask,
    g: &[T],
    mut gq: Option<&mut [T]>,
    mut gk: Option<&mut [T]>,
    mut gv: Option<&mut [T]>,
) {
    let AttnShape { n, s, d, heads } = shape;
    let dh = shape.head_dim();
    let scale = T::cst(1.0 / (dh as f64).sqrt());
    let mut ds = vec![T::zero(); s];
    for h in 0..heads {
        let c0 = h * dh;
        for i in 0..n {
            let vis = mask.visible_keys(i, s);
            let p = &probs[(h * n + i) * s..(h * n + i) * s + vis];
            let gi = &g[i * d + c0..i * d + c0 + dh];
            let mut acc = T::zero();
            for c in 0..vis {
                let dp = dot(gi, &v[c * d + c0..c * d + c0 + dh]);
                ds[c] = dp;
                acc += p[c] * dp;
            }
            for c in 0..vis {
                ds[c] = p[c] * (ds[c] - acc) * scale;
            }
            if let Some(gv) = gv.as_deref_mut() {
                for c in 0..vis {
                    axpy(p[c], gi, &mut gv[c * d + c0..c * d + c0 + dh]);
                }
            }
            if let Some(gq) = gq.as_deref_mut() {
                let gqi = &mut gq[i * d + c0..i * d + c0 + dh];
                for c in 0..vis {
                    axpy(ds[c], &k[c * d + c0..c * d + c0 + dh], gqi);
                }
            }
            if let Some(gk) = gk.as_deref_mut() {
                let qi = &q[i * d + c0..i * d + c0 + dh];
                for c in 0..vis {
                    axpy(ds[c], qi, &mut gk[c * d + c0..c * d + c0 + dh]);
                }
            }
        }
    }
}
