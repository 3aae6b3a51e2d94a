//! Forward/backward primitives over row-major `[rows, features]` matrices.
//! Batches of sequences are flattened so row `b * len + t` holds position `t`
//! of sequence `b`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use super::Real;

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Lin {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub g: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Attn {
    pub q: Lin,
    pub k: Lin,
    pub v: Lin,
    pub o: Lin,
}

pub(crate) fn linear<T: Real>(p: &[Array2<T>], l: Lin, x: &ArrayView2<T>) -> Array2<T> {
    let mut y = x.dot(&p[l.w]);
    y += &p[l.b];
    y
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub(crate) fn linear_back<T: Real>(
    p: &[Array2<T>],
    g: &mut [Array2<T>],
    l: Lin,
    x: &ArrayView2<T>,
    dy: &ArrayView2<T>,
) -> Array2<T> {
    general_mat_mul(T::one(), &x.t(), dy, T::one(), &mut g[l.w]);
    g[l.b] += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    dy.dot(&p[l.w].t())
}

pub(crate) struct NormCache<T> {
    xhat: Array2<T>,
    inv_std: Vec<T>,
}

pub(crate) fn layer_norm<T: Real>(p: &[Array2<T>], n: Norm, x: &Array2<T>) -> (Array2<T>, NormCache<T>) {
    let (rows, cols) = x.dim();
    let eps = T::from(LN_EPS).unwrap();
    let inv_n = T::one() / T::from(cols).unwrap();
    let mut xhat = Array2::zeros((rows, cols));
    let mut inv_std = Vec::with_capacity(rows);
    for (r, row) in x.outer_iter().enumerate() {
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_n;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_n;
        let is = T::one() / (var + eps).sqrt();
        for (o, &v) in xhat.row_mut(r).iter_mut().zip(row.iter()) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    let mut y = &xhat * &p[n.g];
    y += &p[n.b];
    (y, NormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_apply<T: Real>(p: &[Array2<T>], n: Norm, x: &Array2<T>) -> Array2<T> {
    layer_norm(p, n, x).0
}

pub(crate) fn layer_norm_back<T: Real>(
    p: &[Array2<T>],
    g: &mut [Array2<T>],
    n: Norm,
    c: &NormCache<T>,
    dy: &Array2<T>,
) -> Array2<T> {
    let (rows, cols) = dy.dim();
    g[n.g] += &(dy * &c.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    g[n.b] += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let gamma = p[n.g].row(0);
    let inv_n = T::one() / T::from(cols).unwrap();
    let mut dx = Array2::zeros((rows, cols));
    for r in 0..rows {
        let dyr = dy.row(r);
        let xh = c.xhat.row(r);
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for j in 0..cols {
            let d = dyr[j] * gamma[j];
            m1 += d;
            m2 += d * xh[j];
        }
        m1 *= inv_n;
        m2 *= inv_n;
        let is = c.inv_std[r];
        let mut out = dx.row_mut(r);
        for j in 0..cols {
            out[j] = is * (dyr[j] * gamma[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

/// Geometry of one attention call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnShape<'a> {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// Valid key count per sequence; keys past it are masked.
    pub key_lens: &'a [usize],
    pub causal: bool,
}

pub(crate) struct AttnCache<T> {
    xq: Array2<T>,
    xkv: Option<Array2<T>>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    ctx: Array2<T>,
}

pub(crate) fn softmax_rows_in_place<T: Real>(s: &mut Array2<T>) {
    for mut row in s.outer_iter_mut() {
        let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        row.mapv_inplace(|v| v * inv);
    }
}

/// Multi-head attention. `xkv = None` means self-attention over `xq`.
pub(crate) fn attention<T: Real>(
    p: &[Array2<T>],
    a: Attn,
    xq: &Array2<T>,
    xkv: Option<&Array2<T>>,
    sh: AttnShape<'_>,
) -> (Array2<T>, AttnCache<T>) {
    let kv_src = xkv.unwrap_or(xq);
    let q = linear(p, a.q, &xq.view());
    let k = linear(p, a.k, &kv_src.view());
    let v = linear(p, a.v, &kv_src.view());
    let d = q.ncols();
    let dh = d / sh.heads;
    let scale = T::one() / T::from(dh).unwrap().sqrt();
    let mut ctx = Array2::zeros((sh.batch * sh.q_len, d));
    let mut probs = Vec::with_capacity(sh.batch * sh.heads);
    for b in 0..sh.batch {
        let (qr, kr) = (b * sh.q_len, b * sh.k_len);
        let valid = sh.key_lens[b];
        for h in 0..sh.heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![qr..qr + sh.q_len, cols.clone()]);
            let kh = k.slice(s![kr..kr + sh.k_len, cols.clone()]);
            let vh = v.slice(s![kr..kr + sh.k_len, cols.clone()]);
            let mut sc = qh.dot(&kh.t());
            for i in 0..sh.q_len {
                let mut row = sc.row_mut(i);
                for j in 0..sh.k_len {
                    if j >= valid || (sh.causal && j > i) {
                        row[j] = T::neg_infinity();
                    } else {
                        row[j] *= scale;
                    }
                }
            }
            softmax_rows_in_place(&mut sc);
            ctx.slice_mut(s![qr..qr + sh.q_len, cols]).assign(&sc.dot(&vh));
            probs.push(sc);
        }
    }
    let out = linear(p, a.o, &ctx.view());
    let cache = AttnCache { xq: xq.clone(), xkv: xkv.cloned(), q, k, v, probs, ctx };
    (out, cache)
}

/// Returns `(d_xq, d_xkv)`; for self-attention both contributions are summed
/// into the first element and the second is `None`.
pub(crate) fn attention_back<T: Real>(
    p: &[Array2<T>],
    g: &mut [Array2<T>],
    a: Attn,
    c: &AttnCache<T>,
    sh: AttnShape<'_>,
    dout: &Array2<T>,
) -> (Array2<T>, Option<Array2<T>>) {
    let dctx = linear_back(p, g, a.o, &c.ctx.view(), &dout.view());
    let d = c.q.ncols();
    let dh = d / sh.heads;
    let scale = T::one() / T::from(dh).unwrap().sqrt();
    let mut dq = Array2::zeros(c.q.dim());
    let mut dk = Array2::zeros(c.k.dim());
    let mut dv = Array2::zeros(c.v.dim());
    for b in 0..sh.batch {
        let (qr, kr) = (b * sh.q_len, b * sh.k_len);
        for h in 0..sh.heads {
            let cols = h * dh..(h + 1) * dh;
            let pr = &c.probs[b * sh.heads + h];
            let dc = dctx.slice(s![qr..qr + sh.q_len, cols.clone()]);
            let qh = c.q.slice(s![qr..qr + sh.q_len, cols.clone()]);
            let kh = c.k.slice(s![kr..kr + sh.k_len, cols.clone()]);
            let vh = c.v.slice(s![kr..kr + sh.k_len, cols.clone()]);
            general_mat_mul(T::one(), &pr.t(), &dc, T::one(), &mut dv.slice_mut(s![kr..kr + sh.k_len, cols.clone()]));
            let dp = dc.dot(&vh.t());
            let mut ds = Array2::zeros(dp.dim());
            for i in 0..sh.q_len {
                let prow = pr.row(i);
                let dprow = dp.row(i);
                let dot = prow.iter().zip(dprow.iter()).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                let mut out = ds.row_mut(i);
                for j in 0..sh.k_len {
                    out[j] = prow[j] * (dprow[j] - dot) * scale;
                }
            }
            general_mat_mul(T::one(), &ds, &kh, T::one(), &mut dq.slice_mut(s![qr..qr + sh.q_len, cols.clone()]));
            general_mat_mul(T::one(), &ds.t(), &qh, T::one(), &mut dk.slice_mut(s![kr..kr + sh.k_len, cols]));
        }
    }
    let mut dxq = linear_back(p, g, a.q, &c.xq.view(), &dq.view());
    match &c.xkv {
        None => {
            dxq += &linear_back(p, g, a.k, &c.xq.view(), &dk.view());
            dxq += &linear_back(p, g, a.v, &c.xq.view(), &dv.view());
            (dxq, None)
        }
        Some(xkv) => {
            let mut dkv = linear_back(p, g, a.k, &xkv.view(), &dk.view());
            dkv += &linear_back(p, g, a.v, &xkv.view(), &dv.view());
            (dxq, Some(dkv))
        }
    }
}

pub(crate) struct FfCache<T> {
    x: Array2<T>,
    h: Array2<T>,
}

pub(crate) fn feed_forward<T: Real>(p: &[Array2<T>], l1: Lin, l2: Lin, x: &Array2<T>) -> (Array2<T>, FfCache<T>) {
    let mut h = linear(p, l1, &x.view());
    h.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
    let y = linear(p, l2, &h.view());
    (y, FfCache { x: x.clone(), h })
}

pub(crate) fn feed_forward_back<T: Real>(
    p: &[Array2<T>],
    g: &mut [Array2<T>],
    l1: Lin,
    l2: Lin,
    c: &FfCache<T>,
    dy: &Array2<T>,
) -> Array2<T> {
    let mut dh = linear_back(p, g, l2, &c.h.view(), &dy.view());
    dh.zip_mut_with(&c.h, |d, &h| {
        if h <= T::zero() {
            *d = T::zero()
        }
    });
    linear_back(p, g, l1, &c.x.view(), &dh.view())
}

/// Inverted dropout on a residual branch. A rate of zero is a no-op and keeps
/// no mask.
pub(crate) struct Dropout<T> {
    mask: Option<Array2<T>>,
}

impl<T: Real> Dropout<T> {
    pub fn apply(x: &mut Array2<T>, rate: f64, rng: Option<&mut (dyn rand::RngCore + '_)>) -> Self {
        let rng = match rng {
            Some(r) if rate > 0.0 => r,
            _ => return Dropout { mask: None },
        };
        let keep = T::from(1.0 / (1.0 - rate)).unwrap();
        let mask = Array2::from_shape_simple_fn(x.dim(), || if rng.gen::<f64>() < rate { T::zero() } else { keep });
        *x *= &mask;
        Dropout { mask: Some(mask) }
    }

    pub fn back(&self, dy: &mut Array2<T>) {
        if let Some(m) = &self.mask {
            *dy *= m;
        }
    }
}
