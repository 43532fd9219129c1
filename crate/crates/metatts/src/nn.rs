//! Neural-net building blocks with hand-rolled backward passes.
//!
//! Forward functions return the output plus whatever intermediate state the
//! matching backward needs. Everything is generic over [`Scalar`]: weights
//! that never carry tangents are passed as `f64` views (`matmul_const`
//! exploits that), while the few style-branch weights that do carry tangents
//! use the `_s` variants. Gradients accumulate (`+=`) into caller-owned
//! buffers so batch items can share one gradient container.

use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// y = x · wᵀ + b. x: [n, in], w: [out, in], b: [out].
pub fn linear_fwd<S: Scalar>(x: ArrayView2<S>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<S> {
    let mut y = S::matmul_const(x, w.t());
    for mut row in y.rows_mut() {
        for (v, &bb) in row.iter_mut().zip(b.iter()) {
            *v += S::from_f64(bb);
        }
    }
    y
}

/// Returns dx; accumulates (dw, db) when `grad` is given.
pub fn linear_bwd<S: Scalar>(
    x: ArrayView2<S>,
    w: ArrayView2<f64>,
    dy: ArrayView2<S>,
    grad: Option<(&mut Array2<S>, &mut Array1<S>)>,
) -> Array2<S> {
    if let Some((dw, db)) = grad {
        let gw = S::matmul(dy.t(), x);
        *dw += &gw;
        for row in dy.rows() {
            for (acc, &v) in db.iter_mut().zip(row.iter()) {
                *acc += v;
            }
        }
    }
    S::matmul_const(dy, w)
}

/// Linear with tangent-carrying weights (style branch).
pub fn linear_fwd_s<S: Scalar>(x: ArrayView2<S>, w: ArrayView2<S>, b: ArrayView1<S>) -> Array2<S> {
    let mut y = S::matmul(x, w.t());
    for mut row in y.rows_mut() {
        for (v, &bb) in row.iter_mut().zip(b.iter()) {
            *v += bb;
        }
    }
    y
}

pub fn linear_bwd_s<S: Scalar>(
    x: ArrayView2<S>,
    w: ArrayView2<S>,
    dy: ArrayView2<S>,
    grad: Option<(&mut Array2<S>, &mut Array1<S>)>,
) -> Array2<S> {
    if let Some((dw, db)) = grad {
        let gw = S::matmul(dy.t(), x);
        *dw += &gw;
        for row in dy.rows() {
            for (acc, &v) in db.iter_mut().zip(row.iter()) {
                *acc += v;
            }
        }
    }
    S::matmul(dy, w)
}

// ---------------------------------------------------------------------------
// 1-D convolution over time (same padding, odd kernel)
// ---------------------------------------------------------------------------

/// im2col buffer: row t holds the receptive field of output frame t,
/// laid out channel-major ([c_in * k] with column i*k + j = x[t + j - pad, i]).
pub struct Conv1dCache<S: Scalar> {
    pub xcol: Array2<S>,
}

fn im2col<S: Scalar>(x: ArrayView2<S>, k: usize) -> Array2<S> {
    let (n, c_in) = x.dim();
    let pad = (k - 1) / 2;
    let mut xcol = Array2::from_elem((n, c_in * k), S::ZERO);
    for t in 0..n {
        for i in 0..c_in {
            for j in 0..k {
                let src = t as isize + j as isize - pad as isize;
                if src >= 0 && (src as usize) < n {
                    xcol[[t, i * k + j]] = x[[src as usize, i]];
                }
            }
        }
    }
    xcol
}

fn col2im<S: Scalar>(dxcol: ArrayView2<S>, n: usize, c_in: usize, k: usize) -> Array2<S> {
    let pad = (k - 1) / 2;
    let mut dx = Array2::from_elem((n, c_in), S::ZERO);
    for t in 0..n {
        for i in 0..c_in {
            for j in 0..k {
                let src = t as isize + j as isize - pad as isize;
                if src >= 0 && (src as usize) < n {
                    dx[[src as usize, i]] += dxcol[[t, i * k + j]];
                }
            }
        }
    }
    dx
}

/// x: [n, c_in], w: [c_out, c_in, k] (k odd), b: [c_out] -> y: [n, c_out].
pub fn conv1d_fwd<S: Scalar>(
    x: ArrayView2<S>,
    w: &Array3<f64>,
    b: ArrayView1<f64>,
) -> (Array2<S>, Conv1dCache<S>) {
    let (c_out, c_in, k) = w.dim();
    debug_assert_eq!(x.ncols(), c_in, "conv1d input channels");
    debug_assert_eq!(k % 2, 1, "conv1d kernel must be odd");
    let xcol = im2col(x, k);
    let wflat = w.view().into_shape_with_order((c_out, c_in * k)).unwrap();
    let mut y = S::matmul_const(xcol.view(), wflat.t());
    for mut row in y.rows_mut() {
        for (v, &bb) in row.iter_mut().zip(b.iter()) {
            *v += S::from_f64(bb);
        }
    }
    (y, Conv1dCache { xcol })
}

pub fn conv1d_bwd<S: Scalar>(
    cache: &Conv1dCache<S>,
    w: &Array3<f64>,
    dy: ArrayView2<S>,
    grad: Option<(&mut Array3<S>, &mut Array1<S>)>,
) -> Array2<S> {
    let (c_out, c_in, k) = w.dim();
    let n = cache.xcol.nrows();
    if let Some((dw, db)) = grad {
        let gw = S::matmul(dy.t(), cache.xcol.view()); // [c_out, c_in*k]
        {
            let mut dwflat = dw
                .view_mut()
                .into_shape_with_order((c_out, c_in * k))
                .unwrap();
            dwflat += &gw;
        }
        for row in dy.rows() {
            for (acc, &v) in db.iter_mut().zip(row.iter()) {
                *acc += v;
            }
        }
    }
    let wflat = w.view().into_shape_with_order((c_out, c_in * k)).unwrap();
    let dxcol = S::matmul_const(dy, wflat);
    col2im(dxcol.view(), n, c_in, k)
}

// ---------------------------------------------------------------------------
// Gated 1-D convolution (GLU): conv to 2c channels, y = a ⊙ sigmoid(g)
// ---------------------------------------------------------------------------

pub struct GluConvCache<S: Scalar> {
    pub conv: Conv1dCache<S>,
    /// Pre-gate conv output, [n, 2c].
    pub pre: Array2<S>,
}

/// w: [2*c_out, c_in, k]; output [n, c_out].
pub fn glu_conv_fwd<S: Scalar>(
    x: ArrayView2<S>,
    w: &Array3<f64>,
    b: ArrayView1<f64>,
) -> (Array2<S>, GluConvCache<S>) {
    let (pre, conv) = conv1d_fwd(x, w, b);
    let two_c = pre.ncols();
    debug_assert_eq!(two_c % 2, 0, "GLU conv needs even output channels");
    let c = two_c / 2;
    let n = pre.nrows();
    let mut y = Array2::from_elem((n, c), S::ZERO);
    for t in 0..n {
        for j in 0..c {
            y[[t, j]] = pre[[t, j]] * pre[[t, c + j]].sigmoid();
        }
    }
    (y, GluConvCache { conv, pre })
}

pub fn glu_conv_bwd<S: Scalar>(
    cache: &GluConvCache<S>,
    w: &Array3<f64>,
    dy: ArrayView2<S>,
    grad: Option<(&mut Array3<S>, &mut Array1<S>)>,
) -> Array2<S> {
    let two_c = cache.pre.ncols();
    let c = two_c / 2;
    let n = cache.pre.nrows();
    let mut dpre = Array2::from_elem((n, two_c), S::ZERO);
    for t in 0..n {
        for j in 0..c {
            let a = cache.pre[[t, j]];
            let s = cache.pre[[t, c + j]].sigmoid();
            let g = dy[[t, j]];
            dpre[[t, j]] = g * s;
            dpre[[t, c + j]] = g * a * s * (S::ONE - s);
        }
    }
    conv1d_bwd(&cache.conv, w, dpre.view(), grad)
}

// ---------------------------------------------------------------------------
// Layer normalization (per frame over the hidden dim)
// ---------------------------------------------------------------------------

pub struct LnCache<S: Scalar> {
    /// Normalized output (zero mean, unit variance per row).
    pub z: Array2<S>,
    pub inv_std: Vec<S>,
}

/// Plain LN without trainable affine; biased variance, rsqrt(var + eps).
pub fn layer_norm_fwd<S: Scalar>(x: ArrayView2<S>, eps: f64) -> LnCache<S> {
    let (n, d) = x.dim();
    let inv_d = 1.0 / d as f64;
    let mut z = Array2::from_elem((n, d), S::ZERO);
    let mut inv_std = Vec::with_capacity(n);
    for t in 0..n {
        let mut mean = S::ZERO;
        for j in 0..d {
            mean += x[[t, j]];
        }
        mean = mean.scale(inv_d);
        let mut var = S::ZERO;
        for j in 0..d {
            let c = x[[t, j]] - mean;
            var += c * c;
        }
        var = var.scale(inv_d);
        let istd = (var + S::from_f64(eps)).sqrt().recip();
        for j in 0..d {
            z[[t, j]] = (x[[t, j]] - mean) * istd;
        }
        inv_std.push(istd);
    }
    LnCache { z, inv_std }
}

/// dx for plain LN given dz (gradient at the normalized output).
pub fn layer_norm_bwd<S: Scalar>(cache: &LnCache<S>, dz: ArrayView2<S>) -> Array2<S> {
    let (n, d) = cache.z.dim();
    let inv_d = 1.0 / d as f64;
    let mut dx = Array2::from_elem((n, d), S::ZERO);
    for t in 0..n {
        let mut mean_dz = S::ZERO;
        let mut mean_dzz = S::ZERO;
        for j in 0..d {
            mean_dz += dz[[t, j]];
            mean_dzz += dz[[t, j]] * cache.z[[t, j]];
        }
        mean_dz = mean_dz.scale(inv_d);
        mean_dzz = mean_dzz.scale(inv_d);
        for j in 0..d {
            dx[[t, j]] =
                cache.inv_std[t] * (dz[[t, j]] - mean_dz - cache.z[[t, j]] * mean_dzz);
        }
    }
    dx
}

/// Affine LN: y = g ⊙ LN(x) + b.
pub fn layer_norm_affine_fwd<S: Scalar>(
    x: ArrayView2<S>,
    g: ArrayView1<f64>,
    b: ArrayView1<f64>,
    eps: f64,
) -> (Array2<S>, LnCache<S>) {
    let cache = layer_norm_fwd(x, eps);
    let (n, d) = cache.z.dim();
    let mut y = Array2::from_elem((n, d), S::ZERO);
    for t in 0..n {
        for j in 0..d {
            y[[t, j]] = cache.z[[t, j]].scale(g[j]) + S::from_f64(b[j]);
        }
    }
    (y, cache)
}

pub fn layer_norm_affine_bwd<S: Scalar>(
    cache: &LnCache<S>,
    g: ArrayView1<f64>,
    dy: ArrayView2<S>,
    grad: Option<(&mut Array1<S>, &mut Array1<S>)>,
) -> Array2<S> {
    let (n, d) = cache.z.dim();
    if let Some((dg, db)) = grad {
        for t in 0..n {
            for j in 0..d {
                dg[j] += dy[[t, j]] * cache.z[[t, j]];
                db[j] += dy[[t, j]];
            }
        }
    }
    let mut dz = Array2::from_elem((n, d), S::ZERO);
    for t in 0..n {
        for j in 0..d {
            dz[[t, j]] = dy[[t, j]].scale(g[j]);
        }
    }
    layer_norm_bwd(cache, dz.view())
}

// ---------------------------------------------------------------------------
// Style-adaptive modulation of a normalized sequence
// ---------------------------------------------------------------------------

/// out = (γs ⊙ z + βs) + (γp ⊙ z + βp), z normalized once by the caller.
pub fn style_modulate_fwd<S: Scalar>(
    z: ArrayView2<S>,
    gs: ArrayView1<S>,
    bs: ArrayView1<S>,
    gp: ArrayView1<S>,
    bp: ArrayView1<S>,
) -> Array2<S> {
    let (n, d) = z.dim();
    let mut y = Array2::from_elem((n, d), S::ZERO);
    for t in 0..n {
        for j in 0..d {
            y[[t, j]] = (gs[j] + gp[j]) * z[[t, j]] + bs[j] + bp[j];
        }
    }
    y
}

/// Returns dz; dγ/dβ are identical for the speaker and prosody halves
/// (the two modulations are symmetric), so one pair is returned.
pub fn style_modulate_bwd<S: Scalar>(
    z: ArrayView2<S>,
    gs: ArrayView1<S>,
    gp: ArrayView1<S>,
    dy: ArrayView2<S>,
) -> (Array2<S>, Array1<S>, Array1<S>) {
    let (n, d) = z.dim();
    let mut dz = Array2::from_elem((n, d), S::ZERO);
    let mut dg = Array1::from_elem(d, S::ZERO);
    let mut db = Array1::from_elem(d, S::ZERO);
    for t in 0..n {
        for j in 0..d {
            dz[[t, j]] = (gs[j] + gp[j]) * dy[[t, j]];
            dg[j] += dy[[t, j]] * z[[t, j]];
            db[j] += dy[[t, j]];
        }
    }
    (dz, dg, db)
}

// ---------------------------------------------------------------------------
// Multi-head self-attention
// ---------------------------------------------------------------------------

pub struct MhsaWeights<'a> {
    pub wq: ArrayView2<'a, f64>,
    pub bq: ArrayView1<'a, f64>,
    pub wk: ArrayView2<'a, f64>,
    pub bk: ArrayView1<'a, f64>,
    pub wv: ArrayView2<'a, f64>,
    pub bv: ArrayView1<'a, f64>,
    pub wo: ArrayView2<'a, f64>,
    pub bo: ArrayView1<'a, f64>,
}

pub struct MhsaGrads<'a, S: Scalar> {
    pub wq: &'a mut Array2<S>,
    pub bq: &'a mut Array1<S>,
    pub wk: &'a mut Array2<S>,
    pub bk: &'a mut Array1<S>,
    pub wv: &'a mut Array2<S>,
    pub bv: &'a mut Array1<S>,
    pub wo: &'a mut Array2<S>,
    pub bo: &'a mut Array1<S>,
}

pub struct MhsaCache<S: Scalar> {
    pub q: Array2<S>,
    pub k: Array2<S>,
    pub v: Array2<S>,
    /// Per-head attention probabilities, each [n, n].
    pub probs: Vec<Array2<S>>,
    /// Concatenated per-head context, [n, d] (input to the output proj).
    pub ctx: Array2<S>,
}

fn softmax_rows_inplace<S: Scalar>(x: &mut Array2<S>) {
    for mut row in x.rows_mut() {
        let m = row.iter().fold(f64::NEG_INFINITY, |acc, v| acc.max(v.re()));
        let mut sum = S::ZERO;
        for v in row.iter_mut() {
            *v = (*v - S::from_f64(m)).exp();
            sum += *v;
        }
        let inv = sum.recip();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// dprobs -> dscores for a row-wise softmax: p ⊙ (dp − Σ dp ⊙ p).
fn softmax_bwd<S: Scalar>(probs: &Array2<S>, dprobs: &Array2<S>) -> Array2<S> {
    let (n, m) = probs.dim();
    let mut ds = Array2::from_elem((n, m), S::ZERO);
    for t in 0..n {
        let mut dot = S::ZERO;
        for j in 0..m {
            dot += dprobs[[t, j]] * probs[[t, j]];
        }
        for j in 0..m {
            ds[[t, j]] = probs[[t, j]] * (dprobs[[t, j]] - dot);
        }
    }
    ds
}

pub fn mhsa_fwd<S: Scalar>(
    x: ArrayView2<S>,
    w: &MhsaWeights,
    heads: usize,
) -> (Array2<S>, MhsaCache<S>) {
    let (n, d) = x.dim();
    debug_assert_eq!(d % heads, 0);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear_fwd(x, w.wq, w.bq);
    let k = linear_fwd(x, w.wk, w.bk);
    let v = linear_fwd(x, w.wv, w.bv);
    let mut ctx = Array2::from_elem((n, d), S::ZERO);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = q.slice(ndarray::s![.., cols.clone()]);
        let kh = k.slice(ndarray::s![.., cols.clone()]);
        let vh = v.slice(ndarray::s![.., cols.clone()]);
        let mut scores = S::matmul(qh, kh.t());
        scores.mapv_inplace(|s| s.scale(scale));
        softmax_rows_inplace(&mut scores);
        let ctx_h = S::matmul(scores.view(), vh);
        ctx.slice_mut(ndarray::s![.., cols]).assign(&ctx_h);
        probs.push(scores);
    }
    let y = linear_fwd(ctx.view(), w.wo, w.bo);
    (y, MhsaCache { q, k, v, probs, ctx })
}

pub fn mhsa_bwd<S: Scalar>(
    x: ArrayView2<S>,
    cache: &MhsaCache<S>,
    w: &MhsaWeights,
    heads: usize,
    dy: ArrayView2<S>,
    grads: Option<MhsaGrads<'_, S>>,
) -> Array2<S> {
    let (n, d) = x.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut g = grads;
    let dctx = {
        let go = g
            .as_mut()
            .map(|g| (&mut *g.wo, &mut *g.bo));
        linear_bwd(cache.ctx.view(), w.wo, dy, go)
    };

    let mut dq = Array2::from_elem((n, d), S::ZERO);
    let mut dk = Array2::from_elem((n, d), S::ZERO);
    let mut dv = Array2::from_elem((n, d), S::ZERO);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = cache.q.slice(ndarray::s![.., cols.clone()]);
        let kh = cache.k.slice(ndarray::s![.., cols.clone()]);
        let vh = cache.v.slice(ndarray::s![.., cols.clone()]);
        let p = &cache.probs[h];
        let dctx_h = dctx.slice(ndarray::s![.., cols.clone()]);
        let dprobs = S::matmul(dctx_h, vh.t());
        let dvh = S::matmul(p.t(), dctx_h);
        let mut dscores = softmax_bwd(p, &dprobs);
        dscores.mapv_inplace(|s| s.scale(scale));
        let dqh = S::matmul(dscores.view(), kh);
        let dkh = S::matmul(dscores.t(), qh);
        dq.slice_mut(ndarray::s![.., cols.clone()]).assign(&dqh);
        dk.slice_mut(ndarray::s![.., cols.clone()]).assign(&dkh);
        dv.slice_mut(ndarray::s![.., cols]).assign(&dvh);
    }

    let mut dx = {
        let gq = g.as_mut().map(|g| (&mut *g.wq, &mut *g.bq));
        linear_bwd(x, w.wq, dq.view(), gq)
    };
    dx += &{
        let gk = g.as_mut().map(|g| (&mut *g.wk, &mut *g.bk));
        linear_bwd(x, w.wk, dk.view(), gk)
    };
    dx += &{
        let gv = g.as_mut().map(|g| (&mut *g.wv, &mut *g.bv));
        linear_bwd(x, w.wv, dv.view(), gv)
    };
    dx
}

// ---------------------------------------------------------------------------
// Token embedding
// ---------------------------------------------------------------------------

pub fn embedding_fwd<S: Scalar>(tokens: &[u16], table: &Array2<f64>) -> Array2<S> {
    let d = table.ncols();
    let mut y = Array2::from_elem((tokens.len(), d), S::ZERO);
    for (t, &tok) in tokens.iter().enumerate() {
        for j in 0..d {
            y[[t, j]] = S::from_f64(table[[tok as usize, j]]);
        }
    }
    y
}

pub fn embedding_bwd<S: Scalar>(tokens: &[u16], dy: ArrayView2<S>, dtable: &mut Array2<S>) {
    for (t, &tok) in tokens.iter().enumerate() {
        for j in 0..dy.ncols() {
            dtable[[tok as usize, j]] += dy[[t, j]];
        }
    }
}

// ---------------------------------------------------------------------------
// Sinusoidal positional encoding
// ---------------------------------------------------------------------------

/// pe[pos, 2i] = sin(pos · ω_i), pe[pos, 2i+1] = cos(pos · ω_i),
/// ω_i = 10000^(−2i/d).
pub fn positional_encoding(n: usize, d: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((n, d));
    for pos in 0..n {
        for j in 0..d {
            let i = j / 2;
            let omega = (10_000f64).powf(-(2.0 * i as f64) / d as f64);
            let angle = pos as f64 * omega;
            pe[[pos, j]] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// x += c for a constant (tangent-free) matrix c.
pub fn add_const_inplace<S: Scalar>(x: &mut Array2<S>, c: &Array2<f64>) {
    debug_assert_eq!(x.dim(), c.dim());
    for (v, &cc) in x.iter_mut().zip(c.iter()) {
        *v += S::from_f64(cc);
    }
}

// ---------------------------------------------------------------------------
// Length regulator
// ---------------------------------------------------------------------------

/// Repeats row t of x durations[t] times.
pub fn length_regulate<S: Scalar>(x: ArrayView2<S>, durations: &[u32]) -> Array2<S> {
    debug_assert_eq!(x.nrows(), durations.len());
    let total: usize = durations.iter().map(|&d| d as usize).sum();
    let d = x.ncols();
    let mut y = Array2::from_elem((total, d), S::ZERO);
    let mut out_t = 0;
    for (t, &dur) in durations.iter().enumerate() {
        for _ in 0..dur {
            y.row_mut(out_t).assign(&x.row(t));
            out_t += 1;
        }
    }
    y
}

/// Adjoint of the regulator: sums frame gradients back onto their token.
pub fn length_regulate_bwd<S: Scalar>(dy: ArrayView2<S>, durations: &[u32]) -> Array2<S> {
    let d = dy.ncols();
    let mut dx = Array2::from_elem((durations.len(), d), S::ZERO);
    let mut in_t = 0;
    for (t, &dur) in durations.iter().enumerate() {
        for _ in 0..dur {
            for j in 0..d {
                dx[[t, j]] += dy[[in_t, j]];
            }
            in_t += 1;
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

pub fn relu_fwd<S: Scalar>(x: &Array2<S>) -> Array2<S> {
    x.mapv(|v| v.relu())
}

/// dy masked by the sign of the forward input.
pub fn relu_bwd<S: Scalar>(x: &Array2<S>, dy: &Array2<S>) -> Array2<S> {
    let mut dx = dy.clone();
    for (d, &v) in dx.iter_mut().zip(x.iter()) {
        if v.re() <= 0.0 {
            *d = S::ZERO;
        }
    }
    dx
}

pub fn tanh_fwd<S: Scalar>(x: &Array2<S>) -> Array2<S> {
    x.mapv(|v| v.tanh())
}

/// Uses the forward output y: dx = dy ⊙ (1 − y²).
pub fn tanh_bwd<S: Scalar>(y: &Array2<S>, dy: &Array2<S>) -> Array2<S> {
    let mut dx = dy.clone();
    for (d, &v) in dx.iter_mut().zip(y.iter()) {
        *d = *d * (S::ONE - v * v);
    }
    dx
}

// ---------------------------------------------------------------------------
// Dropout (inverted scaling; identity when p = 0)
// ---------------------------------------------------------------------------

/// Mask entries are 0 (dropped) or 1/(1−p) (kept).
pub fn dropout_mask(rng: &mut impl rand::Rng, n: usize, d: usize, p: f64) -> Array2<f64> {
    debug_assert!((0.0..1.0).contains(&p));
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_fn((n, d), |_| {
        if rng.random::<f64>() < p {
            0.0
        } else {
            keep
        }
    })
}

/// Used identically in forward and backward (the mask is its own adjoint).
pub fn apply_mask<S: Scalar>(x: &Array2<S>, mask: &Array2<f64>) -> Array2<S> {
    debug_assert_eq!(x.dim(), mask.dim());
    let mut y = x.clone();
    for (v, &m) in y.iter_mut().zip(mask.iter()) {
        *v = v.scale(m);
    }
    y
}

// ---------------------------------------------------------------------------
// Cross-entropy over logits
// ---------------------------------------------------------------------------

/// Returns (loss, dloss/dlogits) for -log softmax(logits)[target].
pub fn cross_entropy<S: Scalar>(logits: ArrayView1<S>, target: usize) -> (S, Array1<S>) {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.re()));
    let mut sum = S::ZERO;
    let mut exps = Array1::from_elem(logits.len(), S::ZERO);
    for (e, &l) in exps.iter_mut().zip(logits.iter()) {
        *e = (l - S::from_f64(m)).exp();
        sum += *e;
    }
    let log_sum = sum.ln() + S::from_f64(m);
    let loss = log_sum - logits[target];
    let inv = sum.recip();
    let mut dlogits = exps.mapv(|e| e * inv);
    dlogits[target] -= S::ONE;
    (loss, dlogits)
}

/// Mean of per-row means of |a - b| (unused rows impossible: equal shapes).
pub fn mean_abs_diff<S: Scalar>(a: ArrayView2<S>, b: ArrayView2<f64>) -> S {
    debug_assert_eq!(a.dim(), b.dim());
    let mut sum = S::ZERO;
    for (x, &y) in a.iter().zip(b.iter()) {
        sum += (*x - S::from_f64(y)).abs();
    }
    sum.scale(1.0 / a.len() as f64)
}

#[allow(unused_imports)]
pub(crate) use ndarray::s;
