//! Style encoder: speaker branch, prosody branch, and the speaker
//! classifier used by the adversarial loss.
//!
//! The speaker branch (LUT vector → CLN adaptor) is generic over [`Scalar`]
//! because it carries tangents during meta updates. The prosody branch is
//! `f64` only: its parameters are trained solely during pre-training and its
//! output is treated as a constant everywhere else.

use super::{mhsa_views, Classifier, ModelConfig, ProsodyEncoder, SpeakerParams};
use crate::data::MelSpectrogram;
use crate::error::{Error, Result};
use crate::nn::{
    glu_conv_bwd, glu_conv_fwd, linear_bwd, linear_bwd_s, linear_fwd, linear_fwd_s, mhsa_bwd,
    mhsa_fwd, relu_bwd, relu_fwd, GluConvCache, MhsaCache, MhsaGrads,
};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Axis};

/// Per-site modulation produced by one CLN adaptor: rows are sites.
#[derive(Clone, Debug)]
pub struct SpeakerStyle<S: Scalar> {
    pub gamma: Array2<S>,
    pub beta: Array2<S>,
}

/// Adaptor output layout: first M·hidden entries are the concatenated γ
/// rows, the rest the β rows (matches the [1…1, 0…0] bias initialization).
fn split_adaptor_out<S: Scalar>(out: &Array2<S>, m: usize, hidden: usize) -> (Array2<S>, Array2<S>) {
    let mut gamma = Array2::from_elem((m, hidden), S::ZERO);
    let mut beta = Array2::from_elem((m, hidden), S::ZERO);
    let mh = m * hidden;
    for i in 0..m {
        for j in 0..hidden {
            gamma[[i, j]] = out[[0, i * hidden + j]];
            beta[[i, j]] = out[[0, mh + i * hidden + j]];
        }
    }
    (gamma, beta)
}

fn join_adaptor_grad<S: Scalar>(dgamma: &Array2<S>, dbeta: &Array2<S>) -> Array2<S> {
    let (m, hidden) = dgamma.dim();
    let mh = m * hidden;
    let mut dout = Array2::from_elem((1, 2 * mh), S::ZERO);
    for i in 0..m {
        for j in 0..hidden {
            dout[[0, i * hidden + j]] = dgamma[[i, j]];
            dout[[0, mh + i * hidden + j]] = dbeta[[i, j]];
        }
    }
    dout
}

/// Speaker CLN adaptor forward: vec → per-site (γˢ, βˢ).
pub fn speaker_style<S: Scalar>(sp: &SpeakerParams<S>, cfg: &ModelConfig) -> SpeakerStyle<S> {
    let x = sp
        .vec
        .view()
        .into_shape_with_order((1, sp.vec.len()))
        .unwrap();
    let out = linear_fwd_s(x, sp.w.view(), sp.b.view());
    let (gamma, beta) = split_adaptor_out(&out, cfg.m(), cfg.hidden);
    SpeakerStyle { gamma, beta }
}

/// Accumulates adaptor and LUT-vector gradients from per-site (dγ, dβ).
pub fn speaker_style_bwd<S: Scalar>(
    sp: &SpeakerParams<S>,
    dgamma: &Array2<S>,
    dbeta: &Array2<S>,
    grads: &mut SpeakerParams<S>,
) {
    let dout = join_adaptor_grad(dgamma, dbeta);
    let x = sp
        .vec
        .view()
        .into_shape_with_order((1, sp.vec.len()))
        .unwrap();
    let dx = linear_bwd_s(x, sp.w.view(), dout.view(), Some((&mut grads.w, &mut grads.b)));
    for (g, &v) in grads.vec.iter_mut().zip(dx.row(0).iter()) {
        *g += v;
    }
}

/// Prosody branch output: the style vector plus per-site modulation.
#[derive(Clone, Debug)]
pub struct ProsodyStyle {
    pub vec: Array1<f64>,
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
}

/// Intermediates for the prosody-branch backward pass (pre-training only).
pub struct ProsodyCache {
    mel: Array2<f64>,
    s1_pre: Array2<f64>,
    s2_pre: Array2<f64>,
    g1: GluConvCache<f64>,
    g2: GluConvCache<f64>,
    g2_out: Array2<f64>,
    pj: Array2<f64>,
    attn: MhsaCache<f64>,
    frames: usize,
}

/// Reference-mel encoder: spectral processing (2 frame-wise affine+ReLU) →
/// temporal processing (2 gated convs with residual) → projection →
/// self-attention with residual (no positional encoding) → mean over frames.
pub fn prosody_mel_encode(
    p: &ProsodyEncoder<f64>,
    mel: &MelSpectrogram,
    cfg: &ModelConfig,
) -> Result<(Array1<f64>, ProsodyCache)> {
    if mel.bins() != cfg.mel_bins {
        return Err(Error::shape(
            "prosody_mel_encode",
            format!("{} mel bins", cfg.mel_bins),
            format!("{}", mel.bins()),
        ));
    }
    let x = mel.values.clone();
    let s1_pre = linear_fwd::<f64>(x.view(), p.spec1.w.view(), p.spec1.b.view());
    let s1 = relu_fwd(&s1_pre);
    let s2_pre = linear_fwd::<f64>(s1.view(), p.spec2.w.view(), p.spec2.b.view());
    let s2 = relu_fwd(&s2_pre);

    let (g1_raw, g1) = glu_conv_fwd::<f64>(s2.view(), &p.gconv1.w, p.gconv1.b.view());
    let g1_out = &g1_raw + &s2;
    let (g2_raw, g2) = glu_conv_fwd::<f64>(g1_out.view(), &p.gconv2.w, p.gconv2.b.view());
    let g2_out = &g2_raw + &g1_out;

    let pj = linear_fwd::<f64>(g2_out.view(), p.proj.w.view(), p.proj.b.view());
    let (a, attn) = mhsa_fwd::<f64>(pj.view(), &mhsa_views(&p.attn), cfg.prosody_heads);
    let a_res = &a + &pj;
    let vec = a_res.mean_axis(Axis(0)).unwrap();

    Ok((
        vec,
        ProsodyCache {
            mel: x,
            s1_pre,
            s2_pre,
            g1,
            g2,
            g2_out,
            pj,
            attn,
            frames: mel.frames(),
        },
    ))
}

/// Backward through the reference-mel encoder; accumulates into `grads`.
pub fn prosody_mel_encode_bwd(
    p: &ProsodyEncoder<f64>,
    cache: &ProsodyCache,
    dvec: &Array1<f64>,
    cfg: &ModelConfig,
    grads: &mut ProsodyEncoder<f64>,
) {
    let n = cache.frames;
    let scale = 1.0 / n as f64;
    let mut da_res = Array2::zeros((n, dvec.len()));
    for mut row in da_res.rows_mut() {
        for (v, &g) in row.iter_mut().zip(dvec.iter()) {
            *v = g * scale;
        }
    }
    let dpj_attn = mhsa_bwd(
        cache.pj.view(),
        &cache.attn,
        &mhsa_views(&p.attn),
        cfg.prosody_heads,
        da_res.view(),
        Some(MhsaGrads {
            wq: &mut grads.attn.wq,
            bq: &mut grads.attn.bq,
            wk: &mut grads.attn.wk,
            bk: &mut grads.attn.bk,
            wv: &mut grads.attn.wv,
            bv: &mut grads.attn.bv,
            wo: &mut grads.attn.wo,
            bo: &mut grads.attn.bo,
        }),
    );
    let dpj = &dpj_attn + &da_res; // residual

    let dg2_out = linear_bwd(
        cache.g2_out.view(),
        p.proj.w.view(),
        dpj.view(),
        Some((&mut grads.proj.w, &mut grads.proj.b)),
    );
    let dg1_from_conv = glu_conv_bwd(
        &cache.g2,
        &p.gconv2.w,
        dg2_out.view(),
        Some((&mut grads.gconv2.w, &mut grads.gconv2.b)),
    );
    let dg1_out = &dg1_from_conv + &dg2_out; // residual
    let ds2_from_conv = glu_conv_bwd(
        &cache.g1,
        &p.gconv1.w,
        dg1_out.view(),
        Some((&mut grads.gconv1.w, &mut grads.gconv1.b)),
    );
    let ds2 = &ds2_from_conv + &dg1_out;

    let ds2_pre = relu_bwd(&cache.s2_pre, &ds2);
    let s1 = relu_fwd(&cache.s1_pre);
    let ds1 = linear_bwd(
        s1.view(),
        p.spec2.w.view(),
        ds2_pre.view(),
        Some((&mut grads.spec2.w, &mut grads.spec2.b)),
    );
    let ds1_pre = relu_bwd(&cache.s1_pre, &ds1);
    let _dmel = linear_bwd(
        cache.mel.view(),
        p.spec1.w.view(),
        ds1_pre.view(),
        Some((&mut grads.spec1.w, &mut grads.spec1.b)),
    );
}

/// Prosody CLN adaptor on top of the mel encoder.
pub fn prosody_style(
    p: &super::StyleEncoder<f64>,
    mel: &MelSpectrogram,
    cfg: &ModelConfig,
) -> Result<(ProsodyStyle, ProsodyCache)> {
    let (vec, cache) = prosody_mel_encode(&p.prosody_encoder, mel, cfg)?;
    let x = vec.view().into_shape_with_order((1, vec.len())).unwrap();
    let out = linear_fwd::<f64>(x, p.prosody_adaptor.w.view(), p.prosody_adaptor.b.view());
    let (gamma, beta) = split_adaptor_out(&out, cfg.m(), cfg.hidden);
    Ok((ProsodyStyle { vec, gamma, beta }, cache))
}

/// Backward through the prosody adaptor and mel encoder. `dvec_direct`
/// carries gradient reaching the prosody vector without passing the adaptor
/// (orthogonality loss and reversed classifier gradient).
pub fn prosody_style_bwd(
    p: &super::StyleEncoder<f64>,
    style: &ProsodyStyle,
    cache: &ProsodyCache,
    dgamma: &Array2<f64>,
    dbeta: &Array2<f64>,
    dvec_direct: &Array1<f64>,
    cfg: &ModelConfig,
    grads: &mut super::StyleEncoder<f64>,
) {
    let dout = join_adaptor_grad(dgamma, dbeta);
    let x = style
        .vec
        .view()
        .into_shape_with_order((1, style.vec.len()))
        .unwrap();
    let dx = linear_bwd(
        x,
        p.prosody_adaptor.w.view(),
        dout.view(),
        Some((&mut grads.prosody_adaptor.w, &mut grads.prosody_adaptor.b)),
    );
    let dvec = &dx.row(0).to_owned() + dvec_direct;
    prosody_mel_encode_bwd(&p.prosody_encoder, cache, &dvec, cfg, &mut grads.prosody_encoder);
}

/// Speaker classifier on the prosody vector: 2-layer MLP.
pub fn classifier_fwd(
    c: &Classifier<f64>,
    vec: &Array1<f64>,
) -> (Array1<f64>, Array2<f64> /* h1_pre */) {
    let x = vec.view().into_shape_with_order((1, vec.len())).unwrap();
    let h1_pre = linear_fwd::<f64>(x, c.l1.w.view(), c.l1.b.view());
    let h1 = relu_fwd(&h1_pre);
    let logits = linear_fwd::<f64>(h1.view(), c.l2.w.view(), c.l2.b.view());
    (logits.row(0).to_owned(), h1_pre)
}

/// Backward for the classifier; returns d(vec).
pub fn classifier_bwd(
    c: &Classifier<f64>,
    vec: &Array1<f64>,
    h1_pre: &Array2<f64>,
    dlogits: &Array1<f64>,
    grads: &mut Classifier<f64>,
) -> Array1<f64> {
    let h1 = relu_fwd(h1_pre);
    let dl = dlogits
        .view()
        .into_shape_with_order((1, dlogits.len()))
        .unwrap();
    let dh1 = linear_bwd(
        h1.view(),
        c.l2.w.view(),
        dl,
        Some((&mut grads.l2.w, &mut grads.l2.b)),
    );
    let dh1_pre = relu_bwd(h1_pre, &dh1);
    let x = vec.view().into_shape_with_order((1, vec.len())).unwrap();
    let dx = linear_bwd(
        x,
        c.l1.w.view(),
        dh1_pre.view(),
        Some((&mut grads.l1.w, &mut grads.l1.b)),
    );
    dx.row(0).to_owned()
}
