//! Trunk forward and backward passes: text encoder → variance adaptor →
//! mel decoder → postnet, modulated at every FFT block by precomputed style
//! tensors.
//!
//! Generic over [`Scalar`]: trunk weights are always `f64`; activations carry
//! the scalar type so tangents injected through the style tensors flow to the
//! outputs. The backward pass accumulates trunk gradients only when a sink is
//! supplied (meta updates skip that work entirely) and always returns the
//! per-site (dγ, dβ) pair, which is identical for the speaker and prosody
//! halves of each modulation.

use super::style::{ProsodyStyle, SpeakerStyle};
use super::{mhsa_views, FftBlock, ModelConfig, ModelParams, Postnet, Predictor};
use crate::error::{Error, Result};
use crate::nn::{
    add_const_inplace, apply_mask, conv1d_bwd, conv1d_fwd, dropout_mask, embedding_bwd,
    embedding_fwd, layer_norm_affine_bwd, layer_norm_affine_fwd, layer_norm_bwd, layer_norm_fwd,
    length_regulate, length_regulate_bwd, linear_bwd, linear_fwd, mhsa_bwd, mhsa_fwd,
    positional_encoding, relu_bwd, relu_fwd, style_modulate_bwd, style_modulate_fwd, tanh_bwd,
    tanh_fwd, Conv1dCache, LnCache, MhsaCache, MhsaGrads,
};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

/// Execution mode of the variance adaptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    TeacherForced,
    Inference,
}

/// Ground-truth variance targets (teacher forcing).
#[derive(Clone, Copy, Debug)]
pub struct VarianceTargets<'a> {
    pub durations: &'a [u32],
    pub pitch: &'a [f64],
    pub energy: &'a [f64],
}

/// Per-site modulation tensors, speaker and prosody halves. Prosody values
/// are lifted to `S` as constants (they never carry tangents).
#[derive(Clone, Debug)]
pub struct StyleMats<S: Scalar> {
    pub gamma_s: Array2<S>,
    pub beta_s: Array2<S>,
    pub gamma_p: Array2<S>,
    pub beta_p: Array2<S>,
}

impl<S: Scalar> StyleMats<S> {
    pub fn new(speaker: SpeakerStyle<S>, prosody: &ProsodyStyle) -> Self {
        StyleMats {
            gamma_s: speaker.gamma,
            beta_s: speaker.beta,
            gamma_p: prosody.gamma.mapv(S::from_f64),
            beta_p: prosody.beta.mapv(S::from_f64),
        }
    }
}

/// Dropout state threaded through one forward pass (pre-training only).
pub struct DropoutCtx {
    pub rng: ChaCha8Rng,
    pub p: f64,
}

fn maybe_drop<S: Scalar>(
    x: Array2<S>,
    ctx: &mut Option<DropoutCtx>,
) -> (Array2<S>, Option<Array2<f64>>) {
    match ctx {
        Some(c) if c.p > 0.0 => {
            let (n, d) = x.dim();
            let mask = dropout_mask(&mut c.rng, n, d, c.p);
            let y = apply_mask(&x, &mask);
            (y, Some(mask))
        }
        _ => (x, None),
    }
}

pub struct FftCache<S: Scalar> {
    x: Array2<S>,
    attn: MhsaCache<S>,
    attn_mask: Option<Array2<f64>>,
    ln1: LnCache<S>,
    c1: Conv1dCache<S>,
    a1: Array2<S>,
    c2: Conv1dCache<S>,
    ff_mask: Option<Array2<f64>>,
    ln2: LnCache<S>,
}

fn fft_block_fwd<S: Scalar>(
    x: Array2<S>,
    p: &FftBlock<f64>,
    style: &StyleMats<S>,
    site: usize,
    heads: usize,
    eps: f64,
    drop: &mut Option<DropoutCtx>,
) -> (Array2<S>, FftCache<S>) {
    let (a, attn) = mhsa_fwd(x.view(), &mhsa_views(&p.attn), heads);
    let (a, attn_mask) = maybe_drop(a, drop);
    let r1 = &x + &a;
    let (n1, ln1) = layer_norm_affine_fwd(r1.view(), p.ln1.g.view(), p.ln1.b.view(), eps);
    let (a1, c1) = conv1d_fwd(n1.view(), &p.conv1.w, p.conv1.b.view());
    let h1 = relu_fwd(&a1);
    let (c2out, c2) = conv1d_fwd(h1.view(), &p.conv2.w, p.conv2.b.view());
    let (c2out, ff_mask) = maybe_drop(c2out, drop);
    let r2 = &n1 + &c2out;
    let ln2 = layer_norm_fwd(r2.view(), eps);
    let out = style_modulate_fwd(
        ln2.z.view(),
        style.gamma_s.row(site),
        style.beta_s.row(site),
        style.gamma_p.row(site),
        style.beta_p.row(site),
    );
    (
        out,
        FftCache {
            x,
            attn,
            attn_mask,
            ln1,
            c1,
            a1,
            c2,
            ff_mask,
            ln2,
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn fft_block_bwd<S: Scalar>(
    cache: &FftCache<S>,
    p: &FftBlock<f64>,
    style: &StyleMats<S>,
    site: usize,
    heads: usize,
    dy: ArrayView2<S>,
    mut grads: Option<&mut FftBlock<S>>,
    dgamma: &mut Array2<S>,
    dbeta: &mut Array2<S>,
) -> Array2<S> {
    let (dz, dg, db) = style_modulate_bwd(
        cache.ln2.z.view(),
        style.gamma_s.row(site),
        style.gamma_p.row(site),
        dy,
    );
    for (acc, &v) in dgamma.row_mut(site).iter_mut().zip(dg.iter()) {
        *acc += v;
    }
    for (acc, &v) in dbeta.row_mut(site).iter_mut().zip(db.iter()) {
        *acc += v;
    }
    let dr2 = layer_norm_bwd(&cache.ln2, dz.view());
    let dc2 = match &cache.ff_mask {
        Some(m) => apply_mask(&dr2, m),
        None => dr2.clone(),
    };
    let dh1 = conv1d_bwd(
        &cache.c2,
        &p.conv2.w,
        dc2.view(),
        grads.as_mut().map(|g| (&mut g.conv2.w, &mut g.conv2.b)),
    );
    let da1 = relu_bwd(&cache.a1, &dh1);
    let mut dn1 = conv1d_bwd(
        &cache.c1,
        &p.conv1.w,
        da1.view(),
        grads.as_mut().map(|g| (&mut g.conv1.w, &mut g.conv1.b)),
    );
    dn1 += &dr2; // conv feed-forward residual
    let dr1 = layer_norm_affine_bwd(
        &cache.ln1,
        p.ln1.g.view(),
        dn1.view(),
        grads.as_mut().map(|g| (&mut g.ln1.g, &mut g.ln1.b)),
    );
    let da = match &cache.attn_mask {
        Some(m) => apply_mask(&dr1, m),
        None => dr1.clone(),
    };
    let attn_grads = grads.as_mut().map(|g| MhsaGrads {
        wq: &mut g.attn.wq,
        bq: &mut g.attn.bq,
        wk: &mut g.attn.wk,
        bk: &mut g.attn.bk,
        wv: &mut g.attn.wv,
        bv: &mut g.attn.bv,
        wo: &mut g.attn.wo,
        bo: &mut g.attn.bo,
    });
    let dx_attn = mhsa_bwd(
        cache.x.view(),
        &cache.attn,
        &mhsa_views(&p.attn),
        heads,
        da.view(),
        attn_grads,
    );
    &dr1 + &dx_attn // attention residual
}

struct PredCache<S: Scalar> {
    c1: Conv1dCache<S>,
    a1: Array2<S>,
    c2: Conv1dCache<S>,
    a2: Array2<S>,
    lin_in: Array2<S>,
}

fn predictor_fwd<S: Scalar>(p: &Predictor<f64>, h: ArrayView2<S>) -> (Array1<S>, PredCache<S>) {
    let (a1, c1) = conv1d_fwd(h, &p.conv1.w, p.conv1.b.view());
    let h1 = relu_fwd(&a1);
    let (a2, c2) = conv1d_fwd(h1.view(), &p.conv2.w, p.conv2.b.view());
    let lin_in = relu_fwd(&a2);
    let out = linear_fwd(lin_in.view(), p.out.w.view(), p.out.b.view());
    (
        out.column(0).to_owned(),
        PredCache {
            c1,
            a1,
            c2,
            a2,
            lin_in,
        },
    )
}

fn predictor_bwd<S: Scalar>(
    p: &Predictor<f64>,
    cache: &PredCache<S>,
    dout: ArrayView1<S>,
    mut grads: Option<&mut Predictor<S>>,
) -> Array2<S> {
    let dcol = dout.insert_axis(Axis(1));
    let dlin_in = linear_bwd(
        cache.lin_in.view(),
        p.out.w.view(),
        dcol,
        grads.as_mut().map(|g| (&mut g.out.w, &mut g.out.b)),
    );
    let da2 = relu_bwd(&cache.a2, &dlin_in);
    let dh1 = conv1d_bwd(
        &cache.c2,
        &p.conv2.w,
        da2.view(),
        grads.as_mut().map(|g| (&mut g.conv2.w, &mut g.conv2.b)),
    );
    let da1 = relu_bwd(&cache.a1, &dh1);
    conv1d_bwd(
        &cache.c1,
        &p.conv1.w,
        da1.view(),
        grads.as_mut().map(|g| (&mut g.conv1.w, &mut g.conv1.b)),
    )
}

/// Maps a value to its linear quantization bin, clamped to the range.
pub fn quantize(v: f64, range: (f64, f64), bins: usize) -> usize {
    let x = (v - range.0) / (range.1 - range.0);
    let idx = (x * bins as f64).floor();
    idx.clamp(0.0, bins as f64 - 1.0) as usize
}

struct VarCache<S: Scalar> {
    dur: PredCache<S>,
    pitch: PredCache<S>,
    energy: PredCache<S>,
    pitch_idx: Vec<usize>,
    energy_idx: Vec<usize>,
    durations: Vec<u32>,
}

struct PrenetCache<S: Scalar> {
    c1: Conv1dCache<S>,
    a1: Array2<S>,
    c2: Conv1dCache<S>,
    a2: Array2<S>,
    lin_in: Array2<S>,
}

struct PostnetCache<S: Scalar> {
    convs: Vec<Conv1dCache<S>>,
    /// tanh outputs of every layer but the last.
    acts: Vec<Array2<S>>,
}

fn postnet_fwd<S: Scalar>(raw: &Array2<S>, p: &Postnet<f64>) -> (Array2<S>, PostnetCache<S>) {
    let last = p.convs.len() - 1;
    let mut x = raw.clone();
    let mut convs = Vec::with_capacity(p.convs.len());
    let mut acts = Vec::with_capacity(last);
    for (i, c) in p.convs.iter().enumerate() {
        let (y, cache) = conv1d_fwd(x.view(), &c.w, c.b.view());
        convs.push(cache);
        x = if i < last {
            let t = tanh_fwd(&y);
            acts.push(t.clone());
            t
        } else {
            y
        };
    }
    (x, PostnetCache { convs, acts })
}

fn postnet_bwd<S: Scalar>(
    cache: &PostnetCache<S>,
    p: &Postnet<f64>,
    dy: ArrayView2<S>,
    mut grads: Option<&mut Postnet<S>>,
) -> Array2<S> {
    let last = p.convs.len() - 1;
    let mut d = dy.to_owned();
    for i in (0..=last).rev() {
        if i < last {
            d = tanh_bwd(&cache.acts[i], &d);
        }
        d = conv1d_bwd(
            &cache.convs[i],
            &p.convs[i].w,
            d.view(),
            grads.as_mut().map(|g| {
                let c = &mut g.convs[i];
                (&mut c.w, &mut c.b)
            }),
        );
    }
    d
}

/// Trunk outputs: spectrogram pair plus per-token variance predictions.
pub struct TrunkOut<S: Scalar> {
    pub raw: Array2<S>,
    pub final_mel: Array2<S>,
    /// Predicted log durations per token.
    pub log_duration: Array1<S>,
    pub pitch: Array1<S>,
    pub energy: Array1<S>,
    /// Durations used for expansion (targets in teacher forcing, rounded
    /// predictions in inference).
    pub durations: Vec<u32>,
}

pub struct TrunkCache<S: Scalar> {
    tokens: Vec<u16>,
    prenet: PrenetCache<S>,
    enc: Vec<FftCache<S>>,
    var: VarCache<S>,
    dec: Vec<FftCache<S>>,
    dec_out: Array2<S>,
    post: PostnetCache<S>,
}

/// Cap on predicted log-durations before exponentiation (numerical safety;
/// never binds on a sanely trained model).
const LOG_DURATION_CAP: f64 = 6.0;

#[allow(clippy::too_many_arguments)]
pub fn trunk_forward<S: Scalar>(
    params: &ModelParams<f64>,
    style: &StyleMats<S>,
    tokens: &[u16],
    mode: Mode,
    targets: Option<&VarianceTargets<'_>>,
    cfg: &ModelConfig,
    drop: &mut Option<DropoutCtx>,
) -> Result<(TrunkOut<S>, TrunkCache<S>)> {
    if tokens.is_empty() {
        return Err(Error::Data("empty token sequence".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.alphabet) {
        return Err(Error::Lookup(format!(
            "token {bad} out of alphabet range {}",
            cfg.alphabet
        )));
    }
    let n = tokens.len();
    let m = cfg.m();
    if style.gamma_s.dim() != (m, cfg.hidden) {
        return Err(Error::shape(
            "style tensors",
            format!("[{m}, {}]", cfg.hidden),
            format!("{:?}", style.gamma_s.dim()),
        ));
    }
    let t = match (mode, targets) {
        (Mode::TeacherForced, Some(t)) => {
            if t.durations.len() != n || t.pitch.len() != n || t.energy.len() != n {
                return Err(Error::shape(
                    "variance targets",
                    format!("{n} per-token targets"),
                    format!(
                        "{}/{}/{} (durations/pitch/energy)",
                        t.durations.len(),
                        t.pitch.len(),
                        t.energy.len()
                    ),
                ));
            }
            if t.durations.iter().any(|&d| d == 0) {
                return Err(Error::Data("zero-frame duration target".into()));
            }
            Some(t)
        }
        (Mode::TeacherForced, None) => {
            return Err(Error::Config("teacher forcing requires variance targets".into()))
        }
        (Mode::Inference, _) => None,
    };

    // --- text encoder ---
    let emb = embedding_fwd::<S>(tokens, &params.embedding);
    let (a1, c1) = conv1d_fwd(emb.view(), &params.prenet.conv1.w, params.prenet.conv1.b.view());
    let h1 = relu_fwd(&a1);
    let (a2, c2) = conv1d_fwd(h1.view(), &params.prenet.conv2.w, params.prenet.conv2.b.view());
    let lin_in = relu_fwd(&a2);
    let lin = linear_fwd(lin_in.view(), params.prenet.out.w.view(), params.prenet.out.b.view());
    let mut x = &emb + &lin;
    add_const_inplace(&mut x, &positional_encoding(n, cfg.hidden));

    let mut enc = Vec::with_capacity(cfg.enc_blocks);
    for (i, blk) in params.encoder.iter().enumerate() {
        let (y, cache) = fft_block_fwd(x, blk, style, i, cfg.heads, cfg.ln_eps, drop);
        x = y;
        enc.push(cache);
    }
    let h_enc = x;

    // --- variance adaptor ---
    let (log_duration, dur_cache) = predictor_fwd(&params.variance.duration, h_enc.view());
    let (pitch, pitch_cache) = predictor_fwd(&params.variance.pitch, h_enc.view());
    let (energy, energy_cache) = predictor_fwd(&params.variance.energy, h_enc.view());

    let (durations, pitch_vals, energy_vals): (Vec<u32>, Vec<f64>, Vec<f64>) = match t {
        Some(t) => (
            t.durations.to_vec(),
            t.pitch.to_vec(),
            t.energy.to_vec(),
        ),
        None => (
            log_duration
                .iter()
                .map(|v| (v.re().min(LOG_DURATION_CAP).exp().round() as u32).max(1))
                .collect(),
            pitch.iter().map(|v| v.re()).collect(),
            energy.iter().map(|v| v.re()).collect(),
        ),
    };
    let pitch_idx: Vec<usize> = pitch_vals
        .iter()
        .map(|&v| quantize(v, cfg.pitch_range, cfg.va_bins))
        .collect();
    let energy_idx: Vec<usize> = energy_vals
        .iter()
        .map(|&v| quantize(v, cfg.energy_range, cfg.va_bins))
        .collect();

    let mut h2 = h_enc;
    for (tt, (&pi, &ei)) in pitch_idx.iter().zip(energy_idx.iter()).enumerate() {
        for j in 0..cfg.hidden {
            h2[[tt, j]] += S::from_f64(
                params.variance.pitch_embed[[pi, j]] + params.variance.energy_embed[[ei, j]],
            );
        }
    }
    let expanded = length_regulate(h2.view(), &durations);
    let frames = expanded.nrows();

    // --- mel decoder ---
    let mut x = expanded;
    add_const_inplace(&mut x, &positional_encoding(frames, cfg.hidden));
    let mut dec = Vec::with_capacity(cfg.dec_blocks);
    for (i, blk) in params.decoder.iter().enumerate() {
        let (y, cache) = fft_block_fwd(x, blk, style, cfg.enc_blocks + i, cfg.heads, cfg.ln_eps, drop);
        x = y;
        dec.push(cache);
    }
    let dec_out = x;
    let raw = linear_fwd(dec_out.view(), params.mel_proj.w.view(), params.mel_proj.b.view());
    let (post, post_cache) = postnet_fwd(&raw, &params.postnet);
    let final_mel = &raw + &post;

    Ok((
        TrunkOut {
            raw,
            final_mel,
            log_duration,
            pitch,
            energy,
            durations: durations.clone(),
        },
        TrunkCache {
            tokens: tokens.to_vec(),
            prenet: PrenetCache {
                c1,
                a1,
                c2,
                a2,
                lin_in,
            },
            enc,
            var: VarCache {
                dur: dur_cache,
                pitch: pitch_cache,
                energy: energy_cache,
                pitch_idx,
                energy_idx,
                durations,
            },
            dec,
            dec_out,
            post: post_cache,
        },
    ))
}

/// Backward through the trunk. Accumulates trunk-weight gradients into
/// `trunk_grads` when given; returns the per-site (dγ, dβ) accumulated over
/// both encoder and decoder modulation sites (valid for the speaker and
/// prosody halves alike). Only meaningful for teacher-forced caches.
#[allow(clippy::too_many_arguments)]
pub fn trunk_backward<S: Scalar>(
    params: &ModelParams<f64>,
    style: &StyleMats<S>,
    cache: &TrunkCache<S>,
    cfg: &ModelConfig,
    d_raw: ArrayView2<S>,
    d_final: ArrayView2<S>,
    d_log_duration: ArrayView1<S>,
    d_pitch: ArrayView1<S>,
    d_energy: ArrayView1<S>,
    mut trunk_grads: Option<&mut ModelParams<S>>,
) -> (Array2<S>, Array2<S>) {
    let m = cfg.m();
    let mut dgamma = Array2::from_elem((m, cfg.hidden), S::ZERO);
    let mut dbeta = Array2::from_elem((m, cfg.hidden), S::ZERO);

    // final = raw + postnet(raw)
    let d_post = postnet_bwd(
        &cache.post,
        &params.postnet,
        d_final,
        trunk_grads.as_mut().map(|g| &mut g.postnet),
    );
    let mut draw = d_raw.to_owned();
    draw += &d_final;
    draw += &d_post;

    let mut dx = linear_bwd(
        cache.dec_out.view(),
        params.mel_proj.w.view(),
        draw.view(),
        trunk_grads
            .as_mut()
            .map(|g| (&mut g.mel_proj.w, &mut g.mel_proj.b)),
    );
    for (i, bc) in cache.dec.iter().enumerate().rev() {
        dx = fft_block_bwd(
            bc,
            &params.decoder[i],
            style,
            cfg.enc_blocks + i,
            cfg.heads,
            dx.view(),
            trunk_grads.as_mut().map(|g| &mut g.decoder[i]),
            &mut dgamma,
            &mut dbeta,
        );
    }

    // variance adaptor (positional encoding is constant: gradient passes)
    let dh2 = length_regulate_bwd(dx.view(), &cache.var.durations);
    if let Some(g) = trunk_grads.as_mut() {
        for (tt, (&pi, &ei)) in cache
            .var
            .pitch_idx
            .iter()
            .zip(cache.var.energy_idx.iter())
            .enumerate()
        {
            for j in 0..cfg.hidden {
                g.variance.pitch_embed[[pi, j]] += dh2[[tt, j]];
                g.variance.energy_embed[[ei, j]] += dh2[[tt, j]];
            }
        }
    }
    let mut dh = dh2;
    dh += &predictor_bwd(
        &params.variance.duration,
        &cache.var.dur,
        d_log_duration,
        trunk_grads.as_mut().map(|g| &mut g.variance.duration),
    );
    dh += &predictor_bwd(
        &params.variance.pitch,
        &cache.var.pitch,
        d_pitch,
        trunk_grads.as_mut().map(|g| &mut g.variance.pitch),
    );
    dh += &predictor_bwd(
        &params.variance.energy,
        &cache.var.energy,
        d_energy,
        trunk_grads.as_mut().map(|g| &mut g.variance.energy),
    );

    let mut dx = dh;
    for (i, bc) in cache.enc.iter().enumerate().rev() {
        dx = fft_block_bwd(
            bc,
            &params.encoder[i],
            style,
            i,
            cfg.heads,
            dx.view(),
            trunk_grads.as_mut().map(|g| &mut g.encoder[i]),
            &mut dgamma,
            &mut dbeta,
        );
    }

    // prenet: out = emb + linear(relu(conv2(relu(conv1(emb)))))
    let d_pre_out = dx;
    let d_lin_in = linear_bwd(
        cache.prenet.lin_in.view(),
        params.prenet.out.w.view(),
        d_pre_out.view(),
        trunk_grads
            .as_mut()
            .map(|g| (&mut g.prenet.out.w, &mut g.prenet.out.b)),
    );
    let da2 = relu_bwd(&cache.prenet.a2, &d_lin_in);
    let dh1 = conv1d_bwd(
        &cache.prenet.c2,
        &params.prenet.conv2.w,
        da2.view(),
        trunk_grads
            .as_mut()
            .map(|g| (&mut g.prenet.conv2.w, &mut g.prenet.conv2.b)),
    );
    let da1 = relu_bwd(&cache.prenet.a1, &dh1);
    let mut d_emb = conv1d_bwd(
        &cache.prenet.c1,
        &params.prenet.conv1.w,
        da1.view(),
        trunk_grads
            .as_mut()
            .map(|g| (&mut g.prenet.conv1.w, &mut g.prenet.conv1.b)),
    );
    d_emb += &d_pre_out; // prenet residual
    if let Some(g) = trunk_grads.as_mut() {
        embedding_bwd(&cache.tokens, d_emb.view(), &mut g.embedding);
    }

    (dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::super::{
        speaker_params_of, speaker_style, speaker_style_bwd, tiny_cfg, zero_params, ModelParams,
        SpeakerParams,
    };
    use super::*;
    use crate::params::{FlatIndex, ParamOps};
    use crate::rng::{child_rng, fill_normal};
    use crate::scalar::Dual;

    fn neutral_prosody_style(cfg: &ModelConfig) -> ProsodyStyle {
        ProsodyStyle {
            vec: Array1::zeros(cfg.style_dim),
            gamma: Array2::ones((cfg.m(), cfg.hidden)),
            beta: Array2::zeros((cfg.m(), cfg.hidden)),
        }
    }

    fn random_style<S: Scalar>(cfg: &ModelConfig, seed: u64) -> StyleMats<S> {
        let mut rng = child_rng(seed, "style");
        let m = cfg.m();
        let mut mk = |std: f64, base: f64| {
            let mut a = Array2::zeros((m, cfg.hidden));
            fill_normal(&mut rng, a.as_slice_mut().unwrap(), base, std);
            a.mapv(S::from_f64)
        };
        StyleMats {
            gamma_s: mk(0.3, 1.0),
            beta_s: mk(0.3, 0.0),
            gamma_p: mk(0.3, 1.0),
            beta_p: mk(0.3, 0.0),
        }
    }

    fn targets_fixture(n: usize) -> (Vec<u32>, Vec<f64>, Vec<f64>) {
        let durations: Vec<u32> = (0..n).map(|i| 1 + (i % 3) as u32).collect();
        let pitch: Vec<f64> = (0..n).map(|i| -0.8 + 0.3 * i as f64).collect();
        let energy: Vec<f64> = (0..n).map(|i| 0.6 + 0.1 * i as f64).collect();
        (durations, pitch, energy)
    }

    #[test]
    fn teacher_forced_shapes_match_targets() {
        let cfg = tiny_cfg();
        let p = ModelParams::init(&cfg, 2, &mut child_rng(0, "init")).unwrap();
        let style = random_style::<f64>(&cfg, 1);
        let tokens = [1u16, 4, 2, 7];
        let (durations, pitch, energy) = targets_fixture(4);
        let t = VarianceTargets {
            durations: &durations,
            pitch: &pitch,
            energy: &energy,
        };
        let (out, _) = trunk_forward(
            &p,
            &style,
            &tokens,
            Mode::TeacherForced,
            Some(&t),
            &cfg,
            &mut None,
        )
        .unwrap();
        let frames: usize = durations.iter().map(|&d| d as usize).sum();
        assert_eq!(out.raw.dim(), (frames, cfg.mel_bins));
        assert_eq!(out.final_mel.dim(), (frames, cfg.mel_bins));
        assert_eq!(out.log_duration.len(), 4);
        assert_eq!(out.durations, durations);
        assert!(out.final_mel.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_token_works_and_inference_is_finite() {
        let cfg = tiny_cfg();
        let p = ModelParams::init(&cfg, 2, &mut child_rng(1, "init")).unwrap();
        let style = random_style::<f64>(&cfg, 2);
        let (out, _) =
            trunk_forward(&p, &style, &[3u16], Mode::Inference, None, &cfg, &mut None).unwrap();
        assert!(out.durations.iter().all(|&d| d >= 1));
        let frames: usize = out.durations.iter().map(|&d| d as usize).sum();
        assert_eq!(out.raw.nrows(), frames);
        assert!(out.final_mel.iter().all(|v| v.is_finite()));
        let norm: f64 = out.final_mel.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e4, "untrained output norm {norm}");
    }

    #[test]
    fn error_paths() {
        let cfg = tiny_cfg();
        let p = ModelParams::init(&cfg, 2, &mut child_rng(2, "init")).unwrap();
        let style = random_style::<f64>(&cfg, 3);
        // token out of range
        assert!(trunk_forward(&p, &style, &[99u16], Mode::Inference, None, &cfg, &mut None)
            .is_err());
        // teacher forcing without targets
        assert!(
            trunk_forward(&p, &style, &[1u16], Mode::TeacherForced, None, &cfg, &mut None)
                .is_err()
        );
        // misaligned targets
        let t = VarianceTargets {
            durations: &[1, 2],
            pitch: &[0.0],
            energy: &[1.0],
        };
        assert!(trunk_forward(
            &p,
            &style,
            &[1u16],
            Mode::TeacherForced,
            Some(&t),
            &cfg,
            &mut None
        )
        .is_err());
    }

    #[test]
    fn zeroed_postnet_makes_final_equal_raw() {
        let cfg = tiny_cfg();
        let mut p = ModelParams::init(&cfg, 2, &mut child_rng(3, "init")).unwrap();
        zero_params::<f64>(&mut p.postnet);
        let style = random_style::<f64>(&cfg, 4);
        let (durations, pitch, energy) = targets_fixture(3);
        let t = VarianceTargets {
            durations: &durations,
            pitch: &pitch,
            energy: &energy,
        };
        let (out, _) = trunk_forward(
            &p,
            &style,
            &[0u16, 5, 9],
            Mode::TeacherForced,
            Some(&t),
            &cfg,
            &mut None,
        )
        .unwrap();
        for (a, b) in out.final_mel.iter().zip(out.raw.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn different_styles_give_different_outputs() {
        let cfg = tiny_cfg();
        let p = ModelParams::init(&cfg, 2, &mut child_rng(4, "init")).unwrap();
        let s1 = random_style::<f64>(&cfg, 5);
        let mut s2 = s1.clone();
        s2.gamma_s[[0, 0]] += 0.5;
        let (durations, pitch, energy) = targets_fixture(3);
        let t = VarianceTargets {
            durations: &durations,
            pitch: &pitch,
            energy: &energy,
        };
        let run = |s: &StyleMats<f64>| {
            trunk_forward(&p, s, &[2u16, 2, 2], Mode::TeacherForced, Some(&t), &cfg, &mut None)
                .unwrap()
                .0
        };
        let o1 = run(&s1);
        let o2 = run(&s2);
        assert_ne!(o1.final_mel, o2.final_mel);
    }

    #[test]
    fn quantize_clamps_and_bins() {
        assert_eq!(quantize(-10.0, (-1.0, 1.0), 4), 0);
        assert_eq!(quantize(10.0, (-1.0, 1.0), 4), 3);
        assert_eq!(quantize(-0.9, (-1.0, 1.0), 4), 0);
        assert_eq!(quantize(-0.4, (-1.0, 1.0), 4), 1);
        assert_eq!(quantize(0.1, (-1.0, 1.0), 4), 2);
        assert_eq!(quantize(0.9, (-1.0, 1.0), 4), 3);
    }

    /// Scalar training loss over the trunk with fixed random projections;
    /// smooth in every argument so finite differences are reliable.
    fn projection_loss(
        p: &ModelParams<f64>,
        sp: &SpeakerParams<f64>,
        cfg: &ModelConfig,
        tokens: &[u16],
        t: &VarianceTargets<'_>,
        prosody: &ProsodyStyle,
        lw: &ProjWeights,
    ) -> f64 {
        let style = StyleMats::new(speaker_style(sp, cfg), prosody);
        let (out, _) = trunk_forward(
            p,
            &style,
            tokens,
            Mode::TeacherForced,
            Some(t),
            cfg,
            &mut None,
        )
        .unwrap();
        let mut l = 0.0;
        l += out.raw.iter().zip(lw.raw.iter()).map(|(a, b)| a * b).sum::<f64>();
        l += out
            .final_mel
            .iter()
            .zip(lw.final_mel.iter())
            .map(|(a, b)| a * b)
            .sum::<f64>();
        l += out
            .log_duration
            .iter()
            .zip(lw.dur.iter())
            .map(|(a, b)| a * b)
            .sum::<f64>();
        l += out.pitch.iter().zip(lw.pitch.iter()).map(|(a, b)| a * b).sum::<f64>();
        l += out.energy.iter().zip(lw.energy.iter()).map(|(a, b)| a * b).sum::<f64>();
        l
    }

    struct ProjWeights {
        raw: Array2<f64>,
        final_mel: Array2<f64>,
        dur: Array1<f64>,
        pitch: Array1<f64>,
        energy: Array1<f64>,
    }

    fn proj_weights(rng: &mut impl rand::Rng, frames: usize, bins: usize, n: usize) -> ProjWeights {
        let mut mk2 = |r: usize, c: usize| {
            let mut a = Array2::zeros((r, c));
            fill_normal(rng, a.as_slice_mut().unwrap(), 0.0, 1.0);
            a
        };
        let raw = mk2(frames, bins);
        let final_mel = mk2(frames, bins);
        let mut mk1 = |len: usize| {
            let mut a = Array1::zeros(len);
            fill_normal(rng, a.as_slice_mut().unwrap(), 0.0, 1.0);
            a
        };
        ProjWeights {
            raw,
            final_mel,
            dur: mk1(n),
            pitch: mk1(n),
            energy: mk1(n),
        }
    }

    #[test]
    fn full_trunk_gradients_match_fd() {
        let cfg = tiny_cfg();
        let mut p = ModelParams::init(&cfg, 2, &mut child_rng(6, "init")).unwrap();
        let mut sp = speaker_params_of(&p, 0).unwrap();
        let mut rng = child_rng(6, "fd");
        fill_normal(&mut rng, sp.w.as_slice_mut().unwrap(), 0.0, 0.2);
        let prosody = neutral_prosody_style(&cfg);
        let tokens = [1u16, 7, 3];
        let (durations, pitch, energy) = targets_fixture(3);
        let t = VarianceTargets {
            durations: &durations,
            pitch: &pitch,
            energy: &energy,
        };
        let frames: usize = durations.iter().map(|&d| d as usize).sum();
        let lw = proj_weights(&mut rng, frames, cfg.mel_bins, 3);

        // analytic gradients
        let style = StyleMats::new(speaker_style(&sp, &cfg), &prosody);
        let (out, cache) = trunk_forward(
            &p,
            &style,
            &tokens,
            Mode::TeacherForced,
            Some(&t),
            &cfg,
            &mut None,
        )
        .unwrap();
        assert_eq!(out.raw.dim(), lw.raw.dim());
        let mut grads = p.clone();
        zero_params::<f64>(&mut grads);
        let (dgamma, dbeta) = trunk_backward(
            &p,
            &style,
            &cache,
            &cfg,
            lw.raw.view(),
            lw.final_mel.view(),
            lw.dur.view(),
            lw.pitch.view(),
            lw.energy.view(),
            Some(&mut grads),
        );
        let mut sp_grads = sp.clone();
        zero_params::<f64>(&mut sp_grads);
        speaker_style_bwd(&sp, &dgamma, &dbeta, &mut sp_grads);

        // FD over a spread of trunk parameters (one entry per tensor kind)
        let idx = FlatIndex::build(&p);
        let flat0 = idx.pack(&p);
        let gflat = idx.pack(&grads);
        let spots = [
            ("embedding", 3usize),
            ("prenet.conv1.w", 10),
            ("prenet.out.w", 5),
            ("encoder.0.attn.wq", 7),
            ("encoder.0.ln1.g", 2),
            ("encoder.0.conv1.w", 20),
            ("variance.duration.out.w", 1),
            ("variance.pitch.conv1.b", 0),
            ("variance.pitch_embed", 9),
            ("variance.energy_embed", 9),
            ("decoder.0.attn.wo", 11),
            ("decoder.0.conv2.b", 3),
            ("mel_proj.w", 14),
            ("postnet.convs.0.w", 6),
            ("postnet.convs.2.w", 6),
        ];
        for (name, off) in spots {
            let e = idx.entry(name).unwrap();
            assert!(off < e.len, "{name} offset");
            let gi = e.offset + off;
            let h = 1e-6 * (1.0 + flat0[gi].abs());
            let mut flat = flat0.clone();
            flat[gi] = flat0[gi] + h;
            idx.unpack(&mut p, &flat);
            let fp = projection_loss(&p, &sp, &cfg, &tokens, &t, &prosody, &lw);
            flat[gi] = flat0[gi] - h;
            idx.unpack(&mut p, &flat);
            let fm = projection_loss(&p, &sp, &cfg, &tokens, &t, &prosody, &lw);
            flat[gi] = flat0[gi];
            idx.unpack(&mut p, &flat);
            let fd = (fp - fm) / (2.0 * h);
            let denom = fd.abs().max(gflat[gi].abs()).max(1e-6);
            assert!(
                (fd - gflat[gi]).abs() / denom < 1e-4,
                "{name}: fd {fd} vs analytic {}",
                gflat[gi]
            );
        }

        // FD over speaker parameters (vector + adaptor), through speaker_style
        for i in [0usize, 3, 7] {
            let h = 1e-6;
            let orig = sp.vec[i];
            sp.vec[i] = orig + h;
            let fp = projection_loss(&p, &sp, &cfg, &tokens, &t, &prosody, &lw);
            sp.vec[i] = orig - h;
            let fm = projection_loss(&p, &sp, &cfg, &tokens, &t, &prosody, &lw);
            sp.vec[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let denom = fd.abs().max(sp_grads.vec[i].abs()).max(1e-6);
            assert!(
                (fd - sp_grads.vec[i]).abs() / denom < 1e-4,
                "sp.vec[{i}]: fd {fd} vs {}",
                sp_grads.vec[i]
            );
        }
        for (r, c) in [(0usize, 0usize), (9, 4)] {
            let h = 1e-6;
            let orig = sp.w[[r, c]];
            sp.w[[r, c]] = orig + h;
            let fp = projection_loss(&p, &sp, &cfg, &tokens, &t, &prosody, &lw);
            sp.w[[r, c]] = orig - h;
            let fm = projection_loss(&p, &sp, &cfg, &tokens, &t, &prosody, &lw);
            sp.w[[r, c]] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let denom = fd.abs().max(sp_grads.w[[r, c]].abs()).max(1e-6);
            assert!(
                (fd - sp_grads.w[[r, c]]).abs() / denom < 1e-4,
                "sp.w[{r},{c}]: fd {fd} vs {}",
                sp_grads.w[[r, c]]
            );
        }
    }

    /// Dual-number run agrees with the f64 run in real parts, and the dual
    /// parts of the speaker gradient equal the finite difference of that
    /// gradient along the tangent (i.e. an exact Hessian-vector product
    /// through the whole trunk).
    #[test]
    fn dual_trunk_matches_f64_and_hvp_is_exact() {
        let cfg = tiny_cfg();
        let p = ModelParams::init(&cfg, 2, &mut child_rng(7, "init")).unwrap();
        let mut sp = speaker_params_of(&p, 0).unwrap();
        let mut rng = child_rng(7, "fd");
        fill_normal(&mut rng, sp.w.as_slice_mut().unwrap(), 0.0, 0.2);
        let prosody = neutral_prosody_style(&cfg);
        let tokens = [2u16, 8];
        let (durations, pitch, energy) = targets_fixture(2);
        let t = VarianceTargets {
            durations: &durations,
            pitch: &pitch,
            energy: &energy,
        };
        let frames: usize = durations.iter().map(|&d| d as usize).sum();
        let lw = proj_weights(&mut rng, frames, cfg.mel_bins, 2);

        // gradient of the projection loss wrt speaker params, generic in S
        fn sp_grad<S: Scalar>(
            p: &ModelParams<f64>,
            sp: &SpeakerParams<S>,
            cfg: &ModelConfig,
            tokens: &[u16],
            t: &VarianceTargets<'_>,
            prosody: &ProsodyStyle,
            lw: &ProjWeights,
        ) -> SpeakerParams<S> {
            let style = StyleMats::new(speaker_style(sp, cfg), prosody);
            let (_, cache) = trunk_forward(
                p,
                &style,
                tokens,
                Mode::TeacherForced,
                Some(t),
                cfg,
                &mut None,
            )
            .unwrap();
            let (dgamma, dbeta) = trunk_backward(
                p,
                &style,
                &cache,
                cfg,
                lw.raw.mapv(S::from_f64).view(),
                lw.final_mel.mapv(S::from_f64).view(),
                lw.dur.mapv(S::from_f64).view(),
                lw.pitch.mapv(S::from_f64).view(),
                lw.energy.mapv(S::from_f64).view(),
                None,
            );
            let mut g = sp.clone();
            zero_params::<S>(&mut g);
            speaker_style_bwd(sp, &dgamma, &dbeta, &mut g);
            g
        }

        let g64 = sp_grad::<f64>(&p, &sp, &cfg, &tokens, &t, &prosody, &lw);

        // tangent direction over speaker params
        let mut tangent = sp.clone();
        tangent.visit_mut("", &mut |_, mut tr| {
            tr.for_each_mut(|v| *v = crate::rng::normal(&mut rng))
        });
        let mut pairs: Vec<(f64, f64)> = Vec::new();
        {
            // zip tangent with sp into a dual container
            let spd: SpeakerParams<Dual> = {
                let mut flat_t = Vec::new();
                tangent.visit("", &mut |_, tr| tr.for_each(|v| flat_t.push(v)));
                let mut i = 0;
                sp.map_scalar(&mut |v| {
                    let d = Dual::new(v, flat_t[i]);
                    i += 1;
                    d
                })
            };
            let gd = sp_grad::<Dual>(&p, &spd, &cfg, &tokens, &t, &prosody, &lw);
            // real parts equal the f64 gradient
            let mut flat_g64 = Vec::new();
            g64.visit("", &mut |_, tr| tr.for_each(|v| flat_g64.push(v)));
            let mut flat_gd = Vec::new();
            gd.visit("", &mut |_, tr| tr.for_each(|v| flat_gd.push(v)));
            for (a, b) in flat_gd.iter().zip(flat_g64.iter()) {
                assert!((a.re - b).abs() < 1e-11, "real {} vs {}", a.re, b);
            }
            // dual parts vs FD of the gradient along the tangent
            let h = 1e-6;
            let mut sp_p = sp.clone();
            sp_p.zip_apply(&tangent, &mut |a, tv| *a += h * tv);
            let gp = sp_grad::<f64>(&p, &sp_p, &cfg, &tokens, &t, &prosody, &lw);
            let mut sp_m = sp.clone();
            sp_m.zip_apply(&tangent, &mut |a, tv| *a -= h * tv);
            let gm = sp_grad::<f64>(&p, &sp_m, &cfg, &tokens, &t, &prosody, &lw);
            let mut flat_gp = Vec::new();
            gp.visit("", &mut |_, tr| tr.for_each(|v| flat_gp.push(v)));
            let mut flat_gm = Vec::new();
            gm.visit("", &mut |_, tr| tr.for_each(|v| flat_gm.push(v)));
            for ((d, &p_), &m_) in flat_gd.iter().zip(flat_gp.iter()).zip(flat_gm.iter()) {
                let fd = (p_ - m_) / (2.0 * h);
                pairs.push((d.dt, fd));
            }
        }
        for (hv, fd) in pairs {
            let denom = hv.abs().max(fd.abs()).max(1e-6);
            assert!((hv - fd).abs() / denom < 1e-4, "hvp {hv} vs fd {fd}");
        }
    }

    #[test]
    fn dropout_masks_are_recorded_and_deterministic() {
        let cfg = tiny_cfg();
        let p = ModelParams::init(&cfg, 2, &mut child_rng(8, "init")).unwrap();
        let style = random_style::<f64>(&cfg, 9);
        let (durations, pitch, energy) = targets_fixture(3);
        let t = VarianceTargets {
            durations: &durations,
            pitch: &pitch,
            energy: &energy,
        };
        let run = |seed: u64| {
            let mut drop = Some(DropoutCtx {
                rng: child_rng(seed, "dropout"),
                p: 0.2,
            });
            trunk_forward(
                &p,
                &style,
                &[1u16, 2, 3],
                Mode::TeacherForced,
                Some(&t),
                &cfg,
                &mut drop,
            )
            .unwrap()
            .0
        };
        let a = run(42);
        let b = run(42);
        let c = run(43);
        assert_eq!(a.final_mel, b.final_mel);
        assert_ne!(a.final_mel, c.final_mel);
    }
}
