//! The three training phases: multi-speaker pre-training (producing θ_T),
//! episodic meta-learning of the speaker parameters (θ_M), and few-shot
//! adaptation of a checkpoint to one unseen speaker.
//!
//! The inner loop, the meta-gradient, and the Hessian-vector products it
//! needs are expressed against the [`AdaptObjective`] trait, so the exact
//! same machinery is validated on closed-form problems
//! ([`QuadraticObjective`], [`TinyNetObjective`]) and then reused unchanged
//! for the full model ([`EpisodeObjective`]).
//!
//! Second-order meta-gradients use the reverse accumulation
//! g ← g − α·H(θ_k)·g over the stored inner trajectory, with each H·g
//! computed exactly by forward-over-reverse differentiation (a gradient
//! evaluated on [`Dual`] numbers). Only the speaker parameters carry
//! tangents; the trunk and prosody branch stay plain `f64` throughout.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use ndarray::Array2;

use crate::checkpoint::{Checkpoint, PhaseTag};
use crate::config::TrainConfig;
use crate::data::{Corpus, SplitTag, TaskEpisode, Utterance};
use crate::error::{Error, Result};
use crate::losses::{
    compose_total, domain_adv_loss, orth_loss, recon_loss, variance_losses, LossBundle,
    LossWeights, Phase,
};
use crate::metrics::MetricsRecord;
use crate::model::{
    prosody_style, prosody_style_bwd, speaker_params_of, speaker_style, speaker_style_bwd,
    store_speaker_params, trunk_backward, trunk_forward, zero_params, DropoutCtx, LutMode, Mode,
    ModelConfig, ModelParams, ProsodyStyle, SpeakerParams, StyleMats, VarianceTargets,
};
use crate::optim::{sgd_step, Adam};
use crate::params::{FlatIndex, ParamOps};
use crate::partition::ParamPartition;
use crate::rng::{child_rng, fill_normal};
use crate::scalar::{Dual, Scalar};
use crate::syndata::sample_episode;
use rand::Rng;

/// Fixed validation episodes sampled once per meta-training run.
pub const META_VAL_EPISODES: usize = 8;

fn zero_bundle() -> LossBundle {
    LossBundle {
        recon: 0.0,
        variance: 0.0,
        l_da: 0.0,
        l_orth: 0.0,
        total: 0.0,
    }
}

fn add_scaled(acc: &mut LossBundle, b: &LossBundle, w: f64) {
    acc.recon += b.recon * w;
    acc.variance += b.variance * w;
    acc.l_da += b.l_da * w;
    acc.l_orth += b.l_orth * w;
    acc.total += b.total * w;
}

/// Bundle with only a total, for objectives that have no component split.
fn scalar_bundle(total: f64) -> LossBundle {
    LossBundle {
        recon: 0.0,
        variance: 0.0,
        l_da: 0.0,
        l_orth: 0.0,
        total,
    }
}

// ---------------------------------------------------------------------------
// Task objectives
// ---------------------------------------------------------------------------

/// A task with support and query losses over a flat parameter vector.
///
/// `support_hvp` must be the exact Hessian-vector product of the support
/// loss; the meta-gradient correctness tests compare it against finite
/// differences of `support_grad`.
pub trait AdaptObjective {
    fn dim(&self) -> usize;
    /// Support-set loss and gradient at `theta`.
    fn support_grad(&self, theta: &[f64]) -> Result<(LossBundle, Vec<f64>)>;
    /// Query-set loss and gradient at `theta`.
    fn query_grad(&self, theta: &[f64]) -> Result<(LossBundle, Vec<f64>)>;
    /// Exact product H(theta)·v of the support-loss Hessian with `v`.
    fn support_hvp(&self, theta: &[f64], v: &[f64]) -> Result<Vec<f64>>;
}

/// One utterance with everything precomputed that stays constant while only
/// the speaker parameters move: targets, tokens, and the prosody style
/// extracted by the frozen prosody branch (the self-reference scheme — each
/// utterance conditions on its own mel).
struct PreparedUtt {
    tokens: Vec<u16>,
    durations: Vec<u32>,
    pitch: Vec<f64>,
    energy: Vec<f64>,
    mel: Array2<f64>,
    prosody: ProsodyStyle,
}

impl PreparedUtt {
    fn build(params: &ModelParams<f64>, cfg: &ModelConfig, u: &Utterance) -> Result<Self> {
        u.validate()?;
        let (prosody, _) = prosody_style(&params.style, &u.mel, cfg)?;
        Ok(PreparedUtt {
            tokens: u.text.tokens.clone(),
            durations: u.durations.clone(),
            pitch: u.pitch.clone(),
            energy: u.energy.clone(),
            mel: u.mel.values.clone(),
            prosody,
        })
    }
}

/// Mean loss and gradient over `utts` w.r.t. the speaker parameters only.
///
/// Generic over the scalar: `f64` gives the plain gradient, [`Dual`] gives
/// gradient plus Hessian-vector product in one sweep. The trunk and the
/// prosody styles are constants here.
fn speaker_loss_grad<S: Scalar>(
    trunk: &ModelParams<f64>,
    cfg: &ModelConfig,
    weights: &LossWeights,
    phase: Phase,
    sp: &SpeakerParams<S>,
    utts: &[PreparedUtt],
) -> Result<(LossBundle, SpeakerParams<S>)> {
    if utts.is_empty() {
        return Err(Error::Data("objective needs at least one utterance".into()));
    }
    let scale = 1.0 / utts.len() as f64;
    let mut grads = sp.clone();
    zero_params(&mut grads);
    let mut bundle = zero_bundle();
    for u in utts {
        let style = StyleMats::new(speaker_style(sp, cfg), &u.prosody);
        let targets = VarianceTargets {
            durations: &u.durations,
            pitch: &u.pitch,
            energy: &u.energy,
        };
        let (out, cache) = trunk_forward(
            trunk,
            &style,
            &u.tokens,
            Mode::TeacherForced,
            Some(&targets),
            cfg,
            &mut None,
        )?;
        let (l_rec, d_raw, d_final) = recon_loss(
            out.raw.view(),
            out.final_mel.view(),
            u.mel.view(),
            weights.recon_raw_term,
        )?;
        let (l_var, d_ld, d_pitch, d_energy) = variance_losses(
            out.log_duration.view(),
            &u.durations,
            out.pitch.view(),
            &u.pitch,
            out.energy.view(),
            &u.energy,
        )?;
        let prosody_vec = u.prosody.vec.mapv(S::from_f64);
        let (l_orth, ds_orth, _) = orth_loss(sp.vec.view(), prosody_vec.view());
        let (_, utt_bundle) = compose_total(l_rec, l_var, None, l_orth, weights, phase);
        add_scaled(&mut bundle, &utt_bundle, scale);

        let (dgamma, dbeta) = trunk_backward(
            trunk,
            &style,
            &cache,
            cfg,
            d_raw.mapv(|v| v.scale(scale)).view(),
            d_final.mapv(|v| v.scale(scale)).view(),
            d_ld.mapv(|v| v.scale(scale)).view(),
            d_pitch.mapv(|v| v.scale(scale)).view(),
            d_energy.mapv(|v| v.scale(scale)).view(),
            None,
        );
        speaker_style_bwd(sp, &dgamma, &dbeta, &mut grads);
        let w_orth = weights.alpha_orth * scale;
        for (g, d) in grads.vec.iter_mut().zip(ds_orth.iter()) {
            *g += d.scale(w_orth);
        }
    }
    Ok((bundle, grads))
}

/// The full-model task objective for one episode: loss over support/query
/// utterances as a function of the flat speaker-parameter vector, with the
/// trunk and prosody branch held fixed.
pub struct EpisodeObjective<'a> {
    trunk: &'a ModelParams<f64>,
    cfg: &'a ModelConfig,
    weights: LossWeights,
    support: Vec<PreparedUtt>,
    query: Vec<PreparedUtt>,
    template: SpeakerParams<f64>,
    layout: FlatIndex,
}

impl<'a> EpisodeObjective<'a> {
    /// Prepares both utterance sets (prosody extraction happens once, here)
    /// and freezes the flat layout of the speaker parameters.
    pub fn from_episode(
        params: &'a ModelParams<f64>,
        cfg: &'a ModelConfig,
        weights: &LossWeights,
        episode: &TaskEpisode,
    ) -> Result<Self> {
        let support = episode
            .support
            .iter()
            .map(|u| PreparedUtt::build(params, cfg, u))
            .collect::<Result<Vec<_>>>()?;
        let query = episode
            .query
            .iter()
            .map(|u| PreparedUtt::build(params, cfg, u))
            .collect::<Result<Vec<_>>>()?;
        let template = speaker_params_of(params, 0)?;
        let layout = FlatIndex::build(&template);
        Ok(EpisodeObjective {
            trunk: params,
            cfg,
            weights: *weights,
            support,
            query,
            template,
            layout,
        })
    }

    /// The speaker parameters currently stored in the model, flattened.
    pub fn initial_theta(&self) -> Vec<f64> {
        self.layout.pack(&self.template)
    }

    fn unflatten(&self, theta: &[f64]) -> SpeakerParams<f64> {
        let mut sp = self.template.clone();
        self.layout.unpack(&mut sp, theta);
        sp
    }

    fn unflatten_dual(&self, theta: &[f64], tangent: &[f64]) -> SpeakerParams<Dual> {
        assert_eq!(theta.len(), self.layout.total_len(), "theta length");
        assert_eq!(tangent.len(), theta.len(), "tangent length");
        let mut i = 0;
        self.template.map_scalar(&mut |_| {
            let d = Dual::new(theta[i], tangent[i]);
            i += 1;
            d
        })
    }

    fn grad_at(&self, theta: &[f64], utts: &[PreparedUtt]) -> Result<(LossBundle, Vec<f64>)> {
        let sp = self.unflatten(theta);
        let (bundle, grads) =
            speaker_loss_grad(self.trunk, self.cfg, &self.weights, Phase::Meta, &sp, utts)?;
        Ok((bundle, self.layout.pack(&grads)))
    }
}

impl AdaptObjective for EpisodeObjective<'_> {
    fn dim(&self) -> usize {
        self.layout.total_len()
    }

    fn support_grad(&self, theta: &[f64]) -> Result<(LossBundle, Vec<f64>)> {
        self.grad_at(theta, &self.support)
    }

    fn query_grad(&self, theta: &[f64]) -> Result<(LossBundle, Vec<f64>)> {
        self.grad_at(theta, &self.query)
    }

    fn support_hvp(&self, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let sp = self.unflatten_dual(theta, v);
        let (_, grads) = speaker_loss_grad(
            self.trunk,
            self.cfg,
            &self.weights,
            Phase::Meta,
            &sp,
            &self.support,
        )?;
        let mut out = Vec::with_capacity(v.len());
        grads.visit("", &mut |_, t| t.for_each(|g| out.push(g.dt)));
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Inner loop and meta-gradient
// ---------------------------------------------------------------------------

/// The inner-loop SGD trajectory: `thetas[k]` is the parameter vector before
/// inner step `k`, so there are `steps + 1` points; `support_losses[k]` is
/// the support loss measured at `thetas[k]`.
pub struct InnerTrajectory {
    pub thetas: Vec<Vec<f64>>,
    pub support_losses: Vec<f64>,
}

/// Runs `steps` plain SGD steps on the support loss starting from `theta0`.
pub fn inner_adapt(
    obj: &dyn AdaptObjective,
    theta0: &[f64],
    steps: usize,
    lr: f64,
) -> Result<InnerTrajectory> {
    let mut thetas = Vec::with_capacity(steps + 1);
    thetas.push(theta0.to_vec());
    let mut support_losses = Vec::with_capacity(steps);
    for k in 0..steps {
        let (bundle, grad) = obj.support_grad(&thetas[k])?;
        if !bundle.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite support loss at inner step {k}: {bundle:?}"
            )));
        }
        support_losses.push(bundle.total);
        let mut next = thetas[k].clone();
        sgd_step(&mut next, &grad, lr);
        thetas.push(next);
    }
    Ok(InnerTrajectory {
        thetas,
        support_losses,
    })
}

/// Per-episode outcome used for logging and diagnostics.
#[derive(Clone, Debug)]
pub struct EpisodeResult {
    pub speaker_id: u32,
    pub prosody_id: u32,
    /// Support loss at each inner-loop point before stepping.
    pub support_losses: Vec<f64>,
    /// Query loss at the adapted parameters.
    pub query_loss: f64,
}

/// Query loss at the adapted parameters and its gradient w.r.t. the
/// initialization `theta0`.
///
/// With `second_order` the gradient is propagated back through the inner
/// SGD trajectory: starting from g = ∇L_query(θ_K), apply
/// g ← g − α·H(θ_k)·g for k = K−1 … 0, using exact Hessian-vector products.
/// Without it the query gradient is returned as-is (first-order MAML).
pub fn meta_episode_grad(
    obj: &dyn AdaptObjective,
    theta0: &[f64],
    inner_steps: usize,
    inner_lr: f64,
    second_order: bool,
) -> Result<(LossBundle, Vec<f64>, Vec<f64>)> {
    let traj = inner_adapt(obj, theta0, inner_steps, inner_lr)?;
    let adapted = traj.thetas.last().expect("trajectory holds at least theta0");
    let (qbundle, mut g) = obj.query_grad(adapted)?;
    if !qbundle.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite query loss after inner loop: {qbundle:?}"
        )));
    }
    if second_order {
        for k in (0..inner_steps).rev() {
            let hv = obj.support_hvp(&traj.thetas[k], &g)?;
            for (gi, hvi) in g.iter_mut().zip(hv.iter()) {
                *gi -= inner_lr * hvi;
            }
        }
    }
    Ok((qbundle, g, traj.support_losses))
}

/// One outer-loop update over an episode batch: sums the per-episode
/// meta-gradients and applies a single Adam step to `theta_s` in place.
///
/// `allowed` is the set of (speaker, prosody) pseudo-speaker keys the batch
/// may legally come from; anything else is split contamination.
#[allow(clippy::too_many_arguments)]
pub fn meta_step(
    params: &ModelParams<f64>,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    allowed: &BTreeSet<(u32, u32)>,
    episodes: &[TaskEpisode],
    theta_s: &mut [f64],
    adam: &mut Adam,
) -> Result<(LossBundle, Vec<EpisodeResult>)> {
    if episodes.is_empty() {
        return Err(Error::Config("meta step needs at least one episode".into()));
    }
    let mut grad_sum = vec![0.0; theta_s.len()];
    let mut bundle = zero_bundle();
    let mut results = Vec::with_capacity(episodes.len());
    let scale = 1.0 / episodes.len() as f64;
    for ep in episodes {
        ep.validate(tc.n_shots)?;
        if !allowed.contains(&(ep.speaker_id, ep.prosody_id)) {
            return Err(Error::Contamination(format!(
                "episode pseudo-speaker ({}, {}) is not in the training split",
                ep.speaker_id, ep.prosody_id
            )));
        }
        let obj = EpisodeObjective::from_episode(params, cfg, &tc.loss, ep)?;
        let (qbundle, g, support_losses) =
            meta_episode_grad(&obj, theta_s, tc.inner_steps, tc.inner_lr, tc.second_order)?;
        for (a, b) in grad_sum.iter_mut().zip(g.iter()) {
            *a += b;
        }
        add_scaled(&mut bundle, &qbundle, scale);
        results.push(EpisodeResult {
            speaker_id: ep.speaker_id,
            prosody_id: ep.prosody_id,
            support_losses,
            query_loss: qbundle.total,
        });
    }
    adam.step(theta_s, &grad_sum);
    Ok((bundle, results))
}

/// Mean query loss over `episodes` after running the inner loop from
/// `theta_s` — the meta-validation measurement, also used to compare
/// checkpoints' few-shot behaviour.
pub fn adapted_query_loss(
    params: &ModelParams<f64>,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    episodes: &[TaskEpisode],
    theta_s: &[f64],
) -> Result<LossBundle> {
    if episodes.is_empty() {
        return Err(Error::Config("validation needs at least one episode".into()));
    }
    let mut bundle = zero_bundle();
    let scale = 1.0 / episodes.len() as f64;
    for ep in episodes {
        let obj = EpisodeObjective::from_episode(params, cfg, &tc.loss, ep)?;
        let traj = inner_adapt(&obj, theta_s, tc.inner_steps, tc.inner_lr)?;
        let adapted = traj.thetas.last().expect("trajectory holds at least theta0");
        let (qb, _) = obj.query_grad(adapted)?;
        add_scaled(&mut bundle, &qb, scale);
    }
    Ok(bundle)
}

// ---------------------------------------------------------------------------
// Phase drivers
// ---------------------------------------------------------------------------

/// Per-utterance forward/backward for pre-training: every partition gets
/// gradients, including the prosody branch (through the style vectors, the
/// orthogonality term, and the gradient-reversed speaker classifier).
/// Seeds are scaled by `scale` so minibatch gradients average.
#[allow(clippy::too_many_arguments)]
fn pretrain_utt_backward(
    params: &ModelParams<f64>,
    cfg: &ModelConfig,
    weights: &LossWeights,
    u: &Utterance,
    row: usize,
    scale: f64,
    grads: &mut ModelParams<f64>,
    drop: &mut Option<DropoutCtx>,
) -> Result<LossBundle> {
    let (pstyle, pcache) = prosody_style(&params.style, &u.mel, cfg)?;
    let sp = speaker_params_of(params, row)?;
    let style = StyleMats::new(speaker_style(&sp, cfg), &pstyle);
    let targets = VarianceTargets {
        durations: &u.durations,
        pitch: &u.pitch,
        energy: &u.energy,
    };
    let (out, cache) = trunk_forward(
        params,
        &style,
        &u.text.tokens,
        Mode::TeacherForced,
        Some(&targets),
        cfg,
        drop,
    )?;
    let (l_rec, d_raw, d_final) = recon_loss(
        out.raw.view(),
        out.final_mel.view(),
        u.mel.values.view(),
        weights.recon_raw_term,
    )?;
    let (l_var, d_ld, d_pitch, d_energy) = variance_losses(
        out.log_duration.view(),
        &u.durations,
        out.pitch.view(),
        &u.pitch,
        out.energy.view(),
        &u.energy,
    )?;
    let (l_orth, ds_orth, dp_orth) = orth_loss::<f64>(sp.vec.view(), pstyle.vec.view());
    let mut cls_grads = params.style.classifier.clone();
    zero_params(&mut cls_grads);
    let (l_da, d_pvec_rev) = domain_adv_loss(
        &params.style.classifier,
        &pstyle.vec,
        row,
        weights.grl_lambda,
        Some(&mut cls_grads),
    )?;
    let (_, bundle) = compose_total(l_rec, l_var, Some(l_da), l_orth, weights, Phase::Pretrain);

    let (dgamma, dbeta) = trunk_backward(
        params,
        &style,
        &cache,
        cfg,
        d_raw.mapv(|v| v * scale).view(),
        d_final.mapv(|v| v * scale).view(),
        d_ld.mapv(|v| v * scale).view(),
        d_pitch.mapv(|v| v * scale).view(),
        d_energy.mapv(|v| v * scale).view(),
        Some(grads),
    );

    // Speaker branch: CLN grads plus the orthogonality pull on the LUT row.
    let mut sp_grads = sp.clone();
    zero_params(&mut sp_grads);
    speaker_style_bwd(&sp, &dgamma, &dbeta, &mut sp_grads);
    for (g, d) in sp_grads.vec.iter_mut().zip(ds_orth.iter()) {
        *g += d * weights.alpha_orth * scale;
    }
    grads
        .style
        .speaker_lut
        .row_mut(row)
        .zip_mut_with(&sp_grads.vec, |a, b| *a += b);
    grads
        .style
        .speaker_adaptor
        .w
        .zip_mut_with(&sp_grads.w, |a, b| *a += b);
    grads
        .style
        .speaker_adaptor
        .b
        .zip_mut_with(&sp_grads.b, |a, b| *a += b);

    // Prosody branch: the same SALN grads (γ/β enter both branches
    // additively) plus direct pulls on the style vector from the
    // orthogonality loss and the reversed adversarial gradient.
    let dvec_direct =
        &dp_orth * (weights.alpha_orth * scale) + &d_pvec_rev * (weights.alpha_da * scale);
    prosody_style_bwd(
        &params.style,
        &pstyle,
        &pcache,
        &dgamma,
        &dbeta,
        &dvec_direct,
        cfg,
        &mut grads.style,
    );
    grads
        .style
        .classifier
        .zip_apply(&cls_grads, &mut |a, b| *a += b * weights.alpha_da * scale);
    Ok(bundle)
}

/// Multi-speaker pre-training: Adam over all parameters on the pretrain
/// split, teacher-forced, with dropout. Returns the θ_T checkpoint and one
/// metrics record per step.
pub fn pretrain(
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    tc: &TrainConfig,
) -> Result<(Checkpoint, Vec<MetricsRecord>)> {
    if corpus.split_tag != SplitTag::Pretrain {
        return Err(Error::Data(format!(
            "pre-training expects the pretrain split, got {}",
            corpus.split_tag
        )));
    }
    corpus.validate()?;
    model_cfg.validate()?;
    tc.validate()?;
    let ids: Vec<u32> = corpus.speaker_ids.iter().copied().collect();
    let row_of: BTreeMap<u32, usize> = ids.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let mut params = ModelParams::init(model_cfg, ids.len(), &mut child_rng(tc.seed, "init"))?;
    let index = FlatIndex::build(&params);
    let mut adam = Adam::new(tc.pretrain_lr, index.total_len());
    let mut batch_rng = child_rng(tc.seed, "pretrain-batch");
    let n = corpus.utterances.len();
    let started = Instant::now();
    let mut records = Vec::with_capacity(tc.pretrain_steps);
    for step in 0..tc.pretrain_steps {
        let batch: Vec<usize> = (0..tc.pretrain_batch)
            .map(|_| batch_rng.random_range(0..n))
            .collect();
        let mut drop = (tc.dropout > 0.0).then(|| DropoutCtx {
            rng: child_rng(tc.seed, &format!("dropout-{step}")),
            p: tc.dropout,
        });
        let mut grads = params.clone();
        zero_params(&mut grads);
        let mut bundle = zero_bundle();
        let scale = 1.0 / batch.len() as f64;
        for &ui in &batch {
            let u = &corpus.utterances[ui];
            let row = row_of[&u.speaker_id];
            let ub = pretrain_utt_backward(
                &params, model_cfg, &tc.loss, u, row, scale, &mut grads, &mut drop,
            )?;
            add_scaled(&mut bundle, &ub, scale);
        }
        if !bundle.total.is_finite() {
            return Err(Error::Numeric(format!(
                "pre-training diverged at step {step}: {bundle:?}"
            )));
        }
        let mut flat = index.pack(&params);
        let grad_flat = index.pack(&grads);
        adam.step(&mut flat, &grad_flat);
        index.unpack(&mut params, &flat);
        records.push(MetricsRecord::new(
            "pretrain",
            step as u64,
            &bundle,
            tc.pretrain_lr,
            started.elapsed().as_secs_f64(),
        ));
    }
    let ckpt = Checkpoint::new(
        PhaseTag::ThetaT,
        tc.pretrain_steps as u64,
        LutMode::MultiSpeaker,
        ids,
        model_cfg.clone(),
        tc.clone(),
        &params,
    );
    Ok((ckpt, records))
}

/// Teacher-forced evaluation of the pre-training objective (no dropout, no
/// gradients) averaged over a corpus whose speakers were seen in training.
pub fn evaluate_pretrain_loss(
    params: &ModelParams<f64>,
    cfg: &ModelConfig,
    weights: &LossWeights,
    corpus: &Corpus,
    train_speaker_ids: &[u32],
) -> Result<LossBundle> {
    if corpus.utterances.is_empty() {
        return Err(Error::Data("evaluation corpus is empty".into()));
    }
    let row_of: BTreeMap<u32, usize> = train_speaker_ids
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, i))
        .collect();
    let mut bundle = zero_bundle();
    let scale = 1.0 / corpus.utterances.len() as f64;
    for u in &corpus.utterances {
        let row = *row_of.get(&u.speaker_id).ok_or_else(|| {
            Error::Lookup(format!("speaker {} was not seen in training", u.speaker_id))
        })?;
        let (pstyle, _) = prosody_style(&params.style, &u.mel, cfg)?;
        let sp = speaker_params_of(params, row)?;
        let style = StyleMats::new(speaker_style(&sp, cfg), &pstyle);
        let targets = VarianceTargets {
            durations: &u.durations,
            pitch: &u.pitch,
            energy: &u.energy,
        };
        let (out, _) = trunk_forward(
            params,
            &style,
            &u.text.tokens,
            Mode::TeacherForced,
            Some(&targets),
            cfg,
            &mut None,
        )?;
        let (l_rec, _, _) = recon_loss(
            out.raw.view(),
            out.final_mel.view(),
            u.mel.values.view(),
            weights.recon_raw_term,
        )?;
        let (l_var, _, _, _) = variance_losses(
            out.log_duration.view(),
            &u.durations,
            out.pitch.view(),
            &u.pitch,
            out.energy.view(),
            &u.energy,
        )?;
        let (l_orth, _, _) = orth_loss::<f64>(sp.vec.view(), pstyle.vec.view());
        let (l_da, _) = domain_adv_loss(
            &params.style.classifier,
            &pstyle.vec,
            row,
            weights.grl_lambda,
            None,
        )?;
        let (_, ub) = compose_total(l_rec, l_var, Some(l_da), l_orth, weights, Phase::Pretrain);
        add_scaled(&mut bundle, &ub, scale);
    }
    Ok(bundle)
}

/// Replaces the per-speaker LUT with a single shared row drawn from
/// N(0, 0.01²), leaving every other tensor bit-identical. This is the bridge
/// from multi-speaker pre-training to episodic meta-learning, where all
/// tasks start from the same speaker vector.
pub fn reset_speaker_lut(ckpt: &Checkpoint) -> Result<Checkpoint> {
    ckpt.require_phase(&[PhaseTag::ThetaT], "speaker-LUT reset")?;
    if ckpt.lut_mode != LutMode::MultiSpeaker {
        return Err(Error::Config("speaker LUT was already reset".into()));
    }
    let mut params = ckpt.params.clone();
    let mut row = Array2::zeros((1, ckpt.model.style_dim));
    fill_normal(
        &mut child_rng(ckpt.train.seed, "meta-lut-reset"),
        row.as_slice_mut().unwrap(),
        0.0,
        0.01,
    );
    params.style.speaker_lut = row;
    Ok(Checkpoint::new(
        PhaseTag::ThetaT,
        ckpt.step,
        LutMode::SharedSingle,
        ckpt.train_speaker_ids.clone(),
        ckpt.model.clone(),
        ckpt.train.clone(),
        &params,
    ))
}

/// Episodic meta-learning of the speaker parameters. The trunk and prosody
/// branch stay frozen; only the shared LUT row and the speaker adaptor move,
/// under Adam on the summed meta-gradient. Returns the best-validation θ_M
/// checkpoint and the metrics trace ("meta" rows per iteration, "meta_val"
/// rows at the validation cadence).
pub fn meta_train(
    ckpt: &Checkpoint,
    train_corpus: &Corpus,
    val_corpus: &Corpus,
) -> Result<(Checkpoint, Vec<MetricsRecord>)> {
    ckpt.require_phase(&[PhaseTag::ThetaT], "meta-training")?;
    if ckpt.lut_mode != LutMode::SharedSingle {
        return Err(Error::Config(
            "meta-training starts from the shared single-row LUT; run reset_speaker_lut first"
                .into(),
        ));
    }
    if train_corpus.split_tag != SplitTag::MetaTrain {
        return Err(Error::Data(format!(
            "meta-training expects the meta-train split, got {}",
            train_corpus.split_tag
        )));
    }
    if val_corpus.split_tag != SplitTag::MetaVal {
        return Err(Error::Data(format!(
            "meta-validation expects the meta-val split, got {}",
            val_corpus.split_tag
        )));
    }
    train_corpus.validate()?;
    val_corpus.validate()?;
    let cfg = &ckpt.model;
    let tc = &ckpt.train;
    tc.validate()?;

    let mut params = ckpt.params.clone();
    let part = ParamPartition::build(&params)?;
    let shared_before = part.shared.gather(&part.index, &params);
    let prosody_before = part.prosody.gather(&part.index, &params);
    let mut theta_s = part.speaker.gather(&part.index, &params);
    let mut adam = Adam::new(tc.meta_lr, theta_s.len());
    let allowed: BTreeSet<(u32, u32)> = train_corpus
        .pseudo_speakers()
        .iter()
        .map(|(key, _)| *key)
        .collect();
    let mut episode_rng = child_rng(tc.seed, "meta-episodes");
    let mut val_rng = child_rng(tc.seed, "meta-val-episodes");
    let val_episodes: Vec<TaskEpisode> = (0..META_VAL_EPISODES)
        .map(|_| sample_episode(val_corpus, tc.n_shots, &mut val_rng))
        .collect::<Result<_>>()?;

    let started = Instant::now();
    let mut records = Vec::new();
    let mut best: Option<(f64, u64, Vec<f64>)> = None;
    for iter in 0..tc.meta_iters {
        let episodes: Vec<TaskEpisode> = (0..tc.meta_batch_size)
            .map(|_| sample_episode(train_corpus, tc.n_shots, &mut episode_rng))
            .collect::<Result<_>>()?;
        let (bundle, _) = meta_step(
            &params,
            cfg,
            tc,
            &allowed,
            &episodes,
            &mut theta_s,
            &mut adam,
        )
        .map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("meta-iteration {iter}: {m}")),
            other => other,
        })?;
        records.push(MetricsRecord::new(
            "meta",
            iter as u64,
            &bundle,
            tc.meta_lr,
            started.elapsed().as_secs_f64(),
        ));
        let step = iter + 1;
        if step % tc.val_every == 0 || step == tc.meta_iters {
            let vbundle = adapted_query_loss(&params, cfg, tc, &val_episodes, &theta_s)?;
            records.push(MetricsRecord::new(
                "meta_val",
                step as u64,
                &vbundle,
                tc.meta_lr,
                started.elapsed().as_secs_f64(),
            ));
            if best
                .as_ref()
                .map_or(true, |(b, _, _)| vbundle.total < *b)
            {
                best = Some((vbundle.total, step as u64, theta_s.clone()));
            }
        }
    }
    let (_, best_step, best_theta) = best.expect("meta_iters >= 1 forces a validation probe");
    part.speaker.scatter(&part.index, &mut params, &best_theta);
    if part.shared.gather(&part.index, &params) != shared_before
        || part.prosody.gather(&part.index, &params) != prosody_before
    {
        return Err(Error::Partition(
            "frozen partitions drifted during meta-training".into(),
        ));
    }
    let out = Checkpoint::new(
        PhaseTag::ThetaM,
        best_step,
        LutMode::SharedSingle,
        ckpt.train_speaker_ids.clone(),
        cfg.clone(),
        tc.clone(),
        &params,
    );
    Ok((out, records))
}

/// Result of adapting a checkpoint to one unseen speaker.
#[derive(Debug)]
pub struct AdaptOutcome {
    pub final_checkpoint: Checkpoint,
    /// Intermediate checkpoints cut at the configured step marks.
    pub snapshots: Vec<(usize, Checkpoint)>,
    /// One record per step; the loss is measured at the pre-update
    /// parameters, the lr is the decayed rate applied at that step.
    pub trace: Vec<MetricsRecord>,
}

/// Few-shot adaptation: SGD on the speaker parameters against `samples`
/// from a single held-out speaker, with exponential lr decay.
///
/// `baseline: false` continues from θ_M (the meta-learned initialization);
/// `baseline: true` starts from θ_T with a freshly randomized speaker row
/// (the pretrain-finetune arm). Speakers seen in training are rejected.
pub fn adapt(
    ckpt: &Checkpoint,
    samples: &[Utterance],
    steps: usize,
    baseline: bool,
) -> Result<AdaptOutcome> {
    if baseline {
        ckpt.require_phase(&[PhaseTag::ThetaT], "baseline adaptation")?;
    } else {
        ckpt.require_phase(&[PhaseTag::ThetaM], "meta adaptation")?;
    }
    if samples.is_empty() {
        return Err(Error::Data("adaptation needs at least one sample".into()));
    }
    let speaker = samples[0].speaker_id;
    if samples.iter().any(|u| u.speaker_id != speaker) {
        return Err(Error::Data(
            "adaptation samples mix more than one speaker".into(),
        ));
    }
    if ckpt.train_speaker_ids.contains(&speaker) {
        return Err(Error::Contamination(format!(
            "speaker {speaker} was seen during training; adaptation requires an unseen speaker"
        )));
    }
    let cfg = &ckpt.model;
    let tc = &ckpt.train;
    let mut params = ckpt.params.clone();
    if baseline {
        let mut row = Array2::zeros((1, cfg.style_dim));
        fill_normal(
            &mut child_rng(tc.seed, &format!("adapt-lut-{speaker}")),
            row.as_slice_mut().unwrap(),
            0.0,
            0.01,
        );
        params.style.speaker_lut = row;
    }
    if params.style.speaker_lut.nrows() != 1 {
        return Err(Error::Config(
            "adaptation expects a single-row speaker LUT".into(),
        ));
    }
    let prepared: Vec<PreparedUtt> = samples
        .iter()
        .map(|u| PreparedUtt::build(&params, cfg, u))
        .collect::<Result<_>>()?;
    let template = speaker_params_of(&params, 0)?;
    let layout = FlatIndex::build(&template);
    let mut theta = layout.pack(&template);

    let cut = |theta: &[f64], step: usize| -> Checkpoint {
        let mut p = params.clone();
        let mut sp = template.clone();
        layout.unpack(&mut sp, theta);
        store_speaker_params(&mut p, 0, &sp).expect("row 0 exists");
        Checkpoint::new(
            PhaseTag::Adapted,
            step as u64,
            LutMode::SharedSingle,
            ckpt.train_speaker_ids.clone(),
            cfg.clone(),
            tc.clone(),
            &p,
        )
    };

    let started = Instant::now();
    let mut trace = Vec::with_capacity(steps);
    let mut snapshots = Vec::new();
    for t in 0..steps {
        let mut sp = template.clone();
        layout.unpack(&mut sp, &theta);
        let (bundle, grads) =
            speaker_loss_grad(&params, cfg, &tc.loss, Phase::Adapt, &sp, &prepared)?;
        if !bundle.total.is_finite() {
            return Err(Error::Numeric(format!(
                "adaptation diverged at step {t}: {bundle:?}"
            )));
        }
        let lr = tc.adapt_lr_at(t);
        let grad_flat = layout.pack(&grads);
        sgd_step(&mut theta, &grad_flat, lr);
        trace.push(MetricsRecord::new(
            "adapt",
            (t + 1) as u64,
            &bundle,
            lr,
            started.elapsed().as_secs_f64(),
        ));
        if tc.snapshots.contains(&(t + 1)) {
            snapshots.push((t + 1, cut(&theta, t + 1)));
        }
    }
    let final_checkpoint = cut(&theta, steps);
    Ok(AdaptOutcome {
        final_checkpoint,
        snapshots,
        trace,
    })
}

// ---------------------------------------------------------------------------
// Reference objectives
// ---------------------------------------------------------------------------

/// 1-D quadratic task family: support loss (θ−a)², query loss (θ−b)².
///
/// With one inner step and a = b = c the meta-gradient has the closed form
/// 2(θ′−c)(1−2α), and the second-order/first-order ratio is (1−2α)^K — the
/// reference oracle for the meta-gradient machinery.
pub struct QuadraticObjective {
    pub support_center: f64,
    pub query_center: f64,
}

impl AdaptObjective for QuadraticObjective {
    fn dim(&self) -> usize {
        1
    }

    fn support_grad(&self, theta: &[f64]) -> Result<(LossBundle, Vec<f64>)> {
        let d = theta[0] - self.support_center;
        Ok((scalar_bundle(d * d), vec![2.0 * d]))
    }

    fn query_grad(&self, theta: &[f64]) -> Result<(LossBundle, Vec<f64>)> {
        let d = theta[0] - self.query_center;
        Ok((scalar_bundle(d * d), vec![2.0 * d]))
    }

    fn support_hvp(&self, _theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![2.0 * v[0]])
    }
}

/// A two-layer tanh regressor y = w2·tanh(W1·x + b1) + b2 fit by squared
/// error — small enough (hidden·(input+2)+1 parameters) to validate the
/// full second-order meta-gradient against finite differences of the meta
/// objective.
pub struct TinyNetObjective {
    pub input_dim: usize,
    pub hidden: usize,
    pub support: Vec<(Vec<f64>, f64)>,
    pub query: Vec<(Vec<f64>, f64)>,
}

impl TinyNetObjective {
    fn loss_grad<S: Scalar>(&self, theta: &[S], data: &[(Vec<f64>, f64)]) -> (S, Vec<S>) {
        let (ni, nh) = (self.input_dim, self.hidden);
        assert_eq!(theta.len(), nh * (ni + 2) + 1, "theta layout");
        let w1 = &theta[0..nh * ni];
        let b1 = &theta[nh * ni..nh * ni + nh];
        let w2 = &theta[nh * (ni + 1)..nh * (ni + 1) + nh];
        let b2 = theta[nh * (ni + 2)];
        let mut loss = S::ZERO;
        let mut g = vec![S::ZERO; theta.len()];
        let inv = 1.0 / data.len() as f64;
        for (x, y) in data {
            let mut h = vec![S::ZERO; nh];
            let mut pred = b2;
            for i in 0..nh {
                let mut z = b1[i];
                for (j, &xj) in x.iter().enumerate() {
                    z += w1[i * ni + j].scale(xj);
                }
                h[i] = z.tanh();
                pred += w2[i] * h[i];
            }
            let err = pred - S::from_f64(*y);
            loss += (err * err).scale(inv);
            let dpred = err.scale(2.0 * inv);
            g[nh * (ni + 2)] += dpred;
            for i in 0..nh {
                g[nh * (ni + 1) + i] += dpred * h[i];
                let dz = dpred * w2[i] * (S::ONE - h[i] * h[i]);
                g[nh * ni + i] += dz;
                for (j, &xj) in x.iter().enumerate() {
                    g[i * ni + j] += dz.scale(xj);
                }
            }
        }
        (loss, g)
    }
}

impl AdaptObjective for TinyNetObjective {
    fn dim(&self) -> usize {
        self.hidden * (self.input_dim + 2) + 1
    }

    fn support_grad(&self, theta: &[f64]) -> Result<(LossBundle, Vec<f64>)> {
        let (l, g) = self.loss_grad(theta, &self.support);
        Ok((scalar_bundle(l), g))
    }

    fn query_grad(&self, theta: &[f64]) -> Result<(LossBundle, Vec<f64>)> {
        let (l, g) = self.loss_grad(theta, &self.query);
        Ok((scalar_bundle(l), g))
    }

    fn support_hvp(&self, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let lifted: Vec<Dual> = theta
            .iter()
            .zip(v.iter())
            .map(|(&t, &dt)| Dual::new(t, dt))
            .collect();
        let (_, g) = self.loss_grad(&lifted, &self.support);
        Ok(g.into_iter().map(|d| d.dt).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tiny_cfg;
    use crate::syndata::{make_corpus, CorpusSet, GeneratorConfig};

    fn tiny_corpus() -> CorpusSet {
        let gen_cfg = GeneratorConfig {
            n_speakers: 6,
            test_speakers: 2,
            n_prosodies: 2,
            alphabet: 10,
            bins: 5,
            utts_per_pseudo: 6,
            noise_std: 0.02,
            text_len: (2, 4),
            base_duration: (2, 3),
            seed: 5,
        };
        let (_, set) = make_corpus(&gen_cfg).unwrap();
        set
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            n_shots: 2,
            meta_batch_size: 2,
            inner_lr: 1e-2,
            meta_lr: 1e-3,
            adapt_lr: 1e-2,
            adapt_lr_decay: 0.999,
            inner_steps: 2,
            second_order: true,
            pretrain_lr: 1e-3,
            pretrain_steps: 3,
            pretrain_batch: 2,
            dropout: 0.1,
            meta_iters: 2,
            val_every: 1,
            snapshots: vec![1, 2],
            seed: 7,
            ..TrainConfig::default()
        }
    }

    fn fake_theta_t(set: &CorpusSet, tc: &TrainConfig, seed: u64) -> Checkpoint {
        let cfg = tiny_cfg();
        let ids: Vec<u32> = set.pretrain.speaker_ids.iter().copied().collect();
        let params = ModelParams::init(&cfg, ids.len(), &mut child_rng(seed, "fake")).unwrap();
        Checkpoint::new(
            PhaseTag::ThetaT,
            0,
            LutMode::MultiSpeaker,
            ids,
            cfg,
            tc.clone(),
            &params,
        )
    }

    /// Meta objective value F(θ0) = L_query(inner_adapt(θ0)), for FD oracles.
    fn meta_objective(
        obj: &dyn AdaptObjective,
        theta0: &[f64],
        steps: usize,
        lr: f64,
    ) -> f64 {
        let traj = inner_adapt(obj, theta0, steps, lr).unwrap();
        let (b, _) = obj.query_grad(traj.thetas.last().unwrap()).unwrap();
        b.total
    }

    #[test]
    fn quadratic_meta_gradient_matches_closed_form() {
        let c = 0.7;
        let obj = QuadraticObjective {
            support_center: c,
            query_center: c,
        };
        let theta0 = [2.3];
        let alpha = 0.05;
        let (_, g, _) = meta_episode_grad(&obj, &theta0, 1, alpha, true).unwrap();
        let adapted = theta0[0] - alpha * 2.0 * (theta0[0] - c);
        let expected = 2.0 * (adapted - c) * (1.0 - 2.0 * alpha);
        assert!((g[0] - expected).abs() < 1e-12, "{} vs {expected}", g[0]);

        // And against a finite difference of the meta objective itself.
        let h = 1e-6;
        let fp = meta_objective(&obj, &[theta0[0] + h], 1, alpha);
        let fm = meta_objective(&obj, &[theta0[0] - h], 1, alpha);
        let fd = (fp - fm) / (2.0 * h);
        assert!((g[0] - fd).abs() / fd.abs().max(1e-6) < 1e-7);
    }

    #[test]
    fn first_order_drops_the_curvature_factor() {
        let obj = QuadraticObjective {
            support_center: -0.4,
            query_center: -0.4,
        };
        let alpha = 0.03;
        for steps in [1usize, 3] {
            let (_, g2, _) = meta_episode_grad(&obj, &[1.9], steps, alpha, true).unwrap();
            let (_, g1, _) = meta_episode_grad(&obj, &[1.9], steps, alpha, false).unwrap();
            let ratio = g2[0] / g1[0];
            let expected = (1.0 - 2.0 * alpha).powi(steps as i32);
            assert!(
                (ratio - expected).abs() < 1e-12,
                "K={steps}: {ratio} vs {expected}"
            );
        }
    }

    #[test]
    fn scalar_descent_step_is_exact() {
        // One GD step on (θ−0)² from θ=1 with lr 0.1: 1 − 0.1·2 = 0.8.
        let obj = QuadraticObjective {
            support_center: 0.0,
            query_center: 0.0,
        };
        let traj = inner_adapt(&obj, &[1.0], 1, 0.1).unwrap();
        assert_eq!(traj.thetas.len(), 2);
        assert!((traj.thetas[1][0] - 0.8).abs() < 1e-15);
        assert!((traj.support_losses[0] - 1.0).abs() < 1e-15);
    }

    fn tiny_net() -> TinyNetObjective {
        let mut rng = child_rng(42, "tiny-net-data");
        let mk = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<(Vec<f64>, f64)> {
            (0..n)
                .map(|_| {
                    let x: Vec<f64> = (0..3).map(|_| crate::rng::normal(rng)).collect();
                    let y = (x[0] - 0.5 * x[1]).tanh() + 0.3 * x[2];
                    (x, y)
                })
                .collect()
        };
        TinyNetObjective {
            input_dim: 3,
            hidden: 4,
            support: mk(&mut rng, 6),
            query: mk(&mut rng, 6),
        }
    }

    #[test]
    fn tiny_net_meta_gradient_matches_finite_differences() {
        let obj = tiny_net();
        let dim = obj.dim();
        assert_eq!(dim, 21);
        let mut theta0 = vec![0.0; dim];
        fill_normal(&mut child_rng(9, "tiny-net-theta"), &mut theta0, 0.0, 0.5);
        let (steps, alpha) = (3usize, 0.05);
        let (_, g, _) = meta_episode_grad(&obj, &theta0, steps, alpha, true).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..dim {
            let mut tp = theta0.clone();
            tp[i] += h;
            let mut tm = theta0.clone();
            tm[i] -= h;
            let fd = (meta_objective(&obj, &tp, steps, alpha)
                - meta_objective(&obj, &tm, steps, alpha))
                / (2.0 * h);
            let rel = (g[i] - fd).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");

        // Second order must actually differ from first order here.
        let (_, g1, _) = meta_episode_grad(&obj, &theta0, steps, alpha, false).unwrap();
        let diff: f64 = g
            .iter()
            .zip(g1.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(diff > 1e-8, "curvature correction vanished");
    }

    #[test]
    fn episode_hvp_matches_finite_difference_of_gradient() {
        let set = tiny_corpus();
        let cfg = tiny_cfg();
        let tc = tiny_train();
        let params = ModelParams::init(&cfg, 1, &mut child_rng(3, "hvp")).unwrap();
        let ep = sample_episode(&set.meta_train, tc.n_shots, &mut child_rng(1, "ep")).unwrap();
        let obj = EpisodeObjective::from_episode(&params, &cfg, &tc.loss, &ep).unwrap();
        let theta = obj.initial_theta();
        let mut v = vec![0.0; theta.len()];
        fill_normal(&mut child_rng(2, "tangent"), &mut v, 0.0, 1.0);
        let hv = obj.support_hvp(&theta, &v).unwrap();
        let h = 1e-6;
        let shift = |sign: f64| -> Vec<f64> {
            theta
                .iter()
                .zip(v.iter())
                .map(|(t, d)| t + sign * h * d)
                .collect()
        };
        let (_, gp) = obj.support_grad(&shift(1.0)).unwrap();
        let (_, gm) = obj.support_grad(&shift(-1.0)).unwrap();
        // Mixed tolerance: the dual product is exact at the point while the
        // central difference smears over ReLU kinks and carries roundoff, so
        // allow a small absolute slack alongside the relative bound.
        let mut worst = 0.0f64;
        for i in 0..theta.len() {
            let fd = (gp[i] - gm[i]) / (2.0 * h);
            let tol = 1e-6 + 1e-3 * fd.abs().max(hv[i].abs());
            let ratio = (hv[i] - fd).abs() / tol;
            worst = worst.max(ratio);
        }
        assert!(worst < 1.0, "worst error at {worst} of tolerance");
    }

    #[test]
    fn inner_adapt_matches_an_explicit_reference_loop() {
        let set = tiny_corpus();
        let cfg = tiny_cfg();
        let tc = tiny_train();
        let params = ModelParams::init(&cfg, 1, &mut child_rng(4, "ref")).unwrap();
        let ep = sample_episode(&set.meta_train, tc.n_shots, &mut child_rng(8, "ep")).unwrap();
        let obj = EpisodeObjective::from_episode(&params, &cfg, &tc.loss, &ep).unwrap();
        let theta0 = obj.initial_theta();
        let (steps, lr) = (3usize, 5e-3);
        let traj = inner_adapt(&obj, &theta0, steps, lr).unwrap();

        // Reference: materialize every step by hand.
        let mut theta = theta0.clone();
        for k in 0..steps {
            let (bundle, grad) = obj.support_grad(&theta).unwrap();
            assert!((bundle.total - traj.support_losses[k]).abs() < 1e-12);
            for (t, g) in theta.iter_mut().zip(grad.iter()) {
                *t -= lr * g;
            }
            let drift: f64 = theta
                .iter()
                .zip(traj.thetas[k + 1].iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(drift < 1e-12, "step {k} drifted by {drift}");
        }
        // The starting point is not mutated.
        assert_eq!(traj.thetas[0], theta0);
    }

    #[test]
    fn inner_loop_support_losses_mostly_non_increasing() {
        let set = tiny_corpus();
        let cfg = tiny_cfg();
        let mut tc = tiny_train();
        tc.inner_steps = 3;
        tc.inner_lr = 1e-3;
        let params = ModelParams::init(&cfg, 1, &mut child_rng(6, "diag")).unwrap();
        let mut rng = child_rng(31, "episodes");
        let mut ok = 0;
        let total = 10;
        for _ in 0..total {
            let ep = sample_episode(&set.meta_train, tc.n_shots, &mut rng).unwrap();
            let obj = EpisodeObjective::from_episode(&params, &cfg, &tc.loss, &ep).unwrap();
            let traj = inner_adapt(&obj, &obj.initial_theta(), tc.inner_steps, tc.inner_lr)
                .unwrap();
            let non_increasing = traj
                .support_losses
                .windows(2)
                .all(|w| w[1] <= w[0] + 1e-12);
            if non_increasing {
                ok += 1;
            }
        }
        assert!(
            ok * 10 >= total * 9,
            "support loss decreased in only {ok}/{total} episodes"
        );
    }

    #[test]
    fn meta_step_rejects_wrong_split_episodes() {
        let set = tiny_corpus();
        let cfg = tiny_cfg();
        let tc = tiny_train();
        let params = ModelParams::init(&cfg, 1, &mut child_rng(5, "split")).unwrap();
        let allowed: BTreeSet<(u32, u32)> = set
            .meta_train
            .pseudo_speakers()
            .iter()
            .map(|(k, _)| *k)
            .collect();
        let template = speaker_params_of(&params, 0).unwrap();
        let layout = FlatIndex::build(&template);
        let mut theta = layout.pack(&template);
        let mut adam = Adam::new(tc.meta_lr, theta.len());

        let bad = sample_episode(&set.meta_test, tc.n_shots, &mut child_rng(2, "bad")).unwrap();
        let err = meta_step(
            &params,
            &cfg,
            &tc,
            &allowed,
            &[bad],
            &mut theta,
            &mut adam,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contamination(_)), "{err}");

        let good = sample_episode(&set.meta_train, tc.n_shots, &mut child_rng(2, "good")).unwrap();
        let before = theta.clone();
        let (bundle, results) = meta_step(
            &params,
            &cfg,
            &tc,
            &allowed,
            &[good],
            &mut theta,
            &mut adam,
        )
        .unwrap();
        assert!(bundle.total.is_finite());
        assert_eq!(results.len(), 1);
        assert_eq!(results[0].support_losses.len(), tc.inner_steps);
        assert_ne!(theta, before, "meta step left theta unchanged");
    }

    #[test]
    fn reset_replaces_only_the_lut_and_is_deterministic() {
        let set = tiny_corpus();
        let tc = tiny_train();
        let theta_t = fake_theta_t(&set, &tc, 11);
        let a = reset_speaker_lut(&theta_t).unwrap();
        let b = reset_speaker_lut(&theta_t).unwrap();
        assert!(a.params_equal(&b.params));
        assert_eq!(a.lut_mode, LutMode::SharedSingle);
        assert_eq!(a.phase_tag, PhaseTag::ThetaT);
        assert_eq!(a.params.style.speaker_lut.dim(), (1, a.model.style_dim));

        // Everything except the LUT is bit-identical to the source.
        let idx = FlatIndex::build(&a.params);
        let mut drift = Vec::new();
        a.params.visit("", &mut |name, t| {
            if name != "style.speaker_lut" {
                let mut vals = Vec::new();
                t.for_each(|v| vals.push(v));
                drift.push((name.to_string(), vals));
            }
        });
        let mut src = std::collections::BTreeMap::new();
        theta_t.params.visit("", &mut |name, t| {
            let mut vals = Vec::new();
            t.for_each(|v| vals.push(v));
            src.insert(name.to_string(), vals);
        });
        for (name, vals) in drift {
            assert_eq!(src[&name], vals, "{name} changed during reset");
        }
        assert_eq!(idx.total_len(), FlatIndex::build(&theta_t.params).total_len() - (theta_t.params.style.speaker_lut.len() - a.params.style.speaker_lut.len()));

        // Double reset and wrong-phase input are rejected.
        assert!(matches!(
            reset_speaker_lut(&a).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn meta_train_moves_only_speaker_params_and_is_deterministic() {
        let set = tiny_corpus();
        let tc = tiny_train();
        let theta_t = fake_theta_t(&set, &tc, 13);

        // Refuses the multi-speaker LUT outright.
        assert!(matches!(
            meta_train(&theta_t, &set.meta_train, &set.meta_val).unwrap_err(),
            Error::Config(_)
        ));

        let reset = reset_speaker_lut(&theta_t).unwrap();

        // Refuses swapped splits.
        assert!(matches!(
            meta_train(&reset, &set.meta_val, &set.meta_val).unwrap_err(),
            Error::Data(_)
        ));

        let (theta_m, records) = meta_train(&reset, &set.meta_train, &set.meta_val).unwrap();
        assert_eq!(theta_m.phase_tag, PhaseTag::ThetaM);
        assert_eq!(theta_m.lut_mode, LutMode::SharedSingle);
        let meta_rows = records.iter().filter(|r| r.phase == "meta").count();
        let val_rows = records.iter().filter(|r| r.phase == "meta_val").count();
        assert_eq!(meta_rows, tc.meta_iters);
        assert_eq!(val_rows, tc.meta_iters); // val_every = 1
        assert!(records.iter().all(|r| r.total.is_finite()));

        // Frozen partitions are bit-identical; speaker params moved.
        let part = ParamPartition::build(&theta_m.params).unwrap();
        assert_eq!(
            part.shared.gather(&part.index, &theta_m.params),
            part.shared.gather(&part.index, &reset.params)
        );
        assert_eq!(
            part.prosody.gather(&part.index, &theta_m.params),
            part.prosody.gather(&part.index, &reset.params)
        );
        assert_ne!(
            part.speaker.gather(&part.index, &theta_m.params),
            part.speaker.gather(&part.index, &reset.params)
        );

        // Same inputs, same result — modulo wall time.
        let (theta_m2, records2) = meta_train(&reset, &set.meta_train, &set.meta_val).unwrap();
        assert!(theta_m.params_equal(&theta_m2.params));
        assert_eq!(records.len(), records2.len());
        assert!(records
            .iter()
            .zip(records2.iter())
            .all(|(a, b)| a.same_modulo_wall_time(b)));
    }

    #[test]
    fn pretrain_runs_deterministically_on_the_tiny_corpus() {
        let set = tiny_corpus();
        let cfg = tiny_cfg();
        let tc = tiny_train();

        // Wrong split is rejected.
        assert!(matches!(
            pretrain(&set.meta_train, &cfg, &tc).unwrap_err(),
            Error::Data(_)
        ));

        let (ckpt, records) = pretrain(&set.pretrain, &cfg, &tc).unwrap();
        assert_eq!(ckpt.phase_tag, PhaseTag::ThetaT);
        assert_eq!(ckpt.lut_mode, LutMode::MultiSpeaker);
        assert_eq!(ckpt.step, tc.pretrain_steps as u64);
        assert_eq!(
            ckpt.params.style.speaker_lut.nrows(),
            set.pretrain.speaker_ids.len()
        );
        assert_eq!(records.len(), tc.pretrain_steps);
        assert!(records.iter().all(|r| r.total.is_finite()));

        let (ckpt2, records2) = pretrain(&set.pretrain, &cfg, &tc).unwrap();
        assert!(ckpt.params_equal(&ckpt2.params));
        assert!(records
            .iter()
            .zip(records2.iter())
            .all(|(a, b)| a.same_modulo_wall_time(b)));

        // Held-out teacher-forced evaluation works on the val split.
        let ids: Vec<u32> = ckpt.train_speaker_ids.clone();
        let bundle =
            evaluate_pretrain_loss(&ckpt.params, &cfg, &tc.loss, &set.meta_val, &ids).unwrap();
        assert!(bundle.total.is_finite() && bundle.total > 0.0);
    }

    #[test]
    fn adapt_enforces_contamination_phase_and_schedule() {
        let set = tiny_corpus();
        let tc = tiny_train();
        let theta_t = fake_theta_t(&set, &tc, 17);
        let reset = reset_speaker_lut(&theta_t).unwrap();
        let (theta_m, _) = meta_train(&reset, &set.meta_train, &set.meta_val).unwrap();

        let test_speaker = *set.meta_test.speaker_ids.iter().next().unwrap();
        let samples: Vec<Utterance> = set
            .meta_test
            .utterances
            .iter()
            .filter(|u| u.speaker_id == test_speaker)
            .take(tc.n_shots)
            .cloned()
            .collect();
        assert_eq!(samples.len(), tc.n_shots);

        // Contaminated: a training speaker.
        let train_speaker = *set.pretrain.speaker_ids.iter().next().unwrap();
        let seen: Vec<Utterance> = set
            .pretrain
            .utterances
            .iter()
            .filter(|u| u.speaker_id == train_speaker)
            .take(1)
            .cloned()
            .collect();
        assert!(matches!(
            adapt(&theta_m, &seen, 1, false).unwrap_err(),
            Error::Contamination(_)
        ));

        // Mixed speakers.
        let other = set
            .meta_test
            .utterances
            .iter()
            .find(|u| u.speaker_id != test_speaker)
            .unwrap()
            .clone();
        let mixed = vec![samples[0].clone(), other];
        assert!(matches!(
            adapt(&theta_m, &mixed, 1, false).unwrap_err(),
            Error::Data(_)
        ));

        // Phase mismatches both ways.
        assert!(matches!(
            adapt(&theta_m, &samples, 1, true).unwrap_err(),
            Error::PhaseOrder(_)
        ));
        assert!(matches!(
            adapt(&theta_t, &samples, 1, false).unwrap_err(),
            Error::PhaseOrder(_)
        ));

        // Zero steps: identity, no trace, no snapshots.
        let noop = adapt(&theta_m, &samples, 0, false).unwrap();
        assert!(noop.final_checkpoint.params_equal(&theta_m.params));
        assert!(noop.trace.is_empty() && noop.snapshots.is_empty());
        assert_eq!(noop.final_checkpoint.phase_tag, PhaseTag::Adapted);

        // Three steps: decayed schedule in the trace, snapshots at 1 and 2.
        let out = adapt(&theta_m, &samples, 3, false).unwrap();
        assert_eq!(out.trace.len(), 3);
        for (t, rec) in out.trace.iter().enumerate() {
            let expected = tc.adapt_lr * tc.adapt_lr_decay.powi(t as i32);
            assert!((rec.lr - expected).abs() < 1e-15);
            assert!(rec.total.is_finite());
        }
        assert_eq!(
            out.snapshots.iter().map(|(s, _)| *s).collect::<Vec<_>>(),
            vec![1, 2]
        );
        assert!(!out.final_checkpoint.params_equal(&theta_m.params));

        // Baseline mode runs from θ_T and differs from the meta arm.
        let base = adapt(&theta_t, &samples, 3, true).unwrap();
        assert_eq!(base.trace.len(), 3);
        assert_eq!(base.final_checkpoint.params.style.speaker_lut.nrows(), 1);

        // Frozen partitions survived adaptation in both arms.
        let part = ParamPartition::build(&out.final_checkpoint.params).unwrap();
        assert_eq!(
            part.shared.gather(&part.index, &out.final_checkpoint.params),
            part.shared.gather(&part.index, &theta_m.params)
        );
        assert_eq!(
            part.prosody.gather(&part.index, &out.final_checkpoint.params),
            part.prosody.gather(&part.index, &theta_m.params)
        );
    }
}
