//! Objective evaluation: speaker similarity via an analytic embedding
//! oracle, mel-cepstral distortion, and the adaptation-speed experiment
//! comparing the meta-learned initialization against the pretrain-finetune
//! baseline.
//!
//! The corpus generator makes speaker identity an additive spectral offset
//! under a known multiplicative prosody envelope, so a speaker embedding can
//! be recovered from any mel exactly: subtract the zero-offset render of the
//! same (text, durations, prosody) and divide out the envelope. That oracle
//! replaces the external speaker-verification network; similarity values are
//! therefore comparable only within this corpus, not to published absolute
//! numbers.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, PhaseTag};
use crate::data::{Corpus, MelSpectrogram, Utterance};
use crate::error::{Error, Result};
use crate::meta::adapt;
use crate::model::{
    prosody_style, speaker_params_of, speaker_style, trunk_forward, Mode, ModelConfig,
    ModelParams, StyleMats, TrunkOut, VarianceTargets,
};
use crate::rng::child_rng;
use crate::syndata::Generator;
use rand::seq::index::sample as index_sample;

const COSINE_EPS: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Embedding oracle and metrics
// ---------------------------------------------------------------------------

/// Analytic speaker-embedding oracle backed by the corpus generator.
///
/// `embed` inverts the generative model: with the token content and prosody
/// envelope known, the temporal mean of the envelope-corrected residual is
/// the speaker offset (exactly, for noise-free renders).
pub struct EmbeddingOracle<'a> {
    pub generator: &'a Generator,
}

impl EmbeddingOracle<'_> {
    /// Embedding of `mel`, which must span `durations` frames and have been
    /// produced (or generated) for `tokens` under prosody `prosody_id`.
    pub fn embed(
        &self,
        mel: ArrayView2<f64>,
        tokens: &[u16],
        durations: &[u32],
        prosody_id: u32,
    ) -> Result<Array1<f64>> {
        let bins = self.generator.cfg.bins;
        let frames: usize = durations.iter().map(|&d| d as usize).sum();
        if frames == 0 {
            return Err(Error::Data("embedding needs at least one frame".into()));
        }
        if mel.dim() != (frames, bins) {
            return Err(Error::shape(
                "embedding input",
                format!("({frames}, {bins})"),
                format!("{:?}", mel.dim()),
            ));
        }
        let pro = self.generator.prosody(prosody_id)?;
        let zero = Array1::zeros(bins);
        let base = self
            .generator
            .render_mel_with_offset(tokens, durations, &zero, pro);
        let mut emb = Array1::<f64>::zeros(bins);
        for t in 0..frames {
            let env = pro.envelope(t);
            for b in 0..bins {
                emb[b] += (mel[[t, b]] - base[[t, b]]) / env;
            }
        }
        emb /= frames as f64;
        Ok(emb)
    }

    /// The target speaker's reference embedding: its generative offset.
    pub fn reference(&self, speaker_id: u32) -> Result<Array1<f64>> {
        Ok(self.generator.speaker(speaker_id)?.offset.clone())
    }
}

/// Cosine of the angle between two vectors, with an ε-guarded denominator
/// (zero vectors give 0). Clamped to [−1, 1] against rounding.
pub fn cosine_similarity(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine dimension mismatch");
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb).max(COSINE_EPS)).clamp(-1.0, 1.0)
}

/// Orthonormal DCT-II matrix of size `n`: row k maps a frame to cepstral
/// coefficient k.
fn dct_matrix(n: usize) -> Array2<f64> {
    let mut m = Array2::zeros((n, n));
    for k in 0..n {
        let s = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for b in 0..n {
            m[[k, b]] = s * (std::f64::consts::PI * k as f64 * (2 * b + 1) as f64
                / (2 * n) as f64)
                .cos();
        }
    }
    m
}

/// Mel-cepstral distortion in dB between two frame-aligned spectrograms:
/// per frame, take the orthonormal DCT-II of each mel frame and accumulate
/// (10/ln 10)·√(2·Σ_{d≥1}(c_d − c′_d)²) over coefficients 1..bins−1
/// (the energy coefficient 0 is excluded); the result is the frame mean.
/// Frame alignment is the caller's job (teacher-forced generation).
pub fn mcd(generated: &MelSpectrogram, reference: &MelSpectrogram) -> Result<f64> {
    if generated.values.dim() != reference.values.dim() {
        return Err(Error::shape(
            "mel-cepstral distortion",
            format!("{:?}", reference.values.dim()),
            format!("{:?}", generated.values.dim()),
        ));
    }
    let (frames, bins) = generated.values.dim();
    let dct = dct_matrix(bins);
    let cg = generated.values.dot(&dct.t());
    let cr = reference.values.dot(&dct.t());
    let scale = 10.0 / std::f64::consts::LN_10;
    let mut total = 0.0;
    for t in 0..frames {
        let mut ss = 0.0;
        for d in 1..bins {
            let diff = cg[[t, d]] - cr[[t, d]];
            ss += diff * diff;
        }
        total += scale * (2.0 * ss).sqrt();
    }
    Ok(total / frames as f64)
}

// ---------------------------------------------------------------------------
// Synthesis and checkpoint evaluation
// ---------------------------------------------------------------------------

/// Runs the full model forward with the checkpoint's speaker parameters
/// (LUT row 0) and a prosody style extracted from `style_ref`. Pass
/// teacher-forcing targets to pin durations (MCD probes); otherwise
/// durations are predicted.
pub fn synthesize(
    params: &ModelParams<f64>,
    cfg: &ModelConfig,
    tokens: &[u16],
    style_ref: &MelSpectrogram,
    targets: Option<&VarianceTargets<'_>>,
) -> Result<TrunkOut<f64>> {
    let (pstyle, _) = prosody_style(&params.style, style_ref, cfg)?;
    let sp = speaker_params_of(params, 0)?;
    let style = StyleMats::new(speaker_style(&sp, cfg), &pstyle);
    let mode = if targets.is_some() {
        Mode::TeacherForced
    } else {
        Mode::Inference
    };
    let (out, _) = trunk_forward(params, &style, tokens, mode, targets, cfg, &mut None)?;
    Ok(out)
}

/// Similarity and distortion of an adapted checkpoint on one test speaker.
///
/// Similarity: for every probe text × style reference, synthesize in
/// inference mode, embed the output (envelope-corrected with the reference's
/// prosody), and average the cosine against the speaker's reference
/// embedding. MCD: teacher-forced self-referenced generation against the
/// ground-truth mel, neutral probes only. Probes must be disjoint from the
/// adaptation samples.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    oracle: &EmbeddingOracle<'_>,
    speaker_id: u32,
    probes: &[Utterance],
    style_refs: &[Utterance],
    adaptation_samples: &[Utterance],
) -> Result<(f64, f64)> {
    ckpt.require_phase(&[PhaseTag::Adapted], "evaluation")?;
    if probes.is_empty() || style_refs.is_empty() {
        return Err(Error::Data("evaluation needs probes and style references".into()));
    }
    for p in probes {
        if p.speaker_id != speaker_id {
            return Err(Error::Data(format!(
                "probe speaker {} does not match target {speaker_id}",
                p.speaker_id
            )));
        }
        if adaptation_samples.contains(p) {
            return Err(Error::Contamination(
                "probe utterance overlaps the adaptation set".into(),
            ));
        }
    }
    let cfg = &ckpt.model;
    let reference = oracle.reference(speaker_id)?;

    let mut sim_sum = 0.0;
    let mut sim_n = 0usize;
    for probe in probes {
        for style in style_refs {
            let out = synthesize(&ckpt.params, cfg, &probe.text.tokens, &style.mel, None)?;
            let emb = oracle.embed(
                out.final_mel.view(),
                &probe.text.tokens,
                &out.durations,
                style.prosody_id,
            )?;
            sim_sum += cosine_similarity(emb.view(), reference.view());
            sim_n += 1;
        }
    }

    let mut mcd_sum = 0.0;
    let mut mcd_n = 0usize;
    for probe in probes {
        if probe.prosody_id != 0 {
            continue;
        }
        let targets = VarianceTargets {
            durations: &probe.durations,
            pitch: &probe.pitch,
            energy: &probe.energy,
        };
        let out = synthesize(
            &ckpt.params,
            cfg,
            &probe.text.tokens,
            &probe.mel,
            Some(&targets),
        )?;
        let generated = MelSpectrogram::new(out.final_mel)?;
        mcd_sum += mcd(&generated, &probe.mel)?;
        mcd_n += 1;
    }
    if mcd_n == 0 {
        return Err(Error::Data("no neutral probes for the MCD measurement".into()));
    }
    Ok((sim_sum / sim_n as f64, mcd_sum / mcd_n as f64))
}

// ---------------------------------------------------------------------------
// Adaptation-speed experiment
// ---------------------------------------------------------------------------

/// Which initialization an adaptation run started from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    Meta,
    Baseline,
}

impl std::fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AdaptMode::Meta => write!(f, "meta"),
            AdaptMode::Baseline => write!(f, "baseline"),
        }
    }
}

/// One measurement along an adaptation run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub similarity: f64,
    pub mcd: f64,
}

/// Similarity/MCD versus adaptation step for one (mode, speaker, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationCurve {
    pub mode: AdaptMode,
    pub speaker_id: u32,
    pub seed: u64,
    pub points: Vec<CurvePoint>,
}

impl AdaptationCurve {
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Data("adaptation curve has no points".into()));
        }
        for w in self.points.windows(2) {
            if w[1].step <= w[0].step {
                return Err(Error::Data(format!(
                    "curve steps not strictly increasing: {} then {}",
                    w[0].step, w[1].step
                )));
            }
        }
        for p in &self.points {
            if !(-1.0..=1.0).contains(&p.similarity) || !p.similarity.is_finite() {
                return Err(Error::Data(format!(
                    "similarity {} outside [-1, 1] at step {}",
                    p.similarity, p.step
                )));
            }
            if p.mcd < 0.0 || !p.mcd.is_finite() {
                return Err(Error::Data(format!(
                    "negative or non-finite mcd {} at step {}",
                    p.mcd, p.step
                )));
            }
        }
        Ok(())
    }
}

/// Per-cell evaluation materials, resolved once up front.
struct CellPlan {
    speaker_id: u32,
    seed: u64,
    mode: AdaptMode,
    samples: Vec<Utterance>,
    probes: Vec<Utterance>,
    style_refs: Vec<Utterance>,
}

/// Picks, per prosody id, one intra-cluster and one cross-cluster style
/// reference from the training split, relative to the target speaker's
/// offset cluster (the corpus analogue of intra- vs. cross-gender).
fn pick_style_refs(
    generator: &Generator,
    train_corpus: &Corpus,
    target_speaker: u32,
) -> Result<Vec<Utterance>> {
    let target_cluster = generator.speaker(target_speaker)?.cluster;
    let mut refs = Vec::new();
    let prosody_ids: Vec<u32> = train_corpus.prosody_ids.iter().copied().collect();
    for pid in prosody_ids {
        let mut intra = None;
        let mut cross = None;
        for u in &train_corpus.utterances {
            if u.prosody_id != pid {
                continue;
            }
            let cluster = generator.speaker(u.speaker_id)?.cluster;
            if cluster == target_cluster && intra.is_none() {
                intra = Some(u.clone());
            } else if cluster != target_cluster && cross.is_none() {
                cross = Some(u.clone());
            }
            if intra.is_some() && cross.is_some() {
                break;
            }
        }
        refs.extend(intra);
        refs.extend(cross);
    }
    if refs.is_empty() {
        return Err(Error::Data("no style references found in the training split".into()));
    }
    Ok(refs)
}

/// Builds the (speaker × seed × mode) cell plans: per cell, `n_shots`
/// adaptation samples drawn by seed, a disjoint probe set, and the style
/// references.
fn plan_cells(
    generator: &Generator,
    test_corpus: &Corpus,
    train_corpus: &Corpus,
    n_shots: usize,
    seeds: &[u64],
    max_probes: usize,
) -> Result<Vec<CellPlan>> {
    let mut cells = Vec::new();
    for &speaker_id in &test_corpus.speaker_ids {
        let utts: Vec<&Utterance> = test_corpus
            .utterances
            .iter()
            .filter(|u| u.speaker_id == speaker_id)
            .collect();
        if utts.len() < n_shots + 1 {
            return Err(Error::Data(format!(
                "speaker {speaker_id} has {} utterances; needs {} for adaptation plus probes",
                utts.len(),
                n_shots + 1
            )));
        }
        let style_refs = pick_style_refs(generator, train_corpus, speaker_id)?;
        for &seed in seeds {
            let mut rng = child_rng(seed, &format!("adapt-samples-{speaker_id}"));
            let picks = index_sample(&mut rng, utts.len(), n_shots);
            let chosen: Vec<usize> = picks.iter().collect();
            let samples: Vec<Utterance> = chosen.iter().map(|&i| utts[i].clone()).collect();
            let probes: Vec<Utterance> = (0..utts.len())
                .filter(|i| !chosen.contains(i))
                .take(max_probes)
                .map(|i| utts[i].clone())
                .collect();
            for mode in [AdaptMode::Meta, AdaptMode::Baseline] {
                cells.push(CellPlan {
                    speaker_id,
                    seed,
                    mode,
                    samples: samples.clone(),
                    probes: probes.clone(),
                    style_refs: style_refs.clone(),
                });
            }
        }
    }
    Ok(cells)
}

/// Runs the full adaptation-speed comparison: for every test speaker × seed
/// × {meta, baseline}, adapt for `steps` updates, evaluate at every snapshot
/// mark (plus the final step), and return one curve per cell. Cells run in
/// parallel; the output order and values are deterministic.
pub fn run_adaptation_experiment(
    theta_m: &Checkpoint,
    theta_t: &Checkpoint,
    generator: &Generator,
    test_corpus: &Corpus,
    train_corpus: &Corpus,
    steps: usize,
    seeds: &[u64],
) -> Result<Vec<AdaptationCurve>> {
    theta_m.require_phase(&[PhaseTag::ThetaM], "experiment meta arm")?;
    theta_t.require_phase(&[PhaseTag::ThetaT], "experiment baseline arm")?;
    if theta_m.train_speaker_ids != theta_t.train_speaker_ids
        || theta_m.model != theta_t.model
    {
        return Err(Error::Config(
            "meta and baseline checkpoints come from different pretrain lineages".into(),
        ));
    }
    if steps == 0 {
        return Err(Error::Config("experiment needs at least one adaptation step".into()));
    }
    let n_shots = theta_m.train.n_shots;
    let cells = plan_cells(generator, test_corpus, train_corpus, n_shots, seeds, 4)?;
    let oracle = EmbeddingOracle { generator };

    let curves: Result<Vec<AdaptationCurve>> = cells
        .par_iter()
        .map(|cell| {
            let (ckpt, baseline) = match cell.mode {
                AdaptMode::Meta => (theta_m, false),
                AdaptMode::Baseline => (theta_t, true),
            };
            // Seed the adaptation arm itself: the randomized baseline LUT row
            // derives from the checkpoint's train.seed, so fold the cell seed
            // in by rewriting the config copy.
            let mut seeded = ckpt.clone();
            seeded.train.seed = seeded.train.seed.wrapping_add(cell.seed);
            let outcome = adapt(&seeded, &cell.samples, steps, baseline)?;
            let mut marks: Vec<(usize, &Checkpoint)> = outcome
                .snapshots
                .iter()
                .map(|(s, c)| (*s, c))
                .collect();
            if marks.last().map(|(s, _)| *s) != Some(steps) {
                marks.push((steps, &outcome.final_checkpoint));
            }
            let mut points = Vec::with_capacity(marks.len());
            for (step, snap) in marks {
                let (similarity, mcd) = evaluate_checkpoint(
                    snap,
                    &oracle,
                    cell.speaker_id,
                    &cell.probes,
                    &cell.style_refs,
                    &cell.samples,
                )?;
                points.push(CurvePoint {
                    step,
                    similarity,
                    mcd,
                });
            }
            let curve = AdaptationCurve {
                mode: cell.mode,
                speaker_id: cell.speaker_id,
                seed: cell.seed,
                points,
            };
            curve.validate()?;
            Ok(curve)
        })
        .collect();
    curves
}

/// Writes curves as pretty JSON.
pub fn write_curves(path: &std::path::Path, curves: &[AdaptationCurve]) -> Result<()> {
    let text = serde_json::to_string_pretty(curves)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads curves back from JSON.
pub fn read_curves(path: &std::path::Path) -> Result<Vec<AdaptationCurve>> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Mean metric values of one arm at one snapshot step, over all cells that
/// report that step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStat {
    pub step: usize,
    pub cells: usize,
    pub mean_similarity: f64,
    pub mean_mcd: f64,
}

/// Paired meta-vs-baseline comparison at one step, over the (speaker, seed)
/// cells where both arms report that step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedStat {
    pub step: usize,
    pub cells: usize,
    /// Cells where the meta arm's similarity strictly exceeds the baseline's.
    pub meta_wins: usize,
    /// Mean of (meta − baseline) similarity over the paired cells.
    pub mean_similarity_gap: f64,
}

/// Per-step aggregates of an experiment's curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub meta: Vec<StepStat>,
    pub baseline: Vec<StepStat>,
    pub paired: Vec<PairedStat>,
}

impl ExperimentSummary {
    fn mode_stats(&self, mode: AdaptMode) -> &[StepStat] {
        match mode {
            AdaptMode::Meta => &self.meta,
            AdaptMode::Baseline => &self.baseline,
        }
    }

    /// The step stat of one arm at one step, if any cell reported it.
    pub fn stat_at(&self, mode: AdaptMode, step: usize) -> Option<&StepStat> {
        self.mode_stats(mode).iter().find(|s| s.step == step)
    }

    /// The paired comparison at one step, if any cell pair reported it.
    pub fn paired_at(&self, step: usize) -> Option<&PairedStat> {
        self.paired.iter().find(|s| s.step == step)
    }

    /// Earliest step at which an arm's mean similarity reaches `level`.
    pub fn first_step_reaching(&self, mode: AdaptMode, level: f64) -> Option<usize> {
        self.mode_stats(mode)
            .iter()
            .find(|s| s.mean_similarity >= level)
            .map(|s| s.step)
    }
}

/// Aggregates experiment curves into per-step means and paired win counts.
pub fn summarize(curves: &[AdaptationCurve]) -> Result<ExperimentSummary> {
    if curves.is_empty() {
        return Err(Error::Data("no curves to summarize".into()));
    }
    let mut per_mode: BTreeMap<(bool, usize), (usize, f64, f64)> = BTreeMap::new();
    let mut pairs: BTreeMap<(u32, u64), [Option<usize>; 2]> = BTreeMap::new();
    for (i, c) in curves.iter().enumerate() {
        c.validate()?;
        let arm = matches!(c.mode, AdaptMode::Baseline) as usize;
        let slot = &mut pairs.entry((c.speaker_id, c.seed)).or_default()[arm];
        if slot.is_some() {
            return Err(Error::Data(format!(
                "duplicate {} curve for speaker {} seed {}",
                c.mode, c.speaker_id, c.seed
            )));
        }
        *slot = Some(i);
        for p in &c.points {
            let e = per_mode.entry((arm == 1, p.step)).or_insert((0, 0.0, 0.0));
            e.0 += 1;
            e.1 += p.similarity;
            e.2 += p.mcd;
        }
    }
    let collect_mode = |baseline: bool| -> Vec<StepStat> {
        per_mode
            .iter()
            .filter(|((b, _), _)| *b == baseline)
            .map(|(&(_, step), &(n, sim, mcd))| StepStat {
                step,
                cells: n,
                mean_similarity: sim / n as f64,
                mean_mcd: mcd / n as f64,
            })
            .collect()
    };

    let mut paired_acc: BTreeMap<usize, (usize, usize, f64)> = BTreeMap::new();
    for slots in pairs.values() {
        let [Some(m), Some(b)] = slots else { continue };
        for mp in &curves[*m].points {
            let Some(bp) = curves[*b].points.iter().find(|p| p.step == mp.step) else {
                continue;
            };
            let e = paired_acc.entry(mp.step).or_insert((0, 0, 0.0));
            e.0 += 1;
            e.1 += (mp.similarity > bp.similarity) as usize;
            e.2 += mp.similarity - bp.similarity;
        }
    }
    Ok(ExperimentSummary {
        meta: collect_mode(false),
        baseline: collect_mode(true),
        paired: paired_acc
            .into_iter()
            .map(|(step, (n, wins, gap))| PairedStat {
                step,
                cells: n,
                meta_wins: wins,
                mean_similarity_gap: gap / n as f64,
            })
            .collect(),
    })
}
