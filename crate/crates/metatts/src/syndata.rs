//! Synthetic multi-speaker, multi-prosody corpus generator.
//!
//! Construction makes the generative factors analytically separable:
//! speaker identity is an additive spectral offset, prosody a multiplicative
//! temporal envelope (plus an additive pitch contour applied before the
//! envelope), so evaluation can recover the speaker offset from any
//! noise-free mel exactly:
//!
//! mel[t][b] = (template[sym_t][b] + offset[b] + contour(t)) * env(t) + noise
//!
//! Speakers fall in two offset clusters (the corpus's stand-in for a binary
//! speaker attribute such as gender), with held-out test speakers rendered
//! only with the neutral prosody.

use crate::data::{Corpus, MelSpectrogram, PhonemeSequence, SplitTag, TaskEpisode, Utterance};
use crate::error::{Error, Result};
use crate::rng::{child_rng, fill_normal, normal};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::f64::consts::TAU;

// Profile draw ranges. The analytic pitch/energy quantization ranges below
// are derived from these, so keep them in sync.
const RATE_RANGE: (f64, f64) = (0.8, 1.25);
const PITCH_BASE_RANGE: (f64, f64) = (-1.0, 1.0);
const ENV_AMP_RANGE: (f64, f64) = (0.15, 0.45);
const ENV_PERIOD_RANGE: (f64, f64) = (6.0, 12.0);
const CONTOUR_AMP_RANGE: (f64, f64) = (0.2, 0.5);
const CONTOUR_PERIOD_RANGE: (f64, f64) = (5.0, 11.0);
const ENERGY_SCALE_RANGE: (f64, f64) = (0.8, 1.25);
const PROSODY_RATE_RANGE: (f64, f64) = (0.85, 1.15);
const TEMPLATE_STD: f64 = 0.6;
const CLUSTER_CENTER_STD: f64 = 0.4;
const SPEAKER_DEV_STD: f64 = 0.18;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Total speakers including the held-out test speakers.
    pub n_speakers: u32,
    /// Held-out speakers (last ids), neutral prosody only.
    pub test_speakers: u32,
    pub n_prosodies: u32,
    pub alphabet: usize,
    pub bins: usize,
    pub utts_per_pseudo: usize,
    pub noise_std: f64,
    /// Inclusive token-count range for sampled texts.
    pub text_len: (usize, usize),
    /// Inclusive base frame-count range drawn per alphabet symbol.
    pub base_duration: (u32, u32),
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_speakers: 34,
            test_speakers: 4,
            n_prosodies: 4,
            alphabet: 32,
            bins: 20,
            utts_per_pseudo: 20,
            noise_std: 0.02,
            text_len: (3, 6),
            base_duration: (2, 4),
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 5 {
            return Err(Error::Config(format!(
                "n_speakers must be >= 5, got {}",
                self.n_speakers
            )));
        }
        if self.test_speakers == 0 || self.test_speakers >= self.n_speakers {
            return Err(Error::Config("test_speakers must be in 1..n_speakers".into()));
        }
        if self.n_train_speakers() < 2 {
            return Err(Error::Config(format!(
                "train split empty or too small: {} speakers left after reserving {} for test",
                self.n_train_speakers(),
                self.test_speakers
            )));
        }
        if self.n_prosodies == 0 {
            return Err(Error::Config("n_prosodies must be >= 1".into()));
        }
        if self.alphabet == 0 || self.alphabet > u16::MAX as usize {
            return Err(Error::Config("alphabet out of range".into()));
        }
        if self.bins < 2 {
            return Err(Error::Config("bins must be >= 2".into()));
        }
        if self.utts_per_pseudo < 2 {
            return Err(Error::Config("utts_per_pseudo must be >= 2".into()));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(Error::Config("noise_std must be finite and >= 0".into()));
        }
        if self.text_len.0 == 0 || self.text_len.0 > self.text_len.1 {
            return Err(Error::Config("text_len range invalid".into()));
        }
        if self.base_duration.0 == 0 || self.base_duration.0 > self.base_duration.1 {
            return Err(Error::Config("base_duration range invalid".into()));
        }
        Ok(())
    }

    pub fn n_train_speakers(&self) -> u32 {
        self.n_speakers - self.test_speakers
    }

    /// Analytic bounds of per-token pitch targets (base plus contour).
    pub fn pitch_range(&self) -> (f64, f64) {
        (
            PITCH_BASE_RANGE.0 - CONTOUR_AMP_RANGE.1,
            PITCH_BASE_RANGE.1 + CONTOUR_AMP_RANGE.1,
        )
    }

    /// Analytic bounds of per-token energy targets (scale times envelope).
    pub fn energy_range(&self) -> (f64, f64) {
        (
            ENERGY_SCALE_RANGE.0 * (1.0 - ENV_AMP_RANGE.1),
            ENERGY_SCALE_RANGE.1 * (1.0 + ENV_AMP_RANGE.1),
        )
    }
}

/// One speaker's generative factors.
#[derive(Clone, Debug)]
pub struct SpeakerProfile {
    pub speaker_id: u32,
    /// Additive spectral signature, length = bins.
    pub offset: Array1<f64>,
    /// Speaking-rate multiplier on durations.
    pub rate: f64,
    pub pitch_base: f64,
    /// Offset cluster (two clusters; the corpus's binary speaker attribute).
    pub cluster: usize,
}

/// One prosody's generative factors; id 0 is the neutral prosody
/// (flat envelope, zero contour, unit scales).
#[derive(Clone, Debug)]
pub struct ProsodyProfile {
    pub prosody_id: u32,
    pub env_amp: f64,
    pub env_period: f64,
    pub env_phase: f64,
    pub contour_amp: f64,
    pub contour_period: f64,
    pub contour_phase: f64,
    pub energy_scale: f64,
    /// Multiplier on token durations.
    pub rate_factor: f64,
}

impl ProsodyProfile {
    pub fn neutral(prosody_id: u32) -> Self {
        ProsodyProfile {
            prosody_id,
            env_amp: 0.0,
            env_period: 8.0,
            env_phase: 0.0,
            contour_amp: 0.0,
            contour_period: 8.0,
            contour_phase: 0.0,
            energy_scale: 1.0,
            rate_factor: 1.0,
        }
    }

    /// Temporal gain at frame t; always within [0.5, 1.5].
    pub fn envelope(&self, t: usize) -> f64 {
        1.0 + self.env_amp * (TAU * t as f64 / self.env_period + self.env_phase).sin()
    }

    /// Additive pitch contour at frame t (applied before the envelope).
    pub fn contour(&self, t: usize) -> f64 {
        self.contour_amp * (TAU * t as f64 / self.contour_period + self.contour_phase).sin()
    }
}

/// All generative state: profiles, token templates, and base durations.
/// Exposed so evaluation can build exact oracles.
#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    /// Per-symbol spectral template, [alphabet x bins].
    pub token_templates: Array2<f64>,
    /// Per-symbol base frame count.
    pub base_durations: Vec<u32>,
    pub speakers: Vec<SpeakerProfile>,
    pub prosodies: Vec<ProsodyProfile>,
    pub cluster_centers: [Array1<f64>; 2],
}

fn uniform_in(rng: &mut impl Rng, range: (f64, f64)) -> f64 {
    range.0 + (range.1 - range.0) * rng.random::<f64>()
}

impl Generator {
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = child_rng(cfg.seed, "corpus");

        let mut token_templates = Array2::zeros((cfg.alphabet, cfg.bins));
        fill_normal(&mut rng, token_templates.as_slice_mut().unwrap(), 0.0, TEMPLATE_STD);

        let base_durations: Vec<u32> = (0..cfg.alphabet)
            .map(|_| rng.random_range(cfg.base_duration.0..=cfg.base_duration.1))
            .collect();

        let mut centers = [Array1::zeros(cfg.bins), Array1::zeros(cfg.bins)];
        for c in centers.iter_mut() {
            fill_normal(&mut rng, c.as_slice_mut().unwrap(), 0.0, CLUSTER_CENTER_STD);
        }

        let speakers: Vec<SpeakerProfile> = (0..cfg.n_speakers)
            .map(|speaker_id| {
                let cluster = (speaker_id % 2) as usize;
                let mut dev = Array1::zeros(cfg.bins);
                fill_normal(&mut rng, dev.as_slice_mut().unwrap(), 0.0, SPEAKER_DEV_STD);
                SpeakerProfile {
                    speaker_id,
                    offset: &centers[cluster] + &dev,
                    rate: uniform_in(&mut rng, RATE_RANGE),
                    pitch_base: uniform_in(&mut rng, PITCH_BASE_RANGE),
                    cluster,
                }
            })
            .collect();

        let prosodies: Vec<ProsodyProfile> = (0..cfg.n_prosodies)
            .map(|prosody_id| {
                if prosody_id == 0 {
                    ProsodyProfile::neutral(0)
                } else {
                    ProsodyProfile {
                        prosody_id,
                        env_amp: uniform_in(&mut rng, ENV_AMP_RANGE),
                        env_period: uniform_in(&mut rng, ENV_PERIOD_RANGE),
                        env_phase: uniform_in(&mut rng, (0.0, TAU)),
                        contour_amp: uniform_in(&mut rng, CONTOUR_AMP_RANGE),
                        contour_period: uniform_in(&mut rng, CONTOUR_PERIOD_RANGE),
                        contour_phase: uniform_in(&mut rng, (0.0, TAU)),
                        energy_scale: uniform_in(&mut rng, ENERGY_SCALE_RANGE),
                        rate_factor: uniform_in(&mut rng, PROSODY_RATE_RANGE),
                    }
                }
            })
            .collect();

        Ok(Generator {
            cfg,
            token_templates,
            base_durations,
            speakers,
            prosodies,
            cluster_centers: centers,
        })
    }

    pub fn speaker(&self, id: u32) -> Result<&SpeakerProfile> {
        self.speakers
            .get(id as usize)
            .ok_or_else(|| Error::Lookup(format!("unknown speaker {id}")))
    }

    pub fn prosody(&self, id: u32) -> Result<&ProsodyProfile> {
        self.prosodies
            .get(id as usize)
            .ok_or_else(|| Error::Lookup(format!("unknown prosody {id}")))
    }

    /// Token durations for (text, speaker, prosody):
    /// round(base * rate * rate_factor), clamped to >= 1.
    pub fn durations(&self, text: &[u16], spk: &SpeakerProfile, pro: &ProsodyProfile) -> Vec<u32> {
        text.iter()
            .map(|&sym| {
                let base = self.base_durations[sym as usize] as f64;
                ((base * spk.rate * pro.rate_factor).round() as u32).max(1)
            })
            .collect()
    }

    /// Noise-free mel for explicit durations with an arbitrary offset vector
    /// (pass zeros for the zero-offset oracle render). Not f32-rounded.
    pub fn render_mel_with_offset(
        &self,
        text: &[u16],
        durations: &[u32],
        offset: &Array1<f64>,
        pro: &ProsodyProfile,
    ) -> Array2<f64> {
        let frames: usize = durations.iter().map(|&d| d as usize).sum();
        let mut mel = Array2::zeros((frames, self.cfg.bins));
        let mut t = 0usize;
        for (&sym, &dur) in text.iter().zip(durations.iter()) {
            for _ in 0..dur {
                let env = pro.envelope(t);
                let contour = pro.contour(t);
                for b in 0..self.cfg.bins {
                    mel[[t, b]] =
                        (self.token_templates[[sym as usize, b]] + offset[b] + contour) * env;
                }
                t += 1;
            }
        }
        mel
    }

    /// Full synthetic record. Deterministic given (text, ids, noise_seed);
    /// mel values are rounded to f32 precision so in-memory corpora equal
    /// their exported form.
    pub fn render_utterance(
        &self,
        text: &PhonemeSequence,
        spk: &SpeakerProfile,
        pro: &ProsodyProfile,
        noise_seed: u64,
    ) -> Result<Utterance> {
        if text.is_empty() {
            return Err(Error::Data("cannot render empty text".into()));
        }
        let durations = self.durations(&text.tokens, spk, pro);
        let mut mel = self.render_mel_with_offset(&text.tokens, &durations, &spk.offset, pro);
        if self.cfg.noise_std > 0.0 {
            let mut nrng = child_rng(self.cfg.seed, &format!("noise-{noise_seed}"));
            for v in mel.iter_mut() {
                *v += self.cfg.noise_std * normal(&mut nrng);
            }
        }
        mel.mapv_inplace(|v| v as f32 as f64);

        // Per-token analytic pitch/energy: base plus contour mean, and
        // scale times envelope mean, over the token's frames.
        let mut pitch = Vec::with_capacity(text.len());
        let mut energy = Vec::with_capacity(text.len());
        let mut t = 0usize;
        for &dur in &durations {
            let mut csum = 0.0;
            let mut esum = 0.0;
            for _ in 0..dur {
                csum += pro.contour(t);
                esum += pro.envelope(t);
                t += 1;
            }
            pitch.push(spk.pitch_base + csum / dur as f64);
            energy.push(pro.energy_scale * esum / dur as f64);
        }

        Ok(Utterance {
            text: text.clone(),
            mel: MelSpectrogram::new(mel)?,
            durations,
            pitch,
            energy,
            speaker_id: spk.speaker_id,
            prosody_id: pro.prosody_id,
        })
    }

    fn sample_text(&self, rng: &mut ChaCha8Rng) -> PhonemeSequence {
        let len = rng.random_range(self.cfg.text_len.0..=self.cfg.text_len.1);
        let tokens = (0..len)
            .map(|_| rng.random_range(0..self.cfg.alphabet as u16))
            .collect();
        PhonemeSequence { tokens }
    }

    /// Builds the four splits. Meta train/val split by pseudo-speaker
    /// (one sixth held out for validation); the pretrain split reuses the
    /// meta-train records so meta-val stays unseen by pretraining; test
    /// speakers are rendered with the neutral prosody only.
    pub fn make_corpus(&self) -> Result<CorpusSet> {
        let cfg = &self.cfg;
        let n_train = cfg.n_train_speakers();

        let mut pseudo: Vec<(u32, u32)> = Vec::new();
        for s in 0..n_train {
            for p in 0..cfg.n_prosodies {
                pseudo.push((s, p));
            }
        }
        let n_val = (pseudo.len() / 6).max(1);
        let mut split_rng = child_rng(cfg.seed, "pseudo-split");
        let mut shuffled = pseudo.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut split_rng);
        let val_set: BTreeSet<(u32, u32)> = shuffled[..n_val].iter().copied().collect();

        let mut text_rng = child_rng(cfg.seed, "texts");
        let mut noise_counter = 0u64;
        let mut train_utts = Vec::new();
        let mut val_utts = Vec::new();
        for &(s, p) in &pseudo {
            let spk = self.speaker(s)?;
            let pro = self.prosody(p)?;
            for _ in 0..cfg.utts_per_pseudo {
                let text = self.sample_text(&mut text_rng);
                let utt = self.render_utterance(&text, spk, pro, noise_counter)?;
                noise_counter += 1;
                if val_set.contains(&(s, p)) {
                    val_utts.push(utt);
                } else {
                    train_utts.push(utt);
                }
            }
        }

        let mut test_utts = Vec::new();
        for s in n_train..cfg.n_speakers {
            let spk = self.speaker(s)?;
            let pro = self.prosody(0)?;
            for _ in 0..cfg.utts_per_pseudo {
                let text = self.sample_text(&mut text_rng);
                let utt = self.render_utterance(&text, spk, pro, noise_counter)?;
                noise_counter += 1;
                test_utts.push(utt);
            }
        }

        let train_speakers: BTreeSet<u32> = train_utts.iter().map(|u| u.speaker_id).collect();
        let val_speakers: BTreeSet<u32> = val_utts.iter().map(|u| u.speaker_id).collect();
        let all_prosodies: BTreeSet<u32> = (0..cfg.n_prosodies).collect();

        let mk = |utts: &[Utterance], speakers: &BTreeSet<u32>, tag: SplitTag| Corpus {
            utterances: utts.to_vec(),
            speaker_ids: speakers.clone(),
            prosody_ids: all_prosodies.clone(),
            split_tag: tag,
            bins: cfg.bins,
            alphabet: cfg.alphabet,
        };

        let set = CorpusSet {
            pretrain: mk(&train_utts, &train_speakers, SplitTag::Pretrain),
            meta_train: mk(&train_utts, &train_speakers, SplitTag::MetaTrain),
            meta_val: mk(&val_utts, &val_speakers, SplitTag::MetaVal),
            meta_test: Corpus {
                utterances: test_utts,
                speaker_ids: (n_train..cfg.n_speakers).collect(),
                prosody_ids: [0u32].into_iter().collect(),
                split_tag: SplitTag::MetaTest,
                bins: cfg.bins,
                alphabet: cfg.alphabet,
            },
        };
        set.validate()?;
        Ok(set)
    }
}

/// The four corpus splits.
#[derive(Clone, Debug)]
pub struct CorpusSet {
    pub pretrain: Corpus,
    pub meta_train: Corpus,
    pub meta_val: Corpus,
    pub meta_test: Corpus,
}

impl CorpusSet {
    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.meta_train.validate()?;
        self.meta_val.validate()?;
        self.meta_test.validate()?;
        // test speakers disjoint from every other split
        for s in &self.meta_test.speaker_ids {
            if self.pretrain.speaker_ids.contains(s)
                || self.meta_train.speaker_ids.contains(s)
                || self.meta_val.speaker_ids.contains(s)
            {
                return Err(Error::Data(format!("test speaker {s} leaks into training splits")));
            }
        }
        // train/val disjoint by pseudo-speaker
        let train_pseudo: BTreeSet<(u32, u32)> = self
            .meta_train
            .utterances
            .iter()
            .map(|u| (u.speaker_id, u.prosody_id))
            .collect();
        for u in &self.meta_val.utterances {
            if train_pseudo.contains(&(u.speaker_id, u.prosody_id)) {
                return Err(Error::Data(format!(
                    "pseudo-speaker ({}, {}) appears in both meta_train and meta_val",
                    u.speaker_id, u.prosody_id
                )));
            }
        }
        Ok(())
    }
}

/// Convenience wrapper: build the generator and all splits from a config.
pub fn make_corpus(cfg: &GeneratorConfig) -> Result<(Generator, CorpusSet)> {
    let generator = Generator::new(cfg.clone())?;
    let set = generator.make_corpus()?;
    Ok((generator, set))
}

/// Samples an N-shot episode: uniform over pseudo-speakers with at least 2N
/// records, then 2N distinct records split into support and query.
pub fn sample_episode(corpus: &Corpus, n: usize, rng: &mut ChaCha8Rng) -> Result<TaskEpisode> {
    let groups = corpus.pseudo_speakers();
    let eligible: Vec<&((u32, u32), Vec<usize>)> =
        groups.iter().filter(|(_, idx)| idx.len() >= 2 * n).collect();
    if eligible.is_empty() {
        return Err(Error::Data(format!(
            "no pseudo-speaker has {} utterances for an {n}-shot episode",
            2 * n
        )));
    }
    let ((speaker_id, prosody_id), indices) = eligible[rng.random_range(0..eligible.len())];
    let picks = rand::seq::index::sample(rng, indices.len(), 2 * n);
    let chosen: Vec<usize> = picks.iter().map(|i| indices[i]).collect();
    let support = chosen[..n]
        .iter()
        .map(|&i| corpus.utterances[i].clone())
        .collect();
    let query = chosen[n..]
        .iter()
        .map(|&i| corpus.utterances[i].clone())
        .collect();
    let ep = TaskEpisode {
        speaker_id: *speaker_id,
        prosody_id: *prosody_id,
        support,
        query,
    };
    ep.validate(n)?;
    Ok(ep)
}
