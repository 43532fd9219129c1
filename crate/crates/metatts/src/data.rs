//! Domain types: spectrograms, token sequences, utterances, corpora, and
//! task episodes, plus corpus export/import as a directory of records.

use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

/// Log-amplitude mel spectrogram, frames x bins, unitless.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub values: Array2<f64>,
}

impl MelSpectrogram {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::Data("mel spectrogram needs at least 1 frame".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("mel spectrogram contains non-finite values".into()));
        }
        Ok(MelSpectrogram { values })
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bins(&self) -> usize {
        self.values.ncols()
    }
}

/// Token id sequence over a finite alphabet.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PhonemeSequence {
    pub tokens: Vec<u16>,
}

impl PhonemeSequence {
    pub fn new(tokens: Vec<u16>, alphabet: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Data("empty phoneme sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= alphabet) {
            return Err(Error::Data(format!(
                "token id {bad} out of range for alphabet size {alphabet}"
            )));
        }
        Ok(PhonemeSequence { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// One aligned training record: text, mel, and per-token prosodic targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub text: PhonemeSequence,
    pub mel: MelSpectrogram,
    /// Frames per token; sums to mel.frames().
    pub durations: Vec<u32>,
    /// Per-token pitch target.
    pub pitch: Vec<f64>,
    /// Per-token energy target.
    pub energy: Vec<f64>,
    pub speaker_id: u32,
    pub prosody_id: u32,
}

impl Utterance {
    pub fn validate(&self) -> Result<()> {
        let n = self.text.len();
        if self.durations.len() != n || self.pitch.len() != n || self.energy.len() != n {
            return Err(Error::shape(
                "utterance alignment",
                format!("{n} tokens"),
                format!(
                    "durations {}, pitch {}, energy {}",
                    self.durations.len(),
                    self.pitch.len(),
                    self.energy.len()
                ),
            ));
        }
        if self.durations.iter().any(|&d| d == 0) {
            return Err(Error::Data("zero duration".into()));
        }
        let total: u32 = self.durations.iter().sum();
        if total as usize != self.mel.frames() {
            return Err(Error::shape(
                "duration sum",
                self.mel.frames(),
                total,
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Pretrain,
    MetaTrain,
    MetaVal,
    MetaTest,
}

impl std::fmt::Display for SplitTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SplitTag::Pretrain => "pretrain",
            SplitTag::MetaTrain => "meta_train",
            SplitTag::MetaVal => "meta_val",
            SplitTag::MetaTest => "meta_test",
        };
        f.write_str(s)
    }
}

/// A split of the synthetic corpus.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub speaker_ids: BTreeSet<u32>,
    pub prosody_ids: BTreeSet<u32>,
    pub split_tag: SplitTag,
    pub bins: usize,
    pub alphabet: usize,
}

impl Corpus {
    pub fn validate(&self) -> Result<()> {
        if self.utterances.is_empty() {
            return Err(Error::Data(format!("{} corpus is empty", self.split_tag)));
        }
        for (i, u) in self.utterances.iter().enumerate() {
            u.validate()
                .map_err(|e| Error::Data(format!("utterance {i}: {e}")))?;
            if !self.speaker_ids.contains(&u.speaker_id) {
                return Err(Error::Data(format!(
                    "utterance {i}: speaker {} not in declared set",
                    u.speaker_id
                )));
            }
            if !self.prosody_ids.contains(&u.prosody_id) {
                return Err(Error::Data(format!(
                    "utterance {i}: prosody {} not in declared set",
                    u.prosody_id
                )));
            }
            if u.mel.bins() != self.bins {
                return Err(Error::shape("corpus mel bins", self.bins, u.mel.bins()));
            }
        }
        Ok(())
    }

    /// Utterance indices grouped by (speaker, prosody), deterministic order.
    pub fn pseudo_speakers(&self) -> Vec<((u32, u32), Vec<usize>)> {
        let mut map: std::collections::BTreeMap<(u32, u32), Vec<usize>> = Default::default();
        for (i, u) in self.utterances.iter().enumerate() {
            map.entry((u.speaker_id, u.prosody_id)).or_default().push(i);
        }
        map.into_iter().collect()
    }

    /// Indices of one speaker's utterances.
    pub fn speaker_utterances(&self, speaker_id: u32) -> Vec<usize> {
        self.utterances
            .iter()
            .enumerate()
            .filter(|(_, u)| u.speaker_id == speaker_id)
            .map(|(i, _)| i)
            .collect()
    }
}

/// One N-shot task: support set for inner adaptation, query set for the
/// meta-objective, all from a single (speaker, prosody) pseudo-speaker.
#[derive(Clone, Debug)]
pub struct TaskEpisode {
    pub speaker_id: u32,
    pub prosody_id: u32,
    pub support: Vec<Utterance>,
    pub query: Vec<Utterance>,
}

impl TaskEpisode {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.support.len() != n || self.query.len() != n {
            return Err(Error::Data(format!(
                "episode must have {n}/{n} support/query, got {}/{}",
                self.support.len(),
                self.query.len()
            )));
        }
        for u in self.support.iter().chain(self.query.iter()) {
            if u.speaker_id != self.speaker_id || u.prosody_id != self.prosody_id {
                return Err(Error::Data(
                    "episode utterance from a different pseudo-speaker".into(),
                ));
            }
        }
        // Disjointness: no support record equals a query record.
        for s in &self.support {
            if self.query.iter().any(|q| q == s) {
                return Err(Error::Data("support and query sets overlap".into()));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Corpus directory export / import
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CorpusManifest {
    split_tag: SplitTag,
    bins: usize,
    alphabet: usize,
    speaker_ids: Vec<u32>,
    prosody_ids: Vec<u32>,
    records: Vec<String>,
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct UtteranceMeta {
    tokens: Vec<u16>,
    durations: Vec<u32>,
    pitch: Vec<f64>,
    energy: Vec<f64>,
    speaker_id: u32,
    prosody_id: u32,
    frames: usize,
    bins: usize,
}

/// Writes one split to `dir` (manifest.json + per-record json/mel pairs).
/// The optional seed is recorded in the manifest for provenance.
pub fn export_corpus(corpus: &Corpus, dir: &Path, seed: Option<u64>) -> Result<()> {
    corpus.validate()?;
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(corpus.utterances.len());
    for (i, utt) in corpus.utterances.iter().enumerate() {
        let stem = format!("utt_{i:05}");
        let meta = UtteranceMeta {
            tokens: utt.text.tokens.clone(),
            durations: utt.durations.clone(),
            pitch: utt.pitch.clone(),
            energy: utt.energy.clone(),
            speaker_id: utt.speaker_id,
            prosody_id: utt.prosody_id,
            frames: utt.mel.frames(),
            bins: utt.mel.bins(),
        };
        let json = serde_json::to_vec_pretty(&meta)?;
        fs::write(dir.join(format!("{stem}.json")), json)?;
        let mut payload = Vec::with_capacity(utt.mel.values.len() * 4);
        for &v in utt.mel.values.iter() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(dir.join(format!("{stem}.mel")), payload)?;
        records.push(stem);
    }
    let manifest = CorpusManifest {
        split_tag: corpus.split_tag,
        bins: corpus.bins,
        alphabet: corpus.alphabet,
        speaker_ids: corpus.speaker_ids.iter().copied().collect(),
        prosody_ids: corpus.prosody_ids.iter().copied().collect(),
        records,
        seed,
    };
    let mut f = fs::File::create(dir.join("manifest.json"))?;
    f.write_all(&serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Loads a split previously written by [`export_corpus`].
pub fn import_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join("manifest.json");
    let mut buf = String::new();
    fs::File::open(&manifest_path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", manifest_path.display())))?
        .read_to_string(&mut buf)?;
    let manifest: CorpusManifest = serde_json::from_str(&buf)?;

    let mut utterances = Vec::with_capacity(manifest.records.len());
    for stem in &manifest.records {
        let meta_buf = fs::read_to_string(dir.join(format!("{stem}.json")))?;
        let meta: UtteranceMeta = serde_json::from_str(&meta_buf)?;
        let payload = fs::read(dir.join(format!("{stem}.mel")))?;
        let expected = meta.frames * meta.bins * 4;
        if payload.len() != expected {
            return Err(Error::Data(format!(
                "{stem}.mel: expected {expected} bytes, got {}",
                payload.len()
            )));
        }
        let mut values = Array2::zeros((meta.frames, meta.bins));
        for (i, v) in values.iter_mut().enumerate() {
            let b: [u8; 4] = payload[i * 4..i * 4 + 4].try_into().unwrap();
            *v = f32::from_le_bytes(b) as f64;
        }
        utterances.push(Utterance {
            text: PhonemeSequence::new(meta.tokens, manifest.alphabet)?,
            mel: MelSpectrogram::new(values)?,
            durations: meta.durations,
            pitch: meta.pitch,
            energy: meta.energy,
            speaker_id: meta.speaker_id,
            prosody_id: meta.prosody_id,
        });
    }
    let corpus = Corpus {
        utterances,
        speaker_ids: manifest.speaker_ids.into_iter().collect(),
        prosody_ids: manifest.prosody_ids.into_iter().collect(),
        split_tag: manifest.split_tag,
        bins: manifest.bins,
        alphabet: manifest.alphabet,
    };
    corpus.validate()?;
    Ok(corpus)
}
