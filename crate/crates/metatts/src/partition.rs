//! Rule-based parameter partition θ = {θ̄, θˢ, θᵖ}.
//!
//! Every trainable tensor is assigned to exactly one of three sets by prefix
//! rules over its hierarchical name: shared trunk (θ̄, frozen after
//! pre-training), speaker-related (θˢ, the only set the inner loop and
//! adaptation may update), and prosody-related (θᵖ, which also houses the
//! domain-adversarial classifier head). Any name matched by zero or multiple
//! rules is a structural error at startup, so renames fail loudly instead of
//! silently moving parameters between training regimes.

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::params::{FlatIndex, Subset};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// Partition membership of one parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSet {
    Shared,
    Speaker,
    Prosody,
}

/// Prefix rules; a name belongs to a set when it starts with one of the
/// set's prefixes. Trailing dots keep "encoder." from claiming a future
/// "encoder_extra".
const SHARED_PREFIXES: &[&str] = &[
    "embedding",
    "prenet.",
    "encoder.",
    "variance.",
    "decoder.",
    "mel_proj.",
    "postnet.",
];
const SPEAKER_PREFIXES: &[&str] = &["style.speaker_lut", "style.speaker_adaptor."];
const PROSODY_PREFIXES: &[&str] = &["style.prosody_", "style.classifier."];

fn matches(name: &str, prefixes: &[&str]) -> bool {
    prefixes.iter().any(|p| name.starts_with(p))
}

/// Classifies one parameter name; errors when no rule or multiple rules
/// claim it.
pub fn classify(name: &str) -> Result<ParamSet> {
    let hits = [
        (ParamSet::Shared, matches(name, SHARED_PREFIXES)),
        (ParamSet::Speaker, matches(name, SPEAKER_PREFIXES)),
        (ParamSet::Prosody, matches(name, PROSODY_PREFIXES)),
    ];
    let mut found = None;
    for (set, hit) in hits {
        if hit {
            if found.is_some() {
                return Err(Error::Partition(format!(
                    "parameter '{name}' matched by multiple partition rules"
                )));
            }
            found = Some(set);
        }
    }
    found.ok_or_else(|| {
        Error::Partition(format!(
            "parameter '{name}' matched by no partition rule"
        ))
    })
}

/// The validated three-way split over a model's flat parameter layout.
#[derive(Clone, Debug)]
pub struct ParamPartition {
    pub index: FlatIndex,
    pub shared: Subset,
    pub speaker: Subset,
    pub prosody: Subset,
}

impl ParamPartition {
    /// Builds and validates the partition for a concrete model.
    pub fn build<S: Scalar>(params: &ModelParams<S>) -> Result<Self> {
        let index = FlatIndex::build(params);
        Self::from_index(index)
    }

    /// Partitions an existing flat layout (e.g. one read from a checkpoint
    /// header).
    pub fn from_index(index: FlatIndex) -> Result<Self> {
        let mut shared = Vec::new();
        let mut speaker = Vec::new();
        let mut prosody = Vec::new();
        for (i, e) in index.entries.iter().enumerate() {
            match classify(&e.name)? {
                ParamSet::Shared => shared.push(i),
                ParamSet::Speaker => speaker.push(i),
                ParamSet::Prosody => prosody.push(i),
            }
        }
        Ok(ParamPartition {
            shared: Subset::from_entry_ids(&index, shared),
            speaker: Subset::from_entry_ids(&index, speaker),
            prosody: Subset::from_entry_ids(&index, prosody),
            index,
        })
    }

    /// Names in one set, in visit order.
    pub fn names(&self, set: ParamSet) -> Vec<&str> {
        self.subset(set)
            .entry_ids
            .iter()
            .map(|&i| self.index.entries[i].name.as_str())
            .collect()
    }

    pub fn subset(&self, set: ParamSet) -> &Subset {
        match set {
            ParamSet::Shared => &self.shared,
            ParamSet::Speaker => &self.speaker,
            ParamSet::Prosody => &self.prosody,
        }
    }

    /// Scalar counts per set (shared, speaker, prosody).
    pub fn counts(&self) -> (usize, usize, usize) {
        (
            self.shared.total_len,
            self.speaker.total_len,
            self.prosody.total_len,
        )
    }
}
