//! Checkpoint persistence: a JSON header (configs, tags, named shapes,
//! payload digest) followed by raw little-endian `f32` payloads in parameter
//! visit order.
//!
//! Parameter values are quantized to `f32` when the [`Checkpoint`] is
//! constructed, so save → load → save is bit-identical and in-memory
//! checkpoints compare equal to their on-disk round trips. The header is
//! self-describing: loading reconstructs the model from the embedded
//! [`ModelConfig`] and verifies every tensor name and shape against it.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{LutMode, ModelConfig, ModelParams};
use crate::params::{FlatIndex, ParamOps};
use crate::partition::ParamPartition;
use crate::rng::child_rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MTTSCKPT";
const VERSION: u32 = 1;

/// Training phase that produced a checkpoint. Transitions only move forward
/// (θ₀ → θ_T → θ_M → adapted); consumers enforce the ordering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PhaseTag {
    #[serde(rename = "theta_0")]
    Theta0,
    #[serde(rename = "theta_T")]
    ThetaT,
    #[serde(rename = "theta_M")]
    ThetaM,
    #[serde(rename = "adapted")]
    Adapted,
}

impl std::fmt::Display for PhaseTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PhaseTag::Theta0 => "theta_0",
            PhaseTag::ThetaT => "theta_T",
            PhaseTag::ThetaM => "theta_M",
            PhaseTag::Adapted => "adapted",
        };
        f.write_str(s)
    }
}

#[derive(Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    phase_tag: PhaseTag,
    step: u64,
    lut_mode: LutMode,
    train_speaker_ids: Vec<u32>,
    model: ModelConfig,
    train: TrainConfig,
    entries: Vec<EntryHeader>,
    payload_sha256: String,
}

/// A complete training state: parameters plus everything needed to resume or
/// evaluate them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub phase_tag: PhaseTag,
    pub step: u64,
    pub lut_mode: LutMode,
    /// Corpus speaker ids behind the LUT rows (multi-speaker mode) or the
    /// pretrain lineage (shared mode); used for contamination checks.
    pub train_speaker_ids: Vec<u32>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Parameter values, exactly representable in `f32`.
    pub params: ModelParams<f64>,
}

impl Checkpoint {
    /// Builds a checkpoint, quantizing parameters through `f32` (the storage
    /// precision) so persistence is value-exact.
    pub fn new(
        phase_tag: PhaseTag,
        step: u64,
        lut_mode: LutMode,
        train_speaker_ids: Vec<u32>,
        model: ModelConfig,
        train: TrainConfig,
        params: &ModelParams<f64>,
    ) -> Self {
        let params = params.map_scalar(&mut |v| v as f32 as f64);
        Checkpoint {
            phase_tag,
            step,
            lut_mode,
            train_speaker_ids,
            model,
            train,
            params,
        }
    }

    /// Value equality of the parameter tensors.
    pub fn params_equal(&self, other: &ModelParams<f64>) -> bool {
        let idx = FlatIndex::build(&self.params);
        idx.pack(&self.params) == idx.pack(other)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let idx = FlatIndex::build(&self.params);
        let mut payload = Vec::with_capacity(4 * idx.total_len());
        self.params.visit("", &mut |_, t| {
            t.for_each(|v| payload.extend_from_slice(&(v as f32).to_le_bytes()))
        });
        let digest = Sha256::digest(&payload);
        let header = Header {
            phase_tag: self.phase_tag,
            step: self.step,
            lut_mode: self.lut_mode,
            train_speaker_ids: self.train_speaker_ids.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
            entries: idx
                .entries
                .iter()
                .map(|e| EntryHeader {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                })
                .collect(),
            payload_sha256: hex(&digest),
        };
        let header_bytes = serde_json::to_vec(&header)?;

        let mut f = fs::File::create(path)?;
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        f.write_all(&payload)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = fs::File::open(path)?;
        let mut magic = [0u8; 8];
        read_exact(&mut f, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let mut v = [0u8; 4];
        read_exact(&mut f, &mut v, "version")?;
        let version = u32::from_le_bytes(v);
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "version mismatch: file has {version}, supported {VERSION}"
            )));
        }
        let mut hl = [0u8; 8];
        read_exact(&mut f, &mut hl, "header length")?;
        let header_len = u64::from_le_bytes(hl) as usize;
        let mut header_bytes = vec![0u8; header_len];
        read_exact(&mut f, &mut header_bytes, "header")?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;

        // Rebuild the parameter tree from the embedded config and check the
        // header's layout against it, name by name.
        let leading_dim = |name: &str| -> Result<usize> {
            header
                .entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing partition name '{name}'")))?
                .shape
                .first()
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("'{name}' entry has empty shape")))
        };
        let lut_rows = leading_dim("style.speaker_lut")?;
        let classes = leading_dim("style.classifier.l2.w")?;
        let mut params =
            ModelParams::init_with(&header.model, lut_rows, classes, &mut child_rng(0, "load"))?;
        let idx = FlatIndex::build(&params);
        if idx.entries.len() != header.entries.len() {
            return Err(Error::Checkpoint(format!(
                "layout mismatch: {} tensors in file, {} expected from config",
                header.entries.len(),
                idx.entries.len()
            )));
        }
        for (e, h) in idx.entries.iter().zip(header.entries.iter()) {
            if e.name != h.name {
                return Err(Error::Checkpoint(format!(
                    "missing or misplaced parameter: expected '{}', file has '{}'",
                    e.name, h.name
                )));
            }
            if e.shape != h.shape {
                return Err(Error::shape(
                    format!("checkpoint tensor '{}'", e.name),
                    format!("{:?}", e.shape),
                    format!("{:?}", h.shape),
                ));
            }
        }

        let mut payload = vec![0u8; 4 * idx.total_len()];
        read_exact(&mut f, &mut payload, "payload")?;
        let mut trailing = [0u8; 1];
        if f.read(&mut trailing)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        let digest = hex(&Sha256::digest(&payload));
        if digest != header.payload_sha256 {
            return Err(Error::Checkpoint(
                "payload checksum mismatch; file corrupt".into(),
            ));
        }
        let mut i = 0usize;
        params.visit_mut("", &mut |_, mut t| {
            t.for_each_mut(|v| {
                let bytes = [payload[i], payload[i + 1], payload[i + 2], payload[i + 3]];
                *v = f32::from_le_bytes(bytes) as f64;
                i += 4;
            })
        });

        header.train.validate()?;
        // partition rules must still cover the stored layout
        ParamPartition::from_index(idx)?;

        Ok(Checkpoint {
            phase_tag: header.phase_tag,
            step: header.step,
            lut_mode: header.lut_mode,
            train_speaker_ids: header.train_speaker_ids,
            model: header.model,
            train: header.train,
            params,
        })
    }

    /// Enforces the forward-only phase ordering for an operation that
    /// requires `expected` input.
    pub fn require_phase(&self, expected: &[PhaseTag], op: &str) -> Result<()> {
        if expected.contains(&self.phase_tag) {
            Ok(())
        } else {
            Err(Error::PhaseOrder(format!(
                "{op} requires a checkpoint in {:?}, got {}",
                expected.iter().map(|t| t.to_string()).collect::<Vec<_>>(),
                self.phase_tag
            )))
        }
    }
}

fn read_exact(f: &mut fs::File, buf: &mut [u8], what: &str) -> Result<()> {
    f.read_exact(buf)
        .map_err(|_| Error::Checkpoint(format!("truncated file while reading {what}")))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tiny_cfg;
    use crate::rng::child_rng;

    fn fixture() -> Checkpoint {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 3, &mut child_rng(1, "init")).unwrap();
        Checkpoint::new(
            PhaseTag::ThetaT,
            42,
            LutMode::MultiSpeaker,
            vec![0, 1, 2],
            cfg,
            TrainConfig::default(),
            &params,
        )
    }

    #[test]
    fn round_trip_is_value_identical_and_resave_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ck = fixture();
        ck.save(&p1).unwrap();
        let back = Checkpoint::load(&p1).unwrap();
        assert!(back.params_equal(&ck.params));
        assert_eq!(back.phase_tag, ck.phase_tag);
        assert_eq!(back.step, ck.step);
        assert_eq!(back.lut_mode, ck.lut_mode);
        assert_eq!(back.train_speaker_ids, ck.train_speaker_ids);
        assert_eq!(back.model, ck.model);
        assert_eq!(back.train, ck.train);
        back.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_file_is_corrupt_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ckpt");
        fixture().save(&p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 17]).unwrap();
        let err = Checkpoint::load(&p).unwrap_err();
        assert!(
            matches!(err, Error::Checkpoint(ref m) if m.contains("truncated")),
            "{err}"
        );
    }

    #[test]
    fn flipped_payload_bit_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        fixture().save(&p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        fs::write(&p, &bytes).unwrap();
        let err = Checkpoint::load(&p).unwrap_err();
        assert!(
            matches!(err, Error::Checkpoint(ref m) if m.contains("checksum")),
            "{err}"
        );
    }

    #[test]
    fn version_and_magic_mismatches_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.ckpt");
        fixture().save(&p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[9] = 9; // version LE bytes start at offset 8
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(&p).unwrap_err(),
            Error::Checkpoint(ref m) if m.contains("version")
        ));
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(&p).unwrap_err(),
            Error::Checkpoint(ref m) if m.contains("magic")
        ));
    }

    #[test]
    fn mel_bin_mismatch_is_shape_error() {
        // Write a header whose config says 6 mel bins while the stored
        // tensors were laid out for 5.
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let ck = fixture();
        ck.save(&p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_str = std::str::from_utf8(&bytes[20..20 + header_len]).unwrap();
        assert!(header_str.contains("\"mel_bins\":5"));
        let tampered = header_str.replacen("\"mel_bins\":5", "\"mel_bins\":6", 1);
        let mut out = Vec::new();
        out.extend_from_slice(&bytes[..12]);
        out.extend_from_slice(&(tampered.len() as u64).to_le_bytes());
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&bytes[20 + header_len..]);
        fs::write(&p, &out).unwrap();
        let err = Checkpoint::load(&p).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");
    }

    #[test]
    fn quantization_happens_at_construction() {
        let cfg = tiny_cfg();
        let mut params = ModelParams::init(&cfg, 1, &mut child_rng(2, "init")).unwrap();
        params.embedding[[0, 0]] = 0.1; // not representable in f32
        let ck = Checkpoint::new(
            PhaseTag::Theta0,
            0,
            LutMode::SharedSingle,
            vec![],
            cfg,
            TrainConfig::default(),
            &params,
        );
        assert_eq!(ck.params.embedding[[0, 0]], 0.1f32 as f64);
        assert!(!ck.params_equal(&params));
    }

    #[test]
    fn phase_requirements_enforced() {
        let ck = fixture();
        assert!(ck.require_phase(&[PhaseTag::ThetaT], "meta_train").is_ok());
        assert!(matches!(
            ck.require_phase(&[PhaseTag::ThetaM], "adapt").unwrap_err(),
            Error::PhaseOrder(_)
        ));
        assert!(PhaseTag::Theta0 < PhaseTag::ThetaT);
        assert!(PhaseTag::ThetaM < PhaseTag::Adapted);
    }
}
