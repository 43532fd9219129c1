//! Style-conditioned text-to-spectrogram network.
//!
//! Composition: text encoder (embedding → conv prenet → FFT blocks) →
//! variance adaptor (duration/pitch/energy predictors + length regulator) →
//! mel decoder (FFT blocks → projection → residual postnet). Each FFT block's
//! final normalization is a style-adaptive layer norm fed by the style
//! encoder: a speaker branch (LUT vector → CLN adaptor) and a prosody branch
//! (reference-mel encoder → CLN adaptor), summed per site.
//!
//! Trunk weights are plain `f64` everywhere; only the speaker branch
//! ([`SpeakerParams`]) is generic over [`Scalar`], which is what lets the
//! same backward pass produce ordinary gradients (`f64`) and exact
//! Hessian-vector products (dual numbers) for the meta updates.

pub mod style;
pub mod trunk;

pub use style::{
    classifier_bwd, classifier_fwd, prosody_mel_encode, prosody_style, prosody_style_bwd,
    speaker_style, speaker_style_bwd, ProsodyCache, ProsodyStyle, SpeakerStyle,
};
pub use trunk::{
    quantize, trunk_backward, trunk_forward, DropoutCtx, Mode, StyleMats, TrunkCache, TrunkOut,
    VarianceTargets,
};

use crate::error::{Error, Result};
use crate::param_struct;
use crate::rng::fill_normal;
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Architecture hyperparameters. `default()` is the full-size configuration;
/// [`ModelConfig::desk`] is the small preset every experiment here runs at.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    /// Kernel of the FFT-block conv feed-forward (odd).
    pub kernel: usize,
    /// Channel width of the conv feed-forward.
    pub filter: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    /// Speaker/prosody style vector dimension.
    pub style_dim: usize,
    pub prosody_width: usize,
    pub prosody_heads: usize,
    pub mel_bins: usize,
    pub alphabet: usize,
    pub postnet_layers: usize,
    pub postnet_channels: usize,
    pub postnet_kernel: usize,
    /// Variance predictor conv kernel (odd).
    pub predictor_kernel: usize,
    /// Quantization bins for pitch/energy embeddings.
    pub va_bins: usize,
    /// Linear quantization range for pitch targets.
    pub pitch_range: (f64, f64),
    pub energy_range: (f64, f64),
    pub ln_eps: f64,
    /// FFT-block dropout, applied during pre-training only.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 256,
            heads: 2,
            kernel: 9,
            filter: 1024,
            enc_blocks: 4,
            dec_blocks: 4,
            style_dim: 128,
            prosody_width: 64,
            prosody_heads: 2,
            mel_bins: 20,
            alphabet: 32,
            postnet_layers: 5,
            postnet_channels: 256,
            postnet_kernel: 5,
            predictor_kernel: 3,
            va_bins: 32,
            pitch_range: (-1.5, 1.5),
            energy_range: (0.4, 1.85),
            ln_eps: 1e-5,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    /// Small preset sized for a single-core host; same topology, smaller
    /// widths. All tests and the CLI default to this.
    pub fn desk() -> Self {
        ModelConfig {
            hidden: 32,
            heads: 2,
            kernel: 3,
            filter: 64,
            enc_blocks: 2,
            dec_blocks: 2,
            style_dim: 128,
            prosody_width: 64,
            prosody_heads: 2,
            postnet_channels: 24,
            ..Default::default()
        }
    }

    /// Total style-modulation sites (one per FFT block on each side).
    pub fn m(&self) -> usize {
        self.enc_blocks + self.dec_blocks
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden ({}) must be a positive multiple of heads ({})",
                self.hidden, self.heads
            )));
        }
        if self.style_dim == 0 || self.style_dim % self.prosody_heads != 0 {
            return Err(Error::Config(
                "style_dim must be a positive multiple of prosody_heads".into(),
            ));
        }
        for (name, k) in [
            ("kernel", self.kernel),
            ("postnet_kernel", self.postnet_kernel),
            ("predictor_kernel", self.predictor_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd, got {k}")));
            }
        }
        if self.enc_blocks == 0 || self.dec_blocks == 0 {
            return Err(Error::Config("need at least one FFT block per side".into()));
        }
        if self.postnet_layers < 2 {
            return Err(Error::Config("postnet needs at least 2 layers".into()));
        }
        if self.mel_bins == 0 || self.alphabet == 0 || self.filter == 0 || self.prosody_width == 0
        {
            return Err(Error::Config("zero-sized model dimension".into()));
        }
        if self.va_bins < 2 {
            return Err(Error::Config("va_bins must be >= 2".into()));
        }
        if self.pitch_range.0 >= self.pitch_range.1 || self.energy_range.0 >= self.energy_range.1
        {
            return Err(Error::Config("quantization ranges must be increasing".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Which speaker-LUT layout the model carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LutMode {
    /// One row per training speaker (pre-training).
    MultiSpeaker,
    /// A single shared row adapted per task (meta-training / adaptation).
    SharedSingle,
}

param_struct!(Linear {
    w: Array2<S>,
    b: Array1<S>,
});

param_struct!(Conv {
    w: Array3<S>,
    b: Array1<S>,
});

param_struct!(Mhsa {
    wq: Array2<S>,
    bq: Array1<S>,
    wk: Array2<S>,
    bk: Array1<S>,
    wv: Array2<S>,
    bv: Array1<S>,
    wo: Array2<S>,
    bo: Array1<S>,
});

param_struct!(LnAffine {
    g: Array1<S>,
    b: Array1<S>,
});

param_struct!(FftBlock {
    attn: Mhsa<S>,
    ln1: LnAffine<S>,
    conv1: Conv<S>,
    conv2: Conv<S>,
});

param_struct!(Prenet {
    conv1: Conv<S>,
    conv2: Conv<S>,
    out: Linear<S>,
});

param_struct!(Predictor {
    conv1: Conv<S>,
    conv2: Conv<S>,
    out: Linear<S>,
});

param_struct!(VarianceAdaptor {
    duration: Predictor<S>,
    pitch: Predictor<S>,
    energy: Predictor<S>,
    pitch_embed: Array2<S>,
    energy_embed: Array2<S>,
});

param_struct!(Postnet {
    convs: Vec<Conv<S>>,
});

param_struct!(ProsodyEncoder {
    spec1: Linear<S>,
    spec2: Linear<S>,
    gconv1: Conv<S>,
    gconv2: Conv<S>,
    proj: Linear<S>,
    attn: Mhsa<S>,
});

param_struct!(Classifier {
    l1: Linear<S>,
    l2: Linear<S>,
});

param_struct!(StyleEncoder {
    speaker_lut: Array2<S>,
    speaker_adaptor: Linear<S>,
    prosody_encoder: ProsodyEncoder<S>,
    prosody_adaptor: Linear<S>,
    classifier: Classifier<S>,
});

param_struct!(
    /// Every trainable tensor in the network, in a fixed visit order.
    ModelParams {
        embedding: Array2<S>,
        prenet: Prenet<S>,
        encoder: Vec<FftBlock<S>>,
        variance: VarianceAdaptor<S>,
        decoder: Vec<FftBlock<S>>,
        mel_proj: Linear<S>,
        postnet: Postnet<S>,
        style: StyleEncoder<S>,
    }
);

param_struct!(
    /// The speaker-specific parameters adapted per task: the shared LUT row
    /// plus the speaker CLN adaptor.
    SpeakerParams {
        vec: Array1<S>,
        w: Array2<S>,
        b: Array1<S>,
    }
);

fn glorot2(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    let mut a = Array2::zeros((rows, cols));
    fill_normal(rng, a.as_slice_mut().unwrap(), 0.0, std);
    a
}

fn glorot3(rng: &mut impl Rng, c_out: usize, c_in: usize, k: usize) -> Array3<f64> {
    let std = (2.0 / ((c_in + c_out) * k) as f64).sqrt();
    let mut a = Array3::zeros((c_out, c_in, k));
    fill_normal(rng, a.as_slice_mut().unwrap(), 0.0, std);
    a
}

fn linear_init(rng: &mut impl Rng, out: usize, input: usize) -> Linear<f64> {
    Linear {
        w: glorot2(rng, out, input),
        b: Array1::zeros(out),
    }
}

fn conv_init(rng: &mut impl Rng, c_out: usize, c_in: usize, k: usize) -> Conv<f64> {
    Conv {
        w: glorot3(rng, c_out, c_in, k),
        b: Array1::zeros(c_out),
    }
}

fn mhsa_init(rng: &mut impl Rng, d: usize) -> Mhsa<f64> {
    Mhsa {
        wq: glorot2(rng, d, d),
        bq: Array1::zeros(d),
        wk: glorot2(rng, d, d),
        bk: Array1::zeros(d),
        wv: glorot2(rng, d, d),
        bv: Array1::zeros(d),
        wo: glorot2(rng, d, d),
        bo: Array1::zeros(d),
    }
}

fn fft_block_init(rng: &mut impl Rng, cfg: &ModelConfig) -> FftBlock<f64> {
    FftBlock {
        attn: mhsa_init(rng, cfg.hidden),
        ln1: LnAffine {
            g: Array1::ones(cfg.hidden),
            b: Array1::zeros(cfg.hidden),
        },
        conv1: conv_init(rng, cfg.filter, cfg.hidden, cfg.kernel),
        conv2: conv_init(rng, cfg.hidden, cfg.filter, cfg.kernel),
    }
}

fn predictor_init(rng: &mut impl Rng, cfg: &ModelConfig) -> Predictor<f64> {
    Predictor {
        conv1: conv_init(rng, cfg.hidden, cfg.hidden, cfg.predictor_kernel),
        conv2: conv_init(rng, cfg.hidden, cfg.hidden, cfg.predictor_kernel),
        out: linear_init(rng, 1, cfg.hidden),
    }
}

/// CLN adaptor init: zero weights, bias = [1…1, 0…0] so every site starts
/// at γ = 1, β = 0 (style-neutral modulation).
fn adaptor_init(cfg: &ModelConfig) -> Linear<f64> {
    let mh = cfg.m() * cfg.hidden;
    let mut b = Array1::zeros(2 * mh);
    b.slice_mut(ndarray::s![..mh]).fill(1.0);
    Linear {
        w: Array2::zeros((2 * mh, cfg.style_dim)),
        b,
    }
}

impl ModelParams<f64> {
    /// Fresh parameters. `lut_entries` is the speaker-LUT row count
    /// (training-speaker count in multi-speaker mode, 1 in shared mode); the
    /// adversarial classifier gets one output class per entry.
    pub fn init(cfg: &ModelConfig, lut_entries: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::init_with(cfg, lut_entries, lut_entries, rng)
    }

    /// [`ModelParams::init`] with an independent classifier class count.
    /// After the speaker LUT is reset to a single shared row for
    /// meta-learning, the classifier keeps its pre-training classes, so the
    /// two sizes decouple.
    pub fn init_with(
        cfg: &ModelConfig,
        lut_entries: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if lut_entries == 0 {
            return Err(Error::Config("speaker LUT needs at least one entry".into()));
        }
        if classes == 0 {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        let h = cfg.hidden;

        let mut embedding = Array2::zeros((cfg.alphabet, h));
        fill_normal(
            rng,
            embedding.as_slice_mut().unwrap(),
            0.0,
            1.0 / (h as f64).sqrt(),
        );

        let prenet = Prenet {
            conv1: conv_init(rng, h, h, cfg.kernel),
            conv2: conv_init(rng, h, h, cfg.kernel),
            out: linear_init(rng, h, h),
        };

        let encoder = (0..cfg.enc_blocks).map(|_| fft_block_init(rng, cfg)).collect();

        let mut pitch_embed = Array2::zeros((cfg.va_bins, h));
        fill_normal(rng, pitch_embed.as_slice_mut().unwrap(), 0.0, 0.1);
        let mut energy_embed = Array2::zeros((cfg.va_bins, h));
        fill_normal(rng, energy_embed.as_slice_mut().unwrap(), 0.0, 0.1);
        let variance = VarianceAdaptor {
            duration: predictor_init(rng, cfg),
            pitch: predictor_init(rng, cfg),
            energy: predictor_init(rng, cfg),
            pitch_embed,
            energy_embed,
        };

        let decoder = (0..cfg.dec_blocks).map(|_| fft_block_init(rng, cfg)).collect();
        let mel_proj = linear_init(rng, cfg.mel_bins, h);

        let pc = cfg.postnet_channels;
        let mut convs = Vec::with_capacity(cfg.postnet_layers);
        for i in 0..cfg.postnet_layers {
            let c_in = if i == 0 { cfg.mel_bins } else { pc };
            let c_out = if i + 1 == cfg.postnet_layers { cfg.mel_bins } else { pc };
            convs.push(conv_init(rng, c_out, c_in, cfg.postnet_kernel));
        }
        let postnet = Postnet { convs };

        let mut speaker_lut = Array2::zeros((lut_entries, cfg.style_dim));
        fill_normal(rng, speaker_lut.as_slice_mut().unwrap(), 0.0, 0.01);

        let pw = cfg.prosody_width;
        let prosody_encoder = ProsodyEncoder {
            spec1: linear_init(rng, pw, cfg.mel_bins),
            spec2: linear_init(rng, pw, pw),
            gconv1: conv_init(rng, 2 * pw, pw, 3),
            gconv2: conv_init(rng, 2 * pw, pw, 3),
            proj: linear_init(rng, cfg.style_dim, pw),
            attn: mhsa_init(rng, cfg.style_dim),
        };

        let style = StyleEncoder {
            speaker_lut,
            speaker_adaptor: adaptor_init(cfg),
            prosody_encoder,
            prosody_adaptor: adaptor_init(cfg),
            classifier: Classifier {
                l1: linear_init(rng, 64, cfg.style_dim),
                l2: linear_init(rng, classes, 64),
            },
        };

        Ok(ModelParams {
            embedding,
            prenet,
            encoder,
            variance,
            decoder,
            mel_proj,
            postnet,
            style,
        })
    }
}

/// Sets every value to zero (gradient accumulators).
pub fn zero_params<S: Scalar>(p: &mut impl crate::params::ParamOps<S>) {
    p.visit_mut("", &mut |_, mut t| t.for_each_mut(|v| *v = S::ZERO));
}

pub(crate) fn mhsa_views(p: &Mhsa<f64>) -> crate::nn::MhsaWeights<'_> {
    crate::nn::MhsaWeights {
        wq: p.wq.view(),
        bq: p.bq.view(),
        wk: p.wk.view(),
        bk: p.bk.view(),
        wv: p.wv.view(),
        bv: p.bv.view(),
        wo: p.wo.view(),
        bo: p.bo.view(),
    }
}

#[cfg(test)]
pub(crate) fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        heads: 2,
        kernel: 3,
        filter: 12,
        enc_blocks: 1,
        dec_blocks: 1,
        style_dim: 8,
        prosody_width: 6,
        prosody_heads: 2,
        mel_bins: 5,
        alphabet: 10,
        postnet_layers: 3,
        postnet_channels: 4,
        postnet_kernel: 5,
        predictor_kernel: 3,
        va_bins: 4,
        pitch_range: (-1.5, 1.5),
        energy_range: (0.4, 1.85),
        ln_eps: 1e-5,
        dropout: 0.1,
    }
}

/// Extracts the adapted speaker parameters (LUT row + speaker adaptor) from
/// the full container. `row` is the LUT row index.
pub fn speaker_params_of(params: &ModelParams<f64>, row: usize) -> Result<SpeakerParams<f64>> {
    if row >= params.style.speaker_lut.nrows() {
        return Err(Error::Lookup(format!(
            "LUT row {row} out of range ({} entries)",
            params.style.speaker_lut.nrows()
        )));
    }
    Ok(SpeakerParams {
        vec: params.style.speaker_lut.row(row).to_owned(),
        w: params.style.speaker_adaptor.w.clone(),
        b: params.style.speaker_adaptor.b.clone(),
    })
}

/// Writes adapted speaker parameters back into the full container.
pub fn store_speaker_params(
    params: &mut ModelParams<f64>,
    row: usize,
    sp: &SpeakerParams<f64>,
) -> Result<()> {
    if row >= params.style.speaker_lut.nrows() {
        return Err(Error::Lookup(format!("LUT row {row} out of range")));
    }
    params.style.speaker_lut.row_mut(row).assign(&sp.vec);
    params.style.speaker_adaptor.w.assign(&sp.w);
    params.style.speaker_adaptor.b.assign(&sp.b);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::FlatIndex;
    use crate::rng::child_rng;

    #[test]
    fn default_config_is_valid_and_m_is_eight() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.m(), 8);
        let desk = ModelConfig::desk();
        desk.validate().unwrap();
        assert_eq!(desk.m(), 4);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::desk();
        cfg.hidden = 33; // not divisible by heads
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk();
        cfg.kernel = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk();
        cfg.pitch_range = (1.0, -1.0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn param_names_cover_expected_prefixes() {
        let cfg = tiny_cfg();
        let mut rng = child_rng(0, "init");
        let p = ModelParams::init(&cfg, 3, &mut rng).unwrap();
        let idx = FlatIndex::build(&p);
        let names: Vec<&str> = idx.entries.iter().map(|e| e.name.as_str()).collect();
        for expected in [
            "embedding",
            "prenet.conv1.w",
            "encoder.0.attn.wq",
            "encoder.0.ln1.g",
            "variance.duration.out.w",
            "variance.pitch_embed",
            "decoder.0.conv2.b",
            "mel_proj.w",
            "postnet.convs.0.w",
            "style.speaker_lut",
            "style.speaker_adaptor.w",
            "style.prosody_encoder.gconv1.w",
            "style.prosody_adaptor.b",
            "style.classifier.l2.w",
        ] {
            assert!(names.contains(&expected), "missing {expected}");
        }
    }

    #[test]
    fn adaptor_init_is_style_neutral() {
        let cfg = tiny_cfg();
        let mut rng = child_rng(1, "init");
        let p = ModelParams::init(&cfg, 2, &mut rng).unwrap();
        let mh = cfg.m() * cfg.hidden;
        assert!(p.style.speaker_adaptor.w.iter().all(|&v| v == 0.0));
        for i in 0..mh {
            assert_eq!(p.style.speaker_adaptor.b[i], 1.0);
            assert_eq!(p.style.speaker_adaptor.b[mh + i], 0.0);
        }
    }

    #[test]
    fn same_seed_same_init() {
        let cfg = tiny_cfg();
        let a = ModelParams::init(&cfg, 2, &mut child_rng(7, "init")).unwrap();
        let b = ModelParams::init(&cfg, 2, &mut child_rng(7, "init")).unwrap();
        let idx = FlatIndex::build(&a);
        assert_eq!(idx.pack(&a), idx.pack(&b));
    }

    #[test]
    fn speaker_params_round_trip() {
        let cfg = tiny_cfg();
        let mut p = ModelParams::init(&cfg, 3, &mut child_rng(2, "init")).unwrap();
        let mut sp = speaker_params_of(&p, 1).unwrap();
        sp.vec[0] = 42.0;
        sp.w[[0, 0]] = -1.0;
        store_speaker_params(&mut p, 1, &sp).unwrap();
        assert_eq!(p.style.speaker_lut[[1, 0]], 42.0);
        assert_eq!(p.style.speaker_adaptor.w[[0, 0]], -1.0);
        assert!(speaker_params_of(&p, 9).is_err());
    }

}
