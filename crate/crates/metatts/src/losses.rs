//! Training objectives: L1 spectrogram reconstruction, variance regression,
//! domain-adversarial speaker classification through a gradient reversal
//! layer, and the speaker–prosody orthogonality constraint.
//!
//! Every loss returns its input gradients alongside the value so callers can
//! seed the trunk/style backward passes; the reconstruction, variance, and
//! orthogonality losses are generic over [`Scalar`] because they sit on the
//! adaptation path where Hessian-vector products flow through dual numbers.

use crate::error::{Error, Result};
use crate::model::{classifier_bwd, classifier_fwd, Classifier};
use crate::nn::cross_entropy;
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

/// Training phase; decides which loss terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Meta,
    Adapt,
}

/// Loss weighting and switches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the domain-adversarial term (pre-training only).
    pub alpha_da: f64,
    /// Weight of the orthogonality term (all phases).
    pub alpha_orth: f64,
    /// Gradient reversal strength.
    pub grl_lambda: f64,
    /// Include the pre-postnet spectrogram in the reconstruction loss.
    /// Disable to train on the postnet output alone.
    pub recon_raw_term: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_da: 0.01,
            alpha_orth: 0.02,
            grl_lambda: 1.0,
            recon_raw_term: true,
        }
    }
}

/// Scalar components of one loss evaluation (real parts, for logging).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub recon: f64,
    pub variance: f64,
    pub l_da: f64,
    pub l_orth: f64,
    pub total: f64,
}

fn l1_term<S: Scalar>(pred: ArrayView2<S>, target: ArrayView2<f64>) -> (S, Array2<S>) {
    let scale = 1.0 / pred.len() as f64;
    let mut loss = S::ZERO;
    let grad = Array2::from_shape_fn(pred.dim(), |ij| {
        let d = pred[ij] - S::from_f64(target[ij]);
        loss += d.abs();
        // d|x|/dx at the real part; tie at 0 broken toward +1 (measure zero)
        let sign = if d.re() < 0.0 { -scale } else { scale };
        S::from_f64(sign)
    });
    (loss.scale(scale), grad)
}

/// Mean-absolute-error reconstruction loss on the decoder output and, when
/// `include_raw`, the pre-postnet output as well (both terms give the trunk
/// direct signal). Returns (loss, d_raw, d_final).
pub fn recon_loss<S: Scalar>(
    raw: ArrayView2<S>,
    final_mel: ArrayView2<S>,
    target: ArrayView2<f64>,
    include_raw: bool,
) -> Result<(S, Array2<S>, Array2<S>)> {
    if raw.dim() != target.dim() || final_mel.dim() != target.dim() {
        return Err(Error::shape(
            "reconstruction loss",
            format!("{:?}", target.dim()),
            format!("raw {:?}, final {:?}", raw.dim(), final_mel.dim()),
        ));
    }
    let (l_final, d_final) = l1_term(final_mel, target);
    if include_raw {
        let (l_raw, d_raw) = l1_term(raw, target);
        Ok((l_raw + l_final, d_raw, d_final))
    } else {
        Ok((l_final, Array2::from_elem(raw.dim(), S::ZERO), d_final))
    }
}

fn mse_term<S: Scalar>(pred: ArrayView1<S>, target: &[f64]) -> (S, Array1<S>) {
    let scale = 1.0 / pred.len() as f64;
    let mut loss = S::ZERO;
    let grad = Array1::from_shape_fn(pred.len(), |i| {
        let d = pred[i] - S::from_f64(target[i]);
        loss += d * d;
        (d + d).scale(scale)
    });
    (loss.scale(scale), grad)
}

/// Variance regression: MSE on log-durations plus MSE on pitch and energy,
/// unit weights. Duration targets are frame counts; predictions live in log
/// space. Returns (loss, d_log_duration, d_pitch, d_energy).
#[allow(clippy::type_complexity)]
pub fn variance_losses<S: Scalar>(
    pred_log_duration: ArrayView1<S>,
    target_durations: &[u32],
    pred_pitch: ArrayView1<S>,
    target_pitch: &[f64],
    pred_energy: ArrayView1<S>,
    target_energy: &[f64],
) -> Result<(S, Array1<S>, Array1<S>, Array1<S>)> {
    let n = pred_log_duration.len();
    if target_durations.len() != n
        || pred_pitch.len() != n
        || target_pitch.len() != n
        || pred_energy.len() != n
        || target_energy.len() != n
    {
        return Err(Error::shape(
            "variance losses",
            format!("{n} aligned per-token values"),
            format!(
                "{}/{}/{}/{}/{}",
                target_durations.len(),
                pred_pitch.len(),
                target_pitch.len(),
                pred_energy.len(),
                target_energy.len()
            ),
        ));
    }
    if let Some(&z) = target_durations.iter().find(|&&d| d == 0) {
        return Err(Error::Data(format!("duration target {z} has no frames")));
    }
    let log_targets: Vec<f64> = target_durations.iter().map(|&d| (d as f64).ln()).collect();
    let (l_d, d_d) = mse_term(pred_log_duration, &log_targets);
    let (l_p, d_p) = mse_term(pred_pitch, target_pitch);
    let (l_e, d_e) = mse_term(pred_energy, target_energy);
    Ok((l_d + l_p + l_e, d_d, d_p, d_e))
}

/// Gradient reversal, forward half: the identity.
pub fn grl<S: Scalar>(x: Array1<S>) -> Array1<S> {
    x
}

/// Gradient reversal, backward half: multiplies the upstream gradient by −λ.
pub fn grl_bwd<S: Scalar>(dy: &Array1<S>, lambda: f64) -> Array1<S> {
    dy.mapv(|v| v.scale(-lambda))
}

/// Domain-adversarial speaker classification: cross-entropy of the classifier
/// over grl(prosody_vec) against the true speaker. Classifier gradients
/// accumulate normally into `classifier_grads`; the returned gradient w.r.t.
/// the prosody vector has passed the reversal (multiplied by −λ).
pub fn domain_adv_loss(
    classifier: &Classifier<f64>,
    prosody_vec: &Array1<f64>,
    speaker_idx: usize,
    lambda: f64,
    classifier_grads: Option<&mut Classifier<f64>>,
) -> Result<(f64, Array1<f64>)> {
    let (logits, h1_pre) = classifier_fwd(classifier, prosody_vec);
    if speaker_idx >= logits.len() {
        return Err(Error::Lookup(format!(
            "speaker index {speaker_idx} out of range for {} classes",
            logits.len()
        )));
    }
    let (loss, dlogits) = cross_entropy(logits.view(), speaker_idx);
    let dvec = match classifier_grads {
        Some(g) => classifier_bwd(classifier, prosody_vec, &h1_pre, &dlogits, g),
        None => {
            let mut scratch = classifier.clone();
            crate::model::zero_params::<f64>(&mut scratch);
            classifier_bwd(classifier, prosody_vec, &h1_pre, &dlogits, &mut scratch)
        }
    };
    Ok((loss, grl_bwd(&dvec, lambda)))
}

const ORTH_EPS: f64 = 1e-8;

/// Squared cosine similarity between the speaker and prosody vectors,
/// ε-guarded against zero norms. Returns (loss, d_speaker, d_prosody).
pub fn orth_loss<S: Scalar>(
    s: ArrayView1<S>,
    p: ArrayView1<S>,
) -> (S, Array1<S>, Array1<S>) {
    assert_eq!(s.len(), p.len(), "orthogonality loss dim mismatch");
    let mut dot = S::ZERO;
    let mut ss = S::ZERO;
    let mut pp = S::ZERO;
    for (&a, &b) in s.iter().zip(p.iter()) {
        dot += a * b;
        ss += a * a;
        pp += b * b;
    }
    let eps = S::from_f64(ORTH_EPS);
    let ds_den = ss + eps;
    let dp_den = pp + eps;
    let denom = ds_den * dp_den;
    let loss = dot * dot / denom;
    // ∂/∂s = (2·dot·p) / denom − loss · 2s/(‖s‖²+ε); symmetrically for p.
    let two_dot = dot + dot;
    let ds = Array1::from_shape_fn(s.len(), |i| {
        two_dot * p[i] / denom - (loss + loss) * s[i] / ds_den
    });
    let dp = Array1::from_shape_fn(p.len(), |i| {
        two_dot * s[i] / denom - (loss + loss) * p[i] / dp_den
    });
    (loss, ds, dp)
}

/// Combines loss components per phase. The domain-adversarial term only
/// enters the total during pre-training; it is still recorded when supplied.
pub fn compose_total<S: Scalar>(
    recon: S,
    variance: S,
    l_da: Option<f64>,
    l_orth: S,
    weights: &LossWeights,
    phase: Phase,
) -> (S, LossBundle) {
    let da = l_da.unwrap_or(0.0);
    let mut total = recon + variance + l_orth.scale(weights.alpha_orth);
    if phase == Phase::Pretrain {
        total += S::from_f64(weights.alpha_da * da);
    }
    (
        total,
        LossBundle {
            recon: recon.re(),
            variance: variance.re(),
            l_da: da,
            l_orth: l_orth.re(),
            total: total.re(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{tiny_cfg, zero_params, ModelParams};
    use crate::rng::{child_rng, fill_normal, normal};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn recon_zero_when_exact() {
        let t = array![[1.0, 2.0], [3.0, 4.0]];
        let (l, d_raw, d_final) =
            recon_loss::<f64>(t.view(), t.view(), t.view(), true).unwrap();
        assert_eq!(l, 0.0);
        // gradient magnitude is 1/numel even at zero (sign convention)
        assert!(d_raw.iter().all(|&g| g.abs() == 0.25));
        assert!(d_final.iter().all(|&g| g.abs() == 0.25));
    }

    #[test]
    fn recon_constant_offset_is_one() {
        let t = array![[0.0, 0.0], [0.0, 0.0]];
        let f = t.mapv(|v| v + 1.0);
        let (l, _, _) = recon_loss::<f64>(t.view(), f.view(), t.view(), true).unwrap();
        assert_abs_diff_eq!(l, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn recon_matches_scalar_oracle_and_fd() {
        let mut rng = child_rng(0, "recon");
        let mut mk = || {
            let mut a = Array2::zeros((2, 3));
            fill_normal(&mut rng, a.as_slice_mut().unwrap(), 0.0, 1.0);
            a
        };
        let raw = mk();
        let fin = mk();
        let tgt = mk();
        let (l, d_raw, d_final) =
            recon_loss::<f64>(raw.view(), fin.view(), tgt.view(), true).unwrap();
        // scalar-loop oracle
        let mut oracle = 0.0;
        for i in 0..2 {
            for j in 0..3 {
                oracle += (raw[[i, j]] - tgt[[i, j]]).abs() / 6.0;
                oracle += (fin[[i, j]] - tgt[[i, j]]).abs() / 6.0;
            }
        }
        assert_abs_diff_eq!(l, oracle, epsilon = 1e-12);
        // FD on one entry of each input
        let h = 1e-7;
        let mut raw2 = raw.clone();
        raw2[[1, 2]] += h;
        let (lp, _, _) = recon_loss::<f64>(raw2.view(), fin.view(), tgt.view(), true).unwrap();
        assert_abs_diff_eq!((lp - l) / h, d_raw[[1, 2]], epsilon = 1e-5);
        let mut fin2 = fin.clone();
        fin2[[0, 1]] += h;
        let (lp, _, _) = recon_loss::<f64>(raw.view(), fin2.view(), tgt.view(), true).unwrap();
        assert_abs_diff_eq!((lp - l) / h, d_final[[0, 1]], epsilon = 1e-5);
    }

    #[test]
    fn recon_final_only_ignores_raw() {
        let t = array![[0.0, 0.0]];
        let raw = array![[5.0, -5.0]];
        let (l, d_raw, _) = recon_loss::<f64>(raw.view(), t.view(), t.view(), false).unwrap();
        assert_eq!(l, 0.0);
        assert!(d_raw.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn recon_shape_mismatch_is_error() {
        let a = Array2::<f64>::zeros((2, 3));
        let b = Array2::<f64>::zeros((3, 2));
        assert!(recon_loss::<f64>(a.view(), a.view(), b.view(), true).is_err());
    }

    #[test]
    fn variance_zero_when_exact() {
        let d = [2u32, 3, 1];
        let logd = Array1::from_vec(d.iter().map(|&x| (x as f64).ln()).collect());
        let p = array![0.1, -0.2, 0.3];
        let e = array![1.0, 0.9, 1.1];
        let (l, _, _, _) = variance_losses(
            logd.view(),
            &d,
            p.view(),
            p.as_slice().unwrap(),
            e.view(),
            e.as_slice().unwrap(),
        )
        .unwrap();
        assert_abs_diff_eq!(l, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn variance_log_duration_closed_form() {
        // predicted duration = 2× target, target all 1 frame → (ln 2)²
        let d = [1u32, 1, 1];
        let logd = Array1::from_elem(3, 2.0f64.ln());
        let z = array![0.0, 0.0, 0.0];
        let (l, _, _, _) = variance_losses(
            logd.view(),
            &d,
            z.view(),
            z.as_slice().unwrap(),
            z.view(),
            z.as_slice().unwrap(),
        )
        .unwrap();
        assert_abs_diff_eq!(l, 2.0f64.ln().powi(2), epsilon = 1e-12);
    }

    #[test]
    fn variance_matches_scalar_oracle_and_fd() {
        let mut rng = child_rng(1, "var");
        let n = 4;
        let d: Vec<u32> = (0..n).map(|i| 1 + i as u32).collect();
        let mut mk = |std: f64| {
            let mut a = Array1::zeros(n);
            fill_normal(&mut rng, a.as_slice_mut().unwrap(), 0.0, std);
            a
        };
        let logd = mk(1.0);
        let pp = mk(0.5);
        let pe = mk(0.5);
        let tp: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let te: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let (l, dd, dp, de) =
            variance_losses(logd.view(), &d, pp.view(), &tp, pe.view(), &te).unwrap();
        let mut oracle = 0.0;
        for i in 0..n {
            oracle += (logd[i] - (d[i] as f64).ln()).powi(2) / n as f64;
            oracle += (pp[i] - tp[i]).powi(2) / n as f64;
            oracle += (pe[i] - te[i]).powi(2) / n as f64;
        }
        assert_abs_diff_eq!(l, oracle, epsilon = 1e-6);
        // analytic grads vs FD
        let h = 1e-6;
        for (arr, grad, which) in [(&logd, &dd, 0usize), (&pp, &dp, 1), (&pe, &de, 2)] {
            let mut a2 = arr.clone();
            a2[2] += h;
            let args = |x: &Array1<f64>, k: usize| {
                let l = variance_losses(
                    if k == 0 { x.view() } else { logd.view() },
                    &d,
                    if k == 1 { x.view() } else { pp.view() },
                    &tp,
                    if k == 2 { x.view() } else { pe.view() },
                    &te,
                )
                .unwrap()
                .0;
                l
            };
            let lp = args(&a2, which);
            assert_abs_diff_eq!((lp - l) / h, grad[2], epsilon = 1e-4);
        }
    }

    #[test]
    fn variance_misaligned_is_error() {
        let logd = array![0.0, 0.0];
        let p = array![0.0];
        assert!(variance_losses(
            logd.view(),
            &[1, 1],
            p.view(),
            &[0.0],
            p.view(),
            &[0.0]
        )
        .is_err());
    }

    #[test]
    fn grl_forward_is_identity_and_backward_reverses() {
        let x = array![3.0, -1.5, 0.0];
        assert_eq!(grl(x.clone()), x);
        // f(x) = x² composed after grl, λ = 1: downstream gradient at x=3 is
        // +6; through the reversal the parameter sees −6.
        let x0 = 3.0f64;
        let df_downstream = 2.0 * x0;
        let reversed = grl_bwd(&array![df_downstream], 1.0);
        assert_abs_diff_eq!(reversed[0], -6.0, epsilon = 1e-12);
        // finite difference of the downstream half confirms +6
        let h = 1e-6;
        let fd = ((x0 + h).powi(2) - (x0 - h).powi(2)) / (2.0 * h);
        assert_abs_diff_eq!(fd, df_downstream, epsilon = 1e-5);
        // kill switch
        assert!(grl_bwd(&array![df_downstream], 0.0)[0] == 0.0);
    }

    #[test]
    fn domain_adv_uniform_logits_is_ln_k() {
        let cfg = tiny_cfg();
        let mut rng = child_rng(2, "init");
        let p = ModelParams::init(&cfg, 6, &mut rng).unwrap();
        let mut c = p.style.classifier.clone();
        zero_params::<f64>(&mut c);
        let vec = Array1::from_elem(cfg.style_dim, 0.3);
        let (l, _) = domain_adv_loss(&c, &vec, 2, 1.0, None).unwrap();
        assert_abs_diff_eq!(l, (6.0f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn domain_adv_gradient_reverses_sign_exactly() {
        let cfg = tiny_cfg();
        let mut rng = child_rng(3, "init");
        let p = ModelParams::init(&cfg, 5, &mut rng).unwrap();
        let c = p.style.classifier;
        let mut vec = Array1::zeros(cfg.style_dim);
        fill_normal(&mut rng, vec.as_slice_mut().unwrap(), 0.0, 1.0);
        let (_, d_rev) = domain_adv_loss(&c, &vec, 1, 1.0, None).unwrap();
        let (_, d_fwd) = domain_adv_loss(&c, &vec, 1, -1.0, None).unwrap();
        // λ = 1 vs λ = −1 flips the sign; cosine of the two gradients is −1
        let dot: f64 = d_rev.iter().zip(d_fwd.iter()).map(|(a, b)| a * b).sum();
        let n1: f64 = d_rev.iter().map(|v| v * v).sum::<f64>().sqrt();
        let n2: f64 = d_fwd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_abs_diff_eq!(dot / (n1 * n2), -1.0, epsilon = 1e-12);
        // and the non-reversed gradient matches finite differences of the loss
        let h = 1e-6;
        for i in [0usize, 3] {
            let mut v2 = vec.clone();
            v2[i] += h;
            let (lp, _) = domain_adv_loss(&c, &v2, 1, 1.0, None).unwrap();
            v2[i] = vec[i] - h;
            let (lm, _) = domain_adv_loss(&c, &v2, 1, 1.0, None).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert_abs_diff_eq!(fd, -d_rev[i], epsilon = 1e-5);
        }
    }

    #[test]
    fn domain_adv_bad_speaker_is_error() {
        let cfg = tiny_cfg();
        let p = ModelParams::init(&cfg, 3, &mut child_rng(4, "init")).unwrap();
        let vec = Array1::zeros(cfg.style_dim);
        assert!(domain_adv_loss(&p.style.classifier, &vec, 3, 1.0, None).is_err());
    }

    #[test]
    fn orth_closed_forms() {
        let (l, _, _) = orth_loss::<f64>(array![1.0, 0.0].view(), array![0.0, 1.0].view());
        assert_abs_diff_eq!(l, 0.0, epsilon = 1e-12);
        let (l, _, _) = orth_loss::<f64>(array![1.0, 2.0].view(), array![2.0, 4.0].view());
        assert_abs_diff_eq!(l, 1.0, epsilon = 1e-7);
        let (l, _, _) = orth_loss::<f64>(
            array![1.0, 1.0, 0.0].view(),
            array![1.0, 0.0, 0.0].view(),
        );
        assert_abs_diff_eq!(l, 0.5, epsilon = 1e-8);
    }

    #[test]
    fn orth_is_scale_invariant_and_bounded() {
        let mut rng = child_rng(5, "orth");
        for _ in 0..20 {
            let mut s = Array1::zeros(6);
            let mut p = Array1::zeros(6);
            fill_normal(&mut rng, s.as_slice_mut().unwrap(), 0.0, 1.0);
            fill_normal(&mut rng, p.as_slice_mut().unwrap(), 0.0, 1.0);
            let (l, _, _) = orth_loss::<f64>(s.view(), p.view());
            assert!((0.0..=1.0 + 1e-12).contains(&l), "loss {l} out of [0,1]");
            let s3 = s.mapv(|v| 3.0 * v);
            let p7 = p.mapv(|v| 0.7 * v);
            let (l2, _, _) = orth_loss::<f64>(s3.view(), p7.view());
            assert_abs_diff_eq!(l, l2, epsilon = 1e-6);
        }
    }

    #[test]
    fn orth_gradients_match_fd() {
        let mut rng = child_rng(6, "orth-fd");
        let mut s = Array1::zeros(5);
        let mut p = Array1::zeros(5);
        fill_normal(&mut rng, s.as_slice_mut().unwrap(), 0.5, 1.0);
        fill_normal(&mut rng, p.as_slice_mut().unwrap(), -0.2, 1.0);
        let (_, ds, dp) = orth_loss::<f64>(s.view(), p.view());
        let h = 1e-6;
        for i in 0..5 {
            let mut s2 = s.clone();
            s2[i] += h;
            let (lp, _, _) = orth_loss::<f64>(s2.view(), p.view());
            s2[i] = s[i] - h;
            let (lm, _, _) = orth_loss::<f64>(s2.view(), p.view());
            let fd = (lp - lm) / (2.0 * h);
            assert_abs_diff_eq!(fd, ds[i], epsilon = 1e-6);

            let mut p2 = p.clone();
            p2[i] += h;
            let (lp, _, _) = orth_loss::<f64>(s.view(), p2.view());
            p2[i] = p[i] - h;
            let (lm, _, _) = orth_loss::<f64>(s.view(), p2.view());
            let fd = (lp - lm) / (2.0 * h);
            assert_abs_diff_eq!(fd, dp[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn orth_zero_vectors_are_guarded() {
        let z = Array1::<f64>::zeros(4);
        let (l, ds, dp) = orth_loss::<f64>(z.view(), z.view());
        assert!(l.is_finite() && l == 0.0);
        assert!(ds.iter().chain(dp.iter()).all(|v| v.is_finite()));
    }

    #[test]
    fn total_applies_phase_gating() {
        let w = LossWeights::default();
        let (t, b) = compose_total::<f64>(1.0, 2.0, Some(3.0), 4.0, &w, Phase::Pretrain);
        assert_abs_diff_eq!(t, 1.0 + 2.0 + 0.01 * 3.0 + 0.02 * 4.0, epsilon = 1e-12);
        assert_eq!(b.total, t);
        assert_eq!(b.l_da, 3.0);

        // meta phase: l_da recorded but excluded from the total
        let (t1, _) = compose_total::<f64>(1.0, 2.0, Some(3.0), 4.0, &w, Phase::Meta);
        let (t2, _) = compose_total::<f64>(1.0, 2.0, Some(999.0), 4.0, &w, Phase::Meta);
        let (t3, _) = compose_total::<f64>(1.0, 2.0, None, 4.0, &w, Phase::Adapt);
        assert_eq!(t1, t2);
        assert_abs_diff_eq!(t1, t3, epsilon = 1e-12);
        assert_abs_diff_eq!(t1, 1.0 + 2.0 + 0.02 * 4.0, epsilon = 1e-12);

        let (t0, b0) = compose_total::<f64>(0.0, 0.0, Some(0.0), 0.0, &w, Phase::Pretrain);
        assert_eq!(t0, 0.0);
        assert_eq!(b0.total, 0.0);
    }

    use ndarray::Array2;
}
