//! Diagonal Gaussian inference: xi-vector pooling and the three-layer
//! recurrent recursion, computed directly on log-precision vectors.
//!
//! Every update is a per-dimension convex combination whose gains are the
//! two-way softmax of the incoming evidence log-precision and the carried
//! log-precision. Accumulated precisions are formed with log-add-exp and
//! clamped to `[LOG_PREC_MIN, LOG_PREC_MAX]`.

use crate::autodiff::{log_add_exp, softmax2};
use crate::error::{Error, Result};
use crate::params::{names, ContentRemoval, RecXiParams};
use crate::tensor::Tensor;
use crate::transition::TransitionBank;

pub const LOG_PREC_MIN: f64 = -14.0;
pub const LOG_PREC_MAX: f64 = 14.0;

pub fn clamp_log_prec(v: f64) -> f64 {
    v.clamp(LOG_PREC_MIN, LOG_PREC_MAX)
}

/// Posterior mean and diagonal log-precision for one layer at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussState {
    pub mean: Vec<f64>,
    pub log_prec: Vec<f64>,
}

impl GaussState {
    pub fn new(mean: Vec<f64>, log_prec: Vec<f64>) -> Result<Self> {
        if mean.len() != log_prec.len() {
            return Err(Error::Dim(format!(
                "mean has {} entries, log-precision {}",
                mean.len(),
                log_prec.len()
            )));
        }
        let log_prec = log_prec.into_iter().map(clamp_log_prec).collect();
        Ok(GaussState { mean, log_prec })
    }

    /// Zero mean, unit precision.
    pub fn standard(dim: usize) -> Self {
        GaussState {
            mean: vec![0.0; dim],
            log_prec: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn precision(&self) -> Vec<f64> {
        self.log_prec.iter().map(|l| l.exp()).collect()
    }
}

/// Encoder output for one frame: point estimate and log-precision.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFrame {
    pub z: Vec<f64>,
    pub log_l: Vec<f64>,
}

impl EncodedFrame {
    pub fn new(z: Vec<f64>, log_l: Vec<f64>) -> Result<Self> {
        if z.len() != log_l.len() {
            return Err(Error::Dim(format!(
                "z has {} entries, log_L {}",
                z.len(),
                log_l.len()
            )));
        }
        let log_l = log_l.into_iter().map(clamp_log_prec).collect();
        Ok(EncodedFrame { z, log_l })
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }
}

/// Last-frame posterior means of the three layers.
#[derive(Debug, Clone, PartialEq)]
pub struct RecXiOutput {
    /// Layer 1: precursor speaker mean.
    pub phi: Vec<f64>,
    /// Layer 2: content mean.
    pub rho: Vec<f64>,
    /// Layer 3: disentangled speaker mean.
    pub phi_tilde: Vec<f64>,
    /// `phi − rho`.
    pub phi_lin: Vec<f64>,
    /// Layer-2 updated mean at every frame, `T × d`.
    pub per_frame_rho: Tensor,
}

fn check_dim(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Dim(format!("{what} has dimension {got}, expected {want}")));
    }
    Ok(())
}

/// Batch xi-vector posterior: `P_s = Σ L_t + P_p`,
/// `φ_s = P_s⁻¹ [Σ L_t z_t + P_p φ_p]`, elementwise on diagonals.
pub fn xi_pool(frames: &[EncodedFrame], prior: &GaussState) -> Result<GaussState> {
    if frames.is_empty() {
        return Err(Error::EmptySequence);
    }
    let d = prior.dim();
    let mut prec: Vec<f64> = prior.precision();
    let mut weighted: Vec<f64> = prior.mean.iter().zip(&prec).map(|(m, p)| m * p).collect();
    for f in frames {
        check_dim("frame", f.dim(), d)?;
        for i in 0..d {
            let l = f.log_l[i].exp();
            prec[i] += l;
            weighted[i] += l * f.z[i];
        }
    }
    let mean = weighted.iter().zip(&prec).map(|(w, p)| w / p).collect();
    let log_prec = prec.iter().map(|p| clamp_log_prec(p.ln())).collect();
    Ok(GaussState { mean, log_prec })
}

/// Adjusted uncertainty `L′ = L P / (L + P)` in the log domain.
pub fn fuse_uncertainty(log_l: &[f64], log_p: &[f64]) -> Vec<f64> {
    debug_assert_eq!(log_l.len(), log_p.len());
    log_l
        .iter()
        .zip(log_p)
        .map(|(&l, &p)| l + p - log_add_exp(l, p))
        .collect()
}

/// Gain factors `(A_t, A_{t−1})`: per-dimension softmax over the evidence
/// and carried log-precisions.
pub fn gain_pair(log_lp: &[f64], log_phi_prev: &[f64]) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(log_lp.len(), log_phi_prev.len());
    log_lp
        .iter()
        .zip(log_phi_prev)
        .map(|(&a, &b)| softmax2(a, b))
        .unzip()
}

/// Update stage shared by all layers: evidence `(z, log_l)` fused into the
/// carried state.
fn update(prev: &GaussState, z: &[f64], log_l: &[f64]) -> GaussState {
    let (a_t, a_prev) = gain_pair(log_l, &prev.log_prec);
    let mean = (0..z.len())
        .map(|i| a_t[i] * z[i] + a_prev[i] * prev.mean[i])
        .collect();
    let log_prec = log_l
        .iter()
        .zip(&prev.log_prec)
        .map(|(&l, &p)| clamp_log_prec(log_add_exp(l, p)))
        .collect();
    GaussState { mean, log_prec }
}

/// Layer 1: identity transition, raw frame evidence.
pub fn step_layer1(prev: &GaussState, frame: &EncodedFrame) -> Result<GaussState> {
    check_dim("frame", frame.dim(), prev.dim())?;
    Ok(update(prev, &frame.z, &frame.log_l))
}

/// Removes `reference` from the frame: `z − μ` with uncertainty widened by
/// the reference's covariance.
fn remove(frame: &EncodedFrame, reference: &GaussState) -> (Vec<f64>, Vec<f64>) {
    let z: Vec<f64> = frame
        .z
        .iter()
        .zip(&reference.mean)
        .map(|(z, m)| z - m)
        .collect();
    (z, fuse_uncertainty(&frame.log_l, &reference.log_prec))
}

/// Layer-2 update: frame evidence minus the layer-1 speaker estimate at
/// this frame, fused into the predicted content state from frame `t − 1`.
pub fn step_layer2(
    prev_pred: &GaussState,
    frame: &EncodedFrame,
    layer1_now: &GaussState,
) -> Result<GaussState> {
    check_dim("frame", frame.dim(), prev_pred.dim())?;
    check_dim("layer-1 state", layer1_now.dim(), prev_pred.dim())?;
    let (z, log_l) = remove(frame, layer1_now);
    Ok(update(prev_pred, &z, &log_l))
}

/// Layer-3 update: frame evidence minus the layer-2 content estimate,
/// identity transition.
pub fn step_layer3(
    prev: &GaussState,
    frame: &EncodedFrame,
    layer2_pred: &GaussState,
) -> Result<GaussState> {
    check_dim("frame", frame.dim(), prev.dim())?;
    check_dim("layer-2 state", layer2_pred.dim(), prev.dim())?;
    let (z, log_l) = remove(frame, layer2_pred);
    Ok(update(prev, &z, &log_l))
}

/// Prior of layer `k` (0-based) as stored in `params`.
pub fn prior(params: &RecXiParams, layer: usize) -> GaussState {
    GaussState {
        mean: params.get(names::PRIOR_MEAN[layer]).data().to_vec(),
        log_prec: params
            .get(names::PRIOR_LOG_PREC[layer])
            .data()
            .iter()
            .map(|&v| clamp_log_prec(v))
            .collect(),
    }
}

/// Runs the three layers over a sequence. Within frame `t`: layer-1
/// update, layer-2 update against the layer-1 state, transition generated
/// from the layer-2 mean, layer-2 predict, then layer-3 update against the
/// layer-2 prediction (or update, per [`ContentRemoval`]).
pub fn recxi_forward(frames: &[EncodedFrame], params: &RecXiParams) -> Result<RecXiOutput> {
    if frames.is_empty() {
        return Err(Error::EmptySequence);
    }
    let d = params.config.state_dim;
    let bank = TransitionBank::from_params(params);
    let mut s1 = prior(params, 0);
    let mut s2_pred = prior(params, 1);
    let mut s3 = prior(params, 2);
    let mut s2 = s2_pred.clone();
    let mut per_frame_rho = Vec::with_capacity(frames.len() * d);
    for f in frames {
        s1 = step_layer1(&s1, f)?;
        s2 = step_layer2(&s2_pred, f, &s1)?;
        s2_pred = match &bank {
            Some(b) => b.predict(&s2)?.0,
            None => s2.clone(),
        };
        let removal = match params.config.content_removal {
            ContentRemoval::Predicted => &s2_pred,
            ContentRemoval::Updated => &s2,
        };
        s3 = step_layer3(&s3, f, removal)?;
        per_frame_rho.extend_from_slice(&s2.mean);
    }
    let phi_lin = s1.mean.iter().zip(&s2.mean).map(|(a, b)| a - b).collect();
    Ok(RecXiOutput {
        phi: s1.mean,
        rho: s2.mean,
        phi_tilde: s3.mean,
        phi_lin,
        per_frame_rho: Tensor::matrix(frames.len(), d, per_frame_rho),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame(z: &[f64], l: &[f64]) -> EncodedFrame {
        EncodedFrame::new(z.to_vec(), l.iter().map(|v: &f64| v.ln()).collect()).unwrap()
    }

    fn state(m: &[f64], p: &[f64]) -> GaussState {
        GaussState::new(m.to_vec(), p.iter().map(|v: &f64| v.ln()).collect()).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn xi_pool_single_frame() {
        let s = xi_pool(&[frame(&[2.0, 2.0], &[1.0, 1.0])], &GaussState::standard(2)).unwrap();
        assert_eq!(s.mean, vec![1.0, 1.0]);
        close(s.log_prec[0].exp(), 2.0, 1e-15);
    }

    #[test]
    fn xi_pool_two_frames() {
        let s = xi_pool(&[frame(&[1.0], &[1.0]), frame(&[-1.0], &[3.0])], &GaussState::standard(1)).unwrap();
        close(s.log_prec[0].exp(), 5.0, 1e-14);
        close(s.mean[0], -0.4, 1e-15);
    }

    #[test]
    fn xi_pool_uninformative_frames() {
        let prior = state(&[0.7, -0.3], &[2.0, 0.5]);
        let frames: Vec<_> = (0..5)
            .map(|i| EncodedFrame::new(vec![i as f64, -3.0], vec![LOG_PREC_MIN; 2]).unwrap())
            .collect();
        let s = xi_pool(&frames, &prior).unwrap();
        for i in 0..2 {
            close(s.mean[i], prior.mean[i], 1e-4);
            close(s.log_prec[i], prior.log_prec[i], 1e-4);
        }
    }

    #[test]
    fn xi_pool_errors() {
        assert!(matches!(xi_pool(&[], &GaussState::standard(1)), Err(Error::EmptySequence)));
        assert!(xi_pool(&[frame(&[1.0], &[1.0])], &GaussState::standard(2)).is_err());
    }

    #[test]
    fn fuse_cases() {
        close(fuse_uncertainty(&[2f64.ln()], &[2f64.ln()])[0].exp(), 1.0, 1e-15);
        close(fuse_uncertainty(&[3f64.ln()], &[6f64.ln()])[0].exp(), 2.0, 1e-14);
        let inf = fuse_uncertainty(&[0.4], &[LOG_PREC_MAX])[0];
        close(inf, 0.4, 1e-5);
    }

    #[test]
    fn gain_cases() {
        let (a, b) = gain_pair(&[0.3], &[0.3]);
        assert_eq!((a[0], b[0]), (0.5, 0.5));
        let (a, b) = gain_pair(&[3f64.ln()], &[0.0]);
        close(a[0], 0.75, 1e-15);
        close(b[0], 0.25, 1e-15);
    }

    #[test]
    fn layer1_hand_case() {
        let s = step_layer1(&GaussState::standard(1), &frame(&[2.0], &[1.0])).unwrap();
        close(s.mean[0], 1.0, 1e-15);
        close(s.log_prec[0].exp(), 2.0, 1e-15);
    }

    #[test]
    fn layer1_ignores_uninformative_frame() {
        let prev = state(&[0.5], &[3.0]);
        let f = EncodedFrame::new(vec![9.0], vec![LOG_PREC_MIN]).unwrap();
        let s = step_layer1(&prev, &f).unwrap();
        close(s.mean[0], 0.5, 1e-5);
        close(s.log_prec[0], prev.log_prec[0], 1e-6);
    }

    #[test]
    fn layer2_hand_case() {
        let s = step_layer2(
            &GaussState::standard(1),
            &frame(&[2.0], &[1.0]),
            &state(&[0.0], &[1.0]),
        )
        .unwrap();
        close(s.mean[0], 2.0 / 3.0, 1e-15);
        close(s.log_prec[0].exp(), 1.5, 1e-15);
    }

    #[test]
    fn layer2_perfect_speaker_removal() {
        let z = [0.8, -1.2];
        let s = step_layer2(&GaussState::standard(2), &frame(&z, &[1.0, 2.0]), &state(&z, &[4.0, 4.0])).unwrap();
        assert_eq!(s.mean, vec![0.0, 0.0]);
    }

    #[test]
    fn layer3_reduces_to_layer1_without_content() {
        let prev = state(&[0.2, 0.1], &[1.5, 0.7]);
        let f = frame(&[1.0, -2.0], &[0.9, 2.5]);
        let none = GaussState::new(vec![0.0; 2], vec![LOG_PREC_MAX; 2]).unwrap();
        let s3 = step_layer3(&prev, &f, &none).unwrap();
        let s1 = step_layer1(&prev, &f).unwrap();
        for i in 0..2 {
            close(s3.mean[i], s1.mean[i], 1e-5);
        }
    }

    #[test]
    fn layer3_all_content() {
        let z = [0.3, 0.9];
        let s = step_layer3(&GaussState::standard(2), &frame(&z, &[1.0, 1.0]), &state(&z, &[2.0, 2.0])).unwrap();
        assert_eq!(s.mean, vec![0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch_fails() {
        assert!(step_layer1(&GaussState::standard(2), &frame(&[1.0], &[1.0])).is_err());
        assert!(step_layer2(&GaussState::standard(1), &frame(&[1.0], &[1.0]), &GaussState::standard(2)).is_err());
    }

    #[test]
    fn layer1_recursion_matches_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let d = rng.random_range(1..=16);
            let t = rng.random_range(1..=32);
            let frames: Vec<_> = (0..t)
                .map(|_| {
                    EncodedFrame::new(
                        (0..d).map(|_| rng.random_range(-3.0..3.0)).collect(),
                        (0..d).map(|_| rng.random_range(-3.0..3.0)).collect(),
                    )
                    .unwrap()
                })
                .collect();
            let prior = GaussState::new(
                (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let mut s = prior.clone();
            for f in &frames {
                s = step_layer1(&s, f).unwrap();
            }
            let pooled = xi_pool(&frames, &prior).unwrap();
            for i in 0..d {
                close(s.mean[i], pooled.mean[i], 1e-10);
                close(s.log_prec[i], pooled.log_prec[i], 1e-10);
            }
        }
    }

    #[test]
    fn phi_lin_is_exact_difference() {
        let cfg = ModelConfig {
            state_dim: 3,
            n_components: 2,
            generator_hidden: 4,
            n_classes: 2,
            ..ModelConfig::default()
        };
        let params = RecXiParams::init(cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frames: Vec<_> = (0..6)
            .map(|_| {
                EncodedFrame::new(
                    (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        let out = recxi_forward(&frames, &params).unwrap();
        for i in 0..3 {
            assert_eq!(out.phi_lin[i], out.phi[i] - out.rho[i]);
        }
        assert_eq!(out.per_frame_rho.dims2(), (6, 3));
        assert!(matches!(recxi_forward(&[], &params), Err(Error::EmptySequence)));
    }

    proptest::proptest! {
        #[test]
        fn gains_sum_to_one(a in proptest::collection::vec(-14.0f64..14.0, 8), b in proptest::collection::vec(-14.0f64..14.0, 8)) {
            let (x, y) = gain_pair(&a, &b);
            for i in 0..8 {
                proptest::prop_assert!(x[i] > 0.0 && x[i] < 1.0 || a[i] - b[i] > 30.0);
                proptest::prop_assert!((x[i] + y[i] - 1.0).abs() <= 1e-15);
            }
        }

        #[test]
        fn means_stay_in_input_hull(
            zs in proptest::collection::vec(-2.0f64..2.0, 20),
            ls in proptest::collection::vec(-5.0f64..5.0, 20),
            p0 in -2.0f64..2.0,
        ) {
            let mut s = GaussState::new(vec![p0], vec![0.0]).unwrap();
            let mut last_prec = s.log_prec[0];
            for (z, l) in zs.iter().zip(&ls) {
                s = step_layer1(&s, &EncodedFrame::new(vec![*z], vec![*l]).unwrap()).unwrap();
                proptest::prop_assert!(s.mean[0].abs() <= 2.0 + 1e-12);
                proptest::prop_assert!(s.log_prec[0] >= last_prec);
                last_prec = s.log_prec[0];
            }
        }
    }
}
