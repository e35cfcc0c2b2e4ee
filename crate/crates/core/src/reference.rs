//! Dense-matrix form of the three-layer recursion with explicit inverses.
//!
//! Slow and only meant as an oracle for the diagonal implementation in
//! [`crate::gauss`]: with diagonal inputs and diagonal transitions the two
//! must agree to rounding.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gauss::{EncodedFrame, RecXiOutput};
use crate::params::{names, ContentRemoval, RecXiParams};
use crate::tensor::Tensor;

const MAX_CONDITION: f64 = 1e12;

/// How the predicted precision is formed from a dense transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrecisionRule {
    /// `Φ⁺ = (G Φ⁻¹ Gᵀ)⁻¹` as a full matrix.
    Exact,
    /// Keep only the diagonal of `G Φ⁻¹ Gᵀ` before inverting, mirroring the
    /// diagonal implementation.
    DiagonalOfCovariance,
}

#[derive(Debug, Clone)]
pub struct DenseGauss {
    pub mean: DVector<f64>,
    pub prec: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct DenseBank {
    pub matrices: Vec<DMatrix<f64>>,
    pub gen_w1: DMatrix<f64>,
    pub gen_w2: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct DenseRecXiParams {
    pub priors: [DenseGauss; 3],
    pub bank: Option<DenseBank>,
    pub content_removal: ContentRemoval,
    pub precision_rule: PrecisionRule,
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    let (r, c) = t.dims2();
    DMatrix::from_row_slice(r, c, t.data())
}

impl DenseRecXiParams {
    /// Lifts diagonal parameters into full matrices.
    pub fn from_params(params: &RecXiParams, precision_rule: PrecisionRule) -> Self {
        let d = params.config.state_dim;
        let prior = |k: usize| DenseGauss {
            mean: DVector::from_row_slice(params.get(names::PRIOR_MEAN[k]).data()),
            prec: DMatrix::from_diagonal(&DVector::from_iterator(
                d,
                params
                    .get(names::PRIOR_LOG_PREC[k])
                    .data()
                    .iter()
                    .map(|&l| crate::gauss::clamp_log_prec(l).exp()),
            )),
        };
        let bank = (params.config.n_components > 0).then(|| {
            let m = params.get(names::BANK);
            DenseBank {
                matrices: (0..m.rows())
                    .map(|n| DMatrix::from_row_slice(d, d, m.row(n)))
                    .collect(),
                gen_w1: to_dmatrix(params.get(names::GEN_W1)),
                gen_w2: to_dmatrix(params.get(names::GEN_W2)),
            }
        });
        DenseRecXiParams {
            priors: [prior(0), prior(1), prior(2)],
            bank,
            content_removal: params.config.content_removal,
            precision_rule,
        }
    }
}

fn inverse(m: &DMatrix<f64>, frame: usize) -> Result<DMatrix<f64>> {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(cond <= MAX_CONDITION) {
        return Err(Error::Singular { frame, cond });
    }
    m.clone()
        .try_inverse()
        .ok_or(Error::Singular { frame, cond })
}

/// Gaussian update `P = E + P_prev`, `μ = P⁻¹ (E e + P_prev μ_prev)`.
fn update(prev: &DenseGauss, evidence: &DVector<f64>, evidence_prec: &DMatrix<f64>, frame: usize) -> Result<DenseGauss> {
    let prec = evidence_prec + &prev.prec;
    let mean = inverse(&prec, frame)? * (evidence_prec * evidence + &prev.prec * &prev.mean);
    Ok(DenseGauss { mean, prec })
}

/// `(L⁻¹ + P⁻¹)⁻¹`.
fn adjusted(l: &DMatrix<f64>, p: &DMatrix<f64>, frame: usize) -> Result<DMatrix<f64>> {
    inverse(&(inverse(l, frame)? + inverse(p, frame)?), frame)
}

fn softmax(v: &DVector<f64>) -> DVector<f64> {
    let mx = v.max();
    let e = v.map(|x| (x - mx).exp());
    let s = e.sum();
    e / s
}

/// Dense counterpart of [`crate::gauss::recxi_forward`].
pub fn recxi_reference(frames: &[EncodedFrame], params: &DenseRecXiParams) -> Result<RecXiOutput> {
    if frames.is_empty() {
        return Err(Error::EmptySequence);
    }
    let d = params.priors[0].mean.len();
    let mut s1 = params.priors[0].clone();
    let mut s2_pred = params.priors[1].clone();
    let mut s3 = params.priors[2].clone();
    let mut s2 = s2_pred.clone();
    let mut per_frame_rho = Vec::with_capacity(frames.len() * d);
    for (t, f) in frames.iter().enumerate() {
        if f.dim() != d {
            return Err(Error::Dim(format!("frame {t} has dimension {}, expected {d}", f.dim())));
        }
        let z = DVector::from_row_slice(&f.z);
        let l = DMatrix::from_diagonal(&DVector::from_iterator(d, f.log_l.iter().map(|v| v.exp())));

        s1 = update(&s1, &z, &l, t)?;

        let l2 = adjusted(&l, &s1.prec, t)?;
        s2 = update(&s2_pred, &(&z - &s1.mean), &l2, t)?;

        s2_pred = match &params.bank {
            None => s2.clone(),
            Some(bank) => {
                let hidden = (&bank.gen_w1 * &s2.mean).map(|v| v.max(0.0));
                let w = softmax(&(&bank.gen_w2 * hidden));
                let mut g = DMatrix::zeros(d, d);
                for (wn, gn) in w.iter().zip(&bank.matrices) {
                    g += gn * *wn;
                }
                let cov = &g * inverse(&s2.prec, t)? * g.transpose();
                let prec = match params.precision_rule {
                    PrecisionRule::Exact => inverse(&cov, t)?,
                    PrecisionRule::DiagonalOfCovariance => {
                        DMatrix::from_diagonal(&cov.diagonal().map(|v| 1.0 / v))
                    }
                };
                DenseGauss {
                    mean: &g * &s2.mean,
                    prec,
                }
            }
        };

        let removal = match params.content_removal {
            ContentRemoval::Predicted => &s2_pred,
            ContentRemoval::Updated => &s2,
        };
        let l3 = adjusted(&l, &removal.prec, t)?;
        s3 = update(&s3, &(&z - &removal.mean), &l3, t)?;
        per_frame_rho.extend(s2.mean.iter());
    }
    let phi: Vec<f64> = s1.mean.iter().copied().collect();
    let rho: Vec<f64> = s2.mean.iter().copied().collect();
    let phi_lin = phi.iter().zip(&rho).map(|(a, b)| a - b).collect();
    Ok(RecXiOutput {
        phi,
        rho,
        phi_tilde: s3.mean.iter().copied().collect(),
        phi_lin,
        per_frame_rho: Tensor::matrix(frames.len(), d, per_frame_rho),
    })
}
