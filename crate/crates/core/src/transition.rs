//! Frame-wise content-aware transition: a bank of `N` matrices mixed by
//! softmax weights generated from the current content mean.

use crate::error::{Error, Result};
use crate::gauss::{clamp_log_prec, GaussState, LOG_PREC_MAX, LOG_PREC_MIN};
use crate::params::{names, RecXiParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBank {
    pub n_components: usize,
    pub dim: usize,
    pub hidden: usize,
    /// `N × d²`; row `n` is `G′_n` in row-major order.
    pub matrices: Tensor,
    /// `h × d`.
    pub gen_w1: Tensor,
    /// `N × h`.
    pub gen_w2: Tensor,
}

/// Result of the diagonal precision prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagatedPrecision {
    pub log_prec: Vec<f64>,
    /// Rows of `G` that were entirely zero; their log-precision saturates
    /// at the upper clamp.
    pub degenerate_rows: Vec<usize>,
}

impl TransitionBank {
    /// The bank stored in `params`, or `None` in identity mode (`N = 0`).
    pub fn from_params(params: &RecXiParams) -> Option<Self> {
        let c = &params.config;
        if c.n_components == 0 {
            return None;
        }
        Some(TransitionBank {
            n_components: c.n_components,
            dim: c.state_dim,
            hidden: c.generator_hidden,
            matrices: params.get(names::BANK).clone(),
            gen_w1: params.get(names::GEN_W1).clone(),
            gen_w2: params.get(names::GEN_W2).clone(),
        })
    }

    /// `w = softmax(W2 · relu(W1 · ρ))`.
    pub fn mixture_weights(&self, rho: &[f64]) -> Result<Vec<f64>> {
        if self.n_components == 0 {
            return Err(Error::Invalid(
                "mixture weights need at least one component; use the identity transition".into(),
            ));
        }
        if rho.len() != self.dim {
            return Err(Error::Dim(format!("rho has {} entries, bank expects {}", rho.len(), self.dim)));
        }
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|i| dot(self.gen_w1.row(i), rho).max(0.0))
            .collect();
        let logits: Vec<f64> = (0..self.n_components)
            .map(|n| dot(self.gen_w2.row(n), &hidden))
            .collect();
        Ok(softmax(&logits))
    }

    /// `G = Σ_n w_n G′_n` as a `d × d` matrix.
    pub fn compose_transition(&self, w: &[f64]) -> Result<Tensor> {
        if w.len() != self.n_components {
            return Err(Error::Dim(format!(
                "{} mixture weights for {} components",
                w.len(),
                self.n_components
            )));
        }
        let dd = self.dim * self.dim;
        let mut g = vec![0.0; dd];
        for (n, &wn) in w.iter().enumerate() {
            for (acc, v) in g.iter_mut().zip(self.matrices.row(n)) {
                *acc += wn * v;
            }
        }
        Ok(Tensor::matrix(self.dim, self.dim, g))
    }

    /// Predict stage: `ρ⁺ = G ρ` with diagonal precision propagation.
    /// Returns the predicted state and the transition that produced it.
    pub fn predict(&self, state: &GaussState) -> Result<(GaussState, Tensor)> {
        let w = self.mixture_weights(&state.mean)?;
        let g = self.compose_transition(&w)?;
        let mean = matvec(&g, &state.mean);
        let prop = propagate_precision_diag(&state.log_prec, &g)?;
        Ok((
            GaussState {
                mean,
                log_prec: prop.log_prec,
            },
            g,
        ))
    }
}

/// `Φ⁺_ii = 1 / Σ_j G_ij² Φ_jj⁻¹`: the diagonal of `G Φ⁻¹ Gᵀ`, inverted
/// elementwise and clamped in the log domain.
pub fn propagate_precision_diag(log_phi: &[f64], g: &Tensor) -> Result<PropagatedPrecision> {
    let d = log_phi.len();
    if g.dims2() != (d, d) {
        return Err(Error::Dim(format!(
            "transition {:?} does not match state dimension {d}",
            g.shape()
        )));
    }
    let var: Vec<f64> = log_phi.iter().map(|&l| (-clamp_log_prec(l)).exp()).collect();
    let mut degenerate_rows = Vec::new();
    let log_prec = (0..d)
        .map(|i| {
            let row = g.row(i);
            let s: f64 = row.iter().zip(&var).map(|(gij, v)| gij * gij * v).sum();
            if row.iter().all(|&x| x == 0.0) {
                degenerate_rows.push(i);
            }
            (-(s.max((-LOG_PREC_MAX).exp())).ln()).clamp(LOG_PREC_MIN, LOG_PREC_MAX)
        })
        .collect();
    if !degenerate_rows.is_empty() {
        log::warn!(
            "transition has zero rows {degenerate_rows:?}; predicted precision saturated"
        );
    }
    Ok(PropagatedPrecision {
        log_prec,
        degenerate_rows,
    })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|i| dot(m.row(i), v)).collect()
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(n: usize, d: usize, h: usize) -> TransitionBank {
        let mut matrices = Tensor::zeros(&[n, d * d]);
        for k in 0..n {
            for i in 0..d {
                matrices.data_mut()[k * d * d + i * d + i] = 1.0 + k as f64;
            }
        }
        TransitionBank {
            n_components: n,
            dim: d,
            hidden: h,
            matrices,
            gen_w1: Tensor::filled(&[h, d], 0.5),
            gen_w2: Tensor::zeros(&[n, h]),
        }
    }

    #[test]
    fn zero_generator_gives_uniform_weights() {
        let b = bank(4, 3, 5);
        let w = b.mixture_weights(&[0.3, -1.0, 2.0]).unwrap();
        for v in w {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn singleton_bank() {
        let mut b = bank(1, 2, 3);
        b.gen_w2 = Tensor::filled(&[1, 3], 0.7);
        assert_eq!(b.mixture_weights(&[1.0, 2.0]).unwrap(), vec![1.0]);
        let g = b.compose_transition(&[1.0]).unwrap();
        assert_eq!(g.data(), b.matrices.row(0));
    }

    #[test]
    fn logits_ln2_and_zero() {
        // hidden = relu(1·ρ) = 1 for ρ = 1; logits = (ln 2, 0).
        let mut b = bank(2, 1, 1);
        b.gen_w1 = Tensor::matrix(1, 1, vec![1.0]);
        b.gen_w2 = Tensor::matrix(2, 1, vec![2f64.ln(), 0.0]);
        let w = b.mixture_weights(&[1.0]).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_bank_rejects_weights() {
        let b = TransitionBank {
            n_components: 0,
            ..bank(1, 2, 2)
        };
        assert!(b.mixture_weights(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn convex_combination_of_scaled_identities() {
        let b = bank(2, 2, 1);
        let g = b.compose_transition(&[0.5, 0.5]).unwrap();
        assert_eq!(g.data(), &[1.5, 0.0, 0.0, 1.5]);
        let one_hot = b.compose_transition(&[0.0, 1.0]).unwrap();
        assert_eq!(one_hot.data(), b.matrices.row(1));
        assert!(b.compose_transition(&[1.0]).is_err());
    }

    #[test]
    fn precision_propagation_cases() {
        let id = propagate_precision_diag(&[0.3, -0.2], &Tensor::identity(2)).unwrap();
        assert!((id.log_prec[0] - 0.3).abs() < 1e-15 && (id.log_prec[1] + 0.2).abs() < 1e-15);

        let two = propagate_precision_diag(&[0.0], &Tensor::matrix(1, 1, vec![2.0])).unwrap();
        assert!((two.log_prec[0].exp() - 0.25).abs() < 1e-15);

        let shear = Tensor::matrix(2, 2, vec![1.0, 1.0, 0.0, 1.0]);
        let p = propagate_precision_diag(&[0.0, 0.0], &shear).unwrap();
        assert!((p.log_prec[0].exp() - 0.5).abs() < 1e-15);
        assert!((p.log_prec[1].exp() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_row_saturates() {
        let g = Tensor::matrix(2, 2, vec![0.0, 0.0, 0.0, 1.0]);
        let p = propagate_precision_diag(&[1.0, 1.0], &g).unwrap();
        assert_eq!(p.degenerate_rows, vec![0]);
        assert_eq!(p.log_prec[0], LOG_PREC_MAX);
    }

    proptest::proptest! {
        #[test]
        fn weights_shift_invariant(rho in proptest::collection::vec(-2.0f64..2.0, 3), shift in -5.0f64..5.0) {
            let mut b = bank(3, 3, 2);
            b.gen_w1 = Tensor::matrix(2, 3, vec![0.4, -0.3, 0.2, 0.1, 0.5, -0.6]);
            b.gen_w2 = Tensor::matrix(3, 2, vec![0.3, -0.2, 0.7, 0.1, -0.4, 0.9]);
            let w = b.mixture_weights(&rho).unwrap();
            let hidden: Vec<f64> = (0..2).map(|i| dot(b.gen_w1.row(i), &rho).max(0.0)).collect();
            let logits: Vec<f64> = (0..3).map(|n| dot(b.gen_w2.row(n), &hidden) + shift).collect();
            let shifted = softmax(&logits);
            for (a, c) in w.iter().zip(&shifted) {
                proptest::prop_assert!((a - c).abs() < 1e-14);
            }
            proptest::prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
    }
}
