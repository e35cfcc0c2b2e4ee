//! Training objectives: additive-angular-margin softmax, the similarity
//! preserving loss between the speaker posterior and its linear
//! counterpart, and their weighted sum.

use crate::autodiff::{Bindings, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Additive angular margin in radians.
    pub margin: f64,
    pub scale: f64,
    /// Weight of the classification loss.
    pub alpha: f64,
    /// Weight of the similarity-preserving loss.
    pub beta: f64,
    /// Stop gradients through the teacher branch of the similarity loss.
    pub detach_teacher: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.2,
            scale: 30.0,
            alpha: 1.0,
            beta: 3000.0,
            detach_teacher: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: key.into(),
                msg: msg.into(),
            })
        };
        if !(0.0..=0.5).contains(&self.margin) {
            return bad("margin", "must lie in [0, 0.5]");
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad("scale", "must be positive");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha", "must be non-negative");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta", "must be non-negative");
        }
        Ok(())
    }
}

/// `b × C` indicator matrix of `labels`.
pub fn one_hot(labels: &[usize], n_classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), n_classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= n_classes {
            return Err(Error::Invalid(format!("label {y} outside 0..{n_classes}")));
        }
        t.data_mut()[i * n_classes + y] = 1.0;
    }
    Ok(t)
}

/// Mean AAM-softmax cross-entropy. `one_hot` is a `b × C` indicator.
pub fn build_aam_loss(
    g: &mut Graph,
    embeddings: NodeId,
    class_weights: NodeId,
    one_hot: NodeId,
    batch: usize,
    cfg: &LossConfig,
) -> NodeId {
    let e = g.row_l2_normalize(embeddings);
    let w = g.row_l2_normalize(class_weights);
    let w_t = g.transpose(w);
    let cos = g.matmul(e, w_t);
    let target = g.angular_margin(cos, cfg.margin);
    let delta = g.sub(target, cos);
    let masked = g.mul(one_hot, delta);
    let adjusted = g.add(cos, masked);
    let logits = g.scale(adjusted, cfg.scale);
    let log_p = g.log_softmax(logits);
    let picked = g.mul(one_hot, log_p);
    let total = g.sum(picked);
    g.scale(total, -1.0 / batch as f64)
}

/// `‖N(T Tᵀ) − N(S Sᵀ)‖²_F / b²` with `N` the row-wise L2 normalization.
pub fn build_ssp_loss(
    g: &mut Graph,
    teacher: NodeId,
    student: NodeId,
    batch: usize,
    detach_teacher: bool,
) -> NodeId {
    let gram = |g: &mut Graph, x: NodeId| {
        let xt = g.transpose(x);
        let m = g.matmul(x, xt);
        g.row_l2_normalize(m)
    };
    let teacher = if detach_teacher { g.detach(teacher) } else { teacher };
    let gt = gram(g, teacher);
    let gs = gram(g, student);
    let diff = g.sub(gt, gs);
    let f = g.frobenius_sq(diff);
    g.scale(f, 1.0 / (batch * batch) as f64)
}

/// `α · cls + β · ssp`. A zero weight drops its term from the graph.
pub fn build_total_loss(g: &mut Graph, cls: NodeId, ssp: Option<NodeId>, cfg: &LossConfig) -> NodeId {
    let a = g.scale(cls, cfg.alpha);
    match ssp {
        Some(s) if cfg.beta != 0.0 => {
            let b = g.scale(s, cfg.beta);
            g.add(a, b)
        }
        _ => a,
    }
}

fn check_rows(what: &str, t: &Tensor, rows: usize) -> Result<()> {
    if t.rows() != rows {
        return Err(Error::Dim(format!("{what} has {} rows, expected {rows}", t.rows())));
    }
    Ok(())
}

/// AAM-softmax loss on plain tensors.
pub fn aam_softmax_loss(
    embeddings: &Tensor,
    class_weights: &Tensor,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<f64> {
    check_rows("embeddings", embeddings, labels.len())?;
    if embeddings.cols() != class_weights.cols() {
        return Err(Error::Dim(format!(
            "embeddings have {} columns, class weights {}",
            embeddings.cols(),
            class_weights.cols()
        )));
    }
    let mut g = Graph::new();
    let e = g.input("embeddings");
    let w = g.input("classes");
    let y = g.input("labels");
    let loss = build_aam_loss(&mut g, e, w, y, labels.len(), cfg);
    let bind = Bindings::new()
        .with("embeddings", embeddings.clone())
        .with("classes", class_weights.clone())
        .with("labels", one_hot(labels, class_weights.rows())?);
    Ok(g.eval(&bind)?[loss].item())
}

/// `φ − ρ`.
pub fn speaker_preserve(phi: &[f64], rho: &[f64]) -> Result<Vec<f64>> {
    if phi.len() != rho.len() {
        return Err(Error::Dim(format!("phi has {} entries, rho {}", phi.len(), rho.len())));
    }
    Ok(phi.iter().zip(rho).map(|(a, b)| a - b).collect())
}

/// Similarity-preserving loss on plain tensors.
pub fn ssp_loss(teacher: &Tensor, student: &Tensor) -> Result<f64> {
    let b = teacher.rows();
    if b < 2 {
        return Err(Error::Invalid("similarity loss needs at least two rows".into()));
    }
    if teacher.dims2() != student.dims2() {
        return Err(Error::Dim(format!(
            "teacher {:?} and student {:?} differ",
            teacher.shape(),
            student.shape()
        )));
    }
    let mut g = Graph::new();
    let t = g.input("teacher");
    let s = g.input("student");
    let loss = build_ssp_loss(&mut g, t, s, b, false);
    let bind = Bindings::new()
        .with("teacher", teacher.clone())
        .with("student", student.clone());
    Ok(g.eval(&bind)?[loss].item())
}

pub fn total_loss(cls: f64, ssp: f64, cfg: &LossConfig) -> f64 {
    cfg.alpha * cls + cfg.beta * ssp
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn plain_ce(emb: &Tensor, classes: &Tensor, labels: &[usize]) -> f64 {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let e = emb.row(i);
            let cos: Vec<f64> = (0..classes.rows())
                .map(|j| {
                    let w = classes.row(j);
                    e.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / (norm(e) * norm(w))
                })
                .collect();
            let lse = cos.iter().map(|c| c.exp()).sum::<f64>().ln();
            total += lse - cos[y];
        }
        total / labels.len() as f64
    }

    #[test]
    fn margin_free_reduces_to_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = LossConfig {
            margin: 0.0,
            scale: 1.0,
            ..LossConfig::default()
        };
        for _ in 0..20 {
            let emb = random(&mut rng, 5, 4);
            let cls = random(&mut rng, 3, 4);
            let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
            let a = aam_softmax_loss(&emb, &cls, &labels, &cfg).unwrap();
            assert!((a - plain_ce(&emb, &cls, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn aligned_embedding_loss() {
        let emb = Tensor::matrix(1, 2, vec![1.0, 0.0]);
        let cls = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let l = aam_softmax_loss(&emb, &cls, &[0], &LossConfig::default()).unwrap();
        let target = 30.0 * 0.2f64.cos();
        let expect = (-target).exp().ln_1p();
        assert!((l - expect).abs() < 1e-12 * expect, "{l} vs {expect}");
        assert!(l > 1e-13 && l < 3e-13);
    }

    #[test]
    fn margin_increases_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let with = LossConfig::default();
        let without = LossConfig {
            margin: 0.0,
            ..LossConfig::default()
        };
        for _ in 0..50 {
            let emb = random(&mut rng, 4, 3);
            let cls = random(&mut rng, 3, 3);
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
            let a = aam_softmax_loss(&emb, &cls, &labels, &with).unwrap();
            let b = aam_softmax_loss(&emb, &cls, &labels, &without).unwrap();
            assert!(a >= b);
        }
    }

    #[test]
    fn aam_is_row_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let emb = random(&mut rng, 3, 4);
        let cls = random(&mut rng, 2, 4);
        let mut scaled = emb.clone();
        scaled.data_mut()[4..8].iter_mut().for_each(|v| *v *= 7.5);
        let cfg = LossConfig::default();
        let a = aam_softmax_loss(&emb, &cls, &[0, 1, 1], &cfg).unwrap();
        let b = aam_softmax_loss(&scaled, &cls, &[0, 1, 1], &cfg).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn aam_rejects_zero_rows_and_bad_labels() {
        let cls = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let cfg = LossConfig::default();
        assert!(aam_softmax_loss(&Tensor::zeros(&[1, 2]), &cls, &[0], &cfg).is_err());
        assert!(aam_softmax_loss(&Tensor::matrix(1, 2, vec![1.0, 1.0]), &cls, &[2], &cfg).is_err());
    }

    #[test]
    fn speaker_preserve_cases() {
        assert_eq!(speaker_preserve(&[3.0, 1.0], &[1.0, 1.0]).unwrap(), vec![2.0, 0.0]);
        assert_eq!(speaker_preserve(&[0.4, -2.0], &[0.4, -2.0]).unwrap(), vec![0.0, 0.0]);
        assert!(speaker_preserve(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ssp_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 5, 3);
        assert_eq!(ssp_loss(&x, &x).unwrap(), 0.0);
        assert!(ssp_loss(&x, &x.map(|v| 5.0 * v)).unwrap() < 1e-12);
        let t = Tensor::identity(2);
        let s = Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 0.0]);
        let l = ssp_loss(&t, &s).unwrap();
        assert!((l - (2.0 - 2f64.sqrt()) / 2.0).abs() < 1e-15);
        assert!((l - 0.29289).abs() < 1e-4);
        assert!(ssp_loss(&x.map(|_| 0.0), &x).is_err());
        assert!(ssp_loss(&Tensor::zeros(&[1, 3]), &Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn total_loss_cases() {
        let cfg = LossConfig::default();
        assert!((total_loss(2.0, 0.001, &cfg) - 5.0).abs() < 1e-12);
        let off = LossConfig {
            beta: 0.0,
            ..cfg.clone()
        };
        assert_eq!(total_loss(2.0, 0.4, &off), 2.0);
        let zero = LossConfig { alpha: 0.0, ..cfg };
        assert_eq!(total_loss(2.0, 0.0, &zero), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        for bad in [
            LossConfig { margin: 0.6, ..LossConfig::default() },
            LossConfig { scale: 0.0, ..LossConfig::default() },
            LossConfig { beta: -1.0, ..LossConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let e = g.input("e");
        let w = g.input("w");
        let y = g.input("y");
        let t = g.input("t");
        let s = g.input("s");
        let cfg = LossConfig {
            scale: 4.0,
            beta: 3.0,
            ..LossConfig::default()
        };
        let cls = build_aam_loss(&mut g, e, w, y, 4, &cfg);
        let ssp = build_ssp_loss(&mut g, t, s, 4, false);
        let total = build_total_loss(&mut g, cls, Some(ssp), &cfg);
        let bind = Bindings::new()
            .with("e", random(&mut rng, 4, 3))
            .with("w", random(&mut rng, 3, 3))
            .with("y", one_hot(&[0, 2, 1, 2], 3).unwrap())
            .with("t", random(&mut rng, 4, 3))
            .with("s", random(&mut rng, 4, 3));
        for loss in [cls, ssp, total] {
            let err = finite_diff_check(&g, loss, &bind, 1e-6).unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn detached_teacher_has_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new();
        let t = g.input("t");
        let s = g.input("s");
        let loss = build_ssp_loss(&mut g, t, s, 3, true);
        let bind = Bindings::new()
            .with("t", random(&mut rng, 3, 2))
            .with("s", random(&mut rng, 3, 2));
        let grads = g.backprop(&g.eval(&bind).unwrap(), loss).unwrap();
        assert!(grads["t"].data().iter().all(|&v| v == 0.0));
        assert!(grads["s"].data().iter().any(|&v| v != 0.0));
    }
}
