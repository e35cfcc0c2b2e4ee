//! Toy temporal encoder, the batched three-layer recursion expressed as a
//! differentiable graph, and the embedding decoder.
//!
//! Batches are laid out frame-major: row `t · b + i` holds frame `t` of
//! utterance `i`, so every frame of the recursion is a contiguous slice.

use crate::autodiff::{Bindings, Graph, NodeId};
use crate::error::{Error, Result};
use crate::gauss::{EncodedFrame, RecXiOutput, LOG_PREC_MAX, LOG_PREC_MIN};
use crate::params::{names, ContentRemoval, EmbeddingMode, ModelConfig, RecXiParams};
use crate::tensor::Tensor;

/// Graph input name for the frame-major batch of raw frames.
pub const FRAMES_INPUT: &str = "x";

/// Nodes produced by [`build_forward`]. Each recursion output is `b × d`.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub z: NodeId,
    pub log_l: NodeId,
    pub phi: NodeId,
    pub rho: NodeId,
    pub phi_tilde: NodeId,
    pub phi_lin: NodeId,
    pub embeddings: NodeId,
}

/// Per-utterance outputs of a batch forward pass, one row per utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput {
    pub embeddings: Tensor,
    /// Cosine between each embedding and each class row, before margin
    /// and scale.
    pub logits: Tensor,
    pub phi: Tensor,
    pub rho: Tensor,
    pub phi_tilde: Tensor,
    pub phi_lin: Tensor,
}

/// Binds every parameter tensor under its own name.
pub fn param_bindings(params: &RecXiParams) -> Bindings {
    params
        .tensors()
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

/// Interleaves equal-length utterances (`T × d_x` each) into one
/// frame-major `(T · b) × d_x` matrix.
pub fn interleave(utterances: &[&Tensor]) -> Result<Tensor> {
    let first = utterances
        .first()
        .ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let (t, dx) = first.dims2();
    if t == 0 {
        return Err(Error::EmptySequence);
    }
    for (i, u) in utterances.iter().enumerate() {
        if u.dims2() != (t, dx) {
            return Err(Error::Dim(format!(
                "ragged batch: utterance {i} is {:?}, utterance 0 is {t}×{dx}",
                u.shape()
            )));
        }
    }
    let b = utterances.len();
    let mut data = Vec::with_capacity(t * b * dx);
    for frame in 0..t {
        for u in utterances {
            data.extend_from_slice(u.row(frame));
        }
    }
    Ok(Tensor::matrix(t * b, dx, data))
}

fn linear(g: &mut Graph, x: NodeId, w: &str, b: &str) -> NodeId {
    let w = g.input(w);
    let b = g.input(b);
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

/// Encoder: three context layers with ReLU, then the point head and the
/// clamped log-uncertainty head. Returns `(z, log_l)`, both `(T · b) × d`.
pub fn build_encoder(g: &mut Graph, cfg: &ModelConfig, x: NodeId, frames: usize) -> (NodeId, NodeId) {
    let mut h = x;
    for (w, b) in names::CONV {
        let stacked = g.context_stack(h, cfg.context, frames);
        let pre = linear(g, stacked, w, b);
        h = g.relu(pre);
    }
    let z = linear(g, h, names::POINT_W, names::POINT_B);
    let u = linear(g, h, names::UNC1_W, names::UNC1_B);
    let u = g.relu(u);
    let u = linear(g, u, names::UNC2_W, names::UNC2_B);
    let log_l = g.clamp(u, LOG_PREC_MIN, LOG_PREC_MAX);
    (z, log_l)
}

#[derive(Clone, Copy)]
struct State {
    mean: NodeId,
    log_prec: NodeId,
}

fn update(g: &mut Graph, prev: State, z: NodeId, log_l: NodeId) -> State {
    let gain = g.gate(log_l, prev.log_prec);
    let innovation = g.sub(z, prev.mean);
    let step = g.mul(gain, innovation);
    let mean = g.add(prev.mean, step);
    let lp = g.log_add_exp(log_l, prev.log_prec);
    let log_prec = g.clamp(lp, LOG_PREC_MIN, LOG_PREC_MAX);
    State { mean, log_prec }
}

fn remove(g: &mut Graph, z: NodeId, log_l: NodeId, reference: State) -> (NodeId, NodeId) {
    let diff = g.sub(z, reference.mean);
    let both = g.add(log_l, reference.log_prec);
    let lae = g.log_add_exp(log_l, reference.log_prec);
    (diff, g.sub(both, lae))
}

fn prior(g: &mut Graph, layer: usize, batch: usize) -> State {
    let m = g.input(names::PRIOR_MEAN[layer]);
    let p = g.input(names::PRIOR_LOG_PREC[layer]);
    let p = g.clamp(p, LOG_PREC_MIN, LOG_PREC_MAX);
    State {
        mean: g.repeat_rows(m, batch),
        log_prec: g.repeat_rows(p, batch),
    }
}

struct BankNodes {
    w1_t: NodeId,
    w2_t: NodeId,
    matrices: NodeId,
}

fn predict(g: &mut Graph, bank: &BankNodes, s: State) -> State {
    let pre = g.matmul(s.mean, bank.w1_t);
    let hidden = g.relu(pre);
    let logits = g.matmul(hidden, bank.w2_t);
    let w = g.softmax(logits);
    let trans = g.matmul(w, bank.matrices);
    let mean = g.batch_matvec(trans, s.mean);
    let neg = g.scale(s.log_prec, -1.0);
    let var = g.exp(neg);
    let sq = g.mul(trans, trans);
    let pred_var = g.batch_matvec(sq, var);
    let floored = g.clamp(pred_var, (-LOG_PREC_MAX).exp(), f64::INFINITY);
    let log_var = g.log(floored);
    let lp = g.scale(log_var, -1.0);
    let log_prec = g.clamp(lp, LOG_PREC_MIN, LOG_PREC_MAX);
    State { mean, log_prec }
}

/// The three-layer recursion over `frames` frames of a batch of `batch`
/// sequences. Returns the last-frame `(phi, rho, phi_tilde, phi_lin)`.
pub fn build_recxi(
    g: &mut Graph,
    cfg: &ModelConfig,
    z: NodeId,
    log_l: NodeId,
    frames: usize,
    batch: usize,
) -> (NodeId, NodeId, NodeId, NodeId) {
    let bank = (cfg.n_components > 0).then(|| {
        let w1 = g.input(names::GEN_W1);
        let w2 = g.input(names::GEN_W2);
        BankNodes {
            w1_t: g.transpose(w1),
            w2_t: g.transpose(w2),
            matrices: g.input(names::BANK),
        }
    });
    let mut s1 = prior(g, 0, batch);
    let mut s2_pred = prior(g, 1, batch);
    let mut s3 = prior(g, 2, batch);
    let mut s2 = s2_pred;
    for t in 0..frames {
        let zt = g.slice_rows(z, t * batch, batch);
        let lt = g.slice_rows(log_l, t * batch, batch);
        s1 = update(g, s1, zt, lt);
        let (z2, l2) = remove(g, zt, lt, s1);
        s2 = update(g, s2_pred, z2, l2);
        s2_pred = match &bank {
            Some(b) => predict(g, b, s2),
            None => s2,
        };
        let removal = match cfg.content_removal {
            ContentRemoval::Predicted => s2_pred,
            ContentRemoval::Updated => s2,
        };
        let (z3, l3) = remove(g, zt, lt, removal);
        s3 = update(g, s3, z3, l3);
    }
    let phi_lin = g.sub(s1.mean, s2.mean);
    (s1.mean, s2.mean, s3.mean, phi_lin)
}

/// Embedding projection without bias.
pub fn build_decoder(g: &mut Graph, cfg: &ModelConfig, phi_tilde: NodeId, phi_lin: NodeId) -> NodeId {
    let input = match cfg.mode {
        EmbeddingMode::PhiTilde => phi_tilde,
        EmbeddingMode::PhiTildePlusLin => g.concat(&[phi_tilde, phi_lin]),
    };
    let fc1 = g.input(names::FC1);
    g.matmul(input, fc1)
}

/// Encoder, recursion and decoder for a batch of `batch` equal-length
/// sequences read from the [`FRAMES_INPUT`] input.
pub fn build_forward(g: &mut Graph, cfg: &ModelConfig, frames: usize, batch: usize) -> ForwardNodes {
    let x = g.input(FRAMES_INPUT);
    let (z, log_l) = build_encoder(g, cfg, x, frames);
    let (phi, rho, phi_tilde, phi_lin) = build_recxi(g, cfg, z, log_l, frames, batch);
    let embeddings = build_decoder(g, cfg, phi_tilde, phi_lin);
    ForwardNodes {
        z,
        log_l,
        phi,
        rho,
        phi_tilde,
        phi_lin,
        embeddings,
    }
}

fn check_input(x: &Tensor, cfg: &ModelConfig) -> Result<()> {
    let (t, dx) = x.dims2();
    if t == 0 {
        return Err(Error::EmptySequence);
    }
    if dx != cfg.input_dim {
        return Err(Error::Dim(format!(
            "frames have dimension {dx}, encoder expects {}",
            cfg.input_dim
        )));
    }
    Ok(())
}

/// Runs the encoder on one `T × d_x` utterance.
pub fn encode(x: &Tensor, params: &RecXiParams) -> Result<Vec<EncodedFrame>> {
    let cfg = &params.config;
    check_input(x, cfg)?;
    let t = x.rows();
    let mut g = Graph::new();
    let input = g.input(FRAMES_INPUT);
    let (z, log_l) = build_encoder(&mut g, cfg, input, t);
    let mut bind = param_bindings(params);
    bind.insert(FRAMES_INPUT, x.clone());
    let v = g.eval(&bind)?;
    (0..t)
        .map(|i| EncodedFrame::new(v[z].row(i).to_vec(), v[log_l].row(i).to_vec()))
        .collect()
}

/// Projects recursion outputs to the embedding space.
pub fn embed(out: &RecXiOutput, mode: EmbeddingMode, params: &RecXiParams) -> Result<Vec<f64>> {
    let fc1 = params.get(names::FC1);
    let input: Vec<f64> = match mode {
        EmbeddingMode::PhiTilde => out.phi_tilde.clone(),
        EmbeddingMode::PhiTildePlusLin => {
            out.phi_tilde.iter().chain(&out.phi_lin).copied().collect()
        }
    };
    if fc1.rows() != input.len() {
        return Err(Error::Dim(format!(
            "mode {mode} gives a {}-dim input, projection expects {}",
            input.len(),
            fc1.rows()
        )));
    }
    Ok(project(&input, fc1))
}

/// `vᵀ W` for a `len(v) × k` matrix `W`.
pub(crate) fn project(v: &[f64], w: &Tensor) -> Vec<f64> {
    let k = w.cols();
    let mut out = vec![0.0; k];
    for (i, &vi) in v.iter().enumerate() {
        for (o, wij) in out.iter_mut().zip(w.row(i)) {
            *o += vi * wij;
        }
    }
    out
}

fn rows_of(v: &Tensor) -> Vec<f64> {
    v.data().to_vec()
}

/// Full forward pass over equal-length utterances.
pub fn forward_batch(utterances: &[&Tensor], params: &RecXiParams) -> Result<BatchOutput> {
    let cfg = &params.config;
    let x = interleave(utterances)?;
    check_input(&x, cfg)?;
    let b = utterances.len();
    let t = x.rows() / b;
    let mut g = Graph::new();
    let nodes = build_forward(&mut g, cfg, t, b);
    let emb_n = g.row_l2_normalize(nodes.embeddings);
    let classes = g.input(names::CLASSES);
    let cls_n = g.row_l2_normalize(classes);
    let cls_t = g.transpose(cls_n);
    let cos = g.matmul(emb_n, cls_t);
    let mut bind = param_bindings(params);
    bind.insert(FRAMES_INPUT, x);
    let v = g.eval(&bind)?;
    let d = cfg.state_dim;
    Ok(BatchOutput {
        embeddings: v[nodes.embeddings].clone(),
        logits: v[cos].clone(),
        phi: Tensor::matrix(b, d, rows_of(&v[nodes.phi])),
        rho: Tensor::matrix(b, d, rows_of(&v[nodes.rho])),
        phi_tilde: Tensor::matrix(b, d, rows_of(&v[nodes.phi_tilde])),
        phi_lin: Tensor::matrix(b, d, rows_of(&v[nodes.phi_lin])),
    })
}
