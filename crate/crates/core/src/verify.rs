//! Self-checks behind `recxi verify`: the fast recursion against a dense
//! reference, finite-difference gradient checks through every loss and the
//! full network, and the detection metrics against brute-force sweeps.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_detail, Bindings, GradCheck, Graph, NodeId, Op, Values};
use crate::error::Result;
use crate::gauss::{
    gain_pair, prior, recxi_forward, step_layer1, step_layer2, step_layer3, xi_pool, EncodedFrame, GaussState,
    RecXiOutput,
};
use crate::metrics::{det_sweep, s_norm, DetCosts, DetResult};
use crate::net::{build_forward, interleave, param_bindings, FRAMES_INPUT};
use crate::objectives::{
    aam_softmax_loss, build_aam_loss, build_ssp_loss, build_total_loss, one_hot, ssp_loss, LossConfig,
};
use crate::params::{names, ContentRemoval, EmbeddingMode, ModelConfig, RecXiParams};
use crate::reference::{recxi_reference, DenseRecXiParams, PrecisionRule};
use crate::tensor::Tensor;
use crate::transition::{propagate_precision_diag, softmax, TransitionBank};

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn new(suite: &'static str, name: &'static str, max_error: f64, tolerance: f64) -> Self {
        Check {
            suite,
            name,
            max_error,
            tolerance,
            passed: max_error <= tolerance,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}/{} max_error={:.3e} tolerance={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.max_error,
            self.tolerance
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyConfig {
    /// Random recursion instances compared against the dense reference.
    pub instances: usize,
    /// Random score sets compared against the brute-force sweep.
    pub score_sets: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            instances: 100,
            score_sets: 1000,
            seed: 0,
        }
    }
}

pub fn run_all(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let mut checks = recursion_suite(cfg)?;
    checks.extend(transition_suite(cfg)?);
    checks.extend(loss_suite(cfg)?);
    checks.extend(gradient_suite(cfg)?);
    checks.extend(metric_suite(cfg)?);
    Ok(checks)
}

fn random_frames(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Vec<EncodedFrame> {
    (0..t)
        .map(|_| {
            EncodedFrame::new(
                (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
                (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
            )
            .expect("finite frame")
        })
        .collect()
}

/// Random model whose bank matrices are diagonal, so the exact dense
/// precision prediction stays diagonal too.
fn diagonal_model(rng: &mut ChaCha8Rng, d: usize, n_components: usize) -> Result<RecXiParams> {
    let removal = if rng.random_bool(0.5) {
        ContentRemoval::Predicted
    } else {
        ContentRemoval::Updated
    };
    let cfg = ModelConfig {
        state_dim: d,
        n_components,
        generator_hidden: rng.random_range(1..=8),
        content_removal: removal,
        ..ModelConfig::default()
    };
    let mut params = RecXiParams::init(cfg, rng.random())?;
    for layer in 0..3 {
        for v in params.get_mut(names::PRIOR_MEAN[layer]).data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        for v in params.get_mut(names::PRIOR_LOG_PREC[layer]).data_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
    }
    if n_components > 0 {
        let bank = params.get_mut(names::BANK);
        for n in 0..n_components {
            for i in 0..d {
                for j in 0..d {
                    bank.data_mut()[n * d * d + i * d + j] = if i == j { rng.random_range(0.9..1.1) } else { 0.0 };
                }
            }
        }
    }
    Ok(params)
}

fn output_diff(a: &RecXiOutput, b: &RecXiOutput) -> f64 {
    [(&a.phi, &b.phi), (&a.rho, &b.rho), (&a.phi_tilde, &b.phi_tilde), (&a.phi_lin, &b.phi_lin)]
        .iter()
        .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

/// Per-frame states of all three layers, rebuilt from the step functions.
fn layer_traces(frames: &[EncodedFrame], params: &RecXiParams) -> Result<(Vec<GaussState>, Vec<GaussState>)> {
    let bank = TransitionBank::from_params(params);
    let (mut s1, mut s2_pred, mut s3) = (prior(params, 0), prior(params, 1), prior(params, 2));
    let (mut l1, mut l3) = (vec![s1.clone()], vec![s3.clone()]);
    for f in frames {
        s1 = step_layer1(&s1, f)?;
        let s2 = step_layer2(&s2_pred, f, &s1)?;
        s2_pred = match &bank {
            Some(b) => b.predict(&s2)?.0,
            None => s2.clone(),
        };
        let removal = match params.config.content_removal {
            ContentRemoval::Predicted => &s2_pred,
            ContentRemoval::Updated => &s2,
        };
        s3 = step_layer3(&s3, f, removal)?;
        l1.push(s1.clone());
        l3.push(s3.clone());
    }
    Ok((l1, l3))
}

/// Dense-reference equivalence and the structural invariants of the three
/// inference layers.
pub fn recursion_suite(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    const SUITE: &str = "recursion";
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut oracle, mut identity, mut pool, mut lin, mut convex, mut monotone) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut dense_rule = 0.0f64;
    for _ in 0..cfg.instances {
        let d = rng.random_range(1..=16);
        let t = rng.random_range(1..=32);
        let frames = random_frames(&mut rng, t, d);

        let n_components = rng.random_range(1..=4);
        let params = diagonal_model(&mut rng, d, n_components)?;
        let fast = recxi_forward(&frames, &params)?;
        let dense = recxi_reference(&frames, &DenseRecXiParams::from_params(&params, PrecisionRule::Exact))?;
        oracle = oracle.max(output_diff(&fast, &dense));

        let pooled = xi_pool(&frames, &prior(&params, 0))?;
        pool = pool.max(fast.phi.iter().zip(&pooled.mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        lin = lin.max(
            (0..d)
                .map(|i| (fast.phi_lin[i] - (fast.phi[i] - fast.rho[i])).abs())
                .fold(0.0, f64::max),
        );

        let (l1, l3) = layer_traces(&frames, &params)?;
        for trace in [&l1, &l3] {
            for w in trace.windows(2) {
                for (a, b) in w[0].log_prec.iter().zip(&w[1].log_prec) {
                    monotone = monotone.max(a - b);
                }
            }
        }
        // Layer-1 inputs and prior are bounded by c, so its means must be.
        let c = frames
            .iter()
            .flat_map(|f| f.z.iter())
            .chain(&l1[0].mean)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        for s in &l1 {
            for v in &s.mean {
                convex = convex.max(v.abs() - c);
            }
        }

        let id_params = diagonal_model(&mut rng, d, 0)?;
        let fast = recxi_forward(&frames, &id_params)?;
        let dense = recxi_reference(&frames, &DenseRecXiParams::from_params(&id_params, PrecisionRule::Exact))?;
        identity = identity.max(output_diff(&fast, &dense));
    }
    for _ in 0..cfg.instances.min(20) {
        let d = rng.random_range(1..=6);
        let cfg = ModelConfig {
            state_dim: d,
            n_components: rng.random_range(1..=4),
            generator_hidden: 4,
            ..ModelConfig::default()
        };
        let params = RecXiParams::init(cfg, rng.random())?;
        let t = rng.random_range(1..=16);
        let frames = random_frames(&mut rng, t, d);
        let fast = recxi_forward(&frames, &params)?;
        let dense = recxi_reference(
            &frames,
            &DenseRecXiParams::from_params(&params, PrecisionRule::DiagonalOfCovariance),
        )?;
        dense_rule = dense_rule.max(output_diff(&fast, &dense));
    }

    let mut gains = 0.0f64;
    for _ in 0..10_000 {
        let a: Vec<f64> = (0..4).map(|_| rng.random_range(-14.0..14.0)).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.random_range(-14.0..14.0)).collect();
        let (x, y) = gain_pair(&a, &b);
        for (p, q) in x.iter().zip(&y) {
            gains = gains.max((p + q - 1.0).abs());
        }
    }

    Ok(vec![
        Check::new(SUITE, "diagonal_bank_matches_dense_reference", oracle, 1e-10),
        Check::new(SUITE, "identity_transition_matches_dense_reference", identity, 1e-10),
        Check::new(SUITE, "dense_bank_matches_reference_under_diagonal_rule", dense_rule, 1e-10),
        Check::new(SUITE, "layer1_equals_batch_pooling", pool, 1e-10),
        Check::new(SUITE, "gains_sum_to_one", gains, 1e-15),
        Check::new(SUITE, "phi_lin_is_exact_difference", lin, 0.0),
        Check::new(SUITE, "static_layer_precision_nondecreasing", monotone, 0.0),
        Check::new(SUITE, "layer1_means_stay_in_input_range", convex, 1e-12),
    ])
}

/// Transition-bank prediction against dense linear algebra.
pub fn transition_suite(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    const SUITE: &str = "transition";
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let (mut linear, mut diag, mut shift) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cfg.instances {
        let d = rng.random_range(1..=8);
        let model = ModelConfig {
            state_dim: d,
            n_components: rng.random_range(1..=5),
            generator_hidden: rng.random_range(1..=6),
            ..ModelConfig::default()
        };
        let params = RecXiParams::init(model, rng.random())?;
        let bank = TransitionBank::from_params(&params).expect("non-identity bank");
        let state = GaussState::new(
            (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
            (0..d).map(|_| rng.random_range(-3.0..3.0)).collect(),
        )?;
        let (pred, g) = bank.predict(&state)?;
        let gm = DMatrix::from_row_slice(d, d, g.data());
        let expect = &gm * DVector::from_column_slice(&state.mean);
        linear = linear.max((0..d).map(|i| (pred.mean[i] - expect[i]).abs()).fold(0.0, f64::max));

        let diag_g = Tensor::matrix(
            d,
            d,
            (0..d * d)
                .map(|k| if k / d == k % d { rng.random_range(0.3..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 } } else { 0.0 })
                .collect(),
        );
        let got = propagate_precision_diag(&state.log_prec, &diag_g)?;
        let gm = DMatrix::from_row_slice(d, d, diag_g.data());
        let cov = DMatrix::from_diagonal(&DVector::from_iterator(d, state.log_prec.iter().map(|l| (-l).exp())));
        let exact = (&gm * cov * gm.transpose()).try_inverse().expect("invertible");
        diag = diag.max((0..d).map(|i| (got.log_prec[i] - exact[(i, i)].ln()).abs()).fold(0.0, f64::max));

        let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-5.0..5.0)).collect();
        let c = rng.random_range(-10.0..10.0);
        let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
        shift = shift.max(
            softmax(&logits)
                .iter()
                .zip(softmax(&shifted))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
    }
    Ok(vec![
        Check::new(SUITE, "predicted_mean_is_linear", linear, 1e-12),
        Check::new(SUITE, "diagonal_precision_matches_exact", diag, 1e-12),
        Check::new(SUITE, "mixture_weights_shift_invariant", shift, 1e-14),
    ])
}

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Softmax cross-entropy over plain cosine logits.
fn cosine_cross_entropy(emb: &Tensor, classes: &Tensor, labels: &[usize]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let e = emb.row(i);
            let cos: Vec<f64> = (0..classes.rows())
                .map(|j| {
                    let w = classes.row(j);
                    e.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / (norm(e) * norm(w))
                })
                .collect();
            cos.iter().map(|c| c.exp()).sum::<f64>().ln() - cos[y]
        })
        .sum();
    total / labels.len() as f64
}

/// Closed-form properties of the losses.
pub fn loss_suite(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    const SUITE: &str = "losses";
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let plain = LossConfig {
        margin: 0.0,
        scale: 1.0,
        ..LossConfig::default()
    };
    let (mut ce, mut self_ssp, mut scaled_ssp, mut negative, mut row_scale) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cfg.instances {
        let (b, k, c) = (rng.random_range(2..=8), rng.random_range(1..=6), rng.random_range(2..=5));
        let emb = random_tensor(&mut rng, b, k);
        let classes = random_tensor(&mut rng, c, k);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        ce = ce.max((aam_softmax_loss(&emb, &classes, &labels, &plain)? - cosine_cross_entropy(&emb, &classes, &labels)).abs());

        let mut scaled = emb.clone();
        let r = rng.random_range(0..b);
        let factor = rng.random_range(0.1..10.0);
        scaled.data_mut()[r * k..(r + 1) * k].iter_mut().for_each(|v| *v *= factor);
        let full = LossConfig::default();
        row_scale = row_scale.max(
            (aam_softmax_loss(&emb, &classes, &labels, &full)? - aam_softmax_loss(&scaled, &classes, &labels, &full)?).abs(),
        );

        let x = random_tensor(&mut rng, b, k);
        let y = random_tensor(&mut rng, b, k);
        self_ssp = self_ssp.max(ssp_loss(&x, &x)?.abs());
        let s = rng.random_range(0.1..10.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        scaled_ssp = scaled_ssp.max(ssp_loss(&x, &x.map(|v| s * v))?);
        negative = negative.max(-ssp_loss(&x, &y)?);
    }
    let example = ssp_loss(&Tensor::identity(2), &Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 0.0]))?;
    Ok(vec![
        Check::new(SUITE, "margin_free_aam_equals_cross_entropy", ce, 1e-12),
        Check::new(SUITE, "aam_invariant_to_row_scaling", row_scale, 1e-12),
        Check::new(SUITE, "ssp_of_identical_inputs_is_zero", self_ssp, 0.0),
        Check::new(SUITE, "ssp_of_scaled_student_is_zero", scaled_ssp, 1e-12),
        Check::new(SUITE, "ssp_is_nonnegative", negative, 0.0),
        Check::new(SUITE, "ssp_worked_example", (example - 0.29289).abs(), 1e-4),
    ])
}

const FD_STEP: f64 = 3e-5;
const FD_TOLERANCE: f64 = 1e-4;

/// Finite-difference checks through each loss on its own and through the
/// whole network for several model variants.
pub fn gradient_suite(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    const SUITE: &str = "gradients";
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let batch = 4;
    let loss_cfg = LossConfig {
        scale: 4.0,
        beta: 3.0,
        ..LossConfig::default()
    };

    let mut g = Graph::new();
    let (e, w, y, t, s) = (g.input("e"), g.input("w"), g.input("y"), g.input("t"), g.input("s"));
    let cls = build_aam_loss(&mut g, e, w, y, batch, &loss_cfg);
    let ssp = build_ssp_loss(&mut g, t, s, batch, false);
    let total = build_total_loss(&mut g, cls, Some(ssp), &loss_cfg);
    let bind = Bindings::new()
        .with("e", random_tensor(&mut rng, batch, 3))
        .with("w", random_tensor(&mut rng, 3, 3))
        .with("y", one_hot(&[0, 2, 1, 2], 3)?)
        .with("t", random_tensor(&mut rng, batch, 3))
        .with("s", random_tensor(&mut rng, batch, 3));
    let all: Vec<String> = ["e", "w", "t", "s"].iter().map(|s| s.to_string()).collect();
    let mut checks = Vec::new();
    for (name, node) in [("aam_loss", cls), ("ssp_loss", ssp), ("total_loss", total)] {
        let err = finite_diff_detail(&g, node, &bind, FD_STEP, &all)?.max_rel_error;
        checks.push(Check::new(SUITE, name, err, FD_TOLERANCE));
    }

    let variants = [
        (4, ContentRemoval::Predicted, EmbeddingMode::PhiTilde, "network_bank4_predicted"),
        (1, ContentRemoval::Updated, EmbeddingMode::PhiTildePlusLin, "network_bank1_updated_plus_lin"),
        (0, ContentRemoval::Predicted, EmbeddingMode::PhiTilde, "network_identity_transition"),
    ];
    for (n_components, removal, mode, name) in variants {
        let err = network_gradient_error(&mut rng, n_components, removal, mode, &loss_cfg)?.max_rel_error;
        checks.push(Check::new(SUITE, name, err, FD_TOLERANCE));
    }
    Ok(checks)
}

/// Distance of the evaluation point from the nearest non-differentiable
/// point of any ReLU, clamp or margin fallback in the graph.
fn kink_distance(g: &Graph, values: &Values) -> f64 {
    let mut nearest = f64::INFINITY;
    for i in 0..g.len() {
        let node = g.node(NodeId(i));
        let Some(&parent) = node.parents.first() else { continue };
        let x = values.get(parent).data();
        let d = match node.op {
            Op::Relu => x.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min),
            Op::Clamp { lo, hi } => x
                .iter()
                .map(|v| (v - lo).abs().min((v - hi).abs()))
                .fold(f64::INFINITY, f64::min),
            Op::AngularMargin(m) => x
                .iter()
                .map(|v| (v + m.cos()).abs().min(1.0 - v.abs()))
                .fold(f64::INFINITY, f64::min),
            _ => continue,
        };
        nearest = nearest.min(d);
    }
    nearest
}

/// Keeps every ReLU, clamp and margin input this far from its breakpoint so
/// that no central difference straddles one.
const MIN_KINK_DISTANCE: f64 = 2e-3;

fn network_gradient_error(
    rng: &mut ChaCha8Rng,
    n_components: usize,
    removal: ContentRemoval,
    mode: EmbeddingMode,
    loss_cfg: &LossConfig,
) -> Result<GradCheck> {
    let (frames, batch, n_classes) = (rng.random_range(2..=8), 4, 3);
    let model = ModelConfig {
        input_dim: 3,
        state_dim: rng.random_range(2..=4),
        context: 1,
        encoder_width: 4,
        uncertainty_bottleneck: 3,
        generator_hidden: 3,
        n_components,
        embed_dim: 3,
        n_classes,
        mode,
        content_removal: removal,
    };
    let mut g = Graph::new();
    let nodes = build_forward(&mut g, &model, frames, batch);
    let classes = g.input(names::CLASSES);
    let labels = g.input("labels");
    let cls = build_aam_loss(&mut g, nodes.embeddings, classes, labels, batch, loss_cfg);
    let ssp = build_ssp_loss(&mut g, nodes.phi_tilde, nodes.phi_lin, batch, false);
    let total = build_total_loss(&mut g, cls, Some(ssp), loss_cfg);

    for _ in 0..1000 {
        let mut params = RecXiParams::init(model.clone(), 0)?;
        // The initializer's zero biases, near-identical bank matrices and
        // small weights leave many inputs on a kink and many gradients
        // below what central differences resolve, so draw everything.
        for (_, t) in params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        let utts: Vec<Tensor> = (0..batch).map(|_| random_tensor(rng, frames, model.input_dim)).collect();
        let refs: Vec<&Tensor> = utts.iter().collect();
        let mut bind = param_bindings(&params);
        bind.insert(FRAMES_INPUT, interleave(&refs)?);
        bind.insert("labels", one_hot(&[0, 1, 2, 1], n_classes)?);
        let Ok(values) = g.eval(&bind) else { continue };
        if kink_distance(&g, &values) < MIN_KINK_DISTANCE {
            continue;
        }
        let mut inputs: Vec<String> = params.names().map(str::to_string).collect();
        inputs.push(FRAMES_INPUT.to_string());
        return finite_diff_detail(&g, total, &bind, FD_STEP, &inputs);
    }
    Err(crate::Error::Invalid("no evaluation point away from every kink".into()))
}

/// Exhaustive operating-point sweep: for every candidate threshold, count
/// misses and false alarms directly.
pub fn brute_force_det(scores: &[(f64, bool)], costs: DetCosts) -> (f64, f64) {
    let n_t = scores.iter().filter(|s| s.1).count() as f64;
    let n_n = scores.len() as f64 - n_t;
    let mut thresholds: Vec<f64> = scores.iter().map(|s| s.0).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let curve: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&th| {
            let miss = scores.iter().filter(|s| s.1 && s.0 < th).count() as f64;
            let fa = scores.iter().filter(|s| !s.1 && s.0 >= th).count() as f64;
            (miss / n_t, fa / n_n)
        })
        .collect();
    let mut eer = f64::NAN;
    for (i, &(pm, pfa)) in curve.iter().enumerate() {
        if pm >= pfa {
            eer = if i == 0 {
                pm
            } else {
                let (pm0, pfa0) = curve[i - 1];
                let alpha = (pfa0 - pm0) / ((pfa0 - pm0) + (pm - pfa));
                pm0 + alpha * (pm - pm0)
            };
            break;
        }
    }
    let norm = (costs.c_miss * costs.p_target).min(costs.c_fa * (1.0 - costs.p_target));
    let dcf = curve
        .iter()
        .map(|&(pm, pfa)| costs.c_miss * costs.p_target * pm + costs.c_fa * (1.0 - costs.p_target) * pfa)
        .fold(f64::INFINITY, f64::min);
    (eer, dcf / norm)
}

fn random_score_set(rng: &mut ChaCha8Rng) -> Vec<(f64, bool)> {
    let n = rng.random_range(2..=100);
    // Coarse grids make ties common; fine ones make them rare.
    let levels = if rng.random_bool(0.5) { 10 } else { 1_000_000 };
    let mut set: Vec<(f64, bool)> = (0..n)
        .map(|_| {
            let target = rng.random_bool(0.5);
            let raw: f64 = rng.random_range(-1.0..1.0) + if target { 0.4 } else { 0.0 };
            ((raw * levels as f64).round() / levels as f64, target)
        })
        .collect();
    set[0].1 = true;
    set[1].1 = false;
    set
}

pub fn metric_suite(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    const SUITE: &str = "metrics";
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(4));
    let (mut brute, mut warp, mut range) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cfg.score_sets {
        let set = random_score_set(&mut rng);
        let costs = DetCosts {
            p_target: rng.random_range(0.001..0.5),
            c_fa: rng.random_range(0.5..10.0),
            c_miss: rng.random_range(0.5..10.0),
        };
        let fast = det_sweep(&set, costs)?;
        let (eer, dcf) = brute_force_det(&set, costs);
        brute = brute.max((fast.eer - eer).abs()).max((fast.min_dcf - dcf).abs());
        let warped: Vec<(f64, bool)> = set.iter().map(|&(s, t)| ((2.0 * s).exp() - 3.0, t)).collect();
        let w = det_sweep(&warped, costs)?;
        warp = warp.max((w.eer - fast.eer).abs()).max((w.min_dcf - fast.min_dcf).abs());
        // EER only stays below one half when targets outscore nontargets;
        // small random sets can invert, so the hard bound is one.
        range = range
            .max(-fast.eer)
            .max(fast.eer - 1.0)
            .max(-fast.min_dcf)
            .max(fast.min_dcf - 1.0);
    }
    let costs = DetCosts::default();
    let set = |t: &[f64], n: &[f64]| -> Vec<(f64, bool)> {
        t.iter().map(|&s| (s, true)).chain(n.iter().map(|&s| (s, false))).collect()
    };
    let third = det_sweep(&set(&[0.9, 0.5, 0.4], &[0.6, 0.2, 0.1]), costs)?;
    let DetResult { eer, min_dcf, .. } = det_sweep(&set(&[0.9, 0.8], &[0.1, 0.2]), costs)?;
    let same = det_sweep(&set(&[0.3, 0.5, 0.7], &[0.5, 0.7, 0.3]), costs)?;

    let mut order = 0.0f64;
    for _ in 0..cfg.instances {
        let cohort_e: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cohort_t: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a: f64 = rng.random_range(-1.0..1.0);
        let b: f64 = rng.random_range(-1.0..1.0);
        let (lo, hi) = (a.min(b), a.max(b));
        let gap = s_norm(lo, &cohort_e, &cohort_t)? - s_norm(hi, &cohort_e, &cohort_t)?;
        order = order.max(gap);
    }
    Ok(vec![
        Check::new(SUITE, "det_sweep_matches_brute_force", brute, 0.0),
        Check::new(SUITE, "invariant_to_monotone_transform", warp, 0.0),
        Check::new(SUITE, "eer_and_min_dcf_in_range", range, 0.0),
        Check::new(SUITE, "eer_one_third_example", (third.eer - 1.0 / 3.0).abs(), 1e-15),
        Check::new(SUITE, "perfect_separation_is_zero", eer.abs().max(min_dcf.abs()), 0.0),
        Check::new(SUITE, "identical_distributions_give_half", (same.eer - 0.5).abs(), 0.0),
        Check::new(SUITE, "s_norm_preserves_order", order, 0.0),
    ])
}
