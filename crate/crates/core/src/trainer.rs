//! Optimization loop: AdamW-style updates, a triangular cyclical learning
//! rate, fixed-length batches and per-epoch validation.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::{Corpus, Split, Utterance};
use crate::error::{Error, Result};
use crate::eval::validation_eer;
use crate::net::{build_forward, interleave, param_bindings, FRAMES_INPUT};
use crate::objectives::{build_aam_loss, build_ssp_loss, build_total_loss, one_hot};
use crate::params::{names, RecXiParams};
use crate::tensor::Tensor;

/// Graph input holding the one-hot labels of a training batch.
pub const LABELS_INPUT: &str = "labels";

/// Seed offsets from the run's single `seed`.
pub const INIT_SEED_OFFSET: u64 = 1;
pub const SHUFFLE_SEED_OFFSET: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    /// Half-period of the learning-rate triangle in steps; 0 means one
    /// epoch's worth of steps.
    pub cycle_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub ssp_enabled: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 16,
            batch_size: 64,
            lr_min: 3e-4,
            lr_max: 3e-2,
            cycle_steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 2e-5,
            ssp_enabled: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: key.into(),
                msg: msg.into(),
            })
        };
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size", "must be at least 2");
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return bad("lr_max", "need 0 <= lr_min <= lr_max");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("adam_beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("adam_beta2", "must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("adam_eps", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        Ok(())
    }
}

/// Triangular schedule with period `2 · cycle_steps`: `lr_min` at the
/// start of each cycle, `lr_max` halfway through.
pub fn cyclical_lr(step: usize, cycle_steps: usize, lr_min: f64, lr_max: f64) -> f64 {
    let s = cycle_steps.max(1);
    let pos = step % (2 * s);
    let frac = if pos <= s { pos as f64 / s as f64 } else { (2 * s - pos) as f64 / s as f64 };
    lr_min + (lr_max - lr_min) * frac
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &RecXiParams) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .tensors()
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam update with decoupled weight decay applied first:
/// `p ← p · (1 − lr · wd)`, then the bias-corrected Adam step.
pub fn adam_step(
    params: &mut RecXiParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, p) in params.tensors() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("no gradient for `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::Dim(format!("gradient of `{name}` has shape {:?}", g.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi = *pi * decay - lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Global step count at the end of the epoch.
    pub step: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub loss_cls: f64,
    pub loss_ssp: f64,
    pub loss_total: f64,
    /// `None` when the corpus has no validation utterances.
    pub val_eer: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,step,lr,loss_cls,loss_ssp,loss_total,val_eer";

impl EpochRecord {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.lr,
            self.loss_cls,
            self.loss_ssp,
            self.loss_total,
            self.val_eer.map_or("nan".to_string(), |v| v.to_string())
        )
    }

    pub fn from_csv(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return None;
        }
        Some(EpochRecord {
            epoch: f[0].parse().ok()?,
            step: f[1].parse().ok()?,
            lr: f[2].parse().ok()?,
            loss_cls: f[3].parse().ok()?,
            loss_ssp: f[4].parse().ok()?,
            loss_total: f[5].parse().ok()?,
            val_eer: match f[6] {
                "nan" => None,
                v => Some(v.parse().ok()?),
            },
        })
    }
}

pub fn metrics_csv(log: &[EpochRecord]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in log {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Where a run keeps its checkpoints and log.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        RunDir { path: path.into() }
    }
    pub fn last(&self) -> PathBuf {
        self.path.join("last.ckpt")
    }
    pub fn best(&self) -> PathBuf {
        self.path.join("best.ckpt")
    }
    pub fn metrics(&self) -> PathBuf {
        self.path.join("metrics.csv")
    }
    pub fn config(&self) -> PathBuf {
        self.path.join("config.txt")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation EER, or of the
    /// last epoch when there is no validation split.
    pub best: RecXiParams,
    pub last: RecXiParams,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

struct StepGraph {
    graph: Graph,
    cls: NodeId,
    ssp: Option<NodeId>,
    total: NodeId,
}

fn step_graph(cfg: &RunConfig, frames: usize, batch: usize) -> StepGraph {
    let mut g = Graph::new();
    let nodes = build_forward(&mut g, &cfg.model, frames, batch);
    let classes = g.input(names::CLASSES);
    let labels = g.input(LABELS_INPUT);
    let cls = build_aam_loss(&mut g, nodes.embeddings, classes, labels, batch, &cfg.loss);
    let ssp = (cfg.train.ssp_enabled && cfg.loss.beta != 0.0).then(|| {
        build_ssp_loss(&mut g, nodes.phi_tilde, nodes.phi_lin, batch, cfg.loss.detach_teacher)
    });
    let total = build_total_loss(&mut g, cls, ssp, &cfg.loss);
    StepGraph {
        graph: g,
        cls,
        ssp,
        total,
    }
}

fn diverged(epoch: usize, step: usize, err: Error) -> Error {
    match err {
        Error::NonFinite { .. } | Error::NonFiniteGradient(_) => Error::Diverged {
            epoch,
            step,
            reason: err.to_string(),
        },
        other => other,
    }
}

/// Shuffled batches of training-utterance indices for one epoch. A final
/// batch smaller than two utterances is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(SHUFFLE_SEED_OFFSET));
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Model configuration with the class count taken from the corpus.
pub fn resolve_config(cfg: &RunConfig, corpus: &Corpus) -> RunConfig {
    let mut cfg = cfg.clone();
    cfg.model.n_classes = corpus.n_classes();
    cfg.model.input_dim = corpus.config.input_dim;
    cfg
}

/// Trains on the corpus's training split. With a run directory, writes
/// `last.ckpt`, `best.ckpt`, `metrics.csv` and `config.txt` after every
/// epoch; with `resume`, continues from an existing `last.ckpt`.
pub fn train_run(corpus: &Corpus, cfg: &RunConfig, run_dir: Option<&RunDir>, resume: bool) -> Result<TrainOutcome> {
    let cfg = resolve_config(cfg, corpus);
    cfg.validate()?;
    let train: Vec<&Utterance> = corpus.split(Split::Train).collect();
    if train.len() < 2 {
        return Err(Error::Invalid("need at least two training utterances".into()));
    }
    let frames = train[0].frames.rows();
    if let Some(u) = train.iter().find(|u| u.frames.rows() != frames) {
        return Err(Error::Dim(format!(
            "training utterances must share a length: `{}` has {} frames, expected {frames}",
            u.id,
            u.frames.rows()
        )));
    }
    let class_of = corpus.class_map();
    let labels: Vec<usize> = train
        .iter()
        .map(|u| {
            class_of
                .get(u.speaker.as_str())
                .copied()
                .ok_or_else(|| Error::Invalid(format!("speaker `{}` has no class index", u.speaker)))
        })
        .collect::<Result<_>>()?;

    let mut ckpt = match run_dir {
        Some(dir) if resume && dir.last().exists() => {
            let c = Checkpoint::load(&dir.last())?;
            if !c.config.same_training_setup(&cfg) {
                return Err(Error::Invalid(format!(
                    "{} was written with a different configuration",
                    dir.last().display()
                )));
            }
            log::info!("resuming after epoch {}", c.epochs_done);
            Checkpoint { config: cfg.clone(), ..c }
        }
        _ => {
            let params = RecXiParams::init(cfg.model.clone(), cfg.train.seed.wrapping_add(INIT_SEED_OFFSET))?;
            Checkpoint::fresh(cfg.clone(), params)
        }
    };
    let mut best_params = match run_dir {
        Some(dir) if ckpt.epochs_done > 0 && dir.best().exists() => Checkpoint::load(&dir.best())?.params,
        _ => ckpt.params.clone(),
    };
    if let Some(dir) = run_dir {
        fs::create_dir_all(&dir.path).map_err(|e| Error::io(&dir.path, e))?;
        let text: String = cfg.entries().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        fs::write(dir.config(), text).map_err(|e| Error::io(dir.config(), e))?;
    }

    let steps_per_epoch = epoch_batches(train.len(), cfg.train.batch_size, 0, 0).len();
    let cycle = if cfg.train.cycle_steps == 0 {
        steps_per_epoch
    } else {
        cfg.train.cycle_steps
    };
    let mut graphs: HashMap<usize, StepGraph> = HashMap::new();

    for epoch in ckpt.epochs_done + 1..=cfg.train.epochs {
        let batches = epoch_batches(train.len(), cfg.train.batch_size, cfg.train.seed, epoch);
        let (mut sum_cls, mut sum_ssp, mut sum_total) = (0.0, 0.0, 0.0);
        let mut lr = cfg.train.lr_min;
        for batch in &batches {
            let sg = graphs
                .entry(batch.len())
                .or_insert_with(|| step_graph(&cfg, frames, batch.len()));
            let utts: Vec<&Tensor> = batch.iter().map(|&i| &train[i].frames).collect();
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut bind = param_bindings(&ckpt.params);
            bind.insert(FRAMES_INPUT, interleave(&utts)?);
            bind.insert(LABELS_INPUT, one_hot(&batch_labels, cfg.model.n_classes)?);
            let step = ckpt.step;
            let values = sg.graph.eval(&bind).map_err(|e| diverged(epoch, step, e))?;
            let grads = sg.graph.backprop(&values, sg.total)?;
            lr = cyclical_lr(step, cycle, cfg.train.lr_min, cfg.train.lr_max);
            adam_step(&mut ckpt.params, &grads, &mut ckpt.adam, lr, &cfg.train)
                .map_err(|e| diverged(epoch, step, e))?;
            ckpt.step += 1;
            sum_cls += values[sg.cls].item();
            sum_ssp += sg.ssp.map_or(0.0, |s| values[s].item());
            sum_total += values[sg.total].item();
        }
        let n = batches.len().max(1) as f64;
        let val_eer = validation_eer(&ckpt.params, corpus, cfg.eval.batch_size)?;
        let record = EpochRecord {
            epoch,
            step: ckpt.step,
            lr,
            loss_cls: sum_cls / n,
            loss_ssp: sum_ssp / n,
            loss_total: sum_total / n,
            val_eer,
        };
        if !record.loss_total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step: ckpt.step,
                reason: "epoch loss is not finite".into(),
            });
        }
        log::info!("{}", record.to_csv());
        let improved = match (val_eer, ckpt.best_eer) {
            (None, _) => true,
            (Some(v), Some(b)) => v < b,
            (Some(_), None) => true,
        };
        ckpt.epochs_done = epoch;
        ckpt.log.push(record);
        if improved {
            ckpt.best_eer = val_eer;
            ckpt.best_epoch = epoch;
            best_params = ckpt.params.clone();
        }
        if let Some(dir) = run_dir {
            ckpt.save(&dir.last())?;
            if improved {
                ckpt.save(&dir.best())?;
            }
            fs::write(dir.metrics(), metrics_csv(&ckpt.log)).map_err(|e| Error::io(dir.metrics(), e))?;
        }
    }
    Ok(TrainOutcome {
        best: best_params,
        last: ckpt.params,
        best_epoch: ckpt.best_epoch,
        log: ckpt.log,
    })
}

/// Loads the parameters stored in a checkpoint file.
pub fn load_params(path: &Path) -> Result<RecXiParams> {
    Ok(Checkpoint::load(path)?.params)
}
