//! Flat `key=value` run configuration shared by every subcommand.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::corpus::{CorpusConfig, Split};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, Representation};
use crate::objectives::LossConfig;
use crate::params::{ContentRemoval, EmbeddingMode, ModelConfig};
use crate::trainer::TrainConfig;

/// Every key with a one-line description, in echo order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "single source of randomness; subsystems derive fixed offsets"),
    ("n_speakers", "training speakers in the synthetic corpus"),
    ("utts_per_speaker", "utterances per speaker"),
    ("frames", "frames per utterance"),
    ("input_dim", "observed frame dimension"),
    ("speaker_dim", "dimension of the speaker latent and content state"),
    ("n_regimes", "number of content regimes"),
    ("dwell_min", "shortest regime segment in frames"),
    ("dwell_max", "longest regime segment in frames"),
    ("noise_sigma", "observation noise standard deviation"),
    ("content_scale", "amplitude of the content term"),
    ("eval_speakers", "held-out speakers forming the test split"),
    ("val_fraction", "fraction of training utterances kept for validation"),
    ("state_dim", "latent state dimension of the recursion"),
    ("context", "neighbour frames on each side per encoder layer"),
    ("encoder_width", "channels of the encoder context layers"),
    ("uncertainty_bottleneck", "hidden width of the uncertainty head"),
    ("generator_hidden", "hidden width of the transition-weight generator"),
    ("n_components", "transition matrices in the bank; 0 = identity transition"),
    ("embed_dim", "embedding dimension"),
    ("mode", "embedding input: phi_tilde | phi_tilde_plus_lin"),
    ("content_removal", "content state removed by layer 3: predicted | updated"),
    ("margin", "AAM-softmax angular margin, in [0, 0.5]"),
    ("scale", "AAM-softmax logit scale"),
    ("alpha", "weight of the classification loss"),
    ("beta", "weight of the speaker-preserving loss"),
    ("ssp_detach_teacher", "stop gradients through the teacher branch"),
    ("epochs", "training epochs"),
    ("batch_size", "utterances per training batch (at least 2)"),
    ("lr_min", "learning rate at the cycle ends"),
    ("lr_max", "learning rate at the cycle peak"),
    ("cycle_steps", "steps from cycle start to peak; 0 = one epoch"),
    ("adam_beta1", "first-moment decay"),
    ("adam_beta2", "second-moment decay"),
    ("adam_eps", "denominator offset"),
    ("weight_decay", "decoupled weight decay"),
    ("ssp_enabled", "add the speaker-preserving loss"),
    ("representation", "scored posterior: phi_tilde | phi_lin | rho | phi"),
    ("snorm", "apply symmetric score normalization"),
    ("cohort_size", "training utterances in the S-norm cohort"),
    ("trials", "trial list file; empty = sample from eval_split"),
    ("eval_split", "split sampled for trials: train | val | test"),
    ("n_target_trials", "sampled target trials"),
    ("n_nontarget_trials", "sampled nontarget trials"),
    ("eval_batch_size", "utterances per evaluation forward batch"),
    ("p_target", "target prior of the detection cost"),
    ("c_fa", "false-alarm cost"),
    ("c_miss", "miss cost"),
];

/// Keys that do not affect training and may change between a checkpoint
/// and a resumed run.
const NON_TRAINING_KEYS: &[&str] = &[
    "epochs",
    "representation",
    "snorm",
    "cohort_size",
    "trials",
    "eval_split",
    "n_target_trials",
    "n_nontarget_trials",
    "eval_batch_size",
    "p_target",
    "c_fa",
    "c_miss",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Trial list path; `None` samples trials from the corpus.
    pub trials: Option<String>,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        key: key.into(),
        msg: format!("cannot parse `{value}`"),
    })
}

fn parse_enum<T: FromStr<Err = String>>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|msg| Error::Config { key: key.into(), msg })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config {
            key: key.into(),
            msg: format!("expected true|false, got `{value}`"),
        }),
    }
}

impl RunConfig {
    /// Sets one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "seed" => {
                let s: u64 = parse(key, value)?;
                self.corpus.seed = s;
                self.train.seed = s;
            }
            "input_dim" => {
                let d: usize = parse(key, value)?;
                self.corpus.input_dim = d;
                self.model.input_dim = d;
            }
            "n_speakers" | "utts_per_speaker" | "frames" | "speaker_dim" | "n_regimes" | "dwell_min"
            | "dwell_max" | "noise_sigma" | "content_scale" | "eval_speakers" | "val_fraction" => {
                self.corpus.set(key, value)?
            }
            "state_dim" => self.model.state_dim = parse(key, value)?,
            "context" => self.model.context = parse(key, value)?,
            "encoder_width" => self.model.encoder_width = parse(key, value)?,
            "uncertainty_bottleneck" => self.model.uncertainty_bottleneck = parse(key, value)?,
            "generator_hidden" => self.model.generator_hidden = parse(key, value)?,
            "n_components" => self.model.n_components = parse(key, value)?,
            "embed_dim" => self.model.embed_dim = parse(key, value)?,
            "mode" => self.model.mode = parse_enum::<EmbeddingMode>(key, value)?,
            "content_removal" => self.model.content_removal = parse_enum::<ContentRemoval>(key, value)?,
            "margin" => self.loss.margin = parse(key, value)?,
            "scale" => self.loss.scale = parse(key, value)?,
            "alpha" => self.loss.alpha = parse(key, value)?,
            "beta" => self.loss.beta = parse(key, value)?,
            "ssp_detach_teacher" => self.loss.detach_teacher = parse_bool(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "lr_min" => self.train.lr_min = parse(key, value)?,
            "lr_max" => self.train.lr_max = parse(key, value)?,
            "cycle_steps" => self.train.cycle_steps = parse(key, value)?,
            "adam_beta1" => self.train.beta1 = parse(key, value)?,
            "adam_beta2" => self.train.beta2 = parse(key, value)?,
            "adam_eps" => self.train.eps = parse(key, value)?,
            "weight_decay" => self.train.weight_decay = parse(key, value)?,
            "ssp_enabled" => self.train.ssp_enabled = parse_bool(key, value)?,
            "representation" => self.eval.representation = parse_enum::<Representation>(key, value)?,
            "snorm" => self.eval.snorm = parse_bool(key, value)?,
            "cohort_size" => self.eval.cohort_size = parse(key, value)?,
            "trials" => self.trials = (!value.is_empty()).then(|| value.to_string()),
            "eval_split" => self.eval.split = parse_enum::<Split>(key, value)?,
            "n_target_trials" => self.eval.n_target_trials = parse(key, value)?,
            "n_nontarget_trials" => self.eval.n_nontarget_trials = parse(key, value)?,
            "eval_batch_size" => self.eval.batch_size = parse(key, value)?,
            "p_target" => self.eval.costs.p_target = parse(key, value)?,
            "c_fa" => self.eval.costs.c_fa = parse(key, value)?,
            "c_miss" => self.eval.costs.c_miss = parse(key, value)?,
            _ => {
                return Err(Error::Config {
                    key: key.into(),
                    msg: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let c = &self.corpus;
        let m = &self.model;
        let l = &self.loss;
        let t = &self.train;
        let e = &self.eval;
        Some(match key {
            "seed" => c.seed.to_string(),
            "n_speakers" => c.n_speakers.to_string(),
            "utts_per_speaker" => c.utts_per_speaker.to_string(),
            "frames" => c.frames.to_string(),
            "input_dim" => c.input_dim.to_string(),
            "speaker_dim" => c.speaker_dim.to_string(),
            "n_regimes" => c.n_regimes.to_string(),
            "dwell_min" => c.dwell_min.to_string(),
            "dwell_max" => c.dwell_max.to_string(),
            "noise_sigma" => c.noise_sigma.to_string(),
            "content_scale" => c.content_scale.to_string(),
            "eval_speakers" => c.eval_speakers.to_string(),
            "val_fraction" => c.val_fraction.to_string(),
            "state_dim" => m.state_dim.to_string(),
            "context" => m.context.to_string(),
            "encoder_width" => m.encoder_width.to_string(),
            "uncertainty_bottleneck" => m.uncertainty_bottleneck.to_string(),
            "generator_hidden" => m.generator_hidden.to_string(),
            "n_components" => m.n_components.to_string(),
            "embed_dim" => m.embed_dim.to_string(),
            "mode" => m.mode.to_string(),
            "content_removal" => m.content_removal.to_string(),
            "margin" => l.margin.to_string(),
            "scale" => l.scale.to_string(),
            "alpha" => l.alpha.to_string(),
            "beta" => l.beta.to_string(),
            "ssp_detach_teacher" => l.detach_teacher.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr_min" => t.lr_min.to_string(),
            "lr_max" => t.lr_max.to_string(),
            "cycle_steps" => t.cycle_steps.to_string(),
            "adam_beta1" => t.beta1.to_string(),
            "adam_beta2" => t.beta2.to_string(),
            "adam_eps" => t.eps.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "ssp_enabled" => t.ssp_enabled.to_string(),
            "representation" => e.representation.to_string(),
            "snorm" => e.snorm.to_string(),
            "cohort_size" => e.cohort_size.to_string(),
            "trials" => self.trials.clone().unwrap_or_default(),
            "eval_split" => e.split.to_string(),
            "n_target_trials" => e.n_target_trials.to_string(),
            "n_nontarget_trials" => e.n_nontarget_trials.to_string(),
            "eval_batch_size" => e.batch_size.to_string(),
            "p_target" => e.costs.p_target.to_string(),
            "c_fa" => e.costs.c_fa.to_string(),
            "c_miss" => e.costs.c_miss.to_string(),
            _ => return None,
        })
    }

    /// All keys with their current values, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(String, String)> {
        KEYS.iter()
            .map(|(k, _)| (k.to_string(), self.get(k).expect("every listed key is readable")))
            .collect()
    }

    /// True when both configurations train identically for the epochs
    /// they share.
    pub fn same_training_setup(&self, other: &RunConfig) -> bool {
        let keep = |e: Vec<(String, String)>| -> Vec<(String, String)> {
            e.into_iter()
                .filter(|(k, _)| !NON_TRAINING_KEYS.contains(&k.as_str()))
                .collect()
        };
        keep(self.entries()) == keep(other.entries())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.to_string(),
                msg: "expected key=value".into(),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        let e = &self.eval;
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: key.into(),
                msg: msg.into(),
            })
        };
        if e.snorm && e.cohort_size < 2 {
            return bad("cohort_size", "must be at least 2 with snorm");
        }
        if e.batch_size == 0 {
            return bad("eval_batch_size", "must be at least 1");
        }
        if !(e.costs.p_target > 0.0 && e.costs.p_target < 1.0) {
            return bad("p_target", "must lie in (0, 1)");
        }
        if !(e.costs.c_fa > 0.0) {
            return bad("c_fa", "must be positive");
        }
        if !(e.costs.c_miss > 0.0) {
            return bad("c_miss", "must be positive");
        }
        Ok(())
    }

    /// `key=value` lines for provenance.
    pub fn echo(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Help text listing every key with its default.
    pub fn help() -> String {
        let d = RunConfig::default();
        KEYS.iter()
            .map(|(k, doc)| format!("  {k:<24} {doc} [default: {}]\n", d.get(k).unwrap()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let c = RunConfig::from_text("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert!(c.validate().is_ok());
    }

    #[test]
    fn identity_mode_accepted() {
        let c = RunConfig::from_text("n_components=0\n").unwrap();
        assert_eq!(c.model.n_components, 0);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn bad_values_name_the_key() {
        let c = RunConfig::from_text("margin=0.9").unwrap();
        match c.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "margin"),
            other => panic!("{other:?}"),
        }
        match RunConfig::from_text("bogus=1") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "bogus"),
            other => panic!("{other:?}"),
        }
        match RunConfig::from_text("epochs=many") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "epochs"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::from_text("# comment\nseed=9\nmode=phi_tilde_plus_lin\nsnorm=on\ntrials=/tmp/t.txt\nlr_max=0.05\n")
            .unwrap();
        assert_eq!(c.corpus.seed, 9);
        assert_eq!(c.train.seed, 9);
        let back = RunConfig::from_text(&c.echo()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.entries().len(), KEYS.len());
    }

    #[test]
    fn help_lists_every_key() {
        let h = RunConfig::help();
        for (k, _) in KEYS {
            assert!(h.contains(k));
        }
    }
}
