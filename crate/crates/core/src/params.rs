//! Architecture configuration and the named parameter store.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which posteriors feed the embedding projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingMode {
    PhiTilde,
    PhiTildePlusLin,
}

impl fmt::Display for EmbeddingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingMode::PhiTilde => "phi_tilde",
            EmbeddingMode::PhiTildePlusLin => "phi_tilde_plus_lin",
        })
    }
}

impl FromStr for EmbeddingMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "phi_tilde" => Ok(EmbeddingMode::PhiTilde),
            "phi_tilde_plus_lin" => Ok(EmbeddingMode::PhiTildePlusLin),
            _ => Err(format!("expected phi_tilde|phi_tilde_plus_lin, got `{s}`")),
        }
    }
}

/// Which layer-2 state the third layer subtracts within a frame: the
/// prediction after the frame's transition, or the update before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContentRemoval {
    Predicted,
    Updated,
}

impl fmt::Display for ContentRemoval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContentRemoval::Predicted => "predicted",
            ContentRemoval::Updated => "updated",
        })
    }
}

impl FromStr for ContentRemoval {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "predicted" => Ok(ContentRemoval::Predicted),
            "updated" => Ok(ContentRemoval::Updated),
            _ => Err(format!("expected predicted|updated, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Observed frame dimension.
    pub input_dim: usize,
    /// Latent state dimension shared by all three layers.
    pub state_dim: usize,
    /// Neighbour frames on each side seen by every encoder layer.
    pub context: usize,
    pub encoder_width: usize,
    pub uncertainty_bottleneck: usize,
    /// Width of the hidden layer in the transition-weight generator.
    pub generator_hidden: usize,
    /// Number of transition matrices; 0 selects the identity transition.
    pub n_components: usize,
    pub embed_dim: usize,
    pub n_classes: usize,
    pub mode: EmbeddingMode,
    pub content_removal: ContentRemoval,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 24,
            state_dim: 16,
            context: 2,
            encoder_width: 64,
            uncertainty_bottleneck: 64,
            generator_hidden: 64,
            n_components: 16,
            embed_dim: 32,
            n_classes: 1,
            mode: EmbeddingMode::PhiTilde,
            content_removal: ContentRemoval::Predicted,
        }
    }
}

impl ModelConfig {
    pub fn decoder_input_dim(&self) -> usize {
        match self.mode {
            EmbeddingMode::PhiTilde => self.state_dim,
            EmbeddingMode::PhiTildePlusLin => 2 * self.state_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("state_dim", self.state_dim),
            ("encoder_width", self.encoder_width),
            ("uncertainty_bottleneck", self.uncertainty_bottleneck),
            ("generator_hidden", self.generator_hidden),
            ("embed_dim", self.embed_dim),
            ("n_classes", self.n_classes),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config {
                    key: key.into(),
                    msg: "must be at least 1".into(),
                });
            }
        }
        Ok(())
    }
}

pub mod names {
    pub const CONV: [(&str, &str); 3] = [
        ("enc.conv1.w", "enc.conv1.b"),
        ("enc.conv2.w", "enc.conv2.b"),
        ("enc.conv3.w", "enc.conv3.b"),
    ];
    pub const POINT_W: &str = "enc.point.w";
    pub const POINT_B: &str = "enc.point.b";
    pub const UNC1_W: &str = "enc.unc1.w";
    pub const UNC1_B: &str = "enc.unc1.b";
    pub const UNC2_W: &str = "enc.unc2.w";
    pub const UNC2_B: &str = "enc.unc2.b";
    pub const PRIOR_MEAN: [&str; 3] = ["prior1.mean", "prior2.mean", "prior3.mean"];
    pub const PRIOR_LOG_PREC: [&str; 3] = ["prior1.log_prec", "prior2.log_prec", "prior3.log_prec"];
    pub const BANK: &str = "bank.matrices";
    pub const GEN_W1: &str = "bank.gen_w1";
    pub const GEN_W2: &str = "bank.gen_w2";
    pub const FC1: &str = "dec.fc1";
    pub const CLASSES: &str = "dec.classes";
}

/// Every learnable tensor, keyed by a stable dotted name.
#[derive(Debug, Clone, PartialEq)]
pub struct RecXiParams {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| { let z: f64 = StandardNormal.sample(rng); std * z })
        .collect::<Vec<f64>>();
    Tensor::matrix(rows, cols, data)
}

impl RecXiParams {
    /// Seeded initialization. Transition matrices start at the identity
    /// plus 0.01-scaled noise; priors start at mean 0 and log-precision 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let span = 2 * c.context + 1;
        let mut t = BTreeMap::new();
        let mut fan_in = c.input_dim;
        for (w, b) in names::CONV {
            let k = span * fan_in;
            t.insert(w.to_string(), gaussian(&mut rng, k, c.encoder_width, (2.0 / k as f64).sqrt()));
            t.insert(b.to_string(), Tensor::zeros(&[1, c.encoder_width]));
            fan_in = c.encoder_width;
        }
        let w = c.encoder_width;
        t.insert(names::POINT_W.into(), gaussian(&mut rng, w, c.state_dim, (1.0 / w as f64).sqrt()));
        t.insert(names::POINT_B.into(), Tensor::zeros(&[1, c.state_dim]));
        t.insert(
            names::UNC1_W.into(),
            gaussian(&mut rng, w, c.uncertainty_bottleneck, (2.0 / w as f64).sqrt()),
        );
        t.insert(names::UNC1_B.into(), Tensor::zeros(&[1, c.uncertainty_bottleneck]));
        let ub = c.uncertainty_bottleneck;
        t.insert(names::UNC2_W.into(), gaussian(&mut rng, ub, c.state_dim, 0.1 / (ub as f64).sqrt()));
        t.insert(names::UNC2_B.into(), Tensor::zeros(&[1, c.state_dim]));
        for i in 0..3 {
            t.insert(names::PRIOR_MEAN[i].into(), Tensor::zeros(&[1, c.state_dim]));
            t.insert(names::PRIOR_LOG_PREC[i].into(), Tensor::zeros(&[1, c.state_dim]));
        }
        if c.n_components > 0 {
            let d = c.state_dim;
            let mut bank = gaussian(&mut rng, c.n_components, d * d, 0.01);
            for n in 0..c.n_components {
                for i in 0..d {
                    bank.data_mut()[n * d * d + i * d + i] += 1.0;
                }
            }
            t.insert(names::BANK.into(), bank);
            let h = c.generator_hidden;
            t.insert(names::GEN_W1.into(), gaussian(&mut rng, h, d, (2.0 / d as f64).sqrt()));
            t.insert(names::GEN_W2.into(), gaussian(&mut rng, c.n_components, h, (1.0 / h as f64).sqrt()));
        }
        let din = c.decoder_input_dim();
        t.insert(names::FC1.into(), gaussian(&mut rng, din, c.embed_dim, (1.0 / din as f64).sqrt()));
        t.insert(names::CLASSES.into(), gaussian(&mut rng, c.n_classes, c.embed_dim, 1.0));
        Ok(RecXiParams { config, tensors: t })
    }

    /// Rebuilds a parameter set from stored tensors, checking every
    /// expected name and shape.
    pub fn from_tensors(config: ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let template = RecXiParams::init(config.clone(), 0)?;
        for (name, t) in &template.tensors {
            match tensors.get(name) {
                None => return Err(Error::Invalid(format!("missing parameter `{name}`"))),
                Some(got) if got.shape() != t.shape() => {
                    return Err(Error::Invalid(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        got.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        let tensors = tensors
            .into_iter()
            .filter(|(k, _)| template.tensors.contains_key(k))
            .collect();
        Ok(RecXiParams { config, tensors })
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("no parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter `{name}`"))
    }

    pub fn set(&mut self, name: &str, t: Tensor) {
        let slot = self.get_mut(name);
        assert_eq!(slot.shape(), t.shape(), "shape of `{name}`");
        *slot = t;
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig {
            n_classes: 3,
            ..ModelConfig::default()
        };
        let a = RecXiParams::init(cfg.clone(), 5).unwrap();
        let b = RecXiParams::init(cfg.clone(), 5).unwrap();
        let c = RecXiParams::init(cfg, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn identity_mode_has_no_bank() {
        let cfg = ModelConfig {
            n_components: 0,
            ..ModelConfig::default()
        };
        let p = RecXiParams::init(cfg, 1).unwrap();
        assert!(!p.tensors().contains_key(names::BANK));
    }

    #[test]
    fn bank_starts_near_identity() {
        let p = RecXiParams::init(ModelConfig::default(), 2).unwrap();
        let bank = p.get(names::BANK);
        let d = 16;
        let g0 = &bank.row(0);
        for i in 0..d {
            for j in 0..d {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((g0[i * d + j] - expect).abs() < 0.06);
            }
        }
    }
}
