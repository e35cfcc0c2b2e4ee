//! Versioned binary checkpoint: magic `RECXI1`, a little-endian `u64`
//! header length, a text index, then raw little-endian `f64` payloads.
//!
//! Index lines:
//!
//! ```text
//! meta <key> <value>
//! config <key> <value>
//! log <metrics csv row>
//! tensor <name> f64 <dim>x<dim> <byte offset into payload>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::RecXiParams;
use crate::tensor::Tensor;
use crate::trainer::{AdamState, EpochRecord};

pub const MAGIC: &[u8; 6] = b"RECXI1";
const FORMAT_VERSION: u32 = 1;

const PARAM_PREFIX: &str = "param/";
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: RecXiParams,
    pub adam: AdamState,
    pub epochs_done: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub best_eer: Option<f64>,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn fresh(config: RunConfig, params: RecXiParams) -> Self {
        let adam = AdamState::new(&params);
        Checkpoint {
            config,
            params,
            adam,
            epochs_done: 0,
            step: 0,
            best_eer: None,
            best_epoch: 0,
            log: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut index = String::new();
        let meta = [
            ("format_version", FORMAT_VERSION.to_string()),
            ("epochs_done", self.epochs_done.to_string()),
            ("step", self.step.to_string()),
            ("adam_step", self.adam.step.to_string()),
            ("best_eer", self.best_eer.map_or("none".into(), |v| v.to_string())),
            ("best_epoch", self.best_epoch.to_string()),
            ("n_classes", self.params.config.n_classes.to_string()),
        ];
        for (k, v) in meta {
            index.push_str(&format!("meta {k} {v}\n"));
        }
        for (k, v) in self.config.entries() {
            index.push_str(&format!("config {k} {v}\n"));
        }
        for r in &self.log {
            index.push_str(&format!("log {}\n", r.to_csv()));
        }
        let mut payload: Vec<u8> = Vec::new();
        let groups = [
            (PARAM_PREFIX, self.params.tensors()),
            (M_PREFIX, &self.adam.m),
            (V_PREFIX, &self.adam.v),
        ];
        for (prefix, tensors) in groups {
            for (name, t) in tensors {
                let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
                index.push_str(&format!("tensor {prefix}{name} f64 {} {}\n", shape.join("x"), payload.len()));
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + index.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(index.len() as u64).to_le_bytes());
        out.extend_from_slice(index.as_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("missing RECXI1 magic".into()));
        }
        let mut len_bytes = [0u8; 8];
        len_bytes.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let start = MAGIC.len() + 8;
        let header = bytes
            .get(start..start + header_len)
            .ok_or_else(|| bad("truncated header".into()))?;
        let header = std::str::from_utf8(header).map_err(|_| bad("header is not UTF-8".into()))?;
        let payload = &bytes[start + header_len..];

        let mut meta = BTreeMap::new();
        let mut config = RunConfig::default();
        let mut log = Vec::new();
        let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
        for line in header.lines() {
            let (kind, rest) = line.split_once(' ').ok_or_else(|| bad(format!("bad index line `{line}`")))?;
            match kind {
                "meta" => {
                    let (k, v) = rest.split_once(' ').ok_or_else(|| bad(format!("bad meta `{rest}`")))?;
                    meta.insert(k.to_string(), v.to_string());
                }
                "config" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    config.set(k, v).map_err(|e| bad(e.to_string()))?;
                }
                "log" => log.push(EpochRecord::from_csv(rest).ok_or_else(|| bad(format!("bad log row `{rest}`")))?),
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 4 || f[1] != "f64" {
                        return Err(bad(format!("bad tensor entry `{rest}`")));
                    }
                    let shape = f[2]
                        .split('x')
                        .map(str::parse::<usize>)
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad(format!("bad shape `{}`", f[2])))?;
                    let offset: usize = f[3].parse().map_err(|_| bad(format!("bad offset `{}`", f[3])))?;
                    let n: usize = shape.iter().product();
                    let raw = payload
                        .get(offset..offset + 8 * n)
                        .ok_or_else(|| bad(format!("payload of `{}` out of range", f[0])))?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect();
                    let t = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
                    tensors.insert(f[0].to_string(), t);
                }
                other => return Err(bad(format!("unknown index entry `{other}`"))),
            }
        }
        let get = |k: &str| -> Result<&String> { meta.get(k).ok_or_else(|| bad(format!("missing meta `{k}`"))) };
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(format!("bad meta `{k}`"))) };
        if get("format_version")? != &FORMAT_VERSION.to_string() {
            return Err(bad(format!("unsupported format version {}", get("format_version")?)));
        }
        let mut take = |prefix: &str| -> BTreeMap<String, Tensor> {
            let keys: Vec<String> = tensors.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
            keys.into_iter()
                .map(|k| {
                    let t = tensors.remove(&k).expect("listed");
                    (k[prefix.len()..].to_string(), t)
                })
                .collect()
        };
        config.model.n_classes = num("n_classes")?;
        let params = RecXiParams::from_tensors(config.model.clone(), take(PARAM_PREFIX)).map_err(|e| bad(e.to_string()))?;
        let adam = AdamState {
            step: get("adam_step")?.parse().map_err(|_| bad("bad adam_step".into()))?,
            m: take(M_PREFIX),
            v: take(V_PREFIX),
        };
        let best_eer = match get("best_eer")?.as_str() {
            "none" => None,
            v => Some(v.parse().map_err(|_| bad("bad best_eer".into()))?),
        };
        Ok(Checkpoint {
            config,
            params,
            adam,
            epochs_done: num("epochs_done")?,
            step: num("step")?,
            best_eer,
            best_epoch: num("best_epoch")?,
            log,
        })
    }

    /// Writes atomically: a temporary sibling is renamed over `path`, so an
    /// interrupted save leaves the previous checkpoint intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut cfg = RunConfig::default();
        cfg.model.n_components = 2;
        cfg.model.n_classes = 3;
        cfg.trials = Some("trials.txt".into());
        let params = RecXiParams::init(cfg.model.clone(), 4).unwrap();
        let mut c = Checkpoint::fresh(cfg, params);
        c.epochs_done = 2;
        c.step = 17;
        c.best_eer = Some(0.25);
        c.best_epoch = 1;
        c.adam.step = 17;
        c.adam.m.values_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 0.1));
        c.log.push(EpochRecord {
            epoch: 1,
            step: 8,
            lr: 0.01,
            loss_cls: 3.0,
            loss_ssp: 0.001,
            loss_total: 6.0,
            val_eer: Some(0.25),
        });
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..6], b"RECXI1");
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        let c = sample();
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
    }

    #[test]
    fn corruption_is_reported() {
        let p = Path::new("mem");
        assert!(Checkpoint::from_bytes(b"NOTACKPT", p).is_err());
        let mut bytes = sample().to_bytes();
        bytes.truncate(bytes.len() - 8);
        assert!(Checkpoint::from_bytes(&bytes, p).is_err());
    }
}
