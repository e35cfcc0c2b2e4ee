//! Synthetic speaker corpus: a static per-speaker latent mixed with
//! regime-switching rotating content, written to and read from a plain
//! text directory layout.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

/// Frame values are stored rounded to this many decimals so that the
/// text files reproduce the in-memory corpus exactly.
const DECIMALS: i32 = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    /// Frames per utterance.
    pub frames: usize,
    pub input_dim: usize,
    /// Dimension of both the speaker latent and the content state.
    pub speaker_dim: usize,
    pub n_regimes: usize,
    pub dwell_min: usize,
    pub dwell_max: usize,
    pub noise_sigma: f64,
    /// Amplitude of the content term relative to the speaker term.
    pub content_scale: f64,
    /// Extra speakers held out of training entirely, forming the test split.
    pub eval_speakers: usize,
    /// Fraction of training-speaker utterances reserved for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_speakers: 200,
            utts_per_speaker: 20,
            frames: 100,
            input_dim: 24,
            speaker_dim: 8,
            n_regimes: 8,
            dwell_min: 5,
            dwell_max: 20,
            noise_sigma: 0.3,
            content_scale: 2.0,
            eval_speakers: 50,
            val_fraction: 0.02,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: key.into(),
                msg: msg.into(),
            })
        };
        for (key, v) in [
            ("n_speakers", self.n_speakers),
            ("utts_per_speaker", self.utts_per_speaker),
            ("frames", self.frames),
            ("input_dim", self.input_dim),
            ("speaker_dim", self.speaker_dim),
            ("n_regimes", self.n_regimes),
            ("dwell_min", self.dwell_min),
        ] {
            if v == 0 {
                return bad(key, "must be at least 1");
            }
        }
        if self.dwell_min > self.dwell_max {
            return bad("dwell_max", "must not be below dwell_min");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma", "must be non-negative");
        }
        if !(self.content_scale >= 0.0 && self.content_scale.is_finite()) {
            return bad("content_scale", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction", "must lie in [0, 1)");
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_speakers", self.n_speakers.to_string()),
            ("utts_per_speaker", self.utts_per_speaker.to_string()),
            ("frames", self.frames.to_string()),
            ("input_dim", self.input_dim.to_string()),
            ("speaker_dim", self.speaker_dim.to_string()),
            ("n_regimes", self.n_regimes.to_string()),
            ("dwell_min", self.dwell_min.to_string()),
            ("dwell_max", self.dwell_max.to_string()),
            ("noise_sigma", self.noise_sigma.to_string()),
            ("content_scale", self.content_scale.to_string()),
            ("eval_speakers", self.eval_speakers.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Sets one field from its manifest or command-line key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::Config {
                key: key.into(),
                msg: format!("cannot parse `{value}`"),
            })
        }
        match key {
            "n_speakers" => self.n_speakers = parse(key, value)?,
            "utts_per_speaker" => self.utts_per_speaker = parse(key, value)?,
            "frames" => self.frames = parse(key, value)?,
            "input_dim" => self.input_dim = parse(key, value)?,
            "speaker_dim" => self.speaker_dim = parse(key, value)?,
            "n_regimes" => self.n_regimes = parse(key, value)?,
            "dwell_min" => self.dwell_min = parse(key, value)?,
            "dwell_max" => self.dwell_max = parse(key, value)?,
            "noise_sigma" => self.noise_sigma = parse(key, value)?,
            "content_scale" => self.content_scale = parse(key, value)?,
            "eval_speakers" => self.eval_speakers = parse(key, value)?,
            "val_fraction" => self.val_fraction = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => {
                return Err(Error::Config {
                    key: key.into(),
                    msg: "unknown corpus key".into(),
                })
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    /// Utterances of held-out speakers.
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("expected train|val|test, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    pub split: Split,
    /// `T × d_x`.
    pub frames: Tensor,
    pub regimes: Vec<usize>,
}

/// Corpus-wide mixing matrices and content dynamics.
#[derive(Debug, Clone)]
pub struct Generator {
    /// `d_x × d_h` speaker mixing.
    pub speaker_mix: DMatrix<f64>,
    /// `d_x × d_h` content mixing.
    pub content_mix: DMatrix<f64>,
    /// One orthogonal `d_h × d_h` matrix per regime.
    pub regimes: Vec<DMatrix<f64>>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

fn orthogonal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let qr = gaussian_matrix(rng, d, d, 1.0).qr();
    let mut q = qr.q();
    let r = qr.r();
    // Sign convention that makes the draw Haar-distributed.
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn quantize(v: f64) -> f64 {
    let s = 10f64.powi(DECIMALS);
    let q = (v * s).round() / s;
    if q == 0.0 {
        0.0
    } else {
        q
    }
}

impl Generator {
    pub fn new(cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> Self {
        let dh = cfg.speaker_dim;
        let scale = 1.0 / (dh as f64).sqrt();
        Generator {
            speaker_mix: gaussian_matrix(rng, cfg.input_dim, dh, scale),
            content_mix: gaussian_matrix(rng, cfg.input_dim, dh, scale),
            regimes: (0..cfg.n_regimes).map(|_| orthogonal(rng, dh)).collect(),
        }
    }
}

/// Regime label per frame. Segment lengths are drawn uniformly from
/// `[dwell_min, dwell_max]`; when the final segment would be cut short it
/// is merged with or borrows from its predecessor so that every segment
/// stays in range (only impossible when `T < dwell_min`). Consecutive
/// segments always switch regime when more than one regime exists.
pub fn sample_regimes(cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let t = cfg.frames;
    let (lo, hi) = (cfg.dwell_min, cfg.dwell_max);
    let mut lengths = Vec::new();
    let mut total = 0;
    while total < t {
        let len = rng.random_range(lo..=hi).min(t - total);
        lengths.push(len);
        total += len;
    }
    let n = lengths.len();
    if n >= 2 && lengths[n - 1] < lo {
        let last = lengths.pop().unwrap();
        let prev = lengths.pop().unwrap();
        if prev + last <= hi {
            lengths.push(prev + last);
        } else {
            lengths.push(prev + last - lo);
            lengths.push(lo);
        }
    }
    let k = cfg.n_regimes;
    let mut labels = Vec::with_capacity(t);
    let mut current = rng.random_range(0..k);
    for (i, len) in lengths.into_iter().enumerate() {
        if i > 0 && k > 1 {
            let step = rng.random_range(1..k);
            current = (current + step) % k;
        }
        labels.extend(std::iter::repeat_n(current, len));
    }
    labels
}

/// Draws one utterance: `x_t = A h + content_scale · B c_t + ε_t` with
/// `c_{t+1} = D_{k_{t+1}} c_t` renormalized to unit length.
pub fn sample_utterance(
    speaker_latent: &[f64],
    generator: &Generator,
    cfg: &CorpusConfig,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Vec<usize>) {
    let dh = cfg.speaker_dim;
    let dx = cfg.input_dim;
    let regimes = sample_regimes(cfg, rng);
    let static_part = &generator.speaker_mix * nalgebra::DVector::from_row_slice(speaker_latent);
    let mut c = nalgebra::DVector::from_vec(unit_gaussian(rng, dh));
    let mut data = Vec::with_capacity(cfg.frames * dx);
    for (t, &k) in regimes.iter().enumerate() {
        if t > 0 {
            c = &generator.regimes[k] * c;
            let n = c.norm();
            if n > 0.0 {
                c /= n;
            }
        }
        let content = &generator.content_mix * &c;
        for i in 0..dx {
            let eps: f64 = StandardNormal.sample(rng);
            let v = static_part[i] + cfg.content_scale * content[i] + cfg.noise_sigma * eps;
            data.push(quantize(v));
        }
    }
    (Tensor::matrix(cfg.frames, dx, data), regimes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    /// Training speakers in class-index order.
    pub speakers: Vec<String>,
    pub utterances: Vec<Utterance>,
}

pub fn speaker_id(i: usize) -> String {
    format!("spk{i:04}")
}

impl Corpus {
    /// Generates the whole corpus in memory. A pure function of `cfg`.
    pub fn generate(cfg: &CorpusConfig) -> Result<Self> {
        cfg.validate()?;
        let mut model_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        model_rng.set_stream(1);
        let generator = Generator::new(cfg, &mut model_rng);
        let total_speakers = cfg.n_speakers + cfg.eval_speakers;
        let latents: Vec<Vec<f64>> = (0..total_speakers)
            .map(|_| (0..cfg.speaker_dim).map(|_| StandardNormal.sample(&mut model_rng)).collect())
            .collect();
        let n_utts = total_speakers * cfg.utts_per_speaker;
        let mut utterances: Vec<Utterance> = (0..n_utts)
            .into_par_iter()
            .map(|u| {
                let spk = u / cfg.utts_per_speaker;
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ u as u64);
                let (frames, regimes) = sample_utterance(&latents[spk], &generator, cfg, &mut rng);
                Utterance {
                    id: format!("{}-u{:03}", speaker_id(spk), u % cfg.utts_per_speaker),
                    speaker: speaker_id(spk),
                    split: if spk < cfg.n_speakers {
                        Split::Train
                    } else {
                        Split::Test
                    },
                    frames,
                    regimes,
                }
            })
            .collect();
        assign_validation(&mut utterances, cfg, &mut model_rng);
        Ok(Corpus {
            config: cfg.clone(),
            speakers: (0..cfg.n_speakers).map(speaker_id).collect(),
            utterances,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.speakers.len()
    }

    /// Class index of every training speaker.
    pub fn class_map(&self) -> HashMap<&str, usize> {
        self.speakers
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    /// Writes `manifest.txt`, `speakers.txt` and `utts/<id>.csv|.labels`.
    /// A non-empty target directory is rejected unless `force` is set.
    pub fn write(&self, dir: &Path, force: bool) -> Result<()> {
        prepare_dir(dir, force)?;
        let utt_dir = dir.join("utts");
        fs::create_dir_all(&utt_dir).map_err(|e| Error::io(&utt_dir, e))?;
        let mut manifest = format!("version={MANIFEST_VERSION}\n");
        for (k, v) in self.config.entries() {
            manifest.push_str(&format!("{k}={v}\n"));
        }
        for u in &self.utterances {
            manifest.push_str(&format!("{} {} {} utts/{}.csv\n", u.id, u.speaker, u.split, u.id));
        }
        write_file(&dir.join("manifest.txt"), manifest.as_bytes())?;
        let speakers: String = self
            .speakers
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{s} {i}\n"))
            .collect();
        write_file(&dir.join("speakers.txt"), speakers.as_bytes())?;
        self.utterances.par_iter().try_for_each(|u| {
            let path = utt_dir.join(format!("{}.csv", u.id));
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            for r in 0..u.frames.rows() {
                let line: Vec<String> = u.frames.row(r).iter().map(|v| v.to_string()).collect();
                writeln!(w, "{}", line.join(",")).map_err(|e| Error::io(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            let labels: String = u.regimes.iter().map(|k| format!("{k}\n")).collect();
            write_file(&utt_dir.join(format!("{}.labels", u.id)), labels.as_bytes())
        })
    }

    /// Reads a corpus directory written by [`Corpus::write`].
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.txt");
        let file = fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let mut config = CorpusConfig::default();
        let mut rows = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&manifest_path, e))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some((k, v)) = line.split_once('=') {
                if k == "version" {
                    if v != MANIFEST_VERSION.to_string() {
                        return Err(Error::format(&manifest_path, format!("unsupported version {v}")));
                    }
                } else {
                    config
                        .set(k, v)
                        .map_err(|e| Error::format(&manifest_path, format!("line {}: {e}", n + 1)))?;
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(Error::format(
                    &manifest_path,
                    format!("line {}: expected `utt speaker split path`", n + 1),
                ));
            }
            let split: Split = fields[2]
                .parse()
                .map_err(|e: String| Error::format(&manifest_path, format!("line {}: {e}", n + 1)))?;
            rows.push((fields[0].to_string(), fields[1].to_string(), split, fields[3].to_string()));
        }
        let speakers_path = dir.join("speakers.txt");
        let text = fs::read_to_string(&speakers_path).map_err(|e| Error::io(&speakers_path, e))?;
        let mut by_class = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (s, i) = line
                .split_once(' ')
                .and_then(|(s, i)| Some((s, i.trim().parse::<usize>().ok()?)))
                .ok_or_else(|| Error::format(&speakers_path, format!("bad line `{line}`")))?;
            by_class.insert(i, s.to_string());
        }
        if by_class.keys().copied().ne(0..by_class.len()) {
            return Err(Error::format(&speakers_path, "class indices are not 0..C"));
        }
        let utterances = rows
            .into_par_iter()
            .map(|(id, speaker, split, rel)| {
                let path = dir.join(&rel);
                let frames = read_frames(&path)?;
                let labels_path = path.with_extension("labels");
                let text = fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
                let regimes = text
                    .lines()
                    .map(|l| l.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::format(&labels_path, e.to_string()))?;
                if regimes.len() != frames.rows() {
                    return Err(Error::format(&labels_path, "label count differs from frame count"));
                }
                Ok(Utterance {
                    id,
                    speaker,
                    split,
                    frames,
                    regimes,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus {
            config,
            speakers: by_class.into_values().collect(),
            utterances,
        })
    }
}

/// Moves `val_fraction` of training-speaker utterances to the validation
/// split while keeping at least one training utterance per speaker.
fn assign_validation(utts: &mut [Utterance], cfg: &CorpusConfig, rng: &mut ChaCha8Rng) {
    let mut candidates: Vec<usize> = (0..utts.len()).filter(|&i| utts[i].split == Split::Train).collect();
    let target = (cfg.val_fraction * candidates.len() as f64).round() as usize;
    candidates.shuffle(rng);
    let mut remaining: HashMap<String, usize> = HashMap::new();
    for &i in &candidates {
        *remaining.entry(utts[i].speaker.clone()).or_default() += 1;
    }
    let mut moved = 0;
    for i in candidates {
        if moved == target {
            break;
        }
        let left = remaining.get_mut(&utts[i].speaker).expect("counted");
        if *left > 1 {
            *left -= 1;
            utts[i].split = Split::Val;
            moved += 1;
        }
    }
}

/// Creates `dir`, refusing to touch a non-empty directory unless `force`
/// is set, in which case its contents are removed first.
pub fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty {
            if !force {
                return Err(Error::Invalid(format!(
                    "{} exists and is not empty; pass --force to overwrite",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a CSV matrix, one frame per line.
pub fn read_frames(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: bad number `{field}`", n + 1)))?;
            if !v.is_finite() {
                return Err(Error::format(path, format!("line {}: non-finite value", n + 1)));
            }
            data.push(v);
        }
        let width = data.len() - before;
        if *cols.get_or_insert(width) != width {
            return Err(Error::format(path, format!("line {}: ragged row", n + 1)));
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::format(path, "no frames"))?;
    Ok(Tensor::matrix(rows, cols, data))
}

/// One verification trial.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

/// Samples distinct unordered utterance pairs from one split: `n_target`
/// same-speaker pairs and `n_nontarget` different-speaker pairs.
pub fn make_trials(
    corpus: &Corpus,
    split: Split,
    n_target: usize,
    n_nontarget: usize,
    seed: u64,
) -> Result<Vec<Trial>> {
    let utts: Vec<&Utterance> = corpus.split(split).collect();
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for i in 0..utts.len() {
        for j in i + 1..utts.len() {
            if utts[i].speaker == utts[j].speaker {
                targets.push((i, j));
            } else {
                nontargets.push((i, j));
            }
        }
    }
    if targets.len() < n_target || nontargets.len() < n_nontarget {
        return Err(Error::Invalid(format!(
            "split {split} offers {} target and {} nontarget pairs; {n_target} and {n_nontarget} requested",
            targets.len(),
            nontargets.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(n_target + n_nontarget);
    for (pool, n, label) in [(&targets, n_target, true), (&nontargets, n_nontarget, false)] {
        let mut picked = sample(&mut rng, pool.len(), n).into_vec();
        picked.sort_unstable();
        for k in picked {
            let (i, j) = pool[k];
            trials.push(Trial {
                enroll: utts[i].id.clone(),
                test: utts[j].id.clone(),
                target: label,
            });
        }
    }
    trials.shuffle(&mut rng);
    Ok(trials)
}

pub fn write_trials(path: &Path, trials: &[Trial]) -> Result<()> {
    let text: String = trials
        .iter()
        .map(|t| format!("{} {} {}\n", t.enroll, t.test, u8::from(t.target)))
        .collect();
    write_file(path, text.as_bytes())
}

pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let f: Vec<&str> = line.split_whitespace().collect();
            let target = match f.as_slice() {
                [_, _, "1"] => true,
                [_, _, "0"] => false,
                _ => {
                    return Err(Error::format(
                        path,
                        format!("line {}: expected `enroll test 0|1`", n + 1),
                    ))
                }
            };
            Ok(Trial {
                enroll: f[0].to_string(),
                test: f[1].to_string(),
                target,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CorpusConfig {
        CorpusConfig {
            n_speakers: 6,
            utts_per_speaker: 5,
            frames: 40,
            input_dim: 6,
            speaker_dim: 3,
            n_regimes: 3,
            eval_speakers: 2,
            val_fraction: 0.2,
            seed: 11,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn static_signal_without_noise_or_content() {
        let cfg = CorpusConfig {
            noise_sigma: 0.0,
            content_scale: 0.0,
            ..tiny()
        };
        let c = Corpus::generate(&cfg).unwrap();
        for u in &c.utterances {
            for r in 1..u.frames.rows() {
                assert_eq!(u.frames.row(r), u.frames.row(0));
            }
        }
        let first = |s: &str| c.utterances.iter().find(|u| u.speaker == s).unwrap().frames.row(0).to_vec();
        assert_ne!(first("spk0000"), first("spk0001"));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = Corpus::generate(&tiny()).unwrap();
        let b = Corpus::generate(&tiny()).unwrap();
        assert_eq!(a, b);
        let c = Corpus::generate(&CorpusConfig { seed: 12, ..tiny() }).unwrap();
        assert_ne!(a.utterances[0].frames, c.utterances[0].frames);
    }

    fn segments(labels: &[usize]) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for &k in labels {
            match out.last_mut() {
                Some((label, n)) if *label == k => *n += 1,
                _ => out.push((k, 1)),
            }
        }
        out
    }

    #[test]
    fn dwell_times_stay_in_range() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for frames in [5, 17, 40, 100, 333] {
            let cfg = CorpusConfig { frames, ..cfg.clone() };
            for _ in 0..200 {
                let labels = sample_regimes(&cfg, &mut rng);
                assert_eq!(labels.len(), frames);
                for (_, n) in segments(&labels) {
                    assert!((cfg.dwell_min..=cfg.dwell_max).contains(&n), "{n}");
                }
            }
        }
    }

    #[test]
    fn split_keeps_a_training_utterance_per_speaker() {
        let c = Corpus::generate(&tiny()).unwrap();
        let val = c.split(Split::Val).count();
        assert_eq!(val, 6);
        for s in &c.speakers {
            assert!(c.split(Split::Train).any(|u| &u.speaker == s));
        }
        assert_eq!(c.split(Split::Test).count(), 10);
        let big = Corpus::generate(&CorpusConfig {
            n_speakers: 200,
            utts_per_speaker: 20,
            frames: 8,
            val_fraction: 0.02,
            eval_speakers: 0,
            ..tiny()
        })
        .unwrap();
        assert_eq!(big.utterances.len(), 4000);
        assert_eq!(big.split(Split::Val).count(), 80);
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus");
        let c = Corpus::generate(&tiny()).unwrap();
        c.write(&path, false).unwrap();
        assert!(c.write(&path, false).is_err());
        c.write(&path, true).unwrap();
        let back = Corpus::load(&path).unwrap();
        assert_eq!(back, c);
        let manifest = fs::read_to_string(path.join("manifest.txt")).unwrap();
        assert_eq!(manifest.lines().filter(|l| !l.contains('=')).count(), 40);
    }

    #[test]
    fn trials_are_consistent() {
        let c = Corpus::generate(&tiny()).unwrap();
        let trials = make_trials(&c, Split::Train, 10, 30, 4).unwrap();
        assert_eq!(trials.len(), 40);
        let speaker = |id: &str| c.get(id).unwrap().speaker.clone();
        for t in &trials {
            assert_ne!(t.enroll, t.test);
            assert_eq!(t.target, speaker(&t.enroll) == speaker(&t.test));
        }
        assert_eq!(trials, make_trials(&c, Split::Train, 10, 30, 4).unwrap());
        let none = make_trials(&c, Split::Test, 0, 5, 1).unwrap();
        assert!(none.iter().all(|t| !t.target));
        assert!(make_trials(&c, Split::Test, 1000, 0, 1).is_err());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trials.txt");
        write_trials(&p, &trials).unwrap();
        assert_eq!(read_trials(&p).unwrap(), trials);
    }
}
