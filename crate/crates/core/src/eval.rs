//! Embedding extraction, representation probes and trial scoring.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{Corpus, Split, Trial, Utterance};
use crate::error::{Error, Result};
use crate::metrics::{cosine_score, det_sweep, s_norm_stats, CohortStats, DetCosts, DetResult, ScoredTrial};
use crate::net::{forward_batch, project};
use crate::params::{names, EmbeddingMode, RecXiParams};
use crate::tensor::Tensor;

/// Which posterior a probe scores.
/// Offset from the run seed for sampling trial lists.
pub const TRIAL_SEED_OFFSET: u64 = 3;
/// Offset from the run seed for drawing the S-norm cohort.
pub const COHORT_SEED_OFFSET: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Representation {
    /// The trained embedding.
    PhiTilde,
    /// `φ − ρ`.
    PhiLin,
    /// Content posterior.
    Rho,
    /// Layer-1 speaker posterior.
    Phi,
}

impl Representation {
    pub const ALL: [Representation; 4] = [
        Representation::PhiTilde,
        Representation::PhiLin,
        Representation::Rho,
        Representation::Phi,
    ];
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Representation::PhiTilde => "phi_tilde",
            Representation::PhiLin => "phi_lin",
            Representation::Rho => "rho",
            Representation::Phi => "phi",
        })
    }
}

impl FromStr for Representation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "phi_tilde" => Ok(Representation::PhiTilde),
            "phi_lin" => Ok(Representation::PhiLin),
            "rho" => Ok(Representation::Rho),
            "phi" => Ok(Representation::Phi),
            _ => Err(format!("expected phi_tilde|phi_lin|rho|phi, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub representation: Representation,
    pub snorm: bool,
    pub cohort_size: usize,
    /// Split the trials are drawn from when no trial file is given.
    pub split: Split,
    pub n_target_trials: usize,
    pub n_nontarget_trials: usize,
    /// Utterances per forward batch.
    pub batch_size: usize,
    pub costs: DetCosts,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            representation: Representation::PhiTilde,
            snorm: false,
            cohort_size: 200,
            split: Split::Test,
            n_target_trials: 1000,
            n_nontarget_trials: 1000,
            batch_size: 64,
            costs: DetCosts::default(),
        }
    }
}

/// Per-utterance recursion outputs and embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct UttOutputs {
    pub embedding: Vec<f64>,
    pub phi: Vec<f64>,
    pub rho: Vec<f64>,
    pub phi_tilde: Vec<f64>,
    pub phi_lin: Vec<f64>,
}

/// Runs the model over utterances, batching those of equal length.
/// Results are returned in input order.
pub fn extract(params: &RecXiParams, utts: &[&Utterance], batch_size: usize) -> Result<Vec<UttOutputs>> {
    let batch_size = batch_size.max(1);
    let mut by_len: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, u) in utts.iter().enumerate() {
        by_len.entry(u.frames.rows()).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut lens: Vec<_> = by_len.into_iter().collect();
    lens.sort_by_key(|(t, _)| *t);
    for (_, idx) in lens {
        groups.extend(idx.chunks(batch_size).map(<[usize]>::to_vec));
    }
    let results: Vec<Vec<(usize, UttOutputs)>> = groups
        .par_iter()
        .map(|idx| {
            let frames: Vec<&Tensor> = idx.iter().map(|&i| &utts[i].frames).collect();
            let out = forward_batch(&frames, params)?;
            Ok(idx
                .iter()
                .enumerate()
                .map(|(r, &i)| {
                    (
                        i,
                        UttOutputs {
                            embedding: out.embeddings.row(r).to_vec(),
                            phi: out.phi.row(r).to_vec(),
                            rho: out.rho.row(r).to_vec(),
                            phi_tilde: out.phi_tilde.row(r).to_vec(),
                            phi_lin: out.phi_lin.row(r).to_vec(),
                        },
                    )
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut ordered: Vec<Option<UttOutputs>> = vec![None; utts.len()];
    for (i, o) in results.into_iter().flatten() {
        ordered[i] = Some(o);
    }
    Ok(ordered.into_iter().map(|o| o.expect("every utterance extracted")).collect())
}

/// The vector scored for `repr`. The trained embedding is used as is;
/// other posteriors go through the block of the embedding projection that
/// the model applies to `φ̃` (or to `φ_lin` for the linear branch when the
/// model concatenates it), so every probe lives in the same space.
pub fn probe_vector(out: &UttOutputs, repr: Representation, params: &RecXiParams) -> Vec<f64> {
    let d = params.config.state_dim;
    let fc1 = params.get(names::FC1);
    let block = |start: usize| {
        let rows: Vec<f64> = (start..start + d).flat_map(|r| fc1.row(r).iter().copied()).collect();
        Tensor::matrix(d, fc1.cols(), rows)
    };
    match repr {
        Representation::PhiTilde => out.embedding.clone(),
        Representation::Phi => project(&out.phi, &block(0)),
        Representation::Rho => project(&out.rho, &block(0)),
        Representation::PhiLin => {
            let start = match params.config.mode {
                EmbeddingMode::PhiTilde => 0,
                EmbeddingMode::PhiTildePlusLin => d,
            };
            project(&out.phi_lin, &block(start))
        }
    }
}

/// Probe vectors keyed by utterance id.
pub fn embed_utterances(
    params: &RecXiParams,
    utts: &[&Utterance],
    repr: Representation,
    batch_size: usize,
) -> Result<HashMap<String, Vec<f64>>> {
    let outs = extract(params, utts, batch_size)?;
    Ok(utts
        .iter()
        .zip(&outs)
        .map(|(u, o)| (u.id.clone(), probe_vector(o, repr, params)))
        .collect())
}

/// Scores trials by cosine similarity, optionally S-normalized against a
/// cohort of training-split utterances.
pub fn score_trials(
    params: &RecXiParams,
    corpus: &Corpus,
    trials: &[Trial],
    cfg: &EvalConfig,
    seed: u64,
) -> Result<(Vec<ScoredTrial>, DetResult)> {
    let mut needed: Vec<&str> = trials.iter().flat_map(|t| [t.enroll.as_str(), t.test.as_str()]).collect();
    needed.sort_unstable();
    needed.dedup();
    let index: HashMap<&str, &Utterance> = corpus.utterances.iter().map(|u| (u.id.as_str(), u)).collect();
    let utts: Vec<&Utterance> = needed
        .iter()
        .map(|id| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::Invalid(format!("trial utterance `{id}` is not in the corpus")))
        })
        .collect::<Result<_>>()?;
    let emb = embed_utterances(params, &utts, cfg.representation, cfg.batch_size)?;

    let cohort_stats: Option<HashMap<&str, CohortStats>> = if cfg.snorm {
        let pool: Vec<&Utterance> = corpus.split(Split::Train).collect();
        if pool.is_empty() {
            return Err(Error::Invalid("S-norm needs training utterances for the cohort".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = sample(&mut rng, pool.len(), cfg.cohort_size.min(pool.len())).into_vec();
        picked.sort_unstable();
        let cohort_utts: Vec<&Utterance> = picked.into_iter().map(|i| pool[i]).collect();
        let cohort = embed_utterances(params, &cohort_utts, cfg.representation, cfg.batch_size)?;
        let cohort: Vec<&Vec<f64>> = cohort_utts.iter().map(|u| &cohort[&u.id]).collect();
        let stats = needed
            .par_iter()
            .map(|id| {
                let e = &emb[*id];
                let scores = cohort
                    .iter()
                    .map(|c| cosine_score(e, c))
                    .collect::<Result<Vec<f64>>>()?;
                Ok((*id, CohortStats::from_scores(&scores)?))
            })
            .collect::<Result<HashMap<_, _>>>()?;
        Some(stats)
    } else {
        None
    };

    let scored = trials
        .iter()
        .map(|t| {
            let raw = cosine_score(&emb[&t.enroll], &emb[&t.test])?;
            let score = match &cohort_stats {
                Some(s) => s_norm_stats(raw, s[t.enroll.as_str()], s[t.test.as_str()]),
                None => raw,
            };
            Ok(ScoredTrial {
                enroll: t.enroll.clone(),
                test: t.test.clone(),
                score,
                target: t.target,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(f64, bool)> = scored.iter().map(|s| (s.score, s.target)).collect();
    let result = det_sweep(&pairs, cfg.costs)?;
    Ok((scored, result))
}

/// Validation EER: every validation utterance is scored against the
/// first training utterance of every speaker.
pub fn validation_eer(params: &RecXiParams, corpus: &Corpus, batch_size: usize) -> Result<Option<f64>> {
    let val: Vec<&Utterance> = corpus.split(Split::Val).collect();
    if val.is_empty() {
        return Ok(None);
    }
    let mut enroll: Vec<&Utterance> = Vec::new();
    for u in corpus.split(Split::Train) {
        if !enroll.iter().any(|e| e.speaker == u.speaker) {
            enroll.push(u);
        }
    }
    if enroll.len() < 2 {
        return Ok(None);
    }
    let mut all = enroll.clone();
    all.extend(&val);
    let emb = embed_utterances(params, &all, Representation::PhiTilde, batch_size)?;
    let mut pairs = Vec::with_capacity(val.len() * enroll.len());
    for v in &val {
        for e in &enroll {
            pairs.push((cosine_score(&emb[&e.id], &emb[&v.id])?, e.speaker == v.speaker));
        }
    }
    Ok(Some(det_sweep(&pairs, DetCosts::default())?.eer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_trials, CorpusConfig};
    use crate::params::ModelConfig;

    fn setup() -> (Corpus, RecXiParams) {
        let corpus = Corpus::generate(&CorpusConfig {
            n_speakers: 4,
            utts_per_speaker: 4,
            frames: 12,
            input_dim: 6,
            speaker_dim: 3,
            eval_speakers: 3,
            val_fraction: 0.25,
            seed: 2,
            ..CorpusConfig::default()
        })
        .unwrap();
        let params = RecXiParams::init(
            ModelConfig {
                input_dim: 6,
                state_dim: 3,
                encoder_width: 8,
                uncertainty_bottleneck: 8,
                generator_hidden: 4,
                n_components: 2,
                embed_dim: 5,
                n_classes: 4,
                ..ModelConfig::default()
            },
            3,
        )
        .unwrap();
        (corpus, params)
    }

    #[test]
    fn extraction_preserves_order_across_batches() {
        let (corpus, params) = setup();
        let utts: Vec<&Utterance> = corpus.utterances.iter().collect();
        let a = extract(&params, &utts, 3).unwrap();
        let b = extract(&params, &utts, 100).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (p, q) in x.embedding.iter().zip(&y.embedding) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn probes_have_embedding_width() {
        let (corpus, params) = setup();
        let utts: Vec<&Utterance> = corpus.utterances.iter().take(2).collect();
        let out = extract(&params, &utts, 8).unwrap();
        for r in Representation::ALL {
            assert_eq!(probe_vector(&out[0], r, &params).len(), 5);
        }
        assert_eq!(probe_vector(&out[0], Representation::PhiTilde, &params), out[0].embedding);
    }

    #[test]
    fn scoring_with_and_without_snorm() {
        let (corpus, params) = setup();
        let trials = make_trials(&corpus, Split::Test, 10, 20, 1).unwrap();
        let plain = EvalConfig::default();
        let (scores, res) = score_trials(&params, &corpus, &trials, &plain, 5).unwrap();
        assert_eq!(scores.len(), 30);
        assert_eq!((res.n_target, res.n_nontarget), (10, 20));
        assert!(scores.iter().all(|s| (-1.0..=1.0).contains(&s.score)));
        let snorm = EvalConfig {
            snorm: true,
            cohort_size: 5,
            ..EvalConfig::default()
        };
        let (s2, _) = score_trials(&params, &corpus, &trials, &snorm, 5).unwrap();
        assert_ne!(scores[0].score, s2[0].score);
        assert_eq!(s2, score_trials(&params, &corpus, &trials, &snorm, 5).unwrap().0);
        assert!(validation_eer(&params, &corpus, 8).unwrap().is_some());
    }
}
