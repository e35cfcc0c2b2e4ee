//! Trial scoring and detection metrics.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Detection cost parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetCosts {
    pub p_target: f64,
    pub c_fa: f64,
    pub c_miss: f64,
}

impl Default for DetCosts {
    fn default() -> Self {
        DetCosts {
            p_target: 0.01,
            c_fa: 1.0,
            c_miss: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrial {
    pub enroll: String,
    pub test: String,
    pub score: f64,
    pub target: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetResult {
    pub eer: f64,
    pub min_dcf: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

/// One operating point: the decision accepts scores `≥` some threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub p_miss: f64,
    pub p_fa: f64,
}

pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dim(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Invalid("cosine score of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean and population standard deviation of a cohort's scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CohortStats {
    pub mean: f64,
    pub std: f64,
}

impl CohortStats {
    pub fn from_scores(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Invalid("empty cohort".into()));
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0) {
            return Err(Error::Invalid("cohort scores have zero spread".into()));
        }
        Ok(CohortStats { mean, std })
    }
}

/// Symmetric normalization from precomputed cohort statistics.
pub fn s_norm_stats(raw: f64, enroll: CohortStats, test: CohortStats) -> f64 {
    0.5 * ((raw - enroll.mean) / enroll.std + (raw - test.mean) / test.std)
}

/// `½[(s − μ_e)/σ_e + (s − μ_t)/σ_t]` over the two cohort score lists.
pub fn s_norm(raw: f64, enroll_cohort: &[f64], test_cohort: &[f64]) -> Result<f64> {
    Ok(s_norm_stats(
        raw,
        CohortStats::from_scores(enroll_cohort)?,
        CohortStats::from_scores(test_cohort)?,
    ))
}

/// Operating points for thresholds at every distinct score plus `+∞`,
/// in increasing threshold order. The first point accepts everything.
pub fn operating_points(scores: &[(f64, bool)]) -> Result<Vec<OperatingPoint>> {
    let n_t = scores.iter().filter(|s| s.1).count();
    let n_n = scores.len() - n_t;
    if n_t == 0 || n_n == 0 {
        return Err(Error::Invalid(format!(
            "need target and nontarget trials, got {n_t} and {n_n}"
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.0.is_finite()) {
        return Err(Error::Invalid(format!("non-finite score {}", s.0)));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = Vec::with_capacity(sorted.len() + 1);
    let (mut misses, mut false_alarms) = (0usize, n_n);
    let mut i = 0;
    while i < sorted.len() {
        points.push(OperatingPoint {
            p_miss: misses as f64 / n_t as f64,
            p_fa: false_alarms as f64 / n_n as f64,
        });
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                misses += 1;
            } else {
                false_alarms -= 1;
            }
            i += 1;
        }
    }
    points.push(OperatingPoint {
        p_miss: 1.0,
        p_fa: 0.0,
    });
    Ok(points)
}

/// EER at the first crossing of the miss and false-alarm curves, linearly
/// interpolated between the bracketing operating points.
pub fn eer_from_points(points: &[OperatingPoint]) -> f64 {
    let i = points
        .iter()
        .position(|p| p.p_miss >= p.p_fa)
        .expect("the last operating point always has p_miss >= p_fa");
    if i == 0 {
        return points[0].p_miss;
    }
    let (a, b) = (points[i - 1], points[i]);
    let d0 = a.p_fa - a.p_miss;
    let d1 = b.p_miss - b.p_fa;
    let alpha = d0 / (d0 + d1);
    a.p_miss + alpha * (b.p_miss - a.p_miss)
}

pub fn min_dcf_from_points(points: &[OperatingPoint], costs: DetCosts) -> f64 {
    let norm = (costs.c_miss * costs.p_target).min(costs.c_fa * (1.0 - costs.p_target));
    points
        .iter()
        .map(|p| costs.c_miss * costs.p_target * p.p_miss + costs.c_fa * (1.0 - costs.p_target) * p.p_fa)
        .fold(f64::INFINITY, f64::min)
        / norm
}

/// EER and normalized minimum detection cost over `(score, is_target)`.
pub fn det_sweep(scores: &[(f64, bool)], costs: DetCosts) -> Result<DetResult> {
    let points = operating_points(scores)?;
    let n_target = scores.iter().filter(|s| s.1).count();
    Ok(DetResult {
        eer: eer_from_points(&points),
        min_dcf: min_dcf_from_points(&points, costs),
        n_target,
        n_nontarget: scores.len() - n_target,
    })
}

pub fn write_scores(path: &Path, trials: &[ScoredTrial]) -> Result<()> {
    let text: String = trials
        .iter()
        .map(|t| format!("{} {} {}\n", t.enroll, t.test, t.score))
        .collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_report(path: &Path, result: &DetResult) -> Result<()> {
    fs::write(path, format_report(result)).map_err(|e| Error::io(path, e))
}

pub fn format_report(r: &DetResult) -> String {
    format!(
        "eer={}\nmin_dcf={}\nn_target={}\nn_nontarget={}\n",
        r.eer, r.min_dcf, r.n_target, r.n_nontarget
    )
}
