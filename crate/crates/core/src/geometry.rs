//! Weighted chunk metric, the geometric reference surface, anchoring and
//! ranking losses, and the Best-of-N envelope check.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chunk::ActionChunk;
use crate::error::{invalid, Error, Result};

/// Per-dimension weights of the chunk metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetricWeights(Vec<f64>);

impl MetricWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid("metric weights must be finite and nonnegative"));
        }
        if !w.iter().any(|v| *v > 0.0) {
            return Err(invalid("at least one metric weight must be positive"));
        }
        Ok(Self(w))
    }

    pub fn ones(dim: usize) -> Self {
        Self(vec![1.0; dim])
    }

    /// Translation-heavy weighting for 7-D end-effector actions.
    pub fn manipulation() -> Self {
        Self(vec![5.0, 5.0, 5.0, 1.0, 1.0, 1.0, 1.0])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EgrConfig {
    /// Weight of the regularizer in the total objective.
    pub lambda: f64,
    /// Slope of the reference surface.
    pub beta: f64,
    /// Weight of the ranking term relative to anchoring.
    pub eta: f64,
    /// `None` means all-ones over the environment's action dimensions.
    pub weights: Option<MetricWeights>,
    pub ood_per_state: usize,
    pub rank_pairs_per_state: usize,
}

impl Default for EgrConfig {
    fn default() -> Self {
        Self {
            lambda: 5.0,
            beta: 5.0,
            eta: 1.0,
            weights: None,
            ood_per_state: 8,
            rank_pairs_per_state: 8,
        }
    }
}

impl EgrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid("egr.lambda must be >= 0"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(invalid("egr.beta must be > 0"));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(invalid("egr.eta must be >= 0"));
        }
        if let Some(w) = &self.weights {
            MetricWeights::new(w.0.clone())?;
        }
        if self.ood_per_state == 0 {
            return Err(invalid("egr.ood_per_state must be >= 1"));
        }
        if self.eta > 0.0 && (self.ood_per_state < 2 || self.rank_pairs_per_state == 0) {
            return Err(invalid(
                "ranking needs ood_per_state >= 2 and rank_pairs_per_state >= 1",
            ));
        }
        Ok(())
    }

    pub fn weights_for(&self, action_dim: usize) -> MetricWeights {
        self.weights
            .clone()
            .unwrap_or_else(|| MetricWeights::ones(action_dim))
    }
}

/// Masked, weighted squared distance averaged over jointly valid steps.
pub fn weighted_distance(a: &ActionChunk, b: &ActionChunk, w: &MetricWeights) -> Result<f64> {
    if a.horizon() != b.horizon() {
        return Err(Error::ShapeMismatch(format!(
            "horizons differ: {} vs {}",
            a.horizon(),
            b.horizon()
        )));
    }
    if a.action_dim() != w.len() || b.action_dim() != w.len() {
        return Err(Error::ShapeMismatch(format!(
            "action dims {}/{} vs {} weights",
            a.action_dim(),
            b.action_dim(),
            w.len()
        )));
    }
    let steps = a.valid_len().min(b.valid_len());
    if steps == 0 {
        return Err(invalid("empty joint mask"));
    }
    let total: f64 = (0..steps)
        .map(|k| {
            a.step(k)
                .iter()
                .zip(b.step(k))
                .zip(w.as_slice())
                .map(|((x, y), wj)| wj * (x - y) * (x - y))
                .sum::<f64>()
        })
        .sum();
    Ok(total / steps as f64)
}

/// `y_t - beta * dist`. `y_t` is a detached constant.
pub fn reference_surface(y_t: f64, dist: f64, beta: f64) -> f64 {
    y_t - beta * dist
}

pub fn anchor_loss(q_values: &[f64], surfaces: &[f64]) -> Result<f64> {
    if q_values.is_empty() {
        return Err(invalid("anchor loss needs at least one sample"));
    }
    if q_values.len() != surfaces.len() {
        return Err(Error::ShapeMismatch("q and surface lengths differ".into()));
    }
    let sum: f64 = q_values
        .iter()
        .zip(surfaces)
        .map(|(q, y)| (q - y) * (q - y))
        .sum();
    Ok(sum / q_values.len() as f64)
}

/// Mean over pairs of `((q_i - q_j) - beta (d_j - d_i))^2`.
pub fn rank_loss(q_pairs: &[(f64, f64)], dist_pairs: &[(f64, f64)], beta: f64) -> Result<f64> {
    if q_pairs.is_empty() {
        return Err(invalid("rank loss needs at least one pair"));
    }
    if q_pairs.len() != dist_pairs.len() {
        return Err(Error::ShapeMismatch("q and distance pair counts differ".into()));
    }
    let sum: f64 = q_pairs
        .iter()
        .zip(dist_pairs)
        .map(|(&(qi, qj), &(di, dj))| {
            let r = (qi - qj) - beta * (dj - di);
            r * r
        })
        .sum();
    Ok(sum / q_pairs.len() as f64)
}

/// Distinct unordered index pairs drawn without replacement from `0..m`.
pub fn sample_rank_pairs<R: Rng + ?Sized>(
    m: usize,
    count: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    let total = m * m.saturating_sub(1) / 2;
    let count = count.min(total);
    if count == 0 {
        return Vec::new();
    }
    let mut picked = index::sample(rng, total, count).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|p| unrank_pair(p, m)).collect()
}

/// Maps a linear index over the upper triangle of an `m × m` matrix to `(i, j)`, `i < j`.
fn unrank_pair(mut p: usize, m: usize) -> (usize, usize) {
    let mut i = 0;
    while p >= m - 1 - i {
        p -= m - 1 - i;
        i += 1;
    }
    (i, i + 1 + p)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EgrBreakdown {
    pub anchor: f64,
    pub rank: f64,
    pub total: f64,
    pub distances: Vec<f64>,
    pub surfaces: Vec<f64>,
    /// `q_i - Y_i` per candidate.
    pub residuals: Vec<f64>,
    /// Derivative of `total` with respect to each candidate score.
    pub grad_q: Vec<f64>,
}

/// Regularizer for one demonstration pair given precomputed candidate scores.
pub fn egr_loss_from_scores(
    gt_chunk: &ActionChunk,
    y_t: f64,
    ood_chunks: &[ActionChunk],
    q_values: &[f64],
    pairs: &[(usize, usize)],
    config: &EgrConfig,
    weights: &MetricWeights,
) -> Result<EgrBreakdown> {
    let m = ood_chunks.len();
    if m == 0 {
        return Err(invalid("regularizer needs at least one candidate"));
    }
    if q_values.len() != m {
        return Err(Error::ShapeMismatch("one score per candidate required".into()));
    }
    if config.eta > 0.0 && (m < 2 || pairs.is_empty()) {
        return Err(invalid("ranking term needs at least two candidates"));
    }
    let distances = ood_chunks
        .iter()
        .map(|c| weighted_distance(c, gt_chunk, weights))
        .collect::<Result<Vec<_>>>()?;
    let surfaces: Vec<f64> = distances
        .iter()
        .map(|&d| reference_surface(y_t, d, config.beta))
        .collect();
    let residuals: Vec<f64> = q_values.iter().zip(&surfaces).map(|(q, y)| q - y).collect();
    let anchor = anchor_loss(q_values, &surfaces)?;

    let mut grad_q: Vec<f64> = residuals.iter().map(|r| 2.0 * r / m as f64).collect();
    let mut rank = 0.0;
    if config.eta > 0.0 {
        let q_pairs: Vec<(f64, f64)> = pairs
            .iter()
            .map(|&(i, j)| (q_values[i], q_values[j]))
            .collect();
        let d_pairs: Vec<(f64, f64)> = pairs
            .iter()
            .map(|&(i, j)| (distances[i], distances[j]))
            .collect();
        rank = rank_loss(&q_pairs, &d_pairs, config.beta)?;
        let scale = 2.0 * config.eta / pairs.len() as f64;
        for &(i, j) in pairs {
            let r = (q_values[i] - q_values[j]) - config.beta * (distances[j] - distances[i]);
            grad_q[i] += scale * r;
            grad_q[j] -= scale * r;
        }
    }
    Ok(EgrBreakdown {
        anchor,
        rank,
        total: anchor + config.eta * rank,
        distances,
        surfaces,
        residuals,
        grad_q,
    })
}

/// Scores candidates with `q_fn` and evaluates the regularizer.
pub fn egr_loss(
    gt_chunk: &ActionChunk,
    y_t: f64,
    ood_chunks: &[ActionChunk],
    pairs: &[(usize, usize)],
    q_fn: impl Fn(&ActionChunk) -> f64,
    config: &EgrConfig,
    weights: &MetricWeights,
) -> Result<EgrBreakdown> {
    let q: Vec<f64> = ood_chunks.iter().map(q_fn).collect();
    egr_loss_from_scores(gt_chunk, y_t, ood_chunks, &q, pairs, config, weights)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnvelopeReport {
    /// Largest observed anchoring residual `max_i (q_i - Y_i)`.
    pub epsilon_hat: f64,
    pub max_q: f64,
    /// `y_t - beta * min_i d_i + epsilon_hat`.
    pub distance_bound: f64,
    /// `y_t + epsilon_hat`.
    pub scale_bound: f64,
    pub bound_holds: bool,
    /// Candidate attaining `epsilon_hat`.
    pub worst_candidate: usize,
}

pub const ENVELOPE_TOL: f64 = 1e-12;

/// Checks `max_i q_i <= y_t - beta min_i d_i + eps <= y_t + eps` on one candidate set.
pub fn check_bestofn_bound(
    q_fn: impl Fn(&ActionChunk) -> f64,
    gt_chunk: &ActionChunk,
    y_t: f64,
    candidates: &[ActionChunk],
    beta: f64,
    w: &MetricWeights,
) -> Result<EnvelopeReport> {
    let q: Vec<f64> = candidates.iter().map(q_fn).collect();
    let d = candidates
        .iter()
        .map(|c| weighted_distance(c, gt_chunk, w))
        .collect::<Result<Vec<_>>>()?;
    envelope_from_scores(&q, &d, y_t, beta)
}

pub fn envelope_from_scores(q: &[f64], d: &[f64], y_t: f64, beta: f64) -> Result<EnvelopeReport> {
    if q.is_empty() || q.len() != d.len() {
        return Err(invalid("envelope check needs matching non-empty scores and distances"));
    }
    let (worst_candidate, epsilon_hat) = q
        .iter()
        .zip(d)
        .map(|(&qi, &di)| qi - reference_surface(y_t, di, beta))
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, r)| {
            if r > best.1 {
                (i, r)
            } else {
                best
            }
        });
    let max_q = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_d = d.iter().copied().fold(f64::INFINITY, f64::min);
    let distance_bound = y_t - beta * min_d + epsilon_hat;
    let scale_bound = y_t + epsilon_hat;
    let bound_holds =
        max_q <= distance_bound + ENVELOPE_TOL && distance_bound <= scale_bound + ENVELOPE_TOL;
    Ok(EnvelopeReport {
        epsilon_hat,
        max_q,
        distance_bound,
        scale_bound,
        bound_holds,
        worst_candidate,
    })
}
