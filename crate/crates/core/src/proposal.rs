//! Proposal distributions over action chunks, the local-recall check, and the
//! off-demonstration candidate mixture used by the regularizer.

use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::chunk::ActionChunk;
use crate::data::OfflineDataset;
use crate::env::{distance, EnvState};
use crate::error::{invalid, Error, Result};
use crate::geometry::{weighted_distance, MetricWeights};

const STATE_MATCH_TOL: f64 = 1e-9;

/// Where the Gaussian perturbation of a demo-anchored proposal lives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalNoise {
    /// One offset per chunk, shared by all of its steps.
    #[default]
    Chunk,
    /// Independent noise on every valid entry.
    Step,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteEntry {
    pub state: Vec<f64>,
    pub candidates: Vec<ActionChunk>,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoGaussian {
    states: Vec<Vec<f64>>,
    chunks: Vec<ActionChunk>,
    sigma: f64,
    bias: Vec<f64>,
    noise: ProposalNoise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProposalPolicy {
    /// Explicit candidate list per state (matched on proprio).
    Finite { entries: Vec<FiniteEntry> },
    /// Nearest demonstration chunk plus systematic bias plus Gaussian noise.
    DemoGaussian(DemoGaussian),
}

impl ProposalPolicy {
    pub fn finite(entries: Vec<FiniteEntry>) -> Result<Self> {
        for e in &entries {
            if e.candidates.is_empty() || e.candidates.len() != e.probs.len() {
                return Err(invalid("finite entry needs one probability per candidate"));
            }
            check_distribution(&e.probs)?;
        }
        Ok(Self::Finite { entries })
    }

    fn finite_entry(&self, state: &EnvState) -> Result<&FiniteEntry> {
        let Self::Finite { entries } = self else {
            unreachable!("finite_entry on a non-finite policy")
        };
        entries
            .iter()
            .find(|e| distance(&e.state, &state.proprio) <= STATE_MATCH_TOL)
            .ok_or_else(|| Error::OutsideSupport(format!("{:?}", state.proprio)))
    }

    pub fn horizon(&self) -> Option<usize> {
        match self {
            Self::Finite { entries } => entries
                .first()
                .and_then(|e| e.candidates.first())
                .map(|c| c.horizon()),
            Self::DemoGaussian(d) => d.chunks.first().map(|c| c.horizon()),
        }
    }
}

pub(crate) fn check_distribution(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::InvalidDistribution("empty distribution".into()));
    }
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidDistribution(
            "probabilities must be finite and nonnegative".into(),
        ));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidDistribution(format!(
            "probabilities sum to {total}"
        )));
    }
    Ok(())
}

/// Nearest-demonstration proposal. Ties go to the lowest dataset index.
pub fn make_demo_proposal(
    dataset: &OfflineDataset,
    sigma: f64,
    bias: Vec<f64>,
    noise: ProposalNoise,
) -> Result<ProposalPolicy> {
    if dataset.is_empty() {
        return Err(invalid("proposal needs a non-empty dataset"));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(invalid("proposal sigma must be finite and >= 0"));
    }
    let dim = dataset.transitions[0].chunk.action_dim();
    if bias.len() != dim {
        return Err(Error::ShapeMismatch(format!(
            "bias has {} entries, actions have {dim}",
            bias.len()
        )));
    }
    Ok(ProposalPolicy::DemoGaussian(DemoGaussian {
        states: dataset
            .transitions
            .iter()
            .map(|t| t.state.proprio.clone())
            .collect(),
        chunks: dataset.transitions.iter().map(|t| t.chunk.clone()).collect(),
        sigma,
        bias,
        noise,
    }))
}

impl DemoGaussian {
    pub fn nearest(&self, proprio: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, s) in self.states.iter().enumerate() {
            let d = distance(s, proprio);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    fn sample<R: Rng + ?Sized>(&self, proprio: &[f64], rng: &mut R) -> Result<ActionChunk> {
        let base = &self.chunks[self.nearest(proprio)];
        let normal = Normal::new(0.0, self.sigma).map_err(|e| invalid(e.to_string()))?;
        let draw = |rng: &mut R| {
            if self.sigma > 0.0 {
                normal.sample(rng)
            } else {
                0.0
            }
        };
        match self.noise {
            ProposalNoise::Chunk => {
                let offset: Vec<f64> = self.bias.iter().map(|b| b + draw(rng)).collect();
                base.map_valid(|_, j, v| v + offset[j])
            }
            ProposalNoise::Step => base.map_valid(|_, j, v| v + self.bias[j] + draw(rng)),
        }
    }
}

/// `n` independent draws from the proposal at `state`.
pub fn sample_candidates<R: Rng + ?Sized>(
    policy: &ProposalPolicy,
    state: &EnvState,
    n: usize,
    rng: &mut R,
) -> Result<Vec<ActionChunk>> {
    if n == 0 {
        return Err(invalid("N must be at least 1"));
    }
    match policy {
        ProposalPolicy::Finite { .. } => {
            let entry = policy.finite_entry(state)?;
            let dist = WeightedIndex::new(&entry.probs)
                .map_err(|e| Error::InvalidDistribution(e.to_string()))?;
            Ok((0..n)
                .map(|_| entry.candidates[dist.sample(rng)].clone())
                .collect())
        }
        ProposalPolicy::DemoGaussian(d) => (0..n).map(|_| d.sample(&state.proprio, rng)).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallSpec {
    /// Radius in units of the (unsquared) weighted metric.
    pub epsilon: f64,
    pub p0: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecallReport {
    pub masses: Vec<f64>,
    pub min_mass: f64,
    pub pass: bool,
}

/// Per dataset pair, metric distances of `samples_per_state` proposal draws to
/// the demonstrated chunk. Shared by every radius evaluated on it.
pub fn recall_distances<R: Rng + ?Sized>(
    policy: &ProposalPolicy,
    dataset: &OfflineDataset,
    w: &MetricWeights,
    samples_per_state: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if samples_per_state == 0 {
        return Err(invalid("samples_per_state must be at least 1"));
    }
    dataset
        .transitions
        .iter()
        .map(|t| {
            sample_candidates(policy, &t.state, samples_per_state, rng)?
                .iter()
                .map(|c| weighted_distance(c, &t.chunk, w).map(f64::sqrt))
                .collect()
        })
        .collect()
}

pub fn recall_masses(distances: &[Vec<f64>], epsilon: f64) -> Vec<f64> {
    distances
        .iter()
        .map(|ds| ds.iter().filter(|&&d| d <= epsilon).count() as f64 / ds.len() as f64)
        .collect()
}

/// Monte-Carlo estimate of the proposal mass inside `epsilon` of each demonstrated chunk.
pub fn check_local_recall<R: Rng + ?Sized>(
    policy: &ProposalPolicy,
    dataset: &OfflineDataset,
    spec: &RecallSpec,
    w: &MetricWeights,
    samples_per_state: usize,
    rng: &mut R,
) -> Result<RecallReport> {
    let distances = recall_distances(policy, dataset, w, samples_per_state, rng)?;
    let masses = recall_masses(&distances, spec.epsilon);
    let min_mass = masses.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(RecallReport {
        pass: masses.iter().all(|&m| m >= spec.p0),
        min_mass,
        masses,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodSource {
    Proposal,
    GtNoise,
    PrefixTruncation,
    Interpolation,
}

impl OodSource {
    pub const ALL: [OodSource; 4] = [
        OodSource::Proposal,
        OodSource::GtNoise,
        OodSource::PrefixTruncation,
        OodSource::Interpolation,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodSamplerConfig {
    /// Mixture weights in the order proposal, gt+noise, prefix truncation, interpolation.
    pub weights: [f64; 4],
    pub noise_sigma: f64,
    pub alpha_range: [f64; 2],
}

impl Default for OodSamplerConfig {
    fn default() -> Self {
        Self {
            weights: [0.4, 0.3, 0.15, 0.15],
            noise_sigma: 0.3,
            alpha_range: [0.0, 1.0],
        }
    }
}

impl OodSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid("ood weights must be finite and nonnegative"));
        }
        let total: f64 = self.weights.iter().sum();
        if total <= 0.0 {
            return Err(invalid("ood weights are all zero"));
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("ood weights sum to {total}, expected 1")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid("ood noise_sigma must be >= 0"));
        }
        let [lo, hi] = self.alpha_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(invalid("alpha_range must satisfy 0 <= lo <= hi <= 1"));
        }
        Ok(())
    }
}

/// One off-demonstration candidate from the mixture.
pub fn sample_ood<R: Rng + ?Sized>(
    config: &OodSamplerConfig,
    state: &EnvState,
    gt_chunk: &ActionChunk,
    policy: &ProposalPolicy,
    rng: &mut R,
) -> Result<ActionChunk> {
    if config.weights.iter().all(|w| *w <= 0.0) {
        return Err(invalid("ood weights are all zero"));
    }
    let pick = WeightedIndex::new(config.weights)
        .map_err(|e| Error::InvalidDistribution(e.to_string()))?;
    let source = OodSource::ALL[pick.sample(rng)];
    sample_ood_from(source, config, state, gt_chunk, policy, rng)
}

pub fn sample_ood_from<R: Rng + ?Sized>(
    source: OodSource,
    config: &OodSamplerConfig,
    state: &EnvState,
    gt_chunk: &ActionChunk,
    policy: &ProposalPolicy,
    rng: &mut R,
) -> Result<ActionChunk> {
    match source {
        OodSource::Proposal => Ok(sample_candidates(policy, state, 1, rng)?.remove(0)),
        OodSource::GtNoise => {
            let normal =
                Normal::new(0.0, config.noise_sigma).map_err(|e| invalid(e.to_string()))?;
            gt_chunk.map_valid(|_, _, v| v + normal.sample(rng))
        }
        OodSource::PrefixTruncation => {
            let len = rng.random_range(1..=gt_chunk.valid_len());
            gt_chunk.truncated(len)
        }
        OodSource::Interpolation => {
            let proposal = sample_candidates(policy, state, 1, rng)?.remove(0);
            let [lo, hi] = config.alpha_range;
            let alpha = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            interpolate(gt_chunk, &proposal, alpha)
        }
    }
}

/// `alpha * gt + (1 - alpha) * other` on the valid steps of `gt`.
pub fn interpolate(gt: &ActionChunk, other: &ActionChunk, alpha: f64) -> Result<ActionChunk> {
    if gt.horizon() != other.horizon() || gt.action_dim() != other.action_dim() {
        return Err(Error::ShapeMismatch("interpolation needs equal chunk shapes".into()));
    }
    gt.map_valid(|k, j, v| alpha * v + (1.0 - alpha) * other.step(k)[j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, RewardLabeling};
    use crate::env::{generate_demos, make_env, EnvConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(p: &[f64]) -> EnvState {
        EnvState {
            proprio: p.to_vec(),
            goal: vec![0.0, 0.0],
            step_index: 0,
        }
    }

    fn c(v: f64) -> ActionChunk {
        ActionChunk::constant(&[v, -v], 3).unwrap()
    }

    fn finite_two() -> ProposalPolicy {
        ProposalPolicy::finite(vec![FiniteEntry {
            state: vec![0.0, 0.0],
            candidates: vec![c(1.0), c(2.0)],
            probs: vec![0.5, 0.5],
        }])
        .unwrap()
    }

    #[test]
    fn finite_point_mass() {
        let p = ProposalPolicy::finite(vec![FiniteEntry {
            state: vec![0.0, 0.0],
            candidates: vec![c(1.0)],
            probs: vec![1.0],
        }])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draws = sample_candidates(&p, &state(&[0.0, 0.0]), 3, &mut rng).unwrap();
        assert_eq!(draws, vec![c(1.0); 3]);
        assert!(matches!(
            sample_candidates(&p, &state(&[1.0, 0.0]), 1, &mut rng),
            Err(Error::OutsideSupport(_))
        ));
    }

    #[test]
    fn finite_frequencies() {
        let p = finite_two();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let draws = sample_candidates(&p, &state(&[0.0, 0.0]), n, &mut rng).unwrap();
        let freq = draws.iter().filter(|d| **d == c(1.0)).count() as f64 / n as f64;
        // 3 sigma of Binomial(1e5, 0.5) is 0.00474
        assert!((0.497..=0.503).contains(&freq), "freq {freq}");
    }

    #[test]
    fn finite_policy_validation() {
        let bad = ProposalPolicy::finite(vec![FiniteEntry {
            state: vec![0.0, 0.0],
            candidates: vec![c(1.0), c(2.0)],
            probs: vec![0.5, 0.6],
        }]);
        assert!(matches!(bad, Err(Error::InvalidDistribution(_))));
    }

    fn two_demo_dataset() -> OfflineDataset {
        use crate::env::ChunkTransition;
        let t = |p: [f64; 2], v: f64| ChunkTransition {
            state: state(&p),
            chunk: c(v),
            rewards: vec![0.0; 3],
            next_state: state(&p),
            terminal: true,
        };
        OfflineDataset::new(vec![t([-1.0, 0.0], 1.0), t([1.0, 0.0], 2.0)], 3, 0.9).unwrap()
    }

    #[test]
    fn demo_proposal_nearest_and_ties() {
        let ds = two_demo_dataset();
        let p = make_demo_proposal(&ds, 0.0, vec![0.0, 0.0], ProposalNoise::Chunk).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let at = |x: f64, rng: &mut ChaCha8Rng| {
            sample_candidates(&p, &state(&[x, 0.0]), 1, rng).unwrap().remove(0)
        };
        assert_eq!(at(-1.0, &mut rng), c(1.0));
        assert_eq!(at(0.9, &mut rng), c(2.0));
        // equidistant: lower index wins
        assert_eq!(at(0.0, &mut rng), c(1.0));
        assert!(make_demo_proposal(
            &OfflineDataset::new(vec![], 3, 0.9).unwrap(),
            0.0,
            vec![0.0, 0.0],
            ProposalNoise::Chunk
        )
        .is_err());
    }

    #[test]
    fn demo_proposal_bias_shifts_mean() {
        let ds = two_demo_dataset();
        for noise in [ProposalNoise::Chunk, ProposalNoise::Step] {
            let p = make_demo_proposal(&ds, 0.2, vec![0.1, 0.0], noise).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let n = 20_000;
            let draws = sample_candidates(&p, &state(&[-1.0, 0.0]), n, &mut rng).unwrap();
            let mean0 = draws.iter().map(|d| d.step(0)[0]).sum::<f64>() / n as f64;
            let mean1 = draws.iter().map(|d| d.step(0)[1]).sum::<f64>() / n as f64;
            // standard error 0.2 / sqrt(2e4) = 0.0014
            assert!((mean0 - 1.1).abs() < 0.006, "{mean0}");
            assert!((mean1 + 1.0).abs() < 0.006, "{mean1}");
        }
    }

    #[test]
    fn recall_limits() {
        let ds = two_demo_dataset();
        let w = MetricWeights::ones(2);
        let exact = make_demo_proposal(&ds, 0.0, vec![0.0, 0.0], ProposalNoise::Chunk).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = RecallSpec {
            epsilon: 1e-6,
            p0: 1.0,
        };
        let r = check_local_recall(&exact, &ds, &spec, &w, 50, &mut rng).unwrap();
        assert!(r.pass && r.masses.iter().all(|&m| m == 1.0));

        let wide = make_demo_proposal(&ds, 10.0, vec![0.0, 0.0], ProposalNoise::Step).unwrap();
        let spec = RecallSpec {
            epsilon: 0.1,
            p0: 0.5,
        };
        let r = check_local_recall(&wide, &ds, &spec, &w, 500, &mut rng).unwrap();
        assert!(!r.pass && r.min_mass < 0.05);
    }

    #[test]
    fn recall_default_pointmass() {
        let env = make_env(&EnvConfig::pointmass()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let demos = generate_demos(&env, 5, 0.05, &mut rng).unwrap();
        let h = 8;
        let ds = build_dataset(&demos, &RewardLabeling::default(), h, h, 0.98).unwrap();
        let w = MetricWeights::ones(2);
        let spec = RecallSpec {
            epsilon: 0.1 * (h as f64).sqrt(),
            p0: 0.5,
        };
        let p = make_demo_proposal(&ds, 0.05, vec![0.0, 0.0], ProposalNoise::Step).unwrap();
        let r = check_local_recall(&p, &ds, &spec, &w, 10_000, &mut rng).unwrap();
        assert!(r.pass, "min mass {}", r.min_mass);
    }

    #[test]
    fn recall_monotone_in_epsilon_on_shared_samples() {
        let ds = two_demo_dataset();
        let w = MetricWeights::ones(2);
        let p = make_demo_proposal(&ds, 0.3, vec![0.05, 0.0], ProposalNoise::Step).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = recall_distances(&p, &ds, &w, 300, &mut rng).unwrap();
        let mut prev = recall_masses(&d, 0.0);
        for k in 1..40 {
            let cur = recall_masses(&d, k as f64 * 0.05);
            assert!(prev.iter().zip(&cur).all(|(a, b)| a <= b));
            prev = cur;
        }
    }

    #[test]
    fn interpolation_endpoints() {
        let gt = ActionChunk::full(vec![vec![0.3, -0.2], vec![0.1, 0.7]]).unwrap();
        let other = ActionChunk::full(vec![vec![1.3, 0.2], vec![-0.4, 0.5]]).unwrap();
        assert_eq!(interpolate(&gt, &other, 1.0).unwrap(), gt);
        assert_eq!(interpolate(&gt, &other, 0.0).unwrap(), other);
    }

    #[test]
    fn gt_noise_expected_distance() {
        let gt = ActionChunk::full(vec![vec![0.3, -0.2, 0.0]; 4]).unwrap();
        let w = MetricWeights::new(vec![5.0, 1.0, 2.0]).unwrap();
        let cfg = OodSamplerConfig {
            noise_sigma: 0.1,
            ..Default::default()
        };
        let policy = finite_two();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 10_000;
        let mut mean = 0.0;
        for _ in 0..n {
            let cand =
                sample_ood_from(OodSource::GtNoise, &cfg, &state(&[0.0, 0.0]), &gt, &policy, &mut rng)
                    .unwrap();
            assert_eq!(cand.mask(), gt.mask());
            mean += weighted_distance(&cand, &gt, &w).unwrap();
        }
        mean /= n as f64;
        let expected = 0.01 * w.sum();
        assert!((mean - expected).abs() / expected < 0.02, "{mean} vs {expected}");
    }

    #[test]
    fn ood_masks() {
        let gt = ActionChunk::padded(&[vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5, 0.6]], 3).unwrap();
        let policy = ProposalPolicy::finite(vec![FiniteEntry {
            state: vec![0.0, 0.0],
            candidates: vec![c(0.5)],
            probs: vec![1.0],
        }])
        .unwrap();
        let cfg = OodSamplerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = state(&[0.0, 0.0]);
        for _ in 0..200 {
            for src in [OodSource::GtNoise, OodSource::Interpolation] {
                let x = sample_ood_from(src, &cfg, &s, &gt, &policy, &mut rng).unwrap();
                assert_eq!(x.mask(), gt.mask());
            }
            let t = sample_ood_from(OodSource::PrefixTruncation, &cfg, &s, &gt, &policy, &mut rng)
                .unwrap();
            assert!(t.valid_len() <= gt.valid_len());
            assert_eq!(t.valid_steps(), &gt.valid_steps()[..t.valid_len()]);
            sample_ood(&cfg, &s, &gt, &policy, &mut rng).unwrap();
        }
        let zero = OodSamplerConfig {
            weights: [0.0; 4],
            ..cfg
        };
        assert!(sample_ood(&zero, &s, &gt, &policy, &mut rng).is_err());
        assert!(zero.validate().is_err());
    }
}
