//! Best-of-N selection at inference time, receding-horizon rollouts, ranking
//! diagnostics, inference-budget sweeps, and value-landscape grids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chunk::ActionChunk;
use crate::critic::{CriticParams, TwinCritic};
use crate::env::{step_chunk, Demonstration, Env, EnvState};
use crate::error::{invalid, Error, Result};
use crate::geometry::{weighted_distance, MetricWeights};
use crate::proposal::{sample_candidates, ProposalPolicy};

/// Anything that can score candidate chunks at a state.
pub trait ChunkScorer {
    fn score_chunks(&self, state: &EnvState, chunks: &[ActionChunk]) -> Result<Vec<f64>>;
}

impl ChunkScorer for TwinCritic {
    fn score_chunks(&self, state: &EnvState, chunks: &[ActionChunk]) -> Result<Vec<f64>> {
        self.min_scores(state, chunks)
    }
}

impl ChunkScorer for CriticParams {
    fn score_chunks(&self, state: &EnvState, chunks: &[ActionChunk]) -> Result<Vec<f64>> {
        chunks.iter().map(|c| self.score(state, c)).collect()
    }
}

/// Wraps a closure `(state, chunk) -> score`.
pub struct FnScorer<F>(pub F);

impl<F: Fn(&EnvState, &ActionChunk) -> f64> ChunkScorer for FnScorer<F> {
    fn score_chunks(&self, state: &EnvState, chunks: &[ActionChunk]) -> Result<Vec<f64>> {
        Ok(chunks.iter().map(|c| (self.0)(state, c)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n: usize,
    /// Steps executed from each selected chunk before replanning.
    pub n_exec: usize,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    /// Episode step budget; `None` uses the environment's.
    pub max_steps: Option<usize>,
    /// Per-step discount for the reported return.
    pub gamma: f64,
    /// Held-out states for ranking diagnostics.
    pub rank_states: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n: 8,
            n_exec: 5,
            episodes: 20,
            seeds: vec![0, 1, 2, 3, 4],
            max_steps: None,
            gamma: 0.98,
            rank_states: 40,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n_exec == 0 {
            return Err(invalid("eval.n and eval.n_exec must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("eval.seeds must not be empty"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(invalid("eval.gamma must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// First maximum; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

fn argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v < values[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Selection {
    pub index: usize,
    pub candidates: Vec<ActionChunk>,
    pub scores: Vec<f64>,
}

impl Selection {
    pub fn chosen(&self) -> &ActionChunk {
        &self.candidates[self.index]
    }
}

pub fn select_among(
    scorer: &dyn ChunkScorer,
    state: &EnvState,
    candidates: Vec<ActionChunk>,
) -> Result<Selection> {
    let scores = scorer.score_chunks(state, &candidates)?;
    if scores.len() != candidates.len() || scores.iter().any(|s| !s.is_finite()) {
        return Err(invalid("scorer returned non-finite or missing scores"));
    }
    let index = argmax(&scores).ok_or_else(|| invalid("no candidates"))?;
    Ok(Selection {
        index,
        candidates,
        scores,
    })
}

/// Samples `n` proposals and keeps the highest-scoring one.
pub fn best_of_n_select<R: Rng + ?Sized>(
    scorer: &dyn ChunkScorer,
    proposal: &ProposalPolicy,
    state: &EnvState,
    n: usize,
    rng: &mut R,
) -> Result<Selection> {
    let candidates = sample_candidates(proposal, state, n, rng)?;
    select_among(scorer, state, candidates)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Episode {
    pub success: bool,
    /// `Σ_t γ^t r_t` over executed environment steps.
    pub ret: f64,
    pub steps: usize,
    /// State at the start of every executed chunk, then the final state.
    pub trajectory: Vec<EnvState>,
    pub chunks: Vec<ActionChunk>,
}

/// Select, execute `n_exec` steps, and replan until success or the budget runs out.
pub fn run_episode<R: Rng + ?Sized>(
    env: &Env,
    scorer: &dyn ChunkScorer,
    proposal: &ProposalPolicy,
    config: &EvalConfig,
    rng: &mut R,
) -> Result<Episode> {
    let budget = config
        .max_steps
        .unwrap_or(env.max_steps())
        .min(env.max_steps());
    let mut state = env.reset(rng);
    let mut ep = Episode {
        success: env.is_success(&state),
        ret: 0.0,
        steps: 0,
        trajectory: vec![state.clone()],
        chunks: Vec::new(),
    };
    let mut discount = 1.0;
    while !ep.success && state.step_index < budget {
        let sel = best_of_n_select(scorer, proposal, &state, config.n, rng)?;
        let chunk = sel.chosen().clone();
        let n_exec = config
            .n_exec
            .min(chunk.valid_len())
            .min(budget - state.step_index);
        let t = step_chunk(env, &state, &chunk, n_exec)?;
        let executed = t.next_state.step_index - state.step_index;
        for r in &t.rewards[..executed] {
            ep.ret += discount * r;
            discount *= config.gamma;
        }
        ep.steps += executed;
        state = t.next_state;
        ep.success = env.is_success(&state);
        ep.trajectory.push(state.clone());
        ep.chunks.push(chunk);
        if executed == 0 {
            break;
        }
    }
    Ok(ep)
}

/// Generator for episode `episode` under evaluation seed `seed`.
pub fn episode_rng(seed: u64, episode: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode as u64);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessRow {
    pub seed: u64,
    #[serde(rename = "N")]
    pub n: usize,
    pub sr: f64,
}

/// Mean success per seed at `config.n`, rows sorted by seed.
pub fn success_rate(
    env: &Env,
    scorer: &dyn ChunkScorer,
    proposal: &ProposalPolicy,
    config: &EvalConfig,
) -> Result<Vec<SuccessRow>> {
    config.validate()?;
    let mut seeds = config.seeds.clone();
    seeds.sort_unstable();
    seeds
        .into_iter()
        .map(|seed| {
            let mut wins = 0usize;
            for e in 0..config.episodes {
                let ep = run_episode(env, scorer, proposal, config, &mut episode_rng(seed, e))?;
                wins += ep.success as usize;
            }
            let sr = if config.episodes == 0 {
                0.0
            } else {
                wins as f64 / config.episodes as f64
            };
            Ok(SuccessRow {
                seed,
                n: config.n,
                sr,
            })
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SuccessRow>,
    /// `(N, median success over seeds)`.
    pub medians: Vec<(usize, f64)>,
}

impl SweepTable {
    pub fn non_decreasing(&self) -> bool {
        self.medians.windows(2).all(|w| w[1].1 >= w[0].1)
    }
}

/// Success rates for each `N` with the same seeds and episode generators.
pub fn sweep_n(
    env: &Env,
    scorer: &dyn ChunkScorer,
    proposal: &ProposalPolicy,
    ns: &[usize],
    config: &EvalConfig,
) -> Result<SweepTable> {
    if ns.is_empty() {
        return Err(invalid("sweep needs at least one N"));
    }
    let mut table = SweepTable {
        rows: Vec::new(),
        medians: Vec::new(),
    };
    for &n in ns {
        let cfg = EvalConfig {
            n,
            ..config.clone()
        };
        let rows = success_rate(env, scorer, proposal, &cfg)?;
        let m = median(&rows.iter().map(|r| r.sr).collect::<Vec<_>>());
        table.medians.push((n, m));
        table.rows.extend(rows);
    }
    Ok(table)
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Rank correlation with average ranks for ties. A constant sequence has no
/// ordering information and yields 0.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(invalid("spearman needs two equal-length sequences of length >= 2"));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankDetail {
    pub state_id: usize,
    pub hit: bool,
    pub spearman: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankReport {
    pub top1_hit_rate: f64,
    pub spearman: f64,
    pub per_state: Vec<RankDetail>,
}

/// Ranking quality on explicit candidate sets, one per held-out state.
pub fn rank_eval_on_sets(
    scorer: &dyn ChunkScorer,
    heldout: &[(EnvState, ActionChunk)],
    candidate_sets: &[Vec<ActionChunk>],
    weights: &MetricWeights,
) -> Result<RankReport> {
    if heldout.is_empty() || heldout.len() != candidate_sets.len() {
        return Err(invalid("one candidate set per held-out state required"));
    }
    let mut per_state = Vec::with_capacity(heldout.len());
    for (id, ((state, expert), cands)) in heldout.iter().zip(candidate_sets).enumerate() {
        if cands.len() < 2 {
            return Err(invalid("ranking needs at least two candidates"));
        }
        let scores = scorer.score_chunks(state, cands)?;
        let dists = cands
            .iter()
            .map(|c| weighted_distance(c, expert, weights))
            .collect::<Result<Vec<_>>>()?;
        let neg: Vec<f64> = dists.iter().map(|d| -d).collect();
        per_state.push(RankDetail {
            state_id: id,
            hit: argmax(&scores) == argmin(&dists),
            spearman: spearman(&scores, &neg)?,
        });
    }
    let n = per_state.len() as f64;
    Ok(RankReport {
        top1_hit_rate: per_state.iter().filter(|d| d.hit).count() as f64 / n,
        spearman: per_state.iter().map(|d| d.spearman).sum::<f64>() / n,
        per_state,
    })
}

/// Samples `n` proposals per held-out state (plus the expert chunk when
/// `include_expert`) and compares critic and geometric rankings.
pub fn rank_eval<R: Rng + ?Sized>(
    scorer: &dyn ChunkScorer,
    heldout: &[(EnvState, ActionChunk)],
    proposal: &ProposalPolicy,
    n: usize,
    weights: &MetricWeights,
    include_expert: bool,
    rng: &mut R,
) -> Result<RankReport> {
    if n < 2 {
        return Err(invalid("ranking needs N >= 2"));
    }
    let sets = heldout
        .iter()
        .map(|(state, expert)| {
            let mut c = sample_candidates(proposal, state, n, rng)?;
            if include_expert {
                c.push(expert.clone());
            }
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    rank_eval_on_sets(scorer, heldout, &sets, weights)
}

/// `(state, expert chunk)` pairs from full-length windows of `demos`,
/// evenly spread, at most `max_states`.
pub fn heldout_pairs(
    demos: &[Demonstration],
    h: usize,
    max_states: usize,
) -> Result<Vec<(EnvState, ActionChunk)>> {
    let mut all = Vec::new();
    for demo in demos.iter().filter(|d| d.success) {
        for start in 0..demo.len().saturating_sub(h - 1) {
            let chunk = ActionChunk::full(demo.actions[start..start + h].to_vec())?;
            all.push((demo.states[start].clone(), chunk));
        }
    }
    if all.is_empty() {
        return Err(invalid("no full-length windows in held-out demos"));
    }
    if all.len() <= max_states {
        return Ok(all);
    }
    let stride = all.len() as f64 / max_states as f64;
    Ok((0..max_states)
        .map(|i| all[(i as f64 * stride) as usize].clone())
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkCoord {
    pub step: usize,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub axes: [ChunkCoord; 2],
    /// Offsets span `[-half_width, half_width]` around the ground truth.
    pub half_width: f64,
    /// Points per axis; odd so the ground truth is a grid cell.
    pub points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            axes: [ChunkCoord { step: 0, dim: 0 }, ChunkCoord { step: 1, dim: 0 }],
            half_width: 1.0,
            points: 21,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LandscapeCell {
    pub x: f64,
    pub y: f64,
    pub q: f64,
    pub q_norm: f64,
    pub marker: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Landscape {
    pub points: usize,
    /// Grid cells row-major over `(y, x)`, then one cell per candidate.
    pub cells: Vec<LandscapeCell>,
    pub q_min: f64,
    pub q_max: f64,
    pub gt_index: usize,
}

impl Landscape {
    pub fn grid(&self) -> &[LandscapeCell] {
        &self.cells[..self.points * self.points]
    }
}

/// Scores the chunk varied along two coordinates around `gt`, plus fixed
/// candidates, and min-max normalizes all values to `[-1, 1]` (zero range → 0).
pub fn landscape_grid(
    scorer: &dyn ChunkScorer,
    state: &EnvState,
    gt: &ActionChunk,
    spec: &GridSpec,
    candidates: &[ActionChunk],
) -> Result<Landscape> {
    if spec.points == 0 || spec.points.is_multiple_of(2) {
        return Err(invalid("grid points must be odd"));
    }
    if !(spec.half_width >= 0.0 && spec.half_width.is_finite()) {
        return Err(invalid("grid half_width must be >= 0"));
    }
    for ax in &spec.axes {
        if ax.step >= gt.valid_len() || ax.dim >= gt.action_dim() {
            return Err(Error::ShapeMismatch(format!(
                "axis ({}, {}) outside the valid chunk",
                ax.step, ax.dim
            )));
        }
    }
    let p = spec.points;
    let offsets: Vec<f64> = (0..p)
        .map(|i| {
            if p == 1 {
                0.0
            } else {
                spec.half_width * (2.0 * i as f64 / (p - 1) as f64 - 1.0)
            }
        })
        .collect();
    let [ax, ay] = spec.axes;
    let base_x = gt.step(ax.step)[ax.dim];
    let base_y = gt.step(ay.step)[ay.dim];
    let mut chunks = Vec::with_capacity(p * p + candidates.len());
    let mut coords = Vec::with_capacity(p * p + candidates.len());
    for &oy in &offsets {
        for &ox in &offsets {
            let (x, y) = (base_x + ox, base_y + oy);
            chunks.push(gt.map_valid(|k, j, v| {
                if k == ax.step && j == ax.dim {
                    x
                } else if k == ay.step && j == ay.dim {
                    y
                } else {
                    v
                }
            })?);
            coords.push((x, y));
        }
    }
    for c in candidates {
        if c.horizon() != gt.horizon() || c.action_dim() != gt.action_dim() {
            return Err(Error::ShapeMismatch("candidate shape differs from gt".into()));
        }
        if ax.step >= c.valid_len() || ay.step >= c.valid_len() {
            return Err(Error::ShapeMismatch("candidate too short for the axes".into()));
        }
        coords.push((c.step(ax.step)[ax.dim], c.step(ay.step)[ay.dim]));
        chunks.push(c.clone());
    }
    let q = scorer.score_chunks(state, &chunks)?;
    let q_min = q.iter().copied().fold(f64::INFINITY, f64::min);
    let q_max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = q_max - q_min;
    let gt_index = (p / 2) * p + p / 2;
    let cells = q
        .iter()
        .zip(&coords)
        .enumerate()
        .map(|(i, (&qi, &(x, y)))| LandscapeCell {
            x,
            y,
            q: qi,
            q_norm: if range > 0.0 {
                2.0 * (qi - q_min) / range - 1.0
            } else {
                0.0
            },
            marker: if i == gt_index {
                "gt".into()
            } else if i >= p * p {
                "candidate".into()
            } else {
                String::new()
            },
        })
        .collect();
    Ok(Landscape {
        points: p,
        cells,
        q_min,
        q_max,
        gt_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_demos, make_env, EnvConfig};
    use crate::proposal::{FiniteEntry, ProposalPolicy};

    fn fixed(scores: Vec<f64>) -> FnScorer<impl Fn(&EnvState, &ActionChunk) -> f64> {
        FnScorer(move |_: &EnvState, c: &ActionChunk| scores[c.step(0)[0] as usize])
    }

    fn indexed(n: usize) -> Vec<ActionChunk> {
        (0..n)
            .map(|i| ActionChunk::constant(&[i as f64, 0.0], 2).unwrap())
            .collect()
    }

    fn s0() -> EnvState {
        EnvState {
            proprio: vec![0.0, 0.0],
            goal: vec![1.0, 1.0],
            step_index: 0,
        }
    }

    #[test]
    fn selection_argmax_and_ties() {
        let sel = select_among(&fixed(vec![0.1, 0.9, 0.4]), &s0(), indexed(3)).unwrap();
        assert_eq!(sel.index, 1);
        let sel = select_among(&fixed(vec![0.5, 0.5, 0.5]), &s0(), indexed(3)).unwrap();
        assert_eq!(sel.index, 0);
        let sel = select_among(&fixed(vec![0.3]), &s0(), indexed(1)).unwrap();
        assert_eq!(sel.index, 0);
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // ranks (1,2,3) vs (1,3,2): 1 − 6·2/(3·8)
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn median_values() {
        assert_eq!(median(&[0.3, 0.1, 0.2]), 0.2);
        assert_eq!(median(&[0.4, 0.1, 0.2, 0.3]), 0.25);
    }

    #[test]
    fn perfect_and_reversed_rankers() {
        let w = MetricWeights::ones(2);
        let expert = ActionChunk::constant(&[0.0, 0.0], 2).unwrap();
        let cands: Vec<ActionChunk> = [0.3, 1.0, 0.1, 2.0]
            .iter()
            .map(|&v| ActionChunk::constant(&[v, -v], 2).unwrap())
            .collect();
        let heldout = vec![(s0(), expert.clone())];
        let e2 = expert.clone();
        let w2 = w.clone();
        let good = FnScorer(move |_: &EnvState, c: &ActionChunk| {
            -5.0 * weighted_distance(c, &e2, &w2).unwrap()
        });
        let r = rank_eval_on_sets(&good, &heldout, std::slice::from_ref(&cands), &w).unwrap();
        assert_eq!(r.top1_hit_rate, 1.0);
        assert!((r.spearman - 1.0).abs() < 1e-15);
        let e3 = expert.clone();
        let w3 = w.clone();
        let bad = FnScorer(move |_: &EnvState, c: &ActionChunk| {
            5.0 * weighted_distance(c, &e3, &w3).unwrap()
        });
        let r = rank_eval_on_sets(&bad, &heldout, &[cands], &w).unwrap();
        assert_eq!(r.top1_hit_rate, 0.0);
        assert!((r.spearman + 1.0).abs() < 1e-15);
    }

    #[test]
    fn rank_eval_requires_two() {
        let prop = ProposalPolicy::finite(vec![FiniteEntry {
            state: vec![0.0, 0.0],
            candidates: indexed(2),
            probs: vec![0.5, 0.5],
        }])
        .unwrap();
        let heldout = vec![(s0(), indexed(1).remove(0))];
        let r = rank_eval(
            &fixed(vec![0.0, 1.0]),
            &heldout,
            &prop,
            1,
            &MetricWeights::ones(2),
            false,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(r.is_err());
    }

    #[test]
    fn landscape_properties() {
        let gt = ActionChunk::full(vec![vec![0.2, -0.1], vec![0.4, 0.0], vec![0.1, 0.3]]).unwrap();
        let g2 = gt.clone();
        let w = MetricWeights::ones(2);
        let surface =
            FnScorer(move |_: &EnvState, c: &ActionChunk| 1.0 - 5.0 * weighted_distance(c, &g2, &w).unwrap());
        let spec = GridSpec {
            points: 7,
            half_width: 0.5,
            ..GridSpec::default()
        };
        let cand = vec![gt.map_valid(|_, _, v| v + 0.1).unwrap()];
        let l = landscape_grid(&surface, &s0(), &gt, &spec, &cand).unwrap();
        assert_eq!(l.cells.len(), 50);
        let best = argmax(&l.grid().iter().map(|c| c.q).collect::<Vec<_>>()).unwrap();
        assert_eq!(best, l.gt_index);
        assert_eq!(l.cells[l.gt_index].marker, "gt");
        assert_eq!(l.cells[l.gt_index].q_norm, 1.0);
        assert_eq!(l.cells[49].marker, "candidate");
        assert!(l.cells.iter().all(|c| (-1.0..=1.0).contains(&c.q_norm)));
        assert_eq!((l.cells[l.gt_index].x, l.cells[l.gt_index].y), (0.2, 0.4));

        let flat = FnScorer(|_: &EnvState, _: &ActionChunk| 3.0);
        let l = landscape_grid(&flat, &s0(), &gt, &spec, &[]).unwrap();
        assert!(l.cells.iter().all(|c| c.q_norm == 0.0));

        let one = GridSpec {
            points: 1,
            ..GridSpec::default()
        };
        let l = landscape_grid(&flat, &s0(), &gt, &one, &[]).unwrap();
        assert_eq!(l.cells.len(), 1);
        assert!(landscape_grid(&flat, &s0(), &gt, &GridSpec { points: 4, ..one.clone() }, &[]).is_err());
    }

    #[test]
    fn zero_budget_fails() {
        let env = make_env(&EnvConfig::pointmass()).unwrap();
        let demos = generate_demos(&env, 1, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let ds = crate::data::build_dataset(&demos, &Default::default(), 8, 1, 0.98).unwrap();
        let prop =
            crate::proposal::make_demo_proposal(&ds, 0.0, vec![0.0, 0.0], Default::default()).unwrap();
        let cfg = EvalConfig {
            max_steps: Some(0),
            episodes: 3,
            seeds: vec![0],
            ..EvalConfig::default()
        };
        let rows = success_rate(&env, &fixed(vec![0.0; 64]), &prop, &cfg).unwrap();
        assert_eq!(rows[0].sr, 0.0);
    }
}
