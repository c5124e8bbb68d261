//! Exact finite-state machinery for the chunked expected-max backup and
//! numerical verifiers for its contraction, policy-evaluation, monotonicity,
//! limit, and boundedness properties.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::env::{step_chunk, Env, GridWorld};
use crate::error::{invalid, Error, Result};
use crate::chunk::ActionChunk;
use crate::proposal::{check_distribution, FiniteEntry, ProposalPolicy};

/// Largest number of `(state, candidate)` pairs solved by direct factorization.
pub const DIRECT_SOLVE_LIMIT: usize = 200;
pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 200_000;
const KERNEL_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularCandidate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Discounted chunk reward `R_h(s, A)`.
    pub reward: f64,
    /// Dense `h`-step kernel row `P_h(· | s, A)`.
    pub next: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularSmdp {
    pub num_states: usize,
    pub candidates: Vec<Vec<TabularCandidate>>,
    /// Effective discount `γ^h`.
    pub gamma_h: f64,
}

impl TabularSmdp {
    pub fn validate(&self) -> Result<()> {
        if self.num_states == 0 || self.candidates.len() != self.num_states {
            return Err(invalid(format!(
                "{} candidate lists for {} states",
                self.candidates.len(),
                self.num_states
            )));
        }
        if !(0.0..1.0).contains(&self.gamma_h) {
            return Err(invalid(format!("gamma_h {} outside [0, 1)", self.gamma_h)));
        }
        for (s, cands) in self.candidates.iter().enumerate() {
            if cands.is_empty() {
                return Err(invalid(format!("state {s} has no candidates")));
            }
            for (a, c) in cands.iter().enumerate() {
                if !c.reward.is_finite() {
                    return Err(invalid(format!("reward ({s}, {a}) is not finite")));
                }
                if c.next.len() != self.num_states {
                    return Err(Error::ShapeMismatch(format!(
                        "kernel row ({s}, {a}) has {} entries",
                        c.next.len()
                    )));
                }
                if c.next.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                    return Err(invalid(format!("kernel row ({s}, {a}) has a negative entry")));
                }
                let total: f64 = c.next.iter().sum();
                if (total - 1.0).abs() > KERNEL_TOL {
                    return Err(invalid(format!(
                        "kernel row ({s}, {a}) sums to {total}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_pairs(&self) -> usize {
        self.candidates.iter().map(Vec::len).sum()
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.candidates
            .iter()
            .flatten()
            .map(|c| c.reward.abs())
            .fold(0.0, f64::max)
    }

    pub fn rewards(&self) -> QTable {
        QTable(
            self.candidates
                .iter()
                .map(|cs| cs.iter().map(|c| c.reward).collect())
                .collect(),
        )
    }

    fn pair_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.num_states + 1);
        let mut acc = 0;
        for cs in &self.candidates {
            offsets.push(acc);
            acc += cs.len();
        }
        offsets.push(acc);
        offsets
    }
}

/// Value per `(state, candidate)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTable(pub Vec<Vec<f64>>);

impl QTable {
    pub fn zeros(smdp: &TabularSmdp) -> Self {
        Self(smdp.candidates.iter().map(|c| vec![0.0; c.len()]).collect())
    }

    pub fn constant(smdp: &TabularSmdp, value: f64) -> Self {
        Self(smdp.candidates.iter().map(|c| vec![value; c.len()]).collect())
    }

    pub fn state(&self, s: usize) -> &[f64] {
        &self.0[s]
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.0[s][a]
    }

    pub fn sup_norm(&self) -> f64 {
        self.0.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max)
    }

    pub fn sup_distance(&self, other: &QTable) -> f64 {
        self.0
            .iter()
            .flatten()
            .zip(other.0.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self(
            self.0
                .iter()
                .map(|row| row.iter().map(|&v| f(v)).collect())
                .collect(),
        )
    }

    fn from_flat(smdp: &TabularSmdp, flat: &[f64]) -> Self {
        let offsets = smdp.pair_offsets();
        Self(
            (0..smdp.num_states)
                .map(|s| flat[offsets[s]..offsets[s + 1]].to_vec())
                .collect(),
        )
    }

    fn check_shape(&self, smdp: &TabularSmdp) -> Result<()> {
        let ok = self.0.len() == smdp.num_states
            && self
                .0
                .iter()
                .zip(&smdp.candidates)
                .all(|(q, c)| q.len() == c.len());
        if !ok {
            return Err(Error::ShapeMismatch("Q table does not match the SMDP".into()));
        }
        if self.0.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("Q table has non-finite entries"));
        }
        Ok(())
    }
}

/// Per-state sampling probabilities over that state's candidates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteProposal(pub Vec<Vec<f64>>);

impl FiniteProposal {
    pub fn uniform(smdp: &TabularSmdp) -> Self {
        Self(
            smdp.candidates
                .iter()
                .map(|c| vec![1.0 / c.len() as f64; c.len()])
                .collect(),
        )
    }

    pub fn validate(&self, smdp: &TabularSmdp) -> Result<()> {
        if self.0.len() != smdp.num_states {
            return Err(Error::ShapeMismatch("proposal has wrong state count".into()));
        }
        for (s, (p, c)) in self.0.iter().zip(&smdp.candidates).enumerate() {
            if p.len() != c.len() {
                return Err(Error::ShapeMismatch(format!(
                    "proposal row {s} has {} entries for {} candidates",
                    p.len(),
                    c.len()
                )));
            }
            check_distribution(p)?;
        }
        Ok(())
    }

    pub fn supported(&self, s: usize, a: usize) -> bool {
        self.0[s][a] > 0.0
    }
}

/// `(sorted position order, group boundaries)` over equal values.
fn value_groups(values: &[f64]) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut groups = Vec::new();
    let mut start = 0;
    for i in 1..=order.len() {
        if i == order.len() || values[order[i]] != values[order[start]] {
            groups.push((start, i));
            start = i;
        }
    }
    (order, groups)
}

fn check_inputs(values: &[f64], probs: &[f64], n: usize) -> Result<()> {
    if n == 0 {
        return Err(invalid("N must be at least 1"));
    }
    if values.len() != probs.len() {
        return Err(Error::ShapeMismatch("values and probabilities differ in length".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid("values must be finite"));
    }
    check_distribution(probs)
}

/// `E[max of N i.i.d. draws]`, grouping tied values.
pub fn expected_max_exact(values: &[f64], probs: &[f64], n: usize) -> Result<f64> {
    check_inputs(values, probs, n)?;
    Ok(expected_max_unchecked(values, probs, n))
}

fn expected_max_unchecked(values: &[f64], probs: &[f64], n: usize) -> f64 {
    let (order, groups) = value_groups(values);
    let total: f64 = probs.iter().sum();
    let mut cum = 0.0;
    let mut prev = 0.0;
    let mut out = 0.0;
    for &(lo, hi) in &groups {
        cum += order[lo..hi].iter().map(|&i| probs[i]).sum::<f64>();
        let f = (cum / total).powi(n as i32);
        out += values[order[lo]] * (f - prev);
        prev = f;
    }
    out
}

/// Probability that each candidate is the Best-of-N pick. Tied candidates
/// share their group's max-event probability in proportion to sampling mass.
pub fn selection_distribution(values: &[f64], probs: &[f64], n: usize) -> Result<Vec<f64>> {
    check_inputs(values, probs, n)?;
    Ok(selection_unchecked(values, probs, n))
}

fn selection_unchecked(values: &[f64], probs: &[f64], n: usize) -> Vec<f64> {
    let (order, groups) = value_groups(values);
    let total: f64 = probs.iter().sum();
    let mut sel = vec![0.0; values.len()];
    let mut cum = 0.0;
    let mut prev = 0.0;
    for &(lo, hi) in &groups {
        let mass: f64 = order[lo..hi].iter().map(|&i| probs[i]).sum();
        cum += mass;
        let f = (cum / total).powi(n as i32);
        if mass > 0.0 {
            for &i in &order[lo..hi] {
                sel[i] = (f - prev) * probs[i] / mass;
            }
        }
        prev = f;
    }
    sel
}

fn check_problem(smdp: &TabularSmdp, proposal: &FiniteProposal, q: &QTable) -> Result<()> {
    smdp.validate()?;
    proposal.validate(smdp)?;
    q.check_shape(smdp)
}

fn backup(smdp: &TabularSmdp, bootstrap: &[f64]) -> QTable {
    QTable(
        smdp.candidates
            .iter()
            .map(|cs| {
                cs.iter()
                    .map(|c| {
                        let next: f64 = c.next.iter().zip(bootstrap).map(|(p, v)| p * v).sum();
                        c.reward + smdp.gamma_h * next
                    })
                    .collect()
            })
            .collect(),
    )
}

fn emax_values(proposal: &FiniteProposal, q: &QTable, n: usize) -> Vec<f64> {
    q.0.iter()
        .zip(&proposal.0)
        .map(|(qs, ps)| expected_max_unchecked(qs, ps, n))
        .collect()
}

/// `(T Q)(s, A) = R_h(s, A) + γ^h Σ_{s'} P_h(s' | s, A) E[max_{i ≤ N} Q(s', A'_i)]`.
pub fn apply_operator(
    smdp: &TabularSmdp,
    proposal: &FiniteProposal,
    q: &QTable,
    n: usize,
) -> Result<QTable> {
    if n == 0 {
        return Err(invalid("N must be at least 1"));
    }
    check_problem(smdp, proposal, q)?;
    Ok(backup(smdp, &emax_values(proposal, q, n)))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FixedPointSolution {
    pub q: QTable,
    /// Sup-norm change per iteration.
    pub deltas: Vec<f64>,
}

impl FixedPointSolution {
    pub fn iterations(&self) -> usize {
        self.deltas.len()
    }

    /// Largest ratio of consecutive deltas over non-negligible steps.
    pub fn max_decay_ratio(&self) -> f64 {
        self.deltas
            .windows(2)
            .filter(|w| w[0] > 1e-9)
            .map(|w| w[1] / w[0])
            .fold(0.0, f64::max)
    }
}

fn iterate(
    smdp: &TabularSmdp,
    q0: QTable,
    tol: f64,
    max_iter: usize,
    step: impl Fn(&QTable) -> QTable,
) -> Result<FixedPointSolution> {
    if !(tol > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    q0.check_shape(smdp)?;
    let mut q = q0;
    let mut deltas = Vec::new();
    for _ in 0..max_iter {
        let next = step(&q);
        let delta = next.sup_distance(&q);
        deltas.push(delta);
        q = next;
        if delta <= tol {
            return Ok(FixedPointSolution { q, deltas });
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        last_delta: deltas.last().copied().unwrap_or(f64::INFINITY),
    })
}

/// Iterates the expected-max backup from `Q = 0`.
pub fn solve_fixed_point(
    smdp: &TabularSmdp,
    proposal: &FiniteProposal,
    n: usize,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointSolution> {
    solve_fixed_point_from(smdp, proposal, n, QTable::zeros(smdp), tol, max_iter)
}

pub fn solve_fixed_point_from(
    smdp: &TabularSmdp,
    proposal: &FiniteProposal,
    n: usize,
    q0: QTable,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointSolution> {
    if n == 0 {
        return Err(invalid("N must be at least 1"));
    }
    if !(tol > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    check_problem(smdp, proposal, &q0)?;
    iterate(smdp, q0, tol, max_iter, |q| {
        backup(smdp, &emax_values(proposal, q, n))
    })
}

/// Selection probabilities of the Best-of-N policy induced by `q`, per state.
pub fn induced_policy(proposal: &FiniteProposal, q: &QTable, n: usize) -> Vec<Vec<f64>> {
    q.0.iter()
        .zip(&proposal.0)
        .map(|(qs, ps)| selection_unchecked(qs, ps, n))
        .collect()
}

/// Value of a fixed stochastic chunk policy by direct linear solve.
pub fn evaluate_policy_linear(smdp: &TabularSmdp, policy: &[Vec<f64>]) -> Result<QTable> {
    let offsets = smdp.pair_offsets();
    let m = smdp.num_pairs();
    let mut a = DMatrix::<f64>::identity(m, m);
    let mut b = DVector::<f64>::zeros(m);
    for (s, cs) in smdp.candidates.iter().enumerate() {
        for (i, c) in cs.iter().enumerate() {
            let row = offsets[s] + i;
            b[row] = c.reward;
            for (sp, &p) in c.next.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for (j, &pi) in policy[sp].iter().enumerate() {
                    a[(row, offsets[sp] + j)] -= smdp.gamma_h * p * pi;
                }
            }
        }
    }
    let x = a
        .lu()
        .solve(&b)
        .ok_or_else(|| invalid("policy evaluation system is singular"))?;
    Ok(QTable::from_flat(smdp, x.as_slice()))
}

/// Value of a fixed stochastic chunk policy by iterating its Bellman equation.
pub fn evaluate_policy_iterative(
    smdp: &TabularSmdp,
    policy: &[Vec<f64>],
    tol: f64,
    max_iter: usize,
) -> Result<QTable> {
    iterate(smdp, QTable::zeros(smdp), tol, max_iter, |q| {
        let v: Vec<f64> = q
            .0
            .iter()
            .zip(policy)
            .map(|(qs, ps)| qs.iter().zip(ps).map(|(a, b)| a * b).sum())
            .collect();
        backup(smdp, &v)
    })
    .map(|s| s.q)
}

/// Exact value of the Best-of-N selection policy induced by `q`.
pub fn evaluate_induced_policy(
    smdp: &TabularSmdp,
    proposal: &FiniteProposal,
    q: &QTable,
    n: usize,
    tol: f64,
) -> Result<QTable> {
    if n == 0 {
        return Err(invalid("N must be at least 1"));
    }
    check_problem(smdp, proposal, q)?;
    let policy = induced_policy(proposal, q, n);
    if smdp.num_pairs() <= DIRECT_SOLVE_LIMIT {
        evaluate_policy_linear(smdp, &policy)
    } else {
        evaluate_policy_iterative(smdp, &policy, tol, DEFAULT_MAX_ITER)
    }
}

/// Optimal values when choices are restricted to positive-probability candidates.
pub fn support_optimal_q(
    smdp: &TabularSmdp,
    proposal: &FiniteProposal,
    tol: f64,
) -> Result<QTable> {
    let q0 = QTable::zeros(smdp);
    check_problem(smdp, proposal, &q0)?;
    iterate(smdp, q0, tol, DEFAULT_MAX_ITER, |q| {
        let v: Vec<f64> = q
            .0
            .iter()
            .zip(&proposal.0)
            .map(|(qs, ps)| {
                qs.iter()
                    .zip(ps)
                    .filter(|(_, p)| **p > 0.0)
                    .map(|(v, _)| *v)
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        backup(smdp, &v)
    })
    .map(|s| s.q)
}

pub const CONTRACTION_SLACK: f64 = 1e-12;
pub const MONOTONE_SLACK: f64 = 1e-10;

fn random_q<R: Rng + ?Sized>(smdp: &TabularSmdp, scale: f64, rng: &mut R) -> QTable {
    QTable(
        smdp.candidates
            .iter()
            .map(|c| (0..c.len()).map(|_| rng.random_range(-scale..scale)).collect())
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContractionReport {
    pub gamma_h: f64,
    pub trials: usize,
    /// Pairs with `Q1 == Q2` are skipped.
    pub skipped: usize,
    pub max_ratio: f64,
    pub violations: usize,
    pub pass: bool,
}

/// Random `Q` pairs must satisfy `‖TQ1 − TQ2‖∞ ≤ γ^h ‖Q1 − Q2‖∞ + 1e-12`.
pub fn verify_contraction<R: Rng + ?Sized>(
    smdp: &TabularSmdp,
    proposal: &FiniteProposal,
    n: usize,
    trials: usize,
    rng: &mut R,
) -> Result<ContractionReport> {
    let mut pairs = Vec::with_capacity(trials);
    for t in 0..trials {
        let scale = 10f64.powi((t % 5) as i32 - 2);
        let q1 = random_q(smdp, scale * 10.0, rng);
        let q2 = if t % 7 == 3 {
            let c = rng.random_range(-5.0..5.0);
            q1.map(|v| v + c)
        } else {
            random_q(smdp, scale * 10.0, rng)
        };
        pairs.push((q1, q2));
    }
    contraction_on_pairs(smdp, proposal, n, &pairs)
}

pub fn contraction_on_pairs(
    smdp: &TabularSmdp,
    proposal: &FiniteProposal,
    n: usize,
    pairs: &[(QTable, QTable)],
) -> Result<ContractionReport> {
    let mut report = ContractionReport {
        gamma_h: smdp.gamma_h,
        trials: pairs.len(),
        skipped: 0,
        max_ratio: 0.0,
        violations: 0,
        pass: true,
    };
    for (q1, q2) in pairs {
        let gap = q1.sup_distance(q2);
        if gap == 0.0 {
            report.skipped += 1;
            continue;
        }
        let t1 = apply_operator(smdp, proposal, q1, n)?;
        let t2 = apply_operator(smdp, proposal, q2, n)?;
        let out = t1.sup_distance(&t2);
        report.max_ratio = report.max_ratio.max(out / gap);
        if out > smdp.gamma_h * gap + CONTRACTION_SLACK {
            report.violations += 1;
        }
    }
    report.pass = report.violations == 0;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub ns: Vec<usize>,
    /// Smallest `Q^{N'} − Q^{N}` over supported pairs and `N' > N`.
    pub min_slack: f64,
    pub pass: bool,
}

pub fn verify_monotonicity(
    smdp: &TabularSmdp,
    proposal: &FiniteProposal,
    ns: &[usize],
    tol: f64,
) -> Result<MonotonicityReport> {
    let mut ns = ns.to_vec();
    ns.sort_unstable();
    ns.dedup();
    let solutions = ns
        .iter()
        .map(|&n| solve_fixed_point(smdp, proposal, n, tol, DEFAULT_MAX_ITER).map(|s| s.q))
        .collect::<Result<Vec<_>>>()?;
    let mut min_slack = f64::INFINITY;
    for i in 0..solutions.len() {
        for j in i + 1..solutions.len() {
            for s in 0..smdp.num_states {
                for a in 0..smdp.candidates[s].len() {
                    if proposal.supported(s, a) {
                        min_slack =
                            min_slack.min(solutions[j].get(s, a) - solutions[i].get(s, a));
                    }
                }
            }
        }
    }
    Ok(MonotonicityReport {
        pass: !(min_slack < -MONOTONE_SLACK),
        ns,
        min_slack,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LimitReport {
    pub ns: Vec<usize>,
    /// `‖Q_μ^N − Q*_supp‖∞` for each `N`.
    pub gaps: Vec<f64>,
    pub non_increasing: bool,
    pub final_gap: f64,
    pub threshold: f64,
    pub pass: bool,
    pub note: String,
}

/// Gaps to the support-restricted optimum over `N = 1, 2, 4, …, ≤ n_max`.
pub fn verify_limit(
    smdp: &TabularSmdp,
    proposal: &FiniteProposal,
    n_max: usize,
    threshold: f64,
    tol: f64,
) -> Result<LimitReport> {
    if n_max == 0 {
        return Err(invalid("n_max must be at least 1"));
    }
    let optimum = support_optimal_q(smdp, proposal, tol)?;
    let ns: Vec<usize> = std::iter::successors(Some(1usize), |n| Some(n * 2))
        .take_while(|&n| n <= n_max)
        .collect();
    let gaps = ns
        .iter()
        .map(|&n| {
            solve_fixed_point(smdp, proposal, n, tol, DEFAULT_MAX_ITER)
                .map(|s| s.q.sup_distance(&optimum))
        })
        .collect::<Result<Vec<_>>>()?;
    // Both sides carry solver error of order tol / (1 - γ^h).
    let noise = 4.0 * tol / (1.0 - smdp.gamma_h);
    let non_increasing = gaps.windows(2).all(|w| w[1] <= w[0] + noise);
    let final_gap = *gaps.last().expect("at least one N");
    Ok(LimitReport {
        pass: non_increasing && final_gap <= threshold,
        ns,
        gaps,
        non_increasing,
        final_gap,
        threshold,
        note: "discrete proposal: the limit is the max over the proposal support; \
               the no-ties/continuous-density regularity condition is not enforced"
            .into(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundednessReport {
    pub r_max: f64,
    pub trials: usize,
    /// Smallest `R_max + γ^h‖Q‖∞ − ‖TQ‖∞`.
    pub min_slack: f64,
    pub pass: bool,
}

/// Random `Q` must satisfy `‖TQ‖∞ ≤ R_max + γ^h ‖Q‖∞` with `R_max = max |R_h|`.
pub fn verify_boundedness<R: Rng + ?Sized>(
    smdp: &TabularSmdp,
    proposal: &FiniteProposal,
    n: usize,
    trials: usize,
    rng: &mut R,
) -> Result<BoundednessReport> {
    let r_max = smdp.max_abs_reward();
    let mut min_slack = f64::INFINITY;
    for t in 0..trials {
        let q = match t {
            0 => QTable::zeros(smdp),
            1 => QTable::constant(smdp, 3.0),
            _ => random_q(smdp, 10f64.powi((t % 4) as i32 - 1), rng),
        };
        let tq = apply_operator(smdp, proposal, &q, n)?;
        min_slack = min_slack.min(r_max + smdp.gamma_h * q.sup_norm() - tq.sup_norm());
    }
    Ok(BoundednessReport {
        r_max,
        trials,
        pass: !(min_slack < -CONTRACTION_SLACK),
        min_slack,
    })
}

/// A reviewable verification instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularFixture {
    pub name: String,
    pub smdp: TabularSmdp,
    pub proposal: FiniteProposal,
}

impl TabularFixture {
    pub fn validate(&self) -> Result<()> {
        self.smdp.validate()?;
        self.proposal.validate(&self.smdp)
    }
}

/// One state, two self-looping chunks with rewards 0 and 1, uniform proposal, `γ^h = 0.5`.
pub fn two_chunk_fixture() -> TabularFixture {
    let smdp = TabularSmdp {
        num_states: 1,
        candidates: vec![vec![
            TabularCandidate {
                label: Some("A1".into()),
                reward: 0.0,
                next: vec![1.0],
            },
            TabularCandidate {
                label: Some("A2".into()),
                reward: 1.0,
                next: vec![1.0],
            },
        ]],
        gamma_h: 0.5,
    };
    let proposal = FiniteProposal::uniform(&smdp);
    TabularFixture {
        name: "two-chunk".into(),
        smdp,
        proposal,
    }
}

/// Random SMDP with dense random kernels, rewards in `[-1, 1]`, and proposals
/// that occasionally leave candidates unsupported.
pub fn random_fixture<R: Rng + ?Sized>(
    rng: &mut R,
    max_states: usize,
    max_candidates: usize,
    gamma_h: f64,
) -> TabularFixture {
    let num_states = rng.random_range(1..=max_states);
    let candidates: Vec<Vec<TabularCandidate>> = (0..num_states)
        .map(|_| {
            let k = rng.random_range(1..=max_candidates);
            (0..k)
                .map(|_| {
                    let raw: Vec<f64> = (0..num_states)
                        .map(|_| {
                            if rng.random_bool(0.3) {
                                0.0
                            } else {
                                rng.random::<f64>()
                            }
                        })
                        .collect();
                    let mut next = raw.clone();
                    let total: f64 = raw.iter().sum();
                    if total == 0.0 {
                        next[rng.random_range(0..num_states)] = 1.0;
                    } else {
                        next.iter_mut().for_each(|p| *p /= total);
                    }
                    TabularCandidate {
                        label: None,
                        reward: rng.random_range(-1.0..=1.0),
                        next,
                    }
                })
                .collect()
        })
        .collect();
    let probs = candidates
        .iter()
        .map(|cs: &Vec<TabularCandidate>| {
            let mut raw: Vec<f64> = (0..cs.len()).map(|_| rng.random_range(0.05..1.0)).collect();
            if cs.len() > 1 && rng.random_bool(0.25) {
                let drop = rng.random_range(0..cs.len());
                raw[drop] = 0.0;
            }
            let total: f64 = raw.iter().sum();
            raw.iter().map(|p| p / total).collect()
        })
        .collect();
    TabularFixture {
        name: format!("random-{num_states}s"),
        smdp: TabularSmdp {
            num_states,
            candidates,
            gamma_h,
        },
        proposal: FiniteProposal(probs),
    }
}

/// Converts a gridworld plus a finite chunk proposal into a tabular SMDP. The
/// goal cell becomes an absorbing zero-reward state with a single null chunk.
pub fn from_gridworld(
    env: &Env,
    policy: &ProposalPolicy,
    gamma: f64,
) -> Result<TabularFixture> {
    let Env::GridWorld(grid) = env else {
        return Err(invalid("tabular conversion needs a gridworld"));
    };
    let ProposalPolicy::Finite { entries } = policy else {
        return Err(invalid("tabular conversion needs a finite proposal"));
    };
    let h = policy
        .horizon()
        .ok_or_else(|| invalid("finite proposal has no candidates"))?;
    if env.max_steps() < h {
        return Err(invalid("max_steps must cover one full chunk"));
    }
    let n = grid.num_cells();
    let goal = grid.cell_index(grid.goal_cell());
    let mut candidates = vec![Vec::new(); n];
    let mut probs = vec![Vec::new(); n];
    for s in 0..n {
        let size = env.config().grid_size as i64;
        let cell = (s as i64 % size, s as i64 / size);
        if s == goal {
            let mut next = vec![0.0; n];
            next[goal] = 1.0;
            candidates[s].push(TabularCandidate {
                label: Some("absorb".into()),
                reward: 0.0,
                next,
            });
            probs[s].push(1.0);
            continue;
        }
        let state = grid.state_at(cell, 0);
        let entry = entries
            .iter()
            .find(|e| e.state.len() == 2 && (e.state[0].round() as i64, e.state[1].round() as i64) == cell)
            .ok_or_else(|| Error::OutsideSupport(format!("{cell:?}")))?;
        for (chunk, &p) in entry.candidates.iter().zip(&entry.probs) {
            let t = step_chunk(env, &state, chunk, chunk.valid_len())?;
            let mut next = vec![0.0; n];
            next[grid.cell_index(GridWorld::cell_of(&t.next_state))] = 1.0;
            candidates[s].push(TabularCandidate {
                label: None,
                reward: crate::env::chunk_return(&t.rewards, gamma)?,
                next,
            });
            probs[s].push(p);
        }
    }
    let fixture = TabularFixture {
        name: format!("gridworld-{}x{}", env.config().grid_size, env.config().grid_size),
        smdp: TabularSmdp {
            num_states: n,
            candidates,
            gamma_h: gamma.powi(h as i32),
        },
        proposal: FiniteProposal(probs),
    };
    fixture.validate()?;
    Ok(fixture)
}

/// 4×4 gridworld with six constant and turning two-step chunks per cell.
pub fn gridworld_fixture() -> Result<TabularFixture> {
    let mut cfg = crate::env::EnvConfig::gridworld(4);
    cfg.max_steps = 64;
    let env = crate::env::make_env(&cfg)?;
    let moves: [[[f64; 2]; 2]; 6] = [
        [[1.0, 0.0], [1.0, 0.0]],
        [[0.0, 1.0], [0.0, 1.0]],
        [[1.0, 0.0], [0.0, 1.0]],
        [[-1.0, 0.0], [-1.0, 0.0]],
        [[0.0, -1.0], [0.0, -1.0]],
        [[0.0, 0.0], [0.0, 0.0]],
    ];
    let candidates = moves
        .iter()
        .map(|m| ActionChunk::full(m.iter().map(|a| a.to_vec()).collect()))
        .collect::<Result<Vec<_>>>()?;
    let probs = vec![0.15, 0.15, 0.1, 0.25, 0.25, 0.1];
    let entries = (0..4)
        .flat_map(|y| (0..4).map(move |x| (x, y)))
        .map(|(x, y)| FiniteEntry {
            state: vec![x as f64, y as f64],
            candidates: candidates.clone(),
            probs: probs.clone(),
        })
        .collect();
    from_gridworld(&env, &ProposalPolicy::finite(entries)?, 0.9)
}

/// Random five-state instance with `γ^h = 0.99` and uniform proposals.
pub fn high_discount_fixture() -> TabularFixture {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let mut f = random_fixture(&mut rng, 5, 4, 0.99);
    f.proposal = FiniteProposal::uniform(&f.smdp);
    f.name = "high-discount".into();
    f
}

/// The shipped verification fixtures.
pub fn standard_fixtures() -> Result<Vec<TabularFixture>> {
    Ok(vec![
        two_chunk_fixture(),
        gridworld_fixture()?,
        high_discount_fixture(),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn expected_max_examples() {
        let v = [0.0, 1.0, 2.0];
        let p = [0.2, 0.3, 0.5];
        assert!((expected_max_exact(&v, &p, 1).unwrap() - 1.3).abs() < 1e-15);
        // 1·(0.5³ − 0.2³) + 2·(1 − 0.5³)
        assert!((expected_max_exact(&v, &p, 3).unwrap() - 1.867).abs() < 1e-12);
        for n in [1, 4, 17] {
            assert_eq!(expected_max_exact(&[2.5; 3], &p, n).unwrap(), 2.5);
        }
        assert!(expected_max_exact(&v, &[0.5, 0.5, 0.5], 1).is_err());
        assert!(expected_max_exact(&v, &p, 0).is_err());
    }

    #[test]
    fn selection_examples() {
        assert_eq!(selection_distribution(&[3.0], &[1.0], 5).unwrap(), vec![1.0]);
        let s = selection_distribution(&[0.0, 1.0], &[0.5, 0.5], 2).unwrap();
        assert!((s[0] - 0.25).abs() < 1e-15 && (s[1] - 0.75).abs() < 1e-15);
        for n in [1, 3, 9] {
            let s = selection_distribution(&[1.0, 1.0], &[0.3, 0.7], n).unwrap();
            assert!((s[0] - 0.3).abs() < 1e-15 && (s[1] - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn myopic_operator() {
        let mut f = random_fixture(&mut ChaCha8Rng::seed_from_u64(1), 5, 4, 0.0);
        f.smdp.gamma_h = 0.0;
        let q = random_q(&f.smdp, 3.0, &mut ChaCha8Rng::seed_from_u64(2));
        let tq = apply_operator(&f.smdp, &f.proposal, &q, 3).unwrap();
        assert_eq!(tq, f.smdp.rewards());
        let qpi = evaluate_induced_policy(&f.smdp, &f.proposal, &q, 3, 1e-12).unwrap();
        assert!(qpi.sup_distance(&f.smdp.rewards()) < 1e-15);
    }

    #[test]
    fn two_chunk_first_iteration() {
        let f = two_chunk_fixture();
        let q = QTable::zeros(&f.smdp);
        let tq = apply_operator(&f.smdp, &f.proposal, &q, 1).unwrap();
        assert_eq!(tq.0, vec![vec![0.0, 1.0]]);
    }

    #[test]
    fn two_chunk_fixed_points() {
        let f = two_chunk_fixture();
        // N=1: v = 0.5 + 0.5 v; N=2: v = 0.25·0 + 0.75·1 + 0.5 v (max of two uniform draws)
        for (n, expected) in [(1, [0.5, 1.5]), (2, [0.75, 1.75]), (64, [1.0, 2.0])] {
            let sol = solve_fixed_point(&f.smdp, &f.proposal, n, 1e-12, 1000).unwrap();
            assert!((sol.q.get(0, 0) - expected[0]).abs() < 1e-10, "N={n}");
            assert!((sol.q.get(0, 1) - expected[1]).abs() < 1e-10, "N={n}");
        }
    }

    #[test]
    fn geometric_decay_iteration_count() {
        let f = two_chunk_fixture();
        let sol = solve_fixed_point(&f.smdp, &f.proposal, 1, 1e-12, 1000).unwrap();
        assert!(sol.iterations() <= 45, "{}", sol.iterations());
        assert!(sol.max_decay_ratio() <= 0.5 + 1e-9);
        assert!(solve_fixed_point(&f.smdp, &f.proposal, 1, 0.0, 10).is_err());
        assert!(matches!(
            solve_fixed_point(&f.smdp, &f.proposal, 1, 1e-12, 3),
            Err(Error::NonConvergence { iterations: 3, .. })
        ));
    }

    #[test]
    fn support_optimum_two_chunk() {
        let f = two_chunk_fixture();
        let q = support_optimal_q(&f.smdp, &f.proposal, 1e-12).unwrap();
        assert!((q.get(0, 0) - 1.0).abs() < 1e-10 && (q.get(0, 1) - 2.0).abs() < 1e-10);
        // excluding A2 from the support leaves only A1 to choose
        let p = FiniteProposal(vec![vec![1.0, 0.0]]);
        let q = support_optimal_q(&f.smdp, &p, 1e-12).unwrap();
        assert!((q.get(0, 0) - 0.0).abs() < 1e-10 && (q.get(0, 1) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn induced_policy_value_matches_fixed_point() {
        let f = two_chunk_fixture();
        for n in [1, 2, 5] {
            let sol = solve_fixed_point(&f.smdp, &f.proposal, n, 1e-13, 10_000).unwrap();
            let qpi = evaluate_induced_policy(&f.smdp, &f.proposal, &sol.q, n, 1e-13).unwrap();
            assert!(qpi.sup_distance(&sol.q) < 1e-8);
        }
    }

    #[test]
    fn linear_and_iterative_evaluation_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let f = random_fixture(&mut rng, 6, 4, 0.9);
            let q = random_q(&f.smdp, 2.0, &mut rng);
            let pol = induced_policy(&f.proposal, &q, 3);
            let a = evaluate_policy_linear(&f.smdp, &pol).unwrap();
            let b = evaluate_policy_iterative(&f.smdp, &pol, 1e-13, 100_000).unwrap();
            assert!(a.sup_distance(&b) < 1e-10);
        }
    }

    #[test]
    fn contraction_constant_offset_ratio() {
        let f = random_fixture(&mut ChaCha8Rng::seed_from_u64(5), 4, 3, 0.9);
        let q1 = random_q(&f.smdp, 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        let q2 = q1.map(|v| v + 0.75);
        let r = contraction_on_pairs(&f.smdp, &f.proposal, 4, &[(q1.clone(), q2), (q1.clone(), q1)])
            .unwrap();
        assert_eq!(r.skipped, 1);
        assert!((r.max_ratio - 0.9).abs() < 1e-12);
        assert!(r.pass);
    }

    #[test]
    fn verifiers_on_two_chunk() {
        let f = two_chunk_fixture();
        let m = verify_monotonicity(&f.smdp, &f.proposal, &[1, 2], 1e-12).unwrap();
        assert!(m.pass && (m.min_slack - 0.25).abs() < 1e-9);
        assert!(verify_monotonicity(&f.smdp, &f.proposal, &[1], 1e-12).unwrap().pass);

        let l = verify_limit(&f.smdp, &f.proposal, 16, 1e-3, 1e-12).unwrap();
        assert_eq!(l.ns, vec![1, 2, 4, 8, 16]);
        assert!(l.gaps.windows(2).all(|w| w[1] < w[0]));
        let single = verify_limit(&f.smdp, &f.proposal, 1, 1.0, 1e-12).unwrap();
        assert_eq!(single.gaps.len(), 1);

        let det = FiniteProposal(vec![vec![0.0, 1.0]]);
        let l = verify_limit(&f.smdp, &det, 4, 1e-9, 1e-12).unwrap();
        assert!(l.gaps[0] < 1e-9);

        let b =
            verify_boundedness(&f.smdp, &f.proposal, 3, 20, &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap();
        assert!(b.pass && b.r_max == 1.0);
    }

    #[test]
    fn single_candidate_monotone_equality() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut f = random_fixture(&mut rng, 4, 1, 0.8);
        f.proposal = FiniteProposal::uniform(&f.smdp);
        let a = solve_fixed_point(&f.smdp, &f.proposal, 1, 1e-12, 10_000).unwrap().q;
        let b = solve_fixed_point(&f.smdp, &f.proposal, 9, 1e-12, 10_000).unwrap().q;
        assert!(a.sup_distance(&b) < 1e-10);
        let opt = support_optimal_q(&f.smdp, &f.proposal, 1e-12).unwrap();
        assert!(opt.sup_distance(&a) < 1e-10);
    }

    #[test]
    fn shipped_fixtures_converge_and_agree() {
        for f in standard_fixtures().unwrap() {
            f.validate().unwrap();
            for n in [1, 3] {
                let sol = solve_fixed_point(&f.smdp, &f.proposal, n, 1e-12, DEFAULT_MAX_ITER).unwrap();
                let qpi = evaluate_induced_policy(&f.smdp, &f.proposal, &sol.q, n, 1e-13).unwrap();
                assert!(qpi.sup_distance(&sol.q) <= 1e-8, "{} N={n}", f.name);
            }
        }
        let g = gridworld_fixture().unwrap();
        assert_eq!(g.smdp.num_states, 16);
        // the goal cell absorbs with zero reward
        assert_eq!(g.smdp.candidates[15].len(), 1);
        assert_eq!(g.smdp.candidates[15][0].reward, 0.0);
        // from (2, 3) moving right reaches the goal on the first step: reward 1, then nothing
        let right = &g.smdp.candidates[14][0];
        assert_eq!(right.next[15], 1.0);
        assert_eq!(right.reward, 1.0);
    }

    #[test]
    fn corrupted_kernel_rejected() {
        let mut f = two_chunk_fixture();
        f.smdp.candidates[0][1].next = vec![0.9];
        assert!(f.validate().is_err());
    }

    #[test]
    fn initialization_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let f = random_fixture(&mut rng, 6, 4, 0.9);
        let tol = 1e-11;
        let a = solve_fixed_point(&f.smdp, &f.proposal, 3, tol, 100_000).unwrap().q;
        let q0 = random_q(&f.smdp, 50.0, &mut rng);
        let b = solve_fixed_point_from(&f.smdp, &f.proposal, 3, q0, tol, 100_000).unwrap().q;
        assert!(a.sup_distance(&b) <= 2.0 * tol / (1.0 - 0.9));
    }

    #[test]
    fn fixture_json_round_trip() {
        let f = random_fixture(&mut ChaCha8Rng::seed_from_u64(2), 3, 3, 0.5);
        let s = serde_json::to_string(&f).unwrap();
        let back: TabularFixture = serde_json::from_str(&s).unwrap();
        assert_eq!(back, f);
    }

    proptest! {
        #[test]
        fn expected_max_monotone_in_n(
            values in prop::collection::vec(-5.0f64..5.0, 1..6),
            raw in prop::collection::vec(0.01f64..1.0, 6),
            n in 1usize..20,
        ) {
            let k = values.len();
            let total: f64 = raw[..k].iter().sum();
            let probs: Vec<f64> = raw[..k].iter().map(|p| p / total).collect();
            let a = expected_max_exact(&values, &probs, n).unwrap();
            let b = expected_max_exact(&values, &probs, n + 1).unwrap();
            prop_assert!(b >= a - 1e-12);
            let sel = selection_distribution(&values, &probs, n).unwrap();
            prop_assert!((sel.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let via_sel: f64 = sel.iter().zip(&values).map(|(s, v)| s * v).sum();
            prop_assert!((via_sel - a).abs() < 1e-10);
        }

        #[test]
        fn expected_max_non_expansive(
            u in prop::collection::vec(-5.0f64..5.0, 4),
            dv in prop::collection::vec(-1.0f64..1.0, 4),
            raw in prop::collection::vec(0.01f64..1.0, 4),
            n in 1usize..12,
        ) {
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
            let v: Vec<f64> = u.iter().zip(&dv).map(|(a, b)| a + b).collect();
            let gap = dv.iter().map(|d| d.abs()).fold(0.0, f64::max);
            let a = expected_max_exact(&u, &probs, n).unwrap();
            let b = expected_max_exact(&v, &probs, n).unwrap();
            prop_assert!((a - b).abs() <= gap + 1e-12);
        }

        #[test]
        fn random_smdps_contract(seed in 0u64..1000, g in 0usize..3) {
            let gamma_h = [0.5, 0.9, 0.98][g];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_fixture(&mut rng, 6, 4, gamma_h);
            let r = verify_contraction(&f.smdp, &f.proposal, 1 + (seed as usize % 8), 5, &mut rng).unwrap();
            prop_assert!(r.pass, "max ratio {}", r.max_ratio);
        }
    }
}
