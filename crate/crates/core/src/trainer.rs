//! Twin-critic training with Best-of-N TD targets, Polyak-averaged target
//! networks, and either the geometric regularizer or a CQL-style penalty.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chunk::ActionChunk;
use crate::critic::{
    read_tensor_file, tensor_checksum, write_tensor_file, ContextFeatures, CriticConfig,
    CriticInput, CriticParams, TwinCritic,
};
use crate::data::OfflineDataset;
use crate::env::{chunk_return, ChunkTransition};
use crate::error::{invalid, Error, Result};
use crate::geometry::{egr_loss_from_scores, sample_rank_pairs, EgrConfig, MetricWeights};
use crate::proposal::{sample_candidates, sample_ood, OodSamplerConfig, ProposalPolicy};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// TD plus the geometric regularizer (weight `egr.lambda`).
    #[default]
    None,
    /// TD plus the CQL-lite penalty; the geometric regularizer is off.
    Cql,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub tau: f64,
    pub gamma: f64,
    pub h: usize,
    /// Candidates per TD target.
    pub n_train: usize,
    pub egr: EgrConfig,
    pub ood: OodSamplerConfig,
    pub baseline: Baseline,
    pub cql_alpha: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Checkpoint period in steps; 0 writes only the final state.
    pub checkpoint_every: usize,
    /// `horizon`, `action_dim`, and `proprio_dim` are taken from the data.
    pub critic: CriticConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            warmup_steps: 1000,
            steps: 12_000,
            batch_size: 32,
            grad_clip: 10.0,
            tau: 0.005,
            gamma: 0.98,
            h: 32,
            n_train: 8,
            egr: EgrConfig::default(),
            ood: OodSamplerConfig::default(),
            baseline: Baseline::None,
            cql_alpha: 5.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 0,
            critic: CriticConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("train.lr must be > 0"));
        }
        if self.batch_size == 0 || self.h == 0 || self.n_train == 0 {
            return Err(invalid("train.batch_size, train.h and train.n_train must be >= 1"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(invalid("train.grad_clip must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(invalid("train.tau must lie in [0, 1]"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(invalid("train.gamma must lie in (0, 1)"));
        }
        if !(self.cql_alpha >= 0.0 && self.cql_alpha.is_finite()) {
            return Err(invalid("train.cql_alpha must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.adam_eps > 0.0)
        {
            return Err(invalid("adam betas must lie in [0, 1) and eps must be > 0"));
        }
        self.egr.validate()?;
        self.ood.validate()?;
        Ok(())
    }

    /// `lr · min(1, step / warmup)` for the 1-based optimizer step.
    pub fn effective_lr(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    pub fn critic_config(&self, action_dim: usize, proprio_dim: usize) -> CriticConfig {
        CriticConfig {
            horizon: self.h,
            action_dim,
            proprio_dim,
            ..self.critic.clone()
        }
    }

    fn uses_egr(&self) -> bool {
        self.baseline == Baseline::None && self.egr.lambda > 0.0
    }

    fn needs_ood(&self) -> bool {
        self.uses_egr() || self.baseline == Baseline::Cql
    }
}

/// `R_h` if terminal, else `R_h + γ^h · max_i score_i`.
pub fn td_target_from_scores(r_h: f64, gamma_h: f64, terminal: bool, scores: &[f64]) -> f64 {
    if terminal || scores.is_empty() {
        r_h
    } else {
        r_h + gamma_h * scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Best-of-N bootstrap target with per-candidate min over the target twins.
pub fn td_target<R: Rng + ?Sized>(
    transition: &ChunkTransition,
    target: &TwinCritic,
    proposal: &ProposalPolicy,
    n: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<f64> {
    if n == 0 {
        return Err(invalid("N must be at least 1"));
    }
    let r_h = chunk_return(&transition.rewards, gamma)?;
    if transition.terminal {
        return Ok(r_h);
    }
    let candidates = sample_candidates(proposal, &transition.next_state, n, rng)?;
    let scores = target.min_scores(&transition.next_state, &candidates)?;
    let gamma_h = gamma.powi(transition.chunk.horizon() as i32);
    Ok(td_target_from_scores(r_h, gamma_h, false, &scores))
}

/// One minibatch element with everything the losses need precomputed.
#[derive(Clone, Debug)]
pub struct BatchItem<'a> {
    pub transition: &'a ChunkTransition,
    pub context: ContextFeatures,
    /// Detached TD target.
    pub target: f64,
    /// Off-demonstration candidates for the regularizer or penalty.
    pub ood: Vec<ActionChunk>,
    pub pairs: Vec<(usize, usize)>,
}

impl<'a> BatchItem<'a> {
    fn input(&self) -> CriticInput<'_> {
        CriticInput {
            context: &self.context,
            proprio: &self.transition.state.proprio,
            chunk: &self.transition.chunk,
        }
    }

    fn ood_input<'b>(&'b self, chunk: &'b ActionChunk) -> CriticInput<'b> {
        CriticInput {
            context: &self.context,
            proprio: &self.transition.state.proprio,
            chunk,
        }
    }
}

/// Mean squared TD error of one critic and its gradient.
pub fn td_loss_single(critic: &CriticParams, batch: &[BatchItem]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let b = batch.len() as f64;
    let mut grad = vec![0.0; critic.len()];
    let mut loss = 0.0;
    for item in batch {
        let q = critic.forward(&item.input())?;
        let r = q - item.target;
        loss += r * r / b;
        critic.accumulate_grad(&item.input(), 2.0 * r / b, &mut grad)?;
    }
    Ok((loss, grad))
}

/// TD loss summed over both twins.
pub fn td_loss(online: &TwinCritic, batch: &[BatchItem]) -> Result<(f64, [Vec<f64>; 2])> {
    let (l1, g1) = td_loss_single(&online.first, batch)?;
    let (l2, g2) = td_loss_single(&online.second, batch)?;
    Ok((l1 + l2, [g1, g2]))
}

/// `alpha · mean_b[ mean_ood Q(s, Â) − Q(s, A_data) ]`.
pub fn cql_penalty(
    critic: &CriticParams,
    batch: &[BatchItem],
    alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let b = batch.len() as f64;
    let mut grad = vec![0.0; critic.len()];
    let mut total = 0.0;
    for item in batch {
        if item.ood.is_empty() {
            return Err(invalid("penalty needs at least one ood sample per state"));
        }
        let m = item.ood.len() as f64;
        let mut ood_mean = 0.0;
        for chunk in &item.ood {
            ood_mean += critic.accumulate_grad(&item.ood_input(chunk), alpha / (b * m), &mut grad)? / m;
        }
        let q_data = critic.accumulate_grad(&item.input(), -alpha / b, &mut grad)?;
        total += alpha * (ood_mean - q_data) / b;
    }
    Ok((total, grad))
}

/// Batch-mean regularizer `(anchor, rank, anchor + η·rank)` of one critic
/// with the gradient of the combined term.
pub fn egr_term(
    critic: &CriticParams,
    batch: &[BatchItem],
    config: &EgrConfig,
    weights: &MetricWeights,
) -> Result<(f64, f64, f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let b = batch.len() as f64;
    let mut grad = vec![0.0; critic.len()];
    let (mut anchor, mut rank, mut total) = (0.0, 0.0, 0.0);
    for item in batch {
        let q = item
            .ood
            .iter()
            .map(|c| critic.forward(&item.ood_input(c)))
            .collect::<Result<Vec<_>>>()?;
        let br = egr_loss_from_scores(
            &item.transition.chunk,
            item.target,
            &item.ood,
            &q,
            &item.pairs,
            config,
            weights,
        )?;
        anchor += br.anchor / b;
        rank += br.rank / b;
        total += br.total / b;
        for (chunk, dq) in item.ood.iter().zip(&br.grad_q) {
            critic.accumulate_grad(&item.ood_input(chunk), dq / b, &mut grad)?;
        }
    }
    Ok((anchor, rank, total, grad))
}

/// Loss components summed over both twins.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub td: f64,
    pub egr_anchor: f64,
    pub egr_rank: f64,
    pub egr: f64,
    pub cql: f64,
    pub total: f64,
}

/// `L_TD + λ·L_EGR` or `L_TD + L_CQL` depending on `config.baseline`.
pub fn total_loss(
    online: &TwinCritic,
    batch: &[BatchItem],
    config: &TrainConfig,
    weights: &MetricWeights,
) -> Result<(LossBreakdown, [Vec<f64>; 2])> {
    let mut out = LossBreakdown::default();
    let mut grads = [Vec::new(), Vec::new()];
    for (slot, critic) in grads.iter_mut().zip(online.twins()) {
        let (td, mut g) = td_loss_single(critic, batch)?;
        out.td += td;
        if config.uses_egr() {
            let (a, r, t, ge) = egr_term(critic, batch, &config.egr, weights)?;
            out.egr_anchor += a;
            out.egr_rank += r;
            out.egr += t;
            g.iter_mut()
                .zip(&ge)
                .for_each(|(x, y)| *x += config.egr.lambda * y);
        } else if config.baseline == Baseline::Cql {
            let (c, gc) = cql_penalty(critic, batch, config.cql_alpha)?;
            out.cql += c;
            g.iter_mut().zip(&gc).for_each(|(x, y)| *x += y);
        }
        *slot = g;
    }
    let lambda = if config.uses_egr() { config.egr.lambda } else { 0.0 };
    out.total = out.td + lambda * out.egr + out.cql;
    Ok((out, grads))
}

/// `target ← (1 − tau)·target + tau·online`.
pub fn polyak_update(target: &mut [f64], online: &[f64], tau: f64) -> Result<()> {
    if target.len() != online.len() {
        return Err(Error::ShapeMismatch("polyak operands differ in length".into()));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(invalid("tau must lie in [0, 1]"));
    }
    for (t, o) in target.iter_mut().zip(online) {
        *t = (1.0 - tau) * *t + tau * o;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

pub fn global_norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Clips `grad` to `clip` in global norm, then applies one bias-corrected Adam
/// update at 1-based step `t` with learning rate `lr`. Returns the pre-clip norm.
pub fn optimizer_step(
    params: &mut [f64],
    grad: &[f64],
    adam: &mut AdamState,
    t: usize,
    lr: f64,
    config: &TrainConfig,
) -> Result<f64> {
    if params.len() != grad.len() || adam.m.len() != grad.len() {
        return Err(Error::ShapeMismatch("optimizer operands differ in length".into()));
    }
    if t == 0 {
        return Err(invalid("optimizer steps are 1-based"));
    }
    let norm = global_norm(grad);
    let scale = if norm > config.grad_clip {
        config.grad_clip / norm
    } else {
        1.0
    };
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..params.len() {
        let g = grad[i] * scale;
        adam.m[i] = b1 * adam.m[i] + (1.0 - b1) * g;
        adam.v[i] = b2 * adam.v[i] + (1.0 - b2) * g * g;
        let m_hat = adam.m[i] / c1;
        let v_hat = adam.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + config.adam_eps);
    }
    Ok(norm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub td_loss: f64,
    pub egr_anchor: f64,
    pub egr_rank: f64,
    pub cql: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub online: TwinCritic,
    pub target: TwinCritic,
    pub adam: [AdamState; 2],
    /// Completed optimizer steps.
    pub step: usize,
    pub metrics: Vec<MetricsRow>,
}

const TENSOR_NAMES: [&str; 8] = [
    "online.0", "online.1", "target.0", "target.1", "adam.m.0", "adam.v.0", "adam.m.1",
    "adam.v.1",
];

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    step: usize,
    critic: CriticConfig,
}

impl TrainState {
    pub fn new(config: CriticConfig, seed: u64) -> Result<Self> {
        let online = TwinCritic::init(config, seed)?;
        let target = online.clone();
        let len = online.first.len();
        Ok(Self {
            online,
            target,
            adam: [AdamState::zeros(len), AdamState::zeros(len)],
            step: 0,
            metrics: Vec::new(),
        })
    }

    fn tensors(&self) -> [&[f64]; 8] {
        [
            self.online.first.values(),
            self.online.second.values(),
            self.target.first.values(),
            self.target.second.values(),
            &self.adam[0].m,
            &self.adam[0].v,
            &self.adam[1].m,
            &self.adam[1].v,
        ]
    }

    fn named(&self) -> Vec<(&'static str, &[f64])> {
        TENSOR_NAMES.iter().copied().zip(self.tensors()).collect()
    }

    /// SHA-256 over all parameters and optimizer moments.
    pub fn checksum(&self) -> String {
        tensor_checksum(&self.named())
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let meta = serde_json::to_value(CheckpointMeta {
            step: self.step,
            critic: self.online.config().clone(),
        })?;
        write_tensor_file(path, meta, &self.named())
    }

    /// Restores a checkpoint; the metrics log starts empty.
    pub fn load(path: &Path) -> Result<Self> {
        let file = read_tensor_file(path)?;
        let meta: CheckpointMeta = serde_json::from_value(file.meta.clone())?;
        let get = |name: &str| -> Result<Vec<f64>> {
            file.get(name)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))
        };
        let params = |name: &str| CriticParams::from_values(meta.critic.clone(), get(name)?);
        let len = params("online.0")?.len();
        let moment = |name: &str| -> Result<Vec<f64>> {
            let v = get(name)?;
            if v.len() != len {
                return Err(Error::Format(format!("{name} has the wrong length")));
            }
            Ok(v)
        };
        Ok(Self {
            online: TwinCritic {
                first: params("online.0")?,
                second: params("online.1")?,
            },
            target: TwinCritic {
                first: params("target.0")?,
                second: params("target.1")?,
            },
            adam: [
                AdamState {
                    m: moment("adam.m.0")?,
                    v: moment("adam.v.0")?,
                },
                AdamState {
                    m: moment("adam.m.1")?,
                    v: moment("adam.v.1")?,
                },
            ],
            step: meta.step,
            metrics: Vec::new(),
        })
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["step", "td_loss", "egr_anchor", "egr_rank", "cql", "grad_norm", "lr"])?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Generator for optimizer step `step` (1-based): the seed selects the key,
/// the step selects the stream.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

/// Dataset, proposal, and config bound together for stepping a [`TrainState`].
pub struct Trainer<'a> {
    pub dataset: &'a OfflineDataset,
    pub proposal: &'a ProposalPolicy,
    pub config: TrainConfig,
    weights: MetricWeights,
    critic: CriticConfig,
}

impl<'a> Trainer<'a> {
    pub fn new(
        dataset: &'a OfflineDataset,
        proposal: &'a ProposalPolicy,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(invalid("training needs a non-empty dataset"));
        }
        if dataset.h != config.h {
            return Err(invalid(format!(
                "dataset horizon {} != train.h {}",
                dataset.h, config.h
            )));
        }
        if (dataset.gamma - config.gamma).abs() > 0.0 {
            return Err(invalid("dataset gamma differs from train.gamma"));
        }
        let first = &dataset.transitions[0];
        let action_dim = first.chunk.action_dim();
        let weights = config.egr.weights_for(action_dim);
        if weights.len() != action_dim {
            return Err(Error::ShapeMismatch(format!(
                "{} metric weights for {action_dim} action dims",
                weights.len()
            )));
        }
        let critic = config.critic_config(action_dim, first.state.proprio.len());
        critic.validate()?;
        Ok(Self {
            dataset,
            proposal,
            weights,
            critic,
            config,
        })
    }

    pub fn critic_config(&self) -> &CriticConfig {
        &self.critic
    }

    pub fn weights(&self) -> &MetricWeights {
        &self.weights
    }

    pub fn init_state(&self) -> Result<TrainState> {
        TrainState::new(self.critic.clone(), self.config.seed)
    }

    /// Samples the minibatch, targets, and candidate sets for 1-based step `t`.
    pub fn make_batch(&self, target: &TwinCritic, t: usize) -> Result<Vec<BatchItem<'a>>> {
        let cfg = &self.config;
        let mut rng = step_rng(cfg.seed, t);
        let featurizer = target.first.featurizer();
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let transition = &self.dataset.transitions[rng.random_range(0..self.dataset.len())];
            let y = td_target(transition, target, self.proposal, cfg.n_train, cfg.gamma, &mut rng)?;
            let ood = if cfg.needs_ood() {
                (0..cfg.egr.ood_per_state)
                    .map(|_| {
                        sample_ood(&cfg.ood, &transition.state, &transition.chunk, self.proposal, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            let pairs = if cfg.uses_egr() && cfg.egr.eta > 0.0 {
                sample_rank_pairs(ood.len(), cfg.egr.rank_pairs_per_state, &mut rng)
            } else {
                Vec::new()
            };
            batch.push(BatchItem {
                transition,
                context: featurizer.featurize(&transition.state)?,
                target: y,
                ood,
                pairs,
            });
        }
        Ok(batch)
    }

    /// One optimizer step on both twins followed by the target update.
    pub fn step(&self, state: &mut TrainState) -> Result<MetricsRow> {
        let t = state.step + 1;
        let batch = self.make_batch(&state.target, t)?;
        let (losses, grads) = total_loss(&state.online, &batch, &self.config, &self.weights)?;
        if !losses.total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: t,
                td: losses.td,
                anchor: losses.egr_anchor,
                rank: losses.egr_rank,
                cql: losses.cql,
            });
        }
        let lr = self.config.effective_lr(t);
        let mut norms = [0.0; 2];
        for (k, critic) in state.online.twins_mut().into_iter().enumerate() {
            norms[k] = optimizer_step(
                critic.values_mut(),
                &grads[k],
                &mut state.adam[k],
                t,
                lr,
                &self.config,
            )?;
        }
        for (target, online) in state.target.twins_mut().into_iter().zip(state.online.twins()) {
            polyak_update(target.values_mut(), online.values(), self.config.tau)?;
        }
        state.step = t;
        let row = MetricsRow {
            step: t,
            td_loss: losses.td,
            egr_anchor: losses.egr_anchor,
            egr_rank: losses.egr_rank,
            cql: losses.cql,
            grad_norm: (norms[0] * norms[0] + norms[1] * norms[1]).sqrt(),
            lr,
        };
        state.metrics.push(row);
        Ok(row)
    }

    /// Steps until `state.step == until`, calling `hook` after every step.
    pub fn run(
        &self,
        state: &mut TrainState,
        until: usize,
        mut hook: impl FnMut(&TrainState) -> Result<()>,
    ) -> Result<()> {
        while state.step < until {
            self.step(state)?;
            hook(state)?;
        }
        Ok(())
    }
}

/// Runs `config.steps` steps from a fresh state.
pub fn train(
    dataset: &OfflineDataset,
    proposal: &ProposalPolicy,
    config: &TrainConfig,
) -> Result<TrainState> {
    let trainer = Trainer::new(dataset, proposal, config.clone())?;
    let mut state = trainer.init_state()?;
    trainer.run(&mut state, config.steps, |_| Ok(()))?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, RewardLabeling};
    use crate::env::{generate_demos, make_env, EnvConfig};
    use crate::proposal::{make_demo_proposal, ProposalNoise};

    fn small_setup(h: usize) -> (OfflineDataset, ProposalPolicy) {
        let env = make_env(&EnvConfig::pointmass()).unwrap();
        let demos = generate_demos(&env, 2, 0.05, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let ds = build_dataset(&demos, &RewardLabeling::default(), h, h, 0.98).unwrap();
        let prop = make_demo_proposal(&ds, 0.1, vec![0.2, 0.0], ProposalNoise::Chunk).unwrap();
        (ds, prop)
    }

    fn small_config(h: usize) -> TrainConfig {
        TrainConfig {
            h,
            steps: 5,
            batch_size: 4,
            n_train: 3,
            warmup_steps: 2,
            lr: 1e-3,
            critic: CriticConfig {
                d_model: 8,
                hidden: vec![16, 16],
                ..CriticConfig::default()
            },
            egr: EgrConfig {
                ood_per_state: 4,
                rank_pairs_per_state: 3,
                ..EgrConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn constant_twins(value: f64) -> TwinCritic {
        let cfg = CriticConfig {
            hidden: vec![],
            horizon: 4,
            d_model: 4,
            context_tokens: 1,
            ..CriticConfig::default()
        };
        let mut a = CriticParams::zeros(cfg).unwrap();
        a.view_mut("head0.b").unwrap()[0] = value;
        TwinCritic {
            first: a.clone(),
            second: a,
        }
    }

    #[test]
    fn target_arithmetic() {
        assert_eq!(td_target_from_scores(1.0, 0.5, true, &[3.0]), 1.0);
        assert!((td_target_from_scores(1.0, 0.5, false, &[0.4, 0.8]) - 1.4).abs() < 1e-15);
    }

    #[test]
    fn terminal_target_is_chunk_return() {
        let (ds, prop) = small_setup(4);
        let t = ds.transitions.iter().find(|t| t.terminal).unwrap();
        let twins = constant_twins(100.0);
        let y = td_target(t, &twins, &prop, 4, 0.98, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(y, chunk_return(&t.rewards, 0.98).unwrap());
        let nt = ds.transitions.iter().find(|t| !t.terminal).unwrap();
        let y = td_target(nt, &twins, &prop, 4, 0.98, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let expected = chunk_return(&nt.rewards, 0.98).unwrap() + 0.98f64.powi(4) * 100.0;
        assert!((y - expected).abs() < 1e-12);
        assert!(td_target(nt, &twins, &prop, 0, 0.98, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn twin_min_never_exceeds_single_twin() {
        let (ds, prop) = small_setup(4);
        let cfg = small_config(4);
        let trainer = Trainer::new(&ds, &prop, cfg).unwrap();
        let twins = TwinCritic::init(trainer.critic_config().clone(), 7).unwrap();
        for (i, t) in ds.transitions.iter().enumerate().filter(|(_, t)| !t.terminal) {
            let y = td_target(t, &twins, &prop, 5, 0.98, &mut step_rng(1, i)).unwrap();
            for single in [&twins.first, &twins.second] {
                let solo = TwinCritic {
                    first: single.clone(),
                    second: single.clone(),
                };
                let ys = td_target(t, &solo, &prop, 5, 0.98, &mut step_rng(1, i)).unwrap();
                assert!(y <= ys + 1e-15);
            }
        }
    }

    #[test]
    fn polyak_examples() {
        let mut t = vec![0.0, 2.0];
        polyak_update(&mut t, &[1.0, 4.0], 1.0).unwrap();
        assert_eq!(t, vec![1.0, 4.0]);
        polyak_update(&mut t, &[9.0, 9.0], 0.0).unwrap();
        assert_eq!(t, vec![1.0, 4.0]);
        let mut t = vec![0.0];
        polyak_update(&mut t, &[1.0], 0.005).unwrap();
        assert_eq!(t, vec![0.005]);
    }

    #[test]
    fn optimizer_examples() {
        let cfg = TrainConfig::default();
        let mut p = vec![1.0, -2.0];
        let mut adam = AdamState::zeros(2);
        optimizer_step(&mut p, &[0.0, 0.0], &mut adam, 1, 1e-3, &cfg).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        // norm 20 is clipped to 10, so the first moment sees half the gradient
        let mut p = vec![0.0, 0.0];
        let mut adam = AdamState::zeros(2);
        let norm = optimizer_step(&mut p, &[12.0, 16.0], &mut adam, 1, 1e-3, &cfg).unwrap();
        assert_eq!(norm, 20.0);
        assert!((adam.m[0] - 0.1 * 6.0).abs() < 1e-12 && (adam.m[1] - 0.1 * 8.0).abs() < 1e-12);
        // moments decay on a zero gradient
        let before = adam.m.clone();
        optimizer_step(&mut p, &[0.0, 0.0], &mut adam, 2, 1e-3, &cfg).unwrap();
        assert!((adam.m[0] - 0.9 * before[0]).abs() < 1e-15);

        let warm = TrainConfig {
            lr: 2e-4,
            warmup_steps: 1000,
            ..TrainConfig::default()
        };
        assert!((warm.effective_lr(500) - 1e-4).abs() < 1e-18);
        assert_eq!(warm.effective_lr(5000), 2e-4);
    }

    fn fixed_batch<'a>(
        trainer: &Trainer<'a>,
        state: &TrainState,
    ) -> Vec<BatchItem<'a>> {
        trainer.make_batch(&state.target, 1).unwrap()
    }

    #[test]
    fn loss_components_and_special_cases() {
        let (ds, prop) = small_setup(4);
        let cfg = small_config(4);
        let trainer = Trainer::new(&ds, &prop, cfg.clone()).unwrap();
        let state = trainer.init_state().unwrap();
        let batch = fixed_batch(&trainer, &state);
        let w = trainer.weights().clone();

        let (br, grads) = total_loss(&state.online, &batch, &cfg, &w).unwrap();
        let (td, _) = td_loss(&state.online, &batch).unwrap();
        let e1 = egr_term(&state.online.first, &batch, &cfg.egr, &w).unwrap();
        let e2 = egr_term(&state.online.second, &batch, &cfg.egr, &w).unwrap();
        assert!((br.td - td).abs() < 1e-12);
        assert!((br.egr - (e1.2 + e2.2)).abs() < 1e-12);
        assert!((br.total - (td + cfg.egr.lambda * (e1.2 + e2.2))).abs() < 1e-12);

        // naive loop oracle for the TD term
        let mut naive = 0.0;
        for critic in state.online.twins() {
            let mut s = 0.0;
            for item in &batch {
                let q = critic.score(&item.transition.state, &item.transition.chunk).unwrap();
                s += (q - item.target).powi(2);
            }
            naive += s / batch.len() as f64;
        }
        assert!((naive - td).abs() < 1e-12);

        let no_egr = TrainConfig {
            egr: EgrConfig {
                lambda: 0.0,
                ..cfg.egr.clone()
            },
            ..cfg.clone()
        };
        let (br0, g0) = total_loss(&state.online, &batch, &no_egr, &w).unwrap();
        assert_eq!(br0.total, td);
        assert_ne!(g0[0], grads[0]);
    }

    #[test]
    fn td_loss_single_residual() {
        let twins = constant_twins(0.5);
        let ds_t = ChunkTransition {
            state: crate::env::EnvState {
                proprio: vec![0.0, 0.0],
                goal: vec![1.0, 1.0],
                step_index: 0,
            },
            chunk: ActionChunk::constant(&[0.0, 0.0], 4).unwrap(),
            rewards: vec![0.0; 4],
            next_state: crate::env::EnvState {
                proprio: vec![0.0, 0.0],
                goal: vec![1.0, 1.0],
                step_index: 4,
            },
            terminal: true,
        };
        let item = BatchItem {
            context: twins.first.context(&ds_t.state).unwrap(),
            transition: &ds_t,
            target: 0.0,
            ood: vec![ActionChunk::constant(&[1.0, 0.0], 4).unwrap()],
            pairs: vec![],
        };
        let (l, _) = td_loss_single(&twins.first, std::slice::from_ref(&item)).unwrap();
        assert!((l - 0.25).abs() < 1e-15);
        let (l, _) = td_loss(&twins, std::slice::from_ref(&item)).unwrap();
        assert!((l - 0.5).abs() < 1e-15);
        // constant critic: zero penalty; alpha = 0: zero penalty
        let (c, _) = cql_penalty(&twins.first, std::slice::from_ref(&item), 5.0).unwrap();
        assert_eq!(c, 0.0);
        let (c, _) = cql_penalty(&twins.first, std::slice::from_ref(&item), 0.0).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn cql_uniform_ood_gap_equals_alpha() {
        // linear critic reading only the first chunk entry
        let mut twins = constant_twins(0.0);
        let cfg = twins.first.config().clone();
        let pos = cfg.state_feature_dim();
        twins.first.view_mut("head0.w").unwrap()[pos] = 1.0;
        let state = crate::env::EnvState {
            proprio: vec![0.0, 0.0],
            goal: vec![1.0, 1.0],
            step_index: 0,
        };
        let t = ChunkTransition {
            state: state.clone(),
            chunk: ActionChunk::constant(&[0.0, 0.0], 4).unwrap(),
            rewards: vec![0.0; 4],
            next_state: state,
            terminal: true,
        };
        let item = BatchItem {
            context: twins.first.context(&t.state).unwrap(),
            transition: &t,
            target: 0.0,
            ood: vec![
                ActionChunk::constant(&[1.0, 3.0], 4).unwrap(),
                ActionChunk::constant(&[1.0, -2.0], 4).unwrap(),
            ],
            pairs: vec![],
        };
        let (c, _) = cql_penalty(&twins.first, &[item], 5.0).unwrap();
        assert!((c - 5.0).abs() < 1e-12);
    }

    #[test]
    fn full_batch_descent() {
        let (ds, prop) = small_setup(4);
        let cfg = TrainConfig {
            warmup_steps: 0,
            lr: 1e-3,
            ..small_config(4)
        };
        let trainer = Trainer::new(&ds, &prop, cfg.clone()).unwrap();
        let mut state = trainer.init_state().unwrap();
        let batch = fixed_batch(&trainer, &state);
        let w = trainer.weights().clone();
        let initial = total_loss(&state.online, &batch, &cfg, &w).unwrap().0.total;
        for t in 1..=50 {
            let (_, grads) = total_loss(&state.online, &batch, &cfg, &w).unwrap();
            for (k, critic) in state.online.twins_mut().into_iter().enumerate() {
                optimizer_step(critic.values_mut(), &grads[k], &mut state.adam[k], t, cfg.lr, &cfg)
                    .unwrap();
            }
        }
        let last = total_loss(&state.online, &batch, &cfg, &w).unwrap().0.total;
        assert!(last < initial, "{last} >= {initial}");
    }

    #[test]
    fn zero_steps_and_determinism() {
        let (ds, prop) = small_setup(4);
        let mut cfg = small_config(4);
        cfg.steps = 0;
        let s = train(&ds, &prop, &cfg).unwrap();
        assert_eq!(s.step, 0);
        assert!(s.metrics.is_empty());
        assert_eq!(s.online, s.target);

        cfg.steps = 6;
        let a = train(&ds, &prop, &cfg).unwrap();
        let b = train(&ds, &prop, &cfg).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.metrics, b.metrics);
        cfg.seed = 1;
        assert_ne!(train(&ds, &prop, &cfg).unwrap().checksum(), a.checksum());
    }

    #[test]
    fn targets_move_only_by_polyak() {
        let (ds, prop) = small_setup(4);
        let cfg = TrainConfig {
            tau: 0.0,
            steps: 3,
            ..small_config(4)
        };
        let s = train(&ds, &prop, &cfg).unwrap();
        let fresh = Trainer::new(&ds, &prop, cfg.clone()).unwrap().init_state().unwrap();
        assert_eq!(s.target, fresh.target);
        assert_ne!(s.online, fresh.online);
    }

    #[test]
    fn checkpoint_resume_matches() {
        let (ds, prop) = small_setup(4);
        let cfg = TrainConfig {
            steps: 6,
            baseline: Baseline::Cql,
            ..small_config(4)
        };
        let full = train(&ds, &prop, &cfg).unwrap();
        let trainer = Trainer::new(&ds, &prop, cfg.clone()).unwrap();
        let mut s = trainer.init_state().unwrap();
        trainer.run(&mut s, 3, |_| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let sha = s.save(&path).unwrap();
        assert_eq!(sha, s.checksum());
        let mut resumed = TrainState::load(&path).unwrap();
        assert_eq!(resumed.step, 3);
        trainer.run(&mut resumed, 6, |_| Ok(())).unwrap();
        assert_eq!(resumed.checksum(), full.checksum());
        assert!(full.metrics.iter().all(|m| m.egr_anchor == 0.0 && m.cql != 0.0));
    }

    #[test]
    fn metrics_csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics_csv(&path, &[]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.trim(), "step,td_loss,egr_anchor,egr_rank,cql,grad_norm,lr");
        let row = MetricsRow {
            step: 1,
            td_loss: 0.5,
            egr_anchor: 0.25,
            egr_rank: 0.0,
            cql: 0.0,
            grad_norm: 2.0,
            lr: 1e-4,
        };
        write_metrics_csv(&path, &[row]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "step,td_loss,egr_anchor,egr_rank,cql,grad_norm,lr");
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn mismatched_horizon_rejected() {
        let (ds, prop) = small_setup(4);
        assert!(Trainer::new(&ds, &prop, small_config(8)).is_err());
        let empty = OfflineDataset::new(vec![], 4, 0.98).unwrap();
        assert!(Trainer::new(&empty, &prop, small_config(4)).is_err());
    }
}
