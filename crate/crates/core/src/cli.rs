//! Config-driven subcommands: gen-data, verify, train, eval, sweep-n, landscape.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::chunk::ActionChunk;
use crate::data::{build_dataset, OfflineDataset, RewardLabeling};
use crate::env::{generate_demos, make_env, Env, EnvConfig, EnvState};
use crate::error::{invalid, Error, Result};
use crate::eval::{
    heldout_pairs, landscape_grid, rank_eval, success_rate, sweep_n, EvalConfig, GridSpec,
    RankReport,
};
use crate::geometry::{
    envelope_from_scores, reference_surface, weighted_distance, MetricWeights, ENVELOPE_TOL,
};
use crate::proposal::{make_demo_proposal, sample_candidates, ProposalNoise, ProposalPolicy};
use crate::tabular::{
    evaluate_induced_policy, random_fixture, solve_fixed_point, standard_fixtures,
    verify_boundedness, verify_contraction, verify_limit, verify_monotonicity, TabularFixture,
    DEFAULT_MAX_ITER,
};
use crate::trainer::{write_metrics_csv, TrainConfig, TrainState, Trainer};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_VERIFICATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    pub count: usize,
    pub noise_sigma: f64,
    /// Extra demos, generated from a separate stream, for held-out ranking.
    pub heldout: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            count: 5,
            noise_sigma: 0.05,
            heldout: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    pub sigma: f64,
    pub bias: Vec<f64>,
    pub noise: ProposalNoise,
    /// Slicing stride of the demo chunks the proposal anchors to.
    pub stride: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            bias: vec![0.1, -0.05],
            noise: ProposalNoise::Chunk,
            stride: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub random_instances: usize,
    pub max_states: usize,
    pub max_candidates: usize,
    pub gammas: Vec<f64>,
    pub contraction_pairs: usize,
    pub ns: Vec<usize>,
    pub monotone_instances: usize,
    pub n_max: usize,
    pub limit_threshold: f64,
    pub envelope_trials: usize,
    pub tol: f64,
    /// Additional fixture files (JSON).
    pub fixtures: Vec<PathBuf>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            random_instances: 100,
            max_states: 10,
            max_candidates: 6,
            gammas: vec![0.5, 0.9, 0.98],
            contraction_pairs: 10,
            ns: vec![1, 2, 4, 8, 16],
            monotone_instances: 50,
            n_max: 128,
            limit_threshold: 1e-3,
            envelope_trials: 1000,
            tol: 1e-12,
            fixtures: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub demos: DemoConfig,
    pub labeling: RewardLabeling,
    /// Training dataset stride; `None` means `train.h`.
    pub dataset_stride: Option<usize>,
    pub proposal: ProposalConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep_ns: Vec<usize>,
    pub landscape: GridSpec,
    /// Held-out ranking period during training; 0 disables it.
    pub rank_every: usize,
    pub verify: VerifyConfig,
    pub out: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::pointmass(),
            demos: DemoConfig::default(),
            labeling: RewardLabeling::default(),
            dataset_stride: None,
            proposal: ProposalConfig::default(),
            train: TrainConfig {
                h: 8,
                lr: 1e-3,
                warmup_steps: 100,
                steps: 3000,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            sweep_ns: vec![1, 2, 4, 8],
            landscape: GridSpec::default(),
            rank_every: 500,
            verify: VerifyConfig::default(),
            out: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        make_env(&self.env)?;
        if self.demos.count == 0 {
            return Err(invalid("demos.count must be >= 1"));
        }
        if !(self.demos.noise_sigma >= 0.0) {
            return Err(invalid("demos.noise_sigma must be >= 0"));
        }
        if self.labeling.window == 0 {
            return Err(invalid("labeling.window must be >= 1"));
        }
        if self.dataset_stride == Some(0) || self.proposal.stride == 0 {
            return Err(invalid("strides must be >= 1"));
        }
        if !(self.proposal.sigma >= 0.0) {
            return Err(invalid("proposal.sigma must be >= 0"));
        }
        self.train.validate()?;
        self.eval.validate()?;
        if (self.train.gamma - self.eval.gamma).abs() > 0.0 {
            return Err(invalid("train.gamma and eval.gamma must agree"));
        }
        if self.sweep_ns.contains(&0) || self.sweep_ns.is_empty() {
            return Err(invalid("sweep_ns must be non-empty and >= 1"));
        }
        if self.verify.gammas.iter().any(|g| !(0.0..1.0).contains(g)) {
            return Err(invalid("verify.gammas must lie in [0, 1)"));
        }
        if !(self.verify.tol > 0.0) {
            return Err(invalid("verify.tol must be > 0"));
        }
        Ok(())
    }

    pub fn dataset_stride(&self) -> usize {
        self.dataset_stride.unwrap_or(self.train.h)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON, falling back to a string.
pub fn apply_override(config: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| invalid(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = config;
    for key in path.split('.') {
        if key.is_empty() {
            return Err(invalid(format!("empty key in override {path:?}")));
        }
        let obj = slot
            .as_object_mut()
            .ok_or_else(|| invalid(format!("override {path:?} descends into a non-object")))?;
        slot = obj.entry(key.to_string()).or_insert(Value::Null);
    }
    *slot = value;
    Ok(())
}

/// Built-in defaults, then the config file, then `--set` overrides, then flags.
pub fn load_config(
    file: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        let overlay: Value = serde_json::from_str(&text)
            .map_err(|e| invalid(format!("config {}: {e}", path.display())))?;
        merge(&mut value, overlay);
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let mut config: RunConfig =
        serde_json::from_value(value).map_err(|e| invalid(format!("config: {e}")))?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(out) = out {
        config.out = out.to_path_buf();
    }
    config.train.seed = config.seed;
    config.validate()?;
    Ok(config)
}

/// Writes `<file>.json` next to an output file.
pub fn write_sidecar(file: &Path, config: &RunConfig, extra: Value) -> Result<()> {
    let mut name = file.as_os_str().to_owned();
    name.push(".json");
    let mut doc = json!({
        "config": config,
        "config_hash": config.hash(),
        "seed": config.seed,
        "tool_version": TOOL_VERSION,
    });
    merge(&mut doc, extra);
    std::fs::write(PathBuf::from(name), serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Paths inside the output directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.jsonl")
    }
    pub fn proposal(&self) -> PathBuf {
        self.root.join("proposal.json")
    }
    pub fn heldout(&self) -> PathBuf {
        self.root.join("heldout.json")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.bin")
    }
    pub fn checkpoint_at(&self, step: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("step_{step:07}.bin"))
    }
}

/// `(state, expert chunk)` pairs for ranking diagnostics.
pub type HeldOut = Vec<(EnvState, ActionChunk)>;

/// Demonstrations plus held-out demos, generated deterministically from the run seed.
pub fn generate_data(
    config: &RunConfig,
) -> Result<(Env, OfflineDataset, ProposalPolicy, HeldOut)> {
    let env = make_env(&config.env)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let demos = generate_demos(&env, config.demos.count, config.demos.noise_sigma, &mut rng)?;
    let h = config.train.h;
    let dataset = build_dataset(
        &demos,
        &config.labeling,
        h,
        config.dataset_stride(),
        config.train.gamma,
    )?;
    let anchors = build_dataset(
        &demos,
        &config.labeling,
        h,
        config.proposal.stride,
        config.train.gamma,
    )?;
    let proposal = make_demo_proposal(
        &anchors,
        config.proposal.sigma,
        config.proposal.bias.clone(),
        config.proposal.noise,
    )?;
    let heldout = if config.demos.heldout > 0 {
        rng.set_stream(1);
        let held = generate_demos(&env, config.demos.heldout, config.demos.noise_sigma, &mut rng)?;
        heldout_pairs(&held, h, config.eval.rank_states)?
    } else {
        Vec::new()
    };
    Ok((env, dataset, proposal, heldout))
}

pub fn cmd_gen_data(config: &RunConfig) -> Result<Value> {
    let (_, dataset, proposal, heldout) = generate_data(config)?;
    let layout = Layout::new(&config.out);
    std::fs::create_dir_all(&layout.root)?;
    dataset.write_jsonl(&layout.dataset())?;
    write_sidecar(&layout.dataset(), config, json!({"transitions": dataset.len()}))?;
    std::fs::write(layout.proposal(), serde_json::to_string(&proposal)?)?;
    write_sidecar(&layout.proposal(), config, json!({}))?;
    std::fs::write(layout.heldout(), serde_json::to_string(&heldout)?)?;
    write_sidecar(&layout.heldout(), config, json!({"states": heldout.len()}))?;
    Ok(json!({
        "dataset": layout.dataset(),
        "transitions": dataset.len(),
        "heldout_states": heldout.len(),
    }))
}

fn load_inputs(
    config: &RunConfig,
) -> Result<(OfflineDataset, ProposalPolicy, HeldOut)> {
    let layout = Layout::new(&config.out);
    let dataset = OfflineDataset::read_jsonl(&layout.dataset(), config.train.gamma)?;
    let proposal: ProposalPolicy = serde_json::from_str(&std::fs::read_to_string(layout.proposal())?)?;
    let heldout = match std::fs::read_to_string(layout.heldout()) {
        Ok(text) => serde_json::from_str(&text)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    Ok((dataset, proposal, heldout))
}

#[derive(Serialize)]
struct RankLogRow {
    step: usize,
    top1_hit_rate: f64,
    spearman: f64,
}

fn heldout_rank(
    config: &RunConfig,
    state: &TrainState,
    heldout: &[(EnvState, ActionChunk)],
    proposal: &ProposalPolicy,
    weights: &MetricWeights,
    include_expert: bool,
) -> Result<RankReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    rank_eval(
        &state.online,
        heldout,
        proposal,
        config.eval.n.max(2),
        weights,
        include_expert,
        &mut rng,
    )
}

pub fn cmd_train(config: &RunConfig, resume: Option<&Path>) -> Result<Value> {
    let (dataset, proposal, heldout) = load_inputs(config)?;
    let trainer = Trainer::new(&dataset, &proposal, config.train.clone())?;
    let layout = Layout::new(&config.out);
    let mut state = match resume {
        Some(path) => TrainState::load(path)?,
        None => trainer.init_state()?,
    };
    if state.online.config() != trainer.critic_config() {
        return Err(invalid("checkpoint critic config differs from the run config"));
    }
    let every = config.train.checkpoint_every;
    if every > 0 {
        std::fs::create_dir_all(layout.root.join("checkpoints"))?;
    }
    let weights = trainer.weights().clone();
    let mut rank_log = Vec::new();
    trainer.run(&mut state, config.train.steps, |s| {
        if every > 0 && s.step % every == 0 {
            let path = layout.checkpoint_at(s.step);
            let sha = s.save(&path)?;
            write_sidecar(&path, config, json!({"step": s.step, "sha256": sha}))?;
        }
        if config.rank_every > 0 && s.step % config.rank_every == 0 && !heldout.is_empty() {
            let r = heldout_rank(config, s, &heldout, &proposal, &weights, false)?;
            rank_log.push(RankLogRow {
                step: s.step,
                top1_hit_rate: r.top1_hit_rate,
                spearman: r.spearman,
            });
        }
        Ok(())
    })?;
    let sha = state.save(&layout.checkpoint())?;
    write_sidecar(&layout.checkpoint(), config, json!({"step": state.step, "sha256": sha}))?;
    let metrics = layout.root.join("metrics.csv");
    write_metrics_csv(&metrics, &state.metrics)?;
    write_sidecar(&metrics, config, json!({"resumed_from": resume}))?;
    if !rank_log.is_empty() {
        let path = layout.root.join("rank_log.csv");
        write_csv(&path, &["step", "top1_hit_rate", "spearman"], &rank_log)?;
        write_sidecar(&path, config, json!({}))?;
    }
    Ok(json!({"checkpoint": layout.checkpoint(), "sha256": sha, "step": state.step}))
}

fn checkpoint_path(config: &RunConfig, given: Option<&Path>) -> PathBuf {
    given
        .map(Path::to_path_buf)
        .unwrap_or_else(|| Layout::new(&config.out).checkpoint())
}

pub fn cmd_eval(config: &RunConfig, checkpoint: Option<&Path>) -> Result<Value> {
    let (dataset, proposal, heldout) = load_inputs(config)?;
    let state = TrainState::load(&checkpoint_path(config, checkpoint))?;
    let env = make_env(&config.env)?;
    let rows = success_rate(&env, &state.online, &proposal, &config.eval)?;
    let out = &config.out;
    let success = out.join("success.csv");
    write_csv(&success, &["seed", "N", "sr"], &rows)?;
    let srs: Vec<f64> = rows.iter().map(|r| r.sr).collect();
    let med = crate::eval::median(&srs);
    write_sidecar(&success, config, json!({"median_success": med}))?;
    let mut summary = json!({"median_success": med, "rows": rows.len()});
    if !heldout.is_empty() {
        let weights = config
            .train
            .egr
            .weights_for(dataset.transitions[0].chunk.action_dim());
        for (name, with_expert) in [("rank.csv", false), ("rank_with_expert.csv", true)] {
            let report = heldout_rank(config, &state, &heldout, &proposal, &weights, with_expert)?;
            let path = out.join(name);
            write_csv(&path, &["state_id", "hit", "spearman"], &report.per_state)?;
            write_sidecar(
                &path,
                config,
                json!({"top1_hit_rate": report.top1_hit_rate, "spearman": report.spearman,
                       "include_expert": with_expert}),
            )?;
            summary[name] = json!({"top1_hit_rate": report.top1_hit_rate, "spearman": report.spearman});
        }
    }
    Ok(summary)
}

pub fn cmd_sweep_n(config: &RunConfig, checkpoint: Option<&Path>) -> Result<Value> {
    let (_, proposal, _) = load_inputs(config)?;
    let state = TrainState::load(&checkpoint_path(config, checkpoint))?;
    let env = make_env(&config.env)?;
    let table = sweep_n(&env, &state.online, &proposal, &config.sweep_ns, &config.eval)?;
    let path = config.out.join("sweep.csv");
    write_csv(&path, &["seed", "N", "sr"], &table.rows)?;
    write_sidecar(&path, config, json!({"medians": table.medians}))?;
    Ok(json!({"medians": table.medians, "non_decreasing": table.non_decreasing()}))
}

pub fn cmd_landscape(config: &RunConfig, checkpoint: Option<&Path>) -> Result<Value> {
    let (_, proposal, heldout) = load_inputs(config)?;
    let state = TrainState::load(&checkpoint_path(config, checkpoint))?;
    let (s, gt) = heldout
        .first()
        .ok_or_else(|| invalid("landscape needs held-out states (demos.heldout > 0)"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(3);
    let candidates = sample_candidates(&proposal, s, config.eval.n, &mut rng)?;
    let land = landscape_grid(&state.online, s, gt, &config.landscape, &candidates)?;
    let path = config.out.join("landscape.csv");
    #[derive(Serialize)]
    struct Row<'a> {
        x: f64,
        y: f64,
        q_norm: f64,
        marker: &'a str,
    }
    let rows: Vec<Row> = land
        .cells
        .iter()
        .map(|c| Row {
            x: c.x,
            y: c.y,
            q_norm: c.q_norm,
            marker: &c.marker,
        })
        .collect();
    write_csv(&path, &["x", "y", "q_norm", "marker"], &rows)?;
    write_sidecar(
        &path,
        config,
        json!({"q_min": land.q_min, "q_max": land.q_max, "normalization": "per-grid min-max",
               "axes": config.landscape.axes, "projection": "coordinate slice through the ground-truth chunk"}),
    )?;
    Ok(json!({"cells": land.cells.len(), "q_min": land.q_min, "q_max": land.q_max}))
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: Value,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    fn push(&mut self, name: String, pass: bool, detail: impl Serialize) -> Result<()> {
        self.checks.push(CheckResult {
            name,
            pass,
            detail: serde_json::to_value(detail)?,
        });
        Ok(())
    }
}

fn load_fixture(path: &Path) -> Result<TabularFixture> {
    let text = std::fs::read_to_string(path)?;
    let fixture: TabularFixture = serde_json::from_str(&text)
        .map_err(|e| invalid(format!("fixture {}: {e}", path.display())))?;
    fixture.validate()?;
    Ok(fixture)
}

/// Randomized best-of-N envelope constructions: candidates at random
/// distances, scores equal to the reference surface plus bounded residuals.
pub fn envelope_trials(trials: usize, seed: u64) -> Result<(usize, f64)> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut min_slack = f64::INFINITY;
    for _ in 0..trials {
        let h = rng.random_range(1..=6);
        let dim = rng.random_range(1..=3);
        let w = MetricWeights::new((0..dim).map(|_| rng.random_range(0.1..5.0)).collect())?;
        let gt_actions: Vec<Vec<f64>> = (0..h)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let gt = ActionChunk::full(gt_actions)?;
        let y = rng.random_range(-10.0..10.0);
        let beta = rng.random_range(0.1..10.0);
        let eps = rng.random_range(0.0..2.0);
        let m = rng.random_range(1..=10);
        let mut q = Vec::with_capacity(m);
        let mut d = Vec::with_capacity(m);
        for _ in 0..m {
            let scale = rng.random_range(0.0..1.5);
            let c = gt.map_valid(|_, _, v| v + scale * rng.random_range(-1.0..1.0))?;
            let di = weighted_distance(&c, &gt, &w)?;
            q.push(reference_surface(y, di, beta) + rng.random_range(-3.0..=eps));
            d.push(di);
        }
        let r = envelope_from_scores(&q, &d, y, beta)?;
        let slack = (r.distance_bound - r.max_q).min(r.scale_bound - r.distance_bound);
        min_slack = min_slack.min(slack);
        if !r.bound_holds || slack < -ENVELOPE_TOL {
            violations += 1;
        }
    }
    Ok((violations, min_slack))
}

pub fn run_verification(config: &RunConfig) -> Result<VerifyReport> {
    let v = &config.verify;
    let mut fixtures = standard_fixtures()?;
    for path in &v.fixtures {
        fixtures.push(load_fixture(path)?);
    }
    let mut report = VerifyReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    for f in &fixtures {
        let s = &f.smdp;
        let p = &f.proposal;
        let mut worst_gap = 0.0f64;
        for &n in &v.ns {
            let sol = solve_fixed_point(s, p, n, v.tol, DEFAULT_MAX_ITER)?;
            let qpi = evaluate_induced_policy(s, p, &sol.q, n, v.tol)?;
            worst_gap = worst_gap.max(qpi.sup_distance(&sol.q));
        }
        report.push(
            format!("{}: fixed point equals induced-policy value", f.name),
            worst_gap <= 1e-8,
            json!({"max_gap": worst_gap}),
        )?;
        let c = verify_contraction(s, p, 4, v.contraction_pairs.max(1) * 5, &mut rng)?;
        report.push(format!("{}: contraction", f.name), c.pass, &c)?;
        let m = verify_monotonicity(s, p, &v.ns, v.tol)?;
        report.push(format!("{}: monotone in N", f.name), m.pass, &m)?;
        let l = verify_limit(s, p, v.n_max, v.limit_threshold, v.tol)?;
        report.push(format!("{}: large-N limit", f.name), l.pass, &l)?;
        let b = verify_boundedness(s, p, 4, 20, &mut rng)?;
        report.push(format!("{}: boundedness", f.name), b.pass, &b)?;
    }

    let mut contraction_fail = 0;
    let mut max_ratio_excess = f64::NEG_INFINITY;
    for i in 0..v.random_instances {
        let gamma = v.gammas[i % v.gammas.len()];
        let f = random_fixture(&mut rng, v.max_states, v.max_candidates, gamma);
        let n = 1 + i % 8;
        let c = verify_contraction(&f.smdp, &f.proposal, n, v.contraction_pairs, &mut rng)?;
        max_ratio_excess = max_ratio_excess.max(c.max_ratio - gamma);
        contraction_fail += (!c.pass) as usize;
        let b = verify_boundedness(&f.smdp, &f.proposal, n, 5, &mut rng)?;
        contraction_fail += (!b.pass) as usize;
    }
    report.push(
        "random instances: contraction and boundedness".into(),
        contraction_fail == 0,
        json!({"instances": v.random_instances, "failures": contraction_fail,
               "max_ratio_minus_gamma": max_ratio_excess}),
    )?;

    let mut mono_fail = 0;
    let mut min_slack = f64::INFINITY;
    for i in 0..v.monotone_instances {
        let gamma = v.gammas[i % v.gammas.len()];
        let f = random_fixture(&mut rng, v.max_states, v.max_candidates, gamma);
        let m = verify_monotonicity(&f.smdp, &f.proposal, &v.ns, v.tol)?;
        min_slack = min_slack.min(m.min_slack);
        mono_fail += (!m.pass) as usize;
    }
    report.push(
        "random instances: monotone in N".into(),
        mono_fail == 0,
        json!({"instances": v.monotone_instances, "failures": mono_fail, "min_slack": min_slack}),
    )?;

    let (violations, slack) = envelope_trials(v.envelope_trials, config.seed)?;
    report.push(
        "best-of-N envelope bound".into(),
        violations == 0,
        json!({"trials": v.envelope_trials, "violations": violations, "min_slack": slack}),
    )?;
    Ok(report)
}

pub fn cmd_verify(config: &RunConfig) -> Result<(Value, bool)> {
    let report = run_verification(config)?;
    std::fs::create_dir_all(&config.out)?;
    let path = config.out.join("verify.json");
    let doc = json!({
        "config_hash": config.hash(),
        "seed": config.seed,
        "tool_version": TOOL_VERSION,
        "all_pass": report.all_pass(),
        "checks": report.checks,
    });
    std::fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")?;
    let failed: Vec<&str> = report
        .checks
        .iter()
        .filter(|c| !c.pass)
        .map(|c| c.name.as_str())
        .collect();
    Ok((
        json!({"report": path, "checks": report.checks.len(), "failed": failed}),
        report.all_pass(),
    ))
}

#[derive(Parser, Debug)]
#[command(name = "chunkq", version, about = "Best-of-N chunk critics: data, verification, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config file layered over the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set train.steps=100`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate demonstrations and write the chunk dataset.
    GenData(Common),
    /// Run the tabular operator and envelope verifiers.
    Verify(Common),
    /// Train twin critics on the generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Success rate and ranking diagnostics for a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Success rate over a list of inference budgets N.
    SweepN {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Value landscape around a held-out expert chunk.
    Landscape {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_)
        | Error::InvalidDistribution(_)
        | Error::ShapeMismatch(_)
        | Error::OutsideSupport(_)
        | Error::UnreachableGoal(_)
        | Error::Json(_) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn dispatch(command: Command) -> Result<(Value, bool)> {
    let load = |c: &Common| {
        load_config(
            c.config.as_deref(),
            &c.overrides,
            c.seed,
            c.out.as_deref(),
        )
    };
    let ok = |v: Value| Ok((v, true));
    match command {
        Command::GenData(c) => ok(cmd_gen_data(&load(&c)?)?),
        Command::Verify(c) => cmd_verify(&load(&c)?),
        Command::Train { common, checkpoint } => {
            ok(cmd_train(&load(&common)?, checkpoint.as_deref())?)
        }
        Command::Eval { common, checkpoint } => ok(cmd_eval(&load(&common)?, checkpoint.as_deref())?),
        Command::SweepN { common, checkpoint } => {
            ok(cmd_sweep_n(&load(&common)?, checkpoint.as_deref())?)
        }
        Command::Landscape { common, checkpoint } => {
            ok(cmd_landscape(&load(&common)?, checkpoint.as_deref())?)
        }
    }
}

/// Parses arguments, runs one subcommand, prints a JSON summary, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok((summary, pass)) => {
            println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            if pass {
                EXIT_OK
            } else {
                eprintln!("verification failed");
                EXIT_VERIFICATION
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
