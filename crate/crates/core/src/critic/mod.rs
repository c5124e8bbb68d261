//! Differentiable chunk scorers `Q_θ(s, A)` with hand-written reverse passes.
//!
//! Two variants share one flat parameter vector format:
//! * `mlp`: pooled context features, proprio, and the masked-flattened chunk
//!   go through a GELU MLP.
//! * `fusion`: each valid action step is projected and fused with a projected
//!   proprio token, then `[context ∥ proprio ∥ action tokens ∥ value token]`
//!   passes through residual self-attention blocks; the value token's final
//!   embedding feeds the value head. Masked steps never enter the sequence.

mod features;
mod io;
mod nn;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chunk::ActionChunk;
use crate::env::EnvState;
use crate::error::{invalid, Error, Result};
use nn::{attention, attention_back, gelu_back, gelu_vec, Dense};

pub use features::{ContextFeatures, Featurizer};
pub use io::{read_tensor_file, tensor_checksum, write_tensor_file, TensorFile};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticVariant {
    #[default]
    Mlp,
    Fusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticConfig {
    pub variant: CriticVariant,
    pub horizon: usize,
    pub action_dim: usize,
    pub proprio_dim: usize,
    pub d_model: usize,
    /// Attention blocks (fusion only).
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Value-head hidden widths.
    pub hidden: Vec<usize>,
    pub context_tokens: usize,
    pub fourier_scale: f64,
    pub feature_seed: u64,
    pub init_scale: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            variant: CriticVariant::Mlp,
            horizon: 8,
            action_dim: 2,
            proprio_dim: 2,
            d_model: 32,
            layers: 2,
            heads: 2,
            ffn_dim: 64,
            hidden: vec![64, 64],
            context_tokens: 2,
            fourier_scale: 2.0,
            feature_seed: 0,
            init_scale: 1.0,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("horizon", self.horizon),
            ("action_dim", self.action_dim),
            ("proprio_dim", self.proprio_dim),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(format!("critic {name} must be positive")));
        }
        if self.hidden.contains(&0) {
            return Err(invalid("critic hidden layer of size 0"));
        }
        if !self.d_model.is_multiple_of(2) || !self.d_model.is_multiple_of(self.heads) {
            return Err(invalid(format!(
                "d_model {} must be even and divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.variant == CriticVariant::Fusion && self.layers == 0 {
            return Err(invalid("fusion critic needs at least one attention block"));
        }
        if !(self.fourier_scale.is_finite() && self.init_scale.is_finite() && self.init_scale > 0.0)
        {
            return Err(invalid("critic scales must be finite and positive"));
        }
        Ok(())
    }

    pub fn state_feature_dim(&self) -> usize {
        self.d_model + self.proprio_dim
    }

    pub fn featurizer(&self) -> Featurizer {
        Featurizer::new(
            self.context_tokens,
            self.d_model,
            self.proprio_dim,
            self.fourier_scale,
            self.feature_seed,
        )
    }
}

/// Named slice of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct AttnBlock {
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    ff1: Dense,
    ff2: Dense,
}

#[derive(Clone, Debug, PartialEq)]
struct FusionLayout {
    act: Dense,
    prop: Dense,
    fuse: Dense,
    pos: usize,
    value: usize,
    blocks: Vec<AttnBlock>,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    tensors: Vec<TensorInfo>,
    len: usize,
    fusion: Option<FusionLayout>,
    head: Vec<Dense>,
}

#[derive(Default)]
struct Alloc {
    len: usize,
    tensors: Vec<TensorInfo>,
}

impl Alloc {
    fn raw(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let offset = self.len;
        self.tensors.push(TensorInfo {
            name,
            offset,
            rows,
            cols,
        });
        self.len += rows * cols;
        offset
    }

    fn dense(&mut self, name: &str, inp: usize, out: usize) -> Dense {
        let w = self.raw(format!("{name}.w"), inp, out);
        let b = self.raw(format!("{name}.b"), 1, out);
        Dense { w, b, inp, out }
    }
}

impl Layout {
    fn new(cfg: &CriticConfig) -> Self {
        let mut alloc = Alloc::default();
        let d = cfg.d_model;
        let (fusion, head_in) = match cfg.variant {
            CriticVariant::Mlp => (
                None,
                cfg.state_feature_dim() + cfg.horizon * cfg.action_dim,
            ),
            CriticVariant::Fusion => {
                let act = alloc.dense("action_proj", cfg.action_dim, d);
                let prop = alloc.dense("proprio_proj", cfg.proprio_dim, d);
                let fuse = alloc.dense("fuse", 2 * d, d);
                let pos = alloc.raw("position".into(), cfg.horizon, d);
                let value = alloc.raw("value_token".into(), 1, d);
                let blocks = (0..cfg.layers)
                    .map(|l| AttnBlock {
                        q: alloc.dense(&format!("block{l}.q"), d, d),
                        k: alloc.dense(&format!("block{l}.k"), d, d),
                        v: alloc.dense(&format!("block{l}.v"), d, d),
                        o: alloc.dense(&format!("block{l}.o"), d, d),
                        ff1: alloc.dense(&format!("block{l}.ff1"), d, cfg.ffn_dim),
                        ff2: alloc.dense(&format!("block{l}.ff2"), cfg.ffn_dim, d),
                    })
                    .collect();
                (
                    Some(FusionLayout {
                        act,
                        prop,
                        fuse,
                        pos,
                        value,
                        blocks,
                    }),
                    d,
                )
            }
        };
        let mut widths = vec![head_in];
        widths.extend(&cfg.hidden);
        widths.push(1);
        let head = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| alloc.dense(&format!("head{i}"), w[0], w[1]))
            .collect();
        Self {
            tensors: alloc.tensors,
            len: alloc.len,
            fusion,
            head,
        }
    }
}

/// One critic's structure plus its flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticParams {
    config: CriticConfig,
    layout: Layout,
    featurizer: Featurizer,
    values: Vec<f64>,
}

/// Borrowed inputs for one `(state, chunk)` evaluation.
#[derive(Clone, Copy, Debug)]
pub struct CriticInput<'a> {
    pub context: &'a ContextFeatures,
    pub proprio: &'a [f64],
    pub chunk: &'a ActionChunk,
}

struct HeadCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

struct BlockCache {
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    weights: Vec<Vec<f64>>,
    o: Vec<f64>,
    x1: Vec<f64>,
    u: Vec<f64>,
    a: Vec<f64>,
}

struct FusionCache {
    actions: Vec<f64>,
    cat: Vec<f64>,
    seq_len: usize,
    valid: usize,
    blocks: Vec<BlockCache>,
}

enum Cache {
    Mlp(HeadCache),
    Fusion(FusionCache, HeadCache),
}

/// Mean-pooled context tokens followed by the proprio vector.
pub fn state_features(context: &ContextFeatures, proprio: &[f64]) -> Vec<f64> {
    let mut out = context.pooled();
    out.extend_from_slice(proprio);
    out
}

impl CriticParams {
    pub fn zeros(config: CriticConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let featurizer = config.featurizer();
        Ok(Self {
            values: vec![0.0; layout.len],
            layout,
            featurizer,
            config,
        })
    }

    /// Uniform `±init_scale/√fan_in` weights, zero biases.
    pub fn init<R: Rng + ?Sized>(config: CriticConfig, rng: &mut R) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let scale = params.config.init_scale;
        for t in &params.layout.tensors {
            if t.name.ends_with(".b") {
                continue;
            }
            let fan_in = if t.name.ends_with(".w") { t.rows } else { t.cols };
            let bound = scale / (fan_in as f64).sqrt();
            for v in &mut params.values[t.offset..t.offset + t.rows * t.cols] {
                *v = rng.random_range(-bound..=bound);
            }
        }
        Ok(params)
    }

    pub fn from_values(config: CriticConfig, values: Vec<f64>) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        if values.len() != params.values.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for a layout of {}",
                values.len(),
                params.values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("parameters must be finite"));
        }
        params.values = values;
        Ok(params)
    }

    pub fn config(&self) -> &CriticConfig {
        &self.config
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.layout.tensors
    }

    pub fn view(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.values[t.offset..t.offset + t.rows * t.cols])
    }

    pub fn view_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let t = self.layout.tensors.iter().find(|t| t.name == name)?.clone();
        Some(&mut self.values[t.offset..t.offset + t.rows * t.cols])
    }

    pub fn featurizer(&self) -> &Featurizer {
        &self.featurizer
    }

    pub fn context(&self, state: &EnvState) -> Result<ContextFeatures> {
        self.featurizer.featurize(state)
    }

    /// Scores one chunk at one environment state.
    pub fn score(&self, state: &EnvState, chunk: &ActionChunk) -> Result<f64> {
        let context = self.context(state)?;
        self.forward(&CriticInput {
            context: &context,
            proprio: &state.proprio,
            chunk,
        })
    }

    pub fn forward(&self, input: &CriticInput) -> Result<f64> {
        self.check_input(input)?;
        Ok(self.forward_cached(input).0)
    }

    pub fn forward_mlp(&self, state_features: &[f64], chunk: &ActionChunk) -> Result<f64> {
        if self.config.variant != CriticVariant::Mlp {
            return Err(invalid("forward_mlp on a fusion critic"));
        }
        if state_features.len() != self.config.state_feature_dim() {
            return Err(Error::ShapeMismatch(format!(
                "{} state features, expected {}",
                state_features.len(),
                self.config.state_feature_dim()
            )));
        }
        self.check_chunk(chunk)?;
        let mut x = state_features.to_vec();
        x.extend(chunk.masked_flat());
        Ok(self.head_forward(x).0)
    }

    pub fn forward_fusion(
        &self,
        context: &ContextFeatures,
        proprio: &[f64],
        chunk: &ActionChunk,
    ) -> Result<f64> {
        if self.config.variant != CriticVariant::Fusion {
            return Err(invalid("forward_fusion on an MLP critic"));
        }
        self.forward(&CriticInput {
            context,
            proprio,
            chunk,
        })
    }

    /// Adds `dq · ∇_θ q(input)` into `grad` and returns `q`.
    pub fn accumulate_grad(&self, input: &CriticInput, dq: f64, grad: &mut [f64]) -> Result<f64> {
        self.check_input(input)?;
        if grad.len() != self.values.len() {
            return Err(Error::ShapeMismatch("gradient buffer has the wrong length".into()));
        }
        let (q, cache) = self.forward_cached(input);
        if dq != 0.0 {
            self.backward_cached(input, cache, dq, grad);
        }
        Ok(q)
    }

    /// Gradient of `Σ_i upstream_i · q(inputs_i)` with respect to all parameters.
    pub fn backward(&self, inputs: &[CriticInput], upstream: &[f64]) -> Result<Vec<f64>> {
        if inputs.len() != upstream.len() {
            return Err(Error::ShapeMismatch("one upstream gradient per input".into()));
        }
        let mut grad = vec![0.0; self.values.len()];
        for (input, &dq) in inputs.iter().zip(upstream) {
            self.accumulate_grad(input, dq, &mut grad)?;
        }
        Ok(grad)
    }

    fn check_chunk(&self, chunk: &ActionChunk) -> Result<()> {
        let cfg = &self.config;
        if chunk.action_dim() != cfg.action_dim {
            return Err(Error::ShapeMismatch(format!(
                "chunk action dim {} != {}",
                chunk.action_dim(),
                cfg.action_dim
            )));
        }
        let ok = match cfg.variant {
            CriticVariant::Mlp => chunk.horizon() == cfg.horizon,
            CriticVariant::Fusion => chunk.horizon() <= cfg.horizon,
        };
        if !ok {
            return Err(Error::ShapeMismatch(format!(
                "chunk horizon {} incompatible with critic horizon {}",
                chunk.horizon(),
                cfg.horizon
            )));
        }
        Ok(())
    }

    fn check_input(&self, input: &CriticInput) -> Result<()> {
        let cfg = &self.config;
        if input.context.d_model != cfg.d_model || input.context.count != cfg.context_tokens {
            return Err(Error::ShapeMismatch(format!(
                "context {} × {} != {} × {}",
                input.context.count, input.context.d_model, cfg.context_tokens, cfg.d_model
            )));
        }
        if input.proprio.len() != cfg.proprio_dim {
            return Err(Error::ShapeMismatch(format!(
                "proprio dim {} != {}",
                input.proprio.len(),
                cfg.proprio_dim
            )));
        }
        self.check_chunk(input.chunk)
    }

    fn head_forward(&self, x: Vec<f64>) -> (f64, HeadCache) {
        let p = &self.values;
        let last = self.layout.head.len() - 1;
        let mut cache = HeadCache {
            inputs: Vec::with_capacity(last + 1),
            pre: Vec::with_capacity(last),
        };
        let mut h = x;
        for (i, layer) in self.layout.head.iter().enumerate() {
            let u = layer.affine(p, &h, 1);
            cache.inputs.push(h);
            if i == last {
                return (u[0], cache);
            }
            h = gelu_vec(&u);
            cache.pre.push(u);
        }
        unreachable!("value head has an output layer")
    }

    fn head_backward(&self, cache: &HeadCache, dq: f64, g: &mut [f64]) -> Vec<f64> {
        let p = &self.values;
        let last = self.layout.head.len() - 1;
        let mut dy = vec![dq];
        for i in (0..=last).rev() {
            let du = if i == last {
                dy
            } else {
                gelu_back(&cache.pre[i], &dy)
            };
            dy = self.layout.head[i].backward(p, &cache.inputs[i], &du, 1, g);
        }
        dy
    }

    fn forward_cached(&self, input: &CriticInput) -> (f64, Cache) {
        match &self.layout.fusion {
            None => {
                let mut x = state_features(input.context, input.proprio);
                x.extend(input.chunk.masked_flat());
                let (q, head) = self.head_forward(x);
                (q, Cache::Mlp(head))
            }
            Some(fl) => {
                let (z, fc) = self.fusion_forward(fl, input);
                let (q, head) = self.head_forward(z);
                (q, Cache::Fusion(fc, head))
            }
        }
    }

    fn backward_cached(&self, input: &CriticInput, cache: Cache, dq: f64, g: &mut [f64]) {
        match cache {
            Cache::Mlp(head) => {
                self.head_backward(&head, dq, g);
            }
            Cache::Fusion(fc, head) => {
                let dz = self.head_backward(&head, dq, g);
                let fl = self.layout.fusion.as_ref().expect("fusion layout");
                self.fusion_backward(fl, input, &fc, &dz, g);
            }
        }
    }

    fn fusion_forward(&self, fl: &FusionLayout, input: &CriticInput) -> (Vec<f64>, FusionCache) {
        let p = &self.values;
        let d = self.config.d_model;
        let t = input.context.count;
        let valid = input.chunk.valid_len();
        let actions: Vec<f64> = input.chunk.valid_steps().iter().flatten().copied().collect();
        let e = fl.act.affine(p, &actions, valid);
        let pe = fl.prop.affine(p, input.proprio, 1);
        let mut cat = Vec::with_capacity(valid * 2 * d);
        for k in 0..valid {
            cat.extend_from_slice(&e[k * d..(k + 1) * d]);
            cat.extend_from_slice(&pe);
        }
        let mut fused = fl.fuse.affine(p, &cat, valid);
        for (f, pos) in fused.iter_mut().zip(&p[fl.pos..fl.pos + valid * d]) {
            *f += pos;
        }
        let s = t + valid + 2;
        let mut x = Vec::with_capacity(s * d);
        x.extend_from_slice(&input.context.tokens);
        x.extend_from_slice(&pe);
        x.extend_from_slice(&fused);
        x.extend_from_slice(&p[fl.value..fl.value + d]);

        let mut blocks = Vec::with_capacity(fl.blocks.len());
        for b in &fl.blocks {
            let q = b.q.affine(p, &x, s);
            let k = b.k.affine(p, &x, s);
            let v = b.v.affine(p, &x, s);
            let (o, weights) = attention(&q, &k, &v, s, d, self.config.heads);
            let att = b.o.affine(p, &o, s);
            let x1: Vec<f64> = x.iter().zip(&att).map(|(a, b)| a + b).collect();
            let u = b.ff1.affine(p, &x1, s);
            let a = gelu_vec(&u);
            let f = b.ff2.affine(p, &a, s);
            let x2 = x1.iter().zip(&f).map(|(a, b)| a + b).collect();
            blocks.push(BlockCache {
                x,
                q,
                k,
                v,
                weights,
                o,
                x1,
                u,
                a,
            });
            x = x2;
        }
        let z = x[(s - 1) * d..s * d].to_vec();
        (
            z,
            FusionCache {
                actions,
                cat,
                seq_len: s,
                valid,
                blocks,
            },
        )
    }

    fn fusion_backward(
        &self,
        fl: &FusionLayout,
        input: &CriticInput,
        fc: &FusionCache,
        dz: &[f64],
        g: &mut [f64],
    ) {
        let p = &self.values;
        let d = self.config.d_model;
        let s = fc.seq_len;
        let mut dx = vec![0.0; s * d];
        dx[(s - 1) * d..].copy_from_slice(dz);
        for (b, c) in fl.blocks.iter().zip(&fc.blocks).rev() {
            let da = b.ff2.backward(p, &c.a, &dx, s, g);
            let du = gelu_back(&c.u, &da);
            let dx1_ff = b.ff1.backward(p, &c.x1, &du, s, g);
            let dx1: Vec<f64> = dx.iter().zip(&dx1_ff).map(|(a, b)| a + b).collect();
            let d_o = b.o.backward(p, &c.o, &dx1, s, g);
            let (dq, dk, dv) = attention_back(&c.q, &c.k, &c.v, &c.weights, &d_o, s, d);
            let from_q = b.q.backward(p, &c.x, &dq, s, g);
            let from_k = b.k.backward(p, &c.x, &dk, s, g);
            let from_v = b.v.backward(p, &c.x, &dv, s, g);
            dx = (0..s * d)
                .map(|i| dx1[i] + from_q[i] + from_k[i] + from_v[i])
                .collect();
        }
        let t = input.context.count;
        let valid = fc.valid;
        for (gv, dv) in g[fl.value..fl.value + d].iter_mut().zip(&dx[(s - 1) * d..]) {
            *gv += dv;
        }
        let dfused = &dx[(t + 1) * d..(t + 1 + valid) * d];
        for (gp, dp) in g[fl.pos..fl.pos + valid * d].iter_mut().zip(dfused) {
            *gp += dp;
        }
        let dcat = fl.fuse.backward(p, &fc.cat, dfused, valid, g);
        let mut de = Vec::with_capacity(valid * d);
        let mut dpe = dx[t * d..(t + 1) * d].to_vec();
        for k in 0..valid {
            de.extend_from_slice(&dcat[k * 2 * d..k * 2 * d + d]);
            for (a, b) in dpe.iter_mut().zip(&dcat[k * 2 * d + d..(k + 1) * 2 * d]) {
                *a += b;
            }
        }
        fl.act.backward(p, &fc.actions, &de, valid, g);
        fl.prop.backward(p, input.proprio, &dpe, 1, g);
    }
}

/// Two independently initialized critics scored by their minimum.
#[derive(Clone, Debug, PartialEq)]
pub struct TwinCritic {
    pub first: CriticParams,
    pub second: CriticParams,
}

impl TwinCritic {
    /// Each twin draws from its own stream of the seeded generator.
    pub fn init(config: CriticConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let first = CriticParams::init(config.clone(), &mut rng)?;
        rng.set_stream(2);
        rng.set_word_pos(0);
        let second = CriticParams::init(config, &mut rng)?;
        Ok(Self { first, second })
    }

    pub fn config(&self) -> &CriticConfig {
        self.first.config()
    }

    pub fn twins(&self) -> [&CriticParams; 2] {
        [&self.first, &self.second]
    }

    pub fn twins_mut(&mut self) -> [&mut CriticParams; 2] {
        [&mut self.first, &mut self.second]
    }

    /// `min(Q_1, Q_2)` for each chunk at one state.
    pub fn min_scores(&self, state: &EnvState, chunks: &[ActionChunk]) -> Result<Vec<f64>> {
        let context = self.first.context(state)?;
        chunks
            .iter()
            .map(|chunk| {
                let input = CriticInput {
                    context: &context,
                    proprio: &state.proprio,
                    chunk,
                };
                Ok(self.first.forward(&input)?.min(self.second.forward(&input)?))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

/// Relative-error floor so that near-zero gradients are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares [`CriticParams::backward`] against central differences of
/// `Σ_i upstream_i · q(inputs_i)` on `coordinates` randomly chosen parameters.
pub fn finite_diff_check<R: Rng + ?Sized>(
    params: &CriticParams,
    inputs: &[CriticInput],
    upstream: &[f64],
    fd_step: f64,
    coordinates: usize,
    rng: &mut R,
) -> Result<GradCheckReport> {
    if !(fd_step > 0.0 && fd_step.is_finite()) {
        return Err(invalid("finite-difference step must be positive"));
    }
    if inputs.is_empty() {
        return Err(invalid("finite-difference check needs at least one input"));
    }
    let analytic = params.backward(inputs, upstream)?;
    let loss = |p: &CriticParams| -> Result<f64> {
        let mut total = 0.0;
        for (input, &u) in inputs.iter().zip(upstream) {
            total += u * p.forward(input)?;
        }
        Ok(total)
    };
    let count = coordinates.min(params.len());
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        coordinates: count,
        max_rel_error: 0.0,
        worst_index: 0,
    };
    for i in index::sample(rng, params.len(), count) {
        let orig = probe.values[i];
        probe.values[i] = orig + fd_step;
        let plus = loss(&probe)?;
        probe.values[i] = orig - fd_step;
        let minus = loss(&probe)?;
        probe.values[i] = orig;
        let numeric = (plus - minus) / (2.0 * fd_step);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fusion_config() -> CriticConfig {
        CriticConfig {
            variant: CriticVariant::Fusion,
            horizon: 4,
            d_model: 8,
            ffn_dim: 12,
            hidden: vec![10, 6],
            ..CriticConfig::default()
        }
    }

    fn mlp_config() -> CriticConfig {
        CriticConfig {
            horizon: 4,
            d_model: 8,
            hidden: vec![16, 8],
            ..CriticConfig::default()
        }
    }

    fn sample_state(rng: &mut ChaCha8Rng) -> EnvState {
        EnvState {
            proprio: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            goal: vec![0.6, 0.6],
            step_index: 0,
        }
    }

    fn sample_chunk(rng: &mut ChaCha8Rng, h: usize, valid: usize) -> ActionChunk {
        let actions: Vec<Vec<f64>> = (0..valid)
            .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        ActionChunk::padded(&actions, h).unwrap()
    }

    #[test]
    fn init_deterministic_per_seed() {
        let a = CriticParams::init(fusion_config(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = CriticParams::init(fusion_config(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let c = CriticParams::init(fusion_config(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values(), c.values());
        let bad = CriticConfig {
            hidden: vec![8, 0],
            ..mlp_config()
        };
        assert!(CriticParams::init(bad, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let bound = 1.0 / (2.0f64).sqrt();
        assert!(a.view("action_proj.w").unwrap().iter().all(|v| v.abs() <= bound));
        assert!(a.view("fuse.b").unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_weights_output_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let state = sample_state(&mut rng);
        let chunk = sample_chunk(&mut rng, 4, 4);
        for cfg in [mlp_config(), fusion_config()] {
            let p = CriticParams::zeros(cfg).unwrap();
            assert_eq!(p.score(&state, &chunk).unwrap(), 0.0);
        }
        // zero value head alone suffices for the fusion variant
        let mut p = CriticParams::init(fusion_config(), &mut rng).unwrap();
        for name in ["head0.w", "head1.w", "head2.w"] {
            p.view_mut(name).unwrap().fill(0.0);
        }
        assert_eq!(p.score(&state, &chunk).unwrap(), 0.0);
    }

    #[test]
    fn masked_steps_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for cfg in [mlp_config(), fusion_config()] {
            let p = CriticParams::init(cfg, &mut rng).unwrap();
            for _ in 0..20 {
                let state = sample_state(&mut rng);
                let valid = rng.random_range(1..4);
                let chunk = sample_chunk(&mut rng, 4, valid);
                let mut actions = chunk.actions().to_vec();
                for a in &mut actions[valid..] {
                    *a = vec![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
                }
                let noisy = ActionChunk::new(actions, chunk.mask().to_vec()).unwrap();
                assert_eq!(p.score(&state, &chunk).unwrap(), p.score(&state, &noisy).unwrap());
            }
        }
    }

    #[test]
    fn single_valid_step_matches_length_one_chunk() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = CriticParams::init(fusion_config(), &mut rng).unwrap();
        let state = sample_state(&mut rng);
        let long = sample_chunk(&mut rng, 4, 1);
        let short = ActionChunk::full(vec![long.step(0).to_vec()]).unwrap();
        assert_eq!(short.horizon(), 1);
        assert_eq!(p.score(&state, &long).unwrap(), p.score(&state, &short).unwrap());
    }

    #[test]
    fn dead_proprio_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cfg = fusion_config();
        cfg.context_tokens = 0;
        let mut p = CriticParams::init(cfg, &mut rng).unwrap();
        p.view_mut("proprio_proj.w").unwrap().fill(0.0);
        let ctx = ContextFeatures::new(vec![], 0, 8).unwrap();
        let chunk = sample_chunk(&mut rng, 4, 3);
        let a = p.forward_fusion(&ctx, &[0.3, -0.2], &chunk).unwrap();
        let b = p.forward_fusion(&ctx, &[0.6, -0.4], &chunk).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn linear_critic_gradient_is_input() {
        let cfg = CriticConfig {
            hidden: vec![],
            horizon: 2,
            d_model: 4,
            context_tokens: 1,
            ..CriticConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = CriticParams::init(cfg, &mut rng).unwrap();
        let state = sample_state(&mut rng);
        let chunk = sample_chunk(&mut rng, 2, 2);
        let ctx = p.context(&state).unwrap();
        let input = CriticInput {
            context: &ctx,
            proprio: &state.proprio,
            chunk: &chunk,
        };
        let g = p.backward(&[input], &[1.0]).unwrap();
        let mut x = state_features(&ctx, &state.proprio);
        x.extend(chunk.masked_flat());
        assert_eq!(&g[..x.len()], &x[..]);
        assert_eq!(g[x.len()], 1.0);
        let sf = state_features(&ctx, &state.proprio);
        assert_eq!(p.forward_mlp(&sf, &chunk).unwrap(), p.forward(&input).unwrap());
        let r = finite_diff_check(&p, &[input], &[1.0], 1e-5, 200, &mut rng).unwrap();
        assert!(r.max_rel_error <= 1e-10, "{}", r.max_rel_error);
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = CriticParams::init(fusion_config(), &mut rng).unwrap();
        let state = sample_state(&mut rng);
        let chunk = sample_chunk(&mut rng, 4, 4);
        let ctx = p.context(&state).unwrap();
        let input = CriticInput {
            context: &ctx,
            proprio: &state.proprio,
            chunk: &chunk,
        };
        let q = p.forward(&input).unwrap();
        // d/dθ (q − y)² at q = y
        let g = p.backward(&[input], &[2.0 * (q - q)]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (cfg, seed) in [(mlp_config(), 11), (fusion_config(), 12)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = CriticParams::init(cfg, &mut rng).unwrap();
            let states: Vec<EnvState> = (0..3).map(|_| sample_state(&mut rng)).collect();
            let chunks: Vec<ActionChunk> = (0..3).map(|i| sample_chunk(&mut rng, 4, 2 + i % 3)).collect();
            let ctxs: Vec<ContextFeatures> = states.iter().map(|s| p.context(s).unwrap()).collect();
            let inputs: Vec<CriticInput> = (0..3)
                .map(|i| CriticInput {
                    context: &ctxs[i],
                    proprio: &states[i].proprio,
                    chunk: &chunks[i],
                })
                .collect();
            let r = finite_diff_check(&p, &inputs, &[0.7, -1.3, 0.4], 1e-5, 300, &mut rng).unwrap();
            assert!(r.max_rel_error <= 1e-4, "{:?}", r);
        }
        let p = CriticParams::zeros(mlp_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let state = sample_state(&mut rng);
        let chunk = sample_chunk(&mut rng, 4, 4);
        let ctx = p.context(&state).unwrap();
        let input = CriticInput {
            context: &ctx,
            proprio: &state.proprio,
            chunk: &chunk,
        };
        assert!(finite_diff_check(&p, &[input], &[1.0], 0.0, 10, &mut rng).is_err());
    }

    #[test]
    fn twins_differ() {
        let twins = TwinCritic::init(fusion_config(), 0).unwrap();
        assert_ne!(twins.first.values(), twins.second.values());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let state = sample_state(&mut rng);
        let chunk = sample_chunk(&mut rng, 4, 4);
        let a = twins.first.score(&state, &chunk).unwrap();
        let b = twins.second.score(&state, &chunk).unwrap();
        assert_ne!(a, b);
        let m = twins.min_scores(&state, &[chunk]).unwrap();
        assert_eq!(m[0], a.min(b));
    }

    #[test]
    fn wrong_dimensions_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = CriticParams::init(mlp_config(), &mut rng).unwrap();
        let state = sample_state(&mut rng);
        assert!(p.score(&state, &sample_chunk(&mut rng, 3, 3)).is_err());
        let f = CriticParams::init(fusion_config(), &mut rng).unwrap();
        assert!(f.score(&state, &sample_chunk(&mut rng, 5, 5)).is_err());
        assert!(f.forward_mlp(&[0.0; 10], &sample_chunk(&mut rng, 4, 4)).is_err());
    }
}
