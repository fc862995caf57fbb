//! Parameter storage and the dense building blocks shared by encoder,
//! decoder and routing layers.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{ConvPadding, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a parameter contributes to the per-frame compute path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Used for every frame.
    Dense,
    /// Router weights; used for every frame.
    Router,
    /// Belongs to expert `expert` of MoE slot `slot`; used only when selected.
    Expert { slot: usize, expert: usize },
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub role: ParamRole,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, role: ParamRole) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, value, role });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Creates named parameters under a dotted prefix.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn param(&mut self, name: String, value: Tensor, role: ParamRole) -> ParamId {
        self.store.add(name, value, role)
    }

    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64, role: ParamRole) -> ParamId {
        let t = Tensor::uniform(shape, bound, self.rng);
        self.store.add(name, t, role)
    }
}

/// One forward pass: a graph plus lazily bound parameter leaves.
pub struct Ctx<'p> {
    pub g: Graph,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
    dropout: Option<ChaCha8Rng>,
    /// Rows pushed through an expert FFN during this pass.
    pub expert_rows: usize,
}

impl fmt::Debug for Ctx<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ctx")
            .field("nodes", &self.g.len())
            .field("trainable", &self.trainable)
            .field("dropout", &self.dropout.is_some())
            .finish()
    }
}

impl<'p> Ctx<'p> {
    /// Inference: parameters are constants, dropout disabled.
    pub fn eval(params: &'p ParamStore) -> Self {
        Ctx {
            g: Graph::new(),
            params,
            bound: vec![None; params.len()],
            trainable: false,
            dropout: None,
            expert_rows: 0,
        }
    }

    /// Training: parameters require gradients; dropout active when `dropout_seed` is set.
    pub fn train(params: &'p ParamStore, dropout_seed: Option<u64>) -> Self {
        Ctx {
            trainable: true,
            dropout: dropout_seed.map(ChaCha8Rng::seed_from_u64),
            ..Ctx::eval(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.leaf(self.params.get(id).clone(), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Uses `var` wherever parameter `id` is read.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound[id.0] = Some(var);
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        match self.dropout.as_mut() {
            Some(rng) if p > 0.0 => self.g.dropout(x, p, rng),
            _ => Ok(x),
        }
    }

    /// Gradients of every parameter read in this pass (after `backward`).
    pub fn param_grads(&self) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.g.grad(v).cloned()))
            .collect()
    }
}

fn default_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, in_dim: usize, out_dim: usize, role: ParamRole) -> Self {
        let bound = default_bound(in_dim);
        let w = init.uniform(format!("{name}.weight"), &[in_dim, out_dim], bound, role);
        let b = init.uniform(format!("{name}.bias"), &[out_dim], bound, role);
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.w), ctx.p(self.b));
        ctx.g.linear(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: init.param(format!("{name}.gamma"), Tensor::ones(&[dim]), ParamRole::Dense),
            beta: init.param(format!("{name}.beta"), Tensor::zeros(&[dim]), ParamRole::Dense),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        ctx.g.layer_norm(x, g, b)
    }
}

/// Position-wise feed-forward: linear, swish, dropout, linear.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, hidden: usize, dropout: f64, role: ParamRole) -> Self {
        FeedForward {
            up: Linear::new(init, &format!("{name}.up"), dim, hidden, role),
            down: Linear::new(init, &format!("{name}.down"), hidden, dim, role),
            dropout,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = self.up.forward(ctx, x)?;
        let h = ctx.g.swish(h);
        let h = ctx.dropout(h, self.dropout)?;
        self.down.forward(ctx, h)
    }

    pub fn param_count(&self) -> usize {
        self.up.param_count() + self.down.param_count()
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize) -> Self {
        let mk = |init: &mut Init<'_>, p: &str| Linear::new(init, &format!("{name}.{p}"), dim, dim, ParamRole::Dense);
        MultiHeadAttention {
            q: mk(init, "q"),
            k: mk(init, "k"),
            v: mk(init, "v"),
            out: mk(init, "out"),
            heads,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, query: Var, memory: Var, mask: &[bool]) -> Result<Var> {
        let q = self.q.forward(ctx, query)?;
        let k = self.k.forward(ctx, memory)?;
        let v = self.v.forward(ctx, memory)?;
        let a = ctx.g.masked_attention(q, k, v, mask, self.heads)?;
        self.out.forward(ctx, a)
    }
}

/// Conformer convolution module: pointwise + GLU, causal depthwise conv,
/// layer norm, swish, pointwise.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub pointwise_in: Linear,
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub norm: LayerNorm,
    pub pointwise_out: Linear,
}

impl ConvModule {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, kernel: usize) -> Self {
        let bound = default_bound(kernel);
        ConvModule {
            pointwise_in: Linear::new(init, &format!("{name}.pointwise_in"), dim, 2 * dim, ParamRole::Dense),
            depthwise: init.uniform(format!("{name}.depthwise.weight"), &[kernel, dim], bound, ParamRole::Dense),
            depthwise_bias: init.uniform(format!("{name}.depthwise.bias"), &[dim], bound, ParamRole::Dense),
            norm: LayerNorm::new(init, &format!("{name}.norm"), dim),
            pointwise_out: Linear::new(init, &format!("{name}.pointwise_out"), dim, dim, ParamRole::Dense),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = self.pointwise_in.forward(ctx, x)?;
        let h = ctx.g.glu(h)?;
        let (k, b) = (ctx.p(self.depthwise), ctx.p(self.depthwise_bias));
        let h = ctx.g.depthwise_conv1d(h, k, Some(b), ConvPadding::Causal)?;
        let h = self.norm.forward(ctx, h)?;
        let h = ctx.g.swish(h);
        self.pointwise_out.forward(ctx, h)
    }
}

/// Sinusoidal absolute position table `[len×dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim / 2 {
            let freq = (-(2.0 * i as f64) * (10000f64).ln() / dim as f64).exp();
            let a = pos as f64 * freq;
            data[pos * dim + 2 * i] = a.sin();
            data[pos * dim + 2 * i + 1] = a.cos();
        }
    }
    Tensor::new(vec![len, dim], data).expect("table shape")
}

/// Adds the position table to `x: [T×D]`.
pub fn add_positions(ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
    let (t, d) = ctx.g.value(x).dims2("positions")?;
    let pe = ctx.g.constant(sinusoidal_positions(t, d));
    ctx.g.add(x, pe)
}

/// Residual `x + scale * y`.
pub fn residual(ctx: &mut Ctx<'_>, x: Var, y: Var, scale: f64) -> Result<Var> {
    let y = if scale == 1.0 { y } else { ctx.g.mul(y, scale)? };
    ctx.g.add(x, y)
}

pub(crate) fn fresh_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
