//! Parameter storage, layer helpers, initialization, and AdamW.
//!
//! Parameters live in a `ParamStore` keyed by dotted names. A forward pass
//! binds names to graph leaves through `Ctx`, which records the binding so
//! gradients can be mapped back to names after `backward`.

use std::collections::BTreeMap;

use crate::error::{IdvidError, Result};
use crate::graph::{Grads, Graph, VarId};
use crate::rng;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(
            self.map.insert(name.to_string(), t).is_none(),
            "parameter {name} registered twice"
        );
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| IdvidError::InternalConsistency(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn set(&mut self, name: &str, t: Tensor) {
        self.map.insert(name.to_string(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Merge another store under a name prefix (for bundling sub-models).
    pub fn absorb(&mut self, prefix: &str, other: ParamStore) {
        for (name, t) in other.map {
            self.insert(&format!("{prefix}.{name}"), t);
        }
    }
}

/// Registers parameters with deterministic per-name init streams.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    seed: u64,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        ParamBuilder { store, seed }
    }

    fn gaussian(&mut self, name: &str, rows: usize, cols: usize, std: f64) {
        let mut r = rng::stream(self.seed, "param-init", &[rng::fnv1a(name.as_bytes())]);
        let mut t = Tensor::zeros(rows, cols);
        for v in t.data_mut() {
            *v = rng::normal(&mut r) * std;
        }
        t.snap_f32();
        self.store.insert(name, t);
    }

    /// Weight + bias for a dense layer; std 1/sqrt(fan_in).
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.gaussian(
            &format!("{prefix}.w"),
            fan_in,
            fan_out,
            1.0 / (fan_in as f64).sqrt(),
        );
        self.store
            .insert(&format!("{prefix}.b"), Tensor::zeros(1, fan_out));
    }

    /// Dense layer whose output starts at exactly zero.
    pub fn linear_zero(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.store
            .insert(&format!("{prefix}.w"), Tensor::zeros(fan_in, fan_out));
        self.store
            .insert(&format!("{prefix}.b"), Tensor::zeros(1, fan_out));
    }

    pub fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) {
        let fan_in = cin * k * k;
        self.gaussian(
            &format!("{prefix}.w"),
            cout,
            fan_in,
            1.0 / (fan_in as f64).sqrt(),
        );
        self.store
            .insert(&format!("{prefix}.b"), Tensor::zeros(cout, 1));
    }

    pub fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.store
            .insert(&format!("{prefix}.g"), Tensor::filled(1, d, 1.0));
        self.store
            .insert(&format!("{prefix}.b"), Tensor::zeros(1, d));
    }

    /// Free-form gaussian table (embeddings, positional tables, queries).
    pub fn table(&mut self, name: &str, rows: usize, cols: usize, std: f64) {
        self.gaussian(name, rows, cols, std);
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.store.insert(name, Tensor::zeros(rows, cols));
    }

    pub fn attention(&mut self, prefix: &str, d: usize, zero_out: bool) {
        self.linear(&format!("{prefix}.q"), d, d);
        self.linear(&format!("{prefix}.k"), d, d);
        self.linear(&format!("{prefix}.v"), d, d);
        if zero_out {
            self.linear_zero(&format!("{prefix}.o"), d, d);
        } else {
            self.linear(&format!("{prefix}.o"), d, d);
        }
    }

    pub fn ffn(&mut self, prefix: &str, d: usize, mult: usize) {
        self.linear(&format!("{prefix}.w1"), d, d * mult);
        self.linear(&format!("{prefix}.w2"), d * mult, d);
    }
}

/// Forward-pass context: a tape plus the name → leaf bindings made so far.
pub struct Ctx<'p> {
    pub g: Graph,
    params: &'p ParamStore,
    bound: BTreeMap<String, VarId>,
}

impl<'p> Ctx<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Ctx {
            g: Graph::new(),
            params,
            bound: BTreeMap::new(),
        }
    }

    /// Bind a named parameter as a leaf (memoized per name).
    pub fn p(&mut self, name: &str) -> VarId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let id = self.g.leaf(self.params.get(name).clone());
        self.bound.insert(name.to_string(), id);
        id
    }

    pub fn leaf(&mut self, t: Tensor) -> VarId {
        self.g.leaf(t)
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &String> {
        self.bound.keys()
    }

    /// Collect gradients for every bound parameter that received one.
    pub fn param_grads(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.bound {
            if let Some(g) = grads.get(id) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

pub fn linear(ctx: &mut Ctx, prefix: &str, x: VarId) -> VarId {
    let w = ctx.p(&format!("{prefix}.w"));
    let b = ctx.p(&format!("{prefix}.b"));
    let y = ctx.g.matmul(x, w);
    ctx.g.add_row_bias(y, b)
}

pub fn layer_norm(ctx: &mut Ctx, prefix: &str, x: VarId) -> VarId {
    let g = ctx.p(&format!("{prefix}.g"));
    let b = ctx.p(&format!("{prefix}.b"));
    ctx.g.layer_norm(x, g, b, LN_EPS)
}

/// Convolution over x[cin, h*w]; returns (y[cout, oh*ow], oh, ow).
pub fn conv2d(
    ctx: &mut Ctx,
    prefix: &str,
    x: VarId,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (VarId, usize, usize) {
    let weight = ctx.p(&format!("{prefix}.w"));
    let bias = ctx.p(&format!("{prefix}.b"));
    let cols = ctx.g.im2col(x, h, w, k, stride, pad);
    let y = ctx.g.matmul(weight, cols);
    let y = ctx.g.add_col_bias(y, bias);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    (y, oh, ow)
}

/// Multi-head attention; query rows attend over key/value rows.
pub fn attention(ctx: &mut Ctx, prefix: &str, q_in: VarId, kv_in: VarId, heads: usize) -> VarId {
    let d = ctx.g.value(q_in).cols();
    assert_eq!(d % heads, 0, "model dim {d} not divisible by {heads} heads");
    let dh = d / heads;
    let q = linear(ctx, &format!("{prefix}.q"), q_in);
    let k = linear(ctx, &format!("{prefix}.k"), kv_in);
    let v = linear(ctx, &format!("{prefix}.v"), kv_in);
    let mut head_outs = Vec::with_capacity(heads);
    for hi in 0..heads {
        let qh = ctx.g.slice_cols(q, hi * dh, dh);
        let kh = ctx.g.slice_cols(k, hi * dh, dh);
        let vh = ctx.g.slice_cols(v, hi * dh, dh);
        let kt = ctx.g.transpose(kh);
        let scores = ctx.g.matmul(qh, kt);
        let scores = ctx.g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = ctx.g.softmax_rows(scores);
        head_outs.push(ctx.g.matmul(attn, vh));
    }
    let merged = ctx.g.concat_cols(&head_outs);
    linear(ctx, &format!("{prefix}.o"), merged)
}

pub fn ffn(ctx: &mut Ctx, prefix: &str, x: VarId) -> VarId {
    let h = linear(ctx, &format!("{prefix}.w1"), x);
    let h = ctx.g.gelu(h);
    linear(ctx, &format!("{prefix}.w2"), h)
}

/// Cosine learning-rate schedule with warm restarts.
pub fn lr_cosine_restarts(
    step: u64,
    total: u64,
    warmup: u64,
    cycles: u64,
    base: f64,
    floor_frac: f64,
) -> f64 {
    if total == 0 {
        return base;
    }
    if step < warmup {
        return base * (step + 1) as f64 / warmup.max(1) as f64;
    }
    let span = (total.saturating_sub(warmup)).max(1);
    let cycles = cycles.max(1);
    let cycle_len = span.div_ceil(cycles).max(1);
    let within = ((step - warmup) % cycle_len) as f64 / cycle_len as f64;
    let floor = base * floor_frac;
    floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * within).cos())
}

/// Global L2 norm across a gradient set.
pub fn global_grad_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .map(|g| g.data().iter().map(|&x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scale all gradients so the global norm is at most `max_norm`.
pub fn clip_grads(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// AdamW with decoupled weight decay. Decay applies only to matrices with
/// both dims > 1 (weights and tables), never to biases or norm params.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name);
            let (rows, cols) = p.shape();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(rows, cols));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(rows, cols));
            let decay = if rows > 1 && cols > 1 {
                self.weight_decay
            } else {
                0.0
            };
            for i in 0..p.numel() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let pi = p.data()[i];
                p.data_mut()[i] = pi - lr * (mhat / (vhat.sqrt() + self.eps) + decay * pi);
            }
            p.snap_f32();
            m.snap_f32();
            v.snap_f32();
        }
    }

    /// Export moments as named tensors for checkpointing.
    pub fn export_state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (n, t) in &self.m {
            out.push((format!("opt.m.{n}"), t.clone()));
        }
        for (n, t) in &self.v {
            out.push((format!("opt.v.{n}"), t.clone()));
        }
        out.push((
            "opt.t".to_string(),
            Tensor::scalar(self.t as f64),
        ));
        out
    }

    pub fn import_state(&mut self, entries: &BTreeMap<String, Tensor>) {
        self.m.clear();
        self.v.clear();
        for (n, t) in entries {
            if let Some(rest) = n.strip_prefix("opt.m.") {
                self.m.insert(rest.to_string(), t.clone());
            } else if let Some(rest) = n.strip_prefix("opt.v.") {
                self.v.insert(rest.to_string(), t.clone());
            } else if n == "opt.t" {
                self.t = t.item() as u64;
            }
        }
    }
}
