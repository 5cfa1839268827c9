//! A small pre-norm decoder-only transformer that runs against an external
//! ragged KV memory.
//!
//! Weights use the row-vector convention `y = x · W` with `W: [d_in, d_out]`.
//! Each block is `x += Attn(RmsNorm(x))`, then `x += Mlp(RmsNorm(x))`, where the
//! MLP is `SiLU(x · W_up) · W_down` with a 4x expansion.

mod attention;
mod rope;
pub mod train;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvmem::KvMemory;

pub(crate) use rope::rotate as apply_rope;

pub const RMS_EPS: f64 = 1e-6;
pub const MLP_EXPANSION: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_position: usize,
    pub rope_base: f64,
    /// Rotated features per head (even); the rest are position-free.
    /// Defaults to the whole head.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotary_dims: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            d_model: 32,
            vocab_size: 64,
            max_position: 4096,
            rope_base: 10_000.0,
            rotary_dims: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_layers < 2 {
            return bad(format!("num_layers must be >= 2, got {}", self.num_layers));
        }
        if self.num_heads == 0 || self.d_model == 0 || self.vocab_size == 0 || self.max_position == 0 {
            return bad("num_heads, d_model, vocab_size and max_position must be positive".into());
        }
        if self.d_model % self.num_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head_dim {} must be even for rotary encoding", self.head_dim()));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return bad(format!("rope_base must be positive, got {}", self.rope_base));
        }
        if let Some(r) = self.rotary_dims {
            if r % 2 != 0 || r > self.head_dim() {
                return bad(format!("rotary_dims {r} must be even and at most head_dim {}", self.head_dim()));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn rotary_width(&self) -> usize {
        self.rotary_dims.unwrap_or_else(|| self.head_dim())
    }

    pub fn d_hidden(&self) -> usize {
        MLP_EXPANSION * self.d_model
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub mlp_norm: Array1<f64>,
    pub w_up: Array2<f64>,
    pub w_down: Array2<f64>,
}

/// All trainable tensors. Also used as the gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub embed: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Array1<f64>,
    pub unembed: Array2<f64>,
}

impl Weights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let h = cfg.d_hidden();
        Self {
            embed: Array2::zeros((cfg.vocab_size, d)),
            layers: (0..cfg.num_layers)
                .map(|_| LayerWeights {
                    attn_norm: Array1::zeros(d),
                    wq: Array2::zeros((d, d)),
                    wk: Array2::zeros((d, d)),
                    wv: Array2::zeros((d, d)),
                    wo: Array2::zeros((d, d)),
                    mlp_norm: Array1::zeros(d),
                    w_up: Array2::zeros((d, h)),
                    w_down: Array2::zeros((h, d)),
                })
                .collect(),
            final_norm: Array1::zeros(d),
            unembed: Array2::zeros((d, cfg.vocab_size)),
        }
    }

    /// Visits every tensor as `(name, shape, flat data)` in a fixed order.
    pub fn visit(&self, mut f: impl FnMut(&str, &[usize], &[f64])) {
        f("embed", self.embed.shape(), self.embed.as_slice().expect("standard layout"));
        for (i, lw) in self.layers.iter().enumerate() {
            for (name, shape, data) in lw.tensors() {
                f(&format!("layers.{i}.{name}"), shape, data);
            }
        }
        f("final_norm", self.final_norm.shape(), self.final_norm.as_slice().expect("standard layout"));
        f("unembed", self.unembed.shape(), self.unembed.as_slice().expect("standard layout"));
    }

    /// Visits every tensor mutably, paired with the same tensor of `other`.
    pub fn zip_mut(&mut self, other: &Weights, mut f: impl FnMut(&str, &mut [f64], &[f64])) {
        f(
            "embed",
            self.embed.as_slice_mut().expect("standard layout"),
            other.embed.as_slice().expect("standard layout"),
        );
        for (i, (lw, ow)) in self.layers.iter_mut().zip(&other.layers).enumerate() {
            for ((name, dst), (_, _, src)) in lw.tensors_mut().into_iter().zip(ow.tensors()) {
                f(&format!("layers.{i}.{name}"), dst, src);
            }
        }
        f(
            "final_norm",
            self.final_norm.as_slice_mut().expect("standard layout"),
            other.final_norm.as_slice().expect("standard layout"),
        );
        f(
            "unembed",
            self.unembed.as_slice_mut().expect("standard layout"),
            other.unembed.as_slice().expect("standard layout"),
        );
    }

    /// Visits every tensor mutably.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        let shadow = self.clone();
        self.zip_mut(&shadow, |name, dst, _| f(name, dst));
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(|_, _, data| n += data.len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, _, data| ok &= data.iter().all(|v| v.is_finite()));
        ok
    }
}

impl LayerWeights {
    fn tensors(&self) -> [(&'static str, &[usize], &[f64]); 8] {
        fn m(a: &Array2<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        fn v(a: &Array1<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        [
            ("attn_norm", self.attn_norm.shape(), v(&self.attn_norm)),
            ("wq", self.wq.shape(), m(&self.wq)),
            ("wk", self.wk.shape(), m(&self.wk)),
            ("wv", self.wv.shape(), m(&self.wv)),
            ("wo", self.wo.shape(), m(&self.wo)),
            ("mlp_norm", self.mlp_norm.shape(), v(&self.mlp_norm)),
            ("w_up", self.w_up.shape(), m(&self.w_up)),
            ("w_down", self.w_down.shape(), m(&self.w_down)),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 8] {
        fn m(a: &mut Array2<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        fn v(a: &mut Array1<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        [
            ("attn_norm", v(&mut self.attn_norm)),
            ("wq", m(&mut self.wq)),
            ("wk", m(&mut self.wk)),
            ("wv", m(&mut self.wv)),
            ("wo", m(&mut self.wo)),
            ("mlp_norm", v(&mut self.mlp_norm)),
            ("w_up", m(&mut self.w_up)),
            ("w_down", m(&mut self.w_down)),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTransformer {
    config: ModelConfig,
    weights: Weights,
}

/// How per-head attention maps are collapsed into one map per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadReduce {
    #[default]
    Mean,
    Sum,
}

/// What a forward pass records besides logits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Capture {
    pub attention: bool,
    pub hidden: bool,
    pub kv: bool,
    pub heads: HeadReduce,
}

impl Capture {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn kv_only() -> Self {
        Self {
            kv: true,
            ..Self::default()
        }
    }

    pub fn attention_and_hidden() -> Self {
        Self {
            attention: true,
            hidden: true,
            ..Self::default()
        }
    }
}

/// Equal-length token rows that all start at the same absolute position.
///
/// Rows never attend to each other; each sees the shared memory plus its own
/// causal prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    rows: Vec<Vec<u32>>,
    start: usize,
}

impl TokenBatch {
    pub fn new(rows: Vec<Vec<u32>>, start: usize) -> Result<Self> {
        let len = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || len == 0 {
            return Err(Error::Shape("token batch must have at least one non-empty row".into()));
        }
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::Shape("token batch rows must have equal length".into()));
        }
        Ok(Self { rows, start })
    }

    /// Rows positioned directly after `memory`.
    pub fn after(memory: &KvMemory, rows: Vec<Vec<u32>>) -> Result<Self> {
        Self::new(rows, memory.next_position())
    }

    pub fn rows(&self) -> &[Vec<u32>] {
        &self.rows
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn row_len(&self) -> usize {
        self.rows[0].len()
    }

    pub fn positions(&self) -> Vec<usize> {
        (self.start..self.start + self.row_len()).collect()
    }
}

/// Output of a forward pass. Per-layer vectors have `num_layers` entries;
/// layers that were skipped or not captured hold empty vectors.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[row] -> [T, vocab]`
    pub logits: Vec<Array2<f64>>,
    /// `[layer][row] -> [T, memory_len[layer] + T]`, memory columns first.
    pub attention: Vec<Vec<Array2<f64>>>,
    /// `[layer][row] -> [T, d_model]`, the input of each layer.
    pub hidden: Vec<Vec<Array2<f64>>>,
    /// `[layer][row] -> (keys with rotary applied, values)`, each `[T, d_model]`.
    pub new_kv: Vec<Vec<(Array2<f64>, Array2<f64>)>>,
    pub memory_len: Vec<usize>,
    pub start_layer: usize,
}

impl ForwardTrace {
    /// Softmax of the logits at `(row, position)`.
    pub fn probs(&self, row: usize, position: usize) -> Vec<f64> {
        softmax_vec(self.logits[row].row(position).as_slice().expect("contiguous row"))
    }
}

pub fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

pub(crate) fn rms_norm(x: ArrayView2<f64>, gain: &Array1<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let inv: Array1<f64> = x
        .axis_iter(Axis(0))
        .map(|row| 1.0 / (row.dot(&row) / d + RMS_EPS).sqrt())
        .collect();
    let mut y = x.to_owned();
    for (mut row, &r) in y.axis_iter_mut(Axis(0)).zip(inv.iter()) {
        row *= r;
        row *= gain;
    }
    (y, inv)
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

impl ToyTransformer {
    /// Random initialization: gains at 1, projections `N(0, 1/d_in)`, residual
    /// outputs scaled down by `1/sqrt(2L)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let h = config.d_hidden();
        let resid = 1.0 / ((2 * config.num_layers) as f64).sqrt();
        let mut w = Weights::zeros(&config);
        fill_normal(&mut w.embed, 1.0, &mut rng);
        for lw in &mut w.layers {
            lw.attn_norm.fill(1.0);
            lw.mlp_norm.fill(1.0);
            fill_normal(&mut lw.wq, 1.0 / (d as f64).sqrt(), &mut rng);
            fill_normal(&mut lw.wk, 1.0 / (d as f64).sqrt(), &mut rng);
            fill_normal(&mut lw.wv, 1.0 / (d as f64).sqrt(), &mut rng);
            fill_normal(&mut lw.wo, resid / (d as f64).sqrt(), &mut rng);
            fill_normal(&mut lw.w_up, 1.0 / (d as f64).sqrt(), &mut rng);
            fill_normal(&mut lw.w_down, resid / (h as f64).sqrt(), &mut rng);
        }
        w.final_norm.fill(1.0);
        fill_normal(&mut w.unembed, 1.0 / (d as f64).sqrt(), &mut rng);
        Ok(Self { config, weights: w })
    }

    pub fn from_weights(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        let reference = Weights::zeros(&config);
        let mut shapes = Vec::new();
        reference.visit(|name, shape, _| shapes.push((name.to_owned(), shape.to_vec())));
        let mut i = 0;
        let mut mismatch = None;
        weights.visit(|name, shape, _| {
            match shapes.get(i) {
                Some((n, s)) if n == name && s == shape => {}
                _ => {
                    mismatch.get_or_insert_with(|| name.to_owned());
                }
            }
            i += 1;
        });
        if let Some(name) = mismatch.or((i != shapes.len()).then(|| "tensor count".to_owned())) {
            return Err(Error::Shape(format!("weights inconsistent with config at {name}")));
        }
        if !weights.all_finite() {
            return Err(Error::Shape("weights contain non-finite entries".into()));
        }
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Weights {
        &mut self.weights
    }

    pub fn num_params(&self) -> usize {
        self.weights.num_params()
    }

    fn check_batch(&self, memory: &KvMemory, batch: &TokenBatch) -> Result<()> {
        if memory.num_layers() != self.config.num_layers {
            return Err(Error::LayerMismatch {
                expected: self.config.num_layers,
                actual: memory.num_layers(),
            });
        }
        if memory.d_model() != self.config.d_model {
            return Err(Error::Shape(format!(
                "memory width {} vs d_model {}",
                memory.d_model(),
                self.config.d_model
            )));
        }
        if batch.start() < memory.next_position() {
            return Err(Error::PositionOrder {
                position: batch.start(),
                next: memory.next_position(),
            });
        }
        let last = batch.start() + batch.row_len() - 1;
        if last >= self.config.max_position {
            return Err(Error::PositionOverflow {
                position: last,
                max: self.config.max_position,
            });
        }
        Ok(())
    }

    pub fn embed(&self, batch: &TokenBatch) -> Result<Vec<Array2<f64>>> {
        let vocab = self.config.vocab_size;
        batch
            .rows()
            .iter()
            .map(|row| {
                if let Some(&bad) = row.iter().find(|&&t| t as usize >= vocab) {
                    return Err(Error::TokenOutOfRange { token: bad, vocab });
                }
                let idx: Vec<usize> = row.iter().map(|&t| t as usize).collect();
                Ok(self.weights.embed.select(Axis(0), &idx))
            })
            .collect()
    }

    /// Full forward of `batch` over `memory`. The memory is not modified.
    pub fn forward(&self, memory: &KvMemory, batch: &TokenBatch, capture: Capture) -> Result<ForwardTrace> {
        self.check_batch(memory, batch)?;
        let hidden = self.embed(batch)?;
        self.run_layers(memory, hidden, batch.positions(), 0, capture)
    }

    /// Resumes a forward pass at `start_layer` from that layer's captured input
    /// `hidden`. Memory layers below `start_layer` are ignored.
    pub fn forward_from_layer(
        &self,
        memory: &KvMemory,
        hidden: &[Array2<f64>],
        start_layer: usize,
        start_position: usize,
        capture: Capture,
    ) -> Result<ForwardTrace> {
        if start_layer >= self.config.num_layers {
            return Err(Error::LayerMismatch {
                expected: self.config.num_layers,
                actual: start_layer + 1,
            });
        }
        let len = hidden.first().map_or(0, |h| h.nrows());
        if hidden.is_empty() || len == 0 {
            return Err(Error::Shape("forward_from_layer needs at least one hidden row".into()));
        }
        if hidden.iter().any(|h| h.dim() != (len, self.config.d_model)) {
            return Err(Error::Shape(format!(
                "hidden rows must be [{len}, {}]",
                self.config.d_model
            )));
        }
        let batch = TokenBatch::new(vec![vec![0; len]], start_position)?;
        self.check_batch(memory, &batch)?;
        self.run_layers(memory, hidden.to_vec(), batch.positions(), start_layer, capture)
    }

    fn run_layers(
        &self,
        memory: &KvMemory,
        mut xs: Vec<Array2<f64>>,
        positions: Vec<usize>,
        start_layer: usize,
        capture: Capture,
    ) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let nl = cfg.num_layers;
        let mut trace = ForwardTrace {
            logits: Vec::with_capacity(xs.len()),
            attention: vec![Vec::new(); nl],
            hidden: vec![Vec::new(); nl],
            new_kv: vec![Vec::new(); nl],
            memory_len: memory.layer_lens(),
            start_layer,
        };
        for l in start_layer..nl {
            if capture.hidden {
                trace.hidden[l] = xs.clone();
            }
            let lw = &self.weights.layers[l];
            let mem = memory.layer(l);
            for x in xs.iter_mut() {
                let out = self.attention_block(lw, mem.keys.view(), mem.values.view(), x.view(), &positions, capture)?;
                *x += &out.projected;
                if let Some(attn) = out.attention {
                    trace.attention[l].push(attn);
                }
                if let Some(kv) = out.kv {
                    trace.new_kv[l].push(kv);
                }
                let (n2, _) = rms_norm(x.view(), &lw.mlp_norm);
                let mut up = n2.dot(&lw.w_up);
                up.mapv_inplace(silu);
                *x += &up.dot(&lw.w_down);
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { layer: l });
                }
            }
        }
        for x in &xs {
            let (nf, _) = rms_norm(x.view(), &self.weights.final_norm);
            trace.logits.push(nf.dot(&self.weights.unembed));
        }
        Ok(trace)
    }

    fn attention_block(
        &self,
        lw: &LayerWeights,
        mem_keys: ArrayView2<f64>,
        mem_values: ArrayView2<f64>,
        x: ArrayView2<f64>,
        positions: &[usize],
        capture: Capture,
    ) -> Result<AttentionOut> {
        let cfg = &self.config;
        let t = x.nrows();
        let n_mem = mem_keys.nrows();
        let heads = attention::Heads {
            num_heads: cfg.num_heads,
            head_dim: cfg.head_dim(),
        };
        let (n1, _) = rms_norm(x, &lw.attn_norm);
        let mut q = n1.dot(&lw.wq);
        let mut k = n1.dot(&lw.wk);
        let v = n1.dot(&lw.wv);
        apply_rope(q.view_mut(), positions, cfg.num_heads, cfg.rotary_width(), cfg.rope_base, 1.0);
        apply_rope(k.view_mut(), positions, cfg.num_heads, cfg.rotary_width(), cfg.rope_base, 1.0);

        let keys = ndarray::concatenate![Axis(0), mem_keys, k.view()];
        let values = ndarray::concatenate![Axis(0), mem_values, v.view()];
        let mut attn_acc = capture.attention.then(|| Array2::<f64>::zeros((t, n_mem + t)));
        let heads_out = attention::forward(&heads, &q, &keys, &values, n_mem, None, attn_acc.as_mut());
        if let (Some(acc), HeadReduce::Mean) = (attn_acc.as_mut(), capture.heads) {
            *acc /= cfg.num_heads as f64;
        }
        Ok(AttentionOut {
            projected: heads_out.dot(&lw.wo),
            attention: attn_acc,
            kv: capture.kv.then_some((k, v)),
        })
    }
}

struct AttentionOut {
    projected: Array2<f64>,
    attention: Option<Array2<f64>>,
    kv: Option<(Array2<f64>, Array2<f64>)>,
}

fn fill_normal<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>, std: f64, rng: &mut impl Rng) {
    let normal = Normal::new(0.0, std).expect("positive std");
    a.iter_mut().for_each(|v| *v = normal.sample(rng));
}

#[cfg(test)]
mod tests;
