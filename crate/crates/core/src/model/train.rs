//! Manual backpropagation and a small optimizer loop.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{self, Heads, PackedProbs};
use super::{apply_rope, rms_norm, silu, softmax_vec, ToyTransformer, Weights};
use crate::error::{Error, Result};

/// A token sequence starting at position 0 with the positions whose next
/// token is scored by the loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub tokens: Vec<u32>,
    pub loss_positions: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub warmup_steps: usize,
    /// Cosine decay to 10% of the peak rate over `steps`.
    pub cosine_decay: bool,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            learning_rate: 3e-3,
            optimizer: Optimizer::adam(),
            batch_size: 4,
            warmup_steps: 50,
            cosine_decay: true,
            grad_clip: Some(1.0),
            seed: 0,
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

struct LayerCache {
    x: Array2<f64>,
    n1: Array2<f64>,
    inv1: Array1<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<PackedProbs>,
    heads: Array2<f64>,
    x_mid: Array2<f64>,
    n2: Array2<f64>,
    inv2: Array1<f64>,
    up: Array2<f64>,
    act: Array2<f64>,
}

fn rms_norm_backward(
    x: ArrayView2<f64>,
    gain: &Array1<f64>,
    inv: &Array1<f64>,
    dy: &Array2<f64>,
    dgain: &mut Array1<f64>,
) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut dx = Array2::zeros(x.raw_dim());
    for (((xr, dyr), mut dxr), &r) in x
        .axis_iter(Axis(0))
        .zip(dy.axis_iter(Axis(0)))
        .zip(dx.axis_iter_mut(Axis(0)))
        .zip(inv.iter())
    {
        let xhat = &xr * r;
        *dgain += &(&dyr * &xhat);
        let dxhat = &dyr * gain;
        let proj = dxhat.dot(&xhat) / d;
        dxr.assign(&((&dxhat - &(&xhat * proj)) * r));
    }
    dx
}

impl ToyTransformer {
    /// Mean next-token cross-entropy at `loss_positions`.
    pub fn loss(&self, example: &TrainExample) -> Result<f64> {
        let batch = super::TokenBatch::new(vec![example.tokens.clone()], 0)?;
        let memory = crate::kvmem::KvMemory::for_model(self);
        let trace = self.forward(&memory, &batch, super::Capture::none())?;
        let logits = &trace.logits[0];
        let mut total = 0.0;
        for &p in &example.loss_positions {
            let probs = softmax_vec(logits.row(p).as_slice().expect("contiguous"));
            total -= probs[example.tokens[p + 1] as usize].ln();
        }
        Ok(total / example.loss_positions.len() as f64)
    }

    /// Loss and analytic gradient for one sequence (no external memory).
    pub fn loss_and_grad(&self, example: &TrainExample) -> Result<(f64, Weights)> {
        let cfg = &self.config;
        let w = &self.weights;
        let t = example.tokens.len();
        if t < 2 || example.loss_positions.is_empty() {
            return Err(Error::Shape("training example needs tokens and loss positions".into()));
        }
        if let Some(&p) = example.loss_positions.iter().find(|&&p| p + 1 >= t) {
            return Err(Error::Shape(format!("loss position {p} has no next token")));
        }
        if t > cfg.max_position {
            return Err(Error::PositionOverflow {
                position: t - 1,
                max: cfg.max_position,
            });
        }
        let batch = super::TokenBatch::new(vec![example.tokens.clone()], 0)?;
        let positions = batch.positions();
        let mut x = self.embed(&batch)?.remove(0);
        let nh = cfg.num_heads;
        let heads_cfg = Heads {
            num_heads: nh,
            head_dim: cfg.head_dim(),
        };

        let mut caches = Vec::with_capacity(cfg.num_layers);
        for lw in &w.layers {
            let (n1, inv1) = rms_norm(x.view(), &lw.attn_norm);
            let mut q = n1.dot(&lw.wq);
            let mut k = n1.dot(&lw.wk);
            let v = n1.dot(&lw.wv);
            apply_rope(q.view_mut(), &positions, nh, cfg.rotary_width(), cfg.rope_base, 1.0);
            apply_rope(k.view_mut(), &positions, nh, cfg.rotary_width(), cfg.rope_base, 1.0);
            let mut probs = Vec::with_capacity(nh);
            let heads = attention::forward(&heads_cfg, &q, &k, &v, 0, Some(&mut probs), None);
            let x_mid = &x + &heads.dot(&lw.wo);
            let (n2, inv2) = rms_norm(x_mid.view(), &lw.mlp_norm);
            let up = n2.dot(&lw.w_up);
            let act = up.mapv(silu);
            let x_out = &x_mid + &act.dot(&lw.w_down);
            caches.push(LayerCache {
                x,
                n1,
                inv1,
                q,
                k,
                v,
                probs,
                heads,
                x_mid,
                n2,
                inv2,
                up,
                act,
            });
            x = x_out;
        }
        let (nf, invf) = rms_norm(x.view(), &w.final_norm);
        let logits = nf.dot(&w.unembed);

        let count = example.loss_positions.len() as f64;
        let mut loss = 0.0;
        let mut dlogits = Array2::<f64>::zeros(logits.raw_dim());
        for &p in &example.loss_positions {
            let probs = softmax_vec(logits.row(p).as_slice().expect("contiguous"));
            let target = example.tokens[p + 1] as usize;
            loss -= probs[target].ln();
            let mut row = dlogits.row_mut(p);
            for (dz, pr) in row.iter_mut().zip(&probs) {
                *dz += pr / count;
            }
            row[target] -= 1.0 / count;
        }
        loss /= count;
        if !loss.is_finite() {
            return Err(Error::NanLoss { step: 0 });
        }

        let mut g = Weights::zeros(cfg);
        g.unembed = nf.t().dot(&dlogits);
        let dnf = dlogits.dot(&w.unembed.t());
        let mut dx = rms_norm_backward(x.view(), &w.final_norm, &invf, &dnf, &mut g.final_norm);

        for (l, c) in caches.iter().enumerate().rev() {
            let lw = &w.layers[l];
            let gl = &mut g.layers[l];
            // MLP
            gl.w_down = c.act.t().dot(&dx);
            let dact = dx.dot(&lw.w_down.t());
            let dup = ndarray::Zip::from(&dact).and(&c.up).map_collect(|&da, &u| {
                let sig = 1.0 / (1.0 + (-u).exp());
                da * sig * (1.0 + u * (1.0 - sig))
            });
            gl.w_up = c.n2.t().dot(&dup);
            let dn2 = dup.dot(&lw.w_up.t());
            dx += &rms_norm_backward(c.x_mid.view(), &lw.mlp_norm, &c.inv2, &dn2, &mut gl.mlp_norm);

            // Attention
            gl.wo = c.heads.t().dot(&dx);
            let dheads = dx.dot(&lw.wo.t());
            let (mut dq, mut dk, dv) = attention::backward(&heads_cfg, &c.q, &c.k, &c.v, &c.probs, &dheads);
            apply_rope(dq.view_mut(), &positions, nh, cfg.rotary_width(), cfg.rope_base, -1.0);
            apply_rope(dk.view_mut(), &positions, nh, cfg.rotary_width(), cfg.rope_base, -1.0);
            gl.wq = c.n1.t().dot(&dq);
            gl.wk = c.n1.t().dot(&dk);
            gl.wv = c.n1.t().dot(&dv);
            let dn1 = dq.dot(&lw.wq.t()) + dk.dot(&lw.wk.t()) + dv.dot(&lw.wv.t());
            dx += &rms_norm_backward(c.x.view(), &lw.attn_norm, &c.inv1, &dn1, &mut gl.attn_norm);
        }
        for (row, &tok) in dx.axis_iter(Axis(0)).zip(&example.tokens) {
            let mut e = g.embed.row_mut(tok as usize);
            e += &row;
        }
        Ok((loss, g))
    }
}

struct OptimizerState {
    first: Weights,
    second: Weights,
    step: usize,
}

fn learning_rate(cfg: &TrainConfig, step: usize) -> f64 {
    let warm = if cfg.warmup_steps > 0 {
        ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
    } else {
        1.0
    };
    let decay = if cfg.cosine_decay && cfg.steps > 1 {
        let progress = step as f64 / (cfg.steps - 1) as f64;
        0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    } else {
        1.0
    };
    cfg.learning_rate * warm * decay
}

/// Trains `model` on `dataset` and returns the updated model with per-step losses.
pub fn train(model: &ToyTransformer, dataset: &[TrainExample], cfg: &TrainConfig) -> Result<(ToyTransformer, TrainLog)> {
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset is empty"));
    }
    if !(cfg.learning_rate >= 0.0) || cfg.batch_size == 0 {
        return Err(Error::Field {
            field: "train".into(),
            reason: "learning_rate must be >= 0 and batch_size >= 1".into(),
        });
    }
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState {
        first: Weights::zeros(model.config()),
        second: Weights::zeros(model.config()),
        step: 0,
    };
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let mut grad = Weights::zeros(model.config());
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let example = &dataset[rng.random_range(0..dataset.len())];
            let (l, g) = model.loss_and_grad(example).map_err(|e| match e {
                Error::NanLoss { .. } => Error::NanLoss { step },
                other => other,
            })?;
            loss += l;
            grad.zip_mut(&g, |_, acc, gi| acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b));
        }
        loss /= cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::NanLoss { step });
        }
        let inv = 1.0 / cfg.batch_size as f64;
        grad.visit_mut(|_, g| g.iter_mut().for_each(|v| *v *= inv));
        if let Some(clip) = cfg.grad_clip {
            let mut sq = 0.0;
            grad.visit(|_, _, g| sq += g.iter().map(|v| v * v).sum::<f64>());
            let norm = sq.sqrt();
            if norm > clip {
                let f = clip / norm;
                grad.visit_mut(|_, g| g.iter_mut().for_each(|v| *v *= f));
            }
        }
        apply_update(&mut model, &grad, &mut state, cfg, learning_rate(cfg, step));
        log.losses.push(loss);
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            log::info!("step {step:>5}  loss {loss:.5}");
        }
    }
    Ok((model, log))
}

fn apply_update(model: &mut ToyTransformer, grad: &Weights, state: &mut OptimizerState, cfg: &TrainConfig, lr: f64) {
    state.step += 1;
    match cfg.optimizer {
        Optimizer::Sgd { momentum } => {
            state.first.zip_mut(grad, |_, m, g| {
                m.iter_mut().zip(g).for_each(|(m, g)| *m = momentum * *m + g);
            });
            model.weights.zip_mut(&state.first, |_, w, m| {
                w.iter_mut().zip(m).for_each(|(w, m)| *w -= lr * m);
            });
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            state.first.zip_mut(grad, |_, m, g| {
                m.iter_mut().zip(g).for_each(|(m, g)| *m = beta1 * *m + (1.0 - beta1) * g);
            });
            state.second.zip_mut(grad, |_, v, g| {
                v.iter_mut().zip(g).for_each(|(v, g)| *v = beta2 * *v + (1.0 - beta2) * g * g);
            });
            let c1 = 1.0 - beta1.powi(state.step as i32);
            let c2 = 1.0 - beta2.powi(state.step as i32);
            // Fold the second moment into a step direction first so both
            // moment buffers can be borrowed while updating weights.
            let mut direction = state.first.clone();
            direction.zip_mut(&state.second, |_, m, v| {
                m.iter_mut()
                    .zip(v)
                    .for_each(|(m, v)| *m = (*m / c1) / ((v / c2).sqrt() + eps));
            });
            model.weights.zip_mut(&direction, |_, w, d| {
                w.iter_mut().zip(d).for_each(|(w, d)| *w -= lr * d);
            });
        }
    }
}
