//! Chunk-wise compression of a demonstration context, answering, and
//! measurement of the end-to-end information loss.

use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{baseline_chunk, BaselineSpec};
use crate::divergence::{aggregate_js, js_distance, AnswerDistributions, Reduction};
use crate::error::{Error, Result};
use crate::kvmem::{concat, extract_kv, role_counts, KvMemory, RoleCounts, TokenRole};
use crate::lap::{demo_answer_distributions, demo_rows, lap_compress, ChunkInput, PruneReport, RetentionPolicy};
use crate::model::{Capture, TokenBatch, ToyTransformer};
use crate::taskgen::{assemble_context, Demonstration, PromptLayout, ANSWER_END};

/// Order-preserving assignment of demonstrations to chunks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub budget: usize,
    /// Demo index ranges, one per chunk.
    pub chunks: Vec<Range<usize>>,
}

impl ChunkPlan {
    pub fn num_chunks(&self) -> usize {
        self.chunks.len()
    }

    /// Splits `n` demos into `k` near-equal consecutive chunks.
    pub fn even(n: usize, k: usize) -> Result<Self> {
        if k == 0 || k > n.max(1) {
            return Err(Error::Plan(format!("cannot split {n} demos into {k} chunks")));
        }
        let chunks = (0..k).map(|i| i * n / k..(i + 1) * n / k).filter(|r| !r.is_empty()).collect();
        Ok(Self { budget: 0, chunks })
    }
}

/// Greedily fills each chunk with demos while it stays within `budget` tokens.
pub fn plan_chunks(lengths: &[usize], budget: usize) -> Result<ChunkPlan> {
    let mut chunks = Vec::new();
    let mut start = 0;
    let mut used = 0;
    for (i, &len) in lengths.iter().enumerate() {
        if len > budget {
            return Err(Error::Plan(format!("demo {i} has {len} tokens, over the chunk budget {budget}")));
        }
        if used + len > budget {
            chunks.push(start..i);
            start = i;
            used = 0;
        }
        used += len;
    }
    if start < lengths.len() {
        chunks.push(start..lengths.len());
    }
    Ok(ChunkPlan { budget, chunks })
}

/// How each chunk is reduced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    Full,
    Adaptive(RetentionPolicy),
    Baseline(BaselineSpec),
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Self::Full => "full".into(),
            Self::Adaptive(p) if p.group_size > 1 => "adaptive_grouped".into(),
            Self::Adaptive(_) => "adaptive".into(),
            Self::Baseline(b) => b.kind.as_str().into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub method: String,
    pub chunks: Vec<PruneReport>,
    /// Entries per layer in the uncompressed memory.
    pub full_len: usize,
    /// Entries per layer after compression.
    pub compressed_len: Vec<usize>,
    /// Kept entries over `num_layers * full_len`.
    pub ratio: f64,
    pub wall_clock_ms: f64,
    pub kept_roles: Vec<RoleCounts>,
    pub pruned_roles: Vec<RoleCounts>,
}

impl CompressionReport {
    pub fn retained_total(&self) -> usize {
        self.compressed_len.iter().sum()
    }

    /// Mean over layers of the entries kept per layer.
    pub fn mean_context_len(&self) -> f64 {
        self.retained_total() as f64 / self.compressed_len.len().max(1) as f64
    }
}

/// Tokens and roles of chunk `k`; the system prefix only precedes chunk 0.
pub fn chunk_input(demos: &[Demonstration], plan: &ChunkPlan, k: usize, layout: &PromptLayout) -> ChunkInput {
    let bare = PromptLayout::bare();
    let ctx = assemble_context(&demos[plan.chunks[k].clone()], if k == 0 { layout } else { &bare });
    ChunkInput {
        id: k as u32,
        tokens: ctx.tokens,
        roles: ctx.roles,
    }
}

/// Uncompressed memory of the whole context in one pass.
pub fn full_memory(model: &ToyTransformer, demos: &[Demonstration], layout: &PromptLayout) -> Result<KvMemory> {
    let ctx = assemble_context(demos, layout);
    let empty = KvMemory::for_model(model);
    if ctx.tokens.is_empty() {
        return Ok(empty);
    }
    extract_kv(model, &empty, &ctx.tokens, &ctx.roles, 0)
}

/// Runs the chunk loop `M_k = reduce(M_{k-1}, C_k)` from an empty memory.
pub fn compress(
    model: &ToyTransformer,
    demos: &[Demonstration],
    method: &Method,
    plan: &ChunkPlan,
    layout: &PromptLayout,
    reduction: Reduction,
) -> Result<(KvMemory, CompressionReport)> {
    let covered: usize = plan.chunks.iter().map(ExactSizeIterator::len).sum();
    if covered != demos.len() || plan.chunks.windows(2).any(|w| w[0].end != w[1].start) {
        return Err(Error::Plan(format!("plan does not cover the {} demos in order", demos.len())));
    }
    let started = Instant::now();
    let mut memory = KvMemory::for_model(model);
    let mut reports = Vec::with_capacity(plan.num_chunks());
    let mut totals = RoleCounts::new();
    let mut full_len = 0;
    for k in 0..plan.num_chunks() {
        let chunk = chunk_input(demos, plan, k, layout);
        for &role in &chunk.roles {
            *totals.entry(role).or_default() += 1;
        }
        full_len += chunk.tokens.len();
        let chunk_demos = &demos[plan.chunks[k].clone()];
        let (next, report) = match method {
            Method::Full => {
                let kv = extract_kv(model, &memory, &chunk.tokens, &chunk.roles, chunk.id)?;
                (concat(&memory, &kv)?, None)
            }
            Method::Adaptive(policy) => {
                let (m, r) = lap_compress(model, &memory, &chunk, chunk_demos, policy)?;
                (m, Some(r))
            }
            Method::Baseline(spec) => {
                let (m, r) = baseline_chunk(model, &memory, &chunk, chunk_demos, spec, reduction)?;
                (m, Some(r))
            }
        };
        memory = next;
        reports.extend(report);
    }
    let compressed_len = memory.layer_lens();
    let kept_roles: Vec<RoleCounts> = memory.layers().iter().map(role_counts).collect();
    let pruned_roles = kept_roles
        .iter()
        .map(|kept| {
            TokenRole::ALL
                .iter()
                .map(|&r| (r, totals.get(&r).copied().unwrap_or(0) - kept.get(&r).copied().unwrap_or(0)))
                .filter(|&(_, n)| n > 0)
                .collect()
        })
        .collect();
    let denominator = (full_len * model.config().num_layers).max(1);
    let report = CompressionReport {
        method: method.label(),
        chunks: reports,
        full_len,
        ratio: if full_len == 0 { 1.0 } else { compressed_len.iter().sum::<usize>() as f64 / denominator as f64 },
        compressed_len,
        wall_clock_ms: started.elapsed().as_secs_f64() * 1e3,
        kept_roles,
        pruned_roles,
    };
    Ok((memory, report))
}

fn argmax(row: ndarray::ArrayView1<f64>) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding of up to `max_new` tokens for each query, in lockstep.
///
/// A row stops growing after it emits the answer terminator.
pub fn answer_batch(model: &ToyTransformer, memory: &KvMemory, queries: &[Vec<u32>], max_new: usize) -> Result<Vec<Vec<u32>>> {
    let mut rows = queries.to_vec();
    let mut outputs = vec![Vec::new(); rows.len()];
    let mut done = vec![false; rows.len()];
    for _ in 0..max_new {
        let batch = TokenBatch::after(memory, rows.clone())?;
        let trace = model.forward(memory, &batch, Capture::none())?;
        let last = batch.row_len() - 1;
        for (r, row) in rows.iter_mut().enumerate() {
            let token = argmax(trace.logits[r].row(last));
            if !done[r] {
                outputs[r].push(token);
                done[r] = token == ANSWER_END;
            }
            row.push(token);
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(outputs)
}

pub fn answer(model: &ToyTransformer, memory: &KvMemory, query: &[u32], max_new: usize) -> Result<Vec<u32>> {
    Ok(answer_batch(model, memory, &[query.to_vec()], max_new)?.remove(0))
}

/// Greedy answers for `eval` queries (image and question only).
pub fn predictions(model: &ToyTransformer, memory: &KvMemory, eval: &[Demonstration]) -> Result<Vec<Vec<u32>>> {
    if eval.is_empty() {
        return Err(Error::Empty("evaluation set is empty"));
    }
    let max_new = eval.iter().map(|d| d.answer.len()).max().unwrap_or(1);
    let queries: Vec<Vec<u32>> = eval.iter().map(Demonstration::query_tokens).collect();
    answer_batch(model, memory, &queries, max_new)
}

/// Exact-match accuracy of greedy answers.
pub fn accuracy(model: &ToyTransformer, memory: &KvMemory, eval: &[Demonstration]) -> Result<f64> {
    let preds = predictions(model, memory, eval)?;
    let hits = preds.iter().zip(eval).filter(|(p, d)| **p == d.answer).count();
    Ok(hits as f64 / eval.len() as f64)
}

/// Fraction of queries whose greedy answers agree under two memories.
pub fn agreement(model: &ToyTransformer, a: &KvMemory, b: &KvMemory, eval: &[Demonstration]) -> Result<f64> {
    let pa = predictions(model, a, eval)?;
    let pb = predictions(model, b, eval)?;
    Ok(pa.iter().zip(&pb).filter(|(x, y)| x == y).count() as f64 / eval.len() as f64)
}

/// Teacher-forced answer distributions of `eval` over `memory`.
pub fn eval_distributions(model: &ToyTransformer, memory: &KvMemory, eval: &[Demonstration]) -> Result<AnswerDistributions> {
    demo_rows(eval)?;
    demo_answer_distributions(model, memory, eval)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundEstimate {
    /// Mean JS divergence between full and compressed memory on eval demos.
    pub delta_hat: f64,
    /// Mean JS distance between full memory and its first chunk alone.
    pub epsilon_hat: f64,
    pub k: usize,
    pub delta: f64,
    pub gamma: f64,
    /// `(K - 1) * sqrt(delta) + epsilon_hat`.
    pub bound: f64,
    /// Post-hoc JS of each chunk on its own demonstrations.
    pub local_js: Vec<f64>,
}

impl BoundEstimate {
    pub fn new(delta_hat: f64, epsilon_hat: f64, delta: f64, report: &CompressionReport) -> Self {
        let k = report.chunks.len();
        Self {
            delta_hat,
            epsilon_hat,
            k,
            delta,
            gamma: delta_hat / delta,
            bound: k.saturating_sub(1) as f64 * delta.sqrt() + epsilon_hat,
            local_js: report.chunks.iter().map(|c| c.final_js).collect(),
        }
    }
}

pub fn measure_bound(
    model: &ToyTransformer,
    demos: &[Demonstration],
    eval: &[Demonstration],
    policy: &RetentionPolicy,
    plan: &ChunkPlan,
    layout: &PromptLayout,
) -> Result<(BoundEstimate, CompressionReport)> {
    if eval.is_empty() {
        return Err(Error::Empty("evaluation set is empty"));
    }
    let full = full_memory(model, demos, layout)?;
    let (compressed, report) = compress(model, demos, &Method::Adaptive(policy.clone()), plan, layout, policy.reduction)?;
    let p_full = eval_distributions(model, &full, eval)?;
    let p_comp = eval_distributions(model, &compressed, eval)?;
    let delta_hat = aggregate_js(&p_full, &p_comp, Reduction::Mean)?;

    let epsilon_hat = first_chunk_distance(model, &full, &p_full, demos, plan, layout, eval)?;
    let estimate = BoundEstimate::new(delta_hat, epsilon_hat, policy.delta, &report);
    Ok((estimate, report))
}

/// Mean JS distance between eval answers under the full memory and under its
/// first chunk alone.
pub fn first_chunk_distance(
    model: &ToyTransformer,
    full: &KvMemory,
    p_full: &AnswerDistributions,
    demos: &[Demonstration],
    plan: &ChunkPlan,
    layout: &PromptLayout,
    eval: &[Demonstration],
) -> Result<f64> {
    let first_len = plan
        .chunks
        .first()
        .map_or(0, |c| assemble_context(&demos[c.clone()], layout).tokens.len());
    let first = full.restrict_positions(0..first_len);
    let p_first = eval_distributions(model, &first, eval)?;
    let mut eps = 0.0;
    for (p, q) in p_full.probs.iter().zip(&p_first.probs) {
        eps += js_distance(p, q)?;
    }
    Ok(eps / p_full.probs.len().max(1) as f64)
}
