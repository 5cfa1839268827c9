//! Fixed-budget pruning strategies compared against adaptive pruning.
//!
//! All of them run on the same chunk pipeline and importance scores as
//! [`crate::lap`]; only the per-layer budget differs.

use serde::{Deserialize, Serialize};

use crate::divergence::{aggregate_js, Reduction};
use crate::error::{Error, Result};
use crate::kvmem::{KvMemory, LayerSelection};
use crate::lap::{analyze_chunk, demo_answer_distributions, ratio_budget, select_topk, ChunkInput, LayerPrune, ObservationWindow, PruneReport};
use crate::model::{HeadReduce, ToyTransformer};
use crate::taskgen::Demonstration;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Top `floor(ratio * S)` tokens by importance at every layer.
    UniformTopK,
    /// Linearly decreasing budgets from the bottom layer to the top one.
    Pyramid,
    /// The first `sink` tokens plus the most recent ones.
    InitialRecent,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [Self::UniformTopK, Self::Pyramid, Self::InitialRecent];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::UniformTopK => "uniform_topk",
            Self::Pyramid => "pyramid",
            Self::InitialRecent => "initial_recent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    /// Global retention ratio in (0, 1].
    pub ratio: f64,
    #[serde(default = "default_slope")]
    pub slope: f64,
    #[serde(default = "default_sink")]
    pub sink: usize,
}

fn default_slope() -> f64 {
    1.0
}

fn default_sink() -> usize {
    4
}

impl BaselineSpec {
    pub fn new(kind: BaselineKind, ratio: f64) -> Self {
        Self {
            kind,
            ratio,
            slope: default_slope(),
            sink: default_sink(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::Baseline(format!("ratio must lie in (0, 1], got {}", self.ratio)));
        }
        if !(self.slope >= 0.0) || !self.slope.is_finite() {
            return Err(Error::Baseline(format!("slope must be finite and >= 0, got {}", self.slope)));
        }
        Ok(())
    }

    /// Tokens kept per layer for a chunk of `chunk_len` tokens.
    pub fn layer_budgets(&self, num_layers: usize, chunk_len: usize) -> Result<Vec<usize>> {
        let per_layer = ratio_budget(self.ratio, chunk_len);
        if per_layer == 0 {
            return Err(Error::Baseline(format!(
                "ratio {} keeps no token of a {chunk_len}-token chunk",
                self.ratio
            )));
        }
        match self.kind {
            BaselineKind::UniformTopK | BaselineKind::InitialRecent => Ok(vec![per_layer; num_layers]),
            BaselineKind::Pyramid => pyramid_budgets(num_layers, per_layer * num_layers, self.slope, chunk_len),
        }
    }
}

/// Splits `total` over layers in proportion to `1 + slope * (L - 1 - l)`.
///
/// Shares are rounded by largest remainder (ties to the lower layer), every
/// layer gets at least one token and at most `cap`; overflow from capped
/// layers moves to the next layers up.
pub fn pyramid_budgets(num_layers: usize, total: usize, slope: f64, cap: usize) -> Result<Vec<usize>> {
    if num_layers == 0 || total < num_layers || total > num_layers * cap {
        return Err(Error::Baseline(format!(
            "cannot split {total} tokens over {num_layers} layers of at most {cap}"
        )));
    }
    let weights: Vec<f64> = (0..num_layers).map(|l| 1.0 + slope * (num_layers - 1 - l) as f64).collect();
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut budgets: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..num_layers).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = total - budgets.iter().sum::<usize>();
    for &l in order.iter().take(short) {
        budgets[l] += 1;
    }
    // Enforce the [1, cap] range while keeping the sum.
    for l in 0..num_layers {
        while budgets[l] < 1 {
            let donor = (0..num_layers).max_by_key(|&j| (budgets[j], j)).expect("layers");
            budgets[donor] -= 1;
            budgets[l] += 1;
        }
    }
    let mut excess = 0;
    for b in budgets.iter_mut() {
        if *b > cap {
            excess += *b - cap;
            *b = cap;
        }
    }
    for b in budgets.iter_mut() {
        let room = (cap - *b).min(excess);
        *b += room;
        excess -= room;
    }
    Ok(budgets)
}

/// The first `min(sink, budget)` indices and the last `budget - sink` ones.
pub fn initial_recent(chunk_len: usize, layer: usize, budget: usize, sink: usize) -> LayerSelection {
    let budget = budget.min(chunk_len);
    let sink = sink.min(budget);
    let recent = budget - sink;
    let mut kept: Vec<usize> = (0..sink).collect();
    kept.extend(chunk_len - recent..chunk_len);
    kept.dedup();
    LayerSelection { layer, kept_indices: kept }
}

/// Prunes one chunk with fixed budgets; same contract as [`crate::lap::lap_compress`].
pub fn baseline_chunk(
    model: &ToyTransformer,
    memory_prev: &KvMemory,
    chunk: &ChunkInput,
    demos: &[Demonstration],
    spec: &BaselineSpec,
    reduction: Reduction,
) -> Result<(KvMemory, PruneReport)> {
    spec.validate()?;
    let analysis = analyze_chunk(model, memory_prev, chunk, demos, ObservationWindow::Answer, HeadReduce::Mean)?;
    let s = analysis.chunk_len();
    let budgets = spec.layer_budgets(model.config().num_layers, s)?;
    let mut memory = analysis.full.clone();
    let mut layers = Vec::with_capacity(budgets.len());
    for (l, &budget) in budgets.iter().enumerate() {
        let selection = match spec.kind {
            BaselineKind::InitialRecent => initial_recent(s, l, budget, spec.sink),
            _ => select_topk(&analysis.scores.per_layer[l], l, budget as f64 / s as f64, &[]),
        };
        let retained = selection.kept_indices.len();
        analysis.apply(&mut memory, &selection);
        layers.push(LayerPrune {
            layer: l,
            chosen_ratio: retained as f64 / s as f64,
            retained,
            attempts: Vec::new(),
        });
    }
    let p_final = demo_answer_distributions(model, &memory, demos)?;
    let final_js = aggregate_js(&analysis.p_ori, &p_final, reduction)?;
    let report = PruneReport {
        chunk: chunk.id,
        chunk_len: s,
        forced: 0,
        layers,
        final_js,
    };
    Ok((memory, report))
}
