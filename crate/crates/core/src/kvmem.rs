//! Ragged per-layer key/value memory.
//!
//! Every layer holds its own list of entries so that layers can be pruned to
//! different lengths. Keys are stored with rotary encoding already applied at
//! the entry's original position; pruning never renumbers positions.

use std::collections::BTreeMap;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Capture, TokenBatch, ToyTransformer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenRole {
    System,
    Image,
    Question,
    Answer,
}

impl TokenRole {
    pub const ALL: [TokenRole; 4] = [Self::System, Self::Image, Self::Question, Self::Answer];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::System => "system",
            Self::Image => "image",
            Self::Question => "question",
            Self::Answer => "answer",
        }
    }

    pub fn code(self) -> i64 {
        self as i64
    }

    pub fn from_code(code: i64) -> Option<Self> {
        Self::ALL.get(usize::try_from(code).ok()?).copied()
    }
}

/// One layer's entries in storage order (strictly increasing position).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    pub keys: Array2<f64>,
    pub values: Array2<f64>,
    pub positions: Vec<usize>,
    pub roles: Vec<TokenRole>,
    pub chunks: Vec<u32>,
}

impl LayerKv {
    pub fn empty(d_model: usize) -> Self {
        Self {
            keys: Array2::zeros((0, d_model)),
            values: Array2::zeros((0, d_model)),
            positions: Vec::new(),
            roles: Vec::new(),
            chunks: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Entries at `indices` (assumed sorted and in bounds), preserving order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            keys: self.keys.select(Axis(0), indices),
            values: self.values.select(Axis(0), indices),
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            roles: indices.iter().map(|&i| self.roles[i]).collect(),
            chunks: indices.iter().map(|&i| self.chunks[i]).collect(),
        }
    }

    fn append(&self, other: &Self) -> Self {
        let mut positions = self.positions.clone();
        positions.extend_from_slice(&other.positions);
        let mut roles = self.roles.clone();
        roles.extend_from_slice(&other.roles);
        let mut chunks = self.chunks.clone();
        chunks.extend_from_slice(&other.chunks);
        Self {
            keys: concatenate![Axis(0), self.keys, other.keys],
            values: concatenate![Axis(0), self.values, other.values],
            positions,
            roles,
            chunks,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvMemory {
    layers: Vec<LayerKv>,
    d_model: usize,
    /// First position not yet occupied by the context this memory was built from.
    next_position: usize,
}

impl KvMemory {
    pub fn empty(num_layers: usize, d_model: usize) -> Self {
        Self {
            layers: (0..num_layers).map(|_| LayerKv::empty(d_model)).collect(),
            d_model,
            next_position: 0,
        }
    }

    pub fn for_model(model: &ToyTransformer) -> Self {
        Self::empty(model.config().num_layers, model.config().d_model)
    }

    /// Builds a memory from raw layers, checking the storage invariants.
    pub fn from_layers(layers: Vec<LayerKv>, d_model: usize, next_position: usize) -> Result<Self> {
        let mem = Self {
            layers,
            d_model,
            next_position,
        };
        mem.validate()?;
        Ok(mem)
    }

    pub fn validate(&self) -> Result<()> {
        for (l, layer) in self.layers.iter().enumerate() {
            let n = layer.len();
            if layer.keys.dim() != (n, self.d_model)
                || layer.values.dim() != (n, self.d_model)
                || layer.roles.len() != n
                || layer.chunks.len() != n
            {
                return Err(Error::Shape(format!("memory layer {l} has inconsistent lengths")));
            }
            if layer.positions.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Selection {
                    layer: l,
                    reason: "positions not strictly increasing".into(),
                });
            }
            if let Some(&last) = layer.positions.last() {
                if last >= self.next_position {
                    return Err(Error::PositionOrder {
                        position: last,
                        next: self.next_position,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn layer(&self, l: usize) -> &LayerKv {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[LayerKv] {
        &self.layers
    }

    pub fn layer_lens(&self) -> Vec<usize> {
        self.layers.iter().map(LayerKv::len).collect()
    }

    pub fn total_entries(&self) -> usize {
        self.layers.iter().map(LayerKv::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(LayerKv::is_empty)
    }

    pub(crate) fn replace_layer(&mut self, l: usize, layer: LayerKv) {
        self.layers[l] = layer;
    }

    /// Keeps only entries whose position lies in `range`, at every layer.
    pub fn restrict_positions(&self, range: std::ops::Range<usize>) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                let keep: Vec<usize> = (0..layer.len())
                    .filter(|&i| range.contains(&layer.positions[i]))
                    .collect();
                layer.select(&keep)
            })
            .collect();
        Self {
            layers,
            d_model: self.d_model,
            next_position: self.next_position,
        }
    }

    /// Same entries stored in a different order per layer. Only used to check
    /// that attention depends on stored positions rather than storage order.
    pub fn permuted_storage(&self, perms: &[Vec<usize>]) -> Self {
        let layers = self
            .layers
            .iter()
            .zip(perms)
            .map(|(layer, perm)| layer.select(perm))
            .collect();
        Self {
            layers,
            d_model: self.d_model,
            next_position: self.next_position,
        }
    }
}

/// Indices kept at one layer; sorted ascending, unique, in bounds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub layer: usize,
    pub kept_indices: Vec<usize>,
}

/// Computes the chunk's own KV entries conditioned on `memory_prev`.
///
/// The returned memory holds only the chunk's entries (all layers have
/// `chunk_tokens.len()` entries) and continues `memory_prev`'s positions.
pub fn extract_kv(
    model: &ToyTransformer,
    memory_prev: &KvMemory,
    chunk_tokens: &[u32],
    roles: &[TokenRole],
    chunk_id: u32,
) -> Result<KvMemory> {
    if roles.len() != chunk_tokens.len() {
        return Err(Error::Shape(format!(
            "{} roles for {} chunk tokens",
            roles.len(),
            chunk_tokens.len()
        )));
    }
    let start = memory_prev.next_position();
    if chunk_tokens.is_empty() {
        let mut m = KvMemory::for_model(model);
        m.next_position = start;
        return Ok(m);
    }
    let batch = TokenBatch::new(vec![chunk_tokens.to_vec()], start)?;
    let trace = model.forward(memory_prev, &batch, Capture::kv_only())?;
    let positions: Vec<usize> = (start..start + chunk_tokens.len()).collect();
    let layers = trace
        .new_kv
        .into_iter()
        .map(|mut rows| {
            let (keys, values) = rows.swap_remove(0);
            LayerKv {
                keys,
                values,
                positions: positions.clone(),
                roles: roles.to_vec(),
                chunks: vec![chunk_id; chunk_tokens.len()],
            }
        })
        .collect();
    Ok(KvMemory {
        layers,
        d_model: model.config().d_model,
        next_position: start + chunk_tokens.len(),
    })
}

/// Layer-wise concatenation. `b` must lie strictly after `a` at every layer.
pub fn concat(a: &KvMemory, b: &KvMemory) -> Result<KvMemory> {
    if a.num_layers() != b.num_layers() {
        return Err(Error::LayerMismatch {
            expected: a.num_layers(),
            actual: b.num_layers(),
        });
    }
    if a.d_model != b.d_model {
        return Err(Error::Shape(format!("d_model {} vs {}", a.d_model, b.d_model)));
    }
    let mut layers = Vec::with_capacity(a.num_layers());
    for (l, (la, lb)) in a.layers.iter().zip(&b.layers).enumerate() {
        if let (Some(&amax), Some(&bmin)) = (la.positions.last(), lb.positions.first()) {
            if bmin <= amax {
                return Err(Error::Interleave { layer: l });
            }
        }
        layers.push(la.append(lb));
    }
    Ok(KvMemory {
        layers,
        d_model: a.d_model,
        next_position: a.next_position.max(b.next_position),
    })
}

/// Returns `memory` with only the selected entries at `selection.layer`.
pub fn prune_layer(memory: &KvMemory, selection: &LayerSelection) -> Result<KvMemory> {
    let l = selection.layer;
    if l >= memory.num_layers() {
        return Err(Error::LayerMismatch {
            expected: memory.num_layers(),
            actual: l + 1,
        });
    }
    let n = memory.layers[l].len();
    let kept = &selection.kept_indices;
    if kept.is_empty() {
        return Err(Error::Selection {
            layer: l,
            reason: "a layer must retain at least one entry".into(),
        });
    }
    if kept.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Selection {
            layer: l,
            reason: "indices must be unique and ascending".into(),
        });
    }
    if let Some(&bad) = kept.iter().find(|&&i| i >= n) {
        return Err(Error::Selection {
            layer: l,
            reason: format!("index {bad} out of bounds for {n} entries"),
        });
    }
    let mut out = memory.clone();
    out.layers[l] = memory.layers[l].select(kept);
    Ok(out)
}

pub type RoleCounts = BTreeMap<TokenRole, usize>;

/// Per-layer role counts of what is kept and, relative to `before`, what was pruned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleCensus {
    pub kept: Vec<RoleCounts>,
    pub pruned: Vec<RoleCounts>,
}

impl RoleCensus {
    pub fn kept_total(&self) -> RoleCounts {
        sum_counts(&self.kept)
    }

    pub fn pruned_total(&self) -> RoleCounts {
        sum_counts(&self.pruned)
    }
}

fn sum_counts(per_layer: &[RoleCounts]) -> RoleCounts {
    let mut total = RoleCounts::new();
    for counts in per_layer {
        for (&role, &n) in counts {
            *total.entry(role).or_default() += n;
        }
    }
    total
}

pub fn role_counts(layer: &LayerKv) -> RoleCounts {
    let mut counts = RoleCounts::new();
    for &role in &layer.roles {
        *counts.entry(role).or_default() += 1;
    }
    counts
}

/// Role counts of `memory`; pruned counts are taken against `before` when given.
pub fn role_census(memory: &KvMemory, before: Option<&KvMemory>) -> RoleCensus {
    let kept: Vec<RoleCounts> = memory.layers.iter().map(role_counts).collect();
    let pruned = match before {
        Some(before) => before
            .layers
            .iter()
            .zip(&kept)
            .map(|(b, k)| {
                role_counts(b)
                    .into_iter()
                    .filter_map(|(role, n)| {
                        let left = n.saturating_sub(k.get(&role).copied().unwrap_or(0));
                        (left > 0).then_some((role, left))
                    })
                    .collect()
            })
            .collect(),
        None => vec![RoleCounts::new(); memory.num_layers()],
    };
    RoleCensus { kept, pruned }
}
