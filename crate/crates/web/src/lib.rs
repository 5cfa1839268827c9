//! WebAssembly bindings for the browser demo in `www/`.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use ctxcompress::baselines::pyramid_budgets as pyramid;
use ctxcompress::compressor::{chunk_input, ChunkPlan};
use ctxcompress::divergence::{js_distance, js_divergence};
use ctxcompress::kvmem::KvMemory;
use ctxcompress::lap::{lap_compress, RetentionPolicy};
use ctxcompress::model::{ModelConfig, ToyTransformer};
use ctxcompress::taskgen::{generate, PromptLayout, TaskSpec};

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn normalize(w: &[f64]) -> Result<Vec<f64>, JsError> {
    if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(JsError::new("weights must be finite and non-negative"));
    }
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(JsError::new("weights sum to zero"));
    }
    Ok(w.iter().map(|x| x / total).collect())
}

#[derive(Serialize)]
struct Divergence {
    p: Vec<f64>,
    q: Vec<f64>,
    divergence: f64,
    distance: f64,
}

/// JS divergence (bits) and distance between two weight vectors, each
/// normalized to a distribution. Returns JSON.
#[wasm_bindgen]
pub fn divergence(p: &[f64], q: &[f64]) -> Result<String, JsError> {
    let (p, q) = (normalize(p)?, normalize(q)?);
    let d = Divergence {
        divergence: js_divergence(&p, &q).map_err(js_err)?,
        distance: js_distance(&p, &q).map_err(js_err)?,
        p,
        q,
    };
    serde_json::to_string(&d).map_err(js_err)
}

/// Per-layer token budgets of the pyramid baseline.
#[wasm_bindgen]
pub fn pyramid_budgets(num_layers: usize, total: usize, slope: f64, cap: usize) -> Result<Vec<u32>, JsError> {
    let budgets = pyramid(num_layers, total, slope, cap).map_err(js_err)?;
    Ok(budgets.into_iter().map(|b| b as u32).collect())
}

#[derive(Serialize)]
struct LayerRow {
    layer: usize,
    ratio: f64,
    retained: usize,
    tried: Vec<(f64, f64)>,
}

#[derive(Serialize)]
struct Profile {
    chunk_len: usize,
    forced: usize,
    final_js: f64,
    layers: Vec<LayerRow>,
}

/// Layer-wise adaptive pruning of one chunk of `num_demos` synthetic
/// demonstrations on a randomly initialized model. Returns JSON.
#[wasm_bindgen]
pub fn layer_profile(seed: u32, num_layers: usize, num_demos: usize, delta: f64) -> Result<String, JsError> {
    let spec = TaskSpec {
        seed: seed.into(),
        num_classes: 4,
        image_len: 8,
        question_len: 2,
        ..TaskSpec::default()
    };
    let cfg = ModelConfig {
        num_layers,
        num_heads: 2,
        d_model: 16,
        vocab_size: spec.layout().size,
        ..ModelConfig::default()
    };
    let model = ToyTransformer::init(cfg, seed.into()).map_err(js_err)?;
    let data = generate(&spec, 0, num_demos.max(1), 1).map_err(js_err)?;
    let plan = ChunkPlan::even(data.demos.len(), 1).map_err(js_err)?;
    let chunk = chunk_input(&data.demos, &plan, 0, &PromptLayout::standard());
    let policy = RetentionPolicy {
        delta,
        ..RetentionPolicy::default()
    };
    let (_, report) = lap_compress(&model, &KvMemory::for_model(&model), &chunk, &data.demos, &policy).map_err(js_err)?;
    let profile = Profile {
        chunk_len: report.chunk_len,
        forced: report.forced,
        final_js: report.final_js,
        layers: report
            .layers
            .iter()
            .map(|l| LayerRow {
                layer: l.layer,
                ratio: l.chosen_ratio,
                retained: l.retained,
                tried: l.attempts.iter().map(|a| (a.ratio, a.js)).collect(),
            })
            .collect(),
    };
    serde_json::to_string(&profile).map_err(js_err)
}
