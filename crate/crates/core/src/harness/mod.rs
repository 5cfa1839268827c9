//! Experiment orchestration: model preparation, compression runs and sweeps.

pub mod config;
pub mod table;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use crate::compressor::{
    accuracy, compress, eval_distributions, first_chunk_distance, full_memory, plan_chunks, predictions, BoundEstimate,
    ChunkPlan, CompressionReport,
};
use crate::container::{load_model, save_memory};
use crate::divergence::{aggregate_js, Reduction};
use crate::error::{Error, Result};
use crate::kvmem::{KvMemory, TokenRole};
use crate::lap::RetentionPolicy;
use crate::model::train::{train, TrainLog};
use crate::model::ToyTransformer;
use crate::taskgen::{generate, Demonstration, PromptLayout, TaskData, TaskSpec};

pub use config::{Axis, ExperimentConfig, MethodKind};
use table::{fmt_f64, fmt_list, Table, LAYER_COLUMNS, RESULT_COLUMNS, ROLE_COLUMNS};

/// Environment variable holding the number of worker threads for seeds.
pub const THREADS_ENV: &str = "CTXCOMPRESS_THREADS";

/// Loads the configured checkpoint, or trains a model from scratch.
pub fn prepare_model(cfg: &ExperimentConfig) -> Result<(ToyTransformer, Option<TrainLog>)> {
    if let Some(path) = &cfg.checkpoint {
        let model = load_model(BufReader::new(File::open(path)?))?;
        check_vocab(&model, &cfg.task)?;
        return Ok((model, None));
    }
    let data = training_data(cfg)?;
    let (model, log) = train_model(cfg, &data)?;
    Ok((model, Some(log)))
}

pub fn training_data(cfg: &ExperimentConfig) -> Result<TaskData> {
    let spec = TaskSpec {
        seed: cfg.train.seed,
        ..cfg.task.clone()
    };
    generate(&spec, cfg.train_examples, 0, 0)
}

pub fn train_model(cfg: &ExperimentConfig, data: &TaskData) -> Result<(ToyTransformer, TrainLog)> {
    let init = ToyTransformer::init(cfg.model_config(), cfg.train.seed)?;
    info!(
        "training {} parameters on {} sequences for {} steps",
        init.num_params(),
        data.train.len(),
        cfg.train.steps
    );
    train(&init, &data.train, &cfg.train)
}

pub fn check_vocab(model: &ToyTransformer, task: &TaskSpec) -> Result<()> {
    let need = task.layout().size;
    if model.config().vocab_size < need {
        return Err(Error::Field {
            field: "checkpoint".into(),
            reason: format!("model vocab {} is smaller than the task's {need}", model.config().vocab_size),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanSpec {
    Budget(usize),
    Even(usize),
}

/// Settings of one sweep cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub axis: String,
    pub value: String,
    pub num_demos: usize,
    pub plan: PlanSpec,
    pub policy: RetentionPolicy,
}

impl Cell {
    pub fn base(cfg: &ExperimentConfig) -> Self {
        Self {
            axis: "none".into(),
            value: String::new(),
            num_demos: cfg.num_demos,
            plan: cfg.num_chunks.map_or(PlanSpec::Budget(cfg.chunk_budget), PlanSpec::Even),
            policy: cfg.policy.clone(),
        }
    }

    pub fn along(cfg: &ExperimentConfig, axis: Axis) -> Vec<Self> {
        let base = Self {
            axis: axis.to_string(),
            ..Self::base(cfg)
        };
        let s = &cfg.sweep;
        let with = |value: String, f: &dyn Fn(&mut Cell)| {
            let mut c = base.clone();
            c.value = value;
            f(&mut c);
            c
        };
        match axis {
            Axis::Delta => s.delta.iter().map(|&d| with(fmt_f64(d), &|c| c.policy.delta = d)).collect(),
            Axis::Demos => s.demos.iter().map(|&n| with(n.to_string(), &|c| c.num_demos = n)).collect(),
            Axis::ChunkBudget => s
                .chunk_budget
                .iter()
                .map(|&b| with(b.to_string(), &|c| c.plan = PlanSpec::Budget(b)))
                .collect(),
            Axis::K => s.k.iter().map(|&k| with(k.to_string(), &|c| c.plan = PlanSpec::Even(k))).collect(),
            Axis::Ratios => s
                .ratios
                .iter()
                .map(|r| with(fmt_list(r), &|c| c.policy.ratios = r.clone()))
                .collect(),
            Axis::Window => s
                .window
                .iter()
                .map(|&w| with(w.as_str().into(), &|c| c.policy.window = w))
                .collect(),
        }
    }

    pub fn chunk_plan(&self, demos: &[Demonstration], layout: &PromptLayout) -> Result<ChunkPlan> {
        if demos.is_empty() {
            let budget = match self.plan {
                PlanSpec::Budget(b) => b,
                PlanSpec::Even(_) => 0,
            };
            return Ok(ChunkPlan {
                budget,
                chunks: Vec::new(),
            });
        }
        match self.plan {
            PlanSpec::Budget(b) => {
                let mut lens: Vec<usize> = demos.iter().map(Demonstration::len).collect();
                lens[0] += layout.system.len();
                plan_chunks(&lens, b)
            }
            PlanSpec::Even(k) => ChunkPlan::even(demos.len(), k.min(demos.len())),
        }
    }
}

/// One method's outcome within a cell.
#[derive(Debug, Clone, Serialize)]
pub struct MethodOutcome {
    pub method: String,
    pub accuracy: f64,
    pub agreement: f64,
    pub js_eval: f64,
    pub report: CompressionReport,
    pub bound: Option<BoundEstimate>,
    #[serde(skip)]
    pub memory: KvMemory,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellOutcome {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub num_demos: usize,
    pub num_chunks: usize,
    pub chunk_budget: usize,
    pub delta: f64,
    pub ratios: Vec<f64>,
    pub window: String,
    pub epsilon_hat: f64,
    pub methods: Vec<MethodOutcome>,
}

pub fn cell_data(cfg: &ExperimentConfig, seed: u64, num_demos: usize) -> Result<TaskData> {
    let spec = TaskSpec {
        seed,
        ..cfg.task.clone()
    };
    generate(&spec, 0, num_demos, cfg.num_eval)
}

/// Compresses one seed's demonstrations with every configured method and
/// evaluates each memory on the held-out queries.
pub fn run_cell(model: &ToyTransformer, cfg: &ExperimentConfig, cell: &Cell, seed: u64) -> Result<CellOutcome> {
    let data = cell_data(cfg, seed, cell.num_demos)?;
    let layout = PromptLayout::standard();
    let (demos, eval) = (&data.demos, &data.eval);
    let plan = cell.chunk_plan(demos, &layout)?;
    let full = full_memory(model, demos, &layout)?;
    let p_full = eval_distributions(model, &full, eval)?;
    let full_preds = predictions(model, &full, eval)?;
    let epsilon_hat = if demos.is_empty() {
        0.0
    } else {
        first_chunk_distance(model, &full, &p_full, demos, &plan, &layout, eval)?
    };

    // Baselines may be matched to the adaptive ratio, so they run last.
    let mut order: Vec<usize> = (0..cfg.methods.len()).collect();
    order.sort_by_key(|&i| cfg.methods[i].baseline().is_some());
    let mut outcomes: Vec<Option<MethodOutcome>> = vec![None; cfg.methods.len()];
    let mut adaptive_ratio = None;
    for i in order {
        let kind = cfg.methods[i];
        let ratio = cfg.baseline_ratio.or(adaptive_ratio).unwrap_or(1.0);
        let method = cfg.method(kind, &cell.policy, ratio);
        let (memory, report) = compress(model, demos, &method, &plan, &layout, cell.policy.reduction)?;
        if kind == MethodKind::Adaptive || (kind == MethodKind::AdaptiveGrouped && adaptive_ratio.is_none()) {
            adaptive_ratio = Some(report.ratio);
        }
        let p = eval_distributions(model, &memory, eval)?;
        let js_eval = aggregate_js(&p_full, &p, Reduction::Mean)?;
        let preds = predictions(model, &memory, eval)?;
        let hits = preds.iter().zip(eval).filter(|(p, d)| **p == d.answer).count();
        let agree = preds.iter().zip(&full_preds).filter(|(a, b)| a == b).count();
        let bound = matches!(kind, MethodKind::Adaptive | MethodKind::AdaptiveGrouped)
            .then(|| BoundEstimate::new(js_eval, epsilon_hat, cell.policy.delta, &report));
        outcomes[i] = Some(MethodOutcome {
            method: kind.as_str().into(),
            accuracy: hits as f64 / eval.len() as f64,
            agreement: agree as f64 / eval.len() as f64,
            js_eval,
            report,
            bound,
            memory,
        });
    }
    Ok(CellOutcome {
        axis: cell.axis.clone(),
        value: cell.value.clone(),
        seed,
        num_demos: demos.len(),
        num_chunks: plan.num_chunks(),
        chunk_budget: plan.budget,
        delta: cell.policy.delta,
        ratios: cell.policy.ratios.clone(),
        window: cell.policy.window.as_str().into(),
        epsilon_hat,
        methods: outcomes.into_iter().map(|o| o.expect("every method ran")).collect(),
    })
}

/// Zero-shot accuracy: the same queries with no context at all.
pub fn zero_shot_accuracy(model: &ToyTransformer, eval: &[Demonstration]) -> Result<f64> {
    accuracy(model, &KvMemory::for_model(model), eval)
}

/// Tidy rows for one cell: results, per-layer retention and role census.
pub fn cell_tables(outcome: &CellOutcome) -> (Table, Table, Table) {
    let mut results = Table::new(RESULT_COLUMNS);
    let mut layers = Table::new(LAYER_COLUMNS);
    let mut roles = Table::new(ROLE_COLUMNS);
    let key = |method: &str| {
        vec![
            outcome.axis.clone(),
            outcome.value.clone(),
            outcome.seed.to_string(),
            method.to_string(),
        ]
    };
    for m in &outcome.methods {
        let r = &m.report;
        let opt = |x: Option<f64>| x.map(fmt_f64).unwrap_or_default();
        let mut row = key(&m.method);
        row.extend([
            outcome.num_demos.to_string(),
            outcome.num_chunks.to_string(),
            outcome.chunk_budget.to_string(),
            fmt_f64(outcome.delta),
            fmt_list(&outcome.ratios),
            outcome.window.clone(),
            r.full_len.to_string(),
            r.retained_total().to_string(),
            fmt_f64(r.mean_context_len()),
            fmt_f64(r.ratio),
            fmt_f64(m.accuracy),
            fmt_f64(m.agreement),
            fmt_f64(m.js_eval),
            fmt_f64(outcome.epsilon_hat),
            opt(m.bound.as_ref().map(|b| b.gamma)),
            opt(m.bound.as_ref().map(|b| b.bound)),
            opt(m.bound.as_ref().and_then(|b| b.local_js.iter().copied().reduce(f64::max))),
        ]);
        results.push(row);
        for (l, &kept) in r.compressed_len.iter().enumerate() {
            let mut row = key(&m.method);
            row.extend([l.to_string(), r.full_len.to_string(), kept.to_string()]);
            layers.push(row);
            for role in TokenRole::ALL {
                let get = |counts: &[crate::kvmem::RoleCounts]| counts[l].get(&role).copied().unwrap_or(0);
                let (k, p) = (get(&r.kept_roles), get(&r.pruned_roles));
                if k + p > 0 {
                    let mut row = key(&m.method);
                    row.extend([l.to_string(), role.as_str().into(), k.to_string(), p.to_string()]);
                    roles.push(row);
                }
            }
        }
    }
    (results, layers, roles)
}

/// Runs `f` for every seed, on up to `THREADS_ENV` threads, keeping seed order.
pub fn for_seeds<T: Send>(seeds: &[u64], f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1)
        .clamp(1, seeds.len().max(1));
    if threads == 1 {
        return seeds.iter().map(|&s| f(s)).collect();
    }
    let chunks: Vec<&[u64]> = seeds.chunks(seeds.len().div_ceil(threads)).collect();
    let f = &f;
    let results: Vec<Result<Vec<T>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .iter()
            .map(|chunk| scope.spawn(move || chunk.iter().map(|&s| f(s)).collect::<Result<Vec<T>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(seeds.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), value)?;
    Ok(())
}

/// Files written by a run.
#[derive(Debug, Clone, Default)]
pub struct RunFiles {
    pub dir: PathBuf,
    pub results: Vec<PathBuf>,
    pub merged: Option<PathBuf>,
    pub layers: PathBuf,
    pub roles: PathBuf,
}

/// Compresses every seed's demos with every method at the base settings.
///
/// Writes `summary.csv` (one row per method and seed), `layers.csv`,
/// `roles.csv`, per-seed JSON reports and the config under `dir`.
pub fn run_compress(
    model: &ToyTransformer,
    cfg: &ExperimentConfig,
    dir: &Path,
    save_memory_of: Option<MethodKind>,
) -> Result<(Vec<CellOutcome>, RunFiles)> {
    fs::create_dir_all(dir.join("reports"))?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let cell = Cell::base(cfg);
    let outcomes = for_seeds(&cfg.seeds, |seed| run_cell(model, cfg, &cell, seed))?;
    let mut results = Table::new(RESULT_COLUMNS);
    let mut layers = Table::new(LAYER_COLUMNS);
    let mut roles = Table::new(ROLE_COLUMNS);
    for o in &outcomes {
        let (r, l, c) = cell_tables(o);
        results.extend(&r);
        layers.extend(&l);
        roles.extend(&c);
        write_json(&dir.join("reports").join(format!("seed_{}.json", o.seed)), o)?;
        if let Some(kind) = save_memory_of {
            if let Some(m) = o.methods.iter().find(|m| m.method == kind.as_str()) {
                let path = dir.join(format!("memory_seed_{}_{}.ctxc", o.seed, m.method));
                save_memory(&m.memory, BufWriter::new(File::create(path)?))?;
            }
        }
    }
    let files = RunFiles {
        dir: dir.into(),
        results: vec![dir.join("summary.csv")],
        merged: None,
        layers: dir.join("layers.csv"),
        roles: dir.join("roles.csv"),
    };
    results.write(&files.results[0])?;
    layers.write(&files.layers)?;
    roles.write(&files.roles)?;
    Ok((outcomes, files))
}

/// Iterates one axis for every seed, reusing `model`.
///
/// Writes `seed_<s>.csv` per seed, `merged.csv`, `layers.csv`, `roles.csv`,
/// per-seed JSON reports and the config under `dir`.
pub fn run_sweep(
    model: &ToyTransformer,
    cfg: &ExperimentConfig,
    axis: Axis,
    dir: &Path,
) -> Result<(Vec<Vec<CellOutcome>>, RunFiles)> {
    fs::create_dir_all(dir.join("reports"))?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let cells = Cell::along(cfg, axis);
    let per_seed = for_seeds(&cfg.seeds, |seed| {
        cells
            .iter()
            .map(|cell| {
                info!("sweep {axis}={} seed {seed}", cell.value);
                run_cell(model, cfg, cell, seed)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut files = RunFiles {
        dir: dir.into(),
        merged: Some(dir.join("merged.csv")),
        layers: dir.join("layers.csv"),
        roles: dir.join("roles.csv"),
        ..RunFiles::default()
    };
    let mut merged = Table::new(RESULT_COLUMNS);
    let mut layers = Table::new(LAYER_COLUMNS);
    let mut roles = Table::new(ROLE_COLUMNS);
    for (outcomes, &seed) in per_seed.iter().zip(&cfg.seeds) {
        let mut results = Table::new(RESULT_COLUMNS);
        for o in outcomes {
            let (r, l, c) = cell_tables(o);
            results.extend(&r);
            layers.extend(&l);
            roles.extend(&c);
        }
        let path = dir.join(format!("seed_{seed}.csv"));
        results.write(&path)?;
        merged.extend(&results);
        files.results.push(path);
        write_json(&dir.join("reports").join(format!("seed_{seed}.json")), outcomes)?;
    }
    merged.write(files.merged.as_ref().expect("set above"))?;
    layers.write(&files.layers)?;
    roles.write(&files.roles)?;
    Ok((per_seed, files))
}

/// Aggregates result CSVs into a text table and a plot-ready CSV.
pub fn report(inputs: &[PathBuf], out: Option<&Path>) -> Result<String> {
    let tables = inputs.iter().map(|p| Table::read(p)).collect::<Result<Vec<_>>>()?;
    let agg = table::aggregate(&tables)?;
    if let Some(out) = out {
        agg.write(out)?;
    }
    Ok(table::render(&agg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::train::TrainConfig;
    use crate::model::ModelConfig;

    pub(crate) fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            train_examples: 8,
            num_demos: 6,
            num_eval: 4,
            chunk_budget: 40,
            seeds: vec![0, 1],
            methods: MethodKind::ALL.to_vec(),
            model: ModelConfig {
                num_layers: 2,
                num_heads: 2,
                d_model: 8,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                steps: 2,
                log_every: 0,
                ..TrainConfig::default()
            },
            task: TaskSpec {
                num_classes: 3,
                image_vocab: 12,
                label_vocab: 4,
                image_len: 4,
                question_len: 2,
                train_demos_max: 4,
                ..TaskSpec::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn cells_follow_the_axis() {
        let cfg = tiny_config();
        for axis in Axis::ALL {
            let cells = Cell::along(&cfg, axis);
            assert_eq!(cells.len(), cfg.sweep.len(axis));
            assert!(cells.iter().all(|c| c.axis == axis.as_str()));
        }
        let k = Cell::along(&cfg, Axis::K);
        assert_eq!(k[2].plan, PlanSpec::Even(4));
        let d = Cell::along(&cfg, Axis::Delta);
        assert_eq!(d[0].value, "0.002");
        assert_eq!(d[0].policy.delta, 0.002);
    }

    #[test]
    fn compress_rows_are_methods_times_seeds() {
        let cfg = tiny_config();
        let (model, log) = prepare_model(&cfg).unwrap();
        assert!(log.is_some());
        let dir = tempfile::tempdir().unwrap();
        let (outcomes, files) = run_compress(&model, &cfg, dir.path(), Some(MethodKind::Adaptive)).unwrap();
        assert_eq!(outcomes.len(), 2);
        let t = Table::read(&files.results[0]).unwrap();
        assert_eq!(t.rows.len(), MethodKind::ALL.len() * cfg.seeds.len());
        let full = t.column("method").unwrap();
        let ratio = t.column("ratio").unwrap();
        for row in t.rows.iter().filter(|r| r[full] == "full") {
            assert_eq!(row[ratio], "1");
        }
        assert!(dir.path().join("memory_seed_0_adaptive.ctxc").exists());
        assert!(dir.path().join("reports/seed_1.json").exists());
        let text = report(&files.results, None).unwrap();
        assert!(text.contains("adaptive_grouped"));
    }

    #[test]
    fn keep_all_policy_reports_unit_ratio() {
        let mut cfg = tiny_config();
        cfg.policy = RetentionPolicy::keep_all();
        cfg.methods = vec![MethodKind::Adaptive];
        let (model, _) = prepare_model(&cfg).unwrap();
        let o = run_cell(&model, &cfg, &Cell::base(&cfg), 3).unwrap();
        assert_eq!(o.methods[0].report.ratio, 1.0);
        assert_eq!(o.methods[0].js_eval, 0.0);
    }

    #[test]
    fn zero_demos_means_empty_memory() {
        let mut cfg = tiny_config();
        cfg.num_demos = 0;
        let (model, _) = prepare_model(&cfg).unwrap();
        let o = run_cell(&model, &cfg, &Cell::base(&cfg), 0).unwrap();
        let eval = cell_data(&cfg, 0, 0).unwrap().eval;
        let zero = zero_shot_accuracy(&model, &eval).unwrap();
        for m in &o.methods {
            assert_eq!(m.report.retained_total(), 0);
            assert_eq!(m.accuracy, zero);
        }
    }

    #[test]
    fn sweep_writes_per_seed_and_merged() {
        let mut cfg = tiny_config();
        cfg.methods = vec![MethodKind::Full, MethodKind::Adaptive];
        cfg.sweep.delta = vec![0.01, 0.1];
        let (model, _) = prepare_model(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (_, files) = run_sweep(&model, &cfg, Axis::Delta, dir.path()).unwrap();
        assert_eq!(files.results.len(), 2);
        let merged = Table::read(files.merged.as_ref().unwrap()).unwrap();
        assert_eq!(merged.rows.len(), 2 * 2 * 2);
        let layers = Table::read(&files.layers).unwrap();
        assert_eq!(layers.rows.len(), merged.rows.len() * 2);
    }
}
