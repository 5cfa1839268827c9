use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ctxcompress::compressor::accuracy;
use ctxcompress::container::{inspect, load_memory, save_model};
use ctxcompress::harness::{
    self, cell_data, prepare_model, run_compress, run_sweep, train_model, training_data, Axis,
    ExperimentConfig, MethodKind,
};
use ctxcompress::lap::RetentionPolicy;
use ctxcompress::model::ToyTransformer;
use ctxcompress::taskgen::{read_dataset, write_dataset, TaskData};
use ctxcompress::{Error, Result};

/// Chunk-wise KV-cache compression experiments on a toy transformer.
///
/// Set CTXCOMPRESS_THREADS to run seeds on several threads.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from the config's [model], [train] and [task] sections.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Train on the train split of this dataset instead of generating one.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to write.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Write a JSONL dataset (train, demo and eval splits).
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        train: usize,
        #[arg(long)]
        demos: Option<usize>,
        #[arg(long)]
        eval: Option<usize>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Compress each seed's demonstrations with every configured method.
    Compress {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `default`, `keep-all`, or a TOML file with a retention policy.
        #[arg(long)]
        policy: Option<String>,
        /// Also write the compressed memory of this method per seed.
        #[arg(long, value_parser = parse_method)]
        save_memory: Option<MethodKind>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact-match accuracy of a memory on a seed's evaluation queries.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// A memory container, or `none` for zero-shot.
        #[arg(long, default_value = "none")]
        memory: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sweep one axis over all seeds.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// delta, demos, chunk_budget, k, ratios or window.
        #[arg(long)]
        axis: Axis,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate result CSVs over seeds.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Plot-ready aggregated CSV to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Model utilities.
    Model {
        #[command(subcommand)]
        command: ModelCommand,
    },
}

#[derive(Subcommand)]
enum ModelCommand {
    /// Print a container's config and parameter counts.
    Inspect { path: PathBuf },
}

fn parse_method(s: &str) -> std::result::Result<MethodKind, String> {
    MethodKind::ALL
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| format!("unknown method `{s}`"))
}

fn load_config(path: Option<&Path>, checkpoint: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if checkpoint.is_some() {
        cfg.checkpoint = checkpoint;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn load_policy(arg: &str) -> Result<RetentionPolicy> {
    let policy = match arg {
        "default" => RetentionPolicy::default(),
        "keep-all" => RetentionPolicy::keep_all(),
        path => toml::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Field {
            field: "policy".into(),
            reason: e.to_string(),
        })?,
    };
    policy.validate()?;
    Ok(policy)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, data, out } => {
            let cfg = load_config(config.as_deref(), None)?;
            let data: TaskData = match data {
                Some(p) => read_dataset(BufReader::new(File::open(p)?))?,
                None => training_data(&cfg)?,
            };
            let (model, log) = train_model(&cfg, &data)?;
            save_model(&model, BufWriter::new(File::create(&out)?))?;
            let log_path = out.with_extension("train.json");
            serde_json::to_writer(BufWriter::new(File::create(&log_path)?), &log)?;
            println!(
                "wrote {} ({} parameters, final loss {:.5})",
                out.display(),
                model.num_params(),
                log.losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::GenData {
            config,
            seed,
            train,
            demos,
            eval,
            out,
        } => {
            let cfg = load_config(config.as_deref(), None)?;
            let spec = ctxcompress::taskgen::TaskSpec {
                seed: seed.unwrap_or(cfg.task.seed),
                ..cfg.task.clone()
            };
            let data = ctxcompress::taskgen::generate(
                &spec,
                train,
                demos.unwrap_or(cfg.num_demos),
                eval.unwrap_or(cfg.num_eval),
            )?;
            write_dataset(&data, BufWriter::new(File::create(&out)?))?;
            println!(
                "wrote {} ({} train, {} demo, {} eval)",
                out.display(),
                data.train.len(),
                data.demos.len(),
                data.eval.len()
            );
        }
        Command::Compress {
            config,
            checkpoint,
            policy,
            save_memory,
            out,
        } => {
            let mut cfg = load_config(config.as_deref(), checkpoint)?;
            if let Some(p) = policy {
                cfg.policy = load_policy(&p)?;
            }
            let (model, _) = prepare_model(&cfg)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.join("compress"));
            let (_, files) = run_compress(&model, &cfg, &dir, save_memory)?;
            print!("{}", harness::report(&files.results, None)?);
            println!("wrote {}", dir.display());
        }
        Command::Eval {
            config,
            checkpoint,
            memory,
            seed,
        } => {
            let cfg = load_config(config.as_deref(), checkpoint)?;
            let (model, _) = prepare_model(&cfg)?;
            let eval = cell_data(&cfg, seed, 0)?.eval;
            let acc = match memory.as_str() {
                "none" => harness::zero_shot_accuracy(&model, &eval)?,
                path => {
                    let mem = load_memory(BufReader::new(File::open(path)?))?;
                    check_memory(&model, &mem)?;
                    accuracy(&model, &mem, &eval)?
                }
            };
            println!("{}", serde_json::json!({ "seed": seed, "memory": memory, "queries": eval.len(), "accuracy": acc }));
        }
        Command::Sweep {
            config,
            checkpoint,
            axis,
            out,
        } => {
            let cfg = load_config(config.as_deref(), checkpoint)?;
            let (model, _) = prepare_model(&cfg)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.join(format!("sweep_{axis}")));
            let (_, files) = run_sweep(&model, &cfg, axis, &dir)?;
            print!("{}", harness::report(&files.results, None)?);
            println!("wrote {}", dir.display());
        }
        Command::Report { inputs, out } => {
            print!("{}", harness::report(&inputs, out.as_deref())?);
        }
        Command::Model {
            command: ModelCommand::Inspect { path },
        } => {
            let info = inspect(BufReader::new(File::open(&path)?))?;
            println!("{} container v{}: {}", info.kind, info.version, path.display());
            println!("{}", serde_json::to_string_pretty(&info.meta)?);
            for (group, n) in &info.groups {
                println!("{group:>12}  {n}");
            }
            println!("{:>12}  {} values in {} tensors", "total", info.num_values, info.num_tensors);
        }
    }
    Ok(())
}

fn check_memory(model: &ToyTransformer, mem: &ctxcompress::kvmem::KvMemory) -> Result<()> {
    let cfg = model.config();
    if mem.num_layers() != cfg.num_layers || mem.d_model() != cfg.d_model {
        return Err(Error::Shape(format!(
            "memory has {} layers of width {}, model has {} of width {}",
            mem.num_layers(),
            mem.d_model(),
            cfg.num_layers,
            cfg.d_model
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
