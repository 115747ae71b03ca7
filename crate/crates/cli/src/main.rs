//! `rct`: generate synthetic rate-card data, train and evaluate cost
//! models, export attention heatmaps and embeddings, and run ablation
//! sweeps.
//!
//! Exit codes: 0 success, 2 config/usage errors, 3 numeric failures,
//! 4 compatibility failures (checkpoint/data mismatches).

mod config;

use std::fmt::Display;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::Serialize;

use rct_core::analysis::{self, AnalysisError, SweepKind};
use rct_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use rct_core::data::{load_dataset, save_dataset, split_dataset, Dataset};
use rct_core::embeddings::encode_inputs;
use rct_core::model::ModelRegistry;
use rct_core::preprocess::apply_preprocess;
use rct_core::synthgen;
use rct_core::training::{
    history_csv, mae, mae_percent, predict_costs, run_experiment, TrainError,
};

use config::{GenFileConfig, RunConfig, PRESET_SYNTH_STD};

pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: String) -> Self {
        CliError { code: 2, message }
    }

    pub fn numeric(message: String) -> Self {
        CliError { code: 3, message }
    }

    pub fn compat(message: String) -> Self {
        CliError { code: 4, message }
    }

    pub fn from_config_err(e: impl Display) -> Self {
        CliError::config(e.to_string())
    }

    fn from_train_err(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } | TrainError::ZeroDenominator => {
                CliError::numeric(e.to_string())
            }
            other => CliError::config(other.to_string()),
        }
    }

    fn from_checkpoint_err(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } => CliError::config(e.to_string()),
            other => CliError::compat(other.to_string()),
        }
    }

    fn from_analysis_err(e: AnalysisError) -> Self {
        match e {
            AnalysisError::MixedLengths(_)
            | AnalysisError::NoAttention(_)
            | AnalysisError::NoEmbedding(_) => CliError::compat(e.to_string()),
            AnalysisError::Train(t) => CliError::from_train_err(t),
            other => CliError::config(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "rct", version, about = "rate-card shipping-cost models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset plus a provenance sidecar.
    Generate {
        /// Generator config file ({"schema": .., "gen": ..}).
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Built-in benchmark config (synth-std).
        #[arg(long)]
        preset: Option<String>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the generator seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model variant and write checkpoint, history and summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the dataset path from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Override the output directory from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the training seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a dataset: prints MAE% and MAE.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Attention-importance heat map over a fixed-stratum dataset.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Encoder layer to analyze (default: last).
        #[arg(long)]
        layer: Option<usize>,
        /// Number of top interactions counted per attention map.
        #[arg(long, default_value_t = 5)]
        topk: usize,
        #[arg(long)]
        out: PathBuf,
        /// Keep only records with this many items.
        #[arg(long)]
        items: Option<usize>,
        /// Keep only records with this many charges.
        #[arg(long)]
        charges: Option<usize>,
    },
    /// Export pooled rate-card embeddings as CSV.
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per (value, seed) and report test MAE%.
    Sweep {
        /// heads | layers | datascale
        #[arg(long)]
        kind: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Generate {
            config,
            preset,
            out,
            seed,
        } => cmd_generate(config, preset, out, seed),
        Cmd::Train {
            config,
            data,
            out,
            seed,
        } => cmd_train(config, data, out, seed),
        Cmd::Eval { model, data } => cmd_eval(model, data),
        Cmd::Analyze {
            model,
            data,
            layer,
            topk,
            out,
            items,
            charges,
        } => cmd_analyze(model, data, layer, topk, out, items, charges),
        Cmd::Export { model, data, out } => cmd_export(model, data, out),
        Cmd::Sweep {
            kind,
            values,
            seeds,
            config,
            out,
        } => cmd_sweep(kind, values, seeds, config, out),
    }
}

fn create_dir(path: &std::path::Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn write_file(path: &std::path::Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn cmd_generate(
    config: Option<PathBuf>,
    preset: Option<String>,
    out: PathBuf,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut file = match (config, preset) {
        (Some(path), None) => GenFileConfig::load(&path)?,
        (None, Some(p)) if p == PRESET_SYNTH_STD => GenFileConfig::preset_synth_std(),
        (None, Some(p)) => return Err(CliError::config(format!("unknown preset '{p}'"))),
        (None, None) => {
            return Err(CliError::config(
                "either --config or --preset is required".into(),
            ))
        }
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };
    if let Some(s) = seed {
        file.gen.seed = s;
    }
    let ds = synthgen::generate(&file.gen, &file.schema).map_err(CliError::from_config_err)?;

    create_dir(&out)?;
    save_dataset(&ds, &out.join("data.jsonl")).map_err(CliError::from_config_err)?;
    file.schema
        .save(&out.join("schema.json"))
        .map_err(CliError::from_config_err)?;
    let sidecar = serde_json::to_string_pretty(&file).expect("config serializes");
    write_file(&out.join("gen_config.json"), &sidecar)?;

    let actuals: Vec<f64> = ds.records.iter().map(|r| r.actual_cost.unwrap()).collect();
    let heuristics: Vec<f64> = ds.records.iter().map(|r| r.heuristic_cost).collect();
    println!("wrote {} records to {}", ds.records.len(), out.display());
    match (
        mae_percent(&actuals, &actuals, &heuristics),
        mae_percent(&heuristics, &actuals, &heuristics),
    ) {
        (Ok(oracle), Ok(heuristic)) => {
            println!("oracle self-score: MAE% = {oracle}");
            println!("heuristic self-score: MAE% = {heuristic}");
        }
        _ => println!("heuristic equals actual everywhere; MAE% identities undefined"),
    }
    Ok(())
}

#[derive(Serialize)]
struct Summary {
    variant: String,
    test_mae_percent: f64,
    test_mae: f64,
    params_count: usize,
    best_val_mae_percent: f64,
    best_step: usize,
    steps: usize,
    /// The only non-reproducible section of the summary.
    timing: Timing,
}

#[derive(Serialize)]
struct Timing {
    wall_time_seconds: f64,
    finished_at_unix: u64,
}

fn cmd_train(
    config_path: PathBuf,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let started = Instant::now();
    let mut config = RunConfig::load(&config_path)?;
    if let Some(data) = data {
        if !data.exists() {
            return Err(CliError::config(format!(
                "data path does not exist: {}",
                data.display()
            )));
        }
        config.data.path = Some(data);
        config.data.generate = None;
        config.data.preset = None;
    }
    if let Some(s) = seed {
        config.train.seed = s;
    }
    let out = out
        .or(config.output.clone())
        .ok_or_else(|| CliError::config("no output directory (--out or config.output)".into()))?;
    config.validate()?;

    let (schema, ds) = config.resolve_data()?;
    let [ft, fv, fe] = config.data.split;
    let (train_ds, val_ds, test_ds) = split_dataset(&ds, (ft, fv, fe), config.data.split_seed)
        .map_err(CliError::from_config_err)?;

    let registry = ModelRegistry::<f32>::with_builtins();
    let result = run_experiment(
        &registry,
        &config.model,
        &config.train,
        &schema,
        &train_ds,
        &val_ds,
        &test_ds,
    )
    .map_err(CliError::from_train_err)?;

    create_dir(&out)?;
    save_checkpoint(result.model.as_ref(), &result.state, &out.join("model.ckpt"))
        .map_err(CliError::from_checkpoint_err)?;
    write_file(&out.join("history.csv"), &history_csv(&result.report.history))?;
    save_dataset(&test_ds, &out.join("test.jsonl")).map_err(CliError::from_config_err)?;

    let summary = Summary {
        variant: result.model.variant().to_string(),
        test_mae_percent: result.test_mae_percent,
        test_mae: result.test_mae,
        params_count: result.params_count,
        best_val_mae_percent: result.report.best_val_mae_percent,
        best_step: result.report.best_step,
        steps: result.report.steps,
        timing: Timing {
            wall_time_seconds: started.elapsed().as_secs_f64(),
            finished_at_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        },
    };
    write_file(
        &out.join("summary.json"),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    println!(
        "{}: test MAE% = {}, test MAE = {}, params = {}, steps = {}",
        summary.variant,
        summary.test_mae_percent,
        summary.test_mae,
        summary.params_count,
        summary.steps
    );
    println!("wrote {}", out.display());
    Ok(())
}

type LoadedModel = (
    Box<dyn rct_core::model::CostModel<f32>>,
    rct_core::checkpoint::CheckpointMeta,
    Vec<rct_core::embeddings::ModelInput<f32>>,
    Dataset,
);

/// Load a checkpoint plus a raw dataset validated against its schema, and
/// return model-ready inputs.
fn load_model_and_inputs(
    model_path: &std::path::Path,
    data_path: &std::path::Path,
) -> Result<LoadedModel, CliError> {
    let registry = ModelRegistry::<f32>::with_builtins();
    let (model, meta) =
        load_checkpoint(model_path, &registry).map_err(CliError::from_checkpoint_err)?;
    let ds = load_dataset(data_path, &meta.schema)
        .map_err(|e| CliError::compat(format!("data does not match checkpoint schema: {e}")))?;
    let encoded = apply_preprocess(&ds, &meta.preprocess).map_err(CliError::from_config_err)?;
    let inputs =
        encode_inputs::<f32>(&encoded, &meta.preprocess).map_err(CliError::from_config_err)?;
    Ok((model, meta, inputs, ds))
}

fn cmd_eval(model_path: PathBuf, data_path: PathBuf) -> Result<(), CliError> {
    let (model, meta, inputs, ds) = load_model_and_inputs(&model_path, &data_path)?;
    meta.ensure_schema(&ds.schema)
        .map_err(CliError::from_checkpoint_err)?;
    let predictions = predict_costs(model.as_ref(), &inputs, &meta.preprocess)
        .map_err(CliError::from_config_err)?;
    let actuals: Vec<f64> = ds
        .records
        .iter()
        .map(|r| {
            r.actual_cost
                .ok_or_else(|| CliError::compat("records lack actual_cost labels".into()))
        })
        .collect::<Result<_, _>>()?;
    let heuristics: Vec<f64> = ds.records.iter().map(|r| r.heuristic_cost).collect();
    let score =
        mae_percent(&predictions, &actuals, &heuristics).map_err(CliError::from_train_err)?;
    println!("MAE% = {score}");
    println!("MAE = {}", mae(&predictions, &actuals));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_analyze(
    model_path: PathBuf,
    data_path: PathBuf,
    layer: Option<usize>,
    topk: usize,
    out: PathBuf,
    items: Option<usize>,
    charges: Option<usize>,
) -> Result<(), CliError> {
    let (model, _meta, mut inputs, _ds) = load_model_and_inputs(&model_path, &data_path)?;
    if let Some(n) = items {
        inputs.retain(|i| i.items.len() == n);
    }
    if let Some(n) = charges {
        inputs.retain(|i| i.charges.len() == n);
    }
    if inputs.is_empty() {
        return Err(CliError::config(
            "no records left after stratum filtering".into(),
        ));
    }
    let layer = layer.unwrap_or_else(|| {
        model
            .attention_shape()
            .map(|(layers, _)| layers.saturating_sub(1))
            .unwrap_or(0)
    });
    let heatmap = analysis::attention_importance(model.as_ref(), &inputs, layer, topk)
        .map_err(CliError::from_analysis_err)?;
    write_file(&out, &heatmap.to_csv())?;
    println!(
        "wrote heat map over {} tokens x {} heads (layer {layer}, top-{topk}) to {}",
        heatmap.values.len(),
        heatmap.values.first().map_or(0, |r| r.len()),
        out.display()
    );
    Ok(())
}

fn cmd_export(model_path: PathBuf, data_path: PathBuf, out: PathBuf) -> Result<(), CliError> {
    let (model, _meta, inputs, _ds) = load_model_and_inputs(&model_path, &data_path)?;
    let rows = analysis::export_embeddings(model.as_ref(), &inputs, &out)
        .map_err(CliError::from_analysis_err)?;
    println!("wrote {rows} embedding rows to {}", out.display());
    Ok(())
}

fn cmd_sweep(
    kind: String,
    values: Vec<usize>,
    seeds: Vec<u64>,
    config_path: PathBuf,
    out: PathBuf,
) -> Result<(), CliError> {
    let kind: SweepKind = kind.parse().map_err(CliError::config)?;
    let config = RunConfig::load(&config_path)?;
    let (schema, ds) = config.resolve_data()?;
    let [ft, fv, fe] = config.data.split;
    let (train_ds, val_ds, test_ds) = split_dataset(&ds, (ft, fv, fe), config.data.split_seed)
        .map_err(CliError::from_config_err)?;

    let threads = std::env::var("RCT_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0);
    let report = analysis::sweep::<f32>(
        kind,
        &values,
        &seeds,
        &config.model,
        &config.train,
        &schema,
        &train_ds,
        &val_ds,
        &test_ds,
        threads,
    )
    .map_err(CliError::from_analysis_err)?;

    write_file(&out, &report.to_csv())?;
    for s in &report.summaries {
        println!(
            "{kind} = {}: test MAE% mean = {}, std = {}",
            s.value, s.mean, s.std
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}
