//! Attention-interaction analysis, embedding export and ablation sweeps.
//!
//! The heat map counts, per head, how often each token position appears as
//! the attended-to side of one of the `top_k` largest attention entries
//! across a dataset, then min-max normalizes the counters per head. Token
//! positions must be comparable across records, so the dataset must hold
//! (n_items, n_charges) fixed.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::data::Dataset;
use crate::embeddings::ModelInput;
use crate::encoder::ForwardCtx;
use crate::graph::Graph;
use crate::model::{CostModel, ModelConfig, ModelError, ModelRegistry};
use crate::schema::{FeatureSchema, GroupKind};
use crate::tensor::Scalar;
use crate::training::{run_experiment, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(
        "dataset mixes sequence lengths {0:?}; filter to a fixed (n_items, n_charges) stratum \
         (e.g. regenerate with item_count_range and charge_count_range pinned, or pass a \
         stratum filter) and retry"
    )]
    MixedLengths(Vec<(usize, usize)>),
    #[error("variant '{0}' does not expose attention maps")]
    NoAttention(String),
    #[error("layer {layer} out of range; model has {layers} layers")]
    BadLayer { layer: usize, layers: usize },
    #[error("variant '{0}' does not expose a pooled rate-card embedding")]
    NoEmbedding(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid sweep: {0}")]
    BadSweep(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Rows are token positions, columns are heads; values min-max normalized
/// per column into [0, 1], with constant columns collapsed to all zeros.
#[derive(Clone, Debug)]
pub struct HeatMap {
    pub labels: Vec<String>,
    /// values[token][head]
    pub values: Vec<Vec<f64>>,
}

impl HeatMap {
    pub fn to_csv(&self) -> String {
        let heads = self.values.first().map_or(0, |r| r.len());
        let mut out = String::from("token");
        for h in 0..heads {
            out.push_str(&format!(",head_{h}"));
        }
        out.push('\n');
        for (label, row) in self.labels.iter().zip(&self.values) {
            out.push_str(label);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Token labels for a fixed (n_items, n_charges) stratum.
pub fn token_labels(schema: &FeatureSchema, n_items: usize, n_charges: usize) -> Vec<String> {
    let mut labels = Vec::new();
    for kind in [GroupKind::Dimension, GroupKind::Route, GroupKind::Service] {
        for spec in schema.group(kind) {
            labels.push(format!("{kind}.{}", spec.name));
        }
    }
    for k in 1..=n_items {
        labels.push(format!("item_{k}"));
    }
    for k in 1..=n_charges {
        labels.push(format!("charge_{k}"));
    }
    labels.push("heuristic".into());
    labels
}

/// The `top_k` largest entries of an attention matrix as (i, j) pairs,
/// ties broken lexicographically by (i, j).
pub fn top_k_interactions<T: Scalar>(weights: &[Vec<T>], top_k: usize) -> Vec<(usize, usize)> {
    let mut entries: Vec<(usize, usize)> = (0..weights.len())
        .flat_map(|i| (0..weights[i].len()).map(move |j| (i, j)))
        .collect();
    entries.sort_by(|&(i1, j1), &(i2, j2)| {
        weights[i2][j2]
            .partial_cmp(&weights[i1][j1])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| (i1, j1).cmp(&(i2, j2)))
    });
    entries.truncate(top_k);
    entries
}

/// Per-token counters of one map: how often each column index j appears
/// among the `top_k` largest interactions.
pub fn head_counters<T: Scalar>(weights: &[Vec<T>], top_k: usize) -> Vec<usize> {
    let n = weights.len();
    let mut counters = vec![0usize; n];
    for (_, j) in top_k_interactions(weights, top_k) {
        counters[j] += 1;
    }
    counters
}

fn min_max_normalize(counters: &[usize]) -> Vec<f64> {
    let min = counters.iter().copied().min().unwrap_or(0);
    let max = counters.iter().copied().max().unwrap_or(0);
    if max == min {
        return vec![0.0; counters.len()];
    }
    counters
        .iter()
        .map(|&c| (c - min) as f64 / (max - min) as f64)
        .collect()
}

/// Most-attended-feature extraction on one encoder layer over a dataset
/// with fixed (n_items, n_charges).
pub fn attention_importance<T: Scalar>(
    model: &dyn CostModel<T>,
    inputs: &[ModelInput<T>],
    layer: usize,
    top_k: usize,
) -> Result<HeatMap, AnalysisError> {
    let Some((layers, heads)) = model.attention_shape() else {
        return Err(AnalysisError::NoAttention(model.variant().to_string()));
    };
    if layer >= layers {
        return Err(AnalysisError::BadLayer { layer, layers });
    }
    let strata: BTreeSet<(usize, usize)> = inputs
        .iter()
        .map(|i| (i.items.len(), i.charges.len()))
        .collect();
    if strata.len() != 1 {
        return Err(AnalysisError::MixedLengths(strata.into_iter().collect()));
    }
    let (n_items, n_charges) = strata.into_iter().next().unwrap();
    let seq_len = inputs[0].sequence_len(model.schema());

    let mut counters = vec![vec![0usize; seq_len]; heads];
    for input in inputs {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::capturing();
        model.predict(&mut g, input, &mut ctx)?;
        for map in ctx.attention_maps.iter().filter(|m| m.layer == layer) {
            for (counter, &inc) in counters[map.head]
                .iter_mut()
                .zip(head_counters(&map.weights, top_k).iter())
            {
                *counter += inc;
            }
        }
    }

    let columns: Vec<Vec<f64>> = counters.iter().map(|c| min_max_normalize(c)).collect();
    let labels = match model.variant() {
        // the flat transformer has no item/charge tokens
        "flat_transformer" => token_labels(model.schema(), 0, 0),
        _ => token_labels(model.schema(), n_items, n_charges),
    };
    let labels = if labels.len() == seq_len {
        labels
    } else {
        (0..seq_len).map(|i| format!("token_{i}")).collect()
    };
    let values = (0..seq_len)
        .map(|t| (0..heads).map(|h| columns[h][t]).collect())
        .collect();
    Ok(HeatMap { labels, values })
}

/// Write one CSV row per record: index, pooled embedding, actual cost,
/// heuristic cost. Returns the row count.
pub fn export_embeddings<T: Scalar>(
    model: &dyn CostModel<T>,
    inputs: &[ModelInput<T>],
    path: &Path,
) -> Result<usize, AnalysisError> {
    let mut rows = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(512) {
        let mut g = Graph::new();
        for input in chunk {
            let pooled = model
                .pooled_embedding(&mut g, input)?
                .ok_or_else(|| AnalysisError::NoEmbedding(model.variant().to_string()))?;
            rows.push((
                g.value(pooled).data().iter().map(|x| x.to_f64()).collect::<Vec<f64>>(),
                input.actual_cost,
                input.heuristic_cost,
            ));
        }
    }
    let d = rows.first().map_or(0, |(e, _, _)| e.len());
    let mut out = String::from("index");
    for j in 0..d {
        out.push_str(&format!(",e{j}"));
    }
    out.push_str(",actual_cost,heuristic_cost\n");
    for (i, (embedding, actual, heuristic)) in rows.iter().enumerate() {
        out.push_str(&format!("{i}"));
        for v in embedding {
            out.push_str(&format!(",{v}"));
        }
        match actual {
            Some(a) => out.push_str(&format!(",{a}")),
            None => out.push(','),
        }
        out.push_str(&format!(",{heuristic}\n"));
    }
    fs::write(path, out).map_err(|source| AnalysisError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(rows.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    Heads,
    Layers,
    DataScale,
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepKind::Heads => "heads",
            SweepKind::Layers => "layers",
            SweepKind::DataScale => "datascale",
        })
    }
}

impl FromStr for SweepKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "heads" => Ok(SweepKind::Heads),
            "layers" => Ok(SweepKind::Layers),
            "datascale" => Ok(SweepKind::DataScale),
            other => Err(format!(
                "unknown sweep kind '{other}' (expected heads, layers or datascale)"
            )),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: usize,
    pub seed: u64,
    pub test_mae_percent: f64,
}

#[derive(Clone, Debug)]
pub struct SweepSummary {
    pub value: usize,
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub kind: SweepKind,
    pub rows: Vec<SweepRow>,
    pub summaries: Vec<SweepSummary>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "kind,value,seed,test_mae_percent,mean_test_mae_percent,std_test_mae_percent\n",
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},,\n",
                self.kind, row.value, row.seed, row.test_mae_percent
            ));
        }
        for s in &self.summaries {
            out.push_str(&format!("{},{},,,{},{}\n", self.kind, s.value, s.mean, s.std));
        }
        out
    }
}

/// Deterministic per-cell seed so results are independent of scheduling.
pub fn cell_seed(seed: u64, value: usize) -> u64 {
    let mut z = seed ^ (value as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn subset_for_cell(train: &Dataset, size: usize, seed: u64) -> Dataset {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut indices: Vec<usize> = (0..train.records.len()).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    indices.truncate(size);
    Dataset {
        schema: train.schema.clone(),
        records: indices.iter().map(|&i| train.records[i].clone()).collect(),
        encoded: train.encoded,
    }
}

/// Train one model per (value, seed) cell and report test MAE% with
/// per-value mean and standard deviation. Cells run in parallel; each
/// derives its RNG stream from (seed, value) so the report does not depend
/// on scheduling.
#[allow(clippy::too_many_arguments)]
pub fn sweep<T: Scalar>(
    kind: SweepKind,
    values: &[usize],
    seeds: &[u64],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    schema: &FeatureSchema,
    train_ds: &Dataset,
    val_ds: &Dataset,
    test_ds: &Dataset,
    threads: Option<usize>,
) -> Result<SweepReport, AnalysisError> {
    if values.is_empty() || seeds.is_empty() {
        return Err(AnalysisError::BadSweep("values and seeds must be non-empty".into()));
    }
    for &v in values {
        match kind {
            SweepKind::Heads => {
                if v == 0 || model_cfg.d_model % v != 0 {
                    return Err(AnalysisError::BadSweep(format!(
                        "head count {v} does not divide d_model {}",
                        model_cfg.d_model
                    )));
                }
            }
            SweepKind::Layers => {
                if v == 0 {
                    return Err(AnalysisError::BadSweep("layer count must be positive".into()));
                }
            }
            SweepKind::DataScale => {
                if v == 0 || v > train_ds.records.len() {
                    return Err(AnalysisError::BadSweep(format!(
                        "train size {v} out of range 1..={}",
                        train_ds.records.len()
                    )));
                }
            }
        }
    }

    let cells: Vec<(usize, u64)> = values
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();

    let run_cell = |&(value, seed): &(usize, u64)| -> Result<SweepRow, AnalysisError> {
        let registry = ModelRegistry::<T>::with_builtins();
        let mut m_cfg = model_cfg.clone();
        let mut t_cfg = train_cfg.clone();
        t_cfg.seed = cell_seed(seed, value);
        let train_subset;
        let train_ref = match kind {
            SweepKind::Heads => {
                m_cfg.heads = value;
                train_ds
            }
            SweepKind::Layers => {
                m_cfg.layers = value;
                train_ds
            }
            SweepKind::DataScale => {
                train_subset = subset_for_cell(train_ds, value, t_cfg.seed);
                &train_subset
            }
        };
        let result =
            run_experiment::<T>(&registry, &m_cfg, &t_cfg, schema, train_ref, val_ds, test_ds)?;
        Ok(SweepRow {
            value,
            seed,
            test_mae_percent: result.test_mae_percent,
        })
    };

    let rows: Result<Vec<SweepRow>, AnalysisError> = match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| AnalysisError::BadSweep(e.to_string()))?;
            pool.install(|| cells.par_iter().map(run_cell).collect())
        }
        None => cells.par_iter().map(run_cell).collect(),
    };
    let rows = rows?;

    let summaries = values
        .iter()
        .map(|&v| {
            let scores: Vec<f64> = rows
                .iter()
                .filter(|r| r.value == v)
                .map(|r| r.test_mae_percent)
                .collect();
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            let var =
                scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / scores.len() as f64;
            SweepSummary {
                value: v,
                mean,
                std: var.sqrt(),
            }
        })
        .collect();

    Ok(SweepReport {
        kind,
        rows,
        summaries,
    })
}
