//! Mini-batch L1 training with Adam and plateau learning-rate decay.
//!
//! Targets are standardized for the objective; MAE% is always computed on
//! destandardized predictions against costs in currency units:
//! `sum |C - C_hat| / sum |C - C_heuristic| * 100`, a ratio of sums.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::embeddings::{encode_inputs, ModelInput};
use crate::encoder::ForwardCtx;
use crate::graph::Graph;
use crate::model::{params_count, CostModel, ModelConfig, ModelError, ModelRegistry};
use crate::preprocess::{apply_preprocess, fit_preprocess, PreprocessState};
use crate::schema::FeatureSchema;
use crate::tensor::{Scalar, Tensor};

const SHUFFLE_STREAM: u64 = 0x7368_7566;
const DROPOUT_STREAM: u64 = 0x6472_6f70;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged: non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("metric inputs must have equal non-zero lengths ({0} vs {1} vs {2})")]
    LengthMismatch(usize, usize, usize),
    #[error("heuristic is exact; MAE% undefined")]
    ZeroDenominator,
    #[error("records are missing actual_cost labels")]
    MissingLabels,
    #[error("invalid train config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_plateau_factor")]
    pub plateau_factor: f64,
    #[serde(default = "default_plateau_patience")]
    pub plateau_patience: usize,
    #[serde(default = "default_min_rel_improvement")]
    pub min_rel_improvement: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_batch_size() -> usize {
    256
}
fn default_lr() -> f64 {
    1e-3
}
fn default_plateau_factor() -> f64 {
    0.7
}
fn default_plateau_patience() -> usize {
    3
}
fn default_min_rel_improvement() -> f64 {
    1e-3
}
fn default_max_epochs() -> usize {
    30
}
fn default_seed() -> u64 {
    42
}
fn default_eval_every() -> usize {
    200
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: default_batch_size(),
            lr: default_lr(),
            plateau_factor: default_plateau_factor(),
            plateau_patience: default_plateau_patience(),
            min_rel_improvement: default_min_rel_improvement(),
            max_epochs: default_max_epochs(),
            seed: default_seed(),
            eval_every: default_eval_every(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.eval_every == 0 {
            return Err(TrainError::Config(
                "batch_size, max_epochs and eval_every must be positive".into(),
            ));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(TrainError::Config("lr must be positive".into()));
        }
        if !(0.0 < self.plateau_factor && self.plateau_factor < 1.0) {
            return Err(TrainError::Config(
                "plateau_factor must lie in (0,1)".into(),
            ));
        }
        if self.plateau_patience == 0 {
            return Err(TrainError::Config(
                "plateau_patience must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Bias-corrected Adam over a fixed parameter list.
pub struct Adam<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u32,
    moments: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &[crate::graph::Parameter<T>], lr: f64) {
        if self.moments.is_empty() && !params.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
                .collect();
        }
        assert_eq!(self.moments.len(), params.len(), "parameter list is fixed");
        self.step_count += 1;
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.step_count as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.step_count as i32));
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let lr = T::from_f64(lr);
        let eps = T::from_f64(self.eps);
        for (p, (m, v)) in params.iter().zip(&mut self.moments) {
            p.apply(|value, grad| {
                for i in 0..grad.len() {
                    let g = grad.data()[i];
                    let mi = b1 * m.data()[i] + one_m_b1 * g;
                    let vi = b2 * v.data()[i] + one_m_b2 * g * g;
                    m.data_mut()[i] = mi;
                    v.data_mut()[i] = vi;
                    let update = (mi / bc1) / ((vi / bc2).sqrt() + eps);
                    value.data_mut()[i] = value.data()[i] - lr * update;
                }
            });
        }
    }
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Ratio of summed absolute errors, x100 (not a mean of per-record ratios).
pub fn mae_percent(
    predictions: &[f64],
    actuals: &[f64],
    heuristics: &[f64],
) -> Result<f64, TrainError> {
    if predictions.len() != actuals.len()
        || actuals.len() != heuristics.len()
        || predictions.is_empty()
    {
        return Err(TrainError::LengthMismatch(
            predictions.len(),
            actuals.len(),
            heuristics.len(),
        ));
    }
    let num: f64 = predictions
        .iter()
        .zip(actuals)
        .map(|(p, a)| (a - p).abs())
        .sum();
    let den: f64 = heuristics
        .iter()
        .zip(actuals)
        .map(|(h, a)| (a - h).abs())
        .sum();
    if den == 0.0 {
        return Err(TrainError::ZeroDenominator);
    }
    Ok(num / den * 100.0)
}

/// Plain mean absolute error in currency units.
pub fn mae(predictions: &[f64], actuals: &[f64]) -> f64 {
    predictions
        .iter()
        .zip(actuals)
        .map(|(p, a)| (a - p).abs())
        .sum::<f64>()
        / predictions.len() as f64
}

/// Standardized-space predictions, traced in chunks so parameter nodes are
/// shared within a chunk.
pub fn predict_standardized<T: Scalar>(
    model: &dyn CostModel<T>,
    inputs: &[ModelInput<T>],
) -> Result<Vec<T>, ModelError> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(512) {
        let mut g = Graph::new();
        for input in chunk {
            let y = model.predict(&mut g, input, &mut ForwardCtx::eval())?;
            out.push(g.value(y).item());
        }
    }
    Ok(out)
}

/// Predictions destandardized into currency units.
pub fn predict_costs<T: Scalar>(
    model: &dyn CostModel<T>,
    inputs: &[ModelInput<T>],
    state: &PreprocessState,
) -> Result<Vec<f64>, ModelError> {
    Ok(predict_standardized(model, inputs)?
        .into_iter()
        .map(|z| state.cost.destandardize(z.to_f64()))
        .collect())
}

/// MAE% of a model over a labelled input set.
pub fn eval_mae_percent<T: Scalar>(
    model: &dyn CostModel<T>,
    inputs: &[ModelInput<T>],
    state: &PreprocessState,
) -> Result<f64, TrainError> {
    let predictions = predict_costs(model, inputs, state)?;
    let actuals: Vec<f64> = inputs
        .iter()
        .map(|i| i.actual_cost.ok_or(TrainError::MissingLabels))
        .collect::<Result<_, _>>()?;
    let heuristics: Vec<f64> = inputs.iter().map(|i| i.heuristic_cost).collect();
    mae_percent(&predictions, &actuals, &heuristics)
}

/// One history row per validation evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub train_loss: f64,
    pub val_mae_percent: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EvalRecord>,
    pub best_val_mae_percent: f64,
    pub best_step: usize,
    pub steps: usize,
}

pub fn history_csv(history: &[EvalRecord]) -> String {
    let mut out = String::from("step,train_loss,val_mae_percent,lr\n");
    for row in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.step, row.train_loss, row.val_mae_percent, row.lr
        ));
    }
    out
}

/// Run the mini-batch loop. The model is left holding the parameters of its
/// best validation evaluation.
pub fn train<T: Scalar>(
    model: &dyn CostModel<T>,
    train_inputs: &[ModelInput<T>],
    val_inputs: &[ModelInput<T>],
    state: &PreprocessState,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if train_inputs.is_empty() || val_inputs.is_empty() {
        return Err(TrainError::Config("train and val must be non-empty".into()));
    }
    let targets: Vec<T> = train_inputs
        .iter()
        .map(|i| {
            i.actual_cost
                .map(|c| T::from_f64(state.cost.standardize(c)))
                .ok_or(TrainError::MissingLabels)
        })
        .collect::<Result<_, _>>()?;

    let params = model.parameters();
    let mut adam = Adam::new();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_STREAM);
    let use_dropout = model.config().dropout > 0.0;

    let mut lr = cfg.lr;
    let mut history = Vec::new();
    let mut step = 0usize;
    let mut loss_acc = 0.0f64;
    let mut loss_count = 0usize;

    let mut best_val = f64::INFINITY;
    let mut best_step = 0usize;
    let mut best_snapshot: Vec<Tensor<T>> = params.iter().map(|p| p.value().clone()).collect();
    let mut plateau_best = f64::INFINITY;
    let mut plateau_count = 0usize;

    let mut indices: Vec<usize> = (0..train_inputs.len()).collect();
    for _epoch in 0..cfg.max_epochs {
        indices.shuffle(&mut shuffle_rng);
        for batch in indices.chunks(cfg.batch_size) {
            for p in &params {
                p.zero_grad();
            }
            let mut g = Graph::new();
            let mut preds = Vec::with_capacity(batch.len());
            let mut batch_targets = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut ctx = if use_dropout {
                    ForwardCtx::train(&mut dropout_rng)
                } else {
                    ForwardCtx::eval()
                };
                ctx.train = true;
                preds.push(model.predict(&mut g, &train_inputs[i], &mut ctx)?);
                batch_targets.push(targets[i]);
            }
            let pred_vec = g.stack_scalars(&preds).map_err(ModelError::from)?;
            let loss = g
                .l1_loss(pred_vec, &Tensor::vector(batch_targets))
                .map_err(ModelError::from)?;
            let loss_value = g.value(loss).item().to_f64();
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            g.backward(loss).map_err(ModelError::from)?;
            adam.step(&params, lr);
            step += 1;
            loss_acc += loss_value;
            loss_count += 1;

            if step % cfg.eval_every == 0 {
                let val = eval_mae_percent(model, val_inputs, state)?;
                history.push(EvalRecord {
                    step,
                    train_loss: loss_acc / loss_count as f64,
                    val_mae_percent: val,
                    lr,
                });
                loss_acc = 0.0;
                loss_count = 0;
                if val < best_val {
                    best_val = val;
                    best_step = step;
                    best_snapshot = params.iter().map(|p| p.value().clone()).collect();
                }
                // decay after `plateau_patience` consecutive evals without a
                // relative improvement of at least `min_rel_improvement`
                if val < plateau_best * (1.0 - cfg.min_rel_improvement) {
                    plateau_best = val;
                    plateau_count = 0;
                } else {
                    plateau_count += 1;
                    if plateau_count >= cfg.plateau_patience {
                        lr *= cfg.plateau_factor;
                        plateau_count = 0;
                    }
                }
            }
        }
    }

    // Final evaluation when the loop did not end on an eval boundary.
    if step % cfg.eval_every != 0 {
        let val = eval_mae_percent(model, val_inputs, state)?;
        history.push(EvalRecord {
            step,
            train_loss: if loss_count > 0 {
                loss_acc / loss_count as f64
            } else {
                0.0
            },
            val_mae_percent: val,
            lr,
        });
        if val < best_val {
            best_val = val;
            best_step = step;
            best_snapshot = params.iter().map(|p| p.value().clone()).collect();
        }
    }

    for (p, snap) in params.iter().zip(best_snapshot) {
        p.set_value(snap);
    }
    Ok(TrainReport {
        history,
        best_val_mae_percent: best_val,
        best_step,
        steps: step,
    })
}

/// End-to-end pipeline shared by the CLI, the sweep harness and the test
/// suites: fit preprocessing on the train split, encode all splits, build
/// the variant from the registry, train it and score the test split.
pub struct ExperimentResult<T: Scalar> {
    pub model: Box<dyn CostModel<T>>,
    pub state: PreprocessState,
    pub report: TrainReport,
    pub test_mae_percent: f64,
    pub test_mae: f64,
    pub params_count: usize,
}

pub fn run_experiment<T: Scalar>(
    registry: &ModelRegistry<T>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    schema: &FeatureSchema,
    train_ds: &Dataset,
    val_ds: &Dataset,
    test_ds: &Dataset,
) -> Result<ExperimentResult<T>, TrainError> {
    let state = fit_preprocess(train_ds)?;
    let train_inputs = encode_inputs::<T>(&apply_preprocess(train_ds, &state)?, &state)?;
    let val_inputs = encode_inputs::<T>(&apply_preprocess(val_ds, &state)?, &state)?;
    let test_inputs = encode_inputs::<T>(&apply_preprocess(test_ds, &state)?, &state)?;

    let model = registry.build(model_cfg, schema, train_cfg.seed)?;
    let report = train(model.as_ref(), &train_inputs, &val_inputs, &state, train_cfg)?;
    let predictions = predict_costs(model.as_ref(), &test_inputs, &state)?;
    let actuals: Vec<f64> = test_inputs
        .iter()
        .map(|i| i.actual_cost.ok_or(TrainError::MissingLabels))
        .collect::<Result<_, _>>()?;
    let heuristics: Vec<f64> = test_inputs.iter().map(|i| i.heuristic_cost).collect();
    let test_mae_percent = mae_percent(&predictions, &actuals, &heuristics)?;
    let test_mae = mae(&predictions, &actuals);
    let count = params_count(model.as_ref());
    Ok(ExperimentResult {
        model,
        state,
        report,
        test_mae_percent,
        test_mae,
        params_count: count,
    })
}
