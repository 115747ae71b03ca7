//! Cost-model variants behind a common trait, registered by name and
//! selected at runtime via config.
//!
//! Variants:
//! - `rct`: the full rate-card transformer (fixed groups + item/charge
//!   tokens + heuristic token through an encoder stack).
//! - `flat_transformer`: the same encoder restricted to the fixed-length
//!   groups and the heuristic token; stands in for fixed-arity tabular
//!   transformers.
//! - `feedforward`: embed-and-concatenate the fixed groups, then five dense
//!   layers.
//! - `hybrid`: feed-forward encoding of the fixed groups concatenated with
//!   a self-attention encoding of only the item/charge tokens, joined by a
//!   single linear head.

mod feedforward;
mod flat;
mod hybrid;
mod rct;

pub use feedforward::FeedForwardModel;
pub use flat::FlatTransformerModel;
pub use hybrid::HybridModel;
pub use rct::RctModel;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::{EmbedError, ModelInput, Reduction};
use crate::encoder::{ForwardCtx, Pooling};
use crate::graph::{Activation, Graph, NodeId, NumericsError, Parameter};
use crate::schema::FeatureSchema;
use crate::tensor::Scalar;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error("unknown model variant '{0}'")]
    UnknownVariant(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

fn default_d_model() -> usize {
    32
}
fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    4
}
fn default_hidden() -> usize {
    128
}
fn default_variant() -> String {
    "rct".into()
}
fn default_reduction() -> Reduction {
    Reduction::Mean
}
fn default_pooling() -> Pooling {
    Pooling::Mean
}
fn default_activation() -> Activation {
    Activation::Silu
}

/// Architecture settings shared by all variants. Fields irrelevant to a
/// variant (e.g. `heads` for `feedforward`) are ignored by it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_variant")]
    pub variant: String,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Feed-forward width inside encoder blocks; defaults to 4 * d_model.
    #[serde(default)]
    pub ff_width: Option<usize>,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_reduction")]
    pub reduction: Reduction,
    #[serde(default = "default_pooling")]
    pub pooling: Pooling,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Hidden width of the dense layers in the feedforward baseline and the
    /// hybrid's feed-forward branch.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: default_variant(),
            d_model: default_d_model(),
            layers: default_layers(),
            heads: default_heads(),
            ff_width: None,
            dropout: 0.0,
            reduction: default_reduction(),
            pooling: default_pooling(),
            activation: default_activation(),
            hidden: default_hidden(),
        }
    }
}

impl ModelConfig {
    pub fn ff_width(&self) -> usize {
        self.ff_width.unwrap_or(4 * self.d_model)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.layers == 0 || self.heads == 0 || self.hidden == 0 {
            return Err(ModelError::Config(
                "d_model, layers, heads and hidden must be positive".into(),
            ));
        }
        if self.d_model % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout {} must lie in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// A cost predictor over preprocessed rate cards. Predictions live in
/// standardized-cost space; destandardization happens at the metric
/// boundary.
pub trait CostModel<T: Scalar> {
    fn variant(&self) -> &'static str;
    fn config(&self) -> &ModelConfig;
    fn schema(&self) -> &FeatureSchema;

    /// Trace one record's forward pass, returning the scalar prediction node.
    fn predict(
        &self,
        g: &mut Graph<T>,
        input: &ModelInput<T>,
        ctx: &mut ForwardCtx<'_, T>,
    ) -> Result<NodeId, ModelError>;

    /// Every learnable parameter in a fixed, construction order.
    fn parameters(&self) -> Vec<Parameter<T>>;

    /// (layers, heads) when `predict` records attention maps into the
    /// context.
    fn attention_shape(&self) -> Option<(usize, usize)> {
        None
    }

    /// The pooled representation fed to the regression head, when the
    /// variant has a single one per rate card.
    fn pooled_embedding(
        &self,
        _g: &mut Graph<T>,
        _input: &ModelInput<T>,
    ) -> Result<Option<NodeId>, ModelError> {
        Ok(None)
    }
}

pub fn params_count<T: Scalar>(model: &dyn CostModel<T>) -> usize {
    model.parameters().iter().map(|p| p.len()).sum()
}

type Builder<T> =
    fn(&ModelConfig, &FeatureSchema, u64) -> Result<Box<dyn CostModel<T>>, ModelError>;

/// Name-keyed registry of model builders. `with_builtins` registers the
/// four standard variants; callers may add their own.
pub struct ModelRegistry<T: Scalar> {
    builders: BTreeMap<String, Builder<T>>,
}

impl<T: Scalar> Default for ModelRegistry<T> {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl<T: Scalar> ModelRegistry<T> {
    pub fn new() -> Self {
        ModelRegistry {
            builders: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::new();
        reg.register("rct", |cfg, schema, seed| {
            Ok(Box::new(RctModel::new(cfg.clone(), schema.clone(), seed)?))
        });
        reg.register("flat_transformer", |cfg, schema, seed| {
            Ok(Box::new(FlatTransformerModel::new(
                cfg.clone(),
                schema.clone(),
                seed,
            )?))
        });
        reg.register("feedforward", |cfg, schema, seed| {
            Ok(Box::new(FeedForwardModel::new(
                cfg.clone(),
                schema.clone(),
                seed,
            )?))
        });
        reg.register("hybrid", |cfg, schema, seed| {
            Ok(Box::new(HybridModel::new(cfg.clone(), schema.clone(), seed)?))
        });
        reg
    }

    pub fn register(&mut self, name: &str, builder: Builder<T>) {
        self.builders.insert(name.to_string(), builder);
    }

    pub fn names(&self) -> Vec<&str> {
        self.builders.keys().map(|s| s.as_str()).collect()
    }

    /// Build the variant named by `cfg.variant` with a deterministic
    /// initialization stream derived from `seed`.
    pub fn build(
        &self,
        cfg: &ModelConfig,
        schema: &FeatureSchema,
        seed: u64,
    ) -> Result<Box<dyn CostModel<T>>, ModelError> {
        let builder = self
            .builders
            .get(&cfg.variant)
            .ok_or_else(|| ModelError::UnknownVariant(cfg.variant.clone()))?;
        builder(cfg, schema, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen;

    #[test]
    fn registry_lists_builtin_variants() {
        let reg = ModelRegistry::<f32>::with_builtins();
        assert_eq!(
            reg.names(),
            vec!["feedforward", "flat_transformer", "hybrid", "rct"]
        );
    }

    #[test]
    fn unknown_variant_is_an_error() {
        let (_, schema) = synthgen::synth_std();
        let reg = ModelRegistry::<f32>::with_builtins();
        let cfg = ModelConfig {
            variant: "boosted_trees".into(),
            ..Default::default()
        };
        assert!(matches!(
            reg.build(&cfg, &schema, 0),
            Err(ModelError::UnknownVariant(_))
        ));
    }

    #[test]
    fn indivisible_head_count_is_rejected() {
        let cfg = ModelConfig {
            heads: 5,
            d_model: 32,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(ModelError::Config(_))));
    }
}
