//! Token embedding of rate cards.
//!
//! A mixed embedding layer holds one block per feature of a group: a lookup
//! table for a categorical feature (row 0 reserved for unknown) or an affine
//! continuous block `x * weight + bias` for a numerical one. Variable-length
//! groups embed each list entry with the group's layer and reduce the
//! entry's tokens to a single token. The assembled sequence is
//!
//! `[dimension | route | service | one token per item | one token per
//!   charge | heuristic-cost token]`
//!
//! with no positional encodings: feature identity lives entirely in the
//! per-feature parameters, so the sequence behaves as a set.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::graph::{Graph, NodeId, NumericsError, Parameter};
use crate::preprocess::PreprocessState;
use crate::schema::{FeatureSchema, FeatureSpec, GroupKind};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("feature '{feature}': {msg}")]
    BadValue { feature: String, msg: String },
}

/// How a variable-length entry's feature tokens collapse into one token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Mean,
    Sum,
}

/// A preprocessed feature value ready for embedding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EncodedValue<T: Scalar> {
    /// Label-encoded category; 0 is the reserved unknown index.
    Cat(usize),
    /// Standardized numerical value.
    Num(T),
}

/// One record in model-ready form. Costs stay in currency units for the
/// metric boundary; the heuristic additionally appears standardized as a
/// model input.
#[derive(Clone, Debug)]
pub struct ModelInput<T: Scalar> {
    pub dimension: Vec<EncodedValue<T>>,
    pub route: Vec<EncodedValue<T>>,
    pub service: Vec<EncodedValue<T>>,
    pub items: Vec<Vec<EncodedValue<T>>>,
    pub charges: Vec<Vec<EncodedValue<T>>>,
    pub heuristic_std: T,
    pub heuristic_cost: f64,
    pub actual_cost: Option<f64>,
}

impl<T: Scalar> ModelInput<T> {
    pub fn sequence_len(&self, schema: &FeatureSchema) -> usize {
        schema.group_len(GroupKind::Dimension)
            + schema.group_len(GroupKind::Route)
            + schema.group_len(GroupKind::Service)
            + self.items.len()
            + self.charges.len()
            + 1
    }
}

fn encode_group<T: Scalar>(
    specs: &[FeatureSpec],
    kind: GroupKind,
    values: &[crate::data::FeatureValue],
) -> Result<Vec<EncodedValue<T>>, DataError> {
    specs
        .iter()
        .zip(values)
        .map(|(spec, value)| {
            let x = value.as_number().ok_or_else(|| {
                DataError::State(format!(
                    "feature '{kind}.{}' is not encoded; apply preprocessing first",
                    spec.name
                ))
            })?;
            if spec.is_categorical() {
                let idx = x as usize;
                if x.fract() != 0.0 || x < 0.0 || idx > spec.cardinality.unwrap() {
                    return Err(DataError::State(format!(
                        "feature '{kind}.{}': encoded index {x} out of range 0..={}",
                        spec.name,
                        spec.cardinality.unwrap()
                    )));
                }
                Ok(EncodedValue::Cat(idx))
            } else {
                Ok(EncodedValue::Num(T::from_f64(x)))
            }
        })
        .collect()
}

/// Turn an encoded dataset into model inputs, standardizing the heuristic
/// estimate with the fitted statistics.
pub fn encode_inputs<T: Scalar>(
    ds: &Dataset,
    state: &PreprocessState,
) -> Result<Vec<ModelInput<T>>, DataError> {
    if !ds.encoded {
        return Err(DataError::State(
            "dataset must be preprocessed before building model inputs".into(),
        ));
    }
    let schema = &ds.schema;
    ds.records
        .iter()
        .map(|r| {
            Ok(ModelInput {
                dimension: encode_group(&schema.dimension, GroupKind::Dimension, &r.dimension)?,
                route: encode_group(&schema.route, GroupKind::Route, &r.route)?,
                service: encode_group(&schema.service, GroupKind::Service, &r.service)?,
                items: r
                    .items
                    .iter()
                    .map(|i| encode_group(&schema.item, GroupKind::Item, i))
                    .collect::<Result<_, _>>()?,
                charges: r
                    .charges
                    .iter()
                    .map(|c| encode_group(&schema.charge, GroupKind::Charge, c))
                    .collect::<Result<_, _>>()?,
                heuristic_std: T::from_f64(state.heuristic.standardize(r.heuristic_cost)),
                heuristic_cost: r.heuristic_cost,
                actual_cost: r.actual_cost,
            })
        })
        .collect()
}

/// Lookup table of shape (cardinality + 1) x d_model; row 0 is unknown.
pub struct CategoricalEmbedding<T: Scalar> {
    pub table: Parameter<T>,
}

/// Affine block for one numerical feature: token = x * weight + bias.
pub struct ContinuousEmbedding<T: Scalar> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Scalar> ContinuousEmbedding<T> {
    pub fn new(name: &str, d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        ContinuousEmbedding {
            weight: Parameter::new(format!("{name}.weight"), normal_tensor(vec![d_model], rng)),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(vec![d_model])),
        }
    }

    pub fn embed(&self, g: &mut Graph<T>, x: T) -> Result<NodeId, NumericsError> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let scaled = g.scale(w, x);
        g.add(scaled, b)
    }
}

pub enum EmbeddingBlock<T: Scalar> {
    Categorical(CategoricalEmbedding<T>),
    Continuous(ContinuousEmbedding<T>),
}

/// One embedding block per feature of a group, in schema order.
pub struct MixedEmbeddingLayer<T: Scalar> {
    pub blocks: Vec<EmbeddingBlock<T>>,
}

fn normal_tensor<T: Scalar>(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Normal::new(0.0f64, 0.02).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| T::from_f64(dist.sample(rng))).collect(),
    )
}

impl<T: Scalar> MixedEmbeddingLayer<T> {
    pub fn new(prefix: &str, specs: &[FeatureSpec], d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        let blocks = specs
            .iter()
            .map(|spec| {
                let name = format!("{prefix}.{}", spec.name);
                match spec.cardinality {
                    Some(card) => EmbeddingBlock::Categorical(CategoricalEmbedding {
                        table: Parameter::new(
                            format!("{name}.table"),
                            normal_tensor(vec![card + 1, d_model], rng),
                        ),
                    }),
                    None => {
                        EmbeddingBlock::Continuous(ContinuousEmbedding::new(&name, d_model, rng))
                    }
                }
            })
            .collect();
        MixedEmbeddingLayer { blocks }
    }

    /// One token per feature.
    pub fn embed_group(
        &self,
        g: &mut Graph<T>,
        values: &[EncodedValue<T>],
    ) -> Result<Vec<NodeId>, EmbedError> {
        assert_eq!(values.len(), self.blocks.len(), "value arity matches layer");
        self.blocks
            .iter()
            .zip(values)
            .map(|(block, value)| match (block, value) {
                (EmbeddingBlock::Categorical(c), EncodedValue::Cat(idx)) => {
                    Ok(g.lookup(&c.table, *idx)?)
                }
                (EmbeddingBlock::Continuous(c), EncodedValue::Num(x)) => Ok(c.embed(g, *x)?),
                (EmbeddingBlock::Categorical(c), EncodedValue::Num(_)) => {
                    Err(EmbedError::BadValue {
                        feature: c.table.name(),
                        msg: "categorical block got a numerical value".into(),
                    })
                }
                (EmbeddingBlock::Continuous(c), EncodedValue::Cat(_)) => {
                    Err(EmbedError::BadValue {
                        feature: c.weight.name(),
                        msg: "continuous block got a categorical value".into(),
                    })
                }
            })
            .collect()
    }

    /// One token per entry: the entry's feature tokens reduced by `reduction`.
    /// An empty entry list yields an empty sequence.
    pub fn embed_variable(
        &self,
        g: &mut Graph<T>,
        entries: &[Vec<EncodedValue<T>>],
        reduction: Reduction,
    ) -> Result<Vec<NodeId>, EmbedError> {
        entries
            .iter()
            .map(|entry| {
                let tokens = self.embed_group(g, entry)?;
                let stacked = g.concat_rows(&tokens)?;
                let mean = g.mean_axis(stacked, 0)?;
                Ok(match reduction {
                    Reduction::Mean => mean,
                    Reduction::Sum => g.scale(mean, T::from_f64(tokens.len() as f64)),
                })
            })
            .collect()
    }

    pub fn parameters(&self) -> Vec<Parameter<T>> {
        self.blocks
            .iter()
            .flat_map(|b| match b {
                EmbeddingBlock::Categorical(c) => vec![c.table.clone()],
                EmbeddingBlock::Continuous(c) => vec![c.weight.clone(), c.bias.clone()],
            })
            .collect()
    }
}

/// Embeds a whole rate card into its token sequence.
pub struct RateCardEmbedder<T: Scalar> {
    pub dimension: MixedEmbeddingLayer<T>,
    pub route: MixedEmbeddingLayer<T>,
    pub service: MixedEmbeddingLayer<T>,
    pub item: MixedEmbeddingLayer<T>,
    pub charge: MixedEmbeddingLayer<T>,
    pub heuristic: ContinuousEmbedding<T>,
    pub reduction: Reduction,
    pub d_model: usize,
}

impl<T: Scalar> RateCardEmbedder<T> {
    pub fn new(
        schema: &FeatureSchema,
        d_model: usize,
        reduction: Reduction,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        RateCardEmbedder {
            dimension: MixedEmbeddingLayer::new(
                "embedder.dimension",
                &schema.dimension,
                d_model,
                rng,
            ),
            route: MixedEmbeddingLayer::new("embedder.route", &schema.route, d_model, rng),
            service: MixedEmbeddingLayer::new(
                "embedder.service",
                &schema.service,
                d_model,
                rng,
            ),
            item: MixedEmbeddingLayer::new("embedder.item", &schema.item, d_model, rng),
            charge: MixedEmbeddingLayer::new("embedder.charge", &schema.charge, d_model, rng),
            heuristic: ContinuousEmbedding::new("embedder.heuristic", d_model, rng),
            reduction,
            d_model,
        }
    }

    /// All tokens in sequence order.
    pub fn embed_tokens(
        &self,
        g: &mut Graph<T>,
        input: &ModelInput<T>,
    ) -> Result<Vec<NodeId>, EmbedError> {
        let mut tokens = self.dimension.embed_group(g, &input.dimension)?;
        tokens.extend(self.route.embed_group(g, &input.route)?);
        tokens.extend(self.service.embed_group(g, &input.service)?);
        tokens.extend(self.item.embed_variable(g, &input.items, self.reduction)?);
        tokens.extend(self.charge.embed_variable(g, &input.charges, self.reduction)?);
        tokens.push(self.heuristic.embed(g, input.heuristic_std)?);
        Ok(tokens)
    }

    /// The rate-card embedding: a [seq_len, d_model] token matrix.
    pub fn embed(&self, g: &mut Graph<T>, input: &ModelInput<T>) -> Result<NodeId, EmbedError> {
        let tokens = self.embed_tokens(g, input)?;
        Ok(g.concat_rows(&tokens)?)
    }

    pub fn parameters(&self) -> Vec<Parameter<T>> {
        let mut params = self.dimension.parameters();
        params.extend(self.route.parameters());
        params.extend(self.service.parameters());
        params.extend(self.item.parameters());
        params.extend(self.charge.parameters());
        params.push(self.heuristic.weight.clone());
        params.push(self.heuristic.bias.clone());
        params
    }
}
