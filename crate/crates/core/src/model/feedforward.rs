//! Dense baseline: embed and concatenate the fixed-length groups and the
//! heuristic token, then five dense layers down to the cost.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embeddings::{ContinuousEmbedding, MixedEmbeddingLayer, ModelInput};
use crate::encoder::{uniform_tensor, ForwardCtx};
use crate::graph::{Graph, NodeId, Parameter};
use crate::model::{CostModel, ModelConfig, ModelError};
use crate::schema::FeatureSchema;
use crate::tensor::{Scalar, Tensor};

pub struct DenseLayer<T: Scalar> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        DenseLayer {
            weight: Parameter::new(
                format!("{name}.weight"),
                uniform_tensor(vec![fan_in, fan_out], fan_in, rng),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(vec![fan_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId, ModelError> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.matmul(x, w)?;
        Ok(g.add_row(y, b)?)
    }
}

pub struct FeedForwardModel<T: Scalar> {
    pub dimension: MixedEmbeddingLayer<T>,
    pub route: MixedEmbeddingLayer<T>,
    pub service: MixedEmbeddingLayer<T>,
    pub heuristic: ContinuousEmbedding<T>,
    /// Five dense layers: in -> hidden x4 -> 1.
    pub layers: Vec<DenseLayer<T>>,
    cfg: ModelConfig,
    schema: FeatureSchema,
}

impl<T: Scalar> FeedForwardModel<T> {
    pub fn new(cfg: ModelConfig, schema: FeatureSchema, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let dimension = MixedEmbeddingLayer::new("ff.dimension", &schema.dimension, d, &mut rng);
        let route = MixedEmbeddingLayer::new("ff.route", &schema.route, d, &mut rng);
        let service = MixedEmbeddingLayer::new("ff.service", &schema.service, d, &mut rng);
        let heuristic = ContinuousEmbedding::new("ff.heuristic", d, &mut rng);
        let n_tokens =
            schema.dimension.len() + schema.route.len() + schema.service.len() + 1;
        let h = cfg.hidden;
        let widths = [n_tokens * d, h, h, h, h, 1];
        let layers = (0..5)
            .map(|l| DenseLayer::new(&format!("ff.dense{l}"), widths[l], widths[l + 1], &mut rng))
            .collect();
        Ok(FeedForwardModel {
            dimension,
            route,
            service,
            heuristic,
            layers,
            cfg,
            schema,
        })
    }

    fn features(&self, g: &mut Graph<T>, input: &ModelInput<T>) -> Result<NodeId, ModelError> {
        let mut tokens = self.dimension.embed_group(g, &input.dimension)?;
        tokens.extend(self.route.embed_group(g, &input.route)?);
        tokens.extend(self.service.embed_group(g, &input.service)?);
        tokens.push(self.heuristic.embed(g, input.heuristic_std)?);
        let stacked = g.concat_rows(&tokens)?;
        let n = g.value(stacked).len();
        Ok(g.reshape(stacked, vec![1, n])?)
    }
}

impl<T: Scalar> CostModel<T> for FeedForwardModel<T> {
    fn variant(&self) -> &'static str {
        "feedforward"
    }

    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    fn predict(
        &self,
        g: &mut Graph<T>,
        input: &ModelInput<T>,
        _ctx: &mut ForwardCtx<'_, T>,
    ) -> Result<NodeId, ModelError> {
        let mut x = self.features(g, input)?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i < last {
                x = g.activation(x, self.cfg.activation);
            }
        }
        Ok(x)
    }

    fn parameters(&self) -> Vec<Parameter<T>> {
        let mut params = self.dimension.parameters();
        params.extend(self.route.parameters());
        params.extend(self.service.parameters());
        params.push(self.heuristic.weight.clone());
        params.push(self.heuristic.bias.clone());
        for layer in &self.layers {
            params.push(layer.weight.clone());
            params.push(layer.bias.clone());
        }
        params
    }
}
