//! Fixed-length-only transformer baseline: dimension, route and service
//! tokens plus the heuristic token, with no view of items or charges.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embeddings::{ContinuousEmbedding, MixedEmbeddingLayer, ModelInput};
use crate::encoder::{pool, uniform_tensor, EncoderBlock, ForwardCtx};
use crate::graph::{Graph, NodeId, Parameter};
use crate::model::{CostModel, ModelConfig, ModelError};
use crate::schema::FeatureSchema;
use crate::tensor::{Scalar, Tensor};

pub struct FlatTransformerModel<T: Scalar> {
    pub dimension: MixedEmbeddingLayer<T>,
    pub route: MixedEmbeddingLayer<T>,
    pub service: MixedEmbeddingLayer<T>,
    pub heuristic: ContinuousEmbedding<T>,
    pub blocks: Vec<EncoderBlock<T>>,
    pub head_w: Parameter<T>,
    pub head_b: Parameter<T>,
    cfg: ModelConfig,
    schema: FeatureSchema,
}

impl<T: Scalar> FlatTransformerModel<T> {
    pub fn new(cfg: ModelConfig, schema: FeatureSchema, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let dimension = MixedEmbeddingLayer::new("flat.dimension", &schema.dimension, d, &mut rng);
        let route = MixedEmbeddingLayer::new("flat.route", &schema.route, d, &mut rng);
        let service = MixedEmbeddingLayer::new("flat.service", &schema.service, d, &mut rng);
        let heuristic = ContinuousEmbedding::new("flat.heuristic", d, &mut rng);
        let blocks = (0..cfg.layers)
            .map(|l| {
                EncoderBlock::new(
                    &format!("flat.block{l}"),
                    d,
                    cfg.heads,
                    cfg.ff_width(),
                    cfg.activation,
                    cfg.dropout,
                    &mut rng,
                )
            })
            .collect();
        Ok(FlatTransformerModel {
            dimension,
            route,
            service,
            heuristic,
            blocks,
            head_w: Parameter::new("flat.head.weight", uniform_tensor(vec![d, 1], d, &mut rng)),
            head_b: Parameter::new("flat.head.bias", Tensor::zeros(vec![1])),
            cfg,
            schema,
        })
    }

    /// Sequence length: (m_d + n_d) + (m_r + n_r) + (m_s + n_s) + 1.
    pub fn sequence_len(&self) -> usize {
        self.schema.dimension.len() + self.schema.route.len() + self.schema.service.len() + 1
    }

    fn assemble(&self, g: &mut Graph<T>, input: &ModelInput<T>) -> Result<NodeId, ModelError> {
        let mut tokens = self.dimension.embed_group(g, &input.dimension)?;
        tokens.extend(self.route.embed_group(g, &input.route)?);
        tokens.extend(self.service.embed_group(g, &input.service)?);
        tokens.push(self.heuristic.embed(g, input.heuristic_std)?);
        Ok(g.concat_rows(&tokens)?)
    }

    fn encode(
        &self,
        g: &mut Graph<T>,
        input: &ModelInput<T>,
        ctx: &mut ForwardCtx<'_, T>,
    ) -> Result<NodeId, ModelError> {
        let mut x = self.assemble(g, input)?;
        for (l, block) in self.blocks.iter().enumerate() {
            ctx.layer = l;
            x = block.forward(g, x, ctx)?;
        }
        Ok(x)
    }
}

impl<T: Scalar> CostModel<T> for FlatTransformerModel<T> {
    fn variant(&self) -> &'static str {
        "flat_transformer"
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
        ctx: &mut ForwardCtx<'_, T>,
    ) -> Result<NodeId, ModelError> {
        let encoded = self.encode(g, input, ctx)?;
        let pooled = pool(g, encoded, self.cfg.pooling)?;
        let row = g.reshape(pooled, vec![1, self.cfg.d_model])?;
        let w = g.param(&self.head_w);
        let b = g.param(&self.head_b);
        let y = g.matmul(row, w)?;
        Ok(g.add_row(y, b)?)
    }

    fn parameters(&self) -> Vec<Parameter<T>> {
        let mut params = self.dimension.parameters();
        params.extend(self.route.parameters());
        params.extend(self.service.parameters());
        params.push(self.heuristic.weight.clone());
        params.push(self.heuristic.bias.clone());
        for block in &self.blocks {
            params.extend(block.parameters());
        }
        params.push(self.head_w.clone());
        params.push(self.head_b.clone());
        params
    }

    fn attention_shape(&self) -> Option<(usize, usize)> {
        Some((self.cfg.layers, self.cfg.heads))
    }

    fn pooled_embedding(
        &self,
        g: &mut Graph<T>,
        input: &ModelInput<T>,
    ) -> Result<Option<NodeId>, ModelError> {
        let encoded = self.encode(g, input, &mut ForwardCtx::eval())?;
        Ok(Some(pool(g, encoded, self.cfg.pooling)?))
    }
}
