//! The full rate-card transformer: token sequence through an encoder stack,
//! mean-pooled, then a linear regression head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embeddings::{ModelInput, RateCardEmbedder};
use crate::encoder::{pool, uniform_tensor, EncoderBlock, ForwardCtx};
use crate::graph::{Graph, NodeId, Parameter};
use crate::model::{CostModel, ModelConfig, ModelError};
use crate::schema::FeatureSchema;
use crate::tensor::{Scalar, Tensor};

pub struct RctModel<T: Scalar> {
    pub embedder: RateCardEmbedder<T>,
    pub blocks: Vec<EncoderBlock<T>>,
    pub head_w: Parameter<T>,
    pub head_b: Parameter<T>,
    cfg: ModelConfig,
    schema: FeatureSchema,
}

impl<T: Scalar> RctModel<T> {
    pub fn new(cfg: ModelConfig, schema: FeatureSchema, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedder = RateCardEmbedder::new(&schema, cfg.d_model, cfg.reduction, &mut rng);
        let blocks = (0..cfg.layers)
            .map(|l| {
                EncoderBlock::new(
                    &format!("block{l}"),
                    cfg.d_model,
                    cfg.heads,
                    cfg.ff_width(),
                    cfg.activation,
                    cfg.dropout,
                    &mut rng,
                )
            })
            .collect();
        Ok(RctModel {
            embedder,
            blocks,
            head_w: Parameter::new(
                "head.weight",
                uniform_tensor(vec![cfg.d_model, 1], cfg.d_model, &mut rng),
            ),
            head_b: Parameter::new("head.bias", Tensor::zeros(vec![1])),
            cfg,
            schema,
        })
    }

    /// The assembled rate-card embedding, before any encoder block.
    pub fn assemble_tokens(
        &self,
        g: &mut Graph<T>,
        input: &ModelInput<T>,
    ) -> Result<NodeId, ModelError> {
        Ok(self.embedder.embed(g, input)?)
    }

    /// Run the encoder stack over a token matrix.
    pub fn encode_tokens(
        &self,
        g: &mut Graph<T>,
        tokens: NodeId,
        ctx: &mut ForwardCtx<'_, T>,
    ) -> Result<NodeId, ModelError> {
        let mut x = tokens;
        for (l, block) in self.blocks.iter().enumerate() {
            ctx.layer = l;
            x = block.forward(g, x, ctx)?;
        }
        Ok(x)
    }

    /// Pool and regress; the entry point for permutation experiments that
    /// rearrange the assembled sequence first.
    pub fn predict_from_tokens(
        &self,
        g: &mut Graph<T>,
        tokens: NodeId,
        ctx: &mut ForwardCtx<'_, T>,
    ) -> Result<NodeId, ModelError> {
        let encoded = self.encode_tokens(g, tokens, ctx)?;
        let pooled = pool(g, encoded, self.cfg.pooling)?;
        let row = g.reshape(pooled, vec![1, self.cfg.d_model])?;
        let w = g.param(&self.head_w);
        let b = g.param(&self.head_b);
        let y = g.matmul(row, w)?;
        Ok(g.add_row(y, b)?)
    }
}

impl<T: Scalar> CostModel<T> for RctModel<T> {
    fn variant(&self) -> &'static str {
        "rct"
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
        let tokens = self.assemble_tokens(g, input)?;
        self.predict_from_tokens(g, tokens, ctx)
    }

    fn parameters(&self) -> Vec<Parameter<T>> {
        let mut params = self.embedder.parameters();
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
        let tokens = self.assemble_tokens(g, input)?;
        let encoded = self.encode_tokens(g, tokens, &mut ForwardCtx::eval())?;
        Ok(Some(pool(g, encoded, self.cfg.pooling)?))
    }
}
