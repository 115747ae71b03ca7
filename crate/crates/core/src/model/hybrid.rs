//! Hybrid ablation: a feed-forward branch encodes the fixed-length groups
//! (plus the heuristic token) while self-attention is restricted to the
//! item and charge tokens. The two encodings are concatenated and joined by
//! a single linear head, so interactions *across* the branches cannot be
//! formed after the concatenation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embeddings::{ContinuousEmbedding, MixedEmbeddingLayer, ModelInput};
use crate::encoder::{pool, EncoderBlock, ForwardCtx};
use crate::graph::{Graph, NodeId, Parameter};
use crate::model::feedforward::DenseLayer;
use crate::model::{CostModel, ModelConfig, ModelError};
use crate::schema::FeatureSchema;
use crate::tensor::Scalar;

pub struct HybridModel<T: Scalar> {
    pub dimension: MixedEmbeddingLayer<T>,
    pub route: MixedEmbeddingLayer<T>,
    pub service: MixedEmbeddingLayer<T>,
    pub heuristic: ContinuousEmbedding<T>,
    /// Two dense layers encoding the flattened fixed-group tokens to d_model.
    pub ff_encoder: Vec<DenseLayer<T>>,
    pub item: MixedEmbeddingLayer<T>,
    pub charge: MixedEmbeddingLayer<T>,
    pub blocks: Vec<EncoderBlock<T>>,
    /// Single linear head over [ff encoding | attention encoding].
    pub head: DenseLayer<T>,
    cfg: ModelConfig,
    schema: FeatureSchema,
}

impl<T: Scalar> HybridModel<T> {
    pub fn new(cfg: ModelConfig, schema: FeatureSchema, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let dimension = MixedEmbeddingLayer::new("hybrid.dimension", &schema.dimension, d, &mut rng);
        let route = MixedEmbeddingLayer::new("hybrid.route", &schema.route, d, &mut rng);
        let service = MixedEmbeddingLayer::new("hybrid.service", &schema.service, d, &mut rng);
        let heuristic = ContinuousEmbedding::new("hybrid.heuristic", d, &mut rng);
        let n_tokens = schema.dimension.len() + schema.route.len() + schema.service.len() + 1;
        let ff_encoder = vec![
            DenseLayer::new("hybrid.ff0", n_tokens * d, cfg.hidden, &mut rng),
            DenseLayer::new("hybrid.ff1", cfg.hidden, d, &mut rng),
        ];
        let item = MixedEmbeddingLayer::new("hybrid.item", &schema.item, d, &mut rng);
        let charge = MixedEmbeddingLayer::new("hybrid.charge", &schema.charge, d, &mut rng);
        let blocks = (0..cfg.layers)
            .map(|l| {
                EncoderBlock::new(
                    &format!("hybrid.block{l}"),
                    d,
                    cfg.heads,
                    cfg.ff_width(),
                    cfg.activation,
                    cfg.dropout,
                    &mut rng,
                )
            })
            .collect();
        let head = DenseLayer::new("hybrid.head", 2 * d, 1, &mut rng);
        Ok(HybridModel {
            dimension,
            route,
            service,
            heuristic,
            ff_encoder,
            item,
            charge,
            blocks,
            head,
            cfg,
            schema,
        })
    }

    fn ff_branch(&self, g: &mut Graph<T>, input: &ModelInput<T>) -> Result<NodeId, ModelError> {
        let mut tokens = self.dimension.embed_group(g, &input.dimension)?;
        tokens.extend(self.route.embed_group(g, &input.route)?);
        tokens.extend(self.service.embed_group(g, &input.service)?);
        tokens.push(self.heuristic.embed(g, input.heuristic_std)?);
        let stacked = g.concat_rows(&tokens)?;
        let n = g.value(stacked).len();
        let mut x = g.reshape(stacked, vec![1, n])?;
        for layer in &self.ff_encoder {
            x = layer.forward(g, x)?;
            x = g.activation(x, self.cfg.activation);
        }
        Ok(x)
    }

    fn attention_branch(
        &self,
        g: &mut Graph<T>,
        input: &ModelInput<T>,
        ctx: &mut ForwardCtx<'_, T>,
    ) -> Result<NodeId, ModelError> {
        let mut tokens = self
            .item
            .embed_variable(g, &input.items, self.cfg.reduction)?;
        tokens.extend(
            self.charge
                .embed_variable(g, &input.charges, self.cfg.reduction)?,
        );
        let mut x = g.concat_rows(&tokens)?;
        for (l, block) in self.blocks.iter().enumerate() {
            ctx.layer = l;
            x = block.forward(g, x, ctx)?;
        }
        let pooled = pool(g, x, self.cfg.pooling)?;
        Ok(g.reshape(pooled, vec![1, self.cfg.d_model])?)
    }
}

impl<T: Scalar> CostModel<T> for HybridModel<T> {
    fn variant(&self) -> &'static str {
        "hybrid"
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
        let ff = self.ff_branch(g, input)?;
        let att = self.attention_branch(g, input, ctx)?;
        let joined = g.concat_cols(&[ff, att])?;
        self.head.forward(g, joined)
    }

    fn parameters(&self) -> Vec<Parameter<T>> {
        let mut params = self.dimension.parameters();
        params.extend(self.route.parameters());
        params.extend(self.service.parameters());
        params.push(self.heuristic.weight.clone());
        params.push(self.heuristic.bias.clone());
        for layer in &self.ff_encoder {
            params.push(layer.weight.clone());
            params.push(layer.bias.clone());
        }
        params.extend(self.item.parameters());
        params.extend(self.charge.parameters());
        for block in &self.blocks {
            params.extend(block.parameters());
        }
        params.push(self.head.weight.clone());
        params.push(self.head.bias.clone());
        params
    }

    fn attention_shape(&self) -> Option<(usize, usize)> {
        Some((self.cfg.layers, self.cfg.heads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::EncodedValue;
    use crate::synthgen;

    fn input(n_items: usize, salt: usize) -> ModelInput<f64> {
        let (_, schema) = synthgen::synth_std();
        let group = |specs: &[crate::schema::FeatureSpec], s: usize| {
            specs
                .iter()
                .enumerate()
                .map(|(i, spec)| match spec.cardinality {
                    Some(c) => EncodedValue::Cat((i + s) % (c + 1)),
                    None => EncodedValue::Num(0.1 * (i + s) as f64),
                })
                .collect::<Vec<_>>()
        };
        ModelInput {
            dimension: group(&schema.dimension, salt),
            route: group(&schema.route, salt + 1),
            service: group(&schema.service, salt + 2),
            items: (0..n_items).map(|i| group(&schema.item, i + salt)).collect(),
            charges: vec![group(&schema.charge, salt)],
            heuristic_std: 0.2,
            heuristic_cost: 45.0,
            actual_cost: Some(47.0),
        }
    }

    fn small() -> HybridModel<f64> {
        let (_, schema) = synthgen::synth_std();
        let cfg = ModelConfig {
            d_model: 8,
            heads: 2,
            hidden: 16,
            ..Default::default()
        };
        HybridModel::new(cfg, schema, 9).unwrap()
    }

    #[test]
    fn zeroed_attention_head_columns_make_it_item_blind() {
        let model = small();
        // zero the head coefficients over the attention half of the concat
        let mut w = model.head.weight.value().clone();
        for j in 8..16 {
            w.data_mut()[j] = 0.0;
        }
        model.head.weight.set_value(w);
        let mut g = Graph::new();
        let a = model
            .predict(&mut g, &input(1, 0), &mut ForwardCtx::eval())
            .unwrap();
        let b = model
            .predict(&mut g, &input(4, 0), &mut ForwardCtx::eval())
            .unwrap();
        assert_eq!(g.value(a).item(), g.value(b).item());
    }

    #[test]
    fn items_do_affect_the_full_model() {
        let model = small();
        let mut g = Graph::new();
        let a = model
            .predict(&mut g, &input(1, 0), &mut ForwardCtx::eval())
            .unwrap();
        let b = model
            .predict(&mut g, &input(4, 0), &mut ForwardCtx::eval())
            .unwrap();
        assert_ne!(g.value(a).item(), g.value(b).item());
    }

    #[test]
    fn head_is_a_single_linear_layer() {
        let model = small();
        assert_eq!(model.head.weight.shape(), vec![16, 1]);
        assert_eq!(model.head.bias.shape(), vec![1]);
    }

    #[test]
    fn attention_maps_cover_only_item_and_charge_tokens() {
        let model = small();
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::capturing();
        model.predict(&mut g, &input(3, 1), &mut ctx).unwrap();
        // 2 layers x 2 heads over a 4-token (3 items + 1 charge) sequence
        assert_eq!(ctx.attention_maps.len(), 4);
        for map in &ctx.attention_maps {
            assert_eq!(map.weights.len(), 4);
        }
    }

    #[test]
    fn zero_item_count_is_impossible_but_zero_charges_work() {
        let model = small();
        let mut inp = input(2, 3);
        inp.charges.clear();
        let mut g = Graph::new();
        let y = model.predict(&mut g, &inp, &mut ForwardCtx::eval()).unwrap();
        assert!(g.value(y).item().is_finite());
    }

    #[test]
    fn dense_layer_shapes_line_up() {
        let model = small();
        assert_eq!(model.ff_encoder[0].weight.shape(), vec![11 * 8, 16]);
        assert_eq!(model.ff_encoder[1].weight.shape(), vec![16, 8]);
    }
}
