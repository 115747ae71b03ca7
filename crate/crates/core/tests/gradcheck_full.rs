//! Finite-difference verification of the complete model forward passes in
//! double precision.

use rct_core::embeddings::{EncodedValue, ModelInput};
use rct_core::gradcheck::gradcheck;
use rct_core::graph::Graph;
use rct_core::model::{CostModel, FeedForwardModel, HybridModel, ModelConfig, RctModel};
use rct_core::synthgen;
use rct_core::tensor::Tensor;

fn record_with(n_items: usize, n_charges: usize) -> ModelInput<f64> {
    let (_, schema) = synthgen::synth_std();
    let group = |specs: &[rct_core::schema::FeatureSpec], salt: usize| {
        specs
            .iter()
            .enumerate()
            .map(|(i, s)| match s.cardinality {
                Some(c) => EncodedValue::Cat((i + salt) % (c + 1)),
                None => EncodedValue::Num(0.37 * (i + salt + 1) as f64 - 0.8),
            })
            .collect::<Vec<_>>()
    };
    ModelInput {
        dimension: group(&schema.dimension, 1),
        route: group(&schema.route, 2),
        service: group(&schema.service, 3),
        items: (0..n_items).map(|i| group(&schema.item, i)).collect(),
        charges: (0..n_charges).map(|i| group(&schema.charge, i + 1)).collect(),
        heuristic_std: 0.6,
        heuristic_cost: 58.0,
        actual_cost: Some(60.0),
    }
}

fn small_cfg(variant: &str) -> ModelConfig {
    ModelConfig {
        variant: variant.into(),
        d_model: 8,
        layers: 1,
        heads: 2,
        hidden: 12,
        ..Default::default()
    }
}

#[test]
fn full_rct_forward_passes_at_1e5() {
    let (_, schema) = synthgen::synth_std();
    let model = RctModel::<f64>::new(small_cfg("rct"), schema, 17).unwrap();
    let input = record_with(2, 1);
    let params = model.parameters();
    let report = gradcheck(
        |g: &mut Graph<f64>| {
            let y = model
                .predict(g, &input, &mut rct_core::encoder::ForwardCtx::eval())
                .map_err(|e| match e {
                    rct_core::model::ModelError::Numerics(n) => n,
                    other => panic!("unexpected error {other}"),
                })?;
            Ok(y)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(
        report.passed(),
        "max rel err {} at {:?}",
        report.max_rel_err(),
        report
            .entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .map(|e| (&e.name, e.worst_index, e.analytic, e.numeric))
    );
}

#[test]
fn rct_with_l1_loss_passes_away_from_the_kink() {
    let (_, schema) = synthgen::synth_std();
    let model = RctModel::<f64>::new(small_cfg("rct"), schema, 18).unwrap();
    let input = record_with(3, 0);
    let params = model.parameters();
    let report = gradcheck(
        |g: &mut Graph<f64>| {
            let y = model
                .predict(g, &input, &mut rct_core::encoder::ForwardCtx::eval())
                .map_err(|e| match e {
                    rct_core::model::ModelError::Numerics(n) => n,
                    other => panic!("unexpected error {other}"),
                })?;
            // a target far from the prediction keeps |.| differentiable
            g.l1_loss(y, &Tensor::scalar(250.0))
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err());
}

#[test]
fn feedforward_and_hybrid_forwards_pass() {
    let (_, schema) = synthgen::synth_std();
    let input = record_with(2, 1);

    let ff = FeedForwardModel::<f64>::new(small_cfg("feedforward"), schema.clone(), 19).unwrap();
    let params = ff.parameters();
    let report = gradcheck(
        |g: &mut Graph<f64>| {
            ff.predict(g, &input, &mut rct_core::encoder::ForwardCtx::eval())
                .map_err(|e| match e {
                    rct_core::model::ModelError::Numerics(n) => n,
                    other => panic!("unexpected error {other}"),
                })
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(report.passed(), "feedforward: {}", report.max_rel_err());

    let hy = HybridModel::<f64>::new(small_cfg("hybrid"), schema, 20).unwrap();
    let params = hy.parameters();
    let report = gradcheck(
        |g: &mut Graph<f64>| {
            hy.predict(g, &input, &mut rct_core::encoder::ForwardCtx::eval())
                .map_err(|e| match e {
                    rct_core::model::ModelError::Numerics(n) => n,
                    other => panic!("unexpected error {other}"),
                })
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(report.passed(), "hybrid: {}", report.max_rel_err());
}
