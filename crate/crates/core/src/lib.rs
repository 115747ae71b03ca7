//! Rate-card cost modelling: a transformer that encodes a package's fixed
//! feature groups and variable item/charge lists to regress day-0 shipping
//! cost, together with a synthetic benchmark generator, a minimal autodiff
//! engine, the training/evaluation harness, attention-interaction analysis
//! and ablation sweeps.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod embeddings;
pub mod encoder;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod preprocess;
pub mod schema;
pub mod synthgen;
pub mod tensor;
pub mod training;

pub use graph::{Graph, NodeId, Parameter};
pub use schema::{FeatureSchema, FeatureSpec, GroupKind};
pub use tensor::{Scalar, Tensor};
