//! Label encoding and standardization, fit on the training split.
//!
//! Categorical features map to indices starting at 1; index 0 is reserved
//! for categories unseen at fit time. Numerical features standardize with
//! the population standard deviation; a zero-variance feature maps to a
//! constant 0. Costs stay in currency units on the records — their
//! statistics are kept here so training can standardize targets and the
//! heuristic input at the model boundary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{DataError, Dataset, FeatureValue, RateCard};
use crate::schema::{FeatureKind, FeatureSchema, GroupKind};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumStats {
    pub mean: f64,
    /// Population standard deviation; 0 marks a zero-variance feature.
    pub std: f64,
}

impl NumStats {
    pub fn standardize(&self, x: f64) -> f64 {
        if self.std == 0.0 {
            0.0
        } else {
            (x - self.mean) / self.std
        }
    }

    pub fn destandardize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessState {
    /// "group.feature" -> category -> index (1-based; 0 = unknown).
    pub categories: BTreeMap<String, BTreeMap<String, usize>>,
    /// "group.feature" -> fitted statistics.
    pub numerical: BTreeMap<String, NumStats>,
    /// Statistics of the day-0 heuristic estimate over the training split.
    pub heuristic: NumStats,
    /// Statistics of the actual cost over the training split.
    pub cost: NumStats,
}

pub fn feature_key(kind: GroupKind, name: &str) -> String {
    format!("{kind}.{name}")
}

impl PreprocessState {
    pub fn encode_category(&self, kind: GroupKind, name: &str, value: &FeatureValue) -> usize {
        let key = feature_key(kind, name);
        let Some(raw) = value.category_key() else {
            return 0;
        };
        self.categories
            .get(&key)
            .and_then(|m| m.get(&raw))
            .copied()
            .unwrap_or(0)
    }

    /// Inverse of `encode_category` for known indices; index 0 has no name.
    pub fn decode_category(&self, kind: GroupKind, name: &str, index: usize) -> Option<&str> {
        let key = feature_key(kind, name);
        self.categories.get(&key).and_then(|m| {
            m.iter()
                .find(|(_, &i)| i == index)
                .map(|(name, _)| name.as_str())
        })
    }

    pub fn num_stats(&self, kind: GroupKind, name: &str) -> Option<&NumStats> {
        self.numerical.get(&feature_key(kind, name))
    }
}

fn population_stats(values: &[f64]) -> NumStats {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    NumStats {
        mean,
        std: var.sqrt(),
    }
}

/// Fit category maps and numerical statistics on a training split. Item and
/// charge features pool their values over all list entries.
pub fn fit_preprocess(train: &Dataset) -> Result<PreprocessState, DataError> {
    if train.records.is_empty() {
        return Err(DataError::State("training split is empty".into()));
    }
    if train.encoded {
        return Err(DataError::State(
            "cannot fit preprocessing on an already-encoded dataset".into(),
        ));
    }
    let schema = &train.schema;
    let mut categories: BTreeMap<String, std::collections::BTreeSet<String>> = BTreeMap::new();
    let mut numeric_values: BTreeMap<String, Vec<f64>> = BTreeMap::new();

    let mut visit = |kind: GroupKind, values: &[FeatureValue]| {
        for (spec, value) in schema.group(kind).iter().zip(values) {
            let key = feature_key(kind, &spec.name);
            match spec.kind {
                FeatureKind::Categorical => {
                    if let Some(raw) = value.category_key() {
                        categories.entry(key).or_default().insert(raw);
                    }
                }
                FeatureKind::Numerical => {
                    if let Some(x) = value.as_number() {
                        numeric_values.entry(key).or_default().push(x);
                    }
                }
            }
        }
    };

    for record in &train.records {
        visit(GroupKind::Dimension, &record.dimension);
        visit(GroupKind::Route, &record.route);
        visit(GroupKind::Service, &record.service);
        for item in &record.items {
            visit(GroupKind::Item, item);
        }
        for charge in &record.charges {
            visit(GroupKind::Charge, charge);
        }
    }

    let categories = categories
        .into_iter()
        .map(|(key, set)| {
            let map = set
                .into_iter()
                .enumerate()
                .map(|(i, name)| (name, i + 1))
                .collect();
            (key, map)
        })
        .collect();
    let numerical = numeric_values
        .into_iter()
        .map(|(key, values)| (key, population_stats(&values)))
        .collect();

    let heuristics: Vec<f64> = train.records.iter().map(|r| r.heuristic_cost).collect();
    let costs: Vec<f64> = train
        .records
        .iter()
        .map(|r| {
            r.actual_cost.ok_or_else(|| {
                DataError::State("training records must carry actual_cost".into())
            })
        })
        .collect::<Result<_, _>>()?;

    Ok(PreprocessState {
        categories,
        numerical,
        heuristic: population_stats(&heuristics),
        cost: population_stats(&costs),
    })
}

fn encode_group(
    state: &PreprocessState,
    schema: &FeatureSchema,
    kind: GroupKind,
    values: &[FeatureValue],
) -> Vec<FeatureValue> {
    schema
        .group(kind)
        .iter()
        .zip(values)
        .map(|(spec, value)| match spec.kind {
            FeatureKind::Categorical => {
                FeatureValue::Number(state.encode_category(kind, &spec.name, value) as f64)
            }
            FeatureKind::Numerical => {
                let x = value.as_number().unwrap_or(0.0);
                let stats = state
                    .num_stats(kind, &spec.name)
                    .copied()
                    .unwrap_or(NumStats { mean: 0.0, std: 0.0 });
                FeatureValue::Number(stats.standardize(x))
            }
        })
        .collect()
}

/// Encode categoricals and standardize numericals, leaving costs in
/// currency units. Rejects a second application.
pub fn apply_preprocess(ds: &Dataset, state: &PreprocessState) -> Result<Dataset, DataError> {
    if ds.encoded {
        return Err(DataError::State(
            "dataset is already encoded; refusing to apply preprocessing twice".into(),
        ));
    }
    let schema = &ds.schema;
    let records = ds
        .records
        .iter()
        .map(|r| RateCard {
            dimension: encode_group(state, schema, GroupKind::Dimension, &r.dimension),
            route: encode_group(state, schema, GroupKind::Route, &r.route),
            service: encode_group(state, schema, GroupKind::Service, &r.service),
            items: r
                .items
                .iter()
                .map(|i| encode_group(state, schema, GroupKind::Item, i))
                .collect(),
            charges: r
                .charges
                .iter()
                .map(|c| encode_group(state, schema, GroupKind::Charge, c))
                .collect(),
            heuristic_cost: r.heuristic_cost,
            actual_cost: r.actual_cost,
        })
        .collect();
    Ok(Dataset {
        schema: schema.clone(),
        records,
        encoded: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::FeatureSpec;

    fn schema() -> FeatureSchema {
        FeatureSchema {
            dimension: vec![
                FeatureSpec::numerical("weight"),
                FeatureSpec::categorical("size_class", 2),
            ],
            route: vec![FeatureSpec::categorical("origin", 2)],
            service: vec![FeatureSpec::numerical("fee")],
            item: vec![FeatureSpec::numerical("unit_weight")],
            charge: vec![FeatureSpec::numerical("units")],
        }
    }

    fn record(weight: f64, size: &str, fee: f64) -> RateCard {
        RateCard {
            dimension: vec![FeatureValue::Number(weight), FeatureValue::Text(size.into())],
            route: vec![FeatureValue::Text("R0".into())],
            service: vec![FeatureValue::Number(fee)],
            items: vec![vec![FeatureValue::Number(weight)]],
            charges: vec![],
            heuristic_cost: 10.0,
            actual_cost: Some(12.0),
        }
    }

    fn train() -> Dataset {
        Dataset {
            schema: schema(),
            records: vec![
                record(1.0, "A", 5.0),
                record(2.0, "B", 5.0),
                record(3.0, "A", 5.0),
            ],
            encoded: false,
        }
    }

    #[test]
    fn categories_map_in_lexicographic_order_from_one() {
        let state = fit_preprocess(&train()).unwrap();
        let map = &state.categories["dimension.size_class"];
        assert_eq!(map["A"], 1);
        assert_eq!(map["B"], 2);
        let unseen = FeatureValue::Text("XYZ".into());
        assert_eq!(
            state.encode_category(GroupKind::Dimension, "size_class", &unseen),
            0
        );
    }

    #[test]
    fn population_std_of_one_two_three() {
        let state = fit_preprocess(&train()).unwrap();
        let stats = state.num_stats(GroupKind::Dimension, "weight").unwrap();
        assert!((stats.mean - 2.0).abs() < 1e-12);
        assert!((stats.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        // the frozen expected value from hand computation
        assert!((stats.std - 0.816_496_580_927_726).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_feature_standardizes_to_zero() {
        let state = fit_preprocess(&train()).unwrap();
        let encoded = apply_preprocess(&train(), &state).unwrap();
        for r in &encoded.records {
            assert_eq!(r.service[0], FeatureValue::Number(0.0));
        }
    }

    #[test]
    fn standardization_identities() {
        let state = fit_preprocess(&train()).unwrap();
        let stats = *state.num_stats(GroupKind::Dimension, "weight").unwrap();
        assert_eq!(stats.standardize(stats.mean), 0.0);
        assert!((stats.standardize(stats.mean + stats.std) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unseen_category_encodes_to_zero_index() {
        let state = fit_preprocess(&train()).unwrap();
        let mut ds = train();
        ds.records[0].dimension[1] = FeatureValue::Text("XYZ".into());
        let encoded = apply_preprocess(&ds, &state).unwrap();
        assert_eq!(encoded.records[0].dimension[1], FeatureValue::Number(0.0));
    }

    #[test]
    fn double_application_is_rejected() {
        let state = fit_preprocess(&train()).unwrap();
        let encoded = apply_preprocess(&train(), &state).unwrap();
        let err = apply_preprocess(&encoded, &state).unwrap_err();
        assert!(err.to_string().contains("already encoded"), "{err}");
    }

    #[test]
    fn encode_decode_bijective_on_training_categories() {
        let state = fit_preprocess(&train()).unwrap();
        for cat in ["A", "B"] {
            let idx = state.encode_category(
                GroupKind::Dimension,
                "size_class",
                &FeatureValue::Text(cat.into()),
            );
            assert_eq!(
                state.decode_category(GroupKind::Dimension, "size_class", idx),
                Some(cat)
            );
        }
        assert_eq!(state.decode_category(GroupKind::Dimension, "size_class", 0), None);
    }

    #[test]
    fn training_split_standardizes_to_zero_mean_unit_std() {
        let ds = train();
        let state = fit_preprocess(&ds).unwrap();
        let encoded = apply_preprocess(&ds, &state).unwrap();
        let values: Vec<f64> = encoded
            .records
            .iter()
            .map(|r| r.dimension[0].as_number().unwrap())
            .collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9);
        assert!((var.sqrt() - 1.0).abs() < 1e-6);
    }
}
