//! Seeded synthetic rate-card generator with a known cost oracle.
//!
//! The actual cost is a pure function of the record: a linear term over the
//! dimension numericals, lookup constants for route and service categoricals,
//! additive per-item and per-charge handling terms, plus the deltas of any
//! matching anomaly rules. The day-0 heuristic sees the same base cost plus
//! Gaussian noise but is blind to the anomaly deltas, so a perfect predictor
//! scores MAE% = 0 and the heuristic itself scores exactly 100.
//!
//! Item and charge *categories* deliberately contribute nothing to the base
//! cost: their only effect on the label is through anomaly conjunctions, so
//! a model that cannot see the item list cannot recover the deltas from the
//! heuristic input either.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, FeatureValue, RateCard};
use crate::preprocess::feature_key;
use crate::schema::{FeatureKind, FeatureSchema, FeatureSpec, GroupKind};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("generator config inconsistent with schema: {0}")]
    SchemaMismatch(String),
    #[error("invalid anomaly rule: {0}")]
    InvalidRule(String),
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
}

/// A conjunction of (feature, category index) terms with an additive cost
/// delta. Order (the number of terms) must be at least 3. A term on an item
/// or charge feature is satisfied when any list entry carries the category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalyRule {
    /// Pairs of ("group.feature", category index).
    pub conjunction: Vec<(String, usize)>,
    /// Applied to the actual cost only; the heuristic never sees it.
    pub cost_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub n_records: usize,
    pub seed: u64,
    /// "group.feature" -> cardinality for every categorical feature.
    pub cardinalities: BTreeMap<String, usize>,
    pub item_count_range: (usize, usize),
    pub charge_count_range: (usize, usize),
    pub anomaly_rules: Vec<AnomalyRule>,
    pub heuristic_noise_std: f64,
}

impl GenConfig {
    pub fn cardinalities_from(schema: &FeatureSchema) -> BTreeMap<String, usize> {
        let mut map = BTreeMap::new();
        for kind in GroupKind::ALL {
            for spec in schema.group(kind) {
                if let Some(c) = spec.cardinality {
                    map.insert(feature_key(kind, &spec.name), c);
                }
            }
        }
        map
    }

    pub fn validate(&self, schema: &FeatureSchema) -> Result<(), GenError> {
        if self.n_records == 0 {
            return Err(GenError::InvalidConfig("n_records must be positive".into()));
        }
        if self.item_count_range.0 < 1 || self.item_count_range.0 > self.item_count_range.1 {
            return Err(GenError::InvalidConfig(
                "item_count_range must satisfy 1 <= min <= max".into(),
            ));
        }
        if self.charge_count_range.0 > self.charge_count_range.1 {
            return Err(GenError::InvalidConfig(
                "charge_count_range must satisfy min <= max".into(),
            ));
        }
        if !self.heuristic_noise_std.is_finite() || self.heuristic_noise_std < 0.0 {
            return Err(GenError::InvalidConfig(
                "heuristic_noise_std must be finite and non-negative".into(),
            ));
        }
        let expected = Self::cardinalities_from(schema);
        if self.cardinalities != expected {
            return Err(GenError::SchemaMismatch(format!(
                "cardinalities {:?} do not match schema {:?}",
                self.cardinalities, expected
            )));
        }
        for rule in &self.anomaly_rules {
            if rule.conjunction.len() < 3 {
                return Err(GenError::InvalidRule(format!(
                    "conjunction order {} < 3",
                    rule.conjunction.len()
                )));
            }
            for (key, index) in &rule.conjunction {
                let Some(&card) = expected.get(key) else {
                    return Err(GenError::InvalidRule(format!(
                        "'{key}' is not a categorical feature"
                    )));
                };
                if *index >= card {
                    return Err(GenError::InvalidRule(format!(
                        "category index {index} out of range for '{key}' (cardinality {card})"
                    )));
                }
            }
            if !rule.cost_delta.is_finite() {
                return Err(GenError::InvalidRule("cost_delta must be finite".into()));
            }
        }
        Ok(())
    }
}

/// Category label emitted for (feature, index): the feature name uppercased
/// plus the index, e.g. `PACKAGING_2`.
pub fn category_label(feature_name: &str, index: usize) -> String {
    format!("{}_{}", feature_name.to_uppercase(), index)
}

/// The ground-truth pricing tables, derived deterministically from the
/// config seed.
#[derive(Clone, Debug)]
pub struct CostOracle {
    pub intercept: f64,
    pub dimension_weights: Vec<f64>,
    /// Per route categorical feature, one constant per category (index 0..card).
    pub route_tables: Vec<Vec<f64>>,
    pub service_tables: Vec<Vec<f64>>,
    pub item_base: f64,
    pub item_weights: Vec<f64>,
    pub charge_base: f64,
    pub charge_weights: Vec<f64>,
}

const ORACLE_STREAM: u64 = 0x6f72_6163;
const RECORD_STREAM: u64 = 0x7265_636f;

fn mix(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 over the xored inputs
    let mut z = seed ^ stream.rotate_left(17) ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl CostOracle {
    pub fn new(config: &GenConfig, schema: &FeatureSchema) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, ORACLE_STREAM, 0));
        let numeric_count =
            |kind: GroupKind| schema.group(kind).iter().filter(|s| !s.is_categorical()).count();
        let dimension_weights = (0..numeric_count(GroupKind::Dimension))
            .map(|_| rng.random_range(0.3..1.0))
            .collect();
        let tables = |rng: &mut ChaCha8Rng, kind: GroupKind| -> Vec<Vec<f64>> {
            schema
                .group(kind)
                .iter()
                .filter_map(|s| s.cardinality)
                .map(|card| (0..card).map(|_| rng.random_range(0.0..8.0)).collect())
                .collect()
        };
        let route_tables = tables(&mut rng, GroupKind::Route);
        let service_tables = tables(&mut rng, GroupKind::Service);
        let item_weights = (0..numeric_count(GroupKind::Item))
            .map(|_| rng.random_range(0.3..0.8))
            .collect();
        let charge_weights = (0..numeric_count(GroupKind::Charge))
            .map(|_| rng.random_range(0.5..1.5))
            .collect();
        CostOracle {
            intercept: 12.0,
            dimension_weights,
            route_tables,
            service_tables,
            item_base: 3.0,
            item_weights,
            charge_base: 2.0,
            charge_weights,
        }
    }

    fn categorical_lookup(
        tables: &[Vec<f64>],
        specs: &[FeatureSpec],
        values: &[FeatureValue],
    ) -> f64 {
        let mut table_idx = 0;
        let mut total = 0.0;
        for (spec, value) in specs.iter().zip(values) {
            if spec.is_categorical() {
                let card = spec.cardinality.unwrap();
                if let Some(idx) = label_index(spec, value) {
                    if idx < card {
                        total += tables[table_idx][idx];
                    }
                }
                table_idx += 1;
            }
        }
        total
    }

    fn weighted_numericals(weights: &[f64], specs: &[FeatureSpec], values: &[FeatureValue]) -> f64 {
        let mut w_idx = 0;
        let mut total = 0.0;
        for (spec, value) in specs.iter().zip(values) {
            if !spec.is_categorical() {
                total += weights[w_idx] * value.as_number().unwrap_or(0.0);
                w_idx += 1;
            }
        }
        total
    }

    /// Additive handling term of one item entry. Categories contribute 0.
    pub fn item_handling(&self, schema: &FeatureSchema, item: &[FeatureValue]) -> f64 {
        self.item_base + Self::weighted_numericals(&self.item_weights, &schema.item, item)
    }

    pub fn charge_amount(&self, schema: &FeatureSchema, charge: &[FeatureValue]) -> f64 {
        self.charge_base + Self::weighted_numericals(&self.charge_weights, &schema.charge, charge)
    }

    /// Anomaly-free cost: what the day-0 heuristic estimates (modulo noise).
    pub fn base_cost(&self, schema: &FeatureSchema, record: &RateCard) -> f64 {
        let mut cost = self.intercept;
        cost += Self::weighted_numericals(
            &self.dimension_weights,
            &schema.dimension,
            &record.dimension,
        );
        cost += Self::categorical_lookup(&self.route_tables, &schema.route, &record.route);
        cost += Self::categorical_lookup(&self.service_tables, &schema.service, &record.service);
        for item in &record.items {
            cost += self.item_handling(schema, item);
        }
        for charge in &record.charges {
            cost += self.charge_amount(schema, charge);
        }
        cost
    }
}

/// Index of a raw categorical value under the generator's labelling scheme.
fn label_index(spec: &FeatureSpec, value: &FeatureValue) -> Option<usize> {
    match value {
        FeatureValue::Text(s) => {
            let prefix = format!("{}_", spec.name.to_uppercase());
            s.strip_prefix(&prefix).and_then(|rest| rest.parse().ok())
        }
        FeatureValue::Number(x) => {
            if x.fract() == 0.0 && *x >= 0.0 {
                Some(*x as usize)
            } else {
                None
            }
        }
    }
}

fn term_matches(schema: &FeatureSchema, record: &RateCard, key: &str, index: usize) -> bool {
    let Some((group_name, feature_name)) = key.split_once('.') else {
        return false;
    };
    let Some(kind) = GroupKind::ALL.iter().find(|k| k.name() == group_name) else {
        return false;
    };
    let kind = *kind;
    let entries: Vec<&[FeatureValue]> = match kind {
        GroupKind::Item => record.items.iter().map(|i| i.as_slice()).collect(),
        GroupKind::Charge => record.charges.iter().map(|c| c.as_slice()).collect(),
        _ => vec![record.group(kind)],
    };
    let Some(pos) = schema.group(kind).iter().position(|s| s.name == feature_name) else {
        return false;
    };
    let spec = &schema.group(kind)[pos];
    entries
        .iter()
        .any(|entry| label_index(spec, &entry[pos]) == Some(index))
}

/// Sum of the deltas of every matching anomaly rule.
pub fn anomaly_delta(config: &GenConfig, schema: &FeatureSchema, record: &RateCard) -> f64 {
    config
        .anomaly_rules
        .iter()
        .filter(|rule| {
            rule.conjunction
                .iter()
                .all(|(key, index)| term_matches(schema, record, key, *index))
        })
        .map(|rule| rule.cost_delta)
        .sum()
}

/// Ground-truth actual cost of a record.
pub fn oracle_cost(
    oracle: &CostOracle,
    config: &GenConfig,
    schema: &FeatureSchema,
    record: &RateCard,
) -> f64 {
    oracle.base_cost(schema, record) + anomaly_delta(config, schema, record)
}

fn sample_group(rng: &mut ChaCha8Rng, specs: &[FeatureSpec]) -> Vec<FeatureValue> {
    specs
        .iter()
        .map(|spec| match spec.kind {
            FeatureKind::Categorical => {
                let idx = rng.random_range(0..spec.cardinality.unwrap());
                FeatureValue::Text(category_label(&spec.name, idx))
            }
            FeatureKind::Numerical => FeatureValue::Number(rng.random_range(0.0..10.0)),
        })
        .collect()
}

/// Generate a dataset. Each record draws from its own RNG stream keyed by
/// (seed, record index), so the output is independent of evaluation order.
pub fn generate(config: &GenConfig, schema: &FeatureSchema) -> Result<Dataset, GenError> {
    config.validate(schema)?;
    let oracle = CostOracle::new(config, schema);
    let noise = if config.heuristic_noise_std > 0.0 {
        Some(Normal::new(0.0, config.heuristic_noise_std).expect("validated std"))
    } else {
        None
    };
    let records = (0..config.n_records)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, RECORD_STREAM, i as u64));
            let n_items =
                rng.random_range(config.item_count_range.0..=config.item_count_range.1);
            let n_charges =
                rng.random_range(config.charge_count_range.0..=config.charge_count_range.1);
            let mut record = RateCard {
                dimension: sample_group(&mut rng, &schema.dimension),
                route: sample_group(&mut rng, &schema.route),
                service: sample_group(&mut rng, &schema.service),
                items: (0..n_items).map(|_| sample_group(&mut rng, &schema.item)).collect(),
                charges: (0..n_charges)
                    .map(|_| sample_group(&mut rng, &schema.charge))
                    .collect(),
                heuristic_cost: 0.0,
                actual_cost: None,
            };
            let base = oracle.base_cost(schema, &record);
            let eps = noise.map_or(0.0, |n| n.sample(&mut rng));
            record.heuristic_cost = base + eps;
            record.actual_cost = Some(base + anomaly_delta(config, schema, &record));
            record
        })
        .collect();
    Ok(Dataset {
        schema: schema.clone(),
        records,
        encoded: false,
    })
}

/// The default benchmark: 50k records, three anomaly rules of order 3, 4
/// and 5, heuristic noise of about 2% of the mean cost.
pub fn synth_std() -> (GenConfig, FeatureSchema) {
    let schema = FeatureSchema {
        dimension: vec![
            FeatureSpec::numerical("weight"),
            FeatureSpec::numerical("volume"),
            FeatureSpec::categorical("size_class", 4),
            FeatureSpec::categorical("packaging", 3),
        ],
        route: vec![
            FeatureSpec::numerical("distance"),
            FeatureSpec::categorical("origin_region", 6),
            FeatureSpec::categorical("dest_region", 6),
        ],
        service: vec![
            FeatureSpec::numerical("fuel_index"),
            FeatureSpec::categorical("carrier", 5),
            FeatureSpec::categorical("speed", 3),
        ],
        item: vec![
            FeatureSpec::numerical("unit_weight"),
            FeatureSpec::categorical("category", 8),
            FeatureSpec::categorical("fragile", 2),
        ],
        charge: vec![
            FeatureSpec::numerical("units"),
            FeatureSpec::categorical("charge_type", 6),
        ],
    };
    let config = GenConfig {
        n_records: 50_000,
        seed: 42,
        cardinalities: GenConfig::cardinalities_from(&schema),
        item_count_range: (1, 4),
        charge_count_range: (0, 3),
        anomaly_rules: vec![
            AnomalyRule {
                conjunction: vec![
                    ("dimension.packaging".into(), 2),
                    ("service.speed".into(), 2),
                    ("item.category".into(), 5),
                ],
                cost_delta: 40.0,
            },
            AnomalyRule {
                conjunction: vec![
                    ("dimension.size_class".into(), 2),
                    ("dimension.packaging".into(), 1),
                    ("service.speed".into(), 1),
                    ("item.category".into(), 2),
                ],
                cost_delta: -35.0,
            },
            AnomalyRule {
                conjunction: vec![
                    ("dimension.size_class".into(), 0),
                    ("dimension.packaging".into(), 0),
                    ("service.speed".into(), 0),
                    ("service.carrier".into(), 3),
                    ("item.category".into(), 7),
                ],
                cost_delta: 45.0,
            },
        ],
        heuristic_noise_std: 1.2,
    };
    (config, schema)
}
