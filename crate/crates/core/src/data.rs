//! Rate-card records, the JSON Lines dataset format, and seeded splitting.
//!
//! One line per record:
//! `{"dimension": {..}, "route": {..}, "service": {..}, "items": [{..}, ..],
//!   "charges": [..], "heuristic_cost": n, "actual_cost": n|null}`
//!
//! Categorical values are strings (or non-negative integers) before
//! encoding and label-encoded indices afterwards.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{FeatureKind, FeatureSchema, GroupKind};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: parse error: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: validation error: {msg}")]
    Validation { line: usize, msg: String },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("invalid split: {0}")]
    Split(String),
}

/// A raw categorical label or a number (numerical value, or an encoded
/// categorical index after preprocessing).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureValue {
    Text(String),
    Number(f64),
}

impl FeatureValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            FeatureValue::Number(x) => Some(*x),
            FeatureValue::Text(_) => None,
        }
    }

    /// Canonical key used for label encoding: strings as-is, non-negative
    /// integers by their decimal form.
    pub fn category_key(&self) -> Option<String> {
        match self {
            FeatureValue::Text(s) => Some(s.clone()),
            FeatureValue::Number(x) => {
                if x.fract() == 0.0 && *x >= 0.0 && x.is_finite() {
                    Some(format!("{}", *x as u64))
                } else {
                    None
                }
            }
        }
    }
}

/// One package: three fixed-length groups, variable item/charge lists, the
/// day-0 heuristic estimate and (when known) the actual cost.
#[derive(Clone, Debug, PartialEq)]
pub struct RateCard {
    pub dimension: Vec<FeatureValue>,
    pub route: Vec<FeatureValue>,
    pub service: Vec<FeatureValue>,
    pub items: Vec<Vec<FeatureValue>>,
    pub charges: Vec<Vec<FeatureValue>>,
    pub heuristic_cost: f64,
    pub actual_cost: Option<f64>,
}

impl RateCard {
    pub fn group(&self, kind: GroupKind) -> &[FeatureValue] {
        match kind {
            GroupKind::Dimension => &self.dimension,
            GroupKind::Route => &self.route,
            GroupKind::Service => &self.service,
            _ => panic!("group() is only defined for fixed-length groups"),
        }
    }

    /// Token count of the assembled sequence: fixed groups, one token per
    /// item and per charge, plus the heuristic-cost token.
    pub fn sequence_len(&self, schema: &FeatureSchema) -> usize {
        schema.group_len(GroupKind::Dimension)
            + schema.group_len(GroupKind::Route)
            + schema.group_len(GroupKind::Service)
            + self.items.len()
            + self.charges.len()
            + 1
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub records: Vec<RateCard>,
    /// Set by `apply_preprocess`; encoded datasets must not be re-encoded.
    pub encoded: bool,
}

/// Wire form of one JSONL line.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    dimension: BTreeMap<String, FeatureValue>,
    route: BTreeMap<String, FeatureValue>,
    service: BTreeMap<String, FeatureValue>,
    items: Vec<BTreeMap<String, FeatureValue>>,
    charges: Vec<BTreeMap<String, FeatureValue>>,
    heuristic_cost: f64,
    actual_cost: Option<f64>,
}

fn group_from_map(
    map: &BTreeMap<String, FeatureValue>,
    schema: &FeatureSchema,
    kind: GroupKind,
    line: usize,
) -> Result<Vec<FeatureValue>, DataError> {
    let specs = schema.group(kind);
    if map.len() != specs.len() {
        let expected: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        return Err(DataError::Validation {
            line,
            msg: format!(
                "group '{kind}' has {} features, expected {} ({expected:?})",
                map.len(),
                specs.len()
            ),
        });
    }
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let value = map.get(&spec.name).ok_or_else(|| DataError::Validation {
            line,
            msg: format!("missing feature '{kind}.{}'", spec.name),
        })?;
        match spec.kind {
            FeatureKind::Numerical => {
                let x = value.as_number().ok_or_else(|| DataError::Validation {
                    line,
                    msg: format!("feature '{kind}.{}' must be numeric", spec.name),
                })?;
                if !x.is_finite() {
                    return Err(DataError::Validation {
                        line,
                        msg: format!("feature '{kind}.{}' is not finite", spec.name),
                    });
                }
            }
            FeatureKind::Categorical => {
                if value.category_key().is_none() {
                    return Err(DataError::Validation {
                        line,
                        msg: format!(
                            "feature '{kind}.{}' must be a string or non-negative integer",
                            spec.name
                        ),
                    });
                }
            }
        }
        out.push(value.clone());
    }
    Ok(out)
}

fn group_to_map(values: &[FeatureValue], specs: &[crate::schema::FeatureSpec]) -> BTreeMap<String, FeatureValue> {
    specs
        .iter()
        .zip(values)
        .map(|(s, v)| (s.name.clone(), v.clone()))
        .collect()
}

fn record_from_line(line_no: usize, line: &str, schema: &FeatureSchema) -> Result<RateCard, DataError> {
    let parsed: RecordLine = serde_json::from_str(line).map_err(|e| DataError::Parse {
        line: line_no,
        msg: e.to_string(),
    })?;
    if parsed.items.is_empty() {
        return Err(DataError::Validation {
            line: line_no,
            msg: "items must be non-empty (n_i >= 1 violated)".into(),
        });
    }
    if !parsed.heuristic_cost.is_finite() {
        return Err(DataError::Validation {
            line: line_no,
            msg: "heuristic_cost is not finite".into(),
        });
    }
    if let Some(c) = parsed.actual_cost {
        if !c.is_finite() {
            return Err(DataError::Validation {
                line: line_no,
                msg: "actual_cost is not finite".into(),
            });
        }
    }
    let items = parsed
        .items
        .iter()
        .map(|m| group_from_map(m, schema, GroupKind::Item, line_no))
        .collect::<Result<Vec<_>, _>>()?;
    let charges = parsed
        .charges
        .iter()
        .map(|m| group_from_map(m, schema, GroupKind::Charge, line_no))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RateCard {
        dimension: group_from_map(&parsed.dimension, schema, GroupKind::Dimension, line_no)?,
        route: group_from_map(&parsed.route, schema, GroupKind::Route, line_no)?,
        service: group_from_map(&parsed.service, schema, GroupKind::Service, line_no)?,
        items,
        charges,
        heuristic_cost: parsed.heuristic_cost,
        actual_cost: parsed.actual_cost,
    })
}

pub fn record_to_json(record: &RateCard, schema: &FeatureSchema) -> String {
    let line = RecordLine {
        dimension: group_to_map(&record.dimension, &schema.dimension),
        route: group_to_map(&record.route, &schema.route),
        service: group_to_map(&record.service, &schema.service),
        items: record
            .items
            .iter()
            .map(|i| group_to_map(i, &schema.item))
            .collect(),
        charges: record
            .charges
            .iter()
            .map(|c| group_to_map(c, &schema.charge))
            .collect(),
        heuristic_cost: record.heuristic_cost,
        actual_cost: record.actual_cost,
    };
    serde_json::to_string(&line).expect("record serializes")
}

/// Read a JSONL dataset, validating every record against the schema.
pub fn load_dataset(path: &Path, schema: &FeatureSchema) -> Result<Dataset, DataError> {
    schema.validate()?;
    let file = fs::File::open(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(record_from_line(i + 1, &line, schema)?);
    }
    Ok(Dataset {
        schema: schema.clone(),
        records,
        encoded: false,
    })
}

/// Write a dataset in canonical form: one compact JSON object per line,
/// feature keys sorted.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut out = fs::File::create(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    for record in &ds.records {
        writeln!(out, "{}", record_to_json(record, &ds.schema)).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    Ok(())
}

/// Deterministic seeded split into train/val/test. The three parts are an
/// exact partition of the input records.
pub fn split_dataset(
    ds: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset), DataError> {
    let (ft, fv, fe) = fractions;
    if ft <= 0.0 || fv <= 0.0 || fe <= 0.0 {
        return Err(DataError::Split("fractions must be positive".into()));
    }
    if (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(DataError::Split(format!(
            "fractions must sum to 1, got {}",
            ft + fv + fe
        )));
    }
    let n = ds.records.len();
    let n_train = (ft * n as f64).round() as usize;
    let n_val = (fv * n as f64).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(DataError::Split(format!(
            "split sizes ({n_train}, {n_val}, {}) leave an empty part",
            n.saturating_sub(n_train + n_val)
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);

    let take = |range: &[usize]| Dataset {
        schema: ds.schema.clone(),
        records: range.iter().map(|&i| ds.records[i].clone()).collect(),
        encoded: ds.encoded,
    };
    Ok((
        take(&indices[..n_train]),
        take(&indices[n_train..n_train + n_val]),
        take(&indices[n_train + n_val..]),
    ))
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
            service: vec![FeatureSpec::categorical("carrier", 2)],
            item: vec![FeatureSpec::numerical("unit_weight")],
            charge: vec![FeatureSpec::numerical("units")],
        }
    }

    fn record(weight: f64) -> RateCard {
        RateCard {
            dimension: vec![
                FeatureValue::Number(weight),
                FeatureValue::Text("S".into()),
            ],
            route: vec![FeatureValue::Text("R0".into())],
            service: vec![FeatureValue::Text("C0".into())],
            items: vec![vec![FeatureValue::Number(1.5)]],
            charges: vec![],
            heuristic_cost: 10.0,
            actual_cost: Some(11.0),
        }
    }

    fn dataset(n: usize) -> Dataset {
        Dataset {
            schema: schema(),
            records: (0..n).map(|i| record(i as f64)).collect(),
            encoded: false,
        }
    }

    #[test]
    fn two_line_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two.jsonl");
        let ds = dataset(2);
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path, &schema()).unwrap();
        assert_eq!(loaded.records.len(), 2);
        assert_eq!(loaded.records, ds.records);
        // canonical files survive a write(load(x)) byte-for-byte
        let original = fs::read(&path).unwrap();
        let path2 = dir.path().join("two-rewritten.jsonl");
        save_dataset(&loaded, &path2).unwrap();
        assert_eq!(original, fs::read(&path2).unwrap());
    }

    #[test]
    fn empty_items_is_a_validation_error() {
        let s = schema();
        let line = r#"{"dimension":{"weight":1.0,"size_class":"S"},"route":{"origin":"R0"},"service":{"carrier":"C0"},"items":[],"charges":[],"heuristic_cost":1.0,"actual_cost":2.0}"#;
        let err = record_from_line(1, line, &s).unwrap_err();
        assert!(err.to_string().contains("n_i >= 1"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let ds = dataset(1);
        let good = record_to_json(&ds.records[0], &ds.schema);
        fs::write(&path, format!("{good}\n{{not json\n")).unwrap();
        let err = load_dataset(&path, &ds.schema).unwrap_err();
        assert!(err.to_string().starts_with("line 2"), "{err}");
    }

    #[test]
    fn missing_feature_names_field() {
        let s = schema();
        let line = r#"{"dimension":{"weight":1.0},"route":{"origin":"R0"},"service":{"carrier":"C0"},"items":[{"unit_weight":1.0}],"charges":[],"heuristic_cost":1.0,"actual_cost":null}"#;
        let err = record_from_line(1, line, &s).unwrap_err();
        assert!(err.to_string().contains("dimension"), "{err}");
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = dataset(10);
        let (tr, va, te) = split_dataset(&ds, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((tr.records.len(), va.records.len(), te.records.len()), (8, 1, 1));
        let (tr2, ..) = split_dataset(&ds, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(tr.records, tr2.records);
        // a different seed permutes membership but not sizes
        let (tr3, va3, te3) = split_dataset(&ds, (0.8, 0.1, 0.1), 8).unwrap();
        assert_eq!(
            (tr3.records.len(), va3.records.len(), te3.records.len()),
            (8, 1, 1)
        );
        assert_ne!(tr.records, tr3.records);
    }

    #[test]
    fn split_rejects_empty_parts() {
        let ds = dataset(5);
        assert!(split_dataset(&ds, (0.9, 0.05, 0.05), 1).is_err());
    }

    #[test]
    fn split_is_an_exact_partition() {
        let ds = dataset(23);
        let (tr, va, te) = split_dataset(&ds, (0.6, 0.2, 0.2), 3).unwrap();
        let mut got: Vec<f64> = tr
            .records
            .iter()
            .chain(&va.records)
            .chain(&te.records)
            .map(|r| r.dimension[0].as_number().unwrap())
            .collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let want: Vec<f64> = (0..23).map(|i| i as f64).collect();
        assert_eq!(got, want);
    }
}
