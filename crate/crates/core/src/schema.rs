//! Feature schema for rate cards: five feature groups, each a list of named
//! categorical or numerical features.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataError;

/// The five feature groups of a rate card. Dimension, route and service are
/// fixed-length; item and charge describe one entry of a variable-length list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    Dimension,
    Route,
    Service,
    Item,
    Charge,
}

impl GroupKind {
    pub const ALL: [GroupKind; 5] = [
        GroupKind::Dimension,
        GroupKind::Route,
        GroupKind::Service,
        GroupKind::Item,
        GroupKind::Charge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GroupKind::Dimension => "dimension",
            GroupKind::Route => "route",
            GroupKind::Service => "service",
            GroupKind::Item => "item",
            GroupKind::Charge => "charge",
        }
    }
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Categorical,
    Numerical,
}

/// One named feature. `cardinality` counts the known categories of a
/// categorical feature and excludes the reserved unknown slot (index 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cardinality: Option<usize>,
}

impl FeatureSpec {
    pub fn categorical(name: &str, cardinality: usize) -> Self {
        FeatureSpec {
            name: name.to_string(),
            kind: FeatureKind::Categorical,
            cardinality: Some(cardinality),
        }
    }

    pub fn numerical(name: &str) -> Self {
        FeatureSpec {
            name: name.to_string(),
            kind: FeatureKind::Numerical,
            cardinality: None,
        }
    }

    pub fn is_categorical(&self) -> bool {
        self.kind == FeatureKind::Categorical
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub dimension: Vec<FeatureSpec>,
    pub route: Vec<FeatureSpec>,
    pub service: Vec<FeatureSpec>,
    pub item: Vec<FeatureSpec>,
    pub charge: Vec<FeatureSpec>,
}

impl FeatureSchema {
    pub fn group(&self, kind: GroupKind) -> &[FeatureSpec] {
        match kind {
            GroupKind::Dimension => &self.dimension,
            GroupKind::Route => &self.route,
            GroupKind::Service => &self.service,
            GroupKind::Item => &self.item,
            GroupKind::Charge => &self.charge,
        }
    }

    /// Number of tokens contributed by one fixed-length group (or one
    /// variable-length list entry before reduction).
    pub fn group_len(&self, kind: GroupKind) -> usize {
        self.group(kind).len()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for kind in GroupKind::ALL {
            let specs = self.group(kind);
            if specs.is_empty() {
                return Err(DataError::InvalidSchema(format!(
                    "group '{kind}' must declare at least one feature"
                )));
            }
            let mut seen = std::collections::BTreeSet::new();
            for spec in specs {
                if !seen.insert(spec.name.as_str()) {
                    return Err(DataError::InvalidSchema(format!(
                        "duplicate feature name '{}.{}'",
                        kind, spec.name
                    )));
                }
                match (spec.kind, spec.cardinality) {
                    (FeatureKind::Categorical, Some(c)) if c >= 1 => {}
                    (FeatureKind::Categorical, _) => {
                        return Err(DataError::InvalidSchema(format!(
                            "categorical feature '{}.{}' needs cardinality >= 1",
                            kind, spec.name
                        )));
                    }
                    (FeatureKind::Numerical, None) => {}
                    (FeatureKind::Numerical, Some(_)) => {
                        return Err(DataError::InvalidSchema(format!(
                            "numerical feature '{}.{}' must not declare a cardinality",
                            kind, spec.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, DataError> {
        let schema: FeatureSchema =
            serde_json::from_str(s).map_err(|e| DataError::InvalidSchema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_json()).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_schema() -> FeatureSchema {
        FeatureSchema {
            dimension: vec![
                FeatureSpec::numerical("weight"),
                FeatureSpec::categorical("size_class", 4),
            ],
            route: vec![FeatureSpec::categorical("origin", 3)],
            service: vec![FeatureSpec::categorical("carrier", 2)],
            item: vec![FeatureSpec::numerical("unit_weight")],
            charge: vec![FeatureSpec::categorical("charge_type", 2)],
        }
    }

    #[test]
    fn round_trips_through_json() {
        let s = small_schema();
        let parsed = FeatureSchema::from_json(&s.to_json()).unwrap();
        assert_eq!(s, parsed);
    }

    #[test]
    fn rejects_duplicate_names() {
        let mut s = small_schema();
        s.route.push(FeatureSpec::categorical("origin", 5));
        assert!(s.validate().is_err());
    }

    #[test]
    fn rejects_empty_group() {
        let mut s = small_schema();
        s.charge.clear();
        assert!(s.validate().is_err());
    }

    #[test]
    fn rejects_categorical_without_cardinality() {
        let mut s = small_schema();
        s.service[0].cardinality = None;
        assert!(s.validate().is_err());
    }
}
