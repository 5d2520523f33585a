//! Two-step name-based demographic inference behind a plugin boundary.
//!
//! Step one guesses a region of origin from the full name (optionally with a
//! location hint); step two guesses gender from the name and that region.
//! A result survives only when both steps clear the confidence threshold.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub value: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, Error)]
#[error("inference plugin failure: {0}")]
pub struct InferenceError(pub String);

/// A name-inference backend. Implementations are shared across ingestion
/// workers.
pub trait DemographicInference: Send + Sync {
    fn infer_region(
        &self,
        full_name: &str,
        location_hint: Option<&str>,
    ) -> Result<Option<Scored>, InferenceError>;

    fn infer_gender(&self, full_name: &str, region: &str) -> Result<Option<Scored>, InferenceError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub gender: String,
    pub region: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InferenceOutcome {
    pub result: Option<InferenceResult>,
    /// Set when the plugin failed; the caller may retry later.
    pub retryable_error: Option<String>,
}

pub fn infer_demographics(
    full_name: &str,
    location_hint: Option<&str>,
    plugin: &dyn DemographicInference,
    threshold: f64,
) -> InferenceOutcome {
    let failed = |e: InferenceError| InferenceOutcome {
        result: None,
        retryable_error: Some(e.to_string()),
    };
    let region = match plugin.infer_region(full_name, location_hint) {
        Ok(Some(r)) => r,
        Ok(None) => return InferenceOutcome::default(),
        Err(e) => return failed(e),
    };
    let gender = match plugin.infer_gender(full_name, &region.value) {
        Ok(Some(g)) => g,
        Ok(None) => return InferenceOutcome::default(),
        Err(e) => return failed(e),
    };
    let confidence = region.confidence.min(gender.confidence);
    // NaN confidence never passes
    if confidence.is_nan() || confidence < threshold {
        return InferenceOutcome::default();
    }
    InferenceOutcome {
        result: Some(InferenceResult {
            gender: gender.value,
            region: region.value,
            confidence,
        }),
        retryable_error: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub name: String,
    pub region: String,
    pub region_confidence: f64,
    pub gender: String,
    pub gender_confidence: f64,
}

/// Deterministic lookup-table backend. Names match case-insensitively with
/// whitespace collapsed; the location hint is ignored.
#[derive(Debug, Clone, Default)]
pub struct TableInference {
    entries: BTreeMap<String, TableEntry>,
}

fn normalize_name(name: &str) -> String {
    name.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

impl TableInference {
    pub fn new(entries: impl IntoIterator<Item = TableEntry>) -> Self {
        TableInference {
            entries: entries
                .into_iter()
                .map(|e| (normalize_name(&e.name), e))
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        Ok(Self::new(serde_json::from_str::<Vec<TableEntry>>(text)?))
    }

    pub fn lookup(&self, full_name: &str) -> Option<&TableEntry> {
        self.entries.get(&normalize_name(full_name))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl DemographicInference for TableInference {
    fn infer_region(&self, full_name: &str, _hint: Option<&str>) -> Result<Option<Scored>, InferenceError> {
        Ok(self.lookup(full_name).map(|e| Scored {
            value: e.region.clone(),
            confidence: e.region_confidence,
        }))
    }

    fn infer_gender(&self, full_name: &str, region: &str) -> Result<Option<Scored>, InferenceError> {
        Ok(self
            .lookup(full_name)
            .filter(|e| e.region == region)
            .map(|e| Scored {
                value: e.gender.clone(),
                confidence: e.gender_confidence,
            }))
    }
}
