//! Getting events into the system: JSONL files, a GitHub-compatible API, and
//! seeded synthetic communities, plus affiliation and demographic enrichment.

mod affiliation;
mod demographics;
mod jsonl;
mod remote;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use affiliation::{default_public_domains, infer_affiliation, AffiliationGuess, DEFAULT_PUBLIC_DOMAINS};
pub use demographics::{
    infer_demographics, DemographicInference, InferenceError, InferenceOutcome, InferenceResult,
    Scored, TableEntry, TableInference, DEFAULT_CONFIDENCE_THRESHOLD,
};
pub use jsonl::{events_to_jsonl, load_events_jsonl, parse_events_jsonl, write_events_jsonl};
pub use remote::{fetch_remote_events, next_link, Endpoint, FetchReport, RemoteConfig};
pub use synthetic::{
    generate_synthetic_community, SyntheticCommunity, SyntheticSpec, SyntheticTruth, DEFAULT_START,
};

use crate::error::{RetainError, Result};
use crate::model::{ContributionEvent, DemographicSource, Demographics, Project, UNKNOWN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    JsonlFile,
    RemoteApi,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSource {
    pub kind: SourceKind,
    pub location: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_token_env: Option<String>,
}

impl IngestSource {
    pub fn validate(&self) -> Result<()> {
        if self.location.trim().is_empty() {
            return Err(RetainError::Config {
                key: "location".into(),
                message: "must not be empty".into(),
            });
        }
        if self.auth_token_env.is_some() && self.kind != SourceKind::RemoteApi {
            return Err(RetainError::Config {
                key: "auth_token_env".into(),
                message: "only meaningful for remote_api sources".into(),
            });
        }
        Ok(())
    }

    /// Remote fetch configuration, reading the token from the named
    /// environment variable when one is configured.
    pub fn remote_config(&self) -> Result<RemoteConfig> {
        self.validate()?;
        let mut config = RemoteConfig::new(&self.location);
        if let Some(var) = &self.auth_token_env {
            config.token = std::env::var(var).ok().filter(|t| !t.is_empty());
        }
        Ok(config)
    }
}

/// Split out events authored by `[bot]` accounts. Returns the kept events
/// and the number dropped.
pub fn filter_bots(events: Vec<ContributionEvent>) -> (Vec<ContributionEvent>, usize) {
    let before = events.len();
    let kept: Vec<_> = events.into_iter().filter(|e| !e.is_bot()).collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

/// Union of two event sets keyed by event id; existing events win.
/// Re-ingesting the same source is therefore a no-op.
pub fn merge_events(existing: Vec<ContributionEvent>, incoming: Vec<ContributionEvent>) -> Vec<ContributionEvent> {
    let mut merged: BTreeMap<String, ContributionEvent> = BTreeMap::new();
    for e in existing.into_iter().chain(incoming) {
        merged.entry(e.event_id.clone()).or_insert(e);
    }
    let mut out: Vec<_> = merged.into_values().collect();
    out.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.event_id.cmp(&b.event_id)));
    out
}

/// Run the demographic plugin over every contributor's display name.
/// Returns stored-form records (only those that cleared the threshold) and
/// the retryable plugin errors encountered.
pub fn infer_project_demographics(
    project: &Project,
    plugin: &dyn DemographicInference,
    threshold: f64,
) -> (BTreeMap<String, Demographics>, Vec<String>) {
    let mut found = BTreeMap::new();
    let mut errors = Vec::new();
    for c in project.contributors() {
        let outcome = infer_demographics(&c.display_name, None, plugin, threshold);
        if let Some(err) = outcome.retryable_error {
            errors.push(format!("{}: {err}", c.contributor_id));
        }
        if let Some(r) = outcome.result {
            found.insert(
                c.contributor_id.clone(),
                Demographics {
                    gender: Some(r.gender),
                    region: Some(r.region),
                    confidence: r.confidence,
                    source: DemographicSource::Inferred,
                },
            );
        }
    }
    (found, errors)
}

/// Fill in affiliations from contributor emails and attach stored
/// demographic records. Inferred records below `threshold` are dropped.
/// Returns warnings for emails that could not be parsed.
pub fn enrich_project(
    project: &mut Project,
    public_domains: &BTreeSet<String>,
    demographics: &BTreeMap<String, Demographics>,
    threshold: f64,
) -> Vec<String> {
    let mut warnings = Vec::new();
    for c in project.contributors_mut() {
        let mut affiliation = UNKNOWN.to_string();
        for email in &c.emails {
            let guess = infer_affiliation(email, public_domains);
            if let Some(w) = guess.warning {
                warnings.push(w);
            }
            if guess.affiliation != UNKNOWN {
                affiliation = guess.affiliation;
                break;
            }
        }
        c.affiliation = affiliation;
        c.demographics = demographics
            .get(&c.contributor_id)
            .filter(|d| d.source != DemographicSource::Inferred || d.confidence >= threshold)
            .cloned();
    }
    warnings
}
