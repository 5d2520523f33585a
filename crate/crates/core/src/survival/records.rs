use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{RetainError, Result};
use crate::metrics::Lens;
use crate::model::{
    classify_status, tenure_days, whole_days, ContributionEvent, EventKind, LifecyclePolicy, Project, Status,
    SECONDS_PER_DAY,
};

pub const DEFAULT_FEATURE_WINDOW_DAYS: u32 = 90;

/// Feature names in the order [`extract_features`] produces them.
pub fn feature_names() -> Vec<String> {
    EventKind::ALL
        .iter()
        .map(|k| format!("{k}_count"))
        .chain(["total_events", "active_weeks", "mean_gap_days"].map(String::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub contributor_id: String,
    pub duration_days: i64,
    /// 1 when the contributor departed, 0 when censored.
    pub event: u8,
    pub covariates: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_label: Option<String>,
}

impl SurvivalRecord {
    pub fn is_event(&self) -> bool {
        self.event == 1
    }
}

/// Records together with the names of their covariate columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalData {
    pub feature_names: Vec<String>,
    pub records: Vec<SurvivalRecord>,
}

impl SurvivalData {
    pub fn new(feature_names: Vec<String>, records: Vec<SurvivalRecord>) -> Result<Self> {
        let data = SurvivalData { feature_names, records };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.feature_names.len();
        let distinct: BTreeSet<_> = self.feature_names.iter().collect();
        if distinct.len() != p {
            return Err(RetainError::InvalidArgument("duplicate feature name".into()));
        }
        for r in &self.records {
            if r.duration_days < 1 {
                return Err(RetainError::InvalidArgument(format!(
                    "{}: duration must be at least 1 day",
                    r.contributor_id
                )));
            }
            if r.event > 1 {
                return Err(RetainError::InvalidArgument(format!("{}: event must be 0 or 1", r.contributor_id)));
            }
            if r.covariates.len() != p {
                return Err(RetainError::InvalidArgument(format!(
                    "{}: {} covariates for {p} features",
                    r.contributor_id,
                    r.covariates.len()
                )));
            }
            if r.covariates.iter().any(|x| !x.is_finite()) {
                return Err(RetainError::InvalidArgument(format!("{}: non-finite covariate", r.contributor_id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Keep only the named columns, in the given order.
    pub fn select(&self, names: &[String]) -> Result<SurvivalData> {
        let idx = names
            .iter()
            .map(|n| {
                self.feature_names
                    .iter()
                    .position(|f| f == n)
                    .ok_or_else(|| RetainError::UnknownFeature(n.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SurvivalData {
            feature_names: names.to_vec(),
            records: self
                .records
                .iter()
                .map(|r| SurvivalRecord {
                    covariates: idx.iter().map(|&i| r.covariates[i]).collect(),
                    ..r.clone()
                })
                .collect(),
        })
    }

    pub fn subset(&self, indices: &[usize]) -> SurvivalData {
        SurvivalData {
            feature_names: self.feature_names.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }
}

/// Activity features from the first `window_days` after a contributor's
/// first event. `events` must be sorted by timestamp.
pub fn extract_features(events: &[&ContributionEvent], window_days: u32) -> Vec<f64> {
    let mut counts = [0.0; 5];
    let Some(first) = events.first().map(|e| e.timestamp) else {
        let mut v = counts.to_vec();
        v.extend([0.0, 0.0, 0.0]);
        return v;
    };
    let end = first + i64::from(window_days) * SECONDS_PER_DAY;
    let inside: Vec<&ContributionEvent> = events.iter().copied().filter(|e| e.timestamp < end).collect();
    let mut weeks = BTreeSet::new();
    for e in &inside {
        counts[e.kind.index()] += 1.0;
        weeks.insert((e.timestamp - first).div_euclid(7 * SECONDS_PER_DAY));
    }
    let n = inside.len();
    let mean_gap = if n < 2 {
        0.0
    } else {
        (inside[n - 1].timestamp - inside[0].timestamp) as f64 / SECONDS_PER_DAY as f64 / (n - 1) as f64
    };
    let mut v = counts.to_vec();
    v.extend([n as f64, weeks.len() as f64, mean_gap]);
    v
}

/// One record per contributor. Departed contributors carry their tenure
/// and an event; everyone else is censored at `policy.as_of`.
pub fn build_survival_records(
    project: &Project,
    policy: &LifecyclePolicy,
    feature_window_days: u32,
    group_by: Option<Lens>,
) -> Result<SurvivalData> {
    if feature_window_days == 0 {
        return Err(RetainError::InvalidArgument("feature_window_days must be at least 1".into()));
    }
    let mut records = Vec::with_capacity(project.contributors().len());
    for c in project.contributors() {
        let departed = classify_status(c, policy)? == Status::Departed;
        let duration = if departed {
            tenure_days(c.first_event, c.last_event)
        } else {
            whole_days(c.first_event, policy.as_of).max(1)
        };
        records.push(SurvivalRecord {
            contributor_id: c.contributor_id.clone(),
            duration_days: duration,
            event: u8::from(departed),
            covariates: extract_features(&project.events_of(&c.contributor_id), feature_window_days),
            group_label: group_by.map(|lens| lens.group_of(c)),
        });
    }
    Ok(SurvivalData {
        feature_names: feature_names(),
        records,
    })
}
