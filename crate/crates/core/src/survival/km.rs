use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{RetainError, Result};
use crate::model::UNKNOWN;

use super::SurvivalRecord;

pub const ALL_GROUP: &str = "all";

/// Product-limit curve listed at its event times. Survival is 1 before the
/// first listed time and steps down at each one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMCurve {
    pub group_label: String,
    pub times: Vec<i64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<u64>,
    pub events: Vec<u64>,
    pub n: u64,
}

impl KMCurve {
    pub fn survival_at(&self, t: i64) -> f64 {
        match self.times.partition_point(|&x| x <= t) {
            0 => 1.0,
            i => self.survival[i - 1],
        }
    }
}

/// Distinct event times with (at risk, events) counts.
pub(crate) fn event_table(records: &[&SurvivalRecord]) -> Vec<(i64, u64, u64)> {
    let mut by_time: BTreeMap<i64, (u64, u64)> = BTreeMap::new();
    for r in records {
        let e = by_time.entry(r.duration_days).or_default();
        e.0 += 1;
        e.1 += u64::from(r.event);
    }
    let mut remaining = records.len() as u64;
    let mut out = Vec::new();
    for (t, (total, events)) in by_time {
        if events > 0 {
            out.push((t, remaining, events));
        }
        remaining -= total;
    }
    out
}

fn curve(label: String, records: &[&SurvivalRecord]) -> KMCurve {
    let mut s = 1.0;
    let mut c = KMCurve {
        group_label: label,
        times: vec![],
        survival: vec![],
        at_risk: vec![],
        events: vec![],
        n: records.len() as u64,
    };
    for (t, n, d) in event_table(records) {
        s *= 1.0 - d as f64 / n as f64;
        c.times.push(t);
        c.survival.push(s);
        c.at_risk.push(n);
        c.events.push(d);
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmEstimate {
    pub curves: Vec<KMCurve>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

fn label_of(r: &SurvivalRecord) -> &str {
    r.group_label.as_deref().unwrap_or(UNKNOWN)
}

/// One curve overall, or one per group label when `grouped`. Groups listed
/// in `expected` that have no records are reported as warnings.
pub fn km_estimate(records: &[SurvivalRecord], grouped: bool, expected: &[String]) -> KmEstimate {
    let mut warnings = Vec::new();
    let mut groups: BTreeMap<String, Vec<&SurvivalRecord>> = BTreeMap::new();
    for r in records {
        let key = if grouped { label_of(r).to_string() } else { ALL_GROUP.to_string() };
        groups.entry(key).or_default().push(r);
    }
    for g in expected {
        if !groups.contains_key(g) {
            warnings.push(format!("group `{g}` has no records; omitted"));
        }
    }
    if records.is_empty() && expected.is_empty() {
        warnings.push("no records".to_string());
    }
    KmEstimate {
        curves: groups.into_iter().map(|(g, rs)| curve(g, &rs)).collect(),
        warnings,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRankResult {
    pub groups: [String; 2],
    pub chi_square: f64,
    pub p_value: f64,
}

/// Upper tail of the chi-square distribution with one degree of freedom.
pub fn chi_square_1df_sf(x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        erfc((x / 2.0).sqrt())
    }
}

/// Two-sample log-rank test on the records' group labels.
pub fn logrank_test(records: &[SurvivalRecord]) -> Result<LogRankResult> {
    let mut labels: Vec<&str> = records.iter().map(label_of).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() != 2 {
        return Err(RetainError::GroupCount(labels.len()));
    }
    let first = labels[0];
    let all: Vec<&SurvivalRecord> = records.iter().collect();
    let a: Vec<&SurvivalRecord> = records.iter().filter(|r| label_of(r) == first).collect();

    let (mut observed, mut expected, mut variance) = (0.0, 0.0, 0.0);
    for (t, n, d) in event_table(&all) {
        let n_a = a.iter().filter(|r| r.duration_days >= t).count() as f64;
        let d_a = a.iter().filter(|r| r.duration_days == t && r.is_event()).count() as f64;
        let (n, d) = (n as f64, d as f64);
        observed += d_a;
        expected += d * n_a / n;
        if n > 1.0 {
            variance += d * (n_a / n) * (1.0 - n_a / n) * (n - d) / (n - 1.0);
        }
    }
    let chi_square = if variance > 0.0 {
        (observed - expected).powi(2) / variance
    } else {
        0.0
    };
    Ok(LogRankResult {
        groups: [labels[0].to_string(), labels[1].to_string()],
        chi_square,
        p_value: chi_square_1df_sf(chi_square),
    })
}
