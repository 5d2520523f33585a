//! Contribution impact scores, per-tag contribution profiles, and the
//! project areas exposed when a contributor leaves.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{RetainError, Result};
use crate::model::{EventKind, Project};

pub const DEFAULT_MODERATE_SHARE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactScore {
    pub contributor_id: String,
    pub raw_count: f64,
    pub score: f64,
}

/// Kind weights; kinds not listed weigh 1.
pub type KindWeights = BTreeMap<EventKind, f64>;

pub fn weight_of(weights: Option<&KindWeights>, kind: EventKind) -> f64 {
    weights.and_then(|w| w.get(&kind).copied()).unwrap_or(1.0)
}

/// Weighted contribution count per contributor divided by the largest one.
/// `counts` maps contributor id to per-kind event counts. The result is
/// ordered by descending score, ties by contributor id.
pub fn impact_score(
    counts: &BTreeMap<String, BTreeMap<EventKind, u64>>,
    weights: Option<&KindWeights>,
) -> Result<Vec<ImpactScore>> {
    if let Some(w) = weights {
        if w.values().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(RetainError::InvalidArgument("kind weights must be finite and non-negative".into()));
        }
        if EventKind::ALL.iter().all(|k| weight_of(Some(w), *k) == 0.0) {
            return Err(RetainError::ZeroWeights);
        }
    }
    let raw: Vec<(String, f64)> = counts
        .iter()
        .filter(|(_, per_kind)| per_kind.values().any(|&n| n > 0))
        .map(|(id, per_kind)| {
            let total = per_kind.iter().map(|(k, &n)| weight_of(weights, *k) * n as f64).sum();
            (id.clone(), total)
        })
        .collect();
    if raw.is_empty() {
        return Err(RetainError::InsufficientRecords("no contributor has any events".into()));
    }
    let baseline = raw.iter().map(|r| r.1).fold(0.0, f64::max);
    if baseline <= 0.0 {
        return Err(RetainError::ZeroWeights);
    }
    let mut out: Vec<ImpactScore> = raw
        .into_iter()
        .map(|(contributor_id, raw_count)| ImpactScore {
            contributor_id,
            raw_count,
            score: raw_count / baseline,
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.contributor_id.cmp(&b.contributor_id))
    });
    Ok(out)
}

/// Per-kind event counts for every contributor of a project.
pub fn kind_counts(project: &Project) -> BTreeMap<String, BTreeMap<EventKind, u64>> {
    project
        .events_by_contributor()
        .into_iter()
        .map(|(id, events)| {
            let mut per_kind = BTreeMap::new();
            for e in events {
                *per_kind.entry(e.kind).or_default() += 1;
            }
            (id.to_string(), per_kind)
        })
        .collect()
}

pub fn project_impact(project: &Project, weights: Option<&KindWeights>) -> Result<Vec<ImpactScore>> {
    impact_score(&kind_counts(project), weights)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagProfile {
    pub tag: String,
    pub total_tagged_contributions: u64,
    pub per_contributor: BTreeMap<String, u64>,
    pub top_contributor: String,
}

/// One profile per tag, in tag order. An event with several tags counts
/// once toward each.
pub fn tag_distribution(project: &Project) -> Vec<TagProfile> {
    let mut by_tag: BTreeMap<&str, BTreeMap<String, u64>> = BTreeMap::new();
    for e in project.events() {
        let Some(id) = project.contributor_id_for_key(&e.contributor_key) else {
            continue;
        };
        let distinct: BTreeSet<&str> = e.tags.iter().map(String::as_str).collect();
        for tag in distinct {
            *by_tag.entry(tag).or_default().entry(id.to_string()).or_default() += 1;
        }
    }
    by_tag
        .into_iter()
        .map(|(tag, per_contributor)| {
            let top_contributor = per_contributor
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
                .map(|(id, _)| id.clone())
                .unwrap_or_default();
            TagProfile {
                tag: tag.to_string(),
                total_tagged_contributions: per_contributor.values().sum(),
                per_contributor,
                top_contributor,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedContributor {
    pub rank: u32,
    pub contributor_id: String,
    pub count: u64,
}

pub fn top_contributors_for_tag(profile: &TagProfile, k: usize) -> Result<Vec<RankedContributor>> {
    if k == 0 {
        return Err(RetainError::InvalidArgument("k must be at least 1".into()));
    }
    let mut v: Vec<(&String, &u64)> = profile.per_contributor.iter().collect();
    v.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
    Ok(v.into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (id, &count))| RankedContributor {
            rank: i as u32 + 1,
            contributor_id: id.clone(),
            count,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Low,
    Moderate,
    Critical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffectedTag {
    pub tag: String,
    pub share: f64,
    pub is_top: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttritionImpact {
    pub contributor_id: String,
    pub affected_tags: Vec<AffectedTag>,
    pub severity: Severity,
    /// Whether the contributor is in the at-risk set that was passed in.
    pub at_risk: bool,
}

/// What the project loses in each tag if `contributor_id` leaves.
/// Critical when they lead any tag, moderate when they hold at least
/// `moderate_share` of one, otherwise low.
pub fn attrition_impact(
    contributor_id: &str,
    profiles: &[TagProfile],
    at_risk: &BTreeSet<String>,
    moderate_share: f64,
) -> AttritionImpact {
    let affected_tags: Vec<AffectedTag> = profiles
        .iter()
        .filter_map(|p| {
            let n = *p.per_contributor.get(contributor_id)?;
            Some(AffectedTag {
                tag: p.tag.clone(),
                share: n as f64 / p.total_tagged_contributions as f64,
                is_top: p.top_contributor == contributor_id,
            })
        })
        .collect();
    let severity = if affected_tags.iter().any(|t| t.is_top) {
        Severity::Critical
    } else if affected_tags.iter().any(|t| t.share >= moderate_share) {
        Severity::Moderate
    } else {
        Severity::Low
    };
    AttritionImpact {
        contributor_id: contributor_id.to_string(),
        affected_tags,
        severity,
        at_risk: at_risk.contains(contributor_id),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ContributionEvent;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn counts(rows: &[(&str, EventKind, u64)]) -> BTreeMap<String, BTreeMap<EventKind, u64>> {
        let mut m: BTreeMap<String, BTreeMap<EventKind, u64>> = BTreeMap::new();
        for (id, k, n) in rows {
            *m.entry(id.to_string()).or_default().entry(*k).or_default() += n;
        }
        m
    }

    #[test]
    fn fifty_and_forty() {
        let s = impact_score(&counts(&[("a", EventKind::Commit, 50), ("b", EventKind::Commit, 40)]), None).unwrap();
        assert_eq!(s[0].score, 1.0);
        assert_eq!(s[1].score, 0.8);
    }

    #[test]
    fn single_contributor_and_errors() {
        let s = impact_score(&counts(&[("a", EventKind::PrReview, 3)]), None).unwrap();
        assert_eq!(s[0].score, 1.0);
        let zero: KindWeights = EventKind::ALL.iter().map(|k| (*k, 0.0)).collect();
        assert!(matches!(
            impact_score(&counts(&[("a", EventKind::Commit, 1)]), Some(&zero)),
            Err(RetainError::ZeroWeights)
        ));
        assert!(impact_score(&BTreeMap::new(), None).is_err());
    }

    #[test]
    fn weighted_counts_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut rows = vec![];
        let ids = ["a", "b", "c", "d"];
        for _ in 0..200 {
            rows.push((ids[rng.random_range(0..4)], EventKind::ALL[rng.random_range(0..5)], 1));
        }
        let weights: KindWeights = [(EventKind::Commit, 2.0)].into();
        let s = impact_score(&counts(&rows), Some(&weights)).unwrap();
        let raw = |id: &str| -> f64 {
            rows.iter()
                .filter(|r| r.0 == id)
                .map(|r| if r.1 == EventKind::Commit { 2.0 } else { 1.0 })
                .sum()
        };
        let max = ids.iter().map(|i| raw(i)).fold(0.0, f64::max);
        for x in &s {
            assert_eq!(x.score, raw(&x.contributor_id) / max);
        }
    }

    fn project(rows: &[(&str, &[&str])]) -> Project {
        let events = rows
            .iter()
            .enumerate()
            .map(|(i, (key, tags))| ContributionEvent {
                event_id: format!("e{i}"),
                contributor_key: key.to_string(),
                email: None,
                display_name: None,
                timestamp: 1_000 + i as i64,
                kind: EventKind::PrOpened,
                repo: "r".into(),
                tags: tags.iter().map(|t| t.to_string()).collect(),
            })
            .collect();
        Project::new("p", events, &[]).unwrap()
    }

    #[test]
    fn tag_profiles_basic() {
        assert!(tag_distribution(&project(&[("a", &[])])).is_empty());
        let p = project(&[("a", &["api"])]);
        let t = tag_distribution(&p);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].total_tagged_contributions, 1);
    }

    #[test]
    fn tag_totals_match_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tags = ["api", "docs", "ci"];
        let keys = ["a", "b", "c", "d", "e"];
        let rows: Vec<(&str, Vec<&str>)> = (0..150)
            .map(|_| {
                let chosen: Vec<&str> = tags.iter().copied().filter(|_| rng.random_bool(0.4)).collect();
                (keys[rng.random_range(0..5)], chosen)
            })
            .collect();
        let refs: Vec<(&str, &[&str])> = rows.iter().map(|(k, t)| (*k, t.as_slice())).collect();
        let p = project(&refs);
        for prof in tag_distribution(&p) {
            let recount = rows.iter().filter(|r| r.1.contains(&prof.tag.as_str())).count() as u64;
            assert_eq!(prof.total_tagged_contributions, recount);
            assert_eq!(prof.per_contributor.values().sum::<u64>(), recount);
            let shares: f64 = prof.per_contributor.values().map(|&n| n as f64 / recount as f64).sum();
            assert!((shares - 1.0).abs() < 1e-9);
            let max = prof.per_contributor.values().max().unwrap();
            assert_eq!(prof.per_contributor[&prof.top_contributor], *max);
        }
    }

    fn profile(rows: &[(&str, u64)]) -> TagProfile {
        let per_contributor: BTreeMap<String, u64> = rows.iter().map(|(k, n)| (k.to_string(), *n)).collect();
        let top = top_contributors_for_tag(
            &TagProfile {
                tag: "t".into(),
                total_tagged_contributions: 0,
                per_contributor: per_contributor.clone(),
                top_contributor: String::new(),
            },
            1,
        )
        .unwrap()[0]
            .contributor_id
            .clone();
        TagProfile {
            tag: "t".into(),
            total_tagged_contributions: per_contributor.values().sum(),
            per_contributor,
            top_contributor: top,
        }
    }

    #[test]
    fn top_k_ordering() {
        let p = profile(&[("solo", 4)]);
        assert_eq!(top_contributors_for_tag(&p, 3).unwrap()[0].contributor_id, "solo");
        let p = profile(&[("zed", 5), ("amy", 5), ("bob", 2)]);
        let top = top_contributors_for_tag(&p, 10).unwrap();
        assert_eq!(
            top.iter().map(|r| r.contributor_id.as_str()).collect::<Vec<_>>(),
            vec!["amy", "zed", "bob"]
        );
        assert_eq!(top_contributors_for_tag(&p, 2).unwrap().len(), 2);
        assert!(top_contributors_for_tag(&p, 0).is_err());
    }

    #[test]
    fn severities() {
        let none = BTreeSet::new();
        let p = vec![profile(&[("lead", 7), ("mid", 3)])];
        assert_eq!(attrition_impact("lead", &p, &none, 0.25).severity, Severity::Critical);
        let mid = attrition_impact("mid", &p, &none, 0.25);
        assert_eq!(mid.severity, Severity::Moderate);
        assert!((mid.affected_tags[0].share - 0.3).abs() < 1e-12);
        let nobody = attrition_impact("ghost", &p, &none, 0.25);
        assert_eq!(nobody.severity, Severity::Low);
        assert!(nobody.affected_tags.is_empty());
        let p = vec![profile(&[("lead", 9), ("small", 1)])];
        assert_eq!(attrition_impact("small", &p, &none, 0.25).severity, Severity::Low);
    }

    proptest! {
        #[test]
        fn scores_are_scale_free(raw in prop::collection::vec(1u64..100, 1..10), factor in 2u64..5) {
            let rows: Vec<(String, u64)> = raw.iter().enumerate().map(|(i, &n)| (format!("c{i}"), n)).collect();
            let make = |f: u64| -> BTreeMap<String, BTreeMap<EventKind, u64>> {
                rows.iter().map(|(id, n)| (id.clone(), BTreeMap::from([(EventKind::Commit, n * f)]))).collect()
            };
            let a = impact_score(&make(1), None).unwrap();
            let b = impact_score(&make(factor), None).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(&x.contributor_id, &y.contributor_id);
                prop_assert!((x.score - y.score).abs() < 1e-12);
            }
            prop_assert_eq!(a[0].score, 1.0);
        }

        #[test]
        fn severity_is_monotone(base in prop::collection::vec(1u64..20, 2..6), extra in 1u64..30) {
            let rows: Vec<(String, u64)> = base.iter().enumerate().map(|(i, &n)| (format!("c{i}"), n)).collect();
            let refs: Vec<(&str, u64)> = rows.iter().map(|(k, n)| (k.as_str(), *n)).collect();
            let before = attrition_impact("c0", &[profile(&refs)], &BTreeSet::new(), 0.25).severity;
            let mut grown = refs.clone();
            grown[0].1 += extra;
            let after = attrition_impact("c0", &[profile(&grown)], &BTreeSet::new(), 0.25).severity;
            prop_assert!(after >= before);
        }
    }
}
