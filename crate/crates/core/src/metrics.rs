//! Retention overview: counts, turnover, tenure, activity series,
//! demographic distributions, and newcomer / inactive rosters.
//!
//! Windows are half-open `[start, end)`: an event counts as inside the window
//! when `start <= ts < end`, and "before end" means `ts < end`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{RetainError, Result};
use crate::model::{
    classify_span, classify_status, tenure_days, whole_days, Contributor, ContributionEvent,
    LifecyclePolicy, Project, Status, SECONDS_PER_DAY, UNKNOWN,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverviewMetrics {
    pub window_start: i64,
    pub window_end: i64,
    pub active_count: u64,
    pub newcomer_count: u64,
    pub departed_count: u64,
    pub total_count: u64,
    pub turnover_rate: f64,
    /// Absent when no contributor was seen before the window end.
    pub avg_tenure_days: Option<f64>,
}

impl OverviewMetrics {
    pub fn empty(window_start: i64, window_end: i64) -> Self {
        OverviewMetrics {
            window_start,
            window_end,
            active_count: 0,
            newcomer_count: 0,
            departed_count: 0,
            total_count: 0,
            turnover_rate: 0.0,
            avg_tenure_days: None,
        }
    }
}

fn check_window(start: i64, end: i64, policy: &LifecyclePolicy) -> Result<()> {
    if start >= end {
        return Err(RetainError::InvalidWindow { start, end });
    }
    if end > policy.as_of {
        return Err(RetainError::InvalidArgument(format!(
            "window end {end} is after as-of {}",
            policy.as_of
        )));
    }
    Ok(())
}

pub fn overview_metrics(
    project: &Project,
    policy: &LifecyclePolicy,
    start: i64,
    end: i64,
) -> Result<OverviewMetrics> {
    if project.contributors().is_empty() {
        return Ok(OverviewMetrics::empty(start, end));
    }
    check_window(start, end, policy)?;
    let at_end = LifecyclePolicy { as_of: end, ..*policy };
    let mut m = OverviewMetrics::empty(start, end);
    let mut tenure_sum = 0i64;
    for (_, events) in project.events_by_contributor() {
        let before: Vec<i64> = events.iter().map(|e| e.timestamp).filter(|&t| t < end).collect();
        let (Some(&first), Some(&last)) = (before.first(), before.last()) else {
            continue;
        };
        m.total_count += 1;
        if first >= start {
            m.newcomer_count += 1;
        }
        // a window longer than the departure threshold can contain the last
        // event of someone already departed at its end; they count once
        if classify_span(first, last, &at_end)? == Status::Departed {
            m.departed_count += 1;
        } else if last >= start {
            m.active_count += 1;
        }
        tenure_sum += tenure_days(first, last);
    }
    m.turnover_rate = m.departed_count as f64 / m.total_count.max(1) as f64;
    m.avg_tenure_days = (m.total_count > 0).then(|| tenure_sum as f64 / m.total_count as f64);
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityPoint {
    pub bucket_start: i64,
    pub events: u64,
    pub active_contributors: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivitySeries {
    pub bucket_days: u32,
    pub points: Vec<ActivityPoint>,
}

/// Event and distinct-contributor counts per bucket across `[start, end)`.
/// The last bucket may extend past `end`; empty buckets are kept.
pub fn activity_timeseries(
    project: &Project,
    bucket_days: u32,
    start: i64,
    end: i64,
) -> Result<ActivitySeries> {
    if bucket_days == 0 {
        return Err(RetainError::InvalidArgument("bucket_days must be at least 1".into()));
    }
    if start >= end {
        return Err(RetainError::InvalidWindow { start, end });
    }
    let width = i64::from(bucket_days) * SECONDS_PER_DAY;
    let n = ((end - start) + width - 1) / width;
    let mut counts = vec![0u64; n as usize];
    let mut who: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); n as usize];
    for e in project.events().iter().filter(|e| e.timestamp >= start && e.timestamp < end) {
        let b = ((e.timestamp - start) / width) as usize;
        counts[b] += 1;
        if let Some(id) = project.contributor_id_for_key(&e.contributor_key) {
            who[b].insert(id);
        }
    }
    Ok(ActivitySeries {
        bucket_days,
        points: (0..n as usize)
            .map(|b| ActivityPoint {
                bucket_start: start + b as i64 * width,
                events: counts[b],
                active_contributors: who[b].len() as u64,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lens {
    Affiliation,
    Gender,
    Region,
    NewcomerStatus,
}

impl Lens {
    pub const ALL: [Lens; 4] = [Lens::Affiliation, Lens::Gender, Lens::Region, Lens::NewcomerStatus];

    pub fn as_str(self) -> &'static str {
        match self {
            Lens::Affiliation => "affiliation",
            Lens::Gender => "gender",
            Lens::Region => "region",
            Lens::NewcomerStatus => "newcomer_status",
        }
    }

    /// Lenses that expose personal attributes and need an authorized caller.
    pub fn is_demographic(self) -> bool {
        !matches!(self, Lens::NewcomerStatus)
    }

    /// Group a contributor falls into; missing attributes map to `"unknown"`.
    pub fn group_of(self, c: &Contributor) -> String {
        let demo = c.demographics.as_ref();
        let value = match self {
            Lens::Affiliation => Some(c.affiliation.clone()),
            Lens::Gender => demo.and_then(|d| d.gender.clone()),
            Lens::Region => demo.and_then(|d| d.region.clone()),
            Lens::NewcomerStatus => Some(
                if c.status == Status::Newcomer { "newcomer" } else { "established" }.to_string(),
            ),
        };
        value
            .filter(|v| !v.trim().is_empty())
            .unwrap_or_else(|| UNKNOWN.to_string())
    }
}

impl fmt::Display for Lens {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Lens {
    type Err = RetainError;

    fn from_str(s: &str) -> Result<Self> {
        Lens::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| RetainError::InvalidArgument(format!("unknown lens `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupShare {
    pub count: u64,
    pub share: f64,
}

pub fn demographic_distribution(contributors: &[Contributor], lens: Lens) -> BTreeMap<String, GroupShare> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for c in contributors {
        *counts.entry(lens.group_of(c)).or_default() += 1;
    }
    let total = contributors.len() as f64;
    counts
        .into_iter()
        .map(|(g, count)| {
            (
                g,
                GroupShare {
                    count,
                    share: count as f64 / total,
                },
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub contributor_id: String,
    pub display_name: String,
    pub first_event: i64,
    pub last_event: i64,
    pub gap_days: i64,
    pub tenure_days: i64,
}

fn roster(contributors: &[Contributor], policy: &LifecyclePolicy, status: Status) -> Result<Vec<RosterEntry>> {
    let mut out = Vec::new();
    for c in contributors {
        if classify_status(c, policy)? == status {
            out.push(RosterEntry {
                contributor_id: c.contributor_id.clone(),
                display_name: c.display_name.clone(),
                first_event: c.first_event,
                last_event: c.last_event,
                gap_days: whole_days(c.last_event, policy.as_of),
                tenure_days: tenure_days(c.first_event, c.last_event),
            });
        }
    }
    Ok(out)
}

/// Newcomers under `policy`, most recent first.
pub fn list_newcomers(contributors: &[Contributor], policy: &LifecyclePolicy) -> Result<Vec<RosterEntry>> {
    let mut r = roster(contributors, policy, Status::Newcomer)?;
    r.sort_by(|a, b| {
        b.first_event
            .cmp(&a.first_event)
            .then_with(|| a.contributor_id.cmp(&b.contributor_id))
    });
    Ok(r)
}

/// Inactive contributors under `policy`, longest silence first.
pub fn list_inactive(contributors: &[Contributor], policy: &LifecyclePolicy) -> Result<Vec<RosterEntry>> {
    let mut r = roster(contributors, policy, Status::Inactive)?;
    r.sort_by(|a, b| {
        b.gap_days
            .cmp(&a.gap_days)
            .then_with(|| a.contributor_id.cmp(&b.contributor_id))
    });
    Ok(r)
}

/// Roster for any status, ordered by contributor id.
pub fn list_status(contributors: &[Contributor], policy: &LifecyclePolicy, status: Status) -> Result<Vec<RosterEntry>> {
    roster(contributors, policy, status)
}

/// Events for one contributor, used by the profile drill-down.
pub fn activity_history<'p>(project: &'p Project, contributor_id: &str) -> Vec<&'p ContributionEvent> {
    project.events_of(contributor_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DemographicSource, Demographics, EventKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DAY: i64 = SECONDS_PER_DAY;

    fn ev(id: usize, key: &str, day: i64) -> ContributionEvent {
        ContributionEvent {
            event_id: format!("e{id}"),
            contributor_key: key.into(),
            email: None,
            display_name: None,
            timestamp: 1_000 * DAY + day * DAY,
            kind: EventKind::Commit,
            repo: "r".into(),
            tags: vec![],
        }
    }

    fn project(rows: &[(&str, i64)]) -> Project {
        let events = rows.iter().enumerate().map(|(i, (k, d))| ev(i, k, *d)).collect();
        Project::new("p", events, &[]).unwrap()
    }

    #[test]
    fn empty_project_is_all_zero() {
        let p = Project::new("p", vec![], &[]).unwrap();
        let m = overview_metrics(&p, &LifecyclePolicy::with_as_of(0), 0, 0).unwrap();
        assert_eq!(m, OverviewMetrics::empty(0, 0));
        assert!(m.avg_tenure_days.is_none());
    }

    #[test]
    fn single_contributor_minimum_case() {
        let p = project(&[("a", 10)]);
        let policy = LifecyclePolicy::with_as_of(1_000 * DAY + 20 * DAY);
        let m = overview_metrics(&p, &policy, 1_000 * DAY, 1_000 * DAY + 20 * DAY).unwrap();
        assert_eq!((m.total_count, m.active_count, m.newcomer_count), (1, 1, 1));
        assert_eq!(m.avg_tenure_days, Some(1.0));
        assert_eq!(m.turnover_rate, 0.0);
    }

    #[test]
    fn turnover_matches_per_contributor_reclassification() {
        // 10 contributors, two of them silent for over a year at window end
        let mut rows = vec![];
        for i in 0..10 {
            let key = format!("k{i}");
            let last = if i < 2 { 100 } else { 500 + i as i64 };
            rows.push((key.clone(), 0));
            rows.push((key, last));
        }
        let rows: Vec<(&str, i64)> = rows.iter().map(|(k, d)| (k.as_str(), *d)).collect();
        let p = project(&rows);
        let end = 1_000 * DAY + 600 * DAY;
        let policy = LifecyclePolicy::with_as_of(end);
        let m = overview_metrics(&p, &policy, end - 90 * DAY, end).unwrap();

        let departed = p
            .contributors()
            .iter()
            .filter(|c| classify_status(c, &policy).unwrap() == Status::Departed)
            .count();
        assert_eq!(departed, 2);
        assert_eq!(m.total_count, 10);
        assert_eq!(m.departed_count, 2);
        assert_eq!(m.turnover_rate, 0.2);
    }

    #[test]
    fn window_validation() {
        let p = project(&[("a", 10)]);
        let policy = p.default_policy();
        assert!(overview_metrics(&p, &policy, 5, 5).is_err());
        assert!(overview_metrics(&p, &policy, 0, policy.as_of + 1).is_err());
    }

    #[test]
    fn timeseries_empty_and_same_day() {
        let p = Project::new("p", vec![], &[]).unwrap();
        let s = activity_timeseries(&p, 7, 0, 28 * DAY).unwrap();
        assert_eq!(s.points.len(), 4);
        assert!(s.points.iter().all(|pt| pt.events == 0 && pt.active_contributors == 0));

        let p = project(&[("a", 3), ("a", 3), ("b", 3), ("c", 3), ("a", 3), ("b", 3), ("d", 3)]);
        let s = activity_timeseries(&p, 1, 1_003 * DAY, 1_004 * DAY).unwrap();
        assert_eq!(s.points.len(), 1);
        assert_eq!(s.points[0].events, 7);
        assert_eq!(s.points[0].active_contributors, 4);
        assert!(activity_timeseries(&p, 0, 0, 1).is_err());
    }

    #[test]
    fn timeseries_matches_brute_force_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let keys = ["a", "b", "c", "d", "e", "f"];
        let rows: Vec<(&str, i64)> = (0..100)
            .map(|_| (keys[rng.random_range(0..keys.len())], rng.random_range(0..120)))
            .collect();
        let p = project(&rows);
        let (start, end) = (1_000 * DAY, 1_120 * DAY);
        let s = activity_timeseries(&p, 7, start, end).unwrap();
        assert_eq!(s.points.iter().map(|pt| pt.events).sum::<u64>(), 100);
        for (b, pt) in s.points.iter().enumerate() {
            let lo = start + b as i64 * 7 * DAY;
            let hi = lo + 7 * DAY;
            let set: BTreeSet<&str> = rows
                .iter()
                .filter(|(_, d)| {
                    let t = 1_000 * DAY + d * DAY;
                    t >= lo && t < hi && t < end
                })
                .map(|(k, _)| *k)
                .collect();
            assert_eq!(pt.active_contributors, set.len() as u64, "bucket {b}");
            assert_eq!(pt.bucket_start, lo);
        }
        for w in s.points.windows(2) {
            assert_eq!(w[1].bucket_start - w[0].bucket_start, 7 * DAY);
        }
    }

    fn contributor(id: &str, affiliation: &str) -> Contributor {
        Contributor {
            contributor_id: id.into(),
            display_name: id.into(),
            aliases: BTreeSet::new(),
            emails: BTreeSet::new(),
            first_event: 0,
            last_event: 0,
            status: Status::Active,
            affiliation: affiliation.into(),
            demographics: None,
            resumed_after_gap: false,
        }
    }

    #[test]
    fn distribution_shares() {
        let all_unknown: Vec<_> = (0..3).map(|i| contributor(&i.to_string(), UNKNOWN)).collect();
        let d = demographic_distribution(&all_unknown, Lens::Affiliation);
        assert_eq!(d.len(), 1);
        assert_eq!(d[UNKNOWN].share, 1.0);

        let mixed = vec![
            contributor("1", "corp.com"),
            contributor("2", "corp.com"),
            contributor("3", "corp.com"),
            contributor("4", UNKNOWN),
        ];
        let d = demographic_distribution(&mixed, Lens::Affiliation);
        assert_eq!(d["corp.com"].share, 0.75);
        assert_eq!(d[UNKNOWN].share, 0.25);
        let g = demographic_distribution(&mixed, Lens::Gender);
        assert_eq!(g[UNKNOWN].count, 4);
    }

    #[test]
    fn distribution_uses_the_attached_record() {
        let mut c = contributor("1", UNKNOWN);
        let inferred = Demographics {
            gender: Some("male".into()),
            region: Some("r1".into()),
            confidence: 0.95,
            source: DemographicSource::Inferred,
        };
        let reported = Demographics {
            gender: Some("female".into()),
            region: None,
            confidence: 1.0,
            source: DemographicSource::SelfReported,
        };
        c.demographics = Some(inferred.clone());
        let c = crate::engagement::apply_demographics(
            c,
            crate::engagement::DemographicUpdate {
                gender: reported.gender.clone(),
                region: None,
            },
            DemographicSource::SelfReported,
            crate::engagement::Precedence::default(),
        )
        .unwrap();
        let d = demographic_distribution(std::slice::from_ref(&c), Lens::Gender);
        assert!(d.contains_key("female"));
        let r = demographic_distribution(&[c], Lens::Region);
        assert!(r.contains_key("r1"));
    }

    #[test]
    fn rosters() {
        let p = Project::new("p", vec![], &[]).unwrap();
        assert!(list_newcomers(p.contributors(), &p.default_policy()).unwrap().is_empty());

        let p = project(&[("new", 300), ("old", 0), ("old", 300), ("gap179", 0), ("gap179", 121), ("gap180", 0), ("gap180", 120)]);
        let policy = LifecyclePolicy::with_as_of(1_300 * DAY);
        let newcomers = list_newcomers(p.contributors(), &policy).unwrap();
        assert_eq!(newcomers.len(), 1);
        assert_eq!(newcomers[0].display_name, "new");
        let inactive = list_inactive(p.contributors(), &policy).unwrap();
        assert_eq!(inactive.len(), 1);
        assert_eq!(inactive[0].display_name, "gap180");
        assert_eq!(inactive[0].gap_days, 180);
    }

    #[test]
    fn randomized_rosters_match_filter_and_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rows = vec![];
        let names: Vec<String> = (0..50).map(|i| format!("c{i}")).collect();
        for n in &names {
            let first = rng.random_range(0..600);
            let last = first + rng.random_range(0..(700 - first));
            rows.push((n.as_str(), first));
            rows.push((n.as_str(), last));
        }
        let p = project(&rows);
        let policy = LifecyclePolicy::with_as_of(1_700 * DAY);
        let inactive = list_inactive(p.contributors(), &policy).unwrap();
        let brute: BTreeSet<&str> = p
            .contributors()
            .iter()
            .filter(|c| classify_status(c, &policy).unwrap() == Status::Inactive)
            .map(|c| c.contributor_id.as_str())
            .collect();
        assert_eq!(inactive.iter().map(|r| r.contributor_id.as_str()).collect::<BTreeSet<_>>(), brute);
        for w in inactive.windows(2) {
            assert!(w[0].gap_days >= w[1].gap_days);
        }

        let mut seen = BTreeSet::new();
        for status in Status::ALL {
            for r in list_status(p.contributors(), &policy, status).unwrap() {
                assert!(seen.insert(r.contributor_id), "rosters overlap");
            }
        }
        assert_eq!(seen.len(), p.contributors().len());
    }
}

#[cfg(test)]
mod properties {
    use super::*;
    use crate::model::EventKind;
    use proptest::prelude::*;

    fn arb_project() -> impl Strategy<Value = Project> {
        prop::collection::vec((0u8..12, 0i64..800), 1..60).prop_map(|rows| {
            let events = rows
                .into_iter()
                .enumerate()
                .map(|(i, (k, d))| ContributionEvent {
                    event_id: format!("e{i}"),
                    contributor_key: format!("k{k}"),
                    email: None,
                    display_name: None,
                    timestamp: 5_000 * SECONDS_PER_DAY + d * SECONDS_PER_DAY + i as i64,
                    kind: EventKind::Commit,
                    repo: "r".into(),
                    tags: vec![],
                })
                .collect();
            Project::new("p", events, &[]).unwrap()
        })
    }

    proptest! {
        #[test]
        fn overview_invariants(p in arb_project(), a in 0i64..800, len in 1i64..400, grow in 0i64..400) {
            let base = 5_000 * SECONDS_PER_DAY;
            let policy = LifecyclePolicy::with_as_of(base + 2_000 * SECONDS_PER_DAY);
            let start = base + a * SECONDS_PER_DAY;
            let end = start + len * SECONDS_PER_DAY;
            let m = overview_metrics(&p, &policy, start, end).unwrap();
            prop_assert!((0.0..=1.0).contains(&m.turnover_rate));
            prop_assert!(m.active_count + m.departed_count <= m.total_count);
            if let Some(t) = m.avg_tenure_days { prop_assert!(t >= 1.0); }
            let wider = overview_metrics(&p, &policy, start - grow * SECONDS_PER_DAY, end + grow * SECONDS_PER_DAY).unwrap();
            prop_assert!(wider.total_count >= m.total_count);
        }

        #[test]
        fn shares_sum_to_one(p in arb_project()) {
            for lens in Lens::ALL {
                let d = demographic_distribution(p.contributors(), lens);
                let total: f64 = d.values().map(|g| g.share).sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
            }
        }
    }
}
