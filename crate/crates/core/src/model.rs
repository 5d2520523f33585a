//! Canonical domain types shared by every analytics module.
//!
//! Raw events carry whatever author key the source system reported (a login
//! or an email). [`resolve_identities`] collapses keys that share an email or
//! are joined by an operator merge hint, and [`classify_status`] assigns each
//! resolved contributor a lifecycle status relative to an as-of instant.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{RetainError, Result};

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Whole days between two instants, floored. Callers guarantee `to >= from`.
pub fn whole_days(from: i64, to: i64) -> i64 {
    (to - from).div_euclid(SECONDS_PER_DAY)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Commit,
    PrOpened,
    PrReview,
    IssueOpened,
    IssueComment,
}

impl EventKind {
    pub const ALL: [EventKind; 5] = [
        EventKind::Commit,
        EventKind::PrOpened,
        EventKind::PrReview,
        EventKind::IssueOpened,
        EventKind::IssueComment,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Commit => "commit",
            EventKind::PrOpened => "pr_opened",
            EventKind::PrReview => "pr_review",
            EventKind::IssueOpened => "issue_opened",
            EventKind::IssueComment => "issue_comment",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EventKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| s.to_string())
    }
}

/// One timestamped act by one contributor.
///
/// Field order is the canonical JSONL field order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContributionEvent {
    pub event_id: String,
    pub contributor_key: String,
    pub email: Option<String>,
    pub display_name: Option<String>,
    pub timestamp: i64,
    pub kind: EventKind,
    pub repo: String,
    pub tags: Vec<String>,
}

impl ContributionEvent {
    /// Keys of automation accounts, e.g. `dependabot[bot]`.
    pub fn is_bot(&self) -> bool {
        self.contributor_key.to_ascii_lowercase().contains("[bot]")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Newcomer,
    Active,
    Inactive,
    Departed,
}

impl Status {
    pub const ALL: [Status; 4] = [
        Status::Newcomer,
        Status::Active,
        Status::Inactive,
        Status::Departed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Newcomer => "newcomer",
            Status::Active => "active",
            Status::Inactive => "inactive",
            Status::Departed => "departed",
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemographicSource {
    Inferred,
    SelfReported,
    Corrected,
}

impl DemographicSource {
    /// Higher rank wins when two sources disagree.
    pub fn rank(self) -> u8 {
        match self {
            DemographicSource::Inferred => 0,
            DemographicSource::SelfReported => 1,
            DemographicSource::Corrected => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
    pub confidence: f64,
    pub source: DemographicSource,
}

pub const UNKNOWN: &str = "unknown";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contributor {
    pub contributor_id: String,
    pub display_name: String,
    pub aliases: BTreeSet<String>,
    pub emails: BTreeSet<String>,
    pub first_event: i64,
    pub last_event: i64,
    pub status: Status,
    pub affiliation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demographics: Option<Demographics>,
    /// Set when the contributor came back after a silence long enough to
    /// count as a departure; the old identity is resumed and flagged.
    #[serde(default)]
    pub resumed_after_gap: bool,
}

impl Contributor {
    pub fn primary_email(&self) -> Option<&str> {
        self.emails.iter().next().map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifecyclePolicy {
    pub inactive_after_days: u32,
    pub departed_after_days: u32,
    pub newcomer_within_days: u32,
    pub as_of: i64,
}

impl LifecyclePolicy {
    pub const DEFAULT_INACTIVE_AFTER_DAYS: u32 = 180;
    pub const DEFAULT_DEPARTED_AFTER_DAYS: u32 = 365;
    pub const DEFAULT_NEWCOMER_WITHIN_DAYS: u32 = 90;

    pub fn with_as_of(as_of: i64) -> Self {
        LifecyclePolicy {
            inactive_after_days: Self::DEFAULT_INACTIVE_AFTER_DAYS,
            departed_after_days: Self::DEFAULT_DEPARTED_AFTER_DAYS,
            newcomer_within_days: Self::DEFAULT_NEWCOMER_WITHIN_DAYS,
            as_of,
        }
    }

    /// Default thresholds with as-of set to the latest event timestamp.
    pub fn for_events(events: &[ContributionEvent]) -> Self {
        Self::with_as_of(events.iter().map(|e| e.timestamp).max().unwrap_or(0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.newcomer_within_days == 0 {
            return Err(RetainError::InvalidPolicy(
                "newcomer_within_days must be positive".into(),
            ));
        }
        if self.inactive_after_days == 0 || self.inactive_after_days >= self.departed_after_days {
            return Err(RetainError::InvalidPolicy(format!(
                "need 0 < inactive_after_days ({}) < departed_after_days ({})",
                self.inactive_after_days, self.departed_after_days
            )));
        }
        Ok(())
    }

    /// Status implied by day counts alone.
    ///
    /// `gap_days` is the silence before as-of, `age_days` the span from the
    /// first event to as-of.
    pub fn status_for(&self, gap_days: i64, age_days: i64) -> Status {
        if gap_days >= i64::from(self.departed_after_days) {
            Status::Departed
        } else if gap_days >= i64::from(self.inactive_after_days) {
            Status::Inactive
        } else if age_days <= i64::from(self.newcomer_within_days) {
            Status::Newcomer
        } else {
            Status::Active
        }
    }
}

/// Lifecycle status of `contributor` at `policy.as_of`.
pub fn classify_status(contributor: &Contributor, policy: &LifecyclePolicy) -> Result<Status> {
    classify_span(contributor.first_event, contributor.last_event, policy)
}

pub(crate) fn classify_span(first: i64, last: i64, policy: &LifecyclePolicy) -> Result<Status> {
    if last > policy.as_of {
        return Err(RetainError::FutureActivity {
            last_event: last,
            as_of: policy.as_of,
        });
    }
    let gap = whole_days(last, policy.as_of);
    let age = whole_days(first, policy.as_of);
    Ok(policy.status_for(gap, age))
}

/// Days between first and last contribution, at least one.
pub fn compute_tenure(contributor: &Contributor) -> i64 {
    tenure_days(contributor.first_event, contributor.last_event)
}

pub(crate) fn tenure_days(first: i64, last: i64) -> i64 {
    whole_days(first, last).max(1)
}

/// Operator assertion that `alias` belongs to the same person as `into`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MergeHint {
    pub alias: String,
    pub into: String,
}

impl MergeHint {
    pub fn new(alias: impl Into<String>, into: impl Into<String>) -> Self {
        MergeHint {
            alias: alias.into(),
            into: into.into(),
        }
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller index becomes root so the structure is order-independent
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

fn normalize_email(raw: &str) -> Option<String> {
    let e = raw.trim().to_ascii_lowercase();
    (e.contains('@') && e.len() > 2).then_some(e)
}

/// Emails attributable to a raw key: the key itself when it looks like an
/// email, plus every email recorded on its events.
fn key_emails<'a>(
    key: &str,
    events: impl Iterator<Item = &'a ContributionEvent>,
) -> BTreeSet<String> {
    let mut out: BTreeSet<String> = normalize_email(key).into_iter().collect();
    out.extend(events.filter_map(|e| e.email.as_deref().and_then(normalize_email)));
    out
}

/// Stable opaque id derived from the lexicographically smallest alias.
pub fn contributor_id_for(canonical_alias: &str) -> String {
    let digest = Sha256::digest(canonical_alias.as_bytes());
    format!("c-{}", &hex::encode(digest)[..12])
}

/// Collapse raw author keys into contributors.
///
/// Keys sharing an email (case-insensitive) or joined by a merge hint end up
/// in one identity. A key hinted into two targets that are otherwise distinct
/// identities is rejected. Hints naming keys absent from `events` are ignored.
pub fn resolve_identities(
    events: &[ContributionEvent],
    merge_hints: &[MergeHint],
) -> Result<Vec<Contributor>> {
    let mut by_key: BTreeMap<&str, Vec<&ContributionEvent>> = BTreeMap::new();
    for e in events {
        by_key.entry(e.contributor_key.as_str()).or_default().push(e);
    }
    let keys: Vec<&str> = by_key.keys().copied().collect();
    let index: BTreeMap<&str, usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();

    let mut sets = DisjointSet::new(keys.len());
    let mut email_owner: BTreeMap<String, usize> = BTreeMap::new();
    let mut emails_per_key = Vec::with_capacity(keys.len());
    for (i, key) in keys.iter().enumerate() {
        let emails = key_emails(key, by_key[key].iter().copied());
        for email in &emails {
            match email_owner.get(email) {
                Some(&j) => sets.union(i, j),
                None => {
                    email_owner.insert(email.clone(), i);
                }
            }
        }
        emails_per_key.push(emails);
    }

    // Contradiction check runs against the email-only partition so the
    // verdict does not depend on hint order.
    let mut targets: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for hint in merge_hints {
        if index.contains_key(hint.alias.as_str()) && index.contains_key(hint.into.as_str()) {
            targets
                .entry(hint.alias.as_str())
                .or_default()
                .insert(hint.into.as_str());
        }
    }
    for (alias, intos) in &targets {
        let intos: Vec<&str> = intos.iter().copied().collect();
        for (a, first) in intos.iter().enumerate() {
            for second in &intos[a + 1..] {
                if sets.find(index[first]) != sets.find(index[second]) {
                    return Err(RetainError::ContradictoryHints {
                        key: alias.to_string(),
                        first: first.to_string(),
                        second: second.to_string(),
                    });
                }
            }
        }
    }
    for (alias, intos) in &targets {
        for into in intos {
            sets.union(index[alias], index[into]);
        }
    }

    let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..keys.len() {
        components.entry(sets.find(i)).or_default().push(i);
    }

    let policy = LifecyclePolicy::for_events(events);
    let mut contributors: Vec<Contributor> = components
        .into_values()
        .map(|members| {
            let aliases: BTreeSet<String> = members.iter().map(|&i| keys[i].to_string()).collect();
            let emails: BTreeSet<String> = members
                .iter()
                .flat_map(|&i| emails_per_key[i].iter().cloned())
                .collect();
            let mut stamps: Vec<i64> = members
                .iter()
                .flat_map(|&i| by_key[keys[i]].iter().map(|e| e.timestamp))
                .collect();
            stamps.sort_unstable();
            let first_event = stamps[0];
            let last_event = *stamps.last().expect("component has events");
            let resumed_after_gap = stamps.windows(2).any(|w| {
                whole_days(w[0], w[1]) >= i64::from(policy.departed_after_days)
            });

            let mut names: BTreeMap<&str, usize> = BTreeMap::new();
            for &i in &members {
                for e in &by_key[keys[i]] {
                    if let Some(n) = e.display_name.as_deref().filter(|n| !n.trim().is_empty()) {
                        *names.entry(n).or_default() += 1;
                    }
                }
            }
            let canonical = aliases.iter().next().expect("non-empty component").clone();
            let display_name = names
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
                .map(|(n, _)| n.to_string())
                .unwrap_or_else(|| canonical.clone());
            let status = classify_span(first_event, last_event, &policy)
                .expect("as-of is the maximum timestamp");

            Contributor {
                contributor_id: contributor_id_for(&canonical),
                display_name,
                aliases,
                emails,
                first_event,
                last_event,
                status,
                affiliation: UNKNOWN.to_string(),
                demographics: None,
                resumed_after_gap,
            }
        })
        .collect();
    contributors.sort_by(|a, b| a.contributor_id.cmp(&b.contributor_id));
    Ok(contributors)
}

/// A resolved project: events, contributors, and the raw-key index between
/// them. Events are held sorted by `(timestamp, event_id)`.
#[derive(Debug, Clone)]
pub struct Project {
    pub name: String,
    events: Vec<ContributionEvent>,
    contributors: Vec<Contributor>,
    key_index: BTreeMap<String, usize>,
    events_by_contributor: Vec<Vec<usize>>,
    as_of: Option<i64>,
}

impl Project {
    pub fn new(
        name: impl Into<String>,
        mut events: Vec<ContributionEvent>,
        hints: &[MergeHint],
    ) -> Result<Self> {
        events.sort_by(|a, b| {
            a.timestamp
                .cmp(&b.timestamp)
                .then_with(|| a.event_id.cmp(&b.event_id))
        });
        let contributors = resolve_identities(&events, hints)?;
        let mut key_index = BTreeMap::new();
        for (i, c) in contributors.iter().enumerate() {
            for alias in &c.aliases {
                key_index.insert(alias.clone(), i);
            }
        }
        let mut events_by_contributor = vec![Vec::new(); contributors.len()];
        for (ei, e) in events.iter().enumerate() {
            events_by_contributor[key_index[&e.contributor_key]].push(ei);
        }
        Ok(Project {
            name: name.into(),
            events,
            contributors,
            key_index,
            events_by_contributor,
            as_of: None,
        })
    }

    /// Pin the observation instant instead of using the latest event.
    pub fn with_as_of(mut self, as_of: Option<i64>) -> Self {
        self.as_of = as_of;
        self
    }

    pub fn events(&self) -> &[ContributionEvent] {
        &self.events
    }

    pub fn contributors(&self) -> &[Contributor] {
        &self.contributors
    }

    pub fn contributors_mut(&mut self) -> &mut [Contributor] {
        &mut self.contributors
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn as_of(&self) -> i64 {
        self.as_of
            .unwrap_or_else(|| self.events.last().map(|e| e.timestamp).unwrap_or(0))
    }

    pub fn pinned_as_of(&self) -> Option<i64> {
        self.as_of
    }

    pub fn contributor(&self, id: &str) -> Option<&Contributor> {
        self.position(id).map(|i| &self.contributors[i])
    }

    fn position(&self, id: &str) -> Option<usize> {
        self.contributors
            .binary_search_by(|c| c.contributor_id.as_str().cmp(id))
            .ok()
    }

    /// Contributor owning a raw author key.
    pub fn contributor_for_key(&self, key: &str) -> Option<&Contributor> {
        self.key_index.get(key).map(|&i| &self.contributors[i])
    }

    pub fn contributor_id_for_key(&self, key: &str) -> Option<&str> {
        self.contributor_for_key(key).map(|c| c.contributor_id.as_str())
    }

    /// Events of one contributor in ascending time order.
    pub fn events_of(&self, id: &str) -> Vec<&ContributionEvent> {
        self.position(id)
            .map(|i| {
                self.events_by_contributor[i]
                    .iter()
                    .map(|&ei| &self.events[ei])
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Events grouped by resolved contributor id.
    pub fn events_by_contributor(&self) -> BTreeMap<&str, Vec<&ContributionEvent>> {
        self.contributors
            .iter()
            .zip(&self.events_by_contributor)
            .map(|(c, idx)| {
                (
                    c.contributor_id.as_str(),
                    idx.iter().map(|&ei| &self.events[ei]).collect(),
                )
            })
            .collect()
    }

    /// Default thresholds at this project's as-of instant.
    pub fn default_policy(&self) -> LifecyclePolicy {
        LifecyclePolicy::with_as_of(self.as_of())
    }

    /// Recompute every contributor's stored status under `policy`.
    pub fn refresh_status(&mut self, policy: &LifecyclePolicy) -> Result<()> {
        for c in &mut self.contributors {
            c.status = classify_status(c, policy)?;
        }
        Ok(())
    }
}
