//! Seeded synthetic communities with known departure ground truth.
//!
//! Every contributor joins on day 0 and draws a departure day from a
//! geometric (constant daily hazard) distribution for its group. Departures
//! on or before `horizon_days` end the contributor's activity. Everyone else
//! stays active through a follow-up period so that silence-based lifecycle
//! classification at the returned as-of instant recovers the ground truth
//! exactly under the default thresholds.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RetainError, Result};
use crate::model::{ContributionEvent, EventKind, SECONDS_PER_DAY};

/// 2020-01-01T00:00:00Z
pub const DEFAULT_START: i64 = 1_577_836_800;

const KIND_WEIGHTS: [(EventKind, f64); 5] = [
    (EventKind::Commit, 0.40),
    (EventKind::PrOpened, 0.15),
    (EventKind::PrReview, 0.15),
    (EventKind::IssueOpened, 0.10),
    (EventKind::IssueComment, 0.20),
];
const TAGS: [&str; 5] = ["api", "docs", "ci", "core", "ui"];
const TAG_PROBABILITY: f64 = 0.3;
const FINAL_EVENT_OFFSET: i64 = 7_200;

fn default_follow_up() -> u32 {
    365
}

fn default_start() -> i64 {
    DEFAULT_START
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_contributors: usize,
    pub horizon_days: u32,
    pub group_shares: BTreeMap<String, f64>,
    pub group_hazard_per_day: BTreeMap<String, f64>,
    pub events_per_active_week: f64,
    /// Email domain per group; defaults to `{group}.example`.
    #[serde(default)]
    pub group_email_domains: BTreeMap<String, String>,
    /// Days of continued activity for survivors after the horizon.
    #[serde(default = "default_follow_up")]
    pub follow_up_days: u32,
    #[serde(default = "default_start")]
    pub start: i64,
}

impl SyntheticSpec {
    /// Two groups with the given daily hazards and an even split.
    pub fn two_groups(seed: u64, n: usize, horizon_days: u32, (a, ha): (&str, f64), (b, hb): (&str, f64)) -> Self {
        SyntheticSpec {
            seed,
            n_contributors: n,
            horizon_days,
            group_shares: BTreeMap::from([(a.to_string(), 0.5), (b.to_string(), 0.5)]),
            group_hazard_per_day: BTreeMap::from([(a.to_string(), ha), (b.to_string(), hb)]),
            events_per_active_week: 2.0,
            group_email_domains: BTreeMap::new(),
            follow_up_days: default_follow_up(),
            start: DEFAULT_START,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RetainError::InvalidSpec(m));
        if self.n_contributors == 0 {
            return bad("n_contributors must be positive".into());
        }
        if self.horizon_days == 0 || self.follow_up_days == 0 {
            return bad("horizon_days and follow_up_days must be positive".into());
        }
        if !(self.events_per_active_week > 0.0 && self.events_per_active_week.is_finite()) {
            return bad("events_per_active_week must be a positive real".into());
        }
        if self.group_shares.is_empty() {
            return bad("at least one group is required".into());
        }
        let total: f64 = self.group_shares.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("group shares sum to {total}, expected 1"));
        }
        for (group, share) in &self.group_shares {
            if !(0.0..=1.0).contains(share) {
                return bad(format!("share for `{group}` outside [0,1]"));
            }
            match self.group_hazard_per_day.get(group) {
                Some(h) if (0.0..=1.0).contains(h) => {}
                Some(h) => return bad(format!("hazard {h} for `{group}` outside [0,1]")),
                None => return bad(format!("no hazard for group `{group}`")),
            }
        }
        if let Some(extra) = self
            .group_hazard_per_day
            .keys()
            .find(|g| !self.group_shares.contains_key(*g))
        {
            return bad(format!("hazard given for unknown group `{extra}`"));
        }
        Ok(())
    }

    fn domain(&self, group: &str) -> String {
        self.group_email_domains
            .get(group)
            .cloned()
            .unwrap_or_else(|| format!("{group}.example"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub contributor_key: String,
    pub group: String,
    /// Day (counted from join) on which the contributor left; `None` when
    /// the contributor outlived the horizon.
    pub departure_day: Option<u32>,
    pub first_event: i64,
    pub last_event: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCommunity {
    pub events: Vec<ContributionEvent>,
    pub truth: Vec<SyntheticTruth>,
    /// Observation instant at which statuses reproduce the ground truth.
    pub as_of: i64,
}

/// Exact group sizes by largest remainder, ties broken by group name.
fn group_sizes(shares: &BTreeMap<String, f64>, n: usize) -> Vec<(String, usize)> {
    let mut sizes: Vec<(String, usize, f64)> = shares
        .iter()
        .map(|(g, s)| {
            let exact = s * n as f64;
            (g.clone(), exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = sizes.iter().map(|s| s.1).sum();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].2.total_cmp(&sizes[a].2).then(a.cmp(&b)));
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        sizes[i].1 += 1;
    }
    sizes.into_iter().map(|(g, c, _)| (g, c)).collect()
}

fn geometric_day(rng: &mut impl Rng, hazard: f64) -> Option<u64> {
    if hazard <= 0.0 {
        return None;
    }
    if hazard >= 1.0 {
        return Some(1);
    }
    let u: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
    let k = (u.ln() / (1.0 - hazard).ln()).ceil();
    Some(if k.is_finite() { (k as u64).max(1) } else { u64::MAX })
}

fn pick_kind(rng: &mut impl Rng) -> EventKind {
    let mut x: f64 = rng.random();
    for (kind, w) in KIND_WEIGHTS {
        if x < w {
            return kind;
        }
        x -= w;
    }
    EventKind::IssueComment
}

pub fn generate_synthetic_community(spec: &SyntheticSpec) -> Result<SyntheticCommunity> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut groups: Vec<String> = group_sizes(&spec.group_shares, spec.n_contributors)
        .into_iter()
        .flat_map(|(g, c)| std::iter::repeat_n(g, c))
        .collect();
    groups.shuffle(&mut rng);

    let end_day = i64::from(spec.horizon_days) + i64::from(spec.follow_up_days);
    let as_of = spec.start + end_day * SECONDS_PER_DAY + FINAL_EVENT_OFFSET;
    let rate_per_day = spec.events_per_active_week / 7.0;

    let mut events = Vec::new();
    let mut truth = Vec::with_capacity(groups.len());
    for (i, group) in groups.into_iter().enumerate() {
        let key = format!("syn-{i:04}");
        let email = format!("{key}@{}", spec.domain(&group));
        let display_name = format!("Synthetic {i:04}");
        let join = spec.start + rng.random_range(0..3_600);
        let departure = geometric_day(&mut rng, spec.group_hazard_per_day[&group])
            .filter(|&d| d <= u64::from(spec.horizon_days));
        // activity covers [join, join + active_days) for leavers
        let active_until = match departure {
            Some(d) => join + d as i64 * SECONDS_PER_DAY,
            None => as_of,
        };

        let mut stamps = vec![join];
        let mut t = join as f64;
        loop {
            let u: f64 = 1.0 - rng.random::<f64>();
            t += -u.ln() / rate_per_day * SECONDS_PER_DAY as f64;
            let ts = t.floor() as i64;
            if ts >= active_until {
                break;
            }
            if ts > *stamps.last().expect("join stamp") {
                stamps.push(ts);
            }
        }
        if departure.is_none() && *stamps.last().expect("join stamp") < as_of {
            stamps.push(as_of);
        }

        for (n, &ts) in stamps.iter().enumerate() {
            let kind = if n == 0 { EventKind::Commit } else { pick_kind(&mut rng) };
            let tags = if rng.random::<f64>() < TAG_PROBABILITY {
                vec![TAGS[rng.random_range(0..TAGS.len())].to_string()]
            } else {
                vec![]
            };
            events.push(ContributionEvent {
                event_id: format!("{key}-{n:05}"),
                contributor_key: key.clone(),
                email: Some(email.clone()),
                display_name: Some(display_name.clone()),
                timestamp: ts,
                kind,
                repo: "synthetic/community".into(),
                tags,
            });
        }
        truth.push(SyntheticTruth {
            contributor_key: key,
            group,
            departure_day: departure.map(|d| d as u32),
            first_event: stamps[0],
            last_event: *stamps.last().expect("join stamp"),
        });
    }
    events.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.event_id.cmp(&b.event_id)));
    Ok(SyntheticCommunity { events, truth, as_of })
}
