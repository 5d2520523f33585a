//! Templated messages, scheduled health reports, lifecycle-triggered
//! welcome/offboarding mail, and self-reported demographics.
//!
//! Nothing here talks to a mail server. Messages are rendered into
//! [`OutboxMessage`] values that the store writes to an outbox directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use chrono::{DateTime, Datelike, Duration, NaiveDate, NaiveTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{RetainError, Result};
use crate::metrics::{list_inactive, list_newcomers, overview_metrics};
use crate::model::{
    Contributor, DemographicSource, Demographics, LifecyclePolicy, Project, Status, SECONDS_PER_DAY,
};
use crate::survival::RiskScore;

/// Placeholders a template may use.
pub const PLACEHOLDERS: [&str; 4] = ["display_name", "project", "first_contribution_link", "survey_link"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Welcome,
    Offboarding,
    WellnessSurvey,
    Report,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageTemplate {
    pub template_id: String,
    pub kind: TemplateKind,
    pub subject: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rendered {
    pub subject: String,
    pub body: String,
}

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

/// Split on `{{name}}`. Unterminated braces are kept as text.
fn pieces(text: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("{{") {
        let Some(len) = rest[open + 2..].find("}}") else {
            break;
        };
        if open > 0 {
            out.push(Piece::Text(&rest[..open]));
        }
        out.push(Piece::Slot(rest[open + 2..open + 2 + len].trim()));
        rest = &rest[open + 2 + len + 2..];
    }
    if !rest.is_empty() {
        out.push(Piece::Text(rest));
    }
    out
}

impl MessageTemplate {
    pub fn new(template_id: &str, kind: TemplateKind, subject: &str, body: &str) -> Result<Self> {
        let t = MessageTemplate {
            template_id: template_id.into(),
            kind,
            subject: subject.into(),
            body: body.into(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn placeholders(&self) -> BTreeSet<&str> {
        pieces(&self.subject)
            .into_iter()
            .chain(pieces(&self.body))
            .filter_map(|p| match p {
                Piece::Slot(name) => Some(name),
                Piece::Text(_) => None,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        match self.placeholders().into_iter().find(|p| !PLACEHOLDERS.contains(p)) {
            Some(bad) => Err(RetainError::UnknownPlaceholder(bad.to_string())),
            None => Ok(()),
        }
    }
}

fn fill(text: &str, context: &BTreeMap<String, String>) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    for p in pieces(text) {
        match p {
            Piece::Text(t) => out.push_str(t),
            Piece::Slot(name) => {
                if !PLACEHOLDERS.contains(&name) {
                    return Err(RetainError::UnknownPlaceholder(name.to_string()));
                }
                let value = context
                    .get(name)
                    .ok_or_else(|| RetainError::MissingPlaceholder(name.to_string()))?;
                out.push_str(value);
            }
        }
    }
    Ok(out)
}

/// Substitute placeholders in one pass; substituted values are never
/// scanned again.
pub fn render_template(template: &MessageTemplate, context: &BTreeMap<String, String>) -> Result<Rendered> {
    Ok(Rendered {
        subject: fill(&template.subject, context)?,
        body: fill(&template.body, context)?,
    })
}

pub fn default_templates() -> Vec<MessageTemplate> {
    vec![
        MessageTemplate {
            template_id: "welcome".into(),
            kind: TemplateKind::Welcome,
            subject: "Welcome to {{project}}".into(),
            body: "Hi {{display_name}},\n\nThanks for your first contribution to {{project}} ({{first_contribution_link}}). \
                   If you want a hand finding the next thing to work on, reply to this message.\n"
                .into(),
        },
        MessageTemplate {
            template_id: "offboarding".into(),
            kind: TemplateKind::Offboarding,
            subject: "Thank you from {{project}}".into(),
            body: "Hi {{display_name}},\n\nWe noticed you have not been active in {{project}} for a while. \
                   Thank you for everything you contributed. If you have a minute, tell us how it went: {{survey_link}}\n"
                .into(),
        },
        MessageTemplate {
            template_id: "wellness_survey".into(),
            kind: TemplateKind::WellnessSurvey,
            subject: "How are things going in {{project}}?".into(),
            body: "Hi {{display_name}},\n\nA short pulse-check survey for {{project}} contributors: {{survey_link}}\n".into(),
        },
        MessageTemplate {
            template_id: "report".into(),
            kind: TemplateKind::Report,
            subject: "{{project}} health report".into(),
            body: String::new(),
        },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    Newcomer,
    Departure,
    Schedule,
    Manual,
}

impl Trigger {
    pub fn as_str(self) -> &'static str {
        match self {
            Trigger::Newcomer => "newcomer",
            Trigger::Departure => "departure",
            Trigger::Schedule => "schedule",
            Trigger::Manual => "manual",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutboxMessage {
    pub message_id: String,
    pub subject: String,
    pub body: String,
    pub recipient: String,
    pub created_at: i64,
    pub trigger: Trigger,
}

fn message_id(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    format!("m-{}", &hex::encode(h.finalize())[..16])
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthReport {
    pub project: String,
    pub as_of: i64,
    pub period_days: u32,
    pub newcomer_count: u64,
    pub inactive_count: u64,
    pub turnover_rate: f64,
    pub prior_turnover_rate: f64,
    pub turnover_delta: f64,
    /// Top of the risk ranking, absent when no model has been fitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_risk: Option<Vec<RiskScore>>,
}

pub const REPORT_AT_RISK_LIMIT: usize = 10;

/// Health summary at `policy.as_of`. Turnover is compared between the last
/// `period_days` and the period before it.
pub fn generate_report(
    project: &Project,
    policy: &LifecyclePolicy,
    period_days: u32,
    risk: Option<&[RiskScore]>,
) -> Result<HealthReport> {
    if period_days == 0 {
        return Err(RetainError::InvalidArgument("period_days must be at least 1".into()));
    }
    let p = i64::from(period_days) * SECONDS_PER_DAY;
    let end = policy.as_of;
    let current = overview_metrics(project, policy, end - p, end)?;
    let prior = overview_metrics(project, policy, end - 2 * p, end - p)?;
    let at_risk = risk.map(|scores| {
        let mut top = scores.to_vec();
        top.sort_by_key(|s| s.rank);
        top.truncate(REPORT_AT_RISK_LIMIT);
        top
    });
    Ok(HealthReport {
        project: project.name.clone(),
        as_of: policy.as_of,
        period_days,
        newcomer_count: list_newcomers(project.contributors(), policy)?.len() as u64,
        inactive_count: list_inactive(project.contributors(), policy)?.len() as u64,
        turnover_rate: current.turnover_rate,
        prior_turnover_rate: prior.turnover_rate,
        turnover_delta: current.turnover_rate - prior.turnover_rate,
        at_risk,
    })
}

impl HealthReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let when = DateTime::<Utc>::from_timestamp(self.as_of, 0)
            .map(|d| d.format("%Y-%m-%d %H:%M UTC").to_string())
            .unwrap_or_else(|| self.as_of.to_string());
        let _ = writeln!(s, "Project: {}", self.project);
        let _ = writeln!(s, "As of: {when}");
        let _ = writeln!(s, "Newcomers: {}", self.newcomer_count);
        let _ = writeln!(s, "Inactive: {}", self.inactive_count);
        let _ = writeln!(
            s,
            "Turnover ({}d): {:.4} (prior {:.4}, delta {:+.4})",
            self.period_days, self.turnover_rate, self.prior_turnover_rate, self.turnover_delta
        );
        match &self.at_risk {
            None => {
                let _ = writeln!(s, "At risk: no model fitted");
            }
            Some(list) if list.is_empty() => {
                let _ = writeln!(s, "At risk: none");
            }
            Some(list) => {
                let _ = writeln!(s, "At risk:");
                for r in list {
                    let _ = writeln!(s, "  {:>2}. {} ({:.4})", r.rank, r.contributor_id, r.score);
                }
            }
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Schedules

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cadence {
    Daily,
    Weekly,
    Monthly,
}

impl FromStr for Cadence {
    type Err = RetainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "daily" => Ok(Cadence::Daily),
            "weekly" => Ok(Cadence::Weekly),
            "monthly" => Ok(Cadence::Monthly),
            other => Err(RetainError::InvalidArgument(format!("unknown cadence `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Health,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub schedule_id: String,
    pub report: ReportKind,
    pub cadence: Cadence,
    pub at_utc: String,
    pub recipients: Vec<String>,
    pub enabled: bool,
    #[serde(default)]
    pub last_run: Option<i64>,
}

pub fn parse_hhmm(s: &str) -> Result<NaiveTime> {
    let bad = || RetainError::InvalidTime(s.to_string());
    let (h, m) = s.split_once(':').ok_or_else(bad)?;
    if h.len() != 2 || m.len() != 2 {
        return Err(bad());
    }
    let h: u32 = h.parse().map_err(|_| bad())?;
    let m: u32 = m.parse().map_err(|_| bad())?;
    NaiveTime::from_hms_opt(h, m, 0).ok_or_else(bad)
}

fn to_utc(ts: i64) -> DateTime<Utc> {
    DateTime::<Utc>::from_timestamp(ts, 0).unwrap_or_default()
}

/// Start date of the cadence period containing `day`: the day itself, the
/// Monday of its week, or the first of its month.
fn period_start(cadence: Cadence, day: NaiveDate) -> NaiveDate {
    match cadence {
        Cadence::Daily => day,
        Cadence::Weekly => day - Duration::days(i64::from(day.weekday().num_days_from_monday())),
        Cadence::Monthly => day.with_day(1).unwrap_or(day),
    }
}

fn next_period(cadence: Cadence, start: NaiveDate) -> NaiveDate {
    match cadence {
        Cadence::Daily => start + Duration::days(1),
        Cadence::Weekly => start + Duration::days(7),
        Cadence::Monthly => {
            let (y, m) = if start.month() == 12 { (start.year() + 1, 1) } else { (start.year(), start.month() + 1) };
            NaiveDate::from_ymd_opt(y, m, 1).unwrap_or(start)
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        parse_hhmm(&self.at_utc)?;
        if self.schedule_id.trim().is_empty() {
            return Err(RetainError::InvalidArgument("schedule_id must not be empty".into()));
        }
        Ok(())
    }

    /// First slot strictly after `last_run`. A schedule that never ran is
    /// due at the slot of the period containing `now`.
    pub fn next_due(&self, now: i64) -> Result<i64> {
        let time = parse_hhmm(&self.at_utc)?;
        let slot = |d: NaiveDate| d.and_time(time).and_utc().timestamp();
        match self.last_run {
            None => Ok(slot(period_start(self.cadence, to_utc(now).date_naive()))),
            Some(last) => {
                let mut d = period_start(self.cadence, to_utc(last).date_naive());
                while slot(d) <= last {
                    d = next_period(self.cadence, d);
                }
                Ok(slot(d))
            }
        }
    }

    pub fn is_due(&self, now: i64) -> Result<bool> {
        Ok(self.enabled && now >= self.next_due(now)?)
    }
}

/// Fire every due schedule: one message per recipient carrying
/// `report_body`, and `last_run` set to `now`. Running again with the same
/// `now` emits nothing.
pub fn run_due_schedules(
    schedules: &mut [Schedule],
    now: i64,
    project: &str,
    report_body: &str,
) -> Result<Vec<OutboxMessage>> {
    let mut out = Vec::new();
    for s in schedules.iter_mut() {
        if !s.is_due(now)? {
            continue;
        }
        let now_s = now.to_string();
        for r in &s.recipients {
            out.push(OutboxMessage {
                message_id: message_id(&["schedule", &s.schedule_id, r, &now_s]),
                subject: format!("{project} health report"),
                body: report_body.to_string(),
                recipient: r.clone(),
                created_at: now,
                trigger: Trigger::Schedule,
            });
        }
        s.last_run = Some(now);
    }
    Ok(out)
}

/// Drop messages beyond `cap` per recipient, counting `already_sent` for
/// the same day. Returns the kept messages and the number dropped.
pub fn cap_per_recipient(
    messages: Vec<OutboxMessage>,
    already_sent: &BTreeMap<String, u32>,
    cap: u32,
) -> (Vec<OutboxMessage>, usize) {
    let mut counts = already_sent.clone();
    let mut dropped = 0;
    let kept = messages
        .into_iter()
        .filter(|m| {
            let c = counts.entry(m.recipient.clone()).or_default();
            if *c >= cap {
                dropped += 1;
                false
            } else {
                *c += 1;
                true
            }
        })
        .collect();
    (kept, dropped)
}

// ---------------------------------------------------------------------------
// Lifecycle messages

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusTransition {
    pub contributor_id: String,
    #[serde(default)]
    pub from: Option<Status>,
    pub to: Status,
}

/// Status changes between a previous snapshot and the current contributors.
/// Contributors absent from `previous` transition from `None`.
pub fn status_transitions(previous: &BTreeMap<String, Status>, contributors: &[Contributor]) -> Vec<StatusTransition> {
    contributors
        .iter()
        .filter_map(|c| {
            let from = previous.get(&c.contributor_id).copied();
            (from != Some(c.status)).then(|| StatusTransition {
                contributor_id: c.contributor_id.clone(),
                from,
                to: c.status,
            })
        })
        .collect()
}

/// What the lifecycle run needs besides the transitions themselves.
pub struct LifecycleContext<'a> {
    pub project: &'a Project,
    pub templates: &'a [MessageTemplate],
    pub survey_link: &'a str,
    pub now: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifecycleOutcome {
    pub messages: Vec<OutboxMessage>,
    /// Contributor ids skipped because no email is known.
    pub undeliverable: Vec<String>,
}

/// Link to a contributor's earliest recorded contribution.
pub fn first_contribution_link(project: &Project, contributor_id: &str) -> String {
    project
        .events_of(contributor_id)
        .first()
        .map(|e| format!("{}/{}", e.repo, e.event_id))
        .unwrap_or_default()
}

pub fn message_context(project: &Project, contributor: &Contributor, survey_link: &str) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("display_name".to_string(), contributor.display_name.clone()),
        ("project".to_string(), project.name.clone()),
        (
            "first_contribution_link".to_string(),
            first_contribution_link(project, &contributor.contributor_id),
        ),
        ("survey_link".to_string(), survey_link.to_string()),
    ])
}

fn template_for(templates: &[MessageTemplate], kind: TemplateKind) -> Result<&MessageTemplate> {
    templates
        .iter()
        .find(|t| t.kind == kind)
        .ok_or_else(|| RetainError::InvalidArgument(format!("no template of kind {kind:?}")))
}

/// Welcome messages for new newcomers and offboarding messages for new
/// departures. `sent` holds every (contributor, trigger) already messaged
/// and is extended in place, so each pair is messaged at most once.
pub fn trigger_lifecycle_messages(
    transitions: &[StatusTransition],
    ctx: &LifecycleContext<'_>,
    sent: &mut BTreeSet<(String, Trigger)>,
) -> Result<LifecycleOutcome> {
    let mut outcome = LifecycleOutcome::default();
    for t in transitions {
        let (trigger, kind) = match t.to {
            Status::Newcomer => (Trigger::Newcomer, TemplateKind::Welcome),
            Status::Departed => (Trigger::Departure, TemplateKind::Offboarding),
            _ => continue,
        };
        let key = (t.contributor_id.clone(), trigger);
        if sent.contains(&key) {
            continue;
        }
        let c = ctx
            .project
            .contributor(&t.contributor_id)
            .ok_or_else(|| RetainError::UnknownContributor(t.contributor_id.clone()))?;
        let Some(email) = c.primary_email() else {
            outcome.undeliverable.push(c.contributor_id.clone());
            continue;
        };
        let rendered = render_template(
            template_for(ctx.templates, kind)?,
            &message_context(ctx.project, c, ctx.survey_link),
        )?;
        outcome.messages.push(OutboxMessage {
            message_id: message_id(&[trigger.as_str(), &c.contributor_id]),
            subject: rendered.subject,
            body: rendered.body,
            recipient: email.to_string(),
            created_at: ctx.now,
            trigger,
        });
        sent.insert(key);
    }
    Ok(outcome)
}

/// An operator-initiated message (for example a wellness survey) to one
/// contributor.
pub fn manual_message(
    template: &MessageTemplate,
    project: &Project,
    contributor: &Contributor,
    survey_link: &str,
    now: i64,
) -> Result<Option<OutboxMessage>> {
    let Some(email) = contributor.primary_email() else {
        return Ok(None);
    };
    let rendered = render_template(template, &message_context(project, contributor, survey_link))?;
    Ok(Some(OutboxMessage {
        message_id: message_id(&["manual", &template.template_id, &contributor.contributor_id, &now.to_string()]),
        subject: rendered.subject,
        body: rendered.body,
        recipient: email.to_string(),
        created_at: now,
        trigger: Trigger::Manual,
    }))
}

// ---------------------------------------------------------------------------
// Demographic intake

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemographicUpdate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
}

/// Which source wins when records disagree, strongest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Precedence(pub [DemographicSource; 3]);

impl Default for Precedence {
    fn default() -> Self {
        Precedence([
            DemographicSource::Corrected,
            DemographicSource::SelfReported,
            DemographicSource::Inferred,
        ])
    }
}

impl Precedence {
    pub fn validate(&self) -> Result<()> {
        let distinct: BTreeSet<_> = self.0.iter().collect();
        if distinct.len() != 3 {
            return Err(RetainError::Config {
                key: "demographic_precedence".into(),
                message: "must list inferred, self_reported and corrected once each".into(),
            });
        }
        Ok(())
    }

    /// Higher is stronger.
    pub fn strength(&self, source: DemographicSource) -> usize {
        3 - self.0.iter().position(|s| *s == source).unwrap_or(2)
    }
}

/// Merge `update` into the contributor's record under `source`. Fields the
/// update leaves out keep their current value. An update from a weaker
/// source than the existing record leaves the contributor unchanged.
pub fn apply_demographics(
    mut contributor: Contributor,
    update: DemographicUpdate,
    source: DemographicSource,
    precedence: Precedence,
) -> Result<Contributor> {
    if update.gender.is_none() && update.region.is_none() {
        return Err(RetainError::InvalidArgument("demographic update sets no field".into()));
    }
    if let Some(existing) = &contributor.demographics {
        if precedence.strength(existing.source) > precedence.strength(source) {
            return Ok(contributor);
        }
    }
    let prior = contributor.demographics.take();
    contributor.demographics = Some(Demographics {
        gender: update.gender.or_else(|| prior.as_ref().and_then(|d| d.gender.clone())),
        region: update.region.or_else(|| prior.as_ref().and_then(|d| d.region.clone())),
        confidence: 1.0,
        source,
    });
    Ok(contributor)
}

pub fn record_self_report(
    project: &mut Project,
    contributor_id: &str,
    update: DemographicUpdate,
    precedence: Precedence,
) -> Result<Contributor> {
    set_demographics(project, contributor_id, update, DemographicSource::SelfReported, precedence)
}

/// Operator correction of a contributor's demographics.
pub fn record_correction(
    project: &mut Project,
    contributor_id: &str,
    update: DemographicUpdate,
    precedence: Precedence,
) -> Result<Contributor> {
    set_demographics(project, contributor_id, update, DemographicSource::Corrected, precedence)
}

fn set_demographics(
    project: &mut Project,
    contributor_id: &str,
    update: DemographicUpdate,
    source: DemographicSource,
    precedence: Precedence,
) -> Result<Contributor> {
    let slot = project
        .contributors_mut()
        .iter_mut()
        .find(|c| c.contributor_id == contributor_id)
        .ok_or_else(|| RetainError::UnknownContributor(contributor_id.to_string()))?;
    let updated = apply_demographics(slot.clone(), update, source, precedence)?;
    *slot = updated.clone();
    Ok(updated)
}
