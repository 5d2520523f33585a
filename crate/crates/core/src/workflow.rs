//! Persisted-project operations shared by the command line and the HTTP
//! service. Each call loads what it needs from the store, delegates to the
//! analytic modules, and writes results back. No analytics live here.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Settings;
use crate::engagement::{
    cap_per_recipient, generate_report, record_correction, record_self_report, run_due_schedules,
    status_transitions, trigger_lifecycle_messages, DemographicUpdate, HealthReport, LifecycleContext,
    OutboxMessage, Schedule,
};
use crate::error::{RetainError, Result};
use crate::impact::{attrition_impact, project_impact, tag_distribution, AttritionImpact, ImpactScore, TagProfile};
use crate::ingest::{
    enrich_project, fetch_remote_events, filter_bots, generate_synthetic_community, infer_project_demographics,
    load_events_jsonl, merge_events, DemographicInference, IngestSource, SourceKind, SyntheticSpec,
};
use crate::metrics::{activity_history, Lens};
use crate::model::{Contributor, ContributionEvent, DemographicSource, LifecyclePolicy, Project, SECONDS_PER_DAY};
use crate::store::{ProjectMeta, ProjectStore, StoredModel};
use crate::survival::{
    build_survival_records, fit_model, km_estimate, logrank_test, predict_risk, KmEstimate, LogRankResult,
    ModelKind, RiskScore, SurvivalData,
};

/// Settings plus the store they apply to.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub settings: Settings,
    pub store: ProjectStore,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub project: String,
    pub received: usize,
    pub bots_dropped: usize,
    pub added: usize,
    pub total: usize,
    pub as_of: i64,
}

/// Body of a model-fitting request. Absent fields fall back to settings.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitRequest {
    pub kind: ModelKind,
    #[serde(default)]
    pub features: Option<Vec<String>>,
    #[serde(default)]
    pub feature_window_days: Option<u32>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalSummary {
    #[serde(flatten)]
    pub estimate: KmEstimate,
    /// Present when the grouping produced exactly two groups.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logrank: Option<LogRankResult>,
}

/// Drill-down view of one contributor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributorProfile {
    pub contributor: Contributor,
    pub activity: Vec<ContributionEvent>,
    pub tags: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impact: Option<ImpactScore>,
    pub attrition: AttritionImpact,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngagementRun {
    pub written: Vec<OutboxMessage>,
    pub undeliverable: Vec<String>,
    pub dropped_by_cap: usize,
}

/// Contributors inside the report's at-risk list count as at risk.
fn at_risk_set(risk: Option<&[RiskScore]>) -> BTreeSet<String> {
    let mut top: Vec<&RiskScore> = risk.unwrap_or_default().iter().collect();
    top.sort_by_key(|s| s.rank);
    top.into_iter()
        .take(crate::engagement::REPORT_AT_RISK_LIMIT)
        .map(|s| s.contributor_id.clone())
        .collect()
}

impl Workspace {
    /// Settings from `{data_dir}/retain.json` over a store rooted there.
    pub fn open(data_dir: impl AsRef<Path>) -> Result<Self> {
        let dir: PathBuf = data_dir.as_ref().to_path_buf();
        Ok(Workspace {
            settings: Settings::load(&dir)?,
            store: ProjectStore::new(dir),
        })
    }

    pub fn new(settings: Settings, store: ProjectStore) -> Self {
        Workspace { settings, store }
    }

    pub fn policy(&self, project: &Project) -> LifecyclePolicy {
        self.settings.policy_at(project.as_of())
    }

    fn meta(&self, name: &str) -> Result<ProjectMeta> {
        self.store
            .read_meta(name)?
            .ok_or_else(|| RetainError::UnknownProject(name.to_string()))
    }

    /// Resolve, enrich and classify a stored project.
    pub fn load_project(&self, name: &str) -> Result<Project> {
        let meta = self.meta(name)?;
        let events = self.store.read_events(name)?;
        let events = if self.settings.exclude_bots { filter_bots(events).0 } else { events };
        let mut project = Project::new(name, events, &meta.merge_hints)?.with_as_of(meta.as_of);
        let demographics = self.store.read_demographics(name)?;
        for w in enrich_project(
            &mut project,
            &self.settings.public_domain_set(),
            &demographics,
            self.settings.inference_threshold,
        ) {
            tracing::warn!(project = name, "{w}");
        }
        let policy = self.policy(&project);
        project.refresh_status(&policy)?;
        Ok(project)
    }

    /// Like [`Workspace::load_project`], but a project that was never
    /// ingested loads as an empty one.
    pub fn load_project_or_empty(&self, name: &str) -> Result<Project> {
        if self.store.project_exists(name)? {
            self.load_project(name)
        } else {
            Project::new(name, vec![], &[])
        }
    }

    fn ingest(&self, name: &str, incoming: Vec<ContributionEvent>, source: IngestSource, as_of: Option<i64>) -> Result<IngestSummary> {
        let received = incoming.len();
        let (incoming, bots_dropped) = if self.settings.exclude_bots {
            filter_bots(incoming)
        } else {
            (incoming, 0)
        };
        let mut meta = self.store.read_meta(name)?.unwrap_or_else(|| ProjectMeta {
            name: name.to_string(),
            ..ProjectMeta::default()
        });
        let existing = self.store.read_events(name)?;
        let before = existing.len();
        let merged = merge_events(existing, incoming);
        // resolve before writing so contradictory hints never persist
        let project = Project::new(name, merged.clone(), &meta.merge_hints)?;
        if as_of.is_some() {
            meta.as_of = as_of;
        }
        if !meta.sources.contains(&source) {
            meta.sources.push(source);
        }
        self.store.write_events(name, &merged)?;
        self.store.write_meta(&meta)?;
        Ok(IngestSummary {
            project: name.to_string(),
            received,
            bots_dropped,
            added: merged.len() - before,
            total: merged.len(),
            as_of: meta.as_of.unwrap_or_else(|| project.as_of()),
        })
    }

    pub fn ingest_jsonl(&self, name: &str, path: &Path) -> Result<IngestSummary> {
        let events = load_events_jsonl(path)?;
        let source = IngestSource {
            kind: SourceKind::JsonlFile,
            location: path.display().to_string(),
            auth_token_env: None,
        };
        self.ingest(name, events, source, None)
    }

    /// Generate a community and pin the project's as-of to the instant at
    /// which statuses match the generator's ground truth.
    pub fn ingest_synthetic(&self, name: &str, spec: &SyntheticSpec) -> Result<IngestSummary> {
        let community = generate_synthetic_community(spec)?;
        let source = IngestSource {
            kind: SourceKind::Synthetic,
            location: format!("seed={},n={}", spec.seed, spec.n_contributors),
            auth_token_env: None,
        };
        self.ingest(name, community.events, source, Some(community.as_of))
    }

    /// Fetch from a GitHub-compatible API, incrementally after the latest
    /// stored event.
    pub fn ingest_remote(&self, name: &str, repo_url: &str) -> Result<IngestSummary> {
        let source = IngestSource {
            kind: SourceKind::RemoteApi,
            location: repo_url.to_string(),
            auth_token_env: Some(self.settings.token_env.clone()),
        };
        let config = source.remote_config()?;
        let since = self.store.read_events(name)?.iter().map(|e| e.timestamp).max().unwrap_or(0);
        let report = fetch_remote_events(&config, since)?;
        self.ingest(name, report.events, source, None)
    }

    /// Run an inference plugin and store results that clear the threshold.
    /// Self-reported and corrected records are never replaced.
    pub fn infer_demographics(&self, name: &str, plugin: &dyn DemographicInference) -> Result<(usize, Vec<String>)> {
        let project = self.load_project(name)?;
        let (found, errors) = infer_project_demographics(&project, plugin, self.settings.inference_threshold);
        let mut stored = self.store.read_demographics(name)?;
        let mut added = 0;
        for (id, record) in found {
            let keep = stored.get(&id).is_some_and(|d| d.source != DemographicSource::Inferred);
            if !keep {
                stored.insert(id, record);
                added += 1;
            }
        }
        self.store.write_demographics(name, &stored)?;
        Ok((added, errors))
    }

    /// Apply a self-report or an operator correction and persist it.
    pub fn update_demographics(
        &self,
        name: &str,
        contributor_id: &str,
        update: DemographicUpdate,
        source: DemographicSource,
    ) -> Result<Contributor> {
        let mut project = self.load_project(name)?;
        let precedence = self.settings.demographic_precedence;
        let updated = match source {
            DemographicSource::SelfReported => record_self_report(&mut project, contributor_id, update, precedence)?,
            DemographicSource::Corrected => record_correction(&mut project, contributor_id, update, precedence)?,
            DemographicSource::Inferred => {
                return Err(RetainError::InvalidArgument(
                    "inferred records come from the inference plugin".into(),
                ))
            }
        };
        if let Some(d) = &updated.demographics {
            let mut stored = self.store.read_demographics(name)?;
            stored.insert(contributor_id.to_string(), d.clone());
            self.store.write_demographics(name, &stored)?;
        }
        Ok(updated)
    }

    pub fn survival_data(&self, project: &Project, feature_window_days: u32, group_by: Option<Lens>) -> Result<SurvivalData> {
        build_survival_records(project, &self.policy(project), feature_window_days, group_by)
    }

    pub fn survival_curves(&self, project: &Project, group_by: Option<Lens>) -> Result<SurvivalSummary> {
        let data = self.survival_data(project, self.settings.feature_window_days, group_by)?;
        let estimate = km_estimate(&data.records, group_by.is_some(), &[]);
        let logrank = if estimate.curves.len() == 2 {
            Some(logrank_test(&data.records)?)
        } else {
            None
        };
        Ok(SurvivalSummary { estimate, logrank })
    }

    /// Fit and persist a model for a project.
    pub fn fit(&self, name: &str, request: &FitRequest) -> Result<StoredModel> {
        let project = self.load_project(name)?;
        let window = request.feature_window_days.unwrap_or(self.settings.feature_window_days);
        let data = self.survival_data(&project, window, None)?;
        let data = match &request.features {
            Some(names) => data.select(names)?,
            None => data,
        };
        let seed = request.seed.unwrap_or(self.settings.default_seed);
        let model = fit_model(&data, request.kind, &self.settings.fit, seed)?;
        let stored = StoredModel {
            project: name.to_string(),
            feature_window_days: window,
            model,
        };
        self.store.write_model(&stored)?;
        Ok(stored)
    }

    /// Risk ranking of the model's project as it stands now.
    pub fn risk(&self, stored: &StoredModel) -> Result<Vec<RiskScore>> {
        self.risk_with(stored, &self.load_project(&stored.project)?)
    }

    /// Risk ranking over an already loaded copy of the model's project.
    pub fn risk_with(&self, stored: &StoredModel, project: &Project) -> Result<Vec<RiskScore>> {
        let data = self.survival_data(project, stored.feature_window_days, None)?;
        predict_risk(&stored.model, &data)
    }

    fn latest_risk(&self, project: &Project) -> Result<Option<Vec<RiskScore>>> {
        self.store
            .latest_model(&project.name)?
            .map(|m| self.risk_with(&m, project))
            .transpose()
    }

    pub fn report(&self, name: &str) -> Result<HealthReport> {
        self.report_for(&self.load_project(name)?)
    }

    /// Health report using the project's most recent model, if any.
    pub fn report_for(&self, project: &Project) -> Result<HealthReport> {
        let risk = self.latest_risk(project)?;
        generate_report(project, &self.policy(project), self.settings.report_period_days, risk.as_deref())
    }

    pub fn impact(&self, project: &Project) -> Result<Vec<ImpactScore>> {
        project_impact(project, self.settings.kind_weights.as_ref())
    }

    pub fn tag(&self, project: &Project, tag: &str) -> Result<TagProfile> {
        tag_distribution(project)
            .into_iter()
            .find(|p| p.tag == tag)
            .ok_or_else(|| RetainError::UnknownTag(tag.to_string()))
    }

    pub fn contributor_profile(&self, project: &Project, contributor_id: &str) -> Result<ContributorProfile> {
        let contributor = project
            .contributor(contributor_id)
            .ok_or_else(|| RetainError::UnknownContributor(contributor_id.to_string()))?
            .clone();
        let profiles = tag_distribution(project);
        let tags = profiles
            .iter()
            .filter_map(|p| p.per_contributor.get(contributor_id).map(|&n| (p.tag.clone(), n)))
            .collect();
        let impact = if project.is_empty() {
            None
        } else {
            self.impact(project)?.into_iter().find(|s| s.contributor_id == contributor_id)
        };
        let risk = self.latest_risk(project)?;
        let attrition = attrition_impact(
            contributor_id,
            &profiles,
            &at_risk_set(risk.as_deref()),
            self.settings.moderate_share,
        );
        Ok(ContributorProfile {
            contributor,
            activity: activity_history(project, contributor_id).into_iter().cloned().collect(),
            tags,
            impact,
            attrition,
        })
    }

    pub fn add_schedule(&self, name: &str, schedule: Schedule) -> Result<Vec<Schedule>> {
        self.meta(name)?;
        schedule.validate()?;
        let mut schedules = self.store.read_schedules(name)?;
        if schedules.iter().any(|s| s.schedule_id == schedule.schedule_id) {
            return Err(RetainError::DuplicateSchedule(schedule.schedule_id));
        }
        schedules.push(schedule);
        self.store.write_schedules(name, &schedules)?;
        Ok(schedules)
    }

    /// Lifecycle messages for status changes since the last run, then due
    /// schedules, then the optional per-recipient daily cap. Everything
    /// kept is written to the outbox; state is saved for the next run.
    pub fn run_engagement(&self, name: &str, now: i64) -> Result<EngagementRun> {
        let project = self.load_project(name)?;
        let previous = self.store.read_statuses(name)?;
        let transitions = status_transitions(&previous, project.contributors());
        let templates = self.store.read_templates(name)?;
        let mut sent = self.store.read_lifecycle_sent(name)?;
        let ctx = LifecycleContext {
            project: &project,
            templates: &templates,
            survey_link: &self.settings.survey_link,
            now,
        };
        let lifecycle = trigger_lifecycle_messages(&transitions, &ctx, &mut sent)?;

        let mut schedules = self.store.read_schedules(name)?;
        let mut messages = lifecycle.messages;
        if schedules.iter().any(|s| s.is_due(now).unwrap_or(false)) {
            let report = self.report_for(&project)?.to_text();
            messages.extend(run_due_schedules(&mut schedules, now, name, &report)?);
        }

        let mut dropped_by_cap = 0;
        if let Some(cap) = self.settings.daily_message_cap {
            let day = now.div_euclid(SECONDS_PER_DAY);
            let mut already: BTreeMap<String, u32> = BTreeMap::new();
            for m in self.store.read_outbox(name)? {
                if m.created_at.div_euclid(SECONDS_PER_DAY) == day {
                    *already.entry(m.recipient).or_default() += 1;
                }
            }
            let (kept, dropped) = cap_per_recipient(messages, &already, cap);
            messages = kept;
            dropped_by_cap = dropped;
        }

        let mut written = Vec::new();
        for m in messages {
            if self.store.append_outbox(name, &m)? {
                written.push(m);
            }
        }
        let statuses = project
            .contributors()
            .iter()
            .map(|c| (c.contributor_id.clone(), c.status))
            .collect();
        self.store.write_statuses(name, &statuses)?;
        self.store.write_lifecycle_sent(name, &sent)?;
        self.store.write_schedules(name, &schedules)?;
        Ok(EngagementRun {
            written,
            undeliverable: lifecycle.undeliverable,
            dropped_by_cap,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engagement::{Cadence, ReportKind, Trigger};
    use crate::ingest::write_events_jsonl;
    use crate::metrics::overview_metrics;
    use crate::model::{EventKind, Status};

    fn workspace() -> (tempfile::TempDir, Workspace) {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path()).unwrap();
        (dir, ws)
    }

    fn ev(id: &str, key: &str, day: i64) -> ContributionEvent {
        ContributionEvent {
            event_id: id.into(),
            contributor_key: key.into(),
            email: Some(format!("{key}@corp.example")),
            display_name: Some(key.to_uppercase()),
            timestamp: day * SECONDS_PER_DAY,
            kind: EventKind::Commit,
            repo: "https://example.org/r".into(),
            tags: vec!["docs".into()],
        }
    }

    #[test]
    fn jsonl_ingest_is_idempotent_and_drops_bots() {
        let (dir, ws) = workspace();
        let path = dir.path().join("in.jsonl");
        write_events_jsonl(&path, &[ev("1", "ann", 1), ev("2", "ci[bot]", 2), ev("3", "bo", 400)]).unwrap();
        let first = ws.ingest_jsonl("p", &path).unwrap();
        assert_eq!((first.received, first.bots_dropped, first.added, first.total), (3, 1, 2, 2));
        let again = ws.ingest_jsonl("p", &path).unwrap();
        assert_eq!((again.added, again.total), (0, 2));
        assert_eq!(ws.store.read_meta("p").unwrap().unwrap().sources.len(), 1);
        let p = ws.load_project("p").unwrap();
        assert_eq!(p.contributor_for_key("ann").unwrap().status, Status::Departed);
        assert_eq!(p.contributor_for_key("ann").unwrap().affiliation, "corp.example");
    }

    #[test]
    fn unknown_and_empty_projects() {
        let (_dir, ws) = workspace();
        assert!(matches!(ws.load_project("nope"), Err(RetainError::UnknownProject(_))));
        let p = ws.load_project_or_empty("nope").unwrap();
        let m = overview_metrics(&p, &ws.policy(&p), 0, 1).unwrap();
        assert_eq!(m.total_count, 0);
    }

    #[test]
    fn engagement_run_is_exactly_once() {
        let (_dir, ws) = workspace();
        ws.store
            .write_meta(&ProjectMeta {
                name: "p".into(),
                as_of: Some(500 * SECONDS_PER_DAY),
                ..Default::default()
            })
            .unwrap();
        ws.store
            .write_events("p", &[ev("1", "ann", 10), ev("2", "bo", 450), ev("3", "cy", 400), ev("4", "cy", 499)])
            .unwrap();
        ws.add_schedule(
            "p",
            Schedule {
                schedule_id: "weekly".into(),
                report: ReportKind::Health,
                cadence: Cadence::Daily,
                at_utc: "00:00".into(),
                recipients: vec!["lead@corp.example".into()],
                enabled: true,
                last_run: None,
            },
        )
        .unwrap();
        let now = 500 * SECONDS_PER_DAY + 60;
        let run = ws.run_engagement("p", now).unwrap();
        let triggers: Vec<Trigger> = run.written.iter().map(|m| m.trigger).collect();
        assert!(triggers.contains(&Trigger::Departure));
        assert!(triggers.contains(&Trigger::Newcomer));
        assert!(triggers.contains(&Trigger::Schedule));
        let again = ws.run_engagement("p", now).unwrap();
        assert!(again.written.is_empty(), "{:?}", again.written);
        assert_eq!(ws.store.read_outbox("p").unwrap().len(), run.written.len());
    }

    #[test]
    fn daily_cap_limits_messages() {
        let (_dir, mut ws) = workspace();
        ws.settings.daily_message_cap = Some(1);
        ws.store
            .write_meta(&ProjectMeta {
                name: "p".into(),
                as_of: Some(500 * SECONDS_PER_DAY),
                ..Default::default()
            })
            .unwrap();
        ws.store.write_events("p", &[ev("1", "ann", 450)]).unwrap();
        for id in ["a", "b"] {
            ws.add_schedule(
                "p",
                Schedule {
                    schedule_id: id.into(),
                    report: ReportKind::Health,
                    cadence: Cadence::Daily,
                    at_utc: "00:00".into(),
                    recipients: vec!["lead@corp.example".into()],
                    enabled: true,
                    last_run: None,
                },
            )
            .unwrap();
        }
        let run = ws.run_engagement("p", 500 * SECONDS_PER_DAY).unwrap();
        let to_lead = run.written.iter().filter(|m| m.recipient == "lead@corp.example").count();
        assert_eq!(to_lead, 1);
        assert_eq!(run.dropped_by_cap, 1);
    }

    #[test]
    fn self_report_persists_across_loads() {
        let (_dir, ws) = workspace();
        ws.store.write_meta(&ProjectMeta { name: "p".into(), ..Default::default() }).unwrap();
        ws.store.write_events("p", &[ev("1", "ann", 1)]).unwrap();
        let id = ws.load_project("p").unwrap().contributors()[0].contributor_id.clone();
        let update = DemographicUpdate {
            gender: Some("female".into()),
            region: None,
        };
        ws.update_demographics("p", &id, update, DemographicSource::SelfReported).unwrap();
        let c = ws.load_project("p").unwrap().contributor(&id).unwrap().clone();
        let d = c.demographics.unwrap();
        assert_eq!(d.gender.as_deref(), Some("female"));
        assert_eq!(d.source, DemographicSource::SelfReported);
    }

    #[test]
    fn fit_and_risk_round_trip() {
        let (_dir, ws) = workspace();
        let spec = SyntheticSpec::two_groups(7, 60, 365, ("a", 0.001), ("b", 0.01));
        ws.ingest_synthetic("syn", &spec).unwrap();
        let stored = ws
            .fit(
                "syn",
                &FitRequest {
                    kind: ModelKind::Cox,
                    features: Some(vec!["total_events".into(), "active_weeks".into()]),
                    ..Default::default()
                },
            )
            .unwrap();
        assert_eq!(ws.store.read_model(&stored.model.model_id).unwrap(), stored);
        let risk = ws.risk(&stored).unwrap();
        assert_eq!(risk.len(), 60);
        assert_eq!(risk[0].rank, 1);
        let report = ws.report("syn").unwrap();
        assert!(report.at_risk.is_some());
    }
}
