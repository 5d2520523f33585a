//! Directory-backed persistence. Every document is replaced atomically by
//! writing a sibling temp file and renaming it over the target.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::engagement::{default_templates, MessageTemplate, OutboxMessage, Schedule, Trigger};
use crate::error::{RetainError, Result};
use crate::ingest::{load_events_jsonl, write_events_jsonl, IngestSource};
use crate::model::{ContributionEvent, Demographics, MergeHint, Status};
use crate::survival::FittedModel;

static TMP_SEQ: AtomicU64 = AtomicU64::new(0);

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| RetainError::io(parent, e))?;
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let seq = TMP_SEQ.fetch_add(1, Ordering::Relaxed);
    let tmp: PathBuf = path.with_file_name(format!(".{file_name}.{}.{seq}.tmp", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| RetainError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| RetainError::io(&tmp, e))?;
    f.sync_all().map_err(|e| RetainError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| RetainError::io(path, e))
}

pub const DOCUMENT_VERSION: u32 = 1;

/// On-disk envelope for persisted documents.
#[derive(Debug, Serialize, Deserialize)]
pub struct Document<T> {
    pub version: u32,
    pub data: T,
}

pub fn write_document<T: Serialize>(path: &Path, data: &T) -> Result<()> {
    let doc = Document {
        version: DOCUMENT_VERSION,
        data,
    };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Read a versioned document; `None` when the file does not exist.
pub fn read_document<T: DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(RetainError::io(path, e)),
    };
    let doc: Document<T> = serde_json::from_str(&text)?;
    if doc.version != DOCUMENT_VERSION {
        return Err(RetainError::ModelVersion(doc.version));
    }
    Ok(Some(doc.data))
}

/// Names used as path components: letters, digits, `-`, `_`, `.`, not
/// starting with a dot.
pub fn validate_name(kind: &str, name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name.len() <= 128
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(RetainError::InvalidArgument(format!("invalid {kind} name `{name}`")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProjectMeta {
    pub name: String,
    /// Observation instant; latest event when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub as_of: Option<i64>,
    #[serde(default)]
    pub merge_hints: Vec<MergeHint>,
    #[serde(default)]
    pub sources: Vec<IngestSource>,
}

/// A fitted model together with what is needed to score contributors again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredModel {
    pub project: String,
    pub feature_window_days: u32,
    pub model: FittedModel,
}

/// Directory layout:
///
/// ```text
/// {root}/projects/{p}/project.json
/// {root}/projects/{p}/events.jsonl
/// {root}/projects/{p}/demographics.json
/// {root}/projects/{p}/schedules.json
/// {root}/projects/{p}/templates.json
/// {root}/projects/{p}/statuses.json
/// {root}/projects/{p}/lifecycle_sent.json
/// {root}/projects/{p}/outbox/{created_at}-{message_id}.json
/// {root}/models/{model_id}.json
/// ```
#[derive(Debug, Clone)]
pub struct ProjectStore {
    root: PathBuf,
}

impl ProjectStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ProjectStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn project_dir(&self, project: &str) -> Result<PathBuf> {
        validate_name("project", project)?;
        Ok(self.root.join("projects").join(project))
    }

    pub fn list_projects(&self) -> Result<Vec<String>> {
        let dir = self.root.join("projects");
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(vec![]),
            Err(e) => return Err(RetainError::io(&dir, e)),
        };
        let mut names = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| RetainError::io(&dir, e))?;
            if entry.path().join("project.json").is_file() {
                names.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        names.sort();
        Ok(names)
    }

    pub fn project_exists(&self, project: &str) -> Result<bool> {
        Ok(self.project_dir(project)?.join("project.json").is_file())
    }

    pub fn read_meta(&self, project: &str) -> Result<Option<ProjectMeta>> {
        read_document(&self.project_dir(project)?.join("project.json"))
    }

    pub fn write_meta(&self, meta: &ProjectMeta) -> Result<()> {
        write_document(&self.project_dir(&meta.name)?.join("project.json"), meta)
    }

    pub fn read_events(&self, project: &str) -> Result<Vec<ContributionEvent>> {
        let path = self.project_dir(project)?.join("events.jsonl");
        if !path.exists() {
            return Ok(vec![]);
        }
        load_events_jsonl(&path)
    }

    pub fn write_events(&self, project: &str, events: &[ContributionEvent]) -> Result<()> {
        write_events_jsonl(self.project_dir(project)?.join("events.jsonl"), events)
    }

    pub fn read_demographics(&self, project: &str) -> Result<BTreeMap<String, Demographics>> {
        Ok(read_document(&self.project_dir(project)?.join("demographics.json"))?.unwrap_or_default())
    }

    pub fn write_demographics(&self, project: &str, records: &BTreeMap<String, Demographics>) -> Result<()> {
        write_document(&self.project_dir(project)?.join("demographics.json"), records)
    }

    pub fn read_schedules(&self, project: &str) -> Result<Vec<Schedule>> {
        Ok(read_document(&self.project_dir(project)?.join("schedules.json"))?.unwrap_or_default())
    }

    pub fn write_schedules(&self, project: &str, schedules: &[Schedule]) -> Result<()> {
        write_document(&self.project_dir(project)?.join("schedules.json"), &schedules)
    }

    /// Stored templates, or the built-in set when none were saved.
    pub fn read_templates(&self, project: &str) -> Result<Vec<MessageTemplate>> {
        let stored: Option<Vec<MessageTemplate>> = read_document(&self.project_dir(project)?.join("templates.json"))?;
        Ok(stored.unwrap_or_else(default_templates))
    }

    pub fn write_templates(&self, project: &str, templates: &[MessageTemplate]) -> Result<()> {
        for t in templates {
            t.validate()?;
        }
        write_document(&self.project_dir(project)?.join("templates.json"), &templates)
    }

    /// Statuses as of the last lifecycle run.
    pub fn read_statuses(&self, project: &str) -> Result<BTreeMap<String, Status>> {
        Ok(read_document(&self.project_dir(project)?.join("statuses.json"))?.unwrap_or_default())
    }

    pub fn write_statuses(&self, project: &str, statuses: &BTreeMap<String, Status>) -> Result<()> {
        write_document(&self.project_dir(project)?.join("statuses.json"), statuses)
    }

    pub fn read_lifecycle_sent(&self, project: &str) -> Result<BTreeSet<(String, Trigger)>> {
        Ok(read_document(&self.project_dir(project)?.join("lifecycle_sent.json"))?.unwrap_or_default())
    }

    pub fn write_lifecycle_sent(&self, project: &str, sent: &BTreeSet<(String, Trigger)>) -> Result<()> {
        write_document(&self.project_dir(project)?.join("lifecycle_sent.json"), sent)
    }

    fn outbox_dir(&self, project: &str) -> Result<PathBuf> {
        Ok(self.project_dir(project)?.join("outbox"))
    }

    /// Write a message unless a message with the same file name exists.
    /// Returns whether a new file was written.
    pub fn append_outbox(&self, project: &str, message: &OutboxMessage) -> Result<bool> {
        validate_name("message", &message.message_id)?;
        let path = self
            .outbox_dir(project)?
            .join(format!("{}-{}.json", message.created_at, message.message_id));
        if path.exists() {
            return Ok(false);
        }
        let mut text = serde_json::to_string_pretty(message)?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(true)
    }

    /// Outbox messages ordered by file name (creation time, then id).
    pub fn read_outbox(&self, project: &str) -> Result<Vec<OutboxMessage>> {
        let dir = self.outbox_dir(project)?;
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(vec![]),
            Err(e) => return Err(RetainError::io(&dir, e)),
        };
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension().is_some_and(|x| x == "json")
                    && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.'))
            })
            .collect();
        paths.sort();
        paths
            .iter()
            .map(|p| {
                let text = fs::read_to_string(p).map_err(|e| RetainError::io(p, e))?;
                Ok(serde_json::from_str(&text)?)
            })
            .collect()
    }

    fn model_path(&self, model_id: &str) -> Result<PathBuf> {
        validate_name("model", model_id)?;
        Ok(self.root.join("models").join(format!("{model_id}.json")))
    }

    pub fn write_model(&self, stored: &StoredModel) -> Result<()> {
        write_document(&self.model_path(&stored.model.model_id)?, stored)
    }

    pub fn read_model(&self, model_id: &str) -> Result<StoredModel> {
        read_document(&self.model_path(model_id)?)?.ok_or_else(|| RetainError::UnknownModel(model_id.to_string()))
    }

    pub fn list_models(&self) -> Result<Vec<String>> {
        let dir = self.root.join("models");
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(vec![]),
            Err(e) => return Err(RetainError::io(&dir, e)),
        };
        let mut ids: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_string_lossy().strip_suffix(".json").map(str::to_string))
            .filter(|n| !n.starts_with('.'))
            .collect();
        ids.sort();
        Ok(ids)
    }

    /// Most recently written model for a project, if any.
    pub fn latest_model(&self, project: &str) -> Result<Option<StoredModel>> {
        let mut best: Option<(std::time::SystemTime, StoredModel)> = None;
        for id in self.list_models()? {
            let path = self.model_path(&id)?;
            let stored = self.read_model(&id)?;
            if stored.project != project {
                continue;
            }
            let modified = fs::metadata(&path)
                .and_then(|m| m.modified())
                .map_err(|e| RetainError::io(&path, e))?;
            if best.as_ref().is_none_or(|(t, _)| modified >= *t) {
                best = Some((modified, stored));
            }
        }
        Ok(best.map(|(_, m)| m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engagement::{Cadence, ReportKind};
    use crate::model::{DemographicSource, EventKind};

    #[test]
    fn names_reject_traversal() {
        for bad in ["", "..", "../x", "a/b", ".hidden", "a b"] {
            assert!(validate_name("project", bad).is_err(), "{bad}");
        }
        assert!(validate_name("project", "my-proj_1.0").is_ok());
    }

    #[test]
    fn documents_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = ProjectStore::new(dir.path());
        assert!(store.list_projects().unwrap().is_empty());
        let meta = ProjectMeta {
            name: "p".into(),
            as_of: Some(99),
            merge_hints: vec![MergeHint::new("a", "b")],
            sources: vec![],
        };
        store.write_meta(&meta).unwrap();
        assert_eq!(store.read_meta("p").unwrap(), Some(meta));
        assert_eq!(store.list_projects().unwrap(), vec!["p"]);

        let events = vec![ContributionEvent {
            event_id: "e1".into(),
            contributor_key: "a".into(),
            email: None,
            display_name: None,
            timestamp: 5,
            kind: EventKind::Commit,
            repo: "r".into(),
            tags: vec![],
        }];
        store.write_events("p", &events).unwrap();
        assert_eq!(store.read_events("p").unwrap(), events);

        let demo = BTreeMap::from([(
            "c-1".to_string(),
            Demographics {
                gender: None,
                region: Some("x".into()),
                confidence: 1.0,
                source: DemographicSource::SelfReported,
            },
        )]);
        store.write_demographics("p", &demo).unwrap();
        assert_eq!(store.read_demographics("p").unwrap(), demo);

        let s = vec![Schedule {
            schedule_id: "weekly".into(),
            report: ReportKind::Health,
            cadence: Cadence::Weekly,
            at_utc: "09:00".into(),
            recipients: vec!["a@b.c".into()],
            enabled: true,
            last_run: None,
        }];
        store.write_schedules("p", &s).unwrap();
        assert_eq!(store.read_schedules("p").unwrap(), s);
        assert_eq!(store.read_templates("p").unwrap(), default_templates());
    }

    #[test]
    fn outbox_is_append_only() {
        let dir = tempfile::tempdir().unwrap();
        let store = ProjectStore::new(dir.path());
        let m = OutboxMessage {
            message_id: "m-1".into(),
            subject: "s".into(),
            body: "b".into(),
            recipient: "r@x.y".into(),
            created_at: 10,
            trigger: Trigger::Manual,
        };
        assert!(store.append_outbox("p", &m).unwrap());
        let changed = OutboxMessage { body: "other".into(), ..m.clone() };
        assert!(!store.append_outbox("p", &changed).unwrap());
        assert_eq!(store.read_outbox("p").unwrap(), vec![m]);
        assert!(dir.path().join("projects/p/outbox/10-m-1.json").is_file());
    }

    #[test]
    fn missing_model_is_unknown() {
        let dir = tempfile::tempdir().unwrap();
        let store = ProjectStore::new(dir.path());
        assert!(matches!(store.read_model("nope"), Err(RetainError::UnknownModel(_))));
        assert!(store.read_model("../etc").is_err());
    }

    #[test]
    fn future_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        fs::write(&path, r#"{"version": 7, "data": 1}"#).unwrap();
        assert!(matches!(read_document::<i32>(&path), Err(RetainError::ModelVersion(7))));
    }
}
