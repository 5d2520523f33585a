//! Paged fetching from a GitHub REST v3-compatible API.
//!
//! One worker per endpoint category; pages follow the `Link: rel="next"`
//! header. Rate-limited responses (403/429 with an exhausted quota or a
//! `Retry-After`) sleep until the advertised reset. Server errors are retried
//! with exponential backoff.

use std::collections::BTreeMap;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use chrono::{DateTime, TimeZone, Utc};
use serde_json::Value;

use crate::error::{RetainError, Result};
use crate::model::{ContributionEvent, EventKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Endpoint {
    Commits,
    Pulls,
    PullComments,
    Issues,
    IssueComments,
}

impl Endpoint {
    pub const ALL: [Endpoint; 5] = [
        Endpoint::Commits,
        Endpoint::Pulls,
        Endpoint::PullComments,
        Endpoint::Issues,
        Endpoint::IssueComments,
    ];

    pub fn path(self) -> &'static str {
        match self {
            Endpoint::Commits => "commits",
            Endpoint::Pulls => "pulls",
            Endpoint::PullComments => "pulls/comments",
            Endpoint::Issues => "issues",
            Endpoint::IssueComments => "issues/comments",
        }
    }

    fn kind(self) -> EventKind {
        match self {
            Endpoint::Commits => EventKind::Commit,
            Endpoint::Pulls => EventKind::PrOpened,
            Endpoint::PullComments => EventKind::PrReview,
            Endpoint::Issues => EventKind::IssueOpened,
            Endpoint::IssueComments => EventKind::IssueComment,
        }
    }

    fn supports_since(self) -> bool {
        !matches!(self, Endpoint::Pulls)
    }
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    /// Repository base URL, e.g. `https://api.github.com/repos/flutter/flutter`.
    pub repo_url: String,
    pub token: Option<String>,
    pub max_retries: u32,
    pub backoff_base: Duration,
    pub max_rate_limit_wait: Duration,
    pub timeout: Duration,
}

impl RemoteConfig {
    pub fn new(repo_url: impl Into<String>) -> Self {
        RemoteConfig {
            repo_url: repo_url.into().trim_end_matches('/').to_string(),
            token: None,
            max_retries: 3,
            backoff_base: Duration::from_secs(1),
            max_rate_limit_wait: Duration::from_secs(3_600),
            timeout: Duration::from_secs(60),
        }
    }

    /// `owner/repo` taken from the last two path segments.
    pub fn repo_name(&self) -> String {
        let parts: Vec<&str> = self.repo_url.rsplit('/').take(2).collect();
        match parts.as_slice() {
            [repo, owner] => format!("{owner}/{repo}"),
            _ => self.repo_url.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FetchReport {
    pub events: Vec<ContributionEvent>,
    pub pages: BTreeMap<&'static str, u32>,
    pub retries: u32,
}

struct Page {
    items: Vec<Value>,
    next: Option<String>,
}

struct Fetcher<'a> {
    agent: ureq::Agent,
    config: &'a RemoteConfig,
}

fn header<'r>(resp: &'r ureq::http::Response<ureq::Body>, name: &str) -> Option<&'r str> {
    resp.headers().get(name).and_then(|v| v.to_str().ok())
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Extract the `rel="next"` target from a `Link` header.
pub fn next_link(link: &str) -> Option<String> {
    link.split(',').find_map(|part| {
        let mut pieces = part.split(';');
        let url = pieces.next()?.trim();
        let is_next = pieces.any(|p| p.trim().replace(' ', "") == "rel=\"next\"");
        (is_next && url.starts_with('<') && url.ends_with('>'))
            .then(|| url[1..url.len() - 1].to_string())
    })
}

impl Fetcher<'_> {
    fn get_page(&self, url: &str, endpoint: Endpoint, retries: &mut u32) -> Result<Page> {
        let name = endpoint.path();
        let mut server_failures = 0;
        let mut rate_waits = 0;
        loop {
            let mut req = self
                .agent
                .get(url)
                .header("Accept", "application/vnd.github+json")
                .header("User-Agent", "retain");
            if let Some(token) = &self.config.token {
                req = req.header("Authorization", format!("Bearer {token}"));
            }
            let outcome = req.call();
            let retry_after_failure = |failures: &mut u32, retries: &mut u32, message: String| {
                if *failures >= self.config.max_retries {
                    return Err(RetainError::Transport {
                        endpoint: name.to_string(),
                        message,
                    });
                }
                std::thread::sleep(self.config.backoff_base * 2u32.pow(*failures));
                *failures += 1;
                *retries += 1;
                Ok(())
            };
            let mut resp = match outcome {
                Ok(resp) => resp,
                Err(e) => {
                    retry_after_failure(&mut server_failures, retries, e.to_string())?;
                    continue;
                }
            };
            let status = resp.status().as_u16();
            match status {
                200..=299 => {}
                401 => {
                    return Err(RetainError::Auth {
                        status,
                        endpoint: name.to_string(),
                    })
                }
                403 | 429 => {
                    let exhausted = header(&resp, "x-ratelimit-remaining") == Some("0");
                    let retry_after = header(&resp, "retry-after").and_then(|v| v.trim().parse::<u64>().ok());
                    if !(exhausted || retry_after.is_some()) || rate_waits >= self.config.max_retries {
                        return Err(RetainError::Auth {
                            status,
                            endpoint: name.to_string(),
                        });
                    }
                    let wait = match retry_after {
                        Some(secs) => Duration::from_secs(secs),
                        None => {
                            let reset = header(&resp, "x-ratelimit-reset")
                                .and_then(|v| v.trim().parse::<u64>().ok())
                                .unwrap_or(0);
                            Duration::from_secs(reset.saturating_sub(now_secs()))
                        }
                    };
                    let wait = wait.min(self.config.max_rate_limit_wait);
                    tracing::warn!(endpoint = name, ?wait, "rate limited, sleeping until reset");
                    std::thread::sleep(wait);
                    rate_waits += 1;
                    *retries += 1;
                    continue;
                }
                500..=599 => {
                    retry_after_failure(&mut server_failures, retries, format!("HTTP {status}"))?;
                    continue;
                }
                _ => {
                    return Err(RetainError::Transport {
                        endpoint: name.to_string(),
                        message: format!("unexpected HTTP {status}"),
                    })
                }
            }
            let next = header(&resp, "link").and_then(next_link);
            let body = resp.body_mut().read_to_string().map_err(|e| RetainError::Transport {
                endpoint: name.to_string(),
                message: e.to_string(),
            })?;
            let value: Value = serde_json::from_str(&body).map_err(|e| RetainError::Parse {
                endpoint: name.to_string(),
                message: e.to_string(),
            })?;
            let Value::Array(items) = value else {
                return Err(RetainError::Parse {
                    endpoint: name.to_string(),
                    message: "expected a JSON array".into(),
                });
            };
            return Ok(Page { items, next });
        }
    }

    fn fetch_endpoint(&self, endpoint: Endpoint, since: i64) -> Result<EndpointFetch> {
        let mut url = format!("{}/{}?per_page=100", self.config.repo_url, endpoint.path());
        if matches!(endpoint, Endpoint::Pulls | Endpoint::Issues) {
            url.push_str("&state=all");
        }
        if endpoint.supports_since() && since > 0 {
            let stamp = Utc
                .timestamp_opt(since, 0)
                .single()
                .map(|d| d.format("%Y-%m-%dT%H:%M:%SZ").to_string())
                .unwrap_or_default();
            url.push_str(&format!("&since={stamp}"));
        }
        let repo = self.config.repo_name();
        let mut events = Vec::new();
        let (mut pages, mut retries) = (0, 0);
        let mut next = Some(url);
        while let Some(url) = next {
            let page = self.get_page(&url, endpoint, &mut retries)?;
            pages += 1;
            for item in &page.items {
                if let Some(e) = map_item(endpoint, item, &repo)? {
                    events.push(e);
                }
            }
            next = page.next;
        }
        Ok((events, pages, retries))
    }
}

fn field<'v>(item: &'v Value, path: &[&str]) -> Option<&'v Value> {
    path.iter()
        .try_fold(item, |v, key| v.get(key))
        .filter(|v| !v.is_null())
}

fn str_field<'v>(item: &'v Value, path: &[&str]) -> Option<&'v str> {
    field(item, path).and_then(Value::as_str)
}

fn required<'v>(item: &'v Value, path: &[&str], endpoint: Endpoint) -> Result<&'v Value> {
    field(item, path).ok_or_else(|| RetainError::Parse {
        endpoint: endpoint.path().to_string(),
        message: format!("missing required field `{}`", path.join(".")),
    })
}

fn parse_time(raw: &str, endpoint: Endpoint) -> Result<i64> {
    DateTime::parse_from_rfc3339(raw)
        .map(|d| d.timestamp())
        .map_err(|e| RetainError::Parse {
            endpoint: endpoint.path().to_string(),
            message: format!("bad timestamp `{raw}`: {e}"),
        })
}

fn id_string(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn labels(item: &Value) -> Vec<String> {
    let mut out: Vec<String> = field(item, &["labels"])
        .and_then(Value::as_array)
        .map(|ls| {
            ls.iter()
                .filter_map(|l| l.get("name").and_then(Value::as_str).map(str::to_string))
                .collect()
        })
        .unwrap_or_default();
    out.sort();
    out.dedup();
    out
}

/// Map one API item onto an event. Issues that are really pull requests are
/// skipped (the pulls endpoint already covers them).
fn map_item(endpoint: Endpoint, item: &Value, repo: &str) -> Result<Option<ContributionEvent>> {
    let kind = endpoint.kind();
    let event = match endpoint {
        Endpoint::Commits => {
            let sha = id_string(required(item, &["sha"], endpoint)?);
            let date = required(item, &["commit", "author", "date"], endpoint)?
                .as_str()
                .unwrap_or_default();
            let email = str_field(item, &["commit", "author", "email"]).map(str::to_string);
            let name = str_field(item, &["commit", "author", "name"]).map(str::to_string);
            let key = str_field(item, &["author", "login"])
                .map(str::to_string)
                .or_else(|| email.clone())
                .or_else(|| name.clone())
                .ok_or_else(|| RetainError::Parse {
                    endpoint: endpoint.path().to_string(),
                    message: format!("commit {sha} has no author identity"),
                })?;
            ContributionEvent {
                event_id: format!("{repo}#commit:{sha}"),
                contributor_key: key,
                email,
                display_name: name,
                timestamp: parse_time(date, endpoint)?,
                kind,
                repo: repo.to_string(),
                tags: vec![],
            }
        }
        _ => {
            if endpoint == Endpoint::Issues && field(item, &["pull_request"]).is_some() {
                return Ok(None);
            }
            let id_path: &[&str] = match endpoint {
                Endpoint::Pulls | Endpoint::Issues => &["number"],
                _ => &["id"],
            };
            let id = id_string(required(item, id_path, endpoint)?);
            let login = required(item, &["user", "login"], endpoint)?
                .as_str()
                .unwrap_or_default()
                .to_string();
            let created = required(item, &["created_at"], endpoint)?
                .as_str()
                .unwrap_or_default();
            ContributionEvent {
                event_id: format!("{repo}#{}:{id}", kind.as_str()),
                contributor_key: login,
                email: None,
                display_name: str_field(item, &["user", "name"]).map(str::to_string),
                timestamp: parse_time(created, endpoint)?,
                kind,
                repo: repo.to_string(),
                tags: labels(item),
            }
        }
    };
    Ok(Some(event))
}

/// Fetch every event newer than `since` (UTC seconds) from all endpoint
/// categories, de-duplicated by event id and sorted by time.
/// Events from one endpoint plus its page and retry counts.
type EndpointFetch = (Vec<ContributionEvent>, u32, u32);

pub fn fetch_remote_events(config: &RemoteConfig, since: i64) -> Result<FetchReport> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(config.timeout))
        .build()
        .into();
    let fetcher = Fetcher { agent, config };
    let results: Vec<(Endpoint, Result<EndpointFetch>)> =
        std::thread::scope(|scope| {
            let handles: Vec<_> = Endpoint::ALL
                .iter()
                .map(|&ep| {
                    let f = &fetcher;
                    (ep, scope.spawn(move || f.fetch_endpoint(ep, since)))
                })
                .collect();
            handles
                .into_iter()
                .map(|(ep, h)| (ep, h.join().expect("fetch worker panicked")))
                .collect()
        });

    let mut report = FetchReport::default();
    let mut merged: BTreeMap<String, ContributionEvent> = BTreeMap::new();
    for (endpoint, result) in results {
        let (events, pages, retries) = result?;
        report.pages.insert(endpoint.path(), pages);
        report.retries += retries;
        for e in events.into_iter().filter(|e| e.timestamp > since) {
            merged.entry(e.event_id.clone()).or_insert(e);
        }
    }
    report.events = merged.into_values().collect();
    report
        .events
        .sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.event_id.cmp(&b.event_id)));
    Ok(report)
}
