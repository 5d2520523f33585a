#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use retain_core::config::Settings;
use retain_core::ingest::SyntheticSpec;
use retain_core::model::{DemographicSource, Demographics};
use retain_core::store::ProjectStore;
use retain_core::workflow::Workspace;
use retain_service::accounts::Accounts;
use retain_service::{router, AppState};
use serde_json::Value;
use tower::ServiceExt;

pub const PROJECT: &str = "demo";
pub const ADMIN: (&str, &str) = ("root", "root-password-1");
pub const MANAGER: (&str, &str) = ("mia", "manager-password");
pub const PENDING: (&str, &str) = ("pat", "pending-password");
/// Distinctive demographic values planted in the fixture so a leak shows up
/// as a plain substring.
pub const GENDER_MARK: &str = "gender-marker-q7";
pub const REGION_MARK: &str = "region-marker-z3";
pub const AFFILIATION_MARKS: [&str; 2] = ["steady.example", "volatile.example"];

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub clock: Arc<AtomicI64>,
    pub state: Arc<AppState>,
    pub app: Router,
    pub admin: String,
    pub manager: String,
    pub expired: String,
    pub contributor_ids: Vec<String>,
}

pub fn settings() -> Settings {
    let mut s = Settings::default();
    s.service.password_iterations = 64;
    s.service.scheduler_interval_secs = 0;
    s.fit.min_records = 10;
    s.fit.rsf.n_trees = 10;
    s
}

pub fn state_for(dir: &std::path::Path, clock: &Arc<AtomicI64>) -> Arc<AppState> {
    let c = Arc::clone(clock);
    let ws = Workspace::new(settings(), ProjectStore::new(dir));
    AppState::new(ws, Arc::new(move || c.load(Ordering::SeqCst))).unwrap()
}

pub async fn call(app: &Router, method: &str, uri: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

pub async fn login(app: &Router, (user, pw): (&str, &str)) -> (StatusCode, Value) {
    call(app, "POST", "/api/auth/login", None, Some(serde_json::json!({"login": user, "password": pw}))).await
}

/// A synthetic project with planted demographics, an admin, an approved
/// manager, a pending signup, and a session that has since expired.
pub async fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(AtomicI64::new(1_700_000_000));
    let ws = Workspace::new(settings(), ProjectStore::new(dir.path()));
    let mut spec = SyntheticSpec::two_groups(11, 80, 365, ("steady", 0.001), ("volatile", 0.01));
    spec.events_per_active_week = 1.0;
    ws.ingest_synthetic(PROJECT, &spec).unwrap();
    let project = ws.load_project(PROJECT).unwrap();
    let contributor_ids: Vec<String> = project.contributors().iter().map(|c| c.contributor_id.clone()).collect();
    let demographics: BTreeMap<String, Demographics> = contributor_ids
        .iter()
        .step_by(2)
        .map(|id| {
            (
                id.clone(),
                Demographics {
                    gender: Some(GENDER_MARK.into()),
                    region: Some(REGION_MARK.into()),
                    confidence: 0.95,
                    source: DemographicSource::Inferred,
                },
            )
        })
        .collect();
    ws.store.write_demographics(PROJECT, &demographics).unwrap();
    {
        let mut accounts = Accounts::open(dir.path(), &settings().service).unwrap();
        accounts.init_admin(ADMIN.0, ADMIN.1, 0).unwrap();
    }

    let state = state_for(dir.path(), &clock);
    let app = router(Arc::clone(&state));
    let admin = token(&login(&app, ADMIN).await.1);

    // an admin session issued 25 hours ago
    let now = clock.load(Ordering::SeqCst);
    clock.store(now - 25 * 3600, Ordering::SeqCst);
    let expired = token(&login(&app, ADMIN).await.1);
    clock.store(now, Ordering::SeqCst);

    for creds in [MANAGER, PENDING] {
        let (status, _) = call(
            &app,
            "POST",
            "/api/auth/signup",
            None,
            Some(serde_json::json!({"login": creds.0, "password": creds.1})),
        )
        .await;
        assert_eq!(status, StatusCode::CREATED);
    }
    let (_, pending) = call(&app, "GET", "/api/admin/pending", Some(&admin), None).await;
    let mia = pending
        .as_array()
        .unwrap()
        .iter()
        .find(|a| a["login"] == MANAGER.0)
        .unwrap()["account_id"]
        .clone();
    let (status, _) = call(&app, "POST", "/api/admin/approve", Some(&admin), Some(serde_json::json!({"account_id": mia}))).await;
    assert_eq!(status, StatusCode::OK);
    let manager = token(&login(&app, MANAGER).await.1);

    Fixture {
        dir,
        clock,
        state,
        app,
        admin,
        manager,
        expired,
        contributor_ids,
    }
}

pub fn token(grant: &Value) -> String {
    grant["token"].as_str().expect("login grant has a token").to_string()
}

/// Every object key anywhere in `v`.
pub fn keys(v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                out.push(k.clone());
                keys(x, out);
            }
        }
        Value::Array(a) => a.iter().for_each(|x| keys(x, out)),
        _ => {}
    }
}

/// Demographic content found in a response: redacted keys or planted
/// values.
pub fn leaks(v: &Value) -> Vec<String> {
    let mut found = Vec::new();
    let mut ks = Vec::new();
    keys(v, &mut ks);
    for k in ks {
        if retain_service::access::REDACTED_KEYS.contains(&k.as_str()) {
            found.push(format!("key `{k}`"));
        }
    }
    let text = v.to_string();
    for mark in [GENDER_MARK, REGION_MARK].iter().chain(AFFILIATION_MARKS.iter()) {
        if text.contains(mark) {
            found.push(format!("value `{mark}`"));
        }
    }
    found
}
