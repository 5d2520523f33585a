mod common;

use std::sync::atomic::Ordering;
use std::sync::{Arc, Mutex};

use axum::http::StatusCode;
use common::*;
use serde_json::{json, Value};

#[tokio::test]
async fn signup_and_approval_flow() {
    let f = fixture().await;
    let app = &f.app;

    let (s, body) = call(app, "POST", "/api/auth/signup", None, Some(json!({"login": MANAGER.0, "password": "another password"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(body["code"], "conflict");

    let (s, body) = call(app, "POST", "/api/auth/signup", None, Some(json!({"login": "sam", "password": "short"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(body["code"], "validation");

    let (s, body) = login(app, PENDING).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    assert_eq!(body["message"], "awaiting approval");

    // a pending user has no session, so protected endpoints see no caller
    let (s, _) = call(app, "GET", &format!("/api/projects/{PROJECT}/distribution?lens=gender"), None, None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);

    let (s, body) = login(app, (PENDING.0, "wrong password!")).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    assert_eq!(body["message"], "invalid credentials");
    let (_, unknown) = login(app, ("nobody-here", "wrong password!")).await;
    assert_eq!(unknown, body, "unknown logins must look like wrong passwords");

    let (_, pending) = call(app, "GET", "/api/admin/pending", Some(&f.admin), None).await;
    let pat = pending[0]["account_id"].clone();
    assert_eq!(pending[0]["login"], PENDING.0);
    assert!(pending[0].get("password_hash").is_none());

    let (s, _) = call(app, "GET", "/api/admin/pending", Some(&f.manager), None).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    let (s, _) = call(app, "POST", "/api/admin/approve", Some(&f.manager), Some(json!({"account_id": pat}))).await;
    assert_eq!(s, StatusCode::FORBIDDEN);

    let (s, approved) = call(app, "POST", "/api/admin/approve", Some(&f.admin), Some(json!({"account_id": pat}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(approved["role"], "manager");
    let (s, body) = call(app, "POST", "/api/admin/approve", Some(&f.admin), Some(json!({"account_id": pat}))).await;
    assert_eq!(s, StatusCode::CONFLICT, "{body}");
    let (s, _) = call(app, "POST", "/api/admin/approve", Some(&f.admin), Some(json!({"account_id": "a-none"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, grant) = login(app, PENDING).await;
    assert_eq!(s, StatusCode::OK);
    let (s, _) = call(app, "GET", &format!("/api/projects/{PROJECT}/distribution?lens=gender"), Some(&token(&grant)), None).await;
    assert_eq!(s, StatusCode::OK);

    let audit = retain_service::accounts::Accounts::open(f.dir.path(), &settings().service)
        .unwrap()
        .audit_log()
        .unwrap();
    assert_eq!(audit.iter().filter(|e| e.action == "approve").count(), 2);
}

#[tokio::test]
async fn sessions_expire_with_a_reauth_signal() {
    let f = fixture().await;
    let uri = format!("/api/projects/{PROJECT}/overview");
    let (s, body) = call(&f.app, "GET", &uri, Some(&f.expired), None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    assert_eq!(body["code"], "session_expired");

    f.clock.fetch_add(24 * 3600, Ordering::SeqCst);
    let (s, body) = call(&f.app, "GET", &uri, Some(&f.manager), None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    assert_eq!(body["code"], "session_expired");

    let (s, body) = call(&f.app, "GET", &uri, Some("not-a-token"), None).await;
    assert_eq!((s, body["code"].as_str()), (StatusCode::UNAUTHORIZED, Some("unauthenticated")));
}

#[tokio::test]
async fn demographic_endpoints_are_gated() {
    let f = fixture().await;
    let app = &f.app;
    for lens in ["gender", "region", "affiliation"] {
        let uri = format!("/api/projects/{PROJECT}/distribution?lens={lens}");
        assert_eq!(call(app, "GET", &uri, None, None).await.0, StatusCode::UNAUTHORIZED);
        let (s, body) = call(app, "GET", &uri, Some(&f.manager), None).await;
        assert_eq!(s, StatusCode::OK);
        assert!(body.as_object().unwrap().values().all(|g| g["count"].as_u64().is_some()));
        let uri = format!("/api/projects/{PROJECT}/survival?group_by={lens}");
        assert_eq!(call(app, "GET", &uri, None, None).await.0, StatusCode::UNAUTHORIZED);
        assert_eq!(call(app, "GET", &uri, Some(&f.admin), None).await.0, StatusCode::OK);
    }
    let (_, gender) = call(app, "GET", &format!("/api/projects/{PROJECT}/distribution?lens=gender"), Some(&f.manager), None).await;
    assert_eq!(gender[GENDER_MARK]["count"], 40);

    // newcomer status is not a personal attribute
    let uri = format!("/api/projects/{PROJECT}/distribution?lens=newcomer_status");
    assert_eq!(call(app, "GET", &uri, None, None).await.0, StatusCode::OK);
}

#[tokio::test]
async fn redaction_omits_fields_instead_of_nulling() {
    let f = fixture().await;
    let id = &f.contributor_ids[0];
    let uri = format!("/api/projects/{PROJECT}/contributors/{id}");
    let (s, full) = call(&f.app, "GET", &uri, Some(&f.manager), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(full["contributor"]["demographics"]["gender"], GENDER_MARK);
    let (s, redacted) = call(&f.app, "GET", &uri, None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(leaks(&redacted).is_empty(), "{:?}", leaks(&redacted));

    let (full_c, red_c) = (full["contributor"].as_object().unwrap(), redacted["contributor"].as_object().unwrap());
    for key in ["demographics", "affiliation", "emails"] {
        assert!(full_c.contains_key(key));
        assert!(!red_c.contains_key(key), "`{key}` must be absent, not null");
    }
    for (k, v) in red_c {
        assert_eq!(full_c.get(k), Some(v), "{k}");
    }
    assert_eq!(full_c.len() - red_c.len(), 3);
    assert_eq!(redacted["contributor"]["contributor_id"], full["contributor"]["contributor_id"]);
}

#[tokio::test]
async fn errors_are_json() {
    let f = fixture().await;
    let app = &f.app;
    let cases = [
        ("GET", "/api/projects/nope/overview".to_string(), StatusCode::NOT_FOUND),
        ("GET", "/api/nothing/here".to_string(), StatusCode::NOT_FOUND),
        ("GET", "/api/models/cox-000000000000".to_string(), StatusCode::NOT_FOUND),
        ("GET", format!("/api/projects/{PROJECT}/tags/no-such-tag"), StatusCode::NOT_FOUND),
        ("GET", format!("/api/projects/{PROJECT}/contributors/c-nope"), StatusCode::NOT_FOUND),
        ("GET", format!("/api/projects/{PROJECT}/distribution?lens=shoe_size"), StatusCode::BAD_REQUEST),
        ("GET", format!("/api/projects/{PROJECT}/distribution"), StatusCode::BAD_REQUEST),
        ("GET", format!("/api/projects/{PROJECT}/overview?start=abc"), StatusCode::BAD_REQUEST),
        ("GET", format!("/api/projects/{PROJECT}/overview?start=10&end=5"), StatusCode::BAD_REQUEST),
        ("DELETE", format!("/api/projects/{PROJECT}/overview"), StatusCode::METHOD_NOT_ALLOWED),
    ];
    for (method, uri, expected) in cases {
        let (s, body) = call(app, method, &uri, Some(&f.manager), None).await;
        assert_eq!(s, expected, "{method} {uri}: {body}");
        assert!(body["code"].is_string() && body["message"].is_string(), "{uri}: {body}");
    }
    let (s, body) = call(app, "POST", "/api/auth/login", None, Some(json!({"login": "x"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(body["code"], "validation");
}

#[tokio::test]
async fn model_fitting_through_the_api() {
    let f = fixture().await;
    let app = &f.app;
    let uri = format!("/api/projects/{PROJECT}/models");
    let draft = json!({"kind": "cox", "features": ["total_events", "active_weeks"], "seed": 5});
    assert_eq!(call(app, "POST", &uri, None, Some(draft.clone())).await.0, StatusCode::UNAUTHORIZED);
    let (s, summary) = call(app, "POST", &uri, Some(&f.manager), Some(draft.clone())).await;
    assert_eq!(s, StatusCode::CREATED, "{summary}");
    let id = summary["model_id"].as_str().unwrap().to_string();
    let (_, again) = call(app, "POST", &uri, Some(&f.manager), Some(draft)).await;
    assert_eq!(again, summary, "same seed, same model");

    let (s, fetched) = call(app, "GET", &format!("/api/models/{id}"), None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(fetched, summary);
    let (_, risk) = call(app, "GET", &format!("/api/models/{id}/risk"), None, None).await;
    let ranks: Vec<u64> = risk.as_array().unwrap().iter().map(|r| r["rank"].as_u64().unwrap()).collect();
    assert_eq!(ranks, (1..=80).collect::<Vec<_>>());

    let bad = json!({"kind": "cox", "features": ["shoe_size"]});
    let (s, body) = call(app, "POST", &uri, Some(&f.manager), Some(bad)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(body["message"].as_str().unwrap().contains("shoe_size"));
    let bad = json!({"kind": "forest"});
    assert_eq!(call(app, "POST", &uri, Some(&f.manager), Some(bad)).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn schedules_outbox_and_self_reports() {
    let f = fixture().await;
    let app = &f.app;
    let schedule = json!({
        "schedule_id": "daily-health",
        "report": "health",
        "cadence": "daily",
        "at_utc": "00:00",
        "recipients": ["lead@project.example"],
        "enabled": true
    });
    let uri = format!("/api/projects/{PROJECT}/schedules");
    assert_eq!(call(app, "POST", &uri, None, Some(schedule.clone())).await.0, StatusCode::UNAUTHORIZED);
    assert_eq!(call(app, "POST", &uri, Some(&f.manager), Some(schedule.clone())).await.0, StatusCode::CREATED);
    assert_eq!(call(app, "POST", &uri, Some(&f.manager), Some(schedule)).await.0, StatusCode::CONFLICT);

    let written = f.state.run_engagement_all().unwrap();
    assert!(written > 0);
    assert_eq!(f.state.run_engagement_all().unwrap(), 0);
    let out_uri = format!("/api/projects/{PROJECT}/outbox");
    assert_eq!(call(app, "GET", &out_uri, None, None).await.0, StatusCode::UNAUTHORIZED);
    let (_, outbox) = call(app, "GET", &out_uri, Some(&f.manager), None).await;
    assert_eq!(outbox.as_array().unwrap().len(), written);
    assert!(outbox.as_array().unwrap().iter().any(|m| m["trigger"] == "schedule"));

    let id = &f.contributor_ids[1];
    let demo_uri = format!("/api/projects/{PROJECT}/contributors/{id}/demographics");
    let update = json!({"source": "self_reported", "gender": "nonbinary"});
    assert_eq!(call(app, "POST", &demo_uri, None, Some(update.clone())).await.0, StatusCode::UNAUTHORIZED);
    let (s, c) = call(app, "POST", &demo_uri, Some(&f.manager), Some(update)).await;
    assert_eq!(s, StatusCode::OK, "{c}");
    assert_eq!(c["demographics"]["source"], "self_reported");
    let (_, dist) = call(app, "GET", &format!("/api/projects/{PROJECT}/distribution?lens=gender"), Some(&f.manager), None).await;
    assert_eq!(dist["nonbinary"]["count"], 1);
    let update = json!({"source": "inferred", "gender": "x"});
    assert_eq!(call(app, "POST", &demo_uri, Some(&f.manager), Some(update)).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn per_token_request_cap() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(std::sync::atomic::AtomicI64::new(0));
    let mut s = settings();
    s.service.request_cap_per_token = 2;
    {
        let mut accounts = retain_service::accounts::Accounts::open(dir.path(), &s.service).unwrap();
        accounts.init_admin(ADMIN.0, ADMIN.1, 0).unwrap();
    }
    let c = Arc::clone(&clock);
    let ws = retain_core::workflow::Workspace::new(s, retain_core::store::ProjectStore::new(dir.path()));
    let state = retain_service::AppState::new(ws, Arc::new(move || c.load(Ordering::SeqCst))).unwrap();
    let app = retain_service::router(state);
    let t = token(&login(&app, ADMIN).await.1);
    for _ in 0..2 {
        assert_eq!(call(&app, "GET", "/api/projects", Some(&t), None).await.0, StatusCode::OK);
    }
    let (s, body) = call(&app, "GET", "/api/projects", Some(&t), None).await;
    assert_eq!(s, StatusCode::TOO_MANY_REQUESTS);
    assert_eq!(body["code"], "request_cap");
}

/// Collects formatted log output for scanning.
#[derive(Clone, Default)]
struct LogSink(Arc<Mutex<Vec<u8>>>);

impl std::io::Write for LogSink {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

#[tokio::test]
async fn password_hashes_never_leave_the_store() {
    let sink = LogSink::default();
    let writer = sink.clone();
    let subscriber = tracing_subscriber::fmt()
        .with_writer(move || writer.clone())
        .with_max_level(tracing::Level::TRACE)
        .finish();
    let _guard = tracing::subscriber::set_default(subscriber);

    let f = fixture().await;
    let app = &f.app;
    let mut responses: Vec<Value> = Vec::new();
    for (method, uri, body) in [
        ("POST", "/api/auth/signup".to_string(), Some(json!({"login": "zed", "password": "zed-password-1"}))),
        ("POST", "/api/auth/login".to_string(), Some(json!({"login": ADMIN.0, "password": ADMIN.1}))),
        ("POST", "/api/auth/login".to_string(), Some(json!({"login": ADMIN.0, "password": "bad password"}))),
        ("GET", "/api/admin/pending".to_string(), None),
        ("GET", format!("/api/projects/{PROJECT}/overview"), None),
        ("GET", format!("/api/projects/{PROJECT}/contributors/{}", f.contributor_ids[0]), None),
    ] {
        responses.push(call(app, method, &uri, Some(&f.admin), body).await.1);
    }
    let accounts = std::fs::read_to_string(f.dir.path().join("accounts.json")).unwrap();
    let stored: Value = serde_json::from_str(&accounts).unwrap();
    let hashes: Vec<String> = stored["data"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["password_hash"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(hashes.len(), 4);
    let logs = String::from_utf8(sink.0.lock().unwrap().clone()).unwrap();
    assert!(logs.contains("request"), "log capture is working");
    let texts: Vec<String> = responses.iter().map(Value::to_string).chain([logs]).collect();
    for text in &texts {
        assert!(!text.contains("pbkdf2"), "{text}");
        assert!(!text.contains("password_hash"));
        for h in &hashes {
            let digest = h.rsplit('$').next().unwrap();
            assert!(!text.contains(digest));
        }
        for pw in [ADMIN.1, MANAGER.1, "zed-password-1"] {
            assert!(!text.contains(pw));
        }
    }
}
