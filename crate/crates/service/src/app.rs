//! Routes and handlers.

use std::collections::HashMap;
use std::fs;
use std::path::Path as FsPath;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, SystemTime};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use retain_core::engagement::{DemographicUpdate, Schedule};
use retain_core::impact::tag_distribution;
use retain_core::metrics::{activity_timeseries, demographic_distribution, list_inactive, list_newcomers, overview_metrics, Lens};
use retain_core::model::{DemographicSource, Project, SECONDS_PER_DAY};
use retain_core::store::StoredModel;
use retain_core::survival::ModelKind;
use retain_core::workflow::{FitRequest, Workspace};
use serde::{Deserialize, Serialize};

use crate::access::{redact, Caller};
use crate::accounts::Accounts;
use crate::error::ServiceError;

/// Current time in Unix seconds. Injected so tests can move it.
pub type Clock = Arc<dyn Fn() -> i64 + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| {
        SystemTime::now()
            .duration_since(SystemTime::UNIX_EPOCH)
            .map(|d| d.as_secs() as i64)
            .unwrap_or(0)
    })
}

type Fingerprint = Vec<Option<(u64, SystemTime)>>;

fn fingerprint(dir: &FsPath) -> Fingerprint {
    ["project.json", "events.jsonl", "demographics.json"]
        .iter()
        .map(|f| {
            let m = fs::metadata(dir.join(f)).ok()?;
            Some((m.len(), m.modified().ok()?))
        })
        .collect()
}

pub struct AppState {
    ws: Workspace,
    accounts: Mutex<Accounts>,
    /// Serializes every write to project documents.
    writer: Mutex<()>,
    cache: Mutex<HashMap<String, (Fingerprint, Arc<Project>)>>,
    clock: Clock,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

impl AppState {
    pub fn new(ws: Workspace, clock: Clock) -> Result<Arc<Self>, ServiceError> {
        let accounts = Accounts::open(ws.store.root(), &ws.settings.service)?;
        Ok(Arc::new(AppState {
            ws,
            accounts: Mutex::new(accounts),
            writer: Mutex::new(()),
            cache: Mutex::new(HashMap::new()),
            clock,
        }))
    }

    pub fn open(data_dir: &FsPath) -> Result<Arc<Self>, ServiceError> {
        AppState::new(Workspace::open(data_dir)?, system_clock())
    }

    pub fn workspace(&self) -> &Workspace {
        &self.ws
    }

    pub fn now(&self) -> i64 {
        (self.clock)()
    }

    /// Loaded project, reused while its documents are unchanged on disk.
    fn project(&self, name: &str) -> Result<Arc<Project>, ServiceError> {
        let dir = self.ws.store.project_dir(name)?;
        let fp = fingerprint(&dir);
        if let Some((cached_fp, p)) = lock(&self.cache).get(name) {
            if *cached_fp == fp {
                return Ok(Arc::clone(p));
            }
        }
        let project = Arc::new(self.ws.load_project(name)?);
        lock(&self.cache).insert(name.to_string(), (fp, Arc::clone(&project)));
        Ok(project)
    }

    fn invalidate(&self, name: &str) {
        lock(&self.cache).remove(name);
    }

    fn caller(&self, headers: &HeaderMap) -> Result<Caller, ServiceError> {
        let Some(value) = headers.get(header::AUTHORIZATION) else {
            return Ok(Caller::Anonymous);
        };
        let token = value
            .to_str()
            .ok()
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .ok_or(ServiceError::InvalidToken)?;
        let account = lock(&self.accounts).authenticate(token, self.now())?;
        Ok(Caller::Account(account))
    }

    /// One engagement pass over every project. Runs under the writer lock.
    pub fn run_engagement_all(&self) -> Result<usize, ServiceError> {
        let _guard = lock(&self.writer);
        let now = self.now();
        let mut written = 0;
        for name in self.ws.store.list_projects()? {
            written += self.ws.run_engagement(&name, now)?.written.len();
        }
        Ok(written)
    }
}

/// Model metadata without the fitted parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model_id: String,
    pub project: String,
    pub kind: ModelKind,
    pub feature_names: Vec<String>,
    pub feature_window_days: u32,
    pub c_index: Option<f64>,
    pub train_fraction: f64,
    pub converged: bool,
    pub iterations: u32,
    pub seed: u64,
    pub n_train: usize,
    pub n_holdout: usize,
}

impl From<&StoredModel> for ModelSummary {
    fn from(s: &StoredModel) -> Self {
        let m = &s.model;
        ModelSummary {
            model_id: m.model_id.clone(),
            project: s.project.clone(),
            kind: m.kind,
            feature_names: m.feature_names.clone(),
            feature_window_days: s.feature_window_days,
            c_index: m.c_index,
            train_fraction: m.train_fraction,
            converged: m.converged,
            iterations: m.iterations,
            seed: m.seed,
            n_train: m.n_train,
            n_holdout: m.n_holdout,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Credentials {
    login: String,
    password: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ApproveBody {
    account_id: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemographicsBody {
    source: DemographicSource,
    #[serde(default)]
    gender: Option<String>,
    #[serde(default)]
    region: Option<String>,
}

type Params = Result<Query<HashMap<String, String>>, QueryRejection>;
type Body<T> = Result<Json<T>, JsonRejection>;
type ApiResult = Result<Response, ServiceError>;

fn params(q: Params) -> Result<HashMap<String, String>, ServiceError> {
    q.map(|Query(m)| m).map_err(|e| ServiceError::BadRequest(e.body_text()))
}

fn body<T>(b: Body<T>) -> Result<T, ServiceError> {
    b.map(|Json(v)| v).map_err(|e| ServiceError::BadRequest(e.body_text()))
}

fn number<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str) -> Result<Option<T>, ServiceError> {
    q.get(key)
        .map(|v| {
            v.parse()
                .map_err(|_| ServiceError::BadRequest(format!("query parameter `{key}` is not a valid number")))
        })
        .transpose()
}

fn lens(q: &HashMap<String, String>, key: &str) -> Result<Option<Lens>, ServiceError> {
    q.get(key).map(|v| v.parse::<Lens>().map_err(ServiceError::from)).transpose()
}

/// Serialize, stripping demographic fields for sub-manager callers.
fn reply<T: Serialize>(caller: &Caller, status: StatusCode, value: &T) -> ApiResult {
    let mut v = serde_json::to_value(value).map_err(|e| ServiceError::Io(e.to_string()))?;
    if !caller.is_privileged() {
        redact(&mut v);
    }
    Ok((status, Json(v)).into_response())
}

async fn blocking<F>(state: Arc<AppState>, f: F) -> Response
where
    F: FnOnce(&AppState) -> ApiResult + Send + 'static,
{
    match tokio::task::spawn_blocking(move || f(&state)).await {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => e.into_response(),
        Err(e) => ServiceError::Io(e.to_string()).into_response(),
    }
}

type St = State<Arc<AppState>>;

async fn signup(State(s): St, b: Body<Credentials>) -> Response {
    blocking(s, move |s| {
        let c = body(b)?;
        let view = lock(&s.accounts).signup(&c.login, &c.password, s.now())?;
        reply(&Caller::Anonymous, StatusCode::CREATED, &view)
    })
    .await
}

async fn login(State(s): St, b: Body<Credentials>) -> Response {
    blocking(s, move |s| {
        let c = body(b)?;
        let grant = lock(&s.accounts).login(&c.login, &c.password, s.now())?;
        reply(&Caller::Anonymous, StatusCode::OK, &grant)
    })
    .await
}

async fn pending(State(s): St, h: HeaderMap) -> Response {
    blocking(s, move |s| {
        let caller = s.caller(&h)?;
        caller.require_admin()?;
        let list = lock(&s.accounts).pending();
        reply(&caller, StatusCode::OK, &list)
    })
    .await
}

async fn approve(State(s): St, h: HeaderMap, b: Body<ApproveBody>) -> Response {
    blocking(s, move |s| {
        let caller = s.caller(&h)?;
        let admin = caller.require_admin()?.clone();
        let target = body(b)?;
        let view = lock(&s.accounts).approve(&admin, &target.account_id, s.now())?;
        reply(&caller, StatusCode::OK, &view)
    })
    .await
}

async fn projects(State(s): St, h: HeaderMap) -> Response {
    blocking(s, move |s| {
        let caller = s.caller(&h)?;
        reply(&caller, StatusCode::OK, &s.ws.store.list_projects()?)
    })
    .await
}

/// `[end - report period, end)` with `end` at the project's as-of unless
/// given.
async fn overview(State(s): St, h: HeaderMap, Path(p): Path<String>, q: Params) -> Response {
    blocking(s, move |s| {
        let caller = s.caller(&h)?;
        let q = params(q)?;
        let project = s.project(&p)?;
        let policy = s.ws.policy(&project);
        let end = number(&q, "end")?.unwrap_or(policy.as_of);
        let start = number(&q, "start")?
            .unwrap_or(end - i64::from(s.ws.settings.report_period_days) * SECONDS_PER_DAY);
        reply(&caller, StatusCode::OK, &overview_metrics(&project, &policy, start, end)?)
    })
    .await
}

/// Buckets from the first event through the as-of instant inclusive.
async fn activity(State(s): St, h: HeaderMap, Path(p): Path<String>, q: Params) -> Response {
    blocking(s, move |s| {
        let caller = s.caller(&h)?;
        let q = params(q)?;
        let project = s.project(&p)?;
        let bucket_days = number(&q, "bucket_days")?.unwrap_or(7);
        let first = project.events().first().map_or(project.as_of(), |e| e.timestamp);
        let start = number(&q, "start")?.unwrap_or(first);
        let end = number(&q, "end")?.unwrap_or(project.as_of() + 1);
        reply(&caller, StatusCode::OK, &activity_timeseries(&project, bucket_days, start, end)?)
    })
    .await
}

async fn distribution(State(s): St, h: HeaderMap, Path(p): Path<String>, q: Params) -> Response {
    blocking(s, move |s| {
        let caller = s.caller(&h)?;
        let q = params(q)?;
        let lens = lens(&q, "lens")?.ok_or_else(|| ServiceError::BadRequest("query parameter `lens` is required".into()))?;
        if lens.is_demographic() {
            caller.require_manager()?;
        }
        let project = s.project(&p)?;
        reply(&caller, StatusCode::OK, &demographic_distribution(project.contributors(), lens))
    })
    .await
}

async fn survival(State(s): St, h: HeaderMap, Path(p): Path<String>, q: Params) -> Response {
    blocking(s, move |s| {
        let caller = s.caller(&h)?;
        let q = params(q)?;
        let group_by = lens(&q, "group_by")?;
        if group_by.is_some_and(Lens::is_demographic) {
            caller.require_manager()?;
        }
        let project = s.project(&p)?;
        reply(&caller, StatusCode::OK, &s.ws.survival_curves(&project, group_by)?)
    })
    .await
}

async fn fit(State(s): St, h: HeaderMap, Path(p): Path<String>, b: Body<FitRequest>) -> Response {
    blocking(s, move |s| {
        let caller = s.caller(&h)?;
        caller.require_manager()?;
        let request = body(b)?;
        let stored = {
            let _guard = lock(&s.writer);
            s.ws.fit(&p, &request)?
        };
        reply(&caller, StatusCode::CREATED, &ModelSummary::from(&stored))
    })
    .await
}

async fn model(State(s): St, h: HeaderMap, Path(m): Path<String>) -> Response {
    blocking(s, move |s| {
        let caller = s.caller(&h)?;
        let stored = s.ws.store.read_model(&m)?;
        reply(&caller, StatusCode::OK, &ModelSummary::from(&stored))
    })
    .await
}

async fn risk(State(s): St, h: HeaderMap, Path(m): Path<String>) -> Response {
    blocking(s, move |s| {
        let caller = s.caller(&h)?;
        let stored = s.ws.store.read_model(&m)?;
        let project = s.project(&stored.project)?;
        reply(&caller, StatusCode::OK, &s.ws.risk_with(&stored, &project)?)
    })
    .await
}

async fn contributor(State(s): St, h: HeaderMap, Path((p, c)): Path<(String, String)>) -> Response {
    blocking(s, move |s| {
        let caller = s.caller(&h)?;
        let project = s.project(&p)?;
        reply(&caller, StatusCode::OK, &s.ws.contributor_profile(&project, &c)?)
    })
    .await
}

async fn demographics(
    State(s): St,
    h: HeaderMap,
    Path((p, c)): Path<(String, String)>,
    b: Body<DemographicsBody>,
) -> Response {
    blocking(s, move |s| {
        let caller = s.caller(&h)?;
        caller.require_manager()?;
        let req = body(b)?;
        let update = DemographicUpdate {
            gender: req.gender,
            region: req.region,
        };
        let updated = {
            let _guard = lock(&s.writer);
            let r = s.ws.update_demographics(&p, &c, update, req.source);
            s.invalidate(&p);
            r?
        };
        reply(&caller, StatusCode::OK, &updated)
    })
    .await
}

async fn tags(State(s): St, h: HeaderMap, Path(p): Path<String>) -> Response {
    blocking(s, move |s| {
        let caller = s.caller(&h)?;
        let project = s.project(&p)?;
        reply(&caller, StatusCode::OK, &tag_distribution(&project))
    })
    .await
}

async fn tag(State(s): St, h: HeaderMap, Path((p, t)): Path<(String, String)>) -> Response {
    blocking(s, move |s| {
        let caller = s.caller(&h)?;
        let project = s.project(&p)?;
        reply(&caller, StatusCode::OK, &s.ws.tag(&project, &t)?)
    })
    .await
}

async fn newcomers(State(s): St, h: HeaderMap, Path(p): Path<String>) -> Response {
    blocking(s, move |s| {
        let caller = s.caller(&h)?;
        let project = s.project(&p)?;
        reply(&caller, StatusCode::OK, &list_newcomers(project.contributors(), &s.ws.policy(&project))?)
    })
    .await
}

async fn inactive(State(s): St, h: HeaderMap, Path(p): Path<String>) -> Response {
    blocking(s, move |s| {
        let caller = s.caller(&h)?;
        let project = s.project(&p)?;
        reply(&caller, StatusCode::OK, &list_inactive(project.contributors(), &s.ws.policy(&project))?)
    })
    .await
}

async fn list_schedules(State(s): St, h: HeaderMap, Path(p): Path<String>) -> Response {
    blocking(s, move |s| {
        let caller = s.caller(&h)?;
        caller.require_manager()?;
        s.project(&p)?;
        reply(&caller, StatusCode::OK, &s.ws.store.read_schedules(&p)?)
    })
    .await
}

async fn add_schedule(State(s): St, h: HeaderMap, Path(p): Path<String>, b: Body<Schedule>) -> Response {
    blocking(s, move |s| {
        let caller = s.caller(&h)?;
        caller.require_manager()?;
        let schedule = body(b)?;
        {
            let _guard = lock(&s.writer);
            s.ws.add_schedule(&p, schedule.clone())?;
        }
        reply(&caller, StatusCode::CREATED, &schedule)
    })
    .await
}

async fn outbox(State(s): St, h: HeaderMap, Path(p): Path<String>) -> Response {
    blocking(s, move |s| {
        let caller = s.caller(&h)?;
        caller.require_manager()?;
        s.project(&p)?;
        reply(&caller, StatusCode::OK, &s.ws.store.read_outbox(&p)?)
    })
    .await
}

async fn not_found() -> Response {
    ServiceError::NotFound.into_response()
}

async fn method_not_allowed() -> Response {
    ServiceError::MethodNotAllowed.into_response()
}

/// Method, path and status only; bodies and headers are never logged.
async fn log_request(req: Request, next: Next) -> Response {
    let method = req.method().clone();
    let path = req.uri().path().to_string();
    let resp = next.run(req).await;
    tracing::info!(%method, %path, status = resp.status().as_u16(), "request");
    resp
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/auth/signup", post(signup))
        .route("/api/auth/login", post(login))
        .route("/api/admin/pending", get(pending))
        .route("/api/admin/approve", post(approve))
        .route("/api/projects", get(projects))
        .route("/api/projects/{p}/overview", get(overview))
        .route("/api/projects/{p}/activity", get(activity))
        .route("/api/projects/{p}/distribution", get(distribution))
        .route("/api/projects/{p}/survival", get(survival))
        .route("/api/projects/{p}/models", post(fit))
        .route("/api/models/{m}", get(model))
        .route("/api/models/{m}/risk", get(risk))
        .route("/api/projects/{p}/contributors/{c}", get(contributor))
        .route("/api/projects/{p}/contributors/{c}/demographics", post(demographics))
        .route("/api/projects/{p}/tags", get(tags))
        .route("/api/projects/{p}/tags/{tag}", get(tag))
        .route("/api/projects/{p}/newcomers", get(newcomers))
        .route("/api/projects/{p}/inactive", get(inactive))
        .route("/api/projects/{p}/schedules", get(list_schedules).post(add_schedule))
        .route("/api/projects/{p}/outbox", get(outbox))
        .fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .layer(middleware::from_fn(log_request))
        .with_state(state)
}

/// Serve until interrupted. A background loop runs engagement for every
/// project at the configured interval.
pub async fn serve(state: Arc<AppState>, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    let interval = state.ws.settings.service.scheduler_interval_secs;
    if interval > 0 {
        let s = Arc::clone(&state);
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(Duration::from_secs(interval));
            loop {
                tick.tick().await;
                let s = Arc::clone(&s);
                match tokio::task::spawn_blocking(move || s.run_engagement_all()).await {
                    Ok(Ok(n)) if n > 0 => tracing::info!(written = n, "engagement run"),
                    Ok(Err(e)) => tracing::error!(error = %e, "engagement run failed"),
                    _ => {}
                }
            }
        });
    }
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
