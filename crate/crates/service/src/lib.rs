//! HTTP front end for a [`Study`].
//!
//! One data directory holds one study. Every command is a JSON request
//! that runs a single [`Study`] method under a mutex, so all writes go
//! through the study's log appender one at a time. Readers identify
//! their connection with the `x-client-id` header; a session answers only
//! to the client that started it.

use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use cleftkit::exec::Exec;
use cleftkit::fusion::Diagnosis;
use cleftkit::study::{
    cycle_report, Arm, Clock, EventStore, Phase, Study, StudyError, StudyPlan, SystemClock, Tier, LOG_FILE,
};

pub const CLIENT_HEADER: &str = "x-client-id";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Study(#[from] StudyError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Shared service state.
pub struct AppState {
    study: Mutex<Option<Study>>,
    data_dir: PathBuf,
    clock: Arc<dyn Clock>,
    exec: Exec,
}

impl AppState {
    /// Opens `data_dir`, replaying an existing study log if there is one.
    pub fn open(data_dir: impl AsRef<Path>, clock: Arc<dyn Clock>, exec: Exec) -> Result<Arc<Self>, ServiceError> {
        let data_dir = data_dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&data_dir)?;
        // Fail early on a read-only directory rather than on the first command.
        let probe = data_dir.join(".write-test");
        std::fs::write(&probe, b"")?;
        std::fs::remove_file(&probe)?;
        let study = if data_dir.join(LOG_FILE).exists() {
            let store = EventStore::open_dir(&data_dir)?;
            if store.is_empty() {
                None
            } else {
                Some(Study::open(store, clock.clone(), exec)?)
            }
        } else {
            None
        };
        if let Some(s) = &study {
            tracing::info!(study = %s.plan().name, events = s.events().len(), "replayed study log");
        }
        Ok(Arc::new(Self { study: Mutex::new(study), data_dir, clock, exec }))
    }

    /// Opens with the wall clock and parallel execution.
    pub fn open_default(data_dir: impl AsRef<Path>) -> Result<Arc<Self>, ServiceError> {
        Self::open(data_dir, Arc::new(SystemClock), Exec::Parallel)
    }

    fn lock(&self) -> Result<MutexGuard<'_, Option<Study>>, ApiError> {
        self.study.lock().map_err(|_| ApiError::internal("study state lock poisoned"))
    }

    /// Runs `f` against the study, or fails with 404 when none exists.
    fn with_study<T>(&self, f: impl FnOnce(&mut Study) -> Result<T, StudyError>) -> Result<T, ApiError> {
        let mut guard = self.lock()?;
        let study = guard.as_mut().ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no_study", "no study created"))?;
        f(study).map_err(ApiError::from)
    }

    /// Creates the study from a plan file unless one already exists.
    /// Returns whether it created one.
    pub fn create_if_empty(&self, plan_toml: &str) -> Result<bool, ServiceError> {
        let plan = StudyPlan::from_toml(plan_toml)?;
        let mut guard = self.study.lock().unwrap_or_else(|e| e.into_inner());
        if guard.is_some() {
            return Ok(false);
        }
        let store = EventStore::open_dir(&self.data_dir)?;
        *guard = Some(Study::create(plan, store, self.clock.clone(), self.exec)?);
        Ok(true)
    }

    /// Writes a snapshot so the next start replays little of the log.
    pub fn checkpoint(&self) -> Result<(), ServiceError> {
        let mut guard = self.study.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(s) = guard.as_mut() {
            s.checkpoint()?;
        }
        Ok(())
    }
}

/// JSON error body with a stable machine-readable `error` code.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<StudyError> for ApiError {
    fn from(e: StudyError) -> Self {
        use StudyError::*;
        let (status, code) = match &e {
            Plan(_) => (StatusCode::BAD_REQUEST, "plan"),
            InsufficientPool { .. } => (StatusCode::BAD_REQUEST, "insufficient_pool"),
            TierTooSmall { .. } => (StatusCode::BAD_REQUEST, "tier_too_small"),
            UnknownParticipant(_) => (StatusCode::NOT_FOUND, "unknown_participant"),
            UnknownSession => (StatusCode::NOT_FOUND, "unknown_session"),
            AlreadyEnrolled(_) => (StatusCode::CONFLICT, "already_enrolled"),
            SessionBusy => (StatusCode::CONFLICT, "session_busy"),
            SessionExpired => (StatusCode::GONE, "session_expired"),
            NotServed(_) => (StatusCode::CONFLICT, "not_served"),
            AlreadyAnswered(_) => (StatusCode::CONFLICT, "already_answered"),
            CycleNotOpen(_) => (StatusCode::CONFLICT, "cycle_not_open"),
            Washout { .. } => (StatusCode::CONFLICT, "washout"),
            State(_) => (StatusCode::CONFLICT, "invalid_state"),
            Incomplete { .. } => (StatusCode::CONFLICT, "cycle_incomplete"),
            Log(_) => (StatusCode::INTERNAL_SERVER_ERROR, "log"),
        };
        if status.is_server_error() {
            tracing::error!(error = %e, "study command failed");
        }
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.code, "message": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn client_id(headers: &HeaderMap) -> ApiResult<String> {
    headers
        .get(CLIENT_HEADER)
        .and_then(|v| v.to_str().ok())
        .filter(|v| !v.is_empty())
        .map(str::to_owned)
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "missing_client_id", format!("{CLIENT_HEADER} header required")))
}

/// Runs blocking work (pool generation, bootstrap) off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))?
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/study", get(study_status).post(create_study))
        .route("/participants", post(enroll))
        .route("/randomize", post(randomize))
        .route("/cycles/{cycle}/open", post(open_cycle))
        .route("/cycles/{cycle}/close", post(close_cycle))
        .route("/sessions", post(start_session))
        .route("/sessions/{token}", get(session_info))
        .route("/sessions/{token}/next", post(next_case))
        .route("/sessions/{token}/submit", post(submit))
        .route("/sessions/{token}/assist", get(assist))
        .route("/reports/{cycle}", get(report))
        .with_state(state)
}

/// Serves until `shutdown` resolves, then checkpoints the study.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state.clone())).with_graceful_shutdown(shutdown).await?;
    state.checkpoint()?;
    tracing::info!("shut down");
    Ok(())
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

#[derive(Serialize)]
struct ParticipantView {
    id: String,
    tier: Tier,
    #[serde(skip_serializing_if = "Option::is_none")]
    arm: Option<Arm>,
}

#[derive(Serialize)]
struct CycleView {
    cycle: u32,
    opened_at: i64,
    closed_at: Option<i64>,
    fixed_cases: usize,
    sampled_cases: usize,
    training_cases: usize,
    missing_exams: Vec<String>,
}

#[derive(Serialize)]
struct StudyView {
    name: String,
    plan_version: String,
    pool_digest: String,
    events: usize,
    now_ms: i64,
    participants: Vec<ParticipantView>,
    single_arm_tiers: Vec<Tier>,
    cycles: Vec<CycleView>,
    duplicate_submissions: usize,
}

fn study_view(s: &Study) -> StudyView {
    StudyView {
        name: s.plan().name.clone(),
        plan_version: s.plan().version.clone(),
        pool_digest: s.pools().digest().to_string(),
        events: s.events().len(),
        now_ms: s.now_ms(),
        participants: s.participants().map(|p| ParticipantView { id: p.id.clone(), tier: p.tier, arm: p.arm }).collect(),
        single_arm_tiers: s.single_arm_tiers().to_vec(),
        cycles: (1..=s.plan().cycles)
            .filter_map(|c| {
                s.cycle(c).map(|cs| CycleView {
                    cycle: c,
                    opened_at: cs.opened_at,
                    closed_at: cs.closed_at,
                    fixed_cases: cs.exam.fixed.len(),
                    sampled_cases: cs.exam.sampled.len(),
                    training_cases: cs.training.len(),
                    missing_exams: s.missing_exams(c),
                })
            })
            .collect(),
        duplicate_submissions: s.duplicate_submissions(),
    }
}

async fn study_status(State(st): State<Arc<AppState>>) -> ApiResult<impl IntoResponse> {
    st.with_study(|s| Ok(Json(study_view(s))))
}

/// Body is a plan file in TOML.
async fn create_study(State(st): State<Arc<AppState>>, body: String) -> ApiResult<impl IntoResponse> {
    let plan = StudyPlan::from_toml(&body).map_err(ApiError::from)?;
    blocking(move || {
        let mut guard = st.lock()?;
        if guard.is_some() {
            return Err(ApiError::new(StatusCode::CONFLICT, "study_exists", "this data directory already holds a study"));
        }
        let store = EventStore::open_dir(&st.data_dir)?;
        let study = Study::create(plan, store, st.clock.clone(), st.exec)?;
        tracing::info!(study = %study.plan().name, digest = study.pools().digest(), "created study");
        let view = study_view(&study);
        *guard = Some(study);
        Ok((StatusCode::CREATED, Json(view)))
    })
    .await
}

#[derive(Deserialize)]
struct EnrollRequest {
    id: String,
    tier: Tier,
}

async fn enroll(State(st): State<Arc<AppState>>, Json(req): Json<EnrollRequest>) -> ApiResult<impl IntoResponse> {
    st.with_study(|s| {
        let p = s.enroll(&req.id, req.tier)?;
        Ok((StatusCode::CREATED, Json(ParticipantView { id: p.id.clone(), tier: p.tier, arm: p.arm })))
    })
}

#[derive(Deserialize, Default)]
struct RandomizeRequest {
    #[serde(default)]
    allow_single_arm: bool,
}

async fn randomize(State(st): State<Arc<AppState>>, body: Option<Json<RandomizeRequest>>) -> ApiResult<impl IntoResponse> {
    let req = body.map(|Json(r)| r).unwrap_or_default();
    st.with_study(|s| {
        let assignments = s.randomize(req.allow_single_arm)?;
        Ok(Json(json!({ "assignments": assignments, "single_arm_tiers": s.single_arm_tiers() })))
    })
}

async fn open_cycle(State(st): State<Arc<AppState>>, UrlPath(cycle): UrlPath<u32>) -> ApiResult<impl IntoResponse> {
    st.with_study(|s| {
        let cs = s.open_cycle(cycle)?;
        Ok(Json(json!({
            "cycle": cycle,
            "opened_at": cs.opened_at,
            "fixed_cases": cs.exam.fixed.len(),
            "sampled_cases": cs.exam.sampled.len(),
            "training_cases": cs.training.len(),
        })))
    })
}

async fn close_cycle(State(st): State<Arc<AppState>>, UrlPath(cycle): UrlPath<u32>) -> ApiResult<impl IntoResponse> {
    st.with_study(|s| {
        s.close_cycle(cycle)?;
        Ok(Json(json!({ "cycle": cycle, "closed_at": s.cycle(cycle).and_then(|c| c.closed_at) })))
    })
}

#[derive(Deserialize)]
struct StartRequest {
    participant: String,
    cycle: u32,
    phase: Phase,
}

async fn start_session(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    Json(req): Json<StartRequest>,
) -> ApiResult<impl IntoResponse> {
    let client = client_id(&headers)?;
    st.with_study(|s| Ok(Json(s.start_session(&req.participant, req.cycle, req.phase, &client)?)))
}

async fn session_info(State(st): State<Arc<AppState>>, UrlPath(token): UrlPath<String>) -> ApiResult<impl IntoResponse> {
    st.with_study(|s| Ok(Json(s.session(&token).ok_or(StudyError::UnknownSession)?.info())))
}

async fn next_case(
    State(st): State<Arc<AppState>>,
    UrlPath(token): UrlPath<String>,
    headers: HeaderMap,
) -> ApiResult<impl IntoResponse> {
    let client = client_id(&headers)?;
    st.with_study(|s| Ok(Json(s.next_case(&token, &client)?)))
}

#[derive(Deserialize)]
struct SubmitRequest {
    case_id: String,
    diagnosis: Diagnosis,
    #[serde(default)]
    client_elapsed_ms: Option<i64>,
}

async fn submit(
    State(st): State<Arc<AppState>>,
    UrlPath(token): UrlPath<String>,
    headers: HeaderMap,
    Json(req): Json<SubmitRequest>,
) -> ApiResult<impl IntoResponse> {
    let client = client_id(&headers)?;
    st.with_study(|s| Ok(Json(s.submit(&token, &client, &req.case_id, req.diagnosis, req.client_elapsed_ms)?)))
}

async fn assist(
    State(st): State<Arc<AppState>>,
    UrlPath(token): UrlPath<String>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let client = client_id(&headers)?;
    st.with_study(|s| {
        Ok(match s.assist(&token, &client)? {
            Some(p) => Json(p).into_response(),
            None => Json(json!({ "assist_unavailable": true })).into_response(),
        })
    })
}

#[derive(Deserialize, Default)]
struct ReportQuery {
    #[serde(default)]
    format: Option<String>,
}

async fn report(
    State(st): State<Arc<AppState>>,
    UrlPath(cycle): UrlPath<u32>,
    Query(q): Query<ReportQuery>,
) -> ApiResult<Response> {
    let format = q.format.unwrap_or_else(|| "json".into());
    if !matches!(format.as_str(), "json" | "csv" | "text") {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "bad_format", "format must be json, csv or text"));
    }
    blocking(move || {
        let exec = st.exec;
        st.with_study(|s| {
            let r = cycle_report(s, cycle, exec)?;
            Ok(match format.as_str() {
                "csv" => {
                    let body = r.to_csv().map_err(|e| StudyError::Log(e.to_string()))?;
                    ([(header::CONTENT_TYPE, "text/csv")], body).into_response()
                }
                "text" => ([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], r.to_text()).into_response(),
                _ => Json(r).into_response(),
            })
        })
    })
    .await
}
