//! HTTP JSON API for reader sessions. Case payloads are blinded: they
//! never carry the truth label or the source case.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use freetumor_core::pipeline::derive_seed;

use crate::cases::{CaseSet, CaseView};
use crate::design::{ReaderLevel, Verdict};
use crate::error::{Error, Result};
use crate::render::Axis;
use crate::report::{full_report, report, to_csv, Grouping};
use crate::session::{RecordOutcome, TuringSession};
use crate::store::SessionStore;

pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64)
    })
}

struct Inner {
    store: SessionStore,
    cases: CaseSet,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Mutex<Inner>>,
    order_seed: u64,
    clock: Clock,
}

impl AppState {
    pub fn new(store: SessionStore, cases: CaseSet, order_seed: u64, clock: Clock) -> Self {
        AppState {
            inner: Arc::new(Mutex::new(Inner { store, cases })),
            order_seed,
            clock,
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        // A panicked handler cannot leave the store half-written: every
        // mutation is appended to disk before memory changes are visible.
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub code: String,
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = match &self.0 {
            Error::UnknownCase(_) => (StatusCode::NOT_FOUND, "unknown_case"),
            Error::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            Error::SessionClosed(_) => (StatusCode::CONFLICT, "session_closed"),
            Error::SessionOpen(_) => (StatusCode::CONFLICT, "session_open"),
            Error::NoCompletedSessions => (StatusCode::CONFLICT, "no_completed_sessions"),
            Error::InvalidRequest(_) | Error::InvalidDesign(_) => (StatusCode::BAD_REQUEST, "invalid_request"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        let body = ErrorBody {
            error: self.0.to_string(),
            code: code.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T> {
    serde_json::from_slice(body).map_err(|e| Error::InvalidRequest(e.to_string()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub reader_id: String,
    pub level: ReaderLevel,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitVerdict {
    pub case_id: String,
    pub verdict: Verdict,
}

/// Session progress as the reader sees it: their own calls, never truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionView {
    pub session_id: String,
    pub reader_id: String,
    pub level: ReaderLevel,
    pub total: usize,
    pub answered: usize,
    pub closed: bool,
    pub case_order: Vec<String>,
    pub verdicts: BTreeMap<String, Verdict>,
}

impl SessionView {
    fn of(s: &TuringSession) -> Self {
        SessionView {
            session_id: s.session_id.clone(),
            reader_id: s.reader_id.clone(),
            level: s.level,
            total: s.total(),
            answered: s.answered(),
            closed: s.is_closed(),
            case_order: s.case_order.clone(),
            verdicts: s.verdicts.iter().map(|(k, v)| (k.clone(), v.verdict)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseResponse {
    /// Zero-based position in the session's order.
    pub position: usize,
    pub total: usize,
    pub case: CaseView,
    pub verdict: Option<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NextResponse {
    pub done: bool,
    pub answered: usize,
    pub total: usize,
    pub next: Option<CaseResponse>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictResponse {
    pub outcome: RecordOutcome,
    pub answered: usize,
    pub total: usize,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/next", get(next_case))
        .route("/api/sessions/{id}/cases/{case_id}", get(get_case))
        .route("/api/sessions/{id}/verdicts", post(submit_verdict))
        .route("/api/sessions/{id}/close", post(close_session))
        .route("/api/report", get(get_report))
        .route("/api/images/{case_id}/{file}", get(get_image))
        .with_state(state)
}

fn order_stream(id: &str) -> u64 {
    // FNV-1a, so the order depends only on the id and the base seed.
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

async fn create_session(State(st): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<SessionView>)> {
    let req: CreateSession = parse_body(&body)?;
    let reader = req.reader_id.trim();
    if reader.is_empty() || reader.len() > 64 {
        return Err(Error::InvalidRequest("reader_id must be 1 to 64 characters".into()).into());
    }
    let now = (st.clock)();
    let mut g = st.lock();
    let mut n = g.store.sessions().count() + 1;
    let id = loop {
        let id = format!("session-{n:04}");
        if g.store.get(&id).is_err() && !g.store.dir().join(format!("{id}.jsonl")).exists() {
            break id;
        }
        n += 1;
    };
    let ids = g.cases.ids();
    let seed = derive_seed(st.order_seed, order_stream(&id));
    let s = TuringSession::new(id, reader, req.level, &ids, seed, now);
    let s = g.store.create(s)?;
    Ok((StatusCode::CREATED, Json(SessionView::of(s))))
}

async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let g = st.lock();
    Ok(Json(SessionView::of(g.store.get(&id)?)))
}

fn case_response(g: &Inner, s: &TuringSession, position: usize) -> Result<CaseResponse> {
    let id = &s.case_order[position];
    let case = g.cases.get(id).ok_or_else(|| Error::UnknownCase(id.clone()))?;
    Ok(CaseResponse {
        position,
        total: s.total(),
        case: case.view(),
        verdict: s.verdicts.get(id).map(|v| v.verdict),
    })
}

async fn next_case(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<NextResponse>> {
    let g = st.lock();
    let s = g.store.get(&id)?;
    let next = match s.next_case() {
        Some((pos, _)) => Some(case_response(&g, s, pos)?),
        None => None,
    };
    Ok(Json(NextResponse {
        done: next.is_none(),
        answered: s.answered(),
        total: s.total(),
        next,
    }))
}

async fn get_case(State(st): State<AppState>, Path((id, case_id)): Path<(String, String)>) -> ApiResult<Json<CaseResponse>> {
    let g = st.lock();
    let s = g.store.get(&id)?;
    let pos = s
        .case_order
        .iter()
        .position(|c| *c == case_id)
        .ok_or(Error::UnknownCase(case_id))?;
    Ok(Json(case_response(&g, s, pos)?))
}

async fn submit_verdict(State(st): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<VerdictResponse>> {
    let req: SubmitVerdict = parse_body(&body)?;
    let now = (st.clock)();
    let mut g = st.lock();
    let outcome = g.store.record(&id, &req.case_id, req.verdict, now)?;
    let s = g.store.get(&id)?;
    Ok(Json(VerdictResponse {
        outcome,
        answered: s.answered(),
        total: s.total(),
    }))
}

async fn close_session(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let now = (st.clock)();
    let mut g = st.lock();
    Ok(Json(SessionView::of(g.store.close(&id, now)?)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportQuery {
    pub grouping: Option<String>,
    pub format: Option<String>,
}

async fn get_report(State(st): State<AppState>, Query(q): Query<ReportQuery>) -> ApiResult<Response> {
    let g = st.lock();
    let sessions: Vec<&TuringSession> = g.store.sessions().collect();
    let cases = &g.cases.cases;
    let grouping = q.grouping.as_deref().unwrap_or("all");
    match (q.format.as_deref().unwrap_or("json"), grouping) {
        ("csv", "all") => {
            let csv = to_csv(&full_report(&sessions, cases)?);
            Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], csv).into_response())
        }
        ("json", "all") => Ok(Json(full_report(&sessions, cases)?).into_response()),
        ("json", other) => {
            let gr = Grouping::parse(other).ok_or_else(|| Error::InvalidRequest(format!("unknown grouping {other:?}")))?;
            Ok(Json(report(&sessions, cases, gr)?).into_response())
        }
        (f, gr) => Err(Error::InvalidRequest(format!("unsupported report format {f:?} with grouping {gr:?}")).into()),
    }
}

async fn get_image(State(st): State<AppState>, Path((case_id, file)): Path<(String, String)>) -> ApiResult<Response> {
    let axis = file
        .strip_suffix(".png")
        .and_then(Axis::parse)
        .ok_or_else(|| Error::InvalidRequest(format!("unknown image {file:?}")))?;
    let bytes = st.lock().cases.image(&case_id, axis)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

/// Binds `addr` and serves until Ctrl-C. `on_bound` receives the actual
/// address, which matters when port 0 was requested.
pub async fn serve(state: AppState, addr: SocketAddr, on_bound: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
