use std::convert::Infallible;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::Deserialize;
use serde_json::json;

use super::sessions::is_terminal;
use super::{Estimator, JobRequest, Service, ServiceError};

impl ServiceError {
    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::Bind { .. } => "bind_error",
            ServiceError::JobNotFound(_) => "job_not_found",
            ServiceError::JobNotDone { .. } => "job_not_done",
            ServiceError::GroupTooSmall(_) => "group_too_small",
            ServiceError::InvalidJob(_) => "invalid_request",
            ServiceError::SessionNotFound(_) => "session_not_found",
            ServiceError::NotAwaitingUser(_) => "not_awaiting_user",
            ServiceError::BankNotFound { .. } => "bank_not_found",
            ServiceError::Unavailable(_) => "unavailable",
            ServiceError::Store(_) => "store_error",
        }
    }

    pub fn status_code(&self) -> StatusCode {
        match self {
            ServiceError::JobNotFound(_) | ServiceError::SessionNotFound(_) | ServiceError::BankNotFound { .. } => {
                StatusCode::NOT_FOUND
            }
            ServiceError::JobNotDone { .. } | ServiceError::NotAwaitingUser(_) => StatusCode::CONFLICT,
            ServiceError::GroupTooSmall(_) | ServiceError::InvalidJob(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Bind { .. } | ServiceError::Store(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = json!({"error": self.kind(), "message": self.to_string()});
        (self.status_code(), Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ServiceError>;

/// Every route of the service.
pub fn router(service: Service) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/jobs", post(create_job).get(list_jobs))
        .route("/v1/jobs/{id}", get(get_job))
        .route("/v1/jobs/{id}/trajectories", get(get_trajectories))
        .route("/v1/jobs/{id}/export", post(export_job))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/events", get(session_events))
        .route("/v1/sessions/{id}/answer", post(answer_session))
        .route("/v1/banks/{run_id}/{epoch}", get(get_bank))
        .with_state(service)
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({"status": "ok"}))
}

async fn create_job(State(svc): State<Service>, Json(req): Json<JobRequest>) -> ApiResult<impl IntoResponse> {
    let job_id = svc.submit(req)?;
    Ok((StatusCode::CREATED, Json(json!({ "job_id": job_id }))))
}

async fn list_jobs(State(svc): State<Service>) -> impl IntoResponse {
    Json(svc.jobs())
}

async fn get_job(State(svc): State<Service>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(svc.job(&id)?))
}

#[derive(Deserialize)]
struct TrajectoryQuery {
    task_id: Option<String>,
}

async fn get_trajectories(
    State(svc): State<Service>,
    Path(id): Path<String>,
    Query(q): Query<TrajectoryQuery>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(svc.trajectories(&id, q.task_id.as_deref())?))
}

#[derive(Deserialize, Default)]
struct ExportBody {
    #[serde(default)]
    estimator: Estimator,
}

async fn export_job(
    State(svc): State<Service>,
    Path(id): Path<String>,
    body: Option<Json<ExportBody>>,
) -> ApiResult<impl IntoResponse> {
    let est = body.map(|Json(b)| b.estimator).unwrap_or_default();
    Ok(Json(svc.export(&id, est)?))
}

#[derive(Deserialize)]
struct SessionBody {
    description: String,
}

async fn create_session(State(svc): State<Service>, Json(body): Json<SessionBody>) -> ApiResult<impl IntoResponse> {
    let s = svc.start_session(body.description)?;
    Ok((StatusCode::CREATED, Json(json!({ "session_id": s.id }))))
}

async fn get_session(State(svc): State<Service>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(svc.sessions().get(&id)?.info()))
}

#[derive(Deserialize)]
struct AnswerBody {
    answer: String,
}

async fn answer_session(
    State(svc): State<Service>,
    Path(id): Path<String>,
    Json(body): Json<AnswerBody>,
) -> ApiResult<impl IntoResponse> {
    let s = svc.sessions().get(&id)?;
    s.answer(&body.answer)?;
    Ok(Json(json!({ "status": "accepted" })))
}

#[derive(Deserialize)]
struct EventsQuery {
    last_event_id: Option<usize>,
}

/// Server-sent events. Each event's id is its 1-based position, so a client
/// resumes with `Last-Event-ID`. The stream ends after `done` or `failed`.
async fn session_events(
    State(svc): State<Service>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let session = svc.sessions().get(&id)?;
    let from = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse().ok())
        .or(q.last_event_id)
        .unwrap_or(0usize);
    let log = session.log.clone();
    let rx = log.subscribe();
    let closing = svc.closing();
    struct Cursor {
        next: usize,
        buf: std::collections::VecDeque<(usize, crate::autogen::SessionEvent)>,
        finished: bool,
    }
    let init = (
        Cursor {
            next: from,
            buf: Default::default(),
            finished: false,
        },
        rx,
        closing,
    );
    let stream = futures::stream::unfold(init, move |(mut cur, mut rx, mut closing)| {
        let log = log.clone();
        async move {
            loop {
                if let Some((n, ev)) = cur.buf.pop_front() {
                    if is_terminal(&ev) {
                        cur.finished = true;
                        cur.buf.clear();
                    }
                    let name = serde_json::to_value(&ev)
                        .ok()
                        .and_then(|v| v.get("type").and_then(|t| t.as_str()).map(str::to_string))
                        .unwrap_or_else(|| "message".into());
                    let data = serde_json::to_string(&ev).expect("event serializes");
                    let event = Event::default().id(n.to_string()).event(name).data(data);
                    return Some((Ok(event), (cur, rx, closing)));
                }
                if cur.finished || *closing.borrow() {
                    return None;
                }
                let fresh = log.since(cur.next);
                if !fresh.is_empty() {
                    for ev in fresh {
                        cur.next += 1;
                        cur.buf.push_back((cur.next, ev));
                    }
                    continue;
                }
                tokio::select! {
                    r = rx.changed() => if r.is_err() { return None; },
                    _ = closing.changed() => {}
                }
            }
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::new().interval(Duration::from_secs(15))))
}

async fn get_bank(State(svc): State<Service>, Path((run_id, epoch)): Path<(String, u32)>) -> ApiResult<impl IntoResponse> {
    Ok(Json(svc.bank(&run_id, epoch)?))
}
