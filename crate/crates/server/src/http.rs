//! JSON-over-HTTP API for the panel and for traffic observers.

use crate::service::{Service, ServiceError, TransactionReport};
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use ecometer_core::timefmt;
use futures::Stream;
use serde::Deserialize;
use serde_json::json;
use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;
use tokio::sync::broadcast::error::RecvError;

pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match e {
            ServiceError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::OutOfOrder(_) => StatusCode::CONFLICT,
            ServiceError::Storage(_) => StatusCode::SERVICE_UNAVAILABLE,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(e.status(), e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.body_text())
    }
}

type AppState = Arc<Service>;

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/v1/state/{user}", get(get_state))
        .route("/v1/session/{user}", get(get_session))
        .route("/v1/events/transaction", post(post_transaction))
        .route("/events/transaction", post(post_transaction))
        .route("/v1/events/ui", post(post_ui_event))
        .route("/v1/stream/{user}", get(stream))
        .route("/v1/config", get(get_config))
        .route_layer(middleware::from_fn_with_state(svc.clone(), require_token))
        .route("/v1/healthz", get(healthz))
        .with_state(svc)
}

async fn require_token(State(svc): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &svc.config().server.bearer_token {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

#[derive(Deserialize)]
struct AtParam {
    at: Option<String>,
}

fn parse_at(at: Option<&str>) -> Result<Option<DateTime<Utc>>, ApiError> {
    at.map(|s| {
        timefmt::parse(s).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("bad timestamp `{s}`: {e}")))
    })
    .transpose()
}

async fn get_state(
    State(svc): State<AppState>,
    Path(user): Path<String>,
    query: Result<Query<AtParam>, QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(q) = query?;
    let at = parse_at(q.at.as_deref())?;
    Ok(Json(svc.state(&user, at)).into_response())
}

async fn get_session(State(svc): State<AppState>, Path(user): Path<String>) -> Result<Response, ApiError> {
    match svc.session(&user) {
        Some(s) => Ok(Json(s).into_response()),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, format!("no recorded activity for {user}"))),
    }
}

async fn post_transaction(
    State(svc): State<AppState>,
    body: Result<Json<TransactionReport>, JsonRejection>,
) -> Result<Response, ApiError> {
    if !svc.config().ingest.webhook {
        return Err(ApiError::new(StatusCode::FORBIDDEN, "webhook ingest is disabled"));
    }
    let Json(report) = body?;
    Ok(Json(svc.ingest_transaction(report)?).into_response())
}

#[derive(Deserialize)]
struct UiEventBody {
    user_id: String,
    kind: String,
    at: Option<String>,
}

async fn post_ui_event(
    State(svc): State<AppState>,
    body: Result<Json<UiEventBody>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(body) = body?;
    let at = parse_at(body.at.as_deref())?;
    Ok(Json(svc.ui_event(&body.user_id, &body.kind, at)?).into_response())
}

async fn healthz(State(svc): State<AppState>) -> Response {
    Json(svc.health()).into_response()
}

async fn get_config(State(svc): State<AppState>) -> Response {
    Json(svc.config().redacted()).into_response()
}

/// Pushes the user's panel state on connect, after each of their events,
/// and on every tick.
async fn stream(State(svc): State<AppState>, Path(user): Path<String>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = svc.subscribe();
    let mut tick = tokio::time::interval(Duration::from_secs(svc.config().server.stream_tick_seconds));
    tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    let updates = futures::stream::unfold((svc, user, rx, tick), |(svc, user, mut rx, mut tick)| async move {
        loop {
            tokio::select! {
                // The first tick completes at once, giving the initial push.
                _ = tick.tick() => break,
                msg = rx.recv() => match msg {
                    Ok(alias) if svc.alias_of(&user).as_deref() == Some(alias.as_str()) => break,
                    Ok(_) => continue,
                    Err(RecvError::Lagged(_)) => break,
                    Err(RecvError::Closed) => return None,
                },
            }
        }
        let bundle = svc.state(&user, None);
        let event = Event::default().event("state").json_data(&bundle).ok()?;
        Some((Ok(event), (svc, user, rx, tick)))
    });
    Sse::new(updates).keep_alive(KeepAlive::default())
}
