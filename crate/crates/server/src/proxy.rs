//! Embedded reverse proxy that watches chat traffic.
//!
//! Requests and responses are forwarded as streams and never inspected. A
//! transaction record is built from the request line, a user header and the
//! response status, and is emitted only once the response body has been
//! passed through to the end. Resets and upstream errors emit nothing.

use crate::clock::Clock;
use crate::config::ProxySettings;
use axum::body::Body;
use axum::extract::{Request, State};
use axum::http::header::{self, HeaderMap, HeaderName};
use axum::http::{StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;
use bytes::Bytes;
use ecometer_core::HttpTransactionRecord;
use http_body::{Body as HttpBody, Frame, SizeHint};
use hyper_util::client::legacy::connect::HttpConnector;
use hyper_util::client::legacy::Client;
use hyper_util::rt::TokioExecutor;
use std::pin::Pin;
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll};
use thiserror::Error;
use tokio::sync::mpsc::UnboundedSender;

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error("ingest.proxy.upstream `{0}` is not an http:// URL with a host")]
    BadUpstream(String),
}

/// The parts of a transaction known once the request head has been seen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingTransaction {
    pub user_id: String,
    pub method: String,
    pub url: String,
}

impl PendingTransaction {
    /// Reads the request head only; the body type is never touched.
    pub fn from_request<B>(req: &axum::http::Request<B>, settings: &ProxySettings) -> Option<Self> {
        let user = req
            .headers()
            .get(settings.user_header.as_str())
            .and_then(|v| v.to_str().ok())
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(str::to_string)
            .or_else(|| settings.default_user.clone())?;
        let path_and_query = req.uri().path_and_query().map_or("/", |pq| pq.as_str());
        Some(Self {
            user_id: user,
            method: req.method().as_str().to_string(),
            url: format!("{}{}", settings.public_base_url.trim_end_matches('/'), path_and_query),
        })
    }

    /// Reads the response head only.
    pub fn complete<B>(
        self,
        resp: &axum::http::Response<B>,
        observed_at: chrono::DateTime<chrono::Utc>,
    ) -> HttpTransactionRecord {
        HttpTransactionRecord {
            user_id: self.user_id,
            method: self.method,
            url: self.url,
            status: resp.status().as_u16(),
            observed_at: ecometer_core::timefmt::truncate_ms(observed_at),
        }
    }
}

type Emit = Arc<dyn Fn(HttpTransactionRecord) + Send + Sync>;

/// Passes `inner` through and emits `record` when it ends cleanly.
pub struct ObservedBody<B> {
    inner: B,
    pending: Mutex<Option<(PendingTransaction, StatusCode)>>,
    clock: Arc<dyn Clock>,
    emit: Emit,
}

impl<B> ObservedBody<B> {
    fn finish(&self) {
        if let Some((pending, status)) = self.pending.lock().unwrap().take() {
            let resp = axum::http::Response::builder().status(status).body(()).unwrap();
            (self.emit)(pending.complete(&resp, self.clock.now()));
        }
    }

    fn abandon(&self) {
        self.pending.lock().unwrap().take();
    }
}

impl<B> HttpBody for ObservedBody<B>
where
    B: HttpBody<Data = Bytes> + Unpin,
{
    type Data = Bytes;
    type Error = B::Error;

    fn poll_frame(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Option<Result<Frame<Bytes>, B::Error>>> {
        let polled = Pin::new(&mut self.inner).poll_frame(cx);
        match &polled {
            Poll::Ready(None) => self.finish(),
            Poll::Ready(Some(Err(_))) => self.abandon(),
            _ => {}
        }
        polled
    }

    fn is_end_stream(&self) -> bool {
        let ended = self.inner.is_end_stream();
        if ended {
            self.finish();
        }
        ended
    }

    fn size_hint(&self) -> SizeHint {
        self.inner.size_hint()
    }
}

const HOP_BY_HOP: [&str; 8] = [
    "connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "te",
    "trailer",
    "transfer-encoding",
    "upgrade",
];

fn strip_hop_by_hop(headers: &mut HeaderMap) {
    for name in HOP_BY_HOP {
        headers.remove(name);
    }
}

#[derive(Clone)]
struct ProxyState {
    client: Client<HttpConnector, Body>,
    upstream: Uri,
    settings: Arc<ProxySettings>,
    clock: Arc<dyn Clock>,
    emit: Emit,
}

/// A router that forwards every request to `settings.upstream` and sends a
/// record to `sink` for each completed exchange that names a user.
pub fn router(
    settings: ProxySettings,
    clock: Arc<dyn Clock>,
    sink: UnboundedSender<HttpTransactionRecord>,
) -> Result<Router, ProxyError> {
    let upstream: Uri = settings
        .upstream
        .parse()
        .map_err(|_| ProxyError::BadUpstream(settings.upstream.clone()))?;
    if upstream.scheme_str() != Some("http") || upstream.authority().is_none() {
        return Err(ProxyError::BadUpstream(settings.upstream.clone()));
    }
    let emit: Emit = Arc::new(move |record| {
        let _ = sink.send(record);
    });
    let state = ProxyState {
        client: Client::builder(TokioExecutor::new()).build_http(),
        upstream,
        settings: Arc::new(settings),
        clock,
        emit,
    };
    Ok(Router::new().fallback(forward).with_state(state))
}

async fn forward(State(p): State<ProxyState>, req: Request) -> Response {
    let pending = PendingTransaction::from_request(&req, &p.settings);
    if pending.is_none() {
        tracing::debug!(uri = %req.uri(), "no user for proxied request; it will not be counted");
    }
    let (mut parts, body) = req.into_parts();
    strip_hop_by_hop(&mut parts.headers);
    parts.headers.remove(header::HOST);
    if let Ok(name) = HeaderName::try_from(p.settings.user_header.as_str()) {
        parts.headers.remove(name);
    }
    let mut target = p.upstream.clone().into_parts();
    target.path_and_query = parts.uri.path_and_query().cloned().or_else(|| Some("/".parse().unwrap()));
    parts.uri = match Uri::from_parts(target) {
        Ok(uri) => uri,
        Err(e) => return (StatusCode::BAD_REQUEST, format!("bad request target: {e}")).into_response(),
    };

    let resp = match p.client.request(axum::http::Request::from_parts(parts, body)).await {
        Ok(resp) => resp,
        Err(e) => {
            tracing::warn!(error = %e, "upstream unreachable");
            return (StatusCode::BAD_GATEWAY, format!("upstream unreachable: {e}")).into_response();
        }
    };
    let (mut parts, body) = resp.into_parts();
    strip_hop_by_hop(&mut parts.headers);
    let observed = ObservedBody {
        inner: body,
        pending: Mutex::new(pending.map(|t| (t, parts.status))),
        clock: p.clock.clone(),
        emit: p.emit.clone(),
    };
    Response::from_parts(parts, Body::new(observed))
}
