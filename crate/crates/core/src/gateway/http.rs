//! HTTP binding: every request goes through the same dispatch table as the
//! CLI. The agent comes from the `X-Agent` header.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, HeaderMap, StatusCode, Uri};
use axum::response::{IntoResponse, Response as HttpResponse};
use axum::Router;

use super::{Gateway, Method, Request, RequestContext, Response};
use crate::value::AgentId;

pub const AGENT_HEADER: &str = "x-agent";

struct Shared {
    gateway: Mutex<Gateway>,
    node: Option<String>,
}

pub fn router(gateway: Gateway, node: Option<String>) -> Router {
    let shared = Arc::new(Shared { gateway: Mutex::new(gateway), node });
    Router::new().fallback(handle).with_state(shared)
}

async fn handle(
    State(shared): State<Arc<Shared>>,
    method: axum::http::Method,
    uri: Uri,
    Query(query): Query<Vec<(String, String)>>,
    headers: HeaderMap,
    body: Bytes,
) -> HttpResponse {
    let body = match String::from_utf8(body.to_vec()) {
        Ok(b) => b,
        Err(_) => return (StatusCode::BAD_REQUEST, "body is not UTF-8").into_response(),
    };
    let agent = headers.get(AGENT_HEADER).and_then(|v| v.to_str().ok()).and_then(|v| AgentId::new(v.trim()).ok());
    let req = Request { method: Method::parse(method.as_str()), path: uri.path().to_string(), query, body };
    let ctx = RequestContext { agent, where_: shared.node.clone() };
    let res = tokio::task::spawn_blocking(move || {
        let gateway = shared.gateway.lock().unwrap_or_else(|p| p.into_inner());
        gateway.handle(&req, &ctx)
    })
    .await
    .unwrap_or_else(|e| Response { status: 500, content_type: super::JSON, body: format!("{{\"error\":\"Internal\",\"message\":{:?}}}", e.to_string()) });
    let status = StatusCode::from_u16(res.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, [(header::CONTENT_TYPE, res.content_type)], res.body).into_response()
}

pub async fn serve(gateway: Gateway, addr: SocketAddr, node: Option<String>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(gateway, node)).await
}
