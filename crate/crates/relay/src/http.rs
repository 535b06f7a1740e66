//! HTTP surface of the relay: three verbs on one path.
//!
//! ```text
//! GET  /contacts              -> 200 {"email": <email>}
//! PUT  /contacts              -> 200 {"instance": <id>, "expires": <ms>}
//!      body {"contact": <token>}
//! POST /contacts              -> 200 {"count": <n>}
//!      body {"to": <target>, "data": {..}}
//! ```
//!
//! All requests carry `Authorization: Bearer <auth-token>`. Errors are
//! `{"error": <message>}` with 400/401/404 as appropriate.

use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde_json::{json, Value};

use callmesh_core::id::{AuthToken, ContactToken, Target};
use callmesh_core::time::Millis;

use crate::persist::{FileStore, StoreOp};
use crate::service::{PushTransport, RelayError, RelayService};

/// Where request timestamps come from. Production uses the wall clock; the
/// test/simulation configuration pins time explicitly.
pub enum HttpClock {
    Wall,
    Fixed(Millis),
}

impl HttpClock {
    fn now(&self) -> Millis {
        match self {
            HttpClock::Wall => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as Millis)
                .unwrap_or(0),
            HttpClock::Fixed(ms) => *ms,
        }
    }
}

pub struct HttpState {
    pub service: RelayService,
    pub transport: Box<dyn PushTransport + Send>,
    pub persist: Option<FileStore>,
    pub clock: HttpClock,
}

pub type SharedState = Arc<Mutex<HttpState>>;

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/contacts", get(login).put(register).post(send))
        .with_state(state)
}

fn error_response(status: StatusCode, msg: &str) -> Response {
    (status, Json(json!({ "error": msg }))).into_response()
}

fn relay_error(err: RelayError) -> Response {
    match err {
        RelayError::Unauthorized => error_response(StatusCode::UNAUTHORIZED, "unauthorized"),
        RelayError::UnknownRecipient => error_response(StatusCode::NOT_FOUND, "unknown recipient"),
        RelayError::BadRequest(msg) => error_response(StatusCode::BAD_REQUEST, &msg),
    }
}

#[allow(clippy::result_large_err)] // the Err is the ready-to-send reply
fn bearer(headers: &HeaderMap) -> Result<AuthToken, Response> {
    let unauthorized = || error_response(StatusCode::UNAUTHORIZED, "unauthorized");
    let value = headers.get("authorization").ok_or_else(unauthorized)?;
    let text = value.to_str().map_err(|_| unauthorized())?;
    let token = text.strip_prefix("Bearer ").ok_or_else(unauthorized)?;
    AuthToken::new(token.trim()).map_err(|_| unauthorized())
}

async fn login(State(state): State<SharedState>, headers: HeaderMap) -> Response {
    let auth = match bearer(&headers) {
        Ok(a) => a,
        Err(resp) => return resp,
    };
    let guard = state.lock().expect("relay state lock");
    match guard.service.login(&auth) {
        Ok(user) => Json(json!({ "email": user })).into_response(),
        Err(e) => relay_error(e),
    }
}

async fn register(
    State(state): State<SharedState>,
    headers: HeaderMap,
    body: Option<Json<Value>>,
) -> Response {
    let auth = match bearer(&headers) {
        Ok(a) => a,
        Err(resp) => return resp,
    };
    let Some(Json(body)) = body else {
        return error_response(StatusCode::BAD_REQUEST, "body must be a JSON object");
    };
    let Some(contact_str) = body.get("contact").and_then(Value::as_str) else {
        return error_response(StatusCode::BAD_REQUEST, "missing contact token");
    };
    let contact = match ContactToken::new(contact_str) {
        Ok(c) => c,
        Err(e) => {
            return error_response(StatusCode::BAD_REQUEST, &format!("bad contact token: {e}"))
        }
    };

    let mut guard = state.lock().expect("relay state lock");
    let now = guard.clock.now();
    match guard.service.register_contact(&auth, contact.clone(), now) {
        Ok(out) => {
            if let Some(store) = &guard.persist {
                if let Err(e) = store.append(&StoreOp::Register {
                    auth,
                    contact,
                    at: now,
                }) {
                    return error_response(StatusCode::INTERNAL_SERVER_ERROR, &e.to_string());
                }
            }
            Json(json!({ "instance": out.instance, "expires": out.expires })).into_response()
        }
        Err(e) => relay_error(e),
    }
}

async fn send(
    State(state): State<SharedState>,
    headers: HeaderMap,
    body: Option<Json<Value>>,
) -> Response {
    let auth = match bearer(&headers) {
        Ok(a) => a,
        Err(resp) => return resp,
    };
    let Some(Json(body)) = body else {
        return error_response(StatusCode::BAD_REQUEST, "body must be a JSON object");
    };
    let Some(to_str) = body.get("to").and_then(Value::as_str) else {
        return error_response(StatusCode::BAD_REQUEST, "missing target");
    };
    let to: Target = match to_str.parse() {
        Ok(t) => t,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, &format!("bad target: {e}")),
    };
    let data = match body.get("data") {
        Some(Value::Object(map)) => map.clone(),
        Some(_) => return error_response(StatusCode::BAD_REQUEST, "data must be an object"),
        None => return error_response(StatusCode::BAD_REQUEST, "missing data"),
    };

    let mut guard = state.lock().expect("relay state lock");
    let now = guard.clock.now();
    let HttpState {
        service, transport, ..
    } = &mut *guard;
    match service.send(&auth, &to, data, now, transport.as_mut()) {
        Ok(out) => Json(json!({ "count": out.count })).into_response(),
        Err(e) => relay_error(e),
    }
}

/// Convenience constructor for tests and the simulation harness.
pub fn shared_state(
    service: RelayService,
    transport: Box<dyn PushTransport + Send>,
    clock: HttpClock,
) -> SharedState {
    Arc::new(Mutex::new(HttpState {
        service,
        transport,
        persist: None,
        clock,
    }))
}
