//! Blocking client for the relay's HTTP API.
//!
//! The relay speaks three verbs on one path (`/contacts`); this crate wraps
//! them in typed calls so devices and tools never hand-build requests:
//!
//! - [`RelayClient::login`] — `GET`, identify the account behind a token
//! - [`RelayClient::register`] — `PUT`, (re)register a push contact token
//! - [`RelayClient::send`] — `POST`, fan a payload out to a target
//!
//! Errors come back as [`ClientError::Api`] carrying the HTTP status and
//! the server's `{"error": ...}` message verbatim, so callers can branch on
//! status without re-parsing bodies.

use serde_json::{Map, Value};

use callmesh_core::id::{AuthToken, InstanceId, Target, UserId};
use callmesh_core::time::Millis;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// The request never produced an HTTP response (connect/timeout/TLS).
    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),
    /// The relay answered with an error status and message.
    #[error("relay returned {status}: {message}")]
    Api { status: u16, message: String },
    /// A 2xx body did not have the documented shape.
    #[error("malformed response: {0}")]
    Malformed(String),
}

/// A successful registration: the derived instance id and the expiry
/// instant (unix milliseconds) after which the registration is dead.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Registration {
    pub instance: InstanceId,
    pub expires: Millis,
}

pub struct RelayClient {
    base: String,
    auth: AuthToken,
    http: reqwest::blocking::Client,
}

impl RelayClient {
    /// `base_url` is the relay root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base_url: &str, auth: AuthToken) -> Self {
        Self {
            base: base_url.trim_end_matches('/').to_string(),
            auth,
            http: reqwest::blocking::Client::new(),
        }
    }

    fn url(&self) -> String {
        format!("{}/contacts", self.base)
    }

    fn bearer(&self) -> String {
        format!("Bearer {}", self.auth.as_str())
    }

    /// Check a body for the documented error envelope and map the status.
    fn check(resp: reqwest::blocking::Response) -> Result<Value, ClientError> {
        let status = resp.status();
        let body: Value = resp.json().unwrap_or(Value::Null);
        if status.is_success() {
            return Ok(body);
        }
        let message = body
            .get("error")
            .and_then(Value::as_str)
            .unwrap_or("unexpected error shape")
            .to_string();
        Err(ClientError::Api {
            status: status.as_u16(),
            message,
        })
    }

    /// Who am I? Returns the account email bound to this auth token.
    pub fn login(&self) -> Result<UserId, ClientError> {
        let body = Self::check(
            self.http
                .get(self.url())
                .header("authorization", self.bearer())
                .send()?,
        )?;
        let email = body
            .get("email")
            .and_then(Value::as_str)
            .ok_or_else(|| ClientError::Malformed(format!("login body: {body}")))?;
        UserId::new(email).map_err(|e| ClientError::Malformed(format!("login email: {e}")))
    }

    /// Register (or refresh) this device's push contact token. The returned
    /// instance id is stable for (account, auth, contact).
    pub fn register(&self, contact: &str) -> Result<Registration, ClientError> {
        let body = Self::check(
            self.http
                .put(self.url())
                .header("authorization", self.bearer())
                .json(&serde_json::json!({ "contact": contact }))
                .send()?,
        )?;
        let instance = body
            .get("instance")
            .and_then(Value::as_str)
            .ok_or_else(|| ClientError::Malformed(format!("register body: {body}")))?;
        let expires = body
            .get("expires")
            .and_then(Value::as_u64)
            .ok_or_else(|| ClientError::Malformed(format!("register body: {body}")))?;
        let instance = InstanceId::new(instance)
            .map_err(|e| ClientError::Malformed(format!("instance id: {e}")))?;
        Ok(Registration { instance, expires })
    }

    /// Send one payload to `to` (a bare user for forked delivery, or
    /// `user/instance` to pin one device). Returns the fan-out count.
    pub fn send(&self, to: &Target, data: Map<String, Value>) -> Result<u32, ClientError> {
        let body = Self::check(
            self.http
                .post(self.url())
                .header("authorization", self.bearer())
                .json(&serde_json::json!({ "to": to.to_string(), "data": data }))
                .send()?,
        )?;
        let count = body
            .get("count")
            .and_then(Value::as_u64)
            .ok_or_else(|| ClientError::Malformed(format!("send body: {body}")))?;
        Ok(count as u32)
    }
}
