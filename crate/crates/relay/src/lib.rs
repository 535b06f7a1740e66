//! The push-notification relay.
//!
//! A deliberately small service: it maps auth tokens to push contact
//! tokens, fans one logical send out to every registered device of the
//! target user (or exactly one pinned instance), stamps `To`/`From` routing
//! keys into the payload, and hands the result to a pluggable push
//! transport. It never interprets payloads and keeps no message history.

pub mod http;
pub mod persist;
pub mod service;

pub use service::{
    ContactRecord, DeliverOutcome, PushEnvelope, PushTransport, RecordingTransport,
    RegisterOutcome, RelayError, RelayService, SendOutcome,
};
