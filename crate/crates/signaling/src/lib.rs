//! Call-invite signaling.
//!
//! One [`engine::SignalingEngine`] lives on each device. It is a pure state
//! machine: commands and received signals go in, [`engine::SignalEffect`]s
//! come out, and the embedding layer (service, CLI, or simulation harness)
//! turns effects into actual sends, timers, and media setup. Nothing in
//! this crate does I/O or reads a clock.
//!
//! Two transports share the same grammar: push signaling via the relay
//! (with device forking), and copy-paste email blobs for callees without a
//! push account ([`email`]).

pub mod email;
pub mod engine;

pub use engine::{
    Direction, EngineConfig, EngineStats, InviteRecord, InviteState, SignalEffect, SignalMode,
    SignalingEngine, SignalingError,
};
