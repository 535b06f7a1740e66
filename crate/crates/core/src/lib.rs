//! Shared vocabulary for the callmesh workspace.
//!
//! Everything here is deliberately free of I/O: identifiers, the signaling
//! message grammar, instance-id derivation, deterministic id generation, and
//! virtual time. The service, engine, overlay, and harness crates all build
//! on these types.

pub mod id;
pub mod instance;
pub mod message;
pub mod time;

pub use id::{
    AuthToken, ConferenceId, ContactToken, IdError, IdGen, InstanceId, InviteId, MessageId, NodeId,
    Target, UserId,
};
pub use instance::{crc32, instance_id, to_base36};
pub use message::{
    CancelCause, DescriptorRole, MessageError, RejectReason, SessionDescriptor, SignalKind,
    SignalMessage,
};
pub use time::{Millis, VirtualClock};

/// Arbitrary JSON payload carried by storage resources and push messages.
pub type Document = serde_json::Value;
