//! The signaling message grammar carried inside push payloads and email
//! blobs.
//!
//! A [`SignalMessage`] is what one device says to another about a call
//! attempt. On the wire it travels as the `data` object of a push (with
//! relay-added `To`/`From` routing keys) or inside a base64 email blob.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::id::{ConferenceId, InviteId, NodeId, Target};
use crate::time::Millis;

#[derive(Debug, thiserror::Error)]
pub enum MessageError {
    #[error("signal payload is not a JSON object")]
    NotAnObject,
    #[error("invalid signal payload: {0}")]
    Invalid(#[from] serde_json::Error),
}

/// What a signal says about the call attempt it belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalKind {
    /// Caller asks a user to join a conference. Forked to every device.
    Invite,
    /// One device answers; carries that device's session answer.
    Accept,
    /// A human saw the call and refused it. Ends the whole invite.
    Decline,
    /// A device bows out without human input (timeout, busy, merge).
    Reject,
    /// Caller retires an invite; devices stop ringing.
    Cancel,
}

/// Why a device rejected without asking its human.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RejectReason {
    /// Rang for the full window with no interaction.
    Timeout,
    /// Local policy refused because another call is active.
    Busy,
    /// The callee chose to pull the caller into an existing conference
    /// instead; a counter-invite follows.
    Merge,
}

/// Why a caller cancelled; determines whether still-ringing devices record
/// a missed call.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CancelCause {
    /// Another device of the callee answered. The user knew; not missed.
    AnsweredElsewhere,
    /// Another device of the callee declined. The user chose; not missed.
    DeclinedElsewhere,
    /// The caller gave up or timed out. The callee never reacted: missed.
    CallerCancelled,
}

impl CancelCause {
    /// Should a device that was still ringing record a missed call?
    pub fn missed(self) -> bool {
        match self {
            CancelCause::AnsweredElsewhere => false,
            CancelCause::DeclinedElsewhere => false,
            CancelCause::CallerCancelled => true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorRole {
    Offer,
    Answer,
}

/// A session description: which end it came from, the opaque blob, and the
/// window in which a connection may still be built from it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionDescriptor {
    pub role: DescriptorRole,
    pub blob: String,
    /// Issue instant, virtual ms.
    pub at: Millis,
    /// Descriptors older than this (relative to `at`) cannot connect.
    pub validity: Millis,
}

impl SessionDescriptor {
    pub fn is_fresh(&self, now: Millis) -> bool {
        now.saturating_sub(self.at) <= self.validity
    }
}

/// One signaling statement. Optional fields are present only where the kind
/// calls for them; `To`/`From` are stamped by the relay, never by the
/// sending device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalMessage {
    pub kind: SignalKind,
    pub invite: InviteId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conf: Option<ConferenceId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sdp: Option<SessionDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<RejectReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<CancelCause>,
    #[serde(rename = "To", default, skip_serializing_if = "Option::is_none")]
    pub to: Option<Target>,
    #[serde(rename = "From", default, skip_serializing_if = "Option::is_none")]
    pub from: Option<Target>,
}

impl SignalMessage {
    pub fn new(kind: SignalKind, invite: InviteId) -> Self {
        Self {
            kind,
            invite,
            conf: None,
            node: None,
            topic: None,
            sdp: None,
            reason: None,
            cause: None,
            to: None,
            from: None,
        }
    }

    /// Render as the push `data` object.
    pub fn to_data(&self) -> Map<String, Value> {
        match serde_json::to_value(self) {
            Ok(Value::Object(map)) => map,
            _ => unreachable!("SignalMessage serializes to an object"),
        }
    }

    /// Parse a received push `data` object.
    pub fn from_data(data: &Map<String, Value>) -> Result<Self, MessageError> {
        Ok(serde_json::from_value(Value::Object(data.clone()))?)
    }

    pub fn from_value(v: &Value) -> Result<Self, MessageError> {
        match v {
            Value::Object(_) => Ok(serde_json::from_value(v.clone())?),
            _ => Err(MessageError::NotAnObject),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::id::UserId;

    fn invite_fixture() -> SignalMessage {
        let mut m = SignalMessage::new(SignalKind::Invite, InviteId::new("inv0000000001").unwrap());
        m.conf = Some(ConferenceId::new("conf000000001").unwrap());
        m.node = Some(NodeId::new("node000000001").unwrap());
        m.topic = Some("design sync".into());
        m.sdp = Some(SessionDescriptor {
            role: DescriptorRole::Offer,
            blob: "sdp:offer:abc".into(),
            at: 1_000,
            validity: 120_000,
        });
        m
    }

    #[test]
    fn wire_shape_of_an_invite() {
        let data = invite_fixture().to_data();
        // serde_json orders object keys; what matters is the exact key set.
        let keys: Vec<&str> = data.keys().map(|k| k.as_str()).collect();
        assert_eq!(keys, vec!["conf", "invite", "kind", "node", "sdp", "topic"]);
        assert_eq!(data["kind"], "invite");
        assert_eq!(data["sdp"]["role"], "offer");
        assert_eq!(data["sdp"]["at"], 1_000);
        // Absent fields are truly absent, not null.
        assert!(!data.contains_key("reason"));
        assert!(!data.contains_key("To"));
    }

    #[test]
    fn relay_routing_keys_roundtrip() {
        let mut data = invite_fixture().to_data();
        // The relay stamps these after the sender hands over the payload.
        data.insert("To".into(), Value::String("bob@home.com".into()));
        data.insert(
            "From".into(),
            Value::String("alice@office.com/czb8ff".into()),
        );

        let parsed = SignalMessage::from_data(&data).unwrap();
        let to = parsed.to.unwrap();
        assert_eq!(to.user, UserId::new("bob@home.com").unwrap());
        assert!(to.is_forked());
        let from = parsed.from.unwrap();
        assert_eq!(from.instance.unwrap().as_str(), "czb8ff");
    }

    #[test]
    fn kind_and_reason_spellings() {
        for (kind, s) in [
            (SignalKind::Invite, "\"invite\""),
            (SignalKind::Accept, "\"accept\""),
            (SignalKind::Decline, "\"decline\""),
            (SignalKind::Reject, "\"reject\""),
            (SignalKind::Cancel, "\"cancel\""),
        ] {
            assert_eq!(serde_json::to_string(&kind).unwrap(), s);
        }
        for (reason, s) in [
            (RejectReason::Timeout, "\"timeout\""),
            (RejectReason::Busy, "\"busy\""),
            (RejectReason::Merge, "\"merge\""),
        ] {
            assert_eq!(serde_json::to_string(&reason).unwrap(), s);
        }
        for (cause, s) in [
            (CancelCause::AnsweredElsewhere, "\"answered-elsewhere\""),
            (CancelCause::DeclinedElsewhere, "\"declined-elsewhere\""),
            (CancelCause::CallerCancelled, "\"caller-cancelled\""),
        ] {
            assert_eq!(serde_json::to_string(&cause).unwrap(), s);
        }
    }

    #[test]
    fn cancel_cause_missed_semantics() {
        assert!(!CancelCause::AnsweredElsewhere.missed());
        assert!(!CancelCause::DeclinedElsewhere.missed());
        assert!(CancelCause::CallerCancelled.missed());
    }

    #[test]
    fn descriptor_freshness_boundary() {
        let d = SessionDescriptor {
            role: DescriptorRole::Offer,
            blob: "b".into(),
            at: 10_000,
            validity: 30_000,
        };
        assert!(d.is_fresh(10_000));
        assert!(d.is_fresh(40_000), "exactly at the validity bound is fresh");
        assert!(!d.is_fresh(40_001));
        assert!(d.is_fresh(5_000), "issued in the future never underflows");
    }

    #[test]
    fn malformed_payloads_are_rejected() {
        assert!(SignalMessage::from_value(&Value::String("hi".into())).is_err());
        let missing_kind = serde_json::json!({ "invite": "abc" });
        assert!(SignalMessage::from_value(&missing_kind).is_err());
        let bad_kind = serde_json::json!({ "kind": "ring", "invite": "abc" });
        assert!(SignalMessage::from_value(&bad_kind).is_err());
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let mut m = invite_fixture();
        m.reason = Some(RejectReason::Merge);
        m.cause = Some(CancelCause::DeclinedElsewhere);
        m.to = Some("x@y.z/abc".parse().unwrap());
        m.from = Some("q@r.s".parse().unwrap());
        let data = m.to_data();
        assert_eq!(SignalMessage::from_data(&data).unwrap(), m);
    }
}
