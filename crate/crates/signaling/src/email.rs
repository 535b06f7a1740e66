//! Email-mode signaling blobs.
//!
//! When the callee has no push account, the invite travels as text the
//! caller can paste into any channel — the canonical one being a `mailto:`
//! URL. A blob is `EZB1.` followed by standard base64 of a small JSON
//! payload. Blobs expire two minutes after issue; the receiving side
//! enforces this on paste, since there is no server in the path to do it.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use percent_encoding::{utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};

/// Percent-encode everything except RFC 3986 unreserved characters.
const URL: &AsciiSet = &NON_ALPHANUMERIC
    .remove(b'-')
    .remove(b'_')
    .remove(b'.')
    .remove(b'~');
use serde::{Deserialize, Serialize};

use callmesh_core::id::{ConferenceId, InviteId, NodeId, UserId};
use callmesh_core::message::{SessionDescriptor, SignalKind, SignalMessage};
use callmesh_core::time::{Millis, EMAIL_EXPIRY};

/// Version prefix. Bump the digit if the payload schema ever changes.
pub const PREFIX: &str = "EZB1.";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EmailError {
    #[error("text does not contain a signaling blob")]
    NoBlob,
    #[error("blob is not valid base64")]
    BadBase64,
    #[error("blob payload is malformed")]
    BadPayload,
    #[error("unsupported blob version {0}")]
    BadVersion(u8),
    #[error("blob expired: issued {age} ms ago, limit {EMAIL_EXPIRY}")]
    Expired { age: Millis },
}

/// The JSON carried inside a blob. Field order is fixed by this struct, so
/// encoding is deterministic.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct BlobPayload {
    v: u8,
    kind: SignalKind,
    invite: InviteId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    conf: Option<ConferenceId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    topic: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sdp: Option<SessionDescriptor>,
    /// Correlates an accept with the exact invite emission it answers.
    txn: String,
    /// Issue instant; the expiry clock starts here.
    at: Millis,
}

/// A successfully parsed, unexpired blob.
#[derive(Clone, Debug)]
pub struct ParsedBlob {
    pub msg: SignalMessage,
    pub txn: String,
    pub at: Millis,
}

pub struct BlobParts<'a> {
    pub kind: SignalKind,
    pub invite: &'a InviteId,
    pub conf: Option<&'a ConferenceId>,
    pub node: Option<&'a NodeId>,
    pub topic: Option<&'a str>,
    pub sdp: Option<&'a SessionDescriptor>,
    pub txn: &'a str,
    pub at: Millis,
}

pub fn encode(parts: &BlobParts<'_>) -> String {
    let payload = BlobPayload {
        v: 1,
        kind: parts.kind,
        invite: parts.invite.clone(),
        conf: parts.conf.cloned(),
        node: parts.node.cloned(),
        topic: parts.topic.map(str::to_owned),
        sdp: parts.sdp.cloned(),
        txn: parts.txn.to_owned(),
        at: parts.at,
    };
    let json = serde_json::to_string(&payload).expect("blob payload serializes");
    format!("{PREFIX}{}", BASE64.encode(json))
}

/// Parse pasted text. Tolerates surrounding prose (greetings, signatures),
/// extracting the first `EZB1.` token it finds. Expiry is strict: strictly
/// older than the limit is dead, exactly at the limit still works.
pub fn parse(text: &str, now: Millis) -> Result<ParsedBlob, EmailError> {
    let start = text.find(PREFIX).ok_or(EmailError::NoBlob)?;
    let rest = &text[start + PREFIX.len()..];
    let end = rest
        .find(|c: char| !(c.is_ascii_alphanumeric() || c == '+' || c == '/' || c == '='))
        .unwrap_or(rest.len());
    let b64 = &rest[..end];
    if b64.is_empty() {
        return Err(EmailError::BadBase64);
    }
    let bytes = BASE64.decode(b64).map_err(|_| EmailError::BadBase64)?;
    let payload: BlobPayload =
        serde_json::from_slice(&bytes).map_err(|_| EmailError::BadPayload)?;
    if payload.v != 1 {
        return Err(EmailError::BadVersion(payload.v));
    }
    let age = now.saturating_sub(payload.at);
    if age > EMAIL_EXPIRY {
        return Err(EmailError::Expired { age });
    }
    let mut msg = SignalMessage::new(payload.kind, payload.invite);
    msg.conf = payload.conf;
    msg.node = payload.node;
    msg.topic = payload.topic;
    msg.sdp = payload.sdp;
    Ok(ParsedBlob {
        msg,
        txn: payload.txn,
        at: payload.at,
    })
}

/// Render the canonical carrier: a `mailto:` URL the caller's mail client
/// can open directly.
pub fn mailto(to: &UserId, topic: Option<&str>, blob: &str) -> String {
    let subject = match topic {
        Some(t) => format!("Call invitation: {t}"),
        None => "Call invitation".to_string(),
    };
    let body = format!("Paste this into your call app to join:\n\n{blob}\n");
    format!(
        "mailto:{}?subject={}&body={}",
        utf8_percent_encode(to.as_str(), URL),
        utf8_percent_encode(&subject, URL),
        utf8_percent_encode(&body, URL),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use callmesh_core::message::DescriptorRole;

    fn offer(at: Millis) -> SessionDescriptor {
        SessionDescriptor {
            role: DescriptorRole::Offer,
            blob: "sdp:offer:x".into(),
            at,
            validity: 120_000,
        }
    }

    fn invite_blob(at: Millis) -> String {
        encode(&BlobParts {
            kind: SignalKind::Invite,
            invite: &InviteId::new("inv0000000001").unwrap(),
            conf: Some(&ConferenceId::new("conf000000001").unwrap()),
            node: Some(&NodeId::new("node000000001").unwrap()),
            topic: Some("standup"),
            sdp: Some(&offer(at)),
            txn: "txn12345",
            at,
        })
    }

    #[test]
    fn roundtrip() {
        let blob = invite_blob(10_000);
        assert!(blob.starts_with("EZB1."));
        let parsed = parse(&blob, 10_500).unwrap();
        assert_eq!(parsed.txn, "txn12345");
        assert_eq!(parsed.at, 10_000);
        assert_eq!(parsed.msg.kind, SignalKind::Invite);
        assert_eq!(parsed.msg.conf.as_ref().unwrap().as_str(), "conf000000001");
        assert_eq!(parsed.msg.sdp.as_ref().unwrap().blob, "sdp:offer:x");
        assert_eq!(parsed.msg.topic.as_deref(), Some("standup"));
    }

    #[test]
    fn encoding_is_deterministic() {
        assert_eq!(invite_blob(10_000), invite_blob(10_000));
        assert_ne!(invite_blob(10_000), invite_blob(10_001));
    }

    #[test]
    fn tolerates_surrounding_prose() {
        let blob = invite_blob(0);
        let text = format!("Hi Bob!\n\nJoin me here: {blob}\n\nCheers,\nAlice");
        let parsed = parse(&text, 1_000).unwrap();
        assert_eq!(parsed.msg.kind, SignalKind::Invite);
    }

    #[test]
    fn expiry_boundaries() {
        let blob = invite_blob(10_000);
        // 119 s old: fine.
        assert!(parse(&blob, 10_000 + 119_000).is_ok());
        // exactly 120 s old: still fine (strictly-older-than rule).
        assert!(parse(&blob, 10_000 + 120_000).is_ok());
        // 121 s old: dead.
        assert_eq!(
            parse(&blob, 10_000 + 121_000).unwrap_err(),
            EmailError::Expired { age: 121_000 }
        );
        // clock skew: a blob "from the future" is simply fresh.
        assert!(parse(&blob, 5_000).is_ok());
    }

    #[test]
    fn malformed_blobs() {
        assert_eq!(parse("no blob here", 0).unwrap_err(), EmailError::NoBlob);
        assert_eq!(parse("EZB1.!!!!", 0).unwrap_err(), EmailError::BadBase64);
        let garbage = format!("EZB1.{}", BASE64.encode("not json"));
        assert_eq!(parse(&garbage, 0).unwrap_err(), EmailError::BadPayload);
        let wrong_version = format!(
            "EZB1.{}",
            BASE64.encode(r#"{"v":9,"kind":"invite","invite":"i1","txn":"t","at":0}"#)
        );
        assert_eq!(
            parse(&wrong_version, 0).unwrap_err(),
            EmailError::BadVersion(9)
        );
    }

    #[test]
    fn mailto_is_a_single_line_url_within_budget() {
        // A descriptor blob of a full kilobyte — the worst case the format
        // must still carry comfortably.
        let big = SessionDescriptor {
            role: DescriptorRole::Offer,
            blob: "v".repeat(1024),
            at: 0,
            validity: 120_000,
        };
        let blob = encode(&BlobParts {
            kind: SignalKind::Invite,
            invite: &InviteId::new("inv0000000001").unwrap(),
            conf: Some(&ConferenceId::new("conf000000001").unwrap()),
            node: Some(&NodeId::new("node000000001").unwrap()),
            topic: Some("quarterly planning"),
            sdp: Some(&big),
            txn: "txn12345",
            at: 0,
        });
        let url = mailto(
            &UserId::new("emma@example.net").unwrap(),
            Some("quarterly planning"),
            &blob,
        );
        assert!(url.starts_with("mailto:emma%40example.net?subject="));
        assert!(url.len() < 2000, "mailto URL is {} chars", url.len());
        assert!(!url.contains(char::is_whitespace));
        // The blob survives a url-decode + re-parse.
        let decoded: String = percent_encoding::percent_decode_str(&url)
            .decode_utf8()
            .unwrap()
            .into_owned();
        assert!(parse(&decoded, 0).is_ok());
    }
}
