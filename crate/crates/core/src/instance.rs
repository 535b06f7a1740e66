//! Instance-id derivation.
//!
//! A device's instance id is `base36(crc32(user || auth || contact))`,
//! lowercase. It is stable for a given registration, cheap to recompute,
//! and changes whenever the contact token rotates — which is exactly the
//! property push routing needs.

use crate::id::{AuthToken, ContactToken, InstanceId, UserId};

/// CRC-32 (ISO-HDLC / zlib polynomial) over the concatenated byte strings.
pub fn crc32(parts: &[&[u8]]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for p in parts {
        h.update(p);
    }
    h.finalize()
}

/// Render a u32 as lowercase base-36, no padding. Zero renders as `"0"`.
pub fn to_base36(mut v: u32) -> String {
    const DIGITS: &[u8; 36] = b"0123456789abcdefghijklmnopqrstuvwxyz";
    if v == 0 {
        return "0".to_string();
    }
    let mut out = Vec::with_capacity(7);
    while v > 0 {
        out.push(DIGITS[(v % 36) as usize]);
        v /= 36;
    }
    out.reverse();
    String::from_utf8(out).expect("base36 digits are ascii")
}

/// Derive the instance id for one registration. An empty contact token is
/// legal: it identifies a sender that has no push registration of its own.
pub fn instance_id(user: &UserId, auth: &AuthToken, contact: &str) -> InstanceId {
    let crc = crc32(&[
        user.as_str().as_bytes(),
        auth.as_str().as_bytes(),
        contact.as_bytes(),
    ]);
    InstanceId::new(to_base36(crc)).expect("base36 is a valid instance id")
}

#[allow(dead_code)]
fn _doc_contact(contact: &ContactToken) -> &str {
    contact.as_str()
}
