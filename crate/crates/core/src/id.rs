//! Identifier newtypes and the deterministic id generator.
//!
//! All identifiers are strings on the wire. The newtypes exist so that the
//! type system keeps users, instances, invites, conferences, and overlay
//! nodes apart, and so that parsing/validation happens exactly once at the
//! boundary.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum IdError {
    #[error("identifier is empty")]
    Empty,
    #[error("identifier contains forbidden character {0:?}")]
    ForbiddenChar(char),
    #[error("auth token is not a UUID")]
    NotUuid,
    #[error("target has an empty instance part")]
    EmptyInstance,
}

fn check_opaque(s: &str) -> Result<(), IdError> {
    if s.is_empty() {
        return Err(IdError::Empty);
    }
    for ch in s.chars() {
        if ch.is_whitespace() || ch.is_control() {
            return Err(IdError::ForbiddenChar(ch));
        }
    }
    Ok(())
}

macro_rules! opaque_id {
    ($(#[$doc:meta])* $name:ident, $($extra_forbidden:literal),*) => {
        $(#[$doc])*
        #[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub struct $name(String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Result<Self, IdError> {
                let s = s.into();
                check_opaque(&s)?;
                $(
                    if let Some(ch) = s.chars().find(|c| *c == $extra_forbidden) {
                        return Err(IdError::ForbiddenChar(ch));
                    }
                )*
                Ok(Self(s))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl FromStr for $name {
            type Err = IdError;
            fn from_str(s: &str) -> Result<Self, IdError> {
                Self::new(s)
            }
        }

        impl TryFrom<String> for $name {
            type Error = IdError;
            fn try_from(s: String) -> Result<Self, IdError> {
                Self::new(s)
            }
        }

        impl From<$name> for String {
            fn from(v: $name) -> String {
                v.0
            }
        }

        impl AsRef<str> for $name {
            fn as_ref(&self) -> &str {
                &self.0
            }
        }
    };
}

opaque_id!(
    /// A user's stable identity: their email address. May not contain `/`
    /// (reserved for target separators) or `#` (reserved for device labels
    /// in tooling).
    UserId, '/', '#'
);

opaque_id!(
    /// Opaque push-routing token owned by the platform push transport.
    ContactToken,
);

opaque_id!(
    /// Device identity derived from (user, auth token, contact token);
    /// lowercase base-36 CRC-32. See [`crate::instance::instance_id`].
    InstanceId, '/'
);

opaque_id!(
    /// Correlates all signaling for one call attempt.
    InviteId,
);

opaque_id!(
    /// Names one conference; shared by every participant.
    ConferenceId,
);

opaque_id!(
    /// One device's presence inside one conference overlay.
    NodeId,
);

opaque_id!(
    /// Dedup identity of one overlay frame.
    MessageId,
);

/// Bearer credential proving account ownership; canonical lowercase
/// hyphenated UUID.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AuthToken(String);

impl AuthToken {
    pub fn new(s: impl AsRef<str>) -> Result<Self, IdError> {
        let parsed = uuid::Uuid::parse_str(s.as_ref()).map_err(|_| IdError::NotUuid)?;
        Ok(Self(parsed.hyphenated().to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AuthToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for AuthToken {
    type Err = IdError;
    fn from_str(s: &str) -> Result<Self, IdError> {
        Self::new(s)
    }
}

impl TryFrom<String> for AuthToken {
    type Error = IdError;
    fn try_from(s: String) -> Result<Self, IdError> {
        Self::new(&s)
    }
}

impl From<AuthToken> for String {
    fn from(v: AuthToken) -> String {
        v.0
    }
}

/// Destination of a push: a whole user (delivered to every registered
/// device) or one specific device instance.
///
/// Wire form: `user` or `user/instance`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Target {
    pub user: UserId,
    pub instance: Option<InstanceId>,
}

impl Target {
    pub fn user(user: UserId) -> Self {
        Self {
            user,
            instance: None,
        }
    }

    pub fn instance(user: UserId, instance: InstanceId) -> Self {
        Self {
            user,
            instance: Some(instance),
        }
    }

    pub fn is_forked(&self) -> bool {
        self.instance.is_none()
    }

    /// Does a push addressed to `self` land on the given device?
    pub fn matches(&self, user: &UserId, instance: &InstanceId) -> bool {
        self.user == *user && self.instance.as_ref().is_none_or(|i| i == instance)
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.instance {
            None => f.write_str(self.user.as_str()),
            Some(inst) => write!(f, "{}/{}", self.user, inst),
        }
    }
}

impl FromStr for Target {
    type Err = IdError;

    fn from_str(s: &str) -> Result<Self, IdError> {
        match s.split_once('/') {
            None => Ok(Target::user(UserId::new(s)?)),
            Some((user, inst)) => {
                if inst.is_empty() {
                    return Err(IdError::EmptyInstance);
                }
                Ok(Target::instance(UserId::new(user)?, InstanceId::new(inst)?))
            }
        }
    }
}

impl Serialize for Target {
    fn serialize<S: Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Target {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

const BASE36_DIGITS: &[u8; 36] = b"0123456789abcdefghijklmnopqrstuvwxyz";

/// Deterministic id source. Every identifier minted anywhere in a simulation
/// descends from one seed, so a run is a pure function of (seed, scenario).
#[derive(Clone, Debug)]
pub struct IdGen {
    rng: ChaCha12Rng,
}

impl IdGen {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    /// Split off an independent child stream. Consumes one draw from the
    /// parent, so sibling order matters and is deterministic.
    pub fn child(&mut self) -> IdGen {
        IdGen::from_seed(self.rng.random())
    }

    pub fn base36(&mut self, len: usize) -> String {
        (0..len)
            .map(|_| BASE36_DIGITS[self.rng.random_range(0..36)] as char)
            .collect()
    }

    pub fn invite_id(&mut self) -> InviteId {
        InviteId(self.base36(13))
    }

    pub fn conference_id(&mut self) -> ConferenceId {
        ConferenceId(self.base36(13))
    }

    pub fn node_id(&mut self) -> NodeId {
        NodeId(self.base36(13))
    }

    pub fn message_id(&mut self) -> MessageId {
        MessageId(self.base36(13))
    }

    /// Short name for chat-message resources.
    pub fn short_id(&mut self) -> String {
        self.base36(5)
    }

    pub fn auth_token(&mut self) -> AuthToken {
        let bytes: [u8; 16] = self.rng.random();
        let id = uuid::Builder::from_random_bytes(bytes).into_uuid();
        AuthToken(id.hyphenated().to_string())
    }

    pub fn contact_token(&mut self, hint: &str) -> ContactToken {
        ContactToken(format!("{hint}-{}", self.base36(10)))
    }

    /// Opaque stand-in for a session description blob.
    pub fn descriptor_blob(&mut self, role: &str) -> String {
        format!("sdp:{role}:{}", self.base36(24))
    }

    /// Transaction tag correlating an email-mode invite with its reply.
    pub fn txn(&mut self) -> String {
        self.base36(8)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn user_id_rejects_separators() {
        assert!(UserId::new("alice@office.com").is_ok());
        assert_eq!(UserId::new("a/b"), Err(IdError::ForbiddenChar('/')));
        assert_eq!(UserId::new("a#0"), Err(IdError::ForbiddenChar('#')));
        assert_eq!(UserId::new(""), Err(IdError::Empty));
        assert_eq!(UserId::new("a b"), Err(IdError::ForbiddenChar(' ')));
    }

    #[test]
    fn auth_token_canonicalizes() {
        let t = AuthToken::new("123E4567-E89B-12D3-A456-426614174000").unwrap();
        assert_eq!(t.as_str(), "123e4567-e89b-12d3-a456-426614174000");
        assert_eq!(AuthToken::new("not-a-uuid"), Err(IdError::NotUuid));
    }

    #[test]
    fn target_parse_and_format() {
        let bare: Target = "alice@office.com".parse().unwrap();
        assert_eq!(bare.user.as_str(), "alice@office.com");
        assert!(bare.is_forked());
        assert_eq!(bare.to_string(), "alice@office.com");

        let pinned: Target = "alice@office.com/czb8ff".parse().unwrap();
        assert_eq!(pinned.instance.as_ref().unwrap().as_str(), "czb8ff");
        assert_eq!(pinned.to_string(), "alice@office.com/czb8ff");

        assert_eq!(
            "alice@office.com/".parse::<Target>(),
            Err(IdError::EmptyInstance)
        );
        assert_eq!("".parse::<Target>(), Err(IdError::Empty));
    }

    #[test]
    fn target_matching() {
        let user = UserId::new("bob@home.com").unwrap();
        let inst_a = InstanceId::new("1dtgrzy").unwrap();
        let inst_b = InstanceId::new("1ij8jzc").unwrap();

        let forked = Target::user(user.clone());
        assert!(forked.matches(&user, &inst_a));
        assert!(forked.matches(&user, &inst_b));

        let pinned = Target::instance(user.clone(), inst_a.clone());
        assert!(pinned.matches(&user, &inst_a));
        assert!(!pinned.matches(&user, &inst_b));

        let other = UserId::new("carol@lab.net").unwrap();
        assert!(!forked.matches(&other, &inst_a));
    }

    #[test]
    fn target_serde_is_a_string() {
        let t: Target = "bob@home.com/1dtgrzy".parse().unwrap();
        assert_eq!(
            serde_json::to_string(&t).unwrap(),
            "\"bob@home.com/1dtgrzy\""
        );
        let back: Target = serde_json::from_str("\"bob@home.com\"").unwrap();
        assert!(back.is_forked());
    }

    #[test]
    fn idgen_is_deterministic_and_seed_sensitive() {
        let mut a = IdGen::from_seed(42);
        let mut b = IdGen::from_seed(42);
        let mut c = IdGen::from_seed(43);
        let ids_a: Vec<_> = (0..8).map(|_| a.invite_id()).collect();
        let ids_b: Vec<_> = (0..8).map(|_| b.invite_id()).collect();
        let ids_c: Vec<_> = (0..8).map(|_| c.invite_id()).collect();
        assert_eq!(ids_a, ids_b);
        assert_ne!(ids_a, ids_c);
    }

    #[test]
    fn idgen_children_are_independent() {
        let mut root = IdGen::from_seed(7);
        let mut c1 = root.child();
        let mut c2 = root.child();
        let d1 = c1.base36(13);
        let d2 = c2.base36(13);
        assert_ne!(d1, d2);

        // Same split order reproduces the same streams.
        let mut root2 = IdGen::from_seed(7);
        assert_eq!(root2.child().base36(13), d1);
        assert_eq!(root2.child().base36(13), d2);
    }

    #[test]
    fn id_space_has_no_practical_collisions() {
        let mut g = IdGen::from_seed(1);
        let mut seen = HashSet::with_capacity(100_000);
        for _ in 0..100_000 {
            assert!(seen.insert(g.base36(13)), "13-char base36 id collided");
        }
    }

    #[test]
    fn minted_ids_are_well_formed() {
        let mut g = IdGen::from_seed(9);
        let inv = g.invite_id();
        assert_eq!(inv.as_str().len(), 13);
        assert!(inv
            .as_str()
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit()));
        let tok = g.auth_token();
        assert!(uuid::Uuid::parse_str(tok.as_str()).is_ok());
        assert_eq!(g.short_id().len(), 5);
    }

    proptest! {
        #[test]
        fn target_roundtrip(user in "[a-z][a-z0-9.@_-]{0,30}", inst in proptest::option::of("[a-z0-9]{1,10}")) {
            let target = match &inst {
                None => Target::user(UserId::new(&user).unwrap()),
                Some(i) => Target::instance(UserId::new(&user).unwrap(), InstanceId::new(i.as_str()).unwrap()),
            };
            let rendered = target.to_string();
            let parsed: Target = rendered.parse().unwrap();
            prop_assert_eq!(parsed, target);
        }
    }
}
