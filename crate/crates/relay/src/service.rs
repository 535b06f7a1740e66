//! Relay state machine, independent of HTTP.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::{Map, Value};

use callmesh_core::id::{AuthToken, ContactToken, InstanceId, Target, UserId};
use callmesh_core::instance::instance_id;
use callmesh_core::time::{Millis, PUSH_TTL, REGISTRATION_LIFETIME};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RelayError {
    #[error("unauthorized")]
    Unauthorized,
    #[error("unknown recipient")]
    UnknownRecipient,
    #[error("{0}")]
    BadRequest(String),
}

/// What the platform push service said about one delivery attempt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeliverOutcome {
    /// Accepted for delivery.
    Delivered,
    /// The contact token is permanently dead; the registration must go.
    Gone,
    /// Temporary failure; the transport will retry within the TTL.
    TransientFailure,
}

/// One push as handed to the transport: the full payload (routing keys
/// already stamped) plus delivery metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct PushEnvelope {
    /// The target exactly as the sender addressed it.
    pub to: Target,
    /// The sender, always instance-qualified.
    pub from: Target,
    pub data: Map<String, Value>,
    pub ttl: Millis,
    pub at: Millis,
}

/// Where pushes physically go. The relay owns routing; the transport owns
/// delivery.
pub trait PushTransport {
    fn deliver(&mut self, contact: &ContactToken, envelope: &PushEnvelope) -> DeliverOutcome;
}

/// Test/simulation transport: records everything, with scriptable outcomes.
#[derive(Default)]
pub struct RecordingTransport {
    pub deliveries: Vec<(ContactToken, PushEnvelope)>,
    pub outcomes: BTreeMap<ContactToken, DeliverOutcome>,
}

impl PushTransport for RecordingTransport {
    fn deliver(&mut self, contact: &ContactToken, envelope: &PushEnvelope) -> DeliverOutcome {
        self.deliveries.push((contact.clone(), envelope.clone()));
        self.outcomes
            .get(contact)
            .copied()
            .unwrap_or(DeliverOutcome::Delivered)
    }
}

/// One provisioned device: the account binding plus, once the device has
/// registered, its push route.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContactRecord {
    pub user: UserId,
    pub auth: AuthToken,
    pub contact: Option<ContactToken>,
    pub instance: Option<InstanceId>,
    /// Instant of the last successful registration refresh.
    pub registered_at: Millis,
    /// Registration is dead after this instant.
    pub expires: Millis,
}

impl ContactRecord {
    fn is_live(&self, now: Millis) -> bool {
        self.contact.is_some() && now < self.expires
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegisterOutcome {
    pub instance: InstanceId,
    pub expires: Millis,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SendOutcome {
    pub count: u32,
}

/// The registry plus fan-out logic. All maps are ordered so that fan-out
/// order — and therefore every downstream log — is deterministic.
#[derive(Default)]
pub struct RelayService {
    records: BTreeMap<AuthToken, ContactRecord>,
    by_contact: BTreeMap<ContactToken, AuthToken>,
    by_user: BTreeMap<UserId, BTreeSet<AuthToken>>,
}

impl RelayService {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bind an auth token to an account. Idempotent for the same pair;
    /// rebinding an existing token to a different user is refused.
    pub fn provision(&mut self, user: UserId, auth: AuthToken) -> Result<(), RelayError> {
        if let Some(existing) = self.records.get(&auth) {
            if existing.user == user {
                return Ok(());
            }
            return Err(RelayError::BadRequest(
                "auth token already provisioned".into(),
            ));
        }
        self.by_user
            .entry(user.clone())
            .or_default()
            .insert(auth.clone());
        self.records.insert(
            auth.clone(),
            ContactRecord {
                user,
                auth,
                contact: None,
                instance: None,
                registered_at: 0,
                expires: 0,
            },
        );
        Ok(())
    }

    /// Login check: whose device is this?
    pub fn login(&self, auth: &AuthToken) -> Result<&UserId, RelayError> {
        self.records
            .get(auth)
            .map(|r| &r.user)
            .ok_or(RelayError::Unauthorized)
    }

    /// Register (or refresh) the push contact token for a device. A token
    /// already held by another device is stolen from it: contact tokens are
    /// globally unique, and the platform has told us the token now routes
    /// here.
    pub fn register_contact(
        &mut self,
        auth: &AuthToken,
        contact: ContactToken,
        now: Millis,
    ) -> Result<RegisterOutcome, RelayError> {
        if !self.records.contains_key(auth) {
            return Err(RelayError::Unauthorized);
        }
        if let Some(holder) = self.by_contact.get(&contact).cloned() {
            if holder != *auth {
                if let Some(old) = self.records.get_mut(&holder) {
                    old.contact = None;
                    old.instance = None;
                }
                self.by_contact.remove(&contact);
            }
        }
        let record = self.records.get_mut(auth).expect("checked above");
        // Rotating to a new token frees the old one.
        if let Some(old_token) = record.contact.take() {
            if old_token != contact {
                self.by_contact.remove(&old_token);
            }
        }
        let instance = instance_id(&record.user, auth, contact.as_str());
        record.contact = Some(contact.clone());
        record.instance = Some(instance.clone());
        record.registered_at = now;
        record.expires = now + REGISTRATION_LIFETIME;
        self.by_contact.insert(contact, auth.clone());
        Ok(RegisterOutcome {
            instance,
            expires: record.expires,
        })
    }

    /// Send one payload to a target. Forks to every live device of the user
    /// when no instance is pinned. Returns how many pushes were handed to
    /// the transport.
    pub fn send(
        &mut self,
        auth: &AuthToken,
        to: &Target,
        data: Map<String, Value>,
        now: Millis,
        transport: &mut dyn PushTransport,
    ) -> Result<SendOutcome, RelayError> {
        let sender = self.records.get(auth).ok_or(RelayError::Unauthorized)?;
        let from = Target::instance(
            sender.user.clone(),
            sender
                .instance
                .clone()
                // A sender with no registration of its own still has a
                // stable identity: the empty contact token.
                .unwrap_or_else(|| instance_id(&sender.user, auth, "")),
        );

        let recipients: Vec<(AuthToken, ContactToken)> = self
            .by_user
            .get(&to.user)
            .map(|auths| {
                auths
                    .iter()
                    .filter_map(|a| self.records.get(a))
                    .filter(|r| r.is_live(now))
                    .filter(|r| match &to.instance {
                        None => true,
                        Some(want) => r.instance.as_ref() == Some(want),
                    })
                    .map(|r| (r.auth.clone(), r.contact.clone().expect("live record")))
                    .collect()
            })
            .unwrap_or_default();

        if recipients.is_empty() {
            return Err(RelayError::UnknownRecipient);
        }

        let mut stamped = data;
        stamped.insert("To".into(), Value::String(to.to_string()));
        stamped.insert("From".into(), Value::String(from.to_string()));
        let envelope = PushEnvelope {
            to: to.clone(),
            from,
            data: stamped,
            ttl: PUSH_TTL,
            at: now,
        };

        let mut sent = 0u32;
        for (recipient_auth, contact) in recipients {
            match transport.deliver(&contact, &envelope) {
                DeliverOutcome::Delivered | DeliverOutcome::TransientFailure => sent += 1,
                DeliverOutcome::Gone => {
                    // Permanently dead token: drop the registration so the
                    // next send no longer counts this device.
                    if let Some(r) = self.records.get_mut(&recipient_auth) {
                        r.contact = None;
                        r.instance = None;
                    }
                    self.by_contact.remove(&contact);
                }
            }
        }
        if sent == 0 {
            return Err(RelayError::UnknownRecipient);
        }
        Ok(SendOutcome { count: sent })
    }

    /// Drop registrations that have outlived their lifetime. Accounts stay
    /// provisioned; only push routes go away.
    pub fn prune_expired(&mut self, now: Millis) -> usize {
        let mut pruned = 0;
        for record in self.records.values_mut() {
            if record.contact.is_some() && now >= record.expires {
                if let Some(tok) = record.contact.take() {
                    self.by_contact.remove(&tok);
                }
                record.instance = None;
                pruned += 1;
            }
        }
        pruned
    }

    pub fn registration(&self, auth: &AuthToken) -> Option<&ContactRecord> {
        self.records.get(auth)
    }

    pub fn instance_of(&self, auth: &AuthToken) -> Option<&InstanceId> {
        self.records.get(auth).and_then(|r| r.instance.as_ref())
    }

    pub fn device_count(&self, user: &UserId) -> usize {
        self.by_user.get(user).map_or(0, |s| s.len())
    }
}
