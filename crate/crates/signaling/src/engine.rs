//! The per-device signaling engine.
//!
//! Every call attempt is one [`InviteRecord`] keyed by invite id. Records
//! move through six states:
//!
//! ```text
//!                    start_outbound            recv invite
//!                          |                        |
//!                          v                        v
//!                   OutboundInviting          InboundRinging
//!                    |      |                  |   |   |   |
//!        recv accept |      | timeout/cancel/  |   |   |   +-- recv cancel -> Idle
//!                    v      | recv decline/    |   |   +-- ring timeout ---> Rejected
//!                 Active    |   reject(merge)  |   +-- user decline -------> Declining
//!                           v                  v
//!                          Idle         accept+answer -> Active
//!
//!            Declining/Rejected --(linger 5s)--> Idle
//! ```
//!
//! `Idle` is the retired state: the record stays around so duplicate and
//! late signals for that invite are recognized and absorbed instead of
//! creating ghosts. Every method returns effects; the caller does the I/O.

use std::collections::BTreeMap;

use serde_json::{Map, Value};

use callmesh_core::id::{ConferenceId, IdGen, InstanceId, InviteId, NodeId, Target, UserId};
use callmesh_core::message::{
    CancelCause, MessageError, RejectReason, SessionDescriptor, SignalKind, SignalMessage,
};
use callmesh_core::time::{Millis, INVITE_TIMEOUT, LINGER, RING_TIMEOUT};

use crate::email::{self, BlobParts, EmailError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Direction {
    Outbound,
    Inbound,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum InviteState {
    /// Retired: cancelled, completed teardown, or never started.
    Idle,
    /// We sent an invite and are waiting for some device to accept.
    OutboundInviting,
    /// We received an invite and are ringing the human.
    InboundRinging,
    /// Accept exchanged; the call is (being) connected.
    Active,
    /// The human refused; terminal, lingering to absorb stragglers.
    Declining,
    /// This device bowed out (timeout/busy/merge); terminal, lingering.
    Rejected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignalMode {
    Push,
    Email,
}

#[derive(Clone, Debug)]
pub struct InviteRecord {
    pub invite: InviteId,
    pub direction: Direction,
    pub state: InviteState,
    pub mode: SignalMode,
    pub conf: ConferenceId,
    pub topic: Option<String>,
    /// Our node in the conference this invite connects to.
    pub local_node: NodeId,
    /// Outbound: the target as dialed (bare user unless re-addressed).
    pub callee: Option<Target>,
    /// The concrete peer device once known (caller instance from `From`,
    /// or the accepting device).
    pub peer: Option<Target>,
    /// The peer's conference node once known.
    pub peer_node: Option<NodeId>,
    pub offer: Option<SessionDescriptor>,
    pub answer: Option<SessionDescriptor>,
    /// True when this invite ended without the human ever reacting.
    pub missed: bool,
    pub started_at: Millis,
    /// Email correlation tag; also present on inbound email records.
    pub txn: Option<String>,
    /// Reject reasons received from callee devices (outbound side).
    pub rejects_seen: Vec<RejectReason>,
    ring_deadline: Option<Millis>,
    invite_deadline: Option<Millis>,
    linger_deadline: Option<Millis>,
    answer_requested: bool,
}

impl InviteRecord {
    fn clear_deadlines(&mut self) {
        self.ring_deadline = None;
        self.invite_deadline = None;
        self.linger_deadline = None;
    }
}

/// Side effects for the embedding layer. The engine never performs these
/// itself.
#[derive(Clone, Debug, PartialEq)]
pub enum SignalEffect {
    /// Produce a session offer for this invite, then call `offer_ready`.
    RequestOffer { invite: InviteId },
    /// Produce a session answer to `remote_offer`, then call `answer_ready`.
    RequestAnswer {
        invite: InviteId,
        remote_offer: SessionDescriptor,
    },
    /// Send a push signal through the relay.
    SendSignal { to: Target, msg: SignalMessage },
    /// Hand an email blob (and its mailto rendering) to the human.
    EmailOut {
        invite: InviteId,
        mailto: String,
        blob: String,
    },
    /// Make sure a local conference instance exists for this node.
    OpenConference {
        conf: ConferenceId,
        node: NodeId,
        topic: Option<String>,
    },
    /// Both descriptors are known: build the transport link.
    Connect {
        invite: InviteId,
        conf: ConferenceId,
        local_node: NodeId,
        peer_node: NodeId,
        offer: SessionDescriptor,
        answer: SessionDescriptor,
    },
    /// Show or update a call notification.
    Notify {
        invite: InviteId,
        direction: Direction,
        text: String,
        ring: bool,
    },
    /// Remove the notification for this invite.
    ClearNotify { invite: InviteId },
    /// Record a missed call for the human.
    MissedCall {
        invite: InviteId,
        peer: Option<Target>,
        at: Millis,
    },
    /// Wake us with `tick(at)` no later than this instant.
    ArmTimer { at: Millis },
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SignalingError {
    #[error("unknown invite {0}")]
    UnknownInvite(InviteId),
    #[error("{op} is invalid in state {state:?}")]
    InvalidState {
        op: &'static str,
        state: InviteState,
    },
    #[error("{op} is unavailable in email mode")]
    EmailUnsupported { op: &'static str },
    #[error("malformed signal: {0}")]
    Malformed(String),
    #[error("email blob rejected: {0}")]
    Email(#[from] EmailError),
    #[error("accept blob txn does not match this invite")]
    TxnMismatch,
}

impl From<MessageError> for SignalingError {
    fn from(e: MessageError) -> Self {
        SignalingError::Malformed(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EngineStats {
    /// Pushes addressed to another instance of this user (post-fork filter).
    pub discarded_not_mine: u64,
    /// Duplicate invites absorbed.
    pub dup_invites: u64,
    /// Signals that had no effect in the current state (late/stray).
    pub stray: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EngineConfig {
    pub ring_timeout: Millis,
    pub invite_timeout: Millis,
    pub linger: Millis,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            ring_timeout: RING_TIMEOUT,
            invite_timeout: INVITE_TIMEOUT,
            linger: LINGER,
        }
    }
}

pub struct SignalingEngine {
    user: UserId,
    instance: InstanceId,
    cfg: EngineConfig,
    ids: IdGen,
    records: BTreeMap<InviteId, InviteRecord>,
    pub stats: EngineStats,
}

impl SignalingEngine {
    pub fn new(user: UserId, instance: InstanceId, ids: IdGen, cfg: EngineConfig) -> Self {
        Self {
            user,
            instance,
            cfg,
            ids,
            records: BTreeMap::new(),
            stats: EngineStats::default(),
        }
    }

    pub fn user(&self) -> &UserId {
        &self.user
    }

    pub fn instance(&self) -> &InstanceId {
        &self.instance
    }

    /// Contact rotation changes our instance identity.
    pub fn set_instance(&mut self, instance: InstanceId) {
        self.instance = instance;
    }

    pub fn record(&self, invite: &InviteId) -> Option<&InviteRecord> {
        self.records.get(invite)
    }

    pub fn records(&self) -> impl Iterator<Item = &InviteRecord> {
        self.records.values()
    }

    pub fn missed_count(&self) -> usize {
        self.records.values().filter(|r| r.missed).count()
    }

    /// Earliest pending deadline across all records, if any.
    pub fn next_deadline(&self) -> Option<Millis> {
        self.records
            .values()
            .flat_map(|r| [r.ring_deadline, r.invite_deadline, r.linger_deadline])
            .flatten()
            .min()
    }

    // ---- commands -------------------------------------------------------

    /// Start a call to `callee`. `reuse` joins the peer into an existing
    /// conference (merge counter-invites, partition re-invites) instead of
    /// minting a fresh one.
    pub fn start_outbound(
        &mut self,
        callee: Target,
        topic: Option<String>,
        mode: SignalMode,
        reuse: Option<(ConferenceId, NodeId)>,
        now: Millis,
    ) -> (InviteId, Vec<SignalEffect>) {
        let invite = self.ids.invite_id();
        let (conf, node) = match reuse {
            Some((c, n)) => (c, n),
            None => (self.ids.conference_id(), self.ids.node_id()),
        };
        let txn = match mode {
            SignalMode::Email => Some(self.ids.txn()),
            SignalMode::Push => None,
        };
        let deadline = now + self.cfg.invite_timeout;
        let record = InviteRecord {
            invite: invite.clone(),
            direction: Direction::Outbound,
            state: InviteState::OutboundInviting,
            mode,
            conf: conf.clone(),
            topic: topic.clone(),
            local_node: node.clone(),
            callee: Some(callee.clone()),
            peer: None,
            peer_node: None,
            offer: None,
            answer: None,
            missed: false,
            started_at: now,
            txn,
            rejects_seen: Vec::new(),
            ring_deadline: None,
            invite_deadline: Some(deadline),
            linger_deadline: None,
            answer_requested: false,
        };
        self.records.insert(invite.clone(), record);
        let effects = vec![
            SignalEffect::OpenConference { conf, node, topic },
            SignalEffect::Notify {
                invite: invite.clone(),
                direction: Direction::Outbound,
                text: format!("calling {callee}"),
                ring: false,
            },
            SignalEffect::RequestOffer {
                invite: invite.clone(),
            },
            SignalEffect::ArmTimer { at: deadline },
        ];
        (invite, effects)
    }

    /// The media layer produced our session offer: emit the actual invite.
    pub fn offer_ready(
        &mut self,
        invite: &InviteId,
        offer: SessionDescriptor,
        _now: Millis,
    ) -> Result<Vec<SignalEffect>, SignalingError> {
        let rec = self.get_mut(invite)?;
        if rec.state != InviteState::OutboundInviting || rec.direction != Direction::Outbound {
            return Err(SignalingError::InvalidState {
                op: "offer_ready",
                state: rec.state,
            });
        }
        if rec.offer.is_some() {
            return Err(SignalingError::InvalidState {
                op: "offer_ready",
                state: rec.state,
            });
        }
        rec.offer = Some(offer.clone());

        let mut msg = SignalMessage::new(SignalKind::Invite, rec.invite.clone());
        msg.conf = Some(rec.conf.clone());
        msg.node = Some(rec.local_node.clone());
        msg.topic = rec.topic.clone();
        msg.sdp = Some(offer);

        match rec.mode {
            SignalMode::Push => {
                let to = rec.callee.clone().expect("outbound record has callee");
                Ok(vec![SignalEffect::SendSignal { to, msg }])
            }
            SignalMode::Email => {
                let txn = rec.txn.clone().expect("email record has txn");
                let blob = email::encode(&BlobParts {
                    kind: SignalKind::Invite,
                    invite: &rec.invite,
                    conf: msg.conf.as_ref(),
                    node: msg.node.as_ref(),
                    topic: msg.topic.as_deref(),
                    sdp: msg.sdp.as_ref(),
                    txn: &txn,
                    at: msg.sdp.as_ref().map(|d| d.at).unwrap_or(0),
                });
                let to = rec.callee.clone().expect("outbound record has callee");
                let mailto = email::mailto(&to.user, msg.topic.as_deref(), &blob);
                Ok(vec![SignalEffect::EmailOut {
                    invite: rec.invite.clone(),
                    mailto,
                    blob,
                }])
            }
        }
    }

    /// Human accepted a ringing inbound invite. `reuse_node` carries our
    /// existing node when we are already in the conference (partition
    /// heal); otherwise a fresh node is minted.
    pub fn accept(
        &mut self,
        invite: &InviteId,
        reuse_node: Option<NodeId>,
        _now: Millis,
    ) -> Result<Vec<SignalEffect>, SignalingError> {
        {
            let rec = self
                .records
                .get(invite)
                .ok_or_else(|| SignalingError::UnknownInvite(invite.clone()))?;
            if rec.direction != Direction::Inbound
                || rec.state != InviteState::InboundRinging
                || rec.answer_requested
            {
                return Err(SignalingError::InvalidState {
                    op: "accept",
                    state: rec.state,
                });
            }
        }
        let node = match reuse_node {
            Some(n) => n,
            None => self.ids.node_id(),
        };
        let rec = self.get_mut(invite)?;
        rec.local_node = node;
        rec.answer_requested = true;
        rec.ring_deadline = None;
        let offer = rec
            .offer
            .clone()
            .expect("inbound record has the caller offer");
        Ok(vec![SignalEffect::RequestAnswer {
            invite: rec.invite.clone(),
            remote_offer: offer,
        }])
    }

    /// The media layer produced our answer: go active and tell the caller.
    pub fn answer_ready(
        &mut self,
        invite: &InviteId,
        answer: SessionDescriptor,
        _now: Millis,
    ) -> Result<Vec<SignalEffect>, SignalingError> {
        let own_user = self.user.clone();
        let rec = self.get_mut(invite)?;
        if rec.direction != Direction::Inbound
            || rec.state != InviteState::InboundRinging
            || !rec.answer_requested
        {
            return Err(SignalingError::InvalidState {
                op: "answer_ready",
                state: rec.state,
            });
        }
        rec.answer = Some(answer.clone());
        rec.state = InviteState::Active;
        rec.clear_deadlines();

        let mut effects = vec![
            SignalEffect::ClearNotify {
                invite: rec.invite.clone(),
            },
            SignalEffect::OpenConference {
                conf: rec.conf.clone(),
                node: rec.local_node.clone(),
                topic: rec.topic.clone(),
            },
        ];
        match rec.mode {
            SignalMode::Push => {
                let mut msg = SignalMessage::new(SignalKind::Accept, rec.invite.clone());
                msg.conf = Some(rec.conf.clone());
                msg.node = Some(rec.local_node.clone());
                msg.sdp = Some(answer);
                let to = rec.peer.clone().expect("inbound record has caller target");
                effects.push(SignalEffect::SendSignal { to, msg });
            }
            SignalMode::Email => {
                let txn = rec.txn.clone().expect("email record has txn");
                let blob = email::encode(&BlobParts {
                    kind: SignalKind::Accept,
                    invite: &rec.invite,
                    conf: Some(&rec.conf),
                    node: Some(&rec.local_node),
                    topic: None,
                    sdp: Some(&answer),
                    txn: &txn,
                    at: answer.at,
                });
                // No address book in email mode: the human sends the reply.
                let mailto = email::mailto(&own_user, None, &blob);
                effects.push(SignalEffect::EmailOut {
                    invite: rec.invite.clone(),
                    mailto,
                    blob,
                });
            }
        }
        Ok(effects)
    }

    /// Human refused a ringing inbound invite.
    pub fn decline(
        &mut self,
        invite: &InviteId,
        now: Millis,
    ) -> Result<Vec<SignalEffect>, SignalingError> {
        let linger = self.cfg.linger;
        let rec = self.get_mut(invite)?;
        if rec.direction != Direction::Inbound || rec.state != InviteState::InboundRinging {
            return Err(SignalingError::InvalidState {
                op: "decline",
                state: rec.state,
            });
        }
        if rec.mode == SignalMode::Email {
            return Err(SignalingError::EmailUnsupported { op: "decline" });
        }
        rec.state = InviteState::Declining;
        rec.clear_deadlines();
        rec.linger_deadline = Some(now + linger);
        // The human chose: never a missed call.
        rec.missed = false;

        let msg = SignalMessage::new(SignalKind::Decline, rec.invite.clone());
        let to = rec.peer.clone().expect("inbound record has caller target");
        Ok(vec![
            SignalEffect::ClearNotify {
                invite: rec.invite.clone(),
            },
            SignalEffect::SendSignal { to, msg },
            SignalEffect::ArmTimer { at: now + linger },
        ])
    }

    /// Local policy refuses because another call is active (auto-busy).
    pub fn reject_busy(
        &mut self,
        invite: &InviteId,
        now: Millis,
    ) -> Result<Vec<SignalEffect>, SignalingError> {
        self.reject_inbound(invite, RejectReason::Busy, "reject_busy", now)
    }

    /// Merge: reject the ringing invite with reason `merge` and counter-
    /// invite the caller into our existing conference.
    pub fn merge(
        &mut self,
        invite: &InviteId,
        existing_conf: ConferenceId,
        existing_node: NodeId,
        topic: Option<String>,
        now: Millis,
    ) -> Result<(InviteId, Vec<SignalEffect>), SignalingError> {
        let caller = {
            let rec = self.get_mut(invite)?;
            if rec.direction != Direction::Inbound || rec.state != InviteState::InboundRinging {
                return Err(SignalingError::InvalidState {
                    op: "merge",
                    state: rec.state,
                });
            }
            if rec.mode == SignalMode::Email {
                return Err(SignalingError::EmailUnsupported { op: "merge" });
            }
            rec.peer.clone().expect("inbound record has caller target")
        };
        let mut effects = self.reject_inbound(invite, RejectReason::Merge, "merge", now)?;
        // Counter-invite the specific device that called us, into our
        // existing conference.
        let (new_invite, more) = self.start_outbound(
            caller,
            topic,
            SignalMode::Push,
            Some((existing_conf, existing_node)),
            now,
        );
        effects.extend(more);
        Ok((new_invite, effects))
    }

    /// Caller retires an outbound invite by hand.
    pub fn cancel(
        &mut self,
        invite: &InviteId,
        now: Millis,
    ) -> Result<Vec<SignalEffect>, SignalingError> {
        let rec = self.get_mut(invite)?;
        if rec.direction != Direction::Outbound || rec.state != InviteState::OutboundInviting {
            return Err(SignalingError::InvalidState {
                op: "cancel",
                state: rec.state,
            });
        }
        if rec.mode == SignalMode::Email {
            return Err(SignalingError::EmailUnsupported { op: "cancel" });
        }
        Ok(Self::retire_outbound(
            rec,
            CancelCause::CallerCancelled,
            now,
        ))
    }

    // ---- inbound signal processing --------------------------------------

    /// Feed one received push payload (the full `data` object including the
    /// relay's `To`/`From` stamps).
    pub fn on_push(
        &mut self,
        data: &Map<String, Value>,
        now: Millis,
    ) -> Result<Vec<SignalEffect>, SignalingError> {
        let msg = SignalMessage::from_data(data)?;
        // Post-fork filter: a push addressed to a specific sibling instance
        // is not for us.
        if let Some(to) = &msg.to {
            if !to.matches(&self.user, &self.instance) {
                self.stats.discarded_not_mine += 1;
                return Ok(vec![]);
            }
        }
        match msg.kind {
            SignalKind::Invite => self.recv_invite(msg, SignalMode::Push, now),
            SignalKind::Accept => self.recv_accept(msg, now),
            SignalKind::Decline => self.recv_decline(msg, now),
            SignalKind::Reject => self.recv_reject(msg, now),
            SignalKind::Cancel => self.recv_cancel(msg, now),
        }
    }

    /// Feed pasted email text. Expiry is enforced here, on the receiving
    /// side — there is no server in the path to do it for us.
    pub fn on_email_paste(
        &mut self,
        text: &str,
        now: Millis,
    ) -> Result<Vec<SignalEffect>, SignalingError> {
        let parsed = email::parse(text, now)?;
        match parsed.msg.kind {
            SignalKind::Invite => {
                let effects = self.recv_invite(parsed.msg.clone(), SignalMode::Email, now)?;
                if let Some(rec) = self.records.get_mut(&parsed.msg.invite) {
                    if rec.txn.is_none() {
                        rec.txn = Some(parsed.txn);
                    }
                }
                Ok(effects)
            }
            SignalKind::Accept => {
                let invite = parsed.msg.invite.clone();
                let rec = self
                    .records
                    .get(&invite)
                    .ok_or_else(|| SignalingError::UnknownInvite(invite.clone()))?;
                if rec.state == InviteState::Active {
                    // Same blob pasted twice: absorb.
                    self.stats.stray += 1;
                    return Ok(vec![]);
                }
                if rec.txn.as_deref() != Some(parsed.txn.as_str()) {
                    return Err(SignalingError::TxnMismatch);
                }
                self.recv_accept(parsed.msg, now)
            }
            // The email grammar has no decline/reject/cancel.
            _ => Err(SignalingError::Malformed(format!(
                "email blobs cannot carry {:?}",
                parsed.msg.kind
            ))),
        }
    }

    // ---- timers ----------------------------------------------------------

    /// Fire every deadline that is due. Deterministic: records are visited
    /// in invite-id order.
    pub fn tick(&mut self, now: Millis) -> Vec<SignalEffect> {
        let due: Vec<InviteId> = self
            .records
            .values()
            .filter(|r| {
                [r.ring_deadline, r.invite_deadline, r.linger_deadline]
                    .into_iter()
                    .flatten()
                    .any(|d| d <= now)
            })
            .map(|r| r.invite.clone())
            .collect();
        let mut effects = Vec::new();
        for invite in due {
            effects.extend(self.fire_deadlines(&invite, now));
        }
        effects
    }

    /// Force one inbound invite's ring timeout to fire now, regardless of
    /// its deadline. Models a device whose local ring timer ran ahead.
    pub fn force_ring_timeout(
        &mut self,
        invite: &InviteId,
        now: Millis,
    ) -> Result<Vec<SignalEffect>, SignalingError> {
        {
            let rec = self.get_mut(invite)?;
            if rec.direction != Direction::Inbound || rec.state != InviteState::InboundRinging {
                return Err(SignalingError::InvalidState {
                    op: "force_ring_timeout",
                    state: rec.state,
                });
            }
            rec.ring_deadline = Some(now);
        }
        Ok(self.fire_deadlines(invite, now))
    }

    /// The transport link for an active invite could not be built (e.g. a
    /// descriptor aged out). Retire the record.
    pub fn on_connect_failed(
        &mut self,
        invite: &InviteId,
        _now: Millis,
    ) -> Result<Vec<SignalEffect>, SignalingError> {
        let rec = self.get_mut(invite)?;
        if rec.state != InviteState::Active {
            return Err(SignalingError::InvalidState {
                op: "on_connect_failed",
                state: rec.state,
            });
        }
        rec.state = InviteState::Idle;
        rec.clear_deadlines();
        Ok(vec![SignalEffect::ClearNotify {
            invite: rec.invite.clone(),
        }])
    }

    // ---- internals -------------------------------------------------------

    fn get_mut(&mut self, invite: &InviteId) -> Result<&mut InviteRecord, SignalingError> {
        self.records
            .get_mut(invite)
            .ok_or_else(|| SignalingError::UnknownInvite(invite.clone()))
    }

    fn recv_invite(
        &mut self,
        msg: SignalMessage,
        mode: SignalMode,
        now: Millis,
    ) -> Result<Vec<SignalEffect>, SignalingError> {
        if self.records.contains_key(&msg.invite) {
            self.stats.dup_invites += 1;
            return Ok(vec![]);
        }
        let conf = msg
            .conf
            .clone()
            .ok_or_else(|| SignalingError::Malformed("invite without conf".into()))?;
        let offer = msg
            .sdp
            .clone()
            .ok_or_else(|| SignalingError::Malformed("invite without offer".into()))?;
        let peer = match (&msg.from, mode) {
            (Some(from), _) => Some(from.clone()),
            (None, SignalMode::Email) => None,
            (None, SignalMode::Push) => {
                return Err(SignalingError::Malformed("push invite without From".into()))
            }
        };
        let deadline = now + self.cfg.ring_timeout;
        let caller_text = peer
            .as_ref()
            .map(|p| p.user.to_string())
            .unwrap_or_else(|| "email invite".to_string());
        let record = InviteRecord {
            invite: msg.invite.clone(),
            direction: Direction::Inbound,
            state: InviteState::InboundRinging,
            mode,
            conf,
            topic: msg.topic.clone(),
            // Placeholder until accept; minted or reused there.
            local_node: NodeId::new("unassigned").expect("static id"),
            callee: None,
            peer,
            peer_node: msg.node.clone(),
            offer: Some(offer),
            answer: None,
            missed: false,
            started_at: now,
            txn: None,
            rejects_seen: Vec::new(),
            ring_deadline: Some(deadline),
            invite_deadline: None,
            linger_deadline: None,
            answer_requested: false,
        };
        self.records.insert(msg.invite.clone(), record);
        let text = match &msg.topic {
            Some(t) => format!("ring from {caller_text}: {t}"),
            None => format!("ring from {caller_text}"),
        };
        Ok(vec![
            SignalEffect::Notify {
                invite: msg.invite.clone(),
                direction: Direction::Inbound,
                text,
                ring: true,
            },
            SignalEffect::ArmTimer { at: deadline },
        ])
    }

    fn recv_accept(
        &mut self,
        msg: SignalMessage,
        _now: Millis,
    ) -> Result<Vec<SignalEffect>, SignalingError> {
        let Some(rec) = self.records.get_mut(&msg.invite) else {
            // Accept for an invite we have already forgotten (or never
            // sent): late straggler, absorb.
            self.stats.stray += 1;
            return Ok(vec![]);
        };
        if rec.direction != Direction::Outbound {
            self.stats.stray += 1;
            return Ok(vec![]);
        }
        match rec.state {
            InviteState::OutboundInviting => {
                let answer = msg
                    .sdp
                    .clone()
                    .ok_or_else(|| SignalingError::Malformed("accept without answer".into()))?;
                let peer_node = msg
                    .node
                    .clone()
                    .ok_or_else(|| SignalingError::Malformed("accept without node".into()))?;
                rec.state = InviteState::Active;
                rec.clear_deadlines();
                rec.answer = Some(answer.clone());
                rec.peer_node = Some(peer_node.clone());
                rec.peer = msg.from.clone().or_else(|| rec.callee.clone());

                let mut effects = vec![
                    SignalEffect::ClearNotify {
                        invite: rec.invite.clone(),
                    },
                    SignalEffect::Connect {
                        invite: rec.invite.clone(),
                        conf: rec.conf.clone(),
                        local_node: rec.local_node.clone(),
                        peer_node,
                        offer: rec
                            .offer
                            .clone()
                            .expect("offer exists once invite was sent"),
                        answer,
                    },
                ];
                // Push mode, forked callee: every other device of the user
                // must stop ringing. The accepted device gets the cancel too
                // and ignores it (it is Active).
                if rec.mode == SignalMode::Push {
                    if let Some(callee) = &rec.callee {
                        if callee.is_forked() {
                            let mut cancel =
                                SignalMessage::new(SignalKind::Cancel, rec.invite.clone());
                            cancel.cause = Some(CancelCause::AnsweredElsewhere);
                            effects.push(SignalEffect::SendSignal {
                                to: callee.clone(),
                                msg: cancel,
                            });
                        }
                    }
                }
                Ok(effects)
            }
            InviteState::Active => {
                // A second device accepted after the race was lost: tell
                // exactly that device to stand down.
                let mut effects = Vec::new();
                if let Some(from) = &msg.from {
                    let mut cancel = SignalMessage::new(SignalKind::Cancel, rec.invite.clone());
                    cancel.cause = Some(CancelCause::AnsweredElsewhere);
                    effects.push(SignalEffect::SendSignal {
                        to: from.clone(),
                        msg: cancel,
                    });
                }
                Ok(effects)
            }
            _ => {
                self.stats.stray += 1;
                Ok(vec![])
            }
        }
    }

    fn recv_decline(
        &mut self,
        msg: SignalMessage,
        now: Millis,
    ) -> Result<Vec<SignalEffect>, SignalingError> {
        let Some(rec) = self.records.get_mut(&msg.invite) else {
            self.stats.stray += 1;
            return Ok(vec![]);
        };
        if rec.direction != Direction::Outbound || rec.state != InviteState::OutboundInviting {
            self.stats.stray += 1;
            return Ok(vec![]);
        }
        // A human said no on some device; the whole invite dies, and the
        // callee's other devices must not record a missed call.
        Ok(Self::retire_outbound(
            rec,
            CancelCause::DeclinedElsewhere,
            now,
        ))
    }

    fn recv_reject(
        &mut self,
        msg: SignalMessage,
        now: Millis,
    ) -> Result<Vec<SignalEffect>, SignalingError> {
        let reason = msg
            .reason
            .ok_or_else(|| SignalingError::Malformed("reject without reason".into()))?;
        let Some(rec) = self.records.get_mut(&msg.invite) else {
            self.stats.stray += 1;
            return Ok(vec![]);
        };
        if rec.direction != Direction::Outbound || rec.state != InviteState::OutboundInviting {
            // Includes rejects arriving after an accept won the race: the
            // call is live, nothing to do.
            self.stats.stray += 1;
            return Ok(vec![]);
        }
        rec.rejects_seen.push(reason);
        match reason {
            // Individual devices bowing out never retire the invite: the
            // caller cannot know how many devices exist, so only an accept,
            // a decline, or the invite timeout decides the outcome.
            RejectReason::Timeout | RejectReason::Busy => Ok(vec![]),
            // The callee pulls us into their conference instead; retire our
            // invite and await the counter-invite.
            RejectReason::Merge => Ok(Self::retire_outbound(
                rec,
                CancelCause::AnsweredElsewhere,
                now,
            )),
        }
    }

    fn recv_cancel(
        &mut self,
        msg: SignalMessage,
        now: Millis,
    ) -> Result<Vec<SignalEffect>, SignalingError> {
        let cause = msg.cause.unwrap_or(CancelCause::CallerCancelled);
        let Some(rec) = self.records.get_mut(&msg.invite) else {
            self.stats.stray += 1;
            return Ok(vec![]);
        };
        if rec.direction != Direction::Inbound || rec.state != InviteState::InboundRinging {
            // Active devices ignore the forked cancel that follows their
            // own accept; already-terminal records absorb it silently.
            self.stats.stray += 1;
            return Ok(vec![]);
        }
        rec.state = InviteState::Idle;
        rec.clear_deadlines();
        rec.missed = cause.missed();
        let mut effects = vec![SignalEffect::ClearNotify {
            invite: rec.invite.clone(),
        }];
        if rec.missed {
            effects.push(SignalEffect::MissedCall {
                invite: rec.invite.clone(),
                peer: rec.peer.clone(),
                at: now,
            });
        }
        Ok(effects)
    }

    fn reject_inbound(
        &mut self,
        invite: &InviteId,
        reason: RejectReason,
        op: &'static str,
        now: Millis,
    ) -> Result<Vec<SignalEffect>, SignalingError> {
        let linger = self.cfg.linger;
        let rec = self.get_mut(invite)?;
        if rec.direction != Direction::Inbound || rec.state != InviteState::InboundRinging {
            return Err(SignalingError::InvalidState {
                op,
                state: rec.state,
            });
        }
        if rec.mode == SignalMode::Email {
            return Err(SignalingError::EmailUnsupported { op });
        }
        rec.state = InviteState::Rejected;
        rec.clear_deadlines();
        rec.linger_deadline = Some(now + linger);

        let mut msg = SignalMessage::new(SignalKind::Reject, rec.invite.clone());
        msg.reason = Some(reason);
        let to = rec.peer.clone().expect("inbound record has caller target");
        Ok(vec![
            SignalEffect::ClearNotify {
                invite: rec.invite.clone(),
            },
            SignalEffect::SendSignal { to, msg },
            SignalEffect::ArmTimer { at: now + linger },
        ])
    }

    /// Retire an outbound record and tell the callee's devices to stop
    /// ringing. Shared by user cancel, received decline, reject(merge) and
    /// the invite timeout.
    fn retire_outbound(
        rec: &mut InviteRecord,
        cause: CancelCause,
        _now: Millis,
    ) -> Vec<SignalEffect> {
        rec.state = InviteState::Idle;
        rec.clear_deadlines();
        let mut effects = vec![SignalEffect::ClearNotify {
            invite: rec.invite.clone(),
        }];
        if rec.mode == SignalMode::Push {
            let mut msg = SignalMessage::new(SignalKind::Cancel, rec.invite.clone());
            msg.cause = Some(cause);
            let to = rec.callee.clone().expect("outbound record has callee");
            effects.push(SignalEffect::SendSignal { to, msg });
        }
        // Email mode: nothing can be sent; the blob dies by expiry.
        effects
    }

    fn fire_deadlines(&mut self, invite: &InviteId, now: Millis) -> Vec<SignalEffect> {
        let linger = self.cfg.linger;
        let Some(rec) = self.records.get_mut(invite) else {
            return vec![];
        };
        let mut effects = Vec::new();

        if rec.ring_deadline.is_some_and(|d| d <= now) {
            rec.ring_deadline = None;
            if rec.state == InviteState::InboundRinging {
                // Rang the full window with no human reaction.
                rec.state = InviteState::Rejected;
                rec.clear_deadlines();
                rec.linger_deadline = Some(now + linger);
                rec.missed = true;
                effects.push(SignalEffect::ClearNotify {
                    invite: rec.invite.clone(),
                });
                effects.push(SignalEffect::MissedCall {
                    invite: rec.invite.clone(),
                    peer: rec.peer.clone(),
                    at: now,
                });
                if rec.mode == SignalMode::Push {
                    let mut msg = SignalMessage::new(SignalKind::Reject, rec.invite.clone());
                    msg.reason = Some(RejectReason::Timeout);
                    let to = rec.peer.clone().expect("inbound record has caller target");
                    effects.push(SignalEffect::SendSignal { to, msg });
                }
                effects.push(SignalEffect::ArmTimer { at: now + linger });
            }
        }

        if rec.invite_deadline.is_some_and(|d| d <= now) {
            rec.invite_deadline = None;
            if rec.state == InviteState::OutboundInviting {
                // Nobody accepted in time.
                effects.extend(Self::retire_outbound(
                    rec,
                    CancelCause::CallerCancelled,
                    now,
                ));
            }
        }

        if rec.linger_deadline.is_some_and(|d| d <= now) {
            rec.linger_deadline = None;
            if matches!(rec.state, InviteState::Declining | InviteState::Rejected) {
                rec.state = InviteState::Idle;
            }
        }

        effects
    }
}
