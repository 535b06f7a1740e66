//! The conference application model: roster, text chat, call/media flags,
//! and named-stream publish/subscribe negotiation, all expressed as
//! resources under `/sessions/<conf>/...` in the replicated store.
//!
//! The model owns no I/O and never touches the store directly. Commands
//! (`join`, `post_message`, `enable_media`, ...) return effects the
//! embedding applies to the store; store change events are fed back in
//! through [`ConferenceModel::on_event`]. All state the model keeps is
//! rebuilt purely from those events, so every node converges on the same
//! view for the same event history — including this node's own writes,
//! which it learns about the same way everyone else does.
//!
//! Stream negotiation ("trickle" style): when a publisher record appears,
//! every other node writes itself under `.../subscribers/<node>` and sends
//! an `offer` notify on that sub-resource addressed to the publisher. The
//! publisher replies with an `answer` and registers the directed media
//! edge (publisher → subscriber); the subscriber registers it on receiving
//! the answer and may follow with `candidate` events. Lost answers are
//! retried every [`NEGOTIATION_TIMEOUT`], without cap.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::json;

use callmesh_core::id::{ConferenceId, IdGen, NodeId, UserId};
use callmesh_core::time::{Millis, NEGOTIATION_TIMEOUT};
use callmesh_core::Document;

use crate::storage::{ChangeEvent, ChangeKind, ResourcePath};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("not joined")]
    NotJoined,
    #[error("empty message")]
    EmptyMessage,
}

/// Media track kinds a participant can enable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Track {
    Audio,
    Video,
}

/// A directed media connection, publisher → subscriber, for one named
/// stream. At most one edge per (stream, publisher, subscriber) triple.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct StreamEdge {
    pub stream: UserId,
    pub publisher: NodeId,
    pub subscriber: NodeId,
}

/// What the model asks its embedding to do.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelEffect {
    /// Write a resource (path is absolute).
    Put { path: ResourcePath, value: Document },
    /// Tombstone a resource.
    Delete { path: ResourcePath },
    /// Ephemeral notify on a path.
    Notify { path: ResourcePath, value: Document },
    /// A media connection came up (register with the harness; the two
    /// endpoints both report it, keyed identically).
    EdgeUp(StreamEdge),
    /// A media connection went away.
    EdgeDown(StreamEdge),
    /// Call `tick(now)` at (or after) this virtual time.
    ArmTimer { at: Millis },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RosterEntry {
    pub displayname: String,
    pub node: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChatMessage {
    pub id: String,
    pub sender: String,
    pub data: String,
    pub at: Millis,
}

/// My side of one subscription to someone else's stream.
#[derive(Clone, Debug, PartialEq)]
enum SubState {
    AwaitingAnswer {
        publisher: NodeId,
        deadline: Millis,
        attempts: u32,
    },
    Established {
        publisher: NodeId,
    },
}

pub struct ConferenceModel {
    conf: ConferenceId,
    user: UserId,
    node: NodeId,
    joined: bool,
    /// Users present, from `/users/<user>` records.
    roster: BTreeMap<UserId, RosterEntry>,
    /// Chat, from `/messages/<id>` records.
    messages: BTreeMap<String, ChatMessage>,
    /// Enabled tracks per participant, from `/calls/<user>` records.
    calls: BTreeMap<UserId, BTreeSet<Track>>,
    /// Stream owner → publishing node, from `.../publisher` records.
    publishers: BTreeMap<UserId, NodeId>,
    /// Streams this node subscribes to, keyed by owner.
    subs: BTreeMap<UserId, SubState>,
    /// As publisher: subscriber nodes we have answered (edge up).
    served: BTreeSet<NodeId>,
    /// Local view of established media edges (both roles).
    edges: BTreeSet<StreamEdge>,
    /// Every typing notify seen `(user, active)`, in arrival order.
    typing_log: Vec<(String, bool)>,
    /// Trickle candidates absorbed (either role).
    candidates_seen: u64,
    ids: IdGen,
}

impl ConferenceModel {
    pub fn new(conf: ConferenceId, user: UserId, node: NodeId, ids: IdGen) -> Self {
        Self {
            conf,
            user,
            node,
            joined: false,
            roster: BTreeMap::new(),
            messages: BTreeMap::new(),
            calls: BTreeMap::new(),
            publishers: BTreeMap::new(),
            subs: BTreeMap::new(),
            served: BTreeSet::new(),
            edges: BTreeSet::new(),
            typing_log: Vec::new(),
            candidates_seen: 0,
            ids,
        }
    }

    pub fn node(&self) -> &NodeId {
        &self.node
    }

    pub fn conf(&self) -> &ConferenceId {
        &self.conf
    }

    // ---- paths -------------------------------------------------------------

    fn base(&self) -> ResourcePath {
        ResourcePath::new(["sessions".to_string(), self.conf.as_str().to_string()])
    }

    fn user_path(&self, user: &UserId) -> ResourcePath {
        self.base().child("users").child(user.as_str())
    }

    fn call_path(&self, user: &UserId) -> ResourcePath {
        self.base().child("calls").child(user.as_str())
    }

    fn publisher_path(&self, owner: &UserId) -> ResourcePath {
        self.base()
            .child("streams")
            .child(owner.as_str())
            .child("publisher")
    }

    fn subscriber_path(&self, owner: &UserId, node: &NodeId) -> ResourcePath {
        self.base()
            .child("streams")
            .child(owner.as_str())
            .child("subscribers")
            .child(node.as_str())
    }

    // ---- commands ------------------------------------------------------------

    /// Announce presence. The embedding must already be routing every
    /// store event under `/sessions/<conf>` into [`Self::on_event`].
    pub fn join(&mut self) -> Vec<ModelEffect> {
        self.joined = true;
        vec![ModelEffect::Put {
            path: self.user_path(&self.user.clone()),
            value: json!({
                "displayname": self.user.as_str(),
                "node": self.node.as_str(),
            }),
        }]
    }

    /// Withdraw from the conference: tombstone presence, call flags, our
    /// publisher record and any subscriber records we own.
    pub fn leave(&mut self) -> Vec<ModelEffect> {
        if !self.joined {
            return vec![];
        }
        self.joined = false;
        let me = self.user.clone();
        let mut fx = vec![
            ModelEffect::Delete {
                path: self.user_path(&me),
            },
            ModelEffect::Delete {
                path: self.call_path(&me),
            },
            ModelEffect::Delete {
                path: self.publisher_path(&me),
            },
        ];
        let mine: Vec<UserId> = self.subs.keys().cloned().collect();
        for owner in mine {
            fx.push(ModelEffect::Delete {
                path: self.subscriber_path(&owner, &self.node.clone()),
            });
        }
        fx
    }

    /// Post a chat message; returns its resource path along with the
    /// effects. Empty (or all-whitespace) text is rejected locally.
    pub fn post_message(
        &mut self,
        text: &str,
        now: Millis,
    ) -> Result<(ResourcePath, Vec<ModelEffect>), ModelError> {
        if !self.joined {
            return Err(ModelError::NotJoined);
        }
        if text.trim().is_empty() {
            return Err(ModelError::EmptyMessage);
        }
        let id = self.ids.short_id();
        let path = self.base().child("messages").child(&id);
        let value = json!({
            "sender": self.user.as_str(),
            "data": text,
            "at": now,
        });
        Ok((path.clone(), vec![ModelEffect::Put { path, value }]))
    }

    /// Ephemeral typing indication — a notify on our own user resource,
    /// never stored.
    pub fn set_typing(&mut self, active: bool) -> Vec<ModelEffect> {
        if !self.joined {
            return vec![];
        }
        vec![ModelEffect::Notify {
            path: self.user_path(&self.user.clone()),
            value: json!({ "user": self.user.as_str(), "typing": active }),
        }]
    }

    /// Declare enabled tracks and publish our named stream. Peers react
    /// by subscribing.
    pub fn enable_media(&mut self, tracks: impl IntoIterator<Item = Track>) -> Vec<ModelEffect> {
        if !self.joined {
            return vec![];
        }
        let tracks: BTreeSet<Track> = tracks.into_iter().collect();
        let me = self.user.clone();
        vec![
            ModelEffect::Put {
                path: self.call_path(&me),
                value: json!({ "node": self.node.as_str(), "tracks": tracks }),
            },
            ModelEffect::Put {
                path: self.publisher_path(&me),
                value: json!({ "node": self.node.as_str(), "tracks": tracks }),
            },
        ]
    }

    /// Stop publishing: tombstone the publisher record and call flags.
    /// Subscribers tear their edges down when the tombstone reaches them.
    pub fn disable_media(&mut self) -> Vec<ModelEffect> {
        if !self.joined {
            return vec![];
        }
        let me = self.user.clone();
        vec![
            ModelEffect::Delete {
                path: self.call_path(&me),
            },
            ModelEffect::Delete {
                path: self.publisher_path(&me),
            },
        ]
    }

    // ---- event reactor ---------------------------------------------------------

    /// Feed one store change event (the embedding routes everything under
    /// `/sessions/<conf>` here, own writes included).
    pub fn on_event(&mut self, ev: &ChangeEvent, now: Millis) -> Vec<ModelEffect> {
        let base = self.base();
        if !ev.path.starts_with(&base) {
            return vec![];
        }
        let rel: Vec<&str> = ev.path.segments()[base.segments().len()..]
            .iter()
            .map(String::as_str)
            .collect();
        match rel.as_slice() {
            ["users", user] => self.on_user(user, ev),
            ["messages", id] => {
                self.on_message(id, ev);
                vec![]
            }
            ["calls", user] => {
                self.on_call(user, ev);
                vec![]
            }
            ["streams", owner, "publisher"] => self.on_publisher(owner, ev, now),
            ["streams", owner, "subscribers", sub] => self.on_subscriber(owner, sub, ev, now),
            _ => vec![],
        }
    }

    fn on_user(&mut self, user: &str, ev: &ChangeEvent) -> Vec<ModelEffect> {
        let Ok(user) = UserId::new(user) else {
            return vec![];
        };
        match ev.kind {
            ChangeKind::Created | ChangeKind::Updated => {
                if let Some(v) = &ev.value {
                    let displayname = v
                        .get("displayname")
                        .and_then(|d| d.as_str())
                        .unwrap_or(user.as_str())
                        .to_string();
                    if let Some(node) = v
                        .get("node")
                        .and_then(|n| n.as_str())
                        .and_then(|n| NodeId::new(n).ok())
                    {
                        self.roster.insert(user, RosterEntry { displayname, node });
                    }
                }
                vec![]
            }
            ChangeKind::Deleted => {
                let gone = self.roster.remove(&user);
                let mut fx = Vec::new();
                // A departed user's stream (if still published) is dead too.
                if self.publishers.contains_key(&user) {
                    fx.extend(self.drop_publisher(&user));
                }
                // Edges to/from their node are gone.
                if let Some(entry) = gone {
                    fx.extend(self.drop_edges_touching(&entry.node));
                }
                fx
            }
            ChangeKind::Notify => {
                if let Some(v) = &ev.value {
                    if let Some(t) = v.get("typing").and_then(|t| t.as_bool()) {
                        let who = v
                            .get("user")
                            .and_then(|u| u.as_str())
                            .unwrap_or(user.as_str())
                            .to_string();
                        self.typing_log.push((who, t));
                    }
                }
                vec![]
            }
        }
    }

    fn on_message(&mut self, id: &str, ev: &ChangeEvent) {
        match ev.kind {
            ChangeKind::Created | ChangeKind::Updated => {
                if let Some(v) = &ev.value {
                    let sender = v
                        .get("sender")
                        .and_then(|s| s.as_str())
                        .unwrap_or("?")
                        .to_string();
                    let data = v
                        .get("data")
                        .and_then(|s| s.as_str())
                        .unwrap_or("")
                        .to_string();
                    let at = v.get("at").and_then(|a| a.as_u64()).unwrap_or(0);
                    self.messages.insert(
                        id.to_string(),
                        ChatMessage {
                            id: id.to_string(),
                            sender,
                            data,
                            at,
                        },
                    );
                }
            }
            ChangeKind::Deleted => {
                self.messages.remove(id);
            }
            ChangeKind::Notify => {}
        }
    }

    fn on_call(&mut self, user: &str, ev: &ChangeEvent) {
        let Ok(user) = UserId::new(user) else { return };
        match ev.kind {
            ChangeKind::Created | ChangeKind::Updated => {
                let tracks = ev
                    .value
                    .as_ref()
                    .and_then(|v| v.get("tracks"))
                    .and_then(|t| serde_json::from_value::<BTreeSet<Track>>(t.clone()).ok())
                    .unwrap_or_default();
                self.calls.insert(user, tracks);
            }
            ChangeKind::Deleted => {
                self.calls.remove(&user);
            }
            ChangeKind::Notify => {}
        }
    }

    fn on_publisher(&mut self, owner: &str, ev: &ChangeEvent, now: Millis) -> Vec<ModelEffect> {
        let Ok(owner) = UserId::new(owner) else {
            return vec![];
        };
        match ev.kind {
            ChangeKind::Created | ChangeKind::Updated => {
                let Some(pub_node) = ev
                    .value
                    .as_ref()
                    .and_then(|v| v.get("node"))
                    .and_then(|n| n.as_str())
                    .and_then(|n| NodeId::new(n).ok())
                else {
                    return vec![];
                };
                let mut fx = Vec::new();
                let previous = self.publishers.insert(owner.clone(), pub_node.clone());
                if pub_node == self.node {
                    return fx; // our own stream: we answer offers, never subscribe
                }
                // Publisher moved nodes: drop the old edge before re-negotiating.
                if let Some(prev) = previous.filter(|p| *p != pub_node) {
                    let edge = StreamEdge {
                        stream: owner.clone(),
                        publisher: prev,
                        subscriber: self.node.clone(),
                    };
                    if self.edges.remove(&edge) {
                        fx.push(ModelEffect::EdgeDown(edge));
                    }
                    self.subs.remove(&owner);
                }
                if self.subs.contains_key(&owner) {
                    return fx; // already subscribed (record refresh)
                }
                // Auto-subscribe: announce, then open negotiation.
                fx.push(ModelEffect::Put {
                    path: self.subscriber_path(&owner, &self.node.clone()),
                    value: json!({ "user": self.user.as_str() }),
                });
                fx.extend(self.send_offer(&owner, &pub_node, now, 1));
                fx
            }
            ChangeKind::Deleted => self.drop_publisher(&owner),
            ChangeKind::Notify => vec![],
        }
    }

    fn on_subscriber(
        &mut self,
        owner: &str,
        sub: &str,
        ev: &ChangeEvent,
        now: Millis,
    ) -> Vec<ModelEffect> {
        let (Ok(owner), Ok(sub_node)) = (UserId::new(owner), NodeId::new(sub)) else {
            return vec![];
        };
        match ev.kind {
            ChangeKind::Notify => self.on_negotiation(&owner, &sub_node, ev, now),
            ChangeKind::Deleted => {
                // Subscriber withdrew (left the conference or tore down).
                let i_publish = self.publishers.get(&owner) == Some(&self.node);
                if i_publish && self.served.remove(&sub_node) {
                    let edge = StreamEdge {
                        stream: owner,
                        publisher: self.node.clone(),
                        subscriber: sub_node,
                    };
                    self.edges.remove(&edge);
                    return vec![ModelEffect::EdgeDown(edge)];
                }
                vec![]
            }
            ChangeKind::Created | ChangeKind::Updated => vec![],
        }
    }

    /// Negotiation events ride as notifies on the subscriber sub-resource;
    /// each is addressed to exactly one node.
    fn on_negotiation(
        &mut self,
        owner: &UserId,
        sub_node: &NodeId,
        ev: &ChangeEvent,
        now: Millis,
    ) -> Vec<ModelEffect> {
        let Some(v) = &ev.value else { return vec![] };
        let (Some(kind), Some(from), Some(to)) = (
            v.get("kind").and_then(|k| k.as_str()),
            v.get("from")
                .and_then(|f| f.as_str())
                .and_then(|f| NodeId::new(f).ok()),
            v.get("to")
                .and_then(|t| t.as_str())
                .and_then(|t| NodeId::new(t).ok()),
        ) else {
            return vec![];
        };
        if to != self.node {
            return vec![]; // not addressed to us
        }
        match kind {
            "offer" => {
                // We are the publisher of this stream; answer the offer.
                if self.publishers.get(owner) != Some(&self.node) || from != *sub_node {
                    return vec![];
                }
                let answer_blob = self.ids.descriptor_blob("answer");
                let mut fx = vec![ModelEffect::Notify {
                    path: self.subscriber_path(owner, sub_node),
                    value: json!({
                        "kind": "answer",
                        "from": self.node.as_str(),
                        "to": from.as_str(),
                        "blob": answer_blob,
                    }),
                }];
                // Answering a retried offer must not double-register.
                if self.served.insert(from.clone()) {
                    let edge = StreamEdge {
                        stream: owner.clone(),
                        publisher: self.node.clone(),
                        subscriber: from,
                    };
                    self.edges.insert(edge.clone());
                    fx.push(ModelEffect::EdgeUp(edge));
                }
                fx
            }
            "answer" => {
                // We are the subscriber awaiting this answer.
                if *sub_node != self.node {
                    return vec![];
                }
                match self.subs.get(owner) {
                    Some(SubState::AwaitingAnswer { publisher, .. }) if *publisher == from => {}
                    _ => return vec![], // dup answer or stranger: ignore
                }
                self.subs.insert(
                    owner.clone(),
                    SubState::Established {
                        publisher: from.clone(),
                    },
                );
                let edge = StreamEdge {
                    stream: owner.clone(),
                    publisher: from.clone(),
                    subscriber: self.node.clone(),
                };
                self.edges.insert(edge.clone());
                // Trickle one candidate after the answer, as real clients do.
                let cand_blob = self.ids.descriptor_blob("candidate");
                vec![
                    ModelEffect::EdgeUp(edge),
                    ModelEffect::Notify {
                        path: self.subscriber_path(owner, &self.node.clone()),
                        value: json!({
                            "kind": "candidate",
                            "from": self.node.as_str(),
                            "to": from.as_str(),
                            "blob": cand_blob,
                        }),
                    },
                ]
            }
            "candidate" => {
                self.candidates_seen += 1;
                let _ = now;
                vec![]
            }
            _ => vec![],
        }
    }

    // ---- timers ------------------------------------------------------------------

    /// Retry negotiations whose answer never arrived. Unbounded retries:
    /// the publisher may be in another partition and come back any time.
    pub fn tick(&mut self, now: Millis) -> Vec<ModelEffect> {
        let due: Vec<(UserId, NodeId, u32)> = self
            .subs
            .iter()
            .filter_map(|(owner, st)| match st {
                SubState::AwaitingAnswer {
                    publisher,
                    deadline,
                    attempts,
                } if *deadline <= now => Some((owner.clone(), publisher.clone(), *attempts)),
                _ => None,
            })
            .collect();
        let mut fx = Vec::new();
        for (owner, publisher, attempts) in due {
            fx.extend(self.send_offer(&owner, &publisher, now, attempts + 1));
        }
        fx
    }

    pub fn next_deadline(&self) -> Option<Millis> {
        self.subs
            .values()
            .filter_map(|st| match st {
                SubState::AwaitingAnswer { deadline, .. } => Some(*deadline),
                SubState::Established { .. } => None,
            })
            .min()
    }

    // ---- accessors ------------------------------------------------------------------

    pub fn roster(&self) -> &BTreeMap<UserId, RosterEntry> {
        &self.roster
    }

    /// Chat messages in chronological order (`at`, then id).
    pub fn messages(&self) -> Vec<&ChatMessage> {
        let mut v: Vec<&ChatMessage> = self.messages.values().collect();
        v.sort_by(|a, b| (a.at, &a.id).cmp(&(b.at, &b.id)));
        v
    }

    pub fn calls(&self) -> &BTreeMap<UserId, BTreeSet<Track>> {
        &self.calls
    }

    pub fn publishers(&self) -> &BTreeMap<UserId, NodeId> {
        &self.publishers
    }

    /// Established media edges as this node sees them (both roles).
    pub fn edges(&self) -> &BTreeSet<StreamEdge> {
        &self.edges
    }

    pub fn typing_log(&self) -> &[(String, bool)] {
        &self.typing_log
    }

    pub fn candidates_seen(&self) -> u64 {
        self.candidates_seen
    }

    pub fn pending_negotiations(&self) -> usize {
        self.subs
            .values()
            .filter(|s| matches!(s, SubState::AwaitingAnswer { .. }))
            .count()
    }

    // ---- internals -----------------------------------------------------------------

    fn send_offer(
        &mut self,
        owner: &UserId,
        publisher: &NodeId,
        now: Millis,
        attempts: u32,
    ) -> Vec<ModelEffect> {
        let deadline = now + NEGOTIATION_TIMEOUT;
        self.subs.insert(
            owner.clone(),
            SubState::AwaitingAnswer {
                publisher: publisher.clone(),
                deadline,
                attempts,
            },
        );
        let blob = self.ids.descriptor_blob("offer");
        vec![
            ModelEffect::Notify {
                path: self.subscriber_path(owner, &self.node.clone()),
                value: json!({
                    "kind": "offer",
                    "from": self.node.as_str(),
                    "to": publisher.as_str(),
                    "blob": blob,
                }),
            },
            ModelEffect::ArmTimer { at: deadline },
        ]
    }

    /// The stream owned by `owner` is gone: tear down both roles.
    fn drop_publisher(&mut self, owner: &UserId) -> Vec<ModelEffect> {
        let Some(pub_node) = self.publishers.remove(owner) else {
            return vec![];
        };
        let mut fx = Vec::new();
        if pub_node == self.node {
            // We published it: every served edge dies.
            for sub in std::mem::take(&mut self.served) {
                let edge = StreamEdge {
                    stream: owner.clone(),
                    publisher: self.node.clone(),
                    subscriber: sub,
                };
                self.edges.remove(&edge);
                fx.push(ModelEffect::EdgeDown(edge));
            }
        } else if self.subs.remove(owner).is_some() {
            // We subscribed: withdraw our record; edge (if up) dies.
            fx.push(ModelEffect::Delete {
                path: self.subscriber_path(owner, &self.node.clone()),
            });
            let edge = StreamEdge {
                stream: owner.clone(),
                publisher: pub_node,
                subscriber: self.node.clone(),
            };
            if self.edges.remove(&edge) {
                fx.push(ModelEffect::EdgeDown(edge));
            }
        }
        fx
    }

    /// A node left the conference: forget any media edges touching it.
    fn drop_edges_touching(&mut self, node: &NodeId) -> Vec<ModelEffect> {
        let dead: Vec<StreamEdge> = self
            .edges
            .iter()
            .filter(|e| e.publisher == *node || e.subscriber == *node)
            .cloned()
            .collect();
        let mut fx = Vec::new();
        for edge in dead {
            self.edges.remove(&edge);
            self.served.remove(&edge.subscriber);
            if edge.subscriber == self.node {
                self.subs.remove(&edge.stream);
            }
            fx.push(ModelEffect::EdgeDown(edge));
        }
        fx
    }
}
