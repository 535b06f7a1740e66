//! The per-conference overlay: an unstructured peer-to-peer graph doing
//! two jobs with two tools.
//!
//! * **Flooding** — broadcast with duplicate suppression (a bounded
//!   seen-set) and a TTL backstop. Reaches every connected node, costs at
//!   most one frame per direction per link.
//! * **Distance-vector routing** — hop-count tables with split horizon and
//!   explicit withdrawals, driving point-to-point frames along next-hops.
//!
//! A node is a pure state machine: links change, frames arrive, and a list
//! of [`OverlayEvent`]s comes back telling the embedding what to transmit
//! and what to deliver locally.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use callmesh_core::id::{IdGen, MessageId, NodeId};

/// Hop budget for new frames. Also the routing "infinity": anything this
/// far away is unreachable, which caps count-to-infinity episodes.
pub const DEFAULT_TTL: u32 = 32;
pub const INFINITY_HOPS: u32 = 32;
/// How many message ids the duplicate-suppression set remembers.
pub const DEDUP_CAPACITY: usize = 4096;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum OverlayError {
    #[error("a node cannot link to itself")]
    SelfLink,
    #[error("a node cannot unicast to itself")]
    SelfSend,
}

/// Wire format of overlay frames (JSON, one object per frame).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Frame {
    Flood {
        id: MessageId,
        origin: NodeId,
        ttl: u32,
        body: String,
    },
    Unicast {
        id: MessageId,
        origin: NodeId,
        ttl: u32,
        dest: NodeId,
        body: String,
    },
    /// Routing advertisement: (destination, hop count) pairs, hop count
    /// `>= INFINITY_HOPS` meaning withdrawn.
    Routes {
        from: NodeId,
        entries: Vec<(NodeId, u32)>,
    },
}

impl Frame {
    pub fn message_id(&self) -> Option<&MessageId> {
        match self {
            Frame::Flood { id, .. } | Frame::Unicast { id, .. } => Some(id),
            Frame::Routes { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OverlayEvent {
    /// Hand this frame to the link toward `peer`.
    Transmit {
        peer: NodeId,
        frame: Frame,
    },
    /// A payload reached this node (including the origin's own copy).
    Deliver {
        origin: NodeId,
        body: String,
    },
    LinkUp {
        peer: NodeId,
    },
    LinkDown {
        peer: NodeId,
    },
    /// A unicast could not be forwarded: no route to `dest`.
    RouteMiss {
        dest: NodeId,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RouteEntry {
    pub next_hop: NodeId,
    pub hops: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OverlayCounters {
    pub frames_sent: u64,
    pub frames_received: u64,
    pub duplicates_dropped: u64,
    pub ttl_expired: u64,
    pub delivered: u64,
    pub malformed: u64,
    pub route_misses: u64,
}

/// Bounded FIFO set of recently seen message ids.
struct SeenSet {
    set: HashSet<MessageId>,
    order: VecDeque<MessageId>,
    capacity: usize,
}

impl SeenSet {
    fn new(capacity: usize) -> Self {
        Self {
            set: HashSet::new(),
            order: VecDeque::new(),
            capacity,
        }
    }

    /// Returns true if the id was new.
    fn insert(&mut self, id: &MessageId) -> bool {
        if !self.set.insert(id.clone()) {
            return false;
        }
        self.order.push_back(id.clone());
        if self.order.len() > self.capacity {
            if let Some(evicted) = self.order.pop_front() {
                self.set.remove(&evicted);
            }
        }
        true
    }
}

pub struct OverlayNode {
    id: NodeId,
    links: BTreeSet<NodeId>,
    routes: BTreeMap<NodeId, RouteEntry>,
    seen: SeenSet,
    ids: IdGen,
    pub counters: OverlayCounters,
}

impl OverlayNode {
    pub fn new(id: NodeId, ids: IdGen) -> Self {
        Self {
            id,
            links: BTreeSet::new(),
            routes: BTreeMap::new(),
            seen: SeenSet::new(DEDUP_CAPACITY),
            ids,
            counters: OverlayCounters::default(),
        }
    }

    pub fn id(&self) -> &NodeId {
        &self.id
    }

    pub fn links(&self) -> &BTreeSet<NodeId> {
        &self.links
    }

    pub fn routes(&self) -> &BTreeMap<NodeId, RouteEntry> {
        &self.routes
    }

    pub fn route_to(&self, dest: &NodeId) -> Option<&RouteEntry> {
        self.routes.get(dest)
    }

    /// Attach a link to `peer`. Idempotent; the duplicate case adds
    /// nothing and emits nothing.
    pub fn add_link(&mut self, peer: NodeId) -> Result<Vec<OverlayEvent>, OverlayError> {
        if peer == self.id {
            return Err(OverlayError::SelfLink);
        }
        if !self.links.insert(peer.clone()) {
            return Ok(vec![]);
        }
        // The direct route always wins: one hop is minimal.
        self.routes.insert(
            peer.clone(),
            RouteEntry {
                next_hop: peer.clone(),
                hops: 1,
            },
        );

        let mut events = vec![OverlayEvent::LinkUp { peer: peer.clone() }];
        // The new neighbor gets our full table; everyone else hears about
        // the new destination.
        events.push(self.transmit(peer.clone(), self.full_advert_for(&peer)));
        events.extend(self.advertise_changes(&[(peer.clone(), 1)], Some(&peer)));
        Ok(events)
    }

    /// Drop the link to `peer`, withdrawing every route through it.
    pub fn remove_link(&mut self, peer: &NodeId) -> Vec<OverlayEvent> {
        if !self.links.remove(peer) {
            return vec![];
        }
        let withdrawn: Vec<NodeId> = self
            .routes
            .iter()
            .filter(|(_, r)| r.next_hop == *peer)
            .map(|(d, _)| d.clone())
            .collect();
        for d in &withdrawn {
            self.routes.remove(d);
        }
        let mut events = vec![OverlayEvent::LinkDown { peer: peer.clone() }];
        let changes: Vec<(NodeId, u32)> =
            withdrawn.into_iter().map(|d| (d, INFINITY_HOPS)).collect();
        events.extend(self.advertise_changes(&changes, None));
        events
    }

    /// Broadcast `body` to every node in the connected component,
    /// including ourselves.
    pub fn flood(&mut self, body: String) -> (MessageId, Vec<OverlayEvent>) {
        let id = self.ids.message_id();
        self.seen.insert(&id);
        self.counters.delivered += 1;
        let mut events = vec![OverlayEvent::Deliver {
            origin: self.id.clone(),
            body: body.clone(),
        }];
        for peer in self.links.clone() {
            events.push(self.transmit(
                peer,
                Frame::Flood {
                    id: id.clone(),
                    origin: self.id.clone(),
                    ttl: DEFAULT_TTL,
                    body: body.clone(),
                },
            ));
        }
        (id, events)
    }

    /// Point-to-point send along the routing tables. An unreachable
    /// destination is not an error — it is a [`OverlayEvent::RouteMiss`],
    /// because reachability can change between the check and the send.
    pub fn send_to(
        &mut self,
        dest: NodeId,
        body: String,
    ) -> Result<(MessageId, Vec<OverlayEvent>), OverlayError> {
        if dest == self.id {
            return Err(OverlayError::SelfSend);
        }
        let id = self.ids.message_id();
        let Some(route) = self.routes.get(&dest).cloned() else {
            self.counters.route_misses += 1;
            return Ok((id, vec![OverlayEvent::RouteMiss { dest }]));
        };
        self.seen.insert(&id);
        let frame = Frame::Unicast {
            id: id.clone(),
            origin: self.id.clone(),
            ttl: DEFAULT_TTL,
            dest,
            body,
        };
        let event = self.transmit(route.next_hop, frame);
        Ok((id, vec![event]))
    }

    /// Feed one raw frame received from the direct neighbor `from`.
    pub fn on_frame(&mut self, from: &NodeId, raw: &str) -> Vec<OverlayEvent> {
        self.counters.frames_received += 1;
        let frame: Frame = match serde_json::from_str(raw) {
            Ok(f) => f,
            Err(_) => {
                self.counters.malformed += 1;
                return vec![];
            }
        };
        match frame {
            Frame::Flood {
                id,
                origin,
                ttl,
                body,
            } => self.on_flood(from, id, origin, ttl, body),
            Frame::Unicast {
                id,
                origin,
                ttl,
                dest,
                body,
            } => self.on_unicast(id, origin, ttl, dest, body),
            Frame::Routes {
                from: advertiser,
                entries,
            } => self.on_routes(&advertiser, &entries),
        }
    }

    // ---- internals -------------------------------------------------------

    fn transmit(&mut self, peer: NodeId, frame: Frame) -> OverlayEvent {
        self.counters.frames_sent += 1;
        OverlayEvent::Transmit { peer, frame }
    }

    fn on_flood(
        &mut self,
        from: &NodeId,
        id: MessageId,
        origin: NodeId,
        ttl: u32,
        body: String,
    ) -> Vec<OverlayEvent> {
        if !self.seen.insert(&id) {
            self.counters.duplicates_dropped += 1;
            return vec![];
        }
        self.counters.delivered += 1;
        let mut events = vec![OverlayEvent::Deliver {
            origin: origin.clone(),
            body: body.clone(),
        }];
        let remaining = ttl.saturating_sub(1);
        if remaining == 0 {
            self.counters.ttl_expired += 1;
            return events;
        }
        for peer in self.links.clone() {
            if peer == *from {
                continue;
            }
            events.push(self.transmit(
                peer,
                Frame::Flood {
                    id: id.clone(),
                    origin: origin.clone(),
                    ttl: remaining,
                    body: body.clone(),
                },
            ));
        }
        events
    }

    fn on_unicast(
        &mut self,
        id: MessageId,
        origin: NodeId,
        ttl: u32,
        dest: NodeId,
        body: String,
    ) -> Vec<OverlayEvent> {
        if !self.seen.insert(&id) {
            self.counters.duplicates_dropped += 1;
            return vec![];
        }
        if dest == self.id {
            self.counters.delivered += 1;
            return vec![OverlayEvent::Deliver { origin, body }];
        }
        let remaining = ttl.saturating_sub(1);
        if remaining == 0 {
            self.counters.ttl_expired += 1;
            return vec![];
        }
        let Some(route) = self.routes.get(&dest).cloned() else {
            self.counters.route_misses += 1;
            return vec![OverlayEvent::RouteMiss { dest }];
        };
        vec![self.transmit(
            route.next_hop,
            Frame::Unicast {
                id,
                origin,
                ttl: remaining,
                dest,
                body,
            },
        )]
    }

    fn on_routes(&mut self, advertiser: &NodeId, entries: &[(NodeId, u32)]) -> Vec<OverlayEvent> {
        let mut changes: Vec<(NodeId, u32)> = Vec::new();
        // Withdrawals we can counter because we hold a valid alternate
        // route: re-offered directly to the withdrawing neighbor.
        let mut reoffers: Vec<(NodeId, u32)> = Vec::new();

        for (dest, adv_hops) in entries {
            if *dest == self.id {
                continue;
            }
            let candidate = if *adv_hops >= INFINITY_HOPS {
                INFINITY_HOPS
            } else {
                (adv_hops + 1).min(INFINITY_HOPS)
            };
            let current = self.routes.get(dest).cloned();
            if candidate >= INFINITY_HOPS {
                match current {
                    Some(r) if r.next_hop == *advertiser => {
                        self.routes.remove(dest);
                        changes.push((dest.clone(), INFINITY_HOPS));
                    }
                    Some(r) => {
                        // Our route is intact; help the withdrawer recover.
                        reoffers.push((dest.clone(), r.hops));
                    }
                    None => {}
                }
                continue;
            }
            let adopt = match &current {
                None => true,
                Some(r) if r.next_hop == *advertiser => r.hops != candidate,
                Some(r) => candidate < r.hops,
            };
            if adopt {
                self.routes.insert(
                    dest.clone(),
                    RouteEntry {
                        next_hop: advertiser.clone(),
                        hops: candidate,
                    },
                );
                changes.push((dest.clone(), candidate));
            }
        }

        let mut events = self.advertise_changes(&changes, None);
        if !reoffers.is_empty() && self.links.contains(advertiser) {
            reoffers.sort();
            events.push(self.transmit(
                advertiser.clone(),
                Frame::Routes {
                    from: self.id.clone(),
                    entries: reoffers,
                },
            ));
        }
        events
    }

    /// Triggered update: tell each neighbor about changed routes, applying
    /// split horizon (never advertise a route back to its own next hop).
    /// Withdrawals go to everyone. `already_informed` suppresses the peer
    /// that just received a full table.
    fn advertise_changes(
        &mut self,
        changes: &[(NodeId, u32)],
        already_informed: Option<&NodeId>,
    ) -> Vec<OverlayEvent> {
        if changes.is_empty() {
            return vec![];
        }
        let mut events = Vec::new();
        for peer in self.links.clone() {
            if Some(&peer) == already_informed {
                continue;
            }
            let entries: Vec<(NodeId, u32)> = changes
                .iter()
                .filter(|(dest, hops)| {
                    *hops >= INFINITY_HOPS
                        || self.routes.get(dest).is_none_or(|r| r.next_hop != peer)
                })
                .cloned()
                .collect();
            if !entries.is_empty() {
                events.push(self.transmit(
                    peer,
                    Frame::Routes {
                        from: self.id.clone(),
                        entries,
                    },
                ));
            }
        }
        events
    }

    /// Full table advertisement for a newly attached neighbor, with split
    /// horizon applied.
    fn full_advert_for(&self, peer: &NodeId) -> Frame {
        let entries: Vec<(NodeId, u32)> = self
            .routes
            .iter()
            .filter(|(_, r)| r.next_hop != *peer)
            .map(|(d, r)| (d.clone(), r.hops))
            .collect();
        Frame::Routes {
            from: self.id.clone(),
            entries,
        }
    }
}
