//! A miniature deterministic network for exercising overlay nodes (and
//! stores riding on them) without the full scenario harness. Frames travel
//! through a FIFO queue; `settle()` pumps until quiescence. Everything is
//! ordered, so runs are replayable byte for byte.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use callmesh_core::id::{ConferenceId, IdGen, MessageId, NodeId, UserId};
use callmesh_core::time::Millis;

use crate::conference::{ConferenceModel, ModelEffect, StreamEdge, Track};
use crate::overlay::{OverlayEvent, OverlayNode};
use crate::storage::{ChangeEvent, Store, StoreEffect};

/// One frame on a wire: (to, from, raw).
type Wire = (NodeId, NodeId, String);

#[derive(Default)]
pub struct NetStats {
    /// Frames enqueued in total (all kinds, including routing chatter).
    pub frames: u64,
    /// Data frames enqueued per message id.
    pub per_message: BTreeMap<MessageId, u64>,
}

/// Overlay-only network.
pub struct SimNet {
    pub nodes: BTreeMap<NodeId, OverlayNode>,
    queue: VecDeque<Wire>,
    /// (at, origin, body) in delivery order.
    pub delivered: Vec<(NodeId, NodeId, String)>,
    pub route_misses: Vec<(NodeId, NodeId)>,
    pub stats: NetStats,
}

impl SimNet {
    pub fn new() -> Self {
        Self {
            nodes: BTreeMap::new(),
            queue: VecDeque::new(),
            delivered: Vec::new(),
            route_misses: Vec::new(),
            stats: NetStats::default(),
        }
    }

    pub fn add(&mut self, name: &str, seed: u64) -> NodeId {
        let id = NodeId::new(name).unwrap();
        self.nodes.insert(
            id.clone(),
            OverlayNode::new(id.clone(), IdGen::from_seed(seed)),
        );
        id
    }

    pub fn node(&self, id: &NodeId) -> &OverlayNode {
        &self.nodes[id]
    }

    /// Attach both ends of a link and process the handshake to quiescence.
    pub fn link(&mut self, a: &NodeId, b: &NodeId) {
        let events = self.nodes.get_mut(a).unwrap().add_link(b.clone()).unwrap();
        self.absorb(a, events);
        let events = self.nodes.get_mut(b).unwrap().add_link(a.clone()).unwrap();
        self.absorb(b, events);
        self.settle();
    }

    /// Detach both ends and process the withdrawals to quiescence.
    pub fn unlink(&mut self, a: &NodeId, b: &NodeId) {
        let events = self.nodes.get_mut(a).unwrap().remove_link(b);
        self.absorb(a, events);
        let events = self.nodes.get_mut(b).unwrap().remove_link(a);
        self.absorb(b, events);
        self.settle();
    }

    pub fn flood(&mut self, from: &NodeId, body: &str) -> MessageId {
        let (id, events) = self.nodes.get_mut(from).unwrap().flood(body.to_string());
        self.absorb(from, events);
        id
    }

    pub fn send(&mut self, from: &NodeId, to: &NodeId, body: &str) -> MessageId {
        let (id, events) = self
            .nodes
            .get_mut(from)
            .unwrap()
            .send_to(to.clone(), body.to_string())
            .unwrap();
        self.absorb(from, events);
        id
    }

    /// Process queued frames until nothing is left. Returns frames pumped.
    pub fn settle(&mut self) -> u64 {
        let mut pumped = 0;
        while let Some((to, from, raw)) = self.queue.pop_front() {
            // Frames addressed to a node that dropped the link mid-flight
            // are still processed: they were already on the wire.
            let events = match self.nodes.get_mut(&to) {
                Some(n) => n.on_frame(&from, &raw),
                None => continue,
            };
            self.absorb(&to, events);
            pumped += 1;
        }
        pumped
    }

    /// Total data frames recorded for one message id.
    pub fn frames_for(&self, id: &MessageId) -> u64 {
        self.stats.per_message.get(id).copied().unwrap_or(0)
    }

    /// How many times each node delivered this body.
    pub fn deliveries_of(&self, body: &str) -> BTreeMap<NodeId, u32> {
        let mut out = BTreeMap::new();
        for (at, _origin, b) in &self.delivered {
            if b == body {
                *out.entry(at.clone()).or_insert(0) += 1;
            }
        }
        out
    }

    fn absorb(&mut self, at: &NodeId, events: Vec<OverlayEvent>) {
        for event in events {
            match event {
                OverlayEvent::Transmit { peer, frame } => {
                    self.stats.frames += 1;
                    if let Some(id) = frame.message_id() {
                        *self.stats.per_message.entry(id.clone()).or_insert(0) += 1;
                    }
                    let raw = serde_json::to_string(&frame).expect("frames serialize");
                    self.queue.push_back((peer, at.clone(), raw));
                }
                OverlayEvent::Deliver { origin, body } => {
                    self.delivered.push((at.clone(), origin, body));
                }
                OverlayEvent::RouteMiss { dest } => {
                    self.route_misses.push((at.clone(), dest));
                }
                OverlayEvent::LinkUp { .. } | OverlayEvent::LinkDown { .. } => {}
            }
        }
    }
}

impl Default for SimNet {
    fn default() -> Self {
        Self::new()
    }
}

/// Overlay nodes with a [`Store`] riding on each: store effects go out as
/// floods/unicasts, delivered payloads are fed back into the stores, and
/// change events are collected per node for inspection.
pub struct StoreNet {
    pub net: SimNet,
    pub stores: BTreeMap<NodeId, Store>,
    /// Change events observed per node, in firing order.
    pub events: BTreeMap<NodeId, Vec<ChangeEvent>>,
}

impl StoreNet {
    pub fn new() -> Self {
        Self {
            net: SimNet::new(),
            stores: BTreeMap::new(),
            events: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, seed: u64) -> NodeId {
        let id = self.net.add(name, seed);
        let mut store = Store::new(id.clone(), IdGen::from_seed(seed ^ 0x5eed));
        // Record every change event for test inspection.
        store.subscribe_all();
        self.stores.insert(id.clone(), store);
        self.events.insert(id.clone(), Vec::new());
        id
    }

    /// Link two nodes and run anti-entropy (each side offers its snapshot).
    pub fn link(&mut self, a: &NodeId, b: &NodeId) {
        self.net.link(a, b);
        let fx = self.stores.get_mut(a).unwrap().on_link_up(b);
        self.apply_store_effects(a, fx);
        let fx = self.stores.get_mut(b).unwrap().on_link_up(a);
        self.apply_store_effects(b, fx);
        self.settle();
    }

    pub fn unlink(&mut self, a: &NodeId, b: &NodeId) {
        self.net.unlink(a, b);
    }

    pub fn put(&mut self, at: &NodeId, path: &str, value: serde_json::Value) {
        let fx = self
            .stores
            .get_mut(at)
            .unwrap()
            .put_str(path, value)
            .unwrap()
            .1;
        self.apply_store_effects(at, fx);
        self.settle();
    }

    pub fn delete(&mut self, at: &NodeId, path: &str) {
        let fx = self.stores.get_mut(at).unwrap().delete_str(path).unwrap().1;
        self.apply_store_effects(at, fx);
        self.settle();
    }

    pub fn notify(&mut self, at: &NodeId, path: &str, value: serde_json::Value) {
        let fx = self
            .stores
            .get_mut(at)
            .unwrap()
            .notify_str(path, value)
            .unwrap();
        self.apply_store_effects(at, fx);
        self.settle();
    }

    /// Pump network frames and feed payload deliveries into stores until
    /// everything is quiet.
    pub fn settle(&mut self) {
        loop {
            self.net.settle();
            // Deliveries not yet consumed by stores:
            let pending: Vec<(NodeId, NodeId, String)> = self.net.delivered.drain(..).collect();
            if pending.is_empty() {
                break;
            }
            for (at, _origin, body) in pending {
                let fx = self.stores.get_mut(&at).unwrap().on_payload(&body);
                self.apply_store_effects(&at, fx);
            }
        }
        // Surface accumulated change events.
        for (id, store) in &mut self.stores {
            self.events
                .get_mut(id)
                .unwrap()
                .extend(store.drain_observed());
        }
    }

    fn apply_store_effects(&mut self, at: &NodeId, effects: Vec<StoreEffect>) {
        for fx in effects {
            match fx {
                StoreEffect::Flood { body } => {
                    let (_, events) = self.net.nodes.get_mut(at).unwrap().flood(body);
                    self.net.absorb(at, events);
                }
                StoreEffect::SendTo { peer, body } => {
                    let (_, events) = self
                        .net
                        .nodes
                        .get_mut(at)
                        .unwrap()
                        .send_to(peer, body)
                        .unwrap();
                    self.net.absorb(at, events);
                }
            }
        }
    }

    /// True when every store in `ids` has byte-identical canonical content.
    pub fn converged(&self, ids: &[NodeId]) -> bool {
        let mut bytes: Option<Vec<u8>> = None;
        for id in ids {
            let b = self.stores[id].canonical_bytes();
            match &bytes {
                None => bytes = Some(b),
                Some(prev) if *prev != b => return false,
                _ => {}
            }
        }
        true
    }
}

impl Default for StoreNet {
    fn default() -> Self {
        Self::new()
    }
}

/// A full conference floor: overlay + store + [`ConferenceModel`] per
/// node, with virtual time so negotiation timers can fire. Model effects
/// are looped back through the store until everything is quiet.
pub struct ConfNet {
    pub inner: StoreNet,
    pub models: BTreeMap<NodeId, ConferenceModel>,
    conf: ConferenceId,
    /// How many change events each model has already consumed.
    cursors: BTreeMap<NodeId, usize>,
    /// Model timer deadlines still pending.
    timers: BTreeSet<(Millis, NodeId)>,
    /// Media edges currently up (union of both endpoints' registrations).
    pub media_edges: BTreeSet<StreamEdge>,
    /// Event suppression: change events at `node` whose JSON value
    /// contains the substring never reach its model (simulated loss).
    blocks: Vec<(NodeId, String)>,
    pub now: Millis,
}

impl ConfNet {
    pub fn new(conf: &str) -> Self {
        Self {
            inner: StoreNet::new(),
            models: BTreeMap::new(),
            conf: ConferenceId::new(conf).unwrap(),
            cursors: BTreeMap::new(),
            timers: BTreeSet::new(),
            media_edges: BTreeSet::new(),
            blocks: Vec::new(),
            now: 0,
        }
    }

    pub fn add(&mut self, user: &str, node_name: &str, seed: u64) -> NodeId {
        let id = self.inner.add(node_name, seed);
        let model = ConferenceModel::new(
            self.conf.clone(),
            UserId::new(user).unwrap(),
            id.clone(),
            IdGen::from_seed(seed ^ 0xc0f),
        );
        self.models.insert(id.clone(), model);
        self.cursors.insert(id.clone(), 0);
        id
    }

    pub fn link(&mut self, a: &NodeId, b: &NodeId) {
        self.inner.link(a, b);
        self.run();
    }

    pub fn unlink(&mut self, a: &NodeId, b: &NodeId) {
        self.inner.unlink(a, b);
        self.run();
    }

    pub fn join(&mut self, at: &NodeId) {
        let fx = self.models.get_mut(at).unwrap().join();
        self.apply_model_effects(at, fx);
        self.run();
    }

    pub fn leave(&mut self, at: &NodeId) {
        let fx = self.models.get_mut(at).unwrap().leave();
        self.apply_model_effects(at, fx);
        self.run();
    }

    pub fn post(&mut self, at: &NodeId, text: &str) {
        let now = self.now;
        let (_, fx) = self
            .models
            .get_mut(at)
            .unwrap()
            .post_message(text, now)
            .unwrap();
        self.apply_model_effects(at, fx);
        self.run();
    }

    pub fn typing(&mut self, at: &NodeId, active: bool) {
        let fx = self.models.get_mut(at).unwrap().set_typing(active);
        self.apply_model_effects(at, fx);
        self.run();
    }

    pub fn enable_media(&mut self, at: &NodeId, tracks: &[Track]) {
        let fx = self
            .models
            .get_mut(at)
            .unwrap()
            .enable_media(tracks.iter().copied());
        self.apply_model_effects(at, fx);
        self.run();
    }

    pub fn disable_media(&mut self, at: &NodeId) {
        let fx = self.models.get_mut(at).unwrap().disable_media();
        self.apply_model_effects(at, fx);
        self.run();
    }

    /// Suppress change events at `node` whose value mentions `substr`.
    pub fn block(&mut self, at: &NodeId, substr: &str) {
        self.blocks.push((at.clone(), substr.to_string()));
    }

    pub fn unblock(&mut self, at: &NodeId) {
        self.blocks.retain(|(n, _)| n != at);
    }

    /// Advance virtual time, firing model timers in deadline order.
    pub fn advance(&mut self, ms: Millis) {
        let target = self.now + ms;
        while let Some((deadline, node)) = self.timers.first().cloned() {
            if deadline > target {
                break;
            }
            self.timers.remove(&(deadline, node.clone()));
            self.now = deadline;
            let fx = self.models.get_mut(&node).unwrap().tick(deadline);
            self.apply_model_effects(&node, fx);
            self.run();
        }
        self.now = target;
    }

    /// Pump network + stores + models to fixpoint.
    pub fn run(&mut self) {
        loop {
            self.inner.settle();
            let mut any = false;
            let ids: Vec<NodeId> = self.models.keys().cloned().collect();
            for id in &ids {
                let cursor = self.cursors[id];
                let events: Vec<ChangeEvent> = self.inner.events[id][cursor..].to_vec();
                *self.cursors.get_mut(id).unwrap() = cursor + events.len();
                for ev in &events {
                    if self.is_blocked(id, ev) {
                        continue;
                    }
                    let now = self.now;
                    let fx = self.models.get_mut(id).unwrap().on_event(ev, now);
                    if !fx.is_empty() {
                        any = true;
                        self.apply_model_effects(id, fx);
                    }
                }
            }
            if !any {
                break;
            }
        }
    }

    fn is_blocked(&self, at: &NodeId, ev: &ChangeEvent) -> bool {
        self.blocks.iter().any(|(n, s)| {
            n == at
                && ev
                    .value
                    .as_ref()
                    .map(|v| v.to_string().contains(s.as_str()))
                    .unwrap_or(false)
        })
    }

    fn apply_model_effects(&mut self, at: &NodeId, effects: Vec<ModelEffect>) {
        for fx in effects {
            match fx {
                ModelEffect::Put { path, value } => {
                    let (_, sfx) = self.inner.stores.get_mut(at).unwrap().put(&path, value);
                    self.inner.apply_store_effects(at, sfx);
                }
                ModelEffect::Delete { path } => {
                    let (_, sfx) = self.inner.stores.get_mut(at).unwrap().delete(&path);
                    self.inner.apply_store_effects(at, sfx);
                }
                ModelEffect::Notify { path, value } => {
                    let sfx = self.inner.stores.get_mut(at).unwrap().notify(&path, value);
                    self.inner.apply_store_effects(at, sfx);
                }
                ModelEffect::EdgeUp(edge) => {
                    self.media_edges.insert(edge);
                }
                ModelEffect::EdgeDown(edge) => {
                    self.media_edges.remove(&edge);
                }
                ModelEffect::ArmTimer { at: deadline } => {
                    self.timers.insert((deadline, at.clone()));
                }
            }
        }
    }

    pub fn model(&self, id: &NodeId) -> &ConferenceModel {
        &self.models[id]
    }

    pub fn converged(&self, ids: &[NodeId]) -> bool {
        self.inner.converged(ids)
    }
}

/// Standard graph shapes for tests.
pub mod graphs {
    /// Edges of a ring of n nodes.
    pub fn ring(n: usize) -> Vec<(usize, usize)> {
        (0..n).map(|i| (i, (i + 1) % n)).collect()
    }

    /// Edges of a line of n nodes.
    pub fn line(n: usize) -> Vec<(usize, usize)> {
        (1..n).map(|i| (i - 1, i)).collect()
    }

    /// Edges of a star: node 0 in the center.
    pub fn star(n: usize) -> Vec<(usize, usize)> {
        (1..n).map(|i| (0, i)).collect()
    }

    /// Full mesh edges.
    pub fn full(n: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                out.push((i, j));
            }
        }
        out
    }

    /// Deterministic connected random graph: a spanning line plus extra
    /// chords chosen by a simple LCG from `seed`.
    pub fn sprinkled(n: usize, extra: usize, seed: u64) -> Vec<(usize, usize)> {
        let mut edges = line(n);
        let mut state = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 33) as usize
        };
        let mut added = 0;
        while added < extra {
            let a = next() % n;
            let b = next() % n;
            if a == b {
                continue;
            }
            let e = (a.min(b), a.max(b));
            if !edges.contains(&e) {
                edges.push(e);
                added += 1;
            }
        }
        edges
    }
}
