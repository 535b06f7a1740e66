//! The replicated hierarchical store that rides on the overlay.
//!
//! Every node in a conference holds a full replica of a tree of JSON
//! resources. Writes are flooded; concurrent writes resolve by
//! last-writer-wins over a `(lamport, node-id)` version stamp; deletes are
//! tombstones so they win against older writes arriving late. When a link
//! comes up, both ends exchange full snapshots and adopt whatever is newer
//! (anti-entropy), re-flooding adopted records so their own partition
//! learns too. `notify` is the ephemeral sibling of `put`: delivered
//! everywhere once, never stored, never replayed.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use callmesh_core::id::{IdGen, NodeId};
use callmesh_core::Document;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PathError {
    #[error("path must start with '/'")]
    NoLeadingSlash,
    #[error("path has an empty segment")]
    EmptySegment,
    #[error("path is empty")]
    Empty,
}

/// A resource path like `/sessions/<conf>/users/<user>`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ResourcePath(Vec<String>);

impl ResourcePath {
    pub fn new(segments: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self(segments.into_iter().map(Into::into).collect())
    }

    pub fn segments(&self) -> &[String] {
        &self.0
    }

    pub fn child(&self, segment: impl Into<String>) -> Self {
        let mut segs = self.0.clone();
        segs.push(segment.into());
        Self(segs)
    }

    pub fn starts_with(&self, prefix: &ResourcePath) -> bool {
        self.0.len() >= prefix.0.len() && self.0[..prefix.0.len()] == prefix.0[..]
    }
}

impl fmt::Display for ResourcePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for seg in &self.0 {
            write!(f, "/{seg}")?;
        }
        Ok(())
    }
}

impl FromStr for ResourcePath {
    type Err = PathError;

    fn from_str(s: &str) -> Result<Self, PathError> {
        if s.is_empty() {
            return Err(PathError::Empty);
        }
        let Some(rest) = s.strip_prefix('/') else {
            return Err(PathError::NoLeadingSlash);
        };
        if rest.is_empty() {
            return Err(PathError::Empty);
        }
        let mut segs = Vec::new();
        for seg in rest.split('/') {
            if seg.is_empty() {
                return Err(PathError::EmptySegment);
            }
            segs.push(seg.to_string());
        }
        Ok(Self(segs))
    }
}

/// Total order deciding write conflicts: higher lamport wins, node id
/// breaks ties.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VersionStamp {
    pub lamport: u64,
    pub node: NodeId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceRecord {
    pub value: Document,
    pub version: VersionStamp,
    pub tombstone: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChangeKind {
    Created,
    Updated,
    Deleted,
    Notify,
}

/// What subscribers see. `origin` is the node whose write caused this.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangeEvent {
    pub kind: ChangeKind,
    pub path: ResourcePath,
    pub value: Option<Document>,
    pub origin: NodeId,
}

/// What the store wants the overlay to do.
#[derive(Clone, Debug, PartialEq)]
pub enum StoreEffect {
    Flood { body: String },
    SendTo { peer: NodeId, body: String },
}

/// Wire format of storage payloads (carried as overlay frame bodies).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
enum StoreFrame {
    Put {
        path: String,
        value: Document,
        lamport: u64,
        node: NodeId,
    },
    Del {
        path: String,
        lamport: u64,
        node: NodeId,
    },
    Notify {
        path: String,
        value: Document,
        from: NodeId,
    },
    Snap {
        from: NodeId,
        records: Vec<SnapRecord>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SnapRecord {
    path: String,
    value: Document,
    lamport: u64,
    node: NodeId,
    tombstone: bool,
}

type Handler = Box<dyn FnMut(&ChangeEvent)>;

struct Subscription {
    prefix: ResourcePath,
    handler: Handler,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SubscriptionId(usize);

pub struct Store {
    node: NodeId,
    records: BTreeMap<String, ResourceRecord>,
    lamport: u64,
    subs: Vec<Option<Subscription>>,
    /// Test/inspection tap: when enabled, every event is also queued here.
    observed: Option<Vec<ChangeEvent>>,
    #[allow(dead_code)]
    ids: IdGen,
}

impl Store {
    pub fn new(node: NodeId, ids: IdGen) -> Self {
        Self {
            node,
            records: BTreeMap::new(),
            lamport: 0,
            subs: Vec::new(),
            observed: None,
            ids,
        }
    }

    pub fn node(&self) -> &NodeId {
        &self.node
    }

    // ---- reads -----------------------------------------------------------

    /// Live value at a path (tombstones read as absent).
    pub fn get(&self, path: &ResourcePath) -> Option<&Document> {
        self.records
            .get(&path.to_string())
            .filter(|r| !r.tombstone)
            .map(|r| &r.value)
    }

    /// All live resources under a prefix, sorted by path.
    pub fn list(&self, prefix: &ResourcePath) -> Vec<(ResourcePath, &Document)> {
        let want = prefix.to_string();
        self.records
            .iter()
            .filter(|(_, r)| !r.tombstone)
            .filter_map(|(k, r)| {
                let p: ResourcePath = k.parse().expect("stored paths are canonical");
                (p.to_string() == want || k.starts_with(&format!("{want}/")))
                    .then_some((p, &r.value))
            })
            .collect()
    }

    /// Canonical serialization of the full replica (values, versions and
    /// tombstones). Two replicas are converged iff these bytes match.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&self.records).expect("records serialize")
    }

    pub fn record_count(&self) -> usize {
        self.records.len()
    }

    // ---- subscriptions ----------------------------------------------------

    pub fn subscribe(
        &mut self,
        prefix: ResourcePath,
        handler: impl FnMut(&ChangeEvent) + 'static,
    ) -> SubscriptionId {
        self.subs.push(Some(Subscription {
            prefix,
            handler: Box::new(handler),
        }));
        SubscriptionId(self.subs.len() - 1)
    }

    pub fn unsubscribe(&mut self, id: SubscriptionId) {
        if let Some(slot) = self.subs.get_mut(id.0) {
            *slot = None;
        }
    }

    /// Enable the observation tap (used by tests and the harness event
    /// log): every event is queued for [`Store::drain_observed`].
    pub fn subscribe_all(&mut self) {
        if self.observed.is_none() {
            self.observed = Some(Vec::new());
        }
    }

    pub fn drain_observed(&mut self) -> Vec<ChangeEvent> {
        self.observed
            .as_mut()
            .map(std::mem::take)
            .unwrap_or_default()
    }

    // ---- writes ------------------------------------------------------------

    pub fn put(
        &mut self,
        path: &ResourcePath,
        value: Document,
    ) -> (VersionStamp, Vec<StoreEffect>) {
        self.lamport += 1;
        let version = VersionStamp {
            lamport: self.lamport,
            node: self.node.clone(),
        };
        let key = path.to_string();
        let was_live = self.records.get(&key).is_some_and(|r| !r.tombstone);
        self.records.insert(
            key.clone(),
            ResourceRecord {
                value: value.clone(),
                version: version.clone(),
                tombstone: false,
            },
        );
        let kind = if was_live {
            ChangeKind::Updated
        } else {
            ChangeKind::Created
        };
        self.fire(ChangeEvent {
            kind,
            path: path.clone(),
            value: Some(value.clone()),
            origin: self.node.clone(),
        });
        let frame = StoreFrame::Put {
            path: key,
            value,
            lamport: version.lamport,
            node: self.node.clone(),
        };
        (
            version,
            vec![StoreEffect::Flood {
                body: encode(&frame),
            }],
        )
    }

    pub fn delete(&mut self, path: &ResourcePath) -> (VersionStamp, Vec<StoreEffect>) {
        self.lamport += 1;
        let version = VersionStamp {
            lamport: self.lamport,
            node: self.node.clone(),
        };
        let key = path.to_string();
        let was_live = self.records.get(&key).is_some_and(|r| !r.tombstone);
        self.records.insert(
            key.clone(),
            ResourceRecord {
                value: Document::Null,
                version: version.clone(),
                tombstone: true,
            },
        );
        if was_live {
            self.fire(ChangeEvent {
                kind: ChangeKind::Deleted,
                path: path.clone(),
                value: None,
                origin: self.node.clone(),
            });
        }
        let frame = StoreFrame::Del {
            path: key,
            lamport: version.lamport,
            node: self.node.clone(),
        };
        (
            version,
            vec![StoreEffect::Flood {
                body: encode(&frame),
            }],
        )
    }

    /// Ephemeral broadcast: delivered to subscribers everywhere exactly
    /// once, never stored, never part of snapshots.
    pub fn notify(&mut self, path: &ResourcePath, value: Document) -> Vec<StoreEffect> {
        self.fire(ChangeEvent {
            kind: ChangeKind::Notify,
            path: path.clone(),
            value: Some(value.clone()),
            origin: self.node.clone(),
        });
        let frame = StoreFrame::Notify {
            path: path.to_string(),
            value,
            from: self.node.clone(),
        };
        vec![StoreEffect::Flood {
            body: encode(&frame),
        }]
    }

    // ---- string-path conveniences -----------------------------------------

    pub fn put_str(
        &mut self,
        path: &str,
        value: Document,
    ) -> Result<(VersionStamp, Vec<StoreEffect>), PathError> {
        Ok(self.put(&path.parse()?, value))
    }

    pub fn delete_str(
        &mut self,
        path: &str,
    ) -> Result<(VersionStamp, Vec<StoreEffect>), PathError> {
        Ok(self.delete(&path.parse()?))
    }

    pub fn notify_str(
        &mut self,
        path: &str,
        value: Document,
    ) -> Result<Vec<StoreEffect>, PathError> {
        Ok(self.notify(&path.parse()?, value))
    }

    pub fn get_str(&self, path: &str) -> Option<&Document> {
        path.parse().ok().and_then(|p: ResourcePath| self.get(&p))
    }

    // ---- replication -------------------------------------------------------

    /// A link to `peer` came up: offer our full snapshot.
    pub fn on_link_up(&mut self, peer: &NodeId) -> Vec<StoreEffect> {
        let records: Vec<SnapRecord> = self
            .records
            .iter()
            .map(|(k, r)| SnapRecord {
                path: k.clone(),
                value: r.value.clone(),
                lamport: r.version.lamport,
                node: r.version.node.clone(),
                tombstone: r.tombstone,
            })
            .collect();
        let frame = StoreFrame::Snap {
            from: self.node.clone(),
            records,
        };
        vec![StoreEffect::SendTo {
            peer: peer.clone(),
            body: encode(&frame),
        }]
    }

    /// Feed one payload delivered by the overlay. Returns effects (only
    /// snapshot adoption re-floods; everything else is quiet).
    pub fn on_payload(&mut self, body: &str) -> Vec<StoreEffect> {
        let Ok(frame) = serde_json::from_str::<StoreFrame>(body) else {
            return vec![];
        };
        match frame {
            StoreFrame::Put {
                path,
                value,
                lamport,
                node,
            } => {
                if node != self.node {
                    self.adopt(&path, value, VersionStamp { lamport, node }, false);
                }
                vec![]
            }
            StoreFrame::Del {
                path,
                lamport,
                node,
            } => {
                if node != self.node {
                    self.adopt(&path, Document::Null, VersionStamp { lamport, node }, true);
                }
                vec![]
            }
            StoreFrame::Notify { path, value, from } => {
                if from != self.node {
                    if let Ok(p) = path.parse::<ResourcePath>() {
                        self.fire(ChangeEvent {
                            kind: ChangeKind::Notify,
                            path: p,
                            value: Some(value),
                            origin: from,
                        });
                    }
                }
                vec![]
            }
            StoreFrame::Snap { from, records } => {
                if from == self.node {
                    return vec![];
                }
                let mut effects = Vec::new();
                for rec in records {
                    let version = VersionStamp {
                        lamport: rec.lamport,
                        node: rec.node.clone(),
                    };
                    if self.adopt(&rec.path, rec.value.clone(), version, rec.tombstone) {
                        // Adopted from the other partition: our own side
                        // must hear about it too.
                        let reflood = if rec.tombstone {
                            StoreFrame::Del {
                                path: rec.path,
                                lamport: rec.lamport,
                                node: rec.node,
                            }
                        } else {
                            StoreFrame::Put {
                                path: rec.path,
                                value: rec.value,
                                lamport: rec.lamport,
                                node: rec.node,
                            }
                        };
                        effects.push(StoreEffect::Flood {
                            body: encode(&reflood),
                        });
                    }
                }
                effects
            }
        }
    }

    // ---- internals ----------------------------------------------------------

    /// Adopt a remote record if it is strictly newer. Returns true if
    /// adopted. Fires the appropriate change event.
    fn adopt(
        &mut self,
        path: &str,
        value: Document,
        version: VersionStamp,
        tombstone: bool,
    ) -> bool {
        let Ok(parsed) = path.parse::<ResourcePath>() else {
            return false;
        };
        let existing = self.records.get(path);
        if let Some(r) = existing {
            if version <= r.version {
                return false;
            }
        }
        let was_live = existing.is_some_and(|r| !r.tombstone);
        self.lamport = self.lamport.max(version.lamport);
        self.records.insert(
            path.to_string(),
            ResourceRecord {
                value: value.clone(),
                version: version.clone(),
                tombstone,
            },
        );
        let origin = version.node;
        match (was_live, tombstone) {
            (false, false) => self.fire(ChangeEvent {
                kind: ChangeKind::Created,
                path: parsed,
                value: Some(value),
                origin,
            }),
            (true, false) => self.fire(ChangeEvent {
                kind: ChangeKind::Updated,
                path: parsed,
                value: Some(value),
                origin,
            }),
            (true, true) => self.fire(ChangeEvent {
                kind: ChangeKind::Deleted,
                path: parsed,
                value: None,
                origin,
            }),
            // Tombstone over tombstone/absent: version bookkeeping only.
            (false, true) => {}
        }
        true
    }

    fn fire(&mut self, event: ChangeEvent) {
        for sub in self.subs.iter_mut().flatten() {
            if event.path.starts_with(&sub.prefix) {
                (sub.handler)(&event);
            }
        }
        if let Some(tap) = &mut self.observed {
            tap.push(event);
        }
    }
}

fn encode(frame: &StoreFrame) -> String {
    serde_json::to_string(frame).expect("store frames serialize")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn store(name: &str) -> Store {
        Store::new(NodeId::new(name).unwrap(), IdGen::from_seed(1))
    }

    fn path(s: &str) -> ResourcePath {
        s.parse().unwrap()
    }

    #[test]
    fn path_parsing() {
        let p = path("/sessions/c1/users/alice@x.y");
        assert_eq!(p.segments().len(), 4);
        assert_eq!(p.to_string(), "/sessions/c1/users/alice@x.y");
        assert!(p.starts_with(&path("/sessions/c1")));
        assert!(p.starts_with(&path("/sessions/c1/users")));
        assert!(!p.starts_with(&path("/sessions/c2")));
        assert!(!path("/sessions").starts_with(&p));

        assert_eq!(
            "nope".parse::<ResourcePath>(),
            Err(PathError::NoLeadingSlash)
        );
        assert_eq!(
            "/a//b".parse::<ResourcePath>(),
            Err(PathError::EmptySegment)
        );
        assert_eq!("/".parse::<ResourcePath>(), Err(PathError::Empty));
    }

    #[test]
    fn put_get_update_delete_lifecycle() {
        let mut s = store("n1");
        s.subscribe_all();
        let p = path("/a/b");

        let (v1, fx) = s.put(&p, json!({"x": 1}));
        assert_eq!(v1.lamport, 1);
        assert_eq!(fx.len(), 1);
        assert_eq!(s.get(&p), Some(&json!({"x": 1})));

        let (v2, _) = s.put(&p, json!({"x": 2}));
        assert!(v2 > v1);
        assert_eq!(s.get(&p), Some(&json!({"x": 2})));

        let (v3, _) = s.delete(&p);
        assert!(v3 > v2);
        assert_eq!(s.get(&p), None);

        let kinds: Vec<ChangeKind> = s.drain_observed().iter().map(|e| e.kind).collect();
        assert_eq!(
            kinds,
            vec![
                ChangeKind::Created,
                ChangeKind::Updated,
                ChangeKind::Deleted
            ]
        );
    }

    #[test]
    fn list_returns_live_subtree_sorted() {
        let mut s = store("n1");
        s.put(&path("/c/users/bob"), json!(2)).1.clear();
        s.put(&path("/c/users/alice"), json!(1)).1.clear();
        s.put(&path("/c/messages/m1"), json!("hi")).1.clear();
        s.put(&path("/d/users/eve"), json!(3)).1.clear();
        s.delete(&path("/c/users/bob")).1.clear();

        let users: Vec<String> = s
            .list(&path("/c/users"))
            .iter()
            .map(|(p, _)| p.to_string())
            .collect();
        assert_eq!(users, vec!["/c/users/alice"]);
        let all: Vec<String> = s
            .list(&path("/c"))
            .iter()
            .map(|(p, _)| p.to_string())
            .collect();
        assert_eq!(all, vec!["/c/messages/m1", "/c/users/alice"]);
        // Prefix matching is segment-wise, not textual.
        assert!(s.list(&path("/c/user")).is_empty());
    }

    #[test]
    fn lww_higher_lamport_wins_node_breaks_ties() {
        let mut s = store("n2");
        s.put(&path("/k"), json!("local-1")); // lamport 1, node n2

        // Remote write with same lamport from smaller node id: loses.
        let lose = StoreFrame::Put {
            path: "/k".into(),
            value: json!("remote-low"),
            lamport: 1,
            node: NodeId::new("n1").unwrap(),
        };
        s.on_payload(&encode(&lose));
        assert_eq!(s.get(&path("/k")), Some(&json!("local-1")));

        // Same lamport, larger node id: wins the tie.
        let win_tie = StoreFrame::Put {
            path: "/k".into(),
            value: json!("remote-high"),
            lamport: 1,
            node: NodeId::new("n9").unwrap(),
        };
        s.on_payload(&encode(&win_tie));
        assert_eq!(s.get(&path("/k")), Some(&json!("remote-high")));

        // Higher lamport from anywhere: wins.
        let newer = StoreFrame::Put {
            path: "/k".into(),
            value: json!("newer"),
            lamport: 5,
            node: NodeId::new("n0").unwrap(),
        };
        s.on_payload(&encode(&newer));
        assert_eq!(s.get(&path("/k")), Some(&json!("newer")));
        // And our lamport clock caught up: next local write is newer still.
        let (v, _) = s.put(&path("/k"), json!("local-2"));
        assert_eq!(v.lamport, 6);
    }

    #[test]
    fn tombstone_beats_older_write_and_loses_to_newer() {
        let mut s = store("n1");
        s.subscribe_all();
        s.put(&path("/k"), json!("v1"));
        s.drain_observed();

        // Tombstone with higher version kills it.
        let del = StoreFrame::Del {
            path: "/k".into(),
            lamport: 9,
            node: NodeId::new("zz").unwrap(),
        };
        s.on_payload(&encode(&del));
        assert_eq!(s.get(&path("/k")), None);
        let ev = s.drain_observed();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].kind, ChangeKind::Deleted);

        // An older write arriving late does not resurrect it.
        let stale = StoreFrame::Put {
            path: "/k".into(),
            value: json!("stale"),
            lamport: 3,
            node: NodeId::new("aa").unwrap(),
        };
        s.on_payload(&encode(&stale));
        assert_eq!(s.get(&path("/k")), None);
        assert!(s.drain_observed().is_empty());

        // A genuinely newer write resurrects (Created again).
        let fresh = StoreFrame::Put {
            path: "/k".into(),
            value: json!("fresh"),
            lamport: 12,
            node: NodeId::new("aa").unwrap(),
        };
        s.on_payload(&encode(&fresh));
        assert_eq!(s.get(&path("/k")), Some(&json!("fresh")));
        assert_eq!(s.drain_observed()[0].kind, ChangeKind::Created);
    }

    #[test]
    fn own_frames_echoed_back_are_ignored() {
        let mut s = store("n1");
        s.subscribe_all();
        let (_, fx) = s.put(&path("/k"), json!("v"));
        s.drain_observed();
        // The overlay delivers our own flood back to us.
        let StoreEffect::Flood { body } = &fx[0] else {
            panic!()
        };
        s.on_payload(body);
        assert!(s.drain_observed().is_empty(), "no double event");
        assert_eq!(s.get(&path("/k")), Some(&json!("v")));
    }

    #[test]
    fn notify_fires_subscribers_but_stores_nothing() {
        let mut s = store("n1");
        s.subscribe_all();
        let fx = s.notify(&path("/c/typing/alice"), json!({"typing": true}));
        assert_eq!(fx.len(), 1, "notify floods");
        let ev = s.drain_observed();
        assert_eq!(ev[0].kind, ChangeKind::Notify);
        assert_eq!(s.record_count(), 0, "nothing persisted");

        // Receiving someone else's notify: event, no record.
        let frame = StoreFrame::Notify {
            path: "/c/typing/bob".into(),
            value: json!({"typing": true}),
            from: NodeId::new("n2").unwrap(),
        };
        s.on_payload(&encode(&frame));
        let ev = s.drain_observed();
        assert_eq!(ev[0].kind, ChangeKind::Notify);
        assert_eq!(ev[0].origin.as_str(), "n2");
        assert_eq!(s.record_count(), 0);
    }

    #[test]
    fn prefix_subscriptions_filter_and_unsubscribe_works() {
        use std::cell::RefCell;
        use std::rc::Rc;

        let mut s = store("n1");
        let hits: Rc<RefCell<Vec<String>>> = Rc::new(RefCell::new(Vec::new()));
        let h = hits.clone();
        let id = s.subscribe(path("/c/users"), move |ev| {
            h.borrow_mut().push(ev.path.to_string());
        });

        s.put(&path("/c/users/alice"), json!(1));
        s.put(&path("/c/messages/m1"), json!(2));
        s.put(&path("/c/users/bob"), json!(3));
        assert_eq!(*hits.borrow(), vec!["/c/users/alice", "/c/users/bob"]);

        s.unsubscribe(id);
        s.put(&path("/c/users/carol"), json!(4));
        assert_eq!(hits.borrow().len(), 2, "unsubscribed");
    }

    #[test]
    fn snapshot_adoption_refloods_only_adopted_records() {
        let mut s = store("n1");
        s.put(&path("/a"), json!("mine")); // lamport 1
        s.put(&path("/b"), json!("mine-newer"));
        s.put(&path("/b"), json!("mine-newest")); // lamport 3

        let snap = StoreFrame::Snap {
            from: NodeId::new("n2").unwrap(),
            records: vec![
                SnapRecord {
                    path: "/a".into(),
                    value: json!("theirs-newer"),
                    lamport: 7,
                    node: NodeId::new("n2").unwrap(),
                    tombstone: false,
                },
                SnapRecord {
                    path: "/b".into(),
                    value: json!("theirs-stale"),
                    lamport: 2,
                    node: NodeId::new("n2").unwrap(),
                    tombstone: false,
                },
            ],
        };
        let fx = s.on_payload(&encode(&snap));
        // /a adopted and re-flooded; /b kept ours, nothing re-flooded.
        assert_eq!(fx.len(), 1);
        assert_eq!(s.get(&path("/a")), Some(&json!("theirs-newer")));
        assert_eq!(s.get(&path("/b")), Some(&json!("mine-newest")));
        match &fx[0] {
            StoreEffect::Flood { body } => assert!(body.contains("theirs-newer")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn canonical_bytes_equality_means_convergence() {
        let mut a = store("n1");
        let mut b = store("n2");
        a.put(&path("/k"), json!("v"));
        // Different content -> different bytes.
        assert_ne!(a.canonical_bytes(), b.canonical_bytes());
        // Same records incl. version -> same bytes.
        let frame = StoreFrame::Put {
            path: "/k".into(),
            value: json!("v"),
            lamport: 1,
            node: NodeId::new("n1").unwrap(),
        };
        b.on_payload(&encode(&frame));
        assert_eq!(a.canonical_bytes(), b.canonical_bytes());
    }

    #[test]
    fn malformed_payloads_are_ignored() {
        let mut s = store("n1");
        assert!(s.on_payload("garbage").is_empty());
        assert!(s.on_payload("{\"op\":\"unknown\"}").is_empty());
        assert_eq!(s.record_count(), 0);
    }
}
