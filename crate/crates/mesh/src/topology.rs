//! Media-path topology planning and accounting.
//!
//! Everything here is a pure function over participant sets and capacity
//! tables: plans are static edge sets, and the role election is a
//! deterministic function of the replicated capacity records, so every
//! node computing it over the same inputs picks the same topology with no
//! coordination round.
//!
//! Mixing is modeled structurally, not acoustically: an MCU's output to a
//! leaf is an edge labeled "mix of everyone except that leaf", and the
//! latency model charges mixed edges one extra hop unit for the mixing
//! delay.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use callmesh_core::id::NodeId;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("need at least 2 participants, got {0}")]
    TooFew(usize),
    #[error("role node {0} is not a participant")]
    InvalidRole(NodeId),
    #[error("forwarder set is empty")]
    EmptyRoles,
    #[error("invalid pair")]
    InvalidPair,
    #[error("stream of {from} never reaches {to}")]
    Unreachable { from: NodeId, to: NodeId },
    #[error("capacity set is empty")]
    EmptyCapacities,
    #[error("invalid capacity for {0}")]
    InvalidCapacity(NodeId),
}

/// What an edge carries: one participant's raw stream, or a mixed stream
/// containing everyone except the excluded node (the MCU's minus-one mix).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum StreamId {
    Owned(NodeId),
    MixExcluding(NodeId),
}

impl std::fmt::Display for StreamId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StreamId::Owned(n) => write!(f, "{n}"),
            StreamId::MixExcluding(n) => write!(f, "mix-{n}"),
        }
    }
}

/// One directed media flow.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Edge {
    pub from: NodeId,
    pub to: NodeId,
    pub stream: StreamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TopologyKind {
    FullMesh,
    Mcu(NodeId),
    Sfu(BTreeSet<NodeId>),
    Hybrid {
        sfu: BTreeSet<NodeId>,
        direct_pairs: BTreeSet<(NodeId, NodeId)>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopologyPlan {
    pub participants: BTreeSet<NodeId>,
    pub edges: BTreeSet<Edge>,
    pub n: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SendRecv {
    pub sends: usize,
    pub receives: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeCapacity {
    pub node: NodeId,
    /// Streams this node can send concurrently.
    pub uplink: u32,
    /// Streams this node can receive concurrently.
    pub downlink: u32,
    /// Relative processing headroom (mixing ability), ≥ 0.
    pub cpu_score: f64,
}

/// Election thresholds. The defaults are deliberate, documented choices:
/// a node must have ~4× baseline CPU headroom before it is worth making
/// it a mixer, an MCU only pays off at 4+ participants, and a forwarder
/// needs uplink for at least 8 concurrent streams.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds {
    pub mcu_threshold: f64,
    pub sfu_threshold: u32,
    pub mcu_min_n: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            mcu_threshold: 4.0,
            sfu_threshold: 8,
            mcu_min_n: 4,
        }
    }
}

/// Build the edge set for a topology over the given participants.
pub fn plan(
    participants: &BTreeSet<NodeId>,
    kind: &TopologyKind,
) -> Result<TopologyPlan, TopologyError> {
    let n = participants.len();
    if n < 2 {
        return Err(TopologyError::TooFew(n));
    }
    let edges = match kind {
        TopologyKind::FullMesh => mesh_edges(participants),
        TopologyKind::Mcu(m) => {
            if !participants.contains(m) {
                return Err(TopologyError::InvalidRole(m.clone()));
            }
            mcu_edges(participants, m)
        }
        TopologyKind::Sfu(forwarders) => sfu_edges(participants, forwarders)?,
        TopologyKind::Hybrid { sfu, direct_pairs } => {
            let mut edges = sfu_edges(participants, sfu)?;
            for (a, b) in direct_pairs {
                if a == b || !participants.contains(a) || !participants.contains(b) {
                    return Err(TopologyError::InvalidPair);
                }
                // The unique edge delivering a's stream into b becomes a
                // direct link. (b keeps the stream either way, so any
                // onward forwarding b does is unaffected.)
                let via: Vec<Edge> = edges
                    .iter()
                    .filter(|e| e.to == *b && e.stream == StreamId::Owned(a.clone()))
                    .cloned()
                    .collect();
                for e in via {
                    edges.remove(&e);
                }
                edges.insert(Edge {
                    from: a.clone(),
                    to: b.clone(),
                    stream: StreamId::Owned(a.clone()),
                });
            }
            edges
        }
    };
    Ok(TopologyPlan {
        participants: participants.clone(),
        edges,
        n,
    })
}

fn mesh_edges(participants: &BTreeSet<NodeId>) -> BTreeSet<Edge> {
    let mut edges = BTreeSet::new();
    for a in participants {
        for b in participants {
            if a != b {
                edges.insert(Edge {
                    from: a.clone(),
                    to: b.clone(),
                    stream: StreamId::Owned(a.clone()),
                });
            }
        }
    }
    edges
}

fn mcu_edges(participants: &BTreeSet<NodeId>, m: &NodeId) -> BTreeSet<Edge> {
    let mut edges = BTreeSet::new();
    for leaf in participants.iter().filter(|p| *p != m) {
        // Leaf uplink: its raw stream to the mixer.
        edges.insert(Edge {
            from: leaf.clone(),
            to: m.clone(),
            stream: StreamId::Owned(leaf.clone()),
        });
        // Mixer downlink: a minus-one mix so nobody hears themselves.
        edges.insert(Edge {
            from: m.clone(),
            to: leaf.clone(),
            stream: StreamId::MixExcluding(leaf.clone()),
        });
    }
    edges
}

/// SFU construction. Every non-forwarder uplinks its stream to the
/// lexicographically smallest forwarder (the "hub"); other forwarders
/// send the hub their own stream and receive everything else back from
/// it, so all forwarders hold all streams. Delivery to non-forwarders is
/// then spread round-robin across the forwarder set.
fn sfu_edges(
    participants: &BTreeSet<NodeId>,
    forwarders: &BTreeSet<NodeId>,
) -> Result<BTreeSet<Edge>, TopologyError> {
    if forwarders.is_empty() {
        return Err(TopologyError::EmptyRoles);
    }
    for f in forwarders {
        if !participants.contains(f) {
            return Err(TopologyError::InvalidRole(f.clone()));
        }
    }
    let fs: Vec<&NodeId> = forwarders.iter().collect();
    let hub = fs[0];
    let leaves: Vec<&NodeId> = participants
        .iter()
        .filter(|p| !forwarders.contains(*p))
        .collect();

    let mut edges = BTreeSet::new();
    // Ingress: leaves and peer forwarders feed the hub.
    for l in &leaves {
        edges.insert(Edge {
            from: (*l).clone(),
            to: hub.clone(),
            stream: StreamId::Owned((*l).clone()),
        });
    }
    for f in &fs[1..] {
        edges.insert(Edge {
            from: (*f).clone(),
            to: hub.clone(),
            stream: StreamId::Owned((*f).clone()),
        });
    }
    // Hub relays every stream (its own included) to each peer forwarder,
    // minus that forwarder's own.
    for g in &fs[1..] {
        for s in participants {
            if *s != **g {
                edges.insert(Edge {
                    from: hub.clone(),
                    to: (*g).clone(),
                    stream: StreamId::Owned(s.clone()),
                });
            }
        }
    }
    // Egress: each (stream, leaf) delivery is assigned a forwarder
    // round-robin, spreading fan-out load across the set.
    let mut k = 0usize;
    for r in &leaves {
        for s in participants {
            if *s != **r {
                let f = fs[k % fs.len()];
                k += 1;
                edges.insert(Edge {
                    from: f.clone(),
                    to: (*r).clone(),
                    stream: StreamId::Owned(s.clone()),
                });
            }
        }
    }
    Ok(edges)
}

/// Per-node out-degree / in-degree. Every participant appears, even with
/// zero traffic.
pub fn account(plan: &TopologyPlan) -> BTreeMap<NodeId, SendRecv> {
    let mut table: BTreeMap<NodeId, SendRecv> = plan
        .participants
        .iter()
        .map(|p| (p.clone(), SendRecv::default()))
        .collect();
    for e in &plan.edges {
        if let Some(s) = table.get_mut(&e.from) {
            s.sends += 1;
        }
        if let Some(r) = table.get_mut(&e.to) {
            r.receives += 1;
        }
    }
    table
}

/// Hop count for `a`'s stream to reach `b`: raw relays cost 1 hop each,
/// a mixed edge costs 2 (transport plus one unit of mixing delay). A mix
/// is terminal — it cannot be re-forwarded as somebody's raw stream.
pub fn latency_hops(plan: &TopologyPlan, a: &NodeId, b: &NodeId) -> Result<u32, TopologyError> {
    if a == b || !plan.participants.contains(a) || !plan.participants.contains(b) {
        return Err(TopologyError::InvalidPair);
    }
    // BFS over edges carrying a's raw stream.
    let mut raw: BTreeMap<&NodeId, u32> = BTreeMap::new();
    raw.insert(a, 0);
    let mut queue = VecDeque::from([a]);
    while let Some(u) = queue.pop_front() {
        let du = raw[u];
        for e in &plan.edges {
            if e.from == *u && e.stream == StreamId::Owned(a.clone()) && !raw.contains_key(&e.to) {
                raw.insert(&e.to, du + 1);
                queue.push_back(&e.to);
            }
        }
    }
    let mut best = raw.get(b).copied();
    // Mixed delivery: a mixer that holds a's raw stream can hand it to b
    // inside a mix that doesn't exclude a.
    for e in &plan.edges {
        if e.to == *b {
            if let StreamId::MixExcluding(x) = &e.stream {
                if x != a {
                    if let Some(dm) = raw.get(&e.from) {
                        let cost = dm + 2;
                        best = Some(best.map_or(cost, |c| c.min(cost)));
                    }
                }
            }
        }
    }
    best.ok_or(TopologyError::Unreachable {
        from: a.clone(),
        to: b.clone(),
    })
}

/// The distributed promotion decision: a pure function of the replicated
/// capacity set, so every node running it over identical records elects
/// identical roles without any election protocol.
///
/// Order of preference: a beefy mixer (if the call is big enough), then a
/// well-connected forwarder (if somebody actually needs relief), else
/// full mesh.
pub fn elect_roles(
    capacities: &[NodeCapacity],
    thresholds: &Thresholds,
) -> Result<TopologyKind, TopologyError> {
    if capacities.is_empty() {
        return Err(TopologyError::EmptyCapacities);
    }
    let mut by_node: BTreeMap<&NodeId, &NodeCapacity> = BTreeMap::new();
    for c in capacities {
        if !c.cpu_score.is_finite() || c.cpu_score < 0.0 {
            return Err(TopologyError::InvalidCapacity(c.node.clone()));
        }
        if by_node.insert(&c.node, c).is_some() {
            return Err(TopologyError::InvalidCapacity(c.node.clone()));
        }
    }
    let n = by_node.len();

    // Iteration is in NodeId order and comparisons are strict, so ties go
    // to the lexicographically smallest node — input order is irrelevant.
    let mut best_cpu: Option<&NodeCapacity> = None;
    let mut best_up: Option<&NodeCapacity> = None;
    for &c in by_node.values() {
        if best_cpu.is_none_or(|b| c.cpu_score > b.cpu_score) {
            best_cpu = Some(c);
        }
        if best_up.is_none_or(|b| c.uplink > b.uplink) {
            best_up = Some(c);
        }
    }
    let (best_cpu, best_up) = (best_cpu.expect("non-empty"), best_up.expect("non-empty"));

    if n >= thresholds.mcu_min_n && best_cpu.cpu_score >= thresholds.mcu_threshold {
        return Ok(TopologyKind::Mcu(best_cpu.node.clone()));
    }
    let need = (n - 1) as u32;
    let somebody_constrained = by_node.values().any(|c| c.uplink < need);
    if best_up.uplink >= thresholds.sfu_threshold && somebody_constrained {
        return Ok(TopologyKind::Sfu(BTreeSet::from([best_up.node.clone()])));
    }

    Ok(TopologyKind::FullMesh)
}
