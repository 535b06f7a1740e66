//! Network-level overlay properties: flood delivery/efficiency over many
//! random graphs, and routing tables checked against a BFS oracle,
//! including reconvergence after link breaks and heals.

use std::collections::VecDeque;

use callmesh_core::id::NodeId;
use callmesh_mesh::sim::{graphs, SimNet};

fn build(n: usize, edges: &[(usize, usize)], seed: u64) -> (SimNet, Vec<NodeId>) {
    let mut net = SimNet::new();
    let ids: Vec<NodeId> = (0..n)
        .map(|i| net.add(&format!("n{i:02}"), seed * 100 + i as u64))
        .collect();
    for (a, b) in edges {
        net.link(&ids[*a], &ids[*b]);
    }
    (net, ids)
}

/// Independent shortest-path oracle.
fn bfs(n: usize, edges: &[(usize, usize)], start: usize) -> Vec<Option<u32>> {
    let mut adj = vec![Vec::new(); n];
    for (a, b) in edges {
        adj[*a].push(*b);
        adj[*b].push(*a);
    }
    let mut dist = vec![None; n];
    dist[start] = Some(0u32);
    let mut q = VecDeque::from([start]);
    while let Some(u) = q.pop_front() {
        for &v in &adj[u] {
            if dist[v].is_none() {
                dist[v] = Some(dist[u].unwrap() + 1);
                q.push_back(v);
            }
        }
    }
    dist
}

/// Every node's routing table must match BFS distances exactly: correct
/// hop counts, no entries for self or unreachable nodes.
fn assert_tables_match_oracle(
    net: &SimNet,
    ids: &[NodeId],
    edges: &[(usize, usize)],
    context: &str,
) {
    let n = ids.len();
    for i in 0..n {
        let dist = bfs(n, edges, i);
        let node = net.node(&ids[i]);
        for (j, d) in dist.iter().enumerate() {
            if i == j {
                assert!(
                    node.route_to(&ids[j]).is_none(),
                    "{context}: node {i} has a route to itself"
                );
                continue;
            }
            match d {
                Some(hops) => {
                    let entry = node
                        .route_to(&ids[j])
                        .unwrap_or_else(|| panic!("{context}: node {i} missing route to {j}"));
                    assert_eq!(
                        entry.hops, *hops,
                        "{context}: node {i} -> {j} has {} hops, oracle says {hops}",
                        entry.hops
                    );
                }
                None => {
                    assert!(
                        node.route_to(&ids[j]).is_none(),
                        "{context}: node {i} has a route to unreachable {j}"
                    );
                }
            }
        }
    }
}

#[test]
fn flooding_delivers_exactly_once_within_frame_budget() {
    // 50 seeded connected random graphs up to N=30.
    for g in 0..50u64 {
        let n = 3 + (g as usize * 7) % 28;
        let spare = n * (n - 1) / 2 - (n - 1);
        let extra = (g as usize * 3 + 1) % (spare.min(n) + 1);
        let edges = graphs::sprinkled(n, extra, g * 1013 + 7);
        let (mut net, ids) = build(n, &edges, g);

        let origin = &ids[(g as usize * 5) % n];
        let body = format!("hello-{g}");
        let id = net.flood(origin, &body);
        net.settle();

        let deliveries = net.deliveries_of(&body);
        assert_eq!(deliveries.len(), n, "graph {g}: every node delivers");
        assert!(
            deliveries.values().all(|c| *c == 1),
            "graph {g}: duplicate delivery: {deliveries:?}"
        );
        let frames = net.frames_for(&id);
        assert!(
            frames <= 2 * edges.len() as u64,
            "graph {g}: flood used {frames} frames, budget 2|E| = {}",
            2 * edges.len()
        );
    }
}

#[test]
fn flood_budget_is_tight_on_a_tree() {
    // On a tree (|E| = N-1) dedup should keep the flood to at most one
    // frame per direction per edge; a line makes it exactly |E| + the
    // reverse echoes that dedup kills at the first hop.
    let edges = graphs::line(10);
    let (mut net, ids) = build(10, &edges, 4242);
    let id = net.flood(&ids[0], "tree-flood");
    net.settle();
    let frames = net.frames_for(&id);
    assert!(frames <= 2 * edges.len() as u64);
    // Delivery still total.
    assert_eq!(net.deliveries_of("tree-flood").len(), 10);
}

#[test]
fn routing_tables_match_bfs_on_twenty_graphs() {
    // Named shapes first...
    #[allow(clippy::type_complexity)]
    let mut cases: Vec<(String, usize, Vec<(usize, usize)>)> = vec![
        ("line-6".into(), 6, graphs::line(6)),
        ("ring-8".into(), 8, graphs::ring(8)),
        ("star-9".into(), 9, graphs::star(9)),
        ("two-cluster".into(), 8, {
            // two full 4-cliques joined by one bridge
            let mut e = graphs::full(4);
            e.extend(graphs::full(4).iter().map(|(a, b)| (a + 4, b + 4)));
            e.push((3, 4));
            e
        }),
    ];
    // ...then 16 seeded random ones.
    for g in 0..16u64 {
        let n = 4 + (g as usize * 5) % 22;
        let spare = n * (n - 1) / 2 - (n - 1);
        let extra = (g as usize * 2 + 1) % (spare.min(n) + 1);
        cases.push((
            format!("sprinkled-{g}"),
            n,
            graphs::sprinkled(n, extra, g * 271 + 13),
        ));
    }
    assert_eq!(cases.len(), 20);

    for (name, n, edges) in cases {
        let (net, ids) = build(n, &edges, 77);
        assert_tables_match_oracle(&net, &ids, &edges, &name);
    }
}

#[test]
fn tables_reconverge_after_break_and_heal() {
    // A ring: breaking one link doubles some distances, healing restores.
    let n = 8;
    let edges = graphs::ring(n);
    let (mut net, ids) = build(n, &edges, 99);
    assert_tables_match_oracle(&net, &ids, &edges, "ring intact");

    net.unlink(&ids[0], &ids[1]);
    let broken: Vec<(usize, usize)> = edges
        .iter()
        .copied()
        .filter(|e| *e != (0, 1) && *e != (1, 0))
        .collect();
    assert_tables_match_oracle(&net, &ids, &broken, "ring broken");

    net.link(&ids[0], &ids[1]);
    assert_tables_match_oracle(&net, &ids, &edges, "ring healed");
}

#[test]
fn withdrawals_cross_the_graph_when_a_partition_forms() {
    // Two cliques with one bridge; cutting the bridge removes every
    // cross-cluster route on both sides.
    let mut edges = graphs::full(4);
    edges.extend(graphs::full(4).iter().map(|(a, b)| (a + 4, b + 4)));
    edges.push((3, 4));
    let (mut net, ids) = build(8, &edges, 5);
    assert_tables_match_oracle(&net, &ids, &edges, "bridged intact");

    net.unlink(&ids[3], &ids[4]);
    let cut: Vec<(usize, usize)> = edges.iter().copied().filter(|e| *e != (3, 4)).collect();
    assert_tables_match_oracle(&net, &ids, &cut, "bridge cut");

    // Unicast across the cut is now a route miss at the origin.
    let before = net.route_misses.len();
    net.send(&ids[0], &ids[7], "across the cut");
    net.settle();
    assert_eq!(net.route_misses.len(), before + 1);
    assert!(net.deliveries_of("across the cut").is_empty());

    net.link(&ids[3], &ids[4]);
    assert_tables_match_oracle(&net, &ids, &edges, "bridge healed");
}

#[test]
fn alternate_route_survives_losing_the_direct_link() {
    // Square: 0-1, 1-2, 2-3, 3-0. Cut 0-1; 0 must still reach 1 via 3,2.
    let edges = vec![(0, 1), (1, 2), (2, 3), (3, 0)];
    let (mut net, ids) = build(4, &edges, 31);
    assert_eq!(net.node(&ids[0]).route_to(&ids[1]).unwrap().hops, 1);

    net.unlink(&ids[0], &ids[1]);
    let cut: Vec<(usize, usize)> = edges.iter().copied().filter(|e| *e != (0, 1)).collect();
    assert_tables_match_oracle(&net, &ids, &cut, "square minus one side");
    assert_eq!(net.node(&ids[0]).route_to(&ids[1]).unwrap().hops, 3);

    // Unicast still arrives, relayed the long way round.
    net.send(&ids[0], &ids[1], "the long way");
    net.settle();
    let deliveries = net.deliveries_of("the long way");
    assert_eq!(deliveries.get(&ids[1]), Some(&1));
}

#[test]
fn unicast_hop_counts_match_routes() {
    // Line of 5: a frame from 0 to 4 crosses exactly 4 wires.
    let edges = graphs::line(5);
    let (mut net, ids) = build(5, &edges, 12);
    let id = net.send(&ids[0], &ids[4], "end to end");
    net.settle();
    assert_eq!(net.frames_for(&id), 4, "one frame per hop");
    assert_eq!(net.deliveries_of("end to end").get(&ids[4]), Some(&1));
}
