//! Replication properties of the store riding on the overlay: convergence
//! under concurrent writers, and the 6-user partition / chat / heal
//! scenario — all replicas converge to the union of messages with no
//! duplicates and no replayed ephemeral events.

use callmesh_core::id::NodeId;
use callmesh_mesh::sim::{graphs, StoreNet};
use callmesh_mesh::storage::ChangeKind;
use serde_json::json;

fn build(n: usize, edges: &[(usize, usize)], seed: u64) -> (StoreNet, Vec<NodeId>) {
    let mut net = StoreNet::new();
    let ids: Vec<NodeId> = (0..n)
        .map(|i| net.add(&format!("n{i:02}"), seed * 1000 + i as u64))
        .collect();
    for (a, b) in edges {
        net.link(&ids[*a], &ids[*b]);
    }
    (net, ids)
}

/// Count Created/Updated/Deleted events per node for one path.
fn event_count(net: &StoreNet, node: &NodeId, path: &str, kind: ChangeKind) -> usize {
    net.events[node]
        .iter()
        .filter(|e| e.kind == kind && e.path.to_string() == path)
        .count()
}

fn typing_events(net: &StoreNet, node: &NodeId) -> usize {
    net.events[node]
        .iter()
        .filter(|e| e.kind == ChangeKind::Notify)
        .count()
}

#[test]
fn writes_propagate_to_every_connected_replica() {
    let (mut net, ids) = build(5, &graphs::ring(5), 1);
    net.put(
        &ids[0],
        "/sessions/s/messages/hya62",
        json!({"sender":"Alice","data":"hi there"}),
    );
    for id in &ids {
        assert_eq!(
            net.stores[id].get_str("/sessions/s/messages/hya62"),
            Some(&json!({"sender":"Alice","data":"hi there"})),
            "replica {id} has the message"
        );
    }
    assert!(net.converged(&ids));
}

#[test]
fn concurrent_writers_converge_on_random_graphs() {
    for g in 0..8u64 {
        let n = 4 + (g as usize * 3) % 12;
        let spare = n * (n - 1) / 2 - (n - 1);
        let edges = graphs::sprinkled(n, (g as usize + 1) % (spare.min(n) + 1), g * 37 + 3);
        let (mut net, ids) = build(n, &edges, g);

        // A deterministic pseudo-random op mix from several writers.
        let mut state = g.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 33) as usize
        };
        for op in 0..30 {
            let at = ids[next() % n].clone();
            let key = format!("/k/{}", next() % 6);
            if op % 5 == 4 {
                net.delete(&at, &key);
            } else {
                net.put(&at, &key, json!({"op": op, "by": at.as_str()}));
            }
        }
        assert!(net.converged(&ids), "graph {g} diverged");
    }
}

#[test]
fn deletes_win_against_concurrent_stale_writes_everywhere() {
    let (mut net, ids) = build(4, &graphs::line(4), 9);
    net.put(&ids[0], "/doc", json!("v1"));
    net.put(&ids[3], "/doc", json!("v2"));
    net.delete(&ids[1], "/doc");
    for id in &ids {
        assert_eq!(
            net.stores[id].get_str("/doc"),
            None,
            "tombstone visible at {id}"
        );
    }
    assert!(net.converged(&ids));
}

#[test]
fn six_user_partition_chat_heal_converges_without_duplicates_or_replays() {
    // Ring of six; cutting (0,5) and (2,3) splits it 3 + 3.
    let n = 6;
    let (mut net, ids) = build(n, &graphs::ring(n), 13);

    // Everyone sees a pre-partition message.
    net.put(
        &ids[0],
        "/sessions/s/messages/m-pre",
        json!({"sender":"u0","data":"hello all"}),
    );

    net.unlink(&ids[0], &ids[5]);
    net.unlink(&ids[2], &ids[3]);

    // Chat continues independently in both halves.
    net.put(
        &ids[0],
        "/sessions/s/messages/m-a1",
        json!({"sender":"u0","data":"left 1"}),
    );
    net.put(
        &ids[1],
        "/sessions/s/messages/m-a2",
        json!({"sender":"u1","data":"left 2"}),
    );
    net.put(
        &ids[3],
        "/sessions/s/messages/m-b1",
        json!({"sender":"u3","data":"right 1"}),
    );
    net.put(
        &ids[4],
        "/sessions/s/messages/m-b2",
        json!({"sender":"u4","data":"right 2"}),
    );

    // Ephemeral typing chatter in both halves.
    net.notify(&ids[1], "/sessions/s/users/u1", json!({"typing": true}));
    net.notify(&ids[4], "/sessions/s/users/u4", json!({"typing": true}));
    net.notify(&ids[1], "/sessions/s/users/u1", json!({"typing": false}));

    // Each half sees only its own messages while split.
    assert!(net.stores[&ids[1]]
        .get_str("/sessions/s/messages/m-b1")
        .is_none());
    assert!(net.stores[&ids[4]]
        .get_str("/sessions/s/messages/m-a1")
        .is_none());

    let typing_before: Vec<usize> = ids.iter().map(|id| typing_events(&net, id)).collect();

    // Heal both cuts; anti-entropy runs on each new link.
    net.link(&ids[0], &ids[5]);
    net.link(&ids[2], &ids[3]);

    // Union of messages everywhere.
    let all = ["m-pre", "m-a1", "m-a2", "m-b1", "m-b2"];
    for id in &ids {
        for m in &all {
            let path = format!("/sessions/s/messages/{m}");
            assert!(net.stores[id].get_str(&path).is_some(), "{id} missing {m}");
            // Zero duplicates: each message materialized exactly once.
            let created = event_count(&net, id, &path, ChangeKind::Created);
            assert_eq!(created, 1, "{id} saw {m} created {created} times");
            assert_eq!(event_count(&net, id, &path, ChangeKind::Updated), 0);
        }
        // 5 live records under /sessions/s/messages.
        let listed = net.stores[id]
            .list(&"/sessions/s/messages".parse().unwrap())
            .len();
        assert_eq!(listed, 5);
    }

    // Ephemeral events were not replayed by the merge.
    let typing_after: Vec<usize> = ids.iter().map(|id| typing_events(&net, id)).collect();
    assert_eq!(
        typing_before, typing_after,
        "typing notifies replayed at heal"
    );

    // Replica byte-equality across all six stores.
    assert!(net.converged(&ids), "stores did not converge byte-for-byte");
}

#[test]
fn late_joiner_snapshots_full_state() {
    let (mut net, ids) = build(3, &graphs::line(3), 21);
    net.put(&ids[0], "/a", json!(1));
    net.put(&ids[1], "/b", json!(2));
    net.delete(&ids[2], "/a");

    // A brand-new node links in and learns everything, tombstone included.
    let newcomer = net.add("n99", 555);
    net.link(&ids[2], &newcomer);

    assert_eq!(net.stores[&newcomer].get_str("/b"), Some(&json!(2)));
    assert_eq!(net.stores[&newcomer].get_str("/a"), None);
    let everyone = [ids[0].clone(), ids[1].clone(), ids[2].clone(), newcomer];
    assert!(net.converged(&everyone));
}

#[test]
fn double_heal_does_not_duplicate_anything() {
    // Both partitions heal over two separate links at once: refloods and
    // snapshots overlap, versions keep the result single.
    let (mut net, ids) = build(6, &graphs::ring(6), 31);
    net.unlink(&ids[0], &ids[5]);
    net.unlink(&ids[2], &ids[3]);
    net.put(&ids[1], "/x", json!("left"));
    net.put(&ids[4], "/y", json!("right"));

    net.link(&ids[0], &ids[5]);
    net.link(&ids[2], &ids[3]);

    for id in &ids {
        assert_eq!(
            event_count(&net, id, "/x", ChangeKind::Created),
            1,
            "{id} duped /x"
        );
        assert_eq!(
            event_count(&net, id, "/y", ChangeKind::Created),
            1,
            "{id} duped /y"
        );
    }
    assert!(net.converged(&ids));
}
