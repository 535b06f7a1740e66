//! Larger-scale exercise: a thirty-node conference built call by call,
//! partitioned, healed into a ring, and flooded with a hundred chat
//! messages — run twice to prove the whole thing is reproducible.

use callmesh_harness::{CallMode, Sim};

fn user(i: usize) -> String {
    format!("user{i:02}@mesh.example")
}

fn dev(i: usize) -> String {
    format!("d{i:02}")
}

fn run_soak(seed: u64) -> String {
    let mut sim = Sim::new(seed);
    for i in 0..30 {
        sim.provision(&user(i), &[&dev(i)]).unwrap();
    }

    // Chain: each member pulls in the next.
    for i in 0..29 {
        sim.call(&dev(i), &user(i + 1), CallMode::Push).unwrap();
        sim.advance(100);
        sim.accept(&dev(i + 1)).unwrap();
        sim.advance(300);
    }
    sim.advance(2_000);
    let all: Vec<String> = (0..30).map(dev).collect();
    let refs: Vec<&str> = all.iter().map(String::as_str).collect();
    assert!(sim.converged(&refs).unwrap(), "chain did not converge");
    assert_eq!(sim.route_hops(&dev(0), &dev(29)).unwrap(), Some(29));

    // Cut the chain in the middle. The ends can no longer route to each
    // other, so a fresh invite between them is not suppressed — it rides
    // the relay and its accept closes a ring.
    sim.break_link(&dev(14), &dev(15)).unwrap();
    sim.advance(1_000);
    assert_eq!(sim.route_hops(&dev(0), &dev(29)).unwrap(), None);
    sim.call(&dev(0), &user(29), CallMode::Push).unwrap();
    sim.advance(100);
    sim.accept(&dev(29)).unwrap();
    sim.advance(2_000);
    assert_eq!(sim.route_hops(&dev(0), &dev(29)).unwrap(), Some(1));
    sim.heal_link(&dev(14), &dev(15)).unwrap();
    sim.advance(2_000);

    // Ring distances: shortest way around, either direction.
    assert_eq!(sim.route_hops(&dev(0), &dev(7)).unwrap(), Some(7));
    assert_eq!(sim.route_hops(&dev(0), &dev(22)).unwrap(), Some(8));
    assert_eq!(sim.route_hops(&dev(5), &dev(20)).unwrap(), Some(15));

    // A hundred messages from rotating senders.
    for i in 0..100 {
        sim.chat(&dev(i % 30), &format!("message number {i}"))
            .unwrap();
        sim.advance(20);
    }
    sim.advance(3_000);
    for i in 0..30 {
        assert_eq!(
            sim.messages_of(&dev(i)).unwrap(),
            100,
            "{} is missing chat",
            dev(i)
        );
    }
    assert!(
        sim.converged(&refs).unwrap(),
        "ring did not converge after chat"
    );
    sim.render_log()
}

#[test]
fn thirty_node_soak_is_deterministic() {
    let first = run_soak(2024);
    let second = run_soak(2024);
    assert_eq!(first, second, "same seed, same script, different log");
}
