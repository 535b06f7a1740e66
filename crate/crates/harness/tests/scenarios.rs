//! Executes every script in the repository's `scenarios/` directory and
//! verifies that replaying one produces a byte-identical event log.

use std::path::PathBuf;

use callmesh_harness::{Scenario, Sim};

fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn load_corpus() -> Vec<(String, Scenario)> {
    let mut scripts = Vec::new();
    for entry in std::fs::read_dir(corpus_dir()).expect("scenarios/ exists") {
        let path = entry.expect("readable dir entry").path();
        if path.extension().is_none_or(|e| e != "scn") {
            continue;
        }
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let text = std::fs::read_to_string(&path).expect("readable script");
        let scenario =
            Scenario::parse(&text).unwrap_or_else(|e| panic!("{name} does not parse: {e}"));
        scripts.push((name, scenario));
    }
    scripts.sort_by(|a, b| a.0.cmp(&b.0));
    assert!(
        !scripts.is_empty(),
        "no .scn files found in {:?}",
        corpus_dir()
    );
    scripts
}

#[test]
fn every_scenario_in_the_corpus_passes() {
    for (name, scenario) in load_corpus() {
        let mut sim = Sim::for_scenario(&scenario);
        if let Err(e) = sim.run(&scenario) {
            panic!("{name} failed at {e}\n--- log ---\n{}", sim.render_log());
        }
    }
}

#[test]
fn replaying_a_scenario_yields_identical_logs() {
    for (name, scenario) in load_corpus() {
        let run = || {
            let mut sim = Sim::for_scenario(&scenario);
            sim.run(&scenario).map(|()| sim.render_log())
        };
        let first = run().unwrap_or_else(|e| panic!("{name}: {e}"));
        let second = run().unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(first, second, "{name} replay diverged");
        assert!(!first.is_empty(), "{name} produced an empty log");
    }
}

#[test]
fn dot_export_mentions_every_linked_device() {
    let text = std::fs::read_to_string(corpus_dir().join("merge.scn")).unwrap();
    let scenario = Scenario::parse(&text).unwrap();
    let mut sim = Sim::for_scenario(&scenario);
    sim.run(&scenario).unwrap();
    let dot = sim.export_dot();
    assert!(dot.starts_with("graph callmesh {"));
    for dev in ["a", "b", "c"] {
        assert!(
            dot.contains(&format!("\"{dev}\"")),
            "missing node {dev} in:\n{dot}"
        );
    }
    assert!(dot.contains("--"), "no edges rendered:\n{dot}");
}
