//! Deterministic whole-system simulation harness.
//!
//! This crate glues the production state machines — relay, signaling
//! engine, overlay, store, conference model — into a single-threaded
//! world with virtual time. Nothing here touches the wall clock, the
//! network, or an unseeded RNG, so a run is a pure function of the seed
//! and the script: replaying the same scenario yields a byte-identical
//! event log.
//!
//! Two layers:
//!
//! * [`scenario`] — a line-oriented script format (provision devices,
//!   place calls, drop frames, partition links, advance time, assert on
//!   the world) with parse errors that carry line numbers.
//! * [`sim`] — the world itself. Effects returned by the state machines
//!   become scheduled tasks in one priority queue; delivering a push or
//!   an overlay frame costs `link_delay` virtual milliseconds.
//!
//! ```
//! use callmesh_harness::{Scenario, Sim};
//!
//! let script = "\
//! provision alice@example.org x
//! provision bob@example.org b
//! call x bob@example.org
//! advance 100ms
//! accept b
//! advance 1s
//! assert state x active
//! assert link x b
//! assert converged x b
//! ";
//! let scenario = Scenario::parse(script).unwrap();
//! let mut sim = Sim::for_scenario(&scenario);
//! sim.run(&scenario).unwrap();
//! assert!(!sim.render_log().is_empty());
//! ```

pub mod scenario;
pub mod sim;

pub use scenario::{Assertion, CallMode, Scenario, ScenarioError, Step};
pub use sim::{CallOutcome, EventLog, Sim, SimError, SimParams, StepError};
