//! Everything that happens *inside* a conference, after signaling has done
//! its job: the unstructured peer-to-peer overlay ([`overlay`]), the
//! replicated hierarchical store that rides on it ([`storage`]), the
//! conference behavior model that reacts to store changes ([`conference`]),
//! and the media topology planner ([`topology`]).
//!
//! All of it is synchronous, deterministic, effect-returning code; the
//! [`sim`] module provides a tiny in-memory network for wiring nodes
//! together in tests and simulations.

pub mod conference;
pub mod overlay;
pub mod sim;
pub mod storage;
pub mod topology;
