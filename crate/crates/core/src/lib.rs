//! Simulation of targeted secret extraction from memory-encrypted virtual
//! machines.
//!
//! The attack has two phases. During observation the hypervisor invalidates
//! all second-level mappings of the guest, records the first access to every
//! page, and stops as soon as an externally observable event signals that the
//! guest recently used the targeted secret. During search the tracked pages
//! are extracted most-recent first and analyzed on the fly until the secret
//! turns up.
//!
//! The crate is split along those lines:
//!
//! * [`mem_model`]: guest-physical memory, second-level translation, secret
//!   planting and purging.
//! * [`analyzers`]: RSA factor, AES key schedule and key-context scanners,
//!   usable on raw dumps as well.
//! * [`simulator`]: discrete-event workload driver producing page accesses
//!   and observable events.
//! * [`tracker`]: track-exactly-once page access recording.
//! * [`searcher`]: preprocessing, backward extraction and pipelined analysis.
//! * [`harness`]: experiment orchestration and statistics.

pub mod analyzers;
pub mod clock;
pub mod config;
pub mod harness;
pub mod keygen;
pub mod mem_model;
pub mod searcher;
pub mod seed;
pub mod simulator;
pub mod tracker;

pub use clock::SimTime;
pub use mem_model::{AccessType, GuestMemory, PAGE_SIZE};
