//! Schedule exploration and correctness oracles.
//!
//! Virtual threads run as coroutines on one OS thread. Every shared step the runtime takes
//! is a point where the scheduler may switch threads, so small scenarios can be run under
//! every interleaving and larger ones under seeded random schedules. Any execution can be
//! replayed from its schedule.

pub mod helping;
pub mod idempotence;
pub mod linearize;
pub mod sched;
pub mod suite;
pub mod trace;
pub mod trylock;

use std::sync::atomic::{AtomicU64, Ordering::SeqCst};

use crate::step::{self, Space};

pub use sched::{
    normalize, Case, Chooser, Coverage, Execution, Explorer, Failure, FirstRunnable, Freeze, Outcome,
    RandomChooser, RawStep, Report, RoundRobin, Scripted, Step, VThread, DEFAULT_BUDGET, DEFAULT_RANDOM_RUNS,
};

/// A plain shared word that is not logged. Thunks using it are not idempotent, which makes
/// it the building block for negative controls.
pub struct RawCell(AtomicU64);

impl RawCell {
    pub fn new(v: u64) -> Self {
        RawCell(AtomicU64::new(v))
    }

    pub fn get(&self) -> u64 {
        step::read64(&self.0, Space::Raw)
    }

    pub fn set(&self, v: u64) {
        step::write64(&self.0, v, Space::Raw)
    }

    /// Reads without reporting a step.
    pub fn get_raw(&self) -> u64 {
        self.0.load(SeqCst)
    }
}
