//! Idempotent execution of thunks through a shared per-descriptor log.

mod alloc;
pub(crate) mod context;
pub(crate) mod descriptor;
pub(crate) mod log;
mod mutable;

pub use alloc::{allocate, free_now, retire};
pub use context::{drain_descriptor_pool, local_stats, stats, ProcessContext, Stats, CHAIN_BUCKETS};
pub use descriptor::{run_thunk, SharedThunk};
pub use log::LOG_BLOCK;
pub use mutable::{Mutable, UpdateOnce};

use crate::word::Loggable;

/// Commits a value produced by a nondeterministic computation so that every run of the
/// enclosing thunk sees the same one. Returns the agreed value and whether this call
/// supplied it. Outside a thunk, returns `(v, true)`.
pub fn commit_value<V: Loggable>(v: V) -> (V, bool) {
    let (w, first) = log::commit(v.into_word() as u128);
    (V::from_word(w as u64), first)
}

/// Whether the caller is executing inside a thunk.
pub fn in_thunk() -> bool {
    !context::current().log.get().is_null()
}

/// Log position of the calling run, or `None` outside thunks.
pub fn log_position() -> Option<usize> {
    context::current().position()
}
