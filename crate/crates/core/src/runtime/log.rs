use std::ptr;
use std::sync::atomic::{AtomicPtr, Ordering::Relaxed};

use portable_atomic::AtomicU128;

use crate::step::{self, Space, StepKind};

use super::context::{bump, current, ProcessContext};

/// Entries per log block.
pub const LOG_BLOCK: usize = 7;

/// The value of an entry nobody has committed to yet.
pub(crate) const EMPTY: u128 = u128::MAX;

/// One block of a thunk log. Further blocks hang off `next`, installed on demand.
#[repr(C, align(16))]
pub(crate) struct LogBlock {
    entries: [AtomicU128; LOG_BLOCK],
    next: AtomicPtr<LogBlock>,
}

impl LogBlock {
    pub(crate) fn new() -> Self {
        LogBlock {
            entries: std::array::from_fn(|_| AtomicU128::new(EMPTY)),
            next: AtomicPtr::new(ptr::null_mut()),
        }
    }

    /// Empties the block for reuse and frees the blocks chained behind it. The caller
    /// must have exclusive access.
    pub(crate) unsafe fn reset(&self) {
        for e in &self.entries {
            e.store(EMPTY, Relaxed);
        }
        free_chain(self.next.swap(ptr::null_mut(), Relaxed));
    }

    pub(crate) fn entry(&self, i: usize) -> u128 {
        self.entries[i].load(Relaxed)
    }

    pub(crate) fn next_block(&self) -> *mut LogBlock {
        self.next.load(Relaxed)
    }
}

/// Frees a chain of overflow blocks.
pub(crate) unsafe fn free_chain(mut p: *mut LogBlock) {
    while !p.is_null() {
        let next = (*p).next.load(Relaxed);
        free_block(p);
        p = next;
    }
}

unsafe fn free_block(p: *mut LogBlock) {
    step::note(StepKind::Free, Space::LogLink, p as usize, std::mem::size_of::<LogBlock>());
    drop(Box::from_raw(p));
    bump(&current().counters().blocks_freed);
}

/// Returns the block after `b`, installing one if there is none yet.
fn extend(b: &LogBlock) -> *const LogBlock {
    let next = step::read_ptr(&b.next, Space::LogLink);
    if !next.is_null() {
        return next;
    }
    let fresh = Box::into_raw(Box::new(LogBlock::new()));
    bump(&current().counters().blocks_allocated);
    step::note(StepKind::Alloc, Space::LogLink, fresh as usize, std::mem::size_of::<LogBlock>());
    match step::cas_ptr(&b.next, ptr::null_mut(), fresh, Space::LogLink) {
        Ok(_) => fresh,
        Err(winner) => {
            unsafe { free_block(fresh) };
            winner
        }
    }
}

/// Commits `val` at the context's current log position.
///
/// Returns the value committed at that position (by this or an earlier run) and whether
/// this call was the one that committed it. Outside any thunk, returns `(val, true)`.
pub(crate) fn commit_in(ctx: &ProcessContext, val: u128) -> (u128, bool) {
    debug_assert_ne!(val, EMPTY);
    let mut blk = ctx.log.get();
    if blk.is_null() {
        return (val, true);
    }
    let mut off = ctx.offset.get();
    if off == LOG_BLOCK {
        blk = extend(unsafe { &*blk });
        ctx.log.set(blk);
        off = 0;
    }
    ctx.offset.set(off + 1);
    ctx.position.set(ctx.position.get() + 1);
    let e = unsafe { &(*blk).entries[off] };
    let seen = step::read128(e, Space::Log);
    if seen != EMPTY {
        return (seen, false);
    }
    match step::cas128(e, EMPTY, val, Space::Log) {
        Ok(_) => (val, true),
        Err(winner) => (winner, false),
    }
}

#[inline]
pub(crate) fn commit(val: u128) -> (u128, bool) {
    commit_in(current(), val)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overflow_blocks_are_shared_and_freed() {
        let ctx = ProcessContext::new();
        ctx.scope(|| {
            let root = LogBlock::new();
            let run = |vals: &[u128]| -> Vec<(u128, bool)> {
                let ctx = current();
                ctx.log.set(&root);
                ctx.offset.set(0);
                ctx.position.set(0);
                let out = vals.iter().map(|&v| commit(v)).collect();
                ctx.log.set(ptr::null());
                out
            };
            let first = run(&(0..20).collect::<Vec<_>>());
            assert!(first.iter().enumerate().all(|(i, &(v, w))| v == i as u128 && w));
            let second = run(&(100..120).collect::<Vec<_>>());
            assert!(second.iter().enumerate().all(|(i, &(v, w))| v == i as u128 && !w));
            let mut blocks = 0;
            let mut p = root.next_block();
            while !p.is_null() {
                blocks += 1;
                p = unsafe { (*p).next_block() };
            }
            assert_eq!(blocks, 2);
            unsafe { root.reset() };
            assert!(root.next_block().is_null());
            assert_eq!(root.entry(0), EMPTY);
        });
    }

    #[test]
    fn null_log_passes_through() {
        let ctx = ProcessContext::new();
        ctx.scope(|| assert_eq!(commit(9), (9, true)));
    }
}
