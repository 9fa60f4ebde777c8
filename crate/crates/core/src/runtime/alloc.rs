use crate::epoch;
use crate::step::{self, Space, StepKind};
use crate::word::Ptr;

use super::context::{bump, current};
use super::log::commit_in;

unsafe fn free_object<T>(p: *mut u8) {
    #[cfg(debug_assertions)]
    epoch::debug_registry::on_free(p);
    step::note(StepKind::Free, Space::Object, p as usize, std::mem::size_of::<T>());
    drop(Box::from_raw(p as *mut T));
    bump(&current().counters().objects_freed);
}

/// Idempotent allocation. Every run of a thunk gets the object of the first run to commit;
/// the others free their candidates.
pub fn allocate<T: Send + 'static>(init: impl FnOnce() -> T) -> Ptr<T> {
    let ctx = current();
    let cand = Box::into_raw(Box::new(init()));
    bump(&ctx.counters().objects_allocated);
    step::note(StepKind::Alloc, Space::Object, cand as usize, std::mem::size_of::<T>());
    if ctx.log.get().is_null() {
        return Ptr::new(cand);
    }
    let (won, first) = commit_in(ctx, cand as usize as u128);
    if !first {
        unsafe { free_object::<T>(cand as *mut u8) };
    }
    Ptr::new(won as usize as *mut T)
}

/// Idempotent retirement. Only the first run to commit hands the object to the collector.
///
/// # Safety
///
/// `p` must come from [`allocate`], must be unreachable for operations that start after
/// the enclosing critical section, and must not be retired by any other thunk.
pub unsafe fn retire<T: Send + 'static>(p: Ptr<T>) {
    let ctx = current();
    if !ctx.log.get().is_null() && !commit_in(ctx, 1).1 {
        return;
    }
    bump(&ctx.counters().retires);
    step::note(StepKind::Retire, Space::Object, p.as_ptr() as usize, std::mem::size_of::<T>());
    epoch::retire_raw(p.as_ptr() as *mut u8, free_object::<T>);
}

/// Frees an object from [`allocate`] immediately.
///
/// # Safety
///
/// No other thread may be able to reach `p`, and it must not have been retired.
pub unsafe fn free_now<T: Send + 'static>(p: Ptr<T>) {
    free_object::<T>(p.as_ptr() as *mut u8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{stats, ProcessContext, SharedThunk};
    use std::sync::atomic::{AtomicU64, Ordering::SeqCst};
    use std::sync::Arc;

    #[test]
    fn repeated_allocation_keeps_one_object() {
        let ctx = ProcessContext::new();
        ctx.scope(|| {
            let slot = Arc::new(AtomicU64::new(0));
            let s2 = slot.clone();
            let t = SharedThunk::new(move || {
                let p = allocate(|| 17u64);
                s2.store(p.as_ptr() as u64, SeqCst);
                true
            });
            let c = current().counters();
            let (a0, f0) = (c.objects_allocated.load(SeqCst), c.objects_freed.load(SeqCst));
            t.run();
            let first = slot.load(SeqCst);
            t.run();
            t.run();
            assert_eq!(slot.load(SeqCst), first);
            assert_eq!(c.objects_allocated.load(SeqCst) - a0, 3);
            assert_eq!(c.objects_freed.load(SeqCst) - f0, 2);
            unsafe { free_now(Ptr::new(first as *mut u64)) };
        });
    }

    #[test]
    fn repeated_retire_retires_once() {
        let ctx = ProcessContext::new();
        ctx.scope(|| {
            let p = allocate(|| 3u32);
            let before = current().counters().retires.load(SeqCst);
            let t = SharedThunk::new(move || {
                unsafe { retire(p) };
                true
            });
            t.run();
            t.run();
            assert_eq!(current().counters().retires.load(SeqCst), before + 1);
            let s0 = stats();
            let _ = s0;
            assert_eq!(epoch::collect_all(), 0);
        });
    }
}
