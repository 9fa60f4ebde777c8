use std::cell::UnsafeCell;
use std::mem::{self, MaybeUninit};
use std::ptr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering::*};

use crate::epoch;
use crate::step::{self, Space, StepKind};
use crate::word::EMPTY_WORD;

use super::context::{bump, current};
use super::log::{self, LogBlock};
use super::mutable::UpdateOnce;

const INLINE_BYTES: usize = 64;

#[repr(C, align(16))]
struct Inline([MaybeUninit<u8>; INLINE_BYTES]);

/// Type-erased closure storage. Small closures live inline, larger ones are boxed.
struct Thunk {
    data: Inline,
    call: Option<unsafe fn(*const u8) -> bool>,
    drop: unsafe fn(*mut u8),
}

unsafe fn call_inline<F: Fn() -> bool>(p: *const u8) -> bool {
    (*(p as *const F))()
}

unsafe fn drop_inline<F>(p: *mut u8) {
    ptr::drop_in_place(p as *mut F)
}

unsafe fn call_boxed<F: Fn() -> bool>(p: *const u8) -> bool {
    (**(p as *const Box<F>))()
}

unsafe fn drop_boxed<F>(p: *mut u8) {
    ptr::drop_in_place(p as *mut Box<F>)
}

unsafe fn drop_nothing(_: *mut u8) {}

impl Thunk {
    const EMPTY: Thunk = Thunk {
        data: Inline([MaybeUninit::uninit(); INLINE_BYTES]),
        call: None,
        drop: drop_nothing,
    };

    fn set<F: Fn() -> bool + Send + Sync + 'static>(&mut self, f: F) {
        self.clear();
        let p = self.data.0.as_mut_ptr();
        if mem::size_of::<F>() <= INLINE_BYTES && mem::align_of::<F>() <= 16 {
            unsafe { ptr::write(p as *mut F, f) };
            self.call = Some(call_inline::<F>);
            self.drop = drop_inline::<F>;
        } else {
            unsafe { ptr::write(p as *mut Box<F>, Box::new(f)) };
            self.call = Some(call_boxed::<F>);
            self.drop = drop_boxed::<F>;
        }
    }

    fn clear(&mut self) {
        if self.call.take().is_some() {
            unsafe { (self.drop)(self.data.0.as_mut_ptr() as *mut u8) };
            self.drop = drop_nothing;
        }
    }

    fn call(&self) -> bool {
        let call = self.call.expect("descriptor has no thunk");
        unsafe { call(self.data.0.as_ptr() as *const u8) }
    }
}

/// A thunk together with its shared log and completion flag.
#[repr(C, align(16))]
pub(crate) struct Descriptor {
    pub(crate) log: LogBlock,
    pub(crate) done: UpdateOnce<bool>,
    result: AtomicU64,
    pub(crate) epoch: AtomicU64,
    pub(crate) helped: AtomicBool,
    thunk: UnsafeCell<Thunk>,
}

unsafe impl Sync for Descriptor {}
unsafe impl Send for Descriptor {}

impl Descriptor {
    fn new() -> Self {
        Descriptor {
            log: LogBlock::new(),
            done: UpdateOnce::new(false),
            result: AtomicU64::new(EMPTY_WORD),
            epoch: AtomicU64::new(0),
            helped: AtomicBool::new(false),
            thunk: UnsafeCell::new(Thunk::EMPTY),
        }
    }

    /// The committed result, if some run has finished.
    pub(crate) fn result(&self) -> Option<bool> {
        match self.result.load(SeqCst) {
            EMPTY_WORD => None,
            r => Some(r != 0),
        }
    }
}

/// Resets a descriptor that nobody else can reference.
pub(crate) unsafe fn clear(d: *mut Descriptor) {
    let d = &mut *d;
    d.log.reset();
    d.thunk.get_mut().clear();
    d.done.reset(false);
    *d.result.get_mut() = EMPTY_WORD;
    *d.helped.get_mut() = false;
}

/// Destructor used when a descriptor is reclaimed.
pub(crate) unsafe fn free_descriptor(p: *mut u8) {
    #[cfg(debug_assertions)]
    epoch::debug_registry::on_free(p);
    step::note(StepKind::Free, Space::Descriptor, p as usize, mem::size_of::<Descriptor>());
    let mut b = Box::from_raw(p as *mut Descriptor);
    b.thunk.get_mut().clear();
    log::free_chain(b.log.next_block());
    drop(b);
    bump(&current().counters().descriptors_freed);
}

/// A private descriptor holding `f`, taken from the pool if possible.
fn fresh<F: Fn() -> bool + Send + Sync + 'static>(f: F) -> *mut Descriptor {
    let ctx = current();
    let d = match ctx.take_pooled() {
        Some(d) => {
            bump(&ctx.counters().descriptor_reuses);
            d
        }
        None => {
            bump(&ctx.counters().descriptors_allocated);
            Box::into_raw(Box::new(Descriptor::new()))
        }
    };
    step::note(StepKind::Alloc, Space::Descriptor, d as usize, mem::size_of::<Descriptor>());
    unsafe {
        (*(*d).thunk.get()).set(f);
        (*d).epoch.store(ctx.epoch.stamp(), SeqCst);
    }
    d
}

/// Creates a descriptor for `f`. Inside a thunk the creation is idempotent: every run
/// returns the descriptor of the first run to commit.
pub(crate) fn create<F: Fn() -> bool + Send + Sync + 'static>(f: F) -> *const Descriptor {
    let ctx = current();
    let cand = fresh(f);
    if ctx.log.get().is_null() {
        return cand;
    }
    let (won, first) = log::commit_in(ctx, cand as usize as u128);
    if !first {
        ctx.recycle(cand);
    }
    won as usize as *const Descriptor
}

/// Disposes of a descriptor after its lock attempt. At top level an unhelped descriptor
/// goes straight back to the pool; everything else is retired through the collector, once.
pub(crate) fn dispose(d: *const Descriptor) {
    let ctx = current();
    if ctx.log.get().is_null() {
        if !unsafe { (*d).helped.swap(true, SeqCst) } {
            ctx.recycle(d as *mut Descriptor);
            return;
        }
    } else if !log::commit_in(ctx, 1).1 {
        return;
    }
    bump(&ctx.counters().retires);
    step::note(StepKind::Retire, Space::Descriptor, d as usize, mem::size_of::<Descriptor>());
    unsafe { epoch::retire_raw(d as *mut u8, free_descriptor) };
}

/// Runs the descriptor's thunk against its shared log and returns the thunk's result.
pub(crate) fn run(d: &Descriptor) -> bool {
    struct Saved(*const LogBlock, usize, usize, *const Descriptor);
    impl Drop for Saved {
        fn drop(&mut self) {
            let ctx = current();
            ctx.log.set(self.0);
            ctx.offset.set(self.1);
            ctx.position.set(self.2);
            ctx.descriptor.set(self.3);
        }
    }
    let ctx = current();
    let saved = Saved(
        ctx.log.replace(&d.log),
        ctx.offset.replace(0),
        ctx.position.replace(0),
        ctx.descriptor.replace(d),
    );
    let r = unsafe { (*d.thunk.get()).call() };
    drop(saved);
    step::write64(&d.result, r as u64, Space::Flag);
    r
}

/// Runs `f` once as a standalone descriptor, the way a lock owner would, and returns its
/// result. Useful for exercising idempotent code outside any lock.
pub fn run_thunk<F: Fn() -> bool + Send + Sync + 'static>(f: F) -> bool {
    let d = create(f);
    let r = run(unsafe { &*d });
    dispose(d);
    r
}

/// A descriptor shared by several runners, for driving multiple runs of one thunk.
///
/// Every call to [`SharedThunk::run`] is one run of the thunk against the same log, as if
/// the caller were helping. The descriptor is reclaimed when the handle is dropped.
pub struct SharedThunk {
    d: *mut Descriptor,
}

unsafe impl Send for SharedThunk {}
unsafe impl Sync for SharedThunk {}

impl SharedThunk {
    pub fn new<F: Fn() -> bool + Send + Sync + 'static>(f: F) -> Self {
        let d = fresh(f);
        unsafe { (*d).helped.store(true, SeqCst) };
        SharedThunk { d }
    }

    pub fn run(&self) -> bool {
        run(unsafe { &*self.d })
    }

    /// The result committed by the first run to finish.
    pub fn result(&self) -> Option<bool> {
        unsafe { (*self.d).result() }
    }

    /// The log contents as plain words, up to the first empty entry.
    pub fn committed_log(&self) -> Vec<u128> {
        let mut out = Vec::new();
        let mut b: *const LogBlock = unsafe { &(*self.d).log };
        while !b.is_null() {
            let blk = unsafe { &*b };
            for i in 0..log::LOG_BLOCK {
                let e = blk.entry(i);
                if e == log::EMPTY {
                    return out;
                }
                out.push(e);
            }
            b = blk.next_block();
        }
        out
    }
}

impl Drop for SharedThunk {
    fn drop(&mut self) {
        unsafe { free_descriptor(self.d as *mut u8) };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::context::ProcessContext;
    use std::sync::Arc;
    use std::sync::atomic::AtomicUsize;

    #[test]
    fn run_restores_context_and_reports_result() {
        let ctx = ProcessContext::new();
        ctx.scope(|| {
            assert!(run_thunk(|| true));
            assert!(!run_thunk(|| false));
            assert!(current().log.get().is_null());
            assert_eq!(current().position(), None);
        });
    }

    #[test]
    fn large_closures_are_boxed_and_dropped() {
        let ctx = ProcessContext::new();
        ctx.scope(|| {
            let alive = Arc::new(AtomicUsize::new(0));
            struct Tracker(Arc<AtomicUsize>);
            impl Drop for Tracker {
                fn drop(&mut self) {
                    self.0.fetch_sub(1, SeqCst);
                }
            }
            alive.fetch_add(2, SeqCst);
            let small = Tracker(alive.clone());
            let big = (Tracker(alive.clone()), [7u64; 32]);
            assert!(run_thunk(move || small.0.load(SeqCst) < 100));
            assert!(run_thunk(move || big.1[31] == 7 && big.0 .0.load(SeqCst) < 100));
            assert_eq!(alive.load(SeqCst), 0);
        });
    }

    #[test]
    fn unhelped_descriptors_are_reused() {
        let ctx = ProcessContext::new();
        ctx.scope(|| {
            run_thunk(|| true);
            let before = current().counters().descriptor_reuses.load(SeqCst);
            for _ in 0..10 {
                run_thunk(|| true);
            }
            assert_eq!(current().counters().descriptor_reuses.load(SeqCst), before + 10);
        });
    }

    #[test]
    fn shared_thunk_runs_agree() {
        let ctx = ProcessContext::new();
        ctx.scope(|| {
            let n = Arc::new(AtomicU64::new(5));
            let n2 = n.clone();
            let t = SharedThunk::new(move || {
                let (v, _) = crate::runtime::commit_value(n2.fetch_add(1, SeqCst));
                v == 5
            });
            assert!(t.run());
            assert!(t.run());
            assert_eq!(t.result(), Some(true));
            assert_eq!(t.committed_log(), vec![5]);
        });
    }
}
