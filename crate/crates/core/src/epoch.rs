//! Epoch-based deferred reclamation.
//!
//! Every thread (or virtual thread) owns an announcement slot. An operation on a shared
//! structure runs between [`enter`] and the drop of the returned [`Guard`]; while inside,
//! the slot announces the global epoch observed on entry. Retired objects are queued on the
//! retiring context's list stamped with the global epoch at retirement, and are freed once
//! the global epoch has moved [`GRACE`] epochs past that stamp. The global epoch only
//! advances past `g` when no slot announces an epoch older than `g`.
//!
//! A thread that helps another thread's critical section temporarily lowers its
//! announcement to the helped descriptor's epoch ([`adopt_for_help`]) and restores it
//! afterwards ([`restore_after_help`]).

use std::cell::{Cell, RefCell};
use std::collections::VecDeque;
use std::marker::PhantomData;
use std::ptr;
use std::sync::atomic::{AtomicBool, AtomicPtr, AtomicU64, Ordering::*};
use std::sync::Mutex;

use crate::runtime::context::{current, SlotCounters};
use crate::step;

/// Announcement value of a thread outside every epoch.
pub const QUIESCENT: u64 = u64::MAX;

/// Per-context retirements between advancement attempts.
pub const ADVANCE_EVERY: u32 = 64;

/// Epochs that must pass after retirement before an object is freed.
///
/// Two would suffice without helping. A helper lowers its announcement after it has read
/// the descriptor it helps, so one advancement scan that started before the lowering can
/// still succeed; the third epoch absorbs that scan.
pub const GRACE: u64 = 3;

static GLOBAL: AtomicU64 = AtomicU64::new(1);
static SLOTS: AtomicPtr<Slot> = AtomicPtr::new(ptr::null_mut());
static ORPHANS: Mutex<Vec<Retired>> = Mutex::new(Vec::new());

pub(crate) struct Slot {
    announce: AtomicU64,
    in_use: AtomicBool,
    next: *mut Slot,
    pub(crate) counters: SlotCounters,
}

unsafe impl Sync for Slot {}

/// Iterates over every slot ever registered. Slots are never freed.
pub(crate) fn slots() -> impl Iterator<Item = &'static Slot> {
    let mut p = SLOTS.load(Acquire);
    std::iter::from_fn(move || {
        if p.is_null() {
            return None;
        }
        let s = unsafe { &*p };
        p = s.next;
        Some(s)
    })
}

pub(crate) fn acquire_slot() -> &'static Slot {
    for s in slots() {
        if !s.in_use.load(Relaxed) && s.in_use.compare_exchange(false, true, Acquire, Relaxed).is_ok() {
            return s;
        }
    }
    let slot = Box::into_raw(Box::new(Slot {
        announce: AtomicU64::new(QUIESCENT),
        in_use: AtomicBool::new(true),
        next: ptr::null_mut(),
        counters: SlotCounters::default(),
    }));
    let mut head = SLOTS.load(Acquire);
    loop {
        unsafe { (*slot).next = head };
        match SLOTS.compare_exchange_weak(head, slot, AcqRel, Acquire) {
            Ok(_) => return unsafe { &*slot },
            Err(h) => head = h,
        }
    }
}

pub(crate) fn release_slot(slot: &Slot) {
    slot.announce.store(QUIESCENT, SeqCst);
    slot.in_use.store(false, Release);
}

/// A retired block awaiting reclamation.
pub(crate) struct Retired {
    ptr: *mut u8,
    epoch: u64,
    free: unsafe fn(*mut u8),
}

unsafe impl Send for Retired {}

/// Per-context epoch state.
pub(crate) struct EpochLocal {
    pub(crate) slot: &'static Slot,
    pinned: Cell<bool>,
    retired: RefCell<VecDeque<Retired>>,
    since_advance: Cell<u32>,
}

impl EpochLocal {
    pub(crate) fn new() -> Self {
        EpochLocal {
            slot: acquire_slot(),
            pinned: Cell::new(false),
            retired: RefCell::new(VecDeque::new()),
            since_advance: Cell::new(0),
        }
    }

    fn announce(&self) {
        loop {
            let e = GLOBAL.load(SeqCst);
            self.slot.announce.store(e, SeqCst);
            if GLOBAL.load(SeqCst) == e {
                return;
            }
        }
    }

    /// The epoch a descriptor created now should carry.
    pub(crate) fn stamp(&self) -> u64 {
        let a = self.slot.announce.load(Relaxed);
        if a == QUIESCENT {
            GLOBAL.load(SeqCst)
        } else {
            a
        }
    }

    fn pop_ready(&self) -> Option<Retired> {
        let mut list = self.retired.borrow_mut();
        let g = GLOBAL.load(SeqCst);
        match list.front() {
            Some(r) if r.epoch + GRACE <= g => list.pop_front(),
            _ => None,
        }
    }

    fn collect_ready(&self) -> usize {
        step::quiet(|| {
            let mut n = 0;
            while let Some(r) = self.pop_ready() {
                unsafe { (r.free)(r.ptr) };
                n += 1;
            }
            n
        })
    }

    pub(crate) fn pending(&self) -> usize {
        self.retired.borrow().len()
    }

    /// Hands every pending retirement to the global orphan list. Called when the owning
    /// context goes away.
    pub(crate) fn orphan_all(&self) {
        if self.pinned.replace(false) {
            self.slot.announce.store(QUIESCENT, SeqCst);
        }
        let drained: Vec<Retired> = self.retired.borrow_mut().drain(..).collect();
        if !drained.is_empty() {
            ORPHANS.lock().unwrap_or_else(|e| e.into_inner()).extend(drained);
        }
    }
}

/// Proof of being inside an epoch. Leaving the epoch happens on drop.
#[must_use = "the epoch is exited as soon as the guard is dropped"]
pub struct Guard {
    _not_send: PhantomData<*const ()>,
}

impl Guard {
    pub fn exit(self) {}
}

impl Drop for Guard {
    fn drop(&mut self) {
        let local = &current().epoch;
        debug_assert!(local.pinned.get());
        local.slot.announce.store(QUIESCENT, SeqCst);
        local.pinned.set(false);
    }
}

/// Enters an epoch on the current context.
///
/// # Panics
///
/// Panics if the context is already inside an epoch.
pub fn enter() -> Guard {
    let local = &current().epoch;
    assert!(!local.pinned.get(), "nested epoch enter");
    local.announce();
    local.pinned.set(true);
    local.collect_ready();
    Guard {
        _not_send: PhantomData,
    }
}

/// Runs `f` inside an epoch, entering one only if the context is not already inside.
pub fn pinned<R>(f: impl FnOnce() -> R) -> R {
    if is_pinned() {
        f()
    } else {
        let _g = enter();
        f()
    }
}

pub fn is_pinned() -> bool {
    current().epoch.pinned.get()
}

/// The current context's announcement, or [`QUIESCENT`].
pub fn announced() -> u64 {
    current().epoch.slot.announce.load(SeqCst)
}

pub fn global_epoch() -> u64 {
    GLOBAL.load(SeqCst)
}

/// Lowers the current announcement to `epoch` if that is older, returning the announcement
/// to restore once helping is over.
pub fn adopt_for_help(epoch: u64) -> u64 {
    let slot = current().epoch.slot;
    let saved = slot.announce.load(SeqCst);
    if epoch < saved {
        slot.announce.store(epoch, SeqCst);
    }
    saved
}

pub fn restore_after_help(saved: u64) {
    current().epoch.slot.announce.store(saved, SeqCst);
}

/// Attempts to advance the global epoch by one. Fails if some slot still announces an
/// epoch older than the current one.
pub fn try_advance() -> bool {
    let g = GLOBAL.load(SeqCst);
    for s in slots() {
        let a = s.announce.load(SeqCst);
        if a != QUIESCENT && a < g {
            return false;
        }
    }
    GLOBAL.compare_exchange(g, g + 1, SeqCst, SeqCst).is_ok()
}

/// Queues `ptr` for reclamation by `free` once no thread can hold a reference to it.
///
/// # Safety
///
/// `ptr` must be unreachable for threads that enter an epoch after this call, must not be
/// retired twice, and `free` must be the right destructor for it.
pub(crate) unsafe fn retire_raw(ptr: *mut u8, free: unsafe fn(*mut u8)) {
    #[cfg(debug_assertions)]
    debug_registry::on_retire(ptr);
    let local = &current().epoch;
    local.retired.borrow_mut().push_back(Retired {
        ptr,
        epoch: GLOBAL.load(SeqCst),
        free,
    });
    let n = local.since_advance.get() + 1;
    if n >= ADVANCE_EVERY {
        local.since_advance.set(0);
        try_advance();
        local.collect_ready();
    } else {
        local.since_advance.set(n);
    }
}

/// Queues `ptr` on the global orphan list, stamped with the current epoch. Usable while the
/// calling thread's context is being torn down.
pub(crate) fn orphan_raw(ptr: *mut u8, free: unsafe fn(*mut u8)) {
    let r = Retired {
        ptr,
        epoch: GLOBAL.load(SeqCst),
        free,
    };
    ORPHANS.lock().unwrap_or_else(|e| e.into_inner()).push(r);
}

/// Frees whatever in the current context's retire list is already safe, after trying to
/// advance the epoch far enough for retirements made so far to become safe. Returns the
/// number of blocks freed.
pub fn collect() -> usize {
    for _ in 0..GRACE {
        if !try_advance() {
            break;
        }
    }
    current().epoch.collect_ready()
}

/// Collects the current context's list and the orphan list. Intended for quiescent points
/// (no thread inside an epoch), where it frees every retired block. Returns the number of
/// retirements still pending afterwards.
pub fn collect_all() -> usize {
    collect();
    let mut ready = Vec::new();
    let mut pending = {
        let mut orphans = ORPHANS.lock().unwrap_or_else(|e| e.into_inner());
        let g = GLOBAL.load(SeqCst);
        let (now, later): (Vec<_>, Vec<_>) = orphans.drain(..).partition(|r| r.epoch + GRACE <= g);
        ready.extend(now);
        let n = later.len();
        orphans.extend(later);
        n
    };
    step::quiet(|| {
        for r in ready {
            unsafe { (r.free)(r.ptr) };
        }
    });
    pending += current().epoch.pending();
    pending
}

#[cfg(debug_assertions)]
pub(crate) mod debug_registry {
    use std::collections::HashSet;
    use std::sync::Mutex;

    static PENDING: Mutex<Option<HashSet<usize>>> = Mutex::new(None);

    pub(crate) fn on_retire(p: *mut u8) {
        let mut g = PENDING.lock().unwrap_or_else(|e| e.into_inner());
        let set = g.get_or_insert_with(HashSet::new);
        assert!(set.insert(p as usize), "double retire of {p:p}");
    }

    pub(crate) fn on_free(p: *mut u8) {
        let mut g = PENDING.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(set) = g.as_mut() {
            set.remove(&(p as usize));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::context::ProcessContext;
    use std::sync::atomic::AtomicUsize;

    static FREED: AtomicUsize = AtomicUsize::new(0);

    unsafe fn count_free(p: *mut u8) {
        #[cfg(debug_assertions)]
        debug_registry::on_free(p);
        drop(Box::from_raw(p as *mut u64));
        FREED.fetch_add(1, SeqCst);
    }

    #[test]
    fn enter_exit_restores_quiescent() {
        let ctx = ProcessContext::new();
        ctx.scope(|| {
            assert_eq!(announced(), QUIESCENT);
            let g = enter();
            assert_ne!(announced(), QUIESCENT);
            assert!(is_pinned());
            drop(g);
            assert_eq!(announced(), QUIESCENT);
        });
    }

    #[test]
    #[should_panic(expected = "nested epoch enter")]
    fn nested_enter_panics() {
        let _a = enter();
        let _b = enter();
    }

    #[test]
    fn help_adoption_takes_minimum_and_restores() {
        let ctx = ProcessContext::new();
        ctx.scope(|| {
            let _g = enter();
            let mine = announced();
            let saved = adopt_for_help(mine.saturating_sub(2));
            assert_eq!(saved, mine);
            assert_eq!(announced(), mine.saturating_sub(2));
            restore_after_help(saved);
            assert_eq!(announced(), mine);
            let saved = adopt_for_help(mine + 5);
            assert_eq!(announced(), mine);
            restore_after_help(saved);
        });
    }

    #[test]
    fn reader_blocks_reclamation_until_exit() {
        let reader = ProcessContext::new();
        let writer = ProcessContext::new();
        let before = FREED.load(SeqCst);
        let guard_epoch = reader.scope(|| {
            let g = enter();
            std::mem::forget(g);
            announced()
        });
        assert_ne!(guard_epoch, QUIESCENT);
        writer.scope(|| {
            let p = Box::into_raw(Box::new(7u64)) as *mut u8;
            unsafe { retire_raw(p, count_free) };
            for _ in 0..10 {
                collect();
            }
            assert!(current().epoch.pending() >= 1, "freed while a reader held an older epoch");
            assert!(global_epoch() <= guard_epoch + 1);
        });
        reader.scope(|| {
            // leave the epoch the forgotten guard entered
            drop(Guard {
                _not_send: PhantomData,
            });
        });
        writer.scope(|| {
            let mut spins = 0;
            while current().epoch.pending() > 0 && spins < 10_000 {
                collect();
                spins += 1;
            }
            assert_eq!(current().epoch.pending(), 0);
        });
        assert!(FREED.load(SeqCst) > before);
    }
}
