use std::cell::{Cell, RefCell};
use std::ptr;
use std::sync::atomic::{AtomicU64, Ordering::Relaxed};

use crate::epoch::{self, EpochLocal};
use crate::locks::LockMode;

use super::descriptor::{self, Descriptor};
use super::log::LogBlock;

/// Helping-chain lengths at or above the last bucket are counted in the last bucket.
pub const CHAIN_BUCKETS: usize = 8;

const POOL_CAP: usize = 32;

/// Per-thread execution state: the log of the thunk being run (if any), the position in
/// it, the epoch slot, and a pool of reusable descriptors.
///
/// Every OS thread has an implicit context. Additional contexts can be created and made
/// current on a thread with [`ProcessContext::scope`]; the verifier gives each virtual
/// thread its own.
pub struct ProcessContext {
    pub(crate) log: Cell<*const LogBlock>,
    pub(crate) offset: Cell<usize>,
    pub(crate) position: Cell<usize>,
    pub(crate) descriptor: Cell<*const Descriptor>,
    pub(crate) epoch: EpochLocal,
    pub(crate) pool: RefCell<Vec<*mut Descriptor>>,
    pub(crate) held: RefCell<Vec<(usize, bool)>>,
    pub(crate) help_depth: Cell<u32>,
    pub(crate) chain_max: Cell<u32>,
    /// Locks of the descriptors being helped, outermost first.
    pub(crate) help_path: RefCell<Vec<usize>>,
    pub(crate) mode: Cell<Option<LockMode>>,
}

thread_local! {
    static OWN: ProcessContext = ProcessContext::new();
    static CURRENT: Cell<*const ProcessContext> = const { Cell::new(ptr::null()) };
}

/// The context of the calling (virtual) thread.
///
/// The reference must not be held across a change of current context.
pub(crate) fn current() -> &'static ProcessContext {
    let p = CURRENT.with(|c| c.get());
    if !p.is_null() {
        return unsafe { &*p };
    }
    OWN.with(|c| unsafe { &*(c as *const ProcessContext) })
}

/// Makes `ctx` current for the calling OS thread, returning the previous override.
pub(crate) fn swap_current(ctx: *const ProcessContext) -> *const ProcessContext {
    CURRENT.with(|c| c.replace(ctx))
}

impl ProcessContext {
    pub fn new() -> Self {
        ProcessContext {
            log: Cell::new(ptr::null()),
            offset: Cell::new(0),
            position: Cell::new(0),
            descriptor: Cell::new(ptr::null()),
            epoch: EpochLocal::new(),
            pool: RefCell::new(Vec::new()),
            held: RefCell::new(Vec::new()),
            help_depth: Cell::new(0),
            chain_max: Cell::new(0),
            help_path: RefCell::new(Vec::new()),
            mode: Cell::new(None),
        }
    }

    /// Runs `f` with this context current on the calling thread.
    pub fn scope<R>(&self, f: impl FnOnce() -> R) -> R {
        struct Restore(*const ProcessContext);
        impl Drop for Restore {
            fn drop(&mut self) {
                swap_current(self.0);
            }
        }
        let _r = Restore(swap_current(self));
        f()
    }

    pub(crate) fn counters(&self) -> &'static SlotCounters {
        &self.epoch.slot.counters
    }

    /// Log position within the thunk currently being run, or `None` outside thunks.
    pub fn position(&self) -> Option<usize> {
        if self.log.get().is_null() {
            None
        } else {
            Some(self.position.get())
        }
    }

    pub(crate) fn take_pooled(&self) -> Option<*mut Descriptor> {
        self.pool.borrow_mut().pop()
    }

    /// Returns a descriptor nobody else can reference to the pool, or frees it when the
    /// pool is full.
    pub(crate) fn recycle(&self, d: *mut Descriptor) {
        unsafe { descriptor::clear(d) };
        let mut pool = self.pool.borrow_mut();
        if pool.len() < POOL_CAP {
            pool.push(d);
        } else {
            drop(pool);
            unsafe { descriptor::free_descriptor(d as *mut u8) };
        }
    }

    pub(crate) fn record_chain(&self) {
        let c = self.chain_max.replace(0) as usize;
        self.counters().chain[c.min(CHAIN_BUCKETS - 1)].fetch_add(1, Relaxed);
    }
}

impl Default for ProcessContext {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for ProcessContext {
    fn drop(&mut self) {
        // Pooled descriptors may still be read by a lagging helper that fetched them from a
        // lock word, so they go through the collector rather than straight to the allocator.
        for d in self.pool.get_mut().drain(..) {
            epoch::orphan_raw(d as *mut u8, descriptor::free_descriptor);
        }
        self.epoch.orphan_all();
        epoch::release_slot(self.epoch.slot);
    }
}

#[derive(Default)]
pub(crate) struct SlotCounters {
    pub(crate) objects_allocated: AtomicU64,
    pub(crate) objects_freed: AtomicU64,
    pub(crate) blocks_allocated: AtomicU64,
    pub(crate) blocks_freed: AtomicU64,
    pub(crate) descriptors_allocated: AtomicU64,
    pub(crate) descriptors_freed: AtomicU64,
    pub(crate) descriptor_reuses: AtomicU64,
    pub(crate) retires: AtomicU64,
    pub(crate) helps: AtomicU64,
    pub(crate) chain_repeats: AtomicU64,
    pub(crate) retries: AtomicU64,
    pub(crate) chain: [AtomicU64; CHAIN_BUCKETS],
}

#[inline]
pub(crate) fn bump(c: &AtomicU64) {
    c.fetch_add(1, Relaxed);
}

/// Process-wide runtime counters, summed over all contexts that ever existed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Stats {
    pub objects_allocated: u64,
    pub objects_freed: u64,
    pub blocks_allocated: u64,
    pub blocks_freed: u64,
    pub descriptors_allocated: u64,
    pub descriptors_freed: u64,
    pub descriptor_reuses: u64,
    pub retires: u64,
    pub helps: u64,
    /// Helps on a lock already being helped further up the same chain.
    pub chain_repeats: u64,
    /// Operation attempts that failed to lock or validate and started over.
    pub retries: u64,
    /// Number of top-level lock attempts by longest helping chain (index = chain length).
    pub chains: [u64; CHAIN_BUCKETS],
}

impl Stats {
    pub fn live_objects(&self) -> i64 {
        self.objects_allocated as i64 - self.objects_freed as i64
    }

    pub fn live_blocks(&self) -> i64 {
        self.blocks_allocated as i64 - self.blocks_freed as i64
    }

    pub fn live_descriptors(&self) -> i64 {
        self.descriptors_allocated as i64 - self.descriptors_freed as i64
    }

    pub fn max_chain(&self) -> usize {
        self.chains.iter().rposition(|&n| n > 0).unwrap_or(0)
    }

    /// Counter-wise difference `self - earlier`.
    pub fn since(&self, earlier: &Stats) -> Stats {
        let mut chains = [0; CHAIN_BUCKETS];
        for (i, c) in chains.iter_mut().enumerate() {
            *c = self.chains[i] - earlier.chains[i];
        }
        Stats {
            objects_allocated: self.objects_allocated - earlier.objects_allocated,
            objects_freed: self.objects_freed - earlier.objects_freed,
            blocks_allocated: self.blocks_allocated - earlier.blocks_allocated,
            blocks_freed: self.blocks_freed - earlier.blocks_freed,
            descriptors_allocated: self.descriptors_allocated - earlier.descriptors_allocated,
            descriptors_freed: self.descriptors_freed - earlier.descriptors_freed,
            descriptor_reuses: self.descriptor_reuses - earlier.descriptor_reuses,
            retires: self.retires - earlier.retires,
            helps: self.helps - earlier.helps,
            chain_repeats: self.chain_repeats - earlier.chain_repeats,
            retries: self.retries - earlier.retries,
            chains,
        }
    }
}

impl SlotCounters {
    fn add_to(&self, s: &mut Stats) {
        s.objects_allocated += self.objects_allocated.load(Relaxed);
        s.objects_freed += self.objects_freed.load(Relaxed);
        s.blocks_allocated += self.blocks_allocated.load(Relaxed);
        s.blocks_freed += self.blocks_freed.load(Relaxed);
        s.descriptors_allocated += self.descriptors_allocated.load(Relaxed);
        s.descriptors_freed += self.descriptors_freed.load(Relaxed);
        s.descriptor_reuses += self.descriptor_reuses.load(Relaxed);
        s.retires += self.retires.load(Relaxed);
        s.helps += self.helps.load(Relaxed);
        s.chain_repeats += self.chain_repeats.load(Relaxed);
        s.retries += self.retries.load(Relaxed);
        for i in 0..CHAIN_BUCKETS {
            s.chains[i] += self.chain[i].load(Relaxed);
        }
    }
}

pub fn stats() -> Stats {
    let mut s = Stats::default();
    for slot in epoch::slots() {
        slot.counters.add_to(&mut s);
    }
    s
}

/// Counters of the calling context's slot only.
pub fn local_stats() -> Stats {
    let mut s = Stats::default();
    current().counters().add_to(&mut s);
    s
}

/// Drains and frees the current context's descriptor pool.
pub fn drain_descriptor_pool() {
    let ctx = current();
    let drained: Vec<_> = ctx.pool.borrow_mut().drain(..).collect();
    for d in drained {
        unsafe { epoch::retire_raw(d as *mut u8, descriptor::free_descriptor) };
    }
}
