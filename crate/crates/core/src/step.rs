//! Primitive shared-memory steps.
//!
//! Every read, write and CAS the runtime performs on shared memory, and every system
//! allocation, retirement and free, goes through one of the functions here. In normal
//! operation they compile down to the bare atomic operation plus a thread-local null check.
//! When a [`StepSink`] is installed on the current thread (the verifier's cooperative
//! scheduler does this), the sink is told about each step before and after it happens and
//! may suspend the calling virtual thread in between.

use std::cell::Cell;
use std::ptr::NonNull;
use std::sync::atomic::{AtomicBool, AtomicPtr, AtomicU64, Ordering::SeqCst};

use portable_atomic::AtomicU128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum StepKind {
    Read = 0,
    Write = 1,
    Cas = 2,
    Alloc = 3,
    Retire = 4,
    Free = 5,
}

impl StepKind {
    /// Steps that touch memory no other thread can observe yet (or any more). They are
    /// recorded but never used as scheduling points.
    pub fn is_private(self) -> bool {
        matches!(self, StepKind::Alloc | StepKind::Retire | StepKind::Free)
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => StepKind::Read,
            1 => StepKind::Write,
            2 => StepKind::Cas,
            3 => StepKind::Alloc,
            4 => StepKind::Retire,
            5 => StepKind::Free,
            _ => return None,
        })
    }
}

/// What kind of location a step touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Space {
    /// A tagged mutable cell.
    Cell = 0,
    /// An entry of a thunk log.
    Log = 1,
    /// The overflow link of a log block.
    LogLink = 2,
    /// The test-and-test-and-set word of a lock in blocking mode.
    Lock = 3,
    /// An update-once location (including descriptor `done`/`result` fields).
    Flag = 4,
    /// A user object allocated through the runtime.
    Object = 5,
    /// A lock descriptor.
    Descriptor = 6,
    /// An uninstrumented-by-design cell used by negative controls.
    Raw = 7,
}

impl Space {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => Space::Cell,
            1 => Space::Log,
            2 => Space::LogLink,
            3 => Space::Lock,
            4 => Space::Flag,
            5 => Space::Object,
            6 => Space::Descriptor,
            7 => Space::Raw,
            _ => return None,
        })
    }
}

pub(crate) trait StepSink {
    fn before(&self, kind: StepKind, space: Space, loc: usize);
    fn after(&self, kind: StepKind, space: Space, loc: usize, old: u128, new: u128);
}

thread_local! {
    static SINK: Cell<Option<NonNull<dyn StepSink>>> = const { Cell::new(None) };
    static QUIET: Cell<bool> = const { Cell::new(false) };
}

/// Installs `sink` for the current OS thread, returning the previous one.
///
/// # Safety
///
/// The sink must outlive its installation.
pub(crate) unsafe fn install_sink(
    sink: Option<NonNull<dyn StepSink>>,
) -> Option<NonNull<dyn StepSink>> {
    SINK.with(|s| s.replace(sink))
}

#[inline(always)]
fn sink() -> Option<NonNull<dyn StepSink>> {
    let s = SINK.with(|s| s.get());
    if s.is_some() && QUIET.with(|q| q.get()) {
        return None;
    }
    s
}

/// Runs `f` with step reporting off. Used around deferred frees performed by the
/// collector, whose timing depends on other threads' epochs rather than on the schedule.
pub(crate) fn quiet<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            QUIET.with(|q| q.set(self.0));
        }
    }
    let _r = Restore(QUIET.with(|q| q.replace(true)));
    f()
}

#[inline(always)]
fn before(kind: StepKind, space: Space, loc: usize) -> Option<NonNull<dyn StepSink>> {
    let s = sink();
    if let Some(s) = s {
        unsafe { s.as_ref().before(kind, space, loc) };
    }
    s
}

#[inline(always)]
fn after(
    s: Option<NonNull<dyn StepSink>>,
    kind: StepKind,
    space: Space,
    loc: usize,
    old: u128,
    new: u128,
) {
    if let Some(s) = s {
        unsafe { s.as_ref().after(kind, space, loc, old, new) };
    }
}

#[inline]
fn addr<T>(r: &T) -> usize {
    r as *const T as usize
}

#[inline]
pub(crate) fn read128(a: &AtomicU128, space: Space) -> u128 {
    let s = before(StepKind::Read, space, addr(a));
    let v = a.load(SeqCst);
    after(s, StepKind::Read, space, addr(a), v, v);
    v
}

#[inline]
pub(crate) fn cas128(a: &AtomicU128, current: u128, new: u128, space: Space) -> Result<u128, u128> {
    let s = before(StepKind::Cas, space, addr(a));
    let r = a.compare_exchange(current, new, SeqCst, SeqCst);
    match r {
        Ok(old) => after(s, StepKind::Cas, space, addr(a), old, new),
        Err(seen) => after(s, StepKind::Cas, space, addr(a), seen, seen),
    }
    r
}

#[inline]
pub(crate) fn read64(a: &AtomicU64, space: Space) -> u64 {
    let s = before(StepKind::Read, space, addr(a));
    let v = a.load(SeqCst);
    after(s, StepKind::Read, space, addr(a), v as u128, v as u128);
    v
}

#[inline]
pub(crate) fn write64(a: &AtomicU64, v: u64, space: Space) {
    let s = before(StepKind::Write, space, addr(a));
    let old = if s.is_some() { a.swap(v, SeqCst) } else {
        a.store(v, SeqCst);
        0
    };
    after(s, StepKind::Write, space, addr(a), old as u128, v as u128);
}

#[inline]
pub(crate) fn read_bool(a: &AtomicBool, space: Space) -> bool {
    let s = before(StepKind::Read, space, addr(a));
    let v = a.load(SeqCst);
    after(s, StepKind::Read, space, addr(a), v as u128, v as u128);
    v
}

#[inline]
pub(crate) fn write_bool(a: &AtomicBool, v: bool, space: Space) {
    let s = before(StepKind::Write, space, addr(a));
    let old = if s.is_some() { a.swap(v, SeqCst) } else {
        a.store(v, SeqCst);
        false
    };
    after(s, StepKind::Write, space, addr(a), old as u128, v as u128);
}

#[inline]
pub(crate) fn cas_bool(a: &AtomicBool, current: bool, new: bool, space: Space) -> bool {
    let s = before(StepKind::Cas, space, addr(a));
    let r = a.compare_exchange(current, new, SeqCst, SeqCst);
    match r {
        Ok(old) => after(s, StepKind::Cas, space, addr(a), old as u128, new as u128),
        Err(seen) => after(s, StepKind::Cas, space, addr(a), seen as u128, seen as u128),
    }
    r.is_ok()
}

#[inline]
pub(crate) fn read_ptr<T>(a: &AtomicPtr<T>, space: Space) -> *mut T {
    let s = before(StepKind::Read, space, addr(a));
    let v = a.load(SeqCst);
    after(s, StepKind::Read, space, addr(a), v as usize as u128, v as usize as u128);
    v
}

#[inline]
pub(crate) fn cas_ptr<T>(
    a: &AtomicPtr<T>,
    current: *mut T,
    new: *mut T,
    space: Space,
) -> Result<*mut T, *mut T> {
    let s = before(StepKind::Cas, space, addr(a));
    let r = a.compare_exchange(current, new, SeqCst, SeqCst);
    match r {
        Ok(old) => after(s, StepKind::Cas, space, addr(a), old as usize as u128, new as usize as u128),
        Err(seen) => {
            after(s, StepKind::Cas, space, addr(a), seen as usize as u128, seen as usize as u128)
        }
    }
    r
}

/// Records an allocation, retirement or free of the `size`-byte block at `loc`.
#[inline]
pub(crate) fn note(kind: StepKind, space: Space, loc: usize, size: usize) {
    debug_assert!(kind.is_private());
    let s = before(kind, space, loc);
    after(s, kind, space, loc, 0, size as u128);
}
