//! Try-locks whose critical sections are idempotent thunks.
//!
//! In lock-free mode, acquiring a lock installs a descriptor holding the critical section
//! in the lock word. Anyone who finds the lock taken runs that descriptor to completion and
//! releases the lock on the owner's behalf, so a stalled owner never blocks others. In
//! blocking mode the same calls use a plain test-and-test-and-set flag and run the critical
//! section directly.

use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU8, Ordering::*};

use crate::epoch;
use crate::runtime::context::{bump, current};
use crate::runtime::descriptor::{self, Descriptor};
use crate::runtime::log::commit_in;
use crate::runtime::Mutable;
use crate::step::{self, Space};
use crate::word::Loggable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LockMode {
    LockFree,
    Blocking,
}

impl LockMode {
    pub fn name(self) -> &'static str {
        match self {
            LockMode::LockFree => "lockfree",
            LockMode::Blocking => "blocking",
        }
    }
}

impl std::str::FromStr for LockMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "lockfree" | "lf" => Ok(LockMode::LockFree),
            "blocking" | "block" => Ok(LockMode::Blocking),
            _ => Err(format!("unknown lock mode `{s}` (expected lockfree or blocking)")),
        }
    }
}

impl fmt::Display for LockMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

static MODE: AtomicU8 = AtomicU8::new(0);

/// Sets the process-wide lock mode. Meant to be called before concurrent activity starts.
pub fn set_lock_mode(mode: LockMode) {
    MODE.store(mode as u8, SeqCst);
}

/// The mode in effect for the calling context.
pub fn lock_mode() -> LockMode {
    if let Some(m) = current().mode.get() {
        return m;
    }
    match MODE.load(Relaxed) {
        0 => LockMode::LockFree,
        _ => LockMode::Blocking,
    }
}

/// Runs `f` with `mode` in effect for the calling context only.
pub fn with_lock_mode<R>(mode: LockMode, f: impl FnOnce() -> R) -> R {
    struct Restore(Option<LockMode>);
    impl Drop for Restore {
        fn drop(&mut self) {
            current().mode.set(self.0);
        }
    }
    let _r = Restore(current().mode.replace(Some(mode)));
    f()
}

/// A lock word: a descriptor handle with the locked flag in its low bit.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct LockDescr(u64);

impl LockDescr {
    pub(crate) const FREE: LockDescr = LockDescr(0);

    fn new(d: *const Descriptor, locked: bool) -> Self {
        LockDescr(d as usize as u64 | locked as u64)
    }

    pub fn is_locked(self) -> bool {
        self.0 & 1 == 1
    }

    fn descr(self) -> *const Descriptor {
        (self.0 & !1) as usize as *const Descriptor
    }

    pub fn is_null(self) -> bool {
        self.descr().is_null()
    }

    fn unlocked(self) -> Self {
        LockDescr(self.0 & !1)
    }
}

impl Loggable for LockDescr {
    fn into_word(self) -> u64 {
        self.0
    }

    fn from_word(word: u64) -> Self {
        LockDescr(word)
    }
}

impl fmt::Debug for LockDescr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LockDescr({:p}, locked={})", self.descr(), self.is_locked())
    }
}

/// A lock usable in both modes.
pub struct Lock {
    cell: Mutable<LockDescr>,
    flag: AtomicBool,
}

impl Default for Lock {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Lock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Lock")
            .field("word", &self.cell.peek())
            .field("flag", &self.flag.load(Relaxed))
            .finish()
    }
}

impl Lock {
    pub fn new() -> Self {
        Lock {
            cell: Mutable::new(LockDescr::FREE),
            flag: AtomicBool::new(false),
        }
    }

    /// Whether the lock is currently held in either mode (unlogged snapshot).
    pub fn is_locked(&self) -> bool {
        self.cell.peek().1.is_locked() || self.flag.load(SeqCst)
    }

    pub(crate) fn flag_addr(&self) -> usize {
        &self.flag as *const AtomicBool as usize
    }

    pub(crate) fn cell_addr(&self) -> usize {
        self.cell.addr()
    }
}

/// Attempts to take `lock` and run `f` under it.
///
/// Returns `true` only if `f` ran under the lock and returned `true`. If the lock is held,
/// the holder's critical section is completed first (lock-free mode) and `false` is
/// returned. Critical sections that take further locks must do so in a consistent order
/// and nest at most one level per lock.
pub fn try_lock<F>(lock: &Lock, f: F) -> bool
where
    F: Fn() -> bool + Send + Sync + 'static,
{
    match lock_mode() {
        LockMode::LockFree => top_level(|| try_lock_lf(lock, f, true)),
        LockMode::Blocking => try_lock_blocking(lock, f),
    }
}

/// Like [`try_lock`], but keeps helping and retrying until `f` has run under the lock.
pub fn strict_lock<F>(lock: &Lock, f: F) -> bool
where
    F: Fn() -> bool + Send + Sync + 'static,
{
    match lock_mode() {
        LockMode::LockFree => top_level(|| strict_lock_lf(lock, f)),
        LockMode::Blocking => strict_lock_blocking(lock, f),
    }
}

/// Releases `lock` before the end of the critical section holding it.
pub fn unlock(lock: &Lock) {
    match lock_mode() {
        LockMode::LockFree => unlock_lf(lock),
        LockMode::Blocking => unlock_blocking(lock),
    }
}

/// Records the helping chain of an outermost lock attempt, inside an epoch so descriptors
/// seen while helping stay allocated.
fn top_level(f: impl FnOnce() -> bool) -> bool {
    let ctx = current();
    let outer = ctx.log.get().is_null() && ctx.help_depth.get() == 0;
    let r = epoch::pinned(f);
    if outer {
        current().record_chain();
    }
    r
}

fn help(lock: &Lock, tag: u64, seen: LockDescr) {
    let ctx = current();
    bump(&ctx.counters().helps);
    let depth = ctx.help_depth.get() + 1;
    ctx.help_depth.set(depth);
    if depth > ctx.chain_max.get() {
        ctx.chain_max.set(depth);
    }
    {
        let mut path = ctx.help_path.borrow_mut();
        if path.contains(&lock.cell_addr()) {
            bump(&ctx.counters().chain_repeats);
        }
        path.push(lock.cell_addr());
    }
    let d = unsafe { &*seen.descr() };
    d.helped.store(true, SeqCst);
    let saved = epoch::adopt_for_help(d.epoch.load(SeqCst));
    let now = lock.cell.read_pair();
    let still = now == (tag, seen.into_word());
    let still = commit_in(ctx, still as u128).0 != 0;
    if still {
        run_and_unlock(lock, tag, seen);
    }
    epoch::restore_after_help(saved);
    let ctx = current();
    ctx.help_path.borrow_mut().pop();
    ctx.help_depth.set(ctx.help_depth.get() - 1);
}

fn run_and_unlock(lock: &Lock, tag: u64, descr: LockDescr) -> bool {
    debug_assert!(descr.is_locked());
    let d = unsafe { &*descr.descr() };
    let r = descriptor::run(d);
    d.done.store(true);
    lock.cell.cam_tagged(Some(tag), descr, descr.unlocked());
    r
}

pub(crate) fn try_lock_lf<F>(lock: &Lock, f: F, check_done: bool) -> bool
where
    F: Fn() -> bool + Send + Sync + 'static,
{
    let (tag, cur) = lock.cell.load_tagged();
    if cur.is_locked() {
        help(lock, tag, cur);
        return false;
    }
    let my = descriptor::create(f);
    let mine = LockDescr::new(my, true);
    lock.cell.cam_tagged(Some(tag), cur, mine);
    let (tag2, now) = lock.cell.load_tagged();
    let r = if now == mine || (check_done && unsafe { (*my).done.load() }) {
        run_and_unlock(lock, tag2, mine)
    } else {
        if now.is_locked() {
            help(lock, tag2, now);
        }
        false
    };
    descriptor::dispose(my);
    r
}

fn strict_lock_lf<F>(lock: &Lock, f: F) -> bool
where
    F: Fn() -> bool + Send + Sync + 'static,
{
    let my = descriptor::create(f);
    let mine = LockDescr::new(my, true);
    loop {
        let (tag, cur) = lock.cell.load_tagged();
        if cur == mine || unsafe { (*my).done.load() } {
            let r = run_and_unlock(lock, tag, mine);
            descriptor::dispose(my);
            return r;
        }
        if cur.is_locked() {
            help(lock, tag, cur);
        } else {
            lock.cell.cam_tagged(Some(tag), cur, mine);
        }
    }
}

fn unlock_lf(lock: &Lock) {
    debug_assert!(
        !current().descriptor.get().is_null(),
        "unlock outside a critical section"
    );
    // The holder is the current thunk or one enclosing it (hand-over-hand locking).
    let (tag, cur) = lock.cell.load_tagged();
    debug_assert!(cur.is_locked(), "unlock of a lock that is not held");
    if cur.is_locked() {
        lock.cell.cam_tagged(Some(tag), cur, cur.unlocked());
    }
}

fn try_acquire_flag(lock: &Lock) -> bool {
    !step::read_bool(&lock.flag, Space::Lock) && step::cas_bool(&lock.flag, false, true, Space::Lock)
}

fn run_held(lock: &Lock, f: impl FnOnce() -> bool) -> bool {
    struct Release<'a>(&'a Lock);
    impl Drop for Release<'_> {
        fn drop(&mut self) {
            let (_, released) = current().held.borrow_mut().pop().expect("held lock stack");
            if !released {
                step::write_bool(&self.0.flag, false, Space::Lock);
            }
        }
    }
    current().held.borrow_mut().push((lock.flag_addr(), false));
    let _g = Release(lock);
    f()
}

fn try_lock_blocking<F: FnOnce() -> bool>(lock: &Lock, f: F) -> bool {
    if !try_acquire_flag(lock) {
        return false;
    }
    run_held(lock, f)
}

fn strict_lock_blocking<F: FnOnce() -> bool>(lock: &Lock, f: F) -> bool {
    let mut spins = 0u32;
    while !try_acquire_flag(lock) {
        spins += 1;
        if spins.is_multiple_of(64) {
            std::thread::yield_now();
        } else {
            std::hint::spin_loop();
        }
    }
    run_held(lock, f)
}

fn unlock_blocking(lock: &Lock) {
    let addr = lock.flag_addr();
    let mut held = current().held.borrow_mut();
    let entry = held.iter_mut().rev().find(|(a, released)| *a == addr && !*released);
    match entry {
        Some(e) => {
            e.1 = true;
            drop(held);
            step::write_bool(&lock.flag, false, Space::Lock);
        }
        None => debug_assert!(false, "unlock of a lock not held by the current critical section"),
    }
}
