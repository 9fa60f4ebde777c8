use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use crate::locks::{try_lock, try_lock_lf, with_lock_mode, Lock, LockMode};
use crate::runtime::Mutable;
use crate::step::{Space, StepKind};

use super::sched::{Case, Execution, Explorer, Freeze, Outcome, RawStep, Report, VThread};
use super::RawCell;

/// Lock word value of a (possibly unlocked) descriptor handle.
fn holder(word: u64) -> Option<usize> {
    (word & 1 == 1).then_some((word & !1) as usize)
}

/// Replays the lock words of `locks` through a trace, calling `f` at every step with the
/// current holder of each lock.
fn walk_locks(e: &Execution, locks: &[usize], mut f: impl FnMut(&RawStep, &[Option<usize>]) -> Result<(), String>) -> Result<(), String> {
    let mut held = vec![None; locks.len()];
    for s in e.thread_steps() {
        f(s, &held)?;
        if s.kind == StepKind::Cas && s.space == Space::Cell && s.old != s.new {
            if let Some(i) = locks.iter().position(|&l| l == s.loc) {
                held[i] = holder(s.new as u64);
            }
        }
    }
    Ok(())
}

/// Successful writes to `cell` as (thread, new value).
fn writes(e: &Execution, cell: usize) -> Vec<(u16, u64)> {
    e.thread_steps()
        .filter(|s| s.loc == cell && s.old != s.new && matches!(s.kind, StepKind::Cas | StepKind::Write))
        .map(|s| (s.thread, s.new as u64))
        .collect()
}

/// Which thread allocated each descriptor most recently before each step.
fn descriptor_owners(e: &Execution) -> Vec<HashMap<usize, u16>> {
    let mut cur = HashMap::new();
    e.thread_steps()
        .map(|s| {
            if s.kind == StepKind::Alloc && s.space == Space::Descriptor {
                cur.insert(s.loc, s.thread);
            }
            cur.clone()
        })
        .collect()
}

/// Whether thread `t` installed its descriptor and then found it gone from the lock, the
/// path on which only the descriptor's done flag tells the owner its thunk ran.
fn took_done_path(e: &Execution, lock: usize, t: u16) -> bool {
    let mut installed = None;
    for s in e.thread_steps().filter(|s| s.thread == t && s.loc == lock && s.space == Space::Cell) {
        match (installed, s.kind) {
            (None, StepKind::Cas) if s.old != s.new && holder(s.new as u64).is_some() => installed = Some(s.new),
            (Some(w), StepKind::Read) => return s.new != w,
            _ => {}
        }
    }
    false
}

struct OneLock {
    lock: Lock,
    x: Mutable<u64>,
    raw: RawCell,
}

/// How the critical sections of a one-lock scenario are written.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Correct,
    /// The critical section increments an unlogged cell.
    RawThunk,
    /// The owner ignores the done flag when its descriptor is already gone.
    NoDoneCheck,
}

/// Two threads race for one lock; thread `i` stores `i + 1`.
pub fn one_lock(variant: Variant, done_paths: Rc<Cell<u64>>) -> Case {
    let st = Arc::new(OneLock {
        lock: Lock::new(),
        x: Mutable::new(0),
        raw: RawCell::new(0),
    });
    let threads = (0..2u64)
        .map(|i| {
            let st = st.clone();
            VThread::new(move || {
                with_lock_mode(LockMode::LockFree, || {
                    let s2 = st.clone();
                    let r = match variant {
                        Variant::Correct => try_lock(&st.lock, move || {
                            s2.x.store(i + 1);
                            true
                        }),
                        Variant::RawThunk => try_lock(&st.lock, move || {
                            s2.raw.set(s2.raw.get() + 1);
                            true
                        }),
                        Variant::NoDoneCheck => crate::epoch::pinned(|| {
                            try_lock_lf(
                                &st.lock,
                                move || {
                                    s2.x.store(i + 1);
                                    true
                                },
                                false,
                            )
                        }),
                    };
                    r as u64
                })
            })
        })
        .collect();
    let s = st.clone();
    Case::new(threads, move |e| {
        let lock = s.lock.cell_addr();
        let rets: Vec<bool> = e.finals.iter().map(|f| *f == Some(1)).collect();
        if s.lock.is_locked() {
            return Err("lock still held at the end".into());
        }
        if !rets.iter().any(|&r| r) {
            return Err("neither attempt succeeded".into());
        }
        if variant == Variant::RawThunk {
            let applied = s.raw.get_raw();
            let wins = rets.iter().filter(|&&r| r).count() as u64;
            if applied != wins {
                return Err(format!("{applied} increments for {wins} successful attempts"));
            }
            return Ok(());
        }
        let w = writes(e, s.x.addr());
        for t in 0..2u16 {
            let n = w.iter().filter(|&&(_, v)| v == t as u64 + 1).count();
            if n > 1 {
                return Err(format!("critical section of thread {t} took effect {n} times"));
            }
            if (n == 1) != rets[t as usize] {
                return Err(format!("thread {t} returned {} but its critical section took effect {n} times", rets[t as usize]));
            }
        }
        if s.x.peek().0 != w.len() as u64 {
            return Err("tag disagrees with the recorded writes".into());
        }
        let owners = descriptor_owners(e);
        let x = s.x.addr();
        let mut i = 0;
        walk_locks(e, &[lock], |st, held| {
            let owner = held[0].and_then(|d| owners[i].get(&d).copied());
            i += 1;
            if st.loc == x && st.old != st.new && owner != Some((st.new as u64 - 1) as u16) {
                return Err(format!("value {} written while the lock was held by {owner:?}", st.new as u64));
            }
            Ok(())
        })?;
        for t in 0..2 {
            if took_done_path(e, lock, t) {
                done_paths.set(done_paths.get() + 1);
            }
        }
        Ok(())
    })
    .root(&*st)
}

struct TwoLocks {
    a: Lock,
    b: Lock,
    x: Mutable<u64>,
    y: Mutable<u64>,
}

/// Thread 0 takes A then B and writes `x`; thread 1 takes B (and A first if `both_outer`)
/// and writes `y`.
pub fn nested(both_outer: bool) -> Case {
    let st = Arc::new(TwoLocks {
        a: Lock::new(),
        b: Lock::new(),
        x: Mutable::new(0),
        y: Mutable::new(0),
    });
    let s0 = st.clone();
    let t0 = VThread::new(move || {
        with_lock_mode(LockMode::LockFree, || {
            let s = s0.clone();
            try_lock(&s0.a, move || {
                let s = s.clone();
                try_lock(&s.clone().b, move || {
                    s.x.store(1);
                    true
                })
            }) as u64
        })
    });
    let s1 = st.clone();
    let t1 = VThread::new(move || {
        with_lock_mode(LockMode::LockFree, || {
            let s = s1.clone();
            let inner = move || {
                let s = s.clone();
                try_lock(&s.clone().b, move || {
                    s.y.store(1);
                    true
                })
            };
            if both_outer {
                try_lock(&s1.a, inner) as u64
            } else {
                inner() as u64
            }
        })
    });
    let s = st.clone();
    Case::new(vec![t0, t1], move |e| {
        if e.capped || e.outcomes.iter().any(|o| !matches!(o, Outcome::Done(_))) {
            return Err(format!("not every thread finished: {:?}", e.outcomes));
        }
        if s.a.is_locked() || s.b.is_locked() {
            return Err("lock still held at the end".into());
        }
        for (t, cell) in [(0, &s.x), (1, &s.y)] {
            let n = writes(e, cell.addr()).len();
            let ret = e.finals[t] == Some(1);
            if n > 1 || (n == 1) != ret {
                return Err(format!("thread {t} returned {ret}, critical section took effect {n} times"));
            }
        }
        let (a, b, x, y) = (s.a.cell_addr(), s.b.cell_addr(), s.x.addr(), s.y.addr());
        walk_locks(e, &[a, b], |st, held| {
            if st.old == st.new || st.kind == StepKind::Read {
                return Ok(());
            }
            if (st.loc == x && (held[0].is_none() || held[1].is_none()))
                || (st.loc == y && (held[1].is_none() || (both_outer && held[0].is_none())))
            {
                return Err("write outside its locks".into());
            }
            Ok(())
        })
    })
    .root(&*st)
}

/// Thread 0 is frozen inside its critical section; thread 1 must still get its own
/// critical section through, completing and releasing thread 0's on the way.
pub fn frozen_owner() -> Case {
    let st = Arc::new(TwoLocks {
        a: Lock::new(),
        b: Lock::new(),
        x: Mutable::new(0),
        y: Mutable::new(0),
    });
    let s0 = st.clone();
    let t0 = VThread::new(move || {
        with_lock_mode(LockMode::LockFree, || {
            let s = s0.clone();
            try_lock(&s0.a, move || {
                s.x.store(1);
                true
            }) as u64
        })
    })
    .frozen(Freeze::BeforeFirst(Space::Log));
    let s1 = st.clone();
    let t1 = VThread::new(move || {
        with_lock_mode(LockMode::LockFree, || {
            for _ in 0..3 {
                let s = s1.clone();
                if try_lock(&s1.a, move || {
                    s.y.store(1);
                    true
                }) {
                    return 1;
                }
            }
            0
        })
    });
    let s = st.clone();
    Case::new(vec![t0, t1], move |e| {
        if e.outcomes[0] != Outcome::Frozen {
            return Ok(());
        }
        if e.outcomes[1] != Outcome::Done(1) {
            return Err(format!("thread 1 did not get the lock past a frozen holder: {:?}", e.outcomes[1]));
        }
        let lock = s.a.cell_addr();
        let steps: Vec<&RawStep> = e.thread_steps().collect();
        let installed = steps.iter().position(|st| {
            st.thread == 0 && st.loc == lock && st.kind == StepKind::Cas && st.old != st.new && holder(st.new as u64).is_some()
        });
        // Thread 0 may have frozen while helping thread 1 instead, or thread 1 may have
        // finished before it ever saw thread 0's descriptor.
        let Some(at) = installed else { return Ok(()) };
        if !steps[at..].iter().any(|st| st.thread == 1 && st.loc == lock && st.kind == StepKind::Read) {
            return Ok(());
        }
        if !writes(e, s.x.addr()).iter().any(|&(t, v)| t == 1 && v == 1) {
            return Err("frozen holder's critical section was not completed by the helper".into());
        }
        let released = e
            .thread_steps()
            .any(|st| st.thread == 1 && st.loc == lock && st.kind == StepKind::Cas && holder(st.old as u64).is_some() && holder(st.new as u64).is_none() && st.old != st.new);
        if !released {
            return Err("helper never released the frozen holder's lock".into());
        }
        if e.finals[0] != Some(1) {
            return Err(format!("frozen holder returned {:?} after resuming", e.finals[0]));
        }
        Ok(())
    })
    .root(&*st)
}

/// Results of the try-lock suite.
pub struct TryLockResults {
    pub scenarios: Vec<(&'static str, Report)>,
    pub controls: Vec<(&'static str, Report)>,
    pub done_paths: u64,
}

impl TryLockResults {
    pub fn passed(&self) -> bool {
        self.scenarios.iter().all(|(_, r)| r.passed())
            && self.controls.iter().all(|(_, r)| r.failed > 0)
            && self.done_paths > 0
    }
}

pub fn run_suite(ex: &Explorer) -> TryLockResults {
    let done = Rc::new(Cell::new(0));
    let d = done.clone();
    let scenarios = vec![
        ("one-lock", ex.explore(&mut || one_lock(Variant::Correct, d.clone()))),
        ("nested-inner", ex.explore(&mut || nested(false))),
        ("nested-both", ex.explore(&mut || nested(true))),
        ("frozen-owner", ex.explore(&mut frozen_owner)),
    ];
    let sink = Rc::new(Cell::new(0));
    let controls = vec![
        ("raw-thunk", ex.explore(&mut || one_lock(Variant::RawThunk, sink.clone()))),
        ("no-done-check", ex.explore(&mut || one_lock(Variant::NoDoneCheck, sink.clone()))),
    ];
    TryLockResults {
        scenarios,
        controls,
        done_paths: done.get(),
    }
}
