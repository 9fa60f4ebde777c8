use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering::SeqCst};
use std::sync::Arc;

use crate::runtime::{allocate, commit_value, free_now, retire, run_thunk, Mutable, SharedThunk, UpdateOnce};
use crate::step::{Space, StepKind};
use crate::word::Ptr;

use super::sched::{Case, Execution, Explorer, FirstRunnable, Report, VThread};
use super::RawCell;

/// Most runs of one thunk any case is checked with.
pub const MAX_RUNS: usize = 3;

/// A thunk over freshly built shared state, plus a way to read that state back.
pub struct Instance {
    pub thunk: Box<dyn Fn() -> bool + Send + Sync>,
    /// Final shared state, with pointers replaced by what they point to.
    pub snapshot: Box<dyn Fn() -> Vec<u128>>,
    pub root: usize,
}

fn instance<S: Send + Sync + 'static>(
    s: S,
    thunk: impl Fn(&S) -> bool + Send + Sync + 'static,
    snapshot: impl Fn(&S) -> Vec<u128> + 'static,
) -> Instance {
    let s = Arc::new(s);
    let s2 = s.clone();
    Instance {
        root: Arc::as_ptr(&s) as usize,
        thunk: Box::new(move || thunk(&s)),
        snapshot: Box::new(move || snapshot(&s2)),
    }
}

/// A named thunk scenario.
#[derive(Clone, Copy)]
pub struct ThunkCase {
    pub name: &'static str,
    pub setup: fn() -> Instance,
}

fn pair<V: crate::word::Loggable>(m: &Mutable<V>) -> u128 {
    let (t, v) = m.peek();
    ((t as u128) << 64) | v.into_word() as u128
}

struct Cells<const N: usize>([Mutable<u64>; N]);

impl<const N: usize> Cells<N> {
    fn new(init: [u64; N]) -> Self {
        Cells(init.map(Mutable::new))
    }

    fn snapshot(&self) -> Vec<u128> {
        self.0.iter().map(pair).collect()
    }
}

struct Published {
    cell: Mutable<Ptr<u64>>,
}

impl Drop for Published {
    fn drop(&mut self) {
        let p = self.cell.peek().1;
        if !p.is_null() {
            unsafe { free_now(p) };
        }
    }
}

struct Retiring {
    cell: Mutable<Ptr<u64>>,
    gone: UpdateOnce<bool>,
}

fn counter() -> Instance {
    instance(
        Cells::new([0]),
        |s| {
            s.0[0].store(s.0[0].load() + 1);
            true
        },
        Cells::snapshot,
    )
}

fn multi_store() -> Instance {
    instance(
        Cells::new([0, 0]),
        |s| {
            s.0[0].store(1);
            s.0[1].store(2);
            true
        },
        Cells::snapshot,
    )
}

fn allocate_publish() -> Instance {
    instance(
        Published {
            cell: Mutable::new(Ptr::null()),
        },
        |s| {
            let p = allocate(|| 42u64);
            s.cell.store(p);
            true
        },
        |s| {
            let (t, p) = s.cell.peek();
            vec![t as u128, if p.is_null() { 0 } else { (unsafe { *p.as_ref() }) as u128 }]
        },
    )
}

fn retire_once() -> Instance {
    instance(
        Retiring {
            cell: Mutable::new(allocate(|| 9u64)),
            gone: UpdateOnce::new(false),
        },
        |s| {
            let p = s.cell.load();
            unsafe { retire(p) };
            s.gone.store(true);
            true
        },
        |s| vec![s.gone.peek() as u128],
    )
}

fn cam_chain() -> Instance {
    instance(
        Cells::new([0]),
        |s| {
            s.0[0].cam(0, 1);
            s.0[0].cam(1, 2);
            true
        },
        Cells::snapshot,
    )
}

fn load_only() -> Instance {
    instance(Cells::new([5]), |s| s.0[0].load() == 5, Cells::snapshot)
}

fn cam_hit() -> Instance {
    instance(
        Cells::new([0]),
        |s| {
            s.0[0].cam(0, 1);
            true
        },
        Cells::snapshot,
    )
}

fn cam_miss() -> Instance {
    instance(
        Cells::new([0]),
        |s| {
            s.0[0].cam(5, 9);
            true
        },
        Cells::snapshot,
    )
}

fn log_overflow() -> Instance {
    instance(
        Cells::new([1, 2, 3, 4, 5, 6, 7, 8, 0]),
        |s| {
            let sum: u64 = s.0[..8].iter().map(|c| c.load()).sum();
            s.0[8].store(sum);
            sum == 36
        },
        Cells::snapshot,
    )
}

fn conditional() -> Instance {
    instance(
        Cells::new([0]),
        |s| {
            if s.0[0].load() == 0 {
                s.0[0].store(10);
                true
            } else {
                false
            }
        },
        Cells::snapshot,
    )
}

fn copy() -> Instance {
    instance(
        Cells::new([7, 0]),
        |s| {
            s.0[1].store(s.0[0].load());
            true
        },
        Cells::snapshot,
    )
}

struct Nondet {
    source: AtomicU64,
    cell: Mutable<u64>,
}

fn nondeterministic_input() -> Instance {
    instance(
        Nondet {
            source: AtomicU64::new(100),
            cell: Mutable::new(0),
        },
        |s| {
            let (v, _) = commit_value(s.source.fetch_add(1, SeqCst));
            s.cell.store(v);
            v >= 100
        },
        // Any run's input is a valid outcome, so only record that one of them was kept.
        |s| {
            let (t, v) = s.cell.peek();
            vec![t as u128, (v >= 100 && v < 100 + MAX_RUNS as u64) as u128]
        },
    )
}

struct Flagged {
    flag: UpdateOnce<bool>,
}

fn update_once() -> Instance {
    instance(
        Flagged {
            flag: UpdateOnce::new(false),
        },
        |s| {
            let was = s.flag.load();
            s.flag.store(true);
            !was
        },
        |s| vec![s.flag.peek() as u128],
    )
}

fn nested_thunk() -> Instance {
    let s = Arc::new(Cells::new([0]));
    let inner = s.clone();
    let snap = s.clone();
    Instance {
        root: Arc::as_ptr(&s) as usize,
        thunk: Box::new(move || {
            let c = inner.clone();
            run_thunk(move || {
                c.0[0].store(c.0[0].load() + 1);
                true
            })
        }),
        snapshot: Box::new(move || snap.snapshot()),
    }
}

/// Counter over an unlogged cell. Not idempotent; the checks must reject it.
fn raw_counter() -> Instance {
    instance(
        RawCell::new(0),
        |c| {
            c.set(c.get() + 1);
            true
        },
        |c| vec![c.get_raw() as u128],
    )
}

pub fn catalog() -> Vec<ThunkCase> {
    vec![
        ThunkCase { name: "counter", setup: counter },
        ThunkCase { name: "multi-store", setup: multi_store },
        ThunkCase { name: "allocate-publish", setup: allocate_publish },
        ThunkCase { name: "retire", setup: retire_once },
        ThunkCase { name: "cam-chain", setup: cam_chain },
        ThunkCase { name: "cam-hit", setup: cam_hit },
        ThunkCase { name: "cam-miss", setup: cam_miss },
        ThunkCase { name: "load-only", setup: load_only },
        ThunkCase { name: "log-overflow", setup: log_overflow },
        ThunkCase { name: "conditional", setup: conditional },
        ThunkCase { name: "copy", setup: copy },
        ThunkCase { name: "nondeterministic-input", setup: nondeterministic_input },
        ThunkCase { name: "update-once", setup: update_once },
        ThunkCase { name: "nested-thunk", setup: nested_thunk },
    ]
}

pub fn negative_controls() -> Vec<ThunkCase> {
    vec![ThunkCase { name: "raw-counter", setup: raw_counter }]
}

pub fn find(name: &str) -> Option<ThunkCase> {
    catalog().into_iter().chain(negative_controls()).find(|c| c.name == name)
}

/// What a single uninterrupted run of the thunk does.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Oracle {
    pub result: bool,
    pub snapshot: Vec<u128>,
    /// Objects allocated minus objects freed.
    pub net_objects: i64,
    pub retires: usize,
}

/// Counts of system-level memory events in a trace.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MemoryEvents {
    pub net_objects: i64,
    pub retires: usize,
    pub retired_twice: usize,
}

pub fn memory_events(e: &Execution) -> MemoryEvents {
    let mut m = MemoryEvents::default();
    let mut seen = HashSet::new();
    for s in e.thread_steps() {
        match (s.kind, s.space) {
            (StepKind::Alloc, Space::Object) => m.net_objects += 1,
            (StepKind::Free, Space::Object) => m.net_objects -= 1,
            (StepKind::Retire, Space::Object) => {
                m.retires += 1;
                if !seen.insert(s.loc) {
                    m.retired_twice += 1;
                }
            }
            (StepKind::Alloc, _) => {
                seen.retain(|&l| l != s.loc);
            }
            _ => {}
        }
    }
    m
}

/// Runs the thunk once, alone, as a descriptor run.
pub fn solo(case: &ThunkCase) -> Oracle {
    let out: Rc<RefCell<Option<Oracle>>> = Rc::default();
    let o2 = out.clone();
    let setup = case.setup;
    let mut make = move || {
        let inst = setup();
        let t = Arc::new(SharedThunk::new(inst.thunk));
        let t2 = t.clone();
        let snap = inst.snapshot;
        let o = o2.clone();
        let mut c = Case::new(vec![VThread::new(move || t2.run() as u64)], move |e| {
            let m = memory_events(e);
            *o.borrow_mut() = Some(Oracle {
                result: e.done(0) == Some(1),
                snapshot: snap(),
                net_objects: m.net_objects,
                retires: m.retires,
            });
            drop(t);
            Ok(())
        });
        c.roots.push(inst.root);
        c
    };
    let _ = Explorer::default().execute(&mut make, &mut FirstRunnable);
    out.take().expect("solo run produced no result")
}

/// Calls the thunk body directly, outside any descriptor.
pub fn direct(case: &ThunkCase) -> (bool, Vec<u128>) {
    let inst = (case.setup)();
    let r = (inst.thunk)();
    (r, (inst.snapshot)())
}

/// A case in which `runs` virtual threads each run the same descriptor once.
pub fn runs_case(case: &ThunkCase, runs: usize, oracle: Oracle) -> Case {
    let inst = (case.setup)();
    let t = Arc::new(SharedThunk::new(inst.thunk));
    let snap = inst.snapshot;
    let threads = (0..runs)
        .map(|_| {
            let t = t.clone();
            VThread::new(move || t.run() as u64)
        })
        .collect();
    let mut c = Case::new(threads, move |e| {
        let want = oracle.result as u64;
        for (i, f) in e.finals.iter().enumerate() {
            if *f != Some(want) {
                return Err(format!("run {i} returned {f:?}, solo run returned {want}"));
            }
        }
        if t.result() != Some(oracle.result) {
            return Err(format!("committed result {:?}, solo {}", t.result(), oracle.result));
        }
        let s = snap();
        if s != oracle.snapshot {
            return Err(format!("final state {s:x?}, solo {:x?}", oracle.snapshot));
        }
        let m = memory_events(e);
        if m.net_objects != oracle.net_objects {
            return Err(format!("{} objects survive, solo leaves {}", m.net_objects, oracle.net_objects));
        }
        if m.retired_twice > 0 || m.retires != oracle.retires {
            return Err(format!("{} retires ({} repeated), solo retires {}", m.retires, m.retired_twice, oracle.retires));
        }
        Ok(())
    });
    c.roots.push(inst.root);
    c
}

/// Explores every interleaving of `runs` runs of the case's thunk (or a random sample if
/// that is over budget) against the solo oracle.
pub fn check_idempotent(ex: &Explorer, case: &ThunkCase, runs: usize) -> Report {
    let oracle = solo(case);
    let mut make = || runs_case(case, runs, oracle.clone());
    ex.explore(&mut make)
}
