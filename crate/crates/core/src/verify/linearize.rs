use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering::SeqCst};
use std::sync::Arc;
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::harness::{KeyStream, OpKind, ZipfSampler};
use crate::locks::{with_lock_mode, LockMode};
use crate::structures::{build, ConcurrentSet, Diagnostics, LockKind, StructureKind};

use super::sched::{Case, Explorer, RandomChooser, VThread};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SetOp {
    Find(u64),
    Insert(u64, u64),
    Remove(u64),
}

impl SetOp {
    pub fn key(self) -> u64 {
        match self {
            SetOp::Find(k) | SetOp::Insert(k, _) | SetOp::Remove(k) => k,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SetRet {
    Found(Option<u64>),
    Done(bool),
}

/// One completed operation. `invoke < respond`, both taken from a shared clock.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub thread: usize,
    pub op: SetOp,
    pub ret: SetRet,
    pub invoke: u64,
    pub respond: u64,
}

/// The sequential specification of one key of the set.
pub fn apply_key(state: Option<u64>, op: SetOp) -> (Option<u64>, SetRet) {
    match op {
        SetOp::Find(_) => (state, SetRet::Found(state)),
        SetOp::Insert(_, v) => match state {
            Some(_) => (state, SetRet::Done(false)),
            None => (Some(v), SetRet::Done(true)),
        },
        SetOp::Remove(_) => (None, SetRet::Done(state.is_some())),
    }
}

/// The sequential specification of the whole set.
pub fn apply(state: &mut BTreeMap<u64, u64>, op: SetOp) -> SetRet {
    let k = op.key();
    let (next, ret) = apply_key(state.get(&k).copied(), op);
    match next {
        Some(v) => state.insert(k, v),
        None => state.remove(&k),
    };
    ret
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub key: Option<u64>,
    /// Index of the event at which every candidate linearization had failed.
    pub event: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.key {
            Some(k) => write!(f, "key {k}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Largest history [`check_exhaustive`] accepts.
pub const EXHAUSTIVE_LIMIT: usize = 64;

/// Searches for a linearization of the whole history, starting from `initial`, trying
/// every order the real-time constraints allow and memoizing visited (done set, state)
/// pairs.
pub fn check_exhaustive(history: &[Event], initial: &BTreeMap<u64, u64>) -> Result<(), Violation> {
    let n = history.len();
    if n > EXHAUSTIVE_LIMIT {
        return Err(Violation {
            key: None,
            event: None,
            message: format!("{n} operations exceed the exhaustive limit of {EXHAUSTIVE_LIMIT}"),
        });
    }
    let full = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
    let mut seen: HashSet<(u64, Vec<(u64, u64)>)> = HashSet::new();
    let mut stack = vec![(0u64, initial.clone())];
    while let Some((done, state)) = stack.pop() {
        if done == full {
            return Ok(());
        }
        if !seen.insert((done, state.iter().map(|(&k, &v)| (k, v)).collect())) {
            continue;
        }
        let horizon = (0..n)
            .filter(|&i| done & (1 << i) == 0)
            .map(|i| history[i].respond)
            .min()
            .unwrap_or(u64::MAX);
        for (i, e) in history.iter().enumerate() {
            if done & (1 << i) != 0 || e.invoke > horizon {
                continue;
            }
            let mut next = state.clone();
            if apply(&mut next, e.op) == e.ret {
                stack.push((done | (1 << i), next));
            }
        }
    }
    Err(Violation {
        key: None,
        event: None,
        message: format!("no linearization of {n} operations exists"),
    })
}

/// Checks one key's sub-history by sweeping its events in time order while tracking
/// every reachable configuration (value, set of pending operations already linearized).
pub fn check_key(key: u64, events: &[&Event], initial: Option<u64>) -> Result<(), Violation> {
    #[derive(Clone, Copy, PartialEq, Eq)]
    enum Mark {
        Invoke,
        Respond,
    }
    let violation = |event, message: String| Violation {
        key: Some(key),
        event: Some(event),
        message,
    };
    let mut marks: Vec<(u64, Mark, usize)> = Vec::with_capacity(events.len() * 2);
    for (i, e) in events.iter().enumerate() {
        marks.push((e.invoke, Mark::Invoke, i));
        marks.push((e.respond, Mark::Respond, i));
    }
    marks.sort_unstable_by_key(|&(t, m, _)| (t, m == Mark::Respond));

    // Pending operations occupy slots; configurations record which slots have taken effect.
    let mut slots: Vec<Option<usize>> = Vec::new();
    let mut slot_of = vec![usize::MAX; events.len()];
    let mut configs: HashSet<(Option<u64>, u64)> = HashSet::from([(initial, 0)]);
    for (_, mark, i) in marks {
        match mark {
            Mark::Invoke => {
                let s = match slots.iter().position(|s| s.is_none()) {
                    Some(s) => s,
                    None if slots.len() < 64 => {
                        slots.push(None);
                        slots.len() - 1
                    }
                    None => return Err(violation(i, "more than 64 concurrent operations on one key".into())),
                };
                slots[s] = Some(i);
                slot_of[i] = s;
            }
            Mark::Respond => {
                let bit = 1u64 << slot_of[i];
                let mut frontier: Vec<_> = configs.iter().copied().collect();
                let mut reached: HashSet<(Option<u64>, u64)> = configs.clone();
                while let Some((v, done)) = frontier.pop() {
                    if done & bit != 0 {
                        continue;
                    }
                    for (s, slot) in slots.iter().enumerate() {
                        let Some(j) = *slot else { continue };
                        if done & (1 << s) != 0 {
                            continue;
                        }
                        let (nv, r) = apply_key(v, events[j].op);
                        if r == events[j].ret && reached.insert((nv, done | (1 << s))) {
                            frontier.push((nv, done | (1 << s)));
                        }
                    }
                }
                configs = reached
                    .into_iter()
                    .filter(|&(_, done)| done & bit != 0)
                    .map(|(v, done)| (v, done & !bit))
                    .collect();
                slots[slot_of[i]] = None;
                if configs.is_empty() {
                    let e = events[i];
                    return Err(violation(i, format!("{:?} by thread {} returned {:?}, which no order allows", e.op, e.thread, e.ret)));
                }
            }
        }
    }
    Ok(())
}

/// Splits the history by key and checks each key on its own; a set is linearizable
/// exactly when each of its keys is.
pub fn check_per_key(history: &[Event], initial: &BTreeMap<u64, u64>) -> Result<(), Violation> {
    let mut by_key: HashMap<u64, Vec<&Event>> = HashMap::new();
    for e in history {
        if e.invoke >= e.respond {
            return Err(Violation {
                key: Some(e.op.key()),
                event: None,
                message: format!("event responds at {} before it is invoked at {}", e.respond, e.invoke),
            });
        }
        by_key.entry(e.op.key()).or_default().push(e);
    }
    let mut keys: Vec<_> = by_key.keys().copied().collect();
    keys.sort_unstable();
    for k in keys {
        check_key(k, &by_key[&k], initial.get(&k).copied())?;
    }
    Ok(())
}

/// Hands out invocation and response times from one shared counter.
#[derive(Default)]
pub struct Recorder {
    clock: AtomicU64,
}

impl Recorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn run(&self, set: &dyn ConcurrentSet, thread: usize, op: SetOp) -> Event {
        let invoke = self.clock.fetch_add(1, SeqCst);
        let ret = match op {
            SetOp::Find(k) => SetRet::Found(set.find(k)),
            SetOp::Insert(k, v) => SetRet::Done(set.insert(k, v)),
            SetOp::Remove(k) => SetRet::Done(set.remove(k)),
        };
        let respond = self.clock.fetch_add(1, SeqCst);
        Event {
            thread,
            op,
            ret,
            invoke,
            respond,
        }
    }
}

/// A recorded multi-threaded run on real threads.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordedRun {
    pub kind: StructureKind,
    pub lock: LockKind,
    pub mode: LockMode,
    pub threads: usize,
    pub range: u64,
    pub alpha: f64,
    pub seed: u64,
    pub ops_per_thread: usize,
}

pub struct RunOutcome {
    pub initial: BTreeMap<u64, u64>,
    pub history: Vec<Event>,
    pub diagnostics: Diagnostics,
    pub final_contents: BTreeMap<u64, u64>,
}

impl RecordedRun {
    /// Prefills half the range, runs the threads with 50% updates and returns the history.
    pub fn record(&self) -> RunOutcome {
        with_lock_mode(self.mode, || {
            let set: Arc<dyn ConcurrentSet> = build(self.kind, self.lock, (self.range as usize).max(1)).into();
            let mut initial = BTreeMap::new();
            for k in crate::harness::prefill_keys(self.range, self.seed) {
                set.insert(k, k);
                initial.insert(k, k);
            }
            let zipf = ZipfSampler::new(self.range, self.alpha).expect("valid sampler");
            let rec = Recorder::new();
            let history = thread::scope(|sc| {
                let handles: Vec<_> = (0..self.threads)
                    .map(|t| {
                        let (set, zipf, rec) = (&*set, &zipf, &rec);
                        let mode = self.mode;
                        sc.spawn(move || {
                            with_lock_mode(mode, || {
                                let mut keys = KeyStream::new(zipf, 50, self.seed, t);
                                let mut out = Vec::with_capacity(self.ops_per_thread);
                                for i in 0..self.ops_per_thread {
                                    let (kind, k) = keys.next_op();
                                    let op = match kind {
                                        OpKind::Find => SetOp::Find(k),
                                        OpKind::Insert => SetOp::Insert(k, ((t as u64) << 40) | i as u64),
                                        OpKind::Remove => SetOp::Remove(k),
                                    };
                                    out.push(rec.run(set, t, op));
                                }
                                out
                            })
                        })
                    })
                    .collect();
                handles.into_iter().flat_map(|h| h.join().expect("recording thread panicked")).collect()
            });
            RunOutcome {
                initial,
                history,
                diagnostics: set.validate(),
                final_contents: set.keys().into_iter().map(|k| (k, set.find(k).expect("listed key is present"))).collect(),
            }
        })
    }
}

/// Checks the history with a find of every key appended after it, each returning what
/// the structure held at the end.
pub fn check_with_final_state(outcome: &RunOutcome) -> Result<(), Violation> {
    let end = outcome.history.iter().map(|e| e.respond).max().unwrap_or(0) + 1;
    let mut keys: Vec<u64> = outcome.history.iter().map(|e| e.op.key()).chain(outcome.initial.keys().copied()).collect();
    keys.sort_unstable();
    keys.dedup();
    let mut h = outcome.history.clone();
    for (i, k) in keys.into_iter().enumerate() {
        let t = end + 2 * i as u64;
        h.push(Event {
            thread: usize::MAX,
            op: SetOp::Find(k),
            ret: SetRet::Found(outcome.final_contents.get(&k).copied()),
            invoke: t,
            respond: t + 1,
        });
    }
    check_per_key(&h, &outcome.initial)
}

/// Operations of a small scripted history: `threads` threads with `ops` operations each
/// over keys `1..=keys`.
pub fn small_script(seed: u64, threads: usize, ops: usize, keys: u64) -> Vec<Vec<SetOp>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..threads)
        .map(|t| {
            (0..ops)
                .map(|i| {
                    let k = rng.random_range(1..=keys);
                    match rng.random_range(0..3) {
                        0 => SetOp::Find(k),
                        1 => SetOp::Insert(k, ((t as u64) << 8) | i as u64),
                        _ => SetOp::Remove(k),
                    }
                })
                .collect()
        })
        .collect()
}

/// A small history recorded under the virtual-thread scheduler.
#[derive(Clone, Debug)]
pub struct SmallHistory {
    pub initial: BTreeMap<u64, u64>,
    pub history: Vec<Event>,
    pub clean: bool,
}

/// A case running a scripted history on virtual threads, one thread per script row. Times
/// come from a counter bumped around each operation; only one virtual thread runs at a
/// time, so the counter orders operations exactly as they ran. The check fails unless the
/// history is linearizable and the structure is intact; the history is also left in `out`.
pub fn small_case(kind: StructureKind, lock: LockKind, script: &[Vec<SetOp>], initial: &[u64], out: Rc<RefCell<Option<SmallHistory>>>) -> Case {
    let init: BTreeMap<u64, u64> = initial.iter().map(|&k| (k, k)).collect();
    let set: Arc<dyn ConcurrentSet> = with_lock_mode(LockMode::LockFree, || build(kind, lock, 4).into());
    for (&k, &v) in &init {
        set.insert(k, v);
    }
    let rec = Arc::new(Recorder::new());
    let log: Rc<RefCell<Vec<Event>>> = Rc::default();
    let threads = script
        .iter()
        .enumerate()
        .map(|(t, ops)| {
            let (set, rec, log, ops) = (set.clone(), rec.clone(), log.clone(), ops.clone());
            VThread::new(move || {
                with_lock_mode(LockMode::LockFree, || {
                    for op in ops {
                        let e = rec.run(&*set, t, op);
                        log.borrow_mut().push(e);
                    }
                });
                0
            })
        })
        .collect();
    let s2 = set.clone();
    Case::new(threads, move |e| {
        let diag = s2.validate();
        let finished = e.outcomes.iter().all(|o| matches!(o, super::Outcome::Done(_)));
        let h = SmallHistory {
            initial: init,
            history: log.take(),
            clean: diag.is_clean() && finished,
        };
        let verdict = if !finished {
            Err(format!("not every thread finished: {:?}", e.outcomes))
        } else if !diag.is_clean() {
            Err(format!("{:?}", diag.violations))
        } else {
            check_exhaustive(&h.history, &h.initial).map_err(|v| v.to_string())
        };
        *out.borrow_mut() = Some(h);
        verdict
    })
    .root(&*set)
}

/// Runs [`small_case`] once under a seeded random schedule.
pub fn record_small(kind: StructureKind, lock: LockKind, script: &[Vec<SetOp>], initial: &[u64], schedule_seed: u64) -> (SmallHistory, Result<(), String>) {
    let out: Rc<RefCell<Option<SmallHistory>>> = Rc::default();
    let mut make = || small_case(kind, lock, script, initial, out.clone());
    let (_, verdict) = Explorer::default().execute(&mut make, &mut RandomChooser::new(schedule_seed));
    (out.take().expect("small history run produced no result"), verdict)
}
