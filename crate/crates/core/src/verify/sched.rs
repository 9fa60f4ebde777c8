use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::panic::{self, AssertUnwindSafe};
use std::ptr::NonNull;
use std::time::{Duration, Instant};

use corosensei::stack::DefaultStack;
use corosensei::{Coroutine, CoroutineResult, Yielder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::runtime::context::swap_current;
use crate::runtime::ProcessContext;
use crate::step::{self, Space, StepKind, StepSink};

/// Default limit on scheduled steps per execution for exhaustive enumeration.
pub const DEFAULT_BUDGET: usize = 16;
/// Number of seeded schedules tried when a case exceeds the exhaustive budget.
pub const DEFAULT_RANDOM_RUNS: usize = 100_000;
/// Scheduled steps after which an execution is cut off.
pub const DEFAULT_STEP_CAP: usize = 200_000;

const STACK_BYTES: usize = 256 * 1024;
const THAW_SLICE: u64 = 4096;
const THAW_ROUNDS: usize = 4096;

/// Marker placed in the high bits of a normalized pointer value.
pub const SYMBOLIC: u64 = 0x5eed << 48;
/// Marker bit of a normalized location that lies inside a recorded allocation.
pub const ALLOCATED: u32 = 1 << 31;

/// When a virtual thread stops being scheduled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Freeze {
    Never,
    /// Just before its first step in the given space.
    BeforeFirst(Space),
    /// Just after its first successful CAS in the given space.
    AfterCas(Space),
}

/// One virtual thread of a case: a body returning a word, and a freeze point.
pub struct VThread {
    body: Box<dyn FnOnce() -> u64>,
    freeze: Freeze,
}

impl VThread {
    pub fn new(body: impl FnOnce() -> u64 + 'static) -> Self {
        VThread {
            body: Box::new(body),
            freeze: Freeze::Never,
        }
    }

    pub fn frozen(mut self, at: Freeze) -> Self {
        self.freeze = at;
        self
    }
}

pub type Check = Box<dyn FnOnce(&Execution) -> Result<(), String>>;

/// A scenario to execute: virtual threads plus a check run after they all finish.
///
/// Cases are built fresh for every execution. Shared state is usually an `Arc` captured by
/// both the thread bodies and the check.
pub struct Case {
    pub threads: Vec<VThread>,
    pub check: Check,
    /// Addresses of shared state not allocated through the runtime, so pointers to them
    /// normalize the same way in every execution.
    pub roots: Vec<usize>,
}

impl Case {
    pub fn new(threads: Vec<VThread>, check: impl FnOnce(&Execution) -> Result<(), String> + 'static) -> Self {
        Case {
            threads,
            check: Box::new(check),
            roots: Vec::new(),
        }
    }

    pub fn root<T: ?Sized>(mut self, r: &T) -> Self {
        self.roots.push(r as *const T as *const () as usize);
        self
    }
}

/// A step as it happened, with raw addresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RawStep {
    /// `u16::MAX` for steps taken while the case was being built.
    pub thread: u16,
    pub kind: StepKind,
    pub space: Space,
    pub loc: usize,
    pub old: u128,
    pub new: u128,
}

/// A step with addresses replaced by names that do not depend on where the allocator put
/// things, so the same schedule yields the same trace in every process.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Step {
    pub thread: u16,
    pub kind: StepKind,
    pub space: Space,
    pub loc: u32,
    pub old: u128,
    pub new: u128,
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "t{} {:?} {:?} @{:#x} {:#x} -> {:#x}",
            self.thread, self.kind, self.space, self.loc, self.old, self.new
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    Done(u64),
    Frozen,
    /// Still runnable when the execution was cut off.
    Running,
    Panicked(String),
}

/// Everything observed in one execution of a case.
pub struct Execution {
    /// The thread picked at each scheduling point.
    pub schedule: Vec<u16>,
    pub raw: Vec<RawStep>,
    pub trace: Vec<Step>,
    /// Thread states when scheduling stopped.
    pub outcomes: Vec<Outcome>,
    /// Return values once frozen and cut-off threads were allowed to finish.
    pub finals: Vec<Option<u64>>,
    pub steps_per_thread: Vec<u64>,
    /// Scheduling stopped at the step cap rather than because nothing was runnable.
    pub capped: bool,
}

impl Execution {
    pub fn scheduled_steps(&self) -> usize {
        self.schedule.len()
    }

    pub fn done(&self, t: usize) -> Option<u64> {
        match self.outcomes[t] {
            Outcome::Done(v) => Some(v),
            _ => None,
        }
    }

    /// Recorded steps by virtual threads (setup excluded).
    pub fn thread_steps(&self) -> impl Iterator<Item = &RawStep> {
        self.raw.iter().filter(|s| s.thread != u16::MAX)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SinkMode {
    Setup,
    Schedule,
    Thaw,
    Unwind,
}

struct Sched {
    mode: Cell<SinkMode>,
    cur: Cell<usize>,
    slice: Cell<u64>,
    yielders: RefCell<Vec<usize>>,
    freeze: RefCell<Vec<Freeze>>,
    frozen: RefCell<Vec<bool>>,
    armed: RefCell<Vec<bool>>,
    steps: RefCell<Vec<u64>>,
    raw: RefCell<Vec<RawStep>>,
}

impl Sched {
    fn new() -> Self {
        Sched {
            mode: Cell::new(SinkMode::Setup),
            cur: Cell::new(0),
            slice: Cell::new(0),
            yielders: RefCell::new(Vec::new()),
            freeze: RefCell::new(Vec::new()),
            frozen: RefCell::new(Vec::new()),
            armed: RefCell::new(Vec::new()),
            steps: RefCell::new(Vec::new()),
            raw: RefCell::new(Vec::new()),
        }
    }

    fn suspend(&self) {
        let y = self.yielders.borrow()[self.cur.get()] as *const Yielder<(), ()>;
        unsafe { (*y).suspend(()) };
    }
}

impl StepSink for Sched {
    fn before(&self, kind: StepKind, space: Space, _loc: usize) {
        if kind.is_private() {
            return;
        }
        match self.mode.get() {
            SinkMode::Setup | SinkMode::Unwind => return,
            SinkMode::Thaw => {
                let n = self.slice.get() + 1;
                self.slice.set(n);
                if n < THAW_SLICE {
                    return;
                }
                self.slice.set(0);
            }
            SinkMode::Schedule => {
                let t = self.cur.get();
                let hit = self.armed.borrow()[t] || self.freeze.borrow()[t] == Freeze::BeforeFirst(space);
                if hit {
                    self.frozen.borrow_mut()[t] = true;
                }
            }
        }
        self.suspend();
    }

    fn after(&self, kind: StepKind, space: Space, loc: usize, old: u128, new: u128) {
        let thread = match self.mode.get() {
            SinkMode::Setup => {
                if kind != StepKind::Alloc {
                    return;
                }
                u16::MAX
            }
            SinkMode::Schedule => {
                let t = self.cur.get();
                if !kind.is_private() {
                    self.steps.borrow_mut()[t] += 1;
                }
                if kind == StepKind::Cas && old != new && self.freeze.borrow()[t] == Freeze::AfterCas(space) {
                    self.armed.borrow_mut()[t] = true;
                }
                t as u16
            }
            SinkMode::Thaw | SinkMode::Unwind => return,
        };
        self.raw.borrow_mut().push(RawStep {
            thread,
            kind,
            space,
            loc,
            old,
            new,
        });
    }
}

thread_local! {
    static ACTIVE: Cell<*const Sched> = const { Cell::new(std::ptr::null()) };
}

/// Shared steps the running virtual thread has taken so far, or `None` outside the
/// scheduler.
pub fn own_steps() -> Option<u64> {
    let s = ACTIVE.with(|a| a.get());
    if s.is_null() {
        return None;
    }
    let s = unsafe { &*s };
    match s.mode.get() {
        SinkMode::Schedule => s.steps.try_borrow().ok().and_then(|v| v.get(s.cur.get()).copied()),
        _ => None,
    }
}

/// Installs a sink for the current OS thread and removes it again on drop.
struct Installed(Option<NonNull<dyn StepSink>>, *const Sched);

impl Installed {
    fn new(s: &Sched) -> Self {
        let p: NonNull<dyn StepSink> = NonNull::from(s as &dyn StepSink);
        let prev = ACTIVE.with(|a| a.replace(s));
        Installed(unsafe { step::install_sink(Some(p)) }, prev)
    }
}

impl Drop for Installed {
    fn drop(&mut self) {
        ACTIVE.with(|a| a.set(self.1));
        unsafe { step::install_sink(self.0) };
    }
}

/// Picks the next thread among the runnable ones.
pub trait Chooser {
    /// Returns an index into `runnable`, which is never empty.
    fn choose(&mut self, runnable: &[u16]) -> usize;
}

/// Always picks the lowest-numbered runnable thread.
pub struct FirstRunnable;

impl Chooser for FirstRunnable {
    fn choose(&mut self, _: &[u16]) -> usize {
        0
    }
}

/// Uniformly random choices from a seeded generator.
pub struct RandomChooser(ChaCha8Rng);

impl RandomChooser {
    pub fn new(seed: u64) -> Self {
        RandomChooser(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl Chooser for RandomChooser {
    fn choose(&mut self, runnable: &[u16]) -> usize {
        self.0.random_range(0..runnable.len())
    }
}

/// Round-robin over runnable threads, switching after every step.
#[derive(Default)]
pub struct RoundRobin(usize);

impl Chooser for RoundRobin {
    fn choose(&mut self, runnable: &[u16]) -> usize {
        self.0 += 1;
        self.0 % runnable.len()
    }
}

/// Follows a recorded schedule; reports whether it ever had to deviate.
pub struct Scripted<'a> {
    picks: &'a [u16],
    at: usize,
    pub diverged: bool,
}

impl<'a> Scripted<'a> {
    pub fn new(picks: &'a [u16]) -> Self {
        Scripted {
            picks,
            at: 0,
            diverged: false,
        }
    }
}

impl Chooser for Scripted<'_> {
    fn choose(&mut self, runnable: &[u16]) -> usize {
        let want = self.picks.get(self.at).copied();
        self.at += 1;
        match want.and_then(|t| runnable.iter().position(|&r| r == t)) {
            Some(i) => i,
            None => {
                self.diverged = true;
                0
            }
        }
    }
}

#[derive(Default)]
struct Dfs {
    /// (choice, width) at each branching point of the current path.
    path: Vec<(u16, u16)>,
    depth: usize,
    diverged: bool,
    /// Most preemptions allowed per execution, if bounded.
    bound: Option<usize>,
    last: Option<u16>,
    preemptions: usize,
    options: Vec<usize>,
}

impl Chooser for Dfs {
    fn choose(&mut self, runnable: &[u16]) -> usize {
        let cont = self.last.and_then(|l| runnable.iter().position(|&r| r == l));
        self.options.clear();
        if let Some(c) = cont {
            self.options.push(c);
            if self.bound.is_none_or(|b| self.preemptions < b) {
                self.options.extend((0..runnable.len()).filter(|&i| i != c));
            }
        } else {
            self.options.extend(0..runnable.len());
        }
        let pick = if self.options.len() == 1 {
            self.options[0]
        } else {
            let d = self.depth;
            self.depth += 1;
            let c = if d < self.path.len() {
                let (c, w) = self.path[d];
                if w as usize != self.options.len() {
                    self.diverged = true;
                }
                (c as usize).min(self.options.len() - 1)
            } else {
                self.path.push((0, self.options.len() as u16));
                0
            };
            self.options[c]
        };
        if cont.is_some_and(|c| c != pick) {
            self.preemptions += 1;
        }
        self.last = Some(runnable[pick]);
        pick
    }
}

impl Dfs {
    fn advance(&mut self) -> bool {
        self.depth = 0;
        self.last = None;
        self.preemptions = 0;
        while let Some(top) = self.path.last_mut() {
            if top.0 + 1 < top.1 {
                top.0 += 1;
                return true;
            }
            self.path.pop();
        }
        false
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coverage {
    Exhaustive,
    /// Every schedule with at most this many preemptions.
    Bounded(usize),
    Random { seed: u64, runs: usize },
    Scripted,
}

impl fmt::Display for Coverage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coverage::Exhaustive => write!(f, "exhaustive"),
            Coverage::Bounded(k) => write!(f, "exhaustive up to {k} preemptions"),
            Coverage::Random { seed, runs } => write!(f, "random(seed={seed}, runs={runs})"),
            Coverage::Scripted => write!(f, "scripted"),
        }
    }
}

/// A failed execution, with what is needed to replay it.
#[derive(Clone, Debug)]
pub struct Failure {
    pub message: String,
    pub schedule: Vec<u16>,
    pub trace: Vec<Step>,
}

/// Summary of exploring one case.
#[derive(Clone, Debug)]
pub struct Report {
    pub coverage: Coverage,
    pub executions: u64,
    pub failed: u64,
    /// The first few failures.
    pub failures: Vec<Failure>,
    pub warning: Option<String>,
    pub max_steps: usize,
    pub elapsed: Duration,
}

impl Report {
    pub fn new(coverage: Coverage) -> Self {
        Report {
            coverage,
            executions: 0,
            failed: 0,
            failures: Vec::new(),
            warning: None,
            max_steps: 0,
            elapsed: Duration::ZERO,
        }
    }

    pub fn passed(&self) -> bool {
        self.failed == 0 && self.executions > 0
    }

    pub fn record(&mut self, exec: &Execution, verdict: Result<(), String>) {
        self.executions += 1;
        self.max_steps = self.max_steps.max(exec.scheduled_steps());
        if let Err(message) = verdict {
            self.failed += 1;
            if self.failures.len() < 4 {
                self.failures.push(Failure {
                    message,
                    schedule: exec.schedule.clone(),
                    trace: exec.trace.clone(),
                });
            }
        }
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} executions, {} failed, max {} steps, {}, {:.2?}",
            self.executions, self.failed, self.max_steps, self.coverage, self.elapsed
        )?;
        if let Some(w) = &self.warning {
            write!(f, " [{w}]")?;
        }
        if let Some(x) = self.failures.first() {
            write!(f, "; first failure: {}", x.message)?;
        }
        Ok(())
    }
}

type Co = Coroutine<(), (), u64, DefaultStack>;

enum State {
    Runnable(Co),
    Finished,
}

/// Runs cases under the cooperative scheduler.
pub struct Explorer {
    pub budget: usize,
    pub seed: u64,
    pub random_runs: usize,
    pub step_cap: usize,
    stacks: RefCell<Vec<DefaultStack>>,
}

impl Default for Explorer {
    fn default() -> Self {
        Explorer::new(DEFAULT_BUDGET, 0)
    }
}

impl Explorer {
    pub fn new(budget: usize, seed: u64) -> Self {
        Explorer {
            budget,
            seed,
            random_runs: DEFAULT_RANDOM_RUNS,
            step_cap: DEFAULT_STEP_CAP,
            stacks: RefCell::new(Vec::new()),
        }
    }

    pub fn with_random_runs(mut self, runs: usize) -> Self {
        self.random_runs = runs;
        self
    }

    pub fn with_step_cap(mut self, cap: usize) -> Self {
        self.step_cap = cap;
        self
    }

    fn stack(&self) -> DefaultStack {
        self.stacks
            .borrow_mut()
            .pop()
            .unwrap_or_else(|| DefaultStack::new(STACK_BYTES).expect("coroutine stack"))
    }

    /// Enumerates every schedule of the case if each execution fits the budget; otherwise
    /// falls back to seeded random schedules and says so in the report.
    pub fn explore(&self, make: &mut dyn FnMut() -> Case) -> Report {
        let start = Instant::now();
        let mut rep = Report::new(Coverage::Exhaustive);
        let mut dfs = Dfs::default();
        loop {
            let (exec, verdict) = self.execute(make, &mut dfs);
            if exec.scheduled_steps() > self.budget || exec.capped {
                let msg = format!(
                    "an execution took {} steps, over the exhaustive budget of {}; sampled {} random schedules instead",
                    exec.scheduled_steps(),
                    self.budget,
                    self.random_runs
                );
                log::warn!("{msg}");
                let mut r = self.random(make, self.seed, self.random_runs);
                r.warning = Some(msg);
                r.elapsed = start.elapsed();
                return r;
            }
            if dfs.diverged {
                rep.record(&exec, Err("case is not deterministic under replay".into()));
                break;
            }
            rep.record(&exec, verdict);
            if !dfs.advance() {
                break;
            }
        }
        rep.elapsed = start.elapsed();
        rep
    }

    /// Enumerates every schedule that switches away from a runnable thread at most
    /// `preemptions` times, regardless of the step budget. Switches forced by a thread
    /// finishing or freezing are free.
    pub fn explore_bounded(&self, make: &mut dyn FnMut() -> Case, preemptions: usize) -> Report {
        let start = Instant::now();
        let mut rep = Report::new(Coverage::Bounded(preemptions));
        let mut dfs = Dfs {
            bound: Some(preemptions),
            ..Dfs::default()
        };
        loop {
            let (exec, verdict) = self.execute(make, &mut dfs);
            if dfs.diverged {
                rep.record(&exec, Err("case is not deterministic under replay".into()));
                break;
            }
            rep.record(&exec, verdict);
            if !dfs.advance() {
                break;
            }
        }
        rep.elapsed = start.elapsed();
        rep
    }

    /// Runs `runs` schedules drawn from generators seeded `seed`, `seed + 1`, ...
    pub fn random(&self, make: &mut dyn FnMut() -> Case, seed: u64, runs: usize) -> Report {
        let start = Instant::now();
        let mut rep = Report::new(Coverage::Random { seed, runs });
        for i in 0..runs as u64 {
            let (exec, verdict) = self.execute(make, &mut RandomChooser::new(seed.wrapping_add(i)));
            rep.record(&exec, verdict);
        }
        rep.elapsed = start.elapsed();
        rep
    }

    /// Re-executes a recorded schedule, stopping where it stops.
    pub fn replay(&self, make: &mut dyn FnMut() -> Case, schedule: &[u16]) -> (Execution, Result<(), String>) {
        let mut s = Scripted::new(schedule);
        let (exec, verdict) = self.run(make, &mut s, schedule.len());
        if s.diverged || exec.schedule != schedule {
            return (exec, Err("schedule could not be followed".into()));
        }
        (exec, verdict)
    }

    /// Builds a case and runs it once with `chooser` picking threads.
    pub fn execute(&self, make: &mut dyn FnMut() -> Case, chooser: &mut dyn Chooser) -> (Execution, Result<(), String>) {
        self.run(make, chooser, self.step_cap)
    }

    fn run(&self, make: &mut dyn FnMut() -> Case, chooser: &mut dyn Chooser, step_cap: usize) -> (Execution, Result<(), String>) {
        let sched = Box::new(Sched::new());
        let installed = Installed::new(&sched);
        let case = make();
        let n = case.threads.len();
        *sched.yielders.borrow_mut() = vec![0; n];
        *sched.freeze.borrow_mut() = case.threads.iter().map(|t| t.freeze).collect();
        *sched.frozen.borrow_mut() = vec![false; n];
        *sched.armed.borrow_mut() = vec![false; n];
        *sched.steps.borrow_mut() = vec![0; n];
        let ctxs: Vec<ProcessContext> = (0..n).map(|_| ProcessContext::new()).collect();
        let sp = &*sched as *const Sched as usize;
        let mut states: Vec<State> = case
            .threads
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                let body = t.body;
                State::Runnable(Coroutine::with_stack(self.stack(), move |y: &Yielder<(), ()>, ()| {
                    let s = unsafe { &*(sp as *const Sched) };
                    s.yielders.borrow_mut()[i] = y as *const Yielder<(), ()> as usize;
                    body()
                }))
            })
            .collect();
        let mut outcomes = vec![Outcome::Running; n];

        sched.mode.set(SinkMode::Schedule);
        for i in 0..n {
            self.resume(&sched, &ctxs, &mut states, &mut outcomes, i);
        }
        let mut schedule = Vec::new();
        let mut capped = false;
        let mut runnable = Vec::with_capacity(n);
        loop {
            runnable.clear();
            {
                let frozen = sched.frozen.borrow();
                runnable.extend(
                    (0..n).filter(|&i| matches!(states[i], State::Runnable(_)) && !frozen[i]).map(|i| i as u16),
                );
            }
            if runnable.is_empty() {
                break;
            }
            if schedule.len() >= step_cap {
                capped = true;
                break;
            }
            let t = runnable[chooser.choose(&runnable)];
            schedule.push(t);
            self.resume(&sched, &ctxs, &mut states, &mut outcomes, t as usize);
        }
        {
            let frozen = sched.frozen.borrow();
            for i in 0..n {
                if frozen[i] && outcomes[i] == Outcome::Running {
                    outcomes[i] = Outcome::Frozen;
                }
            }
        }

        // Let everything still pending run to completion, frozen threads first.
        sched.mode.set(SinkMode::Thaw);
        let mut finals: Vec<Option<u64>> = outcomes
            .iter()
            .map(|o| match o {
                Outcome::Done(v) => Some(*v),
                _ => None,
            })
            .collect();
        let mut order: Vec<usize> = (0..n).filter(|&i| outcomes[i] == Outcome::Frozen).collect();
        order.extend((0..n).filter(|&i| outcomes[i] == Outcome::Running));
        for _ in 0..THAW_ROUNDS {
            if order.iter().all(|&i| matches!(states[i], State::Finished)) {
                break;
            }
            for &i in &order {
                if matches!(states[i], State::Runnable(_)) {
                    let mut o = Outcome::Running;
                    self.resume_into(&sched, &ctxs, &mut states, &mut o, i);
                    if let Outcome::Done(v) = o {
                        finals[i] = Some(v);
                    }
                }
            }
        }
        sched.mode.set(SinkMode::Unwind);
        for (i, st) in states.iter_mut().enumerate() {
            if let State::Runnable(co) = std::mem::replace(st, State::Finished) {
                sched.cur.set(i);
                let prev = swap_current(&ctxs[i]);
                let mut co = co;
                let _ = panic::catch_unwind(AssertUnwindSafe(|| co.force_unwind()));
                swap_current(prev);
                self.stacks.borrow_mut().push(co.into_stack());
            }
        }
        drop(installed);

        let raw = std::mem::take(&mut *sched.raw.borrow_mut());
        let trace = normalize(&raw, &case.roots);
        let steps_per_thread = sched.steps.borrow().clone();
        let exec = Execution {
            schedule,
            raw,
            trace,
            outcomes,
            finals,
            steps_per_thread,
            capped,
        };
        let verdict = match panic::catch_unwind(AssertUnwindSafe(|| (case.check)(&exec))) {
            Ok(v) => v,
            Err(p) => Err(format!("check panicked: {}", panic_message(&p))),
        };
        let verdict = verdict.and_then(|()| {
            exec.outcomes.iter().enumerate().find_map(|(i, o)| match o {
                Outcome::Panicked(m) => Some(Err(format!("thread {i} panicked: {m}"))),
                _ => None,
            }).unwrap_or(Ok(()))
        });
        drop(ctxs);
        (exec, verdict)
    }

    fn resume(&self, sched: &Sched, ctxs: &[ProcessContext], states: &mut [State], outcomes: &mut [Outcome], i: usize) {
        self.resume_into(sched, ctxs, states, &mut outcomes[i], i);
    }

    fn resume_into(&self, sched: &Sched, ctxs: &[ProcessContext], states: &mut [State], out: &mut Outcome, i: usize) {
        let State::Runnable(co) = &mut states[i] else {
            return;
        };
        sched.cur.set(i);
        let prev = swap_current(&ctxs[i]);
        let r = panic::catch_unwind(AssertUnwindSafe(|| co.resume(())));
        swap_current(prev);
        match r {
            Ok(CoroutineResult::Yield(())) => return,
            Ok(CoroutineResult::Return(v)) => *out = Outcome::Done(v),
            Err(p) => *out = Outcome::Panicked(panic_message(&p)),
        }
        if let State::Runnable(co) = std::mem::replace(&mut states[i], State::Finished) {
            self.stacks.borrow_mut().push(co.into_stack());
        }
    }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic".into()
    }
}

/// Rewrites addresses in a raw trace as allocation-relative names.
///
/// A location inside a recorded allocation becomes `ALLOCATED | id << 12 | offset`, where
/// `id` counts allocations in order; other locations are numbered by first appearance. A
/// value whose low word points at the start of an allocation (ignoring the low four bits)
/// becomes `SYMBOLIC | id << 4 | low bits`; pointers to roots are numbered after them.
pub fn normalize(raw: &[RawStep], roots: &[usize]) -> Vec<Step> {
    let mut live: BTreeMap<usize, (u32, usize)> = BTreeMap::new();
    let mut bases: HashMap<usize, u64> = HashMap::new();
    let mut others: HashMap<usize, u32> = HashMap::new();
    let mut next_id = 0u32;
    for (i, &r) in roots.iter().enumerate() {
        bases.insert(r & !0xf, (1 << 20) + i as u64);
    }
    let mut out = Vec::with_capacity(raw.len());
    for s in raw {
        if s.kind == StepKind::Alloc {
            let size = (s.new as usize).max(1);
            let stale: Vec<usize> = live.range(s.loc..s.loc + size).map(|(&k, _)| k).collect();
            for k in stale {
                live.remove(&k);
            }
            live.insert(s.loc, (next_id, size));
            bases.insert(s.loc, next_id as u64);
            next_id += 1;
        }
        if s.thread == u16::MAX {
            continue;
        }
        let loc = match live.range(..=s.loc).next_back() {
            Some((&b, &(id, size))) if s.loc < b + size => ALLOCATED | (id << 12) | (s.loc - b) as u32,
            _ => {
                let n = others.len() as u32;
                *others.entry(s.loc).or_insert(n)
            }
        };
        let sym = |v: u128| -> u128 {
            let lo = v as u64;
            if lo == 0 || s.kind.is_private() {
                return v;
            }
            match bases.get(&((lo & !0xf) as usize)) {
                Some(&id) => (v & !(u64::MAX as u128)) | (SYMBOLIC | id << 4 | (lo & 0xf)) as u128,
                None => v,
            }
        };
        out.push(Step {
            thread: s.thread,
            kind: s.kind,
            space: s.space,
            loc,
            old: sym(s.old),
            new: sym(s.new),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::RawCell;
    use std::sync::Arc;

    fn steps_case(n: usize, per: usize) -> impl FnMut() -> Case {
        move || {
            let cells: Arc<Vec<RawCell>> = Arc::new((0..n).map(|_| RawCell::new(0)).collect());
            let threads = (0..n)
                .map(|i| {
                    let c = cells.clone();
                    VThread::new(move || {
                        for _ in 0..per {
                            c[i].set(c[i].get() + 1);
                        }
                        c[i].get()
                    })
                })
                .collect();
            Case::new(threads, |_| Ok(())).root(&*cells)
        }
    }

    fn count(n: usize, per: usize) -> u64 {
        // Each increment is two steps, plus a final read.
        let mut make = steps_case(n, per);
        let rep = Explorer::new(64, 0).explore(&mut make);
        assert_eq!(rep.coverage, Coverage::Exhaustive);
        assert!(rep.passed());
        rep.executions
    }

    fn binomial(n: u64, k: u64) -> u64 {
        (1..=k).fold(1, |acc, i| acc * (n - k + i) / i)
    }

    #[test]
    fn one_thread_has_one_interleaving() {
        assert_eq!(count(1, 3), 1);
    }

    #[test]
    fn interleaving_counts_are_binomial() {
        // A thread doing `per` increments and a read takes 2 * per + 1 steps.
        assert_eq!(count(2, 0), binomial(2, 1));
        let per_2_steps = {
            let mut make = || {
                let c = Arc::new([RawCell::new(0), RawCell::new(0)]);
                let (a, b) = (c.clone(), c.clone());
                Case::new(
                    vec![
                        VThread::new(move || a[0].get() + a[0].get()),
                        VThread::new(move || b[1].get() + b[1].get()),
                    ],
                    |_| Ok(()),
                )
            };
            Explorer::new(64, 0).explore(&mut make).executions
        };
        assert_eq!(per_2_steps, binomial(4, 2));
        let six = {
            let mut make = || {
                let c = Arc::new([RawCell::new(0), RawCell::new(0)]);
                let (a, b) = (c.clone(), c.clone());
                let six = |c: Arc<[RawCell; 2]>, i: usize| move || (0..6).map(|_| c[i].get()).sum::<u64>();
                Case::new(vec![VThread::new(six(a, 0)), VThread::new(six(b, 1))], |_| Ok(()))
            };
            let rep = Explorer::new(64, 0).explore(&mut make);
            rep.executions
        };
        assert_eq!(six, binomial(12, 6));
        assert_eq!(count(3, 1), 1680);
    }

    #[test]
    fn preemption_bound_limits_schedules() {
        // Two threads of three steps each. With no preemptions only the two serial orders
        // remain; one preemption adds a cut after the first or second step of whichever
        // thread starts.
        let mut make = || {
            let c = Arc::new([RawCell::new(0), RawCell::new(0)]);
            let (a, b) = (c.clone(), c.clone());
            let three = |c: Arc<[RawCell; 2]>, i: usize| move || (0..3).map(|_| c[i].get()).sum::<u64>();
            Case::new(vec![VThread::new(three(a, 0)), VThread::new(three(b, 1))], |_| Ok(()))
        };
        let ex = Explorer::default();
        assert_eq!(ex.explore_bounded(&mut make, 0).executions, 2);
        assert_eq!(ex.explore_bounded(&mut make, 1).executions, 6);
        assert_eq!(ex.explore_bounded(&mut make, 10).executions, binomial(6, 3));
    }

    #[test]
    fn over_budget_falls_back_to_random() {
        let mut make = steps_case(2, 10);
        let rep = Explorer::new(16, 3).with_random_runs(50).explore(&mut make);
        assert_eq!(rep.coverage, Coverage::Random { seed: 3, runs: 50 });
        assert!(rep.warning.is_some());
        assert_eq!(rep.executions, 50);
    }

    #[test]
    fn replay_reproduces_trace() {
        let mut make = steps_case(3, 3);
        let ex = Explorer::default();
        for seed in 0..20 {
            let (a, _) = ex.execute(&mut make, &mut RandomChooser::new(seed));
            let (b, v) = ex.replay(&mut make, &a.schedule);
            assert!(v.is_ok());
            assert_eq!(a.trace, b.trace);
        }
    }

    #[test]
    fn lost_update_is_visible_in_some_schedule() {
        let mut make = || {
            let c = Arc::new(RawCell::new(0));
            let (a, b, k) = (c.clone(), c.clone(), c.clone());
            Case::new(
                vec![
                    VThread::new(move || {
                        a.set(a.get() + 1);
                        0
                    }),
                    VThread::new(move || {
                        b.set(b.get() + 1);
                        0
                    }),
                ],
                move |_| if k.get_raw() == 2 { Ok(()) } else { Err("lost update".into()) },
            )
        };
        let rep = Explorer::default().explore(&mut make);
        assert_eq!(rep.executions, 6);
        assert_eq!(rep.failed, 4);
    }

    #[test]
    fn frozen_thread_is_thawed_after_scheduling() {
        let mut make = || {
            let c = Arc::new(RawCell::new(0));
            let (a, b) = (c.clone(), c.clone());
            Case::new(
                vec![
                    VThread::new(move || {
                        a.set(1);
                        a.set(2);
                        7
                    })
                    .frozen(Freeze::BeforeFirst(Space::Raw)),
                    VThread::new(move || b.get()),
                ],
                |e| {
                    if e.outcomes[0] != Outcome::Frozen || e.finals[0] != Some(7) || e.done(1) != Some(0) {
                        return Err(format!("{:?} {:?}", e.outcomes, e.finals));
                    }
                    Ok(())
                },
            )
        };
        let rep = Explorer::default().explore(&mut make);
        assert!(rep.passed(), "{rep}");
        assert_eq!(rep.executions, 1);
    }

    #[test]
    fn panics_in_threads_fail_the_execution() {
        let mut make = || Case::new(vec![VThread::new(|| panic!("boom"))], |_| Ok(()));
        let rep = Explorer::default().explore(&mut make);
        assert_eq!(rep.failed, 1);
        assert!(rep.failures[0].message.contains("boom"));
    }
}
