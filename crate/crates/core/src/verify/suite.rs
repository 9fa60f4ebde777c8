//! Named verification suites, the cases in them, and replay of recorded traces.

use std::cell::Cell;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;
use std::time::Instant;

use crate::locks::LockMode;
use crate::structures::{LockKind, StructureKind};

use super::helping::{self, HelpMetrics, SuspensionProbe};
use super::idempotence::{self, solo};
use super::linearize::{self, RecordedRun};
use super::sched::{Case, Coverage, Explorer, RandomChooser, Report};
use super::trace::TraceFile;
use super::trylock::{self, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Suite {
    Idempotence,
    TryLock,
    Linearizable,
    Helping,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Idempotence, Suite::TryLock, Suite::Linearizable, Suite::Helping];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Idempotence => "idempotence",
            Suite::TryLock => "trylock",
            Suite::Linearizable => "linearizable",
            Suite::Helping => "helping",
        }
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown suite `{s}` (expected idempotence, trylock, linearizable or helping)"))
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Knobs shared by the suites.
#[derive(Clone, Debug)]
pub struct SuiteConfig {
    /// Largest execution, in scheduled steps, that is still enumerated exhaustively.
    pub budget: usize,
    pub seed: u64,
    /// Random schedules per case when a case is over budget.
    pub random_runs: usize,
    /// Small scheduled histories per structure.
    pub histories: usize,
    /// Operations per structure in recorded real-thread runs.
    pub ops: usize,
    pub threads: usize,
    /// Seconds per real-thread contention storm.
    pub storm_seconds: f64,
    /// Virtual-thread contention storms per structure.
    pub storms: usize,
    /// Preemption bound for cases too long to enumerate exhaustively.
    pub preemptions: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            budget: super::DEFAULT_BUDGET,
            seed: 7,
            random_runs: super::DEFAULT_RANDOM_RUNS,
            histories: 1000,
            ops: 1_000_000,
            threads: 4,
            storm_seconds: 1.0,
            storms: 1000,
            preemptions: 2,
        }
    }
}

/// Outcome of one case.
#[derive(Clone, Debug)]
pub struct CaseOutcome {
    pub name: String,
    pub report: Report,
    /// Negative controls pass when they fail.
    pub expect_fail: bool,
}

impl CaseOutcome {
    pub fn ok(&self) -> bool {
        if self.expect_fail {
            self.report.failed > 0
        } else {
            self.report.passed()
        }
    }
}

/// A property checked outside any single case.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct SuiteOutcome {
    pub suite: Suite,
    pub cases: Vec<CaseOutcome>,
    pub checks: Vec<Check>,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseOutcome::ok) && self.checks.iter().all(|c| c.ok)
    }

    /// The first failure that should not have happened, ready to be saved.
    pub fn first_failure(&self, seed: u64) -> Option<TraceFile> {
        self.cases.iter().filter(|c| !c.expect_fail).find_map(|c| {
            c.report.failures.first().map(|f| TraceFile {
                suite: self.suite.name().into(),
                case: c.name.clone(),
                seed,
                schedule: f.schedule.clone(),
                steps: f.trace.clone(),
                message: f.message.clone(),
            })
        })
    }
}

impl fmt::Display for SuiteOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.cases {
            let tag = match (c.ok(), c.expect_fail) {
                (true, false) => "ok",
                (true, true) => "ok (control failed as expected)",
                (false, false) => "FAIL",
                (false, true) => "FAIL (control was not caught)",
            };
            writeln!(f, "{} {}: {tag}: {}", self.suite, c.name, c.report)?;
        }
        for c in &self.checks {
            writeln!(f, "{} {}: {}: {}", self.suite, c.name, if c.ok { "ok" } else { "FAIL" }, c.detail)?;
        }
        write!(f, "{}: {}", self.suite, if self.passed() { "passed" } else { "FAILED" })
    }
}

pub type Factory = Box<dyn FnMut() -> Case>;

fn parse_kind_lock(kind: &str, lock: &str) -> Option<(StructureKind, LockKind)> {
    Some((kind.parse().ok()?, lock.parse().ok()?))
}

/// Builds the case with the given name. Names:
///
/// * idempotence: `<thunk>/<runs>`, e.g. `counter/2` or `raw-counter/2`
/// * trylock: `one-lock`, `nested-inner`, `nested-both`, `frozen-owner`, `raw-thunk`,
///   `no-done-check`
/// * linearizable: `<structure>/<lock>/<seed>`, a small scripted history
/// * helping: `storm/<structure>/<lock>/<seed>` or `suspension/<structure>/<mode>`
pub fn case(suite: Suite, name: &str) -> Option<Factory> {
    let parts: Vec<&str> = name.split('/').collect();
    match suite {
        Suite::Idempotence => {
            let (thunk, runs) = match parts.as_slice() {
                [t] => (*t, 2),
                [t, r] => (*t, r.parse().ok()?),
                _ => return None,
            };
            if !(1..=idempotence::MAX_RUNS).contains(&runs) {
                return None;
            }
            let c = idempotence::find(thunk)?;
            let oracle = solo(&c);
            Some(Box::new(move || idempotence::runs_case(&c, runs, oracle.clone())))
        }
        Suite::TryLock => {
            let sink = Rc::new(Cell::new(0));
            Some(match name {
                "one-lock" => Box::new(move || trylock::one_lock(Variant::Correct, sink.clone())),
                "raw-thunk" => Box::new(move || trylock::one_lock(Variant::RawThunk, sink.clone())),
                "no-done-check" => Box::new(move || trylock::one_lock(Variant::NoDoneCheck, sink.clone())),
                "nested-inner" => Box::new(|| trylock::nested(false)),
                "nested-both" => Box::new(|| trylock::nested(true)),
                "frozen-owner" => Box::new(trylock::frozen_owner),
                _ => return None,
            })
        }
        Suite::Linearizable => {
            let [kind, lock, seed] = parts.as_slice() else { return None };
            let (kind, lock) = parse_kind_lock(kind, lock)?;
            let script = linearize::small_script(seed.parse().ok()?, 3, 3, 3);
            Some(Box::new(move || linearize::small_case(kind, lock, &script, &[2], Rc::default())))
        }
        Suite::Helping => match parts.as_slice() {
            ["storm", kind, lock, seed] => {
                let (kind, lock) = parse_kind_lock(kind, lock)?;
                let seed: u64 = seed.parse().ok()?;
                Some(Box::new(move || helping::storm_case(kind, lock, STORM_THREADS, STORM_OPS, STORM_KEYS, seed, Rc::default())))
            }
            ["suspension", kind, mode] => {
                let kind: StructureKind = kind.parse().ok()?;
                let mode: LockMode = mode.parse().ok()?;
                Some(Box::new(move || helping::suspension_case(kind, mode, SUSPENSION_VICTIMS, SUSPENSION_EACH, Rc::new(SuspensionProbe::default()))))
            }
            _ => None,
        },
    }
}

const STORM_THREADS: usize = 4;
const STORM_OPS: usize = 8;
const STORM_KEYS: u64 = 6;
const SUSPENSION_VICTIMS: usize = 2;
const SUSPENSION_EACH: u64 = 500;
/// Scheduled steps the blocking-mode suspension scenario may spin for.
const SUSPENSION_CAP: usize = 1_000_000;

/// Runs one seeded random schedule of a named case and returns its trace.
pub fn record(suite: Suite, name: &str, seed: u64) -> Option<TraceFile> {
    let mut make = case(suite, name)?;
    let ex = Explorer::default().with_step_cap(SUSPENSION_CAP);
    let (exec, verdict) = ex.execute(&mut make, &mut RandomChooser::new(seed));
    Some(TraceFile {
        suite: suite.name().into(),
        case: name.into(),
        seed,
        schedule: exec.schedule,
        steps: exec.trace,
        message: verdict.err().unwrap_or_default(),
    })
}

/// What replaying a trace file produced.
#[derive(Clone, Debug)]
pub struct Replay {
    /// Whether the replayed trace equals the recorded one step for step.
    pub identical: bool,
    /// First step at which the traces differ.
    pub first_difference: Option<usize>,
    pub verdict: Result<(), String>,
    pub steps: usize,
}

pub fn replay(t: &TraceFile) -> Result<Replay, String> {
    let suite: Suite = t.suite.parse()?;
    let mut make = case(suite, &t.case).ok_or_else(|| format!("no case `{}` in suite {suite}", t.case))?;
    let (exec, verdict) = Explorer::default().replay(&mut make, &t.schedule);
    let first_difference = exec
        .trace
        .iter()
        .zip(&t.steps)
        .position(|(a, b)| a != b)
        .or_else(|| (exec.trace.len() != t.steps.len()).then(|| exec.trace.len().min(t.steps.len())));
    Ok(Replay {
        identical: first_difference.is_none(),
        first_difference,
        verdict,
        steps: exec.trace.len(),
    })
}

/// Explores a case; if it was over budget, also enumerates every schedule with few
/// preemptions and reports that as a second outcome.
fn explore_case(ex: &Explorer, preemptions: usize, name: String, expect_fail: bool, make: &mut dyn FnMut() -> Case, out: &mut Vec<CaseOutcome>) {
    let report = ex.explore(make);
    let deepen = report.warning.is_some();
    out.push(CaseOutcome {
        name: name.clone(),
        report,
        expect_fail,
    });
    if deepen {
        out.push(CaseOutcome {
            name: format!("{name} (bounded)"),
            report: ex.explore_bounded(make, preemptions),
            expect_fail,
        });
    }
}

fn run_idempotence(cfg: &SuiteConfig, ex: &Explorer) -> SuiteOutcome {
    let mut cases = Vec::new();
    for (c, expect_fail) in idempotence::catalog().into_iter().map(|c| (c, false)).chain(idempotence::negative_controls().into_iter().map(|c| (c, true))) {
        let oracle = solo(&c);
        explore_case(ex, cfg.preemptions, format!("{}/2", c.name), expect_fail, &mut || idempotence::runs_case(&c, 2, oracle.clone()), &mut cases);
    }
    SuiteOutcome {
        suite: Suite::Idempotence,
        cases,
        checks: Vec::new(),
    }
}

fn run_trylock(cfg: &SuiteConfig, ex: &Explorer) -> SuiteOutcome {
    let r = trylock::run_suite(ex);
    let mut cases = Vec::new();
    for (list, expect_fail) in [(r.scenarios, false), (r.controls, true)] {
        for (name, report) in list {
            let deepen = report.warning.is_some();
            cases.push(CaseOutcome {
                name: name.into(),
                report,
                expect_fail,
            });
            if deepen {
                let mut make = case(Suite::TryLock, name).expect("suite scenario has a name");
                cases.push(CaseOutcome {
                    name: format!("{name} (bounded)"),
                    report: ex.explore_bounded(&mut make, cfg.preemptions),
                    expect_fail,
                });
            }
        }
    }
    SuiteOutcome {
        suite: Suite::TryLock,
        cases,
        checks: vec![Check {
            name: "done-flag path".into(),
            ok: r.done_paths > 0,
            detail: format!("owner learned of its own completion from the done flag in {} executions", r.done_paths),
        }],
    }
}

fn run_linearizable(cfg: &SuiteConfig) -> SuiteOutcome {
    let mut cases = Vec::new();
    let mut checks = Vec::new();
    let ex = Explorer::default();
    for kind in StructureKind::ALL {
        let start = Instant::now();
        let mut rep = Report::new(Coverage::Random {
            seed: cfg.seed,
            runs: cfg.histories,
        });
        let mut first = None;
        for i in 0..cfg.histories as u64 {
            let s = cfg.seed.wrapping_add(i);
            let lock = if i % 2 == 0 { LockKind::Try } else { LockKind::Strict };
            let script = linearize::small_script(s, 3, 3, 3);
            let mut make = || linearize::small_case(kind, lock, &script, &[2], Rc::default());
            let (exec, verdict) = ex.execute(&mut make, &mut RandomChooser::new(s));
            if verdict.is_err() && first.is_none() {
                first = Some(format!("{kind}/{lock}/{s}"));
            }
            rep.record(&exec, verdict);
        }
        rep.elapsed = start.elapsed();
        cases.push(CaseOutcome {
            name: first.unwrap_or_else(|| format!("{kind}/small")),
            report: rep,
            expect_fail: false,
        });
        for alpha in [0.0, 0.99] {
            let run = RecordedRun {
                kind,
                lock: LockKind::Try,
                mode: LockMode::LockFree,
                threads: cfg.threads,
                range: 1000,
                alpha,
                seed: cfg.seed,
                ops_per_thread: cfg.ops / 2 / cfg.threads.max(1),
            };
            let start = Instant::now();
            let out = run.record();
            let verdict = linearize::check_with_final_state(&out);
            checks.push(Check {
                name: format!("{kind} recorded alpha={alpha}"),
                ok: verdict.is_ok() && out.diagnostics.is_clean(),
                detail: format!(
                    "{} ops on {} threads, per-key check {}, structure {}, {:.2?}",
                    out.history.len(),
                    cfg.threads,
                    match &verdict {
                        Ok(()) => "clean".to_string(),
                        Err(v) => format!("violated ({v})"),
                    },
                    if out.diagnostics.is_clean() { "intact".to_string() } else { format!("damaged {:?}", out.diagnostics.violations) },
                    start.elapsed()
                ),
            });
        }
    }
    SuiteOutcome {
        suite: Suite::Linearizable,
        cases,
        checks,
    }
}

fn run_helping(cfg: &SuiteConfig) -> SuiteOutcome {
    let mut cases = Vec::new();
    let mut checks = Vec::new();
    let quiet = helping::storm(StructureKind::DList, LockKind::Try, 1, 64, cfg.storm_seconds.min(0.2), cfg.seed);
    checks.push(match quiet {
        Ok(m) => Check {
            name: "no contention".into(),
            ok: m.max_chain() == 0 && m.helps == 0 && m.attempts() > 0,
            detail: format!("{} lock attempts, {} helps, max chain {}", m.attempts(), m.helps, m.max_chain()),
        },
        Err(e) => Check {
            name: "no contention".into(),
            ok: false,
            detail: e.to_string(),
        },
    });
    for kind in [StructureKind::DList, StructureKind::LazyList] {
        let mut all = HelpMetrics::default();
        match helping::storm(kind, LockKind::Try, 8, 8, cfg.storm_seconds, cfg.seed) {
            Ok(m) => {
                checks.push(chain_check(&format!("{kind} real storm"), &m));
                all.merge(&m);
            }
            Err(e) => checks.push(Check {
                name: format!("{kind} real storm"),
                ok: false,
                detail: e.to_string(),
            }),
        }
        let (m, rep) = helping::virtual_storm(kind, LockKind::Try, STORM_THREADS, STORM_OPS, STORM_KEYS, cfg.seed, cfg.storms);
        checks.push(chain_check(&format!("{kind} scheduled storm"), &m));
        cases.push(CaseOutcome {
            name: format!("storm/{kind}/try"),
            report: rep,
            expect_fail: false,
        });
    }
    for mode in [LockMode::LockFree, LockMode::Blocking] {
        let (s, rep) = helping::progress_under_suspension(StructureKind::DList, mode, SUSPENSION_VICTIMS, SUSPENSION_EACH, SUSPENSION_CAP);
        let want = SUSPENSION_VICTIMS as u64 * SUSPENSION_EACH;
        let ok = s.frozen
            && match mode {
                LockMode::LockFree => s.completed >= want,
                LockMode::Blocking => s.completed == 0 && s.capped,
            };
        checks.push(Check {
            name: format!("suspension {mode}"),
            ok,
            detail: format!(
                "{} updates on the contended key while the owner was stopped, {} scheduled steps{}",
                s.completed,
                s.scheduled_steps,
                if s.capped { " (step cap reached)" } else { "" }
            ),
        });
        cases.push(CaseOutcome {
            name: format!("suspension/dlist/{mode}"),
            report: rep,
            expect_fail: false,
        });
    }
    SuiteOutcome {
        suite: Suite::Helping,
        cases,
        checks,
    }
}

/// Locks strictly decrease along a helping chain, so no lock may appear on one twice.
fn chain_check(name: &str, m: &HelpMetrics) -> Check {
    Check {
        name: name.into(),
        ok: m.repeats == 0,
        detail: format!(
            "{} lock attempts, {} helps, chains {:?}, max chain {}, repeated locks on a chain {}{}",
            m.attempts(),
            m.helps,
            m.chains,
            m.max_chain(),
            m.repeats,
            m.max_op_steps.map(|t| format!(", most steps in one operation {t}")).unwrap_or_default()
        ),
    }
}

pub fn run(suite: Suite, cfg: &SuiteConfig) -> SuiteOutcome {
    let ex = Explorer::new(cfg.budget, cfg.seed).with_random_runs(cfg.random_runs);
    match suite {
        Suite::Idempotence => run_idempotence(cfg, &ex),
        Suite::TryLock => run_trylock(cfg, &ex),
        Suite::Linearizable => run_linearizable(cfg),
        Suite::Helping => run_helping(cfg),
    }
}

/// Runs one named case under the suite's explorer.
pub fn run_case(suite: Suite, name: &str, cfg: &SuiteConfig) -> Option<CaseOutcome> {
    let mut make = case(suite, name)?;
    let ex = Explorer::new(cfg.budget, cfg.seed).with_random_runs(cfg.random_runs).with_step_cap(SUSPENSION_CAP);
    let report = if suite == Suite::Helping {
        let mut rep = Report::new(Coverage::Random { seed: cfg.seed, runs: 1 });
        let (exec, verdict) = ex.execute(&mut make, &mut RandomChooser::new(cfg.seed));
        rep.record(&exec, verdict);
        rep
    } else {
        ex.explore(&mut make)
    };
    let expect_fail = matches!(name.split('/').next(), Some("raw-counter" | "raw-thunk" | "no-done-check"));
    Some(CaseOutcome {
        name: name.into(),
        report,
        expect_fail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_resolve() {
        for (s, n) in [
            (Suite::Idempotence, "counter/2"),
            (Suite::Idempotence, "raw-counter"),
            (Suite::TryLock, "frozen-owner"),
            (Suite::Linearizable, "dlist/try/3"),
            (Suite::Helping, "storm/lazylist/try/1"),
            (Suite::Helping, "suspension/dlist/blocking"),
        ] {
            assert!(case(s, n).is_some(), "{s} {n}");
        }
        assert!(case(Suite::Idempotence, "counter/9").is_none());
        assert!(case(Suite::TryLock, "two-locks").is_none());
        assert!("Helping".parse::<Suite>().is_ok());
    }

    #[test]
    fn recorded_traces_replay_identically() {
        for (s, n) in [(Suite::Idempotence, "allocate-publish/2"), (Suite::Linearizable, "leaftree/strict/5"), (Suite::TryLock, "nested-both")] {
            let t = record(s, n, 3).unwrap();
            let back = TraceFile::from_bytes(&t.to_bytes()).unwrap();
            let r = replay(&back).unwrap();
            assert!(r.identical, "{s} {n} differs at {:?}", r.first_difference);
            assert_eq!(r.verdict.err().unwrap_or_default(), t.message);
        }
    }

    #[test]
    fn failures_become_trace_files() {
        let cfg = SuiteConfig::default();
        let c = run_case(Suite::TryLock, "raw-thunk", &cfg).unwrap();
        assert!(c.ok());
        let out = SuiteOutcome {
            suite: Suite::TryLock,
            cases: vec![CaseOutcome { expect_fail: false, ..c }],
            checks: vec![],
        };
        let t = out.first_failure(cfg.seed).unwrap();
        let r = replay(&t).unwrap();
        assert!(r.identical);
        assert_eq!(r.verdict.unwrap_err(), t.message);
    }
}
