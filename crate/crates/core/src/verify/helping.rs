use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::harness::{run_workload, HarnessError, WorkloadSpec};
use crate::locks::{with_lock_mode, LockMode};
use crate::runtime::{local_stats, CHAIN_BUCKETS};
use crate::step::Space;
use crate::structures::{build, ConcurrentSet, LockKind, StructureKind};

use super::sched::{own_steps, Case, Coverage, Explorer, FirstRunnable, Freeze, Outcome, RandomChooser, Report, VThread};

/// Helping observed over a workload.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HelpMetrics {
    /// Number of threads taking part.
    pub threads: usize,
    /// Top-level lock attempts by the longest helping chain under them.
    pub chains: [u64; CHAIN_BUCKETS],
    pub helps: u64,
    /// Helps on a lock that already appeared further up the same chain. Locks decrease
    /// strictly along a chain, so this stays zero and chains are no longer than the number
    /// of distinct locks on them.
    pub repeats: u64,
    /// Most shared steps one operation took, when steps were counted.
    pub max_op_steps: Option<u64>,
}

impl HelpMetrics {
    pub fn max_chain(&self) -> usize {
        self.chains.iter().rposition(|&n| n > 0).unwrap_or(0)
    }

    pub fn attempts(&self) -> u64 {
        self.chains.iter().sum()
    }

    pub fn merge(&mut self, o: &HelpMetrics) {
        self.threads = self.threads.max(o.threads);
        for (a, b) in self.chains.iter_mut().zip(o.chains) {
            *a += b;
        }
        self.helps += o.helps;
        self.repeats += o.repeats;
        self.max_op_steps = match (self.max_op_steps, o.max_op_steps) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
    }
}

/// Real threads hammering a handful of keys with updates only.
pub fn storm(kind: StructureKind, lock: LockKind, threads: usize, keys: u64, seconds: f64, seed: u64) -> Result<HelpMetrics, HarnessError> {
    let r = run_workload(&WorkloadSpec {
        structure: kind,
        range: keys,
        update_percent: 100,
        alpha: 0.0,
        threads,
        seconds,
        mode: LockMode::LockFree,
        lock,
        seed,
        buckets: Some(1),
    })?;
    Ok(HelpMetrics {
        threads,
        chains: r.chains,
        helps: r.helps,
        repeats: r.chain_repeats,
        max_op_steps: None,
    })
}

/// Virtual threads doing random updates on `1..=keys`, each adding what it saw to `total`.
/// The check fails if the structure is damaged afterwards.
pub fn storm_case(kind: StructureKind, lock: LockKind, threads: usize, ops: usize, keys: u64, script_seed: u64, total: Rc<RefCell<HelpMetrics>>) -> Case {
    let set: Arc<dyn ConcurrentSet> = build(kind, lock, 1).into();
    let mut rng = ChaCha8Rng::seed_from_u64(script_seed);
    let vthreads = (0..threads)
        .map(|t| {
            let script: Vec<(bool, u64)> = (0..ops).map(|_| (rng.random_bool(0.5), rng.random_range(1..=keys))).collect();
            let (set, total) = (set.clone(), total.clone());
            VThread::new(move || {
                with_lock_mode(LockMode::LockFree, || {
                    let before = local_stats();
                    let mut longest = 0;
                    for (ins, k) in script {
                        let s0 = own_steps().unwrap_or(0);
                        if ins {
                            set.insert(k, t as u64);
                        } else {
                            set.remove(k);
                        }
                        longest = longest.max(own_steps().unwrap_or(0) - s0);
                    }
                    let d = local_stats().since(&before);
                    total.borrow_mut().merge(&HelpMetrics {
                        threads,
                        chains: d.chains,
                        helps: d.helps,
                        repeats: d.chain_repeats,
                        max_op_steps: Some(longest),
                    });
                });
                0
            })
        })
        .collect();
    let s2 = set.clone();
    Case::new(vthreads, move |_| {
        let d = s2.validate();
        if d.is_clean() {
            Ok(())
        } else {
            Err(format!("{:?}", d.violations))
        }
    })
    .root(&*set)
}

/// Runs [`storm_case`] `runs` times, run `i` with script and schedule seeded `seed + i`.
pub fn virtual_storm(kind: StructureKind, lock: LockKind, threads: usize, ops: usize, keys: u64, seed: u64, runs: usize) -> (HelpMetrics, Report) {
    let total = Rc::new(RefCell::new(HelpMetrics {
        threads,
        ..Default::default()
    }));
    let ex = Explorer::default();
    let mut rep = Report::new(Coverage::Random { seed, runs });
    let start = Instant::now();
    for run in 0..runs as u64 {
        let s = seed.wrapping_add(run);
        let mut make = || storm_case(kind, lock, threads, ops, keys, s, total.clone());
        let (exec, verdict) = ex.execute(&mut make, &mut RandomChooser::new(s));
        rep.record(&exec, verdict);
    }
    rep.elapsed = start.elapsed();
    let m = total.take();
    (m, rep)
}

/// What the other threads got done while one thread was stopped inside a critical section.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Suspension {
    pub mode: LockMode,
    /// Updates on the contended key that took effect while it was stopped.
    pub completed: u64,
    /// Whether the stopped thread was in fact stopped (rather than finishing first).
    pub frozen: bool,
    /// Whether the schedule hit its step cap.
    pub capped: bool,
    pub scheduled_steps: usize,
}

/// Counters a suspension case fills in.
#[derive(Default)]
pub struct SuspensionProbe {
    completed: Cell<u64>,
    owner_done: Cell<bool>,
    result: Cell<Option<(bool, bool, usize)>>,
}

/// Key the suspension scenario contends on.
pub const SUSPENSION_KEY: u64 = 50;

/// Thread 0 removes a key and is stopped inside its critical section; `victims` threads
/// then alternate insert and remove on it, each aiming for `per_victim` effective updates
/// (an insert of a present key changes nothing and needs no lock).
pub fn suspension_case(kind: StructureKind, mode: LockMode, victims: usize, per_victim: u64, probe: Rc<SuspensionProbe>) -> Case {
    probe.completed.set(0);
    probe.owner_done.set(false);
    let set: Arc<dyn ConcurrentSet> = with_lock_mode(mode, || {
        let s: Arc<dyn ConcurrentSet> = build(kind, LockKind::Try, 4).into();
        for k in (10..=90).step_by(10) {
            s.insert(k, k);
        }
        s
    });
    let freeze = match mode {
        LockMode::LockFree => Freeze::BeforeFirst(Space::Log),
        LockMode::Blocking => Freeze::AfterCas(Space::Lock),
    };
    let (s0, p0) = (set.clone(), probe.clone());
    let mut threads = vec![VThread::new(move || {
        let r = with_lock_mode(mode, || s0.remove(SUSPENSION_KEY));
        p0.owner_done.set(true);
        r as u64
    })
    .frozen(freeze)];
    for v in 0..victims {
        let (s, p) = (set.clone(), probe.clone());
        threads.push(VThread::new(move || {
            with_lock_mode(mode, || {
                let mut mine = 0;
                let mut insert = v % 2 == 0;
                while mine < per_victim && !p.owner_done.get() {
                    let took = if insert { s.insert(SUSPENSION_KEY, 1000 + v as u64) } else { s.remove(SUSPENSION_KEY) };
                    insert = !insert;
                    if took && !p.owner_done.get() {
                        mine += 1;
                        p.completed.set(p.completed.get() + 1);
                    }
                }
                mine
            })
        }));
    }
    let s2 = set.clone();
    Case::new(threads, move |e| {
        probe.result.set(Some((e.outcomes[0] == Outcome::Frozen, e.capped, e.scheduled_steps())));
        let d = s2.validate();
        if d.is_clean() {
            Ok(())
        } else {
            Err(format!("{:?}", d.violations))
        }
    })
    .root(&*set)
}

/// Runs [`suspension_case`] with the stopped thread going first and the others each
/// running until done, for at most `step_cap` scheduled steps.
pub fn progress_under_suspension(kind: StructureKind, mode: LockMode, victims: usize, per_victim: u64, step_cap: usize) -> (Suspension, Report) {
    let probe = Rc::new(SuspensionProbe::default());
    let mut make = || suspension_case(kind, mode, victims, per_victim, probe.clone());
    let ex = Explorer::default().with_step_cap(step_cap);
    let start = Instant::now();
    let (exec, verdict) = ex.execute(&mut make, &mut FirstRunnable);
    let mut rep = Report::new(Coverage::Scripted);
    rep.record(&exec, verdict);
    rep.elapsed = start.elapsed();
    let (frozen, capped, scheduled_steps) = probe.result.get().expect("suspension scenario produced no result");
    let s = Suspension {
        mode,
        completed: probe.completed.get(),
        frozen,
        capped,
        scheduled_steps,
    };
    (s, rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_thread_never_helps() {
        let m = storm(StructureKind::DList, LockKind::Try, 1, 8, 0.05, 1).unwrap();
        assert!(m.attempts() > 0);
        assert_eq!(m.max_chain(), 0);
        assert_eq!(m.helps, 0);
    }

    #[test]
    fn virtual_storm_helps_within_bound() {
        let (m, rep) = virtual_storm(StructureKind::DList, LockKind::Try, 3, 4, 3, 9, 50);
        assert!(rep.passed(), "{rep}");
        assert!(m.helps > 0, "{m:?}");
        assert_eq!(m.repeats, 0, "{m:?}");
        assert!(m.max_op_steps.unwrap() > 0);
    }

    #[test]
    fn lock_free_victims_progress() {
        let (s, rep) = progress_under_suspension(StructureKind::DList, LockMode::LockFree, 2, 50, 200_000);
        assert!(rep.passed(), "{rep}");
        assert!(s.frozen);
        assert_eq!(s.completed, 100);
        let (s, _) = progress_under_suspension(StructureKind::DList, LockMode::Blocking, 2, 50, 20_000);
        assert!(s.frozen && s.capped);
        assert_eq!(s.completed, 0);
    }
}
