//! Benchmark workloads over the concurrent sets: zipfian keys, prefill, timed mixed
//! operations on worker threads, and config-driven sweeps written as CSV.

mod sweep;
mod zipf;

use std::sync::atomic::{AtomicBool, Ordering::Relaxed};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::epoch;
use crate::locks::{with_lock_mode, LockMode};
use crate::runtime::{local_stats, Stats, CHAIN_BUCKETS};
use crate::structures::{build, ConcurrentSet, LockKind, StructureKind, MAX_KEY};

pub use sweep::{parse_config, run_sweep, write_csv, CsvRow, SweepConfig, CSV_HEADER};
pub use zipf::{ZipfSampler, TABLE_LIMIT};

/// Environment variable that overrides the lock mode of every run.
pub const MODE_ENV: &str = "IDEMLOCK_MODE";

/// Oversubscription limit, in multiples of the core count.
pub const MAX_OVERSUBSCRIPTION: usize = 16;

/// Hash table buckets when a workload does not say.
pub const DEFAULT_BUCKETS: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid workload: {0}")]
    InvalidSpec(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{structure} failed its invariant check after the run: {violations:?}")]
    Invariant { structure: StructureKind, violations: Vec<String> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Hardware threads available to this process.
pub fn cores() -> usize {
    thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Lock mode named by [`MODE_ENV`], if set.
pub fn mode_override() -> Result<Option<LockMode>, HarnessError> {
    match std::env::var(MODE_ENV) {
        Ok(v) if !v.trim().is_empty() => v.trim().parse().map(Some).map_err(HarnessError::InvalidSpec),
        _ => Ok(None),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorkloadSpec {
    pub structure: StructureKind,
    pub range: u64,
    /// Percentage of operations that are updates, split evenly between inserts and removes.
    pub update_percent: u32,
    pub alpha: f64,
    pub threads: usize,
    pub seconds: f64,
    pub mode: LockMode,
    pub lock: LockKind,
    pub seed: u64,
    /// Hash table bucket count; defaults to the key range.
    pub buckets: Option<usize>,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            structure: StructureKind::LeafTree,
            range: 100_000,
            update_percent: 50,
            alpha: 0.0,
            threads: 1,
            seconds: 1.0,
            mode: LockMode::LockFree,
            lock: LockKind::Try,
            seed: 42,
            buckets: None,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidSpec(m));
        if self.range == 0 || self.range > MAX_KEY {
            return bad(format!("range must be in 1..={MAX_KEY}, got {}", self.range));
        }
        if self.update_percent > 100 {
            return bad(format!("update percent must be at most 100, got {}", self.update_percent));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be a finite number >= 0, got {}", self.alpha));
        }
        let max = MAX_OVERSUBSCRIPTION * cores();
        if self.threads == 0 || self.threads > max {
            return bad(format!("threads must be in 1..={max} ({MAX_OVERSUBSCRIPTION}x cores), got {}", self.threads));
        }
        if !(self.seconds >= 0.0 && self.seconds.is_finite()) {
            return bad(format!("seconds must be a finite number >= 0, got {}", self.seconds));
        }
        if self.buckets == Some(0) {
            return bad("buckets must be positive".into());
        }
        Ok(())
    }

    pub fn buckets(&self) -> usize {
        self.buckets.unwrap_or(DEFAULT_BUCKETS)
    }
}

/// Spreads keys over the whole `u64` domain. Injective on `1..`, never yields a sentinel.
pub fn sparsify(key: u64) -> u64 {
    let h = splitmix64(key);
    if h > MAX_KEY {
        splitmix64(0)
    } else {
        h
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Random generator for worker `thread` of a run seeded with `seed`.
pub fn worker_rng(seed: u64, thread: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((thread as u64).wrapping_add(1));
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Find,
    Insert,
    Remove,
}

/// Per-thread stream of (operation, sparsified key) pairs.
pub struct KeyStream<'a> {
    zipf: &'a ZipfSampler,
    rng: ChaCha8Rng,
    update_percent: u32,
}

impl<'a> KeyStream<'a> {
    pub fn new(zipf: &'a ZipfSampler, update_percent: u32, seed: u64, thread: usize) -> Self {
        KeyStream {
            zipf,
            rng: worker_rng(seed, thread),
            update_percent,
        }
    }

    pub fn next_op(&mut self) -> (OpKind, u64) {
        let u = self.rng.random_range(0..200);
        let op = if u < self.update_percent {
            OpKind::Insert
        } else if u < 2 * self.update_percent {
            OpKind::Remove
        } else {
            OpKind::Find
        };
        (op, sparsify(self.zipf.sample(&mut self.rng)))
    }
}

/// The keys [`prefill`] inserts: `⌊r/2⌋` distinct keys of `1..=r`, sparsified.
pub fn prefill_keys(range: u64, seed: u64) -> Vec<u64> {
    let mut rng = worker_rng(seed, usize::MAX - 1);
    let n = (range / 2) as usize;
    if range <= usize::MAX as u64 {
        rand::seq::index::sample(&mut rng, range as usize, n)
            .into_iter()
            .map(|i| sparsify(i as u64 + 1))
            .collect()
    } else {
        let mut seen = std::collections::HashSet::with_capacity(n);
        while seen.len() < n {
            seen.insert(rng.random_range(1..=range));
        }
        seen.into_iter().map(sparsify).collect()
    }
}

/// Inserts half the key range. Lists get keys in descending order so each insert is at
/// the front; other structures get them in random order.
pub fn prefill(set: &dyn ConcurrentSet, range: u64, seed: u64) {
    let mut keys = prefill_keys(range, seed);
    if set.kind().is_list() {
        keys.sort_unstable_by(|a, b| b.cmp(a));
    }
    epoch::pinned(|| {
        for k in keys {
            set.insert(k, k);
        }
    });
}

/// Allocates `n` node-sized blocks and frees them in random order, so later allocations
/// do not come out of the allocator in address order.
pub fn shuffle_allocator(n: usize, seed: u64) {
    let mut blocks: Vec<Box<[u64; 8]>> = (0..n).map(|i| Box::new([i as u64; 8])).collect();
    blocks.shuffle(&mut worker_rng(seed, usize::MAX));
    drop(blocks);
}

/// Outcome of one timed run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub spec: WorkloadSpec,
    pub ops: u64,
    pub finds: u64,
    pub found: u64,
    pub inserts: u64,
    pub inserted: u64,
    pub removes: u64,
    pub removed: u64,
    pub retries: u64,
    pub helps: u64,
    pub chain_repeats: u64,
    /// Top-level lock attempts by longest helping chain.
    pub chains: [u64; CHAIN_BUCKETS],
    pub elapsed: Duration,
    pub size_before: usize,
    pub size_after: usize,
    pub cores: usize,
}

impl RunResult {
    pub fn throughput(&self) -> f64 {
        let s = self.elapsed.as_secs_f64();
        if s > 0.0 {
            self.ops as f64 / s
        } else {
            0.0
        }
    }

    pub fn max_chain(&self) -> usize {
        self.chains.iter().rposition(|&n| n > 0).unwrap_or(0)
    }
}

#[derive(Default)]
struct WorkerCounts {
    ops: u64,
    finds: u64,
    found: u64,
    inserts: u64,
    inserted: u64,
    removes: u64,
    removed: u64,
    stats: Stats,
}

fn worker(set: &dyn ConcurrentSet, spec: &WorkloadSpec, zipf: &ZipfSampler, id: usize, start: &Barrier, stop: &AtomicBool) -> WorkerCounts {
    with_lock_mode(spec.mode, || {
        let mut keys = KeyStream::new(zipf, spec.update_percent, spec.seed, id);
        let mut c = WorkerCounts::default();
        let before = local_stats();
        start.wait();
        while !stop.load(Relaxed) {
            let (op, k) = keys.next_op();
            match op {
                OpKind::Find => {
                    c.finds += 1;
                    c.found += set.find(k).is_some() as u64;
                }
                OpKind::Insert => {
                    c.inserts += 1;
                    c.inserted += set.insert(k, k) as u64;
                }
                OpKind::Remove => {
                    c.removes += 1;
                    c.removed += set.remove(k) as u64;
                }
            }
            c.ops += 1;
        }
        c.stats = local_stats().since(&before);
        c
    })
}

/// Builds and prefills the structure, runs `spec.threads` workers for `spec.seconds`, and
/// checks the structure's invariants afterwards.
pub fn run_workload(spec: &WorkloadSpec) -> Result<RunResult, HarnessError> {
    spec.validate()?;
    let zipf = ZipfSampler::new(spec.range, spec.alpha)?;
    shuffle_allocator((spec.range / 2).min(1 << 20) as usize, spec.seed);
    let set: Arc<dyn ConcurrentSet> = with_lock_mode(spec.mode, || {
        let s: Arc<dyn ConcurrentSet> = build(spec.structure, spec.lock, spec.buckets()).into();
        prefill(&*s, spec.range, spec.seed);
        s
    });
    let size_before = set.validate().size;

    let start = Barrier::new(spec.threads + 1);
    let stop = AtomicBool::new(spec.seconds == 0.0);
    let (counts, elapsed) = thread::scope(|sc| {
        let handles: Vec<_> = (0..spec.threads)
            .map(|id| {
                let (set, zipf, start, stop) = (&*set, &zipf, &start, &stop);
                sc.spawn(move || worker(set, spec, zipf, id, start, stop))
            })
            .collect();
        start.wait();
        let t0 = Instant::now();
        if spec.seconds > 0.0 {
            thread::sleep(Duration::from_secs_f64(spec.seconds));
            stop.store(true, Relaxed);
        }
        let counts: Vec<WorkerCounts> = handles.into_iter().map(|h| h.join().expect("worker panicked")).collect();
        (counts, if spec.seconds > 0.0 { t0.elapsed() } else { Duration::ZERO })
    });

    let diag = set.validate();
    if !diag.is_clean() {
        return Err(HarnessError::Invariant {
            structure: spec.structure,
            violations: diag.violations,
        });
    }
    let mut r = RunResult {
        spec: spec.clone(),
        ops: 0,
        finds: 0,
        found: 0,
        inserts: 0,
        inserted: 0,
        removes: 0,
        removed: 0,
        retries: 0,
        helps: 0,
        chain_repeats: 0,
        chains: [0; CHAIN_BUCKETS],
        elapsed,
        size_before,
        size_after: diag.size,
        cores: cores(),
    };
    for c in counts {
        r.ops += c.ops;
        r.finds += c.finds;
        r.found += c.found;
        r.inserts += c.inserts;
        r.inserted += c.inserted;
        r.removes += c.removes;
        r.removed += c.removed;
        r.retries += c.stats.retries;
        r.helps += c.stats.helps;
        r.chain_repeats += c.stats.chain_repeats;
        for (a, b) in r.chains.iter_mut().zip(c.stats.chains) {
            *a += b;
        }
    }
    drop(set);
    epoch::collect();
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn prefill_inserts_half_the_range() {
        for (r, want) in [(10, 5), (1, 0), (7, 3)] {
            for kind in StructureKind::ALL {
                let s = build(kind, LockKind::Try, 8);
                prefill(&*s, r, 9);
                assert_eq!(s.validate().size, want, "{kind} r={r}");
            }
        }
    }

    #[test]
    fn prefill_is_deterministic() {
        let mut a = prefill_keys(1000, 5);
        let mut b = prefill_keys(1000, 5);
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        let mut c = prefill_keys(1000, 6);
        c.sort_unstable();
        assert_ne!(a, c);
    }

    #[test]
    fn key_streams_are_deterministic_per_thread() {
        let z = ZipfSampler::new(1000, 0.99).unwrap();
        let take = |t| {
            let mut s = KeyStream::new(&z, 50, 7, t);
            (0..100).map(|_| s.next_op()).collect::<Vec<_>>()
        };
        assert_eq!(take(0), take(0));
        assert_ne!(take(0), take(1));
    }

    #[test]
    fn zero_seconds_gives_an_empty_result() {
        let spec = WorkloadSpec {
            structure: StructureKind::HashTable,
            range: 100,
            threads: 2,
            seconds: 0.0,
            ..Default::default()
        };
        let r = run_workload(&spec).unwrap();
        assert_eq!(r.ops, 0);
        assert_eq!(r.throughput(), 0.0);
        assert_eq!(r.size_before, 50);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let base = WorkloadSpec::default();
        for bad in [
            WorkloadSpec { alpha: -1.0, ..base.clone() },
            WorkloadSpec { update_percent: 101, ..base.clone() },
            WorkloadSpec { threads: 0, ..base.clone() },
            WorkloadSpec { threads: MAX_OVERSUBSCRIPTION * cores() + 1, ..base.clone() },
            WorkloadSpec { range: 0, ..base.clone() },
        ] {
            assert!(matches!(run_workload(&bad), Err(HarnessError::InvalidSpec(_))), "{bad:?}");
        }
    }

    #[test]
    fn counts_add_up() {
        let spec = WorkloadSpec {
            structure: StructureKind::LeafTree,
            range: 1000,
            threads: 2,
            seconds: 0.05,
            ..Default::default()
        };
        let r = run_workload(&spec).unwrap();
        assert!(r.ops > 0);
        assert_eq!(r.finds + r.inserts + r.removes, r.ops);
        assert_eq!(r.size_before + r.inserted as usize - r.removed as usize, r.size_after);
    }

    proptest! {
        #[test]
        fn sparsify_is_injective_and_avoids_sentinels(a in 1u64..u64::MAX, b in 1u64..u64::MAX) {
            prop_assert!(sparsify(a) <= MAX_KEY);
            prop_assert_eq!(a == b, sparsify(a) == sparsify(b));
        }

        #[test]
        fn update_share_is_split_evenly(p in 0u32..=100, seed in any::<u64>()) {
            let z = ZipfSampler::new(10, 0.0).unwrap();
            let mut s = KeyStream::new(&z, p, seed, 0);
            let n = 4000;
            let (mut ins, mut rem) = (0f64, 0f64);
            for _ in 0..n {
                match s.next_op().0 {
                    OpKind::Insert => ins += 1.0,
                    OpKind::Remove => rem += 1.0,
                    OpKind::Find => {}
                }
            }
            let q = p as f64 / 200.0;
            let sd = (n as f64 * q * (1.0 - q)).sqrt();
            prop_assert!((ins - n as f64 * q).abs() <= 5.0 * sd + 1e-9);
            prop_assert!((rem - n as f64 * q).abs() <= 5.0 * sd + 1e-9);
        }
    }
}
