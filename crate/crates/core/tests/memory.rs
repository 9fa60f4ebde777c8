use std::sync::Mutex;

use idemlock::epoch;
use idemlock::harness::{run_workload, WorkloadSpec};
use idemlock::runtime::{drain_descriptor_pool, stats, Stats};
use idemlock::structures::{build, LockKind, StructureKind};
use idemlock::verify::helping::virtual_storm;
use idemlock::verify::linearize::{record_small, small_script};
use idemlock::{with_lock_mode, LockMode};

// Counters are process-wide, so audits in this binary take turns.
static SERIAL: Mutex<()> = Mutex::new(());

fn quiesce() -> Stats {
    drain_descriptor_pool();
    for _ in 0..16 {
        if epoch::collect_all() == 0 {
            break;
        }
    }
    assert_eq!(epoch::collect_all(), 0, "retirements still pending at quiescence");
    stats()
}

fn assert_balanced(before: &Stats, after: &Stats, what: &str) {
    let d = after.since(before);
    assert_eq!(d.objects_allocated, d.objects_freed, "{what}: objects {d:?}");
    assert_eq!(d.blocks_allocated, d.blocks_freed, "{what}: log blocks {d:?}");
    assert_eq!(d.descriptors_allocated, d.descriptors_freed, "{what}: descriptors {d:?}");
}

#[test]
fn real_thread_workloads_free_everything() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    for kind in StructureKind::ALL {
        for mode in [LockMode::LockFree, LockMode::Blocking] {
            let before = quiesce();
            let r = run_workload(&WorkloadSpec {
                structure: kind,
                range: 256,
                update_percent: 100,
                alpha: 0.99,
                threads: 4,
                seconds: 0.1,
                mode,
                lock: LockKind::Try,
                seed: 3,
                buckets: Some(8),
            })
            .unwrap();
            assert!(r.ops > 0);
            let after = quiesce();
            assert_balanced(&before, &after, &format!("{kind} {mode}"));
            assert!(after.since(&before).retires > 0);
        }
    }
}

#[test]
fn scheduled_runs_free_everything() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let before = quiesce();
    for kind in StructureKind::ALL {
        virtual_storm(kind, LockKind::Strict, 3, 6, 4, 11, 40);
        for seed in 0..40 {
            let (_, verdict) = record_small(kind, LockKind::Try, &small_script(seed, 3, 3, 3), &[1, 3], seed);
            verdict.unwrap();
        }
    }
    let after = quiesce();
    assert_balanced(&before, &after, "scheduled runs");
}

#[test]
fn dropping_a_structure_frees_its_nodes() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let before = quiesce();
    for kind in StructureKind::ALL {
        let s = with_lock_mode(LockMode::LockFree, || {
            let s = build(kind, LockKind::Strict, 16);
            for k in 1..=200 {
                s.insert(k, k);
            }
            for k in (1..=200).step_by(3) {
                s.remove(k);
            }
            s
        });
        assert_eq!(s.keys().len(), 200 - 67);
        drop(s);
    }
    let after = quiesce();
    assert_balanced(&before, &after, "drop");
}
