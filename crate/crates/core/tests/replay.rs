use idemlock::verify::suite::{record, replay, run_case, Suite, SuiteConfig};
use idemlock::verify::trace::TraceFile;

#[test]
fn saved_failure_replays_bit_for_bit() {
    let cfg = SuiteConfig::default();
    let c = run_case(Suite::Idempotence, "raw-counter/2", &cfg).unwrap();
    assert!(c.expect_fail && c.ok());
    let f = &c.report.failures[0];
    let t = TraceFile {
        suite: "idempotence".into(),
        case: "raw-counter/2".into(),
        seed: cfg.seed,
        schedule: f.schedule.clone(),
        steps: f.trace.clone(),
        message: f.message.clone(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.bin");
    t.save(&path).unwrap();
    let back = TraceFile::load(&path).unwrap();
    assert_eq!(back, t);
    for _ in 0..3 {
        let r = replay(&back).unwrap();
        assert!(r.identical, "differs at {:?}", r.first_difference);
        assert_eq!(r.verdict.unwrap_err(), t.message);
    }
}

#[test]
fn seeded_recordings_are_reproducible() {
    for (s, n) in [
        (Suite::Idempotence, "log-overflow/2"),
        (Suite::TryLock, "one-lock"),
        (Suite::Linearizable, "hashtable/try/9"),
        (Suite::Helping, "storm/dlist/strict/4"),
        (Suite::Helping, "suspension/lazylist/lockfree"),
    ] {
        let a = record(s, n, 21).unwrap();
        let b = record(s, n, 21).unwrap();
        assert_eq!(a, b, "{s} {n}");
        assert!(replay(&a).unwrap().identical, "{s} {n}");
    }
}

#[test]
fn tampered_trace_is_reported() {
    let mut t = record(Suite::TryLock, "frozen-owner", 2).unwrap();
    let last = t.steps.len() - 1;
    t.steps[last].new ^= 1;
    let r = replay(&t).unwrap();
    assert!(!r.identical);
    assert_eq!(r.first_difference, Some(last));

    let mut t = record(Suite::TryLock, "frozen-owner", 2).unwrap();
    t.case = "no-such-case".into();
    assert!(replay(&t).is_err());
}
