use std::cell::Cell;
use std::rc::Rc;

use idemlock::verify::trylock::{frozen_owner, nested, one_lock, run_suite, Variant};
use idemlock::verify::{Coverage, Explorer};

#[test]
fn frozen_owner_exhaustive() {
    let rep = Explorer::new(40, 1).explore(&mut frozen_owner);
    assert_eq!(rep.coverage, Coverage::Exhaustive);
    assert!(rep.passed(), "{rep}");
    assert!(rep.executions > 10_000);
}

#[test]
fn nested_locks_bounded() {
    let ex = Explorer::default();
    for both in [false, true] {
        let rep = ex.explore_bounded(&mut || nested(both), 2);
        assert!(rep.passed(), "nested({both}): {rep}");
        let rep = ex.random(&mut || nested(both), 11, 3000);
        assert!(rep.passed(), "nested({both}): {rep}");
    }
}

#[test]
fn one_lock_takes_the_done_flag_path() {
    let done = Rc::new(Cell::new(0));
    let d = done.clone();
    let rep = Explorer::default().explore_bounded(&mut || one_lock(Variant::Correct, d.clone()), 3);
    assert!(rep.passed(), "{rep}");
    assert!(done.get() > 0);
}

#[test]
fn controls_fail() {
    let sink = Rc::new(Cell::new(0));
    for v in [Variant::RawThunk, Variant::NoDoneCheck] {
        let s = sink.clone();
        let rep = Explorer::default().explore_bounded(&mut || one_lock(v, s.clone()), 3);
        assert!(rep.failed > 0, "{v:?}: {rep}");
        assert!(!rep.failures[0].schedule.is_empty());
    }
}

#[test]
fn suite_passes_with_small_sampling() {
    let r = run_suite(&Explorer::new(16, 2).with_random_runs(5000));
    assert!(r.passed());
    assert_eq!(r.scenarios.len(), 4);
}
