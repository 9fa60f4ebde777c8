use std::sync::Arc;
use std::thread;

use idemlock::epoch;
use idemlock::structures::{build, LockKind, StructureKind};
use idemlock::{with_lock_mode, LockMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn storm(kind: StructureKind, lock: LockKind, mode: LockMode, threads: usize, ops: usize, range: u64) {
    let s: Arc<dyn idemlock::structures::ConcurrentSet> = Arc::from(build(kind, lock, 64));
    let handles: Vec<_> = (0..threads)
        .map(|t| {
            let s = s.clone();
            thread::spawn(move || {
                with_lock_mode(mode, || {
                    let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
                    let mut net = 0i64;
                    for _ in 0..ops {
                        let k = rng.random_range(0..range);
                        let _g = epoch::enter();
                        match rng.random_range(0..4) {
                            0 => net += s.insert(k, k) as i64,
                            1 => net -= s.remove(k) as i64,
                            _ => {
                                if let Some(v) = s.find(k) {
                                    assert_eq!(v, k);
                                }
                            }
                        }
                    }
                    net
                })
            })
        })
        .collect();
    let net: i64 = handles.into_iter().map(|h| h.join().unwrap()).sum();
    let d = s.validate();
    assert!(d.is_clean(), "{kind} {lock} {mode}: {:?}", d.violations);
    assert_eq!(d.size as i64, net, "{kind} {lock} {mode}");
}

#[test]
fn mixed_storm_all_structures() {
    for kind in StructureKind::ALL {
        for lock in [LockKind::Try, LockKind::Strict] {
            for mode in [LockMode::LockFree, LockMode::Blocking] {
                storm(kind, lock, mode, 4, 20_000, 32);
            }
        }
    }
}
