//! Concurrent ordered sets built from optimistic fine-grained locking: traverse without
//! locks, lock a small neighbourhood, validate it, modify, and retry on failure.

mod dlist;
mod hashtable;
mod lazylist;
mod leaftree;

use std::fmt;
use std::str::FromStr;

pub use dlist::DList;
pub use hashtable::HashTable;
pub use lazylist::LazyList;
pub use leaftree::LeafTree;

use crate::locks::{self, Lock};
use crate::runtime::context::{bump, current};

/// Largest key a set accepts; `u64::MAX` is taken by the tail sentinel.
pub const MAX_KEY: u64 = u64::MAX - 1;

/// How a structure acquires its locks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LockKind {
    /// Give up (and retry the operation) when a lock is taken.
    Try,
    /// Help and retry the lock itself until it is acquired.
    Strict,
}

impl LockKind {
    pub fn name(self) -> &'static str {
        match self {
            LockKind::Try => "try",
            LockKind::Strict => "strict",
        }
    }
}

impl FromStr for LockKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "try" => Ok(LockKind::Try),
            "strict" => Ok(LockKind::Strict),
            _ => Err(format!("unknown lock kind `{s}` (expected try or strict)")),
        }
    }
}

impl fmt::Display for LockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StructureKind {
    DList,
    LazyList,
    LeafTree,
    HashTable,
}

impl StructureKind {
    pub const ALL: [StructureKind; 4] = [
        StructureKind::DList,
        StructureKind::LazyList,
        StructureKind::LeafTree,
        StructureKind::HashTable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StructureKind::DList => "dlist",
            StructureKind::LazyList => "lazylist",
            StructureKind::LeafTree => "leaftree",
            StructureKind::HashTable => "hashtable",
        }
    }

    /// Whether operations take time linear in the size of the set.
    pub fn is_list(self) -> bool {
        matches!(self, StructureKind::DList | StructureKind::LazyList)
    }
}

impl FromStr for StructureKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        StructureKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown structure `{s}` (expected dlist, lazylist, leaftree or hashtable)"))
    }
}

impl fmt::Display for StructureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Result of a quiescent structural check.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Diagnostics {
    pub size: usize,
    pub violations: Vec<String>,
}

impl Diagnostics {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn violation(&mut self, msg: String) {
        if self.violations.len() < 32 {
            self.violations.push(msg);
        }
    }
}

/// A concurrent map from `u64` keys (at most [`MAX_KEY`]) to `u64` values with set-style
/// insert (no overwrite).
///
/// Operations may be called from any thread; each runs inside an epoch, entering one if
/// the caller is not already inside.
pub trait ConcurrentSet: Send + Sync {
    fn kind(&self) -> StructureKind;
    fn lock_kind(&self) -> LockKind;
    fn find(&self, key: u64) -> Option<u64>;
    /// Adds `key` unless present. Returns whether it was added.
    fn insert(&self, key: u64, value: u64) -> bool;
    /// Removes `key` if present. Returns whether it was removed.
    fn remove(&self, key: u64) -> bool;
    /// Walks the structure checking its invariants. Only meaningful while no operation
    /// is in flight.
    fn validate(&self) -> Diagnostics;
    /// Live keys in order (quiescent only).
    fn keys(&self) -> Vec<u64>;
}

/// Builds an empty structure. `buckets` only matters for the hash table (rounded up to a
/// power of two).
pub fn build(kind: StructureKind, lock: LockKind, buckets: usize) -> Box<dyn ConcurrentSet> {
    match kind {
        StructureKind::DList => Box::new(DList::new(lock)),
        StructureKind::LazyList => Box::new(LazyList::new(lock)),
        StructureKind::LeafTree => Box::new(LeafTree::new(lock)),
        StructureKind::HashTable => Box::new(HashTable::new(lock, buckets)),
    }
}

#[inline]
pub(crate) fn acquire<F>(kind: LockKind, lock: &Lock, f: F) -> bool
where
    F: Fn() -> bool + Send + Sync + 'static,
{
    match kind {
        LockKind::Try => locks::try_lock(lock, f),
        LockKind::Strict => locks::strict_lock(lock, f),
    }
}

#[inline]
pub(crate) fn note_retry() {
    bump(&current().counters().retries);
}

#[inline]
pub(crate) fn check_key(key: u64) {
    assert!(key <= MAX_KEY, "key {key} is reserved for sentinels");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::locks::{with_lock_mode, LockMode};
    use crate::runtime::ProcessContext;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    #[derive(Clone, Debug)]
    enum Op {
        Insert(u64, u64),
        Remove(u64),
        Find(u64),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u64..40, any::<u32>()).prop_map(|(k, v)| Op::Insert(k, v as u64)),
            (0u64..40).prop_map(Op::Remove),
            (0u64..40).prop_map(Op::Find),
        ]
    }

    fn replay(kind: StructureKind, lock: LockKind, mode: LockMode, ops: &[Op]) -> (Vec<u64>, Vec<String>) {
        let ctx = ProcessContext::new();
        ctx.scope(|| {
            with_lock_mode(mode, || {
                let s = build(kind, lock, 8);
                let mut model = BTreeMap::new();
                let mut outcomes = Vec::new();
                for o in ops {
                    let (got, want) = match *o {
                        Op::Insert(k, v) => {
                            let want = !model.contains_key(&k);
                            if want {
                                model.insert(k, v);
                            }
                            (format!("{:?}", s.insert(k, v)), format!("{want:?}"))
                        }
                        Op::Remove(k) => (
                            format!("{:?}", s.remove(k)),
                            format!("{:?}", model.remove(&k).is_some()),
                        ),
                        Op::Find(k) => (format!("{:?}", s.find(k)), format!("{:?}", model.get(&k).copied())),
                    };
                    assert_eq!(got, want, "{kind} {o:?}");
                    outcomes.push(got);
                }
                let d = s.validate();
                assert!(d.is_clean(), "{:?}", d.violations);
                assert_eq!(d.size, model.len());
                assert_eq!(s.keys(), model.keys().copied().collect::<Vec<_>>());
                (s.keys(), outcomes)
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn sequential_behaviour_matches_btreemap(ops in proptest::collection::vec(op(), 0..120)) {
            for kind in StructureKind::ALL {
                for lock in [LockKind::Try, LockKind::Strict] {
                    let lf = replay(kind, lock, LockMode::LockFree, &ops);
                    let bl = replay(kind, lock, LockMode::Blocking, &ops);
                    prop_assert_eq!(lf, bl);
                }
            }
        }
    }

    #[test]
    fn names_round_trip() {
        for k in StructureKind::ALL {
            assert_eq!(k.name().parse::<StructureKind>().unwrap(), k);
        }
        assert!("skiplist".parse::<StructureKind>().is_err());
        assert_eq!("strict".parse::<LockKind>().unwrap(), LockKind::Strict);
    }

    #[test]
    #[should_panic(expected = "reserved")]
    fn sentinel_key_rejected() {
        DList::new(LockKind::Try).insert(u64::MAX, 0);
    }
}
