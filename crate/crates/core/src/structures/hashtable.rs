use crate::epoch;
use crate::runtime::free_now;
use crate::word::Ptr;

use super::lazylist::{self, Node};
use super::{check_key, ConcurrentSet, Diagnostics, LockKind, StructureKind};

/// Separate-chaining hash table with a fixed number of buckets, each a lazy list.
pub struct HashTable {
    heads: Box<[Ptr<Node>]>,
    tail: Ptr<Node>,
    mask: u64,
    lock: LockKind,
}

#[inline]
fn hash(k: u64) -> u64 {
    let mut z = k.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl HashTable {
    /// `buckets` is rounded up to a power of two (at least 1).
    pub fn new(lock: LockKind, buckets: usize) -> Self {
        let n = buckets.max(1).next_power_of_two();
        let tail = lazylist::new_tail();
        let heads = (0..n).map(|_| Node::alloc(0, 0, tail)).collect();
        HashTable {
            heads,
            tail,
            mask: n as u64 - 1,
            lock,
        }
    }

    pub fn buckets(&self) -> usize {
        self.heads.len()
    }

    #[inline]
    fn bucket_of(&self, k: u64) -> usize {
        (hash(k) & self.mask) as usize
    }

    #[inline]
    fn head(&self, k: u64) -> Ptr<Node> {
        self.heads[self.bucket_of(k)]
    }
}

impl ConcurrentSet for HashTable {
    fn kind(&self) -> StructureKind {
        StructureKind::HashTable
    }

    fn lock_kind(&self) -> LockKind {
        self.lock
    }

    fn find(&self, k: u64) -> Option<u64> {
        epoch::pinned(|| lazylist::find_in(self.head(k), k))
    }

    fn insert(&self, k: u64, v: u64) -> bool {
        check_key(k);
        epoch::pinned(|| lazylist::insert_in(self.lock, self.head(k), k, v))
    }

    fn remove(&self, k: u64) -> bool {
        epoch::pinned(|| lazylist::remove_in(self.lock, self.head(k), k))
    }

    fn validate(&self) -> Diagnostics {
        let mut d = Diagnostics::default();
        for (i, &h) in self.heads.iter().enumerate() {
            lazylist::walk_in(h, self.tail, &mut d, |k, d| {
                if self.bucket_of(k) != i {
                    d.violation(format!("key {k} found in bucket {i}"));
                }
            });
        }
        d
    }

    fn keys(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for &h in self.heads.iter() {
            lazylist::keys_in(h, self.tail, &mut out);
        }
        out.sort_unstable();
        out
    }
}

impl Drop for HashTable {
    fn drop(&mut self) {
        for &h in self.heads.iter() {
            lazylist::free_chain(h, self.tail);
        }
        unsafe { free_now(self.tail) };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_count_rounds_up() {
        assert_eq!(HashTable::new(LockKind::Try, 0).buckets(), 1);
        assert_eq!(HashTable::new(LockKind::Try, 100).buckets(), 128);
    }

    #[test]
    fn keys_land_in_their_buckets() {
        let t = HashTable::new(LockKind::Try, 4);
        for k in 0..200 {
            assert!(t.insert(k, k));
        }
        for k in (0..200).step_by(3) {
            assert!(t.remove(k));
        }
        let d = t.validate();
        assert!(d.is_clean(), "{:?}", d.violations);
        assert_eq!(d.size, 200 - 67);
        assert_eq!(t.find(1), Some(1));
        assert_eq!(t.find(3), None);
    }
}
