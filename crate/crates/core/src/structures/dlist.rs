use crate::epoch;
use crate::locks::Lock;
use crate::runtime::{allocate, free_now, retire, Mutable, UpdateOnce};
use crate::word::Ptr;

use super::{acquire, check_key, note_retry, ConcurrentSet, Diagnostics, LockKind, StructureKind};

pub(crate) struct Link {
    next: Mutable<Ptr<Link>>,
    prev: Mutable<Ptr<Link>>,
    removed: UpdateOnce<bool>,
    key: u64,
    value: u64,
    lck: Lock,
}

impl Link {
    fn new(key: u64, value: u64, next: Ptr<Link>, prev: Ptr<Link>) -> Self {
        Link {
            next: Mutable::new(next),
            prev: Mutable::new(prev),
            removed: UpdateOnce::new(false),
            key,
            value,
            lck: Lock::new(),
        }
    }
}

#[inline]
fn r<'a>(p: Ptr<Link>) -> &'a Link {
    unsafe { p.as_ref() }
}

/// Sorted doubly-linked list between head and tail sentinels.
pub struct DList {
    head: Ptr<Link>,
    tail: Ptr<Link>,
    lock: LockKind,
}

impl DList {
    pub fn new(lock: LockKind) -> Self {
        let tail = allocate(|| Link::new(u64::MAX, 0, Ptr::null(), Ptr::null()));
        let head = allocate(|| Link::new(0, 0, tail, Ptr::null()));
        r(tail).prev.init(head);
        DList { head, tail, lock }
    }

    fn find_link(&self, k: u64) -> Ptr<Link> {
        let mut lnk = r(self.head).next.load();
        while k > r(lnk).key {
            lnk = r(lnk).next.load();
        }
        lnk
    }

    fn insert_inner(&self, k: u64, v: u64) -> bool {
        loop {
            let next = self.find_link(k);
            if r(next).key == k {
                return false;
            }
            let prev = r(next).prev.load();
            if (prev == self.head || r(prev).key < k)
                && acquire(self.lock, &r(prev).lck, move || {
                    if r(prev).removed.load() || r(prev).next.load() != next {
                        return false;
                    }
                    let newl = allocate(|| Link::new(k, v, next, prev));
                    r(prev).next.store(newl);
                    r(next).prev.store(newl);
                    true
                })
            {
                return true;
            }
            note_retry();
        }
    }

    fn remove_inner(&self, k: u64) -> bool {
        let kind = self.lock;
        loop {
            let lnk = self.find_link(k);
            if r(lnk).key != k {
                return false;
            }
            let prev = r(lnk).prev.load();
            if acquire(kind, &r(prev).lck, move || {
                acquire(kind, &r(lnk).lck, move || {
                    if r(prev).removed.load() || r(prev).next.load() != lnk {
                        return false;
                    }
                    let next = r(lnk).next.load();
                    r(lnk).removed.store(true);
                    r(prev).next.store(next);
                    r(next).prev.store(prev);
                    unsafe { retire(lnk) };
                    true
                })
            }) {
                return true;
            }
            note_retry();
        }
    }
}

impl ConcurrentSet for DList {
    fn kind(&self) -> StructureKind {
        StructureKind::DList
    }

    fn lock_kind(&self) -> LockKind {
        self.lock
    }

    fn find(&self, k: u64) -> Option<u64> {
        epoch::pinned(|| {
            let lnk = self.find_link(k);
            (r(lnk).key == k).then(|| r(lnk).value)
        })
    }

    fn insert(&self, k: u64, v: u64) -> bool {
        check_key(k);
        epoch::pinned(|| self.insert_inner(k, v))
    }

    fn remove(&self, k: u64) -> bool {
        epoch::pinned(|| self.remove_inner(k))
    }

    fn validate(&self) -> Diagnostics {
        let mut d = Diagnostics::default();
        let mut prev = self.head;
        let mut cur = r(self.head).next.peek().1;
        let mut last_key = None;
        while !cur.is_null() {
            let c = r(cur);
            if r(prev).lck.is_locked() {
                d.violation(format!("lock held on node with key {}", r(prev).key));
            }
            if c.prev.peek().1 != prev {
                d.violation(format!("node {}: prev does not point back", c.key));
            }
            if c.removed.peek() {
                d.violation(format!("removed node {} still linked", c.key));
            }
            if cur == self.tail {
                break;
            }
            if last_key.is_some_and(|l| l >= c.key) {
                d.violation(format!("keys out of order at {}", c.key));
            }
            last_key = Some(c.key);
            d.size += 1;
            prev = cur;
            cur = c.next.peek().1;
        }
        if cur != self.tail {
            d.violation("list does not reach the tail".into());
        }
        d
    }

    fn keys(&self) -> Vec<u64> {
        let mut out = Vec::new();
        let mut cur = r(self.head).next.peek().1;
        while cur != self.tail && !cur.is_null() {
            out.push(r(cur).key);
            cur = r(cur).next.peek().1;
        }
        out
    }
}

impl Drop for DList {
    fn drop(&mut self) {
        let mut cur = self.head;
        while !cur.is_null() {
            let next = if cur == self.tail { Ptr::null() } else { r(cur).next.peek().1 };
            unsafe { free_now(cur) };
            cur = next;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn links_are_symmetric_after_inserts() {
        let l = DList::new(LockKind::Try);
        assert_eq!(l.find(3), None);
        for k in [5, 1, 9, 3, 7] {
            assert!(l.insert(k, k * 10));
        }
        assert!(!l.insert(5, 0));
        assert_eq!(l.find(9), Some(90));
        assert!(l.remove(5));
        assert!(!l.remove(5));
        assert_eq!(l.keys(), vec![1, 3, 7, 9]);
        let d = l.validate();
        assert!(d.is_clean(), "{:?}", d.violations);
        assert_eq!(d.size, 4);
    }

    #[test]
    fn key_zero_is_an_ordinary_key() {
        let l = DList::new(LockKind::Strict);
        assert!(l.insert(0, 1));
        assert_eq!(l.find(0), Some(1));
        assert!(l.remove(0));
        assert!(l.validate().is_clean());
    }
}
