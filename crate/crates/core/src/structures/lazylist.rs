use crate::epoch;
use crate::locks::Lock;
use crate::runtime::{allocate, free_now, retire, Mutable, UpdateOnce};
use crate::word::Ptr;

use super::{acquire, check_key, note_retry, ConcurrentSet, Diagnostics, LockKind, StructureKind};

pub(crate) struct Node {
    next: Mutable<Ptr<Node>>,
    removed: UpdateOnce<bool>,
    key: u64,
    value: u64,
    lck: Lock,
}

impl Node {
    pub(crate) fn alloc(key: u64, value: u64, next: Ptr<Node>) -> Ptr<Node> {
        allocate(|| Node {
            next: Mutable::new(next),
            removed: UpdateOnce::new(false),
            key,
            value,
            lck: Lock::new(),
        })
    }
}

#[inline]
fn r<'a>(p: Ptr<Node>) -> &'a Node {
    unsafe { p.as_ref() }
}

/// `(cur, nxt)` with `cur.key < k <= nxt.key`, where `cur` may be the head.
fn find_location(head: Ptr<Node>, k: u64) -> (Ptr<Node>, Ptr<Node>) {
    let mut cur = head;
    let mut nxt = r(head).next.load();
    while k > r(nxt).key {
        cur = nxt;
        nxt = r(nxt).next.load();
    }
    (cur, nxt)
}

pub(crate) fn find_in(head: Ptr<Node>, k: u64) -> Option<u64> {
    let mut nxt = r(head).next.load();
    while k > r(nxt).key {
        nxt = r(nxt).next.load();
    }
    (r(nxt).key == k).then(|| r(nxt).value)
}

pub(crate) fn insert_in(kind: LockKind, head: Ptr<Node>, k: u64, v: u64) -> bool {
    loop {
        let (cur, nxt) = find_location(head, k);
        if r(nxt).key == k {
            return false;
        }
        if acquire(kind, &r(cur).lck, move || {
            if r(cur).removed.load() || r(cur).next.load() != nxt {
                return false;
            }
            let new_link = Node::alloc(k, v, nxt);
            r(cur).next.store(new_link);
            true
        }) {
            return true;
        }
        note_retry();
    }
}

pub(crate) fn remove_in(kind: LockKind, head: Ptr<Node>, k: u64) -> bool {
    loop {
        let (prev, lnk) = find_location(head, k);
        if r(lnk).key != k {
            return false;
        }
        if acquire(kind, &r(prev).lck, move || {
            acquire(kind, &r(lnk).lck, move || {
                if r(prev).removed.load() || r(prev).next.load() != lnk {
                    return false;
                }
                let next = r(lnk).next.load();
                r(lnk).removed.store(true);
                r(prev).next.store(next);
                unsafe { retire(lnk) };
                true
            })
        }) {
            return true;
        }
        note_retry();
    }
}

/// Walks one chain from `head` to `tail`, calling `each` on every live key.
pub(crate) fn walk_in(head: Ptr<Node>, tail: Ptr<Node>, d: &mut Diagnostics, mut each: impl FnMut(u64, &mut Diagnostics)) {
    let mut last = None;
    let mut cur = head;
    loop {
        let c = r(cur);
        if c.lck.is_locked() {
            d.violation(format!("lock held on node with key {}", c.key));
        }
        if c.removed.peek() {
            d.violation(format!("removed node {} still linked", c.key));
        }
        let next = c.next.peek().1;
        if next.is_null() || next == tail {
            if next != tail {
                d.violation("chain does not reach the tail".into());
            }
            return;
        }
        let k = r(next).key;
        if last.is_some_and(|l| l >= k) {
            d.violation(format!("keys out of order at {k}"));
        }
        last = Some(k);
        d.size += 1;
        each(k, d);
        cur = next;
    }
}

pub(crate) fn keys_in(head: Ptr<Node>, tail: Ptr<Node>, out: &mut Vec<u64>) {
    let mut cur = r(head).next.peek().1;
    while cur != tail && !cur.is_null() {
        out.push(r(cur).key);
        cur = r(cur).next.peek().1;
    }
}

/// Frees every node from `head` up to (not including) `tail`.
pub(crate) fn free_chain(head: Ptr<Node>, tail: Ptr<Node>) {
    let mut cur = head;
    while cur != tail && !cur.is_null() {
        let next = r(cur).next.peek().1;
        unsafe { free_now(cur) };
        cur = next;
    }
}

pub(crate) fn new_tail() -> Ptr<Node> {
    Node::alloc(u64::MAX, 0, Ptr::null())
}

/// Sorted singly-linked list with per-node locks and lock-free finds.
pub struct LazyList {
    head: Ptr<Node>,
    tail: Ptr<Node>,
    lock: LockKind,
}

impl LazyList {
    pub fn new(lock: LockKind) -> Self {
        let tail = new_tail();
        let head = Node::alloc(0, 0, tail);
        LazyList { head, tail, lock }
    }
}

impl ConcurrentSet for LazyList {
    fn kind(&self) -> StructureKind {
        StructureKind::LazyList
    }

    fn lock_kind(&self) -> LockKind {
        self.lock
    }

    fn find(&self, k: u64) -> Option<u64> {
        epoch::pinned(|| find_in(self.head, k))
    }

    fn insert(&self, k: u64, v: u64) -> bool {
        check_key(k);
        epoch::pinned(|| insert_in(self.lock, self.head, k, v))
    }

    fn remove(&self, k: u64) -> bool {
        epoch::pinned(|| remove_in(self.lock, self.head, k))
    }

    fn validate(&self) -> Diagnostics {
        let mut d = Diagnostics::default();
        walk_in(self.head, self.tail, &mut d, |_, _| {});
        d
    }

    fn keys(&self) -> Vec<u64> {
        let mut out = Vec::new();
        keys_in(self.head, self.tail, &mut out);
        out
    }
}

impl Drop for LazyList {
    fn drop(&mut self) {
        free_chain(self.head, self.tail);
        unsafe { free_now(self.tail) };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_find_remove() {
        let l = LazyList::new(LockKind::Try);
        for k in [4, 2, 8, 6] {
            assert!(l.insert(k, k + 100));
        }
        assert!(!l.insert(4, 0));
        assert_eq!(l.find(8), Some(108));
        assert_eq!(l.find(5), None);
        assert!(l.remove(2));
        assert!(!l.remove(2));
        assert_eq!(l.keys(), vec![4, 6, 8]);
        let d = l.validate();
        assert!(d.is_clean() && d.size == 3, "{d:?}");
    }
}
