use crate::epoch;
use crate::locks::Lock;
use crate::runtime::{allocate, free_now, retire, Mutable, UpdateOnce};
use crate::word::Ptr;

use super::{acquire, check_key, note_retry, ConcurrentSet, Diagnostics, LockKind, StructureKind};

/// Internal nodes route (`k < key` goes left); leaves hold the entries. One type serves
/// both so child pointers stay uniform.
pub(crate) struct Node {
    left: Mutable<Ptr<Node>>,
    right: Mutable<Ptr<Node>>,
    removed: UpdateOnce<bool>,
    lck: Lock,
    key: u64,
    value: u64,
    leaf: bool,
}

impl Node {
    fn leaf(key: u64, value: u64) -> Ptr<Node> {
        allocate(|| Node {
            left: Mutable::new(Ptr::null()),
            right: Mutable::new(Ptr::null()),
            removed: UpdateOnce::new(false),
            lck: Lock::new(),
            key,
            value,
            leaf: true,
        })
    }

    fn internal(key: u64, left: Ptr<Node>, right: Ptr<Node>) -> Ptr<Node> {
        allocate(|| Node {
            left: Mutable::new(left),
            right: Mutable::new(right),
            removed: UpdateOnce::new(false),
            lck: Lock::new(),
            key,
            value: 0,
            leaf: false,
        })
    }

    #[inline]
    fn child(&self, k: u64) -> &Mutable<Ptr<Node>> {
        if k < self.key {
            &self.left
        } else {
            &self.right
        }
    }
}

#[inline]
fn r<'a>(p: Ptr<Node>) -> &'a Node {
    unsafe { p.as_ref() }
}

/// Leaf-oriented (external) unbalanced binary search tree.
///
/// The root is an internal sentinel with key `u64::MAX` whose left subtree holds every
/// real key plus a sentinel leaf with key `u64::MAX`, so every real leaf has both a parent
/// and a grandparent. Inserts lock the parent of the leaf they replace; removes lock the
/// grandparent and then the parent.
pub struct LeafTree {
    root: Ptr<Node>,
    lock: LockKind,
}

impl LeafTree {
    pub fn new(lock: LockKind) -> Self {
        let sentinel = Node::leaf(u64::MAX, 0);
        let root = Node::internal(u64::MAX, sentinel, Ptr::null());
        LeafTree { root, lock }
    }

    /// `(grandparent, parent, leaf)` on the search path of `k`.
    fn search(&self, k: u64) -> (Ptr<Node>, Ptr<Node>, Ptr<Node>) {
        let mut gp = Ptr::null();
        let mut p = self.root;
        let mut l = r(p).left.load();
        while !r(l).leaf {
            gp = p;
            p = l;
            l = r(l).child(k).load();
        }
        (gp, p, l)
    }

    fn insert_inner(&self, k: u64, v: u64) -> bool {
        loop {
            let (_, p, l) = self.search(k);
            let lk = r(l).key;
            if lk == k {
                return false;
            }
            if acquire(self.lock, &r(p).lck, move || {
                if r(p).removed.load() || r(p).child(k).load() != l {
                    return false;
                }
                let fresh = Node::leaf(k, v);
                let internal = if k < lk {
                    Node::internal(lk, fresh, l)
                } else {
                    Node::internal(k, l, fresh)
                };
                r(p).child(k).store(internal);
                true
            }) {
                return true;
            }
            note_retry();
        }
    }

    fn remove_inner(&self, k: u64) -> bool {
        let kind = self.lock;
        loop {
            let (gp, p, l) = self.search(k);
            if r(l).key != k {
                return false;
            }
            debug_assert!(!gp.is_null());
            if acquire(kind, &r(gp).lck, move || {
                acquire(kind, &r(p).lck, move || {
                    if r(gp).removed.load()
                        || r(p).removed.load()
                        || r(gp).child(k).load() != p
                        || r(p).child(k).load() != l
                    {
                        return false;
                    }
                    let sibling = if k < r(p).key { r(p).right.load() } else { r(p).left.load() };
                    r(gp).child(k).store(sibling);
                    r(p).removed.store(true);
                    unsafe {
                        retire(p);
                        retire(l);
                    }
                    true
                })
            }) {
                return true;
            }
            note_retry();
        }
    }

    fn check(&self, n: Ptr<Node>, lo: u64, hi: u64, depth: usize, d: &mut Diagnostics) {
        // Iterative to survive degenerate (list-shaped) trees.
        let mut stack = vec![(n, lo, hi, depth)];
        while let Some((n, lo, hi, depth)) = stack.pop() {
            if n.is_null() {
                d.violation(format!("missing child at depth {depth}"));
                continue;
            }
            let x = r(n);
            if x.lck.is_locked() {
                d.violation(format!("lock held on node with key {}", x.key));
            }
            if x.removed.peek() {
                d.violation(format!("removed node {} still linked", x.key));
            }
            if x.key < lo || x.key > hi || (!x.leaf && x.key == lo && depth > 1) {
                d.violation(format!("key {} outside its range [{lo}, {hi}]", x.key));
            }
            if x.leaf {
                if x.key != u64::MAX {
                    d.size += 1;
                }
                continue;
            }
            if x.key == 0 {
                d.violation("internal node with key 0 has an unreachable left subtree".into());
                continue;
            }
            stack.push((x.left.peek().1, lo, x.key - 1, depth + 1));
            stack.push((x.right.peek().1, x.key, hi, depth + 1));
        }
    }

    fn collect_nodes(&self) -> Vec<Ptr<Node>> {
        let mut out = Vec::new();
        let mut stack = vec![self.root];
        while let Some(n) = stack.pop() {
            if n.is_null() {
                continue;
            }
            out.push(n);
            if !r(n).leaf {
                stack.push(r(n).left.peek().1);
                stack.push(r(n).right.peek().1);
            }
        }
        out
    }
}

impl ConcurrentSet for LeafTree {
    fn kind(&self) -> StructureKind {
        StructureKind::LeafTree
    }

    fn lock_kind(&self) -> LockKind {
        self.lock
    }

    fn find(&self, k: u64) -> Option<u64> {
        epoch::pinned(|| {
            let (_, _, l) = self.search(k);
            (r(l).key == k).then(|| r(l).value)
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
        let root = r(self.root);
        if root.lck.is_locked() {
            d.violation("root lock held".into());
        }
        if !root.right.peek().1.is_null() {
            d.violation("root has a right child".into());
        }
        self.check(root.left.peek().1, 0, u64::MAX, 1, &mut d);
        d
    }

    fn keys(&self) -> Vec<u64> {
        let mut out: Vec<u64> = self
            .collect_nodes()
            .into_iter()
            .filter(|&n| r(n).leaf && r(n).key != u64::MAX)
            .map(|n| r(n).key)
            .collect();
        out.sort_unstable();
        out
    }
}

impl Drop for LeafTree {
    fn drop(&mut self) {
        for n in self.collect_nodes() {
            unsafe { free_now(n) };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routing_and_removal() {
        let t = LeafTree::new(LockKind::Try);
        for k in [50, 20, 80, 10, 30, 0, u64::MAX - 1] {
            assert!(t.insert(k, k + 1));
        }
        assert!(!t.insert(30, 0));
        assert_eq!(t.find(0), Some(1));
        assert_eq!(t.find(u64::MAX - 1), Some(u64::MAX));
        assert_eq!(t.find(31), None);
        for k in [20, 0, 80] {
            assert!(t.remove(k));
        }
        assert!(!t.remove(20));
        assert_eq!(t.keys(), vec![10, 30, 50, u64::MAX - 1]);
        let d = t.validate();
        assert!(d.is_clean(), "{:?}", d.violations);
        assert_eq!(d.size, 4);
    }

    #[test]
    fn emptied_tree_is_back_to_sentinels() {
        let t = LeafTree::new(LockKind::Strict);
        for k in 0..64 {
            t.insert(k * 7 % 64, k);
        }
        for k in 0..64 {
            assert!(t.remove(k));
        }
        assert_eq!(t.collect_nodes().len(), 2);
        assert!(t.validate().is_clean());
    }
}
