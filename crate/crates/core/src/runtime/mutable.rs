use std::fmt;
use std::marker::PhantomData;
use std::sync::atomic::{AtomicU64, Ordering::SeqCst};

use portable_atomic::AtomicU128;

use crate::step::{self, Space};
use crate::word::Loggable;

use super::context::current;
use super::log::commit_in;

#[inline]
fn pack(tag: u64, value: u64) -> u128 {
    ((tag as u128) << 64) | value as u128
}

#[inline]
fn tag_of(pair: u128) -> u64 {
    (pair >> 64) as u64
}

#[inline]
fn value_of(pair: u128) -> u64 {
    pair as u64
}

/// A shared cell with an ABA tag, supporting idempotent load, store and compare-and-modify.
///
/// The value and a monotone tag share one 128-bit word, so every successful change bumps
/// the tag and a (tag, value) pair never repeats. Inside a thunk, loads log the pair they
/// observed and later runs reuse it; stores and CAMs only take effect if the cell still
/// holds the logged pair, so a repeated run cannot apply a write twice.
#[repr(align(16))]
pub struct Mutable<V> {
    cell: AtomicU128,
    _marker: PhantomData<V>,
}

unsafe impl<V: Send> Send for Mutable<V> {}
unsafe impl<V: Send> Sync for Mutable<V> {}

impl<V: Loggable> Mutable<V> {
    pub fn new(v: V) -> Self {
        Mutable {
            cell: AtomicU128::new(pack(0, v.into_word())),
            _marker: PhantomData,
        }
    }

    /// Idempotent load.
    #[inline]
    pub fn load(&self) -> V {
        self.load_tagged().1
    }

    /// Idempotent load returning the tag alongside the value.
    #[inline]
    pub fn load_tagged(&self) -> (u64, V) {
        let ctx = current();
        let seen = step::read128(&self.cell, Space::Cell);
        let pair = if ctx.log.get().is_null() {
            seen
        } else {
            commit_in(ctx, seen).0
        };
        (tag_of(pair), V::from_word(value_of(pair)))
    }

    /// Idempotent store.
    ///
    /// Stores to one cell must not race with each other outside lock protection.
    pub fn store(&self, v: V) {
        let new = v.into_word();
        let ctx = current();
        let seen = step::read128(&self.cell, Space::Cell);
        if ctx.log.get().is_null() {
            let mut cur = seen;
            while let Err(w) = step::cas128(&self.cell, cur, pack(tag_of(cur) + 1, new), Space::Cell) {
                cur = w;
            }
            return;
        }
        let logged = commit_in(ctx, seen).0;
        if seen == logged {
            let _ = step::cas128(&self.cell, logged, pack(tag_of(logged) + 1, new), Space::Cell);
        }
    }

    /// Idempotent compare-and-modify: replaces the value with `new` if it equals `old`.
    /// Deliberately reports nothing, since a success flag could differ between runs.
    pub fn cam(&self, old: V, new: V) {
        self.cam_tagged(None, old, new)
    }

    /// Like [`cam`](Self::cam), but when `tag` is given the logged tag must match as well.
    pub(crate) fn cam_tagged(&self, tag: Option<u64>, old: V, new: V) {
        let (old, new) = (old.into_word(), new.into_word());
        let ctx = current();
        let seen = step::read128(&self.cell, Space::Cell);
        let logged = if ctx.log.get().is_null() {
            seen
        } else {
            commit_in(ctx, seen).0
        };
        if value_of(logged) != old || tag.is_some_and(|t| t != tag_of(logged)) {
            return;
        }
        if seen == logged {
            let _ = step::cas128(&self.cell, logged, pack(tag_of(logged) + 1, new), Space::Cell);
        }
    }

    /// Unlogged, uninstrumented read of the current (tag, value) pair. Meant for
    /// single-threaded inspection such as invariant walks.
    pub fn peek(&self) -> (u64, V) {
        let p = self.cell.load(SeqCst);
        (tag_of(p), V::from_word(value_of(p)))
    }

    /// Uninstrumented read of the raw pair for validation: one hooked read, no logging.
    pub(crate) fn read_pair(&self) -> (u64, u64) {
        let p = step::read128(&self.cell, Space::Cell);
        (tag_of(p), value_of(p))
    }

    /// Overwrites the cell without logging. Only for objects not yet visible to others.
    pub fn init(&self, v: V) {
        let p = self.cell.load(SeqCst);
        self.cell.store(pack(tag_of(p) + 1, v.into_word()), SeqCst);
    }

    pub(crate) fn addr(&self) -> usize {
        &self.cell as *const AtomicU128 as usize
    }
}

impl<V: Loggable + fmt::Debug> fmt::Debug for Mutable<V> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (t, v) = self.peek();
        write!(f, "Mutable({v:?} @{t})")
    }
}

/// A cell written at most once per logical change (for example a `removed` flag), where
/// a store cannot be repeated harmfully and is therefore a plain write. Loads are logged.
pub struct UpdateOnce<V> {
    cell: AtomicU64,
    _marker: PhantomData<V>,
}

unsafe impl<V: Send> Send for UpdateOnce<V> {}
unsafe impl<V: Send> Sync for UpdateOnce<V> {}

impl<V: Loggable> UpdateOnce<V> {
    pub fn new(v: V) -> Self {
        UpdateOnce {
            cell: AtomicU64::new(v.into_word()),
            _marker: PhantomData,
        }
    }

    #[inline]
    pub fn load(&self) -> V {
        let ctx = current();
        let seen = step::read64(&self.cell, Space::Flag);
        if ctx.log.get().is_null() {
            return V::from_word(seen);
        }
        V::from_word(commit_in(ctx, seen as u128).0 as u64)
    }

    #[inline]
    pub fn store(&self, v: V) {
        step::write64(&self.cell, v.into_word(), Space::Flag);
    }

    pub fn peek(&self) -> V {
        V::from_word(self.cell.load(SeqCst))
    }

    pub(crate) fn reset(&mut self, v: V) {
        *self.cell.get_mut() = v.into_word();
    }
}

impl<V: Loggable + fmt::Debug> fmt::Debug for UpdateOnce<V> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "UpdateOnce({:?})", self.peek())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{ProcessContext, SharedThunk};
    use std::sync::Arc;

    #[test]
    fn outside_thunk_ops_are_direct() {
        let m = Mutable::new(5u64);
        assert_eq!(m.load(), 5);
        m.store(9);
        assert_eq!(m.peek(), (1, 9));
        m.cam(4, 1);
        assert_eq!(m.peek(), (1, 9));
        m.cam(9, 1);
        assert_eq!(m.peek(), (2, 1));
    }

    #[test]
    fn repeated_runs_store_once() {
        let ctx = ProcessContext::new();
        ctx.scope(|| {
            let m = Arc::new(Mutable::new(5u64));
            let m2 = m.clone();
            let t = SharedThunk::new(move || {
                let v = m2.load();
                m2.store(v + 1);
                true
            });
            t.run();
            t.run();
            t.run();
            assert_eq!(m.peek(), (1, 6));
        });
    }

    #[test]
    fn lagging_store_does_not_undo_a_later_write() {
        // A run that logged (0,5) must not store over a cell that someone else moved
        // 5 -> 7 -> 5 in the meantime.
        let ctx = ProcessContext::new();
        ctx.scope(|| {
            let m = Arc::new(Mutable::new(5u64));
            let m2 = m.clone();
            let t = SharedThunk::new(move || {
                m2.store(9);
                true
            });
            t.run();
            m.store(7);
            m.store(5);
            t.run();
            assert_eq!(m.peek(), (3, 5));
        });
    }

    #[test]
    fn cam_miss_consumes_a_log_entry() {
        let ctx = ProcessContext::new();
        ctx.scope(|| {
            let m = Arc::new(Mutable::new(5u64));
            let m2 = m.clone();
            let t = SharedThunk::new(move || {
                m2.cam(4, 9);
                true
            });
            t.run();
            assert_eq!(m.peek(), (0, 5));
            assert_eq!(t.committed_log().len(), 1);
        });
    }

    #[test]
    fn update_once_store_is_plain() {
        let f = UpdateOnce::new(false);
        f.store(true);
        f.store(true);
        assert!(f.load());
    }
}
