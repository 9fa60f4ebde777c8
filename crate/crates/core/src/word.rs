use std::fmt;
use std::marker::PhantomData;

/// The reserved log sentinel. No value logged through the runtime may encode to it.
pub const EMPTY_WORD: u64 = u64::MAX;

/// A value that fits in one machine word and can therefore be logged and stored in a
/// [`Mutable`](crate::runtime::Mutable).
///
/// Encodings must be injective and must never produce [`EMPTY_WORD`].
pub trait Loggable: Copy + Eq {
    fn into_word(self) -> u64;
    fn from_word(word: u64) -> Self;
}

impl Loggable for u64 {
    #[inline]
    fn into_word(self) -> u64 {
        assert_ne!(self, EMPTY_WORD, "the all-ones word is reserved as the log sentinel");
        self
    }

    #[inline]
    fn from_word(word: u64) -> Self {
        word
    }
}

impl Loggable for usize {
    #[inline]
    fn into_word(self) -> u64 {
        (self as u64).into_word()
    }

    #[inline]
    fn from_word(word: u64) -> Self {
        word as usize
    }
}

impl Loggable for u32 {
    #[inline]
    fn into_word(self) -> u64 {
        self as u64
    }

    #[inline]
    fn from_word(word: u64) -> Self {
        word as u32
    }
}

impl Loggable for bool {
    #[inline]
    fn into_word(self) -> u64 {
        self as u64
    }

    #[inline]
    fn from_word(word: u64) -> Self {
        word != 0
    }
}

/// A copyable, thread-shareable raw pointer.
///
/// Thunks capture their free variables by value and may be run by any thread, so node
/// handles are passed around as `Ptr`s. Dereferencing is only valid while the pointee is
/// protected by the epoch collector.
pub struct Ptr<T> {
    raw: *mut T,
    _marker: PhantomData<*mut T>,
}

unsafe impl<T> Send for Ptr<T> {}
unsafe impl<T> Sync for Ptr<T> {}

impl<T> Ptr<T> {
    #[inline]
    pub const fn null() -> Self {
        Self::new(std::ptr::null_mut())
    }

    #[inline]
    pub const fn new(raw: *mut T) -> Self {
        Ptr {
            raw,
            _marker: PhantomData,
        }
    }

    #[inline]
    pub fn is_null(self) -> bool {
        self.raw.is_null()
    }

    #[inline]
    pub fn as_ptr(self) -> *mut T {
        self.raw
    }

    /// # Safety
    ///
    /// The pointer must be non-null and the pointee must not have been reclaimed.
    #[inline]
    pub unsafe fn as_ref<'a>(self) -> &'a T {
        &*self.raw
    }
}

impl<T> Clone for Ptr<T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Ptr<T> {}

impl<T> PartialEq for Ptr<T> {
    fn eq(&self, other: &Self) -> bool {
        self.raw == other.raw
    }
}

impl<T> Eq for Ptr<T> {}

impl<T> fmt::Debug for Ptr<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Ptr({:p})", self.raw)
    }
}

impl<T> Loggable for Ptr<T> {
    #[inline]
    fn into_word(self) -> u64 {
        self.raw as usize as u64
    }

    #[inline]
    fn from_word(word: u64) -> Self {
        Ptr::new(word as usize as *mut T)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[should_panic(expected = "reserved")]
    fn sentinel_is_rejected() {
        let _ = EMPTY_WORD.into_word();
    }

    #[test]
    fn pointers_round_trip() {
        let mut x = 3u32;
        let p = Ptr::new(&mut x as *mut u32);
        assert_eq!(Ptr::<u32>::from_word(p.into_word()), p);
        assert!(Ptr::<u32>::null().is_null());
    }
}
