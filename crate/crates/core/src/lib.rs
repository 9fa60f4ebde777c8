//! Fine-grained locks that can run either blocking or lock-free.
//!
//! Critical sections are written as closures ("thunks") over [`Mutable`] cells and passed
//! to [`try_lock`] or [`strict_lock`]. In lock-free mode a thread that finds a lock taken
//! finishes the holder's critical section itself; the shared log in [`runtime`] makes that
//! safe by ensuring every run of a thunk has the same effect as one.
//!
//! ```
//! use std::sync::Arc;
//! use idemlock::{strict_lock, with_lock_mode, Lock, LockMode, Mutable};
//!
//! struct Account {
//!     lock: Lock,
//!     balance: Mutable<u64>,
//! }
//!
//! let a = Arc::new(Account { lock: Lock::new(), balance: Mutable::new(10) });
//! let a2 = a.clone();
//! let ran = with_lock_mode(LockMode::LockFree, || {
//!     strict_lock(&a.lock, move || {
//!         a2.balance.store(a2.balance.load() + 5);
//!         true
//!     })
//! });
//! assert!(ran);
//! assert_eq!(a.balance.peek().1, 15);
//! ```

pub mod epoch;
pub mod harness;
pub mod locks;
pub mod runtime;
pub mod step;
pub mod structures;
pub mod verify;
pub mod word;

pub use locks::{lock_mode, set_lock_mode, strict_lock, try_lock, unlock, with_lock_mode, Lock, LockMode};
pub use runtime::{allocate, commit_value, retire, Mutable, ProcessContext, UpdateOnce};
pub use word::{Loggable, Ptr};
