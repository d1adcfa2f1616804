//! Thread identity and the per-thread table of heap states.
//!
//! Each thread keeps up to `MAX_SLOTS` states, one per heap it has
//! allocated from. Thread exit and slot eviction hand a state back through
//! its release function, which orphans the state's bins.

use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::bin::ThreadHeapState;

static NEXT_THREAD_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static THREAD_ID: Cell<u64> = const { Cell::new(0) };
    static LOCAL: RefCell<LocalHeaps> = const {
        RefCell::new(LocalHeaps { slots: [None; MAX_SLOTS], evict: 0 })
    };
}

/// Non-zero identity of the calling thread, never reused.
pub(crate) fn current_thread_id() -> u64 {
    THREAD_ID
        .try_with(|id| match id.get() {
            0 => {
                let fresh = NEXT_THREAD_ID.fetch_add(1, Ordering::Relaxed);
                id.set(fresh);
                fresh
            }
            v => v,
        })
        .unwrap_or_else(|_| NEXT_THREAD_ID.fetch_add(1, Ordering::Relaxed))
}

pub(crate) type ReleaseFn = unsafe fn(*const (), *mut ThreadHeapState);

pub(crate) const MAX_SLOTS: usize = 8;

#[derive(Clone, Copy)]
struct Slot {
    owner: *const (),
    state: *mut ThreadHeapState,
    release: ReleaseFn,
}

struct LocalHeaps {
    slots: [Option<Slot>; MAX_SLOTS],
    evict: usize,
}

impl Drop for LocalHeaps {
    fn drop(&mut self) {
        for slot in self.slots.iter_mut() {
            if let Some(s) = slot.take() {
                // SAFETY: the slot was registered with this release function.
                unsafe { (s.release)(s.owner, s.state) };
            }
        }
    }
}

pub(crate) enum Access<R, F> {
    Done(R),
    /// Registration failed.
    NoState,
    /// The table is torn down or already borrowed by this thread.
    Unavailable(F),
}

/// Runs `f` on this thread's state for `owner`, registering one through
/// `make` when absent.
pub(crate) fn with_state<R, F>(
    owner: *const (),
    make: &mut dyn FnMut() -> Option<(*mut ThreadHeapState, ReleaseFn)>,
    f: F,
) -> Access<R, F>
where
    F: FnOnce(&mut ThreadHeapState) -> R,
{
    let mut f = Some(f);
    let out = LOCAL.try_with(|cell| {
        let Ok(mut heaps) = cell.try_borrow_mut() else {
            return None;
        };
        let run = f.take().expect("closure taken once");
        if let Some(s) = heaps.slots.iter().flatten().find(|s| s.owner == owner) {
            // SAFETY: registered states stay valid until released.
            return Some(Access::Done(run(unsafe { &mut *s.state })));
        }
        let Some((state, release)) = make() else {
            return Some(Access::NoState);
        };
        let index = match heaps.slots.iter().position(Option::is_none) {
            Some(i) => i,
            None => {
                let i = heaps.evict;
                heaps.evict = (i + 1) % MAX_SLOTS;
                let old = heaps.slots[i].take().expect("full table");
                // SAFETY: the slot was registered with this release function.
                unsafe { (old.release)(old.owner, old.state) };
                i
            }
        };
        heaps.slots[index] = Some(Slot { owner, state, release });
        // SAFETY: just registered.
        Some(Access::Done(run(unsafe { &mut *state })))
    });
    match out {
        Ok(Some(a)) => a,
        _ => Access::Unavailable(f.take().expect("closure unused")),
    }
}

/// Runs `f` on an already registered state for `owner`.
pub(crate) fn with_existing<R>(owner: *const (), f: impl FnOnce(&mut ThreadHeapState) -> R) -> Option<R> {
    LOCAL
        .try_with(|cell| {
            let heaps = cell.try_borrow_mut().ok()?;
            let s = heaps.slots.iter().flatten().find(|s| s.owner == owner)?;
            // SAFETY: registered states stay valid until released; the
            // borrow of the table keeps reentrant callers out.
            Some(f(unsafe { &mut *s.state }))
        })
        .ok()
        .flatten()
}

/// Whether this thread holds a state for `owner`.
pub(crate) fn is_registered(owner: *const ()) -> bool {
    LOCAL
        .try_with(|cell| {
            cell.try_borrow()
                .map(|h| h.slots.iter().flatten().any(|s| s.owner == owner))
                .unwrap_or(false)
        })
        .unwrap_or(false)
}

/// Releases this thread's state for `owner`, if any.
pub(crate) fn release(owner: *const ()) -> bool {
    LOCAL
        .try_with(|cell| {
            let Ok(mut heaps) = cell.try_borrow_mut() else {
                return false;
            };
            let Some(slot) = heaps.slots.iter_mut().find(|s| s.is_some_and(|s| s.owner == owner)) else {
                return false;
            };
            let s = slot.take().expect("matched slot");
            // SAFETY: the slot was registered with this release function.
            unsafe { (s.release)(s.owner, s.state) };
            true
        })
        .unwrap_or(false)
}
