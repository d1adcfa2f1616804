//! Process allocator adapter.
//!
//! ```no_run
//! #[global_allocator]
//! static GLOBAL: oobheap::OobHeap = oobheap::OobHeap::new();
//! ```

use std::alloc::{GlobalAlloc, Layout};
use std::ptr;
use std::sync::atomic::{AtomicBool, Ordering};

use crate::backing::PlatformBacking;
use crate::config::{page_size, ViolationPolicy, FBIN_MAX_SIZE, GRANULE, MMAP_THRESHOLD};
use crate::external::CacheCaps;
use crate::heap::{Anchor, HeapStats, Shared, DEFAULT_RESERVE};

static SHARED: Shared<PlatformBacking> =
    Shared::new(PlatformBacking::new(), DEFAULT_RESERVE, CacheCaps::DEFAULT, true);
static POLICY_READ: AtomicBool = AtomicBool::new(false);

/// The process-wide instance. All `OobHeap` values share it.
///
/// Alignments up to 16 are native. Up to 512 they are met by the power of
/// two fixed classes, and up to a page by a dedicated mapping. Larger
/// alignments are refused.
#[derive(Debug, Default, Clone, Copy)]
pub struct OobHeap;

impl OobHeap {
    pub const fn new() -> OobHeap {
        OobHeap
    }

    /// Counters of the process instance.
    pub fn stats(&self) -> HeapStats {
        shared().stats()
    }

    pub fn set_policy(&self, policy: ViolationPolicy) {
        POLICY_READ.store(true, Ordering::Relaxed);
        SHARED.set_policy(policy);
    }

    pub fn policy(&self) -> ViolationPolicy {
        shared().policy()
    }

    /// Applies pending remote frees to the calling thread's bins.
    pub fn drain_thread(&self) -> usize {
        shared().drain_thread()
    }
}

fn shared() -> &'static Shared<PlatformBacking> {
    if !POLICY_READ.load(Ordering::Relaxed) && !POLICY_READ.swap(true, Ordering::Relaxed) {
        SHARED.set_policy(ViolationPolicy::from_env());
    }
    &SHARED
}

/// Request size that yields a block aligned to `align`, or `None`.
fn aligned_request(size: usize, align: usize) -> Option<usize> {
    if align <= GRANULE {
        Some(size)
    } else if size <= FBIN_MAX_SIZE && align <= FBIN_MAX_SIZE {
        Some(size.max(align))
    } else if align <= page_size() {
        Some(size.max(MMAP_THRESHOLD))
    } else {
        None
    }
}

unsafe impl GlobalAlloc for OobHeap {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let Some(req) = aligned_request(layout.size(), layout.align()) else {
            return ptr::null_mut();
        };
        shared()
            .allocate(req, Anchor::Static)
            .map_or(ptr::null_mut(), |(a, _)| a as *mut u8)
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let Some(req) = aligned_request(layout.size(), layout.align()) else {
            return ptr::null_mut();
        };
        shared()
            .zero_allocate(1, req, Anchor::Static)
            .map_or(ptr::null_mut(), |a| a as *mut u8)
    }

    unsafe fn dealloc(&self, ptr: *mut u8, _layout: Layout) {
        shared().deallocate(ptr as usize);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        if layout.align() <= GRANULE {
            return shared()
                .reallocate(ptr as usize, new_size, Anchor::Static)
                .map_or(ptr::null_mut(), |a| a as *mut u8);
        }
        let new_layout = Layout::from_size_align_unchecked(new_size, layout.align());
        let fresh = self.alloc(new_layout);
        if !fresh.is_null() {
            ptr::copy_nonoverlapping(ptr, fresh, layout.size().min(new_size));
            self.dealloc(ptr, layout);
        }
        fresh
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alignment_requests() {
        assert_eq!(aligned_request(24, 8), Some(24));
        assert_eq!(aligned_request(24, 64), Some(64));
        assert_eq!(aligned_request(600, 64), Some(MMAP_THRESHOLD));
        assert_eq!(aligned_request(8, 4096), Some(MMAP_THRESHOLD));
        assert_eq!(aligned_request(8, 8192), None);
    }
}
