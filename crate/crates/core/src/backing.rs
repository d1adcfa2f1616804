//! Page-granular memory sources: the contiguous heap range, metadata pages
//! and mappings for external allocations.
//!
//! Two backends implement [`Backing`]: [`PlatformBacking`] talks to the
//! kernel through `mmap`, and [`ArenaBacking`] simulates it on top of the
//! process allocator while remembering every range it has unmapped, so tests
//! can observe use of released memory as a fault.

use std::alloc::Layout;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use parking_lot::Mutex;
use thiserror::Error;

use crate::config::{page_size, MIN_BIN_SPAN};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackingError {
    #[error("heap range already reserved")]
    AlreadyReserved,
    #[error("invalid length {0}")]
    InvalidLength(usize),
    #[error("heap exhausted: watermark {watermark} + {requested} exceeds reserve {reserved}")]
    HeapExhausted {
        watermark: usize,
        requested: usize,
        reserved: usize,
    },
    #[error("mapping failed (errno {0})")]
    MapFailed(i32),
    #[error("mismatched release of {addr:#x}+{len}")]
    Mismatch { addr: usize, len: usize },
}

/// Zero-filled, page-aligned pages outside the heap range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageGrant {
    pub addr: usize,
    pub len: usize,
    pub zeroed: bool,
}

/// Source of the memory an allocator instance manages.
///
/// All addresses are plain integers; callers own the memory they are handed
/// until they give it back.
pub trait Backing: Send + Sync {
    fn page_size(&self) -> usize;

    /// Reserves the single contiguous heap range. A second call fails.
    fn reserve(&self, len: usize) -> Result<usize, BackingError>;

    /// Makes `[addr, addr+len)` of the reserved range readable and writable.
    fn commit(&self, addr: usize, len: usize) -> Result<(), BackingError>;

    fn grant_pages(&self, count: usize) -> Result<PageGrant, BackingError>;

    /// Returns pages obtained from [`Backing::grant_pages`]. Only used on teardown.
    fn release_pages(&self, addr: usize, count: usize) -> Result<(), BackingError>;

    fn map_external(&self, len: usize) -> Result<usize, BackingError>;

    fn unmap_external(&self, addr: usize, len: usize) -> Result<(), BackingError>;

    /// Resizes a mapping, preserving `min(old_len, new_len)` bytes. The
    /// original mapping stays intact on failure.
    fn remap_external(&self, addr: usize, old_len: usize, new_len: usize)
        -> Result<usize, BackingError>;

    /// Releases the heap reservation. Only used on teardown.
    fn release_heap(&self, base: usize, len: usize);
}

/// The heap range plus its committed watermark.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeapRange {
    pub base: usize,
    pub reserved_len: usize,
    pub committed_watermark: usize,
}

impl HeapRange {
    pub fn reserve<B: Backing + ?Sized>(backing: &B, reserve_len: usize) -> Result<HeapRange, BackingError> {
        if reserve_len == 0 || !reserve_len.is_multiple_of(MIN_BIN_SPAN) {
            return Err(BackingError::InvalidLength(reserve_len));
        }
        let base = backing.reserve(reserve_len)?;
        debug_assert_eq!(base % backing.page_size(), 0);
        Ok(HeapRange {
            base,
            reserved_len: reserve_len,
            committed_watermark: 0,
        })
    }

    /// Carves the next `len` bytes off the reserve and returns their address.
    pub fn commit_span<B: Backing + ?Sized>(&mut self, backing: &B, len: usize) -> Result<usize, BackingError> {
        if len == 0 || !len.is_multiple_of(MIN_BIN_SPAN) {
            return Err(BackingError::InvalidLength(len));
        }
        let end = self.committed_watermark.checked_add(len);
        if end.is_none_or(|end| end > self.reserved_len) {
            return Err(BackingError::HeapExhausted {
                watermark: self.committed_watermark,
                requested: len,
                reserved: self.reserved_len,
            });
        }
        let addr = self.base + self.committed_watermark;
        backing.commit(addr, len)?;
        self.committed_watermark += len;
        Ok(addr)
    }

    pub fn contains(&self, addr: usize) -> bool {
        addr >= self.base && addr - self.base < self.committed_watermark
    }
}

fn errno() -> i32 {
    std::io::Error::last_os_error().raw_os_error().unwrap_or(0)
}

/// Anonymous private mappings from the kernel.
#[derive(Debug, Default)]
pub struct PlatformBacking {
    reserved: AtomicBool,
}

impl PlatformBacking {
    pub const fn new() -> PlatformBacking {
        PlatformBacking {
            reserved: AtomicBool::new(false),
        }
    }

    fn mmap(len: usize, prot: libc::c_int, extra: libc::c_int) -> Result<usize, BackingError> {
        // SAFETY: anonymous mapping at a kernel-chosen address.
        let p = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                len,
                prot,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | extra,
                -1,
                0,
            )
        };
        if p == libc::MAP_FAILED {
            Err(BackingError::MapFailed(errno()))
        } else {
            Ok(p as usize)
        }
    }

    fn munmap(addr: usize, len: usize) -> Result<(), BackingError> {
        // SAFETY: callers pass ranges they obtained from mmap.
        if unsafe { libc::munmap(addr as *mut libc::c_void, len) } != 0 {
            Err(BackingError::Mismatch { addr, len })
        } else {
            Ok(())
        }
    }
}

impl Backing for PlatformBacking {
    fn page_size(&self) -> usize {
        page_size()
    }

    fn reserve(&self, len: usize) -> Result<usize, BackingError> {
        if len == 0 {
            return Err(BackingError::InvalidLength(len));
        }
        if self.reserved.swap(true, Ordering::AcqRel) {
            return Err(BackingError::AlreadyReserved);
        }
        Self::mmap(len, libc::PROT_NONE, libc::MAP_NORESERVE).inspect_err(|_| {
            self.reserved.store(false, Ordering::Release);
        })
    }

    fn commit(&self, addr: usize, len: usize) -> Result<(), BackingError> {
        // SAFETY: the range lies inside our PROT_NONE reservation.
        let rc = unsafe {
            libc::mprotect(
                addr as *mut libc::c_void,
                len,
                libc::PROT_READ | libc::PROT_WRITE,
            )
        };
        if rc != 0 {
            Err(BackingError::MapFailed(errno()))
        } else {
            Ok(())
        }
    }

    fn grant_pages(&self, count: usize) -> Result<PageGrant, BackingError> {
        if count == 0 {
            return Err(BackingError::InvalidLength(0));
        }
        let len = count * page_size();
        let addr = Self::mmap(len, libc::PROT_READ | libc::PROT_WRITE, 0)?;
        Ok(PageGrant {
            addr,
            len,
            zeroed: true,
        })
    }

    fn release_pages(&self, addr: usize, count: usize) -> Result<(), BackingError> {
        Self::munmap(addr, count * page_size())
    }

    fn map_external(&self, len: usize) -> Result<usize, BackingError> {
        if len == 0 || !len.is_multiple_of(page_size()) {
            return Err(BackingError::InvalidLength(len));
        }
        Self::mmap(len, libc::PROT_READ | libc::PROT_WRITE, 0)
    }

    fn unmap_external(&self, addr: usize, len: usize) -> Result<(), BackingError> {
        Self::munmap(addr, len)
    }

    fn remap_external(&self, addr: usize, old_len: usize, new_len: usize) -> Result<usize, BackingError> {
        if new_len == 0 || !new_len.is_multiple_of(page_size()) {
            return Err(BackingError::InvalidLength(new_len));
        }
        // SAFETY: addr/old_len describe a live mapping we created.
        let p = unsafe {
            libc::mremap(
                addr as *mut libc::c_void,
                old_len,
                new_len,
                libc::MREMAP_MAYMOVE,
            )
        };
        if p == libc::MAP_FAILED {
            Err(BackingError::MapFailed(errno()))
        } else {
            Ok(p as usize)
        }
    }

    fn release_heap(&self, base: usize, len: usize) {
        let _ = Self::munmap(base, len);
    }
}

/// A live read of released memory in the arena backend.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("fault: access to released range {start:#x}..{end:#x}")]
pub struct Fault {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Default)]
struct ArenaState {
    /// Live allocations: (addr, len).
    live: Vec<(usize, usize)>,
    /// Ranges handed back by unmap or release; reads inside them fault.
    poisoned: Vec<(usize, usize)>,
    heap: Option<(usize, usize)>,
}

/// In-process stand-in for the kernel mapper, used by deterministic tests.
///
/// Memory comes from the process allocator with page alignment. Every range
/// that gets unmapped is remembered; [`ArenaBacking::check_access`] reports
/// any access overlapping one as a [`Fault`].
#[derive(Debug)]
pub struct ArenaBacking {
    page: usize,
    reserve_cap: usize,
    state: Mutex<ArenaState>,
    mapped_bytes: AtomicUsize,
}

impl ArenaBacking {
    /// `reserve_cap` bounds what [`Backing::reserve`] will accept.
    pub fn new(reserve_cap: usize) -> ArenaBacking {
        ArenaBacking {
            page: 4096,
            reserve_cap,
            state: Mutex::new(ArenaState::default()),
            mapped_bytes: AtomicUsize::new(0),
        }
    }

    fn layout(&self, len: usize) -> Layout {
        Layout::from_size_align(len, self.page).expect("page layout")
    }

    fn alloc(&self, len: usize) -> Result<usize, BackingError> {
        if len == 0 || !len.is_multiple_of(self.page) {
            return Err(BackingError::InvalidLength(len));
        }
        // SAFETY: non-zero size layout.
        let p = unsafe { std::alloc::alloc_zeroed(self.layout(len)) };
        if p.is_null() {
            return Err(BackingError::MapFailed(libc::ENOMEM));
        }
        let addr = p as usize;
        let mut st = self.state.lock();
        st.poisoned.retain(|&(a, l)| a + l <= addr || addr + len <= a);
        st.live.push((addr, len));
        self.mapped_bytes.fetch_add(len, Ordering::Relaxed);
        Ok(addr)
    }

    fn free(&self, addr: usize, len: usize) -> Result<(), BackingError> {
        let mut st = self.state.lock();
        let pos = st
            .live
            .iter()
            .position(|&entry| entry == (addr, len))
            .ok_or(BackingError::Mismatch { addr, len })?;
        st.live.swap_remove(pos);
        st.poisoned.push((addr, len));
        drop(st);
        self.mapped_bytes.fetch_sub(len, Ordering::Relaxed);
        // SAFETY: (addr, len) was produced by `alloc` with the same layout.
        unsafe { std::alloc::dealloc(addr as *mut u8, self.layout(len)) };
        Ok(())
    }

    /// Checks that `[addr, addr+len)` lies in memory this arena still owns.
    pub fn check_access(&self, addr: usize, len: usize) -> Result<(), Fault> {
        let st = self.state.lock();
        let end = addr + len.max(1);
        let inside_live = st.live.iter().any(|&(a, l)| addr >= a && end <= a + l);
        if inside_live {
            return Ok(());
        }
        match st.poisoned.iter().find(|&&(a, l)| addr < a + l && a < end) {
            Some(&(a, l)) => Err(Fault { start: a, end: a + l }),
            None => Err(Fault { start: addr, end }),
        }
    }

    /// Bytes currently handed out (heap reserve included).
    pub fn mapped_bytes(&self) -> usize {
        self.mapped_bytes.load(Ordering::Relaxed)
    }
}

impl Drop for ArenaBacking {
    fn drop(&mut self) {
        let live = std::mem::take(&mut self.state.get_mut().live);
        for (addr, len) in live {
            // SAFETY: every live entry came from `alloc`.
            unsafe { std::alloc::dealloc(addr as *mut u8, self.layout(len)) };
        }
    }
}

impl Backing for ArenaBacking {
    fn page_size(&self) -> usize {
        self.page
    }

    fn reserve(&self, len: usize) -> Result<usize, BackingError> {
        if len == 0 || len > self.reserve_cap {
            return Err(BackingError::InvalidLength(len));
        }
        if self.state.lock().heap.is_some() {
            return Err(BackingError::AlreadyReserved);
        }
        let base = self.alloc(len)?;
        self.state.lock().heap = Some((base, len));
        Ok(base)
    }

    fn commit(&self, addr: usize, len: usize) -> Result<(), BackingError> {
        match self.state.lock().heap {
            Some((base, reserved)) if addr >= base && addr + len <= base + reserved => Ok(()),
            _ => Err(BackingError::Mismatch { addr, len }),
        }
    }

    fn grant_pages(&self, count: usize) -> Result<PageGrant, BackingError> {
        let len = count * self.page;
        let addr = self.alloc(len)?;
        Ok(PageGrant {
            addr,
            len,
            zeroed: true,
        })
    }

    fn release_pages(&self, addr: usize, count: usize) -> Result<(), BackingError> {
        self.free(addr, count * self.page)
    }

    fn map_external(&self, len: usize) -> Result<usize, BackingError> {
        self.alloc(len)
    }

    fn unmap_external(&self, addr: usize, len: usize) -> Result<(), BackingError> {
        self.free(addr, len)
    }

    fn remap_external(&self, addr: usize, old_len: usize, new_len: usize) -> Result<usize, BackingError> {
        if !self.state.lock().live.contains(&(addr, old_len)) {
            return Err(BackingError::Mismatch { addr, len: old_len });
        }
        let new = self.alloc(new_len)?;
        // SAFETY: both ranges are live, distinct allocations of at least
        // min(old_len, new_len) bytes.
        unsafe {
            std::ptr::copy_nonoverlapping(addr as *const u8, new as *mut u8, old_len.min(new_len))
        };
        self.free(addr, old_len)?;
        Ok(new)
    }

    fn release_heap(&self, base: usize, len: usize) {
        let _ = self.free(base, len);
        self.state.lock().heap = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GIB: usize = 1 << 30;

    #[test]
    fn platform_reserve_and_commit() {
        let backing = PlatformBacking::new();
        let mut heap = HeapRange::reserve(&backing, 64 * GIB).unwrap();
        assert_eq!(heap.committed_watermark, 0);
        assert_eq!(heap.base % page_size(), 0);
        assert_eq!(
            HeapRange::reserve(&backing, 64 * GIB),
            Err(BackingError::AlreadyReserved)
        );

        let first = heap.commit_span(&backing, 16384).unwrap();
        assert_eq!(first, heap.base);
        let second = heap.commit_span(&backing, 524288).unwrap();
        assert_eq!(second, heap.base + 16384);
        // SAFETY: committed and zero-filled.
        let bytes = unsafe { std::slice::from_raw_parts(second as *const u8, 524288) };
        assert!(bytes.iter().all(|&b| b == 0));
        backing.release_heap(heap.base, heap.reserved_len);
    }

    #[test]
    fn reserve_zero_fails() {
        let backing = PlatformBacking::new();
        assert!(HeapRange::reserve(&backing, 0).is_err());
        let arena = ArenaBacking::new(GIB);
        assert!(HeapRange::reserve(&arena, 0).is_err());
    }

    #[test]
    fn commit_beyond_reserve() {
        let arena = ArenaBacking::new(GIB);
        let mut heap = HeapRange::reserve(&arena, 4 * MIN_BIN_SPAN).unwrap();
        heap.commit_span(&arena, 2 * MIN_BIN_SPAN).unwrap();
        assert!(matches!(
            heap.commit_span(&arena, 4 * MIN_BIN_SPAN),
            Err(BackingError::HeapExhausted { .. })
        ));
        assert_eq!(heap.committed_watermark, 2 * MIN_BIN_SPAN);
    }

    #[test]
    fn watermark_is_sequential() {
        let arena = ArenaBacking::new(GIB);
        let mut heap = HeapRange::reserve(&arena, 256 * MIN_BIN_SPAN).unwrap();
        let mut expected = heap.base;
        for spans in [1, 32, 2, 64, 1] {
            let len = spans * MIN_BIN_SPAN;
            assert_eq!(heap.commit_span(&arena, len).unwrap(), expected);
            expected += len;
        }
    }

    #[test]
    fn grants_are_zeroed_and_disjoint_from_heap() {
        for backing in [&PlatformBacking::new() as &dyn Backing, &ArenaBacking::new(GIB)] {
            let heap = HeapRange::reserve(backing, 1 << 24).unwrap();
            let one = backing.grant_pages(1).unwrap();
            let two = backing.grant_pages(2).unwrap();
            assert_eq!(one.len, backing.page_size());
            assert_eq!(two.len, 2 * backing.page_size());
            for grant in [one, two] {
                assert!(grant.zeroed);
                assert_eq!(grant.addr % backing.page_size(), 0);
                let outside = grant.addr + grant.len <= heap.base
                    || grant.addr >= heap.base + heap.reserved_len;
                assert!(outside);
                // SAFETY: freshly granted pages.
                let bytes = unsafe { std::slice::from_raw_parts(grant.addr as *const u8, grant.len) };
                assert!(bytes.iter().all(|&b| b == 0));
            }
            backing.release_pages(one.addr, 1).unwrap();
            backing.release_pages(two.addr, 2).unwrap();
            backing.release_heap(heap.base, heap.reserved_len);
        }
    }

    #[test]
    fn external_map_remap_unmap() {
        for backing in [&PlatformBacking::new() as &dyn Backing, &ArenaBacking::new(GIB)] {
            let addr = backing.map_external(131072).unwrap();
            assert_eq!(131072 / backing.page_size(), 32);
            // SAFETY: live mapping of 131072 bytes.
            unsafe {
                for i in 0..131072 {
                    *((addr + i) as *mut u8) = (i % 251) as u8;
                }
            }
            let grown = backing.remap_external(addr, 131072, 262144).unwrap();
            // SAFETY: live mapping of 262144 bytes.
            let bytes = unsafe { std::slice::from_raw_parts(grown as *const u8, 262144) };
            assert!(bytes[..131072].iter().enumerate().all(|(i, &b)| b == (i % 251) as u8));
            assert!(bytes[131072..].iter().all(|&b| b == 0));
            backing.unmap_external(grown, 262144).unwrap();
        }
    }

    #[test]
    fn arena_faults_after_unmap() {
        let arena = ArenaBacking::new(GIB);
        let addr = arena.map_external(8192).unwrap();
        assert!(arena.check_access(addr, 8192).is_ok());
        arena.unmap_external(addr, 8192).unwrap();
        assert!(arena.check_access(addr + 100, 8).is_err());
        assert!(arena.unmap_external(addr, 8192).is_err());
    }
}
