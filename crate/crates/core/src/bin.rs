//! Bin headers, remote-free marks and the per-thread bin lists.
//!
//! A header has two halves. The owner-only half (`Local`) sits behind an
//! `UnsafeCell` and is touched by the owning thread alone. Other threads
//! reach only `owner`, `remote_count` and the mutex-guarded marks.

use std::cell::UnsafeCell;
use std::ptr;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

use parking_lot::Mutex;

use crate::config::{ClassId, CLASS_COUNT, CELLS_PER_BIN, GRANULE};
use crate::fbin::{FixedFree, NativeBitmap};
use crate::vbin::{CellArray, CellTag, VarBin, VarBinMeta, VarFree, SENTINEL};

/// Owner value of a bin whose thread has gone away.
pub(crate) const ORPHAN: u64 = 0;

const MARK_WORDS: usize = CELLS_PER_BIN / 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ListKind {
    None,
    Avail,
    Full,
    Orphan,
}

pub(crate) struct Local {
    next: *mut BinHeader,
    prev: *mut BinHeader,
    pub(crate) list: ListKind,
    pub(crate) bitmap: NativeBitmap,
    pub(crate) var: VarBinMeta,
}

struct Marks {
    bits: [u64; MARK_WORDS],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Mark {
    Marked,
    AlreadyMarked,
}

/// Marks taken out of a bin by a drain.
pub(crate) struct TakenMarks {
    bits: [u64; MARK_WORDS],
    /// Block offset within its cell, in granules; variable bins only.
    granules: [u16; CELLS_PER_BIN],
}

impl TakenMarks {
    /// (cell, granule offset) of every mark in cell order.
    pub(crate) fn iter(&self) -> impl Iterator<Item = (u16, u16)> + '_ {
        self.bits.iter().enumerate().flat_map(move |(w, &word)| {
            let mut word = word;
            std::iter::from_fn(move || {
                if word == 0 {
                    return None;
                }
                let b = word.trailing_zeros();
                word &= word - 1;
                let cell = (w * 64) as u16 + b as u16;
                Some((cell, self.granules[cell as usize]))
            })
        })
    }
}

pub(crate) struct BinHeader {
    pub(crate) base: usize,
    pub(crate) class: ClassId,
    /// Cell array of a variable bin; null for fixed bins.
    cells: *const CellArray,
    /// Granule offsets recorded with remote marks; guarded by `marks`.
    granules: *mut u16,
    pub(crate) owner: AtomicU64,
    pub(crate) remote_count: AtomicU32,
    marks: Mutex<Marks>,
    local: UnsafeCell<Local>,
}

// SAFETY: shared fields are atomics or mutex-guarded; `local` is confined to
// the owning thread by protocol.
unsafe impl Sync for BinHeader {}
unsafe impl Send for BinHeader {}

/// Result of an owner-side free into a bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum NativeFree {
    Freed,
    DoubleFree,
    InvalidFree,
}

impl BinHeader {
    /// Writes a fresh header at `at`.
    ///
    /// # Safety
    /// `at` must be writable header storage. For variable classes `cells`
    /// must be a zeroed cell array and `granules` 1024 writable u16s.
    pub(crate) unsafe fn init(
        at: *mut BinHeader,
        base: usize,
        class: ClassId,
        cells: *const CellArray,
        granules: *mut u16,
        owner: u64,
    ) {
        ptr::write(
            at,
            BinHeader {
                base,
                class,
                cells,
                granules,
                owner: AtomicU64::new(owner),
                remote_count: AtomicU32::new(0),
                marks: Mutex::new(Marks { bits: [0; MARK_WORDS] }),
                local: UnsafeCell::new(Local {
                    next: ptr::null_mut(),
                    prev: ptr::null_mut(),
                    list: ListKind::None,
                    bitmap: NativeBitmap::new(),
                    var: VarBinMeta::new(class.cell_size()),
                }),
            },
        );
        let h = &*at;
        if !h.class.is_fixed() {
            h.var().init();
        }
    }

    #[inline]
    pub(crate) fn is_fixed(&self) -> bool {
        self.class.is_fixed()
    }

    #[inline]
    pub(crate) fn shift(&self) -> u32 {
        self.class.shift()
    }

    #[inline]
    pub(crate) fn cell_size(&self) -> usize {
        self.class.cell_size()
    }

    pub(crate) fn cells(&self) -> Option<&CellArray> {
        // SAFETY: set once at init, lives as long as the header.
        unsafe { self.cells.as_ref() }
    }

    /// Owner-only half.
    ///
    /// # Safety
    /// Caller is the owner (or holds the bin exclusively, e.g. orphaned
    /// under the orphan lock) and holds no other reference into `local`.
    #[allow(clippy::mut_from_ref)]
    #[inline]
    pub(crate) unsafe fn local(&self) -> &mut Local {
        &mut *self.local.get()
    }

    /// Owner view of a variable bin.
    ///
    /// # Safety
    /// As for [`BinHeader::local`]; the bin must be variable.
    pub(crate) unsafe fn var(&self) -> VarBin<'_> {
        VarBin::new(&mut self.local().var, &*self.cells)
    }

    /// Whether the owner could allocate at least one block here.
    ///
    /// # Safety
    /// As for [`BinHeader::local`].
    pub(crate) unsafe fn has_space(&self) -> bool {
        let l = self.local();
        if self.is_fixed() {
            !l.bitmap.is_full()
        } else {
            l.var.free_len > 0
        }
    }

    /// Whether every block is free and no mark is pending.
    ///
    /// # Safety
    /// As for [`BinHeader::local`].
    pub(crate) unsafe fn is_pristine(&self) -> bool {
        if self.remote_count.load(Ordering::Acquire) != 0 {
            return false;
        }
        if self.is_fixed() {
            self.local().bitmap.is_pristine()
        } else {
            self.var().is_pristine()
        }
    }

    /// Records a free by a thread other than the owner.
    pub(crate) fn mark_remote(&self, cell: u16, granule: u16) -> Mark {
        debug_assert!((cell as usize) < CELLS_PER_BIN);
        let mut m = self.marks.lock();
        let (w, b) = (cell as usize / 64, cell % 64);
        if m.bits[w] & (1 << b) != 0 {
            return Mark::AlreadyMarked;
        }
        m.bits[w] |= 1 << b;
        if !self.granules.is_null() {
            // SAFETY: 1024 entries; guarded by the marks mutex held here.
            unsafe { *self.granules.add(cell as usize) = granule };
        }
        self.remote_count.fetch_add(1, Ordering::Release);
        Mark::Marked
    }

    /// Removes every pending mark. Returns `None` on the lock-free fast path.
    pub(crate) fn take_marks(&self) -> Option<TakenMarks> {
        if self.remote_count.load(Ordering::Acquire) == 0 {
            return None;
        }
        let mut m = self.marks.lock();
        let mut taken = TakenMarks {
            bits: m.bits,
            granules: [0; CELLS_PER_BIN],
        };
        if !self.granules.is_null() {
            for (w, &word) in m.bits.iter().enumerate() {
                let mut word = word;
                while word != 0 {
                    let cell = w * 64 + word.trailing_zeros() as usize;
                    word &= word - 1;
                    // SAFETY: guarded by the marks mutex held here.
                    taken.granules[cell] = unsafe { *self.granules.add(cell) };
                }
            }
        }
        m.bits = [0; MARK_WORDS];
        self.remote_count.store(0, Ordering::Release);
        drop(m);
        Some(taken)
    }

    /// Hands the bin to `owner`. Taking the marks lock orders the change
    /// against in-flight remote marks.
    pub(crate) fn set_owner(&self, owner: u64) {
        let _m = self.marks.lock();
        self.owner.store(owner, Ordering::Release);
    }

    /// Whether a remote free of `cell` is pending.
    pub(crate) fn is_marked(&self, cell: u16) -> bool {
        let m = self.marks.lock();
        m.bits[cell as usize / 64] & (1 << (cell % 64)) != 0
    }

    /// Pending mark count as seen under the mutex.
    pub(crate) fn marks_consistent(&self) -> bool {
        let m = self.marks.lock();
        let pop: u32 = m.bits.iter().map(|w| w.count_ones()).sum();
        pop == self.remote_count.load(Ordering::Acquire)
    }

    /// Frees the block at byte offset `off` of the span on the owner path.
    ///
    /// # Safety
    /// Caller is the owner.
    pub(crate) unsafe fn native_free(&self, off: usize) -> NativeFree {
        if self.is_fixed() {
            if off & (self.cell_size() - 1) != 0 {
                return NativeFree::InvalidFree;
            }
            match self.local().bitmap.free((off >> self.shift()) as u32) {
                FixedFree::Freed => NativeFree::Freed,
                FixedFree::DoubleFree => NativeFree::DoubleFree,
            }
        } else {
            let cell = (off >> self.shift()) as u16;
            let byte = off & (self.cell_size() - 1);
            match self.var().free(cell, byte) {
                Ok(VarFree::Freed) => NativeFree::Freed,
                Ok(VarFree::DoubleFree) => NativeFree::DoubleFree,
                Ok(VarFree::InvalidFree) => NativeFree::InvalidFree,
                Err(_) => NativeFree::InvalidFree,
            }
        }
    }

    /// Payload size of the live block starting at byte offset `off`, or
    /// the reason `off` is not one.
    ///
    /// # Safety
    /// Caller is the owner.
    pub(crate) unsafe fn owned_block_size(&self, off: usize) -> Result<usize, NativeFree> {
        let cell = off >> self.shift();
        let byte = off & (self.cell_size() - 1);
        match self.cells() {
            None => {
                if byte != 0 {
                    Err(NativeFree::InvalidFree)
                } else if self.local().bitmap.is_free(cell as u32) {
                    Err(NativeFree::DoubleFree)
                } else {
                    Ok(self.cell_size())
                }
            }
            Some(cells) => {
                if cell >= SENTINEL as usize || !byte.is_multiple_of(GRANULE) {
                    return Err(NativeFree::InvalidFree);
                }
                let c = cells.load(cell as u16);
                if c.offset() as usize != byte / GRANULE {
                    return Err(NativeFree::InvalidFree);
                }
                match c.tag() {
                    CellTag::UsedHead => self.var().block_size(cell as u16).map_err(|_| NativeFree::InvalidFree),
                    CellTag::FreeHead => Err(NativeFree::DoubleFree),
                    _ => Err(NativeFree::InvalidFree),
                }
            }
        }
    }

    /// Checks a non-owner free of byte offset `off` against what a remote
    /// thread may read: alignment for fixed bins, the cell tag and offset for
    /// variable bins. Returns the (cell, granule) to mark.
    pub(crate) fn remote_target(&self, off: usize) -> Option<(u16, u16)> {
        let cell = (off >> self.shift()) as u16;
        let byte = off & (self.cell_size() - 1);
        match self.cells() {
            None => (byte == 0).then_some((cell, 0)),
            Some(cells) => {
                if cell >= SENTINEL || !byte.is_multiple_of(GRANULE) {
                    return None;
                }
                let c = cells.load(cell);
                let granule = (byte / GRANULE) as u16;
                let head = matches!(c.tag(), CellTag::UsedHead | CellTag::FreeHead);
                (head && c.offset() == granule).then_some((cell, granule))
            }
        }
    }

    /// Frees one drained mark on the owner path.
    ///
    /// # Safety
    /// Caller is the owner.
    pub(crate) unsafe fn drain_one(&self, cell: u16, granule: u16) -> NativeFree {
        let off = ((cell as usize) << self.shift()) + granule as usize * GRANULE;
        match self.native_free(off) {
            NativeFree::Freed => NativeFree::Freed,
            _ => NativeFree::DoubleFree,
        }
    }
}

/// Intrusive list of bins threaded through their owner-only links.
#[derive(Clone, Copy)]
pub(crate) struct BinList {
    pub(crate) head: *mut BinHeader,
    tail: *mut BinHeader,
    pub(crate) len: usize,
}

impl BinList {
    pub(crate) const EMPTY: BinList = BinList {
        head: ptr::null_mut(),
        tail: ptr::null_mut(),
        len: 0,
    };

    /// # Safety
    /// `b` is exclusively held by the caller and on no list.
    pub(crate) unsafe fn push_front(&mut self, b: *mut BinHeader, kind: ListKind) {
        let l = (*b).local();
        debug_assert_eq!(l.list, ListKind::None);
        l.prev = ptr::null_mut();
        l.next = self.head;
        l.list = kind;
        if self.head.is_null() {
            self.tail = b;
        } else {
            (*self.head).local().prev = b;
        }
        self.head = b;
        self.len += 1;
    }

    /// # Safety
    /// As for [`BinList::push_front`].
    pub(crate) unsafe fn push_back(&mut self, b: *mut BinHeader, kind: ListKind) {
        let l = (*b).local();
        debug_assert_eq!(l.list, ListKind::None);
        l.next = ptr::null_mut();
        l.prev = self.tail;
        l.list = kind;
        if self.tail.is_null() {
            self.head = b;
        } else {
            (*self.tail).local().next = b;
        }
        self.tail = b;
        self.len += 1;
    }

    /// # Safety
    /// `b` is on this list and exclusively held by the caller.
    pub(crate) unsafe fn remove(&mut self, b: *mut BinHeader) {
        let l = (*b).local();
        let (prev, next) = (l.prev, l.next);
        if prev.is_null() {
            self.head = next;
        } else {
            (*prev).local().next = next;
        }
        if next.is_null() {
            self.tail = prev;
        } else {
            (*next).local().prev = prev;
        }
        l.next = ptr::null_mut();
        l.prev = ptr::null_mut();
        l.list = ListKind::None;
        self.len -= 1;
    }

    /// # Safety
    /// `b` is on a list whose links the caller may read.
    pub(crate) unsafe fn next(b: *mut BinHeader) -> *mut BinHeader {
        (*b).local().next
    }
}

/// Bins owned by one thread in one heap.
pub(crate) struct ThreadHeapState {
    pub(crate) id: u64,
    pub(crate) avail: [BinList; CLASS_COUNT],
    pub(crate) full: [BinList; CLASS_COUNT],
    /// Link in the heap's pool of released states.
    pub(crate) pool_next: *mut ThreadHeapState,
}

impl ThreadHeapState {
    pub(crate) const fn new(id: u64) -> ThreadHeapState {
        ThreadHeapState {
            id,
            avail: [BinList::EMPTY; CLASS_COUNT],
            full: [BinList::EMPTY; CLASS_COUNT],
            pool_next: ptr::null_mut(),
        }
    }

    /// Moves `b` between the avail and full lists to match its space.
    ///
    /// # Safety
    /// `b` is owned by this state's thread and on one of its lists.
    pub(crate) unsafe fn refile(&mut self, b: *mut BinHeader) {
        let class = (*b).class.index();
        let space = (*b).has_space();
        match ((*b).local().list, space) {
            (ListKind::Full, true) => {
                self.full[class].remove(b);
                self.avail[class].push_back(b, ListKind::Avail);
            }
            (ListKind::Avail, false) => {
                self.avail[class].remove(b);
                self.full[class].push_front(b, ListKind::Full);
            }
            _ => {}
        }
    }
}

/// Per-class lists of orphaned bins, guarded by the heap's orphan lock.
pub(crate) struct OrphanLists {
    pub(crate) lists: [BinList; CLASS_COUNT],
}

// SAFETY: the lists are only reached under the orphan mutex.
unsafe impl Send for OrphanLists {}

impl OrphanLists {
    pub(crate) const fn new() -> OrphanLists {
        OrphanLists {
            lists: [BinList::EMPTY; CLASS_COUNT],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::mem::MaybeUninit;

    fn fixed_header(class: ClassId) -> Box<MaybeUninit<BinHeader>> {
        let mut slot = Box::new(MaybeUninit::<BinHeader>::uninit());
        unsafe { BinHeader::init(slot.as_mut_ptr(), 0x10000, class, ptr::null(), ptr::null_mut(), 7) };
        slot
    }

    #[test]
    fn remote_marks() {
        let h = fixed_header(ClassId::fixed(16));
        let h = unsafe { h.assume_init_ref() };
        assert_eq!(h.mark_remote(5, 0), Mark::Marked);
        assert_eq!(h.remote_count.load(Ordering::Relaxed), 1);
        assert_eq!(h.mark_remote(5, 0), Mark::AlreadyMarked);
        assert_eq!(h.mark_remote(0, 0), Mark::Marked);
        assert_eq!(h.mark_remote(1023, 0), Mark::Marked);
        assert!(h.marks_consistent());
        let taken = h.take_marks().unwrap();
        let cells: Vec<u16> = taken.iter().map(|(c, _)| c).collect();
        assert_eq!(cells, vec![0, 5, 1023]);
        assert_eq!(h.remote_count.load(Ordering::Relaxed), 0);
        assert!(h.take_marks().is_none());
    }

    #[test]
    fn remote_target_checks() {
        let h = fixed_header(ClassId::fixed(32));
        let h = unsafe { h.assume_init_ref() };
        assert_eq!(h.remote_target(64), Some((2, 0)));
        assert_eq!(h.remote_target(65), None);

        let cells = Box::new(CellArray::new());
        let mut granules = vec![0u16; CELLS_PER_BIN];
        let mut slot = Box::new(MaybeUninit::<BinHeader>::uninit());
        let class = ClassId::variable(512);
        unsafe { BinHeader::init(slot.as_mut_ptr(), 0, class, &*cells, granules.as_mut_ptr(), 7) };
        let v = unsafe { slot.assume_init_ref() };
        let off = unsafe { v.var().alloc(528).unwrap().unwrap() };
        assert_eq!(off, 0);
        // The remainder head sits at cell 1, granule 1.
        assert_eq!(v.remote_target(0), Some((0, 0)));
        assert_eq!(v.remote_target(528), Some((1, 1)));
        assert_eq!(v.remote_target(16), None);
        assert_eq!(v.remote_target(2048), None);
        assert_eq!(v.mark_remote(1, 1), Mark::Marked);
        let taken = v.take_marks().unwrap();
        assert_eq!(taken.iter().collect::<Vec<_>>(), vec![(1, 1)]);
        // The remote free hit a free head: the drain reports it.
        assert_eq!(unsafe { v.drain_one(1, 1) }, NativeFree::DoubleFree);
        assert_eq!(unsafe { v.drain_one(0, 0) }, NativeFree::Freed);
        assert!(unsafe { v.is_pristine() });
    }

    #[test]
    fn refile_moves_between_lists() {
        let class = ClassId::fixed(512);
        let mut h = fixed_header(class);
        let b = h.as_mut_ptr();
        let mut st = ThreadHeapState::new(7);
        unsafe {
            st.avail[class.index()].push_front(b, ListKind::Avail);
            while (*b).local().bitmap.alloc().is_some() {}
            st.refile(b);
            assert_eq!((*b).local().list, ListKind::Full);
            assert_eq!(st.full[class.index()].len, 1);
            (*b).native_free(512);
            st.refile(b);
            assert_eq!((*b).local().list, ListKind::Avail);
            assert_eq!(st.avail[class.index()].head, b);
        }
    }
}
