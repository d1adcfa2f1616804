//! Variable bins.
//!
//! A variable bin describes its span with 1024 packed 32-bit cells, one per
//! `cell_size` bytes of heap. A cell records the block that *starts* inside
//! its memory, so every allocation must be larger than a cell for the
//! one-head-per-cell rule to hold.
//!
//! Two double-linked lists run through the cells:
//!
//! * the spatial list of all heads in address order. Used heads store both
//!   links directly. A free head needs its fields for the free list, so its
//!   spatial links are recovered from the neighboring cells: a used head
//!   next door is its own link, otherwise that cell becomes a `REF` holding
//!   the index of the head beyond.
//! * the free list of free heads, largest block first. Cell 1023 can never
//!   hold a head and anchors this list: its `fw_ref` is the list head, its
//!   `bw_ref` the tail.
//!
//! Index 1023 doubles as the end marker of the spatial list.
//!
//! Block sizes are not stored; a block runs from its start to the start of
//! the next head (or the end of the span).

use std::fmt::Write as _;
use std::sync::atomic::{AtomicU32, Ordering::Relaxed};

use thiserror::Error;

use crate::config::{CELLS_PER_BIN, GRANULE};

pub const SENTINEL: u16 = (CELLS_PER_BIN - 1) as u16;
/// End of the spatial list.
pub const END: u16 = SENTINEL;

const TAG_SHIFT: u32 = 30;
const FW_SHIFT: u32 = 20;
const BW_SHIFT: u32 = 10;
const FIELD_MASK: u32 = 0x3ff;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum CellTag {
    Unused = 0b00,
    UsedHead = 0b01,
    FreeHead = 0b10,
    Ref = 0b11,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefDir {
    Forward,
    Backward,
    Both,
}

impl RefDir {
    fn bits(self) -> u32 {
        match self {
            RefDir::Forward => 0b01,
            RefDir::Backward => 0b10,
            RefDir::Both => 0b11,
        }
    }
}

/// A structural inconsistency in a bin's metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("variable bin corrupted at cell {cell}: {what}")]
pub struct Corruption {
    pub cell: u16,
    pub what: &'static str,
}

fn corrupt<T>(cell: u16, what: &'static str) -> Result<T, Corruption> {
    Err(Corruption { cell, what })
}

/// One packed metadata word: tag(2) | fw_ref(10) | bw_ref(10) | offset(10).
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Cell(pub u32);

impl std::fmt::Debug for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.view() {
            Ok(v) => write!(f, "{v:?}"),
            Err(_) => write!(f, "Cell({:#010x})", self.0),
        }
    }
}

/// Decoded form of a [`Cell`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellView {
    Unused,
    UsedHead { fw: u16, bw: u16, offset: u16 },
    FreeHead { fw: u16, bw: u16, offset: u16 },
    Ref { dir: RefDir, fw: u16, bw: u16 },
}

impl Cell {
    pub const UNUSED: Cell = Cell(0);

    fn raw(tag: CellTag, fw: u16, bw: u16, offset: u16) -> Cell {
        debug_assert!(fw as u32 <= FIELD_MASK && bw as u32 <= FIELD_MASK && offset as u32 <= FIELD_MASK);
        Cell(
            (tag as u32) << TAG_SHIFT
                | (fw as u32) << FW_SHIFT
                | (bw as u32) << BW_SHIFT
                | offset as u32,
        )
    }

    pub fn used_head(fw: u16, bw: u16, offset: u16) -> Cell {
        Cell::raw(CellTag::UsedHead, fw, bw, offset)
    }

    pub fn free_head(fw: u16, bw: u16, offset: u16) -> Cell {
        Cell::raw(CellTag::FreeHead, fw, bw, offset)
    }

    pub fn ref_forward(target: u16) -> Cell {
        Cell::raw(CellTag::Ref, target, 0, RefDir::Forward.bits() as u16)
    }

    pub fn ref_backward(target: u16) -> Cell {
        Cell::raw(CellTag::Ref, 0, target, RefDir::Backward.bits() as u16)
    }

    pub fn sentinel(head: u16, tail: u16) -> Cell {
        Cell::raw(CellTag::Ref, head, tail, RefDir::Both.bits() as u16)
    }

    #[inline]
    pub fn tag(self) -> CellTag {
        match self.0 >> TAG_SHIFT {
            0b00 => CellTag::Unused,
            0b01 => CellTag::UsedHead,
            0b10 => CellTag::FreeHead,
            _ => CellTag::Ref,
        }
    }

    #[inline]
    pub fn fw(self) -> u16 {
        ((self.0 >> FW_SHIFT) & FIELD_MASK) as u16
    }

    #[inline]
    pub fn bw(self) -> u16 {
        ((self.0 >> BW_SHIFT) & FIELD_MASK) as u16
    }

    #[inline]
    pub fn offset(self) -> u16 {
        (self.0 & FIELD_MASK) as u16
    }

    #[inline]
    fn with_fw(self, fw: u16) -> Cell {
        Cell(self.0 & !(FIELD_MASK << FW_SHIFT) | (fw as u32) << FW_SHIFT)
    }

    #[inline]
    fn with_bw(self, bw: u16) -> Cell {
        Cell(self.0 & !(FIELD_MASK << BW_SHIFT) | (bw as u32) << BW_SHIFT)
    }

    #[inline]
    fn is_head(self) -> bool {
        matches!(self.tag(), CellTag::UsedHead | CellTag::FreeHead)
    }

    #[inline]
    fn is_ref(self, dir: RefDir) -> bool {
        self.tag() == CellTag::Ref && self.offset() as u32 == dir.bits()
    }

    /// Decodes, rejecting words that break the per-tag constraints.
    pub fn view(self) -> Result<CellView, Corruption> {
        let (fw, bw, offset) = (self.fw(), self.bw(), self.offset());
        match self.tag() {
            CellTag::Unused if self.0 == 0 => Ok(CellView::Unused),
            CellTag::Unused => corrupt(0, "unused cell with non-zero fields"),
            CellTag::UsedHead => Ok(CellView::UsedHead { fw, bw, offset }),
            CellTag::FreeHead => Ok(CellView::FreeHead { fw, bw, offset }),
            CellTag::Ref => match offset {
                0b01 if bw == 0 => Ok(CellView::Ref { dir: RefDir::Forward, fw, bw }),
                0b10 if fw == 0 => Ok(CellView::Ref { dir: RefDir::Backward, fw, bw }),
                0b11 => Ok(CellView::Ref { dir: RefDir::Both, fw, bw }),
                _ => corrupt(0, "malformed reference cell"),
            },
        }
    }
}

impl CellView {
    pub fn pack(self) -> Cell {
        match self {
            CellView::Unused => Cell::UNUSED,
            CellView::UsedHead { fw, bw, offset } => Cell::used_head(fw, bw, offset),
            CellView::FreeHead { fw, bw, offset } => Cell::free_head(fw, bw, offset),
            CellView::Ref { dir, fw, bw } => Cell::raw(CellTag::Ref, fw, bw, dir.bits() as u16),
        }
    }
}

/// The 1024 cells of one bin, sized and aligned to exactly one 4 KiB page.
///
/// Cells are atomics so that remote threads can read a tag without a data
/// race; only the owner ever writes them.
#[repr(C, align(4096))]
pub struct CellArray {
    cells: [AtomicU32; CELLS_PER_BIN],
}

const _: () = assert!(std::mem::size_of::<CellArray>() == 4096);

impl CellArray {
    pub fn new() -> CellArray {
        CellArray {
            cells: std::array::from_fn(|_| AtomicU32::new(0)),
        }
    }

    #[inline]
    pub fn load(&self, index: u16) -> Cell {
        Cell(self.cells[index as usize].load(Relaxed))
    }

    #[inline]
    fn store(&self, index: u16, cell: Cell) {
        self.cells[index as usize].store(cell.0, Relaxed)
    }

    pub fn snapshot(&self) -> Vec<u32> {
        self.cells.iter().map(|c| c.load(Relaxed)).collect()
    }
}

impl Default for CellArray {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-bin bookkeeping that lives in the bin header rather than the cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarBinMeta {
    pub shift: u8,
    /// Secondary free-list entry point, or `SENTINEL` when unset.
    pub secondary: u16,
    pub free_len: u16,
}

impl VarBinMeta {
    pub fn new(cell_size: usize) -> VarBinMeta {
        debug_assert!(cell_size.is_power_of_two());
        VarBinMeta {
            shift: cell_size.trailing_zeros() as u8,
            secondary: SENTINEL,
            free_len: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarFree {
    Freed,
    DoubleFree,
    InvalidFree,
}

/// A block located by [`VarBin::locate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockInfo {
    pub head: u16,
    pub start: usize,
    pub size: usize,
    pub used: bool,
}

/// Owner-side view of one variable bin.
pub struct VarBin<'a> {
    meta: &'a mut VarBinMeta,
    cells: &'a CellArray,
}

impl<'a> VarBin<'a> {
    pub fn new(meta: &'a mut VarBinMeta, cells: &'a CellArray) -> VarBin<'a> {
        VarBin { meta, cells }
    }

    #[inline]
    pub fn get(&self, i: u16) -> Cell {
        self.cells.load(i)
    }

    #[inline]
    fn put(&self, i: u16, c: Cell) {
        self.cells.store(i, c)
    }

    #[inline]
    pub fn cell_size(&self) -> usize {
        1 << self.meta.shift
    }

    #[inline]
    pub fn span(&self) -> usize {
        CELLS_PER_BIN << self.meta.shift
    }

    pub fn meta(&self) -> VarBinMeta {
        *self.meta
    }

    pub fn free_len(&self) -> usize {
        self.meta.free_len as usize
    }

    /// One free block covering the whole span.
    pub fn init(&mut self) {
        for i in 0..CELLS_PER_BIN as u16 {
            self.put(i, Cell::UNUSED);
        }
        self.put(0, Cell::free_head(SENTINEL, SENTINEL, 0));
        self.put(SENTINEL, Cell::sentinel(0, 0));
        self.meta.free_len = 1;
        self.meta.secondary = SENTINEL;
    }

    /// True when the bin is in exactly the state [`VarBin::init`] leaves.
    pub fn is_pristine(&self) -> bool {
        self.meta.free_len == 1
            && self.meta.secondary == SENTINEL
            && self.get(0) == Cell::free_head(SENTINEL, SENTINEL, 0)
            && self.get(SENTINEL) == Cell::sentinel(0, 0)
            && (1..SENTINEL).all(|i| self.get(i) == Cell::UNUSED)
    }

    #[inline]
    fn start_of(&self, h: u16, c: Cell) -> usize {
        ((h as usize) << self.meta.shift) + c.offset() as usize * GRANULE
    }

    /// Byte offset of the block headed by cell `h`, relative to the span.
    pub fn block_start(&self, h: u16) -> Result<usize, Corruption> {
        let c = self.get(h);
        if !c.is_head() {
            return corrupt(h, "not a head");
        }
        Ok(self.start_of(h, c))
    }

    /// Next head in address order, or [`END`].
    pub fn spatial_next(&self, h: u16) -> Result<u16, Corruption> {
        let c = self.get(h);
        match c.tag() {
            CellTag::UsedHead => Ok(c.fw()),
            CellTag::FreeHead => {
                let n = h + 1;
                if n == SENTINEL {
                    return Ok(END);
                }
                let nc = self.get(n);
                match nc.tag() {
                    CellTag::UsedHead => Ok(n),
                    CellTag::Unused => Ok(END),
                    CellTag::Ref if nc.is_ref(RefDir::Forward) => Ok(nc.fw()),
                    CellTag::FreeHead => corrupt(h, "adjacent free heads"),
                    CellTag::Ref => corrupt(n, "expected forward reference"),
                }
            }
            _ => corrupt(h, "not a head"),
        }
    }

    /// Previous head in address order, or [`END`].
    pub fn spatial_prev(&self, h: u16) -> Result<u16, Corruption> {
        let c = self.get(h);
        match c.tag() {
            CellTag::UsedHead => Ok(c.bw()),
            CellTag::FreeHead => {
                if h == 0 {
                    return Ok(END);
                }
                let p = h - 1;
                let pc = self.get(p);
                match pc.tag() {
                    CellTag::UsedHead => Ok(p),
                    CellTag::Ref if pc.is_ref(RefDir::Backward) => Ok(pc.bw()),
                    CellTag::FreeHead => corrupt(h, "adjacent free heads"),
                    _ => corrupt(p, "expected backward reference"),
                }
            }
            _ => corrupt(h, "not a head"),
        }
    }

    pub fn block_size(&self, h: u16) -> Result<usize, Corruption> {
        let start = self.block_start(h)?;
        let n = self.spatial_next(h)?;
        let end = if n == END { self.span() } else { self.block_start(n)? };
        if end <= start {
            return corrupt(h, "non-increasing spatial list");
        }
        Ok(end - start)
    }

    /// Size of the largest free block.
    pub fn head_size(&self) -> Result<Option<usize>, Corruption> {
        if self.meta.free_len == 0 {
            return Ok(None);
        }
        self.block_size(self.get(SENTINEL).fw()).map(Some)
    }

    fn fl_next(&self, i: u16) -> u16 {
        self.get(i).fw()
    }

    fn fl_set_fw(&self, i: u16, v: u16) {
        self.put(i, self.get(i).with_fw(v));
    }

    fn fl_set_bw(&self, i: u16, v: u16) {
        self.put(i, self.get(i).with_bw(v));
    }

    pub fn freelist_remove(&mut self, h: u16) -> Result<(), Corruption> {
        let c = self.get(h);
        if c.tag() != CellTag::FreeHead {
            return corrupt(h, "removing non-free head from free list");
        }
        let (f, b) = (c.fw(), c.bw());
        if self.get(b).fw() != h || self.get(f).bw() != h {
            return corrupt(h, "free head not linked in free list");
        }
        self.fl_set_fw(b, f);
        self.fl_set_bw(f, b);
        self.meta.free_len -= 1;
        if self.meta.secondary == h {
            self.meta.secondary = if f != SENTINEL { f } else { b };
        }
        if self.meta.free_len < 2 {
            self.meta.secondary = SENTINEL;
        }
        Ok(())
    }

    /// Links free head `h` after every entry at least as large.
    pub fn freelist_insert(&mut self, h: u16) -> Result<(), Corruption> {
        if self.get(h).tag() != CellTag::FreeHead {
            return corrupt(h, "inserting non-free head into free list");
        }
        let size = self.block_size(h)?;
        let len = self.meta.free_len;
        let mut seen_middle = None;
        let after = if len == 0 {
            SENTINEL
        } else {
            let head = self.fl_next(SENTINEL);
            let sec = self.meta.secondary;
            let (mut cur, from_head) = if sec != SENTINEL && self.block_size(sec)? >= size {
                (sec, false)
            } else if self.block_size(head)? >= size {
                (head, true)
            } else {
                (SENTINEL, false)
            };
            if cur != SENTINEL {
                let mut steps = 0u16;
                loop {
                    if from_head && steps == len / 2 {
                        seen_middle = Some(cur);
                    }
                    let nx = self.fl_next(cur);
                    if nx == SENTINEL || self.block_size(nx)? < size {
                        break;
                    }
                    cur = nx;
                    steps += 1;
                }
            }
            cur
        };
        let before = self.fl_next(after);
        self.put(h, self.get(h).with_fw(before).with_bw(after));
        self.fl_set_fw(after, h);
        self.fl_set_bw(before, h);
        self.meta.free_len += 1;
        if self.meta.free_len < 2 {
            self.meta.secondary = SENTINEL;
        } else if let Some(mid) = seen_middle {
            self.meta.secondary = mid;
        } else if self.meta.secondary == SENTINEL {
            self.refresh_secondary();
        }
        Ok(())
    }

    fn refresh_secondary(&mut self) {
        let mut cur = self.fl_next(SENTINEL);
        for _ in 0..self.meta.free_len / 2 {
            cur = self.fl_next(cur);
        }
        self.meta.secondary = cur;
    }

    /// Free heads from largest to smallest.
    pub fn free_list(&self) -> Vec<u16> {
        let mut out = Vec::with_capacity(self.meta.free_len as usize);
        let mut cur = self.fl_next(SENTINEL);
        while cur != SENTINEL && out.len() <= CELLS_PER_BIN {
            out.push(cur);
            cur = self.fl_next(cur);
        }
        out
    }

    /// Best-fit allocation of `rounded` bytes. Returns the block's byte
    /// offset within the span, or `None` if no free block is large enough.
    pub fn alloc(&mut self, rounded: usize) -> Result<Option<usize>, Corruption> {
        debug_assert!(rounded.is_multiple_of(GRANULE) && rounded > self.cell_size());
        if self.meta.free_len == 0 {
            return Ok(None);
        }
        let head = self.fl_next(SENTINEL);
        if self.block_size(head)? < rounded {
            return Ok(None);
        }
        let len = self.meta.free_len;
        let sec = self.meta.secondary;
        let (mut h, from_head) = if sec != SENTINEL && self.block_size(sec)? >= rounded {
            (sec, false)
        } else {
            (head, true)
        };
        let mut steps = 0u16;
        let mut seen_middle = None;
        loop {
            if from_head && steps == len / 2 {
                seen_middle = Some(h);
            }
            let nx = self.fl_next(h);
            if nx == SENTINEL || self.block_size(nx)? < rounded {
                break;
            }
            h = nx;
            steps += 1;
        }
        if let Some(mid) = seen_middle {
            if mid != h {
                self.meta.secondary = mid;
            }
        }

        let fh = self.get(h);
        let start = self.start_of(h, fh);
        let size = self.block_size(h)?;
        let prev = self.spatial_prev(h)?;
        let next = self.spatial_next(h)?;
        self.freelist_remove(h)?;

        // Drop the references the free head kept in its neighbors.
        if h + 1 < SENTINEL && self.get(h + 1).is_ref(RefDir::Forward) {
            self.put(h + 1, Cell::UNUSED);
        }
        if prev != END && h - 1 != prev {
            self.put(h - 1, Cell::UNUSED);
        }

        let rest = size - rounded;
        let rest_start = start + rounded;
        let rest_cell = (rest_start >> self.meta.shift) as u16;
        // `next` is END (== SENTINEL) for the last block, which also keeps
        // the remainder out of the sentinel's memory.
        if rest >= GRANULE && rest_cell < next {
            let rest_off = ((rest_start & (self.cell_size() - 1)) / GRANULE) as u16;
            self.put(h, Cell::used_head(rest_cell, prev, fh.offset()));
            self.put(rest_cell, Cell::free_head(0, 0, rest_off));
            if rest_cell - 1 != h {
                self.put(rest_cell - 1, Cell::ref_backward(h));
            }
            if next != END {
                if rest_cell + 1 != next {
                    self.put(rest_cell + 1, Cell::ref_forward(next));
                }
                self.put(next, self.get(next).with_bw(rest_cell));
            }
            self.freelist_insert(rest_cell)?;
        } else {
            self.put(h, Cell::used_head(next, prev, fh.offset()));
        }
        Ok(Some(start))
    }

    /// Frees the block starting `byte_offset` bytes into cell `cell`.
    pub fn free(&mut self, cell: u16, byte_offset: usize) -> Result<VarFree, Corruption> {
        if cell >= SENTINEL || !byte_offset.is_multiple_of(GRANULE) || byte_offset >= self.cell_size() {
            return Ok(VarFree::InvalidFree);
        }
        let c = self.get(cell);
        let matches = c.offset() as usize == byte_offset / GRANULE;
        match c.tag() {
            CellTag::UsedHead if matches => {
                self.release(cell)?;
                Ok(VarFree::Freed)
            }
            CellTag::FreeHead if matches => Ok(VarFree::DoubleFree),
            _ => Ok(VarFree::InvalidFree),
        }
    }

    /// Frees whatever block cell `cell` heads, as recorded by a remote free.
    ///
    /// A cell that no longer heads a used block was freed in the meantime,
    /// so the remote free was a second one.
    pub fn free_cell(&mut self, cell: u16) -> Result<VarFree, Corruption> {
        if cell >= SENTINEL {
            return Ok(VarFree::InvalidFree);
        }
        if self.get(cell).tag() == CellTag::UsedHead {
            self.release(cell)?;
            Ok(VarFree::Freed)
        } else {
            Ok(VarFree::DoubleFree)
        }
    }

    /// Turns used head `c` into a free block, merging free neighbors.
    fn release(&mut self, c: u16) -> Result<(), Corruption> {
        let uh = self.get(c);
        let (p, n) = (uh.bw(), uh.fw());
        let p_free = p != END && self.get(p).tag() == CellTag::FreeHead;
        let n_free = n != END && self.get(n).tag() == CellTag::FreeHead;

        let mut head = c;
        let mut before = p;
        let mut after = n;

        if p_free {
            before = self.spatial_prev(p)?;
            self.freelist_remove(p)?;
            if p + 1 != c {
                self.put(p + 1, Cell::UNUSED);
            }
            self.put(c, Cell::UNUSED);
            head = p;
        }
        if n_free {
            after = self.spatial_next(n)?;
            self.freelist_remove(n)?;
            if n + 1 < SENTINEL && self.get(n + 1).is_ref(RefDir::Forward) {
                self.put(n + 1, Cell::UNUSED);
            }
            if n - 1 != c {
                self.put(n - 1, Cell::UNUSED);
            }
            self.put(n, Cell::UNUSED);
        }
        if head == c {
            self.put(c, Cell::free_head(0, 0, uh.offset()));
        }
        if before != END {
            self.put(before, self.get(before).with_fw(head));
            if head - 1 != before {
                self.put(head - 1, Cell::ref_backward(before));
            }
        }
        if after != END {
            self.put(after, self.get(after).with_bw(head));
            if head + 1 != after {
                self.put(head + 1, Cell::ref_forward(after));
            }
        }
        self.freelist_insert(head)
    }

    /// Finds the block containing byte `offset` of the span.
    pub fn locate(&self, offset: usize) -> Option<BlockInfo> {
        if offset >= self.span() {
            return None;
        }
        let mut i = (offset >> self.meta.shift) as u16;
        loop {
            let c = self.get(i);
            if c.is_head() && self.start_of(i, c) <= offset {
                let size = self.block_size(i).ok()?;
                return Some(BlockInfo {
                    head: i,
                    start: self.start_of(i, c),
                    size,
                    used: c.tag() == CellTag::UsedHead,
                });
            }
            if i == 0 {
                return None;
            }
            i -= 1;
        }
    }

    /// Every block in address order: (head, start, size, used).
    pub fn blocks(&self) -> Result<Vec<BlockInfo>, Corruption> {
        let mut out = Vec::new();
        let mut h = 0u16;
        loop {
            let c = self.get(h);
            if !c.is_head() {
                return corrupt(h, "spatial list reaches a non-head");
            }
            out.push(BlockInfo {
                head: h,
                start: self.start_of(h, c),
                size: self.block_size(h)?,
                used: c.tag() == CellTag::UsedHead,
            });
            let n = self.spatial_next(h)?;
            if n == END {
                return Ok(out);
            }
            if n <= h || out.len() > CELLS_PER_BIN {
                return corrupt(h, "spatial list not increasing");
            }
            h = n;
        }
    }

    /// Full structural audit.
    pub fn check(&self) -> Result<(), String> {
        let err = |e: Corruption| e.to_string();
        let cs = self.cell_size();
        for i in 0..CELLS_PER_BIN as u16 {
            self.get(i)
                .view()
                .map_err(|e| Corruption { cell: i, ..e }.to_string())?;
        }
        let s = self.get(SENTINEL);
        if !s.is_ref(RefDir::Both) {
            return Err("cell 1023 is not the sentinel".into());
        }

        let blocks = self.blocks().map_err(err)?;
        let mut expected = vec![Cell::UNUSED; CELLS_PER_BIN];
        expected[SENTINEL as usize] = s;
        let mut total = 0usize;
        let mut prev: Option<&BlockInfo> = None;
        for (k, b) in blocks.iter().enumerate() {
            if b.start != total {
                return Err(format!("gap or overlap before block at cell {}", b.head));
            }
            total += b.size;
            if (b.start >> self.meta.shift) as u16 != b.head {
                return Err(format!("block start outside its head cell {}", b.head));
            }
            if b.used && b.size <= cs {
                return Err(format!("used block at cell {} not larger than a cell", b.head));
            }
            let c = self.get(b.head);
            let p = if k == 0 { END } else { blocks[k - 1].head };
            let n = blocks.get(k + 1).map_or(END, |x| x.head);
            if self.spatial_prev(b.head).map_err(err)? != p {
                return Err(format!("backward traversal mismatch at cell {}", b.head));
            }
            if b.used {
                expected[b.head as usize] = c;
            } else {
                if prev.is_some_and(|x| !x.used) {
                    return Err(format!("adjacent free blocks at cell {}", b.head));
                }
                expected[b.head as usize] = c;
                if p != END && b.head - 1 != p {
                    expected[b.head as usize - 1] = Cell::ref_backward(p);
                }
                if n != END && b.head + 1 != n {
                    expected[b.head as usize + 1] = Cell::ref_forward(n);
                }
            }
            prev = Some(b);
        }
        if total != self.span() {
            return Err(format!("blocks cover {total} of {} bytes", self.span()));
        }
        for i in 0..CELLS_PER_BIN as u16 {
            if self.get(i) != expected[i as usize] {
                return Err(format!(
                    "cell {i} is {:?}, expected {:?}",
                    self.get(i),
                    expected[i as usize]
                ));
            }
        }

        // Free list: exactly the free heads, non-increasing, links mirrored.
        let list = self.free_list();
        let free_heads: Vec<u16> = blocks.iter().filter(|b| !b.used).map(|b| b.head).collect();
        if list.len() != self.meta.free_len as usize || list.len() != free_heads.len() {
            return Err(format!(
                "free list length {} / free_len {} / free heads {}",
                list.len(),
                self.meta.free_len,
                free_heads.len()
            ));
        }
        let mut sorted = list.clone();
        sorted.sort_unstable();
        if sorted != free_heads {
            return Err("free list does not cover the free heads".into());
        }
        let mut last = usize::MAX;
        let mut back = SENTINEL;
        for &h in &list {
            let size = self.block_size(h).map_err(err)?;
            if size > last {
                return Err(format!("free list out of order at cell {h}"));
            }
            if self.get(h).bw() != back {
                return Err(format!("free list back link broken at cell {h}"));
            }
            last = size;
            back = h;
        }
        if s.bw() != back || (list.is_empty() && s.fw() != SENTINEL) {
            return Err("sentinel tail mismatch".into());
        }
        let sec = self.meta.secondary;
        if list.len() < 2 && sec != SENTINEL {
            return Err("secondary head set on a short free list".into());
        }
        if sec != SENTINEL && !list.contains(&sec) {
            return Err(format!("secondary head {sec} not in free list"));
        }
        Ok(())
    }

    /// Text dump of every non-unused cell.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "vbin cell={} free_len={} secondary={}",
            self.cell_size(),
            self.meta.free_len,
            self.meta.secondary
        );
        for i in 0..CELLS_PER_BIN as u16 {
            let c = self.get(i);
            if c != Cell::UNUSED {
                let _ = writeln!(out, "{i:4} {c:?}");
            }
        }
        out
    }
}

/// A variable bin with its own cell storage, detached from any heap.
pub struct StandaloneVarBin {
    meta: VarBinMeta,
    cells: Box<CellArray>,
}

impl StandaloneVarBin {
    pub fn new(cell_size: usize) -> StandaloneVarBin {
        let mut bin = StandaloneVarBin {
            meta: VarBinMeta::new(cell_size),
            cells: Box::new(CellArray::new()),
        };
        bin.view().init();
        bin
    }

    pub fn view(&mut self) -> VarBin<'_> {
        VarBin::new(&mut self.meta, &self.cells)
    }

    pub fn cells(&self) -> &CellArray {
        &self.cells
    }
}
