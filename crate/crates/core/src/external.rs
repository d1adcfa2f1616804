//! Large allocations served by dedicated mappings.
//!
//! Every mapping has an entry recording its base and length, so frees and
//! remaps never trust a caller-supplied size. Freed mappings are parked in a
//! small cache, ordered largest first, and handed out again on a best fit.
//!
//! Entries live in pages listed by one directory page; a base-to-entry index
//! keyed by page number finds them. Empty entries chain through `free_fw`
//! and are reused before the table grows.

use crate::backing::{Backing, BackingError};
use crate::meta::MetaArena;
use crate::revlookup::RevLookup;

const NIL: u32 = u32::MAX;

pub const CACHE_MAX_ENTRIES: usize = 16;
pub const CACHE_MAX_BYTES: usize = 64 << 20;

/// Unit for entry pages and index keys. Mappings are page-aligned, and every
/// supported page size is a multiple of this.
const UNIT: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ExtState {
    Empty = 0,
    InUse = 1,
    Cached = 2,
}

#[derive(Debug, Clone, Copy)]
#[repr(C)]
struct ExternalEntry {
    base: usize,
    size: usize,
    /// Insertion order into the cache; the smallest is evicted first.
    cached_seq: u64,
    free_fw: u32,
    free_bw: u32,
    state: ExtState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtFree {
    Freed,
    DoubleFree,
    InvalidFree,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExtError {
    /// The base is not a live mapping.
    Violation(ExtFree),
    Backing(BackingError),
}

impl From<BackingError> for ExtError {
    fn from(e: BackingError) -> Self {
        ExtError::Backing(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtAlloc {
    pub base: usize,
    /// Length of the mapping, at least the request.
    pub size: usize,
    /// Taken from the cache rather than freshly mapped.
    pub reused: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtInfo {
    pub base: usize,
    pub size: usize,
    pub state: ExtState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExtStats {
    pub live: usize,
    pub live_bytes: usize,
    pub cached: usize,
    pub cached_bytes: usize,
    pub entries: usize,
    pub maps: u64,
    pub reuses: u64,
    pub evictions: u64,
}

impl ExtStats {
    const ZERO: ExtStats = ExtStats {
        live: 0,
        live_bytes: 0,
        cached: 0,
        cached_bytes: 0,
        entries: 0,
        maps: 0,
        reuses: 0,
        evictions: 0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheCaps {
    pub max_entries: usize,
    pub max_bytes: usize,
}

impl CacheCaps {
    pub const DEFAULT: CacheCaps = CacheCaps {
        max_entries: CACHE_MAX_ENTRIES,
        max_bytes: CACHE_MAX_BYTES,
    };
}

impl Default for CacheCaps {
    fn default() -> Self {
        CacheCaps::DEFAULT
    }
}

/// Table of external mappings and the cache of freed ones.
///
/// Holds no backing of its own; every call names the backing that owns the
/// mappings. Mappings and table pages stay until [`ExternalTable::release_all`].
pub struct ExternalTable {
    arena: MetaArena,
    caps: CacheCaps,
    page: usize,
    dir: usize,
    len: u32,
    empty_head: u32,
    cache_head: u32,
    cache_tail: u32,
    seq: u64,
    index: RevLookup,
    stats: ExtStats,
}

impl ExternalTable {
    pub const fn new(caps: CacheCaps) -> ExternalTable {
        ExternalTable {
            arena: MetaArena::new(),
            caps,
            page: UNIT,
            dir: 0,
            len: 0,
            empty_head: NIL,
            cache_head: NIL,
            cache_tail: NIL,
            seq: 0,
            index: RevLookup::new(UNIT / std::mem::size_of::<usize>()),
            stats: ExtStats::ZERO,
        }
    }

    pub fn stats(&self) -> ExtStats {
        ExtStats {
            entries: self.len as usize,
            ..self.stats
        }
    }

    pub fn meta_pages(&self) -> usize {
        self.arena.pages()
    }

    fn per_page(&self) -> usize {
        self.page / std::mem::size_of::<ExternalEntry>()
    }

    fn capacity(&self) -> usize {
        self.per_page() * (self.page / std::mem::size_of::<usize>())
    }

    #[allow(clippy::mut_from_ref)]
    fn entry(&self, i: u32) -> &mut ExternalEntry {
        let per = self.per_page();
        debug_assert!(i < self.len);
        // SAFETY: i < len, so its page exists; the table is only reached
        // through `&mut self` or under the caller's lock.
        unsafe {
            let page = *(self.dir as *const usize).add(i as usize / per);
            &mut *(page as *mut ExternalEntry).add(i as usize % per)
        }
    }

    fn new_entry<B: Backing + ?Sized>(&mut self, backing: &B) -> Result<u32, BackingError> {
        if self.empty_head != NIL {
            let i = self.empty_head;
            self.empty_head = self.entry(i).free_fw;
            return Ok(i);
        }
        if self.len as usize >= self.capacity() {
            return Err(BackingError::HeapExhausted {
                watermark: self.len as usize,
                requested: 1,
                reserved: self.capacity(),
            });
        }
        if self.dir == 0 {
            self.dir = self.arena.page(backing)?;
        }
        let per = self.per_page();
        if (self.len as usize).is_multiple_of(per) {
            let page = self.arena.page(backing)?;
            // SAFETY: directory slot below capacity.
            unsafe { *(self.dir as *mut usize).add(self.len as usize / per) = page };
        }
        self.len += 1;
        Ok(self.len - 1)
    }

    fn find(&self, base: usize) -> Option<u32> {
        if !base.is_multiple_of(self.page) {
            return None;
        }
        match self.index.get(base / self.page) {
            0 => None,
            v => Some((v - 1) as u32),
        }
    }

    fn index_insert<B: Backing + ?Sized>(&mut self, base: usize, i: u32, backing: &B) -> Result<(), BackingError> {
        let arena = &mut self.arena;
        // SAFETY: the table is the only writer; pages come zeroed from the arena.
        unsafe {
            self.index
                .insert(base / self.page, i as usize + 1, &mut || arena.page(backing))
        }
    }

    fn retire(&mut self, i: u32) {
        let e = self.entry(i);
        let base = e.base;
        *e = ExternalEntry {
            base: 0,
            size: 0,
            cached_seq: 0,
            free_fw: self.empty_head,
            free_bw: NIL,
            state: ExtState::Empty,
        };
        self.empty_head = i;
        // SAFETY: single writer.
        unsafe { self.index.remove(base / self.page) };
    }

    fn cache_unlink(&mut self, i: u32) {
        let (fw, bw) = {
            let e = self.entry(i);
            (e.free_fw, e.free_bw)
        };
        if bw == NIL {
            self.cache_head = fw;
        } else {
            self.entry(bw).free_fw = fw;
        }
        if fw == NIL {
            self.cache_tail = bw;
        } else {
            self.entry(fw).free_bw = bw;
        }
        let e = self.entry(i);
        e.free_fw = NIL;
        e.free_bw = NIL;
        let size = e.size;
        self.stats.cached -= 1;
        self.stats.cached_bytes -= size;
    }

    /// Links `i` after every cached entry at least as large.
    fn cache_insert(&mut self, i: u32) {
        let size = self.entry(i).size;
        let mut after = self.cache_tail;
        while after != NIL && self.entry(after).size < size {
            after = self.entry(after).free_bw;
        }
        let before = if after == NIL { self.cache_head } else { self.entry(after).free_fw };
        {
            let e = self.entry(i);
            e.free_bw = after;
            e.free_fw = before;
        }
        if after == NIL {
            self.cache_head = i;
        } else {
            self.entry(after).free_fw = i;
        }
        if before == NIL {
            self.cache_tail = i;
        } else {
            self.entry(before).free_bw = i;
        }
        self.stats.cached += 1;
        self.stats.cached_bytes += size;
    }

    /// Maps or reuses at least `size` bytes (a page multiple).
    pub fn alloc<B: Backing + ?Sized>(&mut self, backing: &B, size: usize) -> Result<ExtAlloc, BackingError> {
        debug_assert!(size > 0 && size.is_multiple_of(self.page));
        // Smallest adequate entry: walk up from the small end.
        let mut cur = self.cache_tail;
        while cur != NIL && self.entry(cur).size < size {
            cur = self.entry(cur).free_bw;
        }
        if cur != NIL && self.entry(cur).size / 2 < size {
            self.cache_unlink(cur);
            let e = self.entry(cur);
            e.state = ExtState::InUse;
            let (base, got) = (e.base, e.size);
            self.stats.live += 1;
            self.stats.live_bytes += got;
            self.stats.reuses += 1;
            return Ok(ExtAlloc { base, size: got, reused: true });
        }

        let base = backing.map_external(size)?;
        let i = match self.new_entry(backing) {
            Ok(i) => i,
            Err(e) => {
                let _ = backing.unmap_external(base, size);
                return Err(e);
            }
        };
        *self.entry(i) = ExternalEntry {
            base,
            size,
            cached_seq: 0,
            free_fw: NIL,
            free_bw: NIL,
            state: ExtState::InUse,
        };
        if let Err(e) = self.index_insert(base, i, backing) {
            self.retire(i);
            let _ = backing.unmap_external(base, size);
            return Err(e);
        }
        self.stats.live += 1;
        self.stats.live_bytes += size;
        self.stats.maps += 1;
        Ok(ExtAlloc { base, size, reused: false })
    }

    pub fn free<B: Backing + ?Sized>(&mut self, backing: &B, base: usize) -> ExtFree {
        let Some(i) = self.find(base) else {
            return ExtFree::InvalidFree;
        };
        let e = self.entry(i);
        match e.state {
            ExtState::Cached => return ExtFree::DoubleFree,
            ExtState::Empty => return ExtFree::InvalidFree,
            ExtState::InUse => {}
        }
        let seq = self.seq + 1;
        e.state = ExtState::Cached;
        e.cached_seq = seq;
        let size = e.size;
        self.seq = seq;
        self.stats.live -= 1;
        self.stats.live_bytes -= size;
        self.cache_insert(i);
        while self.stats.cached > self.caps.max_entries || self.stats.cached_bytes > self.caps.max_bytes {
            self.evict_oldest(backing);
        }
        ExtFree::Freed
    }

    fn evict_oldest<B: Backing + ?Sized>(&mut self, backing: &B) {
        let mut cur = self.cache_head;
        let mut oldest = NIL;
        while cur != NIL {
            if oldest == NIL || self.entry(cur).cached_seq < self.entry(oldest).cached_seq {
                oldest = cur;
            }
            cur = self.entry(cur).free_fw;
        }
        self.cache_unlink(oldest);
        let (base, size) = (self.entry(oldest).base, self.entry(oldest).size);
        let _ = backing.unmap_external(base, size);
        self.retire(oldest);
        self.stats.evictions += 1;
    }

    /// Resizes a live mapping to `new_size` bytes (a page multiple).
    pub fn realloc<B: Backing + ?Sized>(
        &mut self,
        backing: &B,
        base: usize,
        new_size: usize,
    ) -> Result<usize, ExtError> {
        let i = self.find(base).ok_or(ExtError::Violation(ExtFree::InvalidFree))?;
        let e = *self.entry(i);
        if e.state != ExtState::InUse {
            return Err(ExtError::Violation(ExtFree::InvalidFree));
        }
        if new_size == e.size {
            return Ok(base);
        }
        let moved = backing.remap_external(base, e.size, new_size)?;
        if moved != base {
            // SAFETY: single writer.
            unsafe { self.index.remove(base / self.page) };
            if let Err(err) = self.index_insert(moved, i, backing) {
                // Entry stays reachable through its old key only; drop it.
                let _ = backing.unmap_external(moved, new_size);
                self.stats.live -= 1;
                self.stats.live_bytes -= e.size;
                let slot = self.entry(i);
                slot.base = moved;
                self.retire(i);
                return Err(err.into());
            }
        }
        let slot = self.entry(i);
        slot.base = moved;
        slot.size = new_size;
        self.stats.live_bytes = self.stats.live_bytes - e.size + new_size;
        Ok(moved)
    }

    /// The entry whose mapping starts at `base`.
    pub fn lookup(&self, base: usize) -> Option<ExtInfo> {
        let i = self.find(base)?;
        let e = self.entry(i);
        Some(ExtInfo {
            base: e.base,
            size: e.size,
            state: e.state,
        })
    }

    /// The non-empty entry whose mapping contains `addr`. Linear; for
    /// diagnostics only.
    pub fn containing(&self, addr: usize) -> Option<ExtInfo> {
        (0..self.len).map(|i| self.entry(i)).find_map(|e| {
            (e.state != ExtState::Empty && addr >= e.base && addr < e.base + e.size).then_some(ExtInfo {
                base: e.base,
                size: e.size,
                state: e.state,
            })
        })
    }

    /// Cache coherence, caps and index agreement.
    pub fn check(&self) -> Result<(), String> {
        let mut cached = 0usize;
        let mut cached_bytes = 0;
        let mut live = 0;
        let mut live_bytes = 0;
        for i in 0..self.len {
            let e = self.entry(i);
            match e.state {
                ExtState::Empty => continue,
                ExtState::InUse => {
                    live += 1;
                    live_bytes += e.size;
                }
                ExtState::Cached => {
                    cached += 1;
                    cached_bytes += e.size;
                }
            }
            if self.find(e.base) != Some(i) {
                return Err(format!("entry {i} not indexed by its base {:#x}", e.base));
            }
        }
        let mut walked = 0usize;
        let mut last = usize::MAX;
        let mut prev = NIL;
        let mut cur = self.cache_head;
        while cur != NIL {
            let e = self.entry(cur);
            if e.state != ExtState::Cached {
                return Err(format!("cache list holds entry {cur} in state {:?}", e.state));
            }
            if e.size > last {
                return Err("cache list out of order".into());
            }
            if e.free_bw != prev {
                return Err(format!("cache back link broken at entry {cur}"));
            }
            last = e.size;
            prev = cur;
            walked += 1;
            if walked > self.len as usize {
                return Err("cache list cycles".into());
            }
            cur = e.free_fw;
        }
        if prev != self.cache_tail {
            return Err("cache tail mismatch".into());
        }
        if walked != cached || cached != self.stats.cached || cached_bytes != self.stats.cached_bytes {
            return Err(format!(
                "cache counts: walked {walked}, cached {cached}, recorded {}",
                self.stats.cached
            ));
        }
        if live != self.stats.live || live_bytes != self.stats.live_bytes {
            return Err("live counters disagree with entries".into());
        }
        if cached > self.caps.max_entries || cached_bytes > self.caps.max_bytes {
            return Err("cache over its caps".into());
        }
        Ok(())
    }

    /// Unmaps every mapping and returns the table's pages.
    ///
    /// # Safety
    /// No mapping or entry may be used afterwards.
    pub unsafe fn release_all<B: Backing + ?Sized>(&mut self, backing: &B) {
        for i in 0..self.len {
            let e = *self.entry(i);
            if e.state != ExtState::Empty {
                let _ = backing.unmap_external(e.base, e.size);
            }
        }
        self.arena.release_all(backing);
        *self = ExternalTable::new(self.caps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backing::ArenaBacking;
    use proptest::prelude::*;
    use std::collections::{BTreeMap, VecDeque};

    const P: usize = 4096;

    fn table() -> (ArenaBacking, ExternalTable) {
        (ArenaBacking::new(1 << 20), ExternalTable::new(CacheCaps::default()))
    }

    #[test]
    fn first_alloc_is_fresh() {
        let (b, mut t) = table();
        let a = t.alloc(&b, 131072).unwrap();
        assert!(!a.reused);
        assert_eq!(t.stats().live, 1);
        assert_eq!(t.lookup(a.base).unwrap().state, ExtState::InUse);
        t.check().unwrap();
    }

    #[test]
    fn reuse_within_slack() {
        let (b, mut t) = table();
        let a = t.alloc(&b, 262144).unwrap();
        assert_eq!(t.free(&b, a.base), ExtFree::Freed);
        let c = t.alloc(&b, 200704).unwrap();
        assert!(c.reused);
        assert_eq!((c.base, c.size), (a.base, 262144));
        t.check().unwrap();
    }

    #[test]
    fn slack_bound_forces_fresh_map() {
        let (b, mut t) = table();
        let a = t.alloc(&b, 1 << 20).unwrap();
        t.free(&b, a.base);
        let c = t.alloc(&b, 131072).unwrap();
        assert!(!c.reused);
        assert_ne!(c.base, a.base);
        assert_eq!(t.stats().cached, 1);
    }

    #[test]
    fn double_and_interior_free() {
        let (b, mut t) = table();
        let a = t.alloc(&b, 131072).unwrap();
        assert_eq!(t.free(&b, a.base + 4096), ExtFree::InvalidFree);
        assert_eq!(t.free(&b, a.base), ExtFree::Freed);
        assert_eq!(t.lookup(a.base).unwrap().state, ExtState::Cached);
        assert_eq!(t.free(&b, a.base), ExtFree::DoubleFree);
        assert_eq!(t.free(&b, 0x1000), ExtFree::InvalidFree);
    }

    #[test]
    fn realloc_preserves_content() {
        let (b, mut t) = table();
        let a = t.alloc(&b, 131072).unwrap();
        unsafe { std::ptr::write_bytes(a.base as *mut u8, 0x5a, 131072) };
        let grown = t.realloc(&b, a.base, 262144).unwrap();
        let bytes = unsafe { std::slice::from_raw_parts(grown as *const u8, 131072) };
        assert!(bytes.iter().all(|&x| x == 0x5a));
        assert_eq!(t.lookup(grown).unwrap().size, 262144);
        let shrunk = t.realloc(&b, grown, 131072).unwrap();
        assert_eq!(t.lookup(shrunk).unwrap().size, 131072);
        t.free(&b, shrunk);
        assert_eq!(
            t.realloc(&b, shrunk, 262144),
            Err(ExtError::Violation(ExtFree::InvalidFree))
        );
        t.check().unwrap();
    }

    #[test]
    fn eviction_is_fifo() {
        let (b, mut t) = table();
        let bases: Vec<usize> = (0..17).map(|_| t.alloc(&b, 131072).unwrap().base).collect();
        for &base in &bases {
            t.free(&b, base);
        }
        assert_eq!(t.stats().cached, 16);
        assert_eq!(t.stats().evictions, 1);
        assert!(t.lookup(bases[0]).is_none());
        assert_eq!(t.lookup(bases[1]).unwrap().state, ExtState::Cached);
        // A mapping above the byte cap is evicted on the spot.
        let huge = t.alloc(&b, 65 << 20).unwrap();
        t.free(&b, huge.base);
        assert!(t.lookup(huge.base).is_none());
        t.check().unwrap();
    }

    #[test]
    fn entry_table_grows_past_one_page() {
        let (b, mut t) = table();
        let bases: Vec<usize> = (0..250).map(|_| t.alloc(&b, 131072).unwrap().base).collect();
        assert_eq!(t.stats().entries, 250);
        for &base in &bases {
            assert_eq!(t.lookup(base).unwrap().base, base);
        }
        t.check().unwrap();
        unsafe { t.release_all(&b) };
        assert_eq!(b.mapped_bytes(), 0);
    }

    /// Reference model: live map plus a FIFO of cached (base, size).
    #[derive(Default)]
    struct Model {
        live: BTreeMap<usize, usize>,
        cache: VecDeque<(usize, usize)>,
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn matches_cache_model(ops in prop::collection::vec((0u8..4, 1usize..80, any::<u16>()), 1..60)) {
            let b = ArenaBacking::new(1 << 20);
            let caps = CacheCaps { max_entries: 4, max_bytes: 96 * P };
            let mut t = ExternalTable::new(caps);
            let mut m = Model::default();
            for (op, pages, pick) in ops {
                let size = pages * P;
                match op {
                    0 | 1 => {
                        let best = m.cache.iter().enumerate()
                            .filter(|(_, &(_, s))| s >= size)
                            .min_by_key(|(_, &(_, s))| s)
                            .map(|(k, &(base, s))| (k, base, s))
                            .filter(|&(_, _, s)| s < 2 * size);
                        let got = t.alloc(&b, size).unwrap();
                        prop_assert!(!m.live.contains_key(&got.base), "double issue");
                        match best {
                            Some((_, _, s)) => {
                                prop_assert!(got.reused);
                                prop_assert_eq!(got.size, s);
                                let k = m.cache.iter().position(|&(base, _)| base == got.base).unwrap();
                                m.cache.remove(k);
                            }
                            None => prop_assert!(!got.reused),
                        }
                        m.live.insert(got.base, got.size);
                    }
                    2 if !m.live.is_empty() => {
                        let base = *m.live.keys().nth(pick as usize % m.live.len()).unwrap();
                        prop_assert_eq!(t.free(&b, base), ExtFree::Freed);
                        let size = m.live.remove(&base).unwrap();
                        m.cache.push_back((base, size));
                        while m.cache.len() > caps.max_entries
                            || m.cache.iter().map(|c| c.1).sum::<usize>() > caps.max_bytes
                        {
                            m.cache.pop_front();
                        }
                    }
                    _ => {
                        if let Some(&(base, _)) = m.cache.get(pick as usize % m.cache.len().max(1)) {
                            prop_assert_eq!(t.free(&b, base), ExtFree::DoubleFree);
                        }
                    }
                }
                if let Err(e) = t.check() {
                    return Err(TestCaseError::fail(e));
                }
                prop_assert_eq!(t.stats().cached, m.cache.len());
                prop_assert_eq!(t.stats().live, m.live.len());
            }
        }
    }
}
