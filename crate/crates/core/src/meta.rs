//! Bump allocation of metadata records out of granted pages.
//!
//! Records are never freed individually; every grant is remembered in a
//! chain of ledger pages so the whole arena can be returned on teardown.

use crate::backing::{Backing, BackingError};

/// One ledger entry: (address, page count). Slot 0 of each ledger page links
/// to the previous ledger page.
const LEDGER_ENTRY: usize = 2 * std::mem::size_of::<usize>();

#[derive(Debug, Default)]
pub(crate) struct MetaArena {
    cursor: usize,
    limit: usize,
    ledger: usize,
    ledger_used: usize,
    pages: usize,
}

impl MetaArena {
    pub(crate) const fn new() -> MetaArena {
        MetaArena {
            cursor: 0,
            limit: 0,
            ledger: 0,
            ledger_used: 0,
            pages: 0,
        }
    }

    /// Pages obtained from the backing so far, ledger pages included.
    pub(crate) fn pages(&self) -> usize {
        self.pages
    }

    fn grant<B: Backing + ?Sized>(&mut self, backing: &B, count: usize) -> Result<usize, BackingError> {
        let page = backing.page_size();
        if self.ledger == 0 || self.ledger_used + LEDGER_ENTRY > page {
            let fresh = backing.grant_pages(1)?;
            self.pages += 1;
            // SAFETY: fresh page; slot 0 holds the back link.
            unsafe { *(fresh.addr as *mut usize) = self.ledger };
            self.ledger = fresh.addr;
            self.ledger_used = LEDGER_ENTRY;
        }
        let grant = backing.grant_pages(count)?;
        self.pages += count;
        // SAFETY: ledger_used + LEDGER_ENTRY <= page, checked above.
        unsafe {
            let slot = (self.ledger + self.ledger_used) as *mut usize;
            *slot = grant.addr;
            *slot.add(1) = count;
        }
        self.ledger_used += LEDGER_ENTRY;
        Ok(grant.addr)
    }

    /// Zeroed memory for a record of `size` bytes at `align`.
    ///
    /// Requests of a page or more get their own page-aligned grant.
    pub(crate) fn alloc<B: Backing + ?Sized>(
        &mut self,
        backing: &B,
        size: usize,
        align: usize,
    ) -> Result<usize, BackingError> {
        let page = backing.page_size();
        debug_assert!(align.is_power_of_two() && align <= page);
        if size >= page {
            return self.grant(backing, size.div_ceil(page));
        }
        let start = (self.cursor + align - 1) & !(align - 1);
        if self.cursor == 0 || start + size > self.limit {
            let addr = self.grant(backing, 1)?;
            self.cursor = addr + size;
            self.limit = addr + page;
            return Ok(addr);
        }
        self.cursor = start + size;
        Ok(start)
    }

    /// One whole zeroed page.
    pub(crate) fn page<B: Backing + ?Sized>(&mut self, backing: &B) -> Result<usize, BackingError> {
        self.grant(backing, 1)
    }

    /// Returns every grant to the backing.
    ///
    /// # Safety
    /// No record handed out by this arena may be used afterwards.
    pub(crate) unsafe fn release_all<B: Backing + ?Sized>(&mut self, backing: &B) {
        let mut ledger = self.ledger;
        let mut used = self.ledger_used;
        let page = backing.page_size();
        while ledger != 0 {
            let mut off = LEDGER_ENTRY;
            while off < used {
                let slot = (ledger + off) as *const usize;
                let _ = backing.release_pages(*slot, *slot.add(1));
                off += LEDGER_ENTRY;
            }
            let prev = *(ledger as *const usize);
            let _ = backing.release_pages(ledger, 1);
            ledger = prev;
            used = page;
        }
        *self = MetaArena::new();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backing::ArenaBacking;

    #[test]
    fn packs_small_records_and_isolates_large() {
        let backing = ArenaBacking::new(1 << 20);
        let mut arena = MetaArena::new();
        let a = arena.alloc(&backing, 300, 64).unwrap();
        let b = arena.alloc(&backing, 300, 64).unwrap();
        assert_eq!(b, a + 320);
        // ledger page + one record page
        assert_eq!(arena.pages(), 2);
        let big = arena.alloc(&backing, 4096, 64).unwrap();
        assert_eq!(big % 4096, 0);
        assert_eq!(arena.pages(), 3);
        let c = arena.alloc(&backing, 300, 64).unwrap();
        assert_eq!(c, b + 320);
        assert!(backing.check_access(a, 300).is_ok());
        unsafe { arena.release_all(&backing) };
        assert_eq!(backing.mapped_bytes(), 0);
        assert!(backing.check_access(a, 8).is_err());
    }

    #[test]
    fn ledger_chains_across_pages() {
        let backing = ArenaBacking::new(1 << 20);
        let mut arena = MetaArena::new();
        for _ in 0..600 {
            arena.page(&backing).unwrap();
        }
        // 255 entries per ledger page -> 3 ledger pages
        assert_eq!(arena.pages(), 603);
        unsafe { arena.release_all(&backing) };
        assert_eq!(backing.mapped_bytes(), 0);
    }
}
