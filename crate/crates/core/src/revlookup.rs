//! Reverse lookup from a bin-span index to its bin record.
//!
//! A radix tree of word tables. The root word packs the top table's address
//! with the tree depth in its low 4 bits. Digits are taken most significant
//! first, so a deeper tree is the old tree hung under slot 0 of a new root.
//!
//! One writer at a time (the caller serializes); readers never lock. A slot
//! of 0 means absent. Tables are never freed while the tree is alive.

use std::sync::atomic::{AtomicUsize, Ordering};

const DEPTH_MASK: usize = 0xf;

pub struct RevLookup {
    root: AtomicUsize,
    fanout: usize,
}

impl RevLookup {
    /// `fanout` slots per table; tables must be `fanout` words, zeroed and
    /// at least 16-byte aligned.
    pub const fn new(fanout: usize) -> RevLookup {
        RevLookup {
            root: AtomicUsize::new(0),
            fanout,
        }
    }

    pub fn fanout(&self) -> usize {
        self.fanout
    }

    pub fn depth(&self) -> usize {
        self.root.load(Ordering::Acquire) & DEPTH_MASK
    }

    /// Number of indexes a tree of `depth` covers.
    fn capacity(&self, depth: usize) -> usize {
        self.fanout.checked_pow(depth as u32).unwrap_or(usize::MAX)
    }

    #[inline]
    unsafe fn slot<'t>(table: usize, i: usize) -> &'t AtomicUsize {
        &*(table as *const AtomicUsize).add(i)
    }

    pub fn get(&self, index: usize) -> usize {
        let root = self.root.load(Ordering::Acquire);
        if root == 0 {
            return 0;
        }
        let depth = root & DEPTH_MASK;
        if index >= self.capacity(depth) {
            return 0;
        }
        let mut table = root & !DEPTH_MASK;
        let mut span = self.capacity(depth - 1);
        let mut rest = index;
        loop {
            let digit = rest / span;
            rest %= span;
            // SAFETY: table is a live table of `fanout` words; digit < fanout.
            let value = unsafe { Self::slot(table, digit) }.load(Ordering::Acquire);
            if span == 1 || value == 0 {
                return value;
            }
            table = value;
            span /= self.fanout;
        }
    }

    /// Stores `value` (non-zero) at `index`, growing the tree as needed.
    ///
    /// # Safety
    /// Callers must serialize writers. `new_table` must return zeroed,
    /// 16-byte aligned storage of `fanout` words that outlives the tree.
    pub unsafe fn insert<E>(
        &self,
        index: usize,
        value: usize,
        new_table: &mut dyn FnMut() -> Result<usize, E>,
    ) -> Result<(), E> {
        debug_assert!(value != 0);
        let mut root = self.root.load(Ordering::Acquire);
        if root == 0 {
            let t = new_table()?;
            debug_assert!(t & DEPTH_MASK == 0);
            root = t | 1;
            self.root.store(root, Ordering::Release);
        }
        while index >= self.capacity(root & DEPTH_MASK) {
            assert!(root & DEPTH_MASK < DEPTH_MASK, "reverse lookup depth exhausted");
            let t = new_table()?;
            Self::slot(t, 0).store(root & !DEPTH_MASK, Ordering::Relaxed);
            root = t | ((root & DEPTH_MASK) + 1);
            self.root.swap(root, Ordering::AcqRel);
        }
        let mut table = root & !DEPTH_MASK;
        let mut span = self.capacity((root & DEPTH_MASK) - 1);
        let mut rest = index;
        loop {
            let digit = rest / span;
            rest %= span;
            let slot = Self::slot(table, digit);
            if span == 1 {
                slot.store(value, Ordering::Release);
                return Ok(());
            }
            let mut next = slot.load(Ordering::Acquire);
            if next == 0 {
                next = new_table()?;
                slot.store(next, Ordering::Release);
            }
            table = next;
            span /= self.fanout;
        }
    }

    /// Clears `index`. Interior tables stay in place.
    ///
    /// # Safety
    /// Callers must serialize writers.
    pub unsafe fn remove(&self, index: usize) {
        let root = self.root.load(Ordering::Acquire);
        if root == 0 || index >= self.capacity(root & DEPTH_MASK) {
            return;
        }
        let mut table = root & !DEPTH_MASK;
        let mut span = self.capacity((root & DEPTH_MASK) - 1);
        let mut rest = index;
        loop {
            let digit = rest / span;
            rest %= span;
            let slot = Self::slot(table, digit);
            if span == 1 {
                slot.store(0, Ordering::Release);
                return;
            }
            let next = slot.load(Ordering::Acquire);
            if next == 0 {
                return;
            }
            table = next;
            span /= self.fanout;
        }
    }

    /// Visits every present entry in index order.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let root = self.root.load(Ordering::Acquire);
        if root == 0 {
            return;
        }
        let depth = root & DEPTH_MASK;
        self.walk(root & !DEPTH_MASK, depth, 0, &mut f);
    }

    fn walk(&self, table: usize, depth: usize, base: usize, f: &mut dyn FnMut(usize, usize)) {
        let span = self.capacity(depth - 1);
        for digit in 0..self.fanout {
            // SAFETY: live table; digit < fanout.
            let value = unsafe { Self::slot(table, digit) }.load(Ordering::Acquire);
            if value == 0 {
                continue;
            }
            if depth == 1 {
                f(base + digit, value);
            } else {
                self.walk(value, depth - 1, base + digit * span, f);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;
    use std::sync::Arc;

    use std::alloc::{alloc_zeroed, dealloc, Layout};

    /// Owns every table handed to a tree under test.
    #[derive(Default)]
    struct Tables(Vec<(*mut u8, Layout)>);

    // SAFETY: the tables are plain memory owned by this struct.
    unsafe impl Send for Tables {}

    impl Tables {
        fn make(&mut self, fanout: usize) -> Result<usize, ()> {
            let layout = Layout::from_size_align(fanout * 8, 16).unwrap();
            // SAFETY: non-zero size.
            let ptr = unsafe { alloc_zeroed(layout) };
            assert!(!ptr.is_null());
            self.0.push((ptr, layout));
            Ok(ptr as usize)
        }
    }

    impl Drop for Tables {
        fn drop(&mut self) {
            for &(ptr, layout) in &self.0 {
                // SAFETY: allocated in `make` with this layout.
                unsafe { dealloc(ptr, layout) };
            }
        }
    }

    #[test]
    fn empty_and_single() {
        let mut tables = Tables::default();
        let tree = RevLookup::new(512);
        assert_eq!(tree.get(0), 0);
        unsafe { tree.insert(5, 77, &mut || tables.make(512)).unwrap() };
        assert_eq!(tree.depth(), 1);
        assert_eq!(tree.get(5), 77);
        assert_eq!(tree.get(6), 0);
        assert_eq!(tree.get(1 << 40), 0);
    }

    #[test]
    fn deepening_keeps_old_entries() {
        let mut tables = Tables::default();
        let tree = RevLookup::new(512);
        unsafe {
            tree.insert(3, 1, &mut || tables.make(512)).unwrap();
            tree.insert(512, 2, &mut || tables.make(512)).unwrap();
            assert_eq!(tree.depth(), 2);
            tree.insert(512 * 512 + 7, 3, &mut || tables.make(512)).unwrap();
        }
        assert_eq!(tree.depth(), 3);
        assert_eq!((tree.get(3), tree.get(512), tree.get(512 * 512 + 7)), (1, 2, 3));
        unsafe { tree.remove(512) };
        assert_eq!(tree.get(512), 0);
        let mut seen = Vec::new();
        tree.for_each(|i, v| seen.push((i, v)));
        assert_eq!(seen, vec![(3, 1), (512 * 512 + 7, 3)]);
    }

    #[test]
    fn readers_run_beside_writer() {
        let tables = Arc::new(parking_lot::Mutex::new(Tables::default()));
        let tree = Arc::new(RevLookup::new(8));
        let writer = {
            let (tree, tables) = (tree.clone(), tables.clone());
            std::thread::spawn(move || {
                for i in 0..4096usize {
                    unsafe {
                        tree.insert(i * 3, i + 1, &mut || tables.lock().make(8)).unwrap();
                    }
                }
            })
        };
        let reader = {
            let tree = tree.clone();
            std::thread::spawn(move || {
                for _ in 0..20 {
                    for i in 0..4096usize {
                        let v = tree.get(i * 3);
                        assert!(v == 0 || v == i + 1);
                        assert_eq!(tree.get(i * 3 + 1), 0);
                    }
                }
            })
        };
        writer.join().unwrap();
        reader.join().unwrap();
        for i in 0..4096usize {
            assert_eq!(tree.get(i * 3), i + 1);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn matches_map_oracle(
            fanout in prop::sample::select(vec![4usize, 16, 512]),
            ops in prop::collection::vec((any::<bool>(), 0usize..(1 << 20), 1usize..1000), 1..60),
        ) {
            let mut tables = Tables::default();
            let tree = RevLookup::new(fanout);
            let mut oracle = BTreeMap::new();
            for (ins, index, value) in ops {
                if ins {
                    unsafe { tree.insert(index, value, &mut || tables.make(fanout)).unwrap() };
                    oracle.insert(index, value);
                } else {
                    let victim = oracle.keys().next().copied().unwrap_or(index);
                    unsafe { tree.remove(victim) };
                    oracle.remove(&victim);
                }
                for (&i, &v) in &oracle {
                    prop_assert_eq!(tree.get(i), v);
                    prop_assert_eq!(tree.get(i ^ 1), oracle.get(&(i ^ 1)).copied().unwrap_or(0));
                }
            }
            let mut seen = Vec::new();
            tree.for_each(|i, v| seen.push((i, v)));
            prop_assert_eq!(seen, oracle.into_iter().collect::<Vec<_>>());
        }
    }
}
