//! Fixed bins: one availability bit per block.
//!
//! The bitmap is generic over its word type so the same logic runs with
//! 16-bit words (the narrowest width the layout allows) and with the native
//! 64-bit word the allocator uses.

use std::fmt::Debug;

use crate::config::CELLS_PER_BIN;

/// Unsigned word usable as a bitmap chunk.
pub trait BitWord: Copy + Eq + Debug + Send + 'static {
    const BITS: u32;
    const ZERO: Self;
    const ONES: Self;
    fn trailing_zeros(self) -> u32;
    fn count_ones(self) -> u32;
    fn bit(index: u32) -> Self;
    fn and(self, other: Self) -> Self;
    fn or(self, other: Self) -> Self;
    fn not(self) -> Self;
}

macro_rules! bit_word {
    ($($t:ty),*) => {$(
        impl BitWord for $t {
            const BITS: u32 = <$t>::BITS;
            const ZERO: Self = 0;
            const ONES: Self = <$t>::MAX;
            #[inline]
            fn trailing_zeros(self) -> u32 { <$t>::trailing_zeros(self) }
            #[inline]
            fn count_ones(self) -> u32 { <$t>::count_ones(self) }
            #[inline]
            fn bit(index: u32) -> Self { 1 << index }
            #[inline]
            fn and(self, other: Self) -> Self { self & other }
            #[inline]
            fn or(self, other: Self) -> Self { self | other }
            #[inline]
            fn not(self) -> Self { !self }
        }
    )*};
}

bit_word!(u16, u32, u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixedFree {
    Freed,
    DoubleFree,
}

/// Free-block bitmap of one fixed bin, with its counters.
///
/// `free_head` is the exact index of the first word holding a set bit, or
/// `N` once the bin is full.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreeBitmap<W: BitWord, const N: usize> {
    words: [W; N],
    free_cnt: u32,
    free_head: u32,
}

/// Width used by the allocator itself.
pub type NativeBitmap = FreeBitmap<u64, 16>;

impl<W: BitWord, const N: usize> FreeBitmap<W, N> {
    const COVERS_BIN: () = assert!(N * W::BITS as usize == CELLS_PER_BIN);

    /// All 1024 blocks free.
    pub fn new() -> Self {
        #[allow(clippy::let_unit_value)]
        let () = Self::COVERS_BIN;
        FreeBitmap {
            words: [W::ONES; N],
            free_cnt: CELLS_PER_BIN as u32,
            free_head: 0,
        }
    }

    pub fn free_cnt(&self) -> u32 {
        self.free_cnt
    }

    pub fn free_head(&self) -> u32 {
        self.free_head
    }

    pub fn words(&self) -> &[W] {
        &self.words
    }

    pub fn is_full(&self) -> bool {
        self.free_cnt == 0
    }

    pub fn is_pristine(&self) -> bool {
        self.free_cnt == CELLS_PER_BIN as u32
    }

    pub fn is_free(&self, index: u32) -> bool {
        let (w, b) = Self::split(index);
        self.words[w].and(W::bit(b)) != W::ZERO
    }

    #[inline]
    fn split(index: u32) -> (usize, u32) {
        ((index / W::BITS) as usize, index % W::BITS)
    }

    /// Takes the lowest free block, or `None` when the bin is full.
    pub fn alloc(&mut self) -> Option<u32> {
        if self.free_cnt == 0 {
            return None;
        }
        let w = self.free_head as usize;
        let word = self.words[w];
        debug_assert!(word != W::ZERO);
        let b = word.trailing_zeros();
        let word = word.and(W::bit(b).not());
        self.words[w] = word;
        self.free_cnt -= 1;
        if word == W::ZERO {
            self.free_head = if self.free_cnt == 0 {
                N as u32
            } else {
                let next = self.words[w + 1..]
                    .iter()
                    .position(|&x| x != W::ZERO)
                    .expect("free_cnt > 0 implies a set bit past free_head");
                (w + 1 + next) as u32
            };
        }
        Some(w as u32 * W::BITS + b)
    }

    /// Marks block `index` free.
    pub fn free(&mut self, index: u32) -> FixedFree {
        debug_assert!((index as usize) < CELLS_PER_BIN);
        let (w, b) = Self::split(index);
        let mask = W::bit(b);
        if self.words[w].and(mask) != W::ZERO {
            return FixedFree::DoubleFree;
        }
        self.words[w] = self.words[w].or(mask);
        self.free_cnt += 1;
        self.free_head = self.free_head.min(w as u32);
        FixedFree::Freed
    }

    /// Checks popcount and free_head against the words.
    pub fn check(&self) -> Result<(), String> {
        let pop: u32 = self.words.iter().map(|w| w.count_ones()).sum();
        if pop != self.free_cnt {
            return Err(format!("popcount {pop} != free_cnt {}", self.free_cnt));
        }
        let first = self
            .words
            .iter()
            .position(|&w| w != W::ZERO)
            .unwrap_or(N) as u32;
        if first != self.free_head {
            return Err(format!(
                "free_head {} but first set word is {first}",
                self.free_head
            ));
        }
        Ok(())
    }
}

impl<W: BitWord, const N: usize> Default for FreeBitmap<W, N> {
    fn default() -> Self {
        Self::new()
    }
}
