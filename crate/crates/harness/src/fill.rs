//! Payload fill patterns.
//!
//! The first 8 bytes of a block hold a hash of (block id, generation); the
//! rest repeat one byte derived from that hash. Bleed from a neighbour and a
//! stale reissue both show up as mismatches.

/// splitmix64 finalizer.
pub fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pattern(pub u64);

impl Pattern {
    pub fn new(id: u64, generation: u64) -> Pattern {
        Pattern(mix(id ^ mix(generation)))
    }

    /// Never zero, so a pattern cannot pass for zeroed memory.
    fn body(self) -> u8 {
        (self.0 >> 40) as u8 | 1
    }

    fn head(self) -> [u8; 8] {
        self.0.to_le_bytes()
    }

    /// # Safety
    /// `p` is valid for `len` writable bytes.
    pub unsafe fn write(self, p: *mut u8, len: usize) {
        let n = len.min(8);
        std::ptr::copy_nonoverlapping(self.head().as_ptr(), p, n);
        if len > 8 {
            std::ptr::write_bytes(p.add(8), self.body(), len - 8);
        }
    }

    /// Offset of the first byte that differs from the pattern.
    ///
    /// # Safety
    /// `p` is valid for `len` readable bytes.
    pub unsafe fn check(self, p: *const u8, len: usize) -> Result<(), usize> {
        let bytes = std::slice::from_raw_parts(p, len);
        let n = len.min(8);
        if let Some(i) = (0..n).find(|&i| bytes[i] != self.head()[i]) {
            return Err(i);
        }
        if len <= 8 {
            return Ok(());
        }
        check_repeat(&bytes[8..], self.body()).map_err(|i| i + 8)
    }
}

/// Offset of the first byte of `bytes` that is not `b`.
pub fn check_repeat(bytes: &[u8], b: u8) -> Result<(), usize> {
    let word = u64::from_ne_bytes([b; 8]);
    let mut chunks = bytes.chunks_exact(8);
    for (i, c) in chunks.by_ref().enumerate() {
        if u64::from_ne_bytes(c.try_into().expect("8-byte chunk")) != word {
            let j = c.iter().position(|&x| x != b).expect("differing byte");
            return Err(i * 8 + j);
        }
    }
    let tail = bytes.len() / 8 * 8;
    match chunks.remainder().iter().position(|&x| x != b) {
        Some(j) => Err(tail + j),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_then_check() {
        for len in [0usize, 1, 7, 8, 9, 63, 64, 65, 4096] {
            let mut buf = vec![0u8; len];
            let p = Pattern::new(5, 2);
            unsafe {
                p.write(buf.as_mut_ptr(), len);
                assert_eq!(p.check(buf.as_ptr(), len), Ok(()));
            }
            if len > 0 {
                buf[len - 1] ^= 0x40;
                assert_eq!(unsafe { p.check(buf.as_ptr(), len) }, Err(len - 1));
            }
        }
    }

    #[test]
    fn generations_differ() {
        let mut buf = vec![0u8; 32];
        unsafe {
            Pattern::new(1, 0).write(buf.as_mut_ptr(), 32);
            assert_eq!(Pattern::new(1, 1).check(buf.as_ptr(), 32), Err(0));
        }
    }

    #[test]
    fn zeroed_memory_never_matches() {
        let buf = [0u8; 16];
        for id in 0..1000 {
            assert!(unsafe { Pattern::new(id, 0).check(buf.as_ptr(), 16) }.is_err());
        }
    }
}
