//! Stable 64-bit FNV-1a hashing for fingerprints and config hashes.
//!
//! `std`'s default hasher is randomized per process for `HashMap` use; run
//! logs and mapping fingerprints need a hash that is stable across runs and
//! platforms, so we keep a tiny FNV-1a here instead.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Incremental FNV-1a hasher over byte chunks.
#[derive(Debug, Clone)]
pub struct Fnv64(u64);

impl Fnv64 {
    pub fn new() -> Self {
        Fnv64(FNV_OFFSET)
    }

    pub fn update(&mut self, bytes: &[u8]) -> &mut Self {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
        self
    }

    /// Feeds a string plus a separator byte, so `("ab","c")` and `("a","bc")`
    /// hash differently.
    pub fn update_str(&mut self, s: &str) -> &mut Self {
        self.update(s.as_bytes());
        self.update(&[0xff]);
        self
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv64 {
    fn default() -> Self {
        Self::new()
    }
}

/// One-shot hash of a byte slice.
pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut h = Fnv64::new();
    h.update(bytes);
    h.finish()
}
