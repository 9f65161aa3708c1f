//! 64-bit FNV-1a, used wherever a hash must be stable across processes,
//! platforms and implementation languages (split assignment, layout and
//! vocabulary fingerprints).
//!
//! Test vectors (from the reference FNV test suite):
//!
//! | input    | FNV-1a 64          |
//! |----------|--------------------|
//! | `""`     | `cbf29ce484222325` |
//! | `"a"`    | `af63dc4c8601ec8c` |
//! | `"foobar"` | `85944171f73967e8` |

const OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const PRIME: u64 = 0x0000_0100_0000_01b3;

/// Incremental FNV-1a hasher.
#[derive(Debug, Clone, Copy)]
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a(OFFSET_BASIS)
    }
}

impl Fnv1a {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write(&mut self, bytes: &[u8]) -> &mut Self {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(PRIME);
        }
        self
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    Fnv1a::new().write(bytes).finish()
}

/// MurmurHash3 `fmix64` finalizer. FNV-1a alone leaves the high bits nearly
/// unchanged when inputs differ only in their last bytes.
pub fn fmix64(mut k: u64) -> u64 {
    k ^= k >> 33;
    k = k.wrapping_mul(0xff51_afd7_ed55_8ccd);
    k ^= k >> 33;
    k = k.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    k ^ (k >> 33)
}
