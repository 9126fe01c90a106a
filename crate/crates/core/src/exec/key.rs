//! Splittable 128-bit random keys.
//!
//! A key never produces randomness by itself mutating; instead children are
//! derived with [`RngKey::fold_in`], a keyed mixing function of `(key, index)`:
//!
//! ```text
//! lo' = mix(lo ^ mix(hi + index * G))
//! hi' = mix(hi ^ rotl(lo', 32) ^ C)
//! ```
//!
//! where `mix` is the SplitMix64 finalizer (a bijection on `u64`), `G` is the
//! 64-bit golden-ratio constant and `C` a fixed odd constant. For a fixed parent
//! key, `index -> lo'` is a composition of bijections, so distinct indices always
//! yield distinct children. Derivation never depends on call order, which is what
//! lets batched and sequential executions agree bitwise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const HI_SALT: u64 = 0xD1B5_4A32_D192_ED03;
const SEED_SALT: u64 = 0x8CB9_2BA7_2F3D_8DD7;

/// SplitMix64 finalizer.
#[inline]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator type handed out by [`RngKey::rng`].
pub type KeyRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RngKey {
    hi: u64,
    lo: u64,
}

impl RngKey {
    pub fn from_seed(seed: u64) -> Self {
        let lo = mix64(seed ^ GOLDEN);
        let hi = mix64(lo ^ HI_SALT);
        RngKey { hi, lo }
    }

    pub fn from_u128(v: u128) -> Self {
        RngKey {
            hi: (v >> 64) as u64,
            lo: v as u64,
        }
    }

    pub fn to_u128(self) -> u128 {
        ((self.hi as u128) << 64) | self.lo as u128
    }

    /// Low 64 bits of the key value.
    pub fn low64(self) -> u64 {
        self.lo
    }

    #[inline]
    pub fn fold_in(self, index: u64) -> Self {
        let lo = mix64(self.lo ^ mix64(self.hi.wrapping_add(index.wrapping_mul(GOLDEN))));
        let hi = mix64(self.hi ^ lo.rotate_left(32) ^ HI_SALT);
        RngKey { hi, lo }
    }

    /// `split(n)[i] == fold_in(i)`.
    pub fn split(self, n: usize) -> Vec<Self> {
        (0..n as u64).map(|i| self.fold_in(i)).collect()
    }

    /// A stream generator seeded from this key.
    pub fn rng(self) -> KeyRng {
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&self.lo.to_le_bytes());
        seed[8..16].copy_from_slice(&self.hi.to_le_bytes());
        seed[16..24].copy_from_slice(&mix64(self.lo ^ SEED_SALT).to_le_bytes());
        seed[24..].copy_from_slice(&mix64(self.hi ^ SEED_SALT.rotate_left(17)).to_le_bytes());
        ChaCha8Rng::from_seed(seed)
    }
}
