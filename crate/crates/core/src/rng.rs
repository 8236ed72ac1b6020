//! Counter-based random source for stochastic rounding.
//!
//! Every draw is a pure function of `(seed, element index, update counter)`,
//! so re-splitting a tensor produces the same bits regardless of iteration
//! order or thread assignment. This is what makes stochastic-mode runs
//! reproducible and lets tests replay the exact draws of an update.

/// Stateless seeded generator; draws are keyed, never sequenced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CounterRng {
    seed: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const STIR: u64 = 0xC2B2_AE3D_27D4_EB4F;

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform 64-bit word for (element `index`, update `counter`).
    pub fn word(&self, index: u64, counter: u64) -> u64 {
        // splitmix64 finalizer over a keyed offset; the additive constants
        // keep the all-zero key away from the finalizer's 0 -> 0 fixed point.
        let mut z = self
            .seed
            .wrapping_add(GOLDEN)
            .wrapping_add(index.wrapping_mul(STIR | 1))
            .wrapping_add(counter.wrapping_mul(GOLDEN | 1));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}
