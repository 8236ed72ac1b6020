//! Tensor-level split-precision parameter storage.
//!
//! A [`SplitTensor`] keeps every element as a high word in the chosen
//! format plus `k` packed extra mantissa bits; in stochastic mode one more
//! bit per entry records whether the high word was rounded up. The tensor
//! is the drop-in replacement for an fp32 master copy: [`high_view`]
//! produces the values forward compute sees, while [`apply_update`]
//! reconstructs full precision, applies an elementwise kernel and re-splits
//! in one streaming pass, never materializing an f32 copy of the tensor.
//!
//! [`high_view`]: SplitTensor::high_view
//! [`apply_update`]: SplitTensor::apply_update

use alloc::vec;
use alloc::vec::Vec;

use crate::floatbits::{
    self, high_to_f32, reconstruct, split_rtz, split_stochastic, FloatError, FloatFormat,
    RoundMode, ScalarSplit,
};
use crate::packer::{PackedBitBuffer, PackerError};
use crate::rng::CounterRng;

/// Elementwise update rule: receives the element index and the
/// reconstructed full-precision value, returns the new value. Auxiliary
/// per-element inputs (gradient, momentum, ...) are captured by the
/// closure; the rule must not read other elements.
pub trait UpdateKernel: FnMut(usize, f32) -> f32 {}

impl<T: FnMut(usize, f32) -> f32> UpdateKernel for T {}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StoreError {
    /// Shape product does not match the element count.
    ShapeMismatch { expected: usize, got: usize },
    /// A raw buffer has the wrong length for the declared layout.
    LengthMismatch {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    /// A stochastic round flag is set on a zero high word.
    CorruptFlag { index: usize },
    Float(FloatError),
    Packer(PackerError),
}

impl From<FloatError> for StoreError {
    fn from(e: FloatError) -> Self {
        Self::Float(e)
    }
}

impl From<PackerError> for StoreError {
    fn from(e: PackerError) -> Self {
        Self::Packer(e)
    }
}

impl core::fmt::Display for StoreError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Self::ShapeMismatch { expected, got } => {
                write!(f, "shape product {expected} does not match value count {got}")
            }
            Self::LengthMismatch {
                field,
                expected,
                got,
            } => write!(f, "{field} has length {got}, expected {expected}"),
            Self::CorruptFlag { index } => {
                write!(f, "round flag set on zero high word at element {index}")
            }
            Self::Float(e) => write!(f, "{e}"),
            Self::Packer(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for StoreError {}

/// Parameter tensor stored as (high words, packed extra bits).
#[derive(Clone, Debug)]
pub struct SplitTensor {
    fmt: FloatFormat,
    k: u32,
    mode: RoundMode,
    shape: Vec<usize>,
    /// Element count; equals the shape product.
    len: usize,
    /// High words, `fmt.storage_bytes()` bytes each, little-endian.
    highs: Vec<u8>,
    /// `k`-bit extras (RTZ) or `k+1`-bit flag+extras entries (stochastic);
    /// absent when the entry width is zero (k = 0 in RTZ mode).
    extras: Option<PackedBitBuffer>,
    rng: CounterRng,
    /// Bumped by every `apply_update`; stochastic re-splits draw fresh
    /// randomness keyed by (seed, element index, counter).
    counter: u64,
}

fn entry_width(k: u32, mode: RoundMode) -> u32 {
    match mode {
        RoundMode::Rtz => k,
        RoundMode::Stochastic => k + 1,
    }
}

impl SplitTensor {
    /// Split `values` elementwise. Deterministic given `seed`; NaN elements
    /// propagate as NaN high words.
    pub fn from_f32(
        values: &[f32],
        shape: &[usize],
        fmt: FloatFormat,
        k: u32,
        mode: RoundMode,
        seed: u64,
    ) -> Result<Self, StoreError> {
        floatbits::validate_split_args(fmt, k)?;
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(StoreError::ShapeMismatch {
                expected,
                got: values.len(),
            });
        }
        let mut t = Self::zeroed(shape, fmt, k, mode, seed)?;
        let rng = t.rng;
        for (i, &x) in values.iter().enumerate() {
            let s = match mode {
                RoundMode::Rtz => split_rtz(x, fmt, k)?,
                RoundMode::Stochastic => split_stochastic(x, fmt, k, rng.word(i as u64, 0))?,
            };
            t.write_split(i, s);
        }
        Ok(t)
    }

    fn zeroed(
        shape: &[usize],
        fmt: FloatFormat,
        k: u32,
        mode: RoundMode,
        seed: u64,
    ) -> Result<Self, StoreError> {
        let len: usize = shape.iter().product();
        let width = entry_width(k, mode);
        let extras = if width == 0 {
            None
        } else {
            Some(PackedBitBuffer::create(len, width)?)
        };
        Ok(Self {
            fmt,
            k,
            mode,
            shape: shape.to_vec(),
            len,
            highs: vec![0; len * fmt.storage_bytes()],
            extras,
            rng: CounterRng::new(seed),
            counter: 0,
        })
    }

    /// Rebuild a tensor from its stored buffers (checkpoint load). The
    /// update counter restarts at zero.
    pub fn from_raw_parts(
        fmt: FloatFormat,
        k: u32,
        mode: RoundMode,
        shape: &[usize],
        seed: u64,
        highs: Vec<u8>,
        extras_words: Vec<u32>,
    ) -> Result<Self, StoreError> {
        floatbits::validate_split_args(fmt, k)?;
        let len: usize = shape.iter().product();
        if highs.len() != len * fmt.storage_bytes() {
            return Err(StoreError::LengthMismatch {
                field: "highs",
                expected: len * fmt.storage_bytes(),
                got: highs.len(),
            });
        }
        let width = entry_width(k, mode);
        let extras = if width == 0 {
            if !extras_words.is_empty() {
                return Err(StoreError::LengthMismatch {
                    field: "extras",
                    expected: 0,
                    got: extras_words.len(),
                });
            }
            None
        } else {
            Some(PackedBitBuffer::from_words(len, width, extras_words)?)
        };
        let t = Self {
            fmt,
            k,
            mode,
            shape: shape.to_vec(),
            len,
            highs,
            extras,
            rng: CounterRng::new(seed),
            counter: 0,
        };
        if mode == RoundMode::Stochastic {
            let sign_mask = (1u32 << (fmt.total_bits() - 1)) - 1;
            for i in 0..t.len {
                let s = t.scalar_split(i);
                if s.round_flag && t.high_word(i) & sign_mask == 0 {
                    return Err(StoreError::CorruptFlag { index: i });
                }
            }
        }
        Ok(t)
    }

    pub fn fmt(&self) -> FloatFormat {
        self.fmt
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn mode(&self) -> RoundMode {
        self.mode
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn seed(&self) -> u64 {
        self.rng.seed()
    }

    pub fn update_counter(&self) -> u64 {
        self.counter
    }

    /// Raw high bytes, element-major little-endian (the checkpoint layout).
    pub fn highs_bytes(&self) -> &[u8] {
        &self.highs
    }

    /// Packed extras buffer, if the entry width is nonzero.
    pub fn extras(&self) -> Option<&PackedBitBuffer> {
        self.extras.as_ref()
    }

    /// Persistent bytes held by the high words.
    pub fn high_bytes(&self) -> u64 {
        self.highs.len() as u64
    }

    /// Persistent bytes held by the packed extras.
    pub fn extra_bytes(&self) -> u64 {
        self.extras.as_ref().map_or(0, |b| b.words().len() as u64 * 4)
    }

    pub fn high_word(&self, i: usize) -> u32 {
        let s = self.fmt.storage_bytes();
        let off = i * s;
        match s {
            1 => u32::from(self.highs[off]),
            _ => u32::from(u16::from_le_bytes([self.highs[off], self.highs[off + 1]])),
        }
    }

    fn set_high_word(&mut self, i: usize, w: u32) {
        let s = self.fmt.storage_bytes();
        let off = i * s;
        match s {
            1 => self.highs[off] = w as u8,
            _ => self.highs[off..off + 2].copy_from_slice(&(w as u16).to_le_bytes()),
        }
    }

    /// The stored split of element `i`.
    pub fn scalar_split(&self, i: usize) -> ScalarSplit {
        let high = self.high_word(i);
        let (extra, round_flag) = match (&self.extras, self.mode) {
            (None, _) => (0, false),
            (Some(buf), RoundMode::Rtz) => (buf.get(i).expect("index in range"), false),
            (Some(buf), RoundMode::Stochastic) => {
                let e = buf.get(i).expect("index in range");
                (e & ((1u32 << self.k) - 1), e >> self.k == 1)
            }
        };
        ScalarSplit {
            high,
            extra,
            round_flag,
        }
    }

    fn write_split(&mut self, i: usize, s: ScalarSplit) {
        self.set_high_word(i, s.high);
        if let Some(buf) = &mut self.extras {
            let entry = match self.mode {
                RoundMode::Rtz => s.extra,
                RoundMode::Stochastic => (u32::from(s.round_flag) << self.k) | s.extra,
            };
            buf.set(i, entry).expect("entry fits width");
        }
    }

    /// Reconstruct every element at full precision (un-rounding first in
    /// stochastic mode).
    pub fn to_f32(&self) -> Vec<f32> {
        (0..self.len)
            .map(|i| reconstruct(self.scalar_split(i), self.fmt, self.k))
            .collect()
    }

    /// The forward-compute values: the stored high words as f32. In RTZ
    /// mode these are the truncated values; in stochastic mode the rounded
    /// ones, which is the whole point of that mode.
    pub fn high_view(&self) -> Vec<f32> {
        (0..self.len)
            .map(|i| high_to_f32(self.high_word(i), self.fmt))
            .collect()
    }

    /// Reconstruct, apply `kernel`, re-split — elementwise and in place,
    /// equivalent to `to_f32` / kernel / `from_f32` without the full-size
    /// f32 temporary. Stochastic re-splits draw fresh randomness keyed by
    /// (seed, element index, update counter). A kernel returning NaN stores
    /// a NaN high word; diverging is the caller's signal to handle.
    pub fn apply_update<K: UpdateKernel>(&mut self, mut kernel: K) {
        self.counter += 1;
        let counter = self.counter;
        let rng = self.rng;
        for i in 0..self.len {
            let p = reconstruct(self.scalar_split(i), self.fmt, self.k);
            let new = kernel(i, p);
            let s = match self.mode {
                RoundMode::Rtz => split_rtz(new, self.fmt, self.k),
                RoundMode::Stochastic => {
                    split_stochastic(new, self.fmt, self.k, rng.word(i as u64, counter))
                }
            }
            .expect("tensor format already validated");
            self.write_split(i, s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FP16: FloatFormat = FloatFormat::FP16;
    const BF16: FloatFormat = FloatFormat::BF16;

    fn rand_ranged(rng: &CounterRng, i: u64, lo: i32, hi: i32) -> f32 {
        let w = rng.word(i, 9999);
        let e = lo + (w % (hi - lo + 1) as u64) as i32;
        let mant = (w >> 32) as u32 & 0x007F_FFFF;
        let sign = (w >> 8) as u32 & 1;
        f32::from_bits((sign << 31) | (((e + 127) as u32) << 23) | mant)
    }

    #[test]
    fn zeros_split_to_zero_buffers() {
        let t = SplitTensor::from_f32(&[0.0; 10], &[10], FP16, 13, RoundMode::Rtz, 1).unwrap();
        assert!(t.highs_bytes().iter().all(|&b| b == 0));
        assert!(t.extras().unwrap().words().iter().all(|&w| w == 0));
        assert_eq!(t.to_f32(), vec![0.0; 10]);
    }

    #[test]
    fn scalar_example_matches_floatbits() {
        let x = 1.0 + 2.0f32.powi(-11);
        let t = SplitTensor::from_f32(&[x], &[1], FP16, 13, RoundMode::Rtz, 1).unwrap();
        assert_eq!(t.high_word(0), 0x3C00);
        assert_eq!(t.extras().unwrap().get(0), Ok(0x1000));
        assert_eq!(t.high_view(), vec![1.0]);
        assert_eq!(t.to_f32(), vec![x]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let err = SplitTensor::from_f32(&[1.0; 5], &[2, 3], FP16, 8, RoundMode::Rtz, 1);
        assert_eq!(err.unwrap_err(), StoreError::ShapeMismatch { expected: 6, got: 5 });
    }

    #[test]
    fn bf16_16_roundtrip_is_bitwise() {
        let rng = CounterRng::new(2);
        let values: Vec<f32> = (0..4096).map(|i| rand_ranged(&rng, i, -60, 60)).collect();
        for mode in [RoundMode::Rtz, RoundMode::Stochastic] {
            let t = SplitTensor::from_f32(&values, &[4096], BF16, 16, mode, 7).unwrap();
            let back = t.to_f32();
            for (a, b) in values.iter().zip(&back) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn fp16_13_roundtrip_on_normal_range() {
        let rng = CounterRng::new(3);
        let values: Vec<f32> = (0..4096).map(|i| rand_ranged(&rng, i, -14, 15)).collect();
        let t = SplitTensor::from_f32(&values, &[64, 64], FP16, 13, RoundMode::Rtz, 7).unwrap();
        assert_eq!(t.to_f32(), values);
        assert_eq!(t.shape(), &[64, 64]);
    }

    #[test]
    fn stochastic_reconstruct_equals_rtz_reconstruct() {
        let rng = CounterRng::new(4);
        let values: Vec<f32> = (0..2048).map(|i| rand_ranged(&rng, i, -20, 16)).collect();
        for seed in [0u64, 1, 99] {
            let r = SplitTensor::from_f32(&values, &[2048], FP16, 8, RoundMode::Rtz, seed).unwrap();
            let s =
                SplitTensor::from_f32(&values, &[2048], FP16, 8, RoundMode::Stochastic, seed)
                    .unwrap();
            let (rv, sv) = (r.to_f32(), s.to_f32());
            for (a, b) in rv.iter().zip(&sv) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn high_view_is_fixed_point_of_round_nearest() {
        let rng = CounterRng::new(5);
        let values: Vec<f32> = (0..1024).map(|i| rand_ranged(&rng, i, -14, 15)).collect();
        for (fmt, k) in [(FP16, 8u32), (BF16, 16)] {
            let t = SplitTensor::from_f32(&values, &[1024], fmt, k, RoundMode::Stochastic, 3)
                .unwrap();
            for v in t.high_view() {
                assert_eq!(floatbits::round_nearest(v, fmt), v);
            }
        }
    }

    #[test]
    fn stochastic_high_view_mean_is_unbiased() {
        let x = 1.0 + 3.0 * 2.0f32.powi(-12); // 0.75 ulp residual
        let n = 100_000u64;
        let mut sum = 0.0f64;
        for seed in 0..n {
            let t =
                SplitTensor::from_f32(&[x], &[1], FP16, 13, RoundMode::Stochastic, seed).unwrap();
            sum += t.high_view()[0] as f64;
        }
        let mean = sum / n as f64;
        let se = floatbits::ulp(x, FP16).unwrap() as f64 * (0.75f64 * 0.25 / n as f64).sqrt();
        assert!((mean - x as f64).abs() <= 3.0 * se, "mean={mean}");
    }

    #[test]
    fn identity_kernel_is_bitwise_noop_rtz() {
        let rng = CounterRng::new(6);
        let values: Vec<f32> = (0..512).map(|i| rand_ranged(&rng, i, -14, 15)).collect();
        let mut t = SplitTensor::from_f32(&values, &[512], FP16, 8, RoundMode::Rtz, 11).unwrap();
        let highs = t.highs_bytes().to_vec();
        let extras = t.extras().unwrap().words().to_vec();
        t.apply_update(|_, p| p);
        assert_eq!(t.highs_bytes(), &highs[..]);
        assert_eq!(t.extras().unwrap().words(), &extras[..]);
    }

    #[test]
    fn identity_kernel_preserves_stored_value_stochastic() {
        // the representation re-randomizes (fresh flag draw) but the
        // reconstructed value is bit-stable
        let rng = CounterRng::new(7);
        let values: Vec<f32> = (0..512).map(|i| rand_ranged(&rng, i, -14, 15)).collect();
        let mut t =
            SplitTensor::from_f32(&values, &[512], FP16, 8, RoundMode::Stochastic, 11).unwrap();
        let before = t.to_f32();
        t.apply_update(|_, p| p);
        let after = t.to_f32();
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn axpy_update_matches_f32_reference() {
        let rng = CounterRng::new(8);
        let p0: Vec<f32> = (0..2048).map(|i| rand_ranged(&rng, i, -2, 2)).collect();
        let g: Vec<f32> = (0..2048).map(|i| rand_ranged(&rng, i + 10_000, -6, -2)).collect();
        let mut t = SplitTensor::from_f32(&p0, &[2048], FP16, 13, RoundMode::Rtz, 9).unwrap();
        t.apply_update(|i, p| p - 0.1 * g[i]);
        // reference: plain f32 loop then re-split
        let reference: Vec<f32> = p0.iter().zip(&g).map(|(p, gi)| p - 0.1 * gi).collect();
        let r = SplitTensor::from_f32(&reference, &[2048], FP16, 13, RoundMode::Rtz, 9).unwrap();
        assert_eq!(t.to_f32(), r.to_f32());
        assert_eq!(t.highs_bytes(), r.highs_bytes());
    }

    #[test]
    fn update_equivalence_with_scalar_oracle_stochastic() {
        let rng = CounterRng::new(10);
        let values: Vec<f32> = (0..300).map(|i| rand_ranged(&rng, i, -10, 10)).collect();
        let seed = 77u64;
        let mut t =
            SplitTensor::from_f32(&values, &[300], FP16, 8, RoundMode::Stochastic, seed).unwrap();
        let stored = t.to_f32();
        t.apply_update(|_, p| p * 1.25 + 0.001);
        // oracle: replay the exact draws with floatbits primitives
        let draws = CounterRng::new(seed);
        for i in 0..300 {
            let expect =
                split_stochastic(stored[i] * 1.25 + 0.001, FP16, 8, draws.word(i as u64, 1))
                    .unwrap();
            assert_eq!(t.scalar_split(i), expect, "i={i}");
        }
    }

    #[test]
    fn absorption_below_half_ulp() {
        // +1e-4 from 1.0: k=0 truncates it away every step, k=13 tracks f32
        let mut k0 = SplitTensor::from_f32(&[1.0], &[1], FP16, 0, RoundMode::Rtz, 1).unwrap();
        let mut k13 = SplitTensor::from_f32(&[1.0], &[1], FP16, 13, RoundMode::Rtz, 1).unwrap();
        let mut oracle = 1.0f32;
        for _ in 0..1000 {
            k0.apply_update(|_, p| p + 1e-4);
            k13.apply_update(|_, p| p + 1e-4);
            oracle += 1e-4;
        }
        assert_eq!(k0.to_f32()[0], 1.0);
        assert_eq!(k13.to_f32()[0].to_bits(), oracle.to_bits());
        // the f32 reference itself lands at 1 + 839000*2^-23 = 1.10001659
        // (each add rounds up by a fixed 0.1386 ulp), so k=13 does too
        assert_eq!(k13.to_f32()[0], 1.100_016_6);
        assert!(((k13.to_f32()[0] - 1.1) / 1.1).abs() < 2e-5);
    }

    #[test]
    fn nan_kernel_output_stores_nan() {
        let mut t = SplitTensor::from_f32(&[1.0, 2.0], &[2], FP16, 8, RoundMode::Rtz, 1).unwrap();
        t.apply_update(|i, p| if i == 0 { f32::NAN } else { p });
        assert!(t.to_f32()[0].is_nan());
        assert_eq!(t.to_f32()[1], 2.0);
    }

    #[test]
    fn raw_parts_roundtrip_and_validation() {
        let rng = CounterRng::new(12);
        let values: Vec<f32> = (0..97).map(|i| rand_ranged(&rng, i, -8, 8)).collect();
        for (mode, k) in [
            (RoundMode::Rtz, 0u32),
            (RoundMode::Rtz, 13),
            (RoundMode::Stochastic, 0),
            (RoundMode::Stochastic, 8),
        ] {
            let t = SplitTensor::from_f32(&values, &[97], FP16, k, mode, 5).unwrap();
            let rebuilt = SplitTensor::from_raw_parts(
                FP16,
                k,
                mode,
                t.shape(),
                t.seed(),
                t.highs_bytes().to_vec(),
                t.extras().map_or(Vec::new(), |b| b.words().to_vec()),
            )
            .unwrap();
            assert_eq!(rebuilt.highs_bytes(), t.highs_bytes());
            assert_eq!(
                rebuilt.extras().map(|b| b.words().to_vec()),
                t.extras().map(|b| b.words().to_vec())
            );
        }
        // wrong high byte count
        let err = SplitTensor::from_raw_parts(FP16, 0, RoundMode::Rtz, &[3], 0, vec![0; 5], vec![]);
        assert!(matches!(err, Err(StoreError::LengthMismatch { .. })));
    }

    #[test]
    fn memory_bound_per_element() {
        // persistent bytes stay within fmt + (k+1) bits per element plus
        // one partial block of padding
        for (fmt, k, mode, len) in [
            (FP16, 13u32, RoundMode::Rtz, 1usize),
            (FP16, 13, RoundMode::Stochastic, 33),
            (BF16, 16, RoundMode::Rtz, 1000),
            (FloatFormat::FP8_E5M2, 8, RoundMode::Rtz, 129),
        ] {
            let t = SplitTensor::from_f32(&vec![1.0; len], &[len], fmt, k, mode, 1).unwrap();
            let bytes = t.high_bytes() + t.extra_bytes();
            let bound = len as u64 * (fmt.total_bits() as u64 + k as u64 + 1) / 8 + 4 * (k as u64 + 1);
            assert!(bytes <= bound, "{fmt} k={k} len={len}: {bytes} > {bound}");
        }
    }
}
