//! Scalar float helpers that work with and without `std`.

#[cfg(feature = "std")]
pub fn sqrt(x: f32) -> f32 {
    x.sqrt()
}

#[cfg(not(feature = "std"))]
pub fn sqrt(x: f32) -> f32 {
    libm::sqrtf(x)
}

#[cfg(feature = "std")]
pub fn exp(x: f32) -> f32 {
    x.exp()
}

#[cfg(not(feature = "std"))]
pub fn exp(x: f32) -> f32 {
    libm::expf(x)
}

#[cfg(feature = "std")]
pub fn ln(x: f32) -> f32 {
    x.ln()
}

#[cfg(not(feature = "std"))]
pub fn ln(x: f32) -> f32 {
    libm::logf(x)
}

/// |x| via the sign bit; avoids relying on `std`-only float methods.
pub fn abs(x: f32) -> f32 {
    f32::from_bits(x.to_bits() & 0x7FFF_FFFF)
}

/// 2^e as f32, exact down to the subnormal range.
pub fn pow2(e: i32) -> f32 {
    if e >= -126 {
        debug_assert!(e <= 127);
        f32::from_bits(((e + 127) as u32) << 23)
    } else if e >= -149 {
        f32::from_bits(1u32 << (e + 149))
    } else {
        0.0
    }
}
