//! Split-precision parameter storage.
//!
//! Instead of keeping a full-precision master copy next to every 16-bit
//! parameter, each value is stored as a low-precision *high part* plus `k`
//! extra mantissa bits packed densely into 32-bit words. Updates reconstruct
//! the full-precision value, apply the step, and re-split, so the stored
//! precision matches a classic fp32 master copy while the persistent
//! footprint stays close to 16 bits per parameter.
//!
//! The crate is organised bottom-up:
//!
//! - [`floatbits`]: bit-exact encode/decode of binary float formats and the
//!   scalar split/reconstruct primitives (round-to-zero and stochastic).
//! - [`packer`]: dense storage of k-bit fields in 32-bit words, 32 entries
//!   per block.
//! - [`splitstore`]: tensor-level split storage with streaming in-place
//!   updates.
//! - [`optim`]: SGD and Adam acting directly on split tensors, gradient
//!   hooks, and the fused single-stream step.
//! - [`autograd`]: a minimal reverse-mode tape whose backward pass can fire
//!   the optimizer step per parameter, freeing gradients immediately.
//! - [`ledger`]: byte accounting (current/peak per category) that makes the
//!   memory behaviour measurable.
//!
//! `no_std` compatible (with `alloc`); disable the default `std` feature and
//! enable `libm` to build without the standard library. File formats, CLI
//! and benchmark harnesses live in the companion `splitfp-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]

#[cfg(all(not(feature = "std"), not(feature = "libm")))]
compile_error!("splitfp requires either the `std` or the `libm` feature");

extern crate alloc;

pub mod autograd;
pub mod floatbits;
pub mod ledger;
pub mod optim;
pub mod packer;
pub mod rng;
pub mod splitstore;

pub(crate) mod math;

pub use floatbits::{FloatFormat, RoundMode, ScalarSplit};
pub use ledger::{MemCategory, MemoryLedger};
pub use packer::PackedBitBuffer;
pub use rng::CounterRng;
pub use splitstore::SplitTensor;
