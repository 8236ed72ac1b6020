//! Dense storage of k-bit fields inside 32-bit words.
//!
//! Entries are grouped 32 per block; a block occupies exactly `k` words, so
//! the buffer size tracks the payload closely (waste is bounded by one
//! partial block). Within a block, entry `i` sits at global bit offset
//! `i*k`, little-endian by bit position, which means an entry can straddle
//! two adjacent words but never a block boundary. Blocks are independent:
//! writers touching distinct blocks touch disjoint word ranges, making the
//! block the natural unit of exclusion.

use alloc::vec;
use alloc::vec::Vec;

/// Entries per block; one block spans exactly `k` words.
pub const BLOCK_ENTRIES: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PackerError {
    /// Entry width must be in 1..=32.
    WidthOutOfRange(u32),
    IndexOutOfBounds { index: usize, len: usize },
    /// Value does not fit in `k` bits.
    ValueTooWide { value: u32, k: u32 },
    BlockOutOfBounds { block: usize, blocks: usize },
}

impl core::fmt::Display for PackerError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Self::WidthOutOfRange(k) => write!(f, "entry width {k} out of range 1..=32"),
            Self::IndexOutOfBounds { index, len } => {
                write!(f, "entry index {index} out of bounds (len {len})")
            }
            Self::ValueTooWide { value, k } => {
                write!(f, "value {value:#x} does not fit in {k} bits")
            }
            Self::BlockOutOfBounds { block, blocks } => {
                write!(f, "block {block} out of bounds ({blocks} blocks)")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for PackerError {}

/// Array of `len` unsigned k-bit entries packed into 32-bit words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedBitBuffer {
    k: u32,
    len: usize,
    words: Vec<u32>,
}

impl PackedBitBuffer {
    /// Zero-initialized buffer of `len` k-bit entries, `ceil(len/32) * k`
    /// words of backing storage.
    pub fn create(len: usize, k: u32) -> Result<Self, PackerError> {
        if k < 1 || k > 32 {
            return Err(PackerError::WidthOutOfRange(k));
        }
        let words = len.div_ceil(BLOCK_ENTRIES) * k as usize;
        Ok(Self {
            k,
            len,
            words: vec![0; words],
        })
    }

    /// Rebuild from raw words (checkpoint load). Word count must match and
    /// tail bits past the last entry must be zero.
    pub fn from_words(len: usize, k: u32, words: Vec<u32>) -> Result<Self, PackerError> {
        if k < 1 || k > 32 {
            return Err(PackerError::WidthOutOfRange(k));
        }
        let expect = len.div_ceil(BLOCK_ENTRIES) * k as usize;
        if words.len() != expect {
            return Err(PackerError::IndexOutOfBounds {
                index: words.len(),
                len: expect,
            });
        }
        let buf = Self { k, len, words };
        for i in buf.len..buf.len.div_ceil(BLOCK_ENTRIES) * BLOCK_ENTRIES {
            if buf.read(i) != 0 {
                return Err(PackerError::ValueTooWide {
                    value: buf.read(i),
                    k,
                });
            }
        }
        Ok(buf)
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn blocks(&self) -> usize {
        self.len.div_ceil(BLOCK_ENTRIES)
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    fn mask(&self) -> u64 {
        if self.k == 32 {
            u64::from(u32::MAX)
        } else {
            (1u64 << self.k) - 1
        }
    }

    /// (word index, bit offset) of entry `i`; the entry never crosses its
    /// block's last word because `slot*k + k <= 32*k`.
    fn locate(&self, i: usize) -> (usize, u32) {
        let block = i / BLOCK_ENTRIES;
        let bit = (i % BLOCK_ENTRIES) as u32 * self.k;
        (block * self.k as usize + (bit / 32) as usize, bit % 32)
    }

    fn read(&self, i: usize) -> u32 {
        let (w, bit) = self.locate(i);
        let mut chunk = u64::from(self.words[w]);
        if bit + self.k > 32 {
            chunk |= u64::from(self.words[w + 1]) << 32;
        }
        ((chunk >> bit) & self.mask()) as u32
    }

    pub fn get(&self, i: usize) -> Result<u32, PackerError> {
        if i >= self.len {
            return Err(PackerError::IndexOutOfBounds {
                index: i,
                len: self.len,
            });
        }
        Ok(self.read(i))
    }

    /// Set entry `i`, touching only its own bits: neighbours are preserved
    /// even when the entry straddles a word boundary, and the following
    /// word is left alone when it does not.
    pub fn set(&mut self, i: usize, v: u32) -> Result<(), PackerError> {
        if i >= self.len {
            return Err(PackerError::IndexOutOfBounds {
                index: i,
                len: self.len,
            });
        }
        if u64::from(v) > self.mask() {
            return Err(PackerError::ValueTooWide { value: v, k: self.k });
        }
        let (w, bit) = self.locate(i);
        let mask = self.mask() << bit;
        let val = u64::from(v) << bit;
        self.words[w] = ((u64::from(self.words[w]) & !mask) | (val & 0xFFFF_FFFF & mask)) as u32;
        if bit + self.k > 32 {
            self.words[w + 1] =
                ((u64::from(self.words[w + 1]) & !(mask >> 32)) | (val >> 32)) as u32;
        }
        Ok(())
    }

    /// Read all 32 slots of a block; slots past `len` in a partial final
    /// block read as zero.
    pub fn block_gather(&self, block: usize) -> Result<[u32; BLOCK_ENTRIES], PackerError> {
        if block >= self.blocks() {
            return Err(PackerError::BlockOutOfBounds {
                block,
                blocks: self.blocks(),
            });
        }
        let mut out = [0u32; BLOCK_ENTRIES];
        let base = block * BLOCK_ENTRIES;
        for (slot, v) in out.iter_mut().enumerate() {
            if base + slot < self.len {
                *v = self.read(base + slot);
            }
        }
        Ok(out)
    }

    /// Write all 32 slots of a block, equivalent to 32 `set` calls. Slots
    /// past `len` in a partial final block are ignored so the tail stays
    /// zero.
    pub fn block_scatter(
        &mut self,
        block: usize,
        values: &[u32; BLOCK_ENTRIES],
    ) -> Result<(), PackerError> {
        if block >= self.blocks() {
            return Err(PackerError::BlockOutOfBounds {
                block,
                blocks: self.blocks(),
            });
        }
        let base = block * BLOCK_ENTRIES;
        for (slot, &v) in values.iter().enumerate() {
            if base + slot < self.len {
                self.set(base + slot, v)?;
            }
        }
        Ok(())
    }
}
