//! File formats. Every reader works on an in-memory byte slice first, so
//! malformed input surfaces as a structured error carrying a byte offset.
//!
//! Byte layouts:
//!
//! * PFM: `PF` (3 channels) or `Pf` (1 channel), width, height and a scale
//!   whose sign gives the byte order (negative = little-endian), each
//!   separated by whitespace with a single whitespace byte before the
//!   payload. Rows are stored bottom to top, channels interleaved.
//! * PPM: binary `P6` with maxval 255. PGM `P5` is written for mask
//!   previews only.
//! * Checkpoint: see [`checkpoint`].
//! * Dataset shard: see [`shard`].

pub mod checkpoint;
pub mod netpbm;
pub mod pfm;
pub mod rgbe;
pub mod shard;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointFile, LoadedCheckpoint};
pub use netpbm::{decode_ppm, encode_pgm, encode_ppm, read_ldr, write_ldr, write_pgm};
pub use pfm::{decode_pfm, decode_pfm_tensor, encode_pfm, read_pfm, write_pfm};
pub use rgbe::{decode_rgbe, read_rgbe};
pub use shard::{decode_shard, encode_shard, read_dataset_shard, write_dataset_shard};

use crate::error::{Error, Result};

/// Bounded little-endian reader over a byte slice.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    pub(crate) fn at(bytes: &'a [u8], pos: usize) -> Self {
        Cursor { bytes, pos }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len().saturating_sub(self.pos)
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::parse(
                self.pos,
                format!(
                    "truncated {what}: expected {n} bytes, found {}",
                    self.remaining()
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }

    /// Reads a length-prefixed (u64) byte block.
    pub(crate) fn block(&mut self, what: &str) -> Result<&'a [u8]> {
        let at = self.pos;
        let n = self.u64(what)?;
        let n = usize::try_from(n)
            .map_err(|_| Error::parse(at, format!("{what} length {n} is too large")))?;
        self.take(n, what)
    }

    /// Skips whitespace and `#` comments, then reads one ASCII token.
    pub(crate) fn token(&mut self, what: &str) -> Result<&'a str> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = self.pos;
        while let Some(b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() || self.pos - start > 32 {
                break;
            }
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::parse(start, format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::parse(start, format!("{what} is not ASCII")))
    }

    pub(crate) fn usize_token(&mut self, what: &str) -> Result<usize> {
        let t = self.token(what)?;
        let at = self.pos - t.len();
        t.parse()
            .map_err(|_| Error::parse(at, format!("invalid {what} {t:?}")))
    }

    /// Consumes the single whitespace byte that ends a text header.
    pub(crate) fn header_end(&mut self) -> Result<()> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => {
                self.pos += 1;
                Ok(())
            }
            Some(_) => Err(Error::parse(self.pos, "expected whitespace after header")),
            None => Err(Error::parse(self.pos, "truncated header")),
        }
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Product of extents, or a parse error at `at` when it overflows.
pub(crate) fn checked_volume(dims: &[usize], at: usize) -> Result<usize> {
    dims.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d)
            .ok_or_else(|| Error::parse(at, format!("extents {dims:?} overflow")))
    })
}
