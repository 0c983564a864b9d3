//! Dataset shard container.
//!
//! ```text
//! "MHDS"  u32 version  u32 record count
//! record count x u64 absolute record offsets
//! per record: u64 source id, u32 row, u32 column, f64 score,
//!             u64 length + PFM ground truth,
//!             u64 length + PPM input,
//!             u64 length + PFM mask (same channel count as the input)
//! ```
//!
//! Records are contiguous: each offset is where the previous record ends.

use std::path::Path;

use super::netpbm::{decode_ppm, encode_ppm};
use super::pfm::{decode_pfm, decode_pfm_tensor, encode_pfm, encode_pfm_tensor};
use super::Cursor;
use crate::error::{Error, Result};
use crate::network::SoftMask;
use crate::sampler::PatchRecord;

pub const SHARD_MAGIC: &[u8; 4] = b"MHDS";
pub const SHARD_VERSION: u32 = 1;

fn push_block(out: &mut Vec<u8>, block: &[u8]) {
    out.extend_from_slice(&(block.len() as u64).to_le_bytes());
    out.extend_from_slice(block);
}

fn encode_record(r: &PatchRecord<f32>) -> Result<Vec<u8>> {
    let ldr = encode_ppm(&r.ldr)?;
    if decode_ppm(&ldr)?.pixels() != r.ldr.pixels() {
        return Err(Error::Contract(format!(
            "record from source {} at {:?} has LDR values that are not exact 8-bit levels",
            r.source_id, r.offset
        )));
    }
    let (y, x) = r.offset;
    let (y, x) = (
        u32::try_from(y).map_err(|_| Error::Contract("row offset too large".into()))?,
        u32::try_from(x).map_err(|_| Error::Contract("column offset too large".into()))?,
    );
    let mut out = Vec::new();
    out.extend_from_slice(&r.source_id.to_le_bytes());
    out.extend_from_slice(&y.to_le_bytes());
    out.extend_from_slice(&x.to_le_bytes());
    out.extend_from_slice(&r.score.to_bits().to_le_bytes());
    push_block(&mut out, &encode_pfm(&r.hdr)?);
    push_block(&mut out, &ldr);
    push_block(&mut out, &encode_pfm_tensor(r.mask.values())?);
    Ok(out)
}

fn nested<T>(base: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse { offset, message } => Error::parse(base + offset, message),
        other => other,
    })
}

fn decode_record(body: &[u8], start: usize) -> Result<(PatchRecord<f32>, usize)> {
    let mut cur = Cursor::at(body, start);
    let source_id = cur.u64("source id")?;
    let y = cur.u32("row offset")? as usize;
    let x = cur.u32("column offset")? as usize;
    let score = cur.f64("score")?;
    let at = cur.pos() + 8;
    let hdr = nested(at, decode_pfm(cur.block("ground truth")?))?;
    let at = cur.pos() + 8;
    let ldr = nested(at, decode_ppm(cur.block("input image")?))?;
    let at = cur.pos() + 8;
    let mask = SoftMask::new(nested(at, decode_pfm_tensor(cur.block("mask")?))?)?;
    if hdr.pixels().shape() != ldr.pixels().shape() || ldr.pixels().shape() != mask.values().shape()
    {
        return Err(Error::parse(start, "record images have different shapes"));
    }
    Ok((
        PatchRecord {
            hdr,
            ldr,
            mask,
            score,
            source_id,
            offset: (y, x),
        },
        cur.pos(),
    ))
}

pub fn encode_shard(records: &[PatchRecord<f32>]) -> Result<Vec<u8>> {
    if records.is_empty() {
        return Err(Error::Contract("refusing to write an empty shard".into()));
    }
    let count = u32::try_from(records.len())
        .map_err(|_| Error::Contract("too many records for one shard".into()))?;
    let encoded = records
        .iter()
        .map(encode_record)
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    out.extend_from_slice(SHARD_MAGIC);
    out.extend_from_slice(&SHARD_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    let mut offset = 12 + 8 * records.len();
    for e in &encoded {
        out.extend_from_slice(&(offset as u64).to_le_bytes());
        offset += e.len();
    }
    for e in encoded {
        out.extend_from_slice(&e);
    }
    Ok(out)
}

pub fn decode_shard(bytes: &[u8]) -> Result<Vec<PatchRecord<f32>>> {
    if bytes.len() < 4 || &bytes[..4] != SHARD_MAGIC {
        return Err(Error::parse(0, "missing \"MHDS\" magic"));
    }
    let mut cur = Cursor::at(bytes, 4);
    let version = cur.u32("version")?;
    if version != SHARD_VERSION {
        return Err(Error::Version(version));
    }
    let count = cur.u32("record count")? as usize;
    if count == 0 {
        return Err(Error::parse(8, "shard declares no records"));
    }
    let index_len = count
        .checked_mul(8)
        .filter(|&n| n <= cur.remaining())
        .ok_or_else(|| {
            Error::parse(
                12,
                format!(
                    "index for {count} records needs {} bytes, found {}",
                    count.saturating_mul(8),
                    cur.remaining()
                ),
            )
        })?;
    let mut offsets = Vec::with_capacity(count);
    for _ in 0..count {
        offsets.push(cur.u64("index entry")?);
    }
    let mut expected = 12 + index_len;
    let mut records = Vec::with_capacity(count);
    for (i, &off) in offsets.iter().enumerate() {
        if off != expected as u64 {
            return Err(Error::parse(
                12 + 8 * i,
                format!("index entry {i} points to {off}, record starts at {expected}"),
            ));
        }
        let (r, end) = decode_record(bytes, expected)?;
        records.push(r);
        expected = end;
    }
    if expected != bytes.len() {
        return Err(Error::parse(
            expected,
            format!(
                "{} bytes after the last indexed record",
                bytes.len() - expected
            ),
        ));
    }
    Ok(records)
}

pub fn write_dataset_shard(path: impl AsRef<Path>, records: &[PatchRecord<f32>]) -> Result<()> {
    std::fs::write(path, encode_shard(records)?)?;
    Ok(())
}

pub fn read_dataset_shard(path: impl AsRef<Path>) -> Result<Vec<PatchRecord<f32>>> {
    decode_shard(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{HdrImage, LdrImage};
    use crate::tensor::Tensor;

    fn record(id: u64) -> PatchRecord<f32> {
        let ldr = Tensor::from_fn([3, 4, 4], |i| ((i * 37 + id as usize) % 256) as f32 / 255.0);
        PatchRecord {
            hdr: HdrImage::new(Tensor::from_fn([3, 4, 4], |i| i as f32 * 0.75 + id as f32))
                .unwrap(),
            mask: crate::network::exposure_mask(&LdrImage::new(ldr.clone()).unwrap(), 0.96)
                .unwrap(),
            ldr: LdrImage::new(ldr).unwrap(),
            score: 1.25 + id as f64,
            source_id: id,
            offset: (id as usize, 2),
        }
    }

    #[test]
    fn round_trip() {
        let recs: Vec<_> = (0..3).map(record).collect();
        assert_eq!(decode_shard(&encode_shard(&recs).unwrap()).unwrap(), recs);
    }

    #[test]
    fn count_mismatch() {
        let mut b = encode_shard(&[record(0), record(1)]).unwrap();
        b[8] = 3;
        assert!(matches!(decode_shard(&b), Err(Error::Parse { .. })));
        b[8] = 1;
        assert!(matches!(decode_shard(&b), Err(Error::Parse { .. })));
    }

    #[test]
    fn empty_write_is_contract_error() {
        assert!(matches!(encode_shard(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn inexact_ldr_rejected() {
        let mut r = record(0);
        r.ldr = LdrImage::new(Tensor::full([3, 4, 4], 0.3)).unwrap();
        assert!(matches!(encode_shard(&[r]), Err(Error::Contract(_))));
    }
}
