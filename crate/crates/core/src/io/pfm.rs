use std::path::Path;

use super::{checked_volume, Cursor};
use crate::error::{Error, Result};
use crate::pipeline::HdrImage;
use crate::tensor::Tensor;

/// Encodes a `[c, h, w]` tensor with 1 or 3 channels, little-endian.
pub fn encode_pfm_tensor(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = match t.shape() {
        &[c, h, w] if c == 1 || c == 3 => (c, h, w),
        s => {
            return Err(Error::dim(format!(
                "PFM holds 1 or 3 channels, got shape {s:?}"
            )))
        }
    };
    let magic = if c == 3 { "PF" } else { "Pf" };
    let mut out = format!("{magic}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(c * h * w * 4);
    let d = t.data();
    for y in (0..h).rev() {
        for x in 0..w {
            for ci in 0..c {
                out.extend_from_slice(&d[(ci * h + y) * w + x].to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn encode_pfm(img: &HdrImage<f32>) -> Result<Vec<u8>> {
    encode_pfm_tensor(img.pixels())
}

/// Decodes any finite PFM payload into a `[c, h, w]` tensor.
pub fn decode_pfm_tensor(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.token("PFM magic")?;
    let c = match magic {
        "PF" => 3,
        "Pf" => 1,
        other => {
            return Err(Error::parse(
                0,
                format!("expected \"PF\" or \"Pf\", found {other:?}"),
            ))
        }
    };
    let w = cur.usize_token("width")?;
    let h = cur.usize_token("height")?;
    let scale_at = cur.pos();
    let scale_tok = cur.token("scale")?;
    let scale: f64 = scale_tok
        .parse()
        .map_err(|_| Error::parse(scale_at, format!("invalid scale {scale_tok:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::parse(
            scale_at,
            format!("scale {scale} must be finite and non-zero"),
        ));
    }
    let little = scale < 0.0;
    cur.header_end()?;
    let n = checked_volume(&[c, h, w, 4], cur.pos())?;
    let start = cur.pos();
    let payload = cur.take(n, "PFM pixel data")?;
    if cur.remaining() != 0 {
        return Err(Error::parse(
            cur.pos(),
            format!("{} trailing bytes after pixel data", cur.remaining()),
        ));
    }
    let mut data = vec![0f32; c * h * w];
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let raw: [u8; 4] = chunk.try_into().expect("4 bytes");
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        if !v.is_finite() {
            return Err(Error::parse(
                start + 4 * k,
                format!("non-finite sample {v}"),
            ));
        }
        let (ci, px) = (k % c, k / c);
        let (row, x) = (px / w, px % w);
        let y = h - 1 - row;
        data[(ci * h + y) * w + x] = v;
    }
    Tensor::new(vec![c, h, w], data)
}

/// Decodes a PFM file into an HDR image; negative samples are rejected.
pub fn decode_pfm(bytes: &[u8]) -> Result<HdrImage<f32>> {
    let t = decode_pfm_tensor(bytes)?;
    if h_or_w_zero(&t) {
        return Err(Error::parse(0, "image has a zero extent"));
    }
    if let Some(i) = t.data().iter().position(|&v| v < 0.0) {
        return Err(Error::Domain(format!(
            "negative radiance {} at sample {i}",
            t.data()[i]
        )));
    }
    HdrImage::new(t)
}

fn h_or_w_zero(t: &Tensor<f32>) -> bool {
    t.shape()[1] == 0 || t.shape()[2] == 0
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<HdrImage<f32>> {
    decode_pfm(&std::fs::read(path)?)
}

pub fn write_pfm(path: impl AsRef<Path>, img: &HdrImage<f32>) -> Result<()> {
    std::fs::write(path, encode_pfm(img)?)?;
    Ok(())
}
