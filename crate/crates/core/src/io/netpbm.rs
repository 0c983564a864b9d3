use std::path::Path;

use super::{checked_volume, Cursor};
use crate::error::{Error, Result};
use crate::network::GrayImage;
use crate::pipeline::LdrImage;
use crate::tensor::{Scalar, Tensor};

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary P6 with maxval 255; values are written as `round(255 v)`.
pub fn encode_ppm<T: Scalar>(img: &LdrImage<T>) -> Result<Vec<u8>> {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    if c != 3 {
        return Err(Error::dim(format!("PPM needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    let d = img.pixels().data();
    for i in 0..h * w {
        for ci in 0..3 {
            out.push(to_byte(d[ci * h * w + i].to_f64()));
        }
    }
    Ok(out)
}

/// Reads a binary P6 file with maxval 255 as values `v / 255`.
pub fn decode_ppm(bytes: &[u8]) -> Result<LdrImage<f32>> {
    let mut cur = Cursor::new(bytes);
    match cur.token("magic")? {
        "P6" => {}
        m @ ("P1" | "P2" | "P3" | "P4" | "P5" | "P7") => {
            return Err(Error::UnsupportedFormat(format!(
                "netpbm variant {m}; only binary P6 is supported"
            )))
        }
        other => return Err(Error::parse(0, format!("expected \"P6\", found {other:?}"))),
    }
    let w = cur.usize_token("width")?;
    let h = cur.usize_token("height")?;
    let max = cur.usize_token("maxval")?;
    if max != 255 {
        return Err(Error::UnsupportedFormat(format!(
            "maxval {max}; only 255 is supported"
        )));
    }
    cur.header_end()?;
    if w == 0 || h == 0 {
        return Err(Error::parse(cur.pos(), "image has a zero extent"));
    }
    let n = checked_volume(&[3, h, w], cur.pos())?;
    let payload = cur.take(n, "PPM pixel data")?;
    if cur.remaining() != 0 {
        return Err(Error::parse(
            cur.pos(),
            format!("{} trailing bytes after pixel data", cur.remaining()),
        ));
    }
    let mut data = vec![0f32; n];
    for (i, px) in payload.chunks_exact(3).enumerate() {
        for ci in 0..3 {
            data[ci * h * w + i] = (px[ci] as f64 / 255.0) as f32;
        }
    }
    LdrImage::new(Tensor::new(vec![3, h, w], data)?)
}

pub fn read_ldr(path: impl AsRef<Path>) -> Result<LdrImage<f32>> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn write_ldr<T: Scalar>(path: impl AsRef<Path>, img: &LdrImage<T>) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

/// Binary P5 for mask previews.
pub fn encode_pgm(img: &GrayImage) -> Result<Vec<u8>> {
    if img.pixels.len() != img.width * img.height {
        return Err(Error::dim(format!(
            "{} pixels for a {}x{} image",
            img.pixels.len(),
            img.width,
            img.height
        )));
    }
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    std::fs::write(path, encode_pgm(img)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_mapping() {
        let mut b = b"P6\n1 1\n255\n".to_vec();
        b.extend_from_slice(&[128, 0, 255]);
        let img = decode_ppm(&b).unwrap();
        assert!((img.pixels().data()[0] - 0.501961).abs() < 1e-6);
        assert_eq!(encode_ppm(&img).unwrap(), b);
    }

    #[test]
    fn p5_is_unsupported() {
        let b = b"P5\n1 1\n255\n\x00";
        assert!(matches!(decode_ppm(b), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn maxval_other_than_255_is_unsupported() {
        let b = b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00";
        assert!(matches!(decode_ppm(b), Err(Error::UnsupportedFormat(_))));
    }
}
