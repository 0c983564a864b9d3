//! Read-only Radiance RGBE (`.hdr`) support for ingesting existing datasets.
//! Flat and new-style run-length scanlines are decoded; only the standard
//! `-Y h +X w` orientation is accepted.

use std::path::Path;

use super::checked_volume;
use crate::error::{Error, Result};
use crate::pipeline::HdrImage;
use crate::tensor::Tensor;

/// Returns the line starting at `pos` (without the newline) and the offset
/// just past it.
fn next_line(bytes: &[u8], pos: usize) -> Result<(&str, usize)> {
    let rest = bytes.get(pos..).unwrap_or(&[]);
    let len = rest
        .iter()
        .take(4096)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse(pos, "unterminated or overlong header line"))?;
    let s = std::str::from_utf8(&rest[..len])
        .map_err(|_| Error::parse(pos, "header line is not UTF-8"))?;
    Ok((s, pos + len + 1))
}

fn rgbe_to_float(px: [u8; 4]) -> [f32; 3] {
    if px[3] == 0 {
        return [0.0; 3];
    }
    let f = 2f64.powi(px[3] as i32 - 136);
    [
        ((px[0] as f64 + 0.5) * f) as f32,
        ((px[1] as f64 + 0.5) * f) as f32,
        ((px[2] as f64 + 0.5) * f) as f32,
    ]
}

fn read_scanline(bytes: &[u8], mut pos: usize, w: usize, out: &mut [[u8; 4]]) -> Result<usize> {
    let need = |pos: usize, n: usize| -> Result<()> {
        if bytes.len() < pos + n {
            Err(Error::parse(
                pos,
                format!(
                    "truncated scanline: expected {n} bytes, found {}",
                    bytes.len().saturating_sub(pos)
                ),
            ))
        } else {
            Ok(())
        }
    };
    need(pos, 4)?;
    let head = &bytes[pos..pos + 4];
    let rle = (8..0x8000).contains(&w) && head[0] == 2 && head[1] == 2 && head[2] & 0x80 == 0;
    if !rle {
        need(pos, 4 * w)?;
        for (x, px) in out.iter_mut().enumerate() {
            px.copy_from_slice(&bytes[pos + 4 * x..pos + 4 * x + 4]);
        }
        return Ok(pos + 4 * w);
    }
    let declared = ((head[2] as usize) << 8) | head[3] as usize;
    if declared != w {
        return Err(Error::parse(
            pos,
            format!("scanline width {declared} != {w}"),
        ));
    }
    pos += 4;
    for ch in 0..4 {
        let mut x = 0;
        while x < w {
            need(pos, 1)?;
            let count = bytes[pos] as usize;
            pos += 1;
            if count > 128 {
                let run = count - 128;
                need(pos, 1)?;
                if x + run > w {
                    return Err(Error::parse(pos - 1, "run exceeds scanline"));
                }
                let v = bytes[pos];
                pos += 1;
                for px in &mut out[x..x + run] {
                    px[ch] = v;
                }
                x += run;
            } else {
                if count == 0 || x + count > w {
                    return Err(Error::parse(pos - 1, format!("bad literal count {count}")));
                }
                need(pos, count)?;
                for (k, px) in out[x..x + count].iter_mut().enumerate() {
                    px[ch] = bytes[pos + k];
                }
                pos += count;
                x += count;
            }
        }
    }
    Ok(pos)
}

pub fn decode_rgbe(bytes: &[u8]) -> Result<HdrImage<f32>> {
    let (first, mut pos) = next_line(bytes, 0)?;
    if !(first.starts_with("#?RADIANCE") || first.starts_with("#?RGBE")) {
        return Err(Error::parse(0, format!("unknown signature {first:?}")));
    }
    loop {
        let (l, next) = next_line(bytes, pos)?;
        pos = next;
        if l.is_empty() {
            break;
        }
        if let Some(fmt) = l.strip_prefix("FORMAT=") {
            if fmt != "32-bit_rle_rgbe" {
                return Err(Error::UnsupportedFormat(format!("RGBE pixel format {fmt}")));
            }
        }
    }
    let res_at = pos;
    let (res, next) = next_line(bytes, pos)?;
    pos = next;
    let parts: Vec<&str> = res.split_whitespace().collect();
    let (h, w) = match parts.as_slice() {
        ["-Y", h, "+X", w] => {
            let h: usize = h
                .parse()
                .map_err(|_| Error::parse(res_at, "invalid height"))?;
            let w: usize = w
                .parse()
                .map_err(|_| Error::parse(res_at, "invalid width"))?;
            (h, w)
        }
        [a, _, b, _] if a.len() == 2 && b.len() == 2 => {
            return Err(Error::UnsupportedFormat(format!("orientation {res:?}")))
        }
        _ => {
            return Err(Error::parse(
                res_at,
                format!("invalid resolution line {res:?}"),
            ))
        }
    };
    if h == 0 || w == 0 {
        return Err(Error::parse(res_at, "image has a zero extent"));
    }
    let n = checked_volume(&[h, w], res_at)?;
    // Run-length coding spends at least 8 bytes per 127 pixels.
    if n / 16 > bytes.len() {
        return Err(Error::parse(
            res_at,
            format!("{h}x{w} image cannot fit in {} bytes", bytes.len()),
        ));
    }
    let mut data = vec![0f32; 3 * n];
    let mut line = vec![[0u8; 4]; w];
    for y in 0..h {
        pos = read_scanline(bytes, pos, w, &mut line)?;
        for (x, &px) in line.iter().enumerate() {
            let rgb = rgbe_to_float(px);
            for c in 0..3 {
                data[(c * h + y) * w + x] = rgb[c];
            }
        }
    }
    HdrImage::new(Tensor::new(vec![3, h, w], data)?)
}

pub fn read_rgbe(path: impl AsRef<Path>) -> Result<HdrImage<f32>> {
    decode_rgbe(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_pixels() {
        let mut b = b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y 1 +X 2\n".to_vec();
        b.extend_from_slice(&[128, 64, 0, 129, 0, 0, 0, 0]);
        let img = decode_rgbe(&b).unwrap();
        let d = img.pixels().data();
        assert_eq!(d[0], 128.5 / 128.0);
        assert_eq!(d[2], 64.5 / 128.0);
        assert_eq!(d[1], 0.0);
    }

    #[test]
    fn run_length_scanline() {
        let mut b = b"#?RADIANCE\n\n-Y 1 +X 8\n".to_vec();
        b.extend_from_slice(&[2, 2, 0, 8]);
        for v in [10u8, 20, 30, 128] {
            b.extend_from_slice(&[128 + 8, v]);
        }
        let img = decode_rgbe(&b).unwrap();
        let d = img.pixels().data();
        assert!(d[..8].iter().all(|&v| v == 10.5 / 256.0));
        assert!(d[16..].iter().all(|&v| v == 30.5 / 256.0));
    }

    #[test]
    fn bad_signature() {
        assert!(matches!(decode_rgbe(b"P6\n"), Err(Error::Parse { .. })));
    }
}
