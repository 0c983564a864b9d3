//! Procedural stand-ins for photo collections and HDR captures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::network::exposure_mask;
use crate::pipeline::{quantize, simulate_ldr, CameraCurve, HdrImage, LdrImage};
use crate::sampler::{sample_patches, PatchRecord, SamplerConfig};
use crate::tensor::Tensor;

/// A scalar pattern over the unit square with values in `[0, 1]`.
#[derive(Clone, Debug)]
enum Pattern {
    Stripes {
        freq: f64,
        angle: f64,
        phase: f64,
        sharp: bool,
    },
    Checker {
        cells: f64,
        angle: f64,
    },
    Waves {
        fx: f64,
        fy: f64,
        px: f64,
        py: f64,
    },
    Blobs {
        centers: Vec<(f64, f64, f64)>,
    },
}

impl Pattern {
    fn random(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let s = size as f64;
        match rng.gen_range(0..4) {
            0 => Pattern::Stripes {
                freq: rng.gen_range(3.0..s / 4.0),
                angle: rng.gen_range(0.0..std::f64::consts::PI),
                phase: rng.gen_range(0.0..1.0),
                sharp: rng.gen_bool(0.5),
            },
            1 => Pattern::Checker {
                cells: s / rng.gen_range(3.0..s / 5.0),
                angle: rng.gen_range(0.0..std::f64::consts::FRAC_PI_2),
            },
            2 => Pattern::Waves {
                fx: rng.gen_range(2.0..s / 6.0),
                fy: rng.gen_range(2.0..s / 6.0),
                px: rng.gen_range(0.0..1.0),
                py: rng.gen_range(0.0..1.0),
            },
            _ => Pattern::Blobs {
                centers: (0..rng.gen_range(4..12))
                    .map(|_| {
                        (
                            rng.gen_range(0.0..1.0),
                            rng.gen_range(0.0..1.0),
                            rng.gen_range(0.03..0.15),
                        )
                    })
                    .collect(),
            },
        }
    }

    /// Sharp pattern with a period of a few pixels.
    fn fine(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let s = size as f64;
        if rng.gen_bool(0.5) {
            Pattern::Stripes {
                freq: s / rng.gen_range(3.0..8.0),
                angle: rng.gen_range(0.0..std::f64::consts::PI),
                phase: rng.gen_range(0.0..1.0),
                sharp: true,
            }
        } else {
            Pattern::Checker {
                cells: s / rng.gen_range(2.0..5.0),
                angle: rng.gen_range(0.0..std::f64::consts::FRAC_PI_2),
            }
        }
    }

    /// Value at normalized coordinates `(u, v)`.
    fn eval(&self, u: f64, v: f64) -> f64 {
        use std::f64::consts::TAU;
        match self {
            Pattern::Stripes {
                freq,
                angle,
                phase,
                sharp,
            } => {
                let t = (u * angle.cos() + v * angle.sin()) * freq + phase;
                let w = 0.5 + 0.5 * (TAU * t).sin();
                if *sharp {
                    if w > 0.5 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    w
                }
            }
            Pattern::Checker { cells, angle } => {
                let s = *cells;
                let (a, b) = (
                    u * angle.cos() - v * angle.sin(),
                    u * angle.sin() + v * angle.cos(),
                );
                let k = ((a * s).floor() + (b * s).floor()) as i64;
                if k.rem_euclid(2) == 0 {
                    1.0
                } else {
                    0.0
                }
            }
            Pattern::Waves { fx, fy, px, py } => {
                0.5 + 0.25 * (TAU * (u * fx + px)).sin() + 0.25 * (TAU * (v * fy + py)).sin()
            }
            Pattern::Blobs { centers } => {
                let mut acc = 0.0;
                for &(cx, cy, r) in centers {
                    let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                    acc += (-d2 / (2.0 * r * r)).exp();
                }
                acc.min(1.0)
            }
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.gen_range(0.0..1.0),
        rng.gen_range(0.0..1.0),
        rng.gen_range(0.0..1.0),
    ]
}

/// Square 8-bit texture image mixing two random patterns and two colors.
pub fn texture_image(size: usize, seed: u64) -> LdrImage<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let primary = Pattern::random(&mut rng, size);
    let secondary = Pattern::random(&mut rng, size);
    let mix = rng.gen_range(0.0..0.4);
    let (c0, c1) = (random_color(&mut rng), random_color(&mut rng));
    let noise: Vec<f64> = (0..size * size)
        .map(|_| rng.gen_range(-0.02..0.02))
        .collect();
    let n = size * size;
    let mut data = vec![0f32; 3 * n];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
            let p = (1.0 - mix) * primary.eval(u, v) + mix * secondary.eval(u, v);
            for c in 0..3 {
                let val = (c0[c] + (c1[c] - c0[c]) * p + noise[y * size + x]).clamp(0.0, 1.0);
                data[c * n + y * size + x] = quantize(val as f32, 8);
            }
        }
    }
    LdrImage::new(Tensor::new(vec![3, size, size], data).expect("sized")).expect("in range")
}

/// Gradient sky over a textured dim ground, with finely textured bright
/// sprites whose radiance reaches up to 100.
pub fn hdr_scene(size: usize, seed: u64) -> HdrImage<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let n = size * size;
    let top = rng.gen_range(0.3..1.0);
    let bottom = rng.gen_range(0.05..0.3);
    let tint = [
        rng.gen_range(0.7..1.0),
        rng.gen_range(0.8..1.0),
        rng.gen_range(0.9..1.2),
    ];
    let horizon = rng.gen_range(0.55..0.85);
    let ground = Pattern::random(&mut rng, size);
    let ground_color = random_color(&mut rng);
    let mut data = vec![0f64; 3 * n];
    for y in 0..size {
        let v = y as f64 / s;
        for x in 0..size {
            let u = x as f64 / s;
            for c in 0..3 {
                let val = if v < horizon {
                    (top + (bottom - top) * v / horizon) * tint[c]
                } else {
                    (0.02 + 0.25 * ground.eval(u, v)) * (0.3 + 0.7 * ground_color[c])
                };
                data[c * n + y * size + x] = val;
            }
        }
    }
    for _ in 0..rng.gen_range(2..6) {
        let level = rng.gen_range(5.0..100.0);
        let texture = Pattern::fine(&mut rng, size);
        let color = [
            rng.gen_range(0.6..1.0),
            rng.gen_range(0.6..1.0),
            rng.gen_range(0.6..1.0),
        ];
        let (cx, cy) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s * 0.8));
        let (rx, ry) = (
            rng.gen_range(s / 10.0..s / 3.0),
            rng.gen_range(s / 10.0..s / 3.0),
        );
        let disc = rng.gen_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
                let inside = if disc {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                };
                if inside {
                    let p = texture.eval(x as f64 / s, y as f64 / s);
                    for c in 0..3 {
                        data[c * n + y * size + x] = level * (0.03 + 0.97 * p) * color[c];
                    }
                }
            }
        }
    }
    let pixels = Tensor::new(
        vec![3, size, size],
        data.into_iter().map(|v| v as f32).collect(),
    )
    .expect("sized");
    HdrImage::new(pixels).expect("non-negative")
}

/// Linear radiance derived from a texture: the display values are
/// linearized and their highlights boosted by up to `60x`.
pub fn pseudo_hdr(texture: &LdrImage<f32>, seed: u64) -> HdrImage<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(10.0..60.0);
    let lin = texture.linearize(2.2);
    let pixels = lin.pixels().map(|v| v * (1.0 + k as f32 * v.powi(4)));
    HdrImage::new(pixels).expect("non-negative")
}

/// HDR training records from pseudo-HDR textures: one capture per texture
/// at a random saturation percentile, keeping captures that saturate.
pub fn pseudo_hdr_records(
    textures: &[LdrImage<f32>],
    config: &SamplerConfig,
    seed: u64,
) -> Result<Vec<PatchRecord<f32>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = config.percentile_range;
    let mut out = Vec::new();
    for (i, tex) in textures.iter().enumerate() {
        let h = pseudo_hdr(tex, rng.gen());
        let pct = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let cap = match simulate_ldr(&h, pct, &CameraCurve::default(), config.quantize_bits) {
            Ok(c) => c,
            Err(crate::error::Error::DegenerateInput(_)) => continue,
            Err(e) => return Err(e),
        };
        let mask = exposure_mask(&cap.ldr, config.alpha)?;
        if mask.values().data().iter().all(|&v| v == 1.0) {
            continue;
        }
        out.push(PatchRecord {
            hdr: cap.scaled_hdr(&h),
            ldr: cap.ldr,
            mask,
            score: 0.0,
            source_id: i as u64,
            offset: (0, 0),
        });
    }
    Ok(out)
}

/// Samples textured patches from a list of `(source id, image)` pairs and
/// sorts them by source id and offset.
pub fn sample_corpus(
    images: &[(u64, HdrImage<f32>)],
    config: &SamplerConfig,
    seed: u64,
) -> Result<Vec<PatchRecord<f32>>> {
    let mut out = Vec::new();
    for (id, img) in images {
        let s = seed ^ id.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        out.extend(sample_patches(img, *id, config, s)?);
    }
    out.sort_by_key(|a| (a.source_id, a.offset));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textures_are_deterministic_and_quantized() {
        let a = texture_image(32, 5);
        assert_eq!(a, texture_image(32, 5));
        assert!(a
            .pixels()
            .data()
            .iter()
            .all(|&v| ((v * 255.0).round() / 255.0 - v).abs() < 1e-7));
    }

    #[test]
    fn scenes_have_bright_sprites() {
        let h = hdr_scene(64, 3);
        assert!(h.pixels().max_value() > 4.0);
        assert!(h.pixels().max_value() <= 100.0);
    }
}
