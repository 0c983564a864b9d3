//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use hdrmask::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Direct cross-correlation with constant padding, summed in 64-bit.
pub fn conv2d_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    padding: usize,
    pad_value: f64,
) -> Tensor<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wd + 2 * padding - kw) / stride + 1;
    let xv = |ni: usize, c: usize, y: isize, xx: isize| -> f64 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
            pad_value
        } else {
            x.data()[((ni * cin + c) * h + y as usize) * wd + xx as usize]
        }
    };
    let mut out = Vec::with_capacity(n * cout * oh * ow);
    for ni in 0..n {
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - padding as isize;
                                let xx = (ox * stride + kx) as isize - padding as isize;
                                acc += w.data()[((o * cin + c) * kh + ky) * kw + kx]
                                    * xv(ni, c, y, xx);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out).unwrap()
}

/// Mirror index that repeats the edge sample (…, 1, 0, 0, 1, …).
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut j = i;
    while j < 0 || j >= n {
        j = if j < 0 { -1 - j } else { 2 * n - 1 - j };
    }
    j as usize
}

/// Bilateral filter of a single-channel `h × w` image over a square window.
pub fn bilateral_oracle(
    l: &[f64],
    h: usize,
    w: usize,
    sigma_c: f64,
    sigma_s: f64,
    radius: usize,
) -> Vec<f64> {
    let r = radius as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let c = l[(y as usize) * w + x as usize];
            let (mut num, mut den) = (0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let v = l[reflect(y + dy, h) * w + reflect(x + dx, w)];
                    let spatial = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma_s * sigma_s)).exp();
                    let range = (-(v - c) * (v - c) / (2.0 * sigma_c * sigma_c)).exp();
                    num += spatial * range * v;
                    den += spatial * range;
                }
            }
            out[(y as usize) * w + x as usize] = num / den;
        }
    }
    out
}

/// Normalized Gaussian blur over the same window and borders.
pub fn gaussian_oracle(l: &[f64], h: usize, w: usize, sigma_s: f64, radius: usize) -> Vec<f64> {
    bilateral_oracle(l, h, w, f64::INFINITY, sigma_s, radius)
}

/// `max |a − b| / max |b|`.
pub fn normwise_rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Eigenvalues of a small symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i * n + i]).collect()
}
