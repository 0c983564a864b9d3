//! Training-data curation: the textured-patch metric, random patch
//! extraction and synthetic hole masks for inpainting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{exposure_mask, SoftMask, DEFAULT_ALPHA};
use crate::pipeline::{crop_chw, luminance, simulate_ldr, CameraCurve, HdrImage, LdrImage};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub sigma_c: f64,
    pub sigma_s: f64,
    /// Bilateral window radius; `None` means `ceil(2 sigma_s)`.
    pub radius: Option<usize>,
    pub threshold: f64,
    pub patch_size: usize,
    pub per_image: usize,
    pub alpha: f64,
    /// Saturation percentile drawn uniformly from this range per patch.
    pub percentile_range: (f64, f64),
    pub curve: CameraCurve,
    pub quantize_bits: u8,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            sigma_c: 100.0,
            sigma_s: 10.0,
            radius: None,
            threshold: 0.85,
            patch_size: 64,
            per_image: 32,
            alpha: DEFAULT_ALPHA,
            percentile_range: (85.0, 97.0),
            curve: CameraCurve::default(),
            quantize_bits: 8,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_c > 0.0 && self.sigma_s > 0.0) {
            return Err(Error::Domain("bilateral sigmas must be positive".into()));
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::Domain(format!(
                "threshold {} is negative",
                self.threshold
            )));
        }
        if self.patch_size == 0 || self.per_image == 0 {
            return Err(Error::Domain(
                "patch size and per-image count must be positive".into(),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Domain(format!(
                "alpha {} outside (0, 1)",
                self.alpha
            )));
        }
        let (lo, hi) = self.percentile_range;
        if !(lo > 0.0 && lo <= hi && hi < 100.0) {
            return Err(Error::Domain(format!(
                "percentile range ({lo}, {hi}) is invalid"
            )));
        }
        Ok(())
    }

    pub fn bilateral_radius(&self) -> usize {
        self.radius
            .unwrap_or_else(|| (2.0 * self.sigma_s).ceil() as usize)
            .max(1)
    }
}

/// One training example cut from a source image.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord<T: Scalar = f32> {
    /// Ground truth in the radiance units of `ldr`.
    pub hdr: HdrImage<T>,
    pub ldr: LdrImage<T>,
    pub mask: SoftMask<T>,
    pub score: f64,
    pub source_id: u64,
    /// `(row, column)` of the patch in the source image.
    pub offset: (usize, usize),
}

/// BT.709 luma, `[h, w]`.
pub fn rgb_to_gray<T: Scalar>(h: &HdrImage<T>) -> Result<Tensor<T>> {
    luminance(h.pixels())
}

/// Mirror index into `0..n`, repeating the edge sample (…, 1, 0, 0, 1, …).
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let k = i.rem_euclid(period);
    if k >= n as isize {
        (period - 1 - k) as usize
    } else {
        k as usize
    }
}

fn expect_hw<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        &[h, w] => Ok((h, w)),
        &[1, h, w] => Ok((h, w)),
        s => Err(Error::dim(format!(
            "expected a single-channel image, got {s:?}"
        ))),
    }
}

/// Bilateral filter over a square window with mirrored borders.
///
/// Sums are accumulated in 64-bit regardless of `T`.
pub fn bilateral_filter<T: Scalar>(
    l: &Tensor<T>,
    sigma_c: f64,
    sigma_s: f64,
    radius: usize,
) -> Result<Tensor<T>> {
    let (h, w) = expect_hw(l)?;
    if radius == 0 {
        return Err(Error::Domain("bilateral radius must be at least 1".into()));
    }
    let r = radius as isize;
    let side = 2 * radius + 1;
    let mut spatial = vec![0.0f64; side * side];
    for dy in -r..=r {
        for dx in -r..=r {
            spatial[((dy + r) as usize) * side + (dx + r) as usize] =
                (-((dy * dy + dx * dx) as f64) / (2.0 * sigma_s * sigma_s)).exp();
        }
    }
    let inv_c = 1.0 / (2.0 * sigma_c * sigma_c);
    let src: Vec<f64> = l.data().iter().map(|v| v.to_f64()).collect();
    let rows: Vec<usize> = (-r..h as isize + r).map(|i| reflect(i, h)).collect();
    let cols: Vec<usize> = (-r..w as isize + r).map(|i| reflect(i, w)).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let center = src[y * w + x];
            let (mut num, mut den) = (0.0, 0.0);
            for (ky, &sy) in rows[y..y + side].iter().enumerate() {
                let srow = &src[sy * w..sy * w + w];
                let wrow = &spatial[ky * side..ky * side + side];
                for (&sx, &ws) in cols[x..x + side].iter().zip(wrow) {
                    let v = srow[sx];
                    let d = v - center;
                    let wt = ws * (-d * d * inv_c).exp();
                    num += wt * v;
                    den += wt;
                }
            }
            out.push(T::from_f64(num / den));
        }
    }
    Tensor::new(l.shape().to_vec(), out)
}

/// `|Sobel_x| + |Sobel_y|` with mirrored borders.
pub fn sobel_magnitude<T: Scalar>(d: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = expect_hw(d)?;
    let src = d.data();
    let at = |y: isize, x: isize| src[reflect(y, h) * w + reflect(x, w)].to_f64();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out.push(T::from_f64(gx.abs() + gy.abs()));
        }
    }
    Tensor::new(d.shape().to_vec(), out)
}

/// Mean detail-layer gradient magnitude over the saturated region.
///
/// The per-channel mask is reduced to one channel by taking the maximum of
/// `1 − M` over channels.
pub fn patch_metric<T: Scalar>(
    h: &HdrImage<T>,
    m: &SoftMask<T>,
    config: &SamplerConfig,
) -> Result<f64> {
    h.pixels().expect_same_shape(m.values())?;
    let gray = rgb_to_gray(h)?;
    let l = gray.map(|v| (v + T::ONE).ln());
    let base = bilateral_filter(
        &l,
        config.sigma_c,
        config.sigma_s,
        config.bilateral_radius(),
    )?;
    let detail = l.zip_map(&base, |a, b| a - b)?;
    let grad = sobel_magnitude(&detail)?;
    let (c, hh, ww) = (h.channels(), h.height(), h.width());
    let md = m.values().data();
    let mut acc = 0.0;
    for i in 0..hh * ww {
        let mut weight = 0.0f64;
        for ci in 0..c {
            weight = weight.max(1.0 - md[ci * hh * ww + i].to_f64());
        }
        acc += grad.data()[i].to_f64() * weight;
    }
    Ok(acc / (hh * ww) as f64)
}

/// Draws `per_image` random patches from `h`, simulates an LDR capture of
/// each and keeps those with saturated content whose metric exceeds the
/// threshold. Deterministic for a given seed.
pub fn sample_patches<T: Scalar>(
    h: &HdrImage<T>,
    source_id: u64,
    config: &SamplerConfig,
    seed: u64,
) -> Result<Vec<PatchRecord<T>>> {
    config.validate()?;
    let p = config.patch_size;
    if h.height() < p || h.width() < p {
        return Err(Error::dim(format!(
            "image {}x{} is smaller than patch size {p}",
            h.height(),
            h.width()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = config.percentile_range;
    let mut out = Vec::new();
    for _ in 0..config.per_image {
        let y0 = rng.gen_range(0..=h.height() - p);
        let x0 = rng.gen_range(0..=h.width() - p);
        let pct = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let crop = HdrImage::new(crop_chw(h.pixels(), y0, x0, p, p)?)?;
        let capture = match simulate_ldr(&crop, pct, &config.curve, config.quantize_bits) {
            Ok(c) => c,
            Err(Error::DegenerateInput(_)) => continue,
            Err(e) => return Err(e),
        };
        let mask = exposure_mask(&capture.ldr, config.alpha)?;
        if mask.values().data().iter().all(|&v| v == T::ONE) {
            continue;
        }
        let hdr = capture.scaled_hdr(&crop);
        let score = patch_metric(&hdr, &mask, config)?;
        if score > config.threshold {
            out.push(PatchRecord {
                hdr,
                ldr: capture.ldr,
                mask,
                score,
                source_id,
                offset: (y0, x0),
            });
        }
    }
    Ok(out)
}

/// Settings for [`generate_inpainting_mask`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HoleMaskConfig {
    /// Accepted hole fraction, inclusive.
    pub coverage: (f64, f64),
    /// Brush width range in pixels, inclusive.
    pub thickness: (usize, usize),
    pub max_attempts: usize,
}

impl Default for HoleMaskConfig {
    fn default() -> Self {
        HoleMaskConfig {
            coverage: (0.05, 0.45),
            thickness: (3, 15),
            max_attempts: 100,
        }
    }
}

fn stamp_disk(holes: &mut [bool], h: usize, w: usize, cy: f64, cx: f64, radius: f64) {
    let r2 = radius * radius;
    let y0 = (cy - radius).floor().max(0.0) as usize;
    let y1 = ((cy + radius).ceil() as isize).min(h as isize - 1);
    let x0 = (cx - radius).floor().max(0.0) as usize;
    let x1 = ((cx + radius).ceil() as isize).min(w as isize - 1);
    if y1 < 0 || x1 < 0 {
        return;
    }
    for y in y0..=y1 as usize {
        for x in x0..=x1 as usize {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            if dy * dy + dx * dx <= r2 {
                holes[y * w + x] = true;
            }
        }
    }
}

fn draw_stroke(holes: &mut [bool], h: usize, w: usize, cfg: &HoleMaskConfig, rng: &mut ChaCha8Rng) {
    let (tlo, thi) = cfg.thickness;
    let radius = rng.gen_range(tlo..=thi.max(tlo)) as f64 / 2.0;
    let mut y = rng.gen_range(0.0..h as f64);
    let mut x = rng.gen_range(0.0..w as f64);
    let mut angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let vertices = rng.gen_range(2..=8);
    let max_len = (h.max(w) as f64 / 3.0).max(2.0);
    for _ in 0..vertices {
        angle += rng.gen_range(-1.2..1.2);
        let len = rng.gen_range(1.0..max_len);
        let steps = len.ceil() as usize;
        for _ in 0..steps {
            stamp_disk(holes, h, w, y, x, radius);
            y = (y + angle.sin()).clamp(0.0, (h - 1) as f64);
            x = (x + angle.cos()).clamp(0.0, (w - 1) as f64);
        }
        stamp_disk(holes, h, w, y, x, radius);
    }
}

fn draw_ellipse(holes: &mut [bool], h: usize, w: usize, rng: &mut ChaCha8Rng) {
    let cy = rng.gen_range(0.0..h as f64);
    let cx = rng.gen_range(0.0..w as f64);
    let amax = (h.min(w) as f64 / 5.0).max(1.5);
    let a = rng.gen_range(1.0..amax);
    let b = rng.gen_range(1.0..amax);
    let theta = rng.gen_range(0.0..std::f64::consts::PI);
    let (s, c) = theta.sin_cos();
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                holes[y * w + x] = true;
            }
        }
    }
}

/// Binary mask of random strokes and ellipses, 0 in holes and 1 elsewhere,
/// replicated over the leading channel extent of `shape` (`[c, h, w]`).
pub fn generate_inpainting_mask<T: Scalar>(
    shape: [usize; 3],
    seed: u64,
    config: &HoleMaskConfig,
) -> Result<SoftMask<T>> {
    let (lo, hi) = config.coverage;
    if !(lo > 0.0 && lo <= hi && hi < 1.0) {
        return Err(Error::Domain(format!(
            "coverage bounds ({lo}, {hi}) must lie in (0, 1)"
        )));
    }
    let [c, h, w] = shape;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::dim(format!(
            "mask shape {shape:?} has a zero extent"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = h * w;
    for _ in 0..config.max_attempts.max(1) {
        let mut holes = vec![false; n];
        let mut count = 0;
        for _ in 0..64 {
            if rng.gen_bool(0.7) {
                draw_stroke(&mut holes, h, w, config, &mut rng);
            } else {
                draw_ellipse(&mut holes, h, w, &mut rng);
            }
            count = holes.iter().filter(|&&b| b).count();
            if count as f64 >= lo * n as f64 {
                break;
            }
        }
        let frac = count as f64 / n as f64;
        if frac >= lo && frac <= hi {
            let mut data = Vec::with_capacity(c * n);
            for _ in 0..c {
                data.extend(holes.iter().map(|&b| if b { T::ZERO } else { T::ONE }));
            }
            return SoftMask::new(Tensor::new(vec![c, h, w], data)?);
        }
    }
    Err(Error::DegenerateInput(format!(
        "no mask with hole fraction in [{lo}, {hi}] after {} attempts",
        config.max_attempts
    )))
}
