//! Conversions between linear radiance and display-referred images, the
//! final HDR composition, μ-law range compression and image metrics.

use crate::error::{Error, Result};
use crate::network::SoftMask;
use crate::tensor::{Scalar, Tensor};

/// Linear-radiance image, `[c, h, w]` with non-negative finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct HdrImage<T: Scalar = f32> {
    pixels: Tensor<T>,
}

/// Display-referred image, `[c, h, w]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LdrImage<T: Scalar = f32> {
    pixels: Tensor<T>,
    bit_depth: u8,
}

fn expect_chw<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        s => Err(Error::dim(format!(
            "image tensor must be [c, h, w], got {s:?}"
        ))),
    }
}

impl<T: Scalar> HdrImage<T> {
    pub fn new(pixels: Tensor<T>) -> Result<Self> {
        expect_chw(&pixels)?;
        pixels.check_finite("hdr image")?;
        if let Some(v) = pixels.data().iter().find(|&&v| v < T::ZERO) {
            return Err(Error::Domain(format!("negative radiance {v} in HDR image")));
        }
        Ok(HdrImage { pixels })
    }

    pub fn pixels(&self) -> &Tensor<T> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor<T> {
        self.pixels
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// `[1, c, h, w]` view for the network.
    pub fn to_batch(&self) -> Tensor<T> {
        let mut shape = vec![1];
        shape.extend_from_slice(self.pixels.shape());
        Tensor::new(shape, self.pixels.data().to_vec()).expect("same length")
    }

    /// Rectangular crop.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        Ok(HdrImage {
            pixels: crop_chw(&self.pixels, y0, x0, h, w)?,
        })
    }

    pub fn cast<U: Scalar>(&self) -> HdrImage<U> {
        HdrImage {
            pixels: self.pixels.cast(),
        }
    }
}

impl<T: Scalar> LdrImage<T> {
    pub fn new(pixels: Tensor<T>) -> Result<Self> {
        Self::with_bit_depth(pixels, 8)
    }

    pub fn with_bit_depth(pixels: Tensor<T>, bit_depth: u8) -> Result<Self> {
        expect_chw(&pixels)?;
        pixels.check_finite("ldr image")?;
        if let Some(v) = pixels.data().iter().find(|&&v| v < T::ZERO || v > T::ONE) {
            return Err(Error::Domain(format!("LDR value {v} outside [0, 1]")));
        }
        Ok(LdrImage { pixels, bit_depth })
    }

    pub fn pixels(&self) -> &Tensor<T> {
        &self.pixels
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn to_batch(&self) -> Tensor<T> {
        let mut shape = vec![1];
        shape.extend_from_slice(self.pixels.shape());
        Tensor::new(shape, self.pixels.data().to_vec()).expect("same length")
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        Ok(LdrImage {
            pixels: crop_chw(&self.pixels, y0, x0, h, w)?,
            bit_depth: self.bit_depth,
        })
    }

    /// Linear radiance `t^gamma`.
    pub fn linearize(&self, gamma: f64) -> HdrImage<T> {
        let g = T::from_f64(gamma);
        HdrImage {
            pixels: self.pixels.map(|v| v.powf(g)),
        }
    }
}

pub(crate) fn crop_chw<T: Scalar>(
    t: &Tensor<T>,
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let (c, ih, iw) = expect_chw(t)?;
    if y0 + h > ih || x0 + w > iw {
        return Err(Error::dim(format!(
            "crop {h}x{w} at ({y0}, {x0}) exceeds image {ih}x{iw}"
        )));
    }
    let mut out = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        for y in y0..y0 + h {
            let row = (ci * ih + y) * iw;
            out.extend_from_slice(&t.data()[row + x0..row + x0 + w]);
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// BT.709 luma of a `[3, h, w]` tensor, as `[h, w]`.
pub fn luminance<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = expect_chw(t)?;
    if c != 3 {
        return Err(Error::dim(format!("luminance needs 3 channels, got {c}")));
    }
    let n = h * w;
    let d = t.data();
    let (kr, kg, kb) = (
        T::from_f64(0.2126),
        T::from_f64(0.7152),
        T::from_f64(0.0722),
    );
    Ok(Tensor::from_fn([h, w], |i| {
        kr * d[i] + kg * d[n + i] + kb * d[2 * n + i]
    }))
}

/// Nearest-rank percentile (`p` in `(0, 100]`).
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Camera response used when simulating an LDR capture.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CurveKind {
    /// `t = x^(1/gamma)`.
    Gamma { gamma: f64 },
    /// `t = (1 + sigma) x^n / (x^n + sigma)`.
    Sigmoid { n: f64, sigma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraCurve {
    pub kind: CurveKind,
    /// Extra exposure multiplier applied after percentile normalization.
    pub exposure: f64,
}

impl Default for CameraCurve {
    fn default() -> Self {
        CameraCurve {
            kind: CurveKind::Gamma { gamma: 2.0 },
            exposure: 1.0,
        }
    }
}

impl CameraCurve {
    pub fn apply(&self, x: f64) -> f64 {
        match self.kind {
            CurveKind::Gamma { gamma } => x.powf(1.0 / gamma),
            CurveKind::Sigmoid { n, sigma } => {
                let xn = x.powf(n);
                (1.0 + sigma) * xn / (xn + sigma)
            }
        }
    }
}

/// Quantizes `t` in `[0, 1]` to `bits` and maps back to `[0, 1]`.
/// `bits == 0` disables quantization.
pub fn quantize<T: Scalar>(t: T, bits: u8) -> T {
    if bits == 0 {
        return t;
    }
    let levels = ((1u64 << bits) - 1) as f64;
    let k = (t.to_f64() * levels).round();
    T::from_f64(k) / T::from_f64(levels)
}

/// Result of [`simulate_ldr`]: the LDR capture and the radiance scale used.
#[derive(Clone, Debug)]
pub struct SimulatedCapture<T: Scalar = f32> {
    pub ldr: LdrImage<T>,
    /// Multiplier applied to the HDR input before clipping.
    pub scale: f64,
}

impl<T: Scalar> SimulatedCapture<T> {
    /// The HDR input expressed in the capture's radiance units.
    pub fn scaled_hdr(&self, h: &HdrImage<T>) -> HdrImage<T> {
        let s = T::from_f64(self.scale);
        HdrImage {
            pixels: h.pixels().map(|v| v * s),
        }
    }
}

/// Simulates a single LDR exposure of `h`: the `saturation_percentile`
/// luminance is mapped to 1, values are clipped, passed through the camera
/// curve and quantized.
pub fn simulate_ldr<T: Scalar>(
    h: &HdrImage<T>,
    saturation_percentile: f64,
    curve: &CameraCurve,
    quantize_bits: u8,
) -> Result<SimulatedCapture<T>> {
    if !(saturation_percentile > 0.0 && saturation_percentile < 100.0) {
        return Err(Error::Domain(format!(
            "saturation percentile {saturation_percentile} outside (0, 100)"
        )));
    }
    if !(curve.exposure > 0.0) {
        return Err(Error::Domain("exposure scale must be positive".into()));
    }
    let max = h.pixels().max_value().to_f64();
    if !(max > 0.0) {
        return Err(Error::DegenerateInput(
            "HDR image has no positive radiance".into(),
        ));
    }
    let lum: Vec<f64> = if h.channels() == 3 {
        luminance(h.pixels())?
            .data()
            .iter()
            .map(|v| v.to_f64())
            .collect()
    } else {
        h.pixels().data().iter().map(|v| v.to_f64()).collect()
    };
    let mut reference = percentile(&lum, saturation_percentile);
    if !(reference > 0.0) {
        reference = max;
    }
    let scale = curve.exposure / reference;
    let s = T::from_f64(scale);
    let pixels = h.pixels().map(|v| {
        let lin = (v * s).min(T::ONE).max(T::ZERO);
        let t = match curve.kind {
            // Kept in T so that linearization round-trips exactly.
            CurveKind::Gamma { gamma } => lin.powf(T::from_f64(1.0 / gamma)),
            _ => T::from_f64(curve.apply(lin.to_f64())),
        };
        quantize(t.min(T::ONE).max(T::ZERO), quantize_bits)
    });
    Ok(SimulatedCapture {
        ldr: LdrImage::with_bit_depth(pixels, quantize_bits)?,
        scale,
    })
}

/// `Ĥ = M ⊙ T^γ + (1 − M) ⊙ (exp(Ŷ) − 1)`, clamped at 0.
pub fn compose_hdr<T: Scalar>(
    t: &LdrImage<T>,
    m: &SoftMask<T>,
    y_hat: &Tensor<T>,
    gamma: f64,
) -> Result<HdrImage<T>> {
    let (c, h, w) = expect_chw(t.pixels())?;
    t.pixels().expect_same_shape(m.values())?;
    let y = match y_hat.shape() {
        &[1, yc, yh, yw] if (yc, yh, yw) == (c, h, w) => y_hat.data(),
        &[yc, yh, yw] if (yc, yh, yw) == (c, h, w) => y_hat.data(),
        s => {
            return Err(Error::dim(format!(
                "prediction shape {s:?} does not match image {:?}",
                t.pixels().shape()
            )))
        }
    };
    let g = T::from_f64(gamma);
    let mut out = Vec::with_capacity(c * h * w);
    for (i, ((&tv, &mv), &yv)) in t
        .pixels()
        .data()
        .iter()
        .zip(m.values().data())
        .zip(y)
        .enumerate()
    {
        let e = yv.exp();
        if !e.is_finite() {
            let (ci, rem) = (i / (h * w), i % (h * w));
            return Err(Error::Numeric(format!(
                "exp overflow for prediction {yv} at channel {ci}, row {}, column {}",
                rem / w,
                rem % w
            )));
        }
        let v = mv * tv.powf(g) + (T::ONE - mv) * (e - T::ONE);
        out.push(v.max(T::ZERO));
    }
    HdrImage::new(Tensor::new(vec![c, h, w], out)?)
}

/// `log(1 + μH) / log(1 + μ)`, elementwise, for inputs in `[0, 1]`.
pub fn mu_law_compress<T: Scalar>(h: &Tensor<T>, mu: f64) -> Result<Tensor<T>> {
    if let Some(v) = h.data().iter().find(|&&v| v < T::ZERO) {
        return Err(Error::Domain(format!("μ-law input {v} is negative")));
    }
    let m = T::from_f64(mu);
    let denom = T::from_f64((1.0 + mu).ln());
    Ok(h.map(|v| (T::ONE + m * v).ln() / denom))
}

/// Gamma encoding used by [`mse_gamma`].
pub const MSE_GAMMA: f64 = 2.2;
/// Luminance percentile used to normalize images in [`mse_gamma`].
pub const MSE_NORMALIZATION_PERCENTILE: f64 = 99.9;

fn mse_reference<T: Scalar>(truth: &HdrImage<T>) -> Result<f64> {
    let vals: Vec<f64> = if truth.channels() == 3 {
        luminance(truth.pixels())?
            .data()
            .iter()
            .map(|v| v.to_f64())
            .collect()
    } else {
        truth.pixels().data().iter().map(|v| v.to_f64()).collect()
    };
    let mut r = percentile(&vals, MSE_NORMALIZATION_PERCENTILE);
    if !(r > 0.0) {
        r = truth.pixels().max_value().to_f64();
    }
    if !(r > 0.0) {
        return Err(Error::DegenerateInput(
            "ground truth is entirely zero".into(),
        ));
    }
    Ok(r)
}

fn gamma_encode(v: f64, reference: f64) -> f64 {
    (v / reference).clamp(0.0, 1.0).powf(1.0 / MSE_GAMMA)
}

/// MSE between gamma-encoded images after normalizing both by the ground
/// truth's 99.9th-percentile luminance and clipping to `[0, 1]`.
pub fn mse_gamma<T: Scalar>(predicted: &HdrImage<T>, truth: &HdrImage<T>) -> Result<f64> {
    predicted.pixels().expect_same_shape(truth.pixels())?;
    let r = mse_reference(truth)?;
    let n = truth.pixels().len() as f64;
    let sum: f64 = predicted
        .pixels()
        .data()
        .iter()
        .zip(truth.pixels().data())
        .map(|(&p, &t)| {
            let d = gamma_encode(p.to_f64(), r) - gamma_encode(t.to_f64(), r);
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// [`mse_gamma`] restricted to the saturated region: each pixel-channel is
/// weighted by `1 − M`. Returns 0 when the mask is everywhere 1.
pub fn mse_gamma_masked<T: Scalar>(
    predicted: &HdrImage<T>,
    truth: &HdrImage<T>,
    mask: &SoftMask<T>,
) -> Result<f64> {
    predicted.pixels().expect_same_shape(truth.pixels())?;
    truth.pixels().expect_same_shape(mask.values())?;
    let r = mse_reference(truth)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&p, &t), &m) in predicted
        .pixels()
        .data()
        .iter()
        .zip(truth.pixels().data())
        .zip(mask.values().data())
    {
        let w = 1.0 - m.to_f64();
        let d = gamma_encode(p.to_f64(), r) - gamma_encode(t.to_f64(), r);
        num += w * d * d;
        den += w;
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// Percentage of pixels whose largest channel exceeds `alpha`.
pub fn saturation_percentage<T: Scalar>(t: &LdrImage<T>, alpha: f64) -> f64 {
    let (c, h, w) = (t.channels(), t.height(), t.width());
    let n = h * w;
    let a = T::from_f64(alpha);
    let d = t.pixels().data();
    let count = (0..n)
        .filter(|&i| (0..c).any(|ci| d[ci * n + i] > a))
        .count();
    100.0 * count as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hdr(c: usize, h: usize, w: usize, f: impl FnMut(usize) -> f64) -> HdrImage<f64> {
        HdrImage::new(Tensor::from_fn([c, h, w], f)).unwrap()
    }

    #[test]
    fn rejects_invalid_images() {
        assert!(HdrImage::new(Tensor::<f32>::full([3, 2, 2], -1.0)).is_err());
        assert!(LdrImage::new(Tensor::<f32>::full([3, 2, 2], 1.5)).is_err());
        assert!(LdrImage::new(Tensor::<f32>::full([2, 2], 0.5)).is_err());
    }

    #[test]
    fn simulate_gamma_without_quantization() {
        // a quarter of pixels at 4.0 so the 93rd percentile is 4.0
        let h = hdr(3, 4, 4, |i| if i % 16 < 4 { 4.0 } else { 1.0 });
        let cap = simulate_ldr(&h, 93.0, &CameraCurve::default(), 0).unwrap();
        assert!((cap.scale - 0.25).abs() < 1e-15);
        let px = cap.ldr.pixels().data();
        // 1.0 * 0.25 -> sqrt -> 0.5
        assert!((px[5] - 0.5).abs() < 1e-15);
        assert_eq!(px[0], 1.0);
    }

    #[test]
    fn simulate_clips_and_quantizes() {
        let h = hdr(3, 2, 2, |i| [1.0, 0.25, 100.0, 0.25][i % 4]);
        let cap = simulate_ldr(&h, 50.0, &CameraCurve::default(), 8).unwrap();
        let px = cap.ldr.pixels().data();
        assert_eq!(px[2], 1.0);
        // 50th percentile luminance is 0.25 -> 1.0 maps to 4 -> clip
        assert_eq!(px[0], 1.0);
        assert_eq!(quantize(0.5f64, 8), 128.0 / 255.0);
        assert!((quantize(0.5f64, 8) - 0.501961).abs() < 1e-6);
    }

    #[test]
    fn simulate_rejects_black_image() {
        let h = hdr(3, 2, 2, |_| 0.0);
        assert!(matches!(
            simulate_ldr(&h, 93.0, &CameraCurve::default(), 8),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn compose_cases() {
        let t = LdrImage::new(Tensor::<f64>::full([3, 2, 2], 0.5)).unwrap();
        let ones = SoftMask::new(Tensor::<f64>::ones([3, 2, 2])).unwrap();
        let y = Tensor::<f64>::full([3, 2, 2], 5.0);
        let out = compose_hdr(&t, &ones, &y, 2.0).unwrap();
        assert!(out.pixels().data().iter().all(|&v| v == 0.25));

        let zeros = SoftMask::new(Tensor::<f64>::zeros([3, 2, 2])).unwrap();
        let out = compose_hdr(&t, &zeros, &Tensor::zeros([3, 2, 2]), 2.0).unwrap();
        assert!(out.pixels().data().iter().all(|&v| v == 0.0));

        let t1 = LdrImage::new(Tensor::<f64>::ones([3, 1, 1])).unwrap();
        let half = SoftMask::new(Tensor::<f64>::full([3, 1, 1], 0.5)).unwrap();
        let y = Tensor::<f64>::full([3, 1, 1], 3f64.ln());
        let out = compose_hdr(&t1, &half, &y, 2.0).unwrap();
        assert!(out.pixels().data().iter().all(|&v| (v - 1.5).abs() < 1e-12));
    }

    #[test]
    fn compose_reports_overflow_coordinate() {
        let t = LdrImage::new(Tensor::<f32>::zeros([3, 2, 2])).unwrap();
        let m = SoftMask::new(Tensor::<f32>::zeros([3, 2, 2])).unwrap();
        let mut y = Tensor::<f32>::zeros([3, 2, 2]);
        y.data_mut()[7] = 200.0;
        match compose_hdr(&t, &m, &y, 2.0) {
            Err(Error::Numeric(msg)) => {
                assert!(msg.contains("channel 1, row 1, column 1"), "{msg}")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mu_law_endpoints_and_domain() {
        let t = Tensor::<f64>::new([3], vec![0.0, 1.0, 0.002]).unwrap();
        let c = mu_law_compress(&t, 500.0).unwrap();
        assert_eq!(c.data()[0], 0.0);
        assert!((c.data()[1] - 1.0).abs() < 1e-15);
        assert!((c.data()[2] - 2f64.ln() / 501f64.ln()).abs() < 1e-15);
        assert!(mu_law_compress(&Tensor::<f64>::scalar(-0.1), 500.0).is_err());
    }

    #[test]
    fn mse_gamma_cases() {
        let truth = hdr(3, 4, 4, |i| 0.1 + i as f64 * 0.01);
        assert_eq!(mse_gamma(&truth, &truth).unwrap(), 0.0);
        let one = hdr(3, 2, 2, |_| 1.0);
        let zero = hdr(3, 2, 2, |_| 0.0);
        assert!((mse_gamma(&zero, &one).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            mse_gamma(&one, &zero),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn saturation_percentage_cases() {
        let black = LdrImage::new(Tensor::<f32>::zeros([3, 10, 10])).unwrap();
        assert_eq!(saturation_percentage(&black, 0.96), 0.0);
        let white = LdrImage::new(Tensor::<f32>::ones([3, 10, 10])).unwrap();
        assert_eq!(saturation_percentage(&white, 0.96), 100.0);
        let mut px = Tensor::<f32>::zeros([3, 10, 10]);
        px.data_mut()[100 + 37] = 1.0;
        let one = LdrImage::new(px).unwrap();
        assert_eq!(saturation_percentage(&one, 0.96), 1.0);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 5.0);
        assert_eq!(percentile(&v, 93.0), 10.0);
        assert_eq!(percentile(&v, 10.0), 1.0);
    }
}
