//! Training objectives for HDR reconstruction and inpainting pre-training.
//!
//! Every ℓ1 norm is realized as a mean so the weights do not depend on
//! resolution. Graph-building functions take batched NCHW tensors; the
//! value-only helpers accept CHW as well.

mod extractor;

pub use extractor::{FeatureExtractor, DEFAULT_EXTRACTOR_SEED};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Weights of the HDR objective and the μ-law compression constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub mu: f64,
    pub blend_domain: BlendDomain,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 6.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 120.0,
            mu: 500.0,
            blend_domain: BlendDomain::Linear,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("{name} = {v} must be non-negative")));
            }
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::Domain(format!("mu = {} must be positive", self.mu)));
        }
        Ok(())
    }
}

/// Domain in which the prediction enters the ground-truth blend.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendDomain {
    /// `(1 − M) ⊙ (exp(Ŷ) − 1)`.
    #[default]
    Linear,
    /// `(1 − M) ⊙ Ŷ`, the log-domain prediction used as is.
    Literal,
}

/// Weights of the inpainting objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InpaintingWeights {
    pub valid: f64,
    pub hole: f64,
    pub perceptual: f64,
    pub style: f64,
    pub tv: f64,
}

impl Default for InpaintingWeights {
    fn default() -> Self {
        InpaintingWeights {
            valid: 1.0,
            hole: 6.0,
            perceptual: 0.05,
            style: 120.0,
            tv: 0.1,
        }
    }
}

/// One unweighted loss component and the factor it enters the total with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub name: String,
    pub value: f64,
    pub weight: f64,
}

impl LossTerm {
    pub fn contribution(&self) -> f64 {
        self.weight * self.value
    }
}

/// Scalar breakdown of a loss evaluation.
///
/// Terms whose weight is zero are not evaluated and report 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub terms: Vec<LossTerm>,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    pub fn reconstruction(&self) -> f64 {
        self.get("reconstruction").unwrap_or(0.0)
    }

    pub fn vgg(&self) -> f64 {
        self.get("vgg").unwrap_or(0.0)
    }

    pub fn style(&self) -> f64 {
        self.get("style").unwrap_or(0.0)
    }

    /// Sum of weighted contributions.
    pub fn recomposed(&self) -> f64 {
        self.terms.iter().map(LossTerm::contribution).sum()
    }

    /// `|total − recomposed| / max(|total|, 1e-30)`.
    pub fn recomposition_error(&self) -> f64 {
        (self.total - self.recomposed()).abs() / self.total.abs().max(1e-30)
    }
}

fn as_batch<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    match t.rank() {
        4 => Ok(t.clone()),
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            Tensor::new(shape, t.data().to_vec())
        }
        r => Err(Error::dim(format!(
            "expected a CHW or NCHW tensor, got rank {r}"
        ))),
    }
}

fn check_mask<T: Scalar>(m: &Tensor<T>) -> Result<()> {
    if let Some(v) = m.data().iter().find(|&&v| !(v >= T::ZERO && v <= T::ONE)) {
        return Err(Error::Domain(format!("mask value {v} outside [0, 1]")));
    }
    Ok(())
}

/// `mean(|(1 − M) ⊙ (Ŷ − log(H + 1))|)` as a graph node.
pub fn reconstruction_term<T: Scalar>(
    g: &mut Graph<T>,
    y_hat: Var,
    h: &Tensor<T>,
    m: &Tensor<T>,
) -> Result<Var> {
    g.value(y_hat).expect_same_shape(h)?;
    h.expect_same_shape(m)?;
    check_mask(m)?;
    let target = g.constant(h.map(|v| (v + T::ONE).ln()));
    let d = g.sub(y_hat, target)?;
    let d = g.mul_const(d, &m.map(|v| T::ONE - v))?;
    let d = g.abs(d)?;
    g.mean(d)
}

/// Value of [`reconstruction_term`] for tensors of matching shape.
pub fn reconstruction_loss<T: Scalar>(
    y_hat: &Tensor<T>,
    h: &Tensor<T>,
    m: &Tensor<T>,
) -> Result<f64> {
    let mut g = Graph::new();
    let y = g.constant(y_hat.clone());
    let l = reconstruction_term(&mut g, y, h, m)?;
    Ok(g.scalar(l)?.to_f64())
}

/// `H̃ = M ⊙ H + (1 − M) ⊙ P` with `P = exp(Ŷ) − 1` (or `Ŷ` in the literal
/// domain), clamped at 0 so it can be compressed.
pub fn blend_term<T: Scalar>(
    g: &mut Graph<T>,
    y_hat: Var,
    h: &Tensor<T>,
    m: &Tensor<T>,
    domain: BlendDomain,
) -> Result<Var> {
    g.value(y_hat).expect_same_shape(h)?;
    h.expect_same_shape(m)?;
    check_mask(m)?;
    let p = match domain {
        BlendDomain::Linear => {
            let e = g.exp(y_hat)?;
            g.add_scalar(e, -1.0)?
        }
        BlendDomain::Literal => y_hat,
    };
    let p = g.mul_const(p, &m.map(|v| T::ONE - v))?;
    let known = g.constant(h.zip_map(m, |hv, mv| hv * mv)?);
    let blend = g.add(known, p)?;
    g.relu(blend)
}

/// Value of [`blend_term`].
pub fn blend_with_ground_truth<T: Scalar>(
    h: &Tensor<T>,
    y_hat: &Tensor<T>,
    m: &Tensor<T>,
    domain: BlendDomain,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let y = g.constant(y_hat.clone());
    let b = blend_term(&mut g, y, h, m, domain)?;
    Ok(g.value(b).clone())
}

/// `φᵀφ / K` for a `(H·W) × C` feature matrix, with `K = C·H·W`.
pub fn gram_matrix<T: Scalar>(features: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, c) = match features.shape() {
        &[r, c] => (r, c),
        s => return Err(Error::dim(format!("gram input must be 2-D, got {s:?}"))),
    };
    let k = (rows * c).max(1);
    let mut out = Tensor::zeros([c, c]);
    // SAFETY: φᵀ is φ read with swapped strides; all extents match the buffers.
    unsafe {
        T::gemm(
            c,
            rows,
            c,
            T::from_f64(1.0 / k as f64),
            features.data().as_ptr(),
            1,
            c as isize,
            features.data().as_ptr(),
            c as isize,
            1,
            T::ZERO,
            out.data_mut().as_mut_ptr(),
            c as isize,
            1,
        );
    }
    Ok(out)
}

fn mu_law_node<T: Scalar>(g: &mut Graph<T>, x: Var, norm: f64, mu: f64) -> Result<Var> {
    let y = g.scale(x, mu / norm)?;
    let y = g.add_scalar(y, 1.0)?;
    let y = g.ln(y)?;
    g.scale(y, 1.0 / (1.0 + mu).ln())
}

/// `Σ_l mean|φ_l(a) − φ_l(b)|` and `Σ_l mean|G_l(a) − G_l(b)|` where `b` is a
/// fixed target. Either term is skipped (returned as `None`) when not wanted.
fn feature_distances<T: Scalar>(
    g: &mut Graph<T>,
    a: Var,
    target_taps: &[Var],
    extractor: &FeatureExtractor<T>,
    want_content: bool,
    want_style: bool,
) -> Result<(Option<Var>, Option<Var>)> {
    let taps = extractor.features(g, a)?;
    let mut content: Option<Var> = None;
    let mut style: Option<Var> = None;
    for (&fa, &fb) in taps.iter().zip(target_taps) {
        if want_content {
            let d = g.l1_mean(fa, fb)?;
            content = Some(match content {
                Some(acc) => g.add(acc, d)?,
                None => d,
            });
        }
        if want_style {
            let ga = g.gram(fa)?;
            let gb = g.gram(fb)?;
            let d = g.l1_mean(ga, gb)?;
            style = Some(match style {
                Some(acc) => g.add(acc, d)?,
                None => d,
            });
        }
    }
    Ok((content, style))
}

/// Perceptual and style distances between a blended estimate in the graph
/// and the ground truth, both divided by a shared normalizer and μ-law
/// compressed before feature extraction.
///
/// The normalizer is the larger of the two maxima and is not differentiated;
/// this keeps the compressed inputs in `[0, 1]` and the measure symmetric.
pub fn perceptual_terms<T: Scalar>(
    g: &mut Graph<T>,
    h_tilde: Var,
    h: &Tensor<T>,
    extractor: &FeatureExtractor<T>,
    mu: f64,
) -> Result<(Var, Var)> {
    g.value(h_tilde).expect_same_shape(h)?;
    let norm = g
        .value(h_tilde)
        .max_value()
        .to_f64()
        .max(h.max_value().to_f64());
    let norm = if norm > 0.0 { norm } else { 1.0 };
    let a = mu_law_node(g, h_tilde, norm, mu)?;
    if let Some(v) = h.data().iter().find(|&&v| v < T::ZERO) {
        return Err(Error::Domain(format!("μ-law input {v} is negative")));
    }
    let hv = g.constant(h.clone());
    let b = mu_law_node(g, hv, norm, mu)?;
    let target = extractor.features(g, b)?;
    let (v, s) = feature_distances(g, a, &target, extractor, true, true)?;
    Ok((v.expect("content requested"), s.expect("style requested")))
}

/// Values of [`perceptual_terms`] for two HDR tensors (CHW or NCHW).
pub fn perceptual_loss<T: Scalar>(
    h_tilde: &Tensor<T>,
    h: &Tensor<T>,
    extractor: &FeatureExtractor<T>,
    weights: &LossWeights,
) -> Result<(f64, f64)> {
    weights.validate()?;
    let (a, b) = (as_batch(h_tilde)?, as_batch(h)?);
    if let Some(v) = a.data().iter().find(|&&v| v < T::ZERO) {
        return Err(Error::Domain(format!("μ-law input {v} is negative")));
    }
    let mut g = Graph::new();
    let av = g.constant(a);
    let (v, s) = perceptual_terms(&mut g, av, &b, extractor, weights.mu)?;
    Ok((g.scalar(v)?.to_f64(), g.scalar(s)?.to_f64()))
}

/// `λ1·L_r + λ2·(λ3·L_v + λ4·L_s)` for a log-domain prediction `y_hat` in
/// the graph, ground truth `h` and exposure mask `m` (all NCHW).
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    y_hat: Var,
    h: &Tensor<T>,
    m: &Tensor<T>,
    extractor: &FeatureExtractor<T>,
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    weights.validate()?;
    let rec = reconstruction_term(g, y_hat, h, m)?;
    let r_val = g.scalar(rec)?.to_f64();
    let mut total = g.scale(rec, weights.lambda1)?;
    let (mut v_val, mut s_val) = (0.0, 0.0);
    if weights.lambda2 > 0.0 && (weights.lambda3 > 0.0 || weights.lambda4 > 0.0) {
        let blend = blend_term(g, y_hat, h, m, weights.blend_domain)?;
        let (v, s) = perceptual_terms(g, blend, h, extractor, weights.mu)?;
        v_val = g.scalar(v)?.to_f64();
        s_val = g.scalar(s)?.to_f64();
        let v = g.scale(v, weights.lambda3)?;
        let s = g.scale(s, weights.lambda4)?;
        let p = g.add(v, s)?;
        let p = g.scale(p, weights.lambda2)?;
        total = g.add(total, p)?;
    }
    let report = LossReport {
        total: g.scalar(total)?.to_f64(),
        terms: vec![
            LossTerm {
                name: "reconstruction".into(),
                value: r_val,
                weight: weights.lambda1,
            },
            LossTerm {
                name: "vgg".into(),
                value: v_val,
                weight: weights.lambda2 * weights.lambda3,
            },
            LossTerm {
                name: "style".into(),
                value: s_val,
                weight: weights.lambda2 * weights.lambda4,
            },
        ],
    };
    Ok((total, report))
}

/// Hole region grown by one pixel in every direction, per channel.
/// `valid` holds 1 for known pixels and 0 for holes.
pub fn dilated_hole_region<T: Scalar>(valid: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = valid.dims4()?;
    let src = valid.data();
    let mut out = Tensor::zeros([n, c, h, w]);
    let dst = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut hit = false;
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        if src[base + yy * w + xx] == T::ZERO {
                            hit = true;
                        }
                    }
                }
                if hit {
                    dst[base + y * w + x] = T::ONE;
                }
            }
        }
    }
    Ok(out)
}

fn crop_last<T: Scalar>(t: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = t.dims4()?;
    let (oh, ow) = if axis == 2 { (h - 1, w) } else { (h, w - 1) };
    let src = t.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for y in 0..oh {
            let row = plane * h * w + y * w;
            out.extend_from_slice(&src[row..row + ow]);
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Inpainting objective on LDR images in `[0, 1]` (NCHW). `hole_mask` is
/// binary with 1 for known pixels and 0 for holes.
///
/// Perceptual and style terms are summed over both the raw prediction and
/// the composite that keeps known pixels from the ground truth. The total
/// variation term is evaluated on the composite over the dilated hole region.
pub fn inpainting_loss<T: Scalar>(
    g: &mut Graph<T>,
    predicted: Var,
    truth: &Tensor<T>,
    hole_mask: &Tensor<T>,
    extractor: &FeatureExtractor<T>,
    weights: &InpaintingWeights,
) -> Result<(Var, LossReport)> {
    g.value(predicted).expect_same_shape(truth)?;
    truth.expect_same_shape(hole_mask)?;
    let (_, _, hh, ww) = truth.dims4()?;
    if let Some(v) = hole_mask
        .data()
        .iter()
        .find(|&&v| v != T::ZERO && v != T::ONE)
    {
        return Err(Error::Domain(format!("hole mask value {v} is not binary")));
    }
    let hole = hole_mask.map(|v| T::ONE - v);
    let truth_v = g.constant(truth.clone());
    let resid = g.sub(predicted, truth_v)?;

    let mut terms = Vec::new();
    let mut parts: Vec<Var> = Vec::new();
    let mut push = |g: &mut Graph<T>, name: &str, weight: f64, node: Option<Var>| -> Result<()> {
        let value = match node {
            Some(v) => {
                parts.push(g.scale(v, weight)?);
                g.scalar(v)?.to_f64()
            }
            None => 0.0,
        };
        terms.push(LossTerm {
            name: name.into(),
            value,
            weight,
        });
        Ok(())
    };

    let valid = if weights.valid > 0.0 {
        let d = g.mul_const(resid, hole_mask)?;
        let d = g.abs(d)?;
        Some(g.mean(d)?)
    } else {
        None
    };
    push(g, "valid", weights.valid, valid)?;

    let hole_term = if weights.hole > 0.0 {
        let d = g.mul_const(resid, &hole)?;
        let d = g.abs(d)?;
        Some(g.mean(d)?)
    } else {
        None
    };
    push(g, "hole", weights.hole, hole_term)?;

    let need_comp = weights.perceptual > 0.0 || weights.style > 0.0 || weights.tv > 0.0;
    let comp = if need_comp {
        let known = g.constant(truth.zip_map(hole_mask, |t, m| t * m)?);
        let fill = g.mul_const(predicted, &hole)?;
        Some(g.add(known, fill)?)
    } else {
        None
    };

    let (want_p, want_s) = (weights.perceptual > 0.0, weights.style > 0.0);
    let (mut perc, mut sty) = (None, None);
    if want_p || want_s {
        let target = extractor.features(g, truth_v)?;
        let comp = comp.expect("composite built");
        let (p1, s1) = feature_distances(g, predicted, &target, extractor, want_p, want_s)?;
        let (p2, s2) = feature_distances(g, comp, &target, extractor, want_p, want_s)?;
        if let (Some(a), Some(b)) = (p1, p2) {
            perc = Some(g.add(a, b)?);
        }
        if let (Some(a), Some(b)) = (s1, s2) {
            sty = Some(g.add(a, b)?);
        }
    }
    push(g, "perceptual", weights.perceptual, perc)?;
    push(g, "style", weights.style, sty)?;

    let tv = if weights.tv > 0.0 && hh > 1 && ww > 1 {
        let comp = comp.expect("composite built");
        let region = dilated_hole_region(hole_mask)?;
        let numel = truth.len() as f64;
        let mut acc: Option<Var> = None;
        for axis in [2usize, 3] {
            let d = g.spatial_diff(comp, axis)?;
            let d = g.mul_const(d, &crop_last(&region, axis)?)?;
            let d = g.abs(d)?;
            let s = g.sum(d)?;
            acc = Some(match acc {
                Some(a) => g.add(a, s)?,
                None => s,
            });
        }
        Some(g.scale(acc.expect("two axes"), 1.0 / numel)?)
    } else {
        None
    };
    push(g, "tv", weights.tv, tv)?;

    let total = match parts.split_first() {
        Some((&first, rest)) => {
            let mut acc = first;
            for &p in rest {
                acc = g.add(acc, p)?;
            }
            acc
        }
        None => {
            let z = g.scale(resid, 0.0)?;
            g.sum(z)?
        }
    };
    let report = LossReport {
        total: g.scalar(total)?.to_f64(),
        terms,
    };
    Ok((total, report))
}
