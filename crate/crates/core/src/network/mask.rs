use crate::error::{Error, Result};
use crate::pipeline::LdrImage;
use crate::tensor::{kernels, Activation, ConvSpec, Graph, Scalar, Tensor, Var};

/// Guard added to each kernel's l1 norm during mask propagation.
pub const MASK_EPSILON: f64 = 1e-6;

/// Default well-exposedness threshold.
pub const DEFAULT_ALPHA: f64 = 0.96;

/// Per-element validity weights in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask<T: Scalar = f32> {
    values: Tensor<T>,
}

impl<T: Scalar> SoftMask<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if let Some(v) = values
            .data()
            .iter()
            .find(|&&v| !(v >= T::ZERO && v <= T::ONE))
        {
            return Err(Error::Domain(format!("mask value {v} outside [0, 1]")));
        }
        Ok(SoftMask { values })
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        SoftMask {
            values: Tensor::ones(shape),
        }
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<T> {
        self.values
    }

    /// `1 − M`.
    pub fn complement(&self) -> Tensor<T> {
        self.values.map(|v| T::ONE - v)
    }

    pub fn to_batch(&self) -> Tensor<T> {
        let mut shape = vec![1];
        shape.extend_from_slice(self.values.shape());
        Tensor::new(shape, self.values.data().to_vec()).expect("same length")
    }

    pub fn is_binary(&self) -> bool {
        self.values
            .data()
            .iter()
            .all(|&v| v == T::ZERO || v == T::ONE)
    }
}

/// Shape of the transition of the well-exposedness function above `alpha`.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRamp {
    #[default]
    Linear,
    Smoothstep,
}

/// Well-exposedness of a single LDR value.
pub fn well_exposedness(t: f64, alpha: f64, ramp: MaskRamp) -> f64 {
    if t <= alpha {
        return 1.0;
    }
    let r = ((1.0 - t) / (1.0 - alpha)).clamp(0.0, 1.0);
    match ramp {
        MaskRamp::Linear => r,
        MaskRamp::Smoothstep => r * r * (3.0 - 2.0 * r),
    }
}

/// Per-channel soft mask: 1 at or below `alpha`, falling to 0 at full saturation.
pub fn exposure_mask<T: Scalar>(image: &LdrImage<T>, alpha: f64) -> Result<SoftMask<T>> {
    exposure_mask_with(image, alpha, MaskRamp::Linear)
}

pub fn exposure_mask_with<T: Scalar>(
    image: &LdrImage<T>,
    alpha: f64,
    ramp: MaskRamp,
) -> Result<SoftMask<T>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha {alpha} outside (0, 1)")));
    }
    let values = image
        .pixels()
        .map(|t| T::from_f64(well_exposedness(t.to_f64(), alpha, ramp)));
    SoftMask::new(values)
}

/// Features paired with an aligned validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedFeature<T: Scalar = f32> {
    pub features: Tensor<T>,
    pub mask: SoftMask<T>,
}

/// `Z = X ⊙ M`.
pub fn mask_features<T: Scalar>(x: &Tensor<T>, m: &SoftMask<T>) -> Result<MaskedFeature<T>> {
    let z = x.zip_map(m.values(), |a, b| a * b)?;
    Ok(MaskedFeature {
        features: z,
        mask: m.clone(),
    })
}

/// Kernel magnitudes normalized per output channel: `|W_o| / (‖W_o‖₁ + ε)`.
pub fn normalized_kernel_magnitudes<T: Scalar>(weights: &Tensor<T>) -> Result<Tensor<T>> {
    let (cout, cin, kh, kw) = weights.dims4()?;
    let per = cin * kh * kw;
    let eps = T::from_f64(MASK_EPSILON);
    let mut out = Vec::with_capacity(cout * per);
    for row in weights.data().chunks(per) {
        let mut l1 = T::ZERO;
        for &v in row {
            l1 += v.abs();
        }
        let denom = l1 + eps;
        out.extend(row.iter().map(|&v| v.abs() / denom));
    }
    Tensor::new(weights.shape().to_vec(), out)
}

/// Next-layer mask from normalized kernel magnitudes; borders count as valid.
pub fn propagate_mask<T: Scalar>(
    m: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let k = normalized_kernel_magnitudes(weights)?;
    let spec = ConvSpec::new(stride, padding).with_pad_value(1.0);
    let out = kernels::conv2d(m, &k, None, &spec)?;
    Ok(out.map(|v| v.max(T::ZERO).min(T::ONE)))
}

/// One masked convolution inside a graph.
///
/// `mask == None` stands for an all-ones mask and skips the product. The
/// returned mask is computed outside the graph and is never differentiated.
#[allow(clippy::too_many_arguments)]
pub fn masked_conv<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    mask: Option<&Tensor<T>>,
    w: Var,
    b: Var,
    stride: usize,
    padding: usize,
    activation: Activation,
    propagate: bool,
) -> Result<(Var, Option<Tensor<T>>)> {
    masked_conv_with(
        g, x, mask, w, b, stride, padding, activation, propagate, None,
    )
}

/// [`masked_conv`] propagating the mask through `mask_weight` instead of the
/// current value of `w` when given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn masked_conv_with<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    mask: Option<&Tensor<T>>,
    w: Var,
    b: Var,
    stride: usize,
    padding: usize,
    activation: Activation,
    propagate: bool,
    mask_weight: Option<&Tensor<T>>,
) -> Result<(Var, Option<Tensor<T>>)> {
    let z = match mask {
        Some(m) => g.mul_const(x, m)?,
        None => x,
    };
    let pre = g.conv2d(z, w, Some(b), ConvSpec::new(stride, padding))?;
    let out = g.activation(pre, activation)?;
    let kernel = mask_weight.unwrap_or_else(|| g.value(w));
    let next = match (propagate, mask) {
        (true, Some(m)) => Some(propagate_mask(m, kernel, stride, padding)?),
        (true, None) => {
            let shape = g.value(x).shape().to_vec();
            Some(propagate_mask(
                &Tensor::ones(shape),
                kernel,
                stride,
                padding,
            )?)
        }
        (false, _) => None,
    };
    Ok((out, next))
}

/// Stand-alone masked convolution layer on plain tensors:
/// features `φ(W * (X ⊙ M) + b)` and the propagated mask.
pub fn masked_conv_layer<T: Scalar>(
    input: &MaskedFeature<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    activation: Activation,
) -> Result<MaskedFeature<T>> {
    input.features.expect_same_shape(input.mask.values())?;
    let mut g = Graph::new();
    let x = g.constant(input.features.clone());
    let w = g.constant(weights.clone());
    let b = g.constant(bias.clone());
    let (y, m) = masked_conv(
        &mut g,
        x,
        Some(input.mask.values()),
        w,
        b,
        stride,
        padding,
        activation,
        true,
    )?;
    Ok(MaskedFeature {
        features: g.value(y).clone(),
        mask: SoftMask::new(m.expect("propagated"))?,
    })
}
