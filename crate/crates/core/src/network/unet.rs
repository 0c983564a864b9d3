use serde::{Deserialize, Serialize};

use super::mask::masked_conv_with;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Activation, Graph, Scalar, Tensor, Var};

/// Shape of the U-Net.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub leaky_slope: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            levels: 4,
            base_channels: 16,
            kernel_size: 3,
            in_channels: 3,
            out_channels: 3,
            leaky_slope: Activation::DEFAULT_LEAKY_SLOPE,
        }
    }
}

/// Which layers see the validity mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskingMode {
    /// Every layer masks its input and propagates the mask.
    #[default]
    FMask,
    /// Only the input image is masked.
    IMask,
    /// Standard convolutions; all masks are one.
    SConv,
}

impl MaskingMode {
    pub const ALL: [MaskingMode; 3] = [MaskingMode::FMask, MaskingMode::IMask, MaskingMode::SConv];

    pub fn name(self) -> &'static str {
        match self {
            MaskingMode::FMask => "fmask",
            MaskingMode::IMask => "imask",
            MaskingMode::SConv => "sconv",
        }
    }
}

impl std::str::FromStr for MaskingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fmask" => Ok(MaskingMode::FMask),
            "imask" => Ok(MaskingMode::IMask),
            "sconv" => Ok(MaskingMode::SConv),
            _ => Err(Error::Contract(format!("unknown masking mode {s:?}"))),
        }
    }
}

/// Static description of one convolution in the network.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn weight_shape(&self, k: usize) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, k, k]
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0
            || self.base_channels == 0
            || self.in_channels == 0
            || self.out_channels == 0
        {
            return Err(Error::Contract(
                "levels and channel counts must be positive".into(),
            ));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Contract(format!(
                "kernel size {} must be odd",
                self.kernel_size
            )));
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Layers in topology order: `enc0..enc{L-1}`, `dec{L-2}..dec0`, `out`.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let leaky = Activation::LeakyRelu(self.leaky_slope);
        let mut v = Vec::new();
        for l in 0..self.levels {
            v.push(LayerSpec {
                name: format!("enc{l}"),
                in_channels: if l == 0 {
                    self.in_channels
                } else {
                    self.channels_at(l - 1)
                },
                out_channels: self.channels_at(l),
                stride: if l == 0 { 1 } else { 2 },
                activation: leaky,
            });
        }
        for l in (0..self.levels.saturating_sub(1)).rev() {
            v.push(LayerSpec {
                name: format!("dec{l}"),
                in_channels: self.channels_at(l + 1) + self.channels_at(l),
                out_channels: self.channels_at(l),
                stride: 1,
                activation: Activation::Relu,
            });
        }
        v.push(LayerSpec {
            name: "out".into(),
            in_channels: self.base_channels,
            out_channels: self.out_channels,
            stride: 1,
            activation: Activation::Identity,
        });
        v
    }

    pub fn spatial_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// Weights and bias of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T: Scalar = f32> {
    pub name: String,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Ordered convolution parameters of a U-Net.
#[derive(Clone, Debug, PartialEq)]
pub struct UNetParameters<T: Scalar = f32> {
    pub layers: Vec<ConvLayer<T>>,
}

impl<T: Scalar> UNetParameters<T> {
    /// Checks names and shapes against `config`; lists every mismatch.
    pub fn validate(&self, config: &UNetConfig) -> Result<()> {
        let specs = config.layers();
        let mut bad = Vec::new();
        for (i, spec) in specs.iter().enumerate() {
            match self.layers.get(i) {
                Some(l)
                    if l.name == spec.name
                        && l.weight.shape() == spec.weight_shape(config.kernel_size)
                        && l.bias.shape() == [spec.out_channels] => {}
                Some(l) => bad.push(format!(
                    "{} (expected {:?}, found {} {:?})",
                    spec.name,
                    spec.weight_shape(config.kernel_size),
                    l.name,
                    l.weight.shape()
                )),
                None => bad.push(format!("{} (missing)", spec.name)),
            }
        }
        for l in self.layers.iter().skip(specs.len()) {
            bad.push(format!("{} (unexpected)", l.name));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(bad))
        }
    }

    pub fn cast<U: Scalar>(&self) -> UNetParameters<U> {
        UNetParameters {
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    name: l.name.clone(),
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }

    /// Flat list `[w0, b0, w1, b1, ...]`.
    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Adds every tensor to `g`, as trainable leaves or as constants.
    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .map(|l| {
                if trainable {
                    (g.param(l.weight.clone()), g.param(l.bias.clone()))
                } else {
                    (g.constant(l.weight.clone()), g.constant(l.bias.clone()))
                }
            })
            .collect()
    }
}

/// Mask entering or leaving a layer, kept for inspection.
#[derive(Clone, Debug)]
pub struct NamedMask<T: Scalar = f32> {
    pub name: String,
    pub mask: Tensor<T>,
}

/// Result of [`unet_forward`].
pub struct UNetOutput<T: Scalar = f32> {
    /// Log-domain prediction, `[n, out_channels, h, w]`.
    pub output: Var,
    /// Input mask followed by each layer's output mask, in topology order.
    /// Empty unless requested.
    pub masks: Vec<NamedMask<T>>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub mode: MaskingMode,
    pub keep_masks: bool,
}

fn materialize<T: Scalar>(m: &Option<Tensor<T>>, like: &[usize]) -> Tensor<T> {
    m.clone().unwrap_or_else(|| Tensor::ones(like.to_vec()))
}

/// Masked U-Net forward pass.
///
/// `input` and `mask` are `[n, c, h, w]` with `h` and `w` divisible by
/// `2^(levels-1)`. Encoder layers use leaky ReLU with stride-2 downsampling;
/// the decoder upsamples features and masks by nearest neighbour and
/// concatenates the matching encoder features and masks.
pub fn unet_forward<T: Scalar>(
    g: &mut Graph<T>,
    input: Var,
    mask: &Tensor<T>,
    params: &[(Var, Var)],
    config: &UNetConfig,
    opts: ForwardOptions,
) -> Result<UNetOutput<T>> {
    forward_impl(g, input, mask, params, None, config, opts)
}

/// [`unet_forward`] with every propagated mask computed from the fixed
/// kernels in `mask_params` rather than the current weights. With
/// `mask_params` equal to the weights the outputs are identical; perturbing
/// the weights then leaves the mask pathway untouched.
pub fn unet_forward_fixed_masks<T: Scalar>(
    g: &mut Graph<T>,
    input: Var,
    mask: &Tensor<T>,
    params: &[(Var, Var)],
    mask_params: &UNetParameters<T>,
    config: &UNetConfig,
    opts: ForwardOptions,
) -> Result<UNetOutput<T>> {
    mask_params.validate(config)?;
    let kernels: Vec<&Tensor<T>> = mask_params.layers.iter().map(|l| &l.weight).collect();
    forward_impl(g, input, mask, params, Some(&kernels), config, opts)
}

fn forward_impl<T: Scalar>(
    g: &mut Graph<T>,
    input: Var,
    mask: &Tensor<T>,
    params: &[(Var, Var)],
    mask_kernels: Option<&[&Tensor<T>]>,
    config: &UNetConfig,
    opts: ForwardOptions,
) -> Result<UNetOutput<T>> {
    config.validate()?;
    let specs = config.layers();
    if params.len() != specs.len() {
        return Err(Error::ShapeMismatch(vec![format!(
            "expected {} layers, got {}",
            specs.len(),
            params.len()
        )]));
    }
    let (_, c, h, w) = g.value(input).dims4()?;
    if c != config.in_channels {
        return Err(Error::dim(format!(
            "network expects {} input channels, got {c}",
            config.in_channels
        )));
    }
    g.value(input).expect_same_shape(mask)?;
    let multiple = config.spatial_multiple();
    if h % multiple != 0 || w % multiple != 0 {
        return Err(Error::dim(format!(
            "spatial extent {h}x{w} is not divisible by {multiple}"
        )));
    }
    let pad = config.kernel_size / 2;
    let propagate = opts.mode == MaskingMode::FMask;
    let mut masks = Vec::new();
    let mut record = |name: &str, m: &Option<Tensor<T>>, shape: &[usize]| {
        if opts.keep_masks {
            masks.push(NamedMask {
                name: name.to_string(),
                mask: materialize(m, shape),
            });
        }
    };

    let input_mask = match opts.mode {
        MaskingMode::SConv => None,
        _ => Some(mask.clone()),
    };
    record("input", &input_mask, mask.shape());

    let mut skips: Vec<(Var, Option<Tensor<T>>)> = Vec::with_capacity(config.levels);
    let mut cur = input;
    let mut cur_mask = input_mask;
    for (l, spec) in specs.iter().take(config.levels).enumerate() {
        let (wv, bv) = params[l];
        let (y, m) = masked_conv_with(
            g,
            cur,
            cur_mask.as_ref(),
            wv,
            bv,
            spec.stride,
            pad,
            spec.activation,
            propagate,
            mask_kernels.map(|k| k[l]),
        )?;
        let shape = g.value(y).shape().to_vec();
        record(&spec.name, &m, &shape);
        skips.push((y, m.clone()));
        cur = y;
        cur_mask = m;
    }

    let (mut d, mut d_mask) = skips.pop().expect("levels >= 1");
    for (i, spec) in specs
        .iter()
        .enumerate()
        .skip(config.levels)
        .take(config.levels - 1)
    {
        let (skip, skip_mask) = skips.pop().expect("one skip per decoder level");
        let up = g.upsample_nearest(d, 2)?;
        let cat = g.concat_channels(&[up, skip])?;
        let cat_mask = match (&d_mask, &skip_mask) {
            (Some(dm), Some(sm)) => {
                let um = kernels::upsample_nearest(dm, 2)?;
                Some(kernels::concat_channels(&[&um, sm])?)
            }
            _ => None,
        };
        let (wv, bv) = params[i];
        let (y, m) = masked_conv_with(
            g,
            cat,
            cat_mask.as_ref(),
            wv,
            bv,
            1,
            pad,
            spec.activation,
            propagate,
            mask_kernels.map(|k| k[i]),
        )?;
        let shape = g.value(y).shape().to_vec();
        record(&spec.name, &m, &shape);
        d = y;
        d_mask = m;
    }

    let last = specs.len() - 1;
    let (wv, bv) = params[last];
    let (y, m) = masked_conv_with(
        g,
        d,
        d_mask.as_ref(),
        wv,
        bv,
        1,
        pad,
        specs[last].activation,
        propagate,
        mask_kernels.map(|k| k[last]),
    )?;
    let shape = g.value(y).shape().to_vec();
    record(&specs[last].name, &m, &shape);
    Ok(UNetOutput { output: y, masks })
}

/// Convenience forward pass without gradient tracking.
pub fn predict<T: Scalar>(
    input: &Tensor<T>,
    mask: &Tensor<T>,
    params: &UNetParameters<T>,
    config: &UNetConfig,
    opts: ForwardOptions,
) -> Result<(Tensor<T>, Vec<NamedMask<T>>)> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let vars = params.register(&mut g, false);
    let out = unet_forward(&mut g, x, mask, &vars, config, opts)?;
    Ok((g.value(out.output).clone(), out.masks))
}
