//! Soft exposure masks, mask-propagating convolutions and the masked U-Net.

mod export;
mod mask;
mod unet;

pub use export::{export_mask_images, mask_to_gray8, GrayImage};
pub use mask::{
    exposure_mask, exposure_mask_with, mask_features, masked_conv, masked_conv_layer,
    normalized_kernel_magnitudes, propagate_mask, well_exposedness, MaskRamp, MaskedFeature,
    SoftMask, DEFAULT_ALPHA, MASK_EPSILON,
};
pub use unet::{
    predict, unet_forward, unet_forward_fixed_masks, ConvLayer, ForwardOptions, LayerSpec,
    MaskingMode, NamedMask, UNetConfig, UNetOutput, UNetParameters,
};
