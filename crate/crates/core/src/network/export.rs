use super::unet::NamedMask;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// 8-bit single-channel raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Maps a mask value in `[0, 1]` to `round(255 v)`.
pub fn mask_to_gray8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn plane_to_gray<T: Scalar>(plane: &[T], h: usize, w: usize) -> GrayImage {
    GrayImage {
        width: w,
        height: h,
        pixels: plane.iter().map(|v| mask_to_gray8(v.to_f64())).collect(),
    }
}

/// One image per layer and channel of batch element 0, named
/// `<layer>_c<channel>`. With `channel_mean`, one image per layer holding
/// the mean over channels, named after the layer.
pub fn export_mask_images<T: Scalar>(
    masks: &[NamedMask<T>],
    channel_mean: bool,
) -> Result<Vec<(String, GrayImage)>> {
    let mut out = Vec::new();
    for nm in masks {
        let (c, h, w) = match nm.mask.shape() {
            &[_, c, h, w] => (c, h, w),
            &[c, h, w] => (c, h, w),
            s => return Err(Error::dim(format!("mask {} has shape {s:?}", nm.name))),
        };
        let first = &nm.mask.data()[..c * h * w];
        if channel_mean {
            let inv = T::from_f64(1.0 / c as f64);
            let mean = Tensor::from_fn([h, w], |i| {
                let mut acc = T::ZERO;
                for ci in 0..c {
                    acc += first[ci * h * w + i];
                }
                acc * inv
            });
            out.push((nm.name.clone(), plane_to_gray(mean.data(), h, w)));
        } else {
            for (ci, plane) in first.chunks(h * w).enumerate() {
                out.push((format!("{}_c{ci}", nm.name), plane_to_gray(plane, h, w)));
            }
        }
    }
    Ok(out)
}
