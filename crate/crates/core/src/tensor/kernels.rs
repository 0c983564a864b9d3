//! Forward and adjoint kernels for the image operations used by the graph.
//!
//! Convolution lowers each batch element to an im2col matrix and runs a
//! single GEMM. All loops run in a fixed order so results are bit-stable.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Stride, symmetric padding and the value used for padded taps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub pad_value: f64,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvSpec {
            stride,
            padding,
            pad_value: 0.0,
        }
    }

    pub fn with_pad_value(mut self, v: f64) -> Self {
        self.pad_value = v;
        self
    }

    pub fn output_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::dim("stride must be positive"));
        }
        let padded = input + 2 * self.padding;
        if padded < kernel {
            return Err(Error::dim(format!(
                "kernel extent {kernel} exceeds padded input extent {padded}"
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn ohw(&self) -> usize {
        self.oh * self.ow
    }
}

fn geometry<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec) -> Result<ConvGeom> {
    let (n, cin, h, wd) = x.dims4()?;
    let (cout, wcin, kh, kw) = w.dims4().map_err(|_| {
        Error::dim(format!(
            "weights must be [out, in, kH, kW], got {:?}",
            w.shape()
        ))
    })?;
    if wcin != cin {
        return Err(Error::dim(format!(
            "input has {cin} channels but weights expect {wcin}"
        )));
    }
    let oh = spec.output_extent(h, kh)?;
    let ow = spec.output_extent(wd, kw)?;
    Ok(ConvGeom {
        n,
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        oh,
        ow,
    })
}

fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, spec: &ConvSpec, col: &mut [T]) {
    let pad = T::from_f64(spec.pad_value);
    let ohw = g.ohw();
    let s = spec.stride as isize;
    let p = spec.padding as isize;
    for ci in 0..g.cin {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = oy as isize * s + ky as isize - p;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(pad);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        *o = if ix < 0 || ix >= g.w as isize {
                            pad
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, spec: &ConvSpec, img: &mut [T]) {
    let ohw = g.ohw();
    let s = spec.stride as isize;
    let p = spec.padding as isize;
    for ci in 0..g.cin {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of an NCHW input with `[out, in, kH, kW]` weights.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = geometry(x, w, spec)?;
    if let Some(b) = bias {
        if b.len() != g.cout {
            return Err(Error::dim(format!(
                "bias has {} entries for {} output channels",
                b.len(),
                g.cout
            )));
        }
    }
    let (k, ohw) = (g.k(), g.ohw());
    let mut out = vec![T::ZERO; g.n * g.cout * ohw];
    let mut col = vec![T::ZERO; k * ohw];
    let in_sz = g.cin * g.h * g.w;
    for ni in 0..g.n {
        im2col(&x.data()[ni * in_sz..(ni + 1) * in_sz], &g, spec, &mut col);
        let dst = &mut out[ni * g.cout * ohw..(ni + 1) * g.cout * ohw];
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_mut(ohw).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        let beta = if bias.is_some() { T::ONE } else { T::ZERO };
        // SAFETY: w is cout x k, col is k x ohw, dst is cout x ohw, all row-major.
        unsafe {
            T::gemm(
                g.cout,
                k,
                ohw,
                T::ONE,
                w.data().as_ptr(),
                k as isize,
                1,
                col.as_ptr(),
                ohw as isize,
                1,
                beta,
                dst.as_mut_ptr(),
                ohw as isize,
                1,
            );
        }
    }
    Tensor::new(vec![g.n, g.cout, g.oh, g.ow], out)
}

/// Adjoint of [`conv2d`]: returns `(d_input, d_weights, d_bias)`.
///
/// Gradients of a convolution: input (if requested), weights, bias.
pub type ConvGrads<T> = (Option<Tensor<T>>, Tensor<T>, Tensor<T>);

/// `d_input` is skipped when `need_input_grad` is false.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    spec: &ConvSpec,
    need_input_grad: bool,
    need_weight_grad: bool,
) -> Result<ConvGrads<T>> {
    let g = geometry(x, w, spec)?;
    if dout.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(Error::dim(format!(
            "output gradient shape {:?} does not match convolution output",
            dout.shape()
        )));
    }
    let (k, ohw) = (g.k(), g.ohw());
    let in_sz = g.cin * g.h * g.w;
    let mut col = vec![T::ZERO; k * ohw];
    let mut dcol = vec![T::ZERO; k * ohw];
    let mut dw = vec![T::ZERO; g.cout * k];
    let mut db = vec![T::ZERO; g.cout];
    let mut dx = if need_input_grad {
        Some(vec![T::ZERO; g.n * in_sz])
    } else {
        None
    };
    for ni in 0..g.n {
        let go = &dout.data()[ni * g.cout * ohw..(ni + 1) * g.cout * ohw];
        for (co, chunk) in go.chunks(ohw).enumerate() {
            let mut acc = T::ZERO;
            for &v in chunk {
                acc += v;
            }
            db[co] += acc;
        }
        if need_weight_grad {
            im2col(&x.data()[ni * in_sz..(ni + 1) * in_sz], &g, spec, &mut col);
            // dW (cout x k) += dOut (cout x ohw) * col^T (ohw x k)
            unsafe {
                T::gemm(
                    g.cout,
                    ohw,
                    k,
                    T::ONE,
                    go.as_ptr(),
                    ohw as isize,
                    1,
                    col.as_ptr(),
                    1,
                    ohw as isize,
                    T::ONE,
                    dw.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
        }
        if let Some(dx) = dx.as_mut() {
            // dcol (k x ohw) = W^T (k x cout) * dOut (cout x ohw)
            unsafe {
                T::gemm(
                    k,
                    g.cout,
                    ohw,
                    T::ONE,
                    w.data().as_ptr(),
                    1,
                    k as isize,
                    go.as_ptr(),
                    ohw as isize,
                    1,
                    T::ZERO,
                    dcol.as_mut_ptr(),
                    ohw as isize,
                    1,
                );
            }
            col2im(&dcol, &g, spec, &mut dx[ni * in_sz..(ni + 1) * in_sz]);
        }
    }
    let dx = match dx {
        Some(d) => Some(Tensor::new(x.shape().to_vec(), d)?),
        None => None,
    };
    Ok((
        dx,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(vec![g.cout], db)?,
    ))
}

pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::dim("upsample factor must be positive"));
    }
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for oy in 0..oh {
            let row = &plane[(oy / factor) * w..(oy / factor + 1) * w];
            for ox in 0..ow {
                out.push(row[ox / factor]);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn upsample_nearest_backward<T: Scalar>(dout: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = dout.dims4()?;
    let (h, w) = (oh / factor, ow / factor);
    let mut dx = vec![T::ZERO; n * c * h * w];
    for (plane, dplane) in dout.data().chunks(oh * ow).zip(dx.chunks_mut(h * w)) {
        for oy in 0..oh {
            for ox in 0..ow {
                dplane[(oy / factor) * w + ox / factor] += plane[oy * ow + ox];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], dx)
}

pub fn avg_pool<T: Scalar>(x: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::dim(format!(
            "spatial extent {h}x{w} is not divisible by pooling window {window}"
        )));
    }
    let (oh, ow) = (h / window, w / window);
    let inv = T::ONE / T::from_f64((window * window) as f64);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::ZERO;
                for dy in 0..window {
                    let row = (oy * window + dy) * w + ox * window;
                    for &v in &plane[row..row + window] {
                        acc += v;
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn avg_pool_backward<T: Scalar>(dout: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = dout.dims4()?;
    let (h, w) = (oh * window, ow * window);
    let inv = T::ONE / T::from_f64((window * window) as f64);
    let mut dx = vec![T::ZERO; n * c * h * w];
    for (plane, dplane) in dout.data().chunks(oh * ow).zip(dx.chunks_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                dplane[y * w + x] = plane[(y / window) * ow + x / window] * inv;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], dx)
}

/// Concatenates NCHW tensors along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concatenation of zero tensors"))?;
    let (n, _, h, w) = first.dims4()?;
    let mut total_c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::dim(format!(
                "cannot concatenate {:?} with {:?}",
                first.shape(),
                p.shape()
            )));
        }
        total_c += pc;
    }
    let mut out = Vec::with_capacity(n * total_c * h * w);
    for ni in 0..n {
        for p in parts {
            let sz = p.shape()[1] * h * w;
            out.extend_from_slice(&p.data()[ni * sz..(ni + 1) * sz]);
        }
    }
    Tensor::new(vec![n, total_c, h, w], out)
}

/// Splits a channel-concatenated gradient back into the pieces' shapes.
pub fn split_channels<T: Scalar>(d: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = d.dims4()?;
    if channels.iter().sum::<usize>() != c {
        return Err(Error::dim("channel split does not cover the tensor"));
    }
    let mut parts: Vec<Vec<T>> = channels
        .iter()
        .map(|&pc| Vec::with_capacity(n * pc * h * w))
        .collect();
    let mut offset = 0;
    for ni in 0..n {
        let _ = ni;
        for (pi, &pc) in channels.iter().enumerate() {
            let sz = pc * h * w;
            parts[pi].extend_from_slice(&d.data()[offset..offset + sz]);
            offset += sz;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(data, &pc)| Tensor::new(vec![n, pc, h, w], data))
        .collect()
}

/// Per-batch-element Gram matrices `F F^T / (C H W)`, shape `[n, c, c]`.
pub fn gram<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let inv_k = T::ONE / T::from_f64((c * hw) as f64);
    let mut out = vec![T::ZERO; n * c * c];
    for ni in 0..n {
        let f = &x.data()[ni * c * hw..(ni + 1) * c * hw];
        unsafe {
            T::gemm(
                c,
                hw,
                c,
                inv_k,
                f.as_ptr(),
                hw as isize,
                1,
                f.as_ptr(),
                1,
                hw as isize,
                T::ZERO,
                out[ni * c * c..].as_mut_ptr(),
                c as isize,
                1,
            );
        }
    }
    Tensor::new(vec![n, c, c], out)
}

pub fn gram_backward<T: Scalar>(x: &Tensor<T>, dg: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let inv_k = T::ONE / T::from_f64((c * hw) as f64);
    let mut dx = vec![T::ZERO; n * c * hw];
    let mut sym = vec![T::ZERO; c * c];
    for ni in 0..n {
        let d = &dg.data()[ni * c * c..(ni + 1) * c * c];
        for i in 0..c {
            for j in 0..c {
                sym[i * c + j] = d[i * c + j] + d[j * c + i];
            }
        }
        let f = &x.data()[ni * c * hw..(ni + 1) * c * hw];
        unsafe {
            T::gemm(
                c,
                c,
                hw,
                inv_k,
                sym.as_ptr(),
                c as isize,
                1,
                f.as_ptr(),
                hw as isize,
                1,
                T::ZERO,
                dx[ni * c * hw..].as_mut_ptr(),
                hw as isize,
                1,
            );
        }
    }
    Tensor::new(x.shape().to_vec(), dx)
}

/// Forward differences along width (`axis = 3`) or height (`axis = 2`).
pub fn spatial_diff<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = match axis {
        2 if h >= 2 => (h - 1, w),
        3 if w >= 2 => (h, w - 1),
        _ => {
            return Err(Error::dim(format!(
                "cannot difference axis {axis} of {:?}",
                x.shape()
            )))
        }
    };
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for y in 0..oh {
            for xx in 0..ow {
                let a = plane[y * w + xx];
                let b = if axis == 2 {
                    plane[(y + 1) * w + xx]
                } else {
                    plane[y * w + xx + 1]
                };
                out.push(b - a);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn spatial_diff_backward<T: Scalar>(
    input_shape: &[usize],
    dout: &Tensor<T>,
    axis: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = match input_shape {
        &[n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::dim("spatial_diff input must be NCHW")),
    };
    let (_, _, oh, ow) = dout.dims4()?;
    let mut dx = vec![T::ZERO; n * c * h * w];
    for (plane, dplane) in dout.data().chunks(oh * ow).zip(dx.chunks_mut(h * w)) {
        for y in 0..oh {
            for xx in 0..ow {
                let g = plane[y * ow + xx];
                dplane[y * w + xx] -= g;
                if axis == 2 {
                    dplane[(y + 1) * w + xx] += g;
                } else {
                    dplane[y * w + xx + 1] += g;
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_all_ones_is_nine() {
        let x = Tensor::<f64>::ones([1, 1, 5, 5]);
        let w = Tensor::<f64>::ones([1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, &ConvSpec::new(1, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::<f32>::from_fn([2, 1, 4, 3], |i| i as f32 * 0.37 - 1.0);
        let w = Tensor::<f32>::ones([1, 1, 1, 1]);
        let y = conv2d(&x, &w, Some(&Tensor::zeros([1])), &ConvSpec::new(1, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_stride_two_shape() {
        let x = Tensor::<f32>::ones([1, 2, 4, 4]);
        let w = Tensor::<f32>::ones([3, 2, 3, 3]);
        let y = conv2d(&x, &w, None, &ConvSpec::new(2, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 3, 2, 2]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::ones([1, 2, 4, 4]);
        let w = Tensor::<f32>::ones([3, 1, 3, 3]);
        assert!(matches!(
            conv2d(&x, &w, None, &ConvSpec::new(1, 1)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn conv_pad_value_enters_border_taps() {
        let x = Tensor::<f64>::zeros([1, 1, 3, 3]);
        let w = Tensor::<f64>::ones([1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, &ConvSpec::new(1, 1).with_pad_value(1.0)).unwrap();
        // corner sees 5 padded taps, edge 3, centre none
        assert_eq!(y.data(), &[5.0, 3.0, 5.0, 3.0, 0.0, 3.0, 5.0, 3.0, 5.0]);
    }

    #[test]
    fn upsample_block_replicates() {
        let x = Tensor::<f32>::new([1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let y = upsample_nearest(&x, 2).unwrap();
        let expect: Vec<f32> = (0..16)
            .map(|i| {
                let (r, c) = (i / 4, i % 4);
                x.data()[(r / 2) * 2 + c / 2]
            })
            .collect();
        assert_eq!(y.data(), &expect[..]);
        assert_eq!(upsample_nearest(&x, 1).unwrap(), x);
        let one = Tensor::<f32>::full([1, 1, 1, 1], 7.0);
        assert_eq!(upsample_nearest(&one, 2).unwrap().data(), &[7.0; 4]);
    }

    #[test]
    fn avg_pool_cases() {
        let x = Tensor::<f64>::new([1, 1, 2, 2], vec![0., 2., 4., 6.]).unwrap();
        assert_eq!(avg_pool(&x, 2).unwrap().data(), &[3.0]);
        assert_eq!(avg_pool(&x, 1).unwrap(), x);
        let c = Tensor::<f64>::full([1, 2, 4, 4], 0.7);
        assert!(avg_pool(&c, 2)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 0.7).abs() < 1e-15));
        assert!(matches!(
            avg_pool(&Tensor::<f64>::ones([1, 1, 3, 4]), 2),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn concat_then_split_recovers_parts() {
        let a = Tensor::<f32>::from_fn([2, 1, 2, 2], |i| i as f32);
        let b = Tensor::<f32>::from_fn([2, 3, 2, 2], |i| -(i as f32));
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 4, 2, 2]);
        let parts = split_channels(&cat, &[1, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
