//! Grouped 2-d convolution (cross-correlation) via im2col + matrix multiply.
//!
//! Parallelism is over batch images only: every output element is written by
//! exactly one task and the weight gradient is reduced over images in fixed
//! index order, so results are bitwise identical for any thread count.

use rayon::prelude::*;
use smallvec::smallvec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{RuleIo, Tensor};

#[derive(Clone, Copy)]
struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    /// Input channels per group.
    cg: usize,
    /// Output channels per group.
    og: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl ConvDims {
    fn col_rows(&self) -> usize {
        self.cg * self.kh * self.kw
    }

    fn out_hw(&self) -> usize {
        self.oh * self.ow
    }
}

/// Gather one image's group patch matrix: rows index (channel, ky, kx), columns
/// index output positions. Out-of-bounds taps read as zero padding.
fn im2col<T: Scalar>(x: &[T], d: &ConvDims, img: usize, group: usize, col: &mut [T]) {
    let hw = d.h * d.w;
    for cc in 0..d.cg {
        let chan = group * d.cg + cc;
        let plane = &x[(img * d.cin + chan) * hw..(img * d.cin + chan + 1) * hw];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (cc * d.kh + ky) * d.kw + kx;
                let dst = &mut col[row * d.out_hw()..(row + 1) * d.out_hw()];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                    let seg = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        for v in seg.iter_mut() {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let src_row = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, slot) in seg.iter_mut().enumerate() {
                        let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                        *slot = if ix < 0 || ix >= d.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the patch-matrix gradient back onto one image's input plane.
fn col2im_add<T: Scalar>(colg: &[T], d: &ConvDims, group: usize, dx_img: &mut [T]) {
    let hw = d.h * d.w;
    for cc in 0..d.cg {
        let chan = group * d.cg + cc;
        let plane = &mut dx_img[chan * hw..(chan + 1) * hw];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (cc * d.kh + ky) * d.kw + kx;
                let src = &colg[row * d.out_hw()..(row + 1) * d.out_hw()];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for ox in 0..d.ow {
                        let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        plane[iy as usize * d.w + ix as usize] += src[oy * d.ow + ox];
                    }
                }
            }
        }
    }
}

fn forward_image<T: Scalar>(x: &[T], w: &[T], d: &ConvDims, img: usize, out_img: &mut [T]) {
    let rows = d.col_rows();
    let ohw = d.out_hw();
    let mut col = vec![T::zero(); rows * ohw];
    for g in 0..d.groups {
        im2col(x, d, img, g, &mut col);
        unsafe {
            T::gemm(
                d.og,
                rows,
                ohw,
                T::one(),
                w.as_ptr().add(g * d.og * rows),
                rows as isize,
                1,
                col.as_ptr(),
                ohw as isize,
                1,
                T::zero(),
                out_img.as_mut_ptr().add(g * d.og * ohw),
                ohw as isize,
                1,
            );
        }
    }
}

/// Per-image backward: input gradient written into `dx_img` (zeroed by the
/// caller), weight-gradient partial into `dw_img` when requested.
fn backward_image<T: Scalar>(
    x: &[T],
    w: &[T],
    gout: &[T],
    d: &ConvDims,
    img: usize,
    dx_img: Option<&mut [T]>,
    dw_img: Option<&mut [T]>,
) {
    let rows = d.col_rows();
    let ohw = d.out_hw();
    let gbase = img * d.cout * ohw;
    let mut col = vec![T::zero(); rows * ohw];
    let mut dx_img = dx_img;
    let mut dw_img = dw_img;
    for g in 0..d.groups {
        let g_ptr = unsafe { gout.as_ptr().add(gbase + g * d.og * ohw) };
        if dw_img.is_some() || dx_img.is_some() {
            im2col(x, d, img, g, &mut col);
        }
        if let Some(dw) = dw_img.as_deref_mut() {
            // dW_g = G_g [og, ohw] * col^T [ohw, rows]
            unsafe {
                T::gemm(
                    d.og,
                    ohw,
                    rows,
                    T::one(),
                    g_ptr,
                    ohw as isize,
                    1,
                    col.as_ptr(),
                    1,
                    ohw as isize,
                    T::zero(),
                    dw.as_mut_ptr().add(g * d.og * rows),
                    rows as isize,
                    1,
                );
            }
        }
        if let Some(dx) = dx_img.as_deref_mut() {
            // colgrad = W_g^T [rows, og] * G_g [og, ohw], reusing col storage.
            unsafe {
                T::gemm(
                    rows,
                    d.og,
                    ohw,
                    T::one(),
                    w.as_ptr().add(g * d.og * rows),
                    1,
                    rows as isize,
                    g_ptr,
                    ohw as isize,
                    1,
                    T::zero(),
                    col.as_mut_ptr(),
                    ohw as isize,
                    1,
                );
            }
            col2im_add(&col, d, g, dx);
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// Cross-correlate a [N, Cin, H, W] batch with [Cout, Cin/groups, KH, KW]
    /// filters. Output spatial extent is floor((H + 2*padding - KH) / stride) + 1.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Tensor<T>> {
        self.check_same_tape(weight)?;
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::ConvInvalid(format!(
                "expected rank-4 input and weight, got {:?} and {:?}",
                xs, ws
            )));
        }
        if stride == 0 {
            return Err(Error::ConvInvalid("stride must be at least 1".into()));
        }
        if groups == 0 || xs[1] % groups != 0 || ws[0] % groups != 0 {
            return Err(Error::ConvInvalid(format!(
                "groups {} must divide input channels {} and output channels {}",
                groups, xs[1], ws[0]
            )));
        }
        if ws[1] != xs[1] / groups {
            return Err(Error::ConvInvalid(format!(
                "weight expects {} channels per group, input provides {}",
                ws[1],
                xs[1] / groups
            )));
        }
        let (h, w, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::SpatialCollapse(format!(
                "kernel {}x{} exceeds padded input {}x{}",
                kh,
                kw,
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let d = ConvDims {
            n: xs[0],
            cin: xs[1],
            h,
            w,
            cout: ws[0],
            cg: ws[1],
            og: ws[0] / groups,
            kh,
            kw,
            oh,
            ow,
            stride,
            padding,
            groups,
        };

        let out_len = d.n * d.cout * d.out_hw();
        let mut out = vec![T::zero(); out_len];
        {
            let inner = self.tape().inner.borrow();
            let x = &inner.nodes[self.node_id()].data;
            let wd = &inner.nodes[weight.node_id()].data;
            out.par_chunks_mut(d.cout * d.out_hw())
                .enumerate()
                .for_each(|(img, chunk)| forward_image(x, wd, &d, img, chunk));
        }

        let rule = Box::new(move |io: &RuleIo<'_, T>| {
            let x = io.inputs[0].data;
            let wd = io.inputs[1].data;
            let need_dx = io.inputs[0].needs;
            let need_dw = io.inputs[1].needs;
            let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
            let dw_len = wd.len();
            let img_in = d.cin * d.h * d.w;

            // Each task owns one image's input-gradient chunk and an optional
            // private weight partial; partials are then summed in image order.
            let partials: Vec<Option<Vec<T>>> = match dx.as_mut() {
                Some(dx) => dx
                    .par_chunks_mut(img_in)
                    .enumerate()
                    .map(|(img, chunk)| {
                        let mut dw_img = need_dw.then(|| vec![T::zero(); dw_len]);
                        backward_image(
                            x,
                            wd,
                            io.gout,
                            &d,
                            img,
                            Some(chunk),
                            dw_img.as_deref_mut(),
                        );
                        dw_img
                    })
                    .collect(),
                None => (0..d.n)
                    .into_par_iter()
                    .map(|img| {
                        let mut dw_img = need_dw.then(|| vec![T::zero(); dw_len]);
                        backward_image(x, wd, io.gout, &d, img, None, dw_img.as_deref_mut());
                        dw_img
                    })
                    .collect(),
            };
            let grad_w = need_dw.then(|| {
                let mut acc = vec![T::zero(); dw_len];
                for p in partials.into_iter().flatten() {
                    for (a, v) in acc.iter_mut().zip(p) {
                        *a += v;
                    }
                }
                acc
            });
            vec![dx, grad_w]
        });

        let out_shape = vec![d.n, d.cout, d.oh, d.ow];
        Ok(self
            .tape()
            .push_result(out, out_shape, smallvec![self.node_id(), weight.node_id()], rule))
    }
}
