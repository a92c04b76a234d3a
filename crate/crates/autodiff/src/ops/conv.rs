//! 2-D convolution and its transpose via im2col + GEMM.
//!
//! Batches are processed image by image in parallel. Weight gradients are
//! computed per image and then summed in batch order, so results do not
//! depend on the thread count.

use rayon::prelude::*;

use crate::error::{dim_err, Result};
use crate::float::{gemm, Mat};
use crate::{Float, Tensor, Var};

/// Geometry of a convolution reading a `c x h x w` image into an
/// `oh x ow` grid of `k x k` patches.
#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn patch_len(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.oh * self.ow
    }

    /// `1x1`, stride 1, no padding: the image already is its column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Float>(x: &[T], g: Geom, cols: &mut [T]) {
    let ohw = g.out_len();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let seg = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        seg.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto a (pre-initialised) image.
fn col2im<T: Float>(cols: &[T], g: Geom, x: &mut [T]) {
    let ohw = g.out_len();
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn columns<'a, T: Float>(x: &'a [T], g: Geom, buf: &'a mut Vec<T>) -> &'a [T] {
    if g.is_pointwise() {
        x
    } else {
        buf.resize(g.patch_len() * g.out_len(), T::zero());
        im2col(x, g, buf);
        buf
    }
}

fn add_bias<T: Float>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn bias_grad<T: Float>(g: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); c];
    for img in g.chunks(c * plane).take(n) {
        for (acc, ch) in db.iter_mut().zip(img.chunks(plane)) {
            *acc = *acc + ch.iter().copied().sum::<T>();
        }
    }
    db
}

fn sum_in_order<T: Float>(parts: impl Iterator<Item = Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for part in parts {
        for (a, v) in acc.iter_mut().zip(part) {
            *a = *a + v;
        }
    }
    acc
}

fn check_kernel(op: &'static str, k: usize, kw: usize, stride: usize) -> Result<()> {
    if k != kw || k % 2 == 0 {
        return dim_err(op, format!("kernel must be square with odd side, got {k}x{kw}"));
    }
    if stride == 0 {
        return dim_err(op, "stride must be positive");
    }
    Ok(())
}

impl<'t, T: Float> Var<'t, T> {
    /// Cross-correlation of `self [N,Cin,H,W]` with `weight [Cout,Cin,k,k]`.
    ///
    /// Output side is `floor((H + 2*padding - k) / stride) + 1`.
    pub fn conv2d(&self, weight: Var<'t, T>, bias: Var<'t, T>, stride: usize, padding: usize) -> Result<Var<'t, T>> {
        const OP: &str = "conv2d";
        self.same_tape(&weight, OP)?;
        self.same_tape(&bias, OP)?;
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let [n, cin, h, wd] = x.dims4(OP)?;
        let [cout, wcin, k, kw] = w.dims4(OP)?;
        check_kernel(OP, k, kw, stride)?;
        if wcin != cin {
            return dim_err(OP, format!("input channels (axis 1) {cin} vs weight axis 1 {wcin}"));
        }
        if b.shape() != [cout] {
            return dim_err(OP, format!("bias shape {:?} vs output channels {cout}", b.shape()));
        }
        if h + 2 * padding < k || wd + 2 * padding < k {
            return dim_err(OP, format!("spatial axes {h}x{wd} smaller than kernel {k} with padding {padding}"));
        }
        let g = Geom {
            c: cin,
            h,
            w: wd,
            k,
            stride,
            pad: padding,
            oh: (h + 2 * padding - k) / stride + 1,
            ow: (wd + 2 * padding - k) / stride + 1,
        };
        let (in_len, out_len) = (cin * h * wd, cout * g.out_len());
        let mut out = vec![T::zero(); n * out_len];
        out.par_chunks_mut(out_len).enumerate().for_each(|(i, dst)| {
            let mut buf = Vec::new();
            let cols = columns(&x.data()[i * in_len..(i + 1) * in_len], g, &mut buf);
            gemm(
                Mat::row_major(w.data(), cout, g.patch_len()),
                Mat::row_major(cols, g.patch_len(), g.out_len()),
                dst,
                false,
            );
            add_bias(dst, b.data(), g.out_len());
        });
        let out = Tensor::from_parts(vec![n, cout, g.oh, g.ow], out);

        let (need_dx, need_dw) = (self.requires_grad(), weight.requires_grad());
        Ok(self.tape().record(out, &[*self, weight, bias], move |grad| {
            let gd = grad.data();
            let per_image: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let gi = Mat::row_major(&gd[i * out_len..(i + 1) * out_len], cout, g.out_len());
                    let dx = need_dx.then(|| {
                        let mut dcols = vec![T::zero(); g.patch_len() * g.out_len()];
                        gemm(Mat::row_major(w.data(), cout, g.patch_len()).t(), gi, &mut dcols, false);
                        if g.is_pointwise() {
                            dcols
                        } else {
                            let mut dx = vec![T::zero(); in_len];
                            col2im(&dcols, g, &mut dx);
                            dx
                        }
                    });
                    let dw = need_dw.then(|| {
                        let mut buf = Vec::new();
                        let cols = columns(&x.data()[i * in_len..(i + 1) * in_len], g, &mut buf);
                        let mut dw = vec![T::zero(); cout * g.patch_len()];
                        gemm(gi, Mat::row_major(cols, g.patch_len(), g.out_len()).t(), &mut dw, false);
                        dw
                    });
                    (dx, dw)
                })
                .collect();
            let (dxs, dws): (Vec<_>, Vec<_>) = per_image.into_iter().unzip();
            let dx = need_dx.then(|| {
                let data: Vec<T> = dxs.into_iter().flat_map(Option::unwrap).collect();
                Tensor::from_parts(vec![n, cin, h, wd], data)
            });
            let dw = need_dw.then(|| {
                let data = sum_in_order(dws.into_iter().map(Option::unwrap), cout * g.patch_len());
                Tensor::from_parts(vec![cout, cin, k, k], data)
            });
            let db = Tensor::from_parts(vec![cout], bias_grad(gd, n, cout, g.out_len()));
            vec![dx, dw, Some(db)]
        }))
    }

    /// Transposed convolution of `self [N,Cin,H,W]` with `weight [Cin,Cout,k,k]`.
    ///
    /// Output side is `(H - 1)*stride - 2*padding + k + output_padding`; its
    /// forward map is the input-gradient operator of the matching `conv2d`.
    pub fn conv2d_transpose(
        &self,
        weight: Var<'t, T>,
        bias: Var<'t, T>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var<'t, T>> {
        const OP: &str = "conv2d_transpose";
        self.same_tape(&weight, OP)?;
        self.same_tape(&bias, OP)?;
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let [n, cin, h, wd] = x.dims4(OP)?;
        let [wcin, cout, k, kw] = w.dims4(OP)?;
        check_kernel(OP, k, kw, stride)?;
        if wcin != cin {
            return dim_err(OP, format!("input channels (axis 1) {cin} vs weight axis 0 {wcin}"));
        }
        if b.shape() != [cout] {
            return dim_err(OP, format!("bias shape {:?} vs output channels {cout}", b.shape()));
        }
        if output_padding >= stride {
            return dim_err(OP, format!("output_padding {output_padding} must be < stride {stride}"));
        }
        let full = |s: usize| (s - 1) * stride + k + output_padding;
        if h == 0 || wd == 0 || full(h) <= 2 * padding || full(wd) <= 2 * padding {
            return dim_err(OP, format!("spatial axes {h}x{wd} too small for padding {padding}"));
        }
        let (oh, ow) = (full(h) - 2 * padding, full(wd) - 2 * padding);
        // The conv2d whose input is our output and whose output grid is our input.
        let g = Geom { c: cout, h: oh, w: ow, k, stride, pad: padding, oh: h, ow: wd };
        let (in_len, out_len) = (cin * h * wd, cout * oh * ow);
        let wmat = || Mat::row_major(w.data(), cin, g.patch_len());
        let mut out = vec![T::zero(); n * out_len];
        out.par_chunks_mut(out_len).enumerate().for_each(|(i, dst)| {
            let xi = Mat::row_major(&x.data()[i * in_len..(i + 1) * in_len], cin, h * wd);
            let mut cols = vec![T::zero(); g.patch_len() * g.out_len()];
            gemm(wmat().t(), xi, &mut cols, false);
            col2im(&cols, g, dst);
            add_bias(dst, b.data(), oh * ow);
        });
        let out = Tensor::from_parts(vec![n, cout, oh, ow], out);

        let (need_dx, need_dw) = (self.requires_grad(), weight.requires_grad());
        Ok(self.tape().record(out, &[*self, weight, bias], move |grad| {
            let gd = grad.data();
            let wmat = Mat::row_major(w.data(), cin, g.patch_len());
            let per_image: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut gcols = vec![T::zero(); g.patch_len() * g.out_len()];
                    im2col(&gd[i * out_len..(i + 1) * out_len], g, &mut gcols);
                    let gcols = Mat::row_major(&gcols, g.patch_len(), g.out_len());
                    let dx = need_dx.then(|| {
                        let mut dx = vec![T::zero(); in_len];
                        gemm(wmat, gcols, &mut dx, false);
                        dx
                    });
                    let dw = need_dw.then(|| {
                        let xi = Mat::row_major(&x.data()[i * in_len..(i + 1) * in_len], cin, h * wd);
                        let mut dw = vec![T::zero(); cin * g.patch_len()];
                        gemm(xi, gcols.t(), &mut dw, false);
                        dw
                    });
                    (dx, dw)
                })
                .collect();
            let (dxs, dws): (Vec<_>, Vec<_>) = per_image.into_iter().unzip();
            let dx = need_dx.then(|| {
                let data: Vec<T> = dxs.into_iter().flat_map(Option::unwrap).collect();
                Tensor::from_parts(vec![n, cin, h, wd], data)
            });
            let dw = need_dw.then(|| {
                let data = sum_in_order(dws.into_iter().map(Option::unwrap), cin * g.patch_len());
                Tensor::from_parts(vec![cin, cout, k, k], data)
            });
            let db = Tensor::from_parts(vec![cout], bias_grad(gd, n, cout, oh * ow));
            vec![dx, dw, Some(db)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn identity_kernel_passes_input_through() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([2, 1, 3, 3], |i| i as f64 - 4.0));
        let w = tape.constant(Tensor::full([1, 1, 1, 1], 1.0));
        let b = tape.constant(Tensor::zeros([1]));
        assert_eq!(x.conv2d(w, b, 1, 0).unwrap().value(), x.value());
        assert_eq!(x.conv2d_transpose(w, b, 1, 0, 0).unwrap().value(), x.value());
    }

    #[test]
    fn all_ones_kernel_on_constant_field() {
        let c = 0.75;
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([1, 1, 5, 5], c));
        let w = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros([1]));
        let y = x.conv2d(w, b, 1, 1).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
        for yy in 1..4 {
            for xx in 1..4 {
                assert_eq!(y.data()[yy * 5 + xx], 9.0 * c);
            }
        }
        assert_eq!(y.data()[0], 4.0 * c);
    }

    #[test]
    fn stride_two_transpose_doubles_side() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 128, 8, 8]));
        let w = tape.constant(Tensor::zeros([128, 128, 3, 3]));
        let b = tape.constant(Tensor::zeros([128]));
        assert_eq!(x.conv2d_transpose(w, b, 2, 1, 1).unwrap().shape(), vec![1, 128, 16, 16]);
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros([3, 4, 3, 3]));
        let b = tape.constant(Tensor::zeros([3]));
        let err = x.conv2d(w, b, 1, 1).unwrap_err().to_string();
        assert!(err.contains("axis 1"), "{err}");
        let even = tape.constant(Tensor::zeros([3, 2, 2, 2]));
        assert!(x.conv2d(even, b, 1, 0).is_err());
    }
}
