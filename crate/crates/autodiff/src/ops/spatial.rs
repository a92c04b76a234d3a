use crate::error::{dim_err, Result};
use crate::{Float, Tensor, Var};

/// Index map of sub-pixel rearrangement:
/// `out[n, c, y*r + dy, x*r + dx] = in[n, c*r*r + dy*r + dx, y, x]`.
/// Calls `f(in_index, out_index)` for every element.
fn for_each_shuffle(shape: [usize; 4], r: usize, mut f: impl FnMut(usize, usize)) {
    let [n, cin, h, w] = shape;
    let c = cin / (r * r);
    let (oh, ow) = (h * r, w * r);
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let src_c = ch * r * r + dy * r + dx;
                    for y in 0..h {
                        for x in 0..w {
                            let src = ((b * cin + src_c) * h + y) * w + x;
                            let dst = ((b * c + ch) * oh + y * r + dy) * ow + x * r + dx;
                            f(src, dst);
                        }
                    }
                }
            }
        }
    }
}

fn check_shuffle(x: &[usize], r: usize) -> Result<[usize; 4]> {
    let &[n, c, h, w] = x else {
        return dim_err("pixel_shuffle", format!("expected rank-4 [N,C,H,W], got {x:?}"));
    };
    if r == 0 || c % (r * r) != 0 {
        return dim_err("pixel_shuffle", format!("channels (axis 1) = {c} not divisible by r^2 = {}", r * r));
    }
    Ok([n, c, h, w])
}

/// Sub-pixel rearrangement `[N, C*r^2, H, W] -> [N, C, r*H, r*W]` on a plain tensor.
pub fn pixel_shuffle<T: Float>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = check_shuffle(x.shape(), r)?;
    let mut out = vec![T::zero(); x.len()];
    for_each_shuffle([n, c, h, w], r, |src, dst| out[dst] = x.data()[src]);
    Tensor::new([n, c / (r * r), h * r, w * r], out)
}

/// Inverse of [`pixel_shuffle`]: `[N, C, r*H, r*W] -> [N, C*r^2, H, W]`.
pub fn pixel_unshuffle<T: Float>(y: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let &[n, c, oh, ow] = y.shape() else {
        return dim_err("pixel_unshuffle", format!("expected rank-4 [N,C,H,W], got {:?}", y.shape()));
    };
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return dim_err("pixel_unshuffle", format!("spatial axes {oh}x{ow} not divisible by r = {r}"));
    }
    let shape = [n, c * r * r, oh / r, ow / r];
    let mut out = vec![T::zero(); y.len()];
    for_each_shuffle(shape, r, |src, dst| out[src] = y.data()[dst]);
    Tensor::new(shape.to_vec(), out)
}

impl<'t, T: Float> Var<'t, T> {
    pub fn pixel_shuffle(&self, r: usize) -> Result<Var<'t, T>> {
        let out = pixel_shuffle(&self.value(), r)?;
        Ok(self.tape().record(out, &[*self], move |g| vec![pixel_unshuffle(g, r).ok()]))
    }

    /// Non-overlapping 2x2 mean pooling; odd spatial sides are rejected.
    pub fn avg_pool2(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let [n, c, h, w] = x.dims4("avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return dim_err("avg_pool2", format!("spatial axes (2, 3) = {h}x{w} must be even"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::from_f64_lossy(0.25);
        let xd = x.data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for (p, plane) in out.chunks_mut(oh * ow).enumerate() {
            let src = &xd[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    plane[y * ow + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
        let out = Tensor::from_parts(vec![n, c, oh, ow], out);
        Ok(self.tape().record(out, &[*self], move |g| {
            let gd = g.data();
            let mut dx = vec![T::zero(); n * c * h * w];
            for (p, plane) in dx.chunks_mut(h * w).enumerate() {
                let src = &gd[p * oh * ow..(p + 1) * oh * ow];
                for y in 0..h {
                    for xx in 0..w {
                        plane[y * w + xx] = src[(y / 2) * ow + xx / 2] * quarter;
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    #[test]
    fn shuffle_layout() {
        let x = Tensor::<f64>::new([1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);

        let x = Tensor::<f64>::from_fn([1, 4, 2, 2], |i| i as f64);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        // in[0..4, 0, 0] = [0, 4, 8, 12] lands in the top-left 2x2 block.
        assert_eq!(&y.data()[0..2], &[0.0, 4.0]);
        assert_eq!(&y.data()[4..6], &[8.0, 12.0]);
    }

    #[test]
    fn shuffle_rejects_indivisible_channels() {
        let x = Tensor::<f32>::zeros([1, 3, 2, 2]);
        assert!(pixel_shuffle(&x, 2).is_err());
    }

    #[test]
    fn pool_examples() {
        let tape = Tape::<f64>::new();
        let block = tape.leaf(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = block.avg_pool2().unwrap();
        assert_eq!(y.value().data(), &[2.5]);
        tape.backward(y.sum()).unwrap();
        assert_eq!(block.grad().unwrap().data(), &[0.25; 4]);

        let tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::full([1, 2, 4, 4], 3.5));
        assert_eq!(c.avg_pool2().unwrap().value().data(), &[3.5; 8]);
        let odd = tape.constant(Tensor::zeros([1, 1, 3, 4]));
        assert!(odd.avg_pool2().is_err());
    }
}
