use crate::error::{dim_err, Result};
use crate::float::{gemm, Mat};
use crate::{Float, Tensor, Var};

impl<'t, T: Float> Var<'t, T> {
    fn binary_shapes(&self, other: &Var<'t, T>, op: &'static str) -> Result<(Tensor<T>, Tensor<T>)> {
        self.same_tape(other, op)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return dim_err(op, format!("lhs {:?} vs rhs {:?}", a.shape(), b.shape()));
        }
        Ok((a, b))
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = self.binary_shapes(&other, "add")?;
        let out = a.zip_map(&b, |x, y| x + y)?;
        Ok(self.tape().record(out, &[*self, other], |g| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = self.binary_shapes(&other, "sub")?;
        let out = a.zip_map(&b, |x, y| x - y)?;
        Ok(self.tape().record(out, &[*self, other], |g| vec![Some(g.clone()), Some(g.map(|v| -v))]))
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = self.binary_shapes(&other, "mul")?;
        let out = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.tape().record(out, &[*self, other], move |g| {
            vec![g.zip_map(&b, |g, y| g * y).ok(), g.zip_map(&a, |g, x| g * x).ok()]
        }))
    }

    pub fn scale(&self, s: T) -> Var<'t, T> {
        let out = self.value().scale(s);
        self.tape().record(out, &[*self], move |g| vec![Some(g.scale(s))])
    }

    pub fn sum(&self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape().record(Tensor::scalar(x.sum()), &[*self], move |g| vec![Some(Tensor::full(shape, g.data()[0]))])
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = T::from_usize(self.value().len().max(1)).unwrap();
        self.sum().scale(T::one() / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let original = x.shape().to_vec();
        let out = x.reshape(shape.to_vec())?;
        Ok(self.tape().record(out, &[*self], move |g| vec![g.reshape(original).ok()]))
    }

    /// Mean of squared element differences.
    pub fn mse_loss(&self, target: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = self.binary_shapes(&target, "mse_loss")?;
        let n = T::from_usize(a.len().max(1)).unwrap();
        let diff = a.zip_map(&b, |x, y| x - y)?;
        let loss = diff.data().iter().map(|&d| d * d).sum::<T>() / n;
        Ok(self.tape().record(Tensor::scalar(loss), &[*self, target], move |g| {
            let k = g.data()[0] * (T::one() + T::one()) / n;
            let da = diff.scale(k);
            let db = da.map(|v| -v);
            vec![Some(da), Some(db)]
        }))
    }

    /// `x [N,F] * w^T [F,O] + b [O]`.
    pub fn linear(&self, weight: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&weight, "linear")?;
        self.same_tape(&bias, "linear")?;
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (&[n, f], &[o, wf], &[bo]) = (x.shape(), w.shape(), b.shape()) else {
            return dim_err(
                "linear",
                format!("expected x [N,F], w [O,F], b [O]; got {:?}, {:?}, {:?}", x.shape(), w.shape(), b.shape()),
            );
        };
        if f != wf || o != bo {
            return dim_err("linear", format!("features {f} vs weight {wf}, outputs {o} vs bias {bo}"));
        }
        let mut out = vec![T::zero(); n * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(b.data());
        }
        gemm(Mat::row_major(x.data(), n, f), Mat::row_major(w.data(), o, f).t(), &mut out, true);
        let out = Tensor::from_parts(vec![n, o], out);
        Ok(self.tape().record(out, &[*self, weight, bias], move |g| {
            let gd = g.data();
            let mut dx = vec![T::zero(); n * f];
            gemm(Mat::row_major(gd, n, o), Mat::row_major(w.data(), o, f), &mut dx, false);
            let mut dw = vec![T::zero(); o * f];
            gemm(Mat::row_major(gd, n, o).t(), Mat::row_major(x.data(), n, f), &mut dw, false);
            let mut db = vec![T::zero(); o];
            for row in gd.chunks(o) {
                for (acc, &v) in db.iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
            vec![
                Some(Tensor::from_parts(vec![n, f], dx)),
                Some(Tensor::from_parts(vec![o, f], dw)),
                Some(Tensor::from_parts(vec![o], db)),
            ]
        }))
    }

    /// Mean binary cross-entropy of `sigmoid(self)` against `targets`, computed
    /// in the numerically stable logit form.
    pub fn bce_with_logits(&self, targets: &[T]) -> Result<Var<'t, T>> {
        let z = self.value();
        if z.len() != targets.len() {
            return dim_err("bce_with_logits", format!("{} logits vs {} targets", z.len(), targets.len()));
        }
        let n = T::from_usize(z.len().max(1)).unwrap();
        let loss =
            z.data().iter().zip(targets).map(|(&z, &t)| z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p()).sum::<T>()
                / n;
        let targets = targets.to_vec();
        Ok(self.tape().record(Tensor::scalar(loss), &[*self], move |g| {
            let k = g.data()[0] / n;
            let grad = z.data().iter().zip(&targets).map(|(&z, &t)| (sigmoid(z) - t) * k).collect();
            vec![Some(Tensor::from_parts(z.shape().to_vec(), grad))]
        }))
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        let y = self.value().map(sigmoid);
        let saved = y.clone();
        self.tape().record(y, &[*self], move |g| vec![g.zip_map(&saved, |g, s| g * s * (T::one() - s)).ok()])
    }

    /// Exponential linear unit with unit alpha: `x` for `x > 0`, `exp(x) - 1` otherwise.
    pub fn elu(&self) -> Var<'t, T> {
        let x = self.value();
        let y = x.map(elu);
        self.tape()
            .record(y, &[*self], move |g| vec![g.zip_map(&x, |g, x| if x > T::zero() { g } else { g * x.exp() }).ok()])
    }
}

pub fn elu<T: Float>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp_m1()
    }
}

pub fn sigmoid<T: Float>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn elu_values() {
        assert_eq!(super::elu(0.0f64), 0.0);
        assert_eq!(super::elu(1.0f64), 1.0);
        assert!((super::elu(-1.0f64) - (-0.632_120_558_828_557_7)).abs() < 1e-15);
    }

    #[test]
    fn mse_examples() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new([2], vec![0.0, 0.0]).unwrap());
        let b = tape.constant(Tensor::new([2], vec![2.0, 0.0]).unwrap());
        assert_eq!(a.mse_loss(b).unwrap().item(), Some(2.0));
        assert_eq!(b.mse_loss(a).unwrap().item(), Some(2.0));
        assert_eq!(a.mse_loss(a).unwrap().item(), Some(0.0));
        let c = tape.constant(Tensor::zeros([3]));
        assert!(a.mse_loss(c).is_err());
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::zeros([2]));
        let l = z.bce_with_logits(&[1.0, 0.0]).unwrap();
        assert!((l.item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
