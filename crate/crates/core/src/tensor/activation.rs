use super::tape::BackwardCtx;
use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

impl<'t, T: Scalar> Var<'t, T> {
    pub fn relu(self) -> Result<Self> {
        let xv = self.value();
        let out = xv.map(|v| if v > T::zero() { v } else { T::zero() });
        self.tape.push(
            "relu",
            out,
            &[self],
            Box::new(|ctx: &BackwardCtx<'_, T>| {
                let x = ctx.inputs[0].data();
                vec![Some(
                    ctx.grad
                        .iter()
                        .zip(x)
                        .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
                        .collect(),
                )]
            }),
        )
    }

    pub fn sigmoid(self) -> Result<Self> {
        let xv = self.value();
        let out = xv.map(sigmoid);
        self.tape.push(
            "sigmoid",
            out,
            &[self],
            Box::new(|ctx: &BackwardCtx<'_, T>| {
                let y = ctx.output.data();
                vec![Some(
                    ctx.grad
                        .iter()
                        .zip(y)
                        .map(|(g, y)| *g * *y * (T::one() - *y))
                        .collect(),
                )]
            }),
        )
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Self> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let x = xv.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| x[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..n {
                    let e = (x[idx(j)] - m).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[idx(j)] = out[idx(j)] / z;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        self.tape.push(
            "softmax",
            out,
            &[self],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let y = ctx.output.data();
                let g = ctx.grad;
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: T = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn definitions() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(Tensor::zeros(vec![1]));
        assert_eq!(z.sigmoid().unwrap().value().data(), &[0.5]);
        let e = tape.constant(Tensor::full(vec![2, 5], 3.0));
        let s = e.softmax(1).unwrap().value();
        assert!(s.data().iter().all(|v| (*v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn softmax_bad_axis() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![2, 2]));
        assert!(x.softmax(2).is_err());
    }

    #[test]
    fn sigmoid_extremes_stay_finite() {
        assert_eq!(sigmoid(-800.0f64), 0.0);
        assert_eq!(sigmoid(800.0f64), 1.0);
    }
}
