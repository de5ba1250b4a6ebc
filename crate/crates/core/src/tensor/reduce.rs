use super::tape::BackwardCtx;
use super::{Scalar, Tensor, Var};
use crate::error::Result;

impl<'t, T: Scalar> Var<'t, T> {
    /// Sum of all elements as a scalar.
    pub fn sum(self) -> Result<Self> {
        let xv = self.value();
        let n = xv.numel();
        let out = Tensor::scalar(xv.data().iter().copied().sum());
        self.tape.push(
            "sum",
            out,
            &[self],
            Box::new(move |ctx: &BackwardCtx<'_, T>| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean(self) -> Result<Self> {
        let n = self.value().numel();
        self.sum()?.scale(1.0 / n as f64)
    }
}
