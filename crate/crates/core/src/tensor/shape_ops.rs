use super::tape::BackwardCtx;
use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

impl<'t, T: Scalar> Var<'t, T> {
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let out = self.value().reshape(shape)?;
        self.tape.push(
            "reshape",
            out,
            &[self],
            Box::new(|ctx: &BackwardCtx<'_, T>| vec![Some(ctx.grad.to_vec())]),
        )
    }

    /// Concatenates rank-5 tensors along the channel axis.
    pub fn concat_channels(parts: &[Var<'t, T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let [b, _, d, h, w] = values[0].dims5("concat_channels")?;
        let mut widths = Vec::with_capacity(parts.len());
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p)?;
            let [pb, pc, pd, ph, pw] = v.dims5("concat_channels")?;
            if (pb, pd, ph, pw) != (b, d, h, w) {
                return Err(Error::Shape(format!(
                    "concat_channels: {:?} vs {:?}",
                    values[0].shape(),
                    v.shape()
                )));
            }
            widths.push(pc);
        }
        let vol = d * h * w;
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(b * total * vol);
        for bi in 0..b {
            for (v, &c) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[bi * c * vol..(bi + 1) * c * vol]);
            }
        }
        let out = Tensor::new(vec![b, total, d, h, w], out)?;
        first.tape.push(
            "concat_channels",
            out,
            parts,
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let mut grads: Vec<Option<Vec<T>>> = widths
                    .iter()
                    .zip(&ctx.needs)
                    .map(|(&c, &need)| need.then(|| Vec::with_capacity(b * c * vol)))
                    .collect();
                for bi in 0..b {
                    let mut off = bi * total * vol;
                    for (g, &c) in grads.iter_mut().zip(&widths) {
                        if let Some(g) = g {
                            g.extend_from_slice(&ctx.grad[off..off + c * vol]);
                        }
                        off += c * vol;
                    }
                }
                grads
            }),
        )
    }
}
