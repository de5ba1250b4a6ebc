use rayon::prelude::*;

use super::tape::BackwardCtx;
use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

impl<'t, T: Scalar> Var<'t, T> {
    /// 2x2x2 max pooling with stride 2.
    ///
    /// Ties resolve to the first voxel of the block in scan order, which is
    /// also where the backward pass routes the gradient.
    pub fn maxpool3d(self) -> Result<Self> {
        let xv = self.value();
        let [b, c, d, h, w] = xv.dims5("maxpool3d")?;
        if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "maxpool3d needs even spatial extents, got {d}x{h}x{w}"
            )));
        }
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let (iv, ov) = (d * h * w, od * oh * ow);
        let x = xv.data();
        let mut out = vec![T::zero(); b * c * ov];
        let mut arg = vec![0usize; b * c * ov];
        out.par_chunks_mut(ov)
            .zip(arg.par_chunks_mut(ov))
            .enumerate()
            .for_each(|(bc, (o, a))| {
                let xin = &x[bc * iv..][..iv];
                for i in 0..od {
                    for j in 0..oh {
                        for k in 0..ow {
                            let mut best = usize::MAX;
                            let mut best_v = T::neg_infinity();
                            for di in 0..2 {
                                for dj in 0..2 {
                                    for dk in 0..2 {
                                        let idx = ((2 * i + di) * h + 2 * j + dj) * w + 2 * k + dk;
                                        if best == usize::MAX || xin[idx] > best_v {
                                            best = idx;
                                            best_v = xin[idx];
                                        }
                                    }
                                }
                            }
                            let oi = (i * oh + j) * ow + k;
                            o[oi] = best_v;
                            a[oi] = best;
                        }
                    }
                }
            });
        let out = Tensor::new(vec![b, c, od, oh, ow], out)?;
        self.tape.push(
            "maxpool3d",
            out,
            &[self],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let mut gx = vec![T::zero(); b * c * iv];
                gx.par_chunks_mut(iv).enumerate().for_each(|(bc, gi)| {
                    let go = &ctx.grad[bc * ov..][..ov];
                    let am = &arg[bc * ov..][..ov];
                    for (g, &a) in go.iter().zip(am) {
                        gi[a] += *g;
                    }
                });
                vec![Some(gx)]
            }),
        )
    }

    /// Mean over the spatial axes: `[B,C,D,H,W] -> [B,C,1,1,1]`.
    pub fn global_avg_pool(self) -> Result<Self> {
        let xv = self.value();
        let [b, c, d, h, w] = xv.dims5("global_avg_pool")?;
        let vol = d * h * w;
        if vol == 0 || b * c == 0 {
            return Err(Error::Shape(format!(
                "global_avg_pool on empty tensor {:?}",
                xv.shape()
            )));
        }
        let inv = T::one() / T::of(vol as f64);
        let out: Vec<T> = xv
            .data()
            .chunks(vol)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(vec![b, c, 1, 1, 1], out)?;
        self.tape.push(
            "global_avg_pool",
            out,
            &[self],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let mut gx = Vec::with_capacity(b * c * vol);
                for g in ctx.grad {
                    gx.extend(std::iter::repeat_n(*g * inv, vol));
                }
                vec![Some(gx)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn odd_extent_is_rejected() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 3, 2, 2]));
        assert!(x.maxpool3d().is_err());
    }

    #[test]
    fn ties_pick_first_in_scan_order() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full(vec![1, 1, 2, 2, 2], 1.0));
        let y = x.maxpool3d().unwrap().sum().unwrap();
        tape.backward(y).unwrap();
        let g = x.grad().unwrap();
        assert_eq!(g.data()[0], 1.0);
        assert_eq!(g.data()[1..].iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn empty_tensor_gap_errors() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 0, 2, 2]));
        assert!(x.global_avg_pool().is_err());
    }
}
