use rayon::prelude::*;

use super::tape::BackwardCtx;
use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

impl<'t, T: Scalar> Var<'t, T> {
    /// Group normalization over `[B, C, D, H, W]`.
    ///
    /// Statistics are taken per (batch, group) over the group's channels and
    /// all voxels; `gamma` and `beta` are per-channel `[C]`.
    pub fn group_norm(self, groups: usize, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Self> {
        self.same_tape(&gamma)?;
        self.same_tape(&beta)?;
        let xv = self.value();
        let [b, c, d, h, w] = xv.dims5("group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Shape(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::Shape(format!(
                "group_norm: gamma/beta must be [{c}], got {:?} / {:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let vol = d * h * w;
        let cg = c / groups;
        let glen = cg * vol;
        let gamma_v = gamma.value();
        let beta_v = beta.value();
        let x = xv.data();

        // (mean, rstd) per (batch, group)
        let stats: Vec<(T, T)> = x
            .par_chunks(glen)
            .map(|chunk| {
                let n = chunk.len() as f64;
                let mean = chunk.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n;
                let var = chunk
                    .iter()
                    .map(|v| {
                        let e = v.to_f64_lossy() - mean;
                        e * e
                    })
                    .sum::<f64>()
                    / n;
                (T::of(mean), T::of(1.0 / (var + eps).sqrt()))
            })
            .collect();

        let mut out = vec![T::zero(); x.len()];
        {
            let (gm, bt) = (gamma_v.data(), beta_v.data());
            out.par_chunks_mut(glen)
                .zip(x.par_chunks(glen))
                .enumerate()
                .for_each(|(bg, (o, xi))| {
                    let (mean, rstd) = stats[bg];
                    let g0 = (bg % groups) * cg;
                    for j in 0..cg {
                        let (ga, be) = (gm[g0 + j], bt[g0 + j]);
                        let r = j * vol..(j + 1) * vol;
                        for (ov, xv) in o[r.clone()].iter_mut().zip(&xi[r]) {
                            *ov = ga * (*xv - mean) * rstd + be;
                        }
                    }
                });
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        self.tape.push(
            "group_norm",
            out,
            &[self, gamma, beta],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let x = ctx.inputs[0].data();
                let gm = ctx.inputs[1].data();
                let gy = ctx.grad;
                let gx = ctx.needs[0].then(|| {
                    let mut gx = vec![T::zero(); x.len()];
                    gx.par_chunks_mut(glen).enumerate().for_each(|(bg, gxi)| {
                        let (mean, rstd) = stats[bg];
                        let off = bg * glen;
                        let xi = &x[off..off + glen];
                        let gyi = &gy[off..off + glen];
                        let g0 = (bg % groups) * cg;
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..cg {
                            let ga = gm[g0 + j];
                            for v in j * vol..(j + 1) * vol {
                                let dxh = gyi[v] * ga;
                                s1 += dxh;
                                s2 += dxh * (xi[v] - mean) * rstd;
                            }
                        }
                        let n = T::of(glen as f64);
                        let (m1, m2) = (s1 / n, s2 / n);
                        for j in 0..cg {
                            let ga = gm[g0 + j];
                            for v in j * vol..(j + 1) * vol {
                                let xh = (xi[v] - mean) * rstd;
                                gxi[v] = rstd * (gyi[v] * ga - m1 - xh * m2);
                            }
                        }
                    });
                    gx
                });
                let per_channel = |f: &dyn Fn(usize, usize) -> T| -> Vec<T> {
                    (0..c)
                        .map(|ch| {
                            let mut acc = T::zero();
                            for bi in 0..b {
                                let bg = bi * groups + ch / cg;
                                let base = (bi * c + ch) * vol;
                                for v in base..base + vol {
                                    acc += f(bg, v);
                                }
                            }
                            acc
                        })
                        .collect()
                };
                let ggamma = ctx.needs[1].then(|| {
                    per_channel(&|bg, v| {
                        let (mean, rstd) = stats[bg];
                        gy[v] * (x[v] - mean) * rstd
                    })
                });
                let gbeta = ctx.needs[2].then(|| per_channel(&|_, v| gy[v]));
                vec![gx, ggamma, gbeta]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn indivisible_groups_error() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 6, 1, 1, 1]));
        let g = tape.constant(Tensor::ones(vec![6]));
        let b = tape.constant(Tensor::zeros(vec![6]));
        assert!(x.group_norm(4, g, b, 1e-5).is_err());
        assert!(x.group_norm(3, g, b, 1e-5).is_ok());
    }

    #[test]
    fn constant_input_yields_beta() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![1, 4, 2, 2, 2], 3.5));
        let g = tape.constant(Tensor::ones(vec![4]));
        let b = tape.constant(Tensor::full(vec![4], 0.25));
        let y = x.group_norm(2, g, b, 1e-5).unwrap().value();
        assert!(y.data().iter().all(|v| (*v - 0.25).abs() < 1e-12));
    }
}
