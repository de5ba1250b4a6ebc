use rayon::prelude::*;

use super::tape::BackwardCtx;
use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Batched matrix contraction `op(a) · op(b)` where `op` optionally swaps
/// the last two axes.
///
/// Operands are `[M, K]` or `[B, M, K]`. The attention patterns are
/// `K · Qᵀ` (`transpose_b`), `Kᵀ · Q` (`transpose_a`), `A · V` (neither) and
/// `V · Aᵀ` (`transpose_b`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Contraction {
    pub transpose_a: bool,
    pub transpose_b: bool,
}

impl Contraction {
    pub const NN: Self = Self {
        transpose_a: false,
        transpose_b: false,
    };
    pub const NT: Self = Self {
        transpose_a: false,
        transpose_b: true,
    };
    pub const TN: Self = Self {
        transpose_a: true,
        transpose_b: false,
    };
}

/// (batch, rows, cols) of a rank-2 or rank-3 operand.
fn mat_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [m, k] => Ok((1, m, k)),
        [b, m, k] => Ok((b, m, k)),
        ref s => Err(Error::Shape(format!(
            "contract expects rank-2 or rank-3 operands, got {s:?}"
        ))),
    }
}

/// Copies `[batch, rows, cols]` into `[batch, cols, rows]`.
fn transposed<T: Scalar>(x: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        let src = &x[b * rows * cols..][..rows * cols];
        let dst = &mut out[b * rows * cols..][..rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

/// `op(a) · op(b)` over raw buffers. `a` is stored `[batch, ar, ac]`, `b`
/// is stored `[batch, br, bc]`.
#[allow(clippy::too_many_arguments)]
fn bmm<T: Scalar>(
    a: &[T],
    (ar, ac): (usize, usize),
    ta: bool,
    b: &[T],
    (br, bc): (usize, usize),
    tb: bool,
    batch: usize,
) -> Vec<T> {
    let a_op = if ta { transposed(a, batch, ar, ac) } else { a.to_vec() };
    let b_op = if tb { transposed(b, batch, br, bc) } else { b.to_vec() };
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    let mut out = vec![T::zero(); batch * m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(row, o)| {
        let (bi, i) = (row / m, row % m);
        let arow = &a_op[(bi * m + i) * k..][..k];
        let bmat = &b_op[bi * k * n..][..k * n];
        for (p, av) in arow.iter().enumerate() {
            let brow = &bmat[p * n..][..n];
            for (ov, bv) in o.iter_mut().zip(brow) {
                *ov += *av * *bv;
            }
        }
    });
    out
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn contract(self, other: Var<'t, T>, spec: Contraction) -> Result<Self> {
        self.same_tape(&other)?;
        let av = self.value();
        let bv = other.value();
        let (ba, ar, ac) = mat_dims(av.shape())?;
        let (bb, br, bc) = mat_dims(bv.shape())?;
        if av.rank() != bv.rank() || ba != bb {
            return Err(Error::Shape(format!(
                "contract batch mismatch: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, ka) = if spec.transpose_a { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if spec.transpose_b { (bc, br) } else { (br, bc) };
        if ka != kb {
            return Err(Error::Shape(format!(
                "contract: contracted extents differ ({ka} vs {kb}) for {:?} x {:?} with {spec:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let batch = ba;
        let out = bmm(av.data(), (ar, ac), spec.transpose_a, bv.data(), (br, bc), spec.transpose_b, batch);
        let shape = if av.rank() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let out = Tensor::new(shape, out)?;
        let (ta, tb) = (spec.transpose_a, spec.transpose_b);
        self.tape.push(
            "contract",
            out,
            &[self, other],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let a = ctx.inputs[0].data();
                let b = ctx.inputs[1].data();
                let g = ctx.grad;
                let ga = ctx.needs[0].then(|| {
                    if ta {
                        // stored [k, m]: B_op · gᵀ
                        bmm(b, (br, bc), tb, g, (m, n), true, batch)
                    } else {
                        bmm(g, (m, n), false, b, (br, bc), !tb, batch)
                    }
                });
                let gb = ctx.needs[1].then(|| {
                    if tb {
                        // stored [n, k]: gᵀ · A_op
                        bmm(g, (m, n), true, a, (ar, ac), ta, batch)
                    } else {
                        bmm(a, (ar, ac), !ta, g, (m, n), false, batch)
                    }
                });
                vec![ga, gb]
            }),
        )
    }
}
