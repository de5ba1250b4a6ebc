use std::sync::Arc;

use super::tape::BackwardCtx;
use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// Result shape of broadcasting two equal-rank shapes over size-1 axes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "broadcast needs equal ranks: {a:?} vs {b:?}"
        )));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// For each output element, the flat index of the operand element it reads.
fn index_map(out: &[usize], shape: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        strides[i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    let n: usize = out.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            flat -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// Sums `src` (output-shaped) into an operand-shaped buffer through `map`.
fn reduce_into<T: Scalar>(src: impl Iterator<Item = T>, map: Option<&[usize]>, len: usize) -> Vec<T> {
    match map {
        None => src.collect(),
        Some(map) => {
            let mut out = vec![T::zero(); len];
            for (v, &i) in src.zip(map) {
                out[i] += v;
            }
            out
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    fn binary(self, other: Var<'t, T>, kind: Binary) -> Result<Self> {
        self.same_tape(&other)?;
        let av = self.value();
        let bv = other.value();
        let shape = broadcast_shape(av.shape(), bv.shape())?;
        let amap: Option<Arc<Vec<usize>>> =
            (av.shape() != shape.as_slice()).then(|| Arc::new(index_map(&shape, av.shape())));
        let bmap: Option<Arc<Vec<usize>>> =
            (bv.shape() != shape.as_slice()).then(|| Arc::new(index_map(&shape, bv.shape())));
        let n: usize = shape.iter().product();
        let (a, b) = (av.data(), bv.data());
        let at = |i: usize| match &amap {
            Some(m) => a[m[i]],
            None => a[i],
        };
        let bt = |i: usize| match &bmap {
            Some(m) => b[m[i]],
            None => b[i],
        };
        let out: Vec<T> = (0..n)
            .map(|i| match kind {
                Binary::Add => at(i) + bt(i),
                Binary::Sub => at(i) - bt(i),
                Binary::Mul => at(i) * bt(i),
            })
            .collect();
        let out = Tensor::new(shape, out)?;
        let op = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        self.tape.push(
            op,
            out,
            &[self, other],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let g = ctx.grad;
                let am = amap.as_deref().map(Vec::as_slice);
                let bm = bmap.as_deref().map(Vec::as_slice);
                let at = |i: usize| match am {
                    Some(m) => a[m[i]],
                    None => a[i],
                };
                let bt = |i: usize| match bm {
                    Some(m) => b[m[i]],
                    None => b[i],
                };
                let ga = ctx.needs[0].then(|| match kind {
                    Binary::Add | Binary::Sub => reduce_into(g.iter().copied(), am, a.len()),
                    Binary::Mul => {
                        reduce_into(g.iter().enumerate().map(|(i, g)| *g * bt(i)), am, a.len())
                    }
                });
                let gb = ctx.needs[1].then(|| match kind {
                    Binary::Add => reduce_into(g.iter().copied(), bm, b.len()),
                    Binary::Sub => reduce_into(g.iter().map(|g| -*g), bm, b.len()),
                    Binary::Mul => {
                        reduce_into(g.iter().enumerate().map(|(i, g)| *g * at(i)), bm, b.len())
                    }
                });
                vec![ga, gb]
            }),
        )
    }

    /// Elementwise sum, broadcasting size-1 axes.
    pub fn add(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, Binary::Sub)
    }

    /// Elementwise product, broadcasting size-1 axes.
    pub fn mul(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, Binary::Mul)
    }

    /// Multiplication by a constant.
    pub fn scale(self, factor: f64) -> Result<Self> {
        let f = T::of(factor);
        let out = self.value().map(|v| v * f);
        self.tape.push(
            "scale",
            out,
            &[self],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                vec![Some(ctx.grad.iter().map(|g| *g * f).collect())]
            }),
        )
    }
}
