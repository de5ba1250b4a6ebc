//! Soft Dice, binary cross-entropy and their average, as tape primitives.
//!
//! Predictions of rank 5 are split into one region per `(batch, channel)`
//! pair; each region's loss is computed separately and the results averaged.
//! Any other rank is treated as a single region.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// Smoothing term of the Dice ratio.
pub const DICE_EPS: f64 = 1e-5;
/// Probabilities are clamped to `[BCE_CLIP, 1 - BCE_CLIP]` before logs.
pub const BCE_CLIP: f64 = 1e-7;

/// Number of independent regions and the voxels in each.
fn regions(shape: &[usize]) -> (usize, usize) {
    match *shape {
        [b, c, d, h, w] => (b * c, d * h * w),
        _ => (1, shape.iter().product()),
    }
}

fn check_pair<T: Scalar>(p: &Tensor<T>, g: &Tensor<T>, op: &str) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::Shape(format!(
            "{op}: prediction {:?} vs target {:?}",
            p.shape(),
            g.shape()
        )));
    }
    if p.numel() == 0 {
        return Err(Error::Shape(format!("{op}: empty prediction")));
    }
    Ok(())
}

/// `1 - (2 Σ p g + eps) / (Σ p + Σ g + eps)` per region, averaged.
pub fn dice_loss<'t, T: Scalar>(p: Var<'t, T>, target: &Tensor<T>, eps: f64) -> Result<Var<'t, T>> {
    let pv = p.value();
    check_pair(&pv, target, "dice_loss")?;
    if let Some(bad) = pv.data().iter().find(|v| !(T::zero()..=T::one()).contains(*v)) {
        return Err(Error::InvalidArgument(format!(
            "dice_loss: probability {bad} outside [0, 1]"
        )));
    }
    let (count, len) = regions(pv.shape());
    // (intersection, total mass) per region, accumulated in f64
    let stats: Vec<(f64, f64)> = pv
        .data()
        .chunks(len)
        .zip(target.data().chunks(len))
        .map(|(pc, gc)| {
            pc.iter().zip(gc).fold((0.0, 0.0), |(i, s), (p, g)| {
                let (p, g) = (p.to_f64_lossy(), g.to_f64_lossy());
                (i + p * g, s + p + g)
            })
        })
        .collect();
    let loss = stats
        .iter()
        .map(|&(i, s)| 1.0 - (2.0 * i + eps) / (s + eps))
        .sum::<f64>()
        / count as f64;
    let g = target.clone();
    p.tape().push(
        "dice_loss",
        Tensor::scalar(T::of(loss)),
        &[p],
        Box::new(move |ctx| {
            let up = ctx.grad[0].to_f64_lossy() / count as f64;
            let mut out = Vec::with_capacity(g.numel());
            for (gc, &(i, s)) in g.data().chunks(len).zip(&stats) {
                let den = s + eps;
                let num = 2.0 * i + eps;
                out.extend(gc.iter().map(|gv| {
                    T::of(-up * (2.0 * gv.to_f64_lossy() * den - num) / (den * den))
                }));
            }
            vec![Some(out)]
        }),
    )
}

/// Mean binary cross-entropy with clamped probabilities.
pub fn bce_loss<'t, T: Scalar>(p: Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    let pv = p.value();
    check_pair(&pv, target, "bce_loss")?;
    let n = pv.numel() as f64;
    let (lo, hi) = (BCE_CLIP, 1.0 - BCE_CLIP);
    let total: f64 = pv
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, g)| {
            let p = p.to_f64_lossy().clamp(lo, hi);
            let g = g.to_f64_lossy();
            g * p.ln() + (1.0 - g) * (1.0 - p).ln()
        })
        .sum();
    let g = target.clone();
    p.tape().push(
        "bce_loss",
        Tensor::scalar(T::of(-total / n)),
        &[p],
        Box::new(move |ctx| {
            let up = ctx.grad[0].to_f64_lossy() / n;
            let out = ctx.inputs[0]
                .data()
                .iter()
                .zip(g.data())
                .map(|(p, g)| {
                    let p = p.to_f64_lossy();
                    if p < lo || p > hi {
                        return T::zero();
                    }
                    let g = g.to_f64_lossy();
                    T::of(-up * (g / p - (1.0 - g) / (1.0 - p)))
                })
                .collect();
            vec![Some(out)]
        }),
    )
}

/// `(dice + bce) / 2`.
pub fn combined_loss<'t, T: Scalar>(p: Var<'t, T>, target: &Tensor<T>, eps: f64) -> Result<Var<'t, T>> {
    dice_loss(p, target, eps)?.add(bce_loss(p, target)?)?.scale(0.5)
}
