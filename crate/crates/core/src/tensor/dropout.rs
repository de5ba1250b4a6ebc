use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::BackwardCtx;
use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Whether dropout layers sample masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DropoutMode {
    /// Training: masks are sampled.
    Train,
    /// Inference with dropout kept active for Monte-Carlo sampling.
    McActive,
    /// Identity map.
    Off,
}

impl DropoutMode {
    pub fn is_active(self) -> bool {
        !matches!(self, DropoutMode::Off)
    }
}

/// Inverted-dropout multipliers: `0` with probability `rate`, otherwise
/// `1 / (1 - rate)`. Deterministic in `seed`.
pub fn dropout_mask<T: Scalar>(len: usize, rate: f64, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = T::of(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn dropout(self, rate: f64, mode: DropoutMode, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !mode.is_active() || rate == 0.0 {
            return Ok(self);
        }
        let xv = self.value();
        let mask = dropout_mask::<T>(xv.numel(), rate, seed);
        let out: Vec<T> = xv.data().iter().zip(&mask).map(|(x, m)| *x * *m).collect();
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        self.tape.push(
            "dropout",
            out,
            &[self],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                vec![Some(ctx.grad.iter().zip(&mask).map(|(g, m)| *g * *m).collect())]
            }),
        )
    }
}
