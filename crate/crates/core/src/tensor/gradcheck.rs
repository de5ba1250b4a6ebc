//! Central-difference verification of tape gradients (64-bit only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOpts {
    /// Finite-difference step.
    pub h: f64,
    /// Inputs with more elements than this are checked on a random subset of
    /// this many coordinates.
    pub max_coords: usize,
    /// When set, at most this many coordinates are checked over all inputs
    /// combined, drawn uniformly after the per-input subsampling.
    pub max_total: Option<usize>,
    pub seed: u64,
    /// Coordinates above this relative error are screened for a kink (see
    /// [`GradCheckReport::nonsmooth`]).
    pub tolerance: f64,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_coords: 1000,
            max_total: None,
            seed: 0,
            tolerance: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// (input index, flat coordinate, analytic, numeric) at the worst error.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Coordinates excluded from `max_rel_error` because the analytic
    /// gradient jumps inside `[x - h, x + h]` (a ReLU or max-pool switch),
    /// as `(input index, flat coordinate)`. A wrong analytic formula that is
    /// smooth in `x` is never excluded.
    pub nonsmooth: Vec<(usize, usize)>,
}

/// Denominator floor of [`rel_error`]. A 64-bit central difference with
/// `h = 1e-5` resolves derivatives to roughly `1e-10` absolute, so gradients
/// smaller than this are compared on an absolute scale instead.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Checks `f` against a single input; see [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, opts: GradCheckOpts) -> Result<GradCheckReport>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>> + Sync,
{
    grad_check_many(|xs| f(xs[0]), std::slice::from_ref(x), opts)
}

fn analytic_grads<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&vars)?;
    if loss.value().numel() != 1 {
        return Err(Error::Backward(format!(
            "gradient check needs a scalar function, got shape {:?}",
            loss.shape()
        )));
    }
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().map_or_else(|| vec![0.0; t.numel()], |g| g.to_vec()))
        .collect())
}

fn shift(inputs: &[Tensor<f64>], i: usize, j: usize, delta: f64) -> Result<Vec<Tensor<f64>>> {
    let mut buf = inputs[i].to_vec();
    buf[j] += delta;
    let mut xs = inputs.to_vec();
    xs[i] = Tensor::new(inputs[i].shape().to_vec(), buf)?;
    Ok(xs)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    f(&vars)?.value().item()
}

/// Compares backward's gradient of the scalar `f` with respect to every
/// input against central differences `(f(x+h) - f(x-h)) / 2h`, returning
/// the largest relative error.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOpts) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>> + Sync,
{
    let analytic = analytic_grads(&f, inputs)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        if t.numel() <= opts.max_coords {
            coords.extend((0..t.numel()).map(|j| (i, j)));
        } else {
            let mut picked = sample(&mut rng, t.numel(), opts.max_coords).into_vec();
            picked.sort_unstable();
            coords.extend(picked.into_iter().map(|j| (i, j)));
        }
    }

    if let Some(total) = opts.max_total {
        if coords.len() > total {
            let mut picked = sample(&mut rng, coords.len(), total).into_vec();
            picked.sort_unstable();
            coords = picked.into_iter().map(|k| coords[k]).collect();
        }
    }

    // (i, j, analytic, numeric, nonsmooth)
    let results: Vec<(usize, usize, f64, f64, bool)> = coords
        .par_iter()
        .map(|&(i, j)| {
            let at = |delta: f64| eval_scalar(&f, &shift(inputs, i, j, delta)?);
            let a = analytic[i][j];
            let numeric = (at(opts.h)? - at(-opts.h)?) / (2.0 * opts.h);
            if rel_error(a, numeric) < opts.tolerance {
                return Ok((i, j, a, numeric, false));
            }
            // A kink at distance s < h with gradient jump J moves the central
            // difference by at most J/2 but puts all of J into the second
            // difference of the analytic gradient. A smooth but wrong
            // gradient has an O(h^2) second difference and is not excused.
            let plus = analytic_grads(&f, &shift(inputs, i, j, opts.h)?)?[i][j];
            let minus = analytic_grads(&f, &shift(inputs, i, j, -opts.h)?)?[i][j];
            let second = (plus - 2.0 * a + minus).abs();
            let kink = second >= (a - numeric).abs() && second >= opts.tolerance * a.abs().max(REL_ERROR_FLOOR);
            Ok((i, j, a, numeric, kink))
        })
        .collect::<Result<_>>()?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: results.len(),
        worst: None,
        nonsmooth: Vec::new(),
    };
    for (i, j, a, n, kink) in results {
        if kink {
            report.nonsmooth.push((i, j));
            continue;
        }
        let e = rel_error(a, n);
        if report.worst.is_none() || e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst = Some((i, j, a, n));
        }
    }
    Ok(report)
}
