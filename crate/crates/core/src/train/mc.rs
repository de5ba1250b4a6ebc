use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{compose_regions, MetricReport, RegionMasks};
use crate::net::Network;
use crate::seed::derive_seed;
use crate::tensor::{DropoutMode, Tensor};
use crate::volume::{Grid, Mask};

pub const DEFAULT_MC_PASSES: usize = 20;
pub const MASK_THRESHOLD: f32 = 0.5;

/// Aggregate of stochastic forward passes for one case.
#[derive(Clone, Debug, PartialEq)]
pub struct McResult {
    /// Per-voxel mean probability, `[3, D, H, W]` in (ET, WT, TC) order.
    pub mean: Tensor<f32>,
    /// Per-voxel population variance across passes, same layout.
    pub variance: Tensor<f32>,
    /// `mean >= 0.5` per region.
    pub masks: RegionMasks,
    pub n_passes: usize,
}

impl McResult {
    pub fn dims(&self) -> [usize; 3] {
        self.masks.wt.dims()
    }
}

/// Runs `n_passes` forwards with dropout sampling (pass `k` seeded by
/// `derive_seed(seed, k)`) and reduces them in pass order. With `use_mc`
/// false a single pass with dropout off is used.
pub fn mc_infer(net: &Network<f32>, input: &Tensor<f32>, n_passes: usize, seed: u64, use_mc: bool) -> Result<McResult> {
    if n_passes == 0 {
        return Err(Error::InvalidArgument("n_passes must be >= 1".into()));
    }
    let shape = input.shape();
    if shape.len() != 5 || shape[0] != 1 {
        return Err(Error::Shape(format!("inference expects [1, C, D, H, W], got {shape:?}")));
    }
    let (n_passes, mode) = if use_mc {
        (n_passes, DropoutMode::McActive)
    } else {
        (1, DropoutMode::Off)
    };
    let passes: Vec<Tensor<f32>> = (0..n_passes)
        .into_par_iter()
        .map(|k| net.predict(input, mode, derive_seed(seed, k as u64)))
        .collect::<Result<_>>()?;

    let out_shape = passes[0].shape().to_vec();
    let len = passes[0].numel();
    let mut sum = vec![0.0f64; len];
    for p in &passes {
        for (s, &v) in sum.iter_mut().zip(p.data()) {
            *s += v as f64;
        }
    }
    let n = n_passes as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mut var = vec![0.0f64; len];
    for p in &passes {
        for ((acc, &v), &m) in var.iter_mut().zip(p.data()).zip(&mean) {
            *acc += (v as f64 - m).powi(2);
        }
    }
    let variance: Vec<f32> = var.iter().map(|s| (s / n) as f32).collect();
    let mean: Vec<f32> = mean.iter().map(|&m| m as f32).collect();

    let dims = [out_shape[2], out_shape[3], out_shape[4]];
    let voxels = dims.iter().product::<usize>();
    let channels = out_shape[1];
    if channels != 3 {
        return Err(Error::Shape(format!("expected 3 region channels, got {channels}")));
    }
    let mask = |c: usize| -> Result<Mask> {
        Grid::new(
            dims,
            mean[c * voxels..(c + 1) * voxels].iter().map(|&v| v >= MASK_THRESHOLD).collect(),
        )
    };
    let masks = RegionMasks::from_channels([mask(0)?, mask(1)?, mask(2)?])?;
    let tensor_shape = vec![channels, dims[0], dims[1], dims[2]];
    Ok(McResult {
        mean: Tensor::new(tensor_shape.clone(), mean)?,
        variance: Tensor::new(tensor_shape, variance)?,
        masks,
        n_passes,
    })
}

/// Dice and Hausdorff distance of the predicted masks against a label map.
pub fn evaluate_case(mc: &McResult, gt_labels: &Grid<u8>, spacing: [f64; 3]) -> Result<MetricReport> {
    if gt_labels.dims() != mc.dims() {
        return Err(Error::Shape(format!(
            "labels {:?} vs prediction {:?}",
            gt_labels.dims(),
            mc.dims()
        )));
    }
    MetricReport::compare(&mc.masks, &compose_regions(gt_labels)?, spacing)
}
