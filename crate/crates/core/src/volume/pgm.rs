use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::Grid;
use crate::error::{Error, Result};

/// Orientation of an exported slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SliceAxis {
    /// Fixed depth; image is H rows by W columns.
    Axial,
    /// Fixed height; image is D rows by W columns.
    Coronal,
    /// Fixed width; image is D rows by H columns.
    Sagittal,
}

impl FromStr for SliceAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(SliceAxis::Axial),
            "coronal" => Ok(SliceAxis::Coronal),
            "sagittal" => Ok(SliceAxis::Sagittal),
            other => Err(Error::InvalidArgument(format!("unknown slice axis `{other}`"))),
        }
    }
}

/// Maps `v` to `round(255 * clamp((v - lo) / (hi - lo), 0, 1))`.
fn gray(v: f32, lo: f64, hi: f64) -> u8 {
    let t = ((v as f64 - lo) / (hi - lo)).clamp(0.0, 1.0);
    (255.0 * t).round() as u8
}

/// Binary PGM (P5, maxval 255) bytes of one slice.
pub fn encode_slice_pgm(grid: &Grid<f32>, axis: SliceAxis, index: usize, (lo, hi): (f64, f64)) -> Result<Vec<u8>> {
    if !(lo < hi) {
        return Err(Error::InvalidArgument(format!("empty intensity range ({lo}, {hi})")));
    }
    let [d, h, w] = grid.dims();
    let (limit, rows, cols) = match axis {
        SliceAxis::Axial => (d, h, w),
        SliceAxis::Coronal => (h, d, w),
        SliceAxis::Sagittal => (w, d, h),
    };
    if index >= limit {
        return Err(Error::InvalidArgument(format!(
            "slice index {index} out of bounds for {axis:?} extent {limit}"
        )));
    }
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for r in 0..rows {
        for c in 0..cols {
            let at = match axis {
                SliceAxis::Axial => [index, r, c],
                SliceAxis::Coronal => [r, index, c],
                SliceAxis::Sagittal => [r, c, index],
            };
            out.push(gray(*grid.get(at), lo, hi));
        }
    }
    Ok(out)
}

pub fn export_slice_pgm(
    grid: &Grid<f32>,
    axis: SliceAxis,
    index: usize,
    range: (f64, f64),
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_slice_pgm(grid, axis, index, range)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
