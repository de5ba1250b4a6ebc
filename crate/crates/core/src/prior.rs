//! Classical tumor prior from FLAIR: Otsu threshold, largest connected
//! component, random seeds, then region growing around the seed mean.

use std::collections::VecDeque;

use log::warn;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{Grid, Mask, MultiModalVolume};

/// Growth threshold used when no labeled statistics are available.
pub const FALLBACK_DELTA: f64 = 35.0;

/// Voxel adjacency: shared faces (6) or any shared corner (26).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Face,
    Full,
}

impl Connectivity {
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let manhattan = dz.abs() + dy.abs() + dx.abs();
                    let keep = match self {
                        Connectivity::Face => manhattan == 1,
                        Connectivity::Full => manhattan > 0,
                    };
                    if keep {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(n: u8) -> Result<Self> {
        match n {
            6 => Ok(Connectivity::Face),
            26 => Ok(Connectivity::Full),
            other => Err(Error::InvalidArgument(format!(
                "connectivity must be 6 or 26, got {other}"
            ))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Face => 6,
            Connectivity::Full => 26,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub histogram_bins: usize,
    pub component_connectivity: Connectivity,
    pub growth_connectivity: Connectivity,
    pub n_seeds: usize,
    /// Largest accepted |intensity - seed mean| during growth.
    pub delta: f64,
    pub rng_seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            histogram_bins: 256,
            component_connectivity: Connectivity::Full,
            growth_connectivity: Connectivity::Face,
            n_seeds: 10,
            delta: FALLBACK_DELTA,
            rng_seed: 0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.histogram_bins < 2 {
            return Err(Error::InvalidArgument("histogram_bins must be >= 2".into()));
        }
        if self.n_seeds == 0 {
            return Err(Error::InvalidArgument("n_seeds must be >= 1".into()));
        }
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::InvalidArgument(format!("delta must be > 0, got {}", self.delta)));
        }
        Ok(())
    }
}

/// Threshold maximizing the between-class variance of the histogram of
/// nonzero voxels.
///
/// The histogram spans `[min, max]` of the nonzero voxels in `bins` equal
/// bins. Candidate thresholds are the interior bin edges; class means use the
/// exact voxel sums per bin. Ties keep the lowest edge.
pub fn otsu_threshold(flair: &Grid<f32>, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::InvalidArgument("otsu needs at least 2 bins".into()));
    }
    let values: Vec<f64> = flair
        .data()
        .iter()
        .filter(|&&v| v != 0.0)
        .map(|&v| v as f64)
        .collect();
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if values.is_empty() || !(hi > lo) {
        return Err(Error::Prior(
            "otsu: nonzero voxels hold fewer than two distinct intensities".into(),
        ));
    }
    let width = (hi - lo) / bins as f64;
    let mut count = vec![0.0f64; bins];
    let mut mass = vec![0.0f64; bins];
    for &v in &values {
        let b = histogram_bin(v, lo, width, bins);
        count[b] += 1.0;
        mass[b] += v;
    }
    let n = values.len() as f64;
    let total: f64 = mass.iter().sum();
    let (mut c0, mut m0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 1);
    for k in 1..bins {
        c0 += count[k - 1];
        m0 += mass[k - 1];
        let c1 = n - c0;
        if c0 == 0.0 || c1 == 0.0 {
            continue;
        }
        let (w0, w1) = (c0 / n, c1 / n);
        let diff = m0 / c0 - (total - m0) / c1;
        let between = w0 * w1 * diff * diff;
        if between > best.0 {
            best = (between, k);
        }
    }
    Ok(lo + best.1 as f64 * width)
}

/// Histogram bin of `v` for bins of `width` starting at `lo`.
pub fn histogram_bin(v: f64, lo: f64, width: f64, bins: usize) -> usize {
    (((v - lo) / width).floor() as usize).min(bins - 1)
}

fn neighbor(c: [usize; 3], off: [isize; 3], dims: [usize; 3]) -> Option<[usize; 3]> {
    let mut n = [0usize; 3];
    for a in 0..3 {
        let v = c[a] as isize + off[a];
        if v < 0 || v >= dims[a] as isize {
            return None;
        }
        n[a] = v as usize;
    }
    Some(n)
}

/// Keeps the connected component with the most voxels; on ties the one
/// whose first voxel comes earliest in scan order.
pub fn largest_component(mask: &Mask, connectivity: Connectivity) -> Mask {
    let dims = mask.dims();
    let offsets = connectivity.offsets();
    let mut visited = vec![false; mask.len()];
    let mut best: Vec<usize> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask.data()[start] || visited[start] {
            continue;
        }
        let mut members = vec![start];
        visited[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let c = mask.coord(i);
            for &off in &offsets {
                if let Some(n) = neighbor(c, off, dims) {
                    let j = mask.index(n);
                    if mask.data()[j] && !visited[j] {
                        visited[j] = true;
                        members.push(j);
                        queue.push_back(j);
                    }
                }
            }
        }
        if members.len() > best.len() {
            best = members;
        }
    }
    let mut out = Grid::filled(dims, false);
    for i in best {
        out.data_mut()[i] = true;
    }
    out
}

/// Up to `n` distinct component voxels drawn uniformly, returned in scan order.
pub fn select_seeds(component: &Mask, n: usize, rng_seed: u64) -> Result<Vec<[usize; 3]>> {
    let members: Vec<usize> = (0..component.len()).filter(|&i| component.data()[i]).collect();
    if members.is_empty() {
        return Err(Error::Prior("cannot pick seeds from an empty component".into()));
    }
    let mut picked: Vec<usize> = if members.len() <= n {
        members
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        sample(&mut rng, members.len(), n)
            .into_iter()
            .map(|k| members[k])
            .collect()
    };
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| component.coord(i)).collect())
}

/// Grows jointly from all seeds. A voxel joins when it neighbors the region
/// and `|I(v) - mean(I(seeds))| <= delta`; seeds are always included.
pub fn region_grow(flair: &Grid<f32>, seeds: &[[usize; 3]], delta: f64, connectivity: Connectivity) -> Result<Mask> {
    if seeds.is_empty() {
        return Err(Error::Prior("region growing needs at least one seed".into()));
    }
    if !(delta >= 0.0) {
        return Err(Error::InvalidArgument(format!("delta must be >= 0, got {delta}")));
    }
    let dims = flair.dims();
    if let Some(s) = seeds.iter().find(|s| (0..3).any(|a| s[a] >= dims[a])) {
        return Err(Error::InvalidArgument(format!(
            "seed {s:?} outside grid {dims:?}"
        )));
    }
    let mean = seeds.iter().map(|&s| *flair.get(s) as f64).sum::<f64>() / seeds.len() as f64;
    let accept = |v: f32| (v as f64 - mean).abs() <= delta;
    let offsets = connectivity.offsets();
    let mut region = Grid::filled(dims, false);
    let mut queue = VecDeque::new();
    for &s in seeds {
        if !*region.get(s) {
            region.set(s, true);
            queue.push_back(s);
        }
    }
    while let Some(c) = queue.pop_front() {
        for &off in &offsets {
            if let Some(n) = neighbor(c, off, dims) {
                if !*region.get(n) && accept(*flair.get(n)) {
                    region.set(n, true);
                    queue.push_back(n);
                }
            }
        }
    }
    Ok(region)
}

/// Spread of FLAIR intensities inside labeled tumors across cases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TumorStdStats {
    pub per_case: Vec<f64>,
    pub min: f64,
    pub max: f64,
    /// Lower of the two central values for an even count.
    pub median: f64,
}

/// Population standard deviation of FLAIR over tumor voxels (label != 0),
/// per case. Cases with fewer than two tumor voxels are skipped.
pub fn tumor_std_stats<'a>(cases: impl IntoIterator<Item = (&'a Grid<f32>, &'a Grid<u8>)>) -> Result<TumorStdStats> {
    let mut per_case = Vec::new();
    for (k, (flair, labels)) in cases.into_iter().enumerate() {
        if flair.dims() != labels.dims() {
            return Err(Error::Shape(format!(
                "case {k}: flair {:?} vs labels {:?}",
                flair.dims(),
                labels.dims()
            )));
        }
        let vals: Vec<f64> = flair
            .data()
            .iter()
            .zip(labels.data())
            .filter(|(_, &l)| l != 0)
            .map(|(&v, _)| v as f64)
            .collect();
        if vals.len() < 2 {
            warn!("case {k}: {} tumor voxels, skipped", vals.len());
            continue;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        per_case.push(var.sqrt());
    }
    if per_case.is_empty() {
        return Err(Error::Prior("no case has at least two tumor voxels".into()));
    }
    let mut sorted = per_case.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(TumorStdStats {
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        median: sorted[(sorted.len() - 1) / 2],
        per_case,
    })
}

/// Full pipeline; any failure is returned as an error.
pub fn try_generate_prior(flair: &Grid<f32>, config: &PriorConfig) -> Result<Mask> {
    config.validate()?;
    let t = otsu_threshold(flair, config.histogram_bins)?;
    let candidates = flair.map(|&v| v != 0.0 && v as f64 >= t);
    let component = largest_component(&candidates, config.component_connectivity);
    let seeds = select_seeds(&component, config.n_seeds, config.rng_seed)?;
    region_grow(flair, &seeds, config.delta, config.growth_connectivity)
}

/// Full pipeline, degrading to an empty mask (with a warning) when a stage
/// fails, e.g. for a blank FLAIR volume.
pub fn generate_prior(flair: &Grid<f32>, config: &PriorConfig) -> Mask {
    try_generate_prior(flair, config).unwrap_or_else(|e| {
        warn!("prior generation fell back to an empty mask: {e}");
        Grid::filled(flair.dims(), false)
    })
}

/// Z-scores `grid` over its nonzero voxels; zero voxels stay zero.
pub fn zscore_nonzero(grid: &Grid<f32>) -> Vec<f32> {
    let vals: Vec<f64> = grid
        .data()
        .iter()
        .filter(|&&v| v != 0.0)
        .map(|&v| v as f64)
        .collect();
    if vals.is_empty() {
        return vec![0.0; grid.len()];
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
    let std = if std > 1e-12 { std } else { 1.0 };
    grid.data()
        .iter()
        .map(|&v| if v == 0.0 { 0.0 } else { ((v as f64 - mean) / std) as f32 })
        .collect()
}

/// Network input `[1, C, D, H, W]`: the four z-scored modalities followed by
/// the prior (when given) as 0/1.
pub fn build_input(volume: &MultiModalVolume, prior: Option<&Mask>) -> Result<Tensor<f32>> {
    let dims = volume.dims();
    if let Some(p) = prior {
        if p.dims() != dims {
            return Err(Error::Shape(format!(
                "prior {:?} vs volume {dims:?}",
                p.dims()
            )));
        }
    }
    let channels = 4 + prior.is_some() as usize;
    let mut data = Vec::with_capacity(channels * volume.flair().len());
    for m in &volume.modalities {
        data.extend(zscore_nonzero(m));
    }
    if let Some(p) = prior {
        data.extend(p.data().iter().map(|&b| b as u8 as f32));
    }
    Tensor::new(vec![1, channels, dims[0], dims[1], dims[2]], data)
}
