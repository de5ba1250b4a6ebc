//! Synthetic four-modality phantoms with nested ellipsoidal tumors, and
//! dataset splitting.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::volume::{label, read_u8_grid, read_volume, write_u8_grid, write_volume, Grid, MultiModalVolume};

/// Tissue classes, indexing rows of the intensity table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tissue {
    Background = 0,
    Brain = 1,
    Edema = 2,
    Necrosis = 3,
    Enhancing = 4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// `[D, H, W]`.
    pub dims: [usize; 3],
    pub n_cases: usize,
    pub rng_seed: u64,
    /// Whole-tumor semi-axes as a fraction of each dimension, drawn per case.
    pub tumor_radius: (f64, f64),
    /// Tumor-core semi-axes relative to the whole tumor.
    pub core_ratio: f64,
    /// Enhancing-core semi-axes relative to the whole tumor.
    pub enhancing_ratio: f64,
    /// Brain semi-axes as a fraction of each dimension.
    pub brain_radius: f64,
    /// Gaussian noise added inside the brain; background stays exactly 0.
    pub noise_sigma: f64,
    /// Mean intensity per tissue (rows in [`Tissue`] order) and modality
    /// (FLAIR, T1ce, T1, T2).
    pub intensities: [[f64; 4]; 5],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [32, 32, 16],
            n_cases: 10,
            rng_seed: 0,
            tumor_radius: (0.2, 0.26),
            core_ratio: 0.72,
            enhancing_ratio: 0.45,
            brain_radius: 0.45,
            noise_sigma: 6.0,
            intensities: [
                [0.0, 0.0, 0.0, 0.0],
                [100.0, 100.0, 100.0, 100.0],
                [320.0, 120.0, 90.0, 300.0],
                [310.0, 50.0, 50.0, 270.0],
                [330.0, 300.0, 110.0, 230.0],
            ],
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let [d, h, w] = self.dims;
        if h < 16 || w < 16 || d < 8 {
            return Err(Error::Phantom(format!(
                "dims {:?} too small (need H, W >= 16 and D >= 8)",
                self.dims
            )));
        }
        let (lo, hi) = self.tumor_radius;
        if !(0.0 < lo && lo <= hi && hi < self.brain_radius) {
            return Err(Error::Phantom(format!(
                "tumor radius range {:?} must lie in (0, brain radius {})",
                self.tumor_radius, self.brain_radius
            )));
        }
        if !(0.0 < self.enhancing_ratio && self.enhancing_ratio < self.core_ratio && self.core_ratio < 1.0) {
            return Err(Error::Phantom(
                "need 0 < enhancing ratio < core ratio < 1".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Phantom("noise sigma must be >= 0".into()));
        }
        let flair = |t: Tissue| self.intensities[t as usize][0];
        let brain = flair(Tissue::Brain);
        if !(brain > 0.0) || [Tissue::Edema, Tissue::Necrosis, Tissue::Enhancing].iter().any(|&t| flair(t) <= brain) {
            return Err(Error::Phantom(
                "FLAIR intensities must satisfy tumor > brain > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Stream seed for one case, so cases can be generated independently.
pub fn case_seed(root: u64, case_index: usize) -> u64 {
    derive_seed(root, case_index as u64)
}

fn inside(c: [usize; 3], center: [f64; 3], radii: [f64; 3]) -> bool {
    (0..3)
        .map(|a| ((c[a] as f64 - center[a]) / radii[a]).powi(2))
        .sum::<f64>()
        <= 1.0
}

/// Generates case `case_index`; the result depends only on
/// `(spec, case_index)`.
pub fn gen_phantom(spec: &PhantomSpec, case_index: usize) -> Result<MultiModalVolume> {
    spec.validate()?;
    let dims = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(case_seed(spec.rng_seed, case_index));
    let brain_center = dims.map(|n| (n as f64 - 1.0) / 2.0);
    let brain_radii = dims.map(|n| n as f64 * spec.brain_radius);
    let brain = Grid::from_fn(dims, |c| inside(c, brain_center, brain_radii));

    let frac = rng.random_range(spec.tumor_radius.0..=spec.tumor_radius.1);
    let wt_radii = dims.map(|n| n as f64 * frac);
    let mut center = None;
    for _ in 0..100 {
        let c: [f64; 3] = std::array::from_fn(|a| {
            let margin = wt_radii[a];
            let lo = brain_center[a] - brain_radii[a] + margin;
            let hi = brain_center[a] + brain_radii[a] - margin;
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                brain_center[a]
            }
        });
        let fits = brain
            .data()
            .iter()
            .enumerate()
            .all(|(i, &b)| b || !inside(brain.coord(i), c, wt_radii));
        if fits {
            center = Some(c);
            break;
        }
    }
    let center = center.ok_or_else(|| {
        Error::Phantom(format!(
            "case {case_index}: tumor did not fit inside the brain after 100 tries"
        ))
    })?;
    let tc_radii = wt_radii.map(|r| r * spec.core_ratio);
    let et_radii = wt_radii.map(|r| r * spec.enhancing_ratio);

    let tissue = Grid::from_fn(dims, |c| {
        if inside(c, center, et_radii) {
            Tissue::Enhancing
        } else if inside(c, center, tc_radii) {
            Tissue::Necrosis
        } else if inside(c, center, wt_radii) {
            Tissue::Edema
        } else if *brain.get(c) {
            Tissue::Brain
        } else {
            Tissue::Background
        }
    });
    let labels = tissue.map(|t| match t {
        Tissue::Enhancing => label::ENHANCING,
        Tissue::Necrosis => label::NECROSIS,
        Tissue::Edema => label::EDEMA,
        Tissue::Brain | Tissue::Background => label::BACKGROUND,
    });

    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Phantom(e.to_string()))?;
    let modalities: [Grid<f32>; 4] = std::array::from_fn(|m| {
        let data = tissue
            .data()
            .iter()
            .map(|&t| {
                if t == Tissue::Background {
                    return 0.0;
                }
                let mean = spec.intensities[t as usize][m];
                let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                // keep brain voxels strictly nonzero so they stay in the foreground
                ((mean + n).max(1.0)) as f32
            })
            .collect();
        Grid::new(dims, data).expect("dims match the tissue grid")
    });
    MultiModalVolume::new(modalities, Some(labels))
}

/// Shuffles `case_ids` by `seed`, then cuts contiguous train/val/test runs
/// sized by largest-remainder rounding of `ratios`.
pub fn split_dataset(case_ids: &[usize], ratios: (u32, u32, u32), seed: u64) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let n = case_ids.len();
    if n < 10 {
        return Err(Error::InvalidArgument(format!(
            "splitting needs at least 10 cases, got {n}"
        )));
    }
    let r = [ratios.0, ratios.1, ratios.2];
    let total: u32 = r.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("split ratios sum to zero".into()));
    }
    let mut sizes = r.map(|x| n * x as usize / total as usize);
    let mut rest: Vec<(usize, usize)> = r
        .iter()
        .enumerate()
        .map(|(i, &x)| (n * x as usize % total as usize, i))
        .collect();
    // largest remainder first, earlier split on ties
    rest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = n - sizes.iter().sum::<usize>();
    for &(_, i) in rest.iter().take(missing) {
        sizes[i] += 1;
    }
    let mut ids = case_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val_start = sizes[0];
    let test_start = sizes[0] + sizes[1];
    Ok((
        ids[..val_start].to_vec(),
        ids[val_start..test_start].to_vec(),
        ids[test_start..].to_vec(),
    ))
}

/// `(image, labels)` paths of case `k` under `dir`.
pub fn case_paths(dir: &Path, k: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("case_{k}_img.sg3d")),
        dir.join(format!("case_{k}_lbl.sg3d")),
    )
}

pub fn write_case(dir: &Path, k: usize, volume: &MultiModalVolume) -> Result<()> {
    let (img, lbl) = case_paths(dir, k);
    let (h, p) = volume.image_payload();
    write_volume(img, &h, &p)?;
    if let Some(l) = &volume.labels {
        write_u8_grid(lbl, l)?;
    }
    Ok(())
}

/// Reads an image file and, if present, its label file.
pub fn read_case_files(img: &Path, lbl: Option<&Path>) -> Result<MultiModalVolume> {
    let (h, p) = read_volume(img)?;
    let labels = lbl.map(read_u8_grid).transpose()?;
    MultiModalVolume::from_payload(&h, &p, labels)
}

pub fn read_case(dir: &Path, k: usize) -> Result<MultiModalVolume> {
    let (img, lbl) = case_paths(dir, k);
    read_case_files(&img, lbl.exists().then_some(lbl.as_path()))
}

/// Indices `k` of every `case_<k>_img.sg3d` in `dir`, ascending.
pub fn list_cases(dir: &Path) -> Result<Vec<usize>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(k) = name
            .strip_prefix("case_")
            .and_then(|s| s.strip_suffix("_img.sg3d"))
            .and_then(|s| s.parse().ok())
        {
            ids.push(k);
        }
    }
    ids.sort_unstable();
    Ok(ids)
}
