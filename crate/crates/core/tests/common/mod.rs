//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use upmad::cli::dispatch;
use upmad::prior::Connectivity;
use upmad::volume::{Grid, Mask};

/// Scans every interior bin edge directly over the voxels.
pub fn otsu_oracle(values: &[f32], bins: usize) -> f64 {
    let nz: Vec<f64> = values.iter().filter(|&&v| v != 0.0).map(|&v| v as f64).collect();
    let lo = nz.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = nz.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut best = (f64::NEG_INFINITY, 1usize);
    for k in 1..bins {
        let t = lo + k as f64 * width;
        let (below, above): (Vec<f64>, Vec<f64>) = nz.iter().partition(|&&v| v < t);
        if below.is_empty() || above.is_empty() {
            continue;
        }
        let n = nz.len() as f64;
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let var = (below.len() as f64 / n) * (above.len() as f64 / n) * (mean(&below) - mean(&above)).powi(2);
        if var > best.0 * (1.0 + 1e-12) {
            best = (var, k);
        }
    }
    lo + best.1 as f64 * width
}

/// Union-find labeling, independent of the breadth-first search used by the
/// library.
pub fn component_sizes_oracle(mask: &Mask, conn: Connectivity) -> (Vec<usize>, Vec<usize>) {
    let n = mask.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let dims = mask.dims();
    for i in 0..n {
        if !mask.data()[i] {
            continue;
        }
        let c = mask.coord(i);
        for off in conn.offsets() {
            let nb: Option<[usize; 3]> = (0..3)
                .map(|a| {
                    let v = c[a] as isize + off[a];
                    (v >= 0 && (v as usize) < dims[a]).then_some(v as usize)
                })
                .collect::<Option<Vec<_>>>()
                .map(|v| [v[0], v[1], v[2]]);
            if let Some(nb) = nb {
                let j = mask.index(nb);
                if mask.data()[j] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    let mut size = vec![0usize; n];
    for i in 0..n {
        if mask.data()[i] {
            size[roots[i]] += 1;
        }
    }
    (roots, size)
}

/// Fixed-point sweeps until nothing changes.
pub fn grow_oracle(flair: &Grid<f32>, seeds: &[[usize; 3]], delta: f64, conn: Connectivity) -> Mask {
    let mean = seeds.iter().map(|&s| *flair.get(s) as f64).sum::<f64>() / seeds.len() as f64;
    let mut region = Grid::filled(flair.dims(), false);
    for &s in seeds {
        region.set(s, true);
    }
    let dims = flair.dims();
    loop {
        let mut changed = false;
        for i in 0..region.len() {
            if region.data()[i] || (flair.data()[i] as f64 - mean).abs() > delta {
                continue;
            }
            let c = region.coord(i);
            let touches = conn.offsets().iter().any(|off| {
                let n: Vec<isize> = (0..3).map(|a| c[a] as isize + off[a]).collect();
                (0..3).all(|a| n[a] >= 0 && (n[a] as usize) < dims[a])
                    && *region.get([n[0] as usize, n[1] as usize, n[2] as usize])
            });
            if touches {
                region.data_mut()[i] = true;
                changed = true;
            }
        }
        if !changed {
            return region;
        }
    }
}

pub fn dice_oracle(a: &Mask, b: &Mask) -> f64 {
    let both = a.data().iter().zip(b.data()).filter(|(x, y)| **x && **y).count();
    let sum = a.data().iter().filter(|x| **x).count() + b.data().iter().filter(|x| **x).count();
    2.0 * both as f64 / sum as f64
}

/// Boundary by definition: a mask voxel with at least one of its six face
/// neighbors off the mask or off the grid.
pub fn boundary_oracle(m: &Mask) -> Vec<[i64; 3]> {
    let [d, h, w] = m.dims().map(|v| v as i64);
    let on = |z: i64, y: i64, x: i64| {
        z >= 0 && y >= 0 && x >= 0 && z < d && y < h && x < w && *m.get([z as usize, y as usize, x as usize])
    };
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if on(z, y, x)
                    && !(on(z - 1, y, x) && on(z + 1, y, x) && on(z, y - 1, x) && on(z, y + 1, x) && on(z, y, x - 1) && on(z, y, x + 1))
                {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

pub fn hd_oracle(a: &Mask, b: &Mask, s: [f64; 3]) -> f64 {
    let (pa, pb) = (boundary_oracle(a), boundary_oracle(b));
    let d = |p: [i64; 3], q: [i64; 3]| {
        (0..3).map(|k| ((p[k] - q[k]) as f64 * s[k]).powi(2)).sum::<f64>()
    };
    let directed = |from: &[[i64; 3]], to: &[[i64; 3]]| {
        from.iter().map(|&p| to.iter().map(|&q| d(p, q)).fold(f64::INFINITY, f64::min)).fold(0.0, f64::max)
    };
    directed(&pa, &pb).max(directed(&pb, &pa)).sqrt()
}

/// Noisy ellipsoid, so boundaries stay small enough for the quadratic oracle.
pub fn blob(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Mask {
    let c: [f64; 3] = std::array::from_fn(|a| rng.random_range(0.0..dims[a] as f64));
    let r: [f64; 3] = std::array::from_fn(|a| rng.random_range(1.0..dims[a] as f64 / 2.0 + 1.0));
    let mut m = Grid::from_fn(dims, |p| {
        (0..3).map(|a| ((p[a] as f64 - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0 || rng.random_bool(0.002)
    });
    if m.count() == 0 {
        m.set(dims.map(|n| n / 2), true);
    }
    m
}

/// Runs the command line in-process and returns its exit code.
pub fn run(args: &[&str]) -> i32 {
    dispatch(std::iter::once("upmad").chain(args.iter().copied()))
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Trains and infers in `root`; returns the bytes of every produced artifact.
pub fn pipeline(root: &Path) -> Vec<(String, Vec<u8>)> {
    let data = root.join("data");
    let model = root.join("model");
    let pred = root.join("pred");
    assert_eq!(run(&["--seed", "7", "phantom", "--cases", "3", "--dims", "8", "16", "16", "--out", p(&data)]), 0);
    let train = [
        "--seed", "7", "--deterministic", "train", "--data", p(&data), "--out", p(&model), "--epochs", "2", "--lr",
        "1e-3", "--widths", "4", "4", "8", "8", "--gn-groups", "2",
    ];
    assert_eq!(run(&train), 0);
    let (img, lbl) = (data.join("case_2_img.sg3d"), data.join("case_2_lbl.sg3d"));
    let infer = [
        "--seed", "7", "--deterministic", "infer", "--model", p(&model), "--input", p(&img), "--labels", p(&lbl),
        "--out", p(&pred), "--passes", "4",
    ];
    assert_eq!(run(&infer), 0);
    [
        model.join("model.sgck"),
        model.join("history.csv"),
        model.join("split.json"),
        pred.join("mean.sg3d"),
        pred.join("variance.sg3d"),
        pred.join("prediction.sg3d"),
        pred.join("mean_wt.pgm"),
        pred.join("variance_wt.pgm"),
        pred.join("metrics.txt"),
    ]
    .into_iter()
    .map(|f| (f.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&f).unwrap()))
    .collect()
}
