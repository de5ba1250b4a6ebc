//! Region composition, Dice overlap and boundary Hausdorff distance.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{label, Grid, Mask};

/// Enhancing tumor, whole tumor and tumor core masks.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMasks {
    pub et: Mask,
    pub wt: Mask,
    pub tc: Mask,
}

/// Names in channel order of the network head.
pub const REGION_NAMES: [&str; 3] = ["et", "wt", "tc"];

impl RegionMasks {
    /// Masks in channel order `[et, wt, tc]`.
    pub fn channels(&self) -> [&Mask; 3] {
        [&self.et, &self.wt, &self.tc]
    }

    pub fn from_channels([et, wt, tc]: [Mask; 3]) -> Result<Self> {
        if et.dims() != wt.dims() || wt.dims() != tc.dims() {
            return Err(Error::Shape("region masks differ in dims".into()));
        }
        Ok(Self { et, wt, tc })
    }

    /// Collapses nested masks back to label codes (enhancing wins over
    /// necrosis wins over edema).
    pub fn to_labels(&self) -> Grid<u8> {
        Grid::from_fn(self.wt.dims(), |c| {
            if *self.et.get(c) {
                label::ENHANCING
            } else if *self.tc.get(c) {
                label::NECROSIS
            } else if *self.wt.get(c) {
                label::EDEMA
            } else {
                label::BACKGROUND
            }
        })
    }
}

/// ET = {4}, TC = {1, 4}, WT = {1, 2, 4}.
pub fn compose_regions(labels: &Grid<u8>) -> Result<RegionMasks> {
    if let Some(bad) = labels.data().iter().find(|&&c| !label::is_valid(c)) {
        return Err(Error::InvalidArgument(format!("unknown label code {bad}")));
    }
    Ok(RegionMasks {
        et: labels.map(|&c| c == label::ENHANCING),
        wt: labels.map(|&c| c != label::BACKGROUND),
        tc: labels.map(|&c| c == label::NECROSIS || c == label::ENHANCING),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiceScore {
    pub value: f64,
    /// Both masks were empty; `value` is then 1 by convention.
    pub both_empty: bool,
}

/// `2 |A ∩ B| / (|A| + |B|)`.
pub fn dice_score(a: &Mask, b: &Mask) -> Result<DiceScore> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("dice: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    }
    Ok(if total == 0 {
        DiceScore {
            value: 1.0,
            both_empty: true,
        }
    } else {
        DiceScore {
            value: 2.0 * inter as f64 / total as f64,
            both_empty: false,
        }
    })
}

const FACE_NEIGHBORS: [[isize; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

/// Mask voxels with a face neighbor outside the mask or outside the grid,
/// in scan order.
pub fn extract_boundary(mask: &Mask) -> Vec<[usize; 3]> {
    let dims = mask.dims();
    let mut out = Vec::new();
    for (i, &on) in mask.data().iter().enumerate() {
        if !on {
            continue;
        }
        let c = mask.coord(i);
        let exposed = FACE_NEIGHBORS.iter().any(|off| {
            let mut n = [0usize; 3];
            for a in 0..3 {
                let v = c[a] as isize + off[a];
                if v < 0 || v >= dims[a] as isize {
                    return true;
                }
                n[a] = v as usize;
            }
            !*mask.get(n)
        });
        if exposed {
            out.push(c);
        }
    }
    out
}

#[inline]
fn dist2(p: [usize; 3], q: [usize; 3], s: [f64; 3]) -> f64 {
    let dz = (p[0] as f64 - q[0] as f64) * s[0];
    let dy = (p[1] as f64 - q[1] as f64) * s[1];
    let dx = (p[2] as f64 - q[2] as f64) * s[2];
    dz * dz + dy * dy + dx * dx
}

fn boundaries(pred: &Mask, gt: &Mask, spacing: [f64; 3]) -> Result<(Vec<[usize; 3]>, Vec<[usize; 3]>)> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "hausdorff: {:?} vs {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("bad voxel spacing {spacing:?}")));
    }
    let p = extract_boundary(pred);
    let g = extract_boundary(gt);
    if p.is_empty() || g.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "hausdorff needs two non-empty masks (prediction {} voxels, reference {} voxels)",
            pred.count(),
            gt.count()
        )));
    }
    Ok((p, g))
}

/// Reference implementation comparing every boundary pair.
pub fn hausdorff_brute_force(pred: &Mask, gt: &Mask, spacing: [f64; 3]) -> Result<f64> {
    let (p, g) = boundaries(pred, gt, spacing)?;
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        from.iter()
            .map(|&a| to.iter().map(|&b| dist2(a, b, spacing)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    Ok(directed(&p, &g).max(directed(&g, &p)).sqrt())
}

/// Boundary points bucketed into cubic cells for nearest-neighbor search.
struct CellIndex {
    cell: usize,
    cells: [usize; 3],
    buckets: Vec<Vec<[usize; 3]>>,
}

impl CellIndex {
    fn new(points: &[[usize; 3]], dims: [usize; 3], cell: usize) -> Self {
        let cells = dims.map(|n| n.div_ceil(cell));
        let mut buckets = vec![Vec::new(); cells.iter().product()];
        for &p in points {
            let c = p.map(|v| v / cell);
            buckets[(c[0] * cells[1] + c[1]) * cells[2] + c[2]].push(p);
        }
        Self { cell, cells, buckets }
    }

    /// Exact squared distance from `q` to the nearest indexed point.
    fn nearest2(&self, q: [usize; 3], spacing: [f64; 3]) -> f64 {
        let qc = q.map(|v| (v / self.cell) as isize);
        let min_step = spacing.iter().copied().fold(f64::INFINITY, f64::min);
        let max_ring = *self.cells.iter().max().expect("3 axes") as isize;
        let mut best = f64::INFINITY;
        for ring in 0..=max_ring {
            for cz in qc[0] - ring..=qc[0] + ring {
                for cy in qc[1] - ring..=qc[1] + ring {
                    for cx in qc[2] - ring..=qc[2] + ring {
                        let on_shell = (cz - qc[0]).abs() == ring
                            || (cy - qc[1]).abs() == ring
                            || (cx - qc[2]).abs() == ring;
                        if !on_shell {
                            continue;
                        }
                        let c = [cz, cy, cx];
                        if (0..3).any(|a| c[a] < 0 || c[a] >= self.cells[a] as isize) {
                            continue;
                        }
                        let idx = (cz as usize * self.cells[1] + cy as usize) * self.cells[2] + cx as usize;
                        for &p in &self.buckets[idx] {
                            best = best.min(dist2(q, p, spacing));
                        }
                    }
                }
            }
            // anything on the next shell is at least `ring * cell` voxels away on some axis
            let reach = ring as f64 * self.cell as f64 * min_step;
            if best <= reach * reach {
                break;
            }
        }
        best
    }
}

/// Symmetric Hausdorff distance between mask boundaries, with coordinates
/// scaled by `spacing` (depth, height, width). Agrees exactly with
/// [`hausdorff_brute_force`].
pub fn hausdorff(pred: &Mask, gt: &Mask, spacing: [f64; 3]) -> Result<f64> {
    let (p, g) = boundaries(pred, gt, spacing)?;
    let dims = pred.dims();
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        let index = CellIndex::new(to, dims, 4);
        from.iter()
            .map(|&a| index.nearest2(a, spacing))
            .fold(0.0, f64::max)
    };
    Ok(directed(&p, &g).max(directed(&g, &p)).sqrt())
}

/// Per-region Dice and Hausdorff distance.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub dice_et: f64,
    pub dice_wt: f64,
    pub dice_tc: f64,
    /// `None` when either mask is empty.
    pub hd_et: Option<f64>,
    pub hd_wt: Option<f64>,
    pub hd_tc: Option<f64>,
    /// Regions where prediction and reference were both empty.
    pub both_empty: [bool; 3],
}

impl MetricReport {
    pub fn compare(pred: &RegionMasks, gt: &RegionMasks, spacing: [f64; 3]) -> Result<Self> {
        let mut dice = [0.0; 3];
        let mut hd = [None; 3];
        let mut both_empty = [false; 3];
        for (r, (p, g)) in pred.channels().into_iter().zip(gt.channels()).enumerate() {
            let d = dice_score(p, g)?;
            dice[r] = d.value;
            both_empty[r] = d.both_empty;
            hd[r] = match hausdorff(p, g, spacing) {
                Ok(v) => Some(v),
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            };
        }
        Ok(Self {
            dice_et: dice[0],
            dice_wt: dice[1],
            dice_tc: dice[2],
            hd_et: hd[0],
            hd_wt: hd[1],
            hd_tc: hd[2],
            both_empty,
        })
    }

    pub fn dice(&self) -> [f64; 3] {
        [self.dice_et, self.dice_wt, self.dice_tc]
    }

    pub fn hd(&self) -> [Option<f64>; 3] {
        [self.hd_et, self.hd_wt, self.hd_tc]
    }

    /// One `metric=value` line per entry; undefined distances are written as
    /// `undefined`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, d) in REGION_NAMES.iter().zip(self.dice()) {
            writeln!(s, "dice_{name}={d}").expect("string write");
        }
        for (name, h) in REGION_NAMES.iter().zip(self.hd()) {
            match h {
                Some(v) => writeln!(s, "hd_{name}={v}"),
                None => writeln!(s, "hd_{name}=undefined"),
            }
            .expect("string write");
        }
        for (name, e) in REGION_NAMES.iter().zip(self.both_empty) {
            writeln!(s, "both_empty_{name}={e}").expect("string write");
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: [usize; 3], on: &[[usize; 3]]) -> Mask {
        let mut m = Grid::filled(dims, false);
        for &c in on {
            m.set(c, true);
        }
        m
    }

    #[test]
    fn isolated_voxel_is_its_own_boundary() {
        let m = mask([3, 3, 3], &[[1, 1, 1]]);
        assert_eq!(extract_boundary(&m), vec![[1, 1, 1]]);
    }

    #[test]
    fn spacing_scales_distance() {
        let a = mask([1, 5, 5], &[[0, 0, 0]]);
        let b = mask([1, 5, 5], &[[0, 3, 4]]);
        assert_eq!(hausdorff(&a, &b, [1.0, 2.0, 1.0]).unwrap(), (36.0f64 + 16.0).sqrt());
    }

    #[test]
    fn report_text_flags_undefined() {
        let empty = mask([2, 2, 2], &[]);
        let one = mask([2, 2, 2], &[[0, 0, 0]]);
        let pred = RegionMasks::from_channels([empty.clone(), empty.clone(), empty.clone()]).unwrap();
        let gt = RegionMasks::from_channels([one.clone(), one.clone(), empty]).unwrap();
        let r = MetricReport::compare(&pred, &gt, [1.0; 3]).unwrap();
        let text = r.to_text();
        assert!(text.contains("dice_et=0\n"));
        assert!(text.contains("hd_wt=undefined\n"));
        assert!(text.contains("dice_tc=1\n"));
        assert!(text.contains("both_empty_tc=true\n"));
    }

    #[test]
    fn labels_round_trip_through_regions() {
        let labels = Grid::new([1, 1, 4], vec![0, 1, 2, 4]).unwrap();
        assert_eq!(compose_regions(&labels).unwrap().to_labels(), labels);
    }
}
