mod common;

use common::{component_sizes_oracle, grow_oracle, otsu_oracle};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use upmad::phantom::{gen_phantom, PhantomSpec};
use upmad::prior::{
    build_input, generate_prior, largest_component, otsu_threshold, region_grow, select_seeds, try_generate_prior,
    tumor_std_stats, zscore_nonzero, Connectivity, PriorConfig,
};
use upmad::volume::{Grid, Mask};

#[test]
fn otsu_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..50 {
        // a few integer-valued clusters with random sizes
        let n_modes = rng.random_range(2..5);
        let mut values = Vec::new();
        for _ in 0..n_modes {
            let center = rng.random_range(1.0f32..500.0);
            let count = rng.random_range(20..200);
            for _ in 0..count {
                values.push((center + rng.random_range(-30.0f32..30.0)).round().max(1.0));
            }
        }
        values.extend(std::iter::repeat_n(0.0, 50));
        let bins = [16, 64, 256][case % 3];
        let grid = Grid::new([1, 1, values.len()], values.clone()).unwrap();
        let got = otsu_threshold(&grid, bins).unwrap();
        let want = otsu_oracle(&values, bins);
        assert_eq!(got, want, "case {case}, bins {bins}");
    }
}

#[test]
fn otsu_two_level_volume_splits_levels() {
    let mut data = vec![0.0f32; 10];
    data.extend(std::iter::repeat_n(100.0, 30));
    data.extend(std::iter::repeat_n(300.0, 10));
    let g = Grid::new([1, 5, 10], data).unwrap();
    let t = otsu_threshold(&g, 256).unwrap();
    assert!(t > 100.0 && t <= 300.0);
}

#[test]
fn otsu_rejects_degenerate_input() {
    assert!(otsu_threshold(&Grid::filled([2, 2, 2], 0.0f32), 256).is_err());
    assert!(otsu_threshold(&Grid::filled([2, 2, 2], 5.0f32), 256).is_err());
}

fn random_mask(dims: [usize; 3], p: f64, rng: &mut ChaCha8Rng) -> Mask {
    Grid::from_fn(dims, |_| rng.random_bool(p))
}

#[test]
fn largest_component_matches_union_find() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..40 {
        let mask = random_mask([6, 7, 8], rng.random_range(0.1..0.5), &mut rng);
        for conn in [Connectivity::Face, Connectivity::Full] {
            let got = largest_component(&mask, conn);
            let (roots, size) = component_sizes_oracle(&mask, conn);
            let biggest = size.iter().copied().max().unwrap_or(0);
            assert_eq!(got.count(), biggest);
            if biggest == 0 {
                continue;
            }
            // the earliest root of maximal size wins ties
            let root = (0..mask.len()).find(|&i| mask.data()[i] && size[roots[i]] == biggest).unwrap();
            let want: Vec<bool> = (0..mask.len()).map(|i| mask.data()[i] && roots[i] == roots[root]).collect();
            assert_eq!(got.data(), &want[..]);
        }
    }
}

#[test]
fn largest_component_two_blobs() {
    let mut m = Grid::filled([8, 8, 8], false);
    for (z, y, x) in [(0, 0, 0), (0, 0, 1), (0, 1, 0), (1, 0, 0), (1, 1, 1)] {
        m.set([z, y, x], true);
    }
    for z in 4..7 {
        for y in 4..7 {
            m.set([z, y, 5], true);
        }
    }
    assert_eq!(largest_component(&m, Connectivity::Full).count(), 9);
    assert!(!*largest_component(&m, Connectivity::Full).get([0, 0, 0]));
    assert_eq!(largest_component(&Grid::filled([3, 3, 3], false), Connectivity::Full).count(), 0);
}

#[test]
fn seeds_are_members_distinct_and_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mask = random_mask([6, 6, 6], 0.4, &mut rng);
    let a = select_seeds(&mask, 10, 5).unwrap();
    let b = select_seeds(&mask, 10, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 10);
    assert!(a.iter().all(|&c| *mask.get(c)));
    let mut sorted = a.clone();
    sorted.dedup();
    assert_eq!(sorted.len(), 10);

    let mut small = Grid::filled([3, 3, 3], false);
    small.set([1, 1, 1], true);
    small.set([2, 2, 2], true);
    assert_eq!(select_seeds(&small, 10, 0).unwrap(), vec![[1, 1, 1], [2, 2, 2]]);
    assert!(select_seeds(&Grid::filled([3, 3, 3], false), 3, 0).is_err());
}

#[test]
fn region_grow_matches_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..30 {
        let flair = Grid::from_fn([6, 6, 6], |_| rng.random_range(0.0f32..100.0));
        let seeds: Vec<[usize; 3]> = (0..3).map(|_| std::array::from_fn(|_| rng.random_range(0..6))).collect();
        let delta = rng.random_range(5.0..40.0);
        for conn in [Connectivity::Face, Connectivity::Full] {
            let got = region_grow(&flair, &seeds, delta, conn).unwrap();
            assert_eq!(got, grow_oracle(&flair, &seeds, delta, conn));
        }
    }
}

#[test]
fn region_grow_fills_uniform_cube_only() {
    let flair = Grid::from_fn([10, 10, 10], |c| if c.iter().all(|&v| (3..7).contains(&v)) { 200.0f32 } else { 50.0 });
    let grown = region_grow(&flair, &[[4, 4, 4]], 10.0, Connectivity::Face).unwrap();
    assert_eq!(grown.count(), 64);
    let zero = region_grow(&flair, &[[4, 4, 4]], 0.0, Connectivity::Face).unwrap();
    assert_eq!(zero.count(), 64);
    let single = region_grow(&Grid::from_fn([3, 3, 3], |c| c[2] as f32), &[[1, 1, 1]], 0.0, Connectivity::Face).unwrap();
    // the plane x == 1 shares the seed value
    assert_eq!(single.count(), 9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn region_grow_ignores_seed_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flair = Grid::from_fn([5, 5, 5], |_| rng.random_range(0.0f32..50.0));
        let mut seeds: Vec<[usize; 3]> = (0..4).map(|_| std::array::from_fn(|_| rng.random_range(0..5))).collect();
        let a = region_grow(&flair, &seeds, 12.0, Connectivity::Face).unwrap();
        seeds.reverse();
        let b = region_grow(&flair, &seeds, 12.0, Connectivity::Face).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn region_grow_monotone_in_delta(seed in any::<u64>(), d1 in 0.0f64..30.0, extra in 0.0f64..30.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flair = Grid::from_fn([5, 5, 5], |_| rng.random_range(0.0f32..50.0));
        let seeds = [[2, 2, 2], [0, 4, 1]];
        let small = region_grow(&flair, &seeds, d1, Connectivity::Face).unwrap();
        let big = region_grow(&flair, &seeds, d1 + extra, Connectivity::Face).unwrap();
        prop_assert!(small.data().iter().zip(big.data()).all(|(&s, &b)| !s || b));
        prop_assert!(seeds.iter().all(|&s| *small.get(s)));
    }

    #[test]
    fn zscore_keeps_zero_and_standardizes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Grid::from_fn([4, 4, 4], |_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(1.0f32..500.0) });
        let z = zscore_nonzero(&g);
        let nz: Vec<f64> = z.iter().zip(g.data()).filter(|(_, &v)| v != 0.0).map(|(&z, _)| z as f64).collect();
        prop_assert!(z.iter().zip(g.data()).all(|(&z, &v)| v != 0.0 || z == 0.0));
        if nz.len() > 1 {
            let mean = nz.iter().sum::<f64>() / nz.len() as f64;
            let var = nz.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nz.len() as f64;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }
}

#[test]
fn tumor_std_examples() {
    let f = Grid::new([1, 1, 2], vec![0.0f32, 10.0]).unwrap();
    let l = Grid::new([1, 1, 2], vec![1u8, 2]).unwrap();
    let s = tumor_std_stats([(&f, &l)]).unwrap();
    assert_eq!(s.per_case, vec![5.0]);
    let f2 = Grid::new([1, 1, 3], vec![10.0f32; 3]).unwrap();
    let l2 = Grid::new([1, 1, 3], vec![4u8; 3]).unwrap();
    let s = tumor_std_stats([(&f, &l), (&f2, &l2)]).unwrap();
    assert_eq!((s.min, s.max), (0.0, 5.0));
}

#[test]
fn blank_flair_gives_empty_prior() {
    let flair = Grid::filled([8, 8, 8], 0.0f32);
    assert!(try_generate_prior(&flair, &PriorConfig::default()).is_err());
    assert_eq!(generate_prior(&flair, &PriorConfig::default()).count(), 0);
}

fn dice(a: &Mask, b: &Mask) -> f64 {
    let inter = a.data().iter().zip(b.data()).filter(|(&x, &y)| x && y).count() as f64;
    2.0 * inter / (a.count() + b.count()) as f64
}

#[test]
fn prior_covers_phantom_whole_tumor() {
    let spec = PhantomSpec::default();
    for k in 0..10 {
        let v = gen_phantom(&spec, k).unwrap();
        let wt = v.labels.as_ref().unwrap().map(|&c| c != 0);
        let prior = try_generate_prior(v.flair(), &PriorConfig::default()).unwrap();
        let d = dice(&prior, &wt);
        assert!(d >= 0.9, "case {k}: dice {d}");
    }
}

#[test]
fn input_tensor_layout() {
    let v = gen_phantom(&PhantomSpec::default(), 0).unwrap();
    let prior = generate_prior(v.flair(), &PriorConfig::default());
    let x = build_input(&v, Some(&prior)).unwrap();
    assert_eq!(x.shape(), &[1, 5, 32, 32, 16]);
    let n = v.flair().len();
    let last = &x.data()[4 * n..];
    assert!(last.iter().zip(prior.data()).all(|(&a, &p)| a == p as u8 as f32));
    assert_eq!(&x.data()[..n], &zscore_nonzero(v.flair())[..]);
    assert_eq!(build_input(&v, None).unwrap().shape(), &[1, 4, 32, 32, 16]);
}
