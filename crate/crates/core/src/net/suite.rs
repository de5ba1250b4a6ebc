//! 64-bit gradient checks of every primitive and network block, run by the
//! `gradcheck` subcommand and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::blocks::{Aam, Builder, ChannelAttention, Conv, Fcm, ForwardCtx, Msff};
use super::manifest::Resolution;
use super::{AamMode, Bound, Network, NetworkConfig, ParamStore};
use crate::error::Result;
use crate::losses::{combined_loss, DICE_EPS};
use crate::tensor::{grad_check_many, Conv3dOpts, DropoutMode, GradCheckOpts, GradCheckReport, Tensor, Var};

/// Largest accepted relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    /// Worst relative error below tolerance, with at most 1% of the
    /// coordinates excused as kink crossings.
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < GRADCHECK_TOLERANCE && self.report.nonsmooth.len() * 100 <= self.report.checked
    }
}

fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Perturbs every parameter so that zero-initialized scales and biases do
/// not hide gradient paths.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for i in 0..store.len() {
        let v = store.value(i);
        let moved = Tensor::from_fn(v.shape().to_vec(), |j| v.data()[j] + rng.random_range(-0.3..0.3));
        store.set(i, moved).expect("same shape");
    }
}

/// `sum(y * r)` for a fixed random `r`, so every output element carries a
/// distinct upstream gradient.
fn weighted_sum<'t>(y: Var<'t, f64>, r: &Tensor<f64>) -> Result<Var<'t, f64>> {
    y.mul(y.tape().constant(r.clone()))?.sum()
}

/// Checks `block` (built into a fresh store) with respect to its input and
/// all of its parameters.
fn check_block<B>(
    name: &str,
    config: &NetworkConfig,
    input_shape: Vec<usize>,
    seed: u64,
    opts: GradCheckOpts,
    make: impl FnOnce(&mut Builder<'_, f64>) -> B,
    run: impl for<'t> Fn(&B, &Bound<'t, f64>, Var<'t, f64>, &ForwardCtx) -> Result<Var<'t, f64>> + Sync,
) -> Result<SuiteEntry>
where
    B: Sync,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = {
        let mut b = Builder::new(&mut store, config);
        make(&mut b)
    };
    jitter(&mut store, &mut rng);
    let x = uniform(input_shape, -1.0, 1.0, &mut rng);
    let probe = {
        let tape = crate::tensor::Tape::new();
        let p = store.bind(&tape, false);
        let y = run(&block, &p, tape.constant(x.clone()), &ForwardCtx::new(DropoutMode::Off, 0))?;
        y.shape()
    };
    let r = uniform(probe, -1.0, 1.0, &mut rng);
    let mut inputs = vec![x];
    inputs.extend(store.values());
    let report = grad_check_many(
        |vars| {
            let p = Bound::from_vars(vars[1..].to_vec());
            let y = run(&block, &p, vars[0], &ForwardCtx::new(DropoutMode::Off, 0))?;
            weighted_sum(y, &r)
        },
        &inputs,
        opts,
    )?;
    Ok(SuiteEntry {
        name: name.to_string(),
        report,
    })
}

fn check_fn(
    name: &str,
    shapes: &[Vec<usize>],
    seed: u64,
    opts: GradCheckOpts,
    f: impl for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>> + Sync,
) -> Result<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<_> = shapes.iter().map(|s| uniform(s.clone(), -1.0, 1.0, &mut rng)).collect();
    let report = grad_check_many(f, &inputs, opts)?;
    Ok(SuiteEntry {
        name: name.to_string(),
        report,
    })
}

/// Small configuration used for the composite checks.
pub fn suite_config() -> NetworkConfig {
    NetworkConfig {
        stage_widths: [4, 4, 8, 8],
        gn_groups: 2,
        ca_reduction: 2,
        ..Default::default()
    }
}

/// Runs every check; each entry passes when its worst relative error is
/// below [`GRADCHECK_TOLERANCE`].
pub fn gradient_suite(opts: GradCheckOpts) -> Result<Vec<SuiteEntry>> {
    let cfg = suite_config();
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let r = |shape: Vec<usize>, rng: &mut ChaCha8Rng| uniform(shape, -1.0, 1.0, rng);

    let r_conv = r(vec![1, 3, 6, 6, 4], &mut rng);
    out.push(check_fn(
        "conv3d_dilation2",
        &[vec![1, 2, 6, 6, 4], vec![3, 2, 3, 3, 3], vec![3]],
        1,
        opts,
        |v| weighted_sum(v[0].conv3d(v[1], Some(v[2]), Conv3dOpts::same(3, 2))?, &r_conv),
    )?);
    let r_up = r(vec![1, 3, 8, 8, 4], &mut rng);
    out.push(check_fn(
        "conv_transpose3d",
        &[vec![1, 2, 4, 4, 2], vec![2, 3, 2, 2, 2], vec![3]],
        2,
        opts,
        |v| weighted_sum(v[0].conv_transpose3d(v[1], Some(v[2]), 2)?, &r_up),
    )?);
    let r_pool = r(vec![1, 2, 4, 4, 2], &mut rng);
    out.push(check_fn("maxpool3d", &[vec![1, 2, 8, 8, 4]], 3, opts, |v| {
        weighted_sum(v[0].maxpool3d()?, &r_pool)
    })?);
    let r_gn = r(vec![1, 4, 4, 4, 4], &mut rng);
    out.push(check_fn(
        "group_norm",
        &[vec![1, 4, 4, 4, 4], vec![4], vec![4]],
        4,
        opts,
        |v| weighted_sum(v[0].group_norm(2, v[1], v[2], 1e-5)?, &r_gn),
    )?);

    out.push(check_block(
        "channel_attention",
        &cfg,
        vec![1, 4, 4, 4, 4],
        5,
        opts,
        |b| ChannelAttention::new(b, "ca", 4, 0),
        |m, p, x, _| m.forward(p, x),
    )?);
    out.push(check_block(
        "fcm",
        &cfg,
        vec![1, 4, 4, 4, 4],
        6,
        opts,
        |b| Fcm::new(b, "fcm", 4, 0, true),
        |m, p, x, ctx| m.forward(p, x, ctx),
    )?);
    out.push(check_block(
        "msff",
        &cfg,
        vec![1, 2, 6, 6, 4],
        7,
        opts,
        |b| Msff::new(b, "msff", 2, 4, 3, 2, 0),
        |m, p, x, ctx| m.forward(p, x, ctx),
    )?);
    for (mode, name) in [(AamMode::Channel, "aam_channel"), (AamMode::Spatial, "aam_spatial")] {
        out.push(check_block(
            name,
            &cfg,
            vec![1, 4, 4, 4, 2],
            8,
            opts,
            |b| Aam::new(b, "aam", 4, 0, mode, cfg.spatial_attention_voxel_cap),
            |m, p, x, ctx| m.forward(p, x, ctx),
        )?);
    }
    out.push(check_block(
        "skip_recalibration",
        &cfg,
        vec![1, 4, 4, 4, 4],
        9,
        opts,
        |b| Conv::new(b, "skip", 4, 4, 1, 1, Resolution::Level(0)),
        |m, p, x, _| m.forward(p, x),
    )?);
    out.push(network_check(&cfg, opts)?);
    Ok(out)
}

/// Coordinates sampled for the whole-network check unless `opts` sets a
/// total.
pub const NETWORK_COORDS: usize = 1500;

/// Full network plus combined loss at `1 x C x 8 x 8 x 8`, with respect to
/// the input and all parameters (sampled).
pub fn network_check(config: &NetworkConfig, opts: GradCheckOpts) -> Result<SuiteEntry> {
    let opts = GradCheckOpts {
        max_total: opts.max_total.or(Some(NETWORK_COORDS)),
        ..opts
    };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut net = Network::<f64>::new(config.clone())?;
    jitter(net.params_mut(), &mut rng);
    let x = uniform(vec![1, config.in_channels, 8, 8, 8], -1.0, 1.0, &mut rng);
    let target = Tensor::from_fn(vec![1, config.out_channels, 8, 8, 8], |_| {
        if rng.random_bool(0.4) { 1.0 } else { 0.0 }
    });
    let mut inputs = vec![x];
    inputs.extend(net.params().values());
    let report = grad_check_many(
        |vars| {
            let p = Bound::from_vars(vars[1..].to_vec());
            let y = net.forward(&p, vars[0], &ForwardCtx::new(DropoutMode::Off, 0))?;
            combined_loss(y, &target, DICE_EPS)
        },
        &inputs,
        opts,
    )?;
    Ok(SuiteEntry {
        name: "network_combined_loss".into(),
        report,
    })
}
