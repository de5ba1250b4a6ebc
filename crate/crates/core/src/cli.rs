//! Command-line front end: `phantom`, `prior`, `train`, `infer`, `eval`,
//! `gradcheck` and `stats`.
//!
//! Every invocation writes a run manifest (the resolved configuration as
//! JSON). Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::metrics::{compose_regions, MetricReport, RegionMasks};
use crate::net::suite::{gradient_suite, GRADCHECK_TOLERANCE};
use crate::net::{load_model, save_model, AamMode, Network, NetworkConfig};
use crate::phantom::{case_paths, gen_phantom, list_cases, read_case, read_case_files, split_dataset, write_case, PhantomSpec};
use crate::prior::{generate_prior, tumor_std_stats, PriorConfig};
use crate::tensor::GradCheckOpts;
use crate::train::{evaluate_case, fit, mc_infer, prepare_case, prepare_input, write_history, Ablation, TrainConfig, DEFAULT_MC_PASSES};
use crate::volume::{
    export_slice_pgm, mask_to_u8, read_u8_grid, read_volume, write_u8_grid, write_volume, Dtype, Grid, Mask, Payload,
    SliceAxis, VolumeHeader,
};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(name = "upmad", version, about = "Brain-tumor segmentation toolkit")]
pub struct Cli {
    /// Root seed for every random stream.
    #[arg(long, env = "SEED", default_value_t = 0, global = true)]
    pub seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Fixed reduction order. Reductions are always ordered; the flag is
    /// accepted and recorded.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Where to write the run manifest (default: next to the outputs).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset.
    Phantom(PhantomArgs),
    /// Compute the FLAIR region-growing prior mask of one case.
    Prior(PriorArgs),
    /// Train a network on a case directory.
    Train(TrainArgs),
    /// Monte-Carlo inference on one case.
    Infer(InferArgs),
    /// Compare a prediction with reference labels.
    Eval(EvalArgs),
    /// Run the 64-bit gradient-check suite.
    Gradcheck(GradcheckArgs),
    /// FLAIR standard deviation inside tumors across a labeled dataset.
    Stats(StatsArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct PhantomArgs {
    #[arg(long, default_value_t = 10)]
    pub cases: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Extents D H W.
    #[arg(long, num_args = 3, value_names = ["D", "H", "W"], default_values_t = [32, 32, 16])]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 6.0)]
    pub noise: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct PriorOpts {
    #[arg(long, default_value_t = 256)]
    pub bins: usize,
    #[arg(long, default_value_t = crate::prior::FALLBACK_DELTA)]
    pub delta: f64,
    #[arg(long, default_value_t = 10)]
    pub n_seeds: usize,
}

impl PriorOpts {
    fn config(&self, seed: u64) -> PriorConfig {
        PriorConfig {
            histogram_bins: self.bins,
            n_seeds: self.n_seeds,
            delta: self.delta,
            rng_seed: seed,
            ..Default::default()
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PriorArgs {
    /// Four-channel image volume.
    #[arg(long)]
    pub input: PathBuf,
    /// Output mask (u8, one channel).
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub prior: PriorOpts,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
pub enum AttentionArg {
    Channel,
    Spatial,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Directory of `case_<k>_img.sg3d` / `case_<k>_lbl.sg3d` files.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.0)]
    pub lr_min: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 50)]
    pub cosine_t: usize,
    #[arg(long)]
    pub cosine_restarts: bool,
    #[arg(long, default_value_t = 150)]
    pub patience: usize,
    #[arg(long)]
    pub no_prior: bool,
    #[arg(long)]
    pub no_msff: bool,
    #[arg(long)]
    pub no_aam: bool,
    #[arg(long)]
    pub no_mc: bool,
    #[arg(long, num_args = 4, value_names = ["W0", "W1", "W2", "W3"], default_values_t = [8, 16, 32, 64])]
    pub widths: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    pub gn_groups: usize,
    #[arg(long, default_value_t = 0.2)]
    pub dropout: f64,
    #[arg(long, default_value_t = 3)]
    pub msff_kernel: usize,
    #[arg(long, default_value_t = 2)]
    pub msff_dilation: usize,
    #[arg(long, value_enum, default_value_t = AttentionArg::Channel)]
    pub attention: AttentionArg,
    #[command(flatten)]
    pub prior: PriorOpts,
}

#[derive(Debug, Args, Serialize)]
pub struct InferArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Reference labels; when given, metrics are written too.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MC_PASSES)]
    pub passes: usize,
    #[arg(long)]
    pub no_mc: bool,
    #[arg(long, default_value = "axial")]
    #[serde(skip)]
    pub axis: SliceAxis,
    /// Slice index for the PGM figures (default: middle).
    #[arg(long)]
    pub slice: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Label map (u8, one channel) or region volume (three channels ET, WT,
    /// TC; float probabilities are cut at 0.5).
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Voxel spacing along D H W.
    #[arg(long, num_args = 3, default_values_t = [1.0, 1.0, 1.0])]
    pub spacing: Vec<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    /// Directory for the report and run manifest.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON output file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct RunManifest<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    threads: Option<usize>,
    deterministic: bool,
    config: C,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `<file>.run.json` beside a single-file output.
fn beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().map(OsString::from).unwrap_or_default();
    name.push(".run.json");
    file.with_file_name(name)
}

impl Cli {
    fn write_manifest(&self, default: PathBuf, command: &str, config: impl Serialize) -> Result<()> {
        let path = self.manifest.clone().unwrap_or(default);
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        write_json(
            &path,
            &RunManifest {
                tool: "upmad",
                version: env!("CARGO_PKG_VERSION"),
                command,
                seed: self.seed,
                threads: self.threads,
                deterministic: true,
                config,
            },
        )
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return 2;
        }
    };
    match pool.install(|| run(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Runs an already parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Phantom(a) => phantom(cli, a),
        Command::Prior(a) => prior(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Infer(a) => infer(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Gradcheck(a) => gradcheck(cli, a),
        Command::Stats(a) => stats(cli, a),
    }
}

fn dims3(v: &[usize]) -> [usize; 3] {
    [v[0], v[1], v[2]]
}

fn phantom(cli: &Cli, a: &PhantomArgs) -> Result<()> {
    let spec = PhantomSpec {
        dims: dims3(&a.dims),
        n_cases: a.cases,
        rng_seed: cli.seed,
        noise_sigma: a.noise,
        ..Default::default()
    };
    spec.validate()?;
    create_dir(&a.out)?;
    cli.write_manifest(a.out.join(RUN_MANIFEST), "phantom", json!({ "args": a, "spec": spec }))?;
    for k in 0..spec.n_cases {
        write_case(&a.out, k, &gen_phantom(&spec, k)?)?;
    }
    info!("wrote {} cases to {}", spec.n_cases, a.out.display());
    Ok(())
}

fn prior(cli: &Cli, a: &PriorArgs) -> Result<()> {
    let config = a.prior.config(cli.seed);
    config.validate()?;
    cli.write_manifest(beside(&a.out), "prior", json!({ "args": a, "prior": config }))?;
    let volume = read_case_files(&a.input, None)?;
    let mask = generate_prior(volume.flair(), &config);
    info!("prior covers {} voxels", mask.count());
    write_u8_grid(&a.out, &mask_to_u8(&mask))
}

/// Train/validation ids: an 8:1:1 split from ten cases up, otherwise the
/// last case validates (or the only case does both).
fn train_val_ids(ids: &[usize], seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    match ids.len() {
        0 => Err(Error::InvalidArgument("no cases found".into())),
        1 => Ok((ids.to_vec(), ids.to_vec())),
        n if n < 10 => {
            warn!("{n} cases: validating on the last case instead of an 8:1:1 split");
            Ok((ids[..n - 1].to_vec(), ids[n - 1..].to_vec()))
        }
        _ => {
            let (tr, va, _) = split_dataset(ids, (8, 1, 1), seed)?;
            Ok((tr, va))
        }
    }
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let ablation = Ablation::new(!a.no_prior, !a.no_msff, !a.no_aam, !a.no_mc);
    let base = NetworkConfig {
        stage_widths: [a.widths[0], a.widths[1], a.widths[2], a.widths[3]],
        gn_groups: a.gn_groups,
        dropout_rate: a.dropout,
        msff_kernel: a.msff_kernel,
        msff_dilation: a.msff_dilation,
        aam_mode: match a.attention {
            AttentionArg::Channel => AamMode::Channel,
            AttentionArg::Spatial => AamMode::Spatial,
        },
        init_seed: cli.seed,
        ..Default::default()
    };
    let net_config = ablation.network_config(&base);
    let config = TrainConfig {
        lr_init: a.lr,
        lr_min: a.lr_min,
        weight_decay: a.weight_decay,
        cosine_t: a.cosine_t,
        cosine_restarts: a.cosine_restarts,
        max_epochs: a.epochs,
        patience: a.patience.min(a.epochs),
        seed: cli.seed,
        ablation,
        ..Default::default()
    };
    let prior_config = a.prior.config(cli.seed);
    config.validate()?;
    net_config.validate()?;
    prior_config.validate()?;
    create_dir(&a.out)?;
    cli.write_manifest(
        a.out.join(RUN_MANIFEST),
        "train",
        json!({ "args": a, "train": config, "network": net_config, "prior": prior_config }),
    )?;

    let ids = list_cases(&a.data)?;
    let (train_ids, val_ids) = train_val_ids(&ids, cli.seed)?;
    let load = |k: &usize| prepare_case(k.to_string(), &read_case(&a.data, *k)?, ablation.use_prior, &prior_config);
    let train_cases = train_ids.iter().map(load).collect::<Result<Vec<_>>>()?;
    let val_cases = val_ids.iter().map(load).collect::<Result<Vec<_>>>()?;
    write_json(&a.out.join("split.json"), &json!({ "train": train_ids, "val": val_ids }))?;
    write_json(&a.out.join("train_config.json"), &config)?;
    write_json(&a.out.join("prior.json"), &prior_config)?;

    let mut net = Network::<f32>::new(net_config)?;
    info!(
        "training {} ({} parameters) on {} cases, validating on {}",
        ablation.label(),
        net.params().numel(),
        train_cases.len(),
        val_cases.len()
    );
    let outcome = fit(&mut net, &train_cases, &val_cases, &config, |r| {
        info!("epoch {} lr {:e} train {:.5} val {:.5}", r.epoch, r.lr, r.train_loss, r.val_loss);
    })?;
    write_history(a.out.join("history.csv"), &outcome.history)?;
    save_model(&a.out, &net)?;
    info!(
        "best epoch {} (val {:.5}), stopped by {:?}",
        outcome.best_epoch, outcome.best_val_loss, outcome.stop
    );
    Ok(())
}

/// Channel `c` of a `[C, D, H, W]` tensor as a grid.
fn channel_grid(t: &crate::tensor::Tensor<f32>, c: usize, dims: [usize; 3]) -> Result<Grid<f32>> {
    let n: usize = dims.iter().product();
    Grid::new(dims, t.data()[c * n..(c + 1) * n].to_vec())
}

fn infer(cli: &Cli, a: &InferArgs) -> Result<()> {
    create_dir(&a.out)?;
    cli.write_manifest(
        a.out.join(RUN_MANIFEST),
        "infer",
        json!({ "args": a, "axis": format!("{:?}", a.axis).to_lowercase() }),
    )?;
    let net = load_model(&a.model)?;
    let prior_path = a.model.join("prior.json");
    let prior_config: PriorConfig = if prior_path.exists() {
        let text = std::fs::read_to_string(&prior_path).map_err(|e| Error::io(&prior_path, e))?;
        serde_json::from_str(&text)?
    } else {
        PriorConfig::default()
    };
    let volume = read_case_files(&a.input, a.labels.as_deref())?;
    let use_prior = net.config().in_channels == 5;
    let input = prepare_input(&volume, use_prior, &prior_config)?;
    let use_mc = !a.no_mc && net.config().mc_dropout;
    let mc = mc_infer(&net, &input, a.passes, cli.seed, use_mc)?;

    let dims = mc.dims();
    let header = VolumeHeader::new(3, dims, Dtype::F32);
    write_volume(a.out.join("mean.sg3d"), &header, &Payload::F32(mc.mean.to_vec()))?;
    write_volume(a.out.join("variance.sg3d"), &header, &Payload::F32(mc.variance.to_vec()))?;
    write_u8_grid(a.out.join("prediction.sg3d"), &mc.masks.to_labels())?;

    let axis_dim = match a.axis {
        SliceAxis::Axial => 0,
        SliceAxis::Coronal => 1,
        SliceAxis::Sagittal => 2,
    };
    let index = a.slice.unwrap_or(dims[axis_dim] / 2);
    let wt = 1;
    export_slice_pgm(&channel_grid(&mc.mean, wt, dims)?, a.axis, index, (0.0, 1.0), a.out.join("mean_wt.pgm"))?;
    export_slice_pgm(
        &channel_grid(&mc.variance, wt, dims)?,
        a.axis,
        index,
        (0.0, 0.25),
        a.out.join("variance_wt.pgm"),
    )?;
    if let Some(labels) = &volume.labels {
        let report = evaluate_case(&mc, labels, [1.0; 3])?;
        report.write(a.out.join("metrics.txt"))?;
        info!("dice et/wt/tc = {:?}", report.dice());
    }
    info!("{} pass(es) written to {}", mc.n_passes, a.out.display());
    Ok(())
}

/// Region masks from a prediction file: a label map or three region
/// channels.
fn read_prediction(path: &Path) -> Result<RegionMasks> {
    let (h, p) = read_volume(path)?;
    let dims = h.dims();
    match (h.channels, p) {
        (1, Payload::U8(data)) => compose_regions(&Grid::new(dims, data)?),
        (3, p) => {
            let n: usize = dims.iter().product();
            let on: Vec<bool> = match p {
                Payload::U8(d) => d.iter().map(|&v| v != 0).collect(),
                Payload::F32(d) => d.iter().map(|&v| v >= 0.5).collect(),
            };
            let mask = |c: usize| -> Result<Mask> { Grid::new(dims, on[c * n..(c + 1) * n].to_vec()) };
            RegionMasks::from_channels([mask(0)?, mask(1)?, mask(2)?])
        }
        (c, _) => Err(Error::Format(format!(
            "prediction must be a u8 label map or three region channels, got {c} channels"
        ))),
    }
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    cli.write_manifest(beside(&a.out), "eval", json!({ "args": a }))?;
    let pred = read_prediction(&a.pred)?;
    let gt = compose_regions(&read_u8_grid(&a.labels)?)?;
    if pred.wt.dims() != gt.wt.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs labels {:?}",
            pred.wt.dims(),
            gt.wt.dims()
        )));
    }
    let spacing = [a.spacing[0], a.spacing[1], a.spacing[2]];
    let report = MetricReport::compare(&pred, &gt, spacing)?;
    report.write(&a.out)
}

fn gradcheck(cli: &Cli, a: &GradcheckArgs) -> Result<()> {
    create_dir(&a.out)?;
    let opts = GradCheckOpts {
        seed: cli.seed,
        ..Default::default()
    };
    cli.write_manifest(
        a.out.join(RUN_MANIFEST),
        "gradcheck",
        json!({ "args": a, "h": opts.h, "max_coords": opts.max_coords, "tolerance": GRADCHECK_TOLERANCE }),
    )?;
    let entries = gradient_suite(opts)?;
    let mut text = String::new();
    let mut failed = Vec::new();
    for e in &entries {
        let status = if e.passed() { "ok" } else { "FAIL" };
        let line = format!(
            "{} checked={} nonsmooth={} max_rel_error={:e} {status}\n",
            e.name,
            e.report.checked,
            e.report.nonsmooth.len(),
            e.report.max_rel_error
        );
        print!("{line}");
        text.push_str(&line);
        if !e.passed() {
            failed.push(e.name.clone());
        }
    }
    let path = a.out.join("gradcheck.txt");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Backward(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn stats(cli: &Cli, a: &StatsArgs) -> Result<()> {
    cli.write_manifest(beside(&a.out), "stats", json!({ "args": a }))?;
    let ids = list_cases(&a.data)?;
    let mut cases = Vec::new();
    for &k in &ids {
        let (img, lbl) = case_paths(&a.data, k);
        if !lbl.exists() {
            warn!("case {k} has no labels, skipped");
            continue;
        }
        let volume = read_case_files(&img, Some(&lbl))?;
        let labels = volume.labels.clone().expect("labels were read");
        cases.push((volume.modalities[0].clone(), labels));
    }
    let stats = tumor_std_stats(cases.iter().map(|(f, l)| (f, l)))?;
    write_json(&a.out, &stats)?;
    println!("tumor FLAIR std over {} cases: min {:.3} median {:.3} max {:.3}", stats.per_case.len(), stats.min, stats.median, stats.max);
    Ok(())
}
