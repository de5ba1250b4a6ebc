//! Training loop, learning-rate schedule, early stopping and Monte-Carlo
//! dropout inference.

mod mc;
mod optim;
mod schedule;

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{combined_loss, DICE_EPS};
use crate::metrics::compose_regions;
use crate::net::{ForwardCtx, Network, NetworkConfig, ParamStore};
use crate::prior::{build_input, generate_prior, PriorConfig};
use crate::seed::derive_seed;
use crate::tensor::{DropoutMode, Tape, Tensor};
use crate::volume::MultiModalVolume;

pub use mc::{evaluate_case, mc_infer, McResult, DEFAULT_MC_PASSES, MASK_THRESHOLD};
pub use optim::{adamw_step, OptimState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use schedule::{cosine_lr, EarlyStopping, StopDecision};

/// The four module switches of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub use_prior: bool,
    pub use_msff: bool,
    pub use_aam: bool,
    pub use_mc: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_prior: true,
            use_msff: true,
            use_aam: true,
            use_mc: true,
        }
    }
}

impl Ablation {
    /// The six configurations compared in the module study, from the plain
    /// baseline to the full model.
    pub const STUDY: [Ablation; 6] = [
        Ablation::new(false, false, false, false),
        Ablation::new(true, false, false, false),
        Ablation::new(true, true, false, false),
        Ablation::new(true, false, true, false),
        Ablation::new(true, true, true, false),
        Ablation::new(true, true, true, true),
    ];

    pub const fn new(use_prior: bool, use_msff: bool, use_aam: bool, use_mc: bool) -> Self {
        Self {
            use_prior,
            use_msff,
            use_aam,
            use_mc,
        }
    }

    /// `base` with input channels and module switches set from `self`.
    pub fn network_config(&self, base: &NetworkConfig) -> NetworkConfig {
        NetworkConfig {
            in_channels: if self.use_prior { 5 } else { 4 },
            use_msff: self.use_msff,
            use_aam: self.use_aam,
            mc_dropout: self.use_mc,
            ..base.clone()
        }
    }

    pub fn label(&self) -> String {
        let on = |b: bool| if b { '+' } else { '-' };
        format!(
            "{}prior {}msff {}aam {}mc",
            on(self.use_prior),
            on(self.use_msff),
            on(self.use_aam),
            on(self.use_mc)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub weight_decay: f64,
    /// Cosine annealing period in epochs.
    pub cosine_t: usize,
    pub lr_min: f64,
    /// Restart the cosine schedule every `cosine_t` epochs instead of
    /// holding `lr_min`.
    pub cosine_restarts: bool,
    pub max_epochs: usize,
    pub patience: usize,
    /// Always 1.
    pub batch_size: usize,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 1e-4,
            weight_decay: 1e-5,
            cosine_t: 50,
            lr_min: 0.0,
            cosine_restarts: false,
            max_epochs: 1000,
            patience: 150,
            batch_size: 1,
            seed: 0,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size != 1 {
            return bad(format!("batch_size must be 1, got {}", self.batch_size));
        }
        if self.patience > self.max_epochs {
            return bad(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        if !(self.lr_init > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr_init {
            return bad("need 0 <= lr_min <= lr_init and lr_init > 0".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        Ok(())
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        cosine_lr(epoch, self.lr_init, self.lr_min, self.cosine_t, self.cosine_restarts)
    }
}

/// A case ready for the network: input `[1, 4|5, D, H, W]` and region
/// targets `[1, 3, D, H, W]` (ET, WT, TC).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainCase {
    pub id: String,
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
}

/// Region targets of a label map as `[1, 3, D, H, W]`.
pub fn region_targets(labels: &crate::volume::Grid<u8>) -> Result<Tensor<f32>> {
    let regions = compose_regions(labels)?;
    let [d, h, w] = labels.dims();
    let data = regions
        .channels()
        .iter()
        .flat_map(|m| m.data().iter().map(|&b| b as u8 as f32))
        .collect();
    Tensor::new(vec![1, 3, d, h, w], data)
}

/// Builds the network input (with the prior channel when `use_prior`) and,
/// if the volume is labeled, the region targets.
pub fn prepare_input(volume: &MultiModalVolume, use_prior: bool, prior: &PriorConfig) -> Result<Tensor<f32>> {
    let mask = use_prior.then(|| generate_prior(volume.flair(), prior));
    build_input(volume, mask.as_ref())
}

pub fn prepare_case(id: impl Into<String>, volume: &MultiModalVolume, use_prior: bool, prior: &PriorConfig) -> Result<TrainCase> {
    let labels = volume
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("training case has no labels".into()))?;
    Ok(TrainCase {
        id: id.into(),
        input: prepare_input(volume, use_prior, prior)?,
        target: region_targets(labels)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// `epoch,lr,train_loss,val_loss` lines.
pub fn history_text(history: &[EpochRecord]) -> String {
    let mut s = String::new();
    for r in history {
        writeln!(s, "{},{:e},{},{}", r.epoch, r.lr, r.train_loss, r.val_loss).expect("string write");
    }
    s
}

pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, history_text(history)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopping,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop: StopReason,
}

/// Combined loss of `net` on `case` with dropout off.
pub fn eval_loss(net: &Network<f32>, case: &TrainCase) -> Result<f64> {
    let tape = Tape::new();
    let p = net.params().bind(&tape, false);
    let x = tape.constant(case.input.clone());
    let y = net.forward(&p, x, &ForwardCtx::new(DropoutMode::Off, 0))?;
    Ok(combined_loss(y, &case.target, DICE_EPS)?.value().item()?.into())
}

/// One optimization step on `case`; returns the training loss.
fn train_step(net: &mut Network<f32>, case: &TrainCase, state: &mut OptimState, lr: f64, weight_decay: f64, seed: u64) -> Result<f64> {
    let tape = Tape::new();
    let p = net.params().bind(&tape, true);
    let x = tape.constant(case.input.clone());
    let y = net.forward(&p, x, &ForwardCtx::new(DropoutMode::Train, seed))?;
    let loss = combined_loss(y, &case.target, DICE_EPS)?;
    tape.backward(loss)?;
    let grads = p.grads();
    let value: f64 = loss.value().item()?.into();
    drop(p);
    drop(tape);
    adamw_step(net.params_mut(), &grads, state, lr, weight_decay)?;
    Ok(value)
}

/// Trains `net` with AdamW under the cosine schedule, validating after
/// every epoch. On return `net` holds the parameters of the epoch with the
/// lowest validation loss. `on_epoch` sees every record as it is produced.
pub fn fit(
    net: &mut Network<f32>,
    train: &[TrainCase],
    val: &[TrainCase],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    let mut state = OptimState::new(net.params());
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best: Option<ParamStore<f32>> = None;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, u64::MAX));
    let mut stop = StopReason::MaxEpochs;
    let mut step: u64 = 0;

    for epoch in 0..config.max_epochs {
        let lr = config.lr(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut train_loss = 0.0;
        for &i in &order {
            let seed = derive_seed(config.seed, step);
            step += 1;
            let l = train_step(net, &train[i], &mut state, lr, config.weight_decay, seed).map_err(|e| match e {
                Error::NonFinite { op } => Error::Diverged {
                    epoch,
                    reason: format!("non-finite value in `{op}` on case {}", train[i].id),
                },
                e => e,
            })?;
            train_loss += l;
        }
        train_loss /= train.len() as f64;
        let mut val_loss = 0.0;
        for case in val {
            val_loss += eval_loss(net, case)?;
        }
        val_loss /= val.len() as f64;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
        };
        debug!("epoch {epoch}: lr {lr:e} train {train_loss:.6} val {val_loss:.6}");
        on_epoch(&record);
        history.push(record);
        let decision = stopper.update(val_loss).map_err(|e| match e {
            Error::Diverged { reason, .. } => Error::Diverged { epoch, reason },
            e => e,
        })?;
        if stopper.improved() {
            best = Some(net.params().clone());
        }
        if decision == StopDecision::Stop {
            info!("early stopping at epoch {epoch}");
            stop = StopReason::EarlyStopping;
            break;
        }
    }
    let best_epoch = stopper.best_epoch.unwrap_or(0);
    if let Some(best) = best {
        *net.params_mut() = best;
    }
    Ok(FitOutcome {
        history,
        best_epoch,
        best_val_loss: stopper.best.unwrap_or(f64::NAN),
        stop,
    })
}
