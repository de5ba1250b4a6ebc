//! Building blocks. Each block registers its parameters and manifest entries
//! when constructed and reads its parameters from a [`Bound`] set when run.

use std::cell::Cell;

use super::manifest::{LayerInfo, LayerKind, Resolution};
use super::params::{Bound, ParamInit, ParamStore};
use super::{AamMode, NetworkConfig};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::{Contraction, Conv3dOpts, DropoutMode, Scalar, Var};

/// Per-pass state: dropout mode and the seed from which every dropout site
/// derives its own mask seed, in forward order.
#[derive(Debug)]
pub struct ForwardCtx {
    pub mode: DropoutMode,
    pub seed: u64,
    site: Cell<u64>,
}

impl ForwardCtx {
    pub fn new(mode: DropoutMode, seed: u64) -> Self {
        Self {
            mode,
            seed,
            site: Cell::new(0),
        }
    }

    fn next_seed(&self) -> u64 {
        let s = self.site.get();
        self.site.set(s + 1);
        derive_seed(self.seed, s)
    }

    fn dropout<'t, T: Scalar>(&self, x: Var<'t, T>, rate: Option<f64>) -> Result<Var<'t, T>> {
        match rate {
            Some(r) => x.dropout(r, self.mode, self.next_seed()),
            None => Ok(x),
        }
    }
}

/// Collects parameters and manifest entries while blocks are constructed.
pub struct Builder<'a, T> {
    pub init: ParamInit<'a, T>,
    pub layers: Vec<LayerInfo>,
    /// `Some(rate)` when dropout layers are present.
    pub dropout: Option<f64>,
    pub gn_groups: usize,
    pub gn_eps: f64,
    pub ca_reduction: usize,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, config: &NetworkConfig) -> Self {
        Self {
            init: ParamInit::new(store, config.init_seed),
            layers: Vec::new(),
            dropout: (config.mc_dropout && config.dropout_rate > 0.0).then_some(config.dropout_rate),
            gn_groups: config.gn_groups,
            gn_eps: config.gn_eps,
            ca_reduction: config.ca_reduction,
        }
    }

    pub fn record(&mut self, name: &str, kind: LayerKind, resolution: Resolution) {
        self.layers.push(LayerInfo {
            name: name.to_string(),
            kind,
            resolution,
        });
    }
}

/// Cubic convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: usize,
    pub bias: usize,
    pub opts: Conv3dOpts,
}

impl Conv {
    /// Stride 1 with shape-preserving padding.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        dilation: usize,
        resolution: Resolution,
    ) -> Self {
        let weight = b.init.weight(
            &format!("{name}.weight"),
            vec![cout, cin, kernel, kernel, kernel],
            cin * kernel.pow(3),
        );
        let bias = b.init.constant(&format!("{name}.bias"), vec![cout], 0.0);
        b.record(
            name,
            LayerKind::Conv3d {
                cin,
                cout,
                kernel,
                dilation,
            },
            resolution,
        );
        Self {
            weight,
            bias,
            opts: Conv3dOpts::same(kernel, dilation),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv3d(p.var(self.weight), Some(p.var(self.bias)), self.opts)
    }
}

/// Stride-2 transposed convolution doubling every extent.
#[derive(Clone, Debug)]
pub struct UpConv {
    pub weight: usize,
    pub bias: usize,
}

impl UpConv {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, level: u32) -> Self {
        let weight = b.init.weight(&format!("{name}.weight"), vec![cin, cout, 2, 2, 2], cin);
        let bias = b.init.constant(&format!("{name}.bias"), vec![cout], 0.0);
        b.record(
            name,
            LayerKind::ConvTranspose3d { cin, cout, stride: 2 },
            Resolution::Level(level),
        );
        Self { weight, bias }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv_transpose3d(p.var(self.weight), Some(p.var(self.bias)), 2)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: usize,
    pub beta: usize,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, channels: usize, level: u32) -> Self {
        let gamma = b.init.constant(&format!("{name}.gamma"), vec![channels], 1.0);
        let beta = b.init.constant(&format!("{name}.beta"), vec![channels], 0.0);
        b.record(
            name,
            LayerKind::GroupNorm {
                channels,
                groups: b.gn_groups,
            },
            Resolution::Level(level),
        );
        Self {
            gamma,
            beta,
            groups: b.gn_groups,
            eps: b.gn_eps,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.group_norm(self.groups, p.var(self.gamma), p.var(self.beta), self.eps)
    }
}

/// Squeeze-and-excitation gate: `x * sigmoid(W2 relu(W1 avgpool(x)))`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub reduce: Conv,
    pub expand: Conv,
}

impl ChannelAttention {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, channels: usize, level: u32) -> Self {
        let reduced = channels / b.ca_reduction;
        b.record(
            &format!("{name}.pool"),
            LayerKind::GlobalAvgPool { channels },
            Resolution::Pooled,
        );
        let reduce = Conv::new(b, &format!("{name}.reduce"), channels, reduced, 1, 1, Resolution::Pooled);
        b.record(
            &format!("{name}.relu"),
            LayerKind::Relu { channels: reduced },
            Resolution::Pooled,
        );
        let expand = Conv::new(b, &format!("{name}.expand"), reduced, channels, 1, 1, Resolution::Pooled);
        b.record(
            &format!("{name}.gate"),
            LayerKind::Sigmoid { channels },
            Resolution::Pooled,
        );
        b.record(
            &format!("{name}.apply"),
            LayerKind::Mul { channels },
            Resolution::Level(level),
        );
        Self { reduce, expand }
    }

    /// Per-channel gate values `[B, C, 1, 1, 1]`.
    pub fn gate<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = self.reduce.forward(p, x.global_avg_pool()?)?.relu()?;
        self.expand.forward(p, s)?.sigmoid()
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.mul(self.gate(p, x)?)
    }
}

/// ReLU, group norm, dropout, then (optionally) channel attention.
#[derive(Clone, Debug)]
pub struct Fcm {
    pub norm: GroupNorm,
    pub dropout: Option<f64>,
    pub attention: Option<ChannelAttention>,
}

impl Fcm {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, channels: usize, level: u32, with_attention: bool) -> Self {
        let res = Resolution::Level(level);
        b.record(&format!("{name}.relu"), LayerKind::Relu { channels }, res);
        let norm = GroupNorm::new(b, &format!("{name}.norm"), channels, level);
        let dropout = b.dropout;
        if let Some(rate) = dropout {
            b.record(&format!("{name}.dropout"), LayerKind::Dropout { channels, rate }, res);
        }
        let attention = with_attention.then(|| ChannelAttention::new(b, &format!("{name}.ca"), channels, level));
        Self {
            norm,
            dropout,
            attention,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>, ctx: &ForwardCtx) -> Result<Var<'t, T>> {
        let h = self.norm.forward(p, x.relu()?)?;
        let h = ctx.dropout(h, self.dropout)?;
        match &self.attention {
            Some(ca) => ca.forward(p, h),
            None => Ok(h),
        }
    }
}

/// Multi-scale fusion: pointwise, local and dilated-context branches, each
/// calibrated, with `out = pointwise + fuse(local + context)`.
#[derive(Clone, Debug)]
pub struct Msff {
    pub pointwise: Conv,
    pub local: Conv,
    pub context: Conv,
    pub calibrate: [Fcm; 3],
    pub fuse: Conv,
}

impl Msff {
    /// `context_kernel` and `dilation` configure the third branch.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        context_kernel: usize,
        dilation: usize,
        level: u32,
    ) -> Self {
        let res = Resolution::Level(level);
        let pointwise = Conv::new(b, &format!("{name}.pointwise"), cin, cout, 1, 1, res);
        let f0 = Fcm::new(b, &format!("{name}.pointwise_fcm"), cout, level, true);
        let local = Conv::new(b, &format!("{name}.local"), cin, cout, 3, 1, res);
        let f1 = Fcm::new(b, &format!("{name}.local_fcm"), cout, level, true);
        let context = Conv::new(b, &format!("{name}.context"), cin, cout, context_kernel, dilation, res);
        let f2 = Fcm::new(b, &format!("{name}.context_fcm"), cout, level, true);
        b.record(&format!("{name}.merge"), LayerKind::Add { channels: cout }, res);
        let fuse = Conv::new(b, &format!("{name}.fuse"), cout, cout, 1, 1, res);
        b.record(&format!("{name}.residual"), LayerKind::Add { channels: cout }, res);
        Self {
            pointwise,
            local,
            context,
            calibrate: [f0, f1, f2],
            fuse,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>, ctx: &ForwardCtx) -> Result<Var<'t, T>> {
        let b1 = self.calibrate[0].forward(p, self.pointwise.forward(p, x)?, ctx)?;
        let b2 = self.calibrate[1].forward(p, self.local.forward(p, x)?, ctx)?;
        let b3 = self.calibrate[2].forward(p, self.context.forward(p, x)?, ctx)?;
        b1.add(self.fuse.forward(p, b2.add(b3)?)?)
    }
}

/// Ablation stand-in for [`Msff`]: one 3x3x3 convolution and an FCM without
/// channel attention.
#[derive(Clone, Debug)]
pub struct PlainStage {
    pub conv: Conv,
    pub calibrate: Fcm,
}

impl PlainStage {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, level: u32) -> Self {
        let conv = Conv::new(b, &format!("{name}.conv"), cin, cout, 3, 1, Resolution::Level(level));
        let calibrate = Fcm::new(b, &format!("{name}.fcm"), cout, level, false);
        Self { conv, calibrate }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>, ctx: &ForwardCtx) -> Result<Var<'t, T>> {
        self.calibrate.forward(p, self.conv.forward(p, x)?, ctx)
    }
}

#[derive(Clone, Debug)]
pub enum Stage {
    Msff(Msff),
    Plain(PlainStage),
}

impl Stage {
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>, ctx: &ForwardCtx) -> Result<Var<'t, T>> {
        match self {
            Stage::Msff(m) => m.forward(p, x, ctx),
            Stage::Plain(s) => s.forward(p, x, ctx),
        }
    }
}

/// Adaptive attention: key/query/value projections, softmax attention, and
/// `out = x + gamma * x * M` where `M` is the attended value map and `gamma`
/// a per-channel scale starting at zero.
#[derive(Clone, Debug)]
pub struct Aam {
    pub key: Conv,
    pub query: Conv,
    pub value: Conv,
    pub gamma: usize,
    pub dropout: Option<f64>,
    pub mode: AamMode,
    pub voxel_cap: usize,
}

impl Aam {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, channels: usize, level: u32, mode: AamMode, voxel_cap: usize) -> Self {
        let res = Resolution::Level(level);
        let dropout = b.dropout;
        let branch = |b: &mut Builder<'_, T>, which: &str| {
            let conv = Conv::new(b, &format!("{name}.{which}"), channels, channels, 1, 1, res);
            if let Some(rate) = dropout {
                b.record(&format!("{name}.{which}_dropout"), LayerKind::Dropout { channels, rate }, res);
            }
            conv
        };
        let key = branch(b, "key");
        let query = branch(b, "query");
        let value = branch(b, "value");
        b.record(&format!("{name}.attention"), LayerKind::Attention { channels, mode }, res);
        let gamma = b.init.constant(&format!("{name}.gamma"), vec![1, channels, 1, 1, 1], 0.0);
        b.record(&format!("{name}.gamma"), LayerKind::Scale { channels }, res);
        b.record(&format!("{name}.modulate"), LayerKind::Mul { channels }, res);
        b.record(&format!("{name}.residual"), LayerKind::Add { channels }, res);
        Self {
            key,
            query,
            value,
            gamma,
            dropout,
            mode,
            voxel_cap,
        }
    }

    /// Attended value map `M` with the input's shape.
    pub fn attend<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>, ctx: &ForwardCtx) -> Result<Var<'t, T>> {
        let shape = x.shape();
        let [b, c, d, h, w] = shape[..] else {
            return Err(Error::Shape(format!("attention expects rank 5, got {shape:?}")));
        };
        let n = d * h * w;
        if self.mode == AamMode::Spatial && n > self.voxel_cap {
            return Err(Error::AttentionCap {
                voxels: n,
                cap: self.voxel_cap,
            });
        }
        let project = |conv: &Conv| -> Result<Var<'t, T>> {
            ctx.dropout(conv.forward(p, x)?, self.dropout)?.reshape(vec![b, c, n])
        };
        let k = project(&self.key)?;
        let q = project(&self.query)?;
        let v = project(&self.value)?;
        let m = match self.mode {
            AamMode::Channel => {
                let a = k.contract(q, Contraction::NT)?.scale(1.0 / (n as f64).sqrt())?.softmax(2)?;
                a.contract(v, Contraction::NN)?
            }
            AamMode::Spatial => {
                let a = k.contract(q, Contraction::TN)?.scale(1.0 / (c as f64).sqrt())?.softmax(2)?;
                v.contract(a, Contraction::NT)?
            }
        };
        m.reshape(shape)
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>, ctx: &ForwardCtx) -> Result<Var<'t, T>> {
        let m = self.attend(p, x, ctx)?;
        x.add(x.mul(p.var(self.gamma))?.mul(m)?)
    }
}
