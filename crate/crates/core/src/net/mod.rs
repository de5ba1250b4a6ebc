//! The segmentation network: a four-stage encoder of multi-scale fusion
//! blocks, a three-stage decoder with recalibrated skips and attention, and
//! a three-channel sigmoid head (ET, WT, TC).

pub mod blocks;
pub mod checkpoint;
pub mod manifest;
pub mod params;
pub mod suite;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DropoutMode, Scalar, Tape, Tensor, Var};
use blocks::{Aam, Builder, Conv, Msff, PlainStage, Stage, UpConv};
pub use blocks::ForwardCtx;
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_model, read_checkpoint, save_model, write_checkpoint};
pub use manifest::{count_params_flops, LayerInfo, LayerKind, Resolution};
pub use params::{Bound, Param, ParamInit, ParamStore};

/// Which Gram matrix the decoder attention builds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AamMode {
    /// `C x C` over channels; cheap at any resolution.
    Channel,
    /// `N x N` over voxels; limited by `spatial_attention_voxel_cap`.
    Spatial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// 5 with the prior channel, 4 without.
    pub in_channels: usize,
    pub out_channels: usize,
    pub stage_widths: [usize; 4],
    pub gn_groups: usize,
    pub dropout_rate: f64,
    /// Dilation of the context branch when `msff_kernel` is 3.
    pub msff_dilation: usize,
    /// Kernel of the context branch. Kernels other than 3 run undilated.
    pub msff_kernel: usize,
    pub ca_reduction: usize,
    pub aam_mode: AamMode,
    pub spatial_attention_voxel_cap: usize,
    pub use_msff: bool,
    pub use_aam: bool,
    /// When false the network has no dropout layers at all.
    pub mc_dropout: bool,
    /// Attention runs on the merged skip/upsampled features (true) or on
    /// the upsampled features before the merge (false).
    pub aam_after_merge: bool,
    pub gn_eps: f64,
    pub init_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 5,
            out_channels: 3,
            stage_widths: [8, 16, 32, 64],
            gn_groups: 4,
            dropout_rate: 0.2,
            msff_dilation: 2,
            msff_kernel: 3,
            ca_reduction: 2,
            aam_mode: AamMode::Channel,
            spatial_attention_voxel_cap: 32768,
            use_msff: true,
            use_aam: true,
            mc_dropout: true,
            aam_after_merge: true,
            gn_eps: 1e-5,
            init_seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("in_channels and out_channels must be >= 1".into());
        }
        if self.gn_groups == 0 || self.ca_reduction == 0 {
            return bad("gn_groups and ca_reduction must be >= 1".into());
        }
        for &w in &self.stage_widths {
            if w == 0 || w % self.gn_groups != 0 || w % self.ca_reduction != 0 {
                return bad(format!(
                    "stage width {w} must be a positive multiple of gn_groups {} and ca_reduction {}",
                    self.gn_groups, self.ca_reduction
                ));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.msff_kernel % 2 == 0 || self.msff_dilation == 0 {
            return bad("msff_kernel must be odd and msff_dilation >= 1".into());
        }
        if !(self.gn_eps > 0.0) {
            return bad("gn_eps must be > 0".into());
        }
        Ok(())
    }

    fn context_branch(&self) -> (usize, usize) {
        if self.msff_kernel == 3 {
            (3, self.msff_dilation)
        } else {
            (self.msff_kernel, 1)
        }
    }
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: UpConv,
    skip: Conv,
    attention: Option<Aam>,
    stage: Stage,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: Vec<Stage>,
    decoder: Vec<DecoderLevel>,
    head: Conv,
}

/// Network structure plus its parameter values.
#[derive(Clone, Debug)]
pub struct Network<T> {
    config: NetworkConfig,
    layout: Layout,
    params: ParamStore<T>,
    layers: Vec<LayerInfo>,
}

fn build<T: Scalar>(config: &NetworkConfig, store: &mut ParamStore<T>) -> (Layout, Vec<LayerInfo>) {
    let mut b = Builder::new(store, config);
    let w = config.stage_widths;
    let (ctx_kernel, ctx_dilation) = config.context_branch();
    let stage = |b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, level: u32| {
        if config.use_msff {
            Stage::Msff(Msff::new(b, name, cin, cout, ctx_kernel, ctx_dilation, level))
        } else {
            Stage::Plain(PlainStage::new(b, name, cin, cout, level))
        }
    };

    let mut encoder = Vec::new();
    let mut cin = config.in_channels;
    for (i, &width) in w.iter().enumerate() {
        let level = i as u32;
        encoder.push(stage(&mut b, &format!("enc{i}"), cin, width, level));
        if i < 3 {
            b.record(
                &format!("enc{i}.pool"),
                LayerKind::MaxPool3d { channels: width },
                Resolution::Level(level + 1),
            );
        }
        cin = width;
    }

    let mut decoder = Vec::new();
    for l in (0..3).rev() {
        let level = l as u32;
        let name = format!("dec{l}");
        let up = UpConv::new(&mut b, &format!("{name}.up"), w[l + 1], w[l], level);
        let skip = Conv::new(&mut b, &format!("{name}.skip"), w[l], w[l], 1, 1, Resolution::Level(level));
        let aam = |b: &mut Builder<'_, T>, channels: usize| {
            Aam::new(
                b,
                &format!("{name}.aam"),
                channels,
                level,
                config.aam_mode,
                config.spatial_attention_voxel_cap,
            )
        };
        let mut attention = None;
        if config.use_aam && !config.aam_after_merge {
            attention = Some(aam(&mut b, w[l]));
        }
        b.record(
            &format!("{name}.concat"),
            LayerKind::Concat { channels: 2 * w[l] },
            Resolution::Level(level),
        );
        if config.use_aam && config.aam_after_merge {
            attention = Some(aam(&mut b, 2 * w[l]));
        }
        let stage = stage(&mut b, &format!("{name}.stage"), 2 * w[l], w[l], level);
        decoder.push(DecoderLevel {
            up,
            skip,
            attention,
            stage,
        });
    }

    let head = Conv::new(&mut b, "head", w[0], config.out_channels, 1, 1, Resolution::Level(0));
    b.record(
        "head.sigmoid",
        LayerKind::Sigmoid {
            channels: config.out_channels,
        },
        Resolution::Level(0),
    );
    let layers = std::mem::take(&mut b.layers);
    (
        Layout {
            encoder,
            decoder,
            head,
        },
        layers,
    )
}

impl<T: Scalar> Network<T> {
    /// Freshly initialized network.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let (layout, layers) = build(&config, &mut params);
        Ok(Self {
            config,
            layout,
            params,
            layers,
        })
    }

    /// Network with the given parameter values, which must match the
    /// configuration's names and shapes in order.
    pub fn from_params(config: NetworkConfig, store: ParamStore<T>) -> Result<Self> {
        let mut net = Self::new(config)?;
        if store.len() != net.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, got {}",
                net.params.len(),
                store.len()
            )));
        }
        for (i, p) in store.iter().enumerate() {
            let want = net.params.get(i);
            if want.name != p.name {
                return Err(Error::Format(format!(
                    "parameter {i}: expected {}, got {}",
                    want.name, p.name
                )));
            }
            net.params.set(i, p.value.clone())?;
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    /// `(parameter count, FLOPs)` at input extents `dims`.
    pub fn count_params_flops(&self, dims: [usize; 3]) -> (usize, u64) {
        count_params_flops(&self.layers, dims)
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
        }
    }

    /// Runs the network on `x` (`[B, in_channels, D, H, W]`, extents
    /// divisible by 8) and returns probabilities `[B, out_channels, D, H, W]`.
    pub fn forward<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>, ctx: &ForwardCtx) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if shape.len() != 5 || shape[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "network expects [B, {}, D, H, W], got {shape:?}",
                self.config.in_channels
            )));
        }
        if shape[2..].iter().any(|&n| n == 0 || n % 8 != 0) {
            return Err(Error::Shape(format!(
                "spatial extents {:?} must be positive multiples of 8",
                &shape[2..]
            )));
        }
        let l = &self.layout;
        let mut skips = Vec::with_capacity(3);
        let mut h = x;
        for (i, stage) in l.encoder.iter().enumerate() {
            h = stage.forward(p, h, ctx)?;
            if i < 3 {
                skips.push(h);
                h = h.maxpool3d()?;
            }
        }
        for level in &l.decoder {
            let mut up = level.up.forward(p, h)?;
            let skip = level.skip.forward(p, skips.pop().expect("one skip per level"))?;
            if !self.config.aam_after_merge {
                if let Some(a) = &level.attention {
                    up = a.forward(p, up, ctx)?;
                }
            }
            let mut merged = Var::concat_channels(&[skip, up])?;
            if self.config.aam_after_merge {
                if let Some(a) = &level.attention {
                    merged = a.forward(p, merged, ctx)?;
                }
            }
            h = level.stage.forward(p, merged, ctx)?;
        }
        l.head.forward(p, h)?.sigmoid()
    }

    /// One forward pass outside of training.
    pub fn predict(&self, input: &Tensor<T>, mode: DropoutMode, seed: u64) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let x = tape.constant(input.clone());
        let out = self.forward(&p, x, &ForwardCtx::new(mode, seed))?;
        Ok(out.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_has_four_convs_and_three_pools_in_encoder() {
        let net = Network::<f32>::new(NetworkConfig {
            use_msff: false,
            use_aam: false,
            mc_dropout: false,
            in_channels: 4,
            ..Default::default()
        })
        .unwrap();
        let enc: Vec<_> = net.layers().iter().filter(|l| l.name.starts_with("enc")).collect();
        let convs = enc.iter().filter(|l| matches!(l.kind, LayerKind::Conv3d { .. })).count();
        let pools = enc.iter().filter(|l| matches!(l.kind, LayerKind::MaxPool3d { .. })).count();
        assert_eq!((convs, pools), (4, 3));
    }

    #[test]
    fn forward_shape_and_range() {
        let net = Network::<f32>::new(NetworkConfig::default()).unwrap();
        let x = Tensor::from_fn(vec![1, 5, 8, 8, 8], |i| ((i % 13) as f32 - 6.0) / 6.0);
        let y = net.predict(&x, DropoutMode::Off, 0).unwrap();
        assert_eq!(y.shape(), &[1, 3, 8, 8, 8]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn indivisible_extent_rejected() {
        let net = Network::<f32>::new(NetworkConfig::default()).unwrap();
        let x = Tensor::zeros(vec![1, 5, 8, 8, 4]);
        assert!(net.predict(&x, DropoutMode::Off, 0).is_err());
    }

    #[test]
    fn params_match_store() {
        let net = Network::<f32>::new(NetworkConfig::default()).unwrap();
        assert_eq!(net.count_params_flops([8, 8, 8]).0, net.params().numel());
    }
}
