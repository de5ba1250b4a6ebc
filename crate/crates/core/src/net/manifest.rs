//! Layer manifest and parameter / FLOP accounting.
//!
//! Each manifest entry names one layer, its kind with channel counts, and
//! the resolution it runs at. Counting rules per layer:
//!
//! | kind | params | FLOPs |
//! |---|---|---|
//! | conv3d | `cout*cin*k^3 + cout` | `2*cin*cout*k^3*N_out` |
//! | conv_transpose3d | `cin*cout*s^3 + cout` | `2*cin*cout*N_out` |
//! | group_norm | `2*C` | `C*N` |
//! | scale | `C` | `C*N` |
//! | attention (channel) | 0 | `4*C*C*N + C*C` |
//! | attention (spatial) | 0 | `4*N*N*C + N*N` |
//! | relu, sigmoid, dropout, add, mul, pooling | 0 | one per output element |
//! | concat | 0 | 0 |
//!
//! Bias additions are not counted as FLOPs. `N` is the voxel count at the
//! layer's resolution.

use serde::{Deserialize, Serialize};

use super::AamMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv3d { cin: usize, cout: usize, kernel: usize, dilation: usize },
    ConvTranspose3d { cin: usize, cout: usize, stride: usize },
    MaxPool3d { channels: usize },
    GlobalAvgPool { channels: usize },
    GroupNorm { channels: usize, groups: usize },
    Relu { channels: usize },
    Sigmoid { channels: usize },
    Dropout { channels: usize, rate: f64 },
    Add { channels: usize },
    Mul { channels: usize },
    Concat { channels: usize },
    Attention { channels: usize, mode: AamMode },
    /// Learned per-channel multiplier.
    Scale { channels: usize },
}

/// Spatial resolution of a layer's output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    /// Input extents halved `n` times.
    Level(u32),
    /// A single voxel after global pooling.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub resolution: Resolution,
}

impl LayerInfo {
    pub fn params(&self) -> usize {
        match self.kind {
            LayerKind::Conv3d { cin, cout, kernel, .. } => cout * cin * kernel.pow(3) + cout,
            LayerKind::ConvTranspose3d { cin, cout, stride } => cin * cout * stride.pow(3) + cout,
            LayerKind::GroupNorm { channels, .. } => 2 * channels,
            LayerKind::Scale { channels } => channels,
            _ => 0,
        }
    }

    /// FLOPs of this layer for network input extents `dims`.
    pub fn flops(&self, dims: [usize; 3]) -> u64 {
        let n = match self.resolution {
            Resolution::Level(l) => dims.iter().map(|&d| d >> l).product::<usize>(),
            Resolution::Pooled => 1,
        } as u64;
        let u = |v: usize| v as u64;
        match self.kind {
            LayerKind::Conv3d { cin, cout, kernel, .. } => 2 * u(cin * cout * kernel.pow(3)) * n,
            LayerKind::ConvTranspose3d { cin, cout, .. } => 2 * u(cin * cout) * n,
            LayerKind::Attention { channels, mode } => {
                let c = u(channels);
                match mode {
                    AamMode::Channel => 4 * c * c * n + c * c,
                    AamMode::Spatial => 4 * n * n * c + n * n,
                }
            }
            LayerKind::Concat { .. } => 0,
            LayerKind::MaxPool3d { channels }
            | LayerKind::GlobalAvgPool { channels }
            | LayerKind::GroupNorm { channels, .. }
            | LayerKind::Relu { channels }
            | LayerKind::Sigmoid { channels }
            | LayerKind::Dropout { channels, .. }
            | LayerKind::Add { channels }
            | LayerKind::Mul { channels }
            | LayerKind::Scale { channels } => u(channels) * n,
        }
    }
}

/// `(parameter count, FLOPs)` of a manifest at input extents `dims`.
pub fn count_params_flops(layers: &[LayerInfo], dims: [usize; 3]) -> (usize, u64) {
    layers
        .iter()
        .fold((0, 0), |(p, f), l| (p + l.params(), f + l.flops(dims)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(cin: usize, cout: usize, kernel: usize) -> LayerInfo {
        LayerInfo {
            name: "c".into(),
            kind: LayerKind::Conv3d {
                cin,
                cout,
                kernel,
                dilation: 1,
            },
            resolution: Resolution::Level(0),
        }
    }

    #[test]
    fn single_conv_counts() {
        assert_eq!(count_params_flops(&[conv(1, 1, 3)], [4, 4, 4]), (28, 3456));
    }

    #[test]
    fn pooled_resolution_is_one_voxel() {
        let mut l = conv(4, 2, 1);
        l.resolution = Resolution::Pooled;
        assert_eq!(l.flops([32, 32, 16]), 16);
    }
}
