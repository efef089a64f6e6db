//! Stems and the first three blocks of the scaled EfficientNet backbones.

use std::fmt;
use std::str::FromStr;

use crate::blocks::{append_mbconv, MBConvKind, MBConvSpec, BACKBONE_SE_RATIO, DROPOUT_RATE};
use crate::error::{Error, Result};
use crate::graph::{Dims, LayerGraph, LayerOp, NodeId};
use crate::kernels::pointwise::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BackboneScale {
    B0,
    B1,
    B2,
    B3,
    B4,
    B5,
    B7,
}

/// One stage: the first unit may downsample, the rest are skip variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage {
    pub kernel: usize,
    pub channels: usize,
    pub repeats: usize,
    pub first_stride: usize,
    pub first_kind: MBConvKind,
    pub repeat_kind: MBConvKind,
}

impl BackboneScale {
    pub const ALL: [BackboneScale; 7] = [
        BackboneScale::B0,
        BackboneScale::B1,
        BackboneScale::B2,
        BackboneScale::B3,
        BackboneScale::B4,
        BackboneScale::B5,
        BackboneScale::B7,
    ];

    /// Stem width and `(channels, repeats)` of blocks 1–3.
    fn table(self) -> (usize, [(usize, usize); 3]) {
        match self {
            BackboneScale::B0 => (32, [(16, 1), (24, 2), (40, 2)]),
            BackboneScale::B1 => (32, [(16, 2), (24, 3), (40, 3)]),
            BackboneScale::B2 => (32, [(16, 2), (24, 3), (48, 3)]),
            BackboneScale::B3 => (40, [(24, 2), (32, 3), (48, 3)]),
            BackboneScale::B4 => (48, [(24, 2), (32, 4), (56, 4)]),
            BackboneScale::B5 => (48, [(24, 3), (40, 5), (64, 5)]),
            BackboneScale::B7 => (64, [(32, 4), (48, 7), (80, 7)]),
        }
    }

    /// Depth multiplier `α^φ` of the scale.
    pub fn alpha_phi(self) -> f64 {
        match self {
            BackboneScale::B0 => 1.0,
            BackboneScale::B1 => 1.2,
            BackboneScale::B2 => 1.4,
            BackboneScale::B3 => 1.7,
            BackboneScale::B4 => 2.1,
            BackboneScale::B5 => 2.5,
            BackboneScale::B7 => 3.6,
        }
    }

    pub fn stem_channels(self) -> usize {
        self.table().0
    }

    pub fn stages(self) -> [Stage; 3] {
        let (_, rows) = self.table();
        let stage = |i: usize, kernel, first_stride, first_kind, repeat_kind| Stage {
            kernel,
            channels: rows[i].0,
            repeats: rows[i].1,
            first_stride,
            first_kind,
            repeat_kind,
        };
        [
            stage(0, 3, 1, MBConvKind::MBConv1, MBConvKind::MBConv1Star),
            stage(1, 3, 2, MBConvKind::MBConv6, MBConvKind::MBConv6Star),
            stage(2, 5, 2, MBConvKind::MBConv6, MBConvKind::MBConv6Star),
        ]
    }

    /// Output channels after `blocks` blocks.
    pub fn channels(self, blocks: usize) -> usize {
        self.stages()[blocks - 1].channels
    }
}

impl fmt::Display for BackboneScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for BackboneScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        BackboneScale::ALL
            .into_iter()
            .find(|b| b.to_string().eq_ignore_ascii_case(t))
            .ok_or_else(|| Error::UnsupportedScale(t.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackboneSpec {
    pub scale: BackboneScale,
    pub num_blocks: usize,
    pub se_ratio: f64,
    pub dropout_rate: f64,
}

impl BackboneSpec {
    pub fn new(scale: BackboneScale, num_blocks: usize) -> Result<Self> {
        if !(2..=3).contains(&num_blocks) {
            return Err(Error::InvalidSpec(format!(
                "backbone truncation to {num_blocks} blocks (expected 2 or 3)"
            )));
        }
        Ok(Self {
            scale,
            num_blocks,
            se_ratio: BACKBONE_SE_RATIO,
            dropout_rate: DROPOUT_RATE,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.scale.channels(self.num_blocks)
    }

    /// Overall stride of the truncated backbone.
    pub fn stride(&self) -> usize {
        1 << self.num_blocks
    }

    /// Block specs in execution order, tagged `(block index, unit index)`.
    pub fn units(&self) -> Vec<(usize, usize, MBConvSpec)> {
        let mut m = self.scale.stem_channels();
        let mut out = Vec::new();
        for (b, st) in self.scale.stages().iter().take(self.num_blocks).enumerate() {
            for u in 0..st.repeats {
                let (kind, stride) = if u == 0 {
                    (st.first_kind, st.first_stride)
                } else {
                    (st.repeat_kind, 1)
                };
                out.push((
                    b + 1,
                    u,
                    MBConvSpec {
                        se_ratio: self.se_ratio,
                        dropout_rate: self.dropout_rate,
                        ..MBConvSpec::new(kind, st.kernel, st.channels, stride, m)
                    },
                ));
                m = st.channels;
            }
        }
        out
    }
}

/// Append stem and blocks under `prefix`; returns the last block's output.
pub fn append_backbone(
    g: &mut LayerGraph,
    prefix: &str,
    spec: &BackboneSpec,
    input: NodeId,
) -> Result<NodeId> {
    let mut x = g.add(
        format!("{prefix}.stem.conv"),
        LayerOp::Conv2d {
            out: spec.scale.stem_channels(),
            kernel: 3,
            stride: 2,
            bias: false,
        },
        &[input],
    )?;
    x = g.add(format!("{prefix}.stem.bn"), LayerOp::BatchNorm, &[x])?;
    x = g.add(
        format!("{prefix}.stem.act"),
        LayerOp::Activation(Activation::Swish),
        &[x],
    )?;
    for (b, u, unit) in spec.units() {
        x = append_mbconv(g, &format!("{prefix}.b{b}.u{u}"), &unit, x)?;
    }
    Ok(x)
}

/// Graph with a single RGB input named `image` and output `features`.
pub fn build_backbone(spec: &BackboneSpec, h: usize, w: usize) -> Result<LayerGraph> {
    let mut g = LayerGraph::new();
    let x = g.input("image", Dims::new(3, h, w))?;
    let y = append_backbone(&mut g, "backbone", spec, x)?;
    g.set_output("features", y);
    Ok(g)
}
