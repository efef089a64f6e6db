//! MBConv blocks, squeeze-and-excitation and the Mobile DenseNet detection
//! block.

use std::fmt;

use crate::error::{Error, Result};
use crate::graph::{Dims, GraphRun, LayerGraph, LayerOp, Mode, NodeId};
use crate::kernels::pointwise::Activation;
use crate::tensor::{Element, ParamStore, Tensor};

pub const BACKBONE_SE_RATIO: f64 = 0.25;
pub const DETECTION_SE_RATIO: f64 = 0.1;
pub const DROPOUT_RATE: f64 = 0.2;
pub const UNITS_PER_DENSENET: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MBConvKind {
    MBConv1,
    /// With dropout and skip connection.
    MBConv1Star,
    MBConv6,
    MBConv6Star,
    /// E-swish activations and `6·B` expansion.
    EMBConv6,
}

impl MBConvKind {
    pub fn has_skip(self) -> bool {
        matches!(self, MBConvKind::MBConv1Star | MBConvKind::MBConv6Star)
    }

    pub fn activation(self) -> Activation {
        match self {
            MBConvKind::EMBConv6 => Activation::eswish(),
            _ => Activation::Swish,
        }
    }
}

impl fmt::Display for MBConvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MBConvKind::MBConv1 => "MBConv1",
            MBConvKind::MBConv1Star => "MBConv1*",
            MBConvKind::MBConv6 => "MBConv6",
            MBConvKind::MBConv6Star => "MBConv6*",
            MBConvKind::EMBConv6 => "E-MBConv6",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MBConvSpec {
    pub kind: MBConvKind,
    pub kernel: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub in_channels: usize,
    /// Reduced SE width is `max(1, floor(in_channels · se_ratio))`.
    pub se_ratio: f64,
    pub dropout_rate: f64,
}

impl MBConvSpec {
    pub fn new(
        kind: MBConvKind,
        kernel: usize,
        out_channels: usize,
        stride: usize,
        in_channels: usize,
    ) -> Self {
        let se_ratio = if kind == MBConvKind::EMBConv6 {
            DETECTION_SE_RATIO
        } else {
            BACKBONE_SE_RATIO
        };
        Self {
            kind,
            kernel,
            out_channels,
            stride,
            in_channels,
            se_ratio,
            dropout_rate: DROPOUT_RATE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(format!("{self}: {msg}")));
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if !(1..=2).contains(&self.stride) {
            return bad(format!("stride {} must be 1 or 2", self.stride));
        }
        if self.kind.has_skip() && (self.stride != 1 || self.in_channels != self.out_channels) {
            return bad("skip connection needs stride 1 and equal input/output channels".into());
        }
        if self.kind == MBConvKind::EMBConv6 && self.stride != 1 {
            return bad("E-MBConv6 never downsamples".into());
        }
        if !(self.se_ratio > 0.0 && self.se_ratio <= 1.0) {
            return bad(format!("SE ratio {} outside (0, 1]", self.se_ratio));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    pub fn expanded_channels(&self) -> usize {
        match self.kind {
            MBConvKind::MBConv1 | MBConvKind::MBConv1Star => self.in_channels,
            MBConvKind::MBConv6 | MBConvKind::MBConv6Star => 6 * self.in_channels,
            MBConvKind::EMBConv6 => 6 * self.out_channels,
        }
    }

    pub fn has_expansion(&self) -> bool {
        !matches!(self.kind, MBConvKind::MBConv1 | MBConvKind::MBConv1Star)
    }

    pub fn se_channels(&self) -> usize {
        ((self.in_channels as f64 * self.se_ratio).floor() as usize).max(1)
    }

    fn has_dropout(&self) -> bool {
        self.kind.has_skip() || self.kind == MBConvKind::EMBConv6
    }
}

impl fmt::Display for MBConvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}({}×{}, {}, {}) on {} channels",
            self.kind, self.kernel, self.kernel, self.out_channels, self.stride, self.in_channels
        )
    }
}

fn conv(out: usize, kernel: usize, stride: usize, bias: bool) -> LayerOp {
    LayerOp::Conv2d {
        out,
        kernel,
        stride,
        bias,
    }
}

/// Append an MBConv block reading from `input`; returns the block output.
pub fn append_mbconv(
    g: &mut LayerGraph,
    prefix: &str,
    spec: &MBConvSpec,
    input: NodeId,
) -> Result<NodeId> {
    spec.validate()?;
    let got = g.dims(input).c;
    if got != spec.in_channels {
        return Err(Error::InvalidSpec(format!(
            "{prefix}: {spec} fed {got} channels"
        )));
    }
    let act = spec.kind.activation();
    let e = spec.expanded_channels();
    let mut x = input;
    if spec.has_expansion() {
        x = g.add(format!("{prefix}.expand.conv"), conv(e, 1, 1, false), &[x])?;
        x = g.add(format!("{prefix}.expand.bn"), LayerOp::BatchNorm, &[x])?;
        x = g.add(
            format!("{prefix}.expand.act"),
            LayerOp::Activation(act),
            &[x],
        )?;
    }
    x = g.add(
        format!("{prefix}.dw.conv"),
        LayerOp::DepthwiseConv2d {
            kernel: spec.kernel,
            stride: spec.stride,
        },
        &[x],
    )?;
    x = g.add(format!("{prefix}.dw.bn"), LayerOp::BatchNorm, &[x])?;
    x = g.add(format!("{prefix}.dw.act"), LayerOp::Activation(act), &[x])?;

    let s = g.add(format!("{prefix}.se.pool"), LayerOp::GlobalAvgPool, &[x])?;
    let s = g.add(
        format!("{prefix}.se.reduce"),
        conv(spec.se_channels(), 1, 1, true),
        &[s],
    )?;
    let s = g.add(format!("{prefix}.se.act"), LayerOp::Activation(act), &[s])?;
    let s = g.add(format!("{prefix}.se.expand"), conv(e, 1, 1, true), &[s])?;
    let s = g.add(
        format!("{prefix}.se.gate"),
        LayerOp::Activation(Activation::Sigmoid),
        &[s],
    )?;
    x = g.add(format!("{prefix}.se.scale"), LayerOp::ChannelGate, &[x, s])?;

    x = g.add(
        format!("{prefix}.project.conv"),
        conv(spec.out_channels, 1, 1, false),
        &[x],
    )?;
    x = g.add(format!("{prefix}.project.bn"), LayerOp::BatchNorm, &[x])?;
    if spec.has_dropout() {
        x = g.add(
            format!("{prefix}.dropout"),
            LayerOp::Dropout(spec.dropout_rate),
            &[x],
        )?;
    }
    if spec.kind.has_skip() {
        x = g.add(format!("{prefix}.add"), LayerOp::Add, &[x, input])?;
    }
    Ok(x)
}

/// Standalone graph for one block, with input `input` and output `output`.
pub fn build_mbconv(spec: &MBConvSpec, h: usize, w: usize) -> Result<LayerGraph> {
    let mut g = LayerGraph::new();
    let x = g.input("input", Dims::new(spec.in_channels, h, w))?;
    let y = append_mbconv(&mut g, "block", spec, x)?;
    g.set_output("output", y);
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MobileDenseNetSpec {
    pub width: usize,
    pub se_ratio: f64,
    pub dropout_rate: f64,
}

impl MobileDenseNetSpec {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            se_ratio: DETECTION_SE_RATIO,
            dropout_rate: DROPOUT_RATE,
        }
    }

    pub fn out_channels(&self) -> usize {
        UNITS_PER_DENSENET * self.width
    }

    /// Input width of unit `i` (0-based).
    pub fn unit_in_channels(&self, i: usize) -> usize {
        (i + 1) * self.width
    }

    pub fn unit_spec(&self, i: usize) -> MBConvSpec {
        MBConvSpec {
            se_ratio: self.se_ratio,
            dropout_rate: self.dropout_rate,
            ..MBConvSpec::new(
                MBConvKind::EMBConv6,
                5,
                self.width,
                1,
                self.unit_in_channels(i),
            )
        }
    }
}

/// Append a Mobile DenseNet. An input wider or narrower than `C` is first
/// projected to `C` by a 1×1 conv, BN and E-swish.
pub fn append_mobile_densenet(
    g: &mut LayerGraph,
    prefix: &str,
    spec: &MobileDenseNetSpec,
    input: NodeId,
) -> Result<NodeId> {
    let c = spec.width;
    if c == 0 {
        return Err(Error::InvalidSpec(format!(
            "{prefix}: Mobile DenseNet width must be positive"
        )));
    }
    let mut x0 = input;
    if g.dims(input).c != c {
        x0 = g.add(format!("{prefix}.proj.conv"), conv(c, 1, 1, false), &[x0])?;
        x0 = g.add(format!("{prefix}.proj.bn"), LayerOp::BatchNorm, &[x0])?;
        x0 = g.add(
            format!("{prefix}.proj.act"),
            LayerOp::Activation(Activation::eswish()),
            &[x0],
        )?;
    }
    let mut feed = vec![x0];
    let mut units = Vec::with_capacity(UNITS_PER_DENSENET);
    for i in 0..UNITS_PER_DENSENET {
        let unit_in = if feed.len() == 1 {
            feed[0]
        } else {
            g.add(format!("{prefix}.u{i}.in"), LayerOp::Concat, &feed)?
        };
        let u = append_mbconv(g, &format!("{prefix}.u{i}"), &spec.unit_spec(i), unit_in)?;
        feed.push(u);
        units.push(u);
    }
    g.add(format!("{prefix}.out"), LayerOp::Concat, &units)
}

pub fn build_mobile_densenet(
    spec: &MobileDenseNetSpec,
    in_channels: usize,
    h: usize,
    w: usize,
) -> Result<LayerGraph> {
    let mut g = LayerGraph::new();
    let x = g.input("input", Dims::new(in_channels, h, w))?;
    let y = append_mobile_densenet(&mut g, "md", spec, x)?;
    g.set_output("output", y);
    Ok(g)
}

/// Run a single-input, single-output block graph.
pub fn forward_block<T: Element>(
    graph: &LayerGraph,
    params: &ParamStore<T>,
    input: Tensor<T>,
    mode: Mode,
    seed: u64,
) -> Result<Tensor<T>> {
    let (name, _) = graph
        .outputs()
        .first()
        .ok_or_else(|| Error::InvalidSpec("block graph has no output".into()))?;
    let run: GraphRun<T> = graph.forward(params, vec![input], mode, seed)?;
    Ok(run.output_tensor(name)?.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expansion_widths() {
        let e = MBConvSpec::new(MBConvKind::EMBConv6, 5, 40, 1, 40);
        assert_eq!(e.expanded_channels(), 240);
        let m = MBConvSpec::new(MBConvKind::MBConv6, 3, 24, 2, 16);
        assert_eq!(m.expanded_channels(), 96);
        let one = MBConvSpec::new(MBConvKind::MBConv1, 3, 16, 1, 32);
        assert!(!one.has_expansion());
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(MBConvSpec::new(MBConvKind::MBConv6Star, 3, 24, 2, 24)
            .validate()
            .is_err());
        assert!(MBConvSpec::new(MBConvKind::MBConv1Star, 3, 24, 1, 16)
            .validate()
            .is_err());
        assert!(MBConvSpec::new(MBConvKind::EMBConv6, 5, 40, 2, 40)
            .validate()
            .is_err());
        assert!(MBConvSpec::new(MBConvKind::MBConv6, 4, 40, 1, 40)
            .validate()
            .is_err());
    }
}
