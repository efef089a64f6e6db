//! Symbolic parameter and FLOP accounting.

use std::fmt::Write as _;

use crate::graph::{Dims, LayerGraph, LayerOp, NodeId};

/// Counting rules applied by [`cost_report`].
pub const FLOP_CONVENTION: &str = "mac=2 bn=2/elem act=1/elem eltwise=1/elem bias=1/elem";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub kind: &'static str,
    pub out: Dims,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub convention: &'static str,
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_flops: u64,
}

impl CostReport {
    pub fn params_millions(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn gflops(&self) -> f64 {
        self.total_flops as f64 / 1e9
    }
}

/// Cost of one layer for a single image.
pub fn layer_cost(graph: &LayerGraph, id: NodeId) -> LayerCost {
    let node = graph.node(id);
    let ins = graph.input_dims(id);
    let out = node.out;
    let elems = out.numel() as u64;
    let params = graph
        .node_params(id)
        .iter()
        .map(|p| p.shape.numel() as u64)
        .sum();
    let in_c = ins.first().map(|d| d.c as u64).unwrap_or(0);
    let pixels = (out.h * out.w) as u64;
    let flops = match node.op {
        LayerOp::Input | LayerOp::Concat | LayerOp::Dropout(_) => 0,
        LayerOp::Conv2d {
            out: oc,
            kernel,
            bias,
            ..
        } => {
            let k2 = (kernel * kernel) as u64;
            2 * in_c * oc as u64 * k2 * pixels + if bias { elems } else { 0 }
        }
        LayerOp::DepthwiseConv2d { kernel, .. } => 2 * (kernel * kernel) as u64 * elems,
        LayerOp::ConvTranspose2d {
            out: oc,
            kernel,
            bias,
            ..
        } => {
            let in_pixels = ins.first().map(|d| (d.h * d.w) as u64).unwrap_or(0);
            2 * in_c * oc as u64 * (kernel * kernel) as u64 * in_pixels
                + if bias { elems } else { 0 }
        }
        LayerOp::BatchNorm => 2 * elems,
        LayerOp::Activation(_) | LayerOp::Add | LayerOp::ChannelGate => elems,
        LayerOp::AvgPool { window, .. } => (window * window) as u64 * elems,
        LayerOp::GlobalAvgPool => ins.first().map(|d| d.numel() as u64).unwrap_or(0),
    };
    LayerCost {
        name: node.name.clone(),
        kind: node.op.kind(),
        out,
        params,
        flops,
    }
}

pub fn cost_report(graph: &LayerGraph) -> CostReport {
    let layers: Vec<LayerCost> = (0..graph.len())
        .map(|i| layer_cost(graph, NodeId(i)))
        .collect();
    CostReport {
        convention: FLOP_CONVENTION,
        total_params: layers.iter().map(|l| l.params).sum(),
        total_flops: layers.iter().map(|l| l.flops).sum(),
        layers,
    }
}

pub fn count_params(graph: &LayerGraph) -> CostReport {
    cost_report(graph)
}

pub fn count_flops(graph: &LayerGraph) -> CostReport {
    cost_report(graph)
}

/// Text table with one row per layer, then a totals line.
pub fn summarize(graph: &LayerGraph, title: &str) -> String {
    let report = cost_report(graph);
    let mut s = String::new();
    let _ = writeln!(s, "{title}");
    for id in graph.input_ids() {
        let d = graph.dims(id);
        let _ = writeln!(
            s,
            "input {}: {}×{} ({} channels)",
            graph.node(id).name,
            d.h,
            d.w,
            d.c
        );
    }
    let _ = writeln!(
        s,
        "{:<40} {:<18} {:>14} {:>12} {:>16}",
        "layer", "op", "output", "params", "flops"
    );
    for l in &report.layers {
        let _ = writeln!(
            s,
            "{:<40} {:<18} {:>14} {:>12} {:>16}",
            l.name,
            l.kind,
            l.out.to_string(),
            l.params,
            l.flops
        );
    }
    let _ = writeln!(
        s,
        "total: {} layers, {} params ({:.3}M), {} flops ({:.3}G) [{}]",
        report.layers.len(),
        report.total_params,
        report.params_millions(),
        report.total_flops,
        report.gflops(),
        report.convention
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_conv_params() {
        let mut g = LayerGraph::new();
        let x = g.input("x", Dims::new(120, 46, 46)).unwrap();
        let h = g
            .add(
                "head",
                LayerOp::Conv2d {
                    out: 30,
                    kernel: 1,
                    stride: 1,
                    bias: true,
                },
                &[x],
            )
            .unwrap();
        assert_eq!(layer_cost(&g, h).params, 3630);
    }
}
