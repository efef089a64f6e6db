//! Declarative layer graphs.
//!
//! A [`LayerGraph`] lists layers in topological order with their resolved
//! output shapes. The same description drives execution on a [`Tape`] and the
//! symbolic parameter/FLOP accounting in [`crate::cost`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::kernels::conv::{bilinear_weight, Padding};
use crate::kernels::norm::{BatchStats, BN_EPSILON, BN_MOMENTUM};
use crate::kernels::pointwise::Activation;
use crate::tensor::{Element, ParamStore, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub enum LayerOp {
    Input,
    /// Dense convolution with same-padding.
    Conv2d {
        out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    },
    DepthwiseConv2d {
        kernel: usize,
        stride: usize,
    },
    ConvTranspose2d {
        out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    BatchNorm,
    Activation(Activation),
    /// Average pooling without padding.
    AvgPool {
        window: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Concat,
    Add,
    /// Inputs are `[map, gate]`; the gate is `C×1×1`.
    ChannelGate,
    Dropout(f64),
}

impl LayerOp {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerOp::Input => "input",
            LayerOp::Conv2d { .. } => "conv2d",
            LayerOp::DepthwiseConv2d { .. } => "depthwise_conv2d",
            LayerOp::ConvTranspose2d { .. } => "conv_transpose2d",
            LayerOp::BatchNorm => "batch_norm",
            LayerOp::Activation(_) => "activation",
            LayerOp::AvgPool { .. } => "avg_pool",
            LayerOp::GlobalAvgPool => "global_avg_pool",
            LayerOp::Concat => "concat",
            LayerOp::Add => "residual_add",
            LayerOp::ChannelGate => "broadcast_mul",
            LayerOp::Dropout(_) => "dropout",
        }
    }
}

/// Channels, height and width of one batch item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn batch(&self, n: usize) -> Shape {
        Shape::new(n, self.c, self.h, self.w)
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}×{}×{}", self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNode {
    pub name: String,
    pub op: LayerOp,
    pub inputs: Vec<NodeId>,
    pub out: Dims,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    HeNormal {
        fan_in: usize,
    },
    Normal {
        std: f64,
    },
    Zeros,
    Ones,
    Bilinear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub trainable: bool,
    pub init: Init,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerGraph {
    nodes: Vec<LayerNode>,
    outputs: Vec<(String, NodeId)>,
    /// Weight initialisers that replace the default for a node.
    weight_inits: Vec<(NodeId, Init)>,
}

fn same_out(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

impl LayerGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &LayerNode {
        &self.nodes[id.0]
    }

    pub fn dims(&self, id: NodeId) -> Dims {
        self.nodes[id.0].out
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name).map(NodeId)
    }

    pub fn input_ids(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].op == LayerOp::Input)
            .map(NodeId)
            .collect()
    }

    pub fn outputs(&self) -> &[(String, NodeId)] {
        &self.outputs
    }

    pub fn output(&self, name: &str) -> Option<NodeId> {
        self.outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, id)| id)
    }

    /// Initialise the `weight` parameter of `id` with `init`.
    pub fn set_weight_init(&mut self, id: NodeId, init: Init) {
        self.weight_inits.retain(|(n, _)| *n != id);
        self.weight_inits.push((id, init));
    }

    pub fn set_output(&mut self, name: impl Into<String>, id: NodeId) {
        let name = name.into();
        self.outputs.retain(|(n, _)| *n != name);
        self.outputs.push((name, id));
    }

    pub fn input_dims(&self, id: NodeId) -> Vec<Dims> {
        self.nodes[id.0]
            .inputs
            .iter()
            .map(|&i| self.dims(i))
            .collect()
    }

    pub fn input(&mut self, name: impl Into<String>, dims: Dims) -> Result<NodeId> {
        if dims.numel() == 0 {
            return Err(dim_err("input", format!("non-positive input dims {dims}")));
        }
        self.push(name.into(), LayerOp::Input, vec![], dims)
    }

    fn push(
        &mut self,
        name: String,
        op: LayerOp,
        inputs: Vec<NodeId>,
        out: Dims,
    ) -> Result<NodeId> {
        if self.nodes.iter().any(|n| n.name == name) {
            return Err(Error::InvalidSpec(format!("duplicate layer name {name}")));
        }
        self.nodes.push(LayerNode {
            name,
            op,
            inputs,
            out,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Append a layer, resolving its output shape.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        op: LayerOp,
        inputs: &[NodeId],
    ) -> Result<NodeId> {
        let name = name.into();
        let ins: Vec<Dims> = inputs.iter().map(|&i| self.dims(i)).collect();
        let one = |op: &'static str| -> Result<Dims> {
            match ins.as_slice() {
                [d] => Ok(*d),
                _ => Err(dim_err(op, format!("expects one input, got {}", ins.len()))),
            }
        };
        let out = match &op {
            LayerOp::Input => {
                return Err(Error::InvalidSpec(
                    "use LayerGraph::input for inputs".into(),
                ))
            }
            &LayerOp::Conv2d {
                out,
                kernel,
                stride,
                ..
            } => {
                let d = one("conv2d")?;
                if out == 0 || kernel == 0 || stride == 0 {
                    return Err(Error::InvalidSpec(format!(
                        "{name}: conv sizes must be positive"
                    )));
                }
                Dims::new(out, same_out(d.h, stride), same_out(d.w, stride))
            }
            &LayerOp::DepthwiseConv2d { kernel, stride } => {
                let d = one("depthwise_conv2d")?;
                if kernel == 0 || stride == 0 {
                    return Err(Error::InvalidSpec(format!(
                        "{name}: conv sizes must be positive"
                    )));
                }
                Dims::new(d.c, same_out(d.h, stride), same_out(d.w, stride))
            }
            &LayerOp::ConvTranspose2d {
                out,
                kernel,
                stride,
                pad,
                ..
            } => {
                let d = one("conv_transpose2d")?;
                let size = |n: usize| {
                    ((n - 1) * stride + kernel)
                        .checked_sub(2 * pad)
                        .filter(|&v| v > 0)
                };
                match (size(d.h), size(d.w)) {
                    (Some(h), Some(w)) => Dims::new(out, h, w),
                    _ => {
                        return Err(dim_err(
                            "conv_transpose2d",
                            format!("{name}: padding too large for {d}"),
                        ))
                    }
                }
            }
            LayerOp::BatchNorm | LayerOp::Activation(_) | LayerOp::Dropout(_) => one(op.kind())?,
            &LayerOp::AvgPool { window, stride } => {
                let d = one("avg_pool")?;
                if window == 0 || stride == 0 || window > d.h || window > d.w {
                    return Err(dim_err(
                        "avg_pool",
                        format!("{name}: window {window} does not fit {d}"),
                    ));
                }
                Dims::new(
                    d.c,
                    (d.h - window) / stride + 1,
                    (d.w - window) / stride + 1,
                )
            }
            LayerOp::GlobalAvgPool => Dims::new(one("global_avg_pool")?.c, 1, 1),
            LayerOp::Concat => {
                let first = *ins
                    .first()
                    .ok_or_else(|| Error::InvalidSpec(format!("{name}: concat of nothing")))?;
                if let Some(bad) = ins.iter().find(|d| (d.h, d.w) != (first.h, first.w)) {
                    return Err(dim_err(
                        "concat",
                        format!(
                            "{name}: resolutions {}×{} and {}×{} differ",
                            first.h, first.w, bad.h, bad.w
                        ),
                    ));
                }
                Dims::new(ins.iter().map(|d| d.c).sum(), first.h, first.w)
            }
            LayerOp::Add => match ins.as_slice() {
                [a, b] if a == b => *a,
                [a, b] => return Err(dim_err("residual_add", format!("{name}: {a} vs {b}"))),
                _ => return Err(dim_err("residual_add", "expects two inputs")),
            },
            LayerOp::ChannelGate => match ins.as_slice() {
                [m, g] if *g == Dims::new(m.c, 1, 1) => *m,
                [m, g] => {
                    return Err(dim_err(
                        "broadcast_mul",
                        format!("{name}: gate {g} for map {m}"),
                    ))
                }
                _ => return Err(dim_err("broadcast_mul", "expects map and gate")),
            },
        };
        if let LayerOp::Dropout(rate) = op {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::InvalidSpec(format!(
                    "{name}: dropout rate {rate} outside [0, 1)"
                )));
            }
        }
        self.push(name, op, inputs.to_vec(), out)
    }

    /// Parameters owned by one node, with their initialisers.
    pub fn node_params(&self, id: NodeId) -> Vec<ParamSpec> {
        let node = &self.nodes[id.0];
        let in_c = node.inputs.first().map(|&i| self.dims(i).c).unwrap_or(0);
        let p = |suffix: &str, shape: Shape, trainable: bool, init: Init| ParamSpec {
            name: format!("{}.{suffix}", node.name),
            shape,
            trainable,
            init,
        };
        let mut specs = match node.op {
            LayerOp::Conv2d {
                out, kernel, bias, ..
            } => {
                let mut v = vec![p(
                    "weight",
                    Shape::new(out, in_c, kernel, kernel),
                    true,
                    Init::HeNormal {
                        fan_in: in_c * kernel * kernel,
                    },
                )];
                if bias {
                    v.push(p("bias", Shape::vector(out), true, Init::Zeros));
                }
                v
            }
            LayerOp::DepthwiseConv2d { kernel, .. } => vec![p(
                "weight",
                Shape::new(in_c, 1, kernel, kernel),
                true,
                Init::HeNormal {
                    fan_in: kernel * kernel,
                },
            )],
            LayerOp::ConvTranspose2d {
                out, kernel, bias, ..
            } => {
                let init = if kernel == 4 && out == in_c {
                    Init::Bilinear
                } else {
                    Init::HeNormal {
                        fan_in: in_c * kernel * kernel,
                    }
                };
                let mut v = vec![p(
                    "weight",
                    Shape::new(in_c, out, kernel, kernel),
                    true,
                    init,
                )];
                if bias {
                    v.push(p("bias", Shape::vector(out), true, Init::Zeros));
                }
                v
            }
            LayerOp::BatchNorm => {
                let c = node.out.c;
                vec![
                    p("gamma", Shape::vector(c), true, Init::Ones),
                    p("beta", Shape::vector(c), true, Init::Zeros),
                    p("running_mean", Shape::vector(c), false, Init::Zeros),
                    p("running_var", Shape::vector(c), false, Init::Ones),
                ]
            }
            _ => vec![],
        };
        if let Some(&(_, init)) = self.weight_inits.iter().find(|(n, _)| *n == id) {
            for spec in specs.iter_mut().filter(|s| s.name.ends_with(".weight")) {
                spec.init = init;
            }
        }
        specs
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        (0..self.nodes.len())
            .flat_map(|i| self.node_params(NodeId(i)))
            .collect()
    }

    /// Fresh parameters drawn from a seeded generator.
    pub fn init_params<T: Element>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for spec in self.param_specs() {
            let value = match spec.init {
                Init::HeNormal { fan_in } => {
                    Tensor::randn(spec.shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
                }
                Init::Normal { std } => Tensor::randn(spec.shape, std, &mut rng),
                Init::Zeros => Tensor::zeros(spec.shape),
                Init::Ones => Tensor::full(spec.shape, T::one()),
                Init::Bilinear => bilinear_weight(spec.shape.n),
            };
            store.insert(spec.name, value, spec.trainable)?;
        }
        Ok(store)
    }

    /// Run the graph on a tape. `inputs` follow the order of
    /// [`LayerGraph::input_ids`] and must carry the declared dims.
    pub fn forward<T: Element>(
        &self,
        params: &ParamStore<T>,
        inputs: Vec<Tensor<T>>,
        mode: Mode,
        seed: u64,
    ) -> Result<GraphRun<T>> {
        let input_ids = self.input_ids();
        if inputs.len() != input_ids.len() {
            return Err(Error::InvalidArgument(format!(
                "graph has {} inputs, {} tensors given",
                input_ids.len(),
                inputs.len()
            )));
        }
        let batch = inputs.first().map(|t| t.shape().n).unwrap_or(1);
        let mut tape = Tape::new();
        let mut vars: Vec<Option<Var>> = vec![None; self.nodes.len()];
        for (id, t) in input_ids.iter().zip(inputs) {
            let want = self.dims(*id).batch(batch);
            if t.shape() != want {
                return Err(dim_err(
                    "forward",
                    format!(
                        "input {} expects {want}, got {}",
                        self.node(*id).name,
                        t.shape()
                    ),
                ));
            }
            vars[id.0] = Some(tape.constant(t));
        }
        let train = mode == Mode::Train;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut param_vars = Vec::new();
        let mut bn_stats = Vec::new();
        let mut leaf = |tape: &mut Tape<T>, name: String| -> Result<Var> {
            let p = params
                .get(&name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
            let grad = train && p.trainable;
            let v = tape.leaf(p.value.clone().with_requires_grad(grad));
            if grad {
                param_vars.push((name, v));
            }
            Ok(v)
        };
        for (i, node) in self.nodes.iter().enumerate() {
            if node.op == LayerOp::Input {
                continue;
            }
            let x: Vec<Var> = node
                .inputs
                .iter()
                .map(|j| vars[j.0].expect("topological order"))
                .collect();
            let name = &node.name;
            let v = match node.op {
                LayerOp::Input => unreachable!(),
                LayerOp::Conv2d { stride, bias, .. } => {
                    let w = leaf(&mut tape, format!("{name}.weight"))?;
                    let b = if bias {
                        Some(leaf(&mut tape, format!("{name}.bias"))?)
                    } else {
                        None
                    };
                    tape.conv2d(x[0], w, b, stride, Padding::Same)?
                }
                LayerOp::DepthwiseConv2d { stride, .. } => {
                    let w = leaf(&mut tape, format!("{name}.weight"))?;
                    tape.depthwise_conv2d(x[0], w, stride, Padding::Same)?
                }
                LayerOp::ConvTranspose2d {
                    stride, pad, bias, ..
                } => {
                    let w = leaf(&mut tape, format!("{name}.weight"))?;
                    let b = if bias {
                        Some(leaf(&mut tape, format!("{name}.bias"))?)
                    } else {
                        None
                    };
                    tape.conv_transpose2d(x[0], w, b, stride, pad)?
                }
                LayerOp::BatchNorm => {
                    let g = leaf(&mut tape, format!("{name}.gamma"))?;
                    let b = leaf(&mut tape, format!("{name}.beta"))?;
                    if train {
                        let (v, stats) = tape.batch_norm_train(x[0], g, b, BN_EPSILON)?;
                        bn_stats.push((name.clone(), stats));
                        v
                    } else {
                        let rm = params.value(&format!("{name}.running_mean"))?;
                        let rv = params.value(&format!("{name}.running_var"))?;
                        tape.batch_norm_infer(x[0], g, b, rm.data(), rv.data(), BN_EPSILON)?
                    }
                }
                LayerOp::Activation(kind) => tape.activation(x[0], kind)?,
                LayerOp::AvgPool { window, stride } => tape.avg_pool(x[0], window, stride)?,
                LayerOp::GlobalAvgPool => tape.global_avg_pool(x[0])?,
                LayerOp::Concat => tape.concat(&x)?,
                LayerOp::Add => tape.add(x[0], x[1])?,
                LayerOp::ChannelGate => tape.broadcast_mul(x[0], x[1])?,
                LayerOp::Dropout(rate) => tape.dropout(x[0], rate, train, &mut rng)?,
            };
            vars[i] = Some(v);
        }
        let outputs = self
            .outputs
            .iter()
            .map(|(n, id)| (n.clone(), vars[id.0].expect("output node executed")))
            .collect();
        Ok(GraphRun {
            tape,
            node_vars: vars,
            param_vars,
            bn_stats,
            outputs,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, active dropout, gradients for trainable parameters.
    Train,
    Infer,
}

/// Result of one forward pass, ready for a backward sweep.
pub struct GraphRun<T: Element> {
    pub tape: Tape<T>,
    node_vars: Vec<Option<Var>>,
    param_vars: Vec<(String, Var)>,
    bn_stats: Vec<(String, BatchStats)>,
    outputs: Vec<(String, Var)>,
}

impl<T: Element> GraphRun<T> {
    pub fn output(&self, name: &str) -> Result<Var> {
        self.outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, v)| v)
            .ok_or_else(|| Error::InvalidArgument(format!("no output named {name}")))
    }

    pub fn outputs(&self) -> &[(String, Var)] {
        &self.outputs
    }

    pub fn output_tensor(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(self.tape.value(self.output(name)?))
    }

    pub fn node_tensor(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.node_vars
            .get(id.0)
            .copied()
            .flatten()
            .map(|v| self.tape.value(v))
    }

    /// Gradients of trainable parameters after [`Tape::backward`].
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.param_vars
            .iter()
            .filter_map(|(n, v)| self.tape.grad(*v).map(|g| (n.as_str(), g)))
    }

    /// Fold this pass's batch statistics into the running averages.
    pub fn update_running_stats(&self, params: &mut ParamStore<T>) -> Result<()> {
        self.blend_running_stats(params, 1.0 - BN_MOMENTUM)
    }

    /// `running ← (1 − weight)·running + weight·batch` for every BN layer.
    pub fn blend_running_stats(&self, params: &mut ParamStore<T>, weight: f64) -> Result<()> {
        let m = 1.0 - weight;
        for (name, stats) in &self.bn_stats {
            for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                let key = format!("{name}.{suffix}");
                let p = params
                    .get_mut(&key)
                    .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {key}")))?;
                for (r, &b) in p.value.data_mut().iter_mut().zip(batch.iter()) {
                    *r = T::of(m * r.f64() + (1.0 - m) * b);
                }
            }
        }
        Ok(())
    }
}
