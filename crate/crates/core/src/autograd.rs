//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its output value and whatever the
//! backward pass needs. [`Tape::backward`] walks the nodes in reverse and
//! leaves gradients in each node's `Tensor::grad`.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};
use crate::kernels::conv::{self, ConvGeom, Padding};
use crate::kernels::norm::{self, BatchStats};
use crate::kernels::pointwise::{self, Activation};
use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Element> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Depthwise {
        input: Var,
        weight: Var,
        geom: ConvGeom,
    },
    ConvTranspose {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_mode: bool,
    },
    Act {
        input: Var,
        kind: Activation,
    },
    AvgPool {
        input: Var,
        window: usize,
        stride: usize,
    },
    GlobalAvgPool {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    ChannelGate {
        map: Var,
        gate: Var,
    },
    Dropout {
        input: Var,
        /// Already includes the `1/(1−rate)` rescale.
        mask: Vec<T>,
    },
    Mse {
        preds: Vec<Var>,
        targets: Vec<Var>,
        count: usize,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
}

fn add_into<T: Element>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => acc
            .par_iter_mut()
            .zip(g.par_iter())
            .for_each(|(a, &b)| *a = *a + b),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Register an input or parameter. Gradients are tracked when
    /// `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let g = tensor.requires_grad;
        self.push(tensor, Op::Leaf, g)
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Gradient left by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(
            &mut self.nodes[v.0].value,
            Tensor::zeros(Shape::new(1, 1, 1, 1)),
        )
    }

    fn bias_slice(&self, bias: Option<Var>, len: usize, op: &'static str) -> Result<Option<&[T]>> {
        match bias {
            None => Ok(None),
            Some(b) => {
                let t = self.value(b);
                if t.len() != len {
                    return Err(dim_err(
                        op,
                        format!("bias has {} entries, expected {len}", t.len()),
                    ));
                }
                Ok(Some(t.data()))
            }
        }
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let out_c = self.shape(weight).n;
        let b = self.bias_slice(bias, out_c, "conv2d")?;
        let (y, geom) =
            conv::conv2d_forward(self.value(input), self.value(weight), b, stride, padding)?;
        let ng = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            y,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            ng,
        ))
    }

    pub fn depthwise_conv2d(
        &mut self,
        input: Var,
        weight: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (y, geom) =
            conv::depthwise_forward(self.value(input), self.value(weight), stride, padding)?;
        let ng = self.needs(input) || self.needs(weight);
        Ok(self.push(
            y,
            Op::Depthwise {
                input,
                weight,
                geom,
            },
            ng,
        ))
    }

    /// Transposed convolution with `weight` laid out `in×out×k×k`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out_c = self.shape(weight).c;
        let b = self.bias_slice(bias, out_c, "conv_transpose2d")?;
        let (y, geom) =
            conv::conv_transpose2d_forward(self.value(input), self.value(weight), b, stride, pad)?;
        let ng = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            y,
            Op::ConvTranspose {
                input,
                weight,
                bias,
                geom,
            },
            ng,
        ))
    }

    fn check_channel_vec(&self, op: &'static str, v: Var, c: usize) -> Result<()> {
        if self.value(v).len() != c {
            return Err(dim_err(
                op,
                format!(
                    "per-channel vector has {} entries, input has {c} channels",
                    self.value(v).len()
                ),
            ));
        }
        Ok(())
    }

    /// Normalise with batch statistics. Returns the statistics so callers can
    /// update running averages.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let s = self.shape(input);
        self.check_channel_vec("batch_norm", gamma, s.c)?;
        self.check_channel_vec("batch_norm", beta, s.c)?;
        let x = self.value(input).data();
        let stats = norm::batch_stats(x, s, eps);
        let y = norm::normalize(
            x,
            s,
            &stats.mean,
            &stats.inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let ng = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            Tensor::from_vec(s, y)?,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean: stats.mean.clone(),
                inv_std: stats.inv_std.clone(),
                batch_mode: true,
            },
            ng,
        );
        Ok((v, stats))
    }

    /// Normalise with fixed (running) statistics.
    pub fn batch_norm_infer(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let s = self.shape(input);
        self.check_channel_vec("batch_norm", gamma, s.c)?;
        self.check_channel_vec("batch_norm", beta, s.c)?;
        if running_mean.len() != s.c || running_var.len() != s.c {
            return Err(dim_err(
                "batch_norm",
                "running statistics length differs from channels",
            ));
        }
        let mean: Vec<f64> = running_mean.iter().map(|v| v.f64()).collect();
        let inv_std: Vec<f64> = running_var
            .iter()
            .map(|v| 1.0 / (v.f64() + eps).sqrt())
            .collect();
        let y = norm::normalize(
            self.value(input).data(),
            s,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let ng = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::from_vec(s, y)?,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_mode: false,
            },
            ng,
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        if let Activation::ESwish(b) = kind {
            if b <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "eswish beta must be positive, got {b}"
                )));
            }
        }
        let s = self.shape(input);
        let y = pointwise::forward(kind, self.value(input).data());
        let ng = self.needs(input);
        Ok(self.push(Tensor::from_vec(s, y)?, Op::Act { input, kind }, ng))
    }

    /// Average pooling without padding.
    pub fn avg_pool(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let s = self.shape(input);
        if window == 0 || stride == 0 {
            return Err(Error::InvalidArgument(
                "pooling window and stride must be positive".into(),
            ));
        }
        if window > s.h || window > s.w {
            return Err(dim_err(
                "avg_pool",
                format!("window {window} larger than input {}×{}", s.h, s.w),
            ));
        }
        let (oh, ow) = ((s.h - window) / stride + 1, (s.w - window) / stride + 1);
        let x = self.value(input).data();
        let scale = T::of(1.0 / (window * window) as f64);
        let mut y = vec![T::zero(); s.n * s.c * oh * ow];
        y.par_chunks_mut(oh * ow).enumerate().for_each(|(nc, o)| {
            let src = &x[nc * s.plane()..(nc + 1) * s.plane()];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ky in 0..window {
                        for kx in 0..window {
                            acc = acc + src[(oy * stride + ky) * s.w + ox * stride + kx];
                        }
                    }
                    o[oy * ow + ox] = acc * scale;
                }
            }
        });
        let ng = self.needs(input);
        Ok(self.push(
            Tensor::from_vec(Shape::new(s.n, s.c, oh, ow), y)?,
            Op::AvgPool {
                input,
                window,
                stride,
            },
            ng,
        ))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        let p = s.plane();
        let inv = 1.0 / p as f64;
        let y: Vec<T> = self
            .value(input)
            .data()
            .chunks(p)
            .map(|c| T::of(c.iter().map(|v| v.f64()).sum::<f64>() * inv))
            .collect();
        let ng = self.needs(input);
        Ok(self.push(
            Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), y)?,
            Op::GlobalAvgPool { input },
            ng,
        ))
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let s0 = self.shape(first);
        let mut channels = 0;
        for &v in inputs {
            let s = self.shape(v);
            if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                return Err(dim_err(
                    "concat",
                    format!("non-channel dims differ: {s} vs {s0} (cross-resolution features need equal spatial dims)"),
                ));
            }
            channels += s.c;
        }
        let p = s0.plane();
        let mut y = Vec::with_capacity(s0.n * channels * p);
        for n in 0..s0.n {
            for &v in inputs {
                let t = self.value(v);
                let c = t.shape().c;
                y.extend_from_slice(&t.data()[n * c * p..(n + 1) * c * p]);
            }
        }
        let ng = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::from_vec(Shape::new(s0.n, channels, s0.h, s0.w), y)?,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            ng,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dim_err("residual_add", format!("{sa} vs {sb}")));
        }
        let y: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(sa, y)?, Op::Add { a, b }, ng))
    }

    /// Scale every channel plane of `map` by the matching `N×C×1×1` gate.
    pub fn broadcast_mul(&mut self, map: Var, gate: Var) -> Result<Var> {
        let (sm, sg) = (self.shape(map), self.shape(gate));
        if sg != Shape::new(sm.n, sm.c, 1, 1) {
            return Err(dim_err(
                "broadcast_mul",
                format!("gate {sg} does not match map {sm}"),
            ));
        }
        let p = sm.plane();
        let g = self.value(gate).data();
        let mut y = self.value(map).data().to_vec();
        y.par_chunks_mut(p)
            .enumerate()
            .for_each(|(nc, c)| c.iter_mut().for_each(|v| *v = *v * g[nc]));
        let ng = self.needs(map) || self.needs(gate);
        Ok(self.push(Tensor::from_vec(sm, y)?, Op::ChannelGate { map, gate }, ng))
    }

    /// Inverted dropout; identity unless `train`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        rate: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !train || rate == 0.0 {
            return Ok(input);
        }
        let s = self.shape(input);
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..s.numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let y: Vec<T> = self
            .value(input)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let ng = self.needs(input);
        Ok(self.push(Tensor::from_vec(s, y)?, Op::Dropout { input, mask }, ng))
    }

    /// Mean squared error over all elements of all pairs; `1×1×1×1` result.
    pub fn mse_loss(&mut self, preds: &[Var], targets: &[Var]) -> Result<Var> {
        if preds.is_empty() {
            return Err(Error::InvalidArgument("mse_loss over an empty list".into()));
        }
        if preds.len() != targets.len() {
            return Err(dim_err(
                "mse_loss",
                format!("{} predictions, {} targets", preds.len(), targets.len()),
            ));
        }
        let mut sum = 0.0;
        let mut count = 0;
        for (&p, &t) in preds.iter().zip(targets) {
            let (sp, st) = (self.shape(p), self.shape(t));
            if sp != st {
                return Err(dim_err(
                    "mse_loss",
                    format!("prediction {sp} vs target {st}"),
                ));
            }
            sum += self
                .value(p)
                .data()
                .iter()
                .zip(self.value(t).data())
                .map(|(a, b)| (a.f64() - b.f64()).powi(2))
                .sum::<f64>();
            count += sp.numel();
        }
        let ng = preds.iter().chain(targets).any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![T::of(sum / count as f64)])?,
            Op::Mse {
                preds: preds.to_vec(),
                targets: targets.to_vec(),
                count,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar output. Gradients are stored on every node
    /// that needs one; earlier gradients are overwritten.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.shape(output).numel() != 1 {
            return Err(dim_err(
                "backward",
                format!("output must be scalar, got {}", self.shape(output)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.value.grad = if node.needs_grad { g } else { None };
        }
        Ok(())
    }

    fn propagate(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let x = self.value(*input);
                let g = conv::conv_backward_geom(
                    x.data(),
                    x.shape().n,
                    self.value(*weight).data(),
                    geom,
                    dy,
                    self.needs(*input),
                );
                if let Some(dx) = g.input {
                    add_into(&mut grads[input.0], dx);
                }
                if self.needs(*weight) {
                    add_into(&mut grads[weight.0], g.weight);
                }
                if let Some(b) = bias.filter(|b| self.needs(*b)) {
                    add_into(&mut grads[b.0], g.bias);
                }
            }
            Op::Depthwise {
                input,
                weight,
                geom,
            } => {
                let g = conv::depthwise_backward(
                    self.value(*input),
                    self.value(*weight),
                    geom,
                    dy,
                    self.needs(*input),
                );
                if let Some(dx) = g.input {
                    add_into(&mut grads[input.0], dx);
                }
                if self.needs(*weight) {
                    add_into(&mut grads[weight.0], g.weight);
                }
            }
            Op::ConvTranspose {
                input,
                weight,
                bias,
                geom,
            } => {
                let g = conv::conv_transpose2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    geom,
                    dy,
                    self.needs(*input),
                );
                if let Some(dx) = g.input {
                    add_into(&mut grads[input.0], dx);
                }
                if self.needs(*weight) {
                    add_into(&mut grads[weight.0], g.weight);
                }
                if let Some(b) = bias.filter(|b| self.needs(*b)) {
                    add_into(&mut grads[b.0], g.bias);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_mode,
            } => {
                let x = self.value(*input);
                let g = norm::backward(
                    x.data(),
                    x.shape(),
                    mean,
                    inv_std,
                    self.value(*gamma).data(),
                    dy,
                    *batch_mode,
                );
                if self.needs(*input) {
                    add_into(&mut grads[input.0], g.input);
                }
                if self.needs(*gamma) {
                    add_into(&mut grads[gamma.0], g.gamma);
                }
                if self.needs(*beta) {
                    add_into(&mut grads[beta.0], g.beta);
                }
            }
            Op::Act { input, kind } => {
                if self.needs(*input) {
                    let dx = pointwise::backward(*kind, self.value(*input).data(), dy);
                    add_into(&mut grads[input.0], dx);
                }
            }
            Op::AvgPool {
                input,
                window,
                stride,
            } => {
                if self.needs(*input) {
                    let s = self.shape(*input);
                    let os = node.value.shape();
                    let scale = T::of(1.0 / (window * window) as f64);
                    let mut dx = vec![T::zero(); s.numel()];
                    dx.par_chunks_mut(s.plane())
                        .enumerate()
                        .for_each(|(nc, d)| {
                            let g = &dy[nc * os.plane()..(nc + 1) * os.plane()];
                            for oy in 0..os.h {
                                for ox in 0..os.w {
                                    let v = g[oy * os.w + ox] * scale;
                                    for ky in 0..*window {
                                        for kx in 0..*window {
                                            let j = (oy * stride + ky) * s.w + ox * stride + kx;
                                            d[j] = d[j] + v;
                                        }
                                    }
                                }
                            }
                        });
                    add_into(&mut grads[input.0], dx);
                }
            }
            Op::GlobalAvgPool { input } => {
                if self.needs(*input) {
                    let s = self.shape(*input);
                    let p = s.plane();
                    let inv = T::of(1.0 / p as f64);
                    let dx: Vec<T> = (0..s.numel()).map(|j| dy[j / p] * inv).collect();
                    add_into(&mut grads[input.0], dx);
                }
            }
            Op::Concat { inputs } => {
                let s0 = node.value.shape();
                let p = s0.plane();
                let mut offset = 0;
                for &v in inputs {
                    let c = self.shape(v).c;
                    if self.needs(v) {
                        let mut dx = Vec::with_capacity(s0.n * c * p);
                        for n in 0..s0.n {
                            let start = (n * s0.c + offset) * p;
                            dx.extend_from_slice(&dy[start..start + c * p]);
                        }
                        add_into(&mut grads[v.0], dx);
                    }
                    offset += c;
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    add_into(&mut grads[a.0], dy.to_vec());
                }
                if self.needs(*b) {
                    add_into(&mut grads[b.0], dy.to_vec());
                }
            }
            Op::ChannelGate { map, gate } => {
                let s = self.shape(*map);
                let p = s.plane();
                let gv = self.value(*gate).data();
                let mv = self.value(*map).data();
                if self.needs(*map) {
                    let dx: Vec<T> = dy.iter().enumerate().map(|(j, &d)| d * gv[j / p]).collect();
                    add_into(&mut grads[map.0], dx);
                }
                if self.needs(*gate) {
                    let dg: Vec<T> = (0..s.n * s.c)
                        .map(|nc| {
                            let r = nc * p..(nc + 1) * p;
                            dy[r.clone()]
                                .iter()
                                .zip(&mv[r])
                                .fold(T::zero(), |a, (&d, &m)| a + d * m)
                        })
                        .collect();
                    add_into(&mut grads[gate.0], dg);
                }
            }
            Op::Dropout { input, mask } => {
                if self.needs(*input) {
                    let dx: Vec<T> = dy.iter().zip(mask).map(|(&d, &m)| d * m).collect();
                    add_into(&mut grads[input.0], dx);
                }
            }
            Op::Mse {
                preds,
                targets,
                count,
            } => {
                let scale = dy[0].f64() * 2.0 / *count as f64;
                for (&p, &t) in preds.iter().zip(targets) {
                    let diff = || {
                        self.value(p)
                            .data()
                            .iter()
                            .zip(self.value(t).data())
                            .map(|(&a, &b)| T::of((a.f64() - b.f64()) * scale))
                    };
                    if self.needs(p) {
                        add_into(&mut grads[p.0], diff().collect());
                    }
                    if self.needs(t) {
                        add_into(&mut grads[t.0], diff().map(|v| -v).collect());
                    }
                }
            }
        }
        Ok(())
    }
}
