//! Define-by-run reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Tape`] records one computation per training step. Leaves carry an
//! optional parameter id so the training loop can collect gradients by
//! parameter after [`Tape::backward`]. Quantizer nodes use custom surrogate
//! gradients (straight-through for the input, log-domain threshold
//! gradients for the clip value).

use crate::error::{Error, Result};
use crate::kernels::{self, Axis, Pad};
use crate::tensor::Tensor;

pub type NodeId = usize;
pub type ParamId = usize;

pub const LN_2: f64 = std::f64::consts::LN_2;

/// How a fake-quantization node derives its lattice from its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// Fixed bit width; learnable log2 threshold t. d = 2^t / (2^(b-1) - 1).
    Uniform { bits: u32 },
    /// Learnable log2 step s and log2 threshold t; bit width inferred.
    Mixed,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<ParamId> },
    Conv2d { pad: Pad },
    MaxPool2 { argmax: Vec<u32> },
    Upsample2,
    ConcatChannels { left_channels: usize },
    Add,
    Sub,
    Mul,
    Relu,
    Abs,
    Scale(f32),
    AddConst,
    Sum,
    SpatialGrad(Axis),
    Normals,
    FakeQuant { mode: QuantMode, zero_clip_threshold_grad: bool },
    BitwidthCont,
}

struct Node {
    op: Op,
    parents: Vec<NodeId>,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    by_param: Vec<(ParamId, NodeId)>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node[id].as_ref()
    }

    /// Gradient for a parameter; `None` when the parameter is disconnected
    /// from the loss (its gradient is identically zero).
    pub fn param(&self, pid: ParamId) -> Option<&Tensor> {
        self.by_param
            .iter()
            .find(|(p, _)| *p == pid)
            .and_then(|(_, nid)| self.by_node[*nid].as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, parents, value });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { param: None }, vec![], value)
    }

    pub fn param(&mut self, value: Tensor, pid: ParamId) -> NodeId {
        self.push(Op::Leaf { param: Some(pid) }, vec![], value)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: Pad) -> Result<NodeId> {
        let out = kernels::conv2d_fwd(self.value(x), self.value(w), self.value(b), stride, pad)?;
        Ok(self.push(Op::Conv2d { pad }, vec![x, w, b], out))
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (out, argmax) = kernels::maxpool2_fwd(self.value(x))?;
        Ok(self.push(Op::MaxPool2 { argmax }, vec![x], out))
    }

    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let out = kernels::upsample2_fwd(self.value(x))?;
        Ok(self.push(Op::Upsample2, vec![x], out))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, ca, ha, wa) = self.value(a).nchw();
        let (nb, cb, hb, wb) = self.value(b).nchw();
        if na != nb || ha != hb || wa != wb {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let hw = ha * wa;
        let mut data = Vec::with_capacity((ca + cb) * na * hw);
        let da = self.value(a).data();
        let db = self.value(b).data();
        for n in 0..na {
            data.extend_from_slice(&da[n * ca * hw..(n + 1) * ca * hw]);
            data.extend_from_slice(&db[n * cb * hw..(n + 1) * cb * hw]);
        }
        let out = Tensor::new(vec![na, ca + cb, ha, wa], data)?;
        Ok(self.push(Op::ConcatChannels { left_channels: ca }, vec![a, b], out))
    }

    fn binary_elementwise(&mut self, op: Op, name: &'static str, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let da = self.value(a).data();
        let db = self.value(b).data();
        let data: Vec<f32> = match op {
            Op::Add => da.iter().zip(db).map(|(x, y)| x + y).collect(),
            Op::Sub => da.iter().zip(db).map(|(x, y)| x - y).collect(),
            Op::Mul => da.iter().zip(db).map(|(x, y)| x * y).collect(),
            _ => unreachable!(),
        };
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(op, vec![a, b], out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(Op::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(Op::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(Op::Mul, "mul", a, b)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        self.push(Op::Relu, vec![x], out)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|&v| v.abs()).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        self.push(Op::Abs, vec![x], out)
    }

    pub fn scale(&mut self, x: NodeId, k: f32) -> NodeId {
        let data = self.value(x).data().iter().map(|&v| k * v).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        self.push(Op::Scale(k), vec![x], out)
    }

    pub fn add_const(&mut self, x: NodeId, k: f32) -> NodeId {
        let data = self.value(x).data().iter().map(|&v| k + v).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        self.push(Op::AddConst, vec![x], out)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        // f64 accumulation keeps large reductions stable
        let total: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(total as f32))
    }

    pub fn spatial_grad(&mut self, x: NodeId, axis: Axis) -> NodeId {
        let out = kernels::grad_fwd(self.value(x), axis);
        self.push(Op::SpatialGrad(axis), vec![x], out)
    }

    /// (gx, gy) -> unit normals with 3 channels; see `kernels::normals_fwd`.
    pub fn normals(&mut self, gx: NodeId, gy: NodeId) -> Result<NodeId> {
        if self.value(gx).shape() != self.value(gy).shape() {
            return Err(Error::shape(
                "normals",
                format!("{:?} vs {:?}", self.value(gx).shape(), self.value(gy).shape()),
            ));
        }
        let out = kernels::normals_fwd(self.value(gx), self.value(gy));
        Ok(self.push(Op::Normals, vec![gx, gy], out))
    }

    /// Fake quantization of `x`. For `Uniform`, `params` is `[t]`; for
    /// `Mixed`, `params` is `[s, t]` (log2 step, log2 threshold), each a
    /// scalar node.
    pub fn fake_quant(
        &mut self,
        x: NodeId,
        params: &[NodeId],
        mode: QuantMode,
        zero_clip_threshold_grad: bool,
    ) -> Result<NodeId> {
        let expected = match mode {
            QuantMode::Uniform { .. } => 1,
            QuantMode::Mixed => 2,
        };
        if params.len() != expected {
            return Err(Error::invalid(
                "fake_quant",
                format!("expected {expected} quantizer parameter nodes, got {}", params.len()),
            ));
        }
        for &p in params {
            if self.value(p).len() != 1 {
                return Err(Error::shape("fake_quant", "quantizer parameters must be scalars".to_string()));
            }
        }
        let (d, x_max) = self.quant_lattice(mode, params);
        let xv = self.value(x);
        let mut out = vec![0.0f32; xv.len()];
        kernels::quantize_slice(xv.data(), d, x_max, &mut out);
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let mut parents = vec![x];
        parents.extend_from_slice(params);
        Ok(self.push(Op::FakeQuant { mode, zero_clip_threshold_grad }, parents, out))
    }

    fn quant_lattice(&self, mode: QuantMode, params: &[NodeId]) -> (f64, f64) {
        match mode {
            QuantMode::Uniform { bits } => {
                let t = self.value(params[0]).item() as f64;
                let x_max = t.exp2();
                let levels = (1u64 << (bits - 1)) as f64 - 1.0;
                (x_max / levels, x_max)
            }
            QuantMode::Mixed => {
                let s = self.value(params[0]).item() as f64;
                let t = self.value(params[1]).item() as f64;
                (s.exp2(), t.exp2())
            }
        }
    }

    /// Continuous bit width b = 1 + log2(x_max / d + 1) from scalar log2
    /// parameters (s, t). Differentiable, used by the size penalty.
    pub fn bitwidth_cont(&mut self, s: NodeId, t: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 || self.value(t).len() != 1 {
            return Err(Error::shape("bitwidth_cont", "s and t must be scalars".to_string()));
        }
        let sv = self.value(s).item() as f64;
        let tv = self.value(t).item() as f64;
        let b = 1.0 + ((tv - sv).exp2() + 1.0).log2();
        Ok(self.push(Op::BitwidthCont, vec![s, t], Tensor::scalar(b as f32)))
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("root must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut by_node: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        by_node[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let Some(g) = by_node[id].take() else { continue };
            self.propagate(id, &g, &mut by_node)?;
            by_node[id] = Some(g);
        }

        let by_param = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(id, n)| match n.op {
                Op::Leaf { param: Some(p) } => Some((p, id)),
                _ => None,
            })
            .collect();
        Ok(Gradients { by_node, by_param })
    }

    fn propagate(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let parent_val = |k: usize| &self.nodes[node.parents[k]].value;
        let mut acc = |k: usize, t: Tensor| accumulate(&mut grads[node.parents[k]], t);
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Conv2d { pad } => {
                let (gin, gw, gb) = kernels::conv2d_bwd(parent_val(0), parent_val(1), g, *pad);
                acc(0, gin);
                acc(1, gw);
                acc(2, gb);
            }
            Op::MaxPool2 { argmax } => {
                acc(0, kernels::maxpool2_bwd(parent_val(0).shape(), g, argmax));
            }
            Op::Upsample2 => {
                acc(0, kernels::upsample2_bwd(parent_val(0).shape(), g));
            }
            Op::ConcatChannels { left_channels } => {
                let (n, c, h, w) = node.value.nchw();
                let ca = *left_channels;
                let cb = c - ca;
                let hw = h * w;
                let gd = g.data();
                let mut ga = vec![0.0f32; n * ca * hw];
                let mut gb = vec![0.0f32; n * cb * hw];
                for i in 0..n {
                    let base = i * c * hw;
                    ga[i * ca * hw..(i + 1) * ca * hw].copy_from_slice(&gd[base..base + ca * hw]);
                    gb[i * cb * hw..(i + 1) * cb * hw].copy_from_slice(&gd[base + ca * hw..base + c * hw]);
                }
                acc(0, Tensor::new(vec![n, ca, h, w], ga)?);
                acc(1, Tensor::new(vec![n, cb, h, w], gb)?);
            }
            Op::Add => {
                acc(0, g.clone());
                acc(1, g.clone());
            }
            Op::Sub => {
                acc(0, g.clone());
                acc(1, elementwise(g, |v| -v));
            }
            Op::Mul => {
                acc(0, zip(g, parent_val(1), |gv, b| gv * b));
                acc(1, zip(g, parent_val(0), |gv, a| gv * a));
            }
            Op::Relu => {
                acc(0, zip(g, parent_val(0), |gv, x| if x > 0.0 { gv } else { 0.0 }));
            }
            Op::Abs => {
                acc(
                    0,
                    zip(g, parent_val(0), |gv, x| {
                        if x > 0.0 {
                            gv
                        } else if x < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::Scale(k) => {
                let k = *k;
                acc(0, elementwise(g, |v| k * v));
            }
            Op::AddConst => {
                acc(0, g.clone());
            }
            Op::Sum => {
                acc(0, Tensor::full(parent_val(0).shape(), g.item()));
            }
            Op::SpatialGrad(axis) => {
                acc(0, kernels::grad_bwd(g, *axis));
            }
            Op::Normals => {
                let (ga, gb) = kernels::normals_bwd(parent_val(0), parent_val(1), g);
                acc(0, ga);
                acc(1, gb);
            }
            Op::FakeQuant { mode, zero_clip_threshold_grad } => {
                self.fake_quant_bwd(id, g, *mode, *zero_clip_threshold_grad, grads)?;
            }
            Op::BitwidthCont => {
                let sv = parent_val(0).item() as f64;
                let tv = parent_val(1).item() as f64;
                // db/du for u = t - s, with b = 1 + log2(2^u + 1)
                let e = (tv - sv).exp2();
                let dbdu = (e / (e + 1.0)) as f32;
                let gv = g.item();
                accumulate(&mut grads[node.parents[0]], Tensor::scalar(-gv * dbdu));
                accumulate(&mut grads[node.parents[1]], Tensor::scalar(gv * dbdu));
            }
        }
        Ok(())
    }

    /// STE for the quantizer input plus log-domain surrogate gradients for
    /// the step/threshold parameters:
    ///   in-range:  dq/d(log2 d)     = ln2 * (q - x)
    ///   clipped:   dq/d(log2 x_max) = ln2 * sign(x) * x_max
    /// In uniform mode the step is tied to the threshold, so both terms
    /// flow to t.
    fn fake_quant_bwd(
        &self,
        id: NodeId,
        g: &Tensor,
        mode: QuantMode,
        zero_clip_threshold_grad: bool,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let node = &self.nodes[id];
        let x = &self.nodes[node.parents[0]].value;
        let q = &node.value;
        let param_nodes = &node.parents[1..];
        let (_, x_max) = self.quant_lattice(mode, param_nodes);

        let mut gx = vec![0.0f32; x.len()];
        let mut g_in_range = 0.0f64; // sum of upstream * ln2 * (q - x)
        let mut g_clip = 0.0f64; // sum of upstream * ln2 * sign(x) * x_max
        for i in 0..x.len() {
            let xv = x.data()[i] as f64;
            let gv = g.data()[i] as f64;
            if xv.abs() <= x_max {
                gx[i] = gv as f32;
                g_in_range += gv * LN_2 * (q.data()[i] as f64 - xv);
            } else {
                g_clip += gv * LN_2 * xv.signum() * x_max;
            }
        }
        if zero_clip_threshold_grad {
            g_clip = 0.0;
        }
        accumulate(&mut grads[node.parents[0]], Tensor::new(x.shape().to_vec(), gx)?);
        match mode {
            QuantMode::Uniform { .. } => {
                accumulate(&mut grads[node.parents[1]], Tensor::scalar((g_in_range + g_clip) as f32));
            }
            QuantMode::Mixed => {
                accumulate(&mut grads[node.parents[1]], Tensor::scalar(g_in_range as f32));
                accumulate(&mut grads[node.parents[2]], Tensor::scalar(g_clip as f32));
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        None => *slot = Some(t),
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(t.data()) {
                *e += v;
            }
        }
    }
}

fn elementwise(t: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).unwrap()
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .unwrap()
}
