use super::conv::{self, ConvGeom};
use super::kernels::{self, for_each_index2};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

pub(crate) type CustomBackward = Box<dyn Fn(&Tensor, &[&Tensor]) -> Vec<Tensor>>;

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Softmax(Var),
    Gelu(Var),
    Normalize {
        input: Var,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Conv {
        input: Var,
        weight: Var,
        geom: ConvGeom,
    },
    ConvTranspose {
        input: Var,
        weight: Var,
        geom: ConvGeom,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

/// Linear record of primitive operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the record is already a
/// topological order and the reverse sweep visits every node once. A tape is
/// owned by a single forward/backward pass; parallel work uses one tape per
/// worker.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        // Operations with no differentiable input are recorded as constants.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Reverse sweep from a scalar `loss`. Every `requires_grad` node that the
    /// loss depends on receives a gradient; contributions from multiple uses
    /// are summed.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut buffers: Vec<Option<Vec<f64>>> = Vec::new();
        buffers.resize_with(loss.0 + 1, || None);
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if !root.requires_grad {
            return Ok(Grads { grads });
        }
        buffers[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = buffers[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut buffers);
            grads[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
        }
        Ok(Grads { grads })
    }

    fn slot<'b>(&self, buffers: &'b mut [Option<Vec<f64>>], var: Var) -> Option<&'b mut Vec<f64>> {
        let node = &self.nodes[var.0];
        if !node.requires_grad {
            return None;
        }
        Some(buffers[var.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    fn propagate(&self, node: &Node, g: &[f64], buffers: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                let out = node.value.shape();
                for (var, s) in [(*a, 1.0), (*b, sign)] {
                    let src = self.value(var).shape().to_vec();
                    if let Some(buf) = self.slot(buffers, var) {
                        reduce_into(buf, &src, out, g, s);
                    }
                }
            }
            Op::Mul(a, b) => {
                let out = node.value.shape();
                let (av, bv) = (self.value(*a), self.value(*b));
                let sa = kernels::aligned_strides(av.shape(), out);
                let sb = kernels::aligned_strides(bv.shape(), out);
                if let Some(buf) = self.slot(buffers, *a) {
                    let bd = bv.data();
                    for_each_index2(out, &sa, &sb, |o, ia, ib| buf[ia] += g[o] * bd[ib]);
                }
                if let Some(buf) = self.slot(buffers, *b) {
                    let ad = av.data();
                    for_each_index2(out, &sa, &sb, |o, ia, ib| buf[ib] += g[o] * ad[ia]);
                }
            }
            Op::Scale(a, c) => {
                if let Some(buf) = self.slot(buffers, *a) {
                    for (b, &gv) in buf.iter_mut().zip(g) {
                        *b += gv * c;
                    }
                }
            }
            Op::MatMul(a, b) => self.matmul_backward(node, *a, *b, g, buffers),
            Op::Reshape(a) => {
                if let Some(buf) = self.slot(buffers, *a) {
                    add_assign(buf, g);
                }
            }
            Op::Permute(a, perm) => {
                if let Some(buf) = self.slot(buffers, *a) {
                    let src_shape = self.value(*a).shape();
                    let strides = kernels::row_major_strides(src_shape);
                    let permuted: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
                    let zeros = vec![0; perm.len()];
                    for_each_index2(node.value.shape(), &permuted, &zeros, |o, is, _| {
                        buf[is] += g[o];
                    });
                }
            }
            Op::Concat(inputs, axis) => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let out_row = out_shape[*axis] * inner;
                let mut offset = 0;
                for &var in inputs {
                    let width = self.value(var).shape()[*axis] * inner;
                    if let Some(buf) = self.slot(buffers, var) {
                        for o in 0..outer {
                            let src = &g[o * out_row + offset..o * out_row + offset + width];
                            add_assign(&mut buf[o * width..(o + 1) * width], src);
                        }
                    }
                    offset += width;
                }
            }
            Op::Slice { input, axis, start } => {
                let src_shape = self.value(*input).shape().to_vec();
                if let Some(buf) = self.slot(buffers, *input) {
                    let outer: usize = src_shape[..*axis].iter().product();
                    let inner: usize = src_shape[axis + 1..].iter().product();
                    let width = node.value.shape()[*axis] * inner;
                    let src_row = src_shape[*axis] * inner;
                    for o in 0..outer {
                        let dst = &mut buf[o * src_row + start * inner..][..width];
                        add_assign(dst, &g[o * width..(o + 1) * width]);
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(buf) = self.slot(buffers, *a) {
                    let width = *node.value.shape().last().unwrap_or(&1);
                    let y = node.value.data();
                    for ((brow, yrow), grow) in buf
                        .chunks_exact_mut(width)
                        .zip(y.chunks_exact(width))
                        .zip(g.chunks_exact(width))
                    {
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for ((b, &yv), &gv) in brow.iter_mut().zip(yrow).zip(grow) {
                            *b += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                if let Some(buf) = self.slot(buffers, *a) {
                    for ((b, &xv), &gv) in buf.iter_mut().zip(x).zip(g) {
                        *b += gv * kernels::gelu_grad(xv);
                    }
                }
            }
            Op::Normalize { input, inv_std } => {
                if let Some(buf) = self.slot(buffers, *input) {
                    let width = *node.value.shape().last().unwrap_or(&1);
                    let y = node.value.data();
                    for (((brow, yrow), grow), &inv) in buf
                        .chunks_exact_mut(width)
                        .zip(y.chunks_exact(width))
                        .zip(g.chunks_exact(width))
                        .zip(inv_std)
                    {
                        let n = width as f64;
                        let mean_g = grow.iter().sum::<f64>() / n;
                        let mean_gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((b, &yv), &gv) in brow.iter_mut().zip(yrow).zip(grow) {
                            *b += inv * (gv - mean_g - yv * mean_gy);
                        }
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                let n = self.value(*a).numel();
                let scale = if matches!(node.op, Op::Mean(_)) {
                    g[0] / n as f64
                } else {
                    g[0]
                };
                if let Some(buf) = self.slot(buffers, *a) {
                    buf.iter_mut().for_each(|b| *b += scale);
                }
            }
            Op::Mse(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let scale = 2.0 * g[0] / ad.len() as f64;
                if let Some(buf) = self.slot(buffers, *a) {
                    for ((v, &x), &y) in buf.iter_mut().zip(ad).zip(bd) {
                        *v += scale * (x - y);
                    }
                }
                if let Some(buf) = self.slot(buffers, *b) {
                    for ((v, &x), &y) in buf.iter_mut().zip(ad).zip(bd) {
                        *v -= scale * (x - y);
                    }
                }
            }
            Op::Conv {
                input,
                weight,
                geom,
            } => {
                let (x, w) = (self.value(*input).data(), self.value(*weight).data());
                if let Some(buf) = self.slot(buffers, *input) {
                    conv::backward_input(g, w, geom, buf);
                }
                if let Some(buf) = self.slot(buffers, *weight) {
                    conv::backward_weight(g, x, geom, buf);
                }
            }
            Op::ConvTranspose {
                input,
                weight,
                geom,
            } => {
                // `geom` describes the adjoint convolution: node output is its
                // input, node input is its output.
                let (x, w) = (self.value(*input).data(), self.value(*weight).data());
                if let Some(buf) = self.slot(buffers, *input) {
                    conv::forward(g, w, geom, buf);
                }
                if let Some(buf) = self.slot(buffers, *weight) {
                    conv::backward_weight(x, g, geom, buf);
                }
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let upstream = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                let contributions = backward(&upstream, &values);
                for (var, contribution) in inputs.iter().zip(contributions) {
                    if let Some(buf) = self.slot(buffers, *var) {
                        add_assign(buf, contribution.data());
                    }
                }
            }
        }
    }

    fn matmul_backward(
        &self,
        node: &Node,
        a: Var,
        b: Var,
        g: &[f64],
        buffers: &mut [Option<Vec<f64>>],
    ) {
        let (av, bv) = (self.value(a), self.value(b));
        let plan = MatmulPlan::new(av.shape(), bv.shape()).expect("validated at record time");
        debug_assert_eq!(plan.out_shape(), node.value.shape());
        let (m, k, n) = (plan.m, plan.k, plan.n);
        if let Some(buf) = self.slot(buffers, a) {
            let bd = bv.data();
            plan.for_each(|o, ia, ib| {
                kernels::mm_nt_acc(
                    &g[o * m * n..(o + 1) * m * n],
                    &bd[ib * k * n..(ib + 1) * k * n],
                    &mut buf[ia * m * k..(ia + 1) * m * k],
                    m,
                    n,
                    k,
                );
            });
        }
        if let Some(buf) = self.slot(buffers, b) {
            let ad = av.data();
            plan.for_each(|o, ia, ib| {
                kernels::mm_tn_acc(
                    &ad[ia * m * k..(ia + 1) * m * k],
                    &g[o * m * n..(o + 1) * m * n],
                    &mut buf[ib * k * n..(ib + 1) * k * n],
                    m,
                    k,
                    n,
                );
            });
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Sums a broadcast gradient back down to the source shape.
fn reduce_into(buf: &mut [f64], src: &[usize], out: &[usize], g: &[f64], sign: f64) {
    if src == out {
        for (b, &gv) in buf.iter_mut().zip(g) {
            *b += sign * gv;
        }
        return;
    }
    let strides = kernels::aligned_strides(src, out);
    let zeros = vec![0; out.len()];
    for_each_index2(out, &strides, &zeros, |o, is, _| buf[is] += sign * g[o]);
}

/// Batched matrix-product layout: leading dimensions broadcast, counted in
/// whole matrices.
pub(crate) struct MatmulPlan {
    pub(crate) batch: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
    pub(crate) m: usize,
    pub(crate) k: usize,
    pub(crate) n: usize,
}

impl MatmulPlan {
    pub(crate) fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shapes("matmul needs rank >= 2", a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(Error::shapes("matmul inner dimensions differ", a, b));
        }
        let (ba, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
        let batch = kernels::broadcast_shape(ba, bb)
            .ok_or_else(|| Error::shapes("matmul batch dimensions do not broadcast", a, b))?;
        let sa = kernels::aligned_strides(ba, &batch);
        let sb = kernels::aligned_strides(bb, &batch);
        Ok(Self {
            batch,
            sa,
            sb,
            m,
            k,
            n,
        })
    }

    pub(crate) fn out_shape(&self) -> Vec<usize> {
        let mut s = self.batch.clone();
        s.extend([self.m, self.n]);
        s
    }

    pub(crate) fn out_len(&self) -> usize {
        numel(&self.batch) * self.m * self.n
    }

    pub(crate) fn for_each(&self, f: impl FnMut(usize, usize, usize)) {
        for_each_index2(&self.batch, &self.sa, &self.sb, f);
    }
}
