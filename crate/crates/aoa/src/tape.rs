//! Reverse-mode autodiff on a Wengert tape.
//!
//! Nodes live in an append-only arena; operands always precede their
//! consumers, so one reverse sweep over the arena propagates adjoints. The
//! tape records enough structure to differentiate not just the forward pass
//! but also the relevance-propagation graph built on top of it, which is what
//! makes attention heat maps attackable by gradient descent.

use crate::error::{TapeError, TensorError};
use crate::kernels::{self, BinOp};
use crate::tensor::{Real, Tensor};

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Conv2d {
        x: NodeId,
        k: NodeId,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        s: NodeId,
        k: NodeId,
        stride: usize,
        pad: usize,
    },
    ChannelAffine {
        x: NodeId,
        scale: Vec<Real>,
    },
    ChanBias {
        x: NodeId,
        b: NodeId,
    },
    Relu(NodeId),
    MaxPool {
        x: NodeId,
    },
    MaxUnpool {
        r: NodeId,
        pool: NodeId,
    },
    AvgPool {
        x: NodeId,
        size: usize,
        stride: usize,
    },
    AvgSpread {
        r: NodeId,
        size: usize,
        stride: usize,
    },
    Softmax(NodeId),
    Ln(NodeId),
    Exp(NodeId),
    Abs(NodeId),
    SumAll(NodeId),
    MaxAll(NodeId),
    MaxAllExcept {
        x: NodeId,
    },
    Select {
        x: NodeId,
        index: usize,
    },
    Scale {
        x: NodeId,
        c: Real,
    },
    AddScalar(NodeId),
    StabilizeSign(NodeId),
    BilinearResize {
        x: NodeId,
    },
    Pad2d {
        x: NodeId,
        offset: (usize, usize),
    },
    Reshape(NodeId),
    /// The operand is recorded for graph completeness but deliberately
    /// invisible to both the adjoint sweep and the reachability pass.
    Detach(#[allow(dead_code)] NodeId),
}

#[derive(Clone, Debug)]
enum Aux {
    None,
    /// Flat source index per output element (max pooling).
    Argmax(Vec<usize>),
    /// Single winning index (max reductions).
    ArgIdx(usize),
}

struct Node {
    op: Op,
    value: Tensor,
    aux: Aux,
}

/// Gradient of the root with respect to one requested node.
#[derive(Clone, Debug)]
pub struct Gradient {
    pub grad: Tensor,
    /// False when the node does not influence the root; the gradient is then
    /// a zero tensor rather than a silent omission.
    pub connected: bool,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a recorded node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn check(&self, id: NodeId) -> Result<(), TapeError> {
        if id < self.nodes.len() {
            Ok(())
        } else {
            Err(TapeError::InvalidNode(id))
        }
    }

    fn push(&mut self, op: Op, value: Tensor, aux: Aux) -> NodeId {
        self.nodes.push(Node { op, value, aux });
        self.nodes.len() - 1
    }

    /// Records an input. Every differentiation target must be a leaf or a
    /// node derived from one.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, Aux::None)
    }

    pub fn constant(&mut self, value: Real) -> NodeId {
        self.push(Op::Leaf, Tensor::scalar(value), Aux::None)
    }

    fn binary(&mut self, op: BinOp, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.check(a)?;
        self.check(b)?;
        let value = kernels::binary(op, &self.nodes[a].value, &self.nodes[b].value)?;
        let rec = match op {
            BinOp::Add => Op::Add(a, b),
            BinOp::Sub => Op::Sub(a, b),
            BinOp::Mul => Op::Mul(a, b),
            BinOp::Div => Op::Div(a, b),
        };
        Ok(self.push(rec, value, Aux::None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.binary(BinOp::Div, a, b)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.check(a)?;
        self.check(b)?;
        let value = kernels::matmul(&self.nodes[a].value, &self.nodes[b].value)?;
        Ok(self.push(Op::MatMul(a, b), value, Aux::None))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.check(a)?;
        let value = kernels::transpose(&self.nodes[a].value)?;
        Ok(self.push(Op::Transpose(a), value, Aux::None))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        k: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, TapeError> {
        self.check(x)?;
        self.check(k)?;
        let value = kernels::conv2d(&self.nodes[x].value, &self.nodes[k].value, stride, pad)?;
        Ok(self.push(Op::Conv2d { x, k, stride, pad }, value, Aux::None))
    }

    /// Adjoint map of `conv2d` as a forward op; `out_hw` is the spatial size
    /// of the grid being scattered onto.
    pub fn conv2d_transpose(
        &mut self,
        s: NodeId,
        k: NodeId,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    ) -> Result<NodeId, TapeError> {
        self.check(s)?;
        self.check(k)?;
        let value = kernels::conv2d_transpose(
            &self.nodes[s].value,
            &self.nodes[k].value,
            stride,
            pad,
            out_hw,
        )?;
        Ok(self.push(Op::ConvTranspose2d { s, k, stride, pad }, value, Aux::None))
    }

    /// Per-channel `x * scale + shift` with constant coefficients.
    pub fn channel_affine(
        &mut self,
        x: NodeId,
        scale: &[Real],
        shift: &[Real],
    ) -> Result<NodeId, TapeError> {
        self.check(x)?;
        let value = kernels::channel_affine(&self.nodes[x].value, scale, shift)?;
        Ok(self.push(
            Op::ChannelAffine {
                x,
                scale: scale.to_vec(),
            },
            value,
            Aux::None,
        ))
    }

    /// Adds a per-channel bias vector `b: [C]` to `x: [C, H, W]`.
    pub fn chan_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.check(x)?;
        self.check(b)?;
        let value = kernels::chan_bias(&self.nodes[x].value, &self.nodes[b].value)?;
        Ok(self.push(Op::ChanBias { x, b }, value, Aux::None))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        self.check(x)?;
        let value = kernels::relu(&self.nodes[x].value);
        Ok(self.push(Op::Relu(x), value, Aux::None))
    }

    pub fn maxpool(&mut self, x: NodeId, size: usize, stride: usize) -> Result<NodeId, TapeError> {
        self.check(x)?;
        let (value, argmax) = kernels::maxpool(&self.nodes[x].value, size, stride)?;
        Ok(self.push(Op::MaxPool { x }, value, Aux::Argmax(argmax)))
    }

    /// Routes `r` back through the argmax positions recorded by `pool`,
    /// which must be a `maxpool` node.
    pub fn max_unpool(&mut self, r: NodeId, pool: NodeId) -> Result<NodeId, TapeError> {
        self.check(r)?;
        self.check(pool)?;
        let (Op::MaxPool { x }, Aux::Argmax(argmax)) = (&self.nodes[pool].op, &self.nodes[pool].aux)
        else {
            return Err(TapeError::MissingAux {
                op: "max_unpool",
                wants: "maxpool",
                node: pool,
            });
        };
        let x_shape = self.nodes[*x].value.shape().to_vec();
        let value = kernels::max_unpool_scatter(&self.nodes[r].value, argmax, &x_shape)?;
        Ok(self.push(Op::MaxUnpool { r, pool }, value, Aux::None))
    }

    pub fn avgpool(&mut self, x: NodeId, size: usize, stride: usize) -> Result<NodeId, TapeError> {
        self.check(x)?;
        let value = kernels::avgpool(&self.nodes[x].value, size, stride)?;
        Ok(self.push(Op::AvgPool { x, size, stride }, value, Aux::None))
    }

    /// Adjoint map of `avgpool`: spreads each value uniformly over its window.
    pub fn avg_spread(
        &mut self,
        r: NodeId,
        size: usize,
        stride: usize,
        out_hw: (usize, usize),
    ) -> Result<NodeId, TapeError> {
        self.check(r)?;
        let value = kernels::avg_spread(&self.nodes[r].value, size, stride, out_hw)?;
        Ok(self.push(Op::AvgSpread { r, size, stride }, value, Aux::None))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        self.check(x)?;
        let value = kernels::softmax(&self.nodes[x].value)?;
        Ok(self.push(Op::Softmax(x), value, Aux::None))
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        self.check(x)?;
        let value = kernels::ln(&self.nodes[x].value)?;
        Ok(self.push(Op::Ln(x), value, Aux::None))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        self.check(x)?;
        let value = kernels::exp(&self.nodes[x].value)?;
        Ok(self.push(Op::Exp(x), value, Aux::None))
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        self.check(x)?;
        let value = self.nodes[x].value.map(Real::abs);
        Ok(self.push(Op::Abs(x), value, Aux::None))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        self.check(x)?;
        let value = kernels::sum_all(&self.nodes[x].value);
        Ok(self.push(Op::SumAll(x), value, Aux::None))
    }

    pub fn max_all(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        self.check(x)?;
        let (value, arg) = kernels::max_all(&self.nodes[x].value)?;
        Ok(self.push(Op::MaxAll(x), value, Aux::ArgIdx(arg)))
    }

    pub fn max_all_except(&mut self, x: NodeId, skip: usize) -> Result<NodeId, TapeError> {
        self.check(x)?;
        let (value, arg) = kernels::max_all_except(&self.nodes[x].value, skip)?;
        Ok(self.push(Op::MaxAllExcept { x }, value, Aux::ArgIdx(arg)))
    }

    pub fn select(&mut self, x: NodeId, index: usize) -> Result<NodeId, TapeError> {
        self.check(x)?;
        let t = &self.nodes[x].value;
        if index >= t.len() {
            return Err(TensorError::IndexOutOfBounds {
                index,
                len: t.len(),
            }
            .into());
        }
        let value = Tensor::scalar(t.data()[index]);
        Ok(self.push(Op::Select { x, index }, value, Aux::None))
    }

    pub fn scale(&mut self, x: NodeId, c: Real) -> Result<NodeId, TapeError> {
        self.check(x)?;
        let value = self.nodes[x].value.map(|v| v * c);
        Ok(self.push(Op::Scale { x, c }, value, Aux::None))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: Real) -> Result<NodeId, TapeError> {
        self.check(x)?;
        let value = self.nodes[x].value.map(|v| v + c);
        Ok(self.push(Op::AddScalar(x), value, Aux::None))
    }

    /// `x + eps * sign(x)` with `sign(0) = +1`; the epsilon-rule stabilizer.
    /// Derivative is treated as 1 everywhere (the step is piecewise constant).
    pub fn stabilize_sign(&mut self, x: NodeId, eps: Real) -> Result<NodeId, TapeError> {
        self.check(x)?;
        let value = self.nodes[x]
            .value
            .map(|v| if v >= 0.0 { v + eps } else { v - eps });
        Ok(self.push(Op::StabilizeSign(x), value, Aux::None))
    }

    pub fn bilinear_resize(
        &mut self,
        x: NodeId,
        out_hw: (usize, usize),
    ) -> Result<NodeId, TapeError> {
        self.check(x)?;
        let value = kernels::bilinear_resize(&self.nodes[x].value, out_hw)?;
        Ok(self.push(Op::BilinearResize { x }, value, Aux::None))
    }

    pub fn pad2d(
        &mut self,
        x: NodeId,
        out_hw: (usize, usize),
        offset: (usize, usize),
    ) -> Result<NodeId, TapeError> {
        self.check(x)?;
        let value = kernels::pad2d(&self.nodes[x].value, out_hw, offset)?;
        Ok(self.push(Op::Pad2d { x, offset }, value, Aux::None))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, TapeError> {
        self.check(x)?;
        let value = self.nodes[x].value.reshaped(shape)?;
        Ok(self.push(Op::Reshape(x), value, Aux::None))
    }

    /// Copies the value and blocks gradient flow through it.
    pub fn detach(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        self.check(x)?;
        let value = self.nodes[x].value.clone();
        Ok(self.push(Op::Detach(x), value, Aux::None))
    }

    /// Gradient of scalar `root` with respect to `leaf`.
    pub fn gradient(&self, root: NodeId, leaf: NodeId) -> Result<Gradient, TapeError> {
        Ok(self.backward(root, &[leaf])?.pop().expect("one target"))
    }

    /// Gradients of scalar `root` with respect to each node in `wrt`,
    /// computed in a single reverse sweep.
    pub fn backward(&self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<Gradient>, TapeError> {
        self.check(root)?;
        for &id in wrt {
            self.check(id)?;
        }
        let root_val = &self.nodes[root].value;
        if !root_val.is_scalar() {
            return Err(TapeError::RootNotScalar(root_val.shape().to_vec()));
        }

        // Only subgraphs that lead back to a requested node get adjoint work;
        // this skips e.g. kernel gradients when only the input is wanted.
        let mut needs = vec![false; root + 1];
        for &id in wrt {
            if id <= root {
                needs[id] = true;
            }
        }
        for id in 0..=root {
            if !needs[id] {
                needs[id] = self.operands(id).iter().any(|&o| needs[o]);
            }
        }

        let mut adj: Vec<Option<Vec<Real>>> = vec![None; root + 1];
        adj[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            let (lower, upper) = adj.split_at_mut(id);
            let Some(d) = upper[0].as_deref() else {
                continue;
            };
            self.accumulate(id, d, lower, &needs);
        }

        Ok(wrt
            .iter()
            .map(|&id| match adj.get(id).and_then(|g| g.clone()) {
                Some(g) => Gradient {
                    grad: Tensor::raw(self.nodes[id].value.shape().to_vec(), g),
                    connected: true,
                },
                None => Gradient {
                    grad: Tensor::zeros(self.nodes[id].value.shape()),
                    connected: false,
                },
            })
            .collect())
    }

    /// Operand ids of a node, for reachability analysis.
    fn operands(&self, id: NodeId) -> Vec<NodeId> {
        match &self.nodes[id].op {
            Op::Leaf | Op::Detach(_) => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b) => vec![*a, *b],
            Op::Conv2d { x, k, .. } => vec![*x, *k],
            Op::ConvTranspose2d { s, k, .. } => vec![*s, *k],
            Op::ChanBias { x, b } => vec![*x, *b],
            Op::MaxUnpool { r, .. } => vec![*r],
            Op::AvgSpread { r, .. } => vec![*r],
            Op::Transpose(x)
            | Op::ChannelAffine { x, .. }
            | Op::Relu(x)
            | Op::MaxPool { x }
            | Op::AvgPool { x, .. }
            | Op::Softmax(x)
            | Op::Ln(x)
            | Op::Exp(x)
            | Op::Abs(x)
            | Op::SumAll(x)
            | Op::MaxAll(x)
            | Op::MaxAllExcept { x }
            | Op::Select { x, .. }
            | Op::Scale { x, .. }
            | Op::AddScalar(x)
            | Op::StabilizeSign(x)
            | Op::BilinearResize { x }
            | Op::Pad2d { x, .. }
            | Op::Reshape(x) => vec![*x],
        }
    }

    /// Adds this node's contribution to its operands' adjoints. `lower` holds
    /// adjoint slots for all ids below `id`; operands always satisfy that.
    fn accumulate(&self, id: NodeId, d: &[Real], lower: &mut [Option<Vec<Real>>], needs: &[bool]) {
        let node = &self.nodes[id];
        let val = |i: NodeId| self.nodes[i].value.data();
        let len = |i: NodeId| self.nodes[i].value.len();
        // Fetches (allocating on first touch) the adjoint buffer of an operand.
        macro_rules! slot {
            ($i:expr) => {{
                let i: NodeId = $i;
                lower[i].get_or_insert_with(|| vec![0.0; self.nodes[i].value.len()])
            }};
        }

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    let g = slot!(x);
                    if g.len() == d.len() {
                        for (gi, &di) in g.iter_mut().zip(d) {
                            *gi += di;
                        }
                    } else {
                        g[0] += d.iter().sum::<Real>();
                    }
                }
            }
            Op::Sub(a, b) => {
                {
                    let g = slot!(*a);
                    if g.len() == d.len() {
                        for (gi, &di) in g.iter_mut().zip(d) {
                            *gi += di;
                        }
                    } else {
                        g[0] += d.iter().sum::<Real>();
                    }
                }
                let g = slot!(*b);
                if g.len() == d.len() {
                    for (gi, &di) in g.iter_mut().zip(d) {
                        *gi -= di;
                    }
                } else {
                    g[0] -= d.iter().sum::<Real>();
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let (av, bv) = (val(a), val(b));
                {
                    let g = slot!(a);
                    if g.len() == d.len() {
                        if bv.len() == d.len() {
                            for i in 0..d.len() {
                                g[i] += d[i] * bv[i];
                            }
                        } else {
                            for i in 0..d.len() {
                                g[i] += d[i] * bv[0];
                            }
                        }
                    } else {
                        g[0] += d.iter().zip(bv).map(|(&di, &bi)| di * bi).sum::<Real>();
                    }
                }
                let g = slot!(b);
                if g.len() == d.len() {
                    if av.len() == d.len() {
                        for i in 0..d.len() {
                            g[i] += d[i] * av[i];
                        }
                    } else {
                        for i in 0..d.len() {
                            g[i] += d[i] * av[0];
                        }
                    }
                } else {
                    g[0] += d.iter().zip(av).map(|(&di, &ai)| di * ai).sum::<Real>();
                }
            }
            Op::Div(a, b) => {
                // y = a / b; divisors were validated nonzero at eval time.
                let (a, b) = (*a, *b);
                let (av, bv) = (val(a), val(b));
                let bval = |i: usize| if bv.len() == 1 { bv[0] } else { bv[i] };
                let aval = |i: usize| if av.len() == 1 { av[0] } else { av[i] };
                {
                    let g = slot!(a);
                    if g.len() == d.len() {
                        for i in 0..d.len() {
                            g[i] += d[i] / bval(i);
                        }
                    } else {
                        g[0] += d
                            .iter()
                            .enumerate()
                            .map(|(i, &di)| di / bval(i))
                            .sum::<Real>();
                    }
                }
                let g = slot!(b);
                if g.len() == d.len() {
                    for i in 0..d.len() {
                        let bi = bval(i);
                        g[i] -= d[i] * aval(i) / (bi * bi);
                    }
                } else {
                    g[0] -= d
                        .iter()
                        .enumerate()
                        .map(|(i, &di)| di * aval(i) / (bval(i) * bval(i)))
                        .sum::<Real>();
                }
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let ashape = self.nodes[a].value.shape();
                let (m, k) = (ashape[0], ashape[1]);
                let (av, bv) = (val(a), val(b));
                if self.nodes[b].value.shape().len() == 1 {
                    // [m,k] x [k] -> [m]
                    if needs[a] {
                        let g = slot!(a);
                        for i in 0..m {
                            for kk in 0..k {
                                g[i * k + kk] += d[i] * bv[kk];
                            }
                        }
                    }
                    if needs[b] {
                        let g = slot!(b);
                        for i in 0..m {
                            if d[i] == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                g[kk] += av[i * k + kk] * d[i];
                            }
                        }
                    }
                } else {
                    let n = self.nodes[b].value.shape()[1];
                    if needs[a] {
                        let g = slot!(a);
                        for i in 0..m {
                            for kk in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += d[i * n + j] * bv[kk * n + j];
                                }
                                g[i * k + kk] += acc;
                            }
                        }
                    }
                    if needs[b] {
                        let g = slot!(b);
                        for kk in 0..k {
                            for i in 0..m {
                                let a_ik = av[i * k + kk];
                                if a_ik == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    g[kk * n + j] += a_ik * d[i * n + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let x = *x;
                if !needs[x] {
                    return;
                }
                let (m, n) = {
                    let s = self.nodes[x].value.shape();
                    (s[0], s[1])
                };
                let g = slot!(x);
                for i in 0..m {
                    for j in 0..n {
                        g[i * n + j] += d[j * m + i];
                    }
                }
            }
            Op::Conv2d { x, k, stride, pad } => {
                let (x, k) = (*x, *k);
                let dt = Tensor::raw(node.value.shape().to_vec(), d.to_vec());
                let xv = &self.nodes[x].value;
                let kv = &self.nodes[k].value;
                if needs[x] {
                    let hw = (xv.shape()[1], xv.shape()[2]);
                    let dx = kernels::conv2d_transpose(&dt, kv, *stride, *pad, hw)
                        .expect("adjoint geometry matches forward");
                    for (gi, &v) in slot!(x).iter_mut().zip(dx.data()) {
                        *gi += v;
                    }
                }
                if needs[k] {
                    let dk = kernels::conv2d_kernel_grad(
                        xv,
                        &dt,
                        *stride,
                        *pad,
                        kv.shape()[2],
                        kv.shape()[3],
                    )
                    .expect("adjoint geometry matches forward");
                    for (gi, &v) in slot!(k).iter_mut().zip(dk.data()) {
                        *gi += v;
                    }
                }
            }
            Op::ConvTranspose2d { s, k, stride, pad } => {
                let (s, k) = (*s, *k);
                let dt = Tensor::raw(node.value.shape().to_vec(), d.to_vec());
                let kv = &self.nodes[k].value;
                let sv = &self.nodes[s].value;
                if needs[s] {
                    let ds = kernels::conv2d(&dt, kv, *stride, *pad)
                        .expect("adjoint geometry matches forward");
                    for (gi, &v) in slot!(s).iter_mut().zip(ds.data()) {
                        *gi += v;
                    }
                }
                if needs[k] {
                    let dk = kernels::conv2d_kernel_grad(
                        &dt,
                        sv,
                        *stride,
                        *pad,
                        kv.shape()[2],
                        kv.shape()[3],
                    )
                    .expect("adjoint geometry matches forward");
                    for (gi, &v) in slot!(k).iter_mut().zip(dk.data()) {
                        *gi += v;
                    }
                }
            }
            Op::ChanBias { x, b } => {
                let (x, b) = (*x, *b);
                if needs[x] {
                    let g = slot!(x);
                    for i in 0..d.len() {
                        g[i] += d[i];
                    }
                }
                if needs[b] {
                    let channels = len(b);
                    let plane = d.len() / channels;
                    let g = slot!(b);
                    for c in 0..channels {
                        g[c] += d[c * plane..(c + 1) * plane].iter().sum::<Real>();
                    }
                }
            }
            Op::ChannelAffine { x, scale } => {
                let x = *x;
                let plane = len(x) / scale.len();
                let g = slot!(x);
                for (c, &a) in scale.iter().enumerate() {
                    let base = c * plane;
                    for i in 0..plane {
                        g[base + i] += d[base + i] * a;
                    }
                }
            }
            Op::Relu(x) => {
                let x = *x;
                let xv = val(x);
                let g = slot!(x);
                for i in 0..d.len() {
                    if xv[i] > 0.0 {
                        g[i] += d[i];
                    }
                }
            }
            Op::MaxPool { x } => {
                let Aux::Argmax(argmax) = &node.aux else {
                    unreachable!("maxpool nodes carry argmax aux");
                };
                let g = slot!(*x);
                for (i, &src) in argmax.iter().enumerate() {
                    g[src] += d[i];
                }
            }
            Op::MaxUnpool { r, pool } => {
                let Aux::Argmax(argmax) = &self.nodes[*pool].aux else {
                    unreachable!("maxpool nodes carry argmax aux");
                };
                let g = slot!(*r);
                for (i, &src) in argmax.iter().enumerate() {
                    g[i] += d[src];
                }
            }
            Op::AvgPool { x, size, stride } => {
                let x = *x;
                let dt = Tensor::raw(node.value.shape().to_vec(), d.to_vec());
                let xs = self.nodes[x].value.shape();
                let dx = kernels::avg_spread(&dt, *size, *stride, (xs[1], xs[2]))
                    .expect("adjoint geometry matches forward");
                for (gi, &v) in slot!(x).iter_mut().zip(dx.data()) {
                    *gi += v;
                }
            }
            Op::AvgSpread { r, size, stride } => {
                let r = *r;
                let dt = Tensor::raw(node.value.shape().to_vec(), d.to_vec());
                let dr = kernels::avgpool(&dt, *size, *stride)
                    .expect("adjoint geometry matches forward");
                for (gi, &v) in slot!(r).iter_mut().zip(dr.data()) {
                    *gi += v;
                }
            }
            Op::Softmax(x) => {
                let x = *x;
                let p = node.value.data();
                let dot: Real = d.iter().zip(p).map(|(&di, &pi)| di * pi).sum();
                let g = slot!(x);
                for i in 0..d.len() {
                    g[i] += p[i] * (d[i] - dot);
                }
            }
            Op::Ln(x) => {
                let x = *x;
                let xv = val(x);
                let g = slot!(x);
                for i in 0..d.len() {
                    g[i] += d[i] / xv[i];
                }
            }
            Op::Exp(x) => {
                let x = *x;
                let y = node.value.data();
                let g = slot!(x);
                for i in 0..d.len() {
                    g[i] += d[i] * y[i];
                }
            }
            Op::Abs(x) => {
                // Subgradient 0 at the kink.
                let x = *x;
                let xv = val(x);
                let g = slot!(x);
                for i in 0..d.len() {
                    if xv[i] > 0.0 {
                        g[i] += d[i];
                    } else if xv[i] < 0.0 {
                        g[i] -= d[i];
                    }
                }
            }
            Op::SumAll(x) => {
                let g = slot!(*x);
                for gi in g.iter_mut() {
                    *gi += d[0];
                }
            }
            Op::MaxAll(x) | Op::MaxAllExcept { x } => {
                let Aux::ArgIdx(arg) = node.aux else {
                    unreachable!("max reductions carry their argmax");
                };
                slot!(*x)[arg] += d[0];
            }
            Op::Select { x, index } => {
                slot!(*x)[*index] += d[0];
            }
            Op::Scale { x, c } => {
                let c = *c;
                let g = slot!(*x);
                for i in 0..d.len() {
                    g[i] += c * d[i];
                }
            }
            Op::AddScalar(x) | Op::StabilizeSign(x) | Op::Reshape(x) => {
                let g = slot!(*x);
                for i in 0..d.len() {
                    g[i] += d[i];
                }
            }
            Op::BilinearResize { x } => {
                let x = *x;
                let xs = self.nodes[x].value.shape().to_vec();
                let os = node.value.shape().to_vec();
                let taps = kernels::bilinear_plan(xs[1], xs[2], os[1], os[2]);
                let (ihw, ohw) = (xs[1] * xs[2], os[1] * os[2]);
                let g = slot!(x);
                for c in 0..xs[0] {
                    for &(o, s, wt) in &taps {
                        g[c * ihw + s] += wt * d[c * ohw + o];
                    }
                }
            }
            Op::Pad2d { x, offset } => {
                let x = *x;
                let dt = Tensor::raw(node.value.shape().to_vec(), d.to_vec());
                let xs = self.nodes[x].value.shape();
                let dx = kernels::crop2d(&dt, (xs[1], xs[2]), *offset)
                    .expect("adjoint geometry matches forward");
                for (gi, &v) in slot!(x).iter_mut().zip(dx.data()) {
                    *gi += v;
                }
            }
            Op::Detach(_) => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[Real]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn recorded_values_match_unrecorded_kernels() {
        let x = t(&[1, 4, 4], &(0..16).map(|i| i as Real - 7.5).collect::<Vec<_>>());
        let k = t(&[2, 1, 3, 3], &(0..18).map(|i| (i as Real) * 0.1 - 0.9).collect::<Vec<_>>());
        let plain = kernels::conv2d(&x, &k, 1, 1).unwrap();
        let mut tape = Tape::new();
        let xt = tape.leaf(x);
        let kt = tape.leaf(k);
        let y = tape.conv2d(xt, kt, 1, 1).unwrap();
        assert_eq!(tape.value(y), &plain);
    }

    #[test]
    fn weighted_sum_gradient_is_the_weights() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let w = tape.leaf(t(&[3], &[3.0, 5.0, -1.0]));
        let p = tape.mul(x, w).unwrap();
        let s = tape.sum_all(p).unwrap();
        let g = tape.gradient(s, x).unwrap();
        assert!(g.connected);
        assert_eq!(g.grad.data(), &[3.0, 5.0, -1.0]);
    }

    #[test]
    fn dead_relu_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[-1.0, 2.0]));
        let r = tape.relu(x).unwrap();
        let s = tape.sum_all(r).unwrap();
        let g = tape.gradient(s, x).unwrap();
        assert_eq!(g.grad.data(), &[0.0, 1.0]);
    }

    #[test]
    fn disconnected_leaf_is_flagged() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let y = tape.leaf(t(&[2], &[3.0, 4.0]));
        let s = tape.sum_all(x).unwrap();
        let g = tape.gradient(s, y).unwrap();
        assert!(!g.connected);
        assert_eq!(g.grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let d = tape.detach(x).unwrap();
        let p = tape.mul(x, d).unwrap();
        let s = tape.sum_all(p).unwrap();
        let g = tape.gradient(s, x).unwrap();
        // d/dx of x * stop(x) is stop(x), not 2x.
        assert_eq!(g.grad.data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert!(matches!(
            tape.gradient(r, x),
            Err(TapeError::RootNotScalar(_))
        ));
    }

    #[test]
    fn softmax_adjoint_hand_value() {
        // d/dz0 of softmax(z)[0] = p0 (1 - p0).
        let mut tape = Tape::new();
        let z = tape.leaf(t(&[2], &[1.0, -1.0]));
        let p = tape.softmax(z).unwrap();
        let p0 = tape.select(p, 0).unwrap();
        let g = tape.gradient(p0, z).unwrap();
        let p0v = tape.value(p).data()[0];
        let expect0 = p0v * (1.0 - p0v);
        assert!((g.grad.data()[0] - expect0).abs() < 1e-12);
        assert!((g.grad.data()[1] + expect0).abs() < 1e-12);
    }

    #[test]
    fn max_unpool_roundtrip_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2, 2], &[1.0, 4.0, 3.0, 2.0]));
        let pooled = tape.maxpool(x, 2, 2).unwrap();
        let r = tape.leaf(t(&[1, 1, 1], &[5.0]));
        let un = tape.max_unpool(r, pooled).unwrap();
        assert_eq!(tape.value(un).data(), &[0.0, 5.0, 0.0, 0.0]);
        let s = tape.sum_all(un).unwrap();
        let g = tape.gradient(s, r).unwrap();
        assert_eq!(g.grad.data(), &[1.0]);
    }

    #[test]
    fn max_unpool_rejects_non_pool_nodes() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2, 2], &[1.0, 4.0, 3.0, 2.0]));
        let r = tape.leaf(t(&[1, 1, 1], &[5.0]));
        assert!(matches!(
            tape.max_unpool(r, x),
            Err(TapeError::MissingAux { .. })
        ));
    }

    #[test]
    fn division_by_zero_is_an_error_not_inf() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2], &[1.0, 0.0]));
        assert!(matches!(
            tape.div(a, b),
            Err(TapeError::Tensor(TensorError::DivisionByZero))
        ));
    }

    #[test]
    fn three_layer_composite_gradient_matches_finite_differences() {
        // relu(W2 relu(W1 x)) summed; checked coordinate by coordinate.
        let w1 = t(&[3, 4], &[0.2, -0.1, 0.4, 0.3, -0.5, 0.2, 0.1, -0.2, 0.3, 0.3, -0.4, 0.1]);
        let w2 = t(&[2, 3], &[0.5, -0.3, 0.2, -0.1, 0.4, 0.6]);
        let x0 = t(&[4], &[0.7, -1.2, 0.5, 2.0]);
        let f = |x: &Tensor| -> Real {
            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone());
            let w1i = tape.leaf(w1.clone());
            let w2i = tape.leaf(w2.clone());
            let h = tape.matmul(w1i, xi).unwrap();
            let h = tape.relu(h).unwrap();
            let o = tape.matmul(w2i, h).unwrap();
            let o = tape.relu(o).unwrap();
            let s = tape.sum_all(o).unwrap();
            tape.value(s).item()
        };
        let mut tape = Tape::new();
        let xi = tape.leaf(x0.clone());
        let w1i = tape.leaf(w1.clone());
        let w2i = tape.leaf(w2.clone());
        let h = tape.matmul(w1i, xi).unwrap();
        let h = tape.relu(h).unwrap();
        let o = tape.matmul(w2i, h).unwrap();
        let o = tape.relu(o).unwrap();
        let s = tape.sum_all(o).unwrap();
        let g = tape.gradient(s, xi).unwrap();
        let step = 1e-5;
        for i in 0..x0.len() {
            let mut up = x0.data().to_vec();
            let mut dn = up.clone();
            up[i] += step;
            dn[i] -= step;
            let fd = (f(&t(&[4], &up)) - f(&t(&[4], &dn))) / (2.0 * step);
            assert!(
                (fd - g.grad.data()[i]).abs() < 1e-6,
                "coord {i}: fd {fd} vs {}",
                g.grad.data()[i]
            );
        }
    }
}
