use std::cell::RefCell;
use std::rc::Rc;

use crate::scalar::Scalar;

use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

/// How the smaller operand of a binary op is expanded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    LScalar,
    RScalar,
    /// right operand is a trailing suffix repeated with this period
    RTile(usize),
    LTile(usize),
    /// right operand has last extent 1; the larger last extent is stored
    RCol(usize),
    LCol(usize),
}

impl Bcast {
    fn resolve(a: &[usize], b: &[usize]) -> Option<(Bcast, Vec<usize>)> {
        let na: usize = a.iter().product();
        let nb: usize = b.iter().product();
        if a == b {
            return Some((Bcast::Same, a.to_vec()));
        }
        if nb == 1 {
            return Some((Bcast::RScalar, a.to_vec()));
        }
        if na == 1 {
            return Some((Bcast::LScalar, b.to_vec()));
        }
        if b.len() < a.len() && a.ends_with(b) {
            return Some((Bcast::RTile(nb), a.to_vec()));
        }
        if a.len() < b.len() && b.ends_with(a) {
            return Some((Bcast::LTile(na), b.to_vec()));
        }
        let r = a.len();
        if r > 0 && r == b.len() && a[..r - 1] == b[..r - 1] {
            if b[r - 1] == 1 {
                return Some((Bcast::RCol(a[r - 1]), a.to_vec()));
            }
            if a[r - 1] == 1 {
                return Some((Bcast::LCol(b[r - 1]), b.to_vec()));
            }
        }
        None
    }

    #[inline(always)]
    fn lhs(self, k: usize) -> usize {
        match self {
            Bcast::LScalar => 0,
            Bcast::LTile(p) => k % p,
            Bcast::LCol(m) => k / m,
            _ => k,
        }
    }

    #[inline(always)]
    fn rhs(self, k: usize) -> usize {
        match self {
            Bcast::RScalar => 0,
            Bcast::RTile(p) => k % p,
            Bcast::RCol(m) => k / m,
            _ => k,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnKind {
    Neg,
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Abs,
    Relu,
    Softplus,
    Sigmoid,
}

enum Op<T> {
    Leaf,
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
        bc: Bcast,
    },
    Unary {
        kind: UnKind,
        a: usize,
    },
    Scale {
        a: usize,
        c: T,
    },
    AddScalar {
        a: usize,
    },
    Clamp {
        a: usize,
        lo: T,
        hi: T,
    },
    Sum {
        a: usize,
    },
    SumLast {
        a: usize,
        w: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        n: usize,
        k: usize,
        m: usize,
        shared_rhs: bool,
    },
    Broadcast {
        a: usize,
        bc: Bcast,
    },
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        widths: Vec<usize>,
    },
    GatherRows {
        a: usize,
        idx: Rc<[usize]>,
        row: usize,
    },
    ScatterAddRows {
        a: usize,
        idx: Rc<[usize]>,
        row: usize,
    },
    SelectCols {
        a: usize,
        cols: Rc<[usize]>,
        in_w: usize,
    },
    Softmax {
        a: usize,
        w: usize,
    },
    Reshape {
        a: usize,
    },
    Mat3Inverse {
        a: usize,
        frozen: Vec<bool>,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of primitive operations for one forward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Primitive kinds accepted by [`Tape::record`].
#[derive(Clone, Debug)]
pub enum Primitive<T> {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Sum,
    Broadcast(Vec<usize>),
    Concat(usize),
    IndexGather(Vec<usize>),
    Softmax,
    Relu,
    Softplus,
    Sigmoid,
    Neg,
    Abs,
    Scale(T),
    Clamp(T, T),
}

/// Gradients of the trainable leaves reached by a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, zeros if the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.shape().as_slice()),
        }
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Drops every node recorded after the first `len`. Vars created after
    /// that point must not be used again.
    pub fn truncate(&self, len: usize) {
        self.nodes.borrow_mut().truncate(len);
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Leaf that receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor<T>) -> Var<'_, T> {
        let rg = t.requires_grad();
        self.push(t.clone(), Op::Leaf, rg)
    }

    /// Trainable leaf regardless of the tensor's flag.
    pub fn param(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(t.clone(), Op::Leaf, true)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        let mut t = t;
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(v))
    }

    /// Records `prim` applied to `inputs`.
    pub fn record<'t>(&'t self, prim: Primitive<T>, inputs: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let need = |n: usize, op: &'static str| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(AutodiffError::Arity {
                    op,
                    expected: n,
                    got: inputs.len(),
                })
            }
        };
        match prim {
            Primitive::Add => need(2, "add").and_then(|_| inputs[0].add(inputs[1])),
            Primitive::Sub => need(2, "sub").and_then(|_| inputs[0].sub(inputs[1])),
            Primitive::Mul => need(2, "mul").and_then(|_| inputs[0].mul(inputs[1])),
            Primitive::Div => need(2, "div").and_then(|_| inputs[0].div(inputs[1])),
            Primitive::MatMul => need(2, "matmul").and_then(|_| inputs[0].matmul(inputs[1])),
            Primitive::Exp => need(1, "exp").map(|_| inputs[0].exp()),
            Primitive::Log => need(1, "log").map(|_| inputs[0].log()),
            Primitive::Sin => need(1, "sin").map(|_| inputs[0].sin()),
            Primitive::Cos => need(1, "cos").map(|_| inputs[0].cos()),
            Primitive::Sqrt => need(1, "sqrt").map(|_| inputs[0].sqrt()),
            Primitive::Sum => need(1, "sum").map(|_| inputs[0].sum()),
            Primitive::Broadcast(shape) => {
                need(1, "broadcast").and_then(|_| inputs[0].broadcast_to(&shape))
            }
            Primitive::Concat(axis) => self.concat(inputs, axis),
            Primitive::IndexGather(idx) => {
                need(1, "index-gather").and_then(|_| inputs[0].gather_rows(&idx))
            }
            Primitive::Softmax => need(1, "softmax").map(|_| inputs[0].softmax()),
            Primitive::Relu => need(1, "relu").map(|_| inputs[0].relu()),
            Primitive::Softplus => need(1, "softplus").map(|_| inputs[0].softplus()),
            Primitive::Sigmoid => need(1, "sigmoid").map(|_| inputs[0].sigmoid()),
            Primitive::Neg => need(1, "neg").map(|_| inputs[0].neg()),
            Primitive::Abs => need(1, "abs").map(|_| inputs[0].abs()),
            Primitive::Scale(c) => need(1, "scale").map(|_| inputs[0].scale(c)),
            Primitive::Clamp(lo, hi) => need(1, "clamp").map(|_| inputs[0].clamp(lo, hi)),
        }
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, inputs: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = inputs.first().ok_or(AutodiffError::Arity {
            op: "concat",
            expected: 1,
            got: 0,
        })?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(AutodiffError::InvalidAxis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut axis_len = 0;
        let mut widths = Vec::with_capacity(inputs.len());
        let mut vals = Vec::with_capacity(inputs.len());
        let mut rg = false;
        for v in inputs {
            let s = v.shape();
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s,
                });
            }
            axis_len += s[axis];
            widths.push(s[axis] * inner);
            vals.push(self.value_of(v.id));
            rg |= self.rg(v.id);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (val, &w) in vals.iter().zip(&widths) {
                data.extend_from_slice(&val.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = axis_len;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.iter().map(|v| v.id).collect(),
                outer,
                widths,
            },
            rg,
        ))
    }

    /// Runs reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(lv.shape(), T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
        }
        // keep leaf gradients only
        for (id, g) in grads.iter_mut().enumerate() {
            if !matches!(nodes[id].op, Op::Leaf) || !nodes[id].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn acc_buf<'g, T: Scalar>(
    grads: &'g mut [Option<Tensor<T>>],
    nodes: &[Node<T>],
    id: usize,
) -> Option<&'g mut [T]> {
    if !nodes[id].requires_grad {
        return None;
    }
    let slot = &mut grads[id];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(nodes[id].value.shape()));
    }
    slot.as_mut().map(|t| t.data_mut())
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let gd = g.data();
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b, bc } => {
            let (a, b, bc) = (*a, *b, *bc);
            let av = Rc::clone(&nodes[a].value);
            let bv = Rc::clone(&nodes[b].value);
            let (ad, bd) = (av.data(), bv.data());
            if let Some(ga) = acc_buf(grads, nodes, a) {
                for (k, &gk) in gd.iter().enumerate() {
                    let (ia, ib) = (bc.lhs(k), bc.rhs(k));
                    let d = match kind {
                        BinKind::Add | BinKind::Sub => gk,
                        BinKind::Mul => gk * bd[ib],
                        BinKind::Div => gk / bd[ib],
                    };
                    ga[ia] = ga[ia] + d;
                }
            }
            if let Some(gb) = acc_buf(grads, nodes, b) {
                for (k, &gk) in gd.iter().enumerate() {
                    let (ia, ib) = (bc.lhs(k), bc.rhs(k));
                    let d = match kind {
                        BinKind::Add => gk,
                        BinKind::Sub => -gk,
                        BinKind::Mul => gk * ad[ia],
                        BinKind::Div => -gk * ad[ia] / (bd[ib] * bd[ib]),
                    };
                    gb[ib] = gb[ib] + d;
                }
            }
        }
        Op::Unary { kind, a } => {
            let av = Rc::clone(&nodes[*a].value);
            let x = av.data();
            if let Some(ga) = acc_buf(grads, nodes, *a) {
                let half = T::lit(0.5);
                for k in 0..gd.len() {
                    let d = match kind {
                        UnKind::Neg => -gd[k],
                        UnKind::Exp => gd[k] * out[k],
                        UnKind::Log => gd[k] / x[k],
                        UnKind::Sin => gd[k] * x[k].cos(),
                        UnKind::Cos => -gd[k] * x[k].sin(),
                        // zero subgradient where the root is zero
                        UnKind::Sqrt => {
                            if out[k] > T::zero() {
                                gd[k] * half / out[k]
                            } else {
                                T::zero()
                            }
                        }
                        UnKind::Abs => gd[k] * signum0(x[k]),
                        UnKind::Relu => {
                            if x[k] > T::zero() {
                                gd[k]
                            } else {
                                T::zero()
                            }
                        }
                        UnKind::Softplus => gd[k] * sigmoid(x[k]),
                        UnKind::Sigmoid => gd[k] * out[k] * (T::one() - out[k]),
                    };
                    ga[k] = ga[k] + d;
                }
            }
        }
        Op::Scale { a, c } => {
            if let Some(ga) = acc_buf(grads, nodes, *a) {
                for (o, &gk) in ga.iter_mut().zip(gd) {
                    *o = *o + gk * *c;
                }
            }
        }
        Op::AddScalar { a } | Op::Reshape { a } => {
            if let Some(ga) = acc_buf(grads, nodes, *a) {
                for (o, &gk) in ga.iter_mut().zip(gd) {
                    *o = *o + gk;
                }
            }
        }
        Op::Clamp { a, lo, hi } => {
            let av = Rc::clone(&nodes[*a].value);
            if let Some(ga) = acc_buf(grads, nodes, *a) {
                for (k, &x) in av.data().iter().enumerate() {
                    if x >= *lo && x <= *hi {
                        ga[k] = ga[k] + gd[k];
                    }
                }
            }
        }
        Op::Sum { a } => {
            if let Some(ga) = acc_buf(grads, nodes, *a) {
                let g0 = gd[0];
                for o in ga.iter_mut() {
                    *o = *o + g0;
                }
            }
        }
        Op::SumLast { a, w } => {
            if let Some(ga) = acc_buf(grads, nodes, *a) {
                for (k, o) in ga.iter_mut().enumerate() {
                    *o = *o + gd[k / w];
                }
            }
        }
        Op::MatMul {
            a,
            b,
            batch,
            n,
            k,
            m,
            shared_rhs,
        } => {
            let (batch, n, k, m) = (*batch, *n, *k, *m);
            let av = Rc::clone(&nodes[*a].value);
            let bv = Rc::clone(&nodes[*b].value);
            if let Some(ga) = acc_buf(grads, nodes, *a) {
                for bi in 0..batch {
                    let boff = if *shared_rhs { 0 } else { bi * k * m };
                    gemm_nt_acc(
                        &gd[bi * n * m..(bi + 1) * n * m],
                        &bv.data()[boff..boff + k * m],
                        &mut ga[bi * n * k..(bi + 1) * n * k],
                        n,
                        k,
                        m,
                    );
                }
            }
            if let Some(gb) = acc_buf(grads, nodes, *b) {
                for bi in 0..batch {
                    let boff = if *shared_rhs { 0 } else { bi * k * m };
                    gemm_tn_acc(
                        &av.data()[bi * n * k..(bi + 1) * n * k],
                        &gd[bi * n * m..(bi + 1) * n * m],
                        &mut gb[boff..boff + k * m],
                        n,
                        k,
                        m,
                    );
                }
            }
        }
        Op::Broadcast { a, bc } => {
            if let Some(ga) = acc_buf(grads, nodes, *a) {
                for (k, &gk) in gd.iter().enumerate() {
                    let i = bc.rhs(k);
                    ga[i] = ga[i] + gk;
                }
            }
        }
        Op::Concat { inputs, outer, widths } => {
            let total: usize = widths.iter().sum();
            let mut off = 0;
            for (&id, &w) in inputs.iter().zip(widths) {
                if let Some(gi) = acc_buf(grads, nodes, id) {
                    for o in 0..*outer {
                        let src = &gd[o * total + off..o * total + off + w];
                        for (d, &s) in gi[o * w..(o + 1) * w].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
                off += w;
            }
        }
        Op::GatherRows { a, idx, row } => {
            if let Some(ga) = acc_buf(grads, nodes, *a) {
                for (j, &i) in idx.iter().enumerate() {
                    let src = &gd[j * row..(j + 1) * row];
                    for (d, &s) in ga[i * row..(i + 1) * row].iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        }
        Op::ScatterAddRows { a, idx, row } => {
            if let Some(ga) = acc_buf(grads, nodes, *a) {
                for (j, &i) in idx.iter().enumerate() {
                    let src = &gd[i * row..(i + 1) * row];
                    for (d, &s) in ga[j * row..(j + 1) * row].iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        }
        Op::SelectCols { a, cols, in_w } => {
            if let Some(ga) = acc_buf(grads, nodes, *a) {
                let ow = cols.len();
                let rows = gd.len() / ow.max(1);
                for r in 0..rows {
                    for (j, &c) in cols.iter().enumerate() {
                        ga[r * in_w + c] = ga[r * in_w + c] + gd[r * ow + j];
                    }
                }
            }
        }
        Op::Softmax { a, w } => {
            let w = *w;
            if let Some(ga) = acc_buf(grads, nodes, *a) {
                for r in 0..gd.len() / w {
                    let y = &out[r * w..(r + 1) * w];
                    let gr = &gd[r * w..(r + 1) * w];
                    let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..w {
                        ga[r * w + j] = ga[r * w + j] + y[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::Mat3Inverse { a, frozen } => {
            if let Some(ga) = acc_buf(grads, nodes, *a) {
                for (r, &fz) in frozen.iter().enumerate() {
                    if fz {
                        continue;
                    }
                    // dA = -B^T G B^T with B = A^{-1}
                    let bm = &out[r * 9..r * 9 + 9];
                    let gm = &gd[r * 9..r * 9 + 9];
                    let mut tmp = [T::zero(); 9];
                    for i in 0..3 {
                        for j in 0..3 {
                            let mut s = T::zero();
                            for p in 0..3 {
                                s = s + bm[p * 3 + i] * gm[p * 3 + j];
                            }
                            tmp[i * 3 + j] = s;
                        }
                    }
                    for i in 0..3 {
                        for j in 0..3 {
                            let mut s = T::zero();
                            for p in 0..3 {
                                s = s + tmp[i * 3 + p] * bm[j * 3 + p];
                            }
                            ga[r * 9 + i * 3 + j] = ga[r * 9 + i * 3 + j] - s;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn signum0<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Inverse of a row-major 3×3 matrix and its Frobenius condition number.
pub(crate) fn inv3<T: Scalar>(m: &[T]) -> Option<([T; 9], T)> {
    let c00 = m[4] * m[8] - m[5] * m[7];
    let c01 = m[5] * m[6] - m[3] * m[8];
    let c02 = m[3] * m[7] - m[4] * m[6];
    let det = m[0] * c00 + m[1] * c01 + m[2] * c02;
    if det == T::zero() || !det.is_finite() {
        return None;
    }
    let inv_det = T::one() / det;
    let r = [
        c00 * inv_det,
        (m[2] * m[7] - m[1] * m[8]) * inv_det,
        (m[1] * m[5] - m[2] * m[4]) * inv_det,
        c01 * inv_det,
        (m[0] * m[8] - m[2] * m[6]) * inv_det,
        (m[2] * m[3] - m[0] * m[5]) * inv_det,
        c02 * inv_det,
        (m[1] * m[6] - m[0] * m[7]) * inv_det,
        (m[0] * m[4] - m[1] * m[3]) * inv_det,
    ];
    let fro = |x: &[T]| x.iter().map(|&v| v * v).sum::<T>().sqrt();
    Some((r, fro(m) * fro(&r)))
}

/// Transpose of the Gram-Schmidt orthonormalization of the columns of `m`.
fn orthonormal_transpose<T: Scalar>(m: &[T]) -> [T; 9] {
    let col = |j: usize| [m[j], m[3 + j], m[6 + j]];
    let dot = |a: [T; 3], b: [T; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let norm = |a: [T; 3]| dot(a, a).sqrt();
    let tiny = T::lit(1e-12);
    let e0 = col(0);
    let n0 = norm(e0);
    if n0 < tiny {
        return identity9();
    }
    let e0 = [e0[0] / n0, e0[1] / n0, e0[2] / n0];
    let c1 = col(1);
    let d = dot(c1, e0);
    let e1 = [c1[0] - d * e0[0], c1[1] - d * e0[1], c1[2] - d * e0[2]];
    let n1 = norm(e1);
    if n1 < tiny {
        return identity9();
    }
    let e1 = [e1[0] / n1, e1[1] / n1, e1[2] / n1];
    let e2 = [
        e0[1] * e1[2] - e0[2] * e1[1],
        e0[2] * e1[0] - e0[0] * e1[2],
        e0[0] * e1[1] - e0[1] * e1[0],
    ];
    // rows of the transpose are the orthonormal columns
    [e0[0], e0[1], e0[2], e1[0], e1[1], e1[2], e2[0], e2[1], e2[2]]
}

fn identity9<T: Scalar>() -> [T; 9] {
    let (o, z) = (T::one(), T::zero());
    [o, z, z, z, o, z, z, z, o]
}

/// Condition number above which a blended rotation block is replaced by the
/// transpose of its orthonormalization.
pub const MAT3_COND_LIMIT: f64 = 1e6;

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value (first element).
    pub fn item(&self) -> T {
        self.tape.nodes.borrow()[self.id].value.data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t, T> {
        let v = (*self.value()).clone();
        self.tape.constant(v)
    }

    fn binary(self, rhs: Var<'t, T>, kind: BinKind, op: &'static str) -> Result<Var<'t, T>> {
        let av = self.value();
        let bv = rhs.value();
        let (bc, shape) = Bcast::resolve(av.shape(), bv.shape()).ok_or_else(|| AutodiffError::ShapeMismatch {
            op,
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        })?;
        let n: usize = shape.iter().product();
        let (ad, bd) = (av.data(), bv.data());
        let f = |x: T, y: T| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let data: Vec<T> = if bc == Bcast::Same {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|k| f(ad[bc.lhs(k)], bd[bc.rhs(k)])).collect()
        };
        let rg = self.requires_grad() || rhs.requires_grad();
        let out = Tensor::new(&shape, data)?;
        Ok(self.tape.push(
            out,
            Op::Binary {
                kind,
                a: self.id,
                b: rhs.id,
                bc,
            },
            rg,
        ))
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, BinKind::Add, "add")
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, BinKind::Sub, "sub")
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, BinKind::Mul, "mul")
    }

    pub fn div(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, BinKind::Div, "div")
    }

    fn unary(self, kind: UnKind) -> Var<'t, T> {
        let av = self.value();
        let f = |x: T| match kind {
            UnKind::Neg => -x,
            UnKind::Exp => x.exp(),
            UnKind::Log => x.ln(),
            UnKind::Sin => x.sin(),
            UnKind::Cos => x.cos(),
            UnKind::Sqrt => x.sqrt(),
            UnKind::Abs => x.abs(),
            UnKind::Relu => x.max(T::zero()),
            UnKind::Softplus => softplus(x),
            UnKind::Sigmoid => sigmoid(x),
        };
        let out = av.map(f);
        let rg = self.requires_grad();
        self.tape.push(out, Op::Unary { kind, a: self.id }, rg)
    }

    pub fn neg(self) -> Var<'t, T> {
        self.unary(UnKind::Neg)
    }
    pub fn exp(self) -> Var<'t, T> {
        self.unary(UnKind::Exp)
    }
    pub fn log(self) -> Var<'t, T> {
        self.unary(UnKind::Log)
    }
    pub fn sin(self) -> Var<'t, T> {
        self.unary(UnKind::Sin)
    }
    pub fn cos(self) -> Var<'t, T> {
        self.unary(UnKind::Cos)
    }
    pub fn sqrt(self) -> Var<'t, T> {
        self.unary(UnKind::Sqrt)
    }
    pub fn abs(self) -> Var<'t, T> {
        self.unary(UnKind::Abs)
    }
    pub fn relu(self) -> Var<'t, T> {
        self.unary(UnKind::Relu)
    }
    pub fn softplus(self) -> Var<'t, T> {
        self.unary(UnKind::Softplus)
    }
    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(UnKind::Sigmoid)
    }

    pub fn square(self) -> Var<'t, T> {
        self.mul(self).expect("same shape")
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let out = self.value().map(|x| x * c);
        let rg = self.requires_grad();
        self.tape.push(out, Op::Scale { a: self.id, c }, rg)
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        let out = self.value().map(|x| x + c);
        let rg = self.requires_grad();
        self.tape.push(out, Op::AddScalar { a: self.id }, rg)
    }

    /// Clamps into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(self, lo: T, hi: T) -> Var<'t, T> {
        let out = self.value().map(|x| x.max(lo).min(hi));
        let rg = self.requires_grad();
        self.tape.push(out, Op::Clamp { a: self.id, lo, hi }, rg)
    }

    pub fn sum(self) -> Var<'t, T> {
        let s: T = self.value().data().iter().copied().sum();
        let rg = self.requires_grad();
        self.tape.push(Tensor::scalar(s), Op::Sum { a: self.id }, rg)
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().numel().max(1);
        self.sum().scale(T::one() / T::from_usize(n).unwrap())
    }

    /// Sums over the last axis.
    pub fn sum_last(self) -> Var<'t, T> {
        let av = self.value();
        let w = av.last_dim().max(1);
        let data: Vec<T> = av.data().chunks(w).map(|c| c.iter().copied().sum()).collect();
        let mut shape = av.shape().to_vec();
        shape.pop();
        let out = Tensor::new(&shape, data).expect("consistent shape");
        let rg = self.requires_grad();
        self.tape.push(out, Op::SumLast { a: self.id, w }, rg)
    }

    /// `[n,k]·[k,m]`, `[b,n,k]·[b,k,m]` or `[.., n,k]·[k,m]`.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let av = self.value();
        let bv = rhs.value();
        let (sa, sb) = (av.shape(), bv.shape());
        let err = || AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        let (batch, n, k, m, shared_rhs, shape) = match (sa.len(), sb.len()) {
            (ra, 2) if ra >= 2 => {
                if sa[ra - 1] != sb[0] {
                    return Err(err());
                }
                let rows: usize = sa[..ra - 1].iter().product();
                let mut shape = sa[..ra - 1].to_vec();
                shape.push(sb[1]);
                (1, rows, sb[0], sb[1], true, shape)
            }
            (3, 3) => {
                if sa[0] != sb[0] || sa[2] != sb[1] {
                    return Err(err());
                }
                (sa[0], sa[1], sa[2], sb[2], false, vec![sa[0], sa[1], sb[2]])
            }
            _ => return Err(err()),
        };
        let mut data = vec![T::zero(); batch * n * m];
        for bi in 0..batch {
            let boff = if shared_rhs { 0 } else { bi * k * m };
            gemm_acc(
                &av.data()[bi * n * k..(bi + 1) * n * k],
                &bv.data()[boff..boff + k * m],
                &mut data[bi * n * m..(bi + 1) * n * m],
                n,
                k,
                m,
            );
        }
        let rg = self.requires_grad() || rhs.requires_grad();
        let out = Tensor::new(&shape, data)?;
        Ok(self.tape.push(
            out,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                batch,
                n,
                k,
                m,
                shared_rhs,
            },
            rg,
        ))
    }

    /// Expands to `shape` under the restricted broadcasting rules.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let av = self.value();
        let (bc, out_shape) = Bcast::resolve(shape, av.shape()).ok_or_else(|| AutodiffError::ShapeMismatch {
            op: "broadcast",
            lhs: av.shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        if out_shape != shape {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast",
                lhs: av.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let n: usize = shape.iter().product();
        let ad = av.data();
        let data: Vec<T> = (0..n).map(|k| ad[bc.rhs(k)]).collect();
        let rg = self.requires_grad();
        Ok(self
            .tape
            .push(Tensor::new(shape, data)?, Op::Broadcast { a: self.id, bc }, rg))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = (*self.value()).clone().reshaped(shape)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(out, Op::Reshape { a: self.id }, rg))
    }

    /// Gathers rows (first axis) by index.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t, T>> {
        let av = self.value();
        let sa = av.shape();
        if sa.is_empty() {
            return Err(AutodiffError::InvalidAxis {
                op: "index-gather",
                axis: 0,
                rank: 0,
            });
        }
        let row: usize = sa[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            if i >= sa[0] {
                return Err(AutodiffError::IndexOutOfBounds {
                    op: "index-gather",
                    index: i,
                    len: sa[0],
                });
            }
            data.extend_from_slice(&av.data()[i * row..(i + 1) * row]);
        }
        let mut shape = sa.to_vec();
        shape[0] = idx.len();
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor::new(&shape, data)?,
            Op::GatherRows {
                a: self.id,
                idx: Rc::from(idx),
                row,
            },
            rg,
        ))
    }

    /// Sums row `j` into output row `idx[j]` of an `n`-row result.
    pub fn scatter_add_rows(self, idx: &[usize], n: usize) -> Result<Var<'t, T>> {
        let av = self.value();
        let sa = av.shape();
        if sa.is_empty() || sa[0] != idx.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "scatter-add",
                lhs: sa.to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let row: usize = sa[1..].iter().product();
        let mut data = vec![T::zero(); n * row];
        for (j, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(AutodiffError::IndexOutOfBounds {
                    op: "scatter-add",
                    index: i,
                    len: n,
                });
            }
            for (d, &s) in data[i * row..(i + 1) * row].iter_mut().zip(&av.data()[j * row..(j + 1) * row]) {
                *d = *d + s;
            }
        }
        let mut shape = sa.to_vec();
        shape[0] = n;
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor::new(&shape, data)?,
            Op::ScatterAddRows {
                a: self.id,
                idx: Rc::from(idx),
                row,
            },
            rg,
        ))
    }

    /// Selects entries of the last axis.
    pub fn select_cols(self, cols: &[usize]) -> Result<Var<'t, T>> {
        let av = self.value();
        let in_w = av.last_dim();
        if let Some(&c) = cols.iter().find(|&&c| c >= in_w) {
            return Err(AutodiffError::IndexOutOfBounds {
                op: "select-cols",
                index: c,
                len: in_w,
            });
        }
        let rows = av.numel() / in_w.max(1);
        let mut data = Vec::with_capacity(rows * cols.len());
        for r in 0..rows {
            let src = &av.data()[r * in_w..(r + 1) * in_w];
            data.extend(cols.iter().map(|&c| src[c]));
        }
        let mut shape = av.shape().to_vec();
        if shape.is_empty() {
            shape.push(cols.len());
        } else {
            *shape.last_mut().unwrap() = cols.len();
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor::new(&shape, data)?,
            Op::SelectCols {
                a: self.id,
                cols: Rc::from(cols),
                in_w,
            },
            rg,
        ))
    }

    pub fn col(self, c: usize) -> Result<Var<'t, T>> {
        self.select_cols(&[c])
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t, T> {
        let av = self.value();
        let w = av.last_dim().max(1);
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(w) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let out = Tensor::new(av.shape(), data).expect("same shape");
        let rg = self.requires_grad();
        self.tape.push(out, Op::Softmax { a: self.id, w }, rg)
    }

    /// Row-wise inverse of 3×3 blocks stored in the last nine entries.
    /// Blocks whose condition number exceeds [`MAT3_COND_LIMIT`] fall back to
    /// the transpose of their orthonormalization and pass no gradient.
    pub fn mat3_inverse(self) -> Result<Var<'t, T>> {
        let av = self.value();
        if av.numel() % 9 != 0 || av.numel() == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "mat3-inverse",
                lhs: av.shape().to_vec(),
                rhs: vec![9],
            });
        }
        let limit = T::lit(MAT3_COND_LIMIT);
        let mut data = Vec::with_capacity(av.numel());
        let mut frozen = Vec::with_capacity(av.numel() / 9);
        for m in av.data().chunks(9) {
            match inv3(m) {
                Some((inv, cond)) if cond <= limit => {
                    data.extend_from_slice(&inv);
                    frozen.push(false);
                }
                _ => {
                    data.extend_from_slice(&orthonormal_transpose(m));
                    frozen.push(true);
                }
            }
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor::new(av.shape(), data)?,
            Op::Mat3Inverse { a: self.id, frozen },
            rg,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::from_vec(vec![3.0]));
        let y = x.mul(x).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_shape() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 4]));
        assert_eq!(a.matmul(b).unwrap().shape(), vec![2, 4]);
        let c = tape.constant(Tensor::zeros(&[4, 2]));
        let err = a.matmul(c).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![4, 2]
            }
        );
    }

    #[test]
    fn softmax_uniform() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let y = x.softmax().value();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_and_exp_gradients() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::from_vec(vec![0.5; 5]));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 5]);

        let tape = Tape::new();
        let x = tape.param(&Tensor::scalar(0.0));
        let g = tape.backward(x.exp()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(x.exp()),
            Err(AutodiffError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn broadcasting_rules() {
        let tape = Tape::new();
        let m = tape.param(&t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let bias = tape.param(&t(&[3], &[10., 20., 30.]));
        let col = tape.param(&t(&[2, 1], &[2., 3.]));
        let y = m.add(bias).unwrap().mul(col).unwrap();
        assert_eq!(y.value().data(), &[22., 44., 66., 42., 75., 108.]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(bias).unwrap().data(), &[5., 5., 5.]);
        assert_eq!(g.get(col).unwrap().data(), &[66., 75.]);
        // rank-2 vs unrelated rank-2 is rejected
        let other = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(m.add(other).is_err());
    }

    #[test]
    fn record_dispatches() {
        let tape = Tape::new();
        let a = tape.param(&Tensor::from_vec(vec![1.0, 2.0]));
        let b = tape.param(&Tensor::from_vec(vec![3.0, 4.0]));
        let c = tape.record(Primitive::Mul, &[a, b]).unwrap();
        assert_eq!(c.value().data(), &[3.0, 8.0]);
        assert!(tape.record(Primitive::Exp, &[a, b]).is_err());
        let cat = tape.record(Primitive::Concat(0), &[a, b]).unwrap();
        assert_eq!(cat.value().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn mat3_inverse_round_trip() {
        let tape = Tape::new();
        let m = tape.constant(t(&[1, 9], &[2., 1., 0., 0., 1., 0., 1., 0., 3.]));
        let inv = m.mat3_inverse().unwrap().value();
        let a = [2., 1., 0., 0., 1., 0., 1., 0., 3.];
        for i in 0..3 {
            for j in 0..3 {
                let s: f64 = (0..3).map(|p| a[i * 3 + p] * inv.data()[p * 3 + j]).sum();
                assert!((s - if i == j { 1.0 } else { 0.0 }).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn singular_block_falls_back_to_orthonormal_transpose() {
        let tape = Tape::new();
        let m = tape.constant(t(&[1, 9], &[1., 0., 0., 0., 1., 0., 0., 0., 0.]));
        let inv = m.mat3_inverse().unwrap().value();
        assert_eq!(inv.data(), &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
    }
}
