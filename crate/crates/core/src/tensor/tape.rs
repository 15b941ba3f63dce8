use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use rayon::prelude::*;

use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Recorded operation plus whatever the backward rule needs.
pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    LogClamp(usize, T),
    MatMul(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    Reduce {
        x: usize,
        keep_shape: Vec<usize>,
        scale: T,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Reshape(usize),
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    BroadcastTo(usize),
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    MaskedFill {
        x: usize,
        mask: Rc<Vec<bool>>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => vec![*a, *b],
            Scale(x, _) | Relu(x) | Sigmoid(x) | Tanh(x) | LogClamp(x, _) | Reshape(x)
            | BroadcastTo(x) => vec![*x],
            Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Softmax { x, .. }
            | Reduce { x, .. }
            | Permute { x, .. }
            | Narrow { x, .. }
            | MaskedFill { x, .. } => vec![*x],
            LayerNorm { x, gamma, beta, .. } | BatchNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Concat { inputs, .. } => inputs.clone(),
            GatherRows { table, .. } => vec![*table],
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Scale(..) => "scale",
            Relu(_) => "relu",
            Sigmoid(_) => "sigmoid",
            Tanh(_) => "tanh",
            LogClamp(..) => "log",
            MatMul(..) => "matmul",
            Conv2d { .. } => "conv2d",
            Softmax { .. } => "softmax",
            Reduce { .. } => "reduce",
            LayerNorm { .. } => "layer_norm",
            BatchNorm { .. } => "batch_norm",
            Reshape(_) => "reshape",
            Permute { .. } => "permute",
            Concat { .. } => "concat",
            Narrow { .. } => "narrow",
            BroadcastTo(_) => "broadcast_to",
            GatherRows { .. } => "gather_rows",
            MaskedFill { .. } => "masked_fill",
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation. Node order is topological
/// by construction, so the reverse pass is a single backwards sweep.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Tensor<T>>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    /// Registers a leaf. Only leaves with `requires_grad` (and everything
    /// computed from them) take part in the reverse pass.
    pub fn var(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let id = self.push_raw(value, Op::Leaf, requires_grad);
        Var { tape: self, id }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.var(value, false)
    }

    /// `build_tensor`: shape-checked leaf construction.
    pub fn tensor(&self, shape: &[usize], values: &[f64], requires_grad: bool) -> Result<Var<'_, T>> {
        Ok(self.var(Tensor::from_f64(shape, values)?, requires_grad))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears accumulated gradients on every node.
    pub fn zero_grad(&self) {
        self.grads.borrow_mut().iter_mut().for_each(|g| *g = None);
    }

    fn push_raw(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        self.grads.borrow_mut().push(None);
        nodes.len() - 1
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let inputs = op.inputs();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        if cfg!(debug_assertions) && !value.is_finite() {
            let nodes = self.nodes.borrow();
            let inputs_finite = inputs.iter().all(|&i| nodes[i].value.is_finite());
            assert!(
                !inputs_finite,
                "non-finite output from `{}` on finite inputs",
                op.name()
            );
        }
        let id = self.push_raw(value, op, requires_grad);
        Var { tape: self, id }
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn backward_from(&self, loss: usize) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss].value.numel() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss].value.shape()
            )));
        }
        let mut local: Vec<Option<Tensor<T>>> = (0..=loss).map(|_| None).collect();
        local[loss] = Some(Tensor::full(nodes[loss].value.shape(), T::one()));
        let mut persistent = self.grads.borrow_mut();
        for id in (0..=loss).rev() {
            let Some(g) = local[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            {
                let mut sink = |target: usize, grad: Vec<T>| {
                    if !nodes[target].requires_grad {
                        return;
                    }
                    match &mut local[target] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(grad) {
                                *a = *a + b;
                            }
                        }
                        slot @ None => {
                            let shape = nodes[target].value.shape();
                            *slot = Some(Tensor { shape: shape.to_vec(), data: grad });
                        }
                    }
                };
                backward_op(&nodes, id, &g, &mut sink);
            }
            match &mut persistent[id] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient; `None` if no backward pass reached this node.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grads.borrow()[self.id].clone()
    }

    /// Reverse pass from this scalar. Gradients accumulate across calls
    /// until [`Tape::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        self.tape.backward_from(self.id)
    }
}

fn backward_op<T: Real>(
    nodes: &[Node<T>],
    id: usize,
    g: &Tensor<T>,
    sink: &mut impl FnMut(usize, Vec<T>),
) {
    let node = &nodes[id];
    let out = node.value.as_ref();
    let val = |i: usize| nodes[i].value.as_ref();
    let needs = |i: usize| nodes[i].requires_grad;
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let neg = matches!(node.op, Op::Sub(..));
            if needs(*a) {
                sink(*a, kernels::reduce_to_shape(gd, out.shape(), val(*a).shape()));
            }
            if needs(*b) {
                let mut gb = kernels::reduce_to_shape(gd, out.shape(), val(*b).shape());
                if neg {
                    gb.iter_mut().for_each(|v| *v = -*v);
                }
                sink(*b, gb);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let mut ga = needs(*a).then(|| vec![T::zero(); av.numel()]);
            let mut gb = needs(*b).then(|| vec![T::zero(); bv.numel()]);
            let (ad, bd) = (av.data(), bv.data());
            kernels::for_each_broadcast2(out.shape(), av.shape(), bv.shape(), |o, ia, ib| {
                if let Some(ga) = ga.as_mut() {
                    ga[ia] = ga[ia] + gd[o] * bd[ib];
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] = gb[ib] + gd[o] * ad[ia];
                }
            });
            if let Some(ga) = ga {
                sink(*a, ga);
            }
            if let Some(gb) = gb {
                sink(*b, gb);
            }
        }
        Op::Scale(x, c) => sink(*x, gd.iter().map(|&v| v * *c).collect()),
        Op::Relu(x) => {
            let xd = val(*x).data();
            sink(
                *x,
                gd.iter()
                    .zip(xd)
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect(),
            )
        }
        Op::Sigmoid(x) => sink(
            *x,
            gd.iter()
                .zip(out.data())
                .map(|(&g, &y)| g * y * (T::one() - y))
                .collect(),
        ),
        Op::Tanh(x) => sink(
            *x,
            gd.iter()
                .zip(out.data())
                .map(|(&g, &y)| g * (T::one() - y * y))
                .collect(),
        ),
        Op::LogClamp(x, eps) => {
            let xd = val(*x).data();
            sink(
                *x,
                gd.iter()
                    .zip(xd)
                    .map(|(&g, &x)| if x > *eps { g / x } else { T::zero() })
                    .collect(),
            )
        }
        Op::MatMul(a, b) => matmul_backward(val(*a), val(*b), g, needs(*a), needs(*b), *a, *b, sink),
        Op::Conv2d { x, w, b, geom, cols } => {
            let (xv, wv) = (val(*x), val(*w));
            let batch = xv.shape()[0];
            let cout = wv.shape()[0];
            let (krows, ncol) = (geom.col_rows(), geom.col_cols());
            let img = geom.cin * geom.h * geom.w;
            if needs(*x) {
                let mut gx = vec![T::zero(); xv.numel()];
                gx.par_chunks_mut(img)
                    .zip(gd.par_chunks(cout * ncol))
                    .for_each(|(gx_b, g_b)| {
                        let mut gcols = vec![T::zero(); krows * ncol];
                        kernels::gemm(krows, cout, ncol, wv.data(), true, g_b, false, &mut gcols, T::zero());
                        kernels::col2im(&gcols, geom, gx_b);
                    });
                sink(*x, gx);
            }
            if needs(*w) {
                let mut gw = vec![T::zero(); wv.numel()];
                for bi in 0..batch {
                    let g_b = &gd[bi * cout * ncol..(bi + 1) * cout * ncol];
                    let c_b = &cols[bi * krows * ncol..(bi + 1) * krows * ncol];
                    kernels::gemm(cout, ncol, krows, g_b, false, c_b, true, &mut gw, T::one());
                }
                sink(*w, gw);
            }
            if let Some(b) = b {
                if needs(*b) {
                    let mut gb = vec![T::zero(); cout];
                    for (i, &v) in gd.iter().enumerate() {
                        let c = (i / ncol) % cout;
                        gb[c] = gb[c] + v;
                    }
                    sink(*b, gb);
                }
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, n, inner) = kernels::split_axis(out.shape(), *axis);
            let y = out.data();
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * n * inner + j * inner + i;
                    let dot = (0..n).fold(T::zero(), |s, j| s + gd[at(j)] * y[at(j)]);
                    for j in 0..n {
                        gx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                    }
                }
            }
            sink(*x, gx)
        }
        Op::Reduce { x, keep_shape, scale } => {
            let xv = val(*x);
            let mut gx = kernels::expand(gd, keep_shape, xv.shape());
            if *scale != T::one() {
                gx.iter_mut().for_each(|v| *v = *v * *scale);
            }
            sink(*x, gx)
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let d = *val(*gamma).shape().last().unwrap_or(&1);
            let rows = xhat.len() / d;
            let gam = val(*gamma).data();
            let mut gx = vec![T::zero(); xhat.len()];
            let mut gg = vec![T::zero(); d];
            let mut gbeta = vec![T::zero(); d];
            let inv_d = T::one() / T::c(d as f64);
            for r in 0..rows {
                let row = r * d..(r + 1) * d;
                let (gr, xr) = (&gd[row.clone()], &xhat[row.clone()]);
                let mut s1 = T::zero();
                let mut s2 = T::zero();
                for j in 0..d {
                    let gx_hat = gr[j] * gam[j];
                    s1 = s1 + gx_hat;
                    s2 = s2 + gx_hat * xr[j];
                    gg[j] = gg[j] + gr[j] * xr[j];
                    gbeta[j] = gbeta[j] + gr[j];
                }
                for j in 0..d {
                    let gx_hat = gr[j] * gam[j];
                    gx[r * d + j] = rstd[r] * (gx_hat - inv_d * s1 - xr[j] * inv_d * s2);
                }
            }
            if needs(*x) {
                sink(*x, gx);
            }
            if needs(*gamma) {
                sink(*gamma, gg);
            }
            if needs(*beta) {
                sink(*beta, gbeta);
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, rstd } => {
            let shape = val(*x).shape();
            let (outer, c, inner) = kernels::split_axis(shape, 1);
            let gam = val(*gamma).data();
            let count = T::c((outer * inner) as f64);
            let mut s1 = vec![T::zero(); c];
            let mut s2 = vec![T::zero(); c];
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    for i in base..base + inner {
                        s1[ch] = s1[ch] + gd[i];
                        s2[ch] = s2[ch] + gd[i] * xhat[i];
                    }
                }
            }
            if needs(*x) {
                let mut gx = vec![T::zero(); xhat.len()];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        let k = gam[ch] * rstd[ch] / count;
                        for i in base..base + inner {
                            gx[i] = k * (count * gd[i] - s1[ch] - xhat[i] * s2[ch]);
                        }
                    }
                }
                sink(*x, gx);
            }
            if needs(*gamma) {
                sink(*gamma, s2);
            }
            if needs(*beta) {
                sink(*beta, s1);
            }
        }
        Op::Reshape(x) => sink(*x, gd.to_vec()),
        Op::Permute { x, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            sink(*x, kernels::permute(gd, out.shape(), &inv))
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = kernels::split_axis(out.shape(), *axis);
            let mut offset = 0;
            for &inp in inputs {
                let n = val(inp).shape()[*axis];
                if needs(inp) {
                    let mut gi = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gi.extend_from_slice(&gd[start..start + n * inner]);
                    }
                    sink(inp, gi);
                }
                offset += n;
            }
        }
        Op::Narrow { x, axis, start } => {
            let xs = val(*x).shape();
            let (outer, total, inner) = kernels::split_axis(xs, *axis);
            let len = out.shape()[*axis];
            let mut gx = vec![T::zero(); outer * total * inner];
            for o in 0..outer {
                let dst = (o * total + start) * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
            }
            sink(*x, gx)
        }
        Op::BroadcastTo(x) => sink(
            *x,
            kernels::reduce_to_shape(gd, out.shape(), val(*x).shape()),
        ),
        Op::GatherRows { table, ids } => {
            let tv = val(*table);
            let width = tv.shape()[1];
            let mut gt = vec![T::zero(); tv.numel()];
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..width {
                    gt[id * width + j] = gt[id * width + j] + gd[r * width + j];
                }
            }
            sink(*table, gt)
        }
        Op::MaskedFill { x, mask } => sink(
            *x,
            gd.iter()
                .zip(mask.iter())
                .map(|(&g, &m)| if m { T::zero() } else { g })
                .collect(),
        ),
    }
}

pub(crate) struct MatMulPlan {
    pub out_shape: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// (a matrix index, b matrix index) per output matrix
    pub pairs: Vec<(usize, usize)>,
    /// `b` is a single matrix shared by every batch entry of a contiguous `a`
    pub flat: bool,
}

impl MatMulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::Shape(format!(
                "matmul needs rank >= 2 operands, got {a:?} and {b:?}"
            )));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {a:?} x {b:?}"
            )));
        }
        let (ba, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
        let batch = kernels::broadcast_shape(ba, bb)?;
        let mut pairs = Vec::new();
        kernels::for_each_broadcast2(&batch, ba, bb, |_, ia, ib| pairs.push((ia, ib)));
        let flat = bb.iter().product::<usize>() == 1 && ba == &batch[..];
        let mut out_shape = batch;
        out_shape.extend([m, n]);
        Ok(Self { out_shape, m, k, n, pairs, flat })
    }
}

#[allow(clippy::too_many_arguments)]
fn matmul_backward<T: Real>(
    av: &Tensor<T>,
    bv: &Tensor<T>,
    g: &Tensor<T>,
    need_a: bool,
    need_b: bool,
    a: usize,
    b: usize,
    sink: &mut impl FnMut(usize, Vec<T>),
) {
    let plan = MatMulPlan::new(av.shape(), bv.shape()).expect("validated in forward");
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let gd = g.data();
    if plan.flat {
        let rows = plan.pairs.len() * m;
        if need_a {
            let mut ga = vec![T::zero(); av.numel()];
            kernels::gemm(rows, n, k, gd, false, bv.data(), true, &mut ga, T::zero());
            sink(a, ga);
        }
        if need_b {
            let mut gb = vec![T::zero(); bv.numel()];
            kernels::gemm(k, rows, n, av.data(), true, gd, false, &mut gb, T::zero());
            sink(b, gb);
        }
        return;
    }
    let mut ga = need_a.then(|| vec![T::zero(); av.numel()]);
    let mut gb = need_b.then(|| vec![T::zero(); bv.numel()]);
    for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
        let g_o = &gd[o * m * n..(o + 1) * m * n];
        let a_i = &av.data()[ia * m * k..(ia + 1) * m * k];
        let b_i = &bv.data()[ib * k * n..(ib + 1) * k * n];
        if let Some(ga) = ga.as_mut() {
            kernels::gemm(m, n, k, g_o, false, b_i, true, &mut ga[ia * m * k..(ia + 1) * m * k], T::one());
        }
        if let Some(gb) = gb.as_mut() {
            kernels::gemm(k, m, n, a_i, true, g_o, false, &mut gb[ib * k * n..(ib + 1) * k * n], T::one());
        }
    }
    if let Some(ga) = ga {
        sink(a, ga);
    }
    if let Some(gb) = gb {
        sink(b, gb);
    }
}
