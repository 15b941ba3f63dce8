use std::rc::Rc;

use rayon::prelude::*;

use super::kernels::{self, ConvGeom};
use super::tape::{MatMulPlan, Op};
use super::{Real, Tensor, Var};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

impl<'t, T: Real> Var<'t, T> {
    fn unary(&self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'t, T> {
        let value = self.value().map(f);
        self.tape.push(value, op)
    }

    fn binary(&self, other: &Var<'t, T>, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let shape = kernels::broadcast_shape(a.shape(), b.shape())?;
        let mut out = vec![T::zero(); shape.iter().product()];
        let (ad, bd) = (a.data(), b.data());
        kernels::for_each_broadcast2(&shape, a.shape(), b.shape(), |o, ia, ib| {
            out[o] = f(ad[ia], bd[ib])
        });
        Ok(self.tape.push(Tensor { shape, data: out }, op))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Var<'t, T> {
        let c = T::c(c);
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.unary(Op::Relu(self.id), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.unary(Op::Sigmoid(self.id), |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn tanh(&self) -> Var<'t, T> {
        self.unary(Op::Tanh(self.id), |v| v.tanh())
    }

    pub fn activation(&self, kind: Activation) -> Var<'t, T> {
        match kind {
            Activation::Relu => self.relu(),
            Activation::Sigmoid => self.sigmoid(),
            Activation::Tanh => self.tanh(),
        }
    }

    /// `ln(max(x, eps))`; zero gradient where the clamp is active.
    pub fn log_clamp(&self, eps: f64) -> Var<'t, T> {
        let e = T::c(eps);
        self.unary(Op::LogClamp(self.id, e), |v| v.max(e).ln())
    }

    /// Batched matrix product over the last two axes with broadcast batch axes.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let plan = MatMulPlan::new(a.shape(), b.shape())?;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut out = vec![T::zero(); plan.out_shape.iter().product()];
        if plan.flat {
            let rows = plan.pairs.len() * m;
            kernels::gemm(rows, k, n, a.data(), false, b.data(), false, &mut out, T::zero());
        } else {
            for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &a.data()[ia * m * k..],
                    false,
                    &b.data()[ib * k * n..],
                    false,
                    &mut out[o * m * n..(o + 1) * m * n],
                    T::zero(),
                );
            }
        }
        let value = Tensor { shape: plan.out_shape, data: out };
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id)))
    }

    /// 2-D convolution (cross-correlation) with zero padding.
    /// `self: [B, Cin, H, W]`, `weight: [Cout, Cin, kh, kw]`, `bias: [Cout]`.
    pub fn conv2d(
        &self,
        weight: &Var<'t, T>,
        bias: Option<&Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        let (x, w) = (self.value(), weight.value());
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err!("conv2d expects 4-D input and weight, got {xs:?}, {ws:?}"));
        }
        if stride == 0 {
            return Err(Error::Argument("conv2d stride must be >= 1".into()));
        }
        let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if cin != wcin {
            return Err(shape_err!("conv2d channel mismatch: input has {cin}, weight expects {wcin}"));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(shape_err!("conv2d kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})"));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(shape_err!("conv2d bias must be [{cout}], got {:?}", b.shape()));
            }
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let (krows, ncol) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![T::zero(); batch * krows * ncol];
        let mut out = vec![T::zero(); batch * cout * ncol];
        let bias_rc = bias.map(|b| b.value());
        let bias_val: Option<&[T]> = bias_rc.as_deref().map(|b| b.data());
        let w_data = w.data();
        out.par_chunks_mut(cout * ncol)
            .zip(cols.par_chunks_mut(krows * ncol))
            .zip(x.data().par_chunks(cin * h * wd))
            .for_each(|((o_b, c_b), x_b)| {
                kernels::im2col(x_b, &geom, c_b);
                kernels::gemm(cout, krows, ncol, w_data, false, c_b, false, o_b, T::zero());
                if let Some(bv) = bias_val {
                    for (c, row) in o_b.chunks_mut(ncol).enumerate() {
                        let bc = bv[c];
                        row.iter_mut().for_each(|v| *v = *v + bc);
                    }
                }
            });
        let value = Tensor {
            shape: vec![batch, cout, geom.ho, geom.wo],
            data: out,
        };
        let op = Op::Conv2d {
            x: self.id,
            w: weight.id,
            b: bias.map(|b| b.id),
            geom,
            cols,
        };
        Ok(self.tape.push(value, op))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::Argument(format!("softmax axis {axis} out of range for {:?}", x.shape())));
        }
        let y = kernels::softmax(x.data(), x.shape(), axis);
        let value = Tensor { shape: x.shape().to_vec(), data: y };
        Ok(self.tape.push(value, Op::Softmax { x: self.id, axis }))
    }

    pub fn reduce(&self, kind: ReduceKind, axes: &[usize], keepdim: bool) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Argument(format!("duplicate reduction axis in {axes:?}")));
        }
        if let Some(&bad) = sorted.iter().find(|&&a| a >= shape.len()) {
            return Err(Error::Argument(format!("reduction axis {bad} out of range for {shape:?}")));
        }
        let mut keep_shape = shape.to_vec();
        let mut count = 1usize;
        for &a in &sorted {
            count *= keep_shape[a];
            keep_shape[a] = 1;
        }
        let mut out = vec![T::zero(); keep_shape.iter().product()];
        let xd = x.data();
        kernels::for_each_broadcast2(shape, shape, &keep_shape, |o, _, t| out[t] = out[t] + xd[o]);
        let scale = match kind {
            ReduceKind::Sum => T::one(),
            ReduceKind::Mean => T::one() / T::c(count as f64),
        };
        if kind == ReduceKind::Mean {
            out.iter_mut().for_each(|v| *v = *v * scale);
        }
        let out_shape: Vec<usize> = if keepdim {
            keep_shape.clone()
        } else {
            let s: Vec<usize> = shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !sorted.contains(i))
                .map(|(_, &d)| d)
                .collect();
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        };
        let value = Tensor { shape: out_shape, data: out };
        Ok(self.tape.push(value, Op::Reduce { x: self.id, keep_shape, scale }))
    }

    pub fn sum(&self, axes: &[usize], keepdim: bool) -> Result<Var<'t, T>> {
        self.reduce(ReduceKind::Sum, axes, keepdim)
    }

    pub fn mean(&self, axes: &[usize], keepdim: bool) -> Result<Var<'t, T>> {
        self.reduce(ReduceKind::Mean, axes, keepdim)
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&self) -> Var<'t, T> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum(&axes, false).expect("all axes valid")
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let x = self.value();
        let d = *x.shape().last().expect("rank >= 1");
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(shape_err!(
                "layer_norm affine params must be [{d}], got {:?} / {:?}",
                gamma.shape(),
                beta.shape()
            ));
        }
        let (g, b) = (gamma.value(), beta.value());
        let rows = x.numel() / d;
        let eps = T::c(eps);
        let inv_d = T::one() / T::c(d as f64);
        let mut xhat = vec![T::zero(); x.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g.data()[j] + b.data()[j];
            }
        }
        let value = Tensor { shape: x.shape().to_vec(), data: out };
        Ok(self.tape.push(
            value,
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, rstd },
        ))
    }

    /// Training-mode batch normalisation over every axis except axis 1.
    /// Returns the output and the biased per-channel batch mean / variance.
    pub fn batch_norm_train(
        &self,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        eps: f64,
    ) -> Result<(Var<'t, T>, Vec<T>, Vec<T>)> {
        let x = self.value();
        if x.rank() < 2 {
            return Err(shape_err!("batch_norm needs rank >= 2, got {:?}", x.shape()));
        }
        let (outer, c, inner) = kernels::split_axis(x.shape(), 1);
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(shape_err!("batch_norm affine params must be [{c}]"));
        }
        let (g, b) = (gamma.value(), beta.value());
        let xd = x.data();
        let count = T::c((outer * inner) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                mean[ch] = mean[ch] + xd[base..base + inner].iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / count);
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                var[ch] = var[ch]
                    + xd[base..base + inner]
                        .iter()
                        .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                        .sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v = *v / count);
        let eps = T::c(eps);
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    let xh = (xd[i] - mean[ch]) * rstd[ch];
                    xhat[i] = xh;
                    out[i] = xh * g.data()[ch] + b.data()[ch];
                }
            }
        }
        let value = Tensor { shape: x.shape().to_vec(), data: out };
        let y = self.tape.push(
            value,
            Op::BatchNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, rstd },
        );
        Ok((y, mean, var))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let value = x.as_ref().clone().reshaped(shape)?;
        Ok(self.tape.push(value, Op::Reshape(self.id)))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Argument(format!("invalid permutation {perm:?} for rank {rank}")));
        }
        let data = kernels::permute(x.data(), x.shape(), perm);
        let shape = perm.iter().map(|&p| x.shape()[p]).collect();
        Ok(self.tape.push(Tensor { shape, data }, Op::Permute { x: self.id, perm: perm.to_vec() }))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Var<'t, T>> {
        let rank = self.shape().len();
        if a >= rank || b >= rank {
            return Err(Error::Argument(format!("transpose axes ({a},{b}) out of range for rank {rank}")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("concat of zero tensors".into()))?;
        let tape = first.tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Argument(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let agrees = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(shape_err!("concat shapes disagree off axis {axis}: {base:?} vs {s:?}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let n = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * n..(o + 1) * n]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let op = Op::Concat { inputs: parts.iter().map(|p| p.id).collect(), axis };
        Ok(tape.push(Tensor { shape, data }, op))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err!("narrow({axis}, {start}, {len}) out of range for {shape:?}"));
        }
        let (outer, total, inner) = kernels::split_axis(shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * total + start) * inner;
            data.extend_from_slice(&x.data()[s..s + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Ok(self.tape.push(Tensor { shape: out_shape, data }, Op::Narrow { x: self.id, axis, start }))
    }

    pub fn split(&self, sizes: &[usize], axis: usize) -> Result<Vec<Var<'t, T>>> {
        let shape = self.shape();
        if axis >= shape.len() || sizes.iter().sum::<usize>() != shape[axis] {
            return Err(shape_err!("split sizes {sizes:?} do not cover axis {axis} of {shape:?}"));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&n| {
                let part = self.narrow(axis, start, n);
                start += n;
                part
            })
            .collect()
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let target = kernels::broadcast_shape(x.shape(), shape)?;
        if target != shape {
            return Err(shape_err!("cannot broadcast {:?} to {shape:?}", x.shape()));
        }
        let data = kernels::expand(x.data(), x.shape(), shape);
        Ok(self.tape.push(Tensor { shape: shape.to_vec(), data }, Op::BroadcastTo(self.id)))
    }

    /// Row lookup into a `[V, C]` table (embedding).
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'t, T>> {
        let t = self.value();
        if t.rank() != 2 {
            return Err(shape_err!("gather_rows needs a 2-D table, got {:?}", t.shape()));
        }
        let (rows, width) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Data(format!("id {bad} out of range for table of {rows} rows")));
        }
        if ids.is_empty() {
            return Err(Error::Argument("gather_rows with no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            data.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        let value = Tensor { shape: vec![ids.len(), width], data };
        Ok(self.tape.push(value, Op::GatherRows { table: self.id, ids: ids.to_vec() }))
    }

    /// Replaces entries where `mask` is true with `fill` (no gradient there).
    pub fn masked_fill(&self, mask: Rc<Vec<bool>>, fill: f64) -> Result<Var<'t, T>> {
        let x = self.value();
        if mask.len() != x.numel() {
            return Err(shape_err!("mask has {} entries, tensor has {}", mask.len(), x.numel()));
        }
        let f = T::c(fill);
        let data = x
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&v, &m)| if m { f } else { v })
            .collect();
        let value = Tensor { shape: x.shape().to_vec(), data };
        Ok(self.tape.push(value, Op::MaskedFill { x: self.id, mask }))
    }

    /// Same value, cut from the gradient graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant(self.value().as_ref().clone())
    }
}

#[cfg(test)]
mod tests {
    use super::super::{finite_diff_check, finite_diff_check_masked, Tape};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_and_zero_leaf() {
        let tape = Tape::<f64>::new();
        let eye = tape.tensor(&[2, 2], &[1.0, 0.0, 0.0, 1.0], false).unwrap();
        let m = tape.tensor(&[2, 2], &[3.0, -1.0, 2.5, 7.0], false).unwrap();
        assert_eq!(eye.matmul(&m).unwrap().value().data(), m.value().data());
        let z = tape.tensor(&[3], &[0.0; 3], true).unwrap();
        z.sum_all().backward().unwrap();
        assert_eq!(z.grad().unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(tape.tensor(&[2, 3], &[0.0; 5], true).is_err());
    }

    #[test]
    fn hand_contraction() {
        let tape = Tape::<f64>::new();
        let a = tape.tensor(&[2, 2], &[1.0, 2.0, 3.0, 4.0], false).unwrap();
        let b = tape.tensor(&[2, 1], &[5.0, 6.0], false).unwrap();
        assert_eq!(a.matmul(&b).unwrap().value().data(), &[17.0, 39.0]);
        let bad = tape.tensor(&[3, 1], &[1.0; 3], false).unwrap();
        assert!(matches!(a.matmul(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn square_and_reuse() {
        let tape = Tape::<f64>::new();
        let x = tape.tensor(&[1], &[3.0], true).unwrap();
        x.mul(&x).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[6.0]);

        let tape = Tape::<f64>::new();
        let x = tape.tensor(&[1], &[3.0], true).unwrap();
        x.add(&x).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let tape = Tape::<f64>::new();
        let x = tape.tensor(&[2], &[1.0, 2.0], true).unwrap();
        let y = x.mul(&x).unwrap().sum_all();
        y.backward().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[4.0, 8.0]);
        tape.zero_grad();
        assert!(x.grad().is_none());
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.tensor(&[2], &[1.0, 2.0], true).unwrap();
        assert!(matches!(x.relu().backward(), Err(Error::Argument(_))));
    }

    #[test]
    fn frozen_leaf_gets_no_grad() {
        let tape = Tape::<f64>::new();
        let w = tape.tensor(&[2], &[1.0, 2.0], false).unwrap();
        let x = tape.tensor(&[2], &[3.0, 4.0], true).unwrap();
        w.mul(&x).unwrap().sum_all().backward().unwrap();
        assert!(w.grad().is_none());
        assert_eq!(x.grad().unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn activations_pointwise() {
        let tape = Tape::<f64>::new();
        let x = tape.tensor(&[3], &[-1.0, 0.0, 2.0], true).unwrap();
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
        let z = tape.tensor(&[1], &[0.0], true).unwrap();
        assert_eq!(z.sigmoid().value().data(), &[0.5]);
        assert_eq!(z.tanh().value().data(), &[0.0]);
        // relu'(0) = 0
        x.relu().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_basics() {
        let tape = Tape::<f64>::new();
        let x = tape.tensor(&[2], &[0.0, 0.0], false).unwrap();
        assert_eq!(x.softmax(0).unwrap().value().data(), &[0.5, 0.5]);
        let big = tape.tensor(&[3], &[1000.0; 3], false).unwrap();
        for &v in big.softmax(0).unwrap().value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn reductions() {
        let tape = Tape::<f64>::new();
        let m = tape.var(Tensor::full(&[2, 3, 4, 4], 7.0), false);
        let pooled = m.mean(&[2, 3], false).unwrap();
        assert_eq!(pooled.shape(), vec![2, 3]);
        assert!(pooled.value().data().iter().all(|&v| (v - 7.0).abs() < 1e-12));
        let ones = tape.var(Tensor::ones(&[2, 3]), false);
        assert_eq!(ones.sum(&[0, 1], false).unwrap().value().data(), &[6.0]);
        assert!(matches!(ones.sum(&[1, 1], false), Err(Error::Argument(_))));
        assert_eq!(ones.sum(&[1], true).unwrap().shape(), vec![2, 1]);
    }

    #[test]
    fn layer_norm_standardises() {
        let tape = Tape::<f64>::new();
        let x = tape.tensor(&[3], &[1.0, 2.0, 3.0], false).unwrap();
        let g = tape.var(Tensor::ones(&[3]), false);
        let b = tape.var(Tensor::zeros(&[3]), false);
        let y = x.layer_norm(&g, &b, 1e-12).unwrap().value();
        let mean: f64 = y.data().iter().sum::<f64>() / 3.0;
        let var: f64 = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn shape_round_trips() {
        let tape = Tape::<f64>::new();
        let x = tape.tensor(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], false).unwrap();
        let back = x.reshape(&[3, 2]).unwrap().reshape(&[2, 3]).unwrap();
        assert_eq!(back.value().as_ref(), x.value().as_ref());
        let tt = x.transpose(0, 1).unwrap().transpose(0, 1).unwrap();
        assert_eq!(tt.value().as_ref(), x.value().as_ref());
        assert!(matches!(x.reshape(&[4, 2]), Err(Error::Shape(_))));

        let a = tape.var(Tensor::zeros(&[2, 64, 8, 8]), false);
        let b = tape.var(Tensor::ones(&[2, 64, 8, 8]), false);
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 128, 8, 8]);
        let parts = c.split(&[64, 64], 1).unwrap();
        assert_eq!(parts[1].value().as_ref(), b.value().as_ref());
    }

    #[test]
    fn conv_identity_and_shape() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = tape.var(rand_tensor(&mut rng, &[1, 1, 5, 5]), false);
        let w = tape.var(Tensor::ones(&[1, 1, 1, 1]), false);
        let y = x.conv2d(&w, None, 1, 0).unwrap();
        assert_eq!(y.value().as_ref(), x.value().as_ref());

        let x = tape.var(rand_tensor(&mut rng, &[2, 3, 8, 8]), false);
        let w = tape.var(rand_tensor(&mut rng, &[4, 3, 3, 3]), false);
        assert_eq!(x.conv2d(&w, None, 1, 1).unwrap().shape(), vec![2, 4, 8, 8]);
        assert_eq!(x.conv2d(&w, None, 2, 1).unwrap().shape(), vec![2, 4, 4, 4]);
        let wrong = tape.var(rand_tensor(&mut rng, &[4, 2, 3, 3]), false);
        assert!(matches!(x.conv2d(&wrong, None, 1, 1), Err(Error::Shape(_))));
    }

    /// Direct quadruple-loop convolution used as an independent oracle.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
        let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; b * cout * ho * wo];
        for n in 0..b {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.data()[((n * cin + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out[((n * cout + co) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0), (3, 2)] {
            let x = rand_tensor(&mut rng, &[2, 3, 7, 6]);
            let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
            let tape = Tape::<f64>::new();
            let y = tape.var(x.clone(), false).conv2d(&tape.var(w.clone(), false), None, stride, pad).unwrap();
            let naive = naive_conv(&x, &w, stride, pad);
            for (a, b) in y.value().data().iter().zip(&naive) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradcheck_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = [rand_tensor(&mut rng, &[2, 3, 4]), rand_tensor(&mut rng, &[4, 5])];
        let r = finite_diff_check(|_, v| Ok(v[0].matmul(&v[1])?.sum_all()), &inputs, 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
        // broadcast batch on both sides
        let inputs = [rand_tensor(&mut rng, &[2, 1, 3, 4]), rand_tensor(&mut rng, &[3, 4, 2])];
        let r = finite_diff_check(
            |t, v| {
                let w = t.var(Tensor::from_fn(&[2, 3, 3, 2], |i| (i as f64 * 0.37).sin()), false);
                Ok(v[0].matmul(&v[1])?.mul(&w)?.sum_all())
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn gradcheck_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inputs = [
            rand_tensor(&mut rng, &[1, 2, 5, 5]),
            rand_tensor(&mut rng, &[3, 2, 3, 3]),
            rand_tensor(&mut rng, &[3]),
        ];
        let probe = rand_tensor(&mut rng, &[1, 3, 3, 3]);
        let r = finite_diff_check(
            |t, v| {
                let y = v[0].conv2d(&v[1], Some(&v[2]), 2, 1)?;
                Ok(y.mul(&t.var(probe.clone(), false))?.sum_all())
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }

    #[test]
    fn gradcheck_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for kind in [Activation::Relu, Activation::Sigmoid, Activation::Tanh] {
            let inputs = [rand_tensor(&mut rng, &[4, 5])];
            let probe = rand_tensor(&mut rng, &[4, 5]);
            let r = finite_diff_check_masked(
                |t, v| Ok(v[0].activation(kind).mul(&t.var(probe.clone(), false))?.sum_all()),
                &inputs,
                1e-6,
                |_, _, x| kind != Activation::Relu || x.abs() > 1e-3,
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-6, "{kind:?}: {r:?}");
        }
    }

    #[test]
    fn gradcheck_softmax_norms_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let probe = rand_tensor(&mut rng, &[3, 4, 5]);
        for axis in 0..3 {
            let r = finite_diff_check(
                |t, v| Ok(v[0].softmax(axis)?.mul(&t.var(probe.clone(), false))?.sum_all()),
                &[rand_tensor(&mut rng, &[3, 4, 5])],
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-6, "axis {axis}: {r:?}");
        }
        let probe = rand_tensor(&mut rng, &[2, 3, 4, 2]);
        let inputs = [
            rand_tensor(&mut rng, &[2, 3, 4, 2]),
            rand_tensor(&mut rng, &[3]),
            rand_tensor(&mut rng, &[3]),
        ];
        let r = finite_diff_check(
            |t, v| Ok(v[0].batch_norm_train(&v[1], &v[2], 1e-5)?.0.mul(&t.var(probe.clone(), false))?.sum_all()),
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "batch norm: {r:?}");
        let probe = rand_tensor(&mut rng, &[3, 4, 5]);
        let inputs = [
            rand_tensor(&mut rng, &[3, 4, 5]),
            rand_tensor(&mut rng, &[5]),
            rand_tensor(&mut rng, &[5]),
        ];
        let r = finite_diff_check(
            |t, v| Ok(v[0].layer_norm(&v[1], &v[2], 1e-5)?.mul(&t.var(probe.clone(), false))?.sum_all()),
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "layer norm: {r:?}");
    }

    #[test]
    fn gradcheck_data_movement() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let table = rand_tensor(&mut rng, &[5, 3]);
        let other = rand_tensor(&mut rng, &[2, 3, 4]);
        let probe = rand_tensor(&mut rng, &[4, 3, 4]);
        let mask: Rc<Vec<bool>> = Rc::new((0..48).map(|i| i % 7 == 0).collect());
        let r = finite_diff_check(
            |t, v| {
                let rows = v[0].gather_rows(&[1, 4, 1])?.reshape(&[1, 3, 3])?;
                let wide = rows.narrow(2, 0, 3)?.broadcast_to(&[2, 3, 3])?;
                let both = Var::concat(&[wide, v[1].narrow(2, 1, 1)?], 2)?;
                let moved = both.permute(&[1, 0, 2])?.reshape(&[3, 2, 4])?.transpose(0, 1)?;
                let stacked = Var::concat(&[moved, moved.scale(0.5)], 0)?;
                let filled = stacked.masked_fill(Rc::clone(&mask), -3.0)?;
                let back = filled.reshape(&[4, 3, 4])?.mul(&t.var(probe.clone(), false))?;
                Ok(back.mean(&[0, 2], false)?.sum_all())
            },
            &[table, other],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn log_clamp_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.tensor(&[3], &[0.5, 2.0, 0.0], true).unwrap();
        x.log_clamp(1e-12).sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 0.5, 0.0]);
    }
}
