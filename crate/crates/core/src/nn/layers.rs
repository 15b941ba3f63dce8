use std::rc::Rc;

use super::{BnUpdate, Ctx, Mode, ParamBuilder, ParamId, ParamKind};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Var};

/// `y = x·W + b` on the last axis, `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, din: usize, dout: usize, bias: bool) -> Result<Self> {
        pb.scope(name, false, |pb| {
            let w = pb.normal("w", &[din, dout], (1.0 / din as f64).sqrt())?;
            let b = if bias { Some(pb.constant("b", &[dout], 0.0)?) } else { None };
            Ok(Self { w, b })
        })
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.matmul(&ctx.param(self.w))?;
        match self.b {
            Some(b) => y.add(&ctx.param(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        pb.scope(name, false, |pb| {
            let w = pb.normal("w", &[cout, cin, k, k], (2.0 / (cin * k * k) as f64).sqrt())?;
            let b = if bias { Some(pb.constant("b", &[cout], 0.0)?) } else { None };
            Ok(Self { w, b, stride, pad })
        })
    }

    /// 3×3, stride 1, pad 1 with bias: the shape-preserving convolution.
    pub fn same3<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Self::build(pb, name, cin, cout, 3, 1, 1, true)
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let b = self.b.map(|b| ctx.param(b));
        x.conv2d(&ctx.param(self.w), b.as_ref(), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize) -> Result<Self> {
        pb.scope(name, false, |pb| {
            Ok(Self { gamma: pb.constant("gamma", &[dim], 1.0)?, beta: pb.constant("beta", &[dim], 0.0)? })
        })
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(&ctx.param(self.gamma), &ctx.param(self.beta), Self::EPS)
    }
}

/// Batch normalisation over axis 1 with running statistics.
///
/// Running statistics start uninitialised; the first training batch sets
/// them directly, later batches blend with momentum. Evaluating before any
/// training batch is a state error. A frozen layer (non-trainable gamma)
/// normalises with its running statistics once they exist.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batches: ParamId,
}

impl BatchNorm {
    pub const EPS: f64 = 1e-5;

    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        pb.scope(name, false, |pb| {
            Ok(Self {
                gamma: pb.constant("gamma", &[channels], 1.0)?,
                beta: pb.constant("beta", &[channels], 0.0)?,
                running_mean: pb.buffer("running_mean", &[channels])?,
                running_var: pb.buffer("running_var", &[channels])?,
                batches: pb.buffer("batches", &[1])?,
            })
        })
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let initialised = ctx.store.value(self.batches).data()[0] > T::zero();
        let frozen = ctx.store.kind(self.gamma) != ParamKind::Trainable;
        let use_running = match ctx.mode {
            Mode::Eval if !initialised => {
                return Err(Error::State(format!(
                    "batch norm '{}' evaluated before any training batch",
                    ctx.store.entry(self.gamma).name.trim_end_matches(".gamma")
                )))
            }
            Mode::Eval => true,
            Mode::Train => frozen && initialised,
        };
        if use_running {
            return self.normalise_running(ctx, x);
        }
        let (y, mean, var) = x.batch_norm_train(&ctx.param(self.gamma), &ctx.param(self.beta), Self::EPS)?;
        ctx.record_bn(BnUpdate {
            mean: self.running_mean,
            var: self.running_var,
            count: self.batches,
            batch_mean: mean,
            batch_var: var,
        });
        Ok(y)
    }

    fn normalise_running<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if shape.len() < 2 {
            return Err(shape_err!("batch_norm needs rank >= 2, got {shape:?}"));
        }
        let c = shape[1];
        let mut bshape = vec![1; shape.len()];
        bshape[1] = c;
        let mean = ctx.store.value(self.running_mean).clone().reshaped(&bshape)?;
        let eps = T::c(Self::EPS);
        let rstd = ctx.store.value(self.running_var).map(|v| T::one() / (v + eps).sqrt()).reshaped(&bshape)?;
        let gamma = ctx.param(self.gamma).reshape(&bshape)?;
        let beta = ctx.param(self.beta).reshape(&bshape)?;
        x.sub(&ctx.tape.constant(mean))?
            .mul(&ctx.tape.constant(rstd))?
            .mul(&gamma)?
            .add(&beta)
    }
}

/// Multi-head self-attention with separate Q/K/V/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        pb.scope(name, false, |pb| {
            Ok(Self {
                q: Linear::build(pb, "q", dim, dim, true)?,
                k: Linear::build(pb, "k", dim, dim, true)?,
                v: Linear::build(pb, "v", dim, dim, true)?,
                o: Linear::build(pb, "o", dim, dim, true)?,
                heads,
            })
        })
    }

    /// `x: [B, T, C]`; `key_pad: [B, T]` marks keys to ignore.
    /// Returns the projected output and the `[B, H, T, T]` attention weights.
    pub fn forward<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: &Var<'t, T>,
        key_pad: Option<&[bool]>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let shape = x.shape();
        let (b, t, c) = (shape[0], shape[1], shape[2]);
        let h = self.heads;
        let dh = c / h;
        let split = |v: Var<'t, T>| v.reshape(&[b, t, h, dh])?.permute(&[0, 2, 1, 3]);
        let q = split(self.q.forward(ctx, x)?)?;
        let k = split(self.k.forward(ctx, x)?)?;
        let v = split(self.v.forward(ctx, x)?)?;
        let mut scores = q.matmul(&k.transpose(2, 3)?)?.scale(1.0 / (dh as f64).sqrt());
        if let Some(pad) = key_pad {
            if pad.len() != b * t {
                return Err(shape_err!("key mask has {} entries, expected {}", pad.len(), b * t));
            }
            let mask: Vec<bool> = (0..b * h * t * t)
                .map(|i| {
                    let key = i % t;
                    let batch = i / (h * t * t);
                    pad[batch * t + key]
                })
                .collect();
            scores = scores.masked_fill(Rc::new(mask), -1e30)?;
        }
        let attn = scores.softmax(3)?;
        let out = attn.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, t, c])?;
        Ok((self.o.forward(ctx, &out)?, attn))
    }
}

/// Bottleneck `A(F) = ReLU(F·W1 + b1)·W2 + b2`, blended as `α·A(F) + (1−α)·F`.
#[derive(Debug, Clone)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
    pub alpha: f64,
}

impl Adapter {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize, r: usize, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("adapter alpha {alpha} outside [0, 1]")));
        }
        // adapters stay trainable even inside a frozen backbone
        pb.scope_trainable(name, |pb| {
            let down = pb.scope("down", false, |pb| {
                Ok(Linear { w: pb.normal("w", &[dim, r], 0.01)?, b: Some(pb.constant("b", &[r], 0.0)?) })
            })?;
            let up = pb.scope("up", false, |pb| {
                Ok(Linear { w: pb.constant("w", &[r, dim], 0.0)?, b: Some(pb.constant("b", &[dim], 0.0)?) })
            })?;
            Ok(Self { down, up, alpha })
        })
    }

    pub fn bottleneck<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, f: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.up.forward(ctx, &self.down.forward(ctx, f)?.relu())
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, f: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.bottleneck(ctx, f)?.scale(self.alpha).add(&f.scale(1.0 - self.alpha))
    }

    /// `2·d·r + r + d` with biases, `2·d·r` without.
    pub fn param_count(d: usize, r: usize, with_bias: bool) -> usize {
        2 * d * r + if with_bias { r + d } else { 0 }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.down.w, self.up.w];
        v.extend(self.down.b);
        v.extend(self.up.b);
        v
    }
}

/// Pre-norm transformer block. With adapters, each sublayer's output
/// projection passes through its adapter before the residual add.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub adapters: Option<[Adapter; 2]>,
}

impl TransformerBlock {
    pub fn build<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        adapter: Option<(usize, f64)>,
    ) -> Result<Self> {
        pb.scope(name, false, |pb| {
            Ok(Self {
                ln1: LayerNorm::build(pb, "ln1", dim)?,
                attn: MultiHeadAttention::build(pb, "attn", dim, heads)?,
                ln2: LayerNorm::build(pb, "ln2", dim)?,
                fc1: Linear::build(pb, "fc1", dim, dim * mlp_ratio, true)?,
                fc2: Linear::build(pb, "fc2", dim * mlp_ratio, dim, true)?,
                adapters: match adapter {
                    Some((r, alpha)) => Some([
                        Adapter::build(pb, "adapter_attn", dim, r, alpha)?,
                        Adapter::build(pb, "adapter_mlp", dim, r, alpha)?,
                    ]),
                    None => None,
                },
            })
        })
    }

    pub fn forward<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: &Var<'t, T>,
        key_pad: Option<&[bool]>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let (mut a, weights) = self.attn.forward(ctx, &self.ln1.forward(ctx, x)?, key_pad)?;
        if let Some(ad) = &self.adapters {
            a = ad[0].forward(ctx, &a)?;
        }
        let x = x.add(&a)?;
        let mut m = self.fc2.forward(ctx, &self.fc1.forward(ctx, &self.ln2.forward(ctx, &x)?)?.relu())?;
        if let Some(ad) = &self.adapters {
            m = ad[1].forward(ctx, &m)?;
        }
        Ok((x.add(&m)?, weights))
    }
}
