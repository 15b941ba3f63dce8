//! Feature enhancer: cross-modal attention between visual tokens and class
//! prompt features, pooled fusion, and the classifier head.

use crate::error::{shape_err, Error, Result};
use crate::model::encoders::grid_to_tokens;
use crate::model::FebKind;
use crate::nn::{Conv2d, Ctx, Linear, ParamBuilder, ParamId};
use crate::tensor::{Real, Tensor, Var};

/// Bias-free projections for both attention directions. `cross_only` drops
/// the text-query direction (and its parameters).
#[derive(Debug, Clone)]
pub struct Bima {
    pub wq_v: ParamId,
    pub wk_l: ParamId,
    pub wv_l: ParamId,
    pub wo_v: ParamId,
    pub text_side: Option<TextSide>,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct TextSide {
    pub wq_l: ParamId,
    pub wk_v: ParamId,
    pub wv_v: ParamId,
    pub wo_l: ParamId,
}

pub struct BimaOutput<'t, T: Real> {
    pub v_hat: Var<'t, T>,
    pub l_hat: Var<'t, T>,
    /// `[B, H, N_v, N_l]`
    pub a_v: Var<'t, T>,
    /// `[B, H, N_l, N_v]`, absent for the one-directional variant.
    pub a_l: Option<Var<'t, T>>,
}

impl Bima {
    pub fn build<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        dv: usize,
        dl: usize,
        dim: usize,
        heads: usize,
        cross_only: bool,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("feb width {dim} not divisible by {heads} heads")));
        }
        pb.scope("bima", false, |pb| {
            let mut w = |name: &str, i: usize, o: usize| pb.normal(name, &[i, o], (1.0 / i as f64).sqrt());
            let wq_v = w("wq_v", dv, dim)?;
            let wk_l = w("wk_l", dl, dim)?;
            let wv_l = w("wv_l", dl, dim)?;
            let wo_v = w("wo_v", dim, dv)?;
            let text_side = if cross_only {
                None
            } else {
                Some(TextSide {
                    wq_l: w("wq_l", dl, dim)?,
                    wk_v: w("wk_v", dv, dim)?,
                    wv_v: w("wv_v", dv, dim)?,
                    wo_l: w("wo_l", dim, dl)?,
                })
            };
            Ok(Self { wq_v, wk_l, wv_l, wo_v, text_side, heads, dim })
        })
    }

    fn heads_of<'t, T: Real>(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        x.reshape(&[s[0], s[1], self.heads, self.dim / self.heads])?.permute(&[0, 2, 1, 3])
    }

    fn merge<'t, T: Real>(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        x.permute(&[0, 2, 1, 3])?.reshape(&[s[0], s[2], self.dim])
    }

    /// Softmax over the key axis of `q·kᵀ / √d_h`.
    pub fn attend<'t, T: Real>(&self, q: &Var<'t, T>, k: &Var<'t, T>) -> Result<Var<'t, T>> {
        let dh = (self.dim / self.heads) as f64;
        q.matmul(&k.transpose(2, 3)?)?.scale(1.0 / dh.sqrt()).softmax(3)
    }

    /// `v: [B, N_v, d_v]`, `l: [B, N_l, d_l]`.
    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, v: &Var<'t, T>, l: &Var<'t, T>) -> Result<BimaOutput<'t, T>> {
        let (vs, ls) = (v.shape(), l.shape());
        if vs.len() != 3 || ls.len() != 3 || vs[0] != ls[0] {
            return Err(shape_err!("bima needs [B, N, d] inputs with equal B, got {vs:?} and {ls:?}"));
        }
        let proj = |x: &Var<'t, T>, w: ParamId| -> Result<Var<'t, T>> { self.heads_of(&x.matmul(&ctx.param(w))?) };
        let q_v = proj(v, self.wq_v)?;
        let k_l = proj(l, self.wk_l)?;
        let v_l = proj(l, self.wv_l)?;
        let a_v = self.attend(&q_v, &k_l)?;
        let v_hat = self.merge(&a_v.matmul(&v_l)?)?.matmul(&ctx.param(self.wo_v))?;
        let (l_hat, a_l) = match &self.text_side {
            Some(ts) => {
                let q_l = proj(l, ts.wq_l)?;
                let k_v = proj(v, ts.wk_v)?;
                let v_v = proj(v, ts.wv_v)?;
                let a_l = self.attend(&q_l, &k_v)?;
                let l_hat = self.merge(&a_l.matmul(&v_v)?)?.matmul(&ctx.param(ts.wo_l))?;
                (l_hat, Some(a_l))
            }
            None => (*l, None),
        };
        Ok(BimaOutput { v_hat, l_hat, a_v, a_l })
    }
}

#[derive(Debug, Clone)]
pub enum FebAttention {
    Conv(Conv2d),
    Attention(Bima),
}

/// Scalar-weighted concatenation of pooled features followed by a two-layer
/// classifier.
#[derive(Debug, Clone)]
pub struct Head {
    pub w_v: ParamId,
    /// Absent when no text half exists (enhancer disabled).
    pub w_l: Option<ParamId>,
    pub fc1: Linear,
    pub fc2: Linear,
    pub dl: usize,
}

pub struct HeadOutput<'t, T: Real> {
    pub fusion: Var<'t, T>,
    pub logits: Var<'t, T>,
    pub probs: Var<'t, T>,
}

impl Head {
    pub fn build<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        dv: usize,
        dl: usize,
        hidden: usize,
        classes: usize,
        text_half: bool,
    ) -> Result<Self> {
        pb.scope("head", false, |pb| {
            Ok(Self {
                w_v: pb.constant("w_v", &[1], 1.0)?,
                w_l: if text_half { Some(pb.constant("w_l", &[1], 1.0)?) } else { None },
                fc1: Linear::build(pb, "fc1", dv + dl, hidden, true)?,
                fc2: Linear::build(pb, "fc2", hidden, classes, true)?,
                dl,
            })
        })
    }

    /// `[w_v·mean_N(v̂) ; w_l·mean_N(l̂)]`, with a zero text half when `l_hat`
    /// is absent.
    pub fn pool_fuse<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, v_hat: &Var<'t, T>, l_hat: Option<&Var<'t, T>>) -> Result<Var<'t, T>> {
        let v_bar = v_hat.mean(&[1], false)?.mul(&ctx.param(self.w_v))?;
        let b = v_bar.shape()[0];
        let l_part = match (l_hat, self.w_l) {
            (Some(l), Some(w)) => l.mean(&[1], false)?.mul(&ctx.param(w))?,
            (None, None) => ctx.tape.constant(Tensor::zeros(&[b, self.dl])),
            _ => return Err(Error::State("text half of the fusion head does not match its inputs".into())),
        };
        Var::concat(&[v_bar, l_part], 1)
    }

    pub fn classify<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, fusion: &Var<'t, T>) -> Result<HeadOutput<'t, T>> {
        let logits = self.fc2.forward(ctx, &self.fc1.forward(ctx, fusion)?.relu())?;
        let probs = logits.softmax(1)?;
        Ok(HeadOutput { fusion: *fusion, logits, probs })
    }
}

pub struct FebOutput<'t, T: Real> {
    pub v_hat: Var<'t, T>,
    pub l_hat: Var<'t, T>,
    pub a_v: Option<Var<'t, T>>,
    pub a_l: Option<Var<'t, T>>,
}

#[derive(Debug, Clone)]
pub struct Feb {
    pub attention: FebAttention,
}

impl Feb {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, kind: FebKind, channels: usize, dim: usize, heads: usize) -> Result<Self> {
        let attention = match kind {
            FebKind::Conv => FebAttention::Conv(pb.scope("feb", false, |pb| Conv2d::same3(pb, "conv", channels, channels))?),
            FebKind::Cross => FebAttention::Attention(pb.scope("feb", false, |pb| Bima::build(pb, channels, channels, dim, heads, true))?),
            FebKind::Bima => FebAttention::Attention(pb.scope("feb", false, |pb| Bima::build(pb, channels, channels, dim, heads, false))?),
        };
        Ok(Self { attention })
    }

    /// `grid: [B, C, H, W]` visual features, `l: [B, N_l, C]` text tokens.
    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, grid: &Var<'t, T>, l: &Var<'t, T>) -> Result<FebOutput<'t, T>> {
        match &self.attention {
            FebAttention::Conv(conv) => {
                let v_hat = grid_to_tokens(&conv.forward(ctx, grid)?)?;
                Ok(FebOutput { v_hat, l_hat: *l, a_v: None, a_l: None })
            }
            FebAttention::Attention(bima) => {
                let out = bima.forward(ctx, &grid_to_tokens(grid)?, l)?;
                Ok(FebOutput { v_hat: out.v_hat, l_hat: out.l_hat, a_v: Some(out.a_v), a_l: out.a_l })
            }
        }
    }
}
