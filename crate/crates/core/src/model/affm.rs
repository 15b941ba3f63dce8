//! Adaptive feature fusion: branch alignment, dynamic branch weights, a
//! bidirectional recurrent scan, and the fused output convolution.

use crate::error::{shape_err, Result};
use crate::model::encoders::{grid_to_tokens, tokens_to_grid};
use crate::model::SeqBranch;
use crate::nn::{Conv2d, Ctx, Linear, ParamBuilder, ParamId, TransformerBlock};
use crate::tensor::{Real, Var};

/// Concatenates the global token grid with the local map and mixes them
/// with a 3×3 convolution, `2C → C`.
#[derive(Debug, Clone)]
pub struct Align {
    pub conv: Conv2d,
}

impl Align {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        Ok(Self { conv: Conv2d::same3(pb, "align", 2 * channels, channels)? })
    }

    /// `tokens: [B, N+1, C]`, `local: [B, C, H, W]` with `N = H·W`.
    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, tokens: &Var<'t, T>, local: &Var<'t, T>) -> Result<Var<'t, T>> {
        let ls = local.shape();
        if ls.len() != 4 {
            return Err(shape_err!("local map must be [B, C, H, W], got {ls:?}"));
        }
        let g = tokens_to_grid(tokens, ls[2], ls[3])?;
        Ok(self.conv.forward(ctx, &Var::concat(&[g, *local], 1)?)?.relu())
    }
}

/// Two-way squeeze MLP producing per-sample branch weights `[B, 2]`.
#[derive(Debug, Clone)]
pub struct Dam {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Dam {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        let hidden = (channels / 4).max(1);
        pb.scope("dam", false, |pb| {
            Ok(Self { fc1: Linear::build(pb, "fc1", channels, hidden, true)?, fc2: Linear::build(pb, "fc2", hidden, 2, true)? })
        })
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let pooled = x.mean(&[2, 3], false)?;
        self.fc2.forward(ctx, &self.fc1.forward(ctx, &pooled)?.relu())?.softmax(1)
    }
}

/// One scan direction of an LSTM with gate order `i, f, g, o`.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
}

impl LstmCell {
    fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize) -> Result<Self> {
        let std = (1.0 / c as f64).sqrt();
        pb.scope(name, false, |pb| {
            Ok(Self {
                w_ih: pb.normal("w_ih", &[c, 4 * c], std)?,
                w_hh: pb.normal("w_hh", &[c, 4 * c], std)?,
                b: pb.constant("b", &[4 * c], 0.0)?,
            })
        })
    }

    /// Runs over `seq: [B, S, C]` in the given step order and returns the
    /// hidden state for every position, indexed by position.
    fn scan<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        seq: &Var<'t, T>,
        order: impl Iterator<Item = usize>,
    ) -> Result<Vec<Option<Var<'t, T>>>> {
        let s = seq.shape();
        let (b, steps, c) = (s[0], s[1], s[2]);
        let z = seq.matmul(&ctx.param(self.w_ih))?.add(&ctx.param(self.b))?;
        let w_hh = ctx.param(self.w_hh);
        let mut out = vec![None; steps];
        let mut state: Option<(Var<'t, T>, Var<'t, T>)> = None;
        for t in order {
            let mut gates = z.narrow(1, t, 1)?.reshape(&[b, 4 * c])?;
            if let Some((h, _)) = &state {
                gates = gates.add(&h.matmul(&w_hh)?)?;
            }
            let i = gates.narrow(1, 0, c)?.sigmoid();
            let f = gates.narrow(1, c, c)?.sigmoid();
            let g = gates.narrow(1, 2 * c, c)?.tanh();
            let o = gates.narrow(1, 3 * c, c)?.sigmoid();
            let cell = match &state {
                Some((_, prev)) => f.mul(prev)?.add(&i.mul(&g)?)?,
                None => i.mul(&g)?,
            };
            let h = o.mul(&cell.tanh())?;
            out[t] = Some(h.reshape(&[b, 1, c])?);
            state = Some((h, cell));
        }
        Ok(out)
    }
}

/// Bidirectional raster-order LSTM over a feature map, merged `2C → C`.
#[derive(Debug, Clone)]
pub struct Vlstm {
    pub forward_cell: LstmCell,
    pub backward_cell: LstmCell,
    pub proj: Linear,
}

impl Vlstm {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        pb.scope("vlstm", false, |pb| {
            Ok(Self {
                forward_cell: LstmCell::build(pb, "fwd", channels)?,
                backward_cell: LstmCell::build(pb, "bwd", channels)?,
                proj: Linear::build(pb, "proj", 2 * channels, channels, true)?,
            })
        })
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let n = h * w;
        let seq = grid_to_tokens(x)?;
        let fwd = self.forward_cell.scan(ctx, &seq, 0..n)?;
        let bwd = self.backward_cell.scan(ctx, &seq, (0..n).rev())?;
        let collect = |hs: Vec<Option<Var<'t, T>>>| Var::concat(&hs.into_iter().flatten().collect::<Vec<_>>(), 1);
        let both = Var::concat(&[collect(fwd)?, collect(bwd)?], 2)?;
        self.proj
            .forward(ctx, &both)?
            .permute(&[0, 2, 1])?
            .reshape(&[b, c, h, w])
    }
}

#[derive(Debug, Clone)]
pub enum SeqModule {
    Vlstm(Vlstm),
    Attention(TransformerBlock),
}

impl SeqModule {
    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            SeqModule::Vlstm(v) => v.forward(ctx, x),
            SeqModule::Attention(block) => {
                let s = x.shape();
                let tokens = grid_to_tokens(x)?;
                let (y, _) = block.forward(ctx, &tokens, None)?;
                y.permute(&[0, 2, 1])?.reshape(&s)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Affm {
    pub pre: Conv2d,
    pub seq: Option<SeqModule>,
    pub conv_branch: Conv2d,
    pub dam: Option<Dam>,
    pub post: Conv2d,
}

pub struct AffmOutput<'t, T: Real> {
    /// Fused map `X*`, `[B, C, H, W]`.
    pub fused: Var<'t, T>,
    /// Branch weights `[B, 2]` when the dynamic module is on.
    pub weights: Option<Var<'t, T>>,
    pub seq_out: Option<Var<'t, T>>,
    pub conv_out: Var<'t, T>,
}

impl Affm {
    pub fn build<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        channels: usize,
        heads: usize,
        mlp_ratio: usize,
        seq: SeqBranch,
        dam: bool,
    ) -> Result<Self> {
        pb.scope("affm", false, |pb| {
            Ok(Self {
                pre: Conv2d::same3(pb, "pre", channels, channels)?,
                seq: match seq {
                    SeqBranch::None => None,
                    SeqBranch::Vlstm => Some(SeqModule::Vlstm(Vlstm::build(pb, channels)?)),
                    SeqBranch::Attention => Some(SeqModule::Attention(TransformerBlock::build(
                        pb,
                        "seq_attn",
                        channels,
                        heads,
                        mlp_ratio,
                        None,
                    )?)),
                },
                conv_branch: Conv2d::same3(pb, "conv_branch", channels, channels)?,
                dam: if dam { Some(Dam::build(pb, channels)?) } else { None },
                post: Conv2d::same3(pb, "post", channels, channels)?,
            })
        })
    }

    /// `X → X* = relu(post(att¹·x_v + att²·x_c))` with `x_v, x_c` computed
    /// from `relu(pre(X))` and the weights from `X`. Without the dynamic
    /// module the two branches are averaged; with a single branch it passes
    /// through unweighted.
    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>) -> Result<AffmOutput<'t, T>> {
        let xp = self.pre.forward(ctx, x)?.relu();
        let x_c = self.conv_branch.forward(ctx, &xp)?.relu();
        let x_v = match &self.seq {
            Some(m) => Some(m.forward(ctx, &xp)?),
            None => None,
        };
        let b = x.shape()[0];
        let weights = match &self.dam {
            Some(d) => Some(d.forward(ctx, x)?),
            None => None,
        };
        let mixed = match (&x_v, &weights) {
            (Some(v), Some(att)) => {
                let a1 = att.narrow(1, 0, 1)?.reshape(&[b, 1, 1, 1])?;
                let a2 = att.narrow(1, 1, 1)?.reshape(&[b, 1, 1, 1])?;
                v.mul(&a1)?.add(&x_c.mul(&a2)?)?
            }
            (Some(v), None) => v.add(&x_c)?.scale(0.5),
            (None, _) => x_c,
        };
        let fused = self.post.forward(ctx, &mixed)?.relu();
        Ok(AffmOutput { fused, weights, seq_out: x_v, conv_out: x_c })
    }
}
