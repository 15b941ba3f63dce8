//! Convolutional (local) and patch-transformer (global) image encoders.

use crate::error::{shape_err, Result};
use crate::nn::{BatchNorm, Conv2d, Ctx, ParamBuilder, ParamId, TransformerBlock};
use crate::tensor::{Real, Var};

/// Three stride-2 conv→BN→ReLU stages, `3 → 16 → 32 → C`.
#[derive(Debug, Clone)]
pub struct LocalEncoder {
    pub stages: Vec<(Conv2d, BatchNorm)>,
}

impl LocalEncoder {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, channels: usize, frozen: bool) -> Result<Self> {
        pb.scope("local", frozen, |pb| {
            let widths = [3, 16, 32, channels];
            let stages = (0..3)
                .map(|i| {
                    let conv = Conv2d::build(pb, &format!("conv{i}"), widths[i], widths[i + 1], 3, 2, 1, false)?;
                    let bn = BatchNorm::build(pb, &format!("bn{i}"), widths[i + 1])?;
                    Ok((conv, bn))
                })
                .collect::<Result<_>>()?;
            Ok(Self { stages })
        })
    }

    /// `[B, 3, H, W] → [B, C, H/8, W/8]`.
    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, images: &Var<'t, T>) -> Result<Var<'t, T>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] % 8 != 0 || s[3] % 8 != 0 {
            return Err(shape_err!("local encoder needs [B, 3, H, W] with H, W divisible by 8, got {s:?}"));
        }
        let mut x = *images;
        for (conv, bn) in &self.stages {
            x = bn.forward(ctx, &conv.forward(ctx, &x)?)?.relu();
        }
        Ok(x)
    }
}

/// Patch embedding, class token, learned positions and transformer blocks.
#[derive(Debug, Clone)]
pub struct GlobalEncoder {
    pub patch: Conv2d,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub patch_size: usize,
    pub image_size: usize,
}

/// Tokens plus the per-block `[B, H, N+1, N+1]` self-attention weights.
pub struct GlobalOutput<'t, T: Real> {
    pub tokens: Var<'t, T>,
    pub attention: Vec<Var<'t, T>>,
}

impl GlobalEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        image_size: usize,
        patch: usize,
        channels: usize,
        heads: usize,
        depth: usize,
        mlp_ratio: usize,
        adapter: Option<(usize, f64)>,
        frozen: bool,
    ) -> Result<Self> {
        let n = (image_size / patch).pow(2);
        pb.scope("global", frozen, |pb| {
            let patch_conv = Conv2d::build(pb, "patch", 3, channels, patch, patch, 0, true)?;
            let cls = pb.normal("cls", &[1, 1, channels], 0.1)?;
            let pos = pb.normal("pos", &[1, n + 1, channels], 0.1)?;
            let blocks = (0..depth)
                .map(|i| TransformerBlock::build(pb, &format!("block{i}"), channels, heads, mlp_ratio, adapter))
                .collect::<Result<_>>()?;
            Ok(Self { patch: patch_conv, cls, pos, blocks, patch_size: patch, image_size })
        })
    }

    /// `[B, 3, H, W] → [B, N+1, C]` with the class token first.
    pub fn patch_embed<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, images: &Var<'t, T>) -> Result<Var<'t, T>> {
        let s = images.shape();
        let p = self.patch_size;
        if s.len() != 4 || s[2] % p != 0 || s[3] % p != 0 {
            return Err(shape_err!("patch embedding needs [B, 3, H, W] divisible by {p}, got {s:?}"));
        }
        if s[2] != self.image_size || s[3] != self.image_size {
            return Err(shape_err!(
                "global encoder was built for {0}x{0} images, got {1}x{2}",
                self.image_size,
                s[2],
                s[3]
            ));
        }
        let b = s[0];
        let grid = self.patch.forward(ctx, images)?;
        let c = grid.shape()[1];
        let n = grid.shape()[2] * grid.shape()[3];
        let tokens = grid.reshape(&[b, c, n])?.permute(&[0, 2, 1])?;
        let cls = ctx.param(self.cls).broadcast_to(&[b, 1, c])?;
        Var::concat(&[cls, tokens], 1)?.add(&ctx.param(self.pos))
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, images: &Var<'t, T>) -> Result<GlobalOutput<'t, T>> {
        let mut tokens = self.patch_embed(ctx, images)?;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (t, a) = block.forward(ctx, &tokens, None)?;
            tokens = t;
            attention.push(a);
        }
        Ok(GlobalOutput { tokens, attention })
    }
}

/// Drops the class token and lays patch tokens on an `h × w` grid in raster
/// order: `[B, N+1, C] → [B, C, h, w]`.
pub fn tokens_to_grid<'t, T: Real>(tokens: &Var<'t, T>, h: usize, w: usize) -> Result<Var<'t, T>> {
    let s = tokens.shape();
    if s.len() != 3 || s[1] != h * w + 1 {
        return Err(shape_err!("{s:?} tokens cannot fill a {h}x{w} grid plus class token"));
    }
    let (b, c) = (s[0], s[2]);
    tokens.narrow(1, 1, h * w)?.permute(&[0, 2, 1])?.reshape(&[b, c, h, w])
}

/// `[B, C, h, w] → [B, h·w, C]`.
pub fn grid_to_tokens<'t, T: Real>(grid: &Var<'t, T>) -> Result<Var<'t, T>> {
    let s = grid.shape();
    if s.len() != 4 {
        return Err(shape_err!("expected a [B, C, H, W] grid, got {s:?}"));
    }
    grid.reshape(&[s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])
}
