//! Prompt rendering, word tokenizer, and the text transformer.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamBuilder, ParamId, TransformerBlock};
use crate::tensor::{Real, Var};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const UNK: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub template: String,
    pub class_names: Vec<String>,
    pub prompts: Vec<String>,
}

/// Renders one lowercased prompt per class. The `{Class}` placeholder is
/// matched case-insensitively and must appear exactly once.
pub fn build_prompts(class_names: &[String], template: &str) -> Result<PromptSet> {
    let lower = template.to_lowercase();
    let marks: Vec<usize> = lower.match_indices("{class}").map(|(i, _)| i).collect();
    if marks.len() != 1 {
        return Err(Error::Config(format!(
            "prompt template {template:?} must contain {{Class}} exactly once"
        )));
    }
    if class_names.is_empty() || class_names.iter().any(|c| c.trim().is_empty()) {
        return Err(Error::Config("class names must be non-empty".into()));
    }
    let at = marks[0];
    let prompts = class_names
        .iter()
        .map(|c| format!("{}{}{}", &lower[..at], c.to_lowercase(), &lower[at + "{class}".len()..]))
        .collect();
    Ok(PromptSet { template: template.to_string(), class_names: class_names.to_vec(), prompts })
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Word-level vocabulary: `[PAD]`, `[CLS]`, `[UNK]`, then sorted corpus words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut ws: Vec<String> = texts.into_iter().flat_map(words).collect();
        ws.sort();
        ws.dedup();
        let mut tokens = vec!["[PAD]".to_string(), "[CLS]".to_string(), "[UNK]".to_string()];
        tokens.extend(ws);
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let lookup = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, lookup }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> usize {
        if self.lookup.is_empty() && !self.tokens.is_empty() {
            // deserialised without the index
            return self.tokens.iter().position(|t| t == word).unwrap_or(UNK);
        }
        self.lookup.get(word).copied().unwrap_or(UNK)
    }

    /// Rebuilds the lookup table after deserialisation.
    pub fn reindexed(self) -> Self {
        Self::from_tokens(self.tokens)
    }
}

/// `[CLS]` + word ids, padded with `[PAD]` or truncated to `len`.
pub fn tokenize(text: &str, vocab: &Vocab, len: usize) -> Vec<usize> {
    let mut ids = vec![CLS];
    ids.extend(words(text).map(|w| vocab.id(&w)));
    ids.resize(len, PAD);
    ids
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub token_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub len: usize,
}

impl TextEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        vocab: usize,
        len: usize,
        dim: usize,
        heads: usize,
        depth: usize,
        mlp_ratio: usize,
        frozen: bool,
    ) -> Result<Self> {
        pb.scope("text", frozen, |pb| {
            let token_emb = pb.normal("token_emb", &[vocab, dim], 0.1)?;
            let pos_emb = pb.normal("pos_emb", &[len, dim], 0.1)?;
            let blocks = (0..depth)
                .map(|i| TransformerBlock::build(pb, &format!("block{i}"), dim, heads, mlp_ratio, None))
                .collect::<Result<_>>()?;
            Ok(Self { token_emb, pos_emb, blocks, len })
        })
    }

    /// `ids` holds `k` equal-length rows of at most `len` token ids; returns
    /// the `[k, C]` class-token features.
    pub fn encode<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, ids: &[usize], k: usize) -> Result<Var<'t, T>> {
        if k == 0 || ids.len() % k != 0 || ids.len() / k > self.len || ids.is_empty() {
            return Err(Error::Data(format!(
                "expected {k} rows of at most {} token ids, got {} ids",
                self.len,
                ids.len()
            )));
        }
        let l = ids.len() / k;
        let table = ctx.param(self.token_emb);
        let dim = table.shape()[1];
        let pos = ctx.param(self.pos_emb).narrow(0, 0, l)?;
        let mut x = table.gather_rows(ids)?.reshape(&[k, l, dim])?.add(&pos)?;
        let pad: Vec<bool> = ids.iter().map(|&i| i == PAD).collect();
        for block in &self.blocks {
            x = block.forward(ctx, &x, Some(&pad))?.0;
        }
        x.narrow(1, 0, 1)?.reshape(&[k, dim])
    }
}
