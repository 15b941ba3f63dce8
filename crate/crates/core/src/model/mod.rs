//! The full classifier: local and global image encoders, prompt text
//! encoder, fusion, cross-modal enhancer and classifier head.

pub mod affm;
mod config;
pub mod encoders;
pub mod feb;
pub mod text;

use crate::error::{shape_err, Error, Result};
use crate::nn::{Ctx, Mode, ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

pub use config::{FebKind, ModelConfig, SeqBranch, Toggles};

use affm::{Affm, Align};
use encoders::{grid_to_tokens, tokens_to_grid, GlobalEncoder, LocalEncoder};
use feb::{Feb, Head};
use text::{build_prompts, tokenize, PromptSet, TextEncoder, Vocab};

/// Structure of the network; parameter values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: ModelConfig,
    pub toggles: Toggles,
    pub num_classes: usize,
    pub local: Option<LocalEncoder>,
    pub global: Option<GlobalEncoder>,
    pub text: Option<TextEncoder>,
    pub null_token: Option<ParamId>,
    pub align: Option<Align>,
    pub affm: Option<Affm>,
    pub feb: Option<Feb>,
    pub head: Head,
}

impl Network {
    pub fn build<T: Real>(
        cfg: &ModelConfig,
        toggles: &Toggles,
        num_classes: usize,
        vocab_size: usize,
        store: &mut ParamStore<T>,
        seed: u64,
    ) -> Result<Self> {
        toggles.validate()?;
        cfg.validate(toggles)?;
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        let c = cfg.channels;
        let frozen = toggles.freeze_backbone;
        let mut pb = ParamBuilder::new(store, seed);
        let local = if toggles.cnn { Some(LocalEncoder::build(&mut pb, c, frozen)?) } else { None };
        let global = if toggles.vit {
            let adapter = toggles.adapter.then_some((cfg.adapter_r, cfg.adapter_alpha));
            Some(GlobalEncoder::build(
                &mut pb,
                cfg.image_size,
                cfg.patch,
                c,
                cfg.heads,
                cfg.global_depth,
                cfg.mlp_ratio,
                adapter,
                frozen,
            )?)
        } else {
            None
        };
        let text = if toggles.text {
            Some(TextEncoder::build(&mut pb, vocab_size, cfg.text_len, c, cfg.heads, cfg.text_depth, cfg.mlp_ratio, frozen)?)
        } else {
            None
        };
        let null_token = if toggles.feb && !toggles.text { Some(pb.normal("null_token", &[1, 1, c], 0.1)?) } else { None };
        let align = if toggles.cnn && toggles.vit { Some(Align::build(&mut pb, c)?) } else { None };
        let affm = if toggles.affm {
            Some(Affm::build(&mut pb, c, cfg.heads, cfg.mlp_ratio, toggles.seq_branch, toggles.dam)?)
        } else {
            None
        };
        let feb = if toggles.feb { Some(Feb::build(&mut pb, toggles.feb_kind, c, cfg.feb_dim, cfg.feb_heads)?) } else { None };
        let head = Head::build(&mut pb, c, c, cfg.cls_hidden, num_classes, toggles.feb)?;
        Ok(Self { cfg: cfg.clone(), toggles: toggles.clone(), num_classes, local, global, text, null_token, align, affm, feb, head })
    }

    pub fn forward<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        images: &Var<'t, T>,
        prompt_ids: &[usize],
    ) -> Result<Forward<'t, T>> {
        let s = images.shape();
        let size = self.cfg.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
            return Err(shape_err!("expected images [B, 3, {size}, {size}], got {s:?}"));
        }
        let b = s[0];
        let local = match &self.local {
            Some(enc) => Some(enc.forward(ctx, images)?),
            None => None,
        };
        let global = match &self.global {
            Some(enc) => Some(enc.forward(ctx, images)?),
            None => None,
        };
        let global_attention = global.as_ref().map(|g| g.attention.clone()).unwrap_or_default();

        let (grid, dam) = match (&local, &global) {
            (Some(l), Some(g)) => {
                let align = self.align.as_ref().ok_or_else(|| Error::State("alignment conv missing".into()))?;
                let x = align.forward(ctx, &g.tokens, l)?;
                match &self.affm {
                    Some(affm) => {
                        let out = affm.forward(ctx, &x)?;
                        (out.fused, out.weights)
                    }
                    None => (x, None),
                }
            }
            (Some(l), None) => (*l, None),
            (None, Some(g)) => {
                let side = self.cfg.patches_per_side();
                (tokens_to_grid(&g.tokens, side, side)?, None)
            }
            (None, None) => return Err(Error::Config("neither image branch is enabled".into())),
        };

        let c = self.cfg.channels;
        let (fusion, a_v, a_l, text_features) = match &self.feb {
            Some(feb) => {
                let (l, text_features) = match (&self.text, self.null_token) {
                    (Some(enc), _) => {
                        let k = self.num_classes;
                        let f_t = enc.encode(ctx, prompt_ids, k)?;
                        (f_t.reshape(&[1, k, c])?.broadcast_to(&[b, k, c])?, Some(f_t))
                    }
                    (None, Some(null)) => (ctx.param(null).broadcast_to(&[b, 1, c])?, None),
                    (None, None) => return Err(Error::State("no text input for the enhancer".into())),
                };
                let out = feb.forward(ctx, &grid, &l)?;
                (self.head.pool_fuse(ctx, &out.v_hat, Some(&out.l_hat))?, out.a_v, out.a_l, text_features)
            }
            None => (self.head.pool_fuse(ctx, &grid_to_tokens(&grid)?, None)?, None, None, None),
        };
        let head = self.head.classify(ctx, &fusion)?;
        Ok(Forward {
            probs: head.probs,
            logits: head.logits,
            fusion,
            grid,
            local,
            global_attention,
            dam,
            a_v,
            a_l,
            text_features,
        })
    }
}

/// Model output plus intermediate values used for diagnostics and
/// explanations.
pub struct Forward<'t, T: Real> {
    pub probs: Var<'t, T>,
    pub logits: Var<'t, T>,
    /// `[B, d_v + d_l]`
    pub fusion: Var<'t, T>,
    /// Visual feature map entering the enhancer, `[B, C, H, W]`; the fused
    /// map when the fusion module is on.
    pub grid: Var<'t, T>,
    pub local: Option<Var<'t, T>>,
    pub global_attention: Vec<Var<'t, T>>,
    pub dam: Option<Var<'t, T>>,
    pub a_v: Option<Var<'t, T>>,
    pub a_l: Option<Var<'t, T>>,
    pub text_features: Option<Var<'t, T>>,
}

/// Network structure, parameters, and the tokenised class prompts.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub net: Network,
    pub params: ParamStore<T>,
    pub prompts: PromptSet,
    pub vocab: Vocab,
    pub prompt_ids: Vec<usize>,
    pub seed: u64,
}

impl<T: Real> Model<T> {
    pub fn new(cfg: &ModelConfig, toggles: &Toggles, class_names: &[String], seed: u64) -> Result<Self> {
        let prompts = build_prompts(class_names, &cfg.template)?;
        let vocab = Vocab::from_corpus(prompts.prompts.iter().map(String::as_str));
        Self::with_vocab(cfg, toggles, prompts, vocab, seed)
    }

    /// Builds with a given vocabulary (restoring from a checkpoint).
    pub fn with_vocab(cfg: &ModelConfig, toggles: &Toggles, prompts: PromptSet, vocab: Vocab, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = Network::build(cfg, toggles, prompts.class_names.len(), vocab.len(), &mut params, seed)?;
        let prompt_ids = prompts.prompts.iter().flat_map(|p| tokenize(p, &vocab, cfg.text_len)).collect();
        Ok(Self { net, params, prompts, vocab, prompt_ids, seed })
    }

    pub fn class_names(&self) -> &[String] {
        &self.prompts.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.net.num_classes
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_, T>, images: &Var<'t, T>) -> Result<Forward<'t, T>> {
        self.net.forward(ctx, images, &self.prompt_ids)
    }

    /// Eval-mode class probabilities `[B, K]` for a batch of images.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.params, Mode::Eval);
        let out = self.forward(&ctx, &tape.constant(images.clone()))?;
        Ok(out.probs.value().as_ref().clone())
    }

    /// Same network with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            net: self.net.clone(),
            params: self.params.cast(),
            prompts: self.prompts.clone(),
            vocab: self.vocab.clone(),
            prompt_ids: self.prompt_ids.clone(),
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;

    fn classes(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("class{i}")).collect()
    }

    fn images(b: usize, size: usize) -> Tensor<f64> {
        Tensor::from_fn(&[b, 3, size, size], |i| (((i as f64) * 0.013).sin() + 1.0) / 2.0)
    }

    #[test]
    fn full_model_shapes() {
        let m = Model::<f64>::new(&ModelConfig::default(), &Toggles::full(), &classes(7), 0).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &m.params, Mode::Train);
        let out = m.forward(&ctx, &tape.constant(images(2, 64))).unwrap();
        assert_eq!(out.probs.shape(), vec![2, 7]);
        assert_eq!(out.fusion.shape(), vec![2, 128]);
        assert_eq!(out.grid.shape(), vec![2, 64, 8, 8]);
        assert_eq!(out.dam.unwrap().shape(), vec![2, 2]);
        assert_eq!(out.a_v.unwrap().shape(), vec![2, 4, 64, 7]);
        assert_eq!(out.a_l.unwrap().shape(), vec![2, 4, 7, 64]);
    }

    #[test]
    fn every_trainable_param_gets_a_gradient_in_each_variant() {
        let variants = [
            Toggles::full(),
            Toggles { text: false, feb: false, affm: false, vit: false, adapter: false, ..Toggles::full() },
            Toggles { text: false, feb: false, affm: false, cnn: false, adapter: false, ..Toggles::full() },
            Toggles { text: false, feb: false, affm: false, cnn: false, ..Toggles::full() },
            Toggles { text: false, feb: false, affm: false, ..Toggles::full() },
            Toggles { text: false, feb: false, ..Toggles::full() },
            Toggles { affm: false, ..Toggles::full() },
            Toggles { seq_branch: SeqBranch::None, dam: false, ..Toggles::full() },
            Toggles { dam: false, ..Toggles::full() },
            Toggles { seq_branch: SeqBranch::Attention, dam: false, ..Toggles::full() },
            Toggles { feb_kind: FebKind::Conv, ..Toggles::full() },
            Toggles { feb_kind: FebKind::Cross, ..Toggles::full() },
            Toggles { text: false, ..Toggles::full() },
        ];
        for t in variants {
            let m = Model::<f64>::new(&ModelConfig::micro(), &t, &classes(3), 1).unwrap();
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &m.params, Mode::Train);
            let out = m.forward(&ctx, &tape.constant(images(2, 16))).unwrap();
            assert_eq!(out.probs.shape(), vec![2, 3]);
            out.logits.sum_all().backward().unwrap();
            for id in m.params.trainable_ids() {
                assert!(ctx.grad(id).is_some(), "{t:?}: {} has no gradient", m.params.entry(id).name);
            }
        }
    }

    #[test]
    fn frozen_backbone_census() {
        let t = Toggles { freeze_backbone: true, ..Toggles::full() };
        let m = Model::<f64>::new(&ModelConfig::micro(), &t, &classes(3), 1).unwrap();
        for e in m.params.entries() {
            let encoder = ["local.", "global.", "text."].iter().any(|p| e.name.starts_with(p));
            let expect_trainable = !encoder || e.name.contains("adapter");
            if e.kind != ParamKind::Buffer {
                assert_eq!(e.kind == ParamKind::Trainable, expect_trainable, "{}", e.name);
            }
        }
    }

    #[test]
    fn invalid_toggles_rejected() {
        let t = Toggles { cnn: false, vit: false, adapter: false, affm: false, ..Toggles::full() };
        assert!(matches!(Model::<f64>::new(&ModelConfig::micro(), &t, &classes(3), 0), Err(Error::Config(_))));
    }

    #[test]
    fn eval_duplicates_identical() {
        let mut m = Model::<f64>::new(&ModelConfig::micro(), &Toggles::full(), &classes(3), 2).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &m.params, Mode::Train);
        m.forward(&ctx, &tape.constant(images(2, 16))).unwrap();
        let ups = ctx.take_bn_updates();
        drop(ctx);
        m.params.apply_bn_updates(&ups, 0.1);
        let one = images(1, 16);
        let mut two = one.data().to_vec();
        two.extend_from_slice(one.data());
        let p = m.predict(&Tensor::new(&[2, 3, 16, 16], two).unwrap()).unwrap();
        assert_eq!(&p.data()[..3], &p.data()[3..]);
    }
}
