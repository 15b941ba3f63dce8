//! Class-token attention maps, Grad-CAM, and PPM renderings of both.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::image::{encode_ppm, resize_bilinear};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Ctx, Mode};
use crate::tensor::{Real, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapSource {
    Attention,
    Gradcam,
}

/// Feature map differentiated by Grad-CAM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamLayer {
    /// The map entering the enhancer: fusion output, or the single branch.
    Fused,
    /// Output of the convolutional branch.
    Local,
}

/// `height × width` values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub values: Tensor<f32>,
    pub source: HeatmapSource,
    pub class_index: Option<usize>,
}

impl Heatmap {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values.data()[y * self.width() + x]
    }
}

/// Min-max scaling to `[0, 1]`. An identically zero map stays zero; any
/// other constant map becomes all ones.
pub fn normalize(raw: &Tensor<f32>) -> Tensor<f32> {
    let (lo, hi) = raw.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if raw.data().iter().all(|&v| v == 0.0) {
        return Tensor::zeros(raw.shape());
    }
    if hi <= lo {
        return Tensor::ones(raw.shape());
    }
    raw.map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
}

fn upsample(grid: Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (h, w) = (grid.shape()[0], grid.shape()[1]);
    resize_bilinear(&grid.reshaped(&[1, h, w])?, out_h, out_w)?.reshaped(&[out_h, out_w])
}

fn single_image<T: Real>(image: &Tensor<f32>) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("expected one [3, H, W] image, got {s:?}")));
    }
    image.cast::<T>().reshaped(&[1, s[0], s[1], s[2]])
}

/// Class-token attention over patches from the last global block, averaged
/// over heads, on the patch grid (before upsampling and normalisation).
pub fn attention_scores<T: Real>(model: &Model<T>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let global = model
        .net
        .global
        .as_ref()
        .ok_or_else(|| Error::Argument("attention maps need the transformer image branch".into()))?;
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.params, Mode::Eval);
    let out = global.forward(&ctx, &tape.constant(single_image::<T>(image)?))?;
    let attn = out
        .attention
        .last()
        .ok_or_else(|| Error::Argument("the transformer image branch has no blocks".into()))?
        .value();
    Ok(class_token_row(&attn, model.net.cfg.patches_per_side()))
}

/// Mean over heads of query row 0, keys `1..`, from `[1, H, N+1, N+1]`.
pub fn class_token_row<T: Real>(attn: &Tensor<T>, side: usize) -> Tensor<f32> {
    let s = attn.shape();
    let (heads, t) = (s[1], s[2]);
    let mut scores = vec![0f32; t - 1];
    for h in 0..heads {
        let row = &attn.data()[h * t * t..h * t * t + t];
        for (j, v) in row[1..].iter().enumerate() {
            scores[j] += v.to_f32().unwrap_or(0.0) / heads as f32;
        }
    }
    Tensor::new(&[side, side], scores).expect("grid matches token count")
}

pub fn attention_heatmap<T: Real>(model: &Model<T>, image: &Tensor<f32>) -> Result<Heatmap> {
    let scores = attention_scores(model, image)?;
    let s = image.shape();
    Ok(Heatmap { values: normalize(&upsample(scores, s[1], s[2])?), source: HeatmapSource::Attention, class_index: None })
}

/// `relu(Σ_c α_c · A_c)` with `α_c` the spatial mean of the gradient; both
/// inputs are `[C, h, w]`.
pub fn gradcam_map(features: &Tensor<f32>, grads: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = features.shape();
    if s.len() != 3 || grads.shape() != s {
        return Err(Error::Shape(format!("grad-cam needs matching [C, h, w], got {s:?} and {:?}", grads.shape())));
    }
    let (c, hw) = (s[0], s[1] * s[2]);
    let mut cam = vec![0f32; hw];
    for ch in 0..c {
        let g = &grads.data()[ch * hw..(ch + 1) * hw];
        let alpha = g.iter().sum::<f32>() / hw as f32;
        for (o, a) in cam.iter_mut().zip(&features.data()[ch * hw..(ch + 1) * hw]) {
            *o += alpha * a;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    Tensor::new(&[s[1], s[2]], cam)
}

/// Raw Grad-CAM on the chosen layer's grid for the pre-softmax logit of
/// `class_index`.
pub fn gradcam_raw<T: Real>(model: &Model<T>, image: &Tensor<f32>, class_index: usize, layer: CamLayer) -> Result<Tensor<f32>> {
    if class_index >= model.num_classes() {
        return Err(Error::Argument(format!("class {class_index} outside {} classes", model.num_classes())));
    }
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.params, Mode::Eval);
    // a differentiable input makes every downstream map differentiable,
    // even with all weights frozen
    let out = model.forward(&ctx, &tape.var(single_image::<T>(image)?, true))?;
    let target = match layer {
        CamLayer::Fused => out.grid,
        CamLayer::Local => out.local.ok_or_else(|| Error::Argument("the model has no convolutional branch".into()))?,
    };
    out.logits.narrow(1, class_index, 1)?.sum_all().backward()?;
    let s = target.shape();
    let feats = target.value().cast::<f32>().reshaped(&s[1..])?;
    let grads = match target.grad() {
        Some(g) => g.cast::<f32>().reshaped(&s[1..])?,
        None => Tensor::zeros(&s[1..]),
    };
    gradcam_map(&feats, &grads)
}

pub fn gradcam_heatmap<T: Real>(model: &Model<T>, image: &Tensor<f32>, class_index: usize, layer: CamLayer) -> Result<Heatmap> {
    let raw = gradcam_raw(model, image, class_index, layer)?;
    let s = image.shape();
    Ok(Heatmap { values: normalize(&upsample(raw, s[1], s[2])?), source: HeatmapSource::Gradcam, class_index: Some(class_index) })
}

/// Black → red → yellow colouring of a `[H, W]` map as a `[3, H, W]` image.
pub fn ramp(values: &Tensor<f32>) -> Tensor<f32> {
    let plane = values.numel();
    let (h, w) = (values.shape()[0], values.shape()[1]);
    let mut data = vec![0f32; 3 * plane];
    for (i, &v) in values.data().iter().enumerate() {
        data[i] = (2.0 * v).min(1.0);
        data[plane + i] = (2.0 * v - 1.0).max(0.0);
    }
    Tensor::new(&[3, h, w], data).expect("three planes")
}

/// Equal-weight blend of the image with the ramp-coloured heatmap.
pub fn overlay(h: &Heatmap, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || s[1] != h.height() || s[2] != h.width() {
        return Err(Error::Shape(format!("overlay of a {}x{} map on image {s:?}", h.height(), h.width())));
    }
    let r = ramp(&h.values);
    Tensor::new(s, image.data().iter().zip(r.data()).map(|(a, b)| 0.5 * a + 0.5 * b).collect())
}

/// Writes `<stem>_heatmap.ppm` and `<stem>_overlay.ppm` into `dir`.
pub fn export_heatmap(h: &Heatmap, image: &Tensor<f32>, dir: &Path, stem: &str) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    let heat = dir.join(format!("{stem}_heatmap.ppm"));
    let over = dir.join(format!("{stem}_overlay.ppm"));
    std::fs::write(&heat, encode_ppm(&ramp(&h.values))?).map_err(|e| Error::io(&heat, e))?;
    std::fs::write(&over, encode_ppm(&overlay(h, image)?)?).map_err(|e| Error::io(&over, e))?;
    Ok((heat, over))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Toggles};

    fn model() -> Model<f64> {
        let names: Vec<String> = (0..3).map(|i| format!("c{i}")).collect();
        let mut m = Model::new(&ModelConfig::micro(), &Toggles::full(), &names, 4).unwrap();
        // seed batch-norm statistics so eval mode is available
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &m.params, Mode::Train);
        m.forward(&ctx, &tape.constant(Tensor::from_fn(&[2, 3, 16, 16], |i| (i as f64 * 0.37).sin()))).unwrap();
        let ups = ctx.take_bn_updates();
        drop(ctx);
        m.params.apply_bn_updates(&ups, 1.0);
        m
    }

    fn image() -> Tensor<f32> {
        Tensor::from_fn(&[3, 16, 16], |i| ((i as f32 * 0.21).cos() + 1.0) / 2.0)
    }

    #[test]
    fn normalization_contract() {
        let n = normalize(&Tensor::new(&[1, 3], vec![2.0, 4.0, 3.0]).unwrap());
        assert_eq!(n.data(), &[0.0, 1.0, 0.5]);
        assert_eq!(normalize(&Tensor::zeros(&[2, 2])).data(), &[0.0; 4]);
        assert_eq!(normalize(&Tensor::full(&[2, 2], 0.3)).data(), &[1.0; 4]);
    }

    #[test]
    fn attention_map_contract() {
        let m = model();
        let scores = attention_scores(&m, &image()).unwrap();
        assert_eq!(scores.shape(), &[2, 2]);
        assert!(scores.data().iter().sum::<f32>() <= 1.0 + 1e-6);
        let h = attention_heatmap(&m, &image()).unwrap();
        assert_eq!(h.values.shape(), &[16, 16]);
        assert!(h.values.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(h.values.data().iter().cloned().fold(0.0, f32::max), 1.0);
    }

    #[test]
    fn uniform_attention_is_flat() {
        let t = 5;
        let attn = Tensor::<f64>::full(&[1, 2, t, t], 1.0 / t as f64);
        let row = class_token_row(&attn, 2);
        assert!(row.data().iter().all(|&v| (v - 0.2).abs() < 1e-7));
    }

    #[test]
    fn gradcam_contract() {
        let m = model();
        let raw = gradcam_raw(&m, &image(), 1, CamLayer::Fused).unwrap();
        assert_eq!(raw.shape(), &[2, 2]);
        assert!(raw.data().iter().all(|&v| v >= 0.0));
        let local = gradcam_raw(&m, &image(), 1, CamLayer::Local).unwrap();
        assert_eq!(local.shape(), &[2, 2]);
        assert!(matches!(gradcam_raw(&m, &image(), 3, CamLayer::Fused), Err(Error::Argument(_))));
        let zero = gradcam_map(&Tensor::ones(&[4, 2, 2]), &Tensor::zeros(&[4, 2, 2])).unwrap();
        assert_eq!(zero.data(), &[0.0; 4]);
        assert_eq!(normalize(&zero).data(), &[0.0; 4]);
    }

    #[test]
    fn overlay_blend() {
        let img = image();
        let h = Heatmap { values: Tensor::zeros(&[16, 16]), source: HeatmapSource::Gradcam, class_index: Some(0) };
        let o = overlay(&h, &img).unwrap();
        assert_eq!(o.shape(), img.shape());
        for (a, b) in o.data().iter().zip(img.data()) {
            assert_eq!(*a, 0.5 * b);
        }
        let hot = Heatmap { values: Tensor::ones(&[16, 16]), ..h };
        let r = ramp(&hot.values);
        assert_eq!(&r.data()[..1], &[1.0]);
        assert_eq!(r.data()[256], 1.0);
        assert_eq!(r.data()[512], 0.0);
    }
}
