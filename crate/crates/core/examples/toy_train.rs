//! Trains the full model on the synthetic set and prints per-epoch progress.
//!
//! `cargo run --release --example toy_train -- [epochs] [lr] [batch]`

use std::time::Instant;

use ct_fusion::data::generate_synthetic;
use ct_fusion::explain::{gradcam_heatmap, CamLayer};
use ct_fusion::model::{Model, ModelConfig, Toggles};
use ct_fusion::train::{split_dataset, train_loop, OptimizerState, TrainConfig};

fn main() -> ct_fusion::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let cfg = TrainConfig {
        epochs: arg(1, 50.0) as usize,
        learning_rate: arg(2, 5e-4),
        batch_size: arg(3, 16.0) as usize,
        seed: 1,
        ..TrainConfig::desk()
    };
    let layer = if std::env::var("CAM_LOCAL").is_ok() { CamLayer::Local } else { CamLayer::Fused };
    let ds = generate_synthetic(7, 50, 64, 1)?;
    let (train, test) = split_dataset(&ds, cfg.split_ratio, cfg.seed)?;
    let mut model = Model::<f32>::new(&ModelConfig::default(), &Toggles::full(), &ds.class_names, cfg.seed)?;
    println!("{} trainable scalars", model.params.entries().iter().filter(|e| e.kind == ct_fusion::nn::ParamKind::Trainable).map(|e| e.value.numel()).sum::<usize>());
    let mut state = OptimizerState::new(&model.params);
    let start = Instant::now();
    train_loop(&mut model, &train, &test, &cfg, &mut state, |r| {
        println!(
            "epoch {:>3} {:>7.1}s loss {:.4} train {:.3} test {:.3}",
            r.epoch,
            start.elapsed().as_secs_f64(),
            r.train_loss,
            r.train_acc,
            r.test_acc
        )
    })?;
    let (preds, _) = ct_fusion::train::predict_dataset(&model, &test, 16)?;
    let (mut hits, mut correct) = (0, 0);
    for (s, &p) in test.samples.iter().zip(&preds) {
        if p != s.label {
            continue;
        }
        correct += 1;
        let h = gradcam_heatmap(&model, &s.image, p, layer)?;
        let (mut inside, mut ni, mut outside, mut no) = (0.0, 0, 0.0, 0);
        for y in 0..h.height() {
            for x in 0..h.width() {
                let v = h.at(y, x) as f64;
                if s.lesions.iter().any(|d| d.contains(x as f64, y as f64)) {
                    inside += v;
                    ni += 1;
                } else {
                    outside += v;
                    no += 1;
                }
            }
        }
        if inside / ni as f64 > outside / no as f64 {
            hits += 1;
        }
    }
    println!("localised {hits}/{correct}");
    Ok(())
}
