//! Acceptance run: one PASS/FAIL line per criterion. Exits non-zero if any
//! criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ct_fusion::data::checkpoint::{decode_checkpoint, encode_checkpoint};
use ct_fusion::data::{generate_synthetic, Dataset, Sample};
use ct_fusion::explain::{attention_heatmap, export_heatmap, gradcam_heatmap, CamLayer};
use ct_fusion::export::history_csv;
use ct_fusion::gradsuite::{run_suite, TOLERANCE};
use ct_fusion::metrics::MetricsReport;
use ct_fusion::model::{Model, ModelConfig, SeqBranch, Toggles};
use ct_fusion::nn::{Adapter, Ctx, Mode, MultiHeadAttention, ParamBuilder, ParamKind, ParamStore};
use ct_fusion::train::{
    cross_entropy, evaluate, predict_dataset, run_ablation, split_dataset, train_loop, AblationSpec, AblationTable,
    History, OptimizerState, TrainConfig,
};
use ct_fusion::{Tape, Tensor};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class{i}")).collect()
}

fn row_sum_error(values: &[f64], row: usize) -> f64 {
    values.chunks(row).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

/// Seeds batch-norm running statistics with one train-mode pass so that
/// eval mode is available.
fn warm<T: ct_fusion::tensor::Real>(m: &mut Model<T>, images: &Tensor<T>) {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &m.params, Mode::Train);
    m.forward(&ctx, &tape.constant(images.clone())).unwrap();
    let ups = ctx.take_bn_updates();
    drop(ctx);
    m.params.apply_bn_updates(&ups, 1.0);
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let results = run_suite(0..10, 64).map_err(e)?;
    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.report.max_rel_err).fold(0.0, f64::max);
    let coords: usize = results.iter().map(|r| r.report.checked).sum();
    let failing: Vec<String> = results.iter().filter(|r| !r.passed()).map(|r| format!("{}@{}", r.name, r.seed)).collect();
    let primitives: std::collections::BTreeSet<&str> = results.iter().map(|r| r.name.as_str()).collect();
    let summary = format!(
        "{} checks over 10 seeds ({} kinds incl. micro model), {coords} coords, max rel err {worst:.2e}, {secs:.1}s",
        results.len(),
        primitives.len()
    );
    ensure(failing.is_empty(), format!("{summary}; failing: {}", failing.join(", ")))?;
    ensure(worst < TOLERANCE, summary.clone())?;
    ensure(primitives.contains("micro_model"), "micro model check missing")?;
    ensure(secs < 120.0, format!("{summary}: over the 2 minute budget"))?;
    Ok(summary)
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let seq = [SeqBranch::Vlstm, SeqBranch::Attention];
    for trial in 0..6 {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let channels = heads * [2, 4][rng.random_range(0..2)];
        let feb_heads = [1, 2][rng.random_range(0..2)];
        let cfg = ModelConfig {
            image_size: [16, 24, 32][rng.random_range(0..3)],
            channels,
            heads,
            feb_dim: feb_heads * rng.random_range(2..5),
            feb_heads,
            cls_hidden: rng.random_range(4..12),
            adapter_r: rng.random_range(1..4),
            ..ModelConfig::micro()
        };
        let k = rng.random_range(2..7);
        let b = rng.random_range(1..4);
        let toggles = Toggles { seq_branch: seq[trial % 2], ..Toggles::full() };
        let m = Model::<f64>::new(&cfg, &toggles, &names(k), trial as u64).map_err(e)?;
        let images = Tensor::from_fn(&[b, 3, cfg.image_size, cfg.image_size], |_| rng.random_range(0.0..1.0));
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &m.params, Mode::Train);
        let out = m.forward(&ctx, &tape.constant(images)).map_err(e)?;
        let n = cfg.grid() * cfg.grid();
        let dam = out.dam.ok_or("no DAM output")?;
        ensure(dam.shape() == vec![b, 2], format!("DAM shape {:?}, expected [{b}, 2]", dam.shape()))?;
        let a_v = out.a_v.ok_or("no A_v")?;
        let a_l = out.a_l.ok_or("no A_l")?;
        ensure(a_v.shape() == vec![b, feb_heads, n, k], format!("A_v shape {:?}", a_v.shape()))?;
        ensure(a_l.shape() == vec![b, feb_heads, k, n], format!("A_l shape {:?}", a_l.shape()))?;
        let mut rows = vec![(dam.value().data().to_vec(), 2), (a_v.value().data().to_vec(), k), (a_l.value().data().to_vec(), n)];
        rows.push((out.probs.value().data().to_vec(), k));
        let tokens = cfg.patches_per_side().pow(2) + 1;
        for a in &out.global_attention {
            rows.push((a.value().data().to_vec(), tokens));
        }
        for (values, width) in rows {
            worst = worst.max(row_sum_error(&values, width));
            checked += values.len() / width;
        }
    }
    // encoder self-attention with padded keys, as in the text encoder
    for trial in 0..6u64 {
        let heads = rng.random_range(1..4);
        let dim = heads * rng.random_range(2..6);
        let (b, t) = (rng.random_range(1..4), rng.random_range(2..9));
        let mut store = ParamStore::<f64>::new();
        let mha = MultiHeadAttention::build(&mut ParamBuilder::new(&mut store, trial), "mha", dim, heads).map_err(e)?;
        let pad: Vec<bool> = (0..b * t).map(|i| i % t != 0 && rng.random_bool(0.3)).collect();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Train);
        let x = tape.constant(Tensor::from_fn(&[b, t, dim], |_| rng.random_range(-2.0..2.0)));
        let (_, attn) = mha.forward(&ctx, &x, Some(&pad)).map_err(e)?;
        let a = attn.value();
        worst = worst.max(row_sum_error(a.data(), t));
        checked += a.numel() / t;
    }
    ensure(worst < 1e-6, format!("max row-sum deviation {worst:.2e}"))?;
    Ok(format!("{checked} softmax rows on random shapes, max |sum - 1| = {worst:.1e}; DAM is (B, 2)"))
}

fn criterion_3() -> Outcome {
    // alpha = 0 is the identity, bit for bit
    let mut store = ParamStore::<f64>::new();
    let zero = Adapter::build(&mut ParamBuilder::new(&mut store, 3), "a0", 64, 16, 0.0).map_err(e)?;
    let ad = Adapter::build(&mut ParamBuilder::new(&mut store, 4), "a1", 64, 16, 0.2).map_err(e)?;
    // make the bottleneck non-trivial so the identity is not an accident of zero init
    let up = zero.up.w;
    *store.value_mut(up) = Tensor::from_fn(&[16, 64], |i| ((i as f64) * 0.31).sin());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_fn(&[2, 5, 64], |_| rng.random_range(-3.0..3.0));
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Train);
    let y = zero.forward(&ctx, &tape.constant(x.clone())).map_err(e)?;
    let identical = y.value().data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(identical, "alpha = 0 adapter changed its input")?;

    // census: 2 * d * r + r + d
    let oracle = 2 * 64 * 16 + 16 + 64;
    let counted: usize = ad.ids().iter().map(|&id| store.value(id).numel()).sum();
    let trainable = ad.ids().iter().all(|&id| store.kind(id) == ParamKind::Trainable);
    ensure(counted == oracle && oracle == 2128, format!("adapter has {counted} scalars, expected {oracle}"))?;
    ensure(trainable, "adapter parameters are not all trainable")?;

    // frozen backbone: gradients exist exactly on adapters and post-encoder modules
    let toggles = Toggles { freeze_backbone: true, ..Toggles::full() };
    let cfg = ModelConfig { image_size: 32, ..ModelConfig::micro() };
    let mut m = Model::<f64>::new(&cfg, &toggles, &names(3), 5).map_err(e)?;
    let images = Tensor::from_fn(&[2, 3, 32, 32], |_| rng.random_range(0.0..1.0));
    warm(&mut m, &images);
    let expected = |name: &str| {
        let encoder = ["local.", "global.", "text."].iter().any(|p| name.starts_with(p));
        !encoder || name.contains("adapter")
    };
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &m.params, Mode::Train);
    let out = m.forward(&ctx, &tape.constant(images.clone())).map_err(e)?;
    cross_entropy(&out.probs, &[0, 2]).map_err(e)?.backward().map_err(e)?;
    let (mut with_grad, mut wrong) = (0usize, Vec::new());
    for id in m.params.ids() {
        let entry = m.params.entry(id);
        if entry.kind == ParamKind::Buffer {
            continue;
        }
        let present = ctx.grad(id).is_some();
        if present != expected(&entry.name) {
            wrong.push(entry.name.clone());
        }
        with_grad += present as usize;
    }
    drop(ctx);
    ensure(wrong.is_empty(), format!("unexpected gradient presence on {wrong:?}"))?;
    let adapters = m.params.entries().iter().filter(|p| p.name.contains("adapter")).count();

    // one optimiser epoch: deltas only where gradients are allowed
    let before = m.params.clone();
    let ds = generate_synthetic(3, 5, 32, 9).map_err(e)?;
    let (train, test) = split_dataset(&ds, 0.8, 9).map_err(e)?;
    let cfg = TrainConfig { epochs: 1, batch_size: 4, learning_rate: 1e-3, ..TrainConfig::desk() };
    let mut state = OptimizerState::new(&m.params);
    train_loop(&mut m, &train, &test, &cfg, &mut state, |_| {}).map_err(e)?;
    let mut moved_wrong = Vec::new();
    let mut moved = 0;
    for (old, new) in before.entries().iter().zip(m.params.entries()) {
        if old.kind == ParamKind::Buffer {
            continue;
        }
        let changed = old.value != new.value;
        moved += changed as usize;
        if changed && !expected(&old.name) {
            moved_wrong.push(old.name.clone());
        }
    }
    ensure(moved_wrong.is_empty(), format!("frozen parameters moved: {moved_wrong:?}"))?;
    Ok(format!(
        "alpha=0 bit-exact; adapter census {counted} = 2128; frozen backbone: {with_grad} tensors with grads ({adapters} adapter), {moved} moved, none frozen"
    ))
}

fn criterion_4() -> Outcome {
    let cfg = ModelConfig::default();
    let mut m = Model::<f64>::new(&cfg, &Toggles::full(), &names(7), 4).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let images = Tensor::from_fn(&[3, 3, 64, 64], |_| rng.random_range(0.0..1.0));
    warm(&mut m, &images);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &m.params, Mode::Eval);
    let out = m.forward(&ctx, &tape.constant(images.clone())).map_err(e)?;
    let width = out.fusion.shape()[1];
    let (dv, dl) = (cfg.channels, m.net.head.dl);
    ensure(width == dv + dl, format!("fusion width {width} != {dv} + {dl}"))?;
    ensure(out.probs.shape() == vec![3, 7], format!("probs shape {:?}", out.probs.shape()))?;
    let base = out.probs.value().as_ref().clone();
    drop(ctx);

    let rows: Vec<Vec<usize>> = m.prompt_ids.chunks(cfg.text_len).map(<[usize]>::to_vec).collect();
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let mut order: Vec<usize> = (0..rows.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut permuted = m.clone();
        permuted.prompt_ids = order.iter().flat_map(|&i| rows[i].clone()).collect();
        let p = permuted.predict(&images).map_err(e)?;
        worst = worst.max(p.max_abs_diff(&base));
    }
    ensure(worst < 1e-6, format!("prompt permutation moved probabilities by {worst:.2e}"))?;
    Ok(format!("fusion width {width} = {dv} + {dl}; K = 7 probabilities; 5 prompt permutations, max |dp| = {worst:.1e}"))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for set in 0..100 {
        let k = rng.random_range(2..9);
        let n = rng.random_range(1..200);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = labels.iter().map(|&y| if rng.random_bool(0.6) { y } else { rng.random_range(0..k) }).collect();
        let m = MetricsReport::from_predictions(&pred, &labels, k).map_err(e)?;
        // brute force: one-vs-rest counts summed over classes
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for c in 0..k {
            for (&p, &y) in pred.iter().zip(&labels) {
                match (p == c, y == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
        }
        let acc = pred.iter().zip(&labels).filter(|(p, y)| p == y).count() as f64 / n as f64;
        let (p, r) = (tp as f64 / (tp + fp) as f64, tp as f64 / (tp + fn_) as f64);
        let f1 = 2.0 * p * r / (p + r).max(f64::MIN_POSITIVE);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
        ensure(close(m.accuracy, acc), format!("set {set}: accuracy {} vs {acc}", m.accuracy))?;
        let mi = m.micro_avg;
        ensure(
            close(mi.precision, acc) && close(mi.recall, acc) && close(mi.f1, acc) && close(p, acc) && close(r, acc) && close(f1, acc),
            format!("set {set}: micro {mi:?} vs accuracy {acc}"),
        )?;
    }
    let hand = ct_fusion::metrics::Prf::from_counts(8, 2, 2);
    ensure(
        hand.precision == 0.8 && hand.recall == 0.8 && hand.f1 == 0.8,
        format!("TP=8 FP=2 FN=2 gave {hand:?}"),
    )?;
    Ok("100 random sets: micro P = R = F1 = accuracy (brute force); TP=8,FP=2,FN=2 -> 0.8 exactly".into())
}

struct Trained {
    model: Model<f32>,
    test: Dataset,
    history: History,
}

fn criterion_6(slot: &mut Option<Trained>) -> Outcome {
    let cfg = TrainConfig { seed: 1, ..TrainConfig::desk() };
    let ds = generate_synthetic(7, 50, 64, 1).map_err(e)?;
    let (train, test) = split_dataset(&ds, 0.8, cfg.seed).map_err(e)?;
    ensure(train.len() == 280 && test.len() == 70, format!("split {} / {}", train.len(), test.len()))?;
    let start = Instant::now();
    let mut model = Model::<f32>::new(&ModelConfig::default(), &Toggles::full(), &ds.class_names, cfg.seed).map_err(e)?;
    let mut state = OptimizerState::new(&model.params);
    let history = train_loop(&mut model, &train, &test, &cfg, &mut state, |_| {}).map_err(e)?;
    let secs = start.elapsed().as_secs_f64();
    let m = evaluate(&model, &test, cfg.batch_size).map_err(e)?;
    let summary = format!(
        "{} epochs, lr {:.0e} cosine, batch {}: test accuracy {:.4} ({}/{}), {secs:.0}s",
        cfg.epochs,
        cfg.learning_rate,
        cfg.batch_size,
        m.accuracy,
        (m.accuracy * m.total as f64).round(),
        m.total
    );
    *slot = Some(Trained { model, test, history });
    ensure(cfg.epochs <= 50 && (3.5e-5..=1e-3).contains(&cfg.learning_rate), "training budget outside the allowed range")?;
    ensure(m.accuracy >= 0.9, summary.clone())?;
    ensure(secs < 600.0, format!("{summary}: over 10 minutes"))?;
    Ok(summary)
}

fn criterion_7() -> Outcome {
    let model_cfg = ModelConfig { image_size: 32, ..ModelConfig::default() };
    let train_cfg = TrainConfig { epochs: 10, seed: 7, ..TrainConfig::desk() };
    let ds = generate_synthetic(7, 16, 32, 7).map_err(e)?;
    let (train, test) = split_dataset(&ds, 0.8, train_cfg.seed).map_err(e)?;
    let start = Instant::now();
    let mut tables: Vec<AblationTable> = Vec::new();
    for (spec, rows) in [(AblationSpec::modules(), 7), (AblationSpec::affm_branches(), 4), (AblationSpec::feb_attention(), 3)] {
        let t = run_ablation::<f32>(&model_cfg, &train_cfg, &spec, &train, &test, |_| {}).map_err(e)?;
        let complete = t.rows.len() == rows
            && t.rows.iter().zip(&spec.rows).all(|(r, (name, _))| &r.name == name)
            && t.rows.iter().all(|r| [r.accuracy, r.precision, r.recall, r.f1].iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        ensure(complete, format!("table {} incomplete: {:?}", t.title, t.rows))?;
        tables.push(t);
    }
    let acc = |name: &str| tables[0].rows.iter().find(|r| r.name == name).map(|r| r.accuracy).unwrap_or(f64::NAN);
    let (full, vit_plain) = (acc("full"), acc("vit_no_adapter"));
    let soft = if full >= vit_plain { "holds" } else { "does not hold (reported, not gated)" };
    for t in &tables {
        let cells: Vec<String> = t.rows.iter().map(|r| format!("{}={:.3}", r.name, r.accuracy)).collect();
        println!("      {}: {}", t.title, cells.join(" "));
    }
    Ok(format!(
        "tables of 7/4/3 rows complete in {:.0}s; soft check full {full:.3} >= vit_no_adapter {vit_plain:.3} {soft}",
        start.elapsed().as_secs_f64()
    ))
}

fn inside_mask(sample: &Sample, size: usize) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    for d in &sample.lesions {
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 - d.cx, y as f64 - d.cy);
                if dx * dx + dy * dy <= d.r * d.r {
                    mask[y * size + x] = true;
                }
            }
        }
    }
    mask
}

fn criterion_8(trained: Option<&Trained>) -> Outcome {
    let t = trained.ok_or("needs the trained model from criterion 6")?;
    let (preds, _) = predict_dataset(&t.model, &t.test, 16).map_err(e)?;
    let (mut hits, mut correct) = (0usize, 0usize);
    for (s, &p) in t.test.samples.iter().zip(&preds) {
        if p != s.label {
            continue;
        }
        correct += 1;
        let h = gradcam_heatmap(&t.model, &s.image, p, CamLayer::Fused).map_err(e)?;
        let size = h.width();
        let mask = inside_mask(s, size);
        let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
        for (v, &inside) in h.values.data().iter().zip(&mask) {
            if inside {
                si += *v as f64;
                ni += 1;
            } else {
                so += *v as f64;
                no += 1;
            }
        }
        if ni > 0 && no > 0 && si / ni as f64 > so / no as f64 {
            hits += 1;
        }
    }
    ensure(correct > 0, "no correctly classified test images")?;
    let rate = hits as f64 / correct as f64;

    // exports twice into separate directories must match byte for byte
    let dirs = [tempfile::tempdir().map_err(e)?, tempfile::tempdir().map_err(e)?];
    let mut files = 0;
    for (n, s) in t.test.samples.iter().take(3).enumerate() {
        for method in ["attention", "gradcam"] {
            let stem = format!("{n}_{method}");
            for d in &dirs {
                let h = if method == "attention" {
                    attention_heatmap(&t.model, &s.image)
                } else {
                    gradcam_heatmap(&t.model, &s.image, s.label, CamLayer::Fused)
                }
                .map_err(e)?;
                export_heatmap(&h, &s.image, d.path(), &stem).map_err(e)?;
            }
            for kind in ["heatmap", "overlay"] {
                let file = format!("{stem}_{kind}.ppm");
                let a = std::fs::read(dirs[0].path().join(&file)).map_err(e)?;
                let b = std::fs::read(dirs[1].path().join(&file)).map_err(e)?;
                ensure(a == b, format!("{file} differs between runs"))?;
                files += 1;
            }
        }
    }
    let summary = format!("Grad-CAM localises {hits}/{correct} correct test images ({:.1}%); {files} exported files byte-identical across two runs", 100.0 * rate);
    ensure(rate >= 0.7, summary.clone())?;
    Ok(summary)
}

fn criterion_9(trained: Option<&Trained>) -> Outcome {
    let t = trained.ok_or("needs the trained model from criterion 6")?;
    let run = ct_fusion::config::RunConfig::default();
    let bytes = encode_checkpoint(&t.model, None, &run).map_err(e)?;
    let restored = decode_checkpoint::<f32>(&bytes).map_err(e)?.model;
    let before = evaluate(&t.model, &t.test, 16).map_err(e)?;
    let after = evaluate(&restored, &t.test, 16).map_err(e)?;
    ensure(before == after, "metrics changed after a checkpoint round trip")?;
    let (_, p0) = predict_dataset(&t.model, &t.test, 16).map_err(e)?;
    let (_, p1) = predict_dataset(&restored, &t.test, 16).map_err(e)?;
    let bits = |p: &[Vec<f64>]| p.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(bits(&p0) == bits(&p1), "probabilities changed after a checkpoint round trip")?;
    ensure(!t.history.epochs.is_empty(), "empty history")?;

    // two full f64 runs from the same seed
    let cfg = ModelConfig { image_size: 32, channels: 16, heads: 2, feb_dim: 16, feb_heads: 2, cls_hidden: 16, adapter_r: 4, ..ModelConfig::default() };
    let train_cfg = TrainConfig { epochs: 4, batch_size: 8, seed: 11, precision: ct_fusion::train::Precision::F64, ..TrainConfig::desk() };
    let ds = generate_synthetic(3, 8, 32, 11).map_err(e)?;
    let (train, test) = split_dataset(&ds, 0.8, train_cfg.seed).map_err(e)?;
    let once = || -> Result<String, String> {
        let mut m = Model::<f64>::new(&cfg, &Toggles::full(), &ds.class_names, train_cfg.seed).map_err(e)?;
        let mut state = OptimizerState::new(&m.params);
        let h = train_loop(&mut m, &train, &test, &train_cfg, &mut state, |_| {}).map_err(e)?;
        let raw: Vec<u64> = h.epochs.iter().flat_map(|r| [r.lr, r.train_loss, r.train_acc, r.test_acc]).map(f64::to_bits).collect();
        Ok(format!("{}{raw:?}", history_csv(&h)))
    };
    let (a, b) = (once()?, once()?);
    ensure(a == b, "two f64 runs with the same seed produced different histories")?;
    Ok(format!(
        "checkpoint ({} bytes) round trip: metrics and probabilities bit-identical; two f64 runs: identical history",
        bytes.len()
    ))
}

fn main() {
    let mut trained = None;
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut go = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match &outcome {
            Ok(msg) => println!("PASS [{id}] {name}: {msg} [{secs:.1}s]"),
            Err(msg) => println!("FAIL [{id}] {name}: {msg} [{secs:.1}s]"),
        }
        results.push((id, name, outcome, secs));
    };
    go(1, "gradient oracle suite", &mut criterion_1);
    go(2, "stochasticity invariants", &mut criterion_2);
    go(3, "adapter contracts", &mut criterion_3);
    go(4, "fusion head contract", &mut criterion_4);
    go(5, "metrics identities", &mut criterion_5);
    go(6, "toy training", &mut || criterion_6(&mut trained));
    go(7, "ablation harness", &mut criterion_7);
    go(8, "explainability", &mut || criterion_8(trained.as_ref()));
    go(9, "persistence and determinism", &mut || criterion_9(trained.as_ref()));
    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
