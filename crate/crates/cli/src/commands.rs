use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use ct_fusion::config::{load_run_config, RunConfig};
use ct_fusion::data::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use ct_fusion::data::{generate_synthetic, load_image_folder, read_pnm, resize_bilinear, write_dataset, Dataset};
use ct_fusion::explain::{attention_heatmap, export_heatmap, gradcam_heatmap, CamLayer};
use ct_fusion::export::{ablation_csv, history_csv, metrics_csv, metrics_json, sig6, to_json};
use ct_fusion::gradsuite::{run_suite, TOLERANCE};
use ct_fusion::metrics::argmax;
use ct_fusion::model::Model;
use ct_fusion::tensor::Real;
use ct_fusion::train::{evaluate, run_ablation, split_dataset, train_loop, AblationSpec, OptimizerState, Precision};
use ct_fusion::{Error, Tensor};

use crate::{AblateArgs, EvalArgs, ExplainArgs, Format, GradcheckArgs, Layer, Method, PredictArgs, SynthArgs, Table, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
    /// The command ran but its check did not pass.
    Failed(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Run(Error::Argument(_)) => 1,
            CliError::Run(_) | CliError::Failed(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

type CliResult = Result<(), CliError>;

/// Runs `$body` with `$t` bound to the scalar type of `$precision`.
macro_rules! at_precision {
    ($precision:expr, $t:ident => $body:expr) => {
        match $precision {
            Precision::F32 => {
                type $t = f32;
                $body
            }
            Precision::F64 => {
                type $t = f64;
                $body
            }
        }
    };
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Error> {
    fs::write(path, contents).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn create_dir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn run_config(path: Option<&Path>, lenient: bool) -> Result<RunConfig, Error> {
    match path {
        Some(p) => Ok(load_run_config(p, !lenient)?.0),
        None => Ok(RunConfig::default()),
    }
}

fn report_skipped(skipped: &[(PathBuf, String)]) {
    if !skipped.is_empty() {
        eprintln!("skipped {} unreadable file(s)", skipped.len());
    }
}

fn check_classes(ds: &Dataset, names: &[String]) -> Result<(), Error> {
    if ds.class_names != names {
        return Err(Error::Data(format!(
            "dataset classes {:?} do not match the checkpoint's {:?}",
            ds.class_names, names
        )));
    }
    Ok(())
}

pub fn train(a: &TrainArgs) -> CliResult {
    let mut run = run_config(a.config.as_deref(), a.lenient)?;
    if let Some(e) = a.epochs {
        run.train.epochs = e;
    }
    if let Some(s) = a.seed {
        run.train.seed = s;
    }
    if let Some(d) = &a.data {
        run.data.path = Some(d.clone());
    }
    if let Some(o) = &a.out {
        run.output = Some(o.clone());
    }
    run.validate()?;
    let out = run.output.clone().ok_or_else(|| CliError::Usage("no output directory: pass --out or set `output`".into()))?;
    let (ds, skipped) = run.dataset(None)?;
    report_skipped(&skipped);
    let (train_set, test_set) = split_dataset(&ds, run.train.split_ratio, run.train.seed)?;
    create_dir(&out)?;
    write(&out.join("config.toml"), run.to_toml()?)?;
    at_precision!(run.train.precision, T => {
        let mut model = Model::<T>::new(&run.model, &run.toggles, &ds.class_names, run.train.seed)?;
        let mut state = OptimizerState::new(&model.params);
        let history = train_loop(&mut model, &train_set, &test_set, &run.train, &mut state, |_| {})?;
        save_checkpoint(&out.join("checkpoint.ctcp"), &model, Some(&state), &run)?;
        write(&out.join("history.csv"), history_csv(&history))?;
        write(&out.join("history.json"), to_json(&history)?)?;
        let m = evaluate(&model, &test_set, run.train.batch_size)?;
        write(&out.join("metrics.json"), metrics_json(&m, &ds.class_names)?)?;
        println!("test accuracy {} on {} samples; wrote {}", sig6(m.accuracy), m.total, out.display());
    });
    Ok(())
}

fn load(path: &Path) -> Result<Checkpoint<f32>, Error> {
    load_checkpoint::<f32>(path)
}

pub fn eval(a: &EvalArgs) -> CliResult {
    let cp = load(&a.checkpoint)?;
    let names = cp.model.class_names().to_vec();
    let ds = match &a.data {
        Some(root) => {
            let load = load_image_folder(root, cp.run.model.image_size)?;
            report_skipped(&load.skipped);
            load.dataset
        }
        None => {
            let (full, skipped) = cp.run.dataset(None)?;
            report_skipped(&skipped);
            split_dataset(&full, cp.run.train.split_ratio, cp.run.train.seed)?.1
        }
    };
    check_classes(&ds, &names)?;
    let batch = cp.run.train.batch_size;
    let m = at_precision!(cp.run.train.precision, T => evaluate(&cp.model.cast::<T>(), &ds, batch)?);
    let (name, doc) = match a.format {
        Format::Json => ("metrics.json", metrics_json(&m, &names)?),
        Format::Csv => ("metrics.csv", metrics_csv(&m, &names)),
    };
    match &a.out {
        Some(dir) => {
            create_dir(dir)?;
            write(&dir.join(name), doc)?;
            println!("accuracy {} on {} samples", sig6(m.accuracy), m.total);
        }
        None => print!("{doc}"),
    }
    Ok(())
}

fn read_image(path: &Path, size: usize) -> Result<Tensor<f32>, Error> {
    let bytes = fs::read(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    resize_bilinear(&read_pnm(&bytes)?, size, size)
}

fn predict_one<T: Real>(model: &Model<T>, image: &Tensor<f32>) -> Result<Vec<f64>, Error> {
    let s = image.shape();
    let batch = image.clone().reshaped(&[1, s[0], s[1], s[2]])?.cast::<T>();
    let probs = model.predict(&batch)?;
    Ok(probs.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())
}

pub fn predict(a: &PredictArgs) -> CliResult {
    let cp = load(&a.checkpoint)?;
    let size = cp.run.model.image_size;
    at_precision!(cp.run.train.precision, T => {
        let model = cp.model.cast::<T>();
        for path in &a.images {
            let probs = predict_one(&model, &read_image(path, size)?)?;
            let k = argmax(&probs);
            println!("{}\t{}\t{}", path.display(), model.class_names()[k], sig6(probs[k]));
        }
    });
    Ok(())
}

fn explain_one<T: Real>(model: &Model<T>, a: &ExplainArgs, image: &Tensor<f32>, stem: &str) -> Result<String, Error> {
    let h = match a.method {
        Method::Attention => attention_heatmap(model, image)?,
        Method::Gradcam => {
            let class = match a.class_index {
                Some(c) => c,
                None => argmax(&predict_one(model, image)?),
            };
            let layer = match a.layer {
                Layer::Fused => CamLayer::Fused,
                Layer::Local => CamLayer::Local,
            };
            gradcam_heatmap(model, image, class, layer)?
        }
    };
    let (heat, over) = export_heatmap(&h, image, &a.out, stem)?;
    Ok(format!("{}\t{}", heat.display(), over.display()))
}

pub fn explain(a: &ExplainArgs) -> CliResult {
    let cp = load(&a.checkpoint)?;
    let size = cp.run.model.image_size;
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    let jobs: Vec<(Tensor<f32>, String)> = match &a.data {
        Some(root) => {
            let load = load_image_folder(root, size)?;
            report_skipped(&load.skipped);
            let ds = load.dataset;
            ds.samples
                .into_iter()
                .map(|s| {
                    let name = format!("{}_{}", ds.class_names[s.label], stem(Path::new(&s.source)));
                    (s.image, name)
                })
                .collect()
        }
        None if a.images.is_empty() => return Err(CliError::Usage("explain needs --image or --data".into())),
        None => a.images.iter().map(|p| Ok((read_image(p, size)?, stem(p)))).collect::<Result<_, Error>>()?,
    };
    create_dir(&a.out)?;
    let lines = at_precision!(cp.run.train.precision, T => {
        let model = cp.model.cast::<T>();
        jobs.par_iter().map(|(img, stem)| explain_one(&model, a, img, stem)).collect::<Result<Vec<_>, Error>>()?
    });
    for line in lines {
        println!("{line}");
    }
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> CliResult {
    let mut run = run_config(a.config.as_deref(), a.lenient)?;
    if let Some(e) = a.epochs {
        run.train.epochs = e;
    }
    run.validate()?;
    let specs: Vec<AblationSpec> = match a.table {
        Table::Modules => vec![AblationSpec::modules()],
        Table::AffmBranches => vec![AblationSpec::affm_branches()],
        Table::FebAttention => vec![AblationSpec::feb_attention()],
        Table::All => AblationSpec::NAMES.iter().filter_map(|n| AblationSpec::by_name(n)).collect(),
    };
    let (ds, skipped) = run.dataset(a.data.as_deref())?;
    report_skipped(&skipped);
    let (train_set, test_set) = split_dataset(&ds, run.train.split_ratio, run.train.seed)?;
    if let Some(dir) = &a.out {
        create_dir(dir)?;
    }
    for spec in &specs {
        let table = at_precision!(run.train.precision, T => run_ablation::<T>(&run.model, &run.train, spec, &train_set, &test_set, |r| {
            log::info!("{}: accuracy {}", r.name, sig6(r.accuracy));
        })?);
        let (ext, doc) = match a.format {
            Format::Csv => ("csv", ablation_csv(&table)),
            Format::Json => ("json", to_json(&table)?),
        };
        match &a.out {
            Some(dir) => write(&dir.join(format!("ablation_{}.{ext}", table.title)), doc)?,
            None => {
                println!("# {}", table.title);
                print!("{doc}");
            }
        }
    }
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> CliResult {
    if a.seeds == 0 || a.per_tensor == 0 {
        return Err(CliError::Usage("--seeds and --per-tensor must be positive".into()));
    }
    let results = run_suite(0..a.seeds, a.per_tensor)?;
    let mut worst = 0.0f64;
    for r in &results {
        worst = worst.max(r.report.max_rel_err);
        if !r.passed() {
            println!("FAIL {} seed {}: max relative error {:e}", r.name, r.seed, r.report.max_rel_err);
        }
    }
    let coords: usize = results.iter().map(|r| r.report.checked).sum();
    println!("{} checks, {coords} coordinates, max relative error {worst:e}", results.len());
    if results.iter().all(|r| r.passed()) {
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient check failed: max relative error {worst:e} >= {TOLERANCE:e}")))
    }
}

pub fn synth(a: &SynthArgs) -> CliResult {
    let ds = generate_synthetic(a.classes, a.per_class, a.size, a.seed)?;
    write_dataset(&ds, &a.out)?;
    println!("wrote {} images in {} classes to {}", ds.len(), ds.num_classes(), a.out.display());
    Ok(())
}
