use serde::{Deserialize, Serialize};

use super::{evaluate, train_loop, OptimizerState, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{FebKind, Model, ModelConfig, SeqBranch, Toggles};
use crate::tensor::Real;

/// Named toggle configurations trained and evaluated under one seed/split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub title: String,
    pub rows: Vec<(String, Toggles)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub accuracy: f64,
    /// Macro averages.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub title: String,
    pub rows: Vec<AblationRow>,
}

impl AblationSpec {
    /// Progressive module study: single branches, dual branch, fusion, text.
    pub fn modules() -> Self {
        let off = Toggles { text: false, feb: false, affm: false, ..Toggles::full() };
        let rows = vec![
            ("cnn", Toggles { vit: false, adapter: false, ..off.clone() }),
            ("vit_no_adapter", Toggles { cnn: false, adapter: false, ..off.clone() }),
            ("vit", Toggles { cnn: false, ..off.clone() }),
            ("cnn+vit", off.clone()),
            ("cnn+vit+affm", Toggles { affm: true, ..off.clone() }),
            ("text+cnn+vit+feb", Toggles { text: true, feb: true, ..off }),
            ("full", Toggles::full()),
        ];
        Self::named("modules", rows)
    }

    /// Fusion-module branches: convolution only, with V-LSTM, with a
    /// transformer branch, and V-LSTM with dynamic weights.
    pub fn affm_branches() -> Self {
        let base = Toggles::full();
        let rows = vec![
            ("cnn", Toggles { seq_branch: SeqBranch::None, dam: false, ..base.clone() }),
            ("cnn+vlstm", Toggles { seq_branch: SeqBranch::Vlstm, dam: false, ..base.clone() }),
            ("cnn+vit", Toggles { seq_branch: SeqBranch::Attention, dam: false, ..base.clone() }),
            ("cnn+vlstm+dam", base),
        ];
        Self::named("affm_branches", rows)
    }

    /// Attention kind inside the enhancer block.
    pub fn feb_attention() -> Self {
        let base = Toggles::full();
        let rows = vec![
            ("cnn", Toggles { feb_kind: FebKind::Conv, ..base.clone() }),
            ("cross_attention", Toggles { feb_kind: FebKind::Cross, ..base.clone() }),
            ("bi_multihead", base),
        ];
        Self::named("feb_attention", rows)
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "modules" => Some(Self::modules()),
            "affm_branches" => Some(Self::affm_branches()),
            "feb_attention" => Some(Self::feb_attention()),
            _ => None,
        }
    }

    pub const NAMES: [&'static str; 3] = ["modules", "affm_branches", "feb_attention"];

    fn named(title: &str, rows: Vec<(&str, Toggles)>) -> Self {
        Self { title: title.into(), rows: rows.into_iter().map(|(n, t)| (n.to_string(), t)).collect() }
    }

    /// Rejects duplicate names and invalid toggles before anything trains.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for (i, (name, toggles)) in self.rows.iter().enumerate() {
            if self.rows[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::Config(format!("ablation row name {name:?} is used twice")));
            }
            toggles
                .validate()
                .and_then(|_| cfg.validate(toggles))
                .map_err(|e| Error::Config(format!("ablation row {name:?}: {e}")))?;
        }
        Ok(())
    }
}

/// Trains every row from the same seed on the same split and reports test
/// accuracy plus macro precision / recall / F1.
pub fn run_ablation<T: Real>(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    spec: &AblationSpec,
    train: &Dataset,
    test: &Dataset,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<AblationTable> {
    spec.validate(model_cfg)?;
    train_cfg.validate()?;
    let mut rows = Vec::with_capacity(spec.rows.len());
    for (name, toggles) in &spec.rows {
        log::info!("ablation {}: training {name}", spec.title);
        let mut model = Model::<T>::new(model_cfg, toggles, &train.class_names, train_cfg.seed)?;
        let mut state = OptimizerState::new(&model.params);
        train_loop(&mut model, train, test, train_cfg, &mut state, |_| {})?;
        let m = evaluate(&model, test, train_cfg.batch_size)?;
        let row = AblationRow {
            name: name.clone(),
            accuracy: m.accuracy,
            precision: m.macro_avg.precision,
            recall: m.macro_avg.recall,
            f1: m.macro_avg.f1,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(AblationTable { title: spec.title.clone(), rows })
}
