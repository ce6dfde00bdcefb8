//! Grid of k-series variants against scripts of different UTF-8 widths.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::trainer::{evaluate_bleu, train};
use crate::data::{gen_synthetic, Script, Task};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::msc::ScaleVariant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalesConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: Task,
    pub scripts: Vec<Script>,
    pub variants: Vec<ScaleVariant>,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub beam: usize,
    pub seed: u64,
}

impl Default for ScalesConfig {
    fn default() -> Self {
        ScalesConfig {
            model: ModelConfig::desk(),
            train: TrainConfig {
                max_steps: Some(600),
                ..TrainConfig::desk()
            },
            task: Task::Cipher,
            scripts: Script::ALL.to_vec(),
            variants: ScaleVariant::ALL.to_vec(),
            train_size: 2000,
            valid_size: 100,
            test_size: 100,
            beam: 1,
            seed: 1,
        }
    }
}

impl ScalesConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.scripts.is_empty() || self.variants.is_empty() {
            return Err(Error::Config(
                "scales needs at least one script and one variant".into(),
            ));
        }
        if self.train_size == 0 || self.valid_size == 0 || self.test_size == 0 || self.beam == 0 {
            return Err(Error::Config(
                "corpus sizes and beam must be positive".into(),
            ));
        }
        for &v in &self.variants {
            self.cell_model(v).validate()?;
        }
        Ok(())
    }

    fn cell_model(&self, variant: ScaleVariant) -> ModelConfig {
        let mut model = ModelConfig {
            k_series: variant.kseries(),
            ..self.model.clone()
        };
        if model.msc_layers.is_empty() {
            model.msc_layers = vec![0];
        }
        model
    }

    /// Corpus seeds depend only on the script, so every variant of a row
    /// sees the same data.
    fn corpus_seed(&self, row: usize, split: u64) -> u64 {
        self.seed
            .wrapping_mul(1_000_003)
            .wrapping_add(100 * row as u64 + split)
    }
}

/// BLEU per (script, variant) cell; failed cells keep their error text.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub scripts: Vec<Script>,
    pub variants: Vec<ScaleVariant>,
    pub cells: Vec<Vec<std::result::Result<f64, String>>>,
}

impl ScoreMatrix {
    /// Column of the highest score in `row`; ties go to the first.
    pub fn best(&self, row: usize) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (j, cell) in self.cells[row].iter().enumerate() {
            if let Ok(v) = cell {
                if best.is_none_or(|(_, b)| *v > b) {
                    best = Some((j, *v));
                }
            }
        }
        best.map(|(j, _)| j)
    }

    /// Header of variant names, one row per script, the row maximum marked
    /// with `*` and failed cells shown as `ERR`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("script");
        for v in &self.variants {
            out.push('\t');
            out.push_str(v.name());
        }
        out.push('\n');
        for (i, script) in self.scripts.iter().enumerate() {
            out.push_str(script.name());
            let best = self.best(i);
            for (j, cell) in self.cells[i].iter().enumerate() {
                out.push('\t');
                match cell {
                    Ok(v) => {
                        out.push_str(&format!("{v:.2}"));
                        if best == Some(j) {
                            out.push('*');
                        }
                    }
                    Err(_) => out.push_str("ERR"),
                }
            }
            out.push('\n');
        }
        out
    }
}

fn run_cell(
    cfg: &ScalesConfig,
    row: usize,
    variant: ScaleVariant,
    out_dir: Option<&Path>,
) -> Result<f64> {
    let script = cfg.scripts[row];
    let train_set = gen_synthetic(cfg.task, script, cfg.train_size, cfg.corpus_seed(row, 1))?;
    let valid_set = gen_synthetic(cfg.task, script, cfg.valid_size, cfg.corpus_seed(row, 2))?;
    let test_set = gen_synthetic(cfg.task, script, cfg.test_size, cfg.corpus_seed(row, 3))?;
    let model = Model::build(cfg.cell_model(variant), cfg.seed)?;
    let cell_dir = out_dir.map(|d| d.join(format!("{}_{}", script.name(), variant.name())));
    let outcome = train(
        model,
        &train_set,
        &valid_set,
        &cfg.train,
        cell_dir.as_deref(),
    )?;
    evaluate_bleu(&outcome.model, &test_set, cfg.beam)
}

/// Trains and scores every cell in turn. A failing cell is logged and
/// recorded without stopping the others.
pub fn scales_experiment(cfg: &ScalesConfig, out_dir: Option<&Path>) -> Result<ScoreMatrix> {
    cfg.validate()?;
    let mut cells = Vec::with_capacity(cfg.scripts.len());
    for (row, script) in cfg.scripts.iter().enumerate() {
        let mut scores = Vec::with_capacity(cfg.variants.len());
        for &variant in &cfg.variants {
            log::info!("scales cell {} / {}", script.name(), variant.name());
            let cell = run_cell(cfg, row, variant, out_dir).map_err(|e| {
                log::error!("cell {} / {} failed: {e}", script.name(), variant.name());
                e.to_string()
            });
            scores.push(cell);
        }
        cells.push(scores);
    }
    Ok(ScoreMatrix {
        scripts: cfg.scripts.clone(),
        variants: cfg.variants.clone(),
        cells,
    })
}
