use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, train_integrated, CtrModel, IntegrationConfig, ModelConfig, TrainConfig, TABLE_ROWS};
use crate::backbone::BackboneKind;
use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::pretrain::{pretrain, PretrainConfig, PretrainMode, PretrainedModel};

/// Which cells of the matrix to run and how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub rows: Vec<usize>,
    pub backbones: Vec<BackboneKind>,
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    /// `seed` is replaced by each run's seed.
    pub train: TrainConfig,
    /// `mode` and `seed` are replaced per pre-training job.
    pub pretrain: PretrainConfig,
    /// When set, every trained CTR model is saved here.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            rows: (1..=TABLE_ROWS).collect(),
            backbones: BackboneKind::ALL.to_vec(),
            seeds: (0..5).collect(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            checkpoint_dir: None,
        }
    }
}

impl AblationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() || self.backbones.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one row, backbone and seed".into()));
        }
        for &r in &self.rows {
            IntegrationConfig::table_row(r, BackboneKind::Dnn)?;
        }
        self.train.validate()?;
        self.pretrain.validate()
    }

    /// Pre-training modes required by the selected rows.
    pub fn pretrain_modes(&self) -> Vec<PretrainMode> {
        let mut modes: Vec<PretrainMode> = self
            .rows
            .iter()
            .filter_map(|&r| IntegrationConfig::table_row(r, BackboneKind::Dnn).ok())
            .filter(IntegrationConfig::needs_pretrained)
            .filter_map(|c| c.pretrain_mode)
            .collect();
        modes.sort();
        modes.dedup();
        modes
    }
}

/// Outcome of one pre-training job.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRun {
    pub mode: PretrainMode,
    pub seed: u64,
    pub epoch_loss: Vec<f64>,
    pub wall_clock_s: f64,
    pub error: Option<String>,
}

/// Outcome of one (row, backbone, seed) CTR run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: usize,
    pub config: String,
    pub backbone: BackboneKind,
    pub seed: u64,
    pub auc: Option<f64>,
    pub logloss: Option<f64>,
    pub wall_clock_s: f64,
    pub error: Option<String>,
}

/// Aggregate over seeds for one (row, backbone) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub row: usize,
    pub config: String,
    pub backbone: BackboneKind,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub logloss_mean: f64,
    pub logloss_std: f64,
    pub n_ok: usize,
    pub n_failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub pretrain: Vec<PretrainRun>,
    pub runs: Vec<AblationResult>,
    pub cells: Vec<AblationCell>,
}

impl AblationSummary {
    pub fn cell(&self, row: usize, backbone: BackboneKind) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.row == row && c.backbone == backbone)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn run_pretrain(bundle: &DatasetBundle, base: &PretrainConfig, mode: PretrainMode, seed: u64) -> (PretrainRun, Option<PretrainedModel>) {
    let start = Instant::now();
    let config = PretrainConfig { mode, seed, ..base.clone() };
    let out = pretrain(&bundle.pretrain_sequences(), &bundle.table, &bundle.vocab, &config);
    let wall_clock_s = start.elapsed().as_secs_f64();
    match out {
        Ok(out) => {
            let epoch_loss = out.log.iter().map(|l| l.mean_loss).collect();
            (PretrainRun { mode, seed, epoch_loss, wall_clock_s, error: None }, Some(out.model))
        }
        Err(e) => (PretrainRun { mode, seed, epoch_loss: vec![], wall_clock_s, error: Some(e.to_string()) }, None),
    }
}

fn run_one(
    bundle: &DatasetBundle,
    spec: &AblationSpec,
    row: usize,
    backbone: BackboneKind,
    seed: u64,
    pretrained: Option<&PretrainedModel>,
) -> Result<(f64, f64)> {
    let integration = IntegrationConfig::table_row(row, backbone)?;
    assert!(
        integration.needs_pretrained() || pretrained.is_none(),
        "configuration {integration} must not receive pre-training artifacts"
    );
    let mut model = CtrModel::build(integration, spec.model.clone(), &bundle.vocab, pretrained, seed)?;
    train_integrated(&mut model, &bundle.train, &TrainConfig { seed, ..spec.train.clone() })?;
    let metrics = evaluate(&model, &bundle.test)?;
    if let Some(dir) = &spec.checkpoint_dir {
        model.save(&dir.join(format!("row{row}_{backbone}_seed{seed}.ckpt")))?;
    }
    Ok((metrics.auc, metrics.logloss))
}

/// Runs every selected (row, backbone, seed) triple. Jobs are independent
/// and seeded, so results do not depend on scheduling. A failing run is
/// recorded and the others continue. `on_result` sees each run as it ends.
pub fn run_ablation(
    bundle: &DatasetBundle,
    spec: &AblationSpec,
    on_result: &(dyn Fn(&AblationResult) + Sync),
) -> Result<AblationSummary> {
    spec.validate()?;
    if let Some(dir) = &spec.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let pre_jobs: Vec<(PretrainMode, u64)> =
        spec.pretrain_modes().into_iter().flat_map(|m| spec.seeds.iter().map(move |&s| (m, s))).collect();
    let pre_out: Vec<(PretrainRun, Option<PretrainedModel>)> =
        pre_jobs.par_iter().map(|&(m, s)| run_pretrain(bundle, &spec.pretrain, m, s)).collect();
    let mut pretrained: BTreeMap<(PretrainMode, u64), std::result::Result<PretrainedModel, String>> = BTreeMap::new();
    let mut pretrain_runs = Vec::with_capacity(pre_out.len());
    for (run, model) in pre_out {
        let entry = model.ok_or_else(|| run.error.clone().unwrap_or_default());
        pretrained.insert((run.mode, run.seed), entry);
        pretrain_runs.push(run);
    }

    let jobs: Vec<(usize, BackboneKind, u64)> = spec
        .rows
        .iter()
        .flat_map(|&r| spec.backbones.iter().flat_map(move |&b| spec.seeds.iter().map(move |&s| (r, b, s))))
        .collect();
    let runs: Vec<AblationResult> = jobs
        .par_iter()
        .map(|&(row, backbone, seed)| {
            let start = Instant::now();
            let integration = IntegrationConfig::table_row(row, backbone).expect("validated row");
            let outcome = match integration.pretrain_mode.filter(|_| integration.needs_pretrained()) {
                None => run_one(bundle, spec, row, backbone, seed, None),
                Some(mode) => match &pretrained[&(mode, seed)] {
                    Ok(pre) => run_one(bundle, spec, row, backbone, seed, Some(pre)),
                    Err(msg) => Err(Error::Config(format!("pre-training {mode} seed {seed} failed: {msg}"))),
                },
            };
            let (auc, logloss, error) = match outcome {
                Ok((a, l)) => (Some(a), Some(l), None),
                Err(e) => (None, None, Some(e.to_string())),
            };
            let result = AblationResult {
                row,
                config: integration.to_string(),
                backbone,
                seed,
                auc,
                logloss,
                wall_clock_s: start.elapsed().as_secs_f64(),
                error,
            };
            on_result(&result);
            result
        })
        .collect();

    let mut cells = Vec::new();
    for &row in &spec.rows {
        for &backbone in &spec.backbones {
            let mine: Vec<&AblationResult> = runs.iter().filter(|r| r.row == row && r.backbone == backbone).collect();
            let aucs: Vec<f64> = mine.iter().filter_map(|r| r.auc).collect();
            let losses: Vec<f64> = mine.iter().filter_map(|r| r.logloss).collect();
            let (auc_mean, auc_std) = mean_std(&aucs);
            let (logloss_mean, logloss_std) = mean_std(&losses);
            cells.push(AblationCell {
                row,
                config: IntegrationConfig::row_label(row).to_string(),
                backbone,
                auc_mean,
                auc_std,
                logloss_mean,
                logloss_std,
                n_ok: aucs.len(),
                n_failed: mine.len() - aucs.len(),
            });
        }
    }
    Ok(AblationSummary { pretrain: pretrain_runs, runs, cells })
}

pub const TSV_HEADER: &str = "row_no\tconfig\tbackbone\tauc_mean\tauc_std\tlogloss_mean\tlogloss_std\tn_ok\tn_failed";

/// Machine-readable cell table, one line per (row, backbone).
pub fn write_tsv(cells: &[AblationCell], path: &Path) -> Result<()> {
    let mut out = String::from(TSV_HEADER);
    out.push('\n');
    for c in cells {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            c.row, c.config, c.backbone, c.auc_mean, c.auc_std, c.logloss_mean, c.logloss_std, c.n_ok, c.n_failed
        );
    }
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Human-readable table: one line per configuration, one column pair per
/// backbone.
pub fn render_table(cells: &[AblationCell]) -> String {
    let mut rows: Vec<usize> = cells.iter().map(|c| c.row).collect();
    rows.dedup();
    let mut backbones: Vec<BackboneKind> = cells.iter().map(|c| c.backbone).collect();
    backbones.sort();
    backbones.dedup();
    let mut out = format!("{:<3} {:<22}", "#", "configuration");
    for b in &backbones {
        let _ = write!(out, " | {:^17} {:^17}", format!("{b} AUC"), format!("{b} LogLoss"));
    }
    out.push('\n');
    let width = out.trim_end().chars().count();
    out.push_str(&"-".repeat(width));
    out.push('\n');
    for row in rows {
        let _ = write!(out, "{:<3} {:<22}", row, IntegrationConfig::row_label(row));
        for &b in &backbones {
            match cells.iter().find(|c| c.row == row && c.backbone == b) {
                Some(c) if c.n_ok > 0 => {
                    let _ = write!(
                        out,
                        " | {:>17} {:>17}",
                        format!("{:.4}±{:.4}", c.auc_mean, c.auc_std),
                        format!("{:.4}±{:.4}", c.logloss_mean, c.logloss_std)
                    );
                }
                _ => {
                    let _ = write!(out, " | {:>17} {:>17}", "failed", "failed");
                }
            }
        }
        out.push('\n');
    }
    out
}
