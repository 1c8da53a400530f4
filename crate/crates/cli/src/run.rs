//! Fully resolved command configurations and their execution.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ctrlab_core::data::{generate, load_bundle, save_bundle, DatasetBundle, GeneratorConfig, PRETRAIN_FILE, TABLE_FILE, TEST_FILE, TRAIN_FILE};
use ctrlab_core::fuse::{
    evaluate, render_table, run_ablation, train_integrated, write_tsv, AblationSpec, CtrModel, IntegrationConfig,
    ModelConfig, TrainConfig,
};
use ctrlab_core::pretrain::{pretrain, PretrainConfig, PretrainedModel};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::manifest::{hash_inputs, write_file, Manifest, TOOL};

pub const STATS_FILE: &str = "stats.json";
pub const PRETRAINED_FILE: &str = "pretrained.ckpt";
pub const PRETRAIN_LOG_FILE: &str = "pretrain_log.jsonl";
pub const MODEL_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.json";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const PRETRAIN_RESULTS_FILE: &str = "pretrain.jsonl";
pub const CELLS_FILE: &str = "cells.tsv";
pub const TABLE_TXT_FILE: &str = "table.txt";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}` (expected train or test)")),
        }
    }
}

/// Everything a command needs besides its output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunConfig {
    GenData {
        generator: GeneratorConfig,
    },
    Pretrain {
        data: PathBuf,
        pretrain: PretrainConfig,
    },
    Train {
        data: PathBuf,
        pretrained: Option<PathBuf>,
        integration: IntegrationConfig,
        model: ModelConfig,
        train: TrainConfig,
    },
    Eval {
        data: PathBuf,
        model: PathBuf,
        split: Split,
    },
    Ablate {
        data: PathBuf,
        /// `checkpoint_dir` is always unset here; see `save_checkpoints`.
        spec: AblationSpec,
        save_checkpoints: bool,
        /// Worker threads; 0 uses every core. Does not affect results.
        threads: usize,
    },
}

impl RunConfig {
    pub fn name(&self) -> &'static str {
        match self {
            RunConfig::GenData { .. } => "gen-data",
            RunConfig::Pretrain { .. } => "pretrain",
            RunConfig::Train { .. } => "train",
            RunConfig::Eval { .. } => "eval",
            RunConfig::Ablate { .. } => "ablate",
        }
    }

    /// Files read by the run, hashed into the manifest.
    pub fn inputs(&self) -> Vec<PathBuf> {
        let bundle = |d: &Path| [TRAIN_FILE, TEST_FILE, PRETRAIN_FILE, TABLE_FILE].map(|f| d.join(f)).to_vec();
        match self {
            RunConfig::GenData { .. } => vec![],
            RunConfig::Pretrain { data, .. } | RunConfig::Ablate { data, .. } => bundle(data),
            RunConfig::Train { data, pretrained, .. } => {
                let mut v = bundle(data);
                v.extend(pretrained.iter().cloned());
                v
            }
            RunConfig::Eval { data, model, .. } => {
                let mut v = bundle(data);
                v.push(model.clone());
                v
            }
        }
    }
}

fn load_data(dir: &Path) -> CliResult<DatasetBundle> {
    Ok(load_bundle(dir)?)
}

fn to_json_line<T: Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string(value).map_err(CliError::runtime)
}

fn jsonl<T: Serialize>(items: &[T]) -> CliResult<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&to_json_line(item)?);
        out.push('\n');
    }
    Ok(out)
}

fn pretty<T: Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string_pretty(value).map(|s| s + "\n").map_err(CliError::runtime)
}

#[derive(Serialize)]
struct DataStats {
    n_train: usize,
    n_test: usize,
    n_pretrain: usize,
    train_positive_rate: f64,
    test_positive_rate: f64,
    /// AUC of the noiseless generator logit: the ceiling for any model.
    oracle_train_auc: f64,
    oracle_test_auc: f64,
}

fn positive_rate(bundle: &[ctrlab_core::data::Example]) -> f64 {
    bundle.iter().filter(|e| e.label).count() as f64 / bundle.len().max(1) as f64
}

#[derive(Serialize)]
struct TrainMetrics {
    integration: String,
    steps: u64,
    first_batch_loss: f64,
    epoch_loss: Vec<f64>,
    test: ctrlab_core::fuse::EvalMetrics,
}

#[derive(Serialize)]
pub struct EvalOutput {
    model: String,
    split: Split,
    metrics: ctrlab_core::fuse::EvalMetrics,
}

/// Scores a saved CTR model on one split of a bundle.
pub fn evaluate_split(data: &Path, model: &Path, split: Split) -> CliResult<EvalOutput> {
    let bundle = load_data(data)?;
    let ctr = CtrModel::load(model)?;
    let examples = match split {
        Split::Train => &bundle.train,
        Split::Test => &bundle.test,
    };
    let metrics = evaluate(&ctr, examples)?;
    Ok(EvalOutput { model: ctr.integration().to_string(), split, metrics })
}

pub fn eval_line(output: &EvalOutput) -> CliResult<String> {
    to_json_line(output)
}

/// One CTR run of an ablation, without timings.
#[derive(Serialize)]
struct ResultLine<'a> {
    row: usize,
    config: &'a str,
    backbone: String,
    seed: u64,
    auc: Option<f64>,
    logloss: Option<f64>,
    error: Option<&'a str>,
}

#[derive(Serialize)]
struct PretrainLine<'a> {
    mode: String,
    seed: u64,
    epoch_loss: &'a [f64],
    error: Option<&'a str>,
}

#[derive(Serialize)]
struct TimingLine {
    job: String,
    wall_clock_s: f64,
}

/// Runs `run`, writing its artifacts and manifest into `out`. Returns a short
/// summary for stdout.
pub fn execute(run: &RunConfig, out: &Path) -> CliResult<String> {
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("creating {}: {e}", out.display())))?;
    let inputs = hash_inputs(&run.inputs())?;
    let start = Instant::now();
    let mut timings = BTreeMap::new();
    let mut other = Vec::new();
    let (reproducible, summary): (Vec<&str>, String) = match run {
        RunConfig::GenData { generator } => {
            let data = generate(generator)?;
            timings.insert("generate".into(), start.elapsed().as_secs_f64());
            save_bundle(&data.bundle, out).map_err(CliError::runtime)?;
            let b = &data.bundle;
            let stats = DataStats {
                n_train: b.train.len(),
                n_test: b.test.len(),
                n_pretrain: b.pretrain.len(),
                train_positive_rate: positive_rate(&b.train),
                test_positive_rate: positive_rate(&b.test),
                oracle_train_auc: data.oracle_train_auc,
                oracle_test_auc: data.oracle_test_auc,
            };
            write_file(&out.join(STATS_FILE), &pretty(&stats)?)?;
            let summary = format!(
                "wrote {} train / {} test examples, {} users; oracle test AUC {:.4}",
                stats.n_train, stats.n_test, stats.n_pretrain, stats.oracle_test_auc
            );
            (vec![TRAIN_FILE, TEST_FILE, PRETRAIN_FILE, TABLE_FILE, STATS_FILE], summary)
        }
        RunConfig::Pretrain { data, pretrain: config } => {
            let bundle = load_data(data)?;
            let t = Instant::now();
            let result = pretrain(&bundle.pretrain_sequences(), &bundle.table, &bundle.vocab, config)?;
            timings.insert("pretrain".into(), t.elapsed().as_secs_f64());
            result.model.save(&out.join(PRETRAINED_FILE)).map_err(CliError::runtime)?;
            write_file(&out.join(PRETRAIN_LOG_FILE), &jsonl(&result.log)?)?;
            let last = result.log.last().map_or(f64::NAN, |l| l.mean_loss);
            let summary = format!("pre-trained {} for {} epochs; final loss {last:.4}", config.mode, result.log.len());
            (vec![PRETRAINED_FILE, PRETRAIN_LOG_FILE], summary)
        }
        RunConfig::Train { data, pretrained, integration, model, train } => {
            let bundle = load_data(data)?;
            let pre = pretrained.as_deref().map(PretrainedModel::load).transpose()?;
            let mut ctr = CtrModel::build(*integration, model.clone(), &bundle.vocab, pre.as_ref(), train.seed)?;
            let t = Instant::now();
            let report = train_integrated(&mut ctr, &bundle.train, train)?;
            timings.insert("train".into(), t.elapsed().as_secs_f64());
            let t = Instant::now();
            let test = evaluate(&ctr, &bundle.test)?;
            timings.insert("evaluate".into(), t.elapsed().as_secs_f64());
            ctr.save(&out.join(MODEL_FILE)).map_err(CliError::runtime)?;
            let metrics = TrainMetrics {
                integration: integration.to_string(),
                steps: report.steps,
                first_batch_loss: report.first_batch_loss,
                epoch_loss: report.epoch_loss,
                test,
            };
            write_file(&out.join(METRICS_FILE), &pretty(&metrics)?)?;
            let summary = format!("{integration}: test AUC {:.4}, LogLoss {:.4}", test.auc, test.logloss);
            (vec![MODEL_FILE, METRICS_FILE], summary)
        }
        RunConfig::Eval { data, model, split } => {
            let output = evaluate_split(data, model, *split)?;
            timings.insert("evaluate".into(), start.elapsed().as_secs_f64());
            write_file(&out.join(METRICS_FILE), &pretty(&output)?)?;
            (vec![METRICS_FILE], to_json_line(&output)?)
        }
        RunConfig::Ablate { data, spec, save_checkpoints, threads } => {
            let bundle = load_data(data)?;
            let mut spec = spec.clone();
            if *save_checkpoints {
                spec.checkpoint_dir = Some(out.join(CHECKPOINT_DIR));
                other.push(CHECKPOINT_DIR.to_string());
            }
            let pool = rayon::ThreadPoolBuilder::new().num_threads(*threads).build().map_err(CliError::runtime)?;
            let report = |r: &ctrlab_core::fuse::AblationResult| match (r.auc, &r.error) {
                (Some(auc), _) => eprintln!(
                    "row {} {} seed {}: AUC {auc:.4} ({:.1}s)",
                    r.row, r.backbone, r.seed, r.wall_clock_s
                ),
                (None, e) => eprintln!("row {} {} seed {}: failed: {}", r.row, r.backbone, r.seed, e.as_deref().unwrap_or("")),
            };
            let summary = pool.install(|| run_ablation(&bundle, &spec, &report))?;
            timings.insert("ablate".into(), start.elapsed().as_secs_f64());
            let results: Vec<ResultLine> = summary
                .runs
                .iter()
                .map(|r| ResultLine {
                    row: r.row,
                    config: &r.config,
                    backbone: r.backbone.to_string(),
                    seed: r.seed,
                    auc: r.auc,
                    logloss: r.logloss,
                    error: r.error.as_deref(),
                })
                .collect();
            write_file(&out.join(RESULTS_FILE), &jsonl(&results)?)?;
            let pre: Vec<PretrainLine> = summary
                .pretrain
                .iter()
                .map(|p| PretrainLine {
                    mode: p.mode.to_string(),
                    seed: p.seed,
                    epoch_loss: &p.epoch_loss,
                    error: p.error.as_deref(),
                })
                .collect();
            write_file(&out.join(PRETRAIN_RESULTS_FILE), &jsonl(&pre)?)?;
            write_tsv(&summary.cells, &out.join(CELLS_FILE)).map_err(CliError::runtime)?;
            let table = render_table(&summary.cells);
            write_file(&out.join(TABLE_TXT_FILE), &table)?;
            let mut times: Vec<TimingLine> = summary
                .pretrain
                .iter()
                .map(|p| TimingLine { job: format!("pretrain {} seed {}", p.mode, p.seed), wall_clock_s: p.wall_clock_s })
                .collect();
            times.extend(summary.runs.iter().map(|r| TimingLine {
                job: format!("row {} {} seed {}", r.row, r.backbone, r.seed),
                wall_clock_s: r.wall_clock_s,
            }));
            write_file(&out.join(TIMINGS_FILE), &jsonl(&times)?)?;
            other.push(TIMINGS_FILE.to_string());
            let failed = summary.runs.iter().filter(|r| r.error.is_some()).count();
            let mut text = table;
            if failed > 0 {
                let _ = writeln!(text, "{failed} of {} runs failed; see {RESULTS_FILE}", summary.runs.len());
            }
            (vec![RESULTS_FILE, PRETRAIN_RESULTS_FILE, CELLS_FILE, TABLE_TXT_FILE], text)
        }
    };
    timings.insert("total".into(), start.elapsed().as_secs_f64());
    let manifest = Manifest {
        tool: TOOL.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        run: run.clone(),
        inputs,
        reproducible_outputs: reproducible.into_iter().map(String::from).collect(),
        other_outputs: other,
        timings,
    };
    manifest.write(out)?;
    Ok(summary)
}
