//! `ctrlab`: generate data, pre-train decoders, train and evaluate CTR models
//! and run the ablation matrix. Every command writes a `manifest.json` that
//! `ctrlab rerun` can replay bit-exactly.

mod error;
mod manifest;
mod run;
mod settings;

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use ctrlab_core::backbone::BackboneKind;
use ctrlab_core::data::GeneratorConfig;
use ctrlab_core::fuse::{AblationSpec, IntegrationConfig, ModelConfig, TrainConfig, TABLE_ROWS};
use ctrlab_core::gendec::DecoderConfig;
use ctrlab_core::pretrain::{PretrainConfig, PretrainMode, PretrainedModel};

use error::{CliError, CliResult};
use manifest::{compare_outputs, Manifest};
use run::{eval_line, evaluate_split, execute, RunConfig, Split};
use settings::Settings;

#[derive(Parser)]
#[command(name = "ctrlab", version, about = "Generative pre-training for CTR prediction: data, training and ablations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset bundle.
    GenData(GenDataArgs),
    /// Pre-train a behavior-sequence decoder on a bundle's pre-training set.
    Pretrain(PretrainArgs),
    /// Train and evaluate one CTR configuration.
    Train(TrainArgs),
    /// Evaluate a saved CTR model.
    Eval(EvalArgs),
    /// Run the configuration × backbone × seed matrix.
    Ablate(AblateArgs),
    /// Repeat a run from its manifest.
    Rerun(RerunArgs),
}

#[derive(Args)]
struct Common {
    /// `key = value` file; keys are long flag names. Flags take precedence.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecoderArgs {
    /// Decoder layers [default: 1].
    #[arg(long)]
    layers: Option<usize>,
    /// Attention heads [default: 2].
    #[arg(long)]
    heads: Option<usize>,
    /// Embedding and decoder width [default: 16].
    #[arg(long)]
    dim: Option<usize>,
    /// Feed-forward width [default: 64].
    #[arg(long)]
    ffn_dim: Option<usize>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_users: Option<usize>,
    #[arg(long)]
    n_items: Option<usize>,
    #[arg(long)]
    n_categories: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Any other generator field, e.g. `--set beta=2.0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset bundle directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// cs+cd, cs+sd, rs+cd or rs+sd [default: cs+cd].
    #[arg(long)]
    mode: Option<String>,
    /// [default: 3]
    #[arg(long)]
    epochs: Option<usize>,
    /// Negatives per position [default: 10].
    #[arg(long)]
    negatives: Option<usize>,
    /// Sequences per batch [default: 32].
    #[arg(long)]
    batch_size: Option<usize>,
    /// [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    decoder: DecoderArgs,
}

#[derive(Args)]
struct ModelArgs {
    /// Hidden widths of the MLP stack [default: 256,128].
    #[arg(long)]
    hidden: Option<String>,
    /// Cross-network experts [default: 3].
    #[arg(long)]
    experts: Option<usize>,
    /// Cross layers per expert [default: 3].
    #[arg(long)]
    cross_depth: Option<usize>,
    /// Low-rank width of each cross layer [default: 16].
    #[arg(long)]
    cross_rank: Option<usize>,
    #[command(flatten)]
    decoder: DecoderArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// dnn, dcnv2 or dcnv2_ta [default: dnn].
    #[arg(long)]
    backbone: Option<String>,
    /// Initialize item and category tables from the pre-trained model.
    #[arg(long)]
    ps: bool,
    /// Attach the pre-trained decoder (implies --decoder).
    #[arg(long)]
    mi: bool,
    /// Attach a decoder whose output feeds the backbone.
    #[arg(long)]
    decoder: bool,
    /// Keep transferred parameters fixed.
    #[arg(long)]
    freeze: bool,
    /// Checkpoint written by `pretrain`; required with --ps or --mi.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// [default: 1]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 32]
    #[arg(long)]
    batch_size: Option<usize>,
    /// [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// train or test [default: test].
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Rows of the matrix, e.g. `1,5-8` [default: 1-8].
    #[arg(long)]
    rows: Option<String>,
    /// [default: dnn,dcnv2,dcnv2_ta]
    #[arg(long)]
    backbones: Option<String>,
    /// Number of seeds; runs seeds 0..N [default: 5].
    #[arg(long)]
    seeds: Option<u64>,
    /// CTR epochs [default: 1].
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 32]
    #[arg(long)]
    batch_size: Option<usize>,
    /// CTR learning rate [default: 0.001].
    #[arg(long)]
    lr: Option<f64>,
    /// [default: 3]
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    /// [default: 10]
    #[arg(long)]
    negatives: Option<usize>,
    /// [default: 32]
    #[arg(long)]
    pretrain_batch_size: Option<usize>,
    /// [default: 0.001]
    #[arg(long)]
    pretrain_lr: Option<f64>,
    /// Save every trained CTR model under `checkpoints/`.
    #[arg(long)]
    checkpoints: bool,
    /// Worker threads; 0 uses every core [default: 0].
    #[arg(long)]
    threads: Option<usize>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct RerunArgs {
    /// `manifest.json` of the run to repeat.
    manifest: PathBuf,
    /// Output directory for the repeat.
    #[arg(long)]
    out: PathBuf,
    /// Fail unless every reproducible output matches the original byte for byte.
    #[arg(long)]
    check: bool,
}

fn parse_list<T: FromStr>(raw: &str, what: &str) -> CliResult<Vec<T>>
where
    T::Err: Display,
{
    raw.split(',')
        .map(|s| s.trim().parse().map_err(|e| CliError::Usage(format!("bad {what} `{s}`: {e}"))))
        .collect()
}

/// `1,3,5-8` style row lists.
fn parse_rows(raw: &str) -> CliResult<Vec<usize>> {
    let mut rows = Vec::new();
    for part in raw.split(',') {
        let bad = || CliError::Usage(format!("bad row range `{part}`"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                rows.extend(a..=b);
            }
            None => rows.push(part.trim().parse().map_err(|_| bad())?),
        }
    }
    Ok(rows)
}

fn absolute(p: PathBuf) -> CliResult<PathBuf> {
    std::path::absolute(&p).map_err(|e| CliError::Usage(format!("resolving {}: {e}", p.display())))
}

fn required<T>(value: Option<T>, flag: &str) -> CliResult<T> {
    value.ok_or_else(|| CliError::Usage(format!("missing --{flag}")))
}

fn out_dir(s: &mut Settings, common: &Common) -> CliResult<PathBuf> {
    absolute(required(s.pick(common.out.clone(), "out")?, "out")?)
}

fn data_dir(s: &mut Settings, flag: Option<PathBuf>) -> CliResult<PathBuf> {
    absolute(required(s.pick(flag, "data")?, "data")?)
}

fn decoder_config(s: &mut Settings, a: &DecoderArgs, base: DecoderConfig) -> CliResult<DecoderConfig> {
    Ok(DecoderConfig {
        n_layers: s.pick(a.layers, "layers")?.unwrap_or(base.n_layers),
        n_heads: s.pick(a.heads, "heads")?.unwrap_or(base.n_heads),
        model_dim: s.pick(a.dim, "dim")?.unwrap_or(base.model_dim),
        ffn_dim: s.pick(a.ffn_dim, "ffn-dim")?.unwrap_or(base.ffn_dim),
    })
}

fn model_config(s: &mut Settings, a: &ModelArgs, decoder: DecoderConfig) -> CliResult<ModelConfig> {
    let base = ModelConfig::default();
    let hidden = match s.pick(a.hidden.clone(), "hidden")? {
        Some(raw) => parse_list(&raw, "hidden width")?,
        None => base.hidden,
    };
    Ok(ModelConfig {
        decoder: decoder_config(s, &a.decoder, decoder)?,
        hidden,
        n_experts: s.pick(a.experts, "experts")?.unwrap_or(base.n_experts),
        cross_depth: s.pick(a.cross_depth, "cross-depth")?.unwrap_or(base.cross_depth),
        cross_rank: s.pick(a.cross_rank, "cross-rank")?.unwrap_or(base.cross_rank),
    })
}

/// Applies `key=value` overrides to a generator config; values are JSON
/// literals or bare strings.
fn apply_generator_overrides(cfg: GeneratorConfig, pairs: &[(String, String)]) -> CliResult<GeneratorConfig> {
    let mut value = serde_json::to_value(cfg).map_err(CliError::runtime)?;
    let fields = value.as_object_mut().expect("generator config is a struct");
    for (key, raw) in pairs {
        let field = key.trim().replace('-', "_");
        let slot = fields.get_mut(&field).ok_or_else(|| CliError::Usage(format!("unknown generator key `{key}`")))?;
        *slot = serde_json::from_str(raw.trim()).unwrap_or_else(|_| serde_json::Value::String(raw.trim().into()));
    }
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("bad generator setting: {e}")))
}

fn resolve_gen_data(a: GenDataArgs) -> CliResult<(RunConfig, PathBuf)> {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let out = out_dir(&mut s, &a.common)?;
    let mut pairs: Vec<(String, String)> = s.drain().into_iter().collect();
    let flags = [
        ("seed", a.seed.map(|v| v.to_string())),
        ("n_users", a.n_users.map(|v| v.to_string())),
        ("n_items", a.n_items.map(|v| v.to_string())),
        ("n_categories", a.n_categories.map(|v| v.to_string())),
        ("n_train", a.n_train.map(|v| v.to_string())),
        ("n_test", a.n_test.map(|v| v.to_string())),
    ];
    pairs.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    for kv in &a.set {
        let (k, v) =
            kv.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        pairs.push((k.to_string(), v.to_string()));
    }
    let generator = apply_generator_overrides(GeneratorConfig::default(), &pairs)?;
    generator.validate()?;
    Ok((RunConfig::GenData { generator }, out))
}

fn resolve_pretrain(a: PretrainArgs) -> CliResult<(RunConfig, PathBuf)> {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let out = out_dir(&mut s, &a.common)?;
    let data = data_dir(&mut s, a.data)?;
    let base = PretrainConfig::default();
    let mode = match s.pick(a.mode, "mode")? {
        Some(m) => m.parse::<PretrainMode>()?,
        None => base.mode,
    };
    let pretrain = PretrainConfig {
        mode,
        decoder: decoder_config(&mut s, &a.decoder, base.decoder.clone())?,
        negatives: s.pick(a.negatives, "negatives")?.unwrap_or(base.negatives),
        batch_size: s.pick(a.batch_size, "batch-size")?.unwrap_or(base.batch_size),
        epochs: s.pick(a.epochs, "epochs")?.unwrap_or(base.epochs),
        learning_rate: s.pick(a.lr, "lr")?.unwrap_or(base.learning_rate),
        seed: s.pick(a.seed, "seed")?.unwrap_or(base.seed),
    };
    s.finish("pretrain")?;
    pretrain.validate()?;
    Ok((RunConfig::Pretrain { data, pretrain }, out))
}

fn train_config(s: &mut Settings, epochs: Option<usize>, batch: Option<usize>, lr: Option<f64>) -> CliResult<TrainConfig> {
    let base = TrainConfig::default();
    Ok(TrainConfig {
        epochs: s.pick(epochs, "epochs")?.unwrap_or(base.epochs),
        batch_size: s.pick(batch, "batch-size")?.unwrap_or(base.batch_size),
        learning_rate: s.pick(lr, "lr")?.unwrap_or(base.learning_rate),
        seed: base.seed,
    })
}

fn resolve_train(a: TrainArgs) -> CliResult<(RunConfig, PathBuf)> {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let out = out_dir(&mut s, &a.common)?;
    let data = data_dir(&mut s, a.data)?;
    let backbone = match s.pick(a.backbone, "backbone")? {
        Some(b) => b.parse::<BackboneKind>()?,
        None => BackboneKind::Dnn,
    };
    let ps = s.switch(a.ps, "ps")?;
    let mi = s.switch(a.mi, "mi")?;
    let decoder_attached = mi || s.switch(a.decoder, "decoder")?;
    let freeze_transferred = s.switch(a.freeze, "freeze")?;
    let pretrained = s.pick(a.pretrained, "pretrained")?.map(absolute).transpose()?;
    let pre = match (&pretrained, ps || mi) {
        (None, true) => return Err(CliError::Usage("--ps and --mi need --pretrained <checkpoint>".into())),
        (Some(_), false) => return Err(CliError::Usage("--pretrained is only used with --ps or --mi".into())),
        (Some(p), true) => Some(PretrainedModel::load(p)?),
        (None, false) => None,
    };
    // the decoder shape follows the checkpoint unless set explicitly
    let decoder_base = pre.as_ref().map_or_else(DecoderConfig::default, |p| p.decoder_config.clone());
    let model = model_config(&mut s, &a.model, decoder_base)?;
    let mut train = train_config(&mut s, a.epochs, a.batch_size, a.lr)?;
    train.seed = s.pick(a.seed, "seed")?.unwrap_or(0);
    s.finish("train")?;
    let integration = IntegrationConfig {
        ps,
        mi,
        decoder_attached,
        pretrain_mode: pre.as_ref().map(|p| p.mode),
        backbone,
        freeze_transferred,
    };
    integration.validate()?;
    train.validate()?;
    model.decoder.validate()?;
    Ok((RunConfig::Train { data, pretrained, integration, model, train }, out))
}

fn resolve_eval(a: EvalArgs) -> CliResult<(RunConfig, Option<PathBuf>)> {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let out = s.pick(a.common.out.clone(), "out")?.map(absolute).transpose()?;
    let data = data_dir(&mut s, a.data)?;
    let model = absolute(required(s.pick(a.model, "model")?, "model")?)?;
    let split = match s.pick(a.split, "split")? {
        Some(raw) => raw.parse::<Split>().map_err(CliError::Usage)?,
        None => Split::Test,
    };
    s.finish("eval")?;
    Ok((RunConfig::Eval { data, model, split }, out))
}

fn resolve_ablate(a: AblateArgs) -> CliResult<(RunConfig, PathBuf)> {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let out = out_dir(&mut s, &a.common)?;
    let data = data_dir(&mut s, a.data)?;
    let base = AblationSpec::default();
    let rows = match s.pick(a.rows, "rows")? {
        Some(raw) => parse_rows(&raw)?,
        None => (1..=TABLE_ROWS).collect(),
    };
    let backbones = match s.pick(a.backbones, "backbones")? {
        Some(raw) => parse_list(&raw, "backbone")?,
        None => base.backbones,
    };
    let seeds = match s.pick(a.seeds, "seeds")? {
        Some(n) => (0..n).collect(),
        None => base.seeds,
    };
    let pretrain = PretrainConfig {
        epochs: s.pick(a.pretrain_epochs, "pretrain-epochs")?.unwrap_or(base.pretrain.epochs),
        negatives: s.pick(a.negatives, "negatives")?.unwrap_or(base.pretrain.negatives),
        batch_size: s.pick(a.pretrain_batch_size, "pretrain-batch-size")?.unwrap_or(base.pretrain.batch_size),
        learning_rate: s.pick(a.pretrain_lr, "pretrain-lr")?.unwrap_or(base.pretrain.learning_rate),
        ..base.pretrain
    };
    let model = model_config(&mut s, &a.model, DecoderConfig::default())?;
    let spec = AblationSpec {
        rows,
        backbones,
        seeds,
        pretrain: PretrainConfig { decoder: model.decoder.clone(), ..pretrain },
        model,
        train: train_config(&mut s, a.epochs, a.batch_size, a.lr)?,
        checkpoint_dir: None,
    };
    let save_checkpoints = s.switch(a.checkpoints, "checkpoints")?;
    let threads = s.pick(a.threads, "threads")?.unwrap_or(0);
    s.finish("ablate")?;
    spec.validate()?;
    Ok((RunConfig::Ablate { data, spec, save_checkpoints, threads }, out))
}

fn report(run: &RunConfig, out: &Path) -> CliResult<()> {
    let summary = execute(run, out)?;
    println!("{}", summary.trim_end());
    eprintln!("wrote {}", out.join(manifest::MANIFEST_FILE).display());
    Ok(())
}

fn rerun(a: RerunArgs) -> CliResult<()> {
    let original = Manifest::read(&a.manifest)?;
    original.verify_inputs()?;
    let out = absolute(a.out)?;
    eprintln!("repeating `{}` from {}", original.run.name(), a.manifest.display());
    let summary = execute(&original.run, &out)?;
    println!("{}", summary.trim_end());
    if a.check {
        let source = a.manifest.parent().unwrap_or(Path::new("."));
        let differ = compare_outputs(&original.reproducible_outputs, source, &out)?;
        if !differ.is_empty() {
            return Err(CliError::Runtime(format!("outputs differ from the original run: {}", differ.join(", "))));
        }
        println!("reproduced {} outputs bit-exactly", original.reproducible_outputs.len());
    }
    Ok(())
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::GenData(a) => {
            let (run, out) = resolve_gen_data(a)?;
            report(&run, &out)
        }
        Command::Pretrain(a) => {
            let (run, out) = resolve_pretrain(a)?;
            report(&run, &out)
        }
        Command::Train(a) => {
            let (run, out) = resolve_train(a)?;
            report(&run, &out)
        }
        Command::Eval(a) => match resolve_eval(a)? {
            (run, Some(out)) => report(&run, &out),
            (RunConfig::Eval { data, model, split }, None) => {
                println!("{}", eval_line(&evaluate_split(&data, &model, split)?)?);
                Ok(())
            }
            _ => unreachable!("resolve_eval returns an eval run"),
        },
        Command::Ablate(a) => {
            let (run, out) = resolve_ablate(a)?;
            report(&run, &out)
        }
        Command::Rerun(a) => rerun(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
