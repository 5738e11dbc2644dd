//! Operator entry point behind the `sstn` binary.
//!
//! Every subcommand accepts `--config FILE`: plain text, one `key = value`
//! per line, `#` starts a comment. Keys are the subcommand's long flag names
//! without dashes in front (`episode-length = 10`, `reward = r1`); boolean
//! flags take `true` or `false`. Flags given on the command line win over
//! the file.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sstn_tensor::{checkpoint, Module};

use crate::dataset::{self, ClutterConfig, DatasetBundle, SourceSet, Split};
use crate::environment::{rollout, EnvConfig, FixedAgent, PolicyAgent, RandomAgent, ReturnConvention, RewardKind};
use crate::error::{Result, SstnError};
use crate::geometry::{Action, ActionGrids};
use crate::models::{Classifier, ClassifierConfig, PolicyConfig, PolicyNet, SampleMode};
use crate::oracle::{self, GapReport};
use crate::training::{self, metrics_csv, stream, streams, Algorithm, MetricsRow, Models, TrainConfig, METRICS_HEADER};

pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Parser, Debug)]
#[command(name = "sstn", version, about = "Sequential spatial transformer experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render cluttered canvases from a digit source into IDX files.
    Generate(GenerateArgs),
    /// Train a classifier jointly with a transformation policy.
    Train(TrainArgs),
    /// Evaluate a finished run on a dataset.
    Evaluate(EvaluateArgs),
    /// Write the transformed image sequence of each input as PGM files.
    RolloutDump(RolloutArgs),
    /// Train every combination of reward kind, episode length and seed.
    Ablate(AblateArgs),
    /// Search action sequences exhaustively for one image, or measure the
    /// policy's gap to that optimum.
    Oracle(OracleArgs),
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub source_images: PathBuf,
    #[arg(long)]
    pub source_labels: PathBuf,
    /// Use only source digits `START:END` (half open).
    #[arg(long)]
    pub source_range: Option<String>,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 80)]
    pub canvas: usize,
    #[arg(long, default_value_t = 8)]
    pub clutter_patches: usize,
    #[arg(long, default_value_t = 8)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// train or test; recorded in the dataset sidecar.
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long)]
    pub out_prefix: PathBuf,
}

#[derive(Args, Debug, Clone)]
#[command(args_override_self = true)]
pub struct TrainFlags {
    /// Dataset prefix written by `generate`.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// mlp or lenet
    #[arg(long, default_value = "mlp")]
    pub classifier: String,
    /// lenet or lenet-lstm
    #[arg(long, default_value = "lenet-lstm")]
    pub policy: String,
    /// pg or ac
    #[arg(long, default_value = "ac")]
    pub algorithm: String,
    /// r1, r2 or r3
    #[arg(long, default_value = "r3")]
    pub reward: String,
    #[arg(long, default_value_t = 40)]
    pub episode_length: usize,
    #[arg(long, default_value_t = 0.98)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Critic learning rate (ac only); defaults to --lr.
    #[arg(long)]
    pub critic_lr: Option<f64>,
    /// Classifier learning rate; defaults to --lr.
    #[arg(long)]
    pub classifier_lr: Option<f64>,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// standard or as-printed
    #[arg(long, default_value = "standard")]
    pub return_convention: String,
    /// greedy or sample
    #[arg(long, default_value = "greedy")]
    pub eval_mode: String,
    #[arg(long)]
    pub normalize_advantage: bool,
    #[arg(long, default_value_t = 0.0)]
    pub entropy_coef: f64,
    #[arg(long, default_value_t = 0)]
    pub pretrain_classifier: usize,
    /// Train the classifier on every intermediate image.
    #[arg(long)]
    pub classifier_all_steps: bool,
    /// Replace the policy by one action (name or index).
    #[arg(long)]
    pub frozen_action: Option<String>,
    #[arg(long, default_value_t = 128)]
    pub lstm_hidden: usize,
    #[arg(long, default_value_t = 250)]
    pub eval_batch: usize,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Plain supervised classifier on untransformed images.
    #[arg(long)]
    pub supervised: bool,
    /// Rerun exactly what an earlier manifest describes.
    #[arg(long)]
    pub from_manifest: Option<PathBuf>,
    /// Also checkpoint every K epochs into `epoch-NNNN/`.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// greedy or sample; defaults to the run's evaluation mode.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub episode_length: Option<usize>,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct RolloutArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long)]
    pub episode_length: Option<usize>,
    #[arg(long, default_value = "greedy")]
    pub mode: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Comma separated reward kinds.
    #[arg(long, default_value = "r1,r2,r3")]
    pub rewards: String,
    /// Comma separated episode lengths; defaults to --episode-length.
    #[arg(long)]
    pub episode_lengths: Option<String>,
    /// Comma separated seeds; defaults to --seed.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct OracleArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory providing the classifier (and policy for --gap).
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    /// Comma separated action names or indices; all ten by default.
    #[arg(long)]
    pub subset: Option<String>,
    /// Keep only this many prefixes per depth instead of enumerating.
    #[arg(long)]
    pub beam_width: Option<usize>,
    /// Report the trained and a random policy's mean gap over the first N
    /// images instead of searching one image.
    #[arg(long)]
    pub gap: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Everything needed to rerun a training job.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub supervised: bool,
    pub seed: u64,
    pub config: TrainConfig,
    pub train_data: PathBuf,
    pub test_data: PathBuf,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CLASSIFIER_CKPT: &str = "classifier.ckpt";
pub const ACTOR_CKPT: &str = "actor.ckpt";
pub const CRITIC_CKPT: &str = "critic.ckpt";

impl RunManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| SstnError::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| SstnError::Parse {
            path: path.to_path_buf(),
            offset: 0,
            msg: e.to_string(),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self).expect("plain struct")).map_err(|e| SstnError::io(path, e))
    }
}

/// Provenance of a generated dataset; no timestamps so regeneration is
/// byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateManifest {
    pub version: String,
    pub source_images: PathBuf,
    pub source_labels: PathBuf,
    pub source_range: (usize, usize),
    pub clutter: ClutterConfig,
    pub seed: u64,
    pub count: usize,
    pub split: Split,
    pub class_counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub best_sequence: Vec<usize>,
    pub best_loss: f64,
    pub num_evaluated: usize,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Parses `key = value` lines.
pub fn parse_config_text(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let body = line.split('#').next().unwrap_or("").trim();
        if !body.is_empty() {
            let (k, v) = body.split_once('=').ok_or_else(|| SstnError::Parse {
                path: path.to_path_buf(),
                offset,
                msg: format!("expected key = value, got {body:?}"),
            })?;
            let key = k.trim().trim_start_matches("--").to_string();
            if key.is_empty() {
                return Err(SstnError::Parse {
                    path: path.to_path_buf(),
                    offset,
                    msg: "empty key".into(),
                });
            }
            out.push((key, v.trim().to_string()));
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

/// Replaces `--config FILE` by the flags it holds, placed right after the
/// subcommand so explicit flags override them.
pub fn expand_config(args: Vec<String>) -> Result<Vec<String>> {
    let Some(sub_pos) = args.iter().skip(1).position(|a| !a.starts_with('-')).map(|p| p + 1) else {
        return Ok(args);
    };
    let mut path = None;
    let mut rest = Vec::new();
    let mut it = args[sub_pos + 1..].iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            path = Some(it.next().ok_or_else(|| SstnError::Config("--config needs a file".into()))?.clone());
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else {
            rest.push(a.clone());
        }
    }
    let Some(path) = path else { return Ok(args) };
    let path = PathBuf::from(path);
    let text = fs::read_to_string(&path).map_err(|e| SstnError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let cmd = Cli::command();
    let sub = cmd
        .find_subcommand(&args[sub_pos])
        .ok_or_else(|| SstnError::Config(format!("unknown subcommand {:?}", args[sub_pos])))?;
    let mut spliced = args[..=sub_pos].to_vec();
    for (key, value) in parse_config_text(&text, &path)? {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
            .ok_or_else(|| SstnError::Config(format!("{}: unknown key {key:?}", path.display())))?;
        if arg.get_action().takes_values() {
            spliced.push(format!("--{key}"));
            spliced.push(value);
        } else {
            match value.as_str() {
                "true" => spliced.push(format!("--{key}")),
                "false" => {}
                _ => {
                    return Err(SstnError::Config(format!(
                        "{}: {key} takes true or false, got {value:?}",
                        path.display()
                    )))
                }
            }
        }
    }
    spliced.extend(rest);
    Ok(spliced)
}

pub fn parse_action(s: &str) -> Result<Action> {
    let s = s.trim();
    if let Ok(i) = s.parse::<usize>() {
        return Action::from_index(i);
    }
    Action::ALL
        .iter()
        .copied()
        .find(|a| a.name() == s || format!("{a:?}").eq_ignore_ascii_case(s))
        .ok_or_else(|| SstnError::Config(format!("unknown action {s:?}")))
}

fn parse_list<T>(s: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(|p| f(p.trim())).collect()
}

fn parse_mode(s: &str) -> Result<SampleMode> {
    match s {
        "greedy" => Ok(SampleMode::Greedy),
        "sample" => Ok(SampleMode::Sample),
        _ => Err(SstnError::Config(format!("unknown mode {s:?}, expected greedy or sample"))),
    }
}

fn number<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| SstnError::Config(format!("bad {what} {s:?}")))
}

/// Resolves training flags into a configuration for images of side `side`.
pub fn train_config(flags: &TrainFlags, side: usize) -> Result<TrainConfig> {
    let classifier = match flags.classifier.as_str() {
        "mlp" => ClassifierConfig::mlp(),
        "lenet" => ClassifierConfig::lenet(),
        other => return Err(SstnError::Config(format!("unknown classifier {other:?}, expected mlp or lenet"))),
    }
    .with_side(side);
    let base = PolicyConfig {
        input_side: side,
        lstm_hidden: flags.lstm_hidden,
        ..PolicyConfig::default()
    };
    let policy = match flags.policy.as_str() {
        "lenet-lstm" => base,
        "lenet" => base.without_lstm(),
        other => return Err(SstnError::Config(format!("unknown policy {other:?}, expected lenet or lenet-lstm"))),
    };
    let cfg = TrainConfig {
        algorithm: flags.algorithm.parse::<Algorithm>()?,
        classifier,
        policy,
        env: EnvConfig {
            episode_length: flags.episode_length,
            reward: flags.reward.parse::<RewardKind>()?,
            gamma: flags.gamma,
            return_convention: flags.return_convention.parse::<ReturnConvention>()?,
        },
        batch_size: flags.batch,
        epochs: flags.epochs,
        lr: flags.lr,
        critic_lr: flags.critic_lr,
        classifier_lr: flags.classifier_lr,
        eval_mode: parse_mode(&flags.eval_mode)?,
        seed: flags.seed,
        classifier_on_all_steps: flags.classifier_all_steps,
        normalize_advantage: flags.normalize_advantage,
        entropy_coef: flags.entropy_coef,
        pretrain_classifier: flags.pretrain_classifier,
        frozen_action: flags.frozen_action.as_deref().map(parse_action).transpose()?,
        eval_batch: flags.eval_batch,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a dataset, reporting missing files as configuration errors.
pub fn open_dataset(prefix: &Path) -> Result<DatasetBundle> {
    for p in [dataset::images_path(prefix), dataset::labels_path(prefix)] {
        if !p.is_file() {
            return Err(SstnError::Config(format!("dataset file not found: {}", p.display())));
        }
    }
    dataset::load_dataset(prefix)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(SstnError::Config(format!("{what} not found: {}", path.display())))
    }
}

pub fn save_models(dir: &Path, models: &Models) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SstnError::io(dir, e))?;
    checkpoint::save(&models.classifier, &dir.join(CLASSIFIER_CKPT))?;
    if let Some(a) = &models.actor {
        checkpoint::save(a, &dir.join(ACTOR_CKPT))?;
    }
    if let Some(c) = &models.critic {
        checkpoint::save(c, &dir.join(CRITIC_CKPT))?;
    }
    Ok(())
}

fn load_into<M: Module<f32>>(module: &mut M, path: &Path) -> Result<()> {
    let records = checkpoint::load(path).map_err(|e| SstnError::Config(format!("unreadable checkpoint {}: {e}", path.display())))?;
    module
        .load_named(&records)
        .map_err(|e| SstnError::Config(format!("checkpoint {} does not fit the manifest's models: {e}", path.display())))
}

/// Reads a run directory back into its manifest and final models.
pub fn load_run(dir: &Path) -> Result<(RunManifest, Models)> {
    let manifest = RunManifest::read(dir.join(MANIFEST_FILE))?;
    let cfg = &manifest.config;
    let mut classifier = Classifier::zeros(cfg.classifier)?;
    load_into(&mut classifier, &dir.join(CLASSIFIER_CKPT))?;
    let learned = !manifest.supervised && cfg.frozen_action.is_none();
    let actor = if learned {
        let mut a = PolicyNet::zeros(cfg.policy, crate::geometry::NUM_ACTIONS)?;
        load_into(&mut a, &dir.join(ACTOR_CKPT))?;
        Some(a)
    } else {
        None
    };
    let critic = if learned && cfg.algorithm == Algorithm::Ac {
        let mut c = PolicyNet::zeros(cfg.policy, 1)?;
        load_into(&mut c, &dir.join(CRITIC_CKPT))?;
        Some(c)
    } else {
        None
    };
    Ok((manifest, Models { classifier, actor, critic }))
}

/// Effective configuration for evaluating a run: supervised runs act with
/// Identity only.
fn eval_config(manifest: &RunManifest) -> TrainConfig {
    let mut cfg = manifest.config.clone();
    if manifest.supervised {
        cfg.frozen_action = Some(Action::Identity);
    }
    cfg
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| SstnError::io(path, e))
}

/// Trains into `out`: manifest first, metrics appended per epoch, final
/// checkpoints last.
pub fn run_training(manifest: RunManifest, out: &Path, checkpoint_every: usize) -> Result<Vec<MetricsRow>> {
    fs::create_dir_all(out).map_err(|e| SstnError::io(out, e))?;
    let train_set = open_dataset(&manifest.train_data)?;
    let test_set = open_dataset(&manifest.test_data)?;
    if train_set.side() != manifest.config.classifier.input_side || test_set.side() != train_set.side() {
        return Err(SstnError::Config(format!(
            "image side mismatch: config {}, train {}, test {}",
            manifest.config.classifier.input_side,
            train_set.side(),
            test_set.side()
        )));
    }
    let manifest_path = out.join(MANIFEST_FILE);
    manifest.write(&manifest_path)?;
    let metrics_path = out.join(METRICS_FILE);
    write_text(&metrics_path, &format!("{METRICS_HEADER}\n"))?;
    let mut hook = |epoch: usize, models: &Models, rows: &[MetricsRow]| -> Result<()> {
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(|e| SstnError::io(&metrics_path, e))?;
        for r in rows {
            writeln!(f, "{}", r.csv()).map_err(|e| SstnError::io(&metrics_path, e))?;
            println!("epoch {epoch} {}: accuracy {:.4} reward {:.4}", r.split, r.accuracy, r.mean_reward);
        }
        if checkpoint_every > 0 && (epoch + 1).is_multiple_of(checkpoint_every) {
            save_models(&out.join(format!("epoch-{:04}", epoch + 1)), models)?;
        }
        Ok(())
    };
    let outcome = if manifest.supervised {
        training::train_supervised(&manifest.config, &train_set, &test_set, Some(&mut hook))?
    } else {
        training::train(&manifest.config, &train_set, &test_set, Some(&mut hook))?
    };
    write_text(&metrics_path, &metrics_csv(&outcome.metrics))?;
    save_models(out, &outcome.models)?;
    let mut done = manifest;
    done.finished_unix = Some(unix_now());
    done.write(&manifest_path)?;
    Ok(outcome.metrics)
}

fn new_manifest(cfg: TrainConfig, supervised: bool, train: PathBuf, test: PathBuf) -> RunManifest {
    RunManifest {
        version: VERSION.into(),
        supervised,
        seed: cfg.seed,
        config: cfg,
        train_data: train,
        test_data: test,
        started_unix: unix_now(),
        finished_unix: None,
    }
}

fn data_prefixes(flags: &TrainFlags) -> Result<(PathBuf, PathBuf)> {
    match (&flags.train, &flags.test) {
        (Some(a), Some(b)) => Ok((a.clone(), b.clone())),
        _ => Err(SstnError::Config("--train and --test dataset prefixes are required".into())),
    }
}

fn side_of(prefix: &Path) -> Result<usize> {
    let p = dataset::images_path(prefix);
    require_file(&p, "dataset file")?;
    let idx = dataset::read_idx(&p)?;
    idx.dims.get(1).copied().ok_or_else(|| SstnError::Parse {
        path: p,
        offset: 0,
        msg: "image file has no spatial dimensions".into(),
    })
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    require_file(&args.source_images, "source images")?;
    require_file(&args.source_labels, "source labels")?;
    let split = match args.split.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(SstnError::Config(format!("unknown split {other:?}, expected train or test"))),
    };
    let all = SourceSet::load(&args.source_images, &args.source_labels)?;
    let range = match &args.source_range {
        None => (0, all.len()),
        Some(r) => {
            let (a, b) = r
                .split_once(':')
                .ok_or_else(|| SstnError::Config(format!("source range {r:?} is not START:END")))?;
            let (a, b) = (number::<usize>(a, "range start")?, number::<usize>(b, "range end")?);
            if a >= b || b > all.len() {
                return Err(SstnError::Config(format!("source range {a}:{b} outside 0:{}", all.len())));
            }
            (a, b)
        }
    };
    let source = all.slice(range.0, range.1);
    let clutter = ClutterConfig {
        canvas: args.canvas,
        patches: args.clutter_patches,
        patch_size: args.patch_size,
    };
    let bundle = dataset::make_cluttered(&source, args.count, &clutter, args.seed, split)?;
    if let Some(parent) = args.out_prefix.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| SstnError::io(parent, e))?;
    }
    dataset::write_dataset(&args.out_prefix, &bundle)?;
    let mut class_counts = vec![0; dataset::NUM_CLASSES];
    for &l in &bundle.labels {
        class_counts[l as usize] += 1;
    }
    let manifest = GenerateManifest {
        version: VERSION.into(),
        source_images: args.source_images.clone(),
        source_labels: args.source_labels.clone(),
        source_range: range,
        clutter,
        seed: args.seed,
        count: args.count,
        split,
        class_counts: class_counts.clone(),
    };
    let mut mp = args.out_prefix.as_os_str().to_owned();
    mp.push("-manifest.json");
    write_text(Path::new(&mp), &serde_json::to_string_pretty(&manifest).expect("plain struct"))?;
    println!(
        "wrote {} {}x{} images to {} (classes {:?})",
        bundle.len(),
        args.canvas,
        args.canvas,
        dataset::images_path(&args.out_prefix).display(),
        class_counts
    );
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let manifest = match &args.from_manifest {
        Some(p) => {
            let mut m = RunManifest::read(p)?;
            m.started_unix = unix_now();
            m.finished_unix = None;
            m.version = VERSION.into();
            m
        }
        None => {
            let (train, test) = data_prefixes(&args.flags)?;
            let cfg = train_config(&args.flags, side_of(&train)?)?;
            new_manifest(cfg, args.supervised, train, test)
        }
    };
    let rows = run_training(manifest, &args.out, args.checkpoint_every)?;
    if let Some(last) = rows.iter().rev().find(|r| r.split == "test") {
        println!("final test accuracy {:.4}; run written to {}", last.accuracy, args.out.display());
    }
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let (manifest, models) = load_run(&args.run)?;
    let data = open_dataset(&args.data)?;
    let mut cfg = eval_config(&manifest);
    if let Some(t) = args.episode_length {
        cfg.env.episode_length = t;
    }
    let mode = args.mode.as_deref().map(parse_mode).transpose()?.unwrap_or(cfg.eval_mode);
    let eval = training::evaluate_models(&models, &cfg, &data, mode)?;
    let json = serde_json::to_string_pretty(&eval).expect("plain struct");
    if let Some(out) = &args.out {
        write_text(out, &json)?;
    }
    println!("{json}");
    Ok(())
}

/// Binary PGM with maxval 255 for an image in [0, 1].
pub fn encode_pgm(pixels: &[f32], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

#[derive(Serialize)]
struct DumpEntry {
    index: usize,
    label: u8,
    actions: Vec<usize>,
    predictions: Vec<usize>,
    frames: Vec<String>,
}

pub fn cmd_rollout_dump(args: &RolloutArgs) -> Result<()> {
    let (manifest, models) = load_run(&args.run)?;
    let data = open_dataset(&args.data)?;
    let mut cfg = eval_config(&manifest);
    if let Some(t) = args.episode_length {
        cfg.env.episode_length = t;
    }
    cfg.env.validate()?;
    let mode = parse_mode(&args.mode)?;
    let n = args.count.min(data.len());
    let idx: Vec<usize> = (0..n).collect();
    let (images, labels) = data.batch(&idx)?;
    let side = data.side();
    let grids = ActionGrids::new((side, side));
    let mut tape = sstn_tensor::Tape::new();
    let mut rng = stream(cfg.seed, streams::EVAL);
    let trace = match (&models.actor, cfg.frozen_action) {
        (Some(actor), None) => {
            let mut agent = PolicyAgent::new(actor, &mut rng, mode);
            rollout(
                &mut tape,
                &mut agent,
                None,
                cfg.env,
                &grids,
                &models.classifier,
                images.clone(),
                &labels,
                true,
            )?
        }
        (_, action) => {
            let mut agent = FixedAgent::new(action.unwrap_or(Action::Identity));
            rollout(
                &mut tape,
                &mut agent,
                None,
                cfg.env,
                &grids,
                &models.classifier,
                images.clone(),
                &labels,
                true,
            )?
        }
    };
    fs::create_dir_all(&args.out).map_err(|e| SstnError::io(&args.out, e))?;
    let plane = side * side;
    let mut entries = Vec::with_capacity(n);
    for b in 0..n {
        let mut names = Vec::new();
        let frames = std::iter::once(&images).chain(trace.frames.iter());
        for (t, frame) in frames.enumerate() {
            let name = format!("img{b:04}_t{t:03}.pgm");
            let pixels = &frame.data()[b * plane..(b + 1) * plane];
            let path = args.out.join(&name);
            fs::write(&path, encode_pgm(pixels, side, side)).map_err(|e| SstnError::io(&path, e))?;
            names.push(name);
        }
        entries.push(DumpEntry {
            index: b,
            label: data.labels[b],
            actions: trace.actions.iter().map(|step| step[b].index()).collect(),
            predictions: std::iter::once(trace.baseline_pred[b])
                .chain(trace.predictions.iter().map(|p| p[b]))
                .collect(),
            frames: names,
        });
    }
    let json_path = args.out.join("actions.json");
    write_text(&json_path, &serde_json::to_string_pretty(&entries).expect("plain struct"))?;
    println!(
        "wrote {} sequences of {} frames to {}",
        n,
        cfg.env.episode_length + 1,
        args.out.display()
    );
    Ok(())
}

pub const ABLATION_HEADER: &str =
    "reward,episode_length,seed,epoch,split,accuracy,mean_reward,policy_loss,value_loss,classifier_loss,wall_seconds";

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let rewards = parse_list(&args.rewards, |s| s.parse::<RewardKind>())?;
    let lengths = match &args.episode_lengths {
        Some(s) => parse_list(s, |p| number::<usize>(p, "episode length"))?,
        None => vec![args.flags.episode_length],
    };
    let seeds = match &args.seeds {
        Some(s) => parse_list(s, |p| number::<u64>(p, "seed"))?,
        None => vec![args.flags.seed],
    };
    if rewards.is_empty() || lengths.is_empty() || seeds.is_empty() {
        return Err(SstnError::Config("ablation needs at least one reward, length and seed".into()));
    }
    let (train, test) = data_prefixes(&args.flags)?;
    let side = side_of(&train)?;
    // validate every setting before spending time on any
    let mut settings = Vec::new();
    for &reward in &rewards {
        for &t in &lengths {
            for &seed in &seeds {
                let mut cfg = train_config(&args.flags, side)?;
                cfg.env.reward = reward;
                cfg.env.episode_length = t;
                cfg.seed = seed;
                cfg.validate()?;
                settings.push(cfg);
            }
        }
    }
    fs::create_dir_all(&args.out).map_err(|e| SstnError::io(&args.out, e))?;
    let mut curves = format!("{ABLATION_HEADER}\n");
    let mut finals = String::from("reward,episode_length,seed,final_test_accuracy\n");
    for cfg in settings {
        let tag = cfg.env.reward.as_str();
        let dir = args.out.join(format!("{tag}-T{}-seed{}", cfg.env.episode_length, cfg.seed));
        println!("ablation setting {}", dir.display());
        let (t, seed) = (cfg.env.episode_length, cfg.seed);
        let rows = run_training(new_manifest(cfg, false, train.clone(), test.clone()), &dir, 0)?;
        for r in &rows {
            curves.push_str(&format!("{tag},{t},{seed},{}\n", r.csv()));
        }
        let last = rows.iter().rev().find(|r| r.split == "test").map_or(f64::NAN, |r| r.accuracy);
        finals.push_str(&format!("{tag},{t},{seed},{last}\n"));
    }
    write_text(&args.out.join("ablation.csv"), &curves)?;
    write_text(&args.out.join("ablation-final.csv"), &finals)?;
    print!("{finals}");
    Ok(())
}

#[derive(Serialize)]
struct GapJson {
    depth: usize,
    images: usize,
    trained: GapSummary,
    random: GapSummary,
}

#[derive(Serialize)]
struct GapSummary {
    mean: f64,
    std_error: f64,
}

impl From<&GapReport> for GapSummary {
    fn from(g: &GapReport) -> Self {
        GapSummary {
            mean: g.mean,
            std_error: g.std_error,
        }
    }
}

pub fn cmd_oracle(args: &OracleArgs) -> Result<()> {
    let (manifest, models) = load_run(&args.run)?;
    let data = open_dataset(&args.data)?;
    let json = if let Some(count) = args.gap {
        let n = count.min(data.len());
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = data.batch(&idx)?;
        let cfg = eval_config(&manifest);
        let mut rng = stream(cfg.seed, streams::EVAL);
        let trained = match (&models.actor, cfg.frozen_action) {
            (Some(actor), None) => {
                let mut agent = PolicyAgent::new(actor, &mut rng, SampleMode::Greedy);
                oracle::policy_gap(&mut agent, &models.classifier, &images, &labels, args.depth)?
            }
            (_, action) => {
                let mut agent = FixedAgent::new(action.unwrap_or(Action::Identity));
                oracle::policy_gap(&mut agent, &models.classifier, &images, &labels, args.depth)?
            }
        };
        let mut random = RandomAgent::new(stream(cfg.seed, streams::ACTIONS));
        let random = oracle::policy_gap(&mut random, &models.classifier, &images, &labels, args.depth)?;
        serde_json::to_string_pretty(&GapJson {
            depth: args.depth,
            images: n,
            trained: (&trained).into(),
            random: (&random).into(),
        })
        .expect("plain struct")
    } else {
        if args.index >= data.len() {
            return Err(SstnError::Config(format!(
                "image index {} outside dataset of {}",
                args.index,
                data.len()
            )));
        }
        let (image, labels) = data.batch(&[args.index])?;
        let subset = match &args.subset {
            Some(s) => parse_list(s, parse_action)?,
            None => Action::ALL.to_vec(),
        };
        let result = match args.beam_width {
            Some(w) => oracle::beam_search(&image, labels[0], &models.classifier, args.depth, &subset, w)?,
            None => oracle::exhaustive_search(&image, labels[0], &models.classifier, args.depth, &subset)?,
        };
        serde_json::to_string_pretty(&OracleReport {
            best_sequence: result.best_sequence.iter().map(|a| a.index()).collect(),
            best_loss: result.best_loss,
            num_evaluated: result.num_evaluated,
        })
        .expect("plain struct")
    };
    if let Some(out) = &args.out {
        write_text(out, &json)?;
    }
    println!("{json}");
    Ok(())
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::RolloutDump(a) => cmd_rollout_dump(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Oracle(a) => cmd_oracle(a),
    }
}

pub fn exit_code(err: &SstnError) -> i32 {
    if err.is_usage() {
        2
    } else {
        1
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run(args: impl IntoIterator<Item = String>) -> i32 {
    let args = match expand_config(args.into_iter().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
