//! `relgen` command line: gen-data, train, sample, enhance, eval, selftest.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::denoiser::RelationModel;
use crate::error::{Error, Result};
use crate::evalsuite::{evaluate, load_predictions, save_predictions, CommonsensePrior, ScenePredictions};
use crate::numerics::Adam;
use crate::pipeline::{
    build_examples, enhance_scene, init_model, per_scene, predict_scenes, prior_baseline,
    random_baseline, sibling, DataBundle,
};
use crate::selftest::{self, SelftestOptions};
use crate::synthworld::SceneInstance;
use crate::train::{load_model, save_model, train, CheckpointHeader, TrainOptions};

#[derive(Debug, Parser)]
#[command(name = "relgen", version, about = "Relation generation by latent diffusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (JSON). Replaces the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "desk")]
    pub preset: String,
    /// Override one configuration field, e.g. `--set kappa=0.1`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, global = true, env = "RELGEN_SEED")]
    pub seed: Option<u64>,
    /// Threads for scene-parallel work; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Random,
    Prior,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic world, concept space, vocabulary and scenes.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the training scenes of a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Final checkpoint; intermediate ones go next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict triplets for every scene of a split.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Heldout)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-noise existing predictions, denoise them and re-rank with a prior.
    Enhance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// Prior table (JSON); defaults to the world's compatibility table.
        #[arg(long)]
        prior: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Heldout)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions (or a reference baseline) against a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "baseline")]
        predictions: Option<PathBuf>,
        #[arg(long, value_enum, conflicts_with = "predictions")]
        baseline: Option<Baseline>,
        #[arg(long, value_enum, default_value_t = Split::Heldout)]
        split: Split,
        /// Metrics file; the report is always printed.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in invariant and oracle checks.
    Selftest {
        #[command(flatten)]
        common: Common,
        /// Deliberately corrupt one schedule coefficient.
        #[arg(long, hide = true, value_name = "T")]
        corrupt_coef_x0: Option<usize>,
    },
}

impl Common {
    /// Preset or file, then `--set` overrides, then the seed.
    pub fn resolve(&self, base: Option<RunConfig>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, base) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(b)) => b,
            (None, None) => RunConfig::preset(&self.preset)?,
        };
        for o in &self.overrides {
            cfg.set(o)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        if self.workers == 0 {
            return Err(Error::config("workers", "must be >= 1"));
        }
        Ok(cfg)
    }
}

fn split_scenes(data: &DataBundle, split: Split) -> Result<&[SceneInstance]> {
    let scenes = match split {
        Split::Train => &data.train,
        Split::Heldout => &data.heldout,
    };
    if scenes.is_empty() {
        return Err(Error::Invalid(format!("the {split:?} split is empty")));
    }
    Ok(scenes)
}

fn write_checkpoint_file(path: &Path, model: &RelationModel<f32>, cfg: &RunConfig, step: usize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    save_model(&mut w, model, cfg, step)?;
    w.flush()?;
    Ok(())
}

fn load_checkpoint(path: &Path, common: &Common) -> Result<(RunConfig, RelationModel<f32>)> {
    let mut r = std::io::BufReader::new(File::open(path)?);
    let (header, model): (CheckpointHeader, _) = load_model(&mut r)?;
    let cfg = common.resolve(Some(header.config.clone()))?;
    if cfg.model() != header.config.model() || cfg.sigma0 != header.config.sigma0 {
        return Err(Error::config(
            "config",
            "model shape differs from the checkpoint's configuration",
        ));
    }
    let mut model = model;
    model.tau_r = cfg.tau_r;
    Ok((cfg, model))
}

fn gen_data(common: &Common, out: &Path) -> Result<()> {
    let cfg = common.resolve(None)?;
    let data = DataBundle::generate(&cfg, cfg.seed)?;
    data.save(out, cfg.sigma0)?;
    eprintln!(
        "wrote {} training and {} held-out scenes to {}",
        data.train.len(),
        data.heldout.len(),
        out.display()
    );
    Ok(())
}

fn train_cmd(common: &Common, data_path: &Path, out: &Path) -> Result<()> {
    let cfg = common.resolve(None)?;
    let data = DataBundle::load(data_path)?;
    let examples = build_examples(&data.train, &data.space, &data.world, &cfg)?;
    let mut model = init_model(&cfg, &data.space, &data.world)?;
    let schedule = cfg.schedule_spec().build()?;
    let mut adam = Adam::new(cfg.adam());
    let opts = TrainOptions::from_config(&cfg, common.workers);
    let mut log = BufWriter::new(File::create(sibling(out, "log.jsonl"))?);
    let outcome = train(
        &mut model,
        &mut adam,
        &examples,
        &schedule,
        &opts,
        |r| {
            println!("{}", r.log_line());
            writeln!(log, "{}", r.log_line())?;
            Ok(())
        },
        |step, m| {
            let path = if step == opts.steps {
                out.to_path_buf()
            } else {
                sibling(out, &format!("step{step}.ckpt"))
            };
            write_checkpoint_file(&path, m, &cfg, step)
        },
    )?;
    log.flush()?;
    if let (Some(a), Some(b)) = (outcome.first(), outcome.last()) {
        eprintln!("l_simple {:.4} -> {:.4}", a.l_simple, b.l_simple);
    }
    Ok(())
}

fn sample_cmd(common: &Common, ckpt: &Path, data_path: &Path, split: Split, out: &Path) -> Result<()> {
    let (cfg, model) = load_checkpoint(ckpt, common)?;
    let data = DataBundle::load(data_path)?;
    let scenes = split_scenes(&data, split)?;
    let schedule = cfg.schedule_spec().build()?;
    let preds = predict_scenes(scenes, &model, &schedule, &data.space, &cfg, common.workers)?;
    save_predictions(out, &preds)?;
    eprintln!("wrote predictions for {} scenes to {}", preds.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn enhance_cmd(
    common: &Common,
    ckpt: &Path,
    data_path: &Path,
    predictions: &Path,
    prior: Option<&Path>,
    split: Split,
    out: &Path,
) -> Result<()> {
    let (cfg, model) = load_checkpoint(ckpt, common)?;
    let data = DataBundle::load(data_path)?;
    let scenes = split_scenes(&data, split)?;
    let prior = match prior {
        Some(p) => CommonsensePrior::load(p)?,
        None => CommonsensePrior::from_world(&data.world)?,
    };
    let existing = load_predictions(predictions)?;
    let schedule = cfg.schedule_spec().build()?;
    let empty = |id| ScenePredictions {
        scene_id: id,
        triplets: Vec::new(),
    };
    let preds = per_scene(scenes, common.workers, |s| {
        let e = existing
            .iter()
            .find(|p| p.scene_id == s.id)
            .cloned()
            .unwrap_or_else(|| empty(s.id));
        enhance_scene(s, &e, &model, &schedule, &data.space, &prior, &cfg)
    })?;
    save_predictions(out, &preds)?;
    eprintln!("wrote enhanced predictions for {} scenes to {}", preds.len(), out.display());
    Ok(())
}

fn eval_cmd(
    common: &Common,
    data_path: &Path,
    predictions: Option<&Path>,
    baseline: Option<Baseline>,
    split: Split,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = common.resolve(None)?;
    let data = DataBundle::load(data_path)?;
    let scenes = split_scenes(&data, split)?;
    let preds = match (predictions, baseline) {
        (Some(p), _) => load_predictions(p)?,
        (None, Some(Baseline::Random)) => random_baseline(scenes, &data.world, cfg.seq_len, cfg.seed)?,
        (None, Some(Baseline::Prior)) => {
            prior_baseline(scenes, &CommonsensePrior::from_world(&data.world)?, cfg.seq_len)?
        }
        (None, None) => return Err(Error::Invalid("eval needs --predictions or --baseline".into())),
    };
    let report = evaluate(&preds, scenes, &data.world, &data.space)?;
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(path) = out {
        std::fs::write(path, text)?;
    }
    Ok(())
}

fn selftest_cmd(common: &Common, corrupt: Option<usize>) -> Result<bool> {
    let opts = SelftestOptions {
        seed: common.seed.unwrap_or(0),
        corrupt_coef_x0: corrupt,
    };
    let results = selftest::run(&opts);
    let passed = results.iter().filter(|r| r.passed).count();
    for r in &results {
        println!("{}", r.line());
    }
    println!("{passed}/{} checks passed", results.len());
    Ok(passed == results.len())
}

/// Runs one parsed command; `Ok(false)` means "ran, but checks failed".
pub fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { common, out } => gen_data(&common, &out).map(|_| true),
        Command::Train { common, data, out } => train_cmd(&common, &data, &out).map(|_| true),
        Command::Sample {
            common,
            checkpoint,
            data,
            split,
            out,
        } => sample_cmd(&common, &checkpoint, &data, split, &out).map(|_| true),
        Command::Enhance {
            common,
            checkpoint,
            data,
            predictions,
            prior,
            split,
            out,
        } => enhance_cmd(&common, &checkpoint, &data, &predictions, prior.as_deref(), split, &out)
            .map(|_| true),
        Command::Eval {
            common,
            data,
            predictions,
            baseline,
            split,
            out,
        } => eval_cmd(&common, &data, predictions.as_deref(), baseline, split, out.as_deref()).map(|_| true),
        Command::Selftest {
            common,
            corrupt_coef_x0,
        } => selftest_cmd(&common, corrupt_coef_x0),
    }
}

/// Exit codes: 0 success, 1 validation error, 2 runtime error.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
