//! Mini-batch Adam training with windowed loss logging and checkpoints.

use std::io::{Read, Write};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::denoiser::RelationModel;
use crate::error::{Error, Result};
use crate::numerics::{derived_rng, read_checkpoint, write_checkpoint, Adam, Gradients, Real};
use crate::objectives::{loss_and_gradients, LossDraws, LossReport, TrainingExample};
use crate::schedule::VarianceSchedule;

const PURPOSE_BATCH: u64 = 0x7201;
const PURPOSE_DRAWS: u64 = 0x7202;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub kappa: f64,
    pub seed: u64,
    pub log_every: usize,
    pub ckpt_every: usize,
    /// Examples evaluated concurrently; results do not depend on it.
    pub workers: usize,
}

impl TrainOptions {
    pub fn from_config(c: &RunConfig, workers: usize) -> Self {
        Self {
            steps: c.train_steps,
            batch_size: c.batch_size,
            lambda: c.lambda,
            kappa: c.kappa,
            seed: c.seed,
            log_every: c.log_every,
            ckpt_every: c.ckpt_every,
            workers: workers.max(1),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOutcome {
    /// Window means logged every `log_every` steps (and at the final step).
    pub history: Vec<LossReport>,
}

impl TrainOutcome {
    pub fn first(&self) -> Option<&LossReport> {
        self.history.first()
    }

    pub fn last(&self) -> Option<&LossReport> {
        self.history.last()
    }
}

fn batch_gradients<F: Real>(
    model: &RelationModel<F>,
    examples: &[TrainingExample],
    schedule: &VarianceSchedule,
    opts: &TrainOptions,
    step: usize,
) -> Result<(LossReport, Gradients<F>)> {
    let mut brng = derived_rng(opts.seed, PURPOSE_BATCH, step as u64);
    let picks: Vec<usize> = (0..opts.batch_size)
        .map(|_| brng.random_range(0..examples.len()))
        .collect();
    let one = |(k, &i): (usize, &usize)| -> Result<(LossReport, Gradients<F>)> {
        let ex = &examples[i];
        let mut rng = derived_rng(opts.seed, PURPOSE_DRAWS, (step * opts.batch_size + k) as u64);
        let draws = LossDraws::sample(ex.len(), model.config.d, schedule.steps(), &mut rng)?;
        loss_and_gradients(model, ex, schedule, &draws, opts.lambda, opts.kappa)
    };
    let results: Vec<Result<(LossReport, Gradients<F>)>> = if opts.workers > 1 {
        picks.par_iter().enumerate().map(one).collect()
    } else {
        picks.iter().enumerate().map(one).collect()
    };
    let w = 1.0 / opts.batch_size as f64;
    let mut report = LossReport {
        step,
        ..Default::default()
    };
    let mut grads: Option<Gradients<F>> = None;
    for r in results {
        let (rep, g) = r?;
        report.accumulate(&rep, w);
        match grads.as_mut() {
            None => {
                let mut first = Gradients::default();
                first.accumulate(&g, F::from_f64c(w))?;
                grads = Some(first);
            }
            Some(acc) => acc.accumulate(&g, F::from_f64c(w))?,
        }
    }
    Ok((report, grads.expect("batch_size >= 1")))
}

/// Runs `opts.steps` Adam steps. `on_log` receives window means;
/// `on_checkpoint` is called every `ckpt_every` steps and after the last.
pub fn train<F: Real>(
    model: &mut RelationModel<F>,
    adam: &mut Adam<F>,
    examples: &[TrainingExample],
    schedule: &VarianceSchedule,
    opts: &TrainOptions,
    mut on_log: impl FnMut(&LossReport) -> Result<()>,
    mut on_checkpoint: impl FnMut(usize, &RelationModel<F>) -> Result<()>,
) -> Result<TrainOutcome> {
    if examples.is_empty() {
        return Err(Error::Invalid("no training examples".into()));
    }
    if opts.batch_size == 0 || opts.log_every == 0 || opts.ckpt_every == 0 {
        return Err(Error::config("batch_size", "batch size and intervals must be >= 1"));
    }
    for ex in examples {
        ex.cond.validate(&model.config)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::Invalid(e.to_string()))?;
    let mut outcome = TrainOutcome::default();
    let mut window = LossReport::default();
    let mut in_window = 0usize;
    for step in 1..=opts.steps {
        let (report, grads) =
            pool.install(|| batch_gradients(model, examples, schedule, opts, step))?;
        if !report.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        adam.step(&mut model.params, &grads)?;
        window.accumulate(&report, 1.0);
        window.t = report.t;
        in_window += 1;
        if step % opts.log_every == 0 || step == opts.steps {
            let mut mean = LossReport {
                step,
                ..Default::default()
            };
            mean.accumulate(&window, 1.0 / in_window as f64);
            on_log(&mean)?;
            outcome.history.push(mean);
            window = LossReport::default();
            in_window = 0;
        }
        if step % opts.ckpt_every == 0 || step == opts.steps {
            on_checkpoint(step, model)?;
        }
    }
    Ok(outcome)
}

/// Checkpoint header contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub step: usize,
    pub config: RunConfig,
    pub phrases: Vec<String>,
}

pub fn save_model<F: Real>(
    w: &mut impl Write,
    model: &RelationModel<F>,
    config: &RunConfig,
    step: usize,
) -> Result<()> {
    let header = CheckpointHeader {
        step,
        config: config.clone(),
        phrases: model.phrases.clone(),
    };
    write_checkpoint(w, &serde_json::to_value(&header)?, &model.params)
}

pub fn load_model(r: &mut impl Read) -> Result<(CheckpointHeader, RelationModel<f32>)> {
    let (header, params) = read_checkpoint(r)?;
    let header: CheckpointHeader =
        serde_json::from_value(header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let config = header.config.model();
    let model = RelationModel {
        config,
        params,
        phrases: header.phrases.clone(),
        sigma0: header.config.sigma0,
        tau_r: header.config.tau_r,
    };
    // catches missing or misshapen tensors
    model.vocabulary().map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((header, model))
}
