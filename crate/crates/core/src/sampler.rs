//! Deterministic DDIM generation of relation latents, and enhancement of
//! existing relations by partial re-noising.

use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditionSet, RelationModel};
use crate::error::{Error, Result};
use crate::numerics::{gaussian, standard_normal, Real, Rng, Tensor};
use crate::relvocab::{Provenance, RelationSequence};
use crate::schedule::VarianceSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub eta: f64,
    /// Corruption depth for enhancement.
    pub t_prime: usize,
    /// Copies of each pair's relations in an enhancement sequence.
    pub k: usize,
}

impl SamplerConfig {
    pub fn desk() -> Self {
        Self {
            n_steps: 50,
            eta: 0.0,
            t_prime: 25,
            k: 1,
        }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.n_steps == 0 || self.n_steps > steps {
            return Err(Error::config("ddim_steps", format!("must be in 1..={steps}")));
        }
        if self.t_prime > steps {
            return Err(Error::config("t_prime", format!("must be <= T = {steps}")));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::config("eta", "must be >= 0"));
        }
        if self.k == 0 {
            return Err(Error::config("k", "must be >= 1"));
        }
        Ok(())
    }
}

/// `n_steps` evenly spaced steps from `T` down to 1.
pub fn ddim_timesteps(steps: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 || n_steps > steps {
        return Err(Error::config(
            "ddim_steps",
            format!("{n_steps} steps requested from a {steps}-step schedule"),
        ));
    }
    if n_steps == 1 {
        return Ok(vec![steps]);
    }
    let span = (steps - 1) as f64 / (n_steps - 1) as f64;
    Ok((0..n_steps)
        .map(|i| steps - (i as f64 * span).round() as usize)
        .collect())
}

/// One update from `t` to `t_prev`:
/// `eps = (x_t − sqrt(ab_t) x0) / sqrt(1 − ab_t)`,
/// `x_prev = sqrt(ab_prev) x0 + sqrt(1 − ab_prev − s²) eps + s z` with
/// `s = eta · sqrt((1 − ab_prev)/(1 − ab_t) · (1 − ab_t/ab_prev))`.
pub fn ddim_step<F: Real>(
    x_t: &Tensor<F>,
    x0_hat: &Tensor<F>,
    t: usize,
    t_prev: usize,
    schedule: &VarianceSchedule,
    eta: f64,
    rng: &mut Rng,
) -> Result<Tensor<F>> {
    if t <= t_prev {
        return Err(Error::Invalid(format!("ddim_step needs t > t_prev, got {t} -> {t_prev}")));
    }
    schedule.check_t(t, 1)?;
    if x_t.shape() != x0_hat.shape() {
        return Err(Error::Shape("ddim_step: x_t vs x0_hat".into()));
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_p = schedule.alpha_bar(t_prev);
    let sigma = if eta > 0.0 {
        eta * ((1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p)).max(0.0).sqrt()
    } else {
        0.0
    };
    let (sa_t, sb_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let c_x0 = F::from_f64c(ab_p.sqrt());
    let c_eps = F::from_f64c((1.0 - ab_p - sigma * sigma).max(0.0).sqrt());
    let (sa_t, sb_t) = (F::from_f64c(sa_t), F::from_f64c(sb_t));
    let s = F::from_f64c(sigma);
    let mut out = x_t.zip_with(x0_hat, |x, x0| {
        let eps = (x - sa_t * x0) / sb_t;
        c_x0 * x0 + c_eps * eps
    })?;
    if sigma > 0.0 {
        for v in out.data_mut() {
            *v += s * standard_normal::<F>(rng);
        }
    }
    Ok(out)
}

/// A decoded sequence with its per-slot rounding distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub sequence: RelationSequence,
    pub distributions: Vec<Vec<f64>>,
    /// Final latent (`L × d`).
    pub x0: Tensor<f64>,
}

fn run_chain<F: Real>(
    mut x: Tensor<F>,
    ts: &[usize],
    cond: &ConditionSet,
    model: &RelationModel<F>,
    schedule: &VarianceSchedule,
    eta: f64,
    rng: &mut Rng,
) -> Result<Generated> {
    let enc = model.encode_conditions(cond)?;
    for (i, &t) in ts.iter().enumerate() {
        let x0_hat = model.denoise_encoded(&x, t, &enc, &cond.mask)?;
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        x = ddim_step(&x, &x0_hat, t, t_prev, schedule, eta, rng)?;
    }
    decode(model, x)
}

fn decode<F: Real>(model: &RelationModel<F>, x: Tensor<F>) -> Result<Generated> {
    let vocab = model.vocabulary()?;
    let (sequence, dists) = vocab.decode_with_distributions(&x, model.tau_r)?;
    Ok(Generated {
        sequence,
        distributions: dists
            .into_iter()
            .map(|d| d.into_iter().map(|p| p.as_f64()).collect())
            .collect(),
        x0: x.cast(),
    })
}

/// Generates `L` relations for `cond` from Gaussian noise.
pub fn generate<F: Real>(
    cond: &ConditionSet,
    model: &RelationModel<F>,
    schedule: &VarianceSchedule,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Generated> {
    cfg.validate(schedule.steps())?;
    cond.validate(&model.config)?;
    let ts = ddim_timesteps(schedule.steps(), cfg.n_steps)?;
    let x = gaussian(&[model.config.seq_len, model.config.d], rng);
    run_chain(x, &ts, cond, model, schedule, cfg.eta, rng)
}

/// Re-noises `existing` to `t_prime` and denoises it back over the steps of
/// the DDIM grid below `t_prime`. Slot `i` of the output stays with the pair
/// of slot `i` of the input.
pub fn enhance<F: Real>(
    existing: &RelationSequence,
    cond: &ConditionSet,
    model: &RelationModel<F>,
    schedule: &VarianceSchedule,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Generated> {
    cfg.validate(schedule.steps())?;
    cond.validate(&model.config)?;
    let vocab = model.vocabulary()?;
    existing.validate(vocab.len(), model.config.seq_len)?;
    let x0 = vocab.embed_with_sigma(existing, 0.0, rng)?;
    if cfg.t_prime == 0 {
        return decode(model, x0);
    }
    let eps = gaussian(x0.shape(), rng);
    let x = schedule.q_sample(&x0, cfg.t_prime, &eps)?;
    let mut ts = vec![cfg.t_prime];
    ts.extend(
        ddim_timesteps(schedule.steps(), cfg.n_steps)?
            .into_iter()
            .filter(|&t| t < cfg.t_prime),
    );
    run_chain(x, &ts, cond, model, schedule, cfg.eta, rng)
}

/// Gives each pair `k` slots that cycle through its relations, then repeats
/// that layout until `l` slots are filled. Returns the sequence and the pair
/// of each slot.
pub fn enhancement_sequence(
    relations: &[(usize, usize)],
    k: usize,
    l: usize,
) -> Result<(RelationSequence, Vec<usize>)> {
    if relations.is_empty() || k == 0 {
        return Err(Error::Invalid("enhancement needs relations and k >= 1".into()));
    }
    let mut pairs: Vec<usize> = relations.iter().map(|r| r.1).collect();
    pairs.sort_unstable();
    pairs.dedup();
    let mut layout = Vec::new();
    for &p in &pairs {
        let toks: Vec<usize> = relations.iter().filter(|r| r.1 == p).map(|r| r.0).collect();
        for c in 0..k {
            layout.push((toks[c % toks.len()], p));
        }
    }
    let slots: Vec<(usize, usize)> = layout.iter().cycle().take(l).copied().collect();
    let seq = RelationSequence::new(
        slots.iter().map(|s| s.0).collect(),
        vec![Provenance::Gt; slots.len()],
    )?;
    Ok((seq, slots.iter().map(|s| s.1).collect()))
}
