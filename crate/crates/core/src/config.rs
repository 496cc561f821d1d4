//! Run configuration: one flat JSON object, presets, and `key=value`
//! overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::matcher::SimilarityMode;
use crate::numerics::AdamConfig;
use crate::sampler::SamplerConfig;
use crate::schedule::{ScheduleKind, ScheduleSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    // model
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub tau_hidden: usize,
    pub seq_len: usize,
    // diffusion
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
    pub sigma1: f64,
    pub sigma0: f64,
    pub tau_r: f64,
    // objective and optimiser
    pub lambda: f64,
    pub kappa: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub train_steps: usize,
    pub log_every: usize,
    pub ckpt_every: usize,
    // inference
    pub ddim_steps: usize,
    pub eta: f64,
    pub t_prime: usize,
    pub k: usize,
    pub similarity: SimilarityMode,
    // synthetic world
    pub n_scenes: usize,
    pub n_heldout: usize,
    pub nu: f64,
    pub eval_nu: f64,
    pub pseudo_top_k: usize,
    pub world_seed: u64,
    pub seed: u64,
}

impl RunConfig {
    /// Small enough to train in about a minute on one CPU core.
    pub fn desk() -> Self {
        let sched = ScheduleSpec::scaled_linear(200);
        Self {
            d: 32,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 128,
            tau_hidden: 128,
            seq_len: 8,
            steps: 200,
            schedule: ScheduleKind::Linear,
            beta_min: sched.beta_min,
            beta_max: sched.beta_max,
            sigma1: 1e-4,
            sigma0: 0.1,
            tau_r: 1.0,
            lambda: 1.0,
            kappa: 0.05,
            lr: 3e-3,
            batch_size: 8,
            train_steps: 3000,
            log_every: 100,
            ckpt_every: 1000,
            ddim_steps: 50,
            eta: 0.0,
            t_prime: 25,
            k: 1,
            similarity: SimilarityMode::UnionVisual,
            n_scenes: 512,
            n_heldout: 128,
            nu: 0.05,
            eval_nu: 0.0,
            pseudo_top_k: 1,
            world_seed: 1,
            seed: 0,
        }
    }

    /// Full-size settings (d = 512, 6 layers, L = 32, T = 2000, 40k steps).
    pub fn full() -> Self {
        let sched = ScheduleSpec::scaled_linear(2000);
        Self {
            d: 512,
            n_layers: 6,
            n_heads: 8,
            ffn_dim: 2048,
            tau_hidden: 512,
            seq_len: 32,
            steps: 2000,
            beta_min: sched.beta_min,
            beta_max: sched.beta_max,
            lr: 1e-4,
            batch_size: 128,
            train_steps: 40_000,
            t_prime: 250,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::config("preset", format!("unknown preset {other:?}"))),
        }
    }

    pub fn model(&self) -> DenoiserConfig {
        DenoiserConfig {
            d: self.d,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            tau_hidden: self.tau_hidden,
            seq_len: self.seq_len,
            d_feat: self.d,
            steps: self.steps,
        }
    }

    pub fn schedule_spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            steps: self.steps,
            kind: self.schedule,
            beta_min: self.beta_min,
            beta_max: self.beta_max,
            sigma1: self.sigma1,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            n_steps: self.ddim_steps,
            eta: self.eta,
            t_prime: self.t_prime,
            k: self.k,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        if self.steps < 2 {
            return Err(Error::config("steps", "must be >= 2"));
        }
        self.schedule_spec().build()?;
        self.sampler().validate(self.steps)?;
        let positive = [
            ("sigma1", self.sigma1),
            ("tau_r", self.tau_r),
            ("kappa", self.kappa),
            ("lr", self.lr),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be > 0, got {v}")));
            }
        }
        let nonneg = [
            ("sigma0", self.sigma0),
            ("lambda", self.lambda),
            ("nu", self.nu),
            ("eval_nu", self.eval_nu),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be >= 0, got {v}")));
            }
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("train_steps", self.train_steps),
            ("log_every", self.log_every),
            ("ckpt_every", self.ckpt_every),
            ("n_scenes", self.n_scenes),
            ("pseudo_top_k", self.pseudo_top_k),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Applies `key=value`; the value is read as JSON, or as a bare string
    /// when it does not parse.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config("set", format!("expected key=value, got {assignment:?}")))?;
        let key = key.trim();
        let mut obj = serde_json::to_value(&*self)?;
        let map = obj.as_object_mut().expect("config serialises to an object");
        if !map.contains_key(key) {
            return Err(Error::config(key, "unknown configuration key"));
        }
        let value = serde_json::from_str(raw.trim())
            .unwrap_or_else(|_| serde_json::Value::String(raw.trim().to_string()));
        map.insert(key.to_string(), value);
        *self = serde_json::from_value(obj).map_err(|e| Error::config(key, e.to_string()))?;
        Ok(())
    }
}
