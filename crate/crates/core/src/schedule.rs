//! Variance schedules, forward noising, and the Gaussian forward posterior.
//!
//! All tables are indexed by the diffusion step `t = 0..=T`; index 0 holds
//! the conventions `beta = 0` and `alpha_bar = 1`, so the `t = 1` posterior
//! mean collapses onto `x0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// `beta` interpolated linearly from `beta_min` to `beta_max`.
    Linear,
    /// `alpha_bar(t) = 1 − sqrt(t/T + 1e-4)`, with the implied betas clipped
    /// into `[beta_min, beta_max]`.
    Sqrt,
}

/// Parameters a schedule is built from; stored in checkpoint headers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Standard deviation assigned to the `t = 1` reverse density.
    pub sigma1: f64,
}

impl ScheduleSpec {
    /// Linear `[1e-4, 0.02]` rescaled by `1000 / steps`.
    pub fn scaled_linear(steps: usize) -> Self {
        let scale = 1000.0 / steps.max(1) as f64;
        Self {
            steps,
            kind: ScheduleKind::Linear,
            beta_min: 1e-4 * scale,
            beta_max: 0.02 * scale,
            sigma1: 1e-4,
        }
    }

    pub fn build(&self) -> Result<VarianceSchedule> {
        build_schedule(self.steps, self.kind, self.beta_min, self.beta_max)
            .map(|s| s.with_sigma1(self.sigma1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceSchedule {
    steps: usize,
    sigma1: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma_tilde_sq: Vec<f64>,
    coef_x0: Vec<f64>,
    coef_xt: Vec<f64>,
}

pub fn build_schedule(
    steps: usize,
    kind: ScheduleKind,
    beta_min: f64,
    beta_max: f64,
) -> Result<VarianceSchedule> {
    if steps == 0 {
        return Err(Error::Schedule("T must be at least 1".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Schedule(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
        ScheduleKind::Sqrt => {
            let ab = |t: usize| 1.0 - (t as f64 / steps as f64 + 1e-4).sqrt();
            let mut prev = 1.0;
            (1..=steps)
                .map(|t| {
                    let cur = ab(t).max(1e-12);
                    let b = (1.0 - cur / prev).clamp(beta_min, beta_max);
                    prev *= 1.0 - b;
                    b
                })
                .collect()
        }
    };
    VarianceSchedule::from_betas(&betas)
}

impl VarianceSchedule {
    /// Builds the tables from explicit `beta_1..beta_T`.
    ///
    /// `beta_1` must lie in `(0, 1)`; later betas in `[0, 1)`. A zero beta is a
    /// degenerate identity step (kept for testing the posterior limit).
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Schedule("T must be at least 1".into()));
        }
        if !(betas[0] > 0.0 && betas[0] < 1.0) {
            return Err(Error::Schedule(format!("beta_1 = {} outside (0, 1)", betas[0])));
        }
        if let Some(b) = betas.iter().find(|b| !(**b >= 0.0 && **b < 1.0)) {
            return Err(Error::Schedule(format!("beta {b} outside [0, 1)")));
        }
        let steps = betas.len();
        let mut beta = vec![0.0; steps + 1];
        beta[1..].copy_from_slice(betas);
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = vec![1.0; steps + 1];
        for t in 1..=steps {
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        }
        let mut sigma_tilde_sq = vec![0.0; steps + 1];
        let mut coef_x0 = vec![0.0; steps + 1];
        let mut coef_xt = vec![0.0; steps + 1];
        for t in 1..=steps {
            let denom = 1.0 - alpha_bar[t];
            sigma_tilde_sq[t] = (1.0 - alpha_bar[t - 1]) / denom * beta[t];
            coef_x0[t] = alpha_bar[t - 1].sqrt() * beta[t] / denom;
            coef_xt[t] = alpha[t].sqrt() * (1.0 - alpha_bar[t - 1]) / denom;
        }
        let sigma1 = 1e-4;
        sigma_tilde_sq[1] = sigma1 * sigma1;
        Ok(Self {
            steps,
            sigma1,
            beta,
            alpha,
            alpha_bar,
            sigma_tilde_sq,
            coef_x0,
            coef_xt,
        })
    }

    pub fn with_sigma1(mut self, sigma1: f64) -> Self {
        self.sigma1 = sigma1;
        self.sigma_tilde_sq[1] = sigma1 * sigma1;
        self
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn sigma1(&self) -> f64 {
        self.sigma1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// `alpha_bar(0) = 1` by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Posterior variance; for `t = 1` this is `sigma1²`.
    pub fn sigma_tilde_sq(&self, t: usize) -> f64 {
        self.sigma_tilde_sq[t]
    }

    pub fn coef_x0(&self, t: usize) -> f64 {
        self.coef_x0[t]
    }

    pub fn coef_xt(&self, t: usize) -> f64 {
        self.coef_xt[t]
    }

    /// Test hook: overwrite one posterior coefficient.
    pub fn corrupt_coef_x0(&mut self, t: usize, value: f64) {
        self.coef_x0[t] = value;
    }

    pub fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps {
            Err(Error::TimestepOutOfRange {
                t,
                lo,
                hi: self.steps,
            })
        } else {
            Ok(())
        }
    }

    /// `x_t = sqrt(alpha_bar_t)·x0 + sqrt(1 − alpha_bar_t)·eps`.
    pub fn q_sample<F: Real>(&self, x0: &Tensor<F>, t: usize, eps: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_t(t, 1)?;
        if x0.shape() != eps.shape() {
            return Err(Error::Shape("q_sample: noise shape".into()));
        }
        let a = F::from_f64c(self.alpha_bar[t].sqrt());
        let b = F::from_f64c((1.0 - self.alpha_bar[t]).sqrt());
        x0.zip_with(eps, |x, e| a * x + b * e)
    }

    /// Mean and variance of `q(x_{t−1} | x_t, x0)`.
    ///
    /// At `t = 1` the mean is exactly `x0` and the variance is `sigma1²`.
    pub fn posterior_mean_var<F: Real>(
        &self,
        x_t: &Tensor<F>,
        x0: &Tensor<F>,
        t: usize,
    ) -> Result<(Tensor<F>, f64)> {
        let mean = self.combine(x0, x_t, t)?;
        Ok((mean, self.sigma_tilde_sq[t]))
    }

    /// Reverse-process mean from an `x0` prediction.
    pub fn mu_from_x0_hat<F: Real>(
        &self,
        x0_hat: &Tensor<F>,
        x_t: &Tensor<F>,
        t: usize,
    ) -> Result<Tensor<F>> {
        self.combine(x0_hat, x_t, t)
    }

    fn combine<F: Real>(&self, x0: &Tensor<F>, x_t: &Tensor<F>, t: usize) -> Result<Tensor<F>> {
        self.check_t(t, 1)?;
        let a = F::from_f64c(self.coef_x0[t]);
        let b = F::from_f64c(self.coef_xt[t]);
        x0.zip_with(x_t, |x, y| a * x + b * y)
    }
}
