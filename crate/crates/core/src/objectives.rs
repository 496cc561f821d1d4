//! Training losses: the simplified diffusion objective with its anchor and
//! rounding terms, the auxiliary matching loss, and a variational-bound
//! estimator used for verification.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditionSet, RelationModel, EMB_TABLE};
use crate::error::{Error, Result};
use crate::matcher::MatchingMatrix;
use crate::numerics::{gaussian, Gradients, Graph, ParamStore, Real, Rng, Tensor, Var};
use crate::relvocab::{Provenance, RelationSequence};
use crate::schedule::VarianceSchedule;

/// One padded training instance.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub sequence: RelationSequence,
    pub cond: ConditionSet,
    /// `L × N`.
    pub matching: MatchingMatrix,
}

impl TrainingExample {
    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }

    /// 1 for slots that carry a relation (ground truth or pseudo label).
    pub fn slot_weights(&self) -> Vec<f64> {
        self.sequence
            .provenance
            .iter()
            .map(|p| if *p == Provenance::Pad { 0.0 } else { 1.0 })
            .collect()
    }
}

/// Anything that maps `(x_t, t, conditions)` to an `x0` estimate on the tape.
pub trait X0Predictor<F: Real> {
    /// Must contain [`EMB_TABLE`].
    fn params(&self) -> &ParamStore<F>;
    fn tau_r(&self) -> f64;
    fn sigma0(&self) -> f64;
    fn encode(&self, g: &mut Graph<F>, cond: &ConditionSet) -> Result<Var>;
    fn predict(
        &self,
        g: &mut Graph<F>,
        x_t: Var,
        t: usize,
        encoded: Var,
        mask: &[bool],
    ) -> Result<Var>;
}

impl<F: Real> X0Predictor<F> for RelationModel<F> {
    fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    fn tau_r(&self) -> f64 {
        self.tau_r
    }

    fn sigma0(&self) -> f64 {
        self.sigma0
    }

    fn encode(&self, g: &mut Graph<F>, cond: &ConditionSet) -> Result<Var> {
        self.encode_conditions_graph(g, cond)
    }

    fn predict(
        &self,
        g: &mut Graph<F>,
        x_t: Var,
        t: usize,
        encoded: Var,
        mask: &[bool],
    ) -> Result<Var> {
        self.denoise_graph(g, x_t, t, encoded, mask)
    }
}

/// All randomness consumed by one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossDraws {
    /// Diffusion step for the main term, in `2..=T`.
    pub t: usize,
    /// Step for the matching term, in `0..=T`.
    pub t_match: usize,
    /// Embedding-step noise (`L × d`).
    pub eps0: Tensor<f64>,
    /// Forward noise at `t`; also reused at `t_match`.
    pub eps_t: Tensor<f64>,
    /// Forward noise at `t = 1`.
    pub eps_1: Tensor<f64>,
}

impl LossDraws {
    pub fn sample(l: usize, d: usize, steps: usize, rng: &mut Rng) -> Result<Self> {
        if steps < 2 {
            return Err(Error::config("steps", "training needs T >= 2"));
        }
        let t = rng.random_range(2..=steps);
        let t_match = rng.random_range(0..=steps);
        Ok(Self {
            t,
            t_match,
            eps0: gaussian(&[l, d], rng),
            eps_t: gaussian(&[l, d], rng),
            eps_1: gaussian(&[l, d], rng),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub t: usize,
    pub t_match: usize,
    pub l_simple: f64,
    pub l_t_term: f64,
    pub l_anchor_term: f64,
    pub l_round: f64,
    pub l_match: f64,
    pub l_total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [
            self.l_simple,
            self.l_t_term,
            self.l_anchor_term,
            self.l_round,
            self.l_match,
            self.l_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Training-log line.
    pub fn log_line(&self) -> String {
        serde_json::json!({
            "step": self.step,
            "l_simple": self.l_simple,
            "l_round": self.l_round,
            "l_match": self.l_match,
            "l_total": self.l_total,
        })
        .to_string()
    }

    /// Running sum helper: `self += w · other` on the loss fields.
    pub fn accumulate(&mut self, other: &LossReport, w: f64) {
        self.l_simple += w * other.l_simple;
        self.l_t_term += w * other.l_t_term;
        self.l_anchor_term += w * other.l_anchor_term;
        self.l_round += w * other.l_round;
        self.l_match += w * other.l_match;
        self.l_total += w * other.l_total;
    }
}

/// Tape handles of every loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub t_term: Var,
    pub anchor: Var,
    pub round: Var,
    pub simple: Var,
    pub matching: Option<Var>,
    pub total: Var,
}

/// Noised latent `sqrt(ab)·x0 + sqrt(1 − ab)·eps` on the tape.
fn q_sample_graph<F: Real>(
    g: &mut Graph<F>,
    schedule: &VarianceSchedule,
    x0: Var,
    t: usize,
    eps: &Tensor<f64>,
) -> Result<Var> {
    schedule.check_t(t, 1)?;
    let ab = schedule.alpha_bar(t);
    let sx = g.scale(x0, F::from_f64c(ab.sqrt()))?;
    let noise = g.constant(eps.cast::<F>().scale(F::from_f64c((1.0 - ab).sqrt())));
    g.add(sx, noise)
}

/// Records the full objective on `g`. `lambda = 0` skips the matching branch.
pub fn build_loss<F: Real, P: X0Predictor<F>>(
    g: &mut Graph<F>,
    model: &P,
    ex: &TrainingExample,
    schedule: &VarianceSchedule,
    draws: &LossDraws,
    lambda: f64,
    kappa: f64,
) -> Result<LossVars> {
    if !(lambda >= 0.0) {
        return Err(Error::config("lambda", "must be >= 0"));
    }
    if !(kappa > 0.0) {
        return Err(Error::config("kappa", "must be > 0"));
    }
    schedule.check_t(draws.t, 2)?;
    schedule.check_t(draws.t_match, 0)?;
    let l = ex.len();
    let table = g.param(model.params(), EMB_TABLE)?;
    let d = g.value(table).cols();
    if draws.eps0.shape() != [l, d] || draws.eps_t.shape() != [l, d] || draws.eps_1.shape() != [l, d]
    {
        return Err(Error::Shape("loss draws do not match L × d".into()));
    }

    // embedding step: x0 = Emb(v) + sigma0 · eps0
    let emb = g.embedding(table, &ex.sequence.tokens)?;
    let s0 = model.sigma0();
    let noise0 = g.constant(draws.eps0.cast::<F>().scale(F::from_f64c(s0)));
    let x0 = g.add(emb, noise0)?;

    let encoded = model.encode(g, &ex.cond)?;
    let mask = &ex.cond.mask;

    let x_t = q_sample_graph(g, schedule, x0, draws.t, &draws.eps_t)?;
    let f_t = model.predict(g, x_t, draws.t, encoded, mask)?;
    let diff = g.sub(x0, f_t)?;
    let t_term = g.mean_square(diff)?;

    let x_1 = q_sample_graph(g, schedule, x0, 1, &draws.eps_1)?;
    let f_1 = model.predict(g, x_1, 1, encoded, mask)?;
    let diff1 = g.sub(emb, f_1)?;
    let anchor = g.mean_square(diff1)?;

    // rounding: -log softmax(-||x0 - Emb(w)||² / tau_r)[v]
    let nd = g.neg_sq_dist(x0, table)?;
    let logits = g.scale(nd, F::from_f64c(1.0 / model.tau_r()))?;
    let weights: Vec<F> = ex.slot_weights().into_iter().map(F::from_f64c).collect();
    let round = g.cross_entropy_rows(logits, &ex.sequence.tokens, &weights)?;

    let s = g.add(t_term, anchor)?;
    let simple = g.add(s, round)?;

    let (matching, total) = if lambda > 0.0 {
        let x_m = if draws.t_match == 0 {
            x0
        } else {
            q_sample_graph(g, schedule, x0, draws.t_match, &draws.eps_t)?
        };
        let lm = matching_loss_graph(g, x_m, encoded, &ex.matching, &weights, ex.cond.n, kappa)?;
        let weighted = g.scale(lm, F::from_f64c(lambda))?;
        (Some(lm), g.add(simple, weighted)?)
    } else {
        (None, simple)
    };

    Ok(LossVars {
        t_term,
        anchor,
        round,
        simple,
        matching,
        total,
    })
}

/// BCE between `sigmoid(cos(x_t, τ(y)) / kappa)` and the matching matrix,
/// averaged over weighted relation rows and the `n` real pair columns.
pub fn matching_loss_graph<F: Real>(
    g: &mut Graph<F>,
    x_t: Var,
    encoded: Var,
    m: &MatchingMatrix,
    row_weights: &[F],
    n: usize,
    kappa: f64,
) -> Result<Var> {
    let l = g.value(x_t).rows();
    let k = g.value(encoded).rows();
    if m.rows() != l || (l > 0 && m.cols() != n) || n > k || row_weights.len() != l {
        return Err(Error::Shape(format!(
            "matching matrix {}×{} vs L={l}, N={n}",
            m.rows(),
            m.cols()
        )));
    }
    let xn = g.normalize_rows(x_t)?;
    let en = g.normalize_rows(encoded)?;
    let s = g.matmul_bt(xn, en)?;
    let logits = g.scale(s, F::from_f64c(1.0 / kappa))?;
    let mut targets = vec![F::zero(); l * k];
    let mut weights = vec![F::zero(); l * k];
    for i in 0..l {
        for j in 0..n {
            targets[i * k + j] = F::from_f64c(m.get(i, j) as f64);
            weights[i * k + j] = row_weights[i];
        }
    }
    g.bce_with_logits(logits, &targets, &weights)
}

/// Standalone matching loss on plain tensors (`x_t: L × d`, `projected: N' × d`
/// with `N' ≥ N`).
pub fn loss_match(
    x_t: &Tensor<f64>,
    projected: &Tensor<f64>,
    m: &MatchingMatrix,
    kappa: f64,
) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(Error::config("kappa", "must be > 0"));
    }
    let mut g = Graph::new();
    let x = g.constant(x_t.clone());
    let e = g.constant(projected.clone());
    let w = vec![1.0; x_t.rows()];
    let v = matching_loss_graph(&mut g, x, e, m, &w, m.cols(), kappa)?;
    Ok(g.value(v).item())
}

fn report<F: Real>(g: &Graph<F>, v: &LossVars, draws: &LossDraws) -> LossReport {
    let get = |x: Var| g.value(x).item().as_f64();
    LossReport {
        step: 0,
        t: draws.t,
        t_match: draws.t_match,
        l_simple: get(v.simple),
        l_t_term: get(v.t_term),
        l_anchor_term: get(v.anchor),
        l_round: get(v.round),
        l_match: v.matching.map_or(0.0, get),
        l_total: get(v.total),
    }
}

/// Loss terms for explicit draws, forward only.
pub fn loss_with_draws<F: Real, P: X0Predictor<F>>(
    model: &P,
    ex: &TrainingExample,
    schedule: &VarianceSchedule,
    draws: &LossDraws,
    lambda: f64,
    kappa: f64,
) -> Result<LossReport> {
    let mut g = Graph::new();
    let v = build_loss(&mut g, model, ex, schedule, draws, lambda, kappa)?;
    if let Some(op) = g.poisoned() {
        return Err(Error::NonFinite(format!("loss forward: {op}")));
    }
    Ok(report(&g, &v, draws))
}

/// Loss terms and gradients of `l_total` for explicit draws.
pub fn loss_and_gradients<F: Real, P: X0Predictor<F>>(
    model: &P,
    ex: &TrainingExample,
    schedule: &VarianceSchedule,
    draws: &LossDraws,
    lambda: f64,
    kappa: f64,
) -> Result<(LossReport, Gradients<F>)> {
    let mut g = Graph::new();
    let v = build_loss(&mut g, model, ex, schedule, draws, lambda, kappa)?;
    let grads = g.backward(v.total, model.params())?;
    Ok((report(&g, &v, draws), grads))
}

fn draws_for<F: Real, P: X0Predictor<F>>(
    model: &P,
    ex: &TrainingExample,
    schedule: &VarianceSchedule,
    rng: &mut Rng,
) -> Result<LossDraws> {
    let d = model.params().get(EMB_TABLE)?.cols();
    LossDraws::sample(ex.len(), d, schedule.steps(), rng)
}

/// The simplified objective alone (matching disabled).
pub fn loss_simple<F: Real, P: X0Predictor<F>>(
    ex: &TrainingExample,
    model: &P,
    schedule: &VarianceSchedule,
    rng: &mut Rng,
) -> Result<LossReport> {
    let draws = draws_for(model, ex, schedule, rng)?;
    loss_with_draws(model, ex, schedule, &draws, 0.0, 1.0)
}

/// `l_simple + lambda · l_match`.
pub fn loss_total<F: Real, P: X0Predictor<F>>(
    ex: &TrainingExample,
    model: &P,
    schedule: &VarianceSchedule,
    lambda: f64,
    kappa: f64,
    rng: &mut Rng,
) -> Result<LossReport> {
    let draws = draws_for(model, ex, schedule, rng)?;
    let mut r = loss_with_draws(model, ex, schedule, &draws, lambda, kappa)?;
    if lambda == 0.0 {
        // report the matching term even when it does not contribute
        let m = loss_with_draws(model, ex, schedule, &draws, 1.0, kappa)?;
        r.l_match = m.l_match;
    }
    Ok(r)
}

/// Variational-bound terms (nats), averaged over draws.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VlbTerms {
    /// `KL(q(x_T | x0) ‖ N(0, I))`.
    pub l_final: f64,
    /// Single-`t` estimate of `Σ_{t=2}^T L_{t−1}`, scaled by `T − 1`.
    pub l_mid: f64,
    /// `‖Emb(v) − f(x1, 1)‖² / (2 sigma1²)`.
    pub l_0: f64,
    /// `−log p(v | x0)` summed over slots.
    pub l_round: f64,
}

impl VlbTerms {
    pub fn total(&self) -> f64 {
        self.l_final + self.l_mid + self.l_0 + self.l_round
    }
}

/// Closed-form `KL(N(sqrt(ab_T) x0, (1 − ab_T) I) ‖ N(0, I))`, summed over entries.
pub fn prior_kl(x0: &Tensor<f64>, schedule: &VarianceSchedule) -> f64 {
    let ab = schedule.alpha_bar(schedule.steps());
    let var = 1.0 - ab;
    x0.data()
        .iter()
        .map(|&x| 0.5 * (var + ab * x * x - 1.0 - var.ln()))
        .sum()
}

/// `‖mu_tilde(x_t, x0) − mu_theta(x_t, f)‖² / (2 sigma_tilde_t²)`.
pub fn posterior_kl(
    schedule: &VarianceSchedule,
    x0: &Tensor<f64>,
    x_t: &Tensor<f64>,
    x0_hat: &Tensor<f64>,
    t: usize,
) -> Result<f64> {
    let (mu, var) = schedule.posterior_mean_var(x_t, x0, t)?;
    let mu_hat = schedule.mu_from_x0_hat(x0_hat, x_t, t)?;
    Ok(mu.sub(&mu_hat)?.sq_norm() / (2.0 * var))
}

/// The same KL through the proportionality identity:
/// `coef_x0[t]² · ‖x0 − f‖² / (2 sigma_tilde_t²)`.
pub fn posterior_kl_proportional(
    schedule: &VarianceSchedule,
    x0: &Tensor<f64>,
    x0_hat: &Tensor<f64>,
    t: usize,
) -> Result<f64> {
    schedule.check_t(t, 1)?;
    let c = schedule.coef_x0(t);
    Ok(c * c * x0.sub(x0_hat)?.sq_norm() / (2.0 * schedule.sigma_tilde_sq(t)))
}

/// Monte-Carlo estimate of the variational bound.
pub fn vlb_estimate<P: X0Predictor<f64>>(
    ex: &TrainingExample,
    model: &P,
    schedule: &VarianceSchedule,
    rng: &mut Rng,
    n_mc: usize,
) -> Result<VlbTerms> {
    if n_mc == 0 {
        return Err(Error::Invalid("n_mc must be >= 1".into()));
    }
    let steps = schedule.steps();
    if steps < 2 {
        return Err(Error::config("steps", "the bound needs T >= 2"));
    }
    let params = model.params();
    let table = params.get(EMB_TABLE)?;
    let (l, d) = (ex.len(), table.cols());
    let emb = Tensor::stack_rows(&ex.sequence.tokens.iter().map(|&w| table.row(w)).collect::<Vec<_>>())?;
    let weights = ex.slot_weights();
    let mut acc = VlbTerms::default();
    for _ in 0..n_mc {
        let draws = LossDraws::sample(l, d, steps, rng)?;
        let x0 = emb.zip_with(&draws.eps0, |e, n| e + model.sigma0() * n)?;
        let x_t = schedule.q_sample(&x0, draws.t, &draws.eps_t)?;
        let x_1 = schedule.q_sample(&x0, 1, &draws.eps_1)?;

        let mut g = Graph::new();
        let enc = model.encode(&mut g, &ex.cond)?;
        let xt_v = g.constant(x_t.clone());
        let ft = model.predict(&mut g, xt_v, draws.t, enc, &ex.cond.mask)?;
        let x1_v = g.constant(x_1);
        let f1 = model.predict(&mut g, x1_v, 1, enc, &ex.cond.mask)?;
        let x0_v = g.constant(x0.clone());
        let tab = g.constant(table.clone());
        let nd = g.neg_sq_dist(x0_v, tab)?;
        let logits = g.scale(nd, 1.0 / model.tau_r())?;
        let round = g.cross_entropy_rows(logits, &ex.sequence.tokens, &weights)?;
        if let Some(op) = g.poisoned() {
            return Err(Error::NonFinite(format!("vlb forward: {op}")));
        }
        let n_slots: f64 = weights.iter().sum();

        acc.l_final += prior_kl(&x0, schedule);
        acc.l_mid += (steps - 1) as f64 * posterior_kl(schedule, &x0, &x_t, g.value(ft), draws.t)?;
        acc.l_0 += emb.sub(g.value(f1))?.sq_norm() / (2.0 * schedule.sigma1() * schedule.sigma1());
        acc.l_round += g.value(round).item() * n_slots;
    }
    let k = n_mc as f64;
    Ok(VlbTerms {
        l_final: acc.l_final / k,
        l_mid: acc.l_mid / k,
        l_0: acc.l_0 / k,
        l_round: acc.l_round / k,
    })
}
