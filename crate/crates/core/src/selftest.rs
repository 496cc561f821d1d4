//! Built-in invariant and oracle checks, run by `relgen selftest`.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::Rng as _;

use crate::config::RunConfig;
use crate::denoiser::{ConditionSet, DenoiserConfig, RelationModel};
use crate::error::{Error, Result};
use crate::evalsuite::{
    caption_embedding, caption_tuples, image_embedding, recall_at_k, spice_pr_curve, t2i_retrieval,
    Boxed, GtTriplet, SynonymMap, TripletPrediction, Tuple,
};
use crate::matcher::{
    assignment_cost, build_gt_matching, hungarian, multi_round_match, BBox, GtRelation, Located,
    PairBoxes, SimilarityMatrix, SimilarityMode,
};
use crate::numerics::gradcheck::{check_gradients, GradCheckOptions};
use crate::numerics::{gaussian, rng_from_seed, Graph, ParamStore, Rng, Tensor};
use crate::objectives::{loss_and_gradients, loss_with_draws, LossDraws, TrainingExample};
use crate::relvocab::{Provenance, RelationSequence, RelationVocabulary};
use crate::sampler::{ddim_step, ddim_timesteps, enhance, generate, SamplerConfig};
use crate::schedule::{build_schedule, ScheduleKind, ScheduleSpec, VarianceSchedule};
use crate::synthworld::{gen_dataset, ConceptSpace, WorldConfig};
use crate::train::{load_model, save_model};

#[derive(Clone, Debug, Default)]
pub struct SelftestOptions {
    pub seed: u64,
    /// Overwrite `coef_x0[t]` of the proportionality schedule with a wrong
    /// value, to show the check notices.
    pub corrupt_coef_x0: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "{} {:32} {:7.2}s  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.seconds,
            self.detail
        )
    }
}

type Check = fn(&SelftestOptions, &mut Rng) -> Result<(bool, String)>;

pub const CHECKS: [(&str, Check); 16] = [
    ("numerics.gradcheck_primitives", gradcheck_primitives),
    ("numerics.gradcheck_model", gradcheck_model),
    ("schedule.proportionality", proportionality),
    ("schedule.moments", schedule_moments),
    ("matcher.hungarian_bruteforce", hungarian_bruteforce),
    ("matcher.multi_round_bruteforce", multi_round_bruteforce),
    ("matcher.gt_matching_iou", gt_matching_iou),
    ("relvocab.round_trip", round_trip),
    ("sampler.ddim_telescoping", ddim_telescoping),
    ("sampler.determinism", sampler_determinism),
    ("sampler.enhance_identity", enhance_identity),
    ("evalsuite.recall_oracle", recall_oracle),
    ("evalsuite.spice_perfect", spice_perfect),
    ("evalsuite.t2i_gt_captions", t2i_gt_captions),
    ("io.checkpoint_round_trip", checkpoint_round_trip),
    ("io.config_round_trip", config_round_trip),
];

/// Runs every check; errors count as failures.
pub fn run(opts: &SelftestOptions) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .enumerate()
        .map(|(i, (name, f))| {
            let mut rng = crate::numerics::derived_rng(opts.seed, 0x5e1f, i as u64);
            let start = Instant::now();
            let (passed, detail) = match f(opts, &mut rng) {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckResult {
                name,
                passed,
                detail,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

fn gradcheck_primitives(_: &SelftestOptions, rng: &mut Rng) -> Result<(bool, String)> {
    let mut store = ParamStore::new();
    store.insert("a", gaussian::<f64>(&[3, 4], rng));
    store.insert("w", gaussian::<f64>(&[4, 4], rng).scale(0.5));
    store.insert("gamma", gaussian::<f64>(&[4], rng));
    store.insert("beta", gaussian::<f64>(&[4], rng));
    store.insert("e", gaussian::<f64>(&[5, 4], rng));
    let targets = [0usize, 3, 4];
    let bce_t: Vec<f64> = (0..15).map(|i| (i % 2) as f64).collect();
    let mask: Vec<bool> = (0..12).map(|i| i % 4 != 1).collect();
    let loss = |p: &ParamStore<f64>| -> Result<(Graph<f64>, crate::numerics::Var)> {
        let mut g = Graph::new();
        let (a, w) = (g.param(p, "a")?, g.param(p, "w")?);
        let (gm, bt, e) = (g.param(p, "gamma")?, g.param(p, "beta")?, g.param(p, "e")?);
        let h = g.matmul(a, w)?;
        let h = g.relu(h)?;
        let h = g.layer_norm(h, gm, bt)?;
        let nd = g.neg_sq_dist(h, e)?;
        let ce = g.cross_entropy_rows(nd, &targets, &[1.0, 0.5, 2.0])?;
        let (na, ne) = (g.normalize_rows(a)?, g.normalize_rows(e)?);
        let cos = g.matmul_bt(na, ne)?;
        let bce = g.bce_with_logits(cos, &bce_t, &[1.0; 15])?;
        let sm = g.masked_softmax(h, &mask)?;
        let ms = g.mean_square(sm)?;
        let s = g.add(ce, bce)?;
        let s = g.add(s, ms)?;
        Ok((g, s))
    };
    let (g, l) = loss(&store)?;
    let grads = g.backward(l, &store)?;
    let report = check_gradients(&store, &grads, GradCheckOptions::default(), |p| {
        let (g, l) = loss(p)?;
        Ok(g.value(l).item())
    })?;
    Ok((
        report.max_rel_error < 1e-6,
        format!("max rel err {:.2e} ({} entries)", report.max_rel_error, report.entries_checked),
    ))
}

fn tiny_config(d: usize, l: usize, steps: usize) -> DenoiserConfig {
    DenoiserConfig {
        d,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 2 * d,
        tau_hidden: 2 * d,
        seq_len: l,
        d_feat: d,
        steps,
    }
}

fn tiny_model(cfg: DenoiserConfig, vocab: usize, rng: &mut Rng) -> Result<RelationModel<f64>> {
    let phrases = (0..vocab).map(|i| format!("rel{i}")).collect();
    let emb: Tensor<f64> = gaussian(&[vocab, cfg.d], rng);
    let v = RelationVocabulary::new(phrases, emb.scale(0.5), 0.1)?;
    RelationModel::init(cfg, &v, 0.5, rng)
}

fn random_example(cfg: &DenoiserConfig, vocab: usize, n: usize, rng: &mut Rng) -> Result<TrainingExample> {
    let l = cfg.seq_len;
    let y: Vec<Vec<f64>> = (0..n).map(|_| gaussian::<f64>(&[cfg.d_y()], rng).into_data()).collect();
    let so: Vec<Vec<f64>> = (0..n).map(|_| gaussian::<f64>(&[cfg.d_feat], rng).into_data()).collect();
    let cond = ConditionSet::new(&y, &so, l)?;
    let tokens = (0..l).map(|_| rng.random_range(0..vocab)).collect();
    let mut m = crate::matcher::MatchingMatrix::zeros(l, n);
    for (i, row) in m.m.iter_mut().enumerate() {
        row[i % n] = 1;
    }
    Ok(TrainingExample {
        sequence: RelationSequence::new(tokens, vec![Provenance::Gt; l])?,
        cond,
        matching: m,
    })
}

fn gradcheck_model(_: &SelftestOptions, rng: &mut Rng) -> Result<(bool, String)> {
    let cfg = tiny_config(16, 4, 20);
    let model = tiny_model(cfg, 6, rng)?;
    let ex = random_example(&cfg, 6, 2, rng)?;
    let sched = build_schedule(20, ScheduleKind::Linear, 1e-3, 0.2)?;
    let mut draws = LossDraws::sample(4, 16, 20, rng)?;
    draws.t_match = 7;
    let (_, grads) = loss_and_gradients(&model, &ex, &sched, &draws, 1.0, 0.05)?;
    let mut probe = model.clone();
    let opts = GradCheckOptions {
        max_per_param: Some(16),
        ..Default::default()
    };
    let report = check_gradients(&model.params, &grads, opts, |p| {
        probe.params = p.clone();
        Ok(loss_with_draws(&probe, &ex, &sched, &draws, 1.0, 0.05)?.l_total)
    })?;
    Ok((
        report.max_rel_error < 1e-4,
        format!(
            "max rel err {:.2e} at {} ({} entries, {} blocks)",
            report.max_rel_error,
            report.worst_param,
            report.entries_checked,
            report.per_param.len()
        ),
    ))
}

/// `‖mu_tilde − mu_theta‖²` against `(sqrt(ab_{t−1}) β_t / (1 − ab_t))² ‖x0 − f‖²`
/// for 100 random triples and one triple at every `t ≥ 2`.
fn proportionality(opts: &SelftestOptions, rng: &mut Rng) -> Result<(bool, String)> {
    let mut sched = ScheduleSpec::scaled_linear(2000).build()?;
    if let Some(t) = opts.corrupt_coef_x0 {
        sched.check_t(t, 1)?;
        let v = sched.coef_x0(t);
        sched.corrupt_coef_x0(t, v * 1.01 + 1e-6);
    }
    let steps = sched.steps();
    let mut ts: Vec<usize> = (0..100).map(|_| rng.random_range(2..=steps)).collect();
    ts.extend(2..=steps);
    let mut worst = 0.0f64;
    let mut worst_t = 0;
    for t in ts {
        let x0: Tensor<f64> = gaussian(&[4, 8], rng);
        let xt: Tensor<f64> = gaussian(&[4, 8], rng);
        let f: Tensor<f64> = gaussian(&[4, 8], rng);
        let (mu, _) = sched.posterior_mean_var(&xt, &x0, t)?;
        let mu_hat = sched.mu_from_x0_hat(&f, &xt, t)?;
        let lhs = mu.sub(&mu_hat)?.sq_norm();
        let c = sched.alpha_bar(t - 1).sqrt() * sched.beta(t) / (1.0 - sched.alpha_bar(t));
        let rhs = c * c * x0.sub(&f)?.sq_norm();
        let rel = (lhs - rhs).abs() / rhs.abs().max(f64::MIN_POSITIVE);
        if rel > worst {
            worst = rel;
            worst_t = t;
        }
    }
    Ok((worst < 1e-10, format!("max rel err {worst:.2e} at t={worst_t}")))
}

fn schedule_moments(_: &SelftestOptions, rng: &mut Rng) -> Result<(bool, String)> {
    let sched = ScheduleSpec::scaled_linear(200).build()?;
    let n = 100_000;
    let x0 = Tensor::full(&[n], 2.0f64);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let t = rng.random_range(1..=sched.steps());
        let eps: Tensor<f64> = gaussian(&[n], rng);
        let x = sched.q_sample(&x0, t, &eps)?;
        let mean = x.sum() / n as f64;
        let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let (m_true, v_true) = (2.0 * sched.alpha_bar(t).sqrt(), 1.0 - sched.alpha_bar(t));
        let m_err = (mean - m_true).abs() / m_true.abs().max(v_true.sqrt());
        let v_err = (var - v_true).abs() / v_true;
        worst = worst.max(m_err).max(v_err);
    }
    Ok((worst < 0.02, format!("max rel moment err {worst:.4}")))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn hungarian_bruteforce(_: &SelftestOptions, rng: &mut Rng) -> Result<(bool, String)> {
    let perms: Vec<Vec<Vec<usize>>> = (0..=7).map(permutations).collect();
    let mut bad = 0;
    for _ in 0..500 {
        let n = rng.random_range(1..=7);
        let cost: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let got = assignment_cost(&cost, &hungarian(&cost)?);
        let best = perms[n]
            .iter()
            .map(|p| assignment_cost(&cost, p))
            .fold(f64::INFINITY, f64::min);
        if got != best {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("{bad}/500 mismatches")))
}

/// Best total similarity of a one-to-one map from `n` pairs into `l` relations.
fn best_injection(s: &Tensor<f64>, j: usize, used: &mut Vec<bool>) -> f64 {
    if j == s.cols() {
        return 0.0;
    }
    let mut best = f64::NEG_INFINITY;
    for i in 0..s.rows() {
        if !used[i] {
            used[i] = true;
            best = best.max(s.at(i, j) + best_injection(s, j + 1, used));
            used[i] = false;
        }
    }
    best
}

fn multi_round_bruteforce(_: &SelftestOptions, rng: &mut Rng) -> Result<(bool, String)> {
    let (l, n) = (8, 3);
    let mut bad = 0;
    for _ in 0..100 {
        let s = Tensor::from_fn(&[l, n], |_| rng.random_range(-1.0..1.0));
        let sim = SimilarityMatrix {
            s: s.clone(),
            mode: SimilarityMode::UnionVisual,
        };
        let a = multi_round_match(&sim)?;
        let round1: f64 = a.round(1).map(|m| s.at(m.relation, m.pair)).sum();
        let best = best_injection(&s, 0, &mut vec![false; l]);
        let once = a.matches.len() == l && a.matches.iter().enumerate().all(|(i, m)| m.relation == i);
        let distinct = (1..=a.rounds()).all(|r| {
            let ps: BTreeSet<usize> = a.round(r).map(|m| m.pair).collect();
            ps.len() == a.round(r).count()
        });
        if (round1 - best).abs() > 1e-12 || !once || !distinct {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("{bad}/100 mismatches")))
}

fn gt_matching_iou(_: &SelftestOptions, _: &mut Rng) -> Result<(bool, String)> {
    let (a, b) = (BBox::new(0.0, 0.0, 2.0, 2.0)?, BBox::new(1.0, 1.0, 3.0, 3.0)?);
    let iou = a.iou(&b);
    let loc = |bb: BBox| Located {
        category: "cup".into(),
        bbox: bb,
    };
    let pairs = [PairBoxes {
        subject: loc(a),
        object: loc(a),
    }];
    let gt = [
        GtRelation {
            subject: loc(a),
            predicate: 0,
            object: loc(a),
        },
        GtRelation {
            subject: loc(b),
            predicate: 1,
            object: loc(a),
        },
    ];
    let m = build_gt_matching(&pairs, &gt, 0.5, 4)?;
    let ok = (iou - 1.0 / 7.0).abs() < 1e-15 && m.dropped == 1 && m.slots == vec![(0, 0)];
    Ok((ok, format!("iou {iou:.6}, dropped {}", m.dropped)))
}

fn desk_vocab() -> Result<RelationVocabulary<f64>> {
    let world = WorldConfig::desk(1);
    ConceptSpace::new(&world, 32, 1)?.vocabulary(&world, 0.0)
}

fn round_trip(_: &SelftestOptions, rng: &mut Rng) -> Result<(bool, String)> {
    let vocab = desk_vocab()?;
    let mut bad = 0;
    for _ in 0..1000 {
        let tokens: Vec<usize> = (0..8).map(|_| rng.random_range(0..vocab.len())).collect();
        let seq = RelationSequence::new(tokens.clone(), vec![Provenance::Gt; 8])?;
        let x0 = vocab.embed_with_sigma(&seq, 0.0, rng)?;
        if vocab.decode_sequence(&x0, 1.0)?.tokens != tokens {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("{bad}/1000 sequences changed")))
}

fn ddim_telescoping(_: &SelftestOptions, rng: &mut Rng) -> Result<(bool, String)> {
    let sched = ScheduleSpec::scaled_linear(200).build()?;
    let x0: Tensor<f64> = gaussian(&[4, 8], rng);
    let mut worst = 0.0f64;
    for n_steps in [1, 7, 50, 200] {
        let ts = ddim_timesteps(200, n_steps)?;
        let mut x: Tensor<f64> = gaussian(&[4, 8], rng);
        for (i, &t) in ts.iter().enumerate() {
            x = ddim_step(&x, &x0, t, ts.get(i + 1).copied().unwrap_or(0), &sched, 0.0, rng)?;
        }
        worst = worst.max(x.max_abs_diff(&x0));
    }
    Ok((worst < 1e-9, format!("max |x − x0| {worst:.2e}")))
}

fn tiny_sampling_setup(rng: &mut Rng) -> Result<(RelationModel<f64>, ConditionSet, VarianceSchedule)> {
    let cfg = tiny_config(8, 4, 20);
    let model = tiny_model(cfg, 6, rng)?;
    let ex = random_example(&cfg, 6, 3, rng)?;
    let sched = build_schedule(20, ScheduleKind::Linear, 1e-3, 0.2)?;
    Ok((model, ex.cond, sched))
}

fn sampler_determinism(_: &SelftestOptions, rng: &mut Rng) -> Result<(bool, String)> {
    let (model, cond, sched) = tiny_sampling_setup(rng)?;
    let cfg = SamplerConfig {
        n_steps: 10,
        eta: 0.0,
        t_prime: 5,
        k: 1,
    };
    let a = generate(&cond, &model, &sched, &cfg, &mut rng_from_seed(9))?;
    let b = generate(&cond, &model, &sched, &cfg, &mut rng_from_seed(9))?;
    Ok((a == b, format!("tokens {:?}", a.sequence.tokens)))
}

fn enhance_identity(_: &SelftestOptions, rng: &mut Rng) -> Result<(bool, String)> {
    let (model, cond, sched) = tiny_sampling_setup(rng)?;
    let cfg = SamplerConfig {
        n_steps: 10,
        eta: 0.0,
        t_prime: 0,
        k: 1,
    };
    let mut bad = 0;
    for _ in 0..50 {
        let tokens: Vec<usize> = (0..4).map(|_| rng.random_range(0..6)).collect();
        let seq = RelationSequence::new(tokens.clone(), vec![Provenance::Gt; 4])?;
        if enhance(&seq, &cond, &model, &sched, &cfg, rng)?.sequence.tokens != tokens {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("{bad}/50 sequences changed")))
}

fn bx(cat: &str, x: f64) -> Boxed {
    Boxed {
        cat: cat.into(),
        bbox: [x, 0.0, x + 1.0, 1.0],
    }
}

fn recall_oracle(_: &SelftestOptions, _: &mut Rng) -> Result<(bool, String)> {
    let gt = |s: &str, p: &str, o: &str, x: f64| GtTriplet {
        s: bx(s, x),
        p: p.into(),
        o: bx(o, x + 2.0),
    };
    let pr = |s: &str, p: &str, o: &str, x: f64, score: f64| TripletPrediction {
        s: bx(s, x),
        p: p.into(),
        o: bx(o, x + 2.0),
        score,
        refined_score: None,
    };
    let gts = vec![vec![
        gt("person", "hold", "cup", 0.0),
        gt("person", "ride", "bike", 5.0),
        gt("dog", "near", "bike", 10.0),
    ]];
    let preds = vec![vec![
        pr("person", "hold", "cup", 0.0, 0.9),
        pr("person", "hold", "cup", 0.0, 0.8),
        pr("person", "watch", "bike", 5.0, 0.7),
        pr("dog", "near", "bike", 10.0, 0.6),
        pr("dog", "near", "bike", 30.0, 0.5),
    ]];
    let r = recall_at_k(&preds, &gts, 5, &SynonymMap::new())?;
    Ok(((r - 2.0 / 3.0).abs() < 1e-15, format!("recall@5 {r:.6}")))
}

fn spice_perfect(_: &SelftestOptions, _: &mut Rng) -> Result<(bool, String)> {
    let t = |s: &str, p: &str, o: &str| -> Tuple { (s.into(), p.into(), o.into()) };
    let targets: BTreeSet<Tuple> = [t("a", "on", "b"), t("c", "near", "d"), t("a", "hold", "c")].into();
    let ranked: Vec<Tuple> = targets.iter().cloned().collect();
    let pts = spice_pr_curve(&[ranked], &[targets], &[1, 2, 3, 4])?;
    let at3 = pts.iter().find(|p| p.k == 3).expect("k = 3 on the grid");
    let monotone = pts.windows(2).all(|w| w[1].r >= w[0].r);
    Ok((
        at3.p == 1.0 && at3.r == 1.0 && monotone,
        format!("p {} r {} at k=3", at3.p, at3.r),
    ))
}

fn t2i_gt_captions(_: &SelftestOptions, _: &mut Rng) -> Result<(bool, String)> {
    let world = WorldConfig::desk(1);
    let space = ConceptSpace::new(&world, 32, 1)?;
    let mut seen = BTreeSet::new();
    let mut scenes = Vec::new();
    for s in gen_dataset(400, &world, 11)? {
        let key = s.target_tuples()?;
        let sig: (BTreeSet<String>, BTreeSet<String>) =
            (s.categories().into_iter().collect(), s.predicates().into_iter().collect());
        if seen.insert(sig) && scenes.len() < 64 {
            scenes.push((s, key));
        }
    }
    if scenes.len() < 64 {
        return Err(Error::Invalid(format!("only {} distinct scenes", scenes.len())));
    }
    let mut captions = Vec::new();
    let mut images = Vec::new();
    for (s, tuples) in &scenes {
        let ranked: Vec<Tuple> = tuples.iter().cloned().collect();
        captions.push(caption_embedding(&caption_tuples(&ranked), &space)?);
        images.push(image_embedding(s, &space)?);
    }
    let r = t2i_retrieval(&captions, &images)?;
    Ok((r.r1 == 1.0, format!("R@1 {:.3} over {} scenes", r.r1, scenes.len())))
}

fn checkpoint_round_trip(_: &SelftestOptions, rng: &mut Rng) -> Result<(bool, String)> {
    let mut cfg = RunConfig::desk();
    cfg.d = 8;
    cfg.ffn_dim = 16;
    cfg.tau_hidden = 16;
    cfg.seq_len = 4;
    cfg.steps = 20;
    let phrases = (0..5).map(|i| format!("rel{i}")).collect();
    let emb: Tensor<f32> = gaussian(&[5, 8], rng);
    let vocab = RelationVocabulary::new(phrases, emb, cfg.sigma0)?;
    let model = RelationModel::init(cfg.model(), &vocab, cfg.tau_r, rng)?;
    let mut buf = Vec::new();
    save_model(&mut buf, &model, &cfg, 7)?;
    let (header, back) = load_model(&mut buf.as_slice())?;
    let same = header.step == 7
        && header.config == cfg
        && back.phrases == model.phrases
        && back.params.iter().zip(model.params.iter()).all(|(a, b)| a == b);
    let mut again = Vec::new();
    save_model(&mut again, &back, &header.config, header.step)?;
    Ok((same && again == buf, format!("{} bytes", buf.len())))
}

fn config_round_trip(_: &SelftestOptions, _: &mut Rng) -> Result<(bool, String)> {
    let mut ok = true;
    for c in [RunConfig::desk(), RunConfig::full()] {
        ok &= RunConfig::from_json(&c.to_json()?)? == c;
    }
    let mut bad = RunConfig::desk();
    bad.kappa = 0.0;
    let named = matches!(bad.validate(), Err(Error::Config { ref field, .. }) if field == "kappa");
    Ok((ok && named, "desk and full presets".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let results = run(&SelftestOptions::default());
        assert!(results.len() >= 12);
        for r in &results {
            assert!(r.passed, "{}", r.line());
        }
    }

    #[test]
    fn corrupted_coefficient_is_caught_by_name() {
        let opts = SelftestOptions {
            seed: 0,
            corrupt_coef_x0: Some(1234),
        };
        let mut rng = rng_from_seed(0);
        let (passed, detail) = proportionality(&opts, &mut rng).unwrap();
        assert!(!passed, "{detail}");
        assert!(detail.contains("t=1234"), "{detail}");
    }
}
