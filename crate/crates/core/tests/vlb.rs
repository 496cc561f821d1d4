mod common;

use relgen::numerics::{gaussian, rng_from_seed, Tensor};
use relgen::objectives::{
    loss_and_gradients, posterior_kl, posterior_kl_proportional, prior_kl, vlb_estimate, LossDraws,
};
use relgen::schedule::{build_schedule, ScheduleKind, ScheduleSpec};

fn log_normal(x: &[f64], mean: &[f64], var: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    x.iter()
        .zip(mean)
        .map(|(x, m)| -0.5 * ((x - m).powi(2) / var + (two_pi * var).ln()))
        .sum()
}

/// Mean and standard error of `f` over `n` draws.
fn monte_carlo(n: usize, mut f: impl FnMut() -> f64) -> (f64, f64) {
    let xs: Vec<f64> = (0..n).map(|_| f()).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[test]
fn prior_kl_matches_sampled_log_ratio() {
    // a short schedule keeps the prior term far from zero
    let sched = build_schedule(10, ScheduleKind::Linear, 0.01, 0.1).unwrap();
    let mut rng = rng_from_seed(1);
    let x0 = Tensor::new(vec![3], vec![1.5, -0.7, 2.0]).unwrap();
    let ab = sched.alpha_bar(10);
    let mean: Vec<f64> = x0.data().iter().map(|x| ab.sqrt() * x).collect();
    let zero = vec![0.0; 3];
    let (est, se) = monte_carlo(10_000, || {
        let z: Tensor<f64> = gaussian(&[3], &mut rng);
        let x: Vec<f64> = mean.iter().zip(z.data()).map(|(m, z)| m + (1.0 - ab).sqrt() * z).collect();
        log_normal(&x, &mean, 1.0 - ab) - log_normal(&x, &zero, 1.0)
    });
    let exact = prior_kl(&x0, &sched);
    assert!((est - exact).abs() < 3.0 * se, "{est} ± {se} vs {exact}");
}

#[test]
fn posterior_kl_matches_sampled_log_ratio() {
    let sched = ScheduleSpec::scaled_linear(200).build().unwrap();
    let mut rng = rng_from_seed(2);
    for t in [2, 30, 150] {
        let x0: Tensor<f64> = gaussian(&[2, 3], &mut rng);
        let f: Tensor<f64> = x0.add(&gaussian::<f64>(&[2, 3], &mut rng).scale(0.3)).unwrap();
        let eps: Tensor<f64> = gaussian(&[2, 3], &mut rng);
        let x_t = sched.q_sample(&x0, t, &eps).unwrap();
        let (mu, var) = sched.posterior_mean_var(&x_t, &x0, t).unwrap();
        let mu_theta = sched.mu_from_x0_hat(&f, &x_t, t).unwrap();
        let (est, se) = monte_carlo(10_000, || {
            let z: Tensor<f64> = gaussian(&[2, 3], &mut rng);
            let x: Vec<f64> = mu.data().iter().zip(z.data()).map(|(m, z)| m + var.sqrt() * z).collect();
            log_normal(&x, mu.data(), var) - log_normal(&x, mu_theta.data(), var)
        });
        let exact = posterior_kl(&sched, &x0, &x_t, &f, t).unwrap();
        assert!((est - exact).abs() < 3.0 * se, "t={t}: {est} ± {se} vs {exact}");
    }
}

#[test]
fn kl_term_is_proportional_to_x0_error_at_every_step() {
    let sched = ScheduleSpec::scaled_linear(200).build().unwrap();
    let mut rng = rng_from_seed(3);
    for t in 2..=200 {
        let x0: Tensor<f64> = gaussian(&[4, 3], &mut rng);
        let f: Tensor<f64> = gaussian(&[4, 3], &mut rng);
        let x_t: Tensor<f64> = gaussian(&[4, 3], &mut rng);
        let a = posterior_kl(&sched, &x0, &x_t, &f, t).unwrap();
        let b = posterior_kl_proportional(&sched, &x0, &f, t).unwrap();
        assert!((a - b).abs() <= 1e-8 * b, "t={t}: {a} vs {b}");
    }
}

#[test]
fn bound_terms_are_finite_and_nonnegative() {
    let mut rng = rng_from_seed(4);
    let cfg = common::tiny_config(8, 4, 20);
    let model = common::tiny_model(cfg, 5, &mut rng);
    let ex = common::random_example(&cfg, 5, 2, &mut rng);
    let sched = build_schedule(20, ScheduleKind::Linear, 1e-3, 0.2).unwrap().with_sigma1(0.1);
    let v = vlb_estimate(&ex, &model, &sched, &mut rng, 20).unwrap();
    for x in [v.l_final, v.l_mid, v.l_0, v.l_round] {
        assert!(x.is_finite() && x >= 0.0, "{v:?}");
    }
    assert!((v.total() - (v.l_final + v.l_mid + v.l_0 + v.l_round)).abs() < 1e-12);
    assert!(vlb_estimate(&ex, &model, &sched, &mut rng, 0).is_err());
}

#[test]
fn matching_supervision_reaches_the_condition_encoder() {
    let mut rng = rng_from_seed(5);
    let cfg = common::tiny_config(8, 4, 20);
    let model = common::tiny_model(cfg, 5, &mut rng);
    let ex = common::random_example(&cfg, 5, 2, &mut rng);
    let sched = build_schedule(20, ScheduleKind::Linear, 1e-3, 0.2).unwrap();
    let mut draws = LossDraws::sample(4, 8, 20, &mut rng).unwrap();
    draws.t_match = 3;
    let (_, with) = loss_and_gradients(&model, &ex, &sched, &draws, 1.0, 0.05).unwrap();
    let (_, without) = loss_and_gradients(&model, &ex, &sched, &draws, 0.0, 0.05).unwrap();
    for (name, g) in with.iter() {
        if name.starts_with("tau.") || name == "emb.table" {
            let diff = g.max_abs_diff(without.get(name).unwrap());
            assert!(diff > 0.0, "{name} is not reached by the matching term");
        }
    }
}
