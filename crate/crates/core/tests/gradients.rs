mod common;

use relgen::numerics::gradcheck::{check_gradients, GradCheckOptions};
use relgen::numerics::rng_from_seed;
use relgen::objectives::{loss_and_gradients, loss_with_draws, LossDraws};
use relgen::schedule::{build_schedule, ScheduleKind};

#[test]
fn full_model_gradients_match_central_differences() {
    let mut rng = rng_from_seed(42);
    let cfg = common::tiny_config(16, 4, 20);
    let model = common::tiny_model(cfg, 6, &mut rng);
    let ex = common::random_example(&cfg, 6, 2, &mut rng);
    let sched = build_schedule(20, ScheduleKind::Linear, 1e-3, 0.2).unwrap();
    let mut draws = LossDraws::sample(4, 16, 20, &mut rng).unwrap();
    draws.t_match = 7;
    let (_, grads) = loss_and_gradients(&model, &ex, &sched, &draws, 1.0, 0.05).unwrap();
    let mut probe = model.clone();
    let report = check_gradients(&model.params, &grads, GradCheckOptions::default(), |p| {
        probe.params = p.clone();
        Ok(loss_with_draws(&probe, &ex, &sched, &draws, 1.0, 0.05)?.l_total)
    })
    .unwrap();
    for (name, err, g) in &report.per_param {
        println!("{name:32} rel {err:.2e} max|g| {g:.2e}");
    }
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}
