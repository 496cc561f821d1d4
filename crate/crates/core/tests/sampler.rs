//! Sampling and enhancement, including checks against a briefly trained
//! desk-scale model.

use std::sync::OnceLock;

use rand::Rng as _;

use relgen::config::RunConfig;
use relgen::denoiser::RelationModel;
use relgen::evalsuite::CommonsensePrior;
use relgen::numerics::{derived_rng, gaussian, rng_from_seed, Adam, Tensor};
use relgen::pipeline::{build_examples, enhance_scene, init_model, predict_scenes, DataBundle};
use relgen::relvocab::{Provenance, RelationSequence};
use relgen::sampler::{ddim_step, enhance, generate, SamplerConfig};
use relgen::schedule::{ScheduleSpec, VarianceSchedule};
use relgen::synthworld::{scene_conditions, SceneConditions};
use relgen::train::{train, TrainOptions};

struct Trained {
    cfg: RunConfig,
    data: DataBundle,
    model: RelationModel<f32>,
    schedule: VarianceSchedule,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut cfg = RunConfig::desk();
        cfg.train_steps = 800;
        cfg.n_scenes = 256;
        let data = DataBundle::generate(&cfg, 3).unwrap();
        let examples = build_examples(&data.train, &data.space, &data.world, &cfg).unwrap();
        let mut model = init_model(&cfg, &data.space, &data.world).unwrap();
        let schedule = cfg.schedule_spec().build().unwrap();
        let mut adam = Adam::new(cfg.adam());
        let opts = TrainOptions::from_config(&cfg, 1);
        train(&mut model, &mut adam, &examples, &schedule, &opts, |_| Ok(()), |_, _| Ok(())).unwrap();
        Trained {
            cfg,
            data,
            model,
            schedule,
        }
    })
}

fn conditions(t: &Trained, i: usize) -> SceneConditions {
    let mut rng = derived_rng(9, 0, i as u64);
    scene_conditions(&t.data.heldout[i], &t.data.space, 0.0, t.cfg.seq_len, &mut rng).unwrap()
}

/// Mean probability the model assigns to `tokens` when reconstructing them
/// from a partly noised copy.
fn reconstruction_score(t: &Trained, m: &RelationModel<f64>, tokens: &[usize], sc: &SceneConditions, seed: u64) -> f64 {
    let vocab = m.vocabulary().unwrap();
    let seq = RelationSequence::new(tokens.to_vec(), vec![Provenance::Gt; tokens.len()]).unwrap();
    let mut rng = rng_from_seed(seed);
    let x0 = vocab.embed_with_sigma(&seq, 0.0, &mut rng).unwrap();
    let eps = gaussian(x0.shape(), &mut rng);
    let x_t = t.schedule.q_sample(&x0, 50, &eps).unwrap();
    let f = m.denoise(&x_t, 50, &sc.cond).unwrap();
    let mut total = 0.0;
    for (i, &tok) in tokens.iter().enumerate() {
        total += vocab.round_distribution(f.row(i), m.tau_r).unwrap()[tok];
    }
    total / tokens.len() as f64
}

#[test]
fn generated_tokens_beat_random_tokens() {
    let t = trained();
    let m64 = t.model.cast::<f64>();
    let mut rng = rng_from_seed(4);
    let (mut gen_score, mut rand_score) = (0.0, 0.0);
    let n = 40;
    for i in 0..n {
        let sc = conditions(t, i);
        let g = generate(&sc.cond, &t.model, &t.schedule, &t.cfg.sampler(), &mut rng).unwrap();
        let random: Vec<usize> = (0..t.cfg.seq_len).map(|_| rng.random_range(0..t.model.phrases.len())).collect();
        gen_score += reconstruction_score(t, &m64, &g.sequence.tokens, &sc, i as u64);
        rand_score += reconstruction_score(t, &m64, &random, &sc, i as u64);
    }
    let (g, r) = (gen_score / n as f64, rand_score / n as f64);
    assert!(g > r, "generated {g:.4} vs random {r:.4}");
}

#[test]
fn enhancement_changes_tokens_but_keeps_pairs() {
    let t = trained();
    let cfg = &t.cfg;
    assert_eq!(cfg.t_prime, cfg.steps / 8);
    let preds = predict_scenes(&t.data.heldout[..40], &t.model, &t.schedule, &t.data.space, cfg, 1).unwrap();
    let mut flipped = 0;
    let mut rng = rng_from_seed(6);
    for (i, p) in preds.iter().enumerate() {
        let sc = conditions(t, i);
        let g = generate(&sc.cond, &t.model, &t.schedule, &cfg.sampler(), &mut rng).unwrap();
        let e = enhance(&g.sequence, &sc.cond, &t.model, &t.schedule, &cfg.sampler(), &mut rng).unwrap();
        assert_eq!(e.sequence.len(), g.sequence.len());
        if e.sequence.tokens != g.sequence.tokens {
            flipped += 1;
        }

        let prior = CommonsensePrior::from_world(&t.data.world).unwrap();
        let out = enhance_scene(&t.data.heldout[i], p, &t.model, &t.schedule, &t.data.space, &prior, cfg).unwrap();
        let before: Vec<_> = p.triplets.iter().map(|x| (&x.s, &x.o)).collect();
        for x in &out.triplets {
            assert!(before.contains(&(&x.s, &x.o)), "enhancement invented a pair");
        }
    }
    assert!(2 * flipped > preds.len(), "only {flipped}/{} scenes changed a token", preds.len());
}

#[test]
fn prediction_does_not_depend_on_worker_count() {
    let t = trained();
    let scenes = &t.data.heldout[..24];
    let one = predict_scenes(scenes, &t.model, &t.schedule, &t.data.space, &t.cfg, 1).unwrap();
    let three = predict_scenes(scenes, &t.model, &t.schedule, &t.data.space, &t.cfg, 3).unwrap();
    assert_eq!(one, three);
}

#[test]
fn generation_is_a_function_of_the_seed() {
    let t = trained();
    let sc = conditions(t, 0);
    let run = |seed| generate(&sc.cond, &t.model, &t.schedule, &t.cfg.sampler(), &mut rng_from_seed(seed)).unwrap();
    assert_eq!(run(1), run(1));
    assert_eq!(run(1).sequence.len(), t.cfg.seq_len);
}

#[test]
fn enhancement_without_corruption_is_identity() {
    let t = trained();
    let cfg = SamplerConfig {
        t_prime: 0,
        ..t.cfg.sampler()
    };
    let mut rng = rng_from_seed(8);
    for i in 0..10 {
        let sc = conditions(t, i);
        let toks: Vec<usize> = (0..8).map(|_| rng.random_range(0..t.model.phrases.len())).collect();
        let seq = RelationSequence::new(toks.clone(), vec![Provenance::Gt; 8]).unwrap();
        assert_eq!(enhance(&seq, &sc.cond, &t.model, &t.schedule, &cfg, &mut rng).unwrap().sequence.tokens, toks);
    }
}

#[test]
fn ddim_step_matches_direct_formula() {
    let sched = ScheduleSpec::scaled_linear(200).build().unwrap();
    let mut rng = rng_from_seed(12);
    for _ in 0..50 {
        let t = rng.random_range(2..=200);
        let prev = rng.random_range(0..t);
        let x: Tensor<f64> = gaussian(&[3, 4], &mut rng);
        let f: Tensor<f64> = gaussian(&[3, 4], &mut rng);
        let (a, b) = (sched.alpha_bar(t), if prev == 0 { 1.0 } else { sched.alpha_bar(prev) });
        let want = Tensor::from_fn(&[3, 4], |k| {
            let eps = (x.data()[k] - a.sqrt() * f.data()[k]) / (1.0 - a).sqrt();
            b.sqrt() * f.data()[k] + (1.0 - b).sqrt() * eps
        });
        let got = ddim_step(&x, &f, t, prev, &sched, 0.0, &mut rng).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn ddim_recovers_noise_and_ends_at_the_prediction() {
    let sched = ScheduleSpec::scaled_linear(200).build().unwrap();
    let mut rng = rng_from_seed(13);
    let x0: Tensor<f64> = gaussian(&[3, 4], &mut rng);
    let eps: Tensor<f64> = gaussian(&[3, 4], &mut rng);
    let t = 120;
    let x_t = sched.q_sample(&x0, t, &eps).unwrap();
    assert_eq!(ddim_step(&x_t, &x0, t, 0, &sched, 0.0, &mut rng).unwrap(), x0);
    // stepping to t' with a perfect prediction lands on q_sample(x0, t', eps)
    let x_p = ddim_step(&x_t, &x0, t, 40, &sched, 0.0, &mut rng).unwrap();
    let want = sched.q_sample(&x0, 40, &eps).unwrap();
    assert!(x_p.max_abs_diff(&want) < 1e-12);
}

#[test]
fn bad_sampler_settings_are_rejected() {
    let sched = ScheduleSpec::scaled_linear(200).build().unwrap();
    let x: Tensor<f64> = Tensor::zeros(&[2, 2]);
    let mut rng = rng_from_seed(0);
    assert!(ddim_step(&x, &x, 5, 5, &sched, 0.0, &mut rng).is_err());
    let bad = SamplerConfig {
        n_steps: 21,
        eta: 0.0,
        t_prime: 0,
        k: 1,
    };
    assert!(bad.validate(20).is_err());
    assert!(SamplerConfig { t_prime: 21, n_steps: 5, ..bad }.validate(20).is_err());
    assert!(SamplerConfig { k: 0, n_steps: 5, ..bad }.validate(20).is_err());
}
