#![allow(dead_code)]

use relgen::denoiser::{ConditionSet, DenoiserConfig, RelationModel};
use relgen::matcher::MatchingMatrix;
use relgen::numerics::{gaussian, Rng, Tensor};
use relgen::objectives::TrainingExample;
use relgen::relvocab::{Provenance, RelationSequence, RelationVocabulary};

pub fn tiny_config(d: usize, l: usize, steps: usize) -> DenoiserConfig {
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

pub fn random_vocab(n: usize, d: usize, sigma0: f64, rng: &mut Rng) -> RelationVocabulary<f64> {
    let phrases = (0..n).map(|i| format!("rel{i}")).collect();
    let emb: Tensor<f64> = gaussian(&[n, d], rng);
    RelationVocabulary::new(phrases, emb.scale(0.5), sigma0).unwrap()
}

/// `n` real pairs, slots alternate between ground truth and pseudo labels,
/// each slot matched to pair `i % n`.
pub fn random_example(cfg: &DenoiserConfig, vocab: usize, n: usize, rng: &mut Rng) -> TrainingExample {
    use rand::Rng as _;
    let l = cfg.seq_len;
    let y: Vec<Vec<f64>> = (0..n).map(|_| gaussian::<f64>(&[cfg.d_y()], rng).into_data()).collect();
    let so: Vec<Vec<f64>> = (0..n).map(|_| gaussian::<f64>(&[cfg.d_feat], rng).into_data()).collect();
    let cond = ConditionSet::new(&y, &so, l).unwrap();
    let tokens = (0..l).map(|_| rng.random_range(0..vocab)).collect();
    let prov = (0..l)
        .map(|i| if i % 2 == 0 { Provenance::Gt } else { Provenance::Pseudo })
        .collect();
    let mut m = MatchingMatrix::zeros(l, n);
    for i in 0..l {
        m.m[i][i % n] = 1;
    }
    TrainingExample {
        sequence: RelationSequence::new(tokens, prov).unwrap(),
        cond,
        matching: m,
    }
}

pub fn tiny_model(cfg: DenoiserConfig, vocab: usize, rng: &mut Rng) -> RelationModel<f64> {
    let v = random_vocab(vocab, cfg.d, 0.1, rng);
    RelationModel::init(cfg, &v, 0.5, rng).unwrap()
}
