//! Scene-level wiring: dataset files, training examples, prediction,
//! enhancement, and the two reference baselines.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::denoiser::RelationModel;
use crate::error::{Error, Result};
use crate::evalsuite::{
    rerank_with_prior, sort_by_score, Boxed, CommonsensePrior, ScenePredictions, TripletPrediction,
};
use crate::matcher::{multi_round_match, similarity_matrix, SimilarityMode};
use crate::numerics::{derived_rng, Tensor};
use crate::objectives::TrainingExample;
use crate::relvocab::RelationVocabulary;
use crate::sampler::{enhance, enhancement_sequence, generate, Generated};
use crate::schedule::VarianceSchedule;
use crate::synthworld::{
    build_training_example, load_dataset, scene_conditions, ConceptSpace, SceneInstance,
    SceneConditions, WorldConfig,
};

pub const PURPOSE_EXAMPLE: u64 = 0x5101;
pub const PURPOSE_INIT: u64 = 0x5102;
pub const PURPOSE_SAMPLE: u64 = 0x5103;
pub const PURPOSE_ENHANCE: u64 = 0x5104;
pub const PURPOSE_RANDOM: u64 = 0x5105;

/// `data.jsonl` → `data.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

/// Everything `gen-data` writes next to the training scenes.
#[derive(Clone, Debug)]
pub struct DataBundle {
    pub world: WorldConfig,
    pub space: ConceptSpace,
    pub train: Vec<SceneInstance>,
    pub heldout: Vec<SceneInstance>,
}

impl DataBundle {
    pub fn generate(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let world = WorldConfig::desk(cfg.world_seed);
        let space = ConceptSpace::new(&world, cfg.d, cfg.world_seed)?;
        let all = crate::synthworld::gen_dataset(cfg.n_scenes + cfg.n_heldout, &world, seed)?;
        let (train, heldout) = all.split_at(cfg.n_scenes);
        Ok(Self {
            world,
            space,
            train: train.to_vec(),
            heldout: heldout.to_vec(),
        })
    }

    pub fn save(&self, out: &Path, sigma0: f64) -> Result<()> {
        crate::synthworld::save_dataset(out, &self.train)?;
        crate::synthworld::save_dataset(&sibling(out, "heldout.jsonl"), &self.heldout)?;
        self.world.save(&sibling(out, "world.json"))?;
        self.space.save(&sibling(out, "space.json"))?;
        self.space
            .vocabulary(&self.world, sigma0)?
            .save(&sibling(out, "vocab.json"))
    }

    pub fn load(data: &Path) -> Result<Self> {
        let heldout_path = sibling(data, "heldout.jsonl");
        Ok(Self {
            world: WorldConfig::load(&sibling(data, "world.json"))?,
            space: ConceptSpace::load(&sibling(data, "space.json"))?,
            train: load_dataset(data)?,
            heldout: if heldout_path.exists() {
                load_dataset(&heldout_path)?
            } else {
                Vec::new()
            },
        })
    }
}

/// One example per scene, each with its own noise stream.
pub fn build_examples(
    scenes: &[SceneInstance],
    space: &ConceptSpace,
    world: &WorldConfig,
    cfg: &RunConfig,
) -> Result<Vec<TrainingExample>> {
    let vocab = space.vocabulary(world, cfg.sigma0)?;
    scenes
        .iter()
        .map(|s| {
            let mut rng = derived_rng(cfg.seed, PURPOSE_EXAMPLE, s.id as u64);
            build_training_example(s, &vocab, cfg.seq_len, space, cfg.nu, cfg.pseudo_top_k, &mut rng)
                .map(|b| b.example)
        })
        .collect()
}

pub fn init_model(cfg: &RunConfig, space: &ConceptSpace, world: &WorldConfig) -> Result<RelationModel<f32>> {
    cfg.validate()?;
    if space.d_feat != cfg.d {
        return Err(Error::config(
            "d",
            format!("concept space width {} != d {}", space.d_feat, cfg.d),
        ));
    }
    let v = space.vocabulary(world, cfg.sigma0)?;
    let v32 = RelationVocabulary::new(v.phrases().to_vec(), v.embeddings().cast(), cfg.sigma0)?;
    let mut rng = derived_rng(cfg.seed, PURPOSE_INIT, 0);
    RelationModel::init(cfg.model(), &v32, cfg.tau_r, &mut rng)
}

fn boxed(scene: &SceneInstance, id: usize) -> Result<Boxed> {
    let o = scene.object(id)?;
    Ok(Boxed {
        cat: o.cat.clone(),
        bbox: o.bbox,
    })
}

/// Keeps the best-scoring copy of each (pair, predicate) and sorts by score.
pub fn dedupe(mut triplets: Vec<TripletPrediction>) -> Vec<TripletPrediction> {
    sort_by_score(&mut triplets);
    let mut out: Vec<TripletPrediction> = Vec::with_capacity(triplets.len());
    for t in triplets {
        let dup = out.iter().any(|u| u.p == t.p && u.s == t.s && u.o == t.o);
        if !dup {
            out.push(t);
        }
    }
    out
}

/// Triplets for decoded slots, slot `i` attached to `pairs[slot_pair[i]]`
/// and scored by its rounding probability.
fn triplets_for(
    scene: &SceneInstance,
    pairs: &[(usize, usize)],
    generated: &Generated,
    phrases: &[String],
    slot_pair: &[usize],
) -> Result<Vec<TripletPrediction>> {
    let toks = &generated.sequence.tokens;
    let mut out = Vec::with_capacity(toks.len());
    for (i, &tok) in toks.iter().enumerate() {
        let (s, o) = pairs[slot_pair[i]];
        out.push(TripletPrediction {
            s: boxed(scene, s)?,
            p: phrases[tok].clone(),
            o: boxed(scene, o)?,
            score: generated.distributions[i][tok].clamp(0.0, 1.0),
            refined_score: None,
        });
    }
    Ok(out)
}

/// Multi-round assignment of decoded relations to the scene's pairs.
pub fn assign_pairs(
    generated: &Generated,
    sc: &SceneConditions,
    model: &RelationModel<f32>,
    mode: SimilarityMode,
) -> Result<Vec<usize>> {
    let vocab = model.vocabulary()?;
    let rows: Vec<&[f32]> = generated
        .sequence
        .tokens
        .iter()
        .map(|&t| vocab.embedding(t))
        .collect();
    let emb: Tensor<f64> = Tensor::stack_rows(&rows)?.cast();
    let projected = match mode {
        SimilarityMode::Projected => Some(model.encode_conditions(&sc.cond)?.cast::<f64>()),
        SimilarityMode::UnionVisual => None,
    };
    let sim = similarity_matrix(&emb, &sc.cond, mode, projected.as_ref())?;
    let a = multi_round_match(&sim)?;
    Ok((0..emb.rows()).map(|i| a.pair_of(i)).collect())
}

/// Conditions at `cfg.eval_nu`, generation, matching, triplets.
pub fn predict_scene(
    scene: &SceneInstance,
    model: &RelationModel<f32>,
    schedule: &VarianceSchedule,
    space: &ConceptSpace,
    cfg: &RunConfig,
) -> Result<ScenePredictions> {
    let mut rng = derived_rng(cfg.seed, PURPOSE_SAMPLE, scene.id as u64);
    let sc = scene_conditions(scene, space, cfg.eval_nu, cfg.seq_len, &mut rng)?;
    let generated = generate(&sc.cond, model, schedule, &cfg.sampler(), &mut rng)?;
    let slot_pair = assign_pairs(&generated, &sc, model, cfg.similarity)?;
    let triplets = triplets_for(scene, &sc.pairs, &generated, &model.phrases, &slot_pair)?;
    Ok(ScenePredictions {
        scene_id: scene.id,
        triplets: dedupe(triplets),
    })
}

/// Runs `f` over scenes on `workers` threads; output order follows `scenes`.
pub fn per_scene<T: Send>(
    scenes: &[SceneInstance],
    workers: usize,
    f: impl Fn(&SceneInstance) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if workers <= 1 {
        return scenes.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Invalid(e.to_string()))?;
    pool.install(|| scenes.par_iter().map(&f).collect())
}

pub fn predict_scenes(
    scenes: &[SceneInstance],
    model: &RelationModel<f32>,
    schedule: &VarianceSchedule,
    space: &ConceptSpace,
    cfg: &RunConfig,
    workers: usize,
) -> Result<Vec<ScenePredictions>> {
    per_scene(scenes, workers, |s| predict_scene(s, model, schedule, space, cfg))
}

/// Re-noises a scene's existing predictions to `cfg.t_prime`, denoises them,
/// merges the result with the input and re-ranks everything with `prior`.
pub fn enhance_scene(
    scene: &SceneInstance,
    existing: &ScenePredictions,
    model: &RelationModel<f32>,
    schedule: &VarianceSchedule,
    space: &ConceptSpace,
    prior: &CommonsensePrior,
    cfg: &RunConfig,
) -> Result<ScenePredictions> {
    let mut rng = derived_rng(cfg.seed, PURPOSE_ENHANCE, scene.id as u64);
    let sc = scene_conditions(scene, space, cfg.eval_nu, cfg.seq_len, &mut rng)?;
    let mut relations = Vec::new();
    for t in &existing.triplets {
        let Some(tok) = model.phrases.iter().position(|p| *p == t.p) else {
            return Err(Error::UnknownConcept(t.p.clone()));
        };
        let pair = sc.pairs.iter().position(|&(s, o)| {
            boxed(scene, s).is_ok_and(|b| b == t.s) && boxed(scene, o).is_ok_and(|b| b == t.o)
        });
        if let Some(j) = pair {
            if !relations.contains(&(tok, j)) {
                relations.push((tok, j));
            }
        }
    }
    let mut merged = existing.triplets.clone();
    if !relations.is_empty() {
        let (seq, slot_pair) = enhancement_sequence(&relations, cfg.k, cfg.seq_len)?;
        let generated = enhance(&seq, &sc.cond, model, schedule, &cfg.sampler(), &mut rng)?;
        merged.extend(triplets_for(scene, &sc.pairs, &generated, &model.phrases, &slot_pair)?);
    }
    let mut triplets = dedupe(merged);
    rerank_with_prior(&mut triplets, prior);
    Ok(ScenePredictions {
        scene_id: scene.id,
        triplets,
    })
}

/// `L` uniformly random predicates dealt round-robin over the annotated
/// pairs, with uniformly random scores.
pub fn random_baseline(
    scenes: &[SceneInstance],
    world: &WorldConfig,
    l: usize,
    seed: u64,
) -> Result<Vec<ScenePredictions>> {
    scenes
        .iter()
        .map(|scene| {
            let mut rng = derived_rng(seed, PURPOSE_RANDOM, scene.id as u64);
            let mut pairs = scene.pairs();
            pairs.truncate(l);
            let mut triplets = Vec::with_capacity(l);
            for i in 0..l {
                let (s, o) = pairs[i % pairs.len()];
                let p = &world.predicates[rng.random_range(0..world.predicates.len())];
                triplets.push(TripletPrediction {
                    s: boxed(scene, s)?,
                    p: p.clone(),
                    o: boxed(scene, o)?,
                    score: rng.random::<f64>(),
                    refined_score: None,
                });
            }
            Ok(ScenePredictions {
                scene_id: scene.id,
                triplets: dedupe(triplets),
            })
        })
        .collect()
}

/// The most probable predicate of each annotated pair under `prior`.
pub fn prior_baseline(
    scenes: &[SceneInstance],
    prior: &CommonsensePrior,
    l: usize,
) -> Result<Vec<ScenePredictions>> {
    scenes
        .iter()
        .map(|scene| {
            let mut triplets = Vec::new();
            for (s, o) in scene.pairs().into_iter().take(l) {
                let (bs, bo) = (boxed(scene, s)?, boxed(scene, o)?);
                if let Some((p, w)) = prior.argmax(&bs.cat, &bo.cat) {
                    triplets.push(TripletPrediction {
                        s: bs,
                        p: p.to_string(),
                        o: bo,
                        score: w,
                        refined_score: None,
                    });
                }
            }
            Ok(ScenePredictions {
                scene_id: scene.id,
                triplets: dedupe(triplets),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tp(p: &str, score: f64) -> TripletPrediction {
        let b = Boxed {
            cat: "cup".into(),
            bbox: [0.0, 0.0, 1.0, 1.0],
        };
        TripletPrediction {
            s: b.clone(),
            p: p.into(),
            o: b,
            score,
            refined_score: None,
        }
    }

    #[test]
    fn dedupe_keeps_best_copy() {
        let out = dedupe(vec![tp("on", 0.2), tp("near", 0.5), tp("on", 0.7)]);
        let got: Vec<(&str, f64)> = out.iter().map(|t| (t.p.as_str(), t.score)).collect();
        assert_eq!(got, vec![("on", 0.7), ("near", 0.5)]);
    }

    #[test]
    fn sibling_paths() {
        assert_eq!(
            sibling(Path::new("/x/data.jsonl"), "world.json"),
            PathBuf::from("/x/data.world.json")
        );
    }

    #[test]
    fn baselines_cover_every_scene() {
        let cfg = RunConfig::desk();
        let world = WorldConfig::desk(1);
        let scenes = crate::synthworld::gen_dataset(20, &world, 3).unwrap();
        let prior = CommonsensePrior::from_world(&world).unwrap();
        let r = random_baseline(&scenes, &world, cfg.seq_len, 0).unwrap();
        let p = prior_baseline(&scenes, &prior, cfg.seq_len).unwrap();
        for ((s, a), b) in scenes.iter().zip(&r).zip(&p) {
            assert_eq!((a.scene_id, b.scene_id), (s.id, s.id));
            assert!(!a.triplets.is_empty() && a.triplets.len() <= cfg.seq_len);
            assert_eq!(b.triplets.len(), s.pairs().len().min(cfg.seq_len));
        }
    }
}
