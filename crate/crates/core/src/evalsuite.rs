//! Evaluation: triplet Recall@K with synonyms, caption-to-image retrieval,
//! tuple precision/recall curves, diversity counts, and prior re-ranking.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcher::BBox;
use crate::numerics::{cosine, normalize_in_place};
use crate::synthworld::{ConceptKind, ConceptSpace, SceneInstance, WorldConfig};

/// `(subject category, predicate, object category)`.
pub type Tuple = (String, String, String);

pub type SynonymMap = BTreeMap<String, BTreeSet<String>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Boxed {
    pub cat: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletPrediction {
    pub s: Boxed,
    pub p: String,
    pub o: Boxed,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined_score: Option<f64>,
}

impl TripletPrediction {
    pub fn tuple(&self) -> Tuple {
        (self.s.cat.clone(), self.p.clone(), self.o.cat.clone())
    }
}

/// Ground truth in the same shape as a prediction, without a score.
#[derive(Clone, Debug, PartialEq)]
pub struct GtTriplet {
    pub s: Boxed,
    pub p: String,
    pub o: Boxed,
}

pub fn scene_ground_truth(scene: &SceneInstance) -> Result<Vec<GtTriplet>> {
    scene
        .triplets
        .iter()
        .map(|(s, p, o)| {
            let (so, oo) = (scene.object(*s)?, scene.object(*o)?);
            Ok(GtTriplet {
                s: Boxed {
                    cat: so.cat.clone(),
                    bbox: so.bbox,
                },
                p: p.clone(),
                o: Boxed {
                    cat: oo.cat.clone(),
                    bbox: oo.bbox,
                },
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePredictions {
    pub scene_id: usize,
    pub triplets: Vec<TripletPrediction>,
}

pub fn write_predictions(w: &mut impl Write, preds: &[ScenePredictions]) -> Result<()> {
    for p in preds {
        serde_json::to_writer(&mut *w, p)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_predictions(r: impl BufRead) -> Result<Vec<ScenePredictions>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn save_predictions(path: &Path, preds: &[ScenePredictions]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_predictions(&mut f, preds)?;
    f.flush()?;
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<Vec<ScenePredictions>> {
    read_predictions(std::io::BufReader::new(std::fs::File::open(path)?))
}

fn hits(pred: &TripletPrediction, gt: &GtTriplet, synonyms: &SynonymMap) -> bool {
    let accepted = synonyms
        .get(&gt.p)
        .is_some_and(|set| set.contains(&pred.p))
        || pred.p == gt.p;
    accepted
        && pred.s.cat == gt.s.cat
        && pred.o.cat == gt.o.cat
        && BBox(pred.s.bbox).iou(&BBox(gt.s.bbox)) >= 0.5
        && BBox(pred.o.bbox).iou(&BBox(gt.o.bbox)) >= 0.5
}

/// Micro-averaged recall of the first `k` predictions per scene (which the
/// caller has sorted by score). Each ground truth is matched at most once,
/// greedily in prediction order.
pub fn recall_at_k(
    preds: &[Vec<TripletPrediction>],
    gts: &[Vec<GtTriplet>],
    k: usize,
    synonyms: &SynonymMap,
) -> Result<f64> {
    if k < 1 {
        return Err(Error::Invalid("recall needs K >= 1".into()));
    }
    if preds.len() != gts.len() {
        return Err(Error::Invalid("prediction and ground-truth scene counts differ".into()));
    }
    let total: usize = gts.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Invalid("no ground-truth triplets".into()));
    }
    let mut matched = 0;
    for (ps, gs) in preds.iter().zip(gts) {
        let mut used = vec![false; gs.len()];
        for p in ps.iter().take(k) {
            if let Some(i) = (0..gs.len()).find(|&i| !used[i] && hits(p, &gs[i], synonyms)) {
                used[i] = true;
                matched += 1;
            }
        }
    }
    Ok(matched as f64 / total as f64)
}

/// Normalised mean of the distinct concept base vectors named by `tuples`.
pub fn caption_embedding(tuples: &[Tuple], space: &ConceptSpace) -> Result<Vec<f64>> {
    let mut concepts: BTreeSet<(ConceptKind, &str)> = BTreeSet::new();
    for (s, p, o) in tuples {
        concepts.insert((ConceptKind::Object, s));
        concepts.insert((ConceptKind::Predicate, p));
        concepts.insert((ConceptKind::Object, o));
    }
    let mut v = vec![0.0; space.d_feat];
    for (kind, name) in &concepts {
        for (a, b) in v.iter_mut().zip(space.vector(*kind, name)?) {
            *a += b;
        }
    }
    if !concepts.is_empty() {
        let n = concepts.len() as f64;
        v.iter_mut().for_each(|a| *a /= n);
    }
    normalize_in_place(&mut v);
    Ok(v)
}

/// First ten distinct tuples of a ranked list: the tiled caption.
pub fn caption_tuples(ranked: &[Tuple]) -> Vec<Tuple> {
    let mut out: Vec<Tuple> = Vec::new();
    for t in ranked {
        if !out.contains(t) {
            out.push(t.clone());
            if out.len() == 10 {
                break;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct T2iRecall {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

/// Caption `i` retrieves image `i`; images ranked by cosine, ties by index.
pub fn t2i_retrieval(captions: &[Vec<f64>], images: &[Vec<f64>]) -> Result<T2iRecall> {
    if captions.len() != images.len() {
        return Err(Error::Invalid("caption and image counts differ".into()));
    }
    if images.len() < 10 {
        return Err(Error::Invalid(format!(
            "retrieval at K=10 needs at least 10 images, got {}",
            images.len()
        )));
    }
    let n = images.len();
    let mut ranks = Vec::with_capacity(n);
    for (i, c) in captions.iter().enumerate() {
        let sims: Vec<f64> = images.iter().map(|im| cosine(c, im)).collect();
        // images strictly ahead of the target, plus earlier-indexed ties
        let rank = (0..n)
            .filter(|&j| j != i && (sims[j] > sims[i] || (sims[j] == sims[i] && j < i)))
            .count();
        ranks.push(rank);
    }
    let at = |k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64;
    Ok(T2iRecall {
        r1: at(1),
        r5: at(5),
        r10: at(10),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub k: usize,
    pub p: f64,
    pub r: f64,
}

/// Precision and recall of each scene's top-`k` tuples against its targets,
/// micro-averaged. Duplicate tuples collapse, so precision divides by the
/// number of distinct tuples among the top `k`.
pub fn spice_pr_curve(
    ranked: &[Vec<Tuple>],
    targets: &[BTreeSet<Tuple>],
    k_grid: &[usize],
) -> Result<Vec<PrPoint>> {
    if ranked.len() != targets.len() {
        return Err(Error::Invalid("prediction and target scene counts differ".into()));
    }
    let n_targets: usize = targets.iter().map(BTreeSet::len).sum();
    if n_targets == 0 {
        return Err(Error::Invalid("every scene has an empty target set".into()));
    }
    if k_grid.is_empty() || k_grid[0] == 0 || k_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid("k grid must be ascending and start at >= 1".into()));
    }
    let mut out = Vec::with_capacity(k_grid.len());
    for &k in k_grid {
        let (mut hits, mut valid) = (0usize, 0usize);
        for (preds, tgt) in ranked.iter().zip(targets) {
            let top: BTreeSet<&Tuple> = preds.iter().take(k).collect();
            valid += top.len();
            hits += top.iter().filter(|t| tgt.contains(**t)).count();
        }
        let p = if valid == 0 { 0.0 } else { hits as f64 / valid as f64 };
        out.push(PrPoint {
            k,
            p,
            r: hits as f64 / n_targets as f64,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diversity {
    pub predicted: usize,
    pub correct: usize,
}

/// Distinct `(predicate, object category)` combinations predicted, and those
/// among them that came from a prediction matching a target tuple.
pub fn diversity_count(preds: &[Vec<Tuple>], targets: &[BTreeSet<Tuple>]) -> Diversity {
    let mut predicted = BTreeSet::new();
    let mut correct = BTreeSet::new();
    for (ps, tgt) in preds.iter().zip(targets) {
        for t in ps {
            let combo = (t.1.clone(), t.2.clone());
            if tgt.contains(t) {
                correct.insert(combo.clone());
            }
            predicted.insert(combo);
        }
    }
    Diversity {
        predicted: predicted.len(),
        correct: correct.len(),
    }
}

/// `p(predicate | subject category, object category)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommonsensePrior {
    pub predicates: Vec<String>,
    /// Keyed by `"subject|object"`; each row is a distribution over `predicates`.
    pub rows: BTreeMap<String, Vec<f64>>,
}

fn row_key(s: &str, o: &str) -> String {
    format!("{s}|{o}")
}

impl CommonsensePrior {
    /// Normalised compatibility weights; incompatible predicates get 0.
    pub fn from_world(world: &WorldConfig) -> Result<Self> {
        world.validate()?;
        let index: BTreeMap<&str, usize> = world
            .predicates
            .iter()
            .enumerate()
            .map(|(i, p)| (p.as_str(), i))
            .collect();
        let mut rows = BTreeMap::new();
        for r in &world.compat {
            let mut row = vec![0.0; world.predicates.len()];
            let z: f64 = r.predicates.iter().map(|(_, w)| w).sum();
            for (p, w) in &r.predicates {
                row[index[p.as_str()]] += w / z;
            }
            rows.insert(row_key(&r.subject, &r.object), row);
        }
        Ok(Self {
            predicates: world.predicates.clone(),
            rows,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (k, row) in &self.rows {
            if row.len() != self.predicates.len() || row.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::Invalid(format!("prior row {k} malformed")));
            }
            let z: f64 = row.iter().sum();
            if (z - 1.0).abs() > 1e-9 {
                return Err(Error::Invalid(format!("prior row {k} sums to {z}")));
            }
        }
        Ok(())
    }

    pub fn row(&self, s: &str, o: &str) -> Option<&[f64]> {
        self.rows.get(&row_key(s, o)).map(Vec::as_slice)
    }

    /// Probability of `p`, or `None` when the category pair has no row.
    pub fn prob(&self, s: &str, p: &str, o: &str) -> Option<f64> {
        let row = self.row(s, o)?;
        Some(
            self.predicates
                .iter()
                .position(|q| q == p)
                .map_or(0.0, |i| row[i]),
        )
    }

    /// Most probable predicate for the pair (lowest index on ties).
    pub fn argmax(&self, s: &str, o: &str) -> Option<(&str, f64)> {
        let row = self.row(s, o)?;
        let mut best = 0;
        for (i, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = i;
            }
        }
        Some((&self.predicates[best], row[best]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Sets `refined_score = score · p_prior` and sorts by it, then by the
/// original score, then by predicate. Missing prior rows count as uniform;
/// the number of such predictions is returned.
pub fn rerank_with_prior(preds: &mut [TripletPrediction], prior: &CommonsensePrior) -> usize {
    let uniform = 1.0 / prior.predicates.len().max(1) as f64;
    let mut missing = 0;
    for p in preds.iter_mut() {
        let w = match prior.prob(&p.s.cat, &p.p, &p.o.cat) {
            Some(w) => w,
            None => {
                missing += 1;
                uniform
            }
        };
        p.refined_score = Some(p.score * w);
    }
    preds.sort_by(|a, b| {
        let (ra, rb) = (a.refined_score.unwrap_or(0.0), b.refined_score.unwrap_or(0.0));
        rb.total_cmp(&ra)
            .then(b.score.total_cmp(&a.score))
            .then(a.p.cmp(&b.p))
    });
    missing
}

/// Sorts by score, highest first (ties by predicate, stable otherwise).
pub fn sort_by_score(preds: &mut [TripletPrediction]) {
    preds.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.p.cmp(&b.p)));
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "recall@5")]
    pub recall_5: f64,
    #[serde(rename = "recall@10")]
    pub recall_10: f64,
    #[serde(rename = "recall@15")]
    pub recall_15: f64,
    #[serde(rename = "t2i@1")]
    pub t2i_1: f64,
    #[serde(rename = "t2i@5")]
    pub t2i_5: f64,
    #[serde(rename = "t2i@10")]
    pub t2i_10: f64,
    pub spice: Vec<PrPoint>,
    pub diversity: Diversity,
}

pub const SPICE_K_GRID: [usize; 6] = [1, 2, 3, 5, 8, 10];

/// All metrics for predictions over `scenes` (matched by scene id).
/// Images are encoded without noise.
pub fn evaluate(
    preds: &[ScenePredictions],
    scenes: &[SceneInstance],
    world: &WorldConfig,
    space: &ConceptSpace,
) -> Result<MetricsReport> {
    let by_id: BTreeMap<usize, &ScenePredictions> = preds.iter().map(|p| (p.scene_id, p)).collect();
    let synonyms = world.synonym_map();
    let mut pred_lists = Vec::with_capacity(scenes.len());
    let mut gts = Vec::with_capacity(scenes.len());
    let mut ranked = Vec::with_capacity(scenes.len());
    let mut targets = Vec::with_capacity(scenes.len());
    let mut captions = Vec::with_capacity(scenes.len());
    let mut images = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let ps = by_id
            .get(&scene.id)
            .map(|p| p.triplets.clone())
            .unwrap_or_default();
        let tuples: Vec<Tuple> = ps.iter().map(TripletPrediction::tuple).collect();
        captions.push(caption_embedding(&caption_tuples(&tuples), space)?);
        images.push(image_embedding(scene, space)?);
        ranked.push(tuples);
        targets.push(scene.target_tuples()?);
        gts.push(scene_ground_truth(scene)?);
        pred_lists.push(ps);
    }
    let t2i = t2i_retrieval(&captions, &images)?;
    Ok(MetricsReport {
        recall_5: recall_at_k(&pred_lists, &gts, 5, &synonyms)?,
        recall_10: recall_at_k(&pred_lists, &gts, 10, &synonyms)?,
        recall_15: recall_at_k(&pred_lists, &gts, 15, &synonyms)?,
        t2i_1: t2i.r1,
        t2i_5: t2i.r5,
        t2i_10: t2i.r10,
        spice: spice_pr_curve(&ranked, &targets, &SPICE_K_GRID)?,
        diversity: diversity_count(&ranked, &targets),
    })
}

/// Noise-free image feature: the normalised sum of the scene's distinct
/// categories and predicates.
pub fn image_embedding(scene: &SceneInstance, space: &ConceptSpace) -> Result<Vec<f64>> {
    use crate::synthworld::{mock_encode, MockInput};
    let mut rng = crate::numerics::rng_from_seed(0);
    mock_encode(
        &MockInput::Image(&scene.categories(), &scene.predicates()),
        space,
        0.0,
        &mut rng,
    )
}
