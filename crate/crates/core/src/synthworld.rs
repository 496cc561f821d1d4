//! Seeded synthetic scenes and a mock joint visual/text embedding space.
//!
//! The world's compatibility table says which predicates may link which
//! object categories, with weights. It drives scene generation, pseudo
//! labels, the commonsense prior and the evaluation targets.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::denoiser::ConditionSet;
use crate::error::{Error, Result};
use crate::matcher::{build_gt_matching, BBox, GtRelation, Located, MatchingMatrix, PairBoxes};
use crate::numerics::{cosine, derived_rng, normalize_in_place, standard_normal, Rng, Tensor};
use crate::objectives::TrainingExample;
use crate::relvocab::{Provenance, RelationSequence, RelationVocabulary};

pub const CATEGORIES: [&str; 12] = [
    "person", "horse", "bicycle", "dog", "cup", "table", "chair", "car", "umbrella", "book",
    "ball", "kite",
];

pub const PREDICATES: [&str; 48] = [
    "ride", "hold", "carry", "feed", "pet", "walk", "sit on", "stand on", "lie on", "eat at",
    "drink with", "throw", "catch", "kick", "fly", "read", "open", "push", "pull", "wash",
    "repair", "drive", "park", "board", "hug", "chase", "look at", "watch", "next to", "beside",
    "on", "under", "behind", "in front of", "near", "above", "inside", "wear", "use", "lean on",
    "sip", "pour", "fill", "stack", "cover", "play with", "touch", "own",
];

const SYNONYMS: [&[&str]; 4] = [
    &["next to", "beside", "near"],
    &["look at", "watch"],
    &["hold", "carry"],
    &["sit on", "lean on"],
];

const PURPOSE_WORLD: u64 = 0x5701;
const PURPOSE_SCENE: u64 = 0x5702;
const PURPOSE_SPACE: u64 = 0x5703;

/// Predicates allowed for one ordered category pair, with sampling weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompatRow {
    pub subject: String,
    pub object: String,
    pub predicates: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub categories: Vec<String>,
    pub predicates: Vec<String>,
    /// Groups of interchangeable predicates.
    pub synonyms: Vec<Vec<String>>,
    pub compat: Vec<CompatRow>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_triplets: usize,
    pub max_triplets: usize,
    /// Cap on distinct predicates annotated for one subject–object pair.
    pub max_predicates_per_pair: usize,
}

impl WorldConfig {
    /// Twelve categories, 48 predicates, and a table seeded from
    /// `table_seed` with 3–6 weighted predicates per ordered category pair.
    pub fn desk(table_seed: u64) -> Self {
        let mut rng = derived_rng(table_seed, PURPOSE_WORLD, 0);
        let mut compat = Vec::new();
        for s in CATEGORIES {
            for o in CATEGORIES {
                let k = rng.random_range(3..=6);
                let picks: Vec<&&str> = PREDICATES.choose_multiple(&mut rng, k).collect();
                let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
                let z: f64 = raw.iter().sum();
                compat.push(CompatRow {
                    subject: s.into(),
                    object: o.into(),
                    predicates: picks.iter().zip(&raw).map(|(p, w)| (p.to_string(), w / z)).collect(),
                });
            }
        }
        Self {
            categories: CATEGORIES.iter().map(|s| s.to_string()).collect(),
            predicates: PREDICATES.iter().map(|s| s.to_string()).collect(),
            synonyms: SYNONYMS
                .iter()
                .map(|g| g.iter().map(|s| s.to_string()).collect())
                .collect(),
            compat,
            min_objects: 2,
            max_objects: 5,
            min_triplets: 1,
            max_triplets: 6,
            max_predicates_per_pair: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.compat.is_empty() {
            return Err(Error::config("compat", "compatibility table is empty"));
        }
        if self.min_objects < 2 || self.min_objects > self.max_objects {
            return Err(Error::config("min_objects", "need 2 <= min_objects <= max_objects"));
        }
        if self.min_triplets < 1 || self.min_triplets > self.max_triplets {
            return Err(Error::config("min_triplets", "need 1 <= min_triplets <= max_triplets"));
        }
        if self.max_triplets < self.max_objects.div_ceil(2) {
            return Err(Error::config(
                "max_triplets",
                "too small to give every object a relation",
            ));
        }
        if self.max_predicates_per_pair == 0 {
            return Err(Error::config("max_predicates_per_pair", "must be >= 1"));
        }
        let cats: BTreeSet<&str> = self.categories.iter().map(String::as_str).collect();
        let preds: BTreeSet<&str> = self.predicates.iter().map(String::as_str).collect();
        if cats.len() != self.categories.len() || preds.len() != self.predicates.len() {
            return Err(Error::config("categories", "names must be unique"));
        }
        let mut seen = BTreeSet::new();
        for row in &self.compat {
            if !cats.contains(row.subject.as_str()) || !cats.contains(row.object.as_str()) {
                return Err(Error::UnknownConcept(format!("{} / {}", row.subject, row.object)));
            }
            if !seen.insert((row.subject.as_str(), row.object.as_str())) {
                return Err(Error::config("compat", "duplicate category pair"));
            }
            if row.predicates.is_empty() {
                return Err(Error::config("compat", "row without predicates"));
            }
            for (p, w) in &row.predicates {
                if !preds.contains(p.as_str()) {
                    return Err(Error::UnknownConcept(p.clone()));
                }
                if !(*w > 0.0 && w.is_finite()) {
                    return Err(Error::config("compat", "weights must be positive"));
                }
            }
        }
        // every ordered pair must be generatable
        if seen.len() != cats.len() * cats.len() {
            return Err(Error::config("compat", "every ordered category pair needs a row"));
        }
        for group in &self.synonyms {
            if let Some(p) = group.iter().find(|p| !preds.contains(p.as_str())) {
                return Err(Error::UnknownConcept(p.clone()));
            }
        }
        Ok(())
    }

    pub fn compat_row(&self, subject: &str, object: &str) -> Option<&CompatRow> {
        self.compat
            .iter()
            .find(|r| r.subject == subject && r.object == object)
    }

    pub fn is_compatible(&self, subject: &str, predicate: &str, object: &str) -> bool {
        self.compat_row(subject, object)
            .is_some_and(|r| r.predicates.iter().any(|(p, _)| p == predicate))
    }

    /// Each predicate's accepted phrase set (always containing itself).
    pub fn synonym_map(&self) -> BTreeMap<String, BTreeSet<String>> {
        let mut map: BTreeMap<String, BTreeSet<String>> = self
            .predicates
            .iter()
            .map(|p| (p.clone(), BTreeSet::from([p.clone()])))
            .collect();
        for group in &self.synonyms {
            for p in group {
                if let Some(set) = map.get_mut(p) {
                    set.extend(group.iter().cloned());
                }
            }
        }
        map
    }

    pub fn load(path: &Path) -> Result<Self> {
        let w: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        w.validate()?;
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptKind {
    Object,
    Predicate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub name: String,
    pub kind: ConceptKind,
    pub vector: Vec<f64>,
}

/// Unit base vectors for every category and predicate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpace {
    pub seed: u64,
    pub d_feat: usize,
    pub concepts: Vec<Concept>,
    #[serde(skip)]
    index: HashMap<(ConceptKind, String), usize>,
}

impl ConceptSpace {
    /// Seeded vectors spread apart by a few thousand steps of pairwise
    /// repulsion on the sphere.
    pub fn new(world: &WorldConfig, d_feat: usize, seed: u64) -> Result<Self> {
        if d_feat == 0 {
            return Err(Error::config("d_feat", "must be >= 1"));
        }
        let names: Vec<(ConceptKind, &String)> = world
            .categories
            .iter()
            .map(|c| (ConceptKind::Object, c))
            .chain(world.predicates.iter().map(|p| (ConceptKind::Predicate, p)))
            .collect();
        let n = names.len();
        let mut rng = derived_rng(seed, PURPOSE_SPACE, 0);
        let mut x: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut v: Vec<f64> = (0..d_feat).map(|_| standard_normal(&mut rng)).collect();
                normalize_in_place(&mut v);
                v
            })
            .collect();
        spread(&mut x, 3000);
        let concepts = names
            .iter()
            .zip(x)
            .map(|((kind, name), vector)| Concept {
                name: (*name).clone(),
                kind: *kind,
                vector,
            })
            .collect();
        let mut s = Self {
            seed,
            d_feat,
            concepts,
            index: HashMap::new(),
        };
        s.reindex();
        Ok(s)
    }

    fn reindex(&mut self) {
        self.index = self
            .concepts
            .iter()
            .enumerate()
            .map(|(i, c)| ((c.kind, c.name.clone()), i))
            .collect();
    }

    pub fn vector(&self, kind: ConceptKind, name: &str) -> Result<&[f64]> {
        self.index
            .get(&(kind, name.to_string()))
            .map(|&i| self.concepts[i].vector.as_slice())
            .ok_or_else(|| Error::UnknownConcept(format!("{kind:?} {name}")))
    }

    /// Largest |cosine| between two distinct base vectors.
    pub fn max_coherence(&self) -> f64 {
        let mut m = 0.0f64;
        for i in 0..self.concepts.len() {
            for j in i + 1..self.concepts.len() {
                m = m.max(cosine(&self.concepts[i].vector, &self.concepts[j].vector).abs());
            }
        }
        m
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut s: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        s.reindex();
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    /// Vocabulary whose embeddings are the predicate text vectors.
    pub fn vocabulary(&self, world: &WorldConfig, sigma0: f64) -> Result<RelationVocabulary<f64>> {
        let rows: Vec<&[f64]> = world
            .predicates
            .iter()
            .map(|p| self.vector(ConceptKind::Predicate, p))
            .collect::<Result<_>>()?;
        RelationVocabulary::new(world.predicates.clone(), Tensor::stack_rows(&rows)?, sigma0)
    }
}

/// Gradient steps on `Σ cos⁸` between distinct rows, renormalising each step.
fn spread(x: &mut [Vec<f64>], iters: usize) {
    let n = x.len();
    let d = x.first().map_or(0, Vec::len);
    let mut grad = vec![vec![0.0; d]; n];
    for _ in 0..iters {
        let mut gmax = 0.0f64;
        for i in 0..n {
            grad[i].iter_mut().for_each(|g| *g = 0.0);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let c: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| a * b).sum();
                let w = 8.0 * c.powi(7);
                for k in 0..d {
                    grad[i][k] += w * x[j][k];
                }
            }
            gmax = grad[i].iter().fold(gmax, |m, g| m.max(g.abs()));
        }
        if gmax == 0.0 {
            break;
        }
        let step = 0.005 / gmax;
        for i in 0..n {
            for k in 0..d {
                x[i][k] -= step * grad[i][k];
            }
            normalize_in_place(&mut x[i]);
        }
    }
}

/// What to encode.
#[derive(Clone, Debug, PartialEq)]
pub enum MockInput<'a> {
    ObjectText(&'a str),
    ObjectVisual(&'a str),
    /// Subject category, object category, and the pair's predicates.
    UnionVisual(&'a str, &'a str, &'a [String]),
    PredicateText(&'a str),
    /// Object categories and predicates of a whole scene.
    Image(&'a [String], &'a [String]),
}

/// Stand-in for a joint visual/text encoder. Text kinds return base vectors;
/// visual kinds return `normalize(Σ base vectors + nu·g)` with
/// `g ~ N(0, I / d_feat)`, so `nu` is the expected noise norm. Image and
/// union inputs sum over distinct concepts.
pub fn mock_encode(input: &MockInput, space: &ConceptSpace, nu: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    use ConceptKind::{Object, Predicate};
    let mut parts: Vec<(ConceptKind, &str)> = Vec::new();
    let visual = match input {
        MockInput::ObjectText(c) => return Ok(space.vector(Object, c)?.to_vec()),
        MockInput::PredicateText(p) => return Ok(space.vector(Predicate, p)?.to_vec()),
        MockInput::ObjectVisual(c) => {
            parts.push((Object, c));
            true
        }
        MockInput::UnionVisual(s, o, preds) => {
            parts.push((Object, s));
            parts.push((Object, o));
            parts.extend(preds.iter().map(|p| (Predicate, p.as_str())));
            true
        }
        MockInput::Image(objs, preds) => {
            parts.extend(objs.iter().map(|c| (Object, c.as_str())));
            parts.extend(preds.iter().map(|p| (Predicate, p.as_str())));
            true
        }
    };
    debug_assert!(visual);
    let distinct: BTreeSet<(ConceptKind, &str)> = parts.into_iter().collect();
    let mut v = vec![0.0; space.d_feat];
    for (kind, name) in distinct {
        for (a, b) in v.iter_mut().zip(space.vector(kind, name)?) {
            *a += b;
        }
    }
    if nu > 0.0 {
        let s = nu / (space.d_feat as f64).sqrt();
        for a in v.iter_mut() {
            *a += s * standard_normal::<f64>(rng);
        }
    }
    normalize_in_place(&mut v);
    Ok(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: usize,
    pub cat: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneInstance {
    pub id: usize,
    pub objects: Vec<SceneObject>,
    /// `(subject id, predicate, object id)`.
    pub triplets: Vec<(usize, String, usize)>,
}

impl SceneInstance {
    pub fn object(&self, id: usize) -> Result<&SceneObject> {
        self.objects
            .iter()
            .find(|o| o.id == id)
            .ok_or_else(|| Error::Invalid(format!("scene {}: no object {id}", self.id)))
    }

    /// Distinct annotated `(subject, object)` pairs in first-appearance order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for (s, _, o) in &self.triplets {
            if !out.contains(&(*s, *o)) {
                out.push((*s, *o));
            }
        }
        out
    }

    pub fn pair_predicates(&self, pair: (usize, usize)) -> Vec<String> {
        self.triplets
            .iter()
            .filter(|(s, _, o)| (*s, *o) == pair)
            .map(|(_, p, _)| p.clone())
            .collect()
    }

    /// `(subject category, predicate, object category)` targets.
    pub fn target_tuples(&self) -> Result<BTreeSet<(String, String, String)>> {
        self.triplets
            .iter()
            .map(|(s, p, o)| Ok((self.object(*s)?.cat.clone(), p.clone(), self.object(*o)?.cat.clone())))
            .collect()
    }

    pub fn categories(&self) -> Vec<String> {
        self.objects.iter().map(|o| o.cat.clone()).collect()
    }

    pub fn predicates(&self) -> Vec<String> {
        self.triplets.iter().map(|(_, p, _)| p.clone()).collect()
    }

    pub fn validate(&self, world: &WorldConfig) -> Result<()> {
        if self.triplets.is_empty() {
            return Err(Error::Invalid(format!("scene {} has no triplets", self.id)));
        }
        for o in &self.objects {
            let b = BBox(o.bbox);
            b.validate()?;
            if o.bbox.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Invalid(format!("scene {}: box outside canvas", self.id)));
            }
        }
        for (s, p, o) in &self.triplets {
            let (sc, oc) = (&self.object(*s)?.cat, &self.object(*o)?.cat);
            if !world.is_compatible(sc, p, oc) {
                return Err(Error::Invalid(format!(
                    "scene {}: <{sc}, {p}, {oc}> is not in the table",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

fn random_box(rng: &mut Rng) -> [f64; 4] {
    let w = rng.random_range(0.1..0.5);
    let h = rng.random_range(0.1..0.5);
    let x1 = rng.random_range(0.0..1.0 - w);
    let y1 = rng.random_range(0.0..1.0 - h);
    [x1, y1, x1 + w, y1 + h]
}

fn weighted_pick<'a>(items: &'a [(String, f64)], rng: &mut Rng) -> &'a str {
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    let mut u = rng.random_range(0.0..total);
    for (p, w) in items {
        if u < *w {
            return p;
        }
        u -= w;
    }
    &items[items.len() - 1].0
}

fn gen_scene(id: usize, world: &WorldConfig, rng: &mut Rng) -> SceneInstance {
    let n_obj = rng.random_range(world.min_objects..=world.max_objects);
    let objects: Vec<SceneObject> = (0..n_obj)
        .map(|i| SceneObject {
            id: i,
            cat: world.categories.choose(rng).expect("categories").clone(),
            bbox: random_box(rng),
        })
        .collect();
    let target = rng.random_range(world.min_triplets..=world.max_triplets);
    let mut triplets: Vec<(usize, String, usize)> = Vec::new();

    let try_add = |s: usize, o: usize, triplets: &mut Vec<(usize, String, usize)>, rng: &mut Rng| -> bool {
        let used: Vec<&String> = triplets
            .iter()
            .filter(|(a, _, b)| (*a, *b) == (s, o))
            .map(|(_, p, _)| p)
            .collect();
        if used.len() >= world.max_predicates_per_pair {
            return false;
        }
        let Some(row) = world.compat_row(&objects[s].cat, &objects[o].cat) else {
            return false;
        };
        let free: Vec<(String, f64)> = row
            .predicates
            .iter()
            .filter(|(p, _)| !used.contains(&p))
            .cloned()
            .collect();
        if free.is_empty() {
            return false;
        }
        let p = weighted_pick(&free, rng).to_string();
        triplets.push((s, p, o));
        true
    };

    // every object takes part in at least one relation
    let mut covered = vec![false; n_obj];
    while let Some(u) = covered.iter().position(|c| !c) {
        let others: Vec<usize> = (0..n_obj).filter(|&j| j != u).collect();
        let fresh: Vec<usize> = others.iter().copied().filter(|&j| !covered[j]).collect();
        let partner = *fresh.choose(rng).unwrap_or_else(|| others.choose(rng).expect("two objects"));
        let (s, o) = if rng.random_bool(0.5) { (u, partner) } else { (partner, u) };
        if try_add(s, o, &mut triplets, rng) || try_add(o, s, &mut triplets, rng) {
            covered[s] = true;
            covered[o] = true;
        } else {
            covered[u] = true;
        }
    }
    let mut attempts = 0;
    while triplets.len() < target.min(world.max_triplets) && attempts < 64 {
        attempts += 1;
        let s = rng.random_range(0..n_obj);
        let o = rng.random_range(0..n_obj);
        if s != o {
            try_add(s, o, &mut triplets, rng);
        }
    }
    SceneInstance {
        id,
        objects,
        triplets,
    }
}

/// `n_scenes` scenes; scene `i` draws from its own stream so the output does
/// not depend on generation order.
pub fn gen_dataset(n_scenes: usize, world: &WorldConfig, seed: u64) -> Result<Vec<SceneInstance>> {
    world.validate()?;
    if n_scenes == 0 {
        return Err(Error::config("n_scenes", "must be >= 1"));
    }
    Ok((0..n_scenes)
        .map(|i| gen_scene(i, world, &mut derived_rng(seed, PURPOSE_SCENE, i as u64)))
        .collect())
}

pub fn write_dataset(w: &mut impl Write, scenes: &[SceneInstance]) -> Result<()> {
    for s in scenes {
        serde_json::to_writer(&mut *w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset(r: impl BufRead) -> Result<Vec<SceneInstance>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, scenes: &[SceneInstance]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(&mut f, scenes)?;
    f.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<SceneInstance>> {
    read_dataset(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// The pair conditions of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConditions {
    /// `(subject id, object id)` per condition row, at most `L`.
    pub pairs: Vec<(usize, usize)>,
    pub cond: ConditionSet,
}

/// Per pair: `[subject visual, object visual, union visual, subject text,
/// object text]`, with the union visual row doubling as `y_so`. Pairs beyond
/// `l` are dropped.
pub fn scene_conditions(
    scene: &SceneInstance,
    space: &ConceptSpace,
    nu: f64,
    l: usize,
    rng: &mut Rng,
) -> Result<SceneConditions> {
    let mut pairs = scene.pairs();
    pairs.truncate(l);
    let mut ys = Vec::with_capacity(pairs.len());
    let mut sos = Vec::with_capacity(pairs.len());
    for &(s, o) in &pairs {
        let (sc, oc) = (&scene.object(s)?.cat, &scene.object(o)?.cat);
        let preds = scene.pair_predicates((s, o));
        let sv = mock_encode(&MockInput::ObjectVisual(sc), space, nu, rng)?;
        let ov = mock_encode(&MockInput::ObjectVisual(oc), space, nu, rng)?;
        let uv = mock_encode(&MockInput::UnionVisual(sc, oc, &preds), space, nu, rng)?;
        let st = mock_encode(&MockInput::ObjectText(sc), space, nu, rng)?;
        let ot = mock_encode(&MockInput::ObjectText(oc), space, nu, rng)?;
        let mut y = Vec::with_capacity(5 * space.d_feat);
        for part in [&sv, &ov, &uv, &st, &ot] {
            y.extend_from_slice(part);
        }
        ys.push(y);
        sos.push(uv);
    }
    if pairs.is_empty() {
        return Err(Error::Invalid(format!("scene {} has no pairs", scene.id)));
    }
    let cond = ConditionSet::new(&ys, &sos, l)?;
    Ok(SceneConditions { pairs, cond })
}

/// A training example plus the pair each slot belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct BuiltExample {
    pub example: TrainingExample,
    pub pairs: Vec<(usize, usize)>,
    /// Pair row of each slot.
    pub slot_pair: Vec<usize>,
}

/// Ground-truth slots first (attached to their pairs by box IoU), then
/// pseudo labels: each pair's `top_k` vocabulary phrases by similarity to its
/// union visual feature, taken round-robin over pairs until `L` slots are full.
pub fn build_training_example(
    scene: &SceneInstance,
    vocab: &RelationVocabulary<f64>,
    l: usize,
    space: &ConceptSpace,
    nu: f64,
    top_k: usize,
    rng: &mut Rng,
) -> Result<BuiltExample> {
    if top_k == 0 {
        return Err(Error::config("pseudo_top_k", "must be >= 1"));
    }
    let sc = scene_conditions(scene, space, nu, l, rng)?;
    let n = sc.pairs.len();
    let located = |id: usize| -> Result<Located> {
        let o = scene.object(id)?;
        Ok(Located {
            category: o.cat.clone(),
            bbox: BBox(o.bbox),
        })
    };
    let pair_boxes: Vec<PairBoxes> = sc
        .pairs
        .iter()
        .map(|&(s, o)| {
            Ok(PairBoxes {
                subject: located(s)?,
                object: located(o)?,
            })
        })
        .collect::<Result<_>>()?;
    let gt: Vec<GtRelation> = scene
        .triplets
        .iter()
        .map(|(s, p, o)| {
            let tok = vocab
                .index_of(p)
                .ok_or_else(|| Error::UnknownConcept(p.clone()))?;
            Ok(GtRelation {
                subject: located(*s)?,
                predicate: tok,
                object: located(*o)?,
            })
        })
        .collect::<Result<_>>()?;
    let gm = build_gt_matching(&pair_boxes, &gt, 1.0, l)?;

    let mut tokens = Vec::with_capacity(l);
    let mut prov = Vec::with_capacity(l);
    let mut slot_pair = Vec::with_capacity(l);
    let mut matrix = MatchingMatrix::zeros(l, n);
    for &(tok, j) in &gm.slots {
        matrix.m[tokens.len()][j] = 1;
        tokens.push(tok);
        prov.push(Provenance::Gt);
        slot_pair.push(j);
    }

    let k = top_k.min(vocab.len());
    let ranked: Vec<Vec<usize>> = (0..n)
        .map(|j| {
            let so = sc.cond.y_so.row(j);
            let mut idx: Vec<(usize, f64)> = (0..vocab.len())
                .map(|w| (w, cosine(so, vocab.embedding(w))))
                .collect();
            idx.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            idx.into_iter().take(k).map(|(w, _)| w).collect()
        })
        .collect();
    let mut r = 0;
    while tokens.len() < l {
        let j = r % n;
        let tok = ranked[j][(r / n) % k];
        matrix.m[tokens.len()][j] = 1;
        tokens.push(tok);
        prov.push(Provenance::Pseudo);
        slot_pair.push(j);
        r += 1;
    }
    Ok(BuiltExample {
        example: TrainingExample {
            sequence: RelationSequence::new(tokens, prov)?,
            cond: sc.cond,
            matching: matrix,
        },
        pairs: sc.pairs,
        slot_pair,
    })
}
