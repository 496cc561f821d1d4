//! Relation-to-pair assignment: cosine similarities, an exact Hungarian
//! solver, multi-round ∅-padded matching, and IoU-based ground-truth
//! matching matrices.

use serde::{Deserialize, Serialize};

use crate::denoiser::ConditionSet;
use crate::error::{Error, Result};
use crate::numerics::{cosine, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// Against the union-region visual features.
    UnionVisual,
    /// Against the encoder's projected condition rows.
    Projected,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    /// `L × N`.
    pub s: Tensor<f64>,
    pub mode: SimilarityMode,
}

impl SimilarityMatrix {
    pub fn relations(&self) -> usize {
        self.s.rows()
    }

    pub fn pairs(&self) -> usize {
        self.s.cols()
    }
}

/// Cosine similarity of each relation embedding with each real pair.
pub fn similarity_matrix(
    emb_rows: &Tensor<f64>,
    cond: &ConditionSet,
    mode: SimilarityMode,
    projected: Option<&Tensor<f64>>,
) -> Result<SimilarityMatrix> {
    let targets = match mode {
        SimilarityMode::UnionVisual => &cond.y_so,
        SimilarityMode::Projected => projected.ok_or_else(|| {
            Error::Invalid("projected similarity needs encoded conditions".into())
        })?,
    };
    if targets.cols() != emb_rows.cols() {
        return Err(Error::Shape(format!(
            "similarity: relation width {} vs pair width {}",
            emb_rows.cols(),
            targets.cols()
        )));
    }
    let (l, n) = (emb_rows.rows(), cond.n);
    let s = Tensor::from_fn(&[l, n], |k| {
        let (i, j) = (k / n, k % n);
        cosine(emb_rows.row(i), targets.row(j)).clamp(-1.0, 1.0)
    });
    Ok(SimilarityMatrix { s, mode })
}

/// Minimum-cost perfect matching of a square matrix (O(n³) potentials).
/// Returns `row_of_col` and the total cost.
fn hungarian_raw(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = cost.len();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    // 1-based arrays, column 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let row_of_col: Vec<usize> = (1..=n).map(|j| p[j] - 1).collect();
    let total = assignment_cost(cost, &row_of_col);
    (row_of_col, total)
}

/// `Σ_j cost[perm[j]][j]`, summed in column order.
pub fn assignment_cost(cost: &[Vec<f64>], row_of_col: &[usize]) -> f64 {
    row_of_col
        .iter()
        .enumerate()
        .map(|(j, &r)| cost[r][j])
        .sum()
}

/// Exact minimum-cost assignment of a square cost matrix.
///
/// Returns `perm` with `perm[j]` = row assigned to column `j`, minimising
/// `Σ_j cost[perm[j]][j]`. Among optimal permutations the lexicographically
/// smallest `perm` is returned.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::Shape("hungarian: cost matrix must be square".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("hungarian cost".into()));
    }
    let (_, best) = hungarian_raw(cost);
    let scale = cost.iter().flatten().fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-9 * scale * n.max(1) as f64;

    // Greedy lexicographic refinement: fix columns left to right, taking the
    // smallest row that still admits an optimal completion.
    let mut perm = Vec::with_capacity(n);
    let mut free_rows: Vec<usize> = (0..n).collect();
    let mut prefix = 0.0;
    for j in 0..n {
        let mut chosen = None;
        for (pos, &r) in free_rows.iter().enumerate() {
            let rest_rows: Vec<usize> = free_rows.iter().copied().filter(|&x| x != r).collect();
            let sub: Vec<Vec<f64>> = rest_rows
                .iter()
                .map(|&rr| cost[rr][j + 1..].to_vec())
                .collect();
            let (_, rest) = hungarian_raw(&sub);
            if prefix + cost[r][j] + rest <= best + tol {
                chosen = Some(pos);
                break;
            }
        }
        // the optimum is always reachable; fall back defensively to the raw solver
        let pos = match chosen {
            Some(p) => p,
            None => return Ok(hungarian_raw(cost).0),
        };
        let r = free_rows.remove(pos);
        prefix += cost[r][j];
        perm.push(r);
    }
    Ok(perm)
}

/// One relation's pair, with the round in which it was matched (1-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matched {
    pub relation: usize,
    pub pair: usize,
    pub round: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// Sorted by relation index; one entry per relation.
    pub matches: Vec<Matched>,
}

impl Assignment {
    pub fn pair_of(&self, relation: usize) -> usize {
        self.matches[relation].pair
    }

    pub fn rounds(&self) -> usize {
        self.matches.iter().map(|m| m.round).max().unwrap_or(0)
    }

    pub fn round(&self, round: usize) -> impl Iterator<Item = &Matched> {
        self.matches.iter().filter(move |m| m.round == round)
    }
}

/// Repeated ∅-padded Hungarian matching until every relation holds a pair.
///
/// Each round builds a square problem over the unassigned relations and the
/// `N` pairs padded with ∅ (or dummy relations when pairs outnumber them);
/// matching a real relation to a real pair `j` costs `−S[i, j]`, anything
/// involving ∅ or a dummy costs 0. Relations matched to real pairs are
/// removed; all pairs are offered again in the next round.
pub fn multi_round_match(sim: &SimilarityMatrix) -> Result<Assignment> {
    let (l, n) = (sim.relations(), sim.pairs());
    if n == 0 {
        return Err(Error::Invalid("multi-round matching needs at least one pair".into()));
    }
    let mut remaining: Vec<usize> = (0..l).collect();
    let mut out: Vec<Option<Matched>> = vec![None; l];
    let mut round = 0;
    while !remaining.is_empty() {
        round += 1;
        let m = remaining.len();
        let k = m.max(n);
        let cost: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| {
                        if i < m && j < n {
                            -sim.s.at(remaining[i], j)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        let perm = hungarian(&cost)?;
        let mut taken = Vec::new();
        for (j, &i) in perm.iter().enumerate().take(n) {
            if i < m {
                let rel = remaining[i];
                out[rel] = Some(Matched {
                    relation: rel,
                    pair: j,
                    round,
                });
                taken.push(rel);
            }
        }
        remaining.retain(|r| !taken.contains(r));
    }
    Ok(Assignment {
        matches: out.into_iter().map(|m| m.expect("every relation matched")).collect(),
    })
}

/// Axis-aligned box `(x1, y1, x2, y2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox(pub [f64; 4]);

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox([x1, y1, x2, y2]);
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let [x1, y1, x2, y2] = self.0;
        if !(x2 > x1 && y2 > y1) || self.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("malformed box {:?}", self.0)));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        let [x1, y1, x2, y2] = self.0;
        (x2 - x1) * (y2 - y1)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.0[2].min(other.0[2]) - self.0[0].max(other.0[0])).max(0.0);
        let iy = (self.0[3].min(other.0[3]) - self.0[1].max(other.0[1])).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn union_box(&self, other: &BBox) -> BBox {
        BBox([
            self.0[0].min(other.0[0]),
            self.0[1].min(other.0[1]),
            self.0[2].max(other.0[2]),
            self.0[3].max(other.0[3]),
        ])
    }
}

/// Category plus box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Located {
    pub category: String,
    pub bbox: BBox,
}

/// A subject–object pair as seen by the matcher.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBoxes {
    pub subject: Located,
    pub object: Located,
}

/// Ground-truth relation with a vocabulary token.
#[derive(Clone, Debug, PartialEq)]
pub struct GtRelation {
    pub subject: Located,
    pub predicate: usize,
    pub object: Located,
}

/// `L × N` binary matrix; row `i` marks the pair(s) of relation slot `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchingMatrix {
    pub m: Vec<Vec<u8>>,
}

impl MatchingMatrix {
    pub fn zeros(l: usize, n: usize) -> Self {
        Self {
            m: vec![vec![0; n]; l],
        }
    }

    pub fn rows(&self) -> usize {
        self.m.len()
    }

    pub fn cols(&self) -> usize {
        self.m.first().map_or(0, Vec::len)
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.m[i][j]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtMatching {
    pub matrix: MatchingMatrix,
    /// `(token, pair)` per attached relation, in slot order.
    pub slots: Vec<(usize, usize)>,
    pub dropped: usize,
}

/// Attaches ground-truth relations to detected pairs by box IoU and category.
///
/// A relation attaches to the first pair (highest worst-side IoU, lowest
/// index on ties) whose subject and object categories match and whose boxes
/// both reach `iou_thr`. Attached relations fill slots in order, at most `l`;
/// the rest are counted as dropped.
pub fn build_gt_matching(
    pairs: &[PairBoxes],
    gt: &[GtRelation],
    iou_thr: f64,
    l: usize,
) -> Result<GtMatching> {
    for p in pairs {
        p.subject.bbox.validate()?;
        p.object.bbox.validate()?;
    }
    for g in gt {
        g.subject.bbox.validate()?;
        g.object.bbox.validate()?;
    }
    let n = pairs.len();
    let mut matrix = MatchingMatrix::zeros(l, n);
    let mut slots = Vec::new();
    let mut dropped = 0;
    for rel in gt {
        let mut best: Option<(f64, usize)> = None;
        for (j, p) in pairs.iter().enumerate() {
            if p.subject.category != rel.subject.category || p.object.category != rel.object.category {
                continue;
            }
            let s = p.subject.bbox.iou(&rel.subject.bbox);
            let o = p.object.bbox.iou(&rel.object.bbox);
            let score = s.min(o);
            if s >= iou_thr && o >= iou_thr && best.is_none_or(|(b, _)| score > b) {
                best = Some((score, j));
            }
        }
        match best {
            Some((_, j)) if slots.len() < l => {
                matrix.m[slots.len()][j] = 1;
                slots.push((rel.predicate, j));
            }
            _ => dropped += 1,
        }
    }
    Ok(GtMatching {
        matrix,
        slots,
        dropped,
    })
}
