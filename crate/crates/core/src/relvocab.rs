//! The relation vocabulary and the two steps that connect discrete phrases
//! with the continuous latent: the Gaussian embedding step and the
//! distance-softmax rounding step.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{standard_normal, Real, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    /// Ground-truth relation.
    Gt,
    /// Similarity-selected filler used to reach length `L`.
    Pseudo,
    /// Unused slot; excluded from the rounding loss.
    Pad,
    /// Produced by the sampler.
    Generated,
}

/// Fixed-length token sequence over the vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationSequence {
    pub tokens: Vec<usize>,
    pub provenance: Vec<Provenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

impl RelationSequence {
    pub fn new(tokens: Vec<usize>, provenance: Vec<Provenance>) -> Result<Self> {
        if tokens.len() != provenance.len() {
            return Err(Error::Invalid("token and provenance lengths differ".into()));
        }
        Ok(Self {
            tokens,
            provenance,
            scores: None,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self, vocab_size: usize, len: usize) -> Result<()> {
        if self.tokens.len() != len || self.provenance.len() != len {
            return Err(Error::Invalid(format!(
                "sequence length {} != {len}",
                self.tokens.len()
            )));
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::InvalidToken {
                index: t,
                vocab: vocab_size,
            });
        }
        if let Some(s) = &self.scores {
            if s.len() != len || s.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Invalid("scores must be L probabilities".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct VocabEntry {
    phrase: String,
    embedding: Vec<f64>,
}

/// Relation phrases with their embedding table.
#[derive(Clone, Debug)]
pub struct RelationVocabulary<F> {
    phrases: Vec<String>,
    index: HashMap<String, usize>,
    embeddings: Tensor<F>,
    pub sigma0: f64,
}

impl<F: Real> RelationVocabulary<F> {
    pub fn new(phrases: Vec<String>, embeddings: Tensor<F>, sigma0: f64) -> Result<Self> {
        if phrases.len() < 2 {
            return Err(Error::Invalid("vocabulary needs at least 2 phrases".into()));
        }
        if embeddings.rank() != 2 || embeddings.rows() != phrases.len() || embeddings.cols() == 0 {
            return Err(Error::Shape(format!(
                "embedding table {:?} for {} phrases",
                embeddings.shape(),
                phrases.len()
            )));
        }
        embeddings.check_finite("vocabulary embeddings")?;
        if sigma0 < 0.0 {
            return Err(Error::config("sigma0", "must be >= 0"));
        }
        let mut index = HashMap::new();
        for (i, p) in phrases.iter().enumerate() {
            if index.insert(p.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate phrase {p:?}")));
            }
        }
        Ok(Self {
            phrases,
            index,
            embeddings,
            sigma0,
        })
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    pub fn phrase(&self, i: usize) -> &str {
        &self.phrases[i]
    }

    pub fn index_of(&self, phrase: &str) -> Option<usize> {
        self.index.get(phrase).copied()
    }

    pub fn embeddings(&self) -> &Tensor<F> {
        &self.embeddings
    }

    pub fn embedding(&self, i: usize) -> &[F] {
        self.embeddings.row(i)
    }

    pub fn with_embeddings(&self, embeddings: Tensor<F>) -> Result<Self> {
        Self::new(self.phrases.clone(), embeddings, self.sigma0)
    }

    /// Draws `x0 ~ N(Emb(v), sigma0² I)` row by row.
    pub fn embed_step(&self, seq: &RelationSequence, rng: &mut Rng) -> Result<Tensor<F>> {
        self.embed_with_sigma(seq, self.sigma0, rng)
    }

    pub fn embed_with_sigma(
        &self,
        seq: &RelationSequence,
        sigma: f64,
        rng: &mut Rng,
    ) -> Result<Tensor<F>> {
        let d = self.dim();
        let mut out = Vec::with_capacity(seq.len() * d);
        let s = F::from_f64c(sigma);
        for &tok in &seq.tokens {
            if tok >= self.len() {
                return Err(Error::InvalidToken {
                    index: tok,
                    vocab: self.len(),
                });
            }
            for &e in self.embedding(tok) {
                let noise = if sigma > 0.0 {
                    standard_normal::<F>(rng)
                } else {
                    F::zero()
                };
                out.push(e + s * noise);
            }
        }
        Tensor::new(vec![seq.len(), d], out)
    }

    /// `softmax_w(−‖x − Emb(w)‖² / tau_r)`.
    pub fn round_distribution(&self, x0_row: &[F], tau_r: f64) -> Result<Vec<F>> {
        if !(tau_r > 0.0) {
            return Err(Error::config("tau_r", "must be > 0"));
        }
        if x0_row.len() != self.dim() {
            return Err(Error::Shape("round_distribution: row width".into()));
        }
        let inv = F::from_f64c(1.0 / tau_r);
        let logits: Vec<F> = (0..self.len())
            .map(|w| {
                let d: F = x0_row
                    .iter()
                    .zip(self.embedding(w))
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum();
                -d * inv
            })
            .collect();
        let mx = logits.iter().copied().fold(F::neg_infinity(), F::max);
        let exps: Vec<F> = logits.iter().map(|&l| (l - mx).exp()).collect();
        let z: F = exps.iter().copied().sum();
        Ok(exps.into_iter().map(|e| e / z).collect())
    }

    /// Per row: most probable token (lowest index on ties) and its probability.
    pub fn decode_sequence(&self, x0: &Tensor<F>, tau_r: f64) -> Result<RelationSequence> {
        Ok(self.decode_with_distributions(x0, tau_r)?.0)
    }

    pub fn decode_with_distributions(
        &self,
        x0: &Tensor<F>,
        tau_r: f64,
    ) -> Result<(RelationSequence, Vec<Vec<F>>)> {
        let rows = x0.rows();
        let mut tokens = Vec::with_capacity(rows);
        let mut scores = Vec::with_capacity(rows);
        let mut dists = Vec::with_capacity(rows);
        for i in 0..rows {
            let p = self.round_distribution(x0.row(i), tau_r)?;
            let mut best = 0;
            for (w, &pw) in p.iter().enumerate() {
                if pw > p[best] {
                    best = w;
                }
            }
            tokens.push(best);
            scores.push(p[best].as_f64().clamp(0.0, 1.0));
            dists.push(p);
        }
        let seq = RelationSequence {
            tokens,
            provenance: vec![Provenance::Generated; rows],
            scores: Some(scores),
        };
        Ok((seq, dists))
    }

    pub fn to_json(&self) -> Result<String> {
        let entries: Vec<VocabEntry> = self
            .phrases
            .iter()
            .enumerate()
            .map(|(i, p)| VocabEntry {
                phrase: p.clone(),
                embedding: self.embedding(i).iter().map(|v| v.as_f64()).collect(),
            })
            .collect();
        Ok(serde_json::to_string_pretty(&entries)?)
    }

    pub fn from_json(text: &str, sigma0: f64) -> Result<Self> {
        let entries: Vec<VocabEntry> = serde_json::from_str(text)?;
        let d = entries.first().map_or(0, |e| e.embedding.len());
        if entries.iter().any(|e| e.embedding.len() != d) {
            return Err(Error::Invalid("vocabulary embeddings differ in width".into()));
        }
        let phrases = entries.iter().map(|e| e.phrase.clone()).collect();
        let data = entries
            .iter()
            .flat_map(|e| e.embedding.iter().map(|&v| F::from_f64c(v)))
            .collect();
        Self::new(phrases, Tensor::new(vec![entries.len(), d], data)?, sigma0)
    }

    pub fn load(path: &Path, sigma0: f64) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, sigma0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian, rng_from_seed};

    fn vocab(rows: &[Vec<f64>]) -> RelationVocabulary<f64> {
        let phrases = (0..rows.len()).map(|i| format!("p{i}")).collect();
        RelationVocabulary::new(phrases, Tensor::from_rows(rows), 0.0).unwrap()
    }

    fn seq(tokens: &[usize]) -> RelationSequence {
        RelationSequence::new(tokens.to_vec(), vec![Provenance::Gt; tokens.len()]).unwrap()
    }

    #[test]
    fn rejects_bad_vocabularies() {
        let one = RelationVocabulary::<f64>::new(vec!["a".into()], Tensor::zeros(&[1, 2]), 0.0);
        assert!(one.is_err());
        let dup = RelationVocabulary::<f64>::new(
            vec!["a".into(), "a".into()],
            Tensor::zeros(&[2, 2]),
            0.0,
        );
        assert!(dup.is_err());
    }

    #[test]
    fn noiseless_embedding_is_exact() {
        let v = vocab(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![-1.0, 1.0]]);
        let x0 = v.embed_step(&seq(&[2, 0, 2]), &mut rng_from_seed(0)).unwrap();
        assert_eq!(x0.data(), &[-1.0, 1.0, 1.0, 0.0, -1.0, 1.0]);
        assert!(matches!(
            v.embed_step(&seq(&[3]), &mut rng_from_seed(0)),
            Err(Error::InvalidToken { index: 3, .. })
        ));
    }

    #[test]
    fn rounding_cases() {
        let v = vocab(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]);
        let p = v.round_distribution(&[0.0, 1.0], 1.0).unwrap();
        assert!(p[1] > p[0] && p[1] > p[2]);
        // (0,0) equidistant from rows 0 and 2 (and 1)
        let p = v.round_distribution(&[0.0, 0.0], 0.5).unwrap();
        assert!((p[0] - p[2]).abs() < 1e-15);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(v.round_distribution(&[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn rounding_matches_direct_softmax() {
        let mut rng = rng_from_seed(3);
        let table: Tensor<f64> = gaussian(&[5, 4], &mut rng);
        let v = RelationVocabulary::new(
            (0..5).map(|i| i.to_string()).collect(),
            table.clone(),
            0.0,
        )
        .unwrap();
        let x: Tensor<f64> = gaussian(&[1, 4], &mut rng);
        let tau = 0.7;
        let p = v.round_distribution(x.data(), tau).unwrap();
        let ex: Vec<f64> = (0..5)
            .map(|w| {
                let d: f64 = (0..4).map(|k| (x.data()[k] - table.at(w, k)).powi(2)).sum();
                (-d / tau).exp()
            })
            .collect();
        let z: f64 = ex.iter().sum();
        for w in 0..5 {
            assert!((p[w] - ex[w] / z).abs() < 1e-12);
        }
    }

    #[test]
    fn antipodal_tie_breaks_low() {
        let v = vocab(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let s = v.decode_sequence(&Tensor::zeros(&[1, 2]), 1.0).unwrap();
        assert_eq!(s.tokens, vec![0]);
        assert!((s.scores.unwrap()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn exact_embeddings_decode_back() {
        let v = vocab(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, -1.0]]);
        let s = seq(&[1, 2, 0, 0]);
        let x0 = v.embed_step(&s, &mut rng_from_seed(1)).unwrap();
        let out = v.decode_sequence(&x0, 0.1).unwrap();
        assert_eq!(out.tokens, s.tokens);
    }

    #[test]
    fn decode_matches_nearest_neighbour_scan() {
        let mut rng = rng_from_seed(9);
        let table: Tensor<f64> = gaussian(&[7, 3], &mut rng);
        let v = RelationVocabulary::new((0..7).map(|i| i.to_string()).collect(), table.clone(), 0.0)
            .unwrap();
        let x: Tensor<f64> = gaussian(&[20, 3], &mut rng);
        let s = v.decode_sequence(&x, 1.3).unwrap();
        for i in 0..20 {
            let mut best = (f64::INFINITY, 0);
            for w in 0..7 {
                let d: f64 = (0..3).map(|k| (x.at(i, k) - table.at(w, k)).powi(2)).sum();
                if d < best.0 {
                    best = (d, w);
                }
            }
            assert_eq!(s.tokens[i], best.1);
        }
    }

    #[test]
    fn json_round_trip() {
        let v = vocab(&[vec![0.25, -1.5], vec![3.0, 0.125]]);
        let back = RelationVocabulary::<f64>::from_json(&v.to_json().unwrap(), 0.0).unwrap();
        assert_eq!(back.phrases(), v.phrases());
        assert_eq!(back.embeddings(), v.embeddings());
    }
}
