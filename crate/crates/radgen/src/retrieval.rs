//! Exact top-k cosine retrieval over compressed disease-oriented masks.
//!
//! A deliberate linear scan: desk-scale pools need no ANN structure, and
//! exactness is what lets the brute-force oracle in the tests assert full
//! ranking equality.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("query dimension {query} does not match index dimension {index}")]
    DimensionMismatch { query: usize, index: usize },

    #[error("k must be at least 1")]
    ZeroK,

    #[error("unknown sample id {0:?}")]
    UnknownId(String),

    #[error("index is empty")]
    EmptyIndex,
}

struct IndexEntry {
    id: String,
    vector: Vec<f64>,
    norm: f64,
}

/// Immutable flat index of (id, vector) pairs with precomputed norms.
pub struct RetrievalIndex {
    entries: Vec<IndexEntry>,
    dim: usize,
    by_id: HashMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub query_id: Option<String>,
    /// (sample_id, cosine score), scores non-increasing.
    pub ranked: Vec<(String, f64)>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        s += x * y;
    }
    s
}

impl RetrievalIndex {
    pub fn build(items: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<RetrievalIndex, RetrievalError> {
        let mut entries = Vec::new();
        let mut by_id = HashMap::new();
        let mut dim = 0;
        for (id, vector) in items {
            if entries.is_empty() {
                dim = vector.len();
            } else if vector.len() != dim {
                return Err(RetrievalError::DimensionMismatch {
                    query: vector.len(),
                    index: dim,
                });
            }
            let norm = dot(&vector, &vector).sqrt();
            by_id.insert(id.clone(), entries.len());
            entries.push(IndexEntry { id, vector, norm });
        }
        if entries.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        Ok(RetrievalIndex { entries, dim, by_id })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    pub fn vector_of(&self, id: &str) -> Option<&[f64]> {
        self.by_id.get(id).map(|&i| self.entries[i].vector.as_slice())
    }

    /// Exact top-k by cosine similarity over all non-excluded entries.
    /// Ties break by ascending insertion order; zero-norm vectors score 0.
    /// Asking for more than the available entries returns all of them.
    pub fn query(
        &self,
        dom: &[f64],
        k: usize,
        exclude_id: Option<&str>,
    ) -> Result<RetrievalResult, RetrievalError> {
        if dom.len() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                query: dom.len(),
                index: self.dim,
            });
        }
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        let qnorm = dot(dom, dom).sqrt();
        let mut scored: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| exclude_id != Some(e.id.as_str()))
            .map(|(i, e)| {
                let score = if qnorm == 0.0 || e.norm == 0.0 {
                    0.0
                } else {
                    dot(dom, &e.vector) / (qnorm * e.norm)
                };
                (i, score)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(RetrievalResult {
            query_id: exclude_id.map(str::to_string),
            ranked: scored
                .into_iter()
                .map(|(i, s)| (self.entries[i].id.clone(), s))
                .collect(),
        })
    }

    /// Query by the id of an indexed entry, excluding the entry itself.
    pub fn query_by_id(&self, id: &str, k: usize) -> Result<RetrievalResult, RetrievalError> {
        let &idx = self
            .by_id
            .get(id)
            .ok_or_else(|| RetrievalError::UnknownId(id.to_string()))?;
        let vector = self.entries[idx].vector.clone();
        self.query(&vector, k, Some(id))
    }
}

/// Mean Jaccard similarity between two label vectors; two empty sets count
/// as identical.
pub fn label_jaccard(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b.iter()).filter(|(&x, &y)| x && y).count();
    let union = a.iter().zip(b.iter()).filter(|(&x, &y)| x || y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Debug)]
pub struct MatchStats {
    /// Mean Jaccard between query labels and top-1 retrieved labels.
    pub mean_top1_jaccard: f64,
    /// Same statistic under uniform-random retrieval (seeded).
    pub random_baseline_jaccard: f64,
    pub n_queries: usize,
}

/// Measures how disease-consistent top-1 retrieval is versus a random picker.
/// `entry_labels` must align with index insertion order.
pub fn disease_match_rate(
    index: &RetrievalIndex,
    entry_labels: &[Vec<bool>],
    queries: &[(Vec<f64>, Vec<bool>, Option<String>)],
    seed: u64,
) -> Result<MatchStats, RetrievalError> {
    let labels_by_id: HashMap<&str, &Vec<bool>> = index
        .ids()
        .zip(entry_labels.iter())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut top1 = 0.0;
    let mut random = 0.0;
    for (vector, labels, exclude) in queries {
        let result = index.query(vector, 1, exclude.as_deref())?;
        if let Some((id, _)) = result.ranked.first() {
            top1 += label_jaccard(labels, labels_by_id[id.as_str()]);
        }
        let candidates: Vec<usize> = (0..index.len())
            .filter(|&i| exclude.as_deref() != Some(index.entries[i].id.as_str()))
            .collect();
        let pick = candidates[rng.gen_range(0..candidates.len())];
        random += label_jaccard(labels, &entry_labels[pick]);
    }
    let n = queries.len().max(1) as f64;
    Ok(MatchStats {
        mean_top1_jaccard: top1 / n,
        random_baseline_jaccard: random / n,
        n_queries: queries.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_index(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> RetrievalIndex {
        RetrievalIndex::build((0..n).map(|i| {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (format!("e{i:03}"), v)
        }))
        .unwrap()
    }

    /// Independent exhaustive-scan oracle: recompute every cosine, stable
    /// sort on (score desc, insertion asc), truncate.
    fn oracle(
        index_vectors: &[(String, Vec<f64>)],
        query: &[f64],
        k: usize,
        exclude: Option<&str>,
    ) -> Vec<(String, f64)> {
        let qn = index_vectors
            .first()
            .map(|_| query.iter().map(|v| v * v).sum::<f64>().sqrt())
            .unwrap_or(0.0);
        let mut scored: Vec<(usize, String, f64)> = index_vectors
            .iter()
            .enumerate()
            .filter(|(_, (id, _))| exclude != Some(id.as_str()))
            .map(|(i, (id, v))| {
                let en = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let mut s = 0.0;
                for (a, b) in query.iter().zip(v.iter()) {
                    s += a * b;
                }
                let score = if qn == 0.0 || en == 0.0 { 0.0 } else { s / (qn * en) };
                (i, id.clone(), score)
            })
            .collect();
        scored.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        scored.into_iter().map(|(_, id, s)| (id, s)).collect()
    }

    #[test]
    fn identical_vector_ranks_first_with_unit_score() {
        let mut r = rng(1);
        let index = random_index(&mut r, 20, 8);
        let target = index.vector_of("e007").unwrap().to_vec();
        let result = index.query(&target, 3, None).unwrap();
        assert_eq!(result.ranked[0].0, "e007");
        assert!((result.ranked[0].1 - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn excluded_id_never_appears() {
        let mut r = rng(2);
        let index = random_index(&mut r, 20, 8);
        let target = index.vector_of("e007").unwrap().to_vec();
        for k in 1..=20 {
            let result = index.query(&target, k, Some("e007")).unwrap();
            assert!(result.ranked.iter().all(|(id, _)| id != "e007"));
        }
    }

    #[test]
    fn matches_exhaustive_oracle_on_random_indices() {
        let mut r = rng(3);
        for trial in 0..20 {
            let n = 200;
            let dim = 12;
            let vectors: Vec<(String, Vec<f64>)> = (0..n)
                .map(|i| {
                    let v: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect();
                    (format!("e{i:03}"), v)
                })
                .collect();
            let index = RetrievalIndex::build(vectors.clone()).unwrap();
            let query: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect();
            let k = 1 + (trial % 10);
            let exclude = if trial % 2 == 0 { Some("e005") } else { None };
            let got = index.query(&query, k, exclude).unwrap().ranked;
            let want = oracle(&vectors, &query, k, exclude);
            assert_eq!(got, want, "trial {trial}");
        }
    }

    #[test]
    fn ties_break_by_insertion_order() {
        let v = vec![1.0, 0.0];
        let index = RetrievalIndex::build(vec![
            ("b".to_string(), v.clone()),
            ("a".to_string(), v.clone()),
            ("c".to_string(), v.clone()),
        ])
        .unwrap();
        let result = index.query(&v, 3, None).unwrap();
        let ids: Vec<&str> = result.ranked.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, vec!["b", "a", "c"]);
    }

    #[test]
    fn ranking_is_scale_invariant() {
        let mut r = rng(4);
        let index = random_index(&mut r, 50, 6);
        let query: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
        let base: Vec<String> = index
            .query(&query, 10, None)
            .unwrap()
            .ranked
            .into_iter()
            .map(|(id, _)| id)
            .collect();
        for factor in [0.001, 0.5, 3.0, 1e6] {
            let scaled: Vec<f64> = query.iter().map(|v| v * factor).collect();
            let got: Vec<String> = index
                .query(&scaled, 10, None)
                .unwrap()
                .ranked
                .into_iter()
                .map(|(id, _)| id)
                .collect();
            assert_eq!(got, base, "factor {factor}");
        }
    }

    #[test]
    fn oversized_k_returns_everything_without_error() {
        let mut r = rng(5);
        let index = random_index(&mut r, 7, 4);
        let query: Vec<f64> = vec![1.0, 0.0, 0.0, 0.0];
        let result = index.query(&query, 50, Some("e003")).unwrap();
        assert_eq!(result.ranked.len(), 6);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut r = rng(6);
        let index = random_index(&mut r, 5, 4);
        let err = index.query(&[1.0, 2.0], 1, None).unwrap_err();
        assert!(matches!(err, RetrievalError::DimensionMismatch { .. }));
    }

    #[test]
    fn zero_norm_vectors_score_zero() {
        let index = RetrievalIndex::build(vec![
            ("zero".to_string(), vec![0.0, 0.0]),
            ("unit".to_string(), vec![1.0, 0.0]),
        ])
        .unwrap();
        let result = index.query(&[1.0, 0.0], 2, None).unwrap();
        assert_eq!(result.ranked[0].0, "unit");
        assert_eq!(result.ranked[1], ("zero".to_string(), 0.0));
        // zero-norm query: every score is 0, ties resolve by insertion
        let result = index.query(&[0.0, 0.0], 2, None).unwrap();
        assert_eq!(result.ranked[0], ("zero".to_string(), 0.0));
        assert_eq!(result.ranked[1], ("unit".to_string(), 0.0));
    }

    #[test]
    fn jaccard_conventions() {
        assert_eq!(label_jaccard(&[false, false], &[false, false]), 1.0);
        assert_eq!(label_jaccard(&[true, false], &[false, true]), 0.0);
        assert_eq!(label_jaccard(&[true, true], &[true, false]), 0.5);
    }

    #[test]
    fn shared_label_corpus_gives_unit_jaccard_for_both_statistics() {
        let labels = vec![vec![true, false, true]; 10];
        let index = RetrievalIndex::build(
            (0..10).map(|i| (format!("e{i}"), vec![i as f64 + 1.0, 0.5])),
        )
        .unwrap();
        let queries: Vec<(Vec<f64>, Vec<bool>, Option<String>)> = (0..10)
            .map(|i| (vec![i as f64 + 1.0, 0.5], vec![true, false, true], None))
            .collect();
        let stats = disease_match_rate(&index, &labels, &queries, 9).unwrap();
        assert_eq!(stats.mean_top1_jaccard, 1.0);
        assert_eq!(stats.random_baseline_jaccard, 1.0);
    }

    #[test]
    fn self_retrieval_without_exclusion_is_perfect() {
        let mut r = rng(7);
        let labels: Vec<Vec<bool>> = (0..30)
            .map(|_| (0..4).map(|_| r.gen_bool(0.4)).collect())
            .collect();
        let vectors: Vec<(String, Vec<f64>)> = (0..30)
            .map(|i| {
                let v: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
                (format!("e{i}"), v)
            })
            .collect();
        let index = RetrievalIndex::build(vectors.clone()).unwrap();
        let queries: Vec<(Vec<f64>, Vec<bool>, Option<String>)> = vectors
            .iter()
            .zip(labels.iter())
            .map(|((_, v), l)| (v.clone(), l.clone(), None))
            .collect();
        let stats = disease_match_rate(&index, &labels, &queries, 11).unwrap();
        assert_eq!(stats.mean_top1_jaccard, 1.0);
    }
}
