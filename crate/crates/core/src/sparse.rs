//! BM25 as a direct scorer and as a sparse vector-space model.
//!
//! A query becomes a term-count vector and a passage becomes a vector of
//! per-term BM25 contributions, so `dot_sparse(query, passage)` equals the
//! positional BM25 sum exactly (up to summation order).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{CollectionStats, Passage};
use crate::text::Token;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k: 1.2, b: 0.75 }
    }
}

/// Sparse vector with entries sorted by key and no zero weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseVector<K = Token> {
    entries: Vec<(K, f64)>,
}

impl<K> Default for SparseVector<K> {
    fn default() -> Self {
        SparseVector {
            entries: Vec::new(),
        }
    }
}

impl<K: Ord> SparseVector<K> {
    pub fn from_map(map: BTreeMap<K, f64>) -> Self {
        SparseVector {
            entries: map.into_iter().filter(|(_, w)| *w != 0.0).collect(),
        }
    }

    /// Entries must be strictly increasing by key.
    pub fn from_sorted(entries: Vec<(K, f64)>) -> Self {
        debug_assert!(entries.windows(2).all(|w| w[0].0 < w[1].0));
        SparseVector {
            entries: entries.into_iter().filter(|(_, w)| *w != 0.0).collect(),
        }
    }

    pub fn entries(&self) -> &[(K, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get<Q>(&self, key: &Q) -> Option<f64>
    where
        K: std::borrow::Borrow<Q>,
        Q: Ord + ?Sized,
    {
        self.entries
            .binary_search_by(|(k, _)| k.borrow().cmp(key))
            .ok()
            .map(|i| self.entries[i].1)
    }

    pub fn scaled(&self, factor: f64) -> Self
    where
        K: Clone,
    {
        SparseVector {
            entries: self
                .entries
                .iter()
                .map(|(k, w)| (k.clone(), w * factor))
                .filter(|(_, w)| *w != 0.0)
                .collect(),
        }
    }

    pub fn map_keys<J: Ord>(self, mut f: impl FnMut(K) -> Option<J>) -> SparseVector<J> {
        let mut entries: Vec<(J, f64)> = self
            .entries
            .into_iter()
            .filter_map(|(k, w)| f(k).map(|j| (j, w)))
            .collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        SparseVector { entries }
    }
}

/// Merge-join dot product over the shared keys.
pub fn dot_sparse<K: Ord>(u: &SparseVector<K>, v: &SparseVector<K>) -> f64 {
    let (a, b) = (&u.entries, &v.entries);
    let (mut i, mut j) = (0, 0);
    let mut acc = 0.0;
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

/// The saturated, length-normalized BM25 contribution of one term.
#[inline]
pub fn term_weight(idf: f64, count: f64, len: f64, avg_len: f64, params: Bm25Params) -> f64 {
    if count == 0.0 {
        return 0.0;
    }
    let ratio = if avg_len > 0.0 { len / avg_len } else { 1.0 };
    idf * count * (params.k + 1.0) / (count + params.k * (1.0 - params.b + params.b * ratio))
}

/// BM25 summed over query token occurrences; repeated query terms count
/// once per occurrence.
pub fn bm25_direct(
    query: &[Token],
    passage: &Passage,
    stats: &CollectionStats,
    params: Bm25Params,
) -> f64 {
    let len = passage.tokens.len() as f64;
    query
        .iter()
        .map(|q| {
            let count = passage.tokens.iter().filter(|t| *t == q).count() as f64;
            term_weight(stats.idf(q.as_str()), count, len, stats.avg_len, params)
        })
        .sum()
}

fn term_counts(tokens: &[Token]) -> BTreeMap<Token, f64> {
    let mut counts = BTreeMap::new();
    for t in tokens {
        *counts.entry(t.clone()).or_insert(0.0) += 1.0;
    }
    counts
}

/// Query term-count vector (weight 1 per distinct term, multiplicity kept).
pub fn encode_query_sparse(query: &[Token]) -> SparseVector {
    SparseVector::from_map(term_counts(query))
}

pub fn encode_passage_sparse(
    passage: &Passage,
    stats: &CollectionStats,
    params: Bm25Params,
) -> SparseVector {
    let len = passage.tokens.len() as f64;
    let weights = term_counts(&passage.tokens)
        .into_iter()
        .map(|(t, count)| {
            let w = term_weight(stats.idf(t.as_str()), count, len, stats.avg_len, params);
            (t, w)
        })
        .collect();
    SparseVector::from_map(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;
    use proptest::prelude::*;

    fn collection(texts: &[&str]) -> (Vec<Passage>, CollectionStats) {
        let ps: Vec<_> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Passage::new(format!("p{i}"), None, *t))
            .collect();
        let stats = CollectionStats::from_passages(&ps).unwrap();
        (ps, stats)
    }

    #[test]
    fn direct_single_passage_example() {
        let (ps, stats) = collection(&["a b a"]);
        let got = bm25_direct(&tokenize("a"), &ps[0], &stats, Bm25Params::default());
        let expected = (4.0f64 / 3.0).ln() * 4.4 / 3.2;
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.39556).abs() < 1e-5);

        let v = encode_passage_sparse(&ps[0], &stats, Bm25Params::default());
        assert!((v.get("a").unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn direct_no_shared_terms_is_zero() {
        let (ps, stats) = collection(&["a b", "c d"]);
        assert_eq!(
            bm25_direct(&tokenize("x y"), &ps[0], &stats, Bm25Params::default()),
            0.0
        );
    }

    #[test]
    fn b_zero_ignores_length() {
        let (ps, stats) = collection(&["a z", "a x y w v u t"]);
        let params = Bm25Params { k: 1.2, b: 0.0 };
        let q = tokenize("a");
        let s0 = bm25_direct(&q, &ps[0], &stats, params);
        let s1 = bm25_direct(&q, &ps[1], &stats, params);
        assert_eq!(s0, s1);
        let w0 = encode_passage_sparse(&ps[0], &stats, params).get("a");
        assert_eq!(w0, encode_passage_sparse(&ps[1], &stats, params).get("a"));
    }

    #[test]
    fn query_encoding() {
        let v = encode_query_sparse(&tokenize("a b"));
        assert_eq!(v.entries().len(), 2);
        assert_eq!(v.get("a"), Some(1.0));
        let v = encode_query_sparse(&tokenize("a a b"));
        assert_eq!(v.get("a"), Some(2.0));
        assert_eq!(v.get("b"), Some(1.0));
        assert!(encode_query_sparse(&[]).is_empty());
    }

    #[test]
    fn passage_encoding_empty_and_non_negative() {
        let (ps, stats) = collection(&["", "a a b", "b c"]);
        assert!(encode_passage_sparse(&ps[0], &stats, Bm25Params::default()).is_empty());
        for p in &ps {
            let v = encode_passage_sparse(p, &stats, Bm25Params::default());
            assert!(v.entries().iter().all(|(_, w)| *w > 0.0));
        }
    }

    #[test]
    fn dot_examples() {
        let a = SparseVector::from_map(BTreeMap::from([("a", 2.0)]));
        let b = SparseVector::from_map(BTreeMap::from([("a", 0.5)]));
        let c = SparseVector::from_map(BTreeMap::from([("b", 3.0), ("c", 1.0)]));
        assert_eq!(dot_sparse(&a, &b), 1.0);
        assert_eq!(dot_sparse(&a, &c), 0.0);
    }

    #[test]
    fn zero_weights_are_not_stored() {
        let v = SparseVector::from_map(BTreeMap::from([("a", 0.0), ("b", 1.0)]));
        assert_eq!(v.len(), 1);
        assert!(v.scaled(0.0).is_empty());
    }

    fn random_corpus() -> impl Strategy<Value = (Vec<String>, Vec<String>)> {
        let word = (0u8..8).prop_map(|i| format!("w{i}"));
        let doc = prop::collection::vec(word.clone(), 0..12).prop_map(|w| w.join(" "));
        (
            prop::collection::vec(doc, 1..8),
            prop::collection::vec(
                prop::collection::vec(word, 0..6).prop_map(|w| w.join(" ")),
                1..5,
            ),
        )
    }

    proptest! {
        #[test]
        fn sparse_dot_matches_direct((docs, queries) in random_corpus(), k in 0.1f64..3.0, b in 0.0f64..=1.0) {
            let refs: Vec<&str> = docs.iter().map(String::as_str).collect();
            let (ps, stats) = collection(&refs);
            let params = Bm25Params { k, b };
            for q in &queries {
                let q = tokenize(q);
                let qv = encode_query_sparse(&q);
                for p in &ps {
                    let direct = bm25_direct(&q, p, &stats, params);
                    let dot = dot_sparse(&qv, &encode_passage_sparse(p, &stats, params));
                    prop_assert!((direct - dot).abs() <= 1e-9 * direct.abs().max(1e-300), "{direct} vs {dot}");
                }
            }
        }

        #[test]
        fn scaling_query_preserves_ranking((docs, queries) in random_corpus(), lambda in 0.01f64..100.0) {
            let refs: Vec<&str> = docs.iter().map(String::as_str).collect();
            let (ps, stats) = collection(&refs);
            let params = Bm25Params::default();
            let pvs: Vec<_> = ps.iter().map(|p| encode_passage_sparse(p, &stats, params)).collect();
            for q in &queries {
                let qv = encode_query_sparse(&tokenize(q));
                let scaled = qv.scaled(lambda);
                let base: Vec<f64> = pvs.iter().map(|p| dot_sparse(&qv, p)).collect();
                let lam: Vec<f64> = pvs.iter().map(|p| dot_sparse(&scaled, p)).collect();
                for (x, y) in base.iter().zip(&lam) {
                    prop_assert!((x * lambda - y).abs() <= 1e-9 * y.abs().max(1.0));
                }
                let order = |s: &[f64]| {
                    let mut idx: Vec<usize> = (0..s.len()).collect();
                    idx.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));
                    idx
                };
                // exact score ties may reorder after scaling; only compare distinct scores
                let distinct = base.windows(2).all(|w| (w[0] - w[1]).abs() > 1e-9);
                if distinct {
                    prop_assert_eq!(order(&base), order(&lam));
                }
            }
        }
    }
}
