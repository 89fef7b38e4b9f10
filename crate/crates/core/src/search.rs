//! Exact top-k retrieval over hybrid sparse-dense vectors.
//!
//! A passage is stored as `[p_bm25, p_dense]`; a query as
//! `[λ·q_bm25, q_dense]`. Every passage is scored (no pruning), shards are
//! scanned in parallel and their per-shard top-k lists merged.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{self, Reader, Writer};
use crate::corpus::{CollectionStats, PassageCollection};
use crate::dense::{DenseVector, EncoderModel};
use crate::sparse::{
    dot_sparse, encode_passage_sparse, encode_query_sparse, Bm25Params, SparseVector,
};
use crate::text::Token;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"FSIX";
const VERSION: u32 = 1;

pub const DEFAULT_LAMBDA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct HybridVector<K = Token> {
    pub sparse: SparseVector<K>,
    pub dense: DenseVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredHit {
    pub passage_id: String,
    pub score: f64,
    pub sparse_part: f64,
    pub dense_part: f64,
}

/// Passage vectors keyed by vocabulary position.
#[derive(Debug, Clone, PartialEq)]
struct IndexedPassage {
    id: String,
    vector: HybridVector<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexHeader {
    /// Dense dimension; 0 for a sparse-only index.
    dim: usize,
    shards: usize,
    params: Bm25Params,
    stats_digest: String,
    model_digest: Option<String>,
    stats: Option<CollectionStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridIndex {
    header: IndexHeader,
    /// Sorted, so term ids order like the terms themselves.
    vocab: Vec<Token>,
    vocab_ids: HashMap<Token, u32>,
    passages: Vec<IndexedPassage>,
}

impl HybridIndex {
    /// Encodes every passage and assigns passage `i` to shard `i % shards`.
    pub fn build(
        collection: &PassageCollection,
        stats: &CollectionStats,
        params: Bm25Params,
        model: Option<&EncoderModel>,
        shards: usize,
    ) -> Result<Self> {
        if shards == 0 {
            return Err(Error::InvalidArgument("shard count must be ≥ 1".into()));
        }
        let sparse: Vec<SparseVector> = collection
            .passages()
            .par_iter()
            .map(|p| encode_passage_sparse(p, stats, params))
            .collect();
        let dense: Vec<DenseVector> = match model {
            Some(m) => collection
                .passages()
                .par_iter()
                .map(|p| m.encode(&p.tokens))
                .collect(),
            None => vec![DenseVector::zeros(0); collection.len()],
        };

        let mut vocab: Vec<Token> = sparse
            .iter()
            .flat_map(|v| v.entries().iter().map(|(t, _)| t.clone()))
            .collect();
        vocab.sort_unstable();
        vocab.dedup();
        let vocab_ids: HashMap<Token, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();

        let passages = collection
            .passages()
            .iter()
            .zip(sparse.into_iter().zip(dense))
            .map(|(p, (s, d))| IndexedPassage {
                id: p.id.clone(),
                vector: HybridVector {
                    sparse: s.map_keys(|t| vocab_ids.get(&t).copied()),
                    dense: d,
                },
            })
            .collect();

        Ok(HybridIndex {
            header: IndexHeader {
                dim: model.map_or(0, EncoderModel::dim),
                shards,
                params,
                stats_digest: stats.digest(),
                model_digest: model.map(EncoderModel::digest),
                stats: Some(stats.clone()),
            },
            vocab,
            vocab_ids,
            passages,
        })
    }

    /// An index over nothing; retrieval always returns no hits.
    pub fn empty(params: Bm25Params, dim: usize, shards: usize) -> Self {
        HybridIndex {
            header: IndexHeader {
                dim,
                shards: shards.max(1),
                params,
                stats_digest: String::new(),
                model_digest: None,
                stats: None,
            },
            vocab: Vec::new(),
            vocab_ids: HashMap::new(),
            passages: Vec::new(),
        }
    }

    /// Builds an index from precomputed vectors (ids must be unique).
    pub fn from_vectors(
        entries: Vec<(String, HybridVector)>,
        params: Bm25Params,
        shards: usize,
    ) -> Result<Self> {
        let dim = entries.first().map_or(0, |(_, v)| v.dense.len());
        let mut index = HybridIndex::empty(params, dim, shards);
        let mut seen = std::collections::HashSet::new();
        let mut vocab: Vec<Token> = Vec::new();
        for (id, v) in &entries {
            if v.dense.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.dense.len(),
                });
            }
            if !seen.insert(id.clone()) {
                return Err(Error::DuplicateId(id.clone()));
            }
            vocab.extend(v.sparse.entries().iter().map(|(t, _)| t.clone()));
        }
        vocab.sort_unstable();
        vocab.dedup();
        index.vocab_ids = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        index.vocab = vocab;
        index.passages = entries
            .into_iter()
            .map(|(id, v)| IndexedPassage {
                id,
                vector: HybridVector {
                    sparse: v.sparse.map_keys(|t| index.vocab_ids.get(&t).copied()),
                    dense: v.dense,
                },
            })
            .collect();
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.header.dim
    }

    pub fn has_dense(&self) -> bool {
        self.header.dim > 0
    }

    pub fn shard_count(&self) -> usize {
        self.header.shards
    }

    pub fn params(&self) -> Bm25Params {
        self.header.params
    }

    pub fn stats(&self) -> Option<&CollectionStats> {
        self.header.stats.as_ref()
    }

    pub fn model_digest(&self) -> Option<&str> {
        self.header.model_digest.as_deref()
    }

    pub fn shard_sizes(&self) -> Vec<usize> {
        let s = self.header.shards;
        (0..s).map(|i| (self.len() + s - 1 - i) / s).collect()
    }

    /// Same passages and vectors, different shard partition.
    pub fn with_shards(mut self, shards: usize) -> Result<Self> {
        if shards == 0 {
            return Err(Error::InvalidArgument("shard count must be ≥ 1".into()));
        }
        self.header.shards = shards;
        Ok(self)
    }

    /// Errors unless `model` is the encoder this index was built with.
    pub fn check_model(&self, model: &EncoderModel) -> Result<()> {
        if !self.has_dense() {
            return Err(Error::SparseOnlyIndex);
        }
        if model.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: model.dim(),
            });
        }
        match &self.header.model_digest {
            Some(d) if *d != model.digest() => Err(Error::ModelMismatch),
            _ => Ok(()),
        }
    }

    /// Encodes a query into `[q_bm25, q_dense]` (λ applied at scoring time).
    pub fn encode_query(
        &self,
        tokens: &[Token],
        model: Option<&EncoderModel>,
    ) -> Result<HybridVector<u32>> {
        let dense = match (model, self.has_dense()) {
            (Some(_), false) => return Err(Error::SparseOnlyIndex),
            (None, true) => return Err(Error::ModelRequired),
            (Some(m), true) => {
                if m.dim() != self.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: self.dim(),
                        actual: m.dim(),
                    });
                }
                m.encode(tokens)
            }
            (None, false) => DenseVector::zeros(0),
        };
        // terms outside the vocabulary match no passage
        let sparse = encode_query_sparse(tokens).map_keys(|t| self.vocab_ids.get(&t).copied());
        Ok(HybridVector { sparse, dense })
    }

    fn score(&self, query: &HybridVector<u32>, lambda: f64, i: usize) -> ScoredHit {
        let p = &self.passages[i];
        let sparse_part = dot_sparse(&query.sparse, &p.vector.sparse);
        let dense_part = dot(query.dense.values(), p.vector.dense.values());
        ScoredHit {
            passage_id: p.id.clone(),
            score: lambda * sparse_part + dense_part,
            sparse_part,
            dense_part,
        }
    }

    pub fn retrieve(
        &self,
        query_tokens: &[Token],
        model: Option<&EncoderModel>,
        lambda: f64,
        k: usize,
    ) -> Result<Vec<ScoredHit>> {
        let query = self.encode_query(query_tokens, model)?;
        self.retrieve_encoded(&query, lambda, k)
    }

    pub fn retrieve_encoded(
        &self,
        query: &HybridVector<u32>,
        lambda: f64,
        k: usize,
    ) -> Result<Vec<ScoredHit>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be ≥ 1".into()));
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda {lambda} must be finite and ≥ 0"
            )));
        }
        let shards = self.header.shards;
        let per_shard: Vec<Vec<ScoredHit>> = (0..shards)
            .into_par_iter()
            .map(|s| {
                let mut heap = BinaryHeap::with_capacity(k + 1);
                for i in (s..self.len()).step_by(shards) {
                    heap.push(Ranked(self.score(query, lambda, i)));
                    if heap.len() > k {
                        heap.pop();
                    }
                }
                heap.into_iter().map(|r| r.0).collect()
            })
            .collect();
        let mut all: Vec<ScoredHit> = per_shard.into_iter().flatten().collect();
        all.sort_by(rank_order);
        all.truncate(k);
        Ok(all)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.put_bytes(&serde_json::to_vec(&self.header).expect("index header serialize"));
        w.put_len(self.vocab.len());
        for t in &self.vocab {
            w.put_str(t.as_str());
        }
        w.put_len(self.passages.len());
        for p in &self.passages {
            w.put_str(&p.id);
            w.put_len(p.vector.sparse.len());
            for &(term, weight) in p.vector.sparse.entries() {
                w.put_u32(term);
                w.put_f64(weight);
            }
            w.put_f64s(p.vector.dense.values());
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::open(data, MAGIC, VERSION)?;
        let header: IndexHeader = serde_json::from_slice(r.bytes()?)
            .map_err(|e| Error::Corrupt(format!("index header: {e}")))?;
        if header.shards == 0 {
            return Err(Error::Corrupt("zero shards".into()));
        }
        let vocab_len = r.length()?;
        let mut vocab = Vec::with_capacity(vocab_len);
        for _ in 0..vocab_len {
            let s = r.string()?;
            vocab.push(Token::new(&s).ok_or_else(|| Error::Corrupt(format!("bad term {s:?}")))?);
        }
        if vocab.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Corrupt("vocabulary not sorted".into()));
        }
        let count = r.length()?;
        let mut passages = Vec::with_capacity(count);
        for _ in 0..count {
            let id = r.string()?;
            let nnz = r.length()?;
            let mut entries = Vec::with_capacity(nnz);
            for _ in 0..nnz {
                let term = r.u32()?;
                if term as usize >= vocab.len() {
                    return Err(Error::Corrupt(format!("term id {term} out of range")));
                }
                entries.push((term, r.f64()?));
            }
            if entries.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err(Error::Corrupt("sparse entries not sorted".into()));
            }
            let dense = r.f64s()?;
            if dense.len() != header.dim {
                return Err(Error::Corrupt(
                    "dense vector length differs from header".into(),
                ));
            }
            passages.push(IndexedPassage {
                id,
                vector: HybridVector {
                    sparse: SparseVector::from_sorted(entries),
                    dense: DenseVector::new(dense),
                },
            });
        }
        r.finish()?;
        let vocab_ids = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(HybridIndex {
            header,
            vocab,
            vocab_ids,
            passages,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Score descending, then passage id ascending.
pub fn rank_order(a: &ScoredHit, b: &ScoredHit) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.passage_id.cmp(&b.passage_id))
}

/// Max-heap on "worse" so the heap top is the hit to evict.
struct Ranked(ScoredHit);

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order(&self.0, &other.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Passage;
    use crate::sparse::bm25_direct;
    use crate::text::tokenize;
    use std::collections::BTreeMap;

    fn collection(texts: &[&str]) -> PassageCollection {
        PassageCollection::from_passages(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| Passage::new(format!("p{}", i + 1), None, *t))
                .collect(),
        )
        .unwrap()
    }

    fn hand_vector(term: &str, sparse: f64, dense: f64) -> HybridVector {
        let mut m = BTreeMap::new();
        m.insert(Token::new(term).unwrap(), sparse);
        HybridVector {
            sparse: SparseVector::from_map(m),
            dense: DenseVector::new(vec![dense]),
        }
    }

    #[test]
    fn round_robin_shard_sizes() {
        let c = collection(&["a", "b", "c", "d", "e"]);
        let idx =
            HybridIndex::build(&c, &c.stats().unwrap(), Bm25Params::default(), None, 2).unwrap();
        assert_eq!(idx.shard_sizes(), [3, 2]);
        assert_eq!(
            idx.with_shards(7)
                .unwrap()
                .shard_sizes()
                .iter()
                .sum::<usize>(),
            5
        );
    }

    #[test]
    fn hand_set_vectors_rank_by_hybrid_score() {
        let idx = HybridIndex::from_vectors(
            vec![
                ("p1".into(), hand_vector("t", 2.0, 0.5)),
                ("p2".into(), hand_vector("t", 0.0, 3.0)),
                ("p3".into(), hand_vector("t", 1.0, 1.0)),
            ],
            Bm25Params::default(),
            2,
        )
        .unwrap();
        let query = HybridVector {
            sparse: SparseVector::from_sorted(vec![(0u32, 1.0)]),
            dense: DenseVector::new(vec![1.0]),
        };
        let hits = idx.retrieve_encoded(&query, 1.0, 3).unwrap();
        let got: Vec<_> = hits
            .iter()
            .map(|h| (h.passage_id.as_str(), h.score))
            .collect();
        assert_eq!(got, [("p2", 3.0), ("p1", 2.5), ("p3", 2.0)]);
    }

    #[test]
    fn sparse_only_scores_equal_bm25() {
        let c = collection(&["a b a", "b c", "c c d a", ""]);
        let stats = c.stats().unwrap();
        let params = Bm25Params::default();
        let idx = HybridIndex::build(&c, &stats, params, None, 3).unwrap();
        let q = tokenize("a c zzz");
        let hits = idx.retrieve(&q, None, 1.0, 10).unwrap();
        assert_eq!(hits.len(), 4);
        for h in &hits {
            let p = c.get(&h.passage_id).unwrap();
            let direct = bm25_direct(&q, p, &stats, params);
            assert!((h.score - direct).abs() <= 1e-9 * direct.abs().max(1e-12));
            assert_eq!(h.dense_part, 0.0);
        }
    }

    #[test]
    fn ties_break_by_id() {
        let c = collection(&["x", "x", "x", "x"]);
        let idx =
            HybridIndex::build(&c, &c.stats().unwrap(), Bm25Params::default(), None, 3).unwrap();
        let ids: Vec<_> = idx
            .retrieve(&tokenize("x"), None, 1.0, 2)
            .unwrap()
            .into_iter()
            .map(|h| h.passage_id)
            .collect();
        assert_eq!(ids, ["p1", "p2"]);
    }

    #[test]
    fn query_mode_errors() {
        let c = collection(&["a b", "b c"]);
        let stats = c.stats().unwrap();
        let model = EncoderModel::new(4, 64, 1).unwrap();
        let sparse = HybridIndex::build(&c, &stats, Bm25Params::default(), None, 1).unwrap();
        assert!(matches!(
            sparse.retrieve(&tokenize("a"), Some(&model), 1.0, 1),
            Err(Error::SparseOnlyIndex)
        ));
        let dense = HybridIndex::build(&c, &stats, Bm25Params::default(), Some(&model), 1).unwrap();
        assert!(matches!(
            dense.retrieve(&tokenize("a"), None, 1.0, 1),
            Err(Error::ModelRequired)
        ));
        let other = EncoderModel::new(8, 64, 1).unwrap();
        assert!(matches!(
            dense.check_model(&other),
            Err(Error::DimensionMismatch { .. })
        ));
        let same_dim = EncoderModel::new(4, 64, 2).unwrap();
        assert!(matches!(
            dense.check_model(&same_dim),
            Err(Error::ModelMismatch)
        ));
        dense.check_model(&model).unwrap();
        assert!(dense
            .retrieve(&tokenize("a"), Some(&model), 1.0, 0)
            .is_err());
    }

    #[test]
    fn save_load_round_trip_and_corruption() {
        let c = collection(&["alpha beta", "beta gamma gamma", "delta"]);
        let stats = c.stats().unwrap();
        let model = EncoderModel::new(4, 128, 3).unwrap();
        let idx = HybridIndex::build(&c, &stats, Bm25Params::default(), Some(&model), 2).unwrap();
        let bytes = idx.to_bytes();
        let back = HybridIndex::from_bytes(&bytes).unwrap();
        assert_eq!(back, idx);
        let q = tokenize("beta gamma");
        assert_eq!(
            back.retrieve(&q, Some(&model), 1.0, 3).unwrap(),
            idx.retrieve(&q, Some(&model), 1.0, 3).unwrap()
        );
        assert!(HybridIndex::from_bytes(&bytes[..bytes.len() / 2]).is_err());

        let rebuilt =
            HybridIndex::build(&c, &stats, Bm25Params::default(), Some(&model), 2).unwrap();
        assert_eq!(rebuilt.to_bytes(), bytes);
    }

    #[test]
    fn empty_index_round_trips() {
        let idx = HybridIndex::empty(Bm25Params::default(), 0, 1);
        let back = HybridIndex::from_bytes(&idx.to_bytes()).unwrap();
        assert_eq!(back, idx);
        assert!(back
            .retrieve(&tokenize("anything"), None, 1.0, 5)
            .unwrap()
            .is_empty());
    }
}
