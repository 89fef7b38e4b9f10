//! Siamese bag-of-terms dual encoder.
//!
//! Queries and passages share one hashed embedding table and one square
//! projection: `encode(x) = W · mean(E[bucket(t)] for t in x)`. Similarity is
//! the dot product. Training minimizes softmax cross-entropy where the other
//! passages of a batch act as negatives.
//!
//! W starts as the identity and E uniform in `[-INIT_SCALE, INIT_SCALE]`.
//! Embedding rows are materialized lazily: an untouched row is a pure
//! function of `(init_seed, bucket)`, so checkpoints only store the rows that
//! training changed.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, Reader, Writer};
use crate::corpus::PassageCollection;
use crate::datagen::TrainingPair;
use crate::text::Token;
use crate::{fnv1a64, Error, Result};

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_BUCKETS: usize = 1 << 18;
pub const INIT_SCALE: f64 = 0.05;

const MAGIC: &[u8; 4] = b"FSEM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Self {
        DenseVector(values)
    }

    pub fn zeros(dim: usize) -> Self {
        DenseVector(vec![0.0; dim])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sim(q: &DenseVector, p: &DenseVector) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::DimensionMismatch {
            expected: q.len(),
            actual: p.len(),
        });
    }
    Ok(dot(&q.0, &p.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 0.05,
            epochs: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelHeader {
    dim: usize,
    buckets: usize,
    init_seed: u64,
    init_scale: f64,
    trained_with: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    header: ModelHeader,
    /// Row-major `dim × dim`.
    projection: Vec<f64>,
    rows: BTreeMap<u32, Vec<f64>>,
}

impl EncoderModel {
    pub fn new(dim: usize, buckets: usize, init_seed: u64) -> Result<Self> {
        if dim == 0 || buckets == 0 || buckets > u32::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "dim ({dim}) and buckets ({buckets}) must be in 1..=u32::MAX"
            )));
        }
        let header = ModelHeader {
            dim,
            buckets,
            init_seed,
            init_scale: INIT_SCALE,
            trained_with: None,
        };
        // identity: a uniformly small W leaves SGD stuck at the origin saddle
        let mut projection = vec![0.0; dim * dim];
        projection
            .iter_mut()
            .step_by(dim + 1)
            .for_each(|w| *w = 1.0);
        Ok(EncoderModel {
            header,
            projection,
            rows: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.header.dim
    }

    pub fn buckets(&self) -> usize {
        self.header.buckets
    }

    pub fn trained_with(&self) -> Option<&TrainConfig> {
        self.header.trained_with.as_ref()
    }

    pub fn bucket(&self, token: &Token) -> u32 {
        (fnv1a64(token.as_str().as_bytes()) % self.header.buckets as u64) as u32
    }

    pub fn row(&self, bucket: u32) -> Cow<'_, [f64]> {
        match self.rows.get(&bucket) {
            Some(r) => Cow::Borrowed(r),
            None => Cow::Owned(self.initial_row(bucket)),
        }
    }

    fn initial_row(&self, bucket: u32) -> Vec<f64> {
        uniform_stream(
            self.header.init_seed,
            u64::from(bucket),
            self.header.dim,
            self.header.init_scale,
        )
    }

    /// Mutable access to an embedding row, materializing it if needed.
    pub fn row_mut(&mut self, bucket: u32) -> &mut [f64] {
        assert!(
            (bucket as usize) < self.header.buckets,
            "bucket out of range"
        );
        if !self.rows.contains_key(&bucket) {
            let r = self.initial_row(bucket);
            self.rows.insert(bucket, r);
        }
        self.rows.get_mut(&bucket).unwrap()
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    pub fn projection_mut(&mut self) -> &mut [f64] {
        &mut self.projection
    }

    /// Number of embedding rows that differ from their initialization.
    pub fn materialized_rows(&self) -> usize {
        self.rows.len()
    }

    fn buckets_of(&self, tokens: &[Token]) -> Vec<u32> {
        tokens.iter().map(|t| self.bucket(t)).collect()
    }

    fn pool(&self, buckets: &[u32]) -> Vec<f64> {
        let mut h = vec![0.0; self.header.dim];
        if buckets.is_empty() {
            return h;
        }
        for &b in buckets {
            for (acc, v) in h.iter_mut().zip(self.row(b).iter()) {
                *acc += v;
            }
        }
        let inv = 1.0 / buckets.len() as f64;
        h.iter_mut().for_each(|x| *x *= inv);
        h
    }

    fn project(&self, h: &[f64]) -> Vec<f64> {
        let n = self.header.dim;
        (0..n)
            .map(|r| dot(&self.projection[r * n..(r + 1) * n], h))
            .collect()
    }

    /// `W^T · v`
    fn project_transpose(&self, v: &[f64]) -> Vec<f64> {
        let n = self.header.dim;
        let mut out = vec![0.0; n];
        for (r, &vr) in v.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&self.projection[r * n..(r + 1) * n]) {
                *o += w * vr;
            }
        }
        out
    }

    pub fn encode(&self, tokens: &[Token]) -> DenseVector {
        self.encode_buckets(&self.buckets_of(tokens))
    }

    fn encode_buckets(&self, buckets: &[u32]) -> DenseVector {
        DenseVector(self.project(&self.pool(buckets)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.put_bytes(&serde_json::to_vec(&self.header).expect("header serialize"));
        w.put_f64s(&self.projection);
        w.put_len(self.rows.len());
        for (&bucket, row) in &self.rows {
            w.put_u32(bucket);
            for &v in row {
                w.put_f64(v);
            }
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::open(data, MAGIC, VERSION)?;
        let header: ModelHeader = serde_json::from_slice(r.bytes()?)
            .map_err(|e| Error::Corrupt(format!("model header: {e}")))?;
        let n = header.dim;
        let projection = r.f64s()?;
        if projection.len() != n * n {
            return Err(Error::Corrupt("projection is not dim × dim".into()));
        }
        let count = r.length()?;
        let mut rows = BTreeMap::new();
        for _ in 0..count {
            let bucket = r.u32()?;
            if bucket as usize >= header.buckets {
                return Err(Error::Corrupt(format!("bucket {bucket} out of range")));
            }
            let row = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            rows.insert(bucket, row);
        }
        r.finish()?;
        Ok(EncoderModel {
            header,
            projection,
            rows,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?)
    }

    /// Content digest used by indexes to reference the model they were built with.
    pub fn digest(&self) -> String {
        container::digest_hex(&self.to_bytes())
    }
}

fn uniform_stream(seed: u64, stream: u64, len: usize, scale: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..len).map(|_| rng.gen_range(-scale..=scale)).collect()
}

/// One (question, positive passage) example given as token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub query: Vec<Token>,
    pub positive: Vec<Token>,
}

pub type TrainingBatch = [TrainingExample];

struct BucketExample {
    query: Vec<u32>,
    positive: Vec<u32>,
}

/// Gradient of the mean batch loss with respect to every parameter touched.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub projection: Vec<f64>,
    pub rows: BTreeMap<u32, Vec<f64>>,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

struct Forward {
    pooled_q: Vec<Vec<f64>>,
    pooled_p: Vec<Vec<f64>>,
    enc_q: Vec<Vec<f64>>,
    enc_p: Vec<Vec<f64>>,
    scores: Vec<Vec<f64>>,
    loss: f64,
}

fn forward(model: &EncoderModel, batch: &[BucketExample]) -> Forward {
    let pooled_q: Vec<_> = batch.iter().map(|e| model.pool(&e.query)).collect();
    let pooled_p: Vec<_> = batch.iter().map(|e| model.pool(&e.positive)).collect();
    let enc_q: Vec<_> = pooled_q.iter().map(|h| model.project(h)).collect();
    let enc_p: Vec<_> = pooled_p.iter().map(|h| model.project(h)).collect();
    let scores: Vec<Vec<f64>> = enc_q
        .iter()
        .map(|q| enc_p.iter().map(|p| dot(q, p)).collect())
        .collect();
    let loss = if batch.is_empty() {
        0.0
    } else {
        scores
            .iter()
            .enumerate()
            // clamps rounding below zero; NaN passes through
            .map(|(i, row)| {
                let l = log_sum_exp(row) - row[i];
                if l < 0.0 {
                    0.0
                } else {
                    l
                }
            })
            .sum::<f64>()
            / batch.len() as f64
    };
    Forward {
        pooled_q,
        pooled_p,
        enc_q,
        enc_p,
        scores,
        loss,
    }
}

fn to_buckets(model: &EncoderModel, batch: &TrainingBatch) -> Vec<BucketExample> {
    batch
        .iter()
        .map(|e| BucketExample {
            query: model.buckets_of(&e.query),
            positive: model.buckets_of(&e.positive),
        })
        .collect()
}

/// Mean over queries of `logsumexp_j(s_ij) - s_ii`, with `s_ij = ⟨q_i, p_j⟩`.
pub fn batch_loss(model: &EncoderModel, batch: &TrainingBatch) -> f64 {
    forward(model, &to_buckets(model, batch)).loss
}

pub fn batch_gradient(model: &EncoderModel, batch: &TrainingBatch) -> (f64, Gradient) {
    gradient_buckets(model, &to_buckets(model, batch))
}

fn gradient_buckets(model: &EncoderModel, batch: &[BucketExample]) -> (f64, Gradient) {
    let n = model.dim();
    let b = batch.len();
    let fwd = forward(model, batch);
    let mut grad = Gradient {
        projection: vec![0.0; n * n],
        rows: BTreeMap::new(),
    };
    if b == 0 {
        return (fwd.loss, grad);
    }
    let inv_b = 1.0 / b as f64;

    // dL/ds_ij = (softmax_ij - [i == j]) / B
    let coeff: Vec<Vec<f64>> = fwd
        .scores
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let lse = log_sum_exp(row);
            row.iter()
                .enumerate()
                .map(|(j, &s)| ((s - lse).exp() - if i == j { 1.0 } else { 0.0 }) * inv_b)
                .collect()
        })
        .collect();

    let mut d_enc_q = vec![vec![0.0; n]; b];
    let mut d_enc_p = vec![vec![0.0; n]; b];
    for i in 0..b {
        for j in 0..b {
            let c = coeff[i][j];
            for d in 0..n {
                d_enc_q[i][d] += c * fwd.enc_p[j][d];
                d_enc_p[j][d] += c * fwd.enc_q[i][d];
            }
        }
    }

    let sides = [
        (&d_enc_q, &fwd.pooled_q, true),
        (&d_enc_p, &fwd.pooled_p, false),
    ];
    for (d_enc, pooled, is_query) in sides {
        for (k, (de, h)) in d_enc.iter().zip(pooled.iter()).enumerate() {
            // dW += de · h^T
            for (row, &dr) in grad.projection.chunks_exact_mut(n).zip(de) {
                for (g, hv) in row.iter_mut().zip(h) {
                    *g += dr * hv;
                }
            }
            let buckets = if is_query {
                &batch[k].query
            } else {
                &batch[k].positive
            };
            if buckets.is_empty() {
                continue;
            }
            let d_pooled = model.project_transpose(de);
            let share = 1.0 / buckets.len() as f64;
            for &bk in buckets {
                let g = grad.rows.entry(bk).or_insert_with(|| vec![0.0; n]);
                for (gv, dv) in g.iter_mut().zip(&d_pooled) {
                    *gv += dv * share;
                }
            }
        }
    }
    (fwd.loss, grad)
}

fn apply(model: &mut EncoderModel, grad: &Gradient, lr: f64) {
    for (w, g) in model.projection.iter_mut().zip(&grad.projection) {
        *w -= lr * g;
    }
    for (&bucket, g) in &grad.rows {
        for (w, gv) in model.row_mut(bucket).iter_mut().zip(g) {
            *w -= lr * gv;
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EncoderModel,
    /// Mean batch loss per epoch, measured before each update.
    pub epoch_losses: Vec<f64>,
}

/// Plain SGD over shuffled, fixed-size batches; the final partial batch of
/// each epoch is dropped.
pub fn train(
    mut model: EncoderModel,
    pairs: &[TrainingPair],
    collection: &PassageCollection,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if config.batch_size < 2 {
        return Err(Error::InvalidArgument(
            "in-batch negatives require batch ≥ 2".into(),
        ));
    }
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(Error::InvalidArgument(
            "learning rate must be positive".into(),
        ));
    }
    let mut examples = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let passage = collection
            .get(&pair.passage_id)
            .ok_or_else(|| Error::UnknownPassage(pair.passage_id.clone()))?;
        let positive = pair.positive_tokens.as_deref().unwrap_or(&passage.tokens);
        examples.push(BucketExample {
            query: model.buckets_of(&pair.question_tokens),
            positive: model.buckets_of(positive),
        });
    }
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            model,
            epoch_losses: Vec::new(),
        });
    }
    if examples.len() < config.batch_size {
        return Err(Error::InvalidArgument(format!(
            "{} training pairs cannot fill one batch of {}",
            examples.len(),
            config.batch_size
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut batch: Vec<BucketExample> = Vec::with_capacity(config.batch_size);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks_exact(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| BucketExample {
                query: examples[i].query.clone(),
                positive: examples[i].positive.clone(),
            }));
            let (loss, grad) = gradient_buckets(&model, &batch);
            if !loss.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "training diverged (loss {loss}); lower the learning rate"
                )));
            }
            apply(&mut model, &grad, config.learning_rate);
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    model.header.trained_with = Some(*config);
    Ok(TrainOutcome {
        model,
        epoch_losses,
    })
}

/// Fraction of queries whose own positive scores highest within its batch.
pub fn in_batch_accuracy(model: &EncoderModel, batch: &TrainingBatch) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let fwd = forward(model, &to_buckets(model, batch));
    let hits = fwd
        .scores
        .iter()
        .enumerate()
        .filter(|(i, row)| row.iter().enumerate().all(|(j, &s)| j == *i || s < row[*i]))
        .count();
    hits as f64 / batch.len() as f64
}
