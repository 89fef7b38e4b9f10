//! TREC-style retrieval metrics, Rouge, and a paired permutation test.
//!
//! Conventions follow trec_eval: binary relevance is `grade > 0`, average
//! precision divides by the total relevant count in the qrels regardless of
//! cutoff, nDCG uses linear gain with a `log2(rank + 1)` discount, and
//! queries without any relevant passage are left out of the means.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::search::ScoredHit;
use crate::{Error, Result};

pub const DEFAULT_PERMUTATION_ROUNDS: usize = 10_000;

/// Relevance grades for one query; absent passages are non-relevant.
pub type Judgments = BTreeMap<String, u32>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Qrels {
    queries: BTreeMap<String, Judgments>,
}

fn line_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

impl Qrels {
    pub fn insert(&mut self, query_id: &str, passage_id: &str, grade: u32) {
        self.queries
            .entry(query_id.to_string())
            .or_default()
            .insert(passage_id.to_string(), grade);
    }

    pub fn get(&self, query_id: &str) -> Option<&Judgments> {
        self.queries.get(query_id)
    }

    pub fn queries(&self) -> impl Iterator<Item = (&String, &Judgments)> {
        self.queries.iter()
    }

    /// `query_id 0 passage_id grade`
    pub fn parse_file(path: &Path) -> Result<Self> {
        let mut qrels = Qrels::default();
        for (lineno, line) in read_lines(path)? {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(line_error(
                    path,
                    lineno,
                    format!("expected 4 fields, found {}", f.len()),
                ));
            }
            let grade: i64 = f[3]
                .parse()
                .map_err(|_| line_error(path, lineno, format!("bad grade {:?}", f[3])))?;
            let grade = u32::try_from(grade)
                .map_err(|_| line_error(path, lineno, format!("grade {grade} is negative")))?;
            qrels.insert(f[0], f[2], grade);
        }
        Ok(qrels)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for (q, judged) in &self.queries {
            for (p, g) in judged {
                writeln!(s, "{q} 0 {p} {g}").unwrap();
            }
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// Ranked results per query. Within a query, entries are ordered by score
/// descending and then passage id ascending; ids are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunFile {
    pub tag: String,
    queries: BTreeMap<String, Vec<(String, f64)>>,
}

fn normalize(list: &mut [(String, f64)]) {
    list.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

impl RunFile {
    pub fn new(tag: impl Into<String>) -> Self {
        RunFile {
            tag: tag.into(),
            queries: BTreeMap::new(),
        }
    }

    /// Sets the ranking for `query_id`, normalizing its order.
    pub fn insert(&mut self, query_id: &str, mut results: Vec<(String, f64)>) -> Result<()> {
        normalize(&mut results);
        let mut ids: Vec<&String> = results.iter().map(|r| &r.0).collect();
        ids.sort();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateId(format!("{query_id}/{}", w[0])));
        }
        self.queries.insert(query_id.to_string(), results);
        Ok(())
    }

    pub fn insert_hits(&mut self, query_id: &str, hits: &[ScoredHit]) -> Result<()> {
        self.insert(
            query_id,
            hits.iter()
                .map(|h| (h.passage_id.clone(), h.score))
                .collect(),
        )
    }

    pub fn get(&self, query_id: &str) -> Option<&[(String, f64)]> {
        self.queries.get(query_id).map(Vec::as_slice)
    }

    pub fn queries(&self) -> impl Iterator<Item = (&String, &Vec<(String, f64)>)> {
        self.queries.iter()
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// `query_id Q0 passage_id rank score run_tag`
    pub fn parse_file(path: &Path) -> Result<Self> {
        let mut grouped: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        let mut tag: Option<String> = None;
        let mut seen = std::collections::HashSet::new();
        for (lineno, line) in read_lines(path)? {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(line_error(
                    path,
                    lineno,
                    format!("expected 6 fields, found {}", f.len()),
                ));
            }
            f[3].parse::<u64>()
                .map_err(|_| line_error(path, lineno, format!("bad rank {:?}", f[3])))?;
            let score: f64 = f[4]
                .parse()
                .map_err(|_| line_error(path, lineno, format!("bad score {:?}", f[4])))?;
            if !score.is_finite() {
                return Err(line_error(path, lineno, "score is not finite"));
            }
            if !seen.insert((f[0].to_string(), f[2].to_string())) {
                return Err(line_error(
                    path,
                    lineno,
                    format!("duplicate passage {:?} for query {:?}", f[2], f[0]),
                ));
            }
            tag.get_or_insert_with(|| f[5].to_string());
            grouped
                .entry(f[0].to_string())
                .or_default()
                .push((f[2].to_string(), score));
        }
        let mut run = RunFile::new(tag.unwrap_or_default());
        for (q, mut list) in grouped {
            normalize(&mut list);
            run.queries.insert(q, list);
        }
        Ok(run)
    }

    pub fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        for (q, list) in &self.queries {
            for (rank, (p, score)) in list.iter().enumerate() {
                writeln!(out, "{q} Q0 {p} {} {score:.6} {}", rank + 1, self.tag)?;
            }
        }
        Ok(())
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        self.write_to(&mut out)
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    }
}

fn is_relevant(judged: &Judgments, passage_id: &str) -> bool {
    judged.get(passage_id).is_some_and(|&g| g > 0)
}

fn relevant_count(judged: &Judgments) -> usize {
    judged.values().filter(|&&g| g > 0).count()
}

/// `None` when the query has no relevant passage.
pub fn average_precision<S: AsRef<str>>(
    ranking: &[S],
    judged: &Judgments,
    cutoff: usize,
) -> Option<f64> {
    let total = relevant_count(judged);
    if total == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, p) in ranking.iter().take(cutoff).enumerate() {
        if is_relevant(judged, p.as_ref()) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

/// Relevant hits among the top `k`, over `k` (even if fewer were returned).
pub fn precision_at<S: AsRef<str>>(ranking: &[S], judged: &Judgments, k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let hits = ranking
        .iter()
        .take(k)
        .filter(|p| is_relevant(judged, p.as_ref()))
        .count();
    hits as f64 / k as f64
}

fn dcg(gains: impl Iterator<Item = u32>) -> f64 {
    gains
        .enumerate()
        .map(|(i, g)| f64::from(g) / ((i + 2) as f64).log2())
        .sum()
}

/// `None` when the query has no relevant passage.
pub fn ndcg_at<S: AsRef<str>>(ranking: &[S], judged: &Judgments, k: usize) -> Option<f64> {
    let mut ideal: Vec<u32> = judged.values().copied().filter(|&g| g > 0).collect();
    if ideal.is_empty() {
        return None;
    }
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(ideal.into_iter().take(k));
    let got = dcg(ranking
        .iter()
        .take(k)
        .map(|p| judged.get(p.as_ref()).copied().unwrap_or(0)));
    Some(got / idcg)
}

pub fn reciprocal_rank<S: AsRef<str>>(ranking: &[S], judged: &Judgments) -> f64 {
    ranking
        .iter()
        .position(|p| is_relevant(judged, p.as_ref()))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

/// Mean reciprocal rank over the run's queries that have relevant passages.
pub fn mrr(run: &RunFile, qrels: &Qrels) -> f64 {
    let rrs: Vec<f64> = run
        .queries()
        .filter_map(|(q, list)| {
            let judged = qrels.get(q)?;
            (relevant_count(judged) > 0).then(|| {
                let ids: Vec<&str> = list.iter().map(|(p, _)| p.as_str()).collect();
                reciprocal_rank(&ids, judged)
            })
        })
        .collect();
    mean(&rrs)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn f1(overlap: usize, cand: usize, reference: usize) -> f64 {
    if overlap == 0 || cand == 0 || reference == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand as f64;
    let r = overlap as f64 / reference as f64;
    2.0 * p * r / (p + r)
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap F1.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> f64 {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let overlap: usize = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    f1(overlap, cand.values().sum(), refs.values().sum())
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 (β = 1).
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    f1(
        lcs_len(candidate, reference),
        candidate.len(),
        reference.len(),
    )
}

/// Paired two-sided sign-flip randomization test on `mean(a - b)`.
/// Returns `(1 + #{rounds at least as extreme}) / (rounds + 1)`.
pub fn permutation_test(a: &[f64], b: &[f64], rounds: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument(
            "permutation test needs at least one pair".into(),
        ));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len() as f64;
    let observed = (diffs.iter().sum::<f64>() / n).abs();
    // absorbs summation-order rounding when a flip reproduces the observed sum
    let threshold = observed - observed * 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extreme = 0usize;
    for _ in 0..rounds {
        let mut sum = 0.0;
        for block in diffs.chunks(64) {
            let bits = rng.next_u64();
            for (i, d) in block.iter().enumerate() {
                if bits >> i & 1 == 1 {
                    sum += d;
                } else {
                    sum -= d;
                }
            }
        }
        if (sum / n).abs() >= threshold {
            extreme += 1;
        }
    }
    Ok((1 + extreme) as f64 / (rounds + 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub map_cutoff: usize,
    pub k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            map_cutoff: 100,
            k: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Metric {
    Map,
    PrecisionAtK,
    NdcgAtK,
    Mrr,
    PrecisionAt1,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Map,
        Metric::PrecisionAtK,
        Metric::NdcgAtK,
        Metric::Mrr,
        Metric::PrecisionAt1,
    ];

    pub fn name(self, cfg: &EvalConfig) -> String {
        match self {
            Metric::Map => format!("map@{}", cfg.map_cutoff),
            Metric::PrecisionAtK => format!("P@{}", cfg.k),
            Metric::NdcgAtK => format!("nDCG@{}", cfg.k),
            Metric::Mrr => "MRR".into(),
            Metric::PrecisionAt1 => "P@1".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct QueryMetrics {
    pub map: f64,
    pub precision_at_k: f64,
    pub ndcg_at_k: f64,
    pub reciprocal_rank: f64,
    pub precision_at_1: f64,
}

impl QueryMetrics {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Map => self.map,
            Metric::PrecisionAtK => self.precision_at_k,
            Metric::NdcgAtK => self.ndcg_at_k,
            Metric::Mrr => self.reciprocal_rank,
            Metric::PrecisionAt1 => self.precision_at_1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub per_query: BTreeMap<String, QueryMetrics>,
    pub mean: QueryMetrics,
    /// Run queries whose qrels contain no relevant passage.
    pub no_relevant: Vec<String>,
    /// Run queries missing from the qrels entirely.
    pub unjudged: Vec<String>,
}

impl EvalReport {
    pub fn evaluated(&self) -> usize {
        self.per_query.len()
    }

    pub fn per_query_values(&self, metric: Metric) -> Vec<(&str, f64)> {
        self.per_query
            .iter()
            .map(|(q, m)| (q.as_str(), m.get(metric)))
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        writeln!(s, "queries\t{}", self.evaluated()).unwrap();
        for m in Metric::ALL {
            writeln!(s, "{}\t{:.4}", m.name(&self.config), self.mean.get(m)).unwrap();
        }
        if !self.no_relevant.is_empty() {
            writeln!(s, "excluded (no relevant)\t{}", self.no_relevant.join(",")).unwrap();
        }
        if !self.unjudged.is_empty() {
            writeln!(s, "skipped (not in qrels)\t{}", self.unjudged.join(",")).unwrap();
        }
        if self.evaluated() == 0 {
            writeln!(s, "warning: no queries were evaluated").unwrap();
        }
        s
    }
}

pub fn evaluate_run(run: &RunFile, qrels: &Qrels, config: EvalConfig) -> EvalReport {
    let mut per_query = BTreeMap::new();
    let mut no_relevant = Vec::new();
    let mut unjudged = Vec::new();
    for (q, list) in run.queries() {
        let Some(judged) = qrels.get(q) else {
            unjudged.push(q.clone());
            continue;
        };
        let ids: Vec<&str> = list.iter().map(|(p, _)| p.as_str()).collect();
        let (Some(ap), Some(ndcg)) = (
            average_precision(&ids, judged, config.map_cutoff),
            ndcg_at(&ids, judged, config.k),
        ) else {
            no_relevant.push(q.clone());
            continue;
        };
        per_query.insert(
            q.clone(),
            QueryMetrics {
                map: ap,
                precision_at_k: precision_at(&ids, judged, config.k),
                ndcg_at_k: ndcg,
                reciprocal_rank: reciprocal_rank(&ids, judged),
                precision_at_1: precision_at(&ids, judged, 1),
            },
        );
    }
    let column = |m: Metric| {
        mean(
            &per_query
                .values()
                .map(|v: &QueryMetrics| v.get(m))
                .collect::<Vec<_>>(),
        )
    };
    let mean = QueryMetrics {
        map: column(Metric::Map),
        precision_at_k: column(Metric::PrecisionAtK),
        ndcg_at_k: column(Metric::NdcgAtK),
        reciprocal_rank: column(Metric::Mrr),
        precision_at_1: column(Metric::PrecisionAt1),
    };
    EvalReport {
        config,
        per_query,
        mean,
        no_relevant,
        unjudged,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricComparison {
    pub metric: Metric,
    pub mean_a: f64,
    pub mean_b: f64,
    pub p_value: f64,
    pub queries: usize,
}

/// Permutation test per metric over the queries both reports evaluated.
pub fn compare_reports(
    a: &EvalReport,
    b: &EvalReport,
    rounds: usize,
    seed: u64,
) -> Result<Vec<MetricComparison>> {
    let shared: Vec<&String> = a
        .per_query
        .keys()
        .filter(|q| b.per_query.contains_key(*q))
        .collect();
    if shared.is_empty() {
        return Err(Error::InvalidArgument(
            "the runs share no evaluated queries".into(),
        ));
    }
    Metric::ALL
        .iter()
        .map(|&metric| {
            let xs: Vec<f64> = shared.iter().map(|q| a.per_query[*q].get(metric)).collect();
            let ys: Vec<f64> = shared.iter().map(|q| b.per_query[*q].get(metric)).collect();
            Ok(MetricComparison {
                metric,
                mean_a: mean(&xs),
                mean_b: mean(&ys),
                p_value: permutation_test(&xs, &ys, rounds, seed)?,
                queries: shared.len(),
            })
        })
        .collect()
}

/// Convenience for callers holding only a path.
pub fn load_pair(run: &Path, qrels: &Path) -> Result<(RunFile, Qrels)> {
    Ok((RunFile::parse_file(run)?, Qrels::parse_file(qrels)?))
}
