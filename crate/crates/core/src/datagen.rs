//! Synthetic (question, passage) training pairs.
//!
//! Three recipes: inverse-cloze (a sentence is the query, optionally masked
//! out of its passage), sliding n-gram windows, and question generation over
//! the whole passage plus its most salient sentences. Generated questions can
//! also be imported from a file produced by an external generator.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CollectionStats, Passage, PassageCollection};
use crate::text::{join_tokens, split_sentences, tokenize, Sentence, Token};
use crate::{fnv1a64, mix_seed, Error, Result};

/// Passage-level generator input budget, in tokens.
pub const QGEN_MAX_INPUT_TOKENS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PairSource {
    Ict,
    Ngram,
    Qgen,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub question_tokens: Vec<Token>,
    pub passage_id: String,
    pub source: PairSource,
    /// Replacement positive text, set when ICT masked the query sentence out.
    pub positive_tokens: Option<Vec<Token>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub ict_max_sentences: usize,
    pub ict_mask_rate: f64,
    pub ngram_n: usize,
    pub ngram_stride: usize,
    pub salient_top_k: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            ict_max_sentences: 5,
            ict_mask_rate: 0.9,
            ngram_n: 16,
            ngram_stride: 8,
            salient_top_k: 5,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ngram_stride == 0 || self.ngram_n < self.ngram_stride {
            return Err(Error::InvalidArgument(format!(
                "ngram window needs stride ≥ 1 and n ≥ stride (n={}, stride={})",
                self.ngram_n, self.ngram_stride
            )));
        }
        if !(0.0..=1.0).contains(&self.ict_mask_rate) {
            return Err(Error::InvalidArgument(
                "ict mask rate must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Deterministic per-passage RNG, independent of processing order.
pub fn passage_rng(seed: u64, passage_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, fnv1a64(passage_id.as_bytes())))
}

/// Inverse cloze task. Returns each pair with the token sequence used as
/// its positive.
pub fn gen_ict(
    passage: &Passage,
    cfg: &GenConfig,
    rng: &mut impl Rng,
) -> Vec<(TrainingPair, Vec<Token>)> {
    let sentences = split_sentences(&passage.text);
    if sentences.is_empty() {
        return Vec::new();
    }
    let take = cfg.ict_max_sentences.min(sentences.len());
    let mut picked = rand::seq::index::sample(rng, sentences.len(), take).into_vec();
    picked.sort_unstable();

    let title = passage.title_tokens();
    let mut out = Vec::with_capacity(take);
    for idx in picked {
        let masked = rng.gen_bool(cfg.ict_mask_rate);
        let query = sentences[idx].tokens();
        if query.is_empty() {
            continue;
        }
        let positive = if masked {
            let mut toks = title.clone();
            for (j, s) in sentences.iter().enumerate() {
                if j != idx {
                    toks.extend(s.tokens());
                }
            }
            toks
        } else {
            passage.tokens.clone()
        };
        let pair = TrainingPair {
            question_tokens: query,
            passage_id: passage.id.clone(),
            source: PairSource::Ict,
            positive_tokens: masked.then(|| positive.clone()),
        };
        out.push((pair, positive));
    }
    out
}

/// Window start offsets and lengths for a sequence of `len` tokens.
pub fn ngram_windows(len: usize, n: usize, stride: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < len {
        let end = (start + n).min(len);
        if end - start >= stride || start == 0 {
            out.push((start, end));
        }
        start += stride;
    }
    out
}

pub fn gen_ngram(passage: &Passage, cfg: &GenConfig) -> Vec<TrainingPair> {
    ngram_windows(passage.tokens.len(), cfg.ngram_n, cfg.ngram_stride)
        .into_iter()
        .map(|(s, e)| TrainingPair {
            question_tokens: passage.tokens[s..e].to_vec(),
            passage_id: passage.id.clone(),
            source: PairSource::Ngram,
            positive_tokens: None,
        })
        .collect()
}

/// Top-`k` sentences by their maximum term IDF, earlier sentences winning
/// ties. Sentences without tokens are never salient.
pub fn salient_sentences(passage: &Passage, stats: &CollectionStats, k: usize) -> Vec<Sentence> {
    let mut scored: Vec<(f64, usize, Sentence)> = split_sentences(&passage.text)
        .into_iter()
        .enumerate()
        .filter(|(_, s)| s.token_count > 0)
        .map(|(i, s)| {
            let score = s
                .tokens()
                .iter()
                .map(|t| stats.idf(t.as_str()))
                .fold(f64::NEG_INFINITY, f64::max);
            (score, i, s)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, _, s)| s).collect()
}

pub trait QuestionGenerator: Sync {
    /// Produces a question for `input`; an empty result means no question.
    fn generate(&self, input: &[Token], stats: &CollectionStats) -> Vec<Token>;
}

/// Deterministic stand-in: "what is known about" followed by the input's
/// highest-IDF distinct terms, in the order they first occur.
#[derive(Debug, Clone, Copy)]
pub struct TemplateGenerator {
    pub terms: usize,
}

impl Default for TemplateGenerator {
    fn default() -> Self {
        TemplateGenerator { terms: 5 }
    }
}

const TEMPLATE_PREFIX: [&str; 4] = ["what", "is", "known", "about"];

impl QuestionGenerator for TemplateGenerator {
    fn generate(&self, input: &[Token], stats: &CollectionStats) -> Vec<Token> {
        let mut first: Vec<(usize, &Token)> = Vec::new();
        let mut seen = BTreeSet::new();
        for (pos, t) in input.iter().enumerate() {
            if seen.insert(t) {
                first.push((pos, t));
            }
        }
        if first.is_empty() {
            return Vec::new();
        }
        let mut ranked: Vec<(f64, usize, &Token)> = first
            .iter()
            .map(|&(pos, t)| (stats.idf(t.as_str()), pos, t))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        ranked.truncate(self.terms);
        ranked.sort_by_key(|&(_, pos, _)| pos);

        let mut q: Vec<Token> = TEMPLATE_PREFIX
            .iter()
            .map(|w| Token::new(w).expect("template word is a token"))
            .collect();
        q.extend(ranked.into_iter().map(|(_, _, t)| t.clone()));
        q
    }
}

/// Questions produced elsewhere, keyed by passage id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExternalQuestions {
    by_passage: BTreeMap<String, Vec<Vec<Token>>>,
}

#[derive(Deserialize)]
struct ExternalRecord {
    question: String,
    passage_id: String,
}

impl ExternalQuestions {
    /// Reads newline-delimited `{"question", "passage_id"}` records.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut by_passage: BTreeMap<String, Vec<Vec<Token>>> = BTreeMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let rec: ExternalRecord =
                serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            let q = tokenize(&rec.question);
            if q.is_empty() {
                return Err(parse_err("question has no tokens".into()));
            }
            by_passage.entry(rec.passage_id).or_default().push(q);
        }
        Ok(ExternalQuestions { by_passage })
    }

    pub fn len(&self) -> usize {
        self.by_passage.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_passage.is_empty()
    }

    /// Errors on the first question whose passage is not in `collection`.
    pub fn validate(&self, collection: &PassageCollection) -> Result<()> {
        match self.by_passage.keys().find(|id| !collection.contains(id)) {
            Some(id) => Err(Error::UnknownPassage(id.clone())),
            None => Ok(()),
        }
    }

    fn questions_for(&self, passage_id: &str) -> &[Vec<Token>] {
        self.by_passage.get(passage_id).map_or(&[], Vec::as_slice)
    }
}

pub enum QuestionSource<'a> {
    Generator(&'a dyn QuestionGenerator),
    External(&'a ExternalQuestions),
}

/// One question for the truncated passage and one per salient sentence, or
/// the imported questions for this passage. Duplicate questions collapse.
pub fn gen_questions(
    passage: &Passage,
    stats: &CollectionStats,
    cfg: &GenConfig,
    source: &QuestionSource<'_>,
) -> Vec<TrainingPair> {
    let (questions, tag): (Vec<Vec<Token>>, PairSource) = match source {
        QuestionSource::External(ext) => (
            ext.questions_for(&passage.id).to_vec(),
            PairSource::External,
        ),
        QuestionSource::Generator(g) => {
            let cut = passage.tokens.len().min(QGEN_MAX_INPUT_TOKENS);
            let mut qs = vec![g.generate(&passage.tokens[..cut], stats)];
            for s in salient_sentences(passage, stats, cfg.salient_top_k) {
                qs.push(g.generate(&s.tokens(), stats));
            }
            (qs, PairSource::Qgen)
        }
    };
    let mut seen = BTreeSet::new();
    questions
        .into_iter()
        .filter(|q| !q.is_empty() && seen.insert(join_tokens(q)))
        .map(|q| TrainingPair {
            question_tokens: q,
            passage_id: passage.id.clone(),
            source: tag,
            positive_tokens: None,
        })
        .collect()
}

/// Keeps whole source documents (all chunks of a `doc#i` group) with
/// probability `fraction`, each decided by its own seeded draw.
pub fn subsample_corpus(
    collection: &PassageCollection,
    fraction: f64,
    seed: u64,
) -> Result<PassageCollection> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction {fraction} is outside (0, 1]"
        )));
    }
    if fraction == 1.0 {
        return Ok(collection.clone());
    }
    let mut decided: BTreeMap<String, bool> = BTreeMap::new();
    Ok(collection.filter(|p| {
        *decided.entry(p.doc_id().to_string()).or_insert_with(|| {
            let mut rng = passage_rng(seed, p.doc_id());
            rng.gen::<f64>() < fraction
        })
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ict,
    Ngram,
    Qgen,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ict" => Ok(Method::Ict),
            "ngram" => Ok(Method::Ngram),
            "qgen" => Ok(Method::Qgen),
            other => Err(Error::InvalidArgument(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GenOutput {
    pub pairs: Vec<TrainingPair>,
    /// ICT only: pairs whose query sentence was removed from the positive.
    pub masked: usize,
}

/// Runs one recipe over every passage. Passages are processed in parallel;
/// output order follows the collection.
pub fn generate_pairs(
    collection: &PassageCollection,
    stats: &CollectionStats,
    method: Method,
    cfg: &GenConfig,
    source: &QuestionSource<'_>,
) -> Result<GenOutput> {
    cfg.validate()?;
    let per_passage: Vec<Vec<TrainingPair>> = collection
        .passages()
        .par_iter()
        .map(|p| match method {
            Method::Ict => {
                let mut rng = passage_rng(cfg.seed, &p.id);
                gen_ict(p, cfg, &mut rng)
                    .into_iter()
                    .map(|(pair, _)| pair)
                    .collect()
            }
            Method::Ngram => gen_ngram(p, cfg),
            Method::Qgen => gen_questions(p, stats, cfg, source),
        })
        .collect();
    let pairs: Vec<TrainingPair> = per_passage.into_iter().flatten().collect();
    let masked = pairs.iter().filter(|p| p.positive_tokens.is_some()).count();
    Ok(GenOutput { pairs, masked })
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    question: String,
    passage_id: String,
    source: PairSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    positive: Option<String>,
}

pub fn write_pairs(path: &Path, pairs: &[TrainingPair]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for p in pairs {
        let rec = PairRecord {
            question: join_tokens(&p.question_tokens),
            passage_id: p.passage_id.clone(),
            source: p.source,
            positive: p.positive_tokens.as_deref().map(join_tokens),
        };
        serde_json::to_writer(&mut out, &rec).expect("pair serialize");
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: &Path) -> Result<Vec<TrainingPair>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: PairRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let question_tokens = tokenize(&rec.question);
        if question_tokens.is_empty() {
            return Err(parse_err("question has no tokens".into()));
        }
        pairs.push(TrainingPair {
            question_tokens,
            passage_id: rec.passage_id,
            source: rec.source,
            positive_tokens: rec.positive.as_deref().map(tokenize),
        });
    }
    Ok(pairs)
}
