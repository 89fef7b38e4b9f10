//! Passage collections and the statistics BM25 and salience scoring read.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::text::{chunk_passage, tokenize, Token};
use crate::{container, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Passage {
    pub id: String,
    pub title: Option<String>,
    pub text: String,
    /// `tokenize(title) ++ tokenize(text)`
    pub tokens: Vec<Token>,
}

impl Passage {
    pub fn new(id: impl Into<String>, title: Option<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let mut tokens = title.as_deref().map(tokenize).unwrap_or_default();
        tokens.extend(tokenize(&text));
        Passage {
            id: id.into(),
            title,
            text,
            tokens,
        }
    }

    pub fn title_tokens(&self) -> Vec<Token> {
        self.title.as_deref().map(tokenize).unwrap_or_default()
    }

    /// Source document id: everything before the last `#`.
    pub fn doc_id(&self) -> &str {
        self.id
            .rsplit_once('#')
            .map_or(self.id.as_str(), |(d, _)| d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionStats {
    pub doc_count: u64,
    pub avg_len: f64,
    pub df: BTreeMap<Token, u64>,
}

impl CollectionStats {
    pub fn from_passages(passages: &[Passage]) -> Result<Self> {
        if passages.is_empty() {
            return Err(Error::EmptyCollection);
        }
        let mut df: BTreeMap<Token, u64> = BTreeMap::new();
        let mut total = 0usize;
        for p in passages {
            total += p.tokens.len();
            let mut seen: Vec<&Token> = p.tokens.iter().collect();
            seen.sort_unstable();
            seen.dedup();
            for t in seen {
                *df.entry(t.clone()).or_default() += 1;
            }
        }
        Ok(CollectionStats {
            doc_count: passages.len() as u64,
            avg_len: total as f64 / passages.len() as f64,
            df,
        })
    }

    pub fn df(&self, term: &str) -> u64 {
        self.df.get(term).copied().unwrap_or(0)
    }

    pub fn idf(&self, term: &str) -> f64 {
        idf(self, term)
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn digest(&self) -> String {
        container::digest_hex(&serde_json::to_vec(self).expect("stats serialize"))
    }
}

/// `ln(1 + (N - df + 0.5) / (df + 0.5))`, with `df = 0` for unseen terms.
pub fn idf(stats: &CollectionStats, term: &str) -> f64 {
    let n = stats.doc_count as f64;
    let df = stats.df(term) as f64;
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PassageCollection {
    passages: Vec<Passage>,
    by_id: HashMap<String, usize>,
}

#[derive(Deserialize)]
struct CorpusRecord {
    id: String,
    #[serde(default)]
    title: Option<String>,
    text: String,
}

impl PassageCollection {
    pub fn from_passages(passages: Vec<Passage>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            if by_id.insert(p.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(p.id.clone()));
            }
        }
        Ok(PassageCollection { passages, by_id })
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.by_id.get(id).map(|&i| &self.passages[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn stats(&self) -> Result<CollectionStats> {
        CollectionStats::from_passages(&self.passages)
    }

    pub fn token_count(&self) -> usize {
        self.passages.iter().map(|p| p.tokens.len()).sum()
    }

    /// Reads newline-delimited JSON corpus records (`id`, optional `title`,
    /// `text`) and chunks each one. Chunk ids are `{record_id}#{chunk_index}`.
    pub fn ingest(path: &Path, max_tokens: usize) -> Result<Self> {
        if max_tokens == 0 {
            return Err(Error::InvalidArgument("max_tokens must be positive".into()));
        }
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut passages = Vec::new();
        let mut record_ids = std::collections::HashSet::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let lineno = lineno + 1;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message,
            };
            let rec: CorpusRecord =
                serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            if !record_ids.insert(rec.id.clone()) {
                return Err(parse_err(format!("duplicate record id {:?}", rec.id)));
            }
            let title = rec.title.as_deref().unwrap_or("");
            let chunks = chunk_passage(title, &rec.text, max_tokens)
                .map_err(|e| parse_err(e.to_string()))?;
            for (i, chunk) in chunks.into_iter().enumerate() {
                passages.push(Passage::new(
                    format!("{}#{i}", rec.id),
                    rec.title.clone(),
                    chunk.text,
                ));
            }
        }
        Self::from_passages(passages)
    }

    /// Keeps the passages for which `keep` returns true, preserving order.
    pub fn filter(&self, mut keep: impl FnMut(&Passage) -> bool) -> Self {
        let passages: Vec<Passage> = self.passages.iter().filter(|p| keep(p)).cloned().collect();
        Self::from_passages(passages).expect("subset of unique ids is unique")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CollectionFile {
            format: COLLECTION_FORMAT.into(),
            version: COLLECTION_VERSION,
            passages: self
                .passages
                .iter()
                .map(|p| PassageRecord {
                    id: p.id.clone(),
                    title: p.title.clone(),
                    text: p.text.clone(),
                })
                .collect(),
            stats: self.stats().ok(),
        };
        let mut bytes = serde_json::to_vec(&file).expect("collection serialize");
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = container::read_file(path)?;
        let file: CollectionFile = serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if file.format != COLLECTION_FORMAT {
            return Err(Error::Corrupt(format!(
                "not a collection file: {:?}",
                file.format
            )));
        }
        if file.version != COLLECTION_VERSION {
            return Err(Error::Version {
                found: file.version,
                expected: COLLECTION_VERSION,
            });
        }
        let coll = Self::from_passages(
            file.passages
                .into_iter()
                .map(|r| Passage::new(r.id, r.title, r.text))
                .collect(),
        )?;
        if coll.stats().ok() != file.stats {
            return Err(Error::Corrupt(
                "stored statistics disagree with passages".into(),
            ));
        }
        Ok(coll)
    }
}

const COLLECTION_FORMAT: &str = "firststage-collection";
const COLLECTION_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CollectionFile {
    format: String,
    version: u32,
    passages: Vec<PassageRecord>,
    stats: Option<CollectionStats>,
}

#[derive(Serialize, Deserialize)]
struct PassageRecord {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    title: Option<String>,
    text: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_corpus(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    fn stats_of(texts: &[&str]) -> CollectionStats {
        let ps: Vec<_> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Passage::new(format!("d{i}"), None, *t))
            .collect();
        CollectionStats::from_passages(&ps).unwrap()
    }

    #[test]
    fn idf_examples() {
        let s = stats_of(&["a"]);
        assert!((s.idf("a") - (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((s.idf("a") - 0.28768).abs() < 1e-5);

        let s = stats_of(&["x"; 100]);
        assert!((s.idf("unseen") - 202f64.ln()).abs() < 1e-12);
        assert!((s.idf("unseen") - 5.3083).abs() < 1e-4);
        assert!(s.idf("x") > 0.0);
    }

    #[test]
    fn idf_strictly_decreasing_in_df() {
        let mut s = stats_of(&["a"; 50]);
        let mut prev = f64::INFINITY;
        for df in 0..=50 {
            s.df.insert(Token::new("t").unwrap(), df);
            if df == 0 {
                s.df.remove("t");
            }
            let v = s.idf("t");
            assert!(v >= 0.0 && v < prev, "df={df}");
            prev = v;
        }
    }

    #[test]
    fn stats_invariants() {
        let s = stats_of(&["a b a", "b c", ""]);
        assert_eq!(s.doc_count, 3);
        assert_eq!(s.df("a"), 1);
        assert_eq!(s.df("b"), 2);
        assert!((s.avg_len - 5.0 / 3.0).abs() < 1e-12);
        assert!(s.df.values().all(|&d| d >= 1 && d <= s.doc_count));
    }

    #[test]
    fn ingest_single_chunk() {
        let f = write_corpus(&[r#"{"id":"doc1","title":"T","text":"Short body."}"#]);
        let c = PassageCollection::ingest(f.path(), 200).unwrap();
        assert_eq!(c.len(), 1);
        let p = &c.passages()[0];
        assert_eq!(p.id, "doc1#0");
        assert_eq!(p.doc_id(), "doc1");
        assert_eq!(p.tokens, tokenize("T Short body."));
    }

    #[test]
    fn ingest_three_chunks() {
        let f = write_corpus(&[r#"{"id":"doc1","title":"t","text":"a b. c d. e f. g h. i j."}"#]);
        // budget of 4 body tokens: [a b c d] [e f g h] [i j]
        let c = PassageCollection::ingest(f.path(), 5).unwrap();
        let ids: Vec<_> = c.passages().iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["doc1#0", "doc1#1", "doc1#2"]);
    }

    #[test]
    fn ingest_empty_file() {
        let f = write_corpus(&[]);
        let c = PassageCollection::ingest(f.path(), 200).unwrap();
        assert!(c.is_empty());
        assert!(matches!(c.stats(), Err(Error::EmptyCollection)));
    }

    #[test]
    fn ingest_reports_malformed_line() {
        let f = write_corpus(&[
            r#"{"id":"a","text":"x"}"#,
            r#"{"id":"b","text":"y"}"#,
            r#"{"id":"c" "text":"y"}"#,
        ]);
        match PassageCollection::ingest(f.path(), 200) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ingest_rejects_duplicate_ids() {
        let f = write_corpus(&[r#"{"id":"a","text":"x"}"#, r#"{"id":"a","text":"y"}"#]);
        let err = PassageCollection::ingest(f.path(), 200).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn save_load_is_byte_deterministic() {
        let f = write_corpus(&[
            r#"{"id":"a","title":"Friedreich's ataxia","text":"One. Two three? Four!"}"#,
            r#"{"id":"b","text":"no title here"}"#,
        ]);
        let dir = tempfile::tempdir().unwrap();
        let c1 = PassageCollection::ingest(f.path(), 6).unwrap();
        let c2 = PassageCollection::ingest(f.path(), 6).unwrap();
        assert_eq!(c1, c2);
        c1.save(&dir.path().join("1.json")).unwrap();
        c2.save(&dir.path().join("2.json")).unwrap();
        let b1 = std::fs::read(dir.path().join("1.json")).unwrap();
        assert_eq!(b1, std::fs::read(dir.path().join("2.json")).unwrap());
        let back = PassageCollection::load(&dir.path().join("1.json")).unwrap();
        assert_eq!(back, c1);
    }
}
