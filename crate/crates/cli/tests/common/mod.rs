//! Synthetic corpora shared by the CLI and acceptance tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOPIC_VOCAB: usize = 60;
const FILLER_VOCAB: usize = 40;

/// `topics × per_topic` records; record `t{t}d{i}` draws its content words
/// only from topic `t` and shares filler words with every topic.
pub fn topic_corpus(topics: usize, per_topic: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for t in 0..topics {
        for i in 0..per_topic {
            let sentences: Vec<String> = (0..3)
                .map(|_| {
                    let mut words: Vec<String> = (0..6)
                        .map(|_| format!("t{t}w{}", rng.gen_range(0..TOPIC_VOCAB)))
                        .collect();
                    words.extend((0..4).map(|_| format!("f{}", rng.gen_range(0..FILLER_VOCAB))));
                    words.join(" ") + "."
                })
                .collect();
            let rec = serde_json::json!({ "id": format!("t{t}d{i}"), "text": sentences.join(" ") });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
    }
    out
}

/// Template queries naming random topic words, with every chunk of the
/// topic judged relevant.
pub fn topic_queries(
    topics: usize,
    per_topic_docs: usize,
    queries_per_topic: usize,
    seed: u64,
) -> (String, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queries = String::new();
    let mut qrels = String::new();
    for t in 0..topics {
        for j in 0..queries_per_topic {
            let qid = format!("q{t}_{j}");
            let words: Vec<String> = (0..3)
                .map(|_| format!("t{t}w{}", rng.gen_range(0..TOPIC_VOCAB)))
                .collect();
            queries.push_str(&format!("{qid}\twhat is known about {}\n", words.join(" ")));
            for i in 0..per_topic_docs {
                qrels.push_str(&format!("{qid} 0 t{t}d{i}#0 1\n"));
            }
        }
    }
    (queries, qrels)
}

pub fn write(dir: &Path, name: &str, contents: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, contents).unwrap();
    p
}

pub fn path_str(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

/// Runs a command in-process and returns its summary output.
pub fn run(args: &[&str]) -> anyhow::Result<String> {
    let mut out = Vec::new();
    firststage_cli::run_args(args.iter().copied(), &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

/// Value of a `key<TAB>value` summary line.
pub fn field<'a>(output: &'a str, key: &str) -> Option<&'a str> {
    output
        .lines()
        .find_map(|l| l.strip_prefix(key)?.strip_prefix('\t'))
}
