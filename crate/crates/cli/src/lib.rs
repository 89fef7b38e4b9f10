//! Pipeline commands behind the `firststage` binary.
//!
//! Each command reads its inputs, writes one artifact, and writes a sidecar
//! `<artifact>.manifest.json` holding the configuration, seeds, and SHA-256
//! digests of every input and output. Summaries go to the given writer;
//! nothing in a manifest depends on paths, clocks, or thread counts.

use std::collections::{BTreeMap, HashSet};
use std::ffi::OsString;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use firststage::container::{digest_hex, read_file};
use firststage::corpus::PassageCollection;
use firststage::datagen::{
    generate_pairs, read_pairs, subsample_corpus, write_pairs, ExternalQuestions, GenConfig,
    Method, QuestionSource, TemplateGenerator,
};
use firststage::dense::{train, EncoderModel, TrainConfig, DEFAULT_BUCKETS};
use firststage::eval::{compare_reports, evaluate_run, EvalConfig, Qrels, RunFile};
use firststage::search::{HybridIndex, DEFAULT_LAMBDA};
use firststage::sparse::Bm25Params;
use firststage::text::{tokenize, Token};

pub const MANIFEST_SUFFIX: &str = ".manifest.json";

#[derive(Debug, Parser)]
#[command(
    name = "firststage",
    version,
    about = "Sparse, dense, and hybrid first-stage retrieval"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Chunk a JSONL corpus into a passage collection.
    Ingest(IngestArgs),
    /// Generate synthetic (question, passage) training pairs.
    Gendata(GendataArgs),
    /// Train the dual encoder on a pairs file.
    Train(TrainArgs),
    /// Encode a collection into a sparse or hybrid index.
    Index(IndexArgs),
    /// Run queries against an index and write a TREC run file.
    Search(SearchArgs),
    /// Score a run file against qrels.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    pub corpus: PathBuf,
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub max_tokens: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Ict,
    Ngram,
    Qgen,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Ict => Method::Ict,
            MethodArg::Ngram => Method::Ngram,
            MethodArg::Qgen => Method::Qgen,
        }
    }
}

#[derive(Debug, Args)]
pub struct GendataArgs {
    pub collection: PathBuf,
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    /// JSONL questions (`question`, `passage_id`) used instead of the built-in generator.
    #[arg(long)]
    pub external: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub pairs: PathBuf,
    pub collection: PathBuf,
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    pub collection: PathBuf,
    pub out: PathBuf,
    /// Encoder checkpoint; without it the index is sparse-only.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub shards: usize,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    pub index: PathBuf,
    /// One query per line: `query_id<TAB>query text`.
    pub queries: PathBuf,
    pub out: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    #[arg(long, default_value = "firststage")]
    pub tag: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub run: PathBuf,
    pub qrels: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub map_cutoff: usize,
    /// Second run to test against the first, metric by metric.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    pub perm_rounds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Provenance record written next to every artifact.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: BTreeMap<String, Value>,
    pub seeds: BTreeMap<String, u64>,
    /// Role → SHA-256 of the file contents.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: BTreeMap::new(),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    fn config(mut self, key: &str, value: Value) -> Self {
        self.config.insert(key.into(), value);
        self
    }

    fn seed(mut self, key: &str, seed: u64) -> Self {
        self.seeds.insert(key.into(), seed);
        self
    }

    fn input(mut self, role: &str, path: &Path) -> Result<Self> {
        self.inputs.insert(role.into(), file_digest(path)?);
        Ok(self)
    }

    /// Records the artifact digest and writes the sidecar next to it.
    fn finish(mut self, role: &str, artifact: &Path) -> Result<()> {
        self.outputs.insert(role.into(), file_digest(artifact)?);
        let path = manifest_path(artifact);
        let mut text = serde_json::to_string_pretty(&self)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut s = OsString::from(artifact.as_os_str());
    s.push(MANIFEST_SUFFIX);
    PathBuf::from(s)
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(digest_hex(&read_file(path)?))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => cmd_ingest(&a, out),
        Command::Gendata(a) => cmd_gendata(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Index(a) => cmd_index(&a, out),
        Command::Search(a) => cmd_search(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
    }
}

/// Parses `args` (without the program name) and runs the command.
pub fn run_args<I, S>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv =
        std::iter::once(OsString::from("firststage")).chain(args.into_iter().map(Into::into));
    run(Cli::try_parse_from(argv)?, out)
}

pub fn cmd_ingest(a: &IngestArgs, out: &mut dyn Write) -> Result<()> {
    let collection = PassageCollection::ingest(&a.corpus, a.max_tokens)?;
    collection.save(&a.out)?;
    writeln!(out, "passages\t{}", collection.len())?;
    writeln!(out, "tokens\t{}", collection.token_count())?;
    RunManifest::new("ingest")
        .config("max_tokens", json!(a.max_tokens))
        .input("corpus", &a.corpus)?
        .finish("collection", &a.out)
}

pub fn cmd_gendata(a: &GendataArgs, out: &mut dyn Write) -> Result<()> {
    let method = Method::from(a.method);
    if a.external.is_some() && method != Method::Qgen {
        bail!("--external only applies to --method=qgen");
    }
    let full = PassageCollection::load(&a.collection)?;
    let collection = subsample_corpus(&full, a.fraction, a.seed)?;
    let stats = collection.stats()?;
    let cfg = GenConfig {
        seed: a.seed,
        ..GenConfig::default()
    };
    let template = TemplateGenerator::default();
    let external = a
        .external
        .as_deref()
        .map(ExternalQuestions::load)
        .transpose()?;
    if let Some(ext) = &external {
        ext.validate(&full)?;
    }
    let source = match &external {
        Some(ext) => QuestionSource::External(ext),
        None => QuestionSource::Generator(&template),
    };
    let generated = generate_pairs(&collection, &stats, method, &cfg, &source)?;
    write_pairs(&a.out, &generated.pairs)?;

    writeln!(out, "passages\t{}", collection.len())?;
    writeln!(out, "pairs\t{}", generated.pairs.len())?;
    if method == Method::Ict {
        let fraction = if generated.pairs.is_empty() {
            0.0
        } else {
            generated.masked as f64 / generated.pairs.len() as f64
        };
        writeln!(out, "masked\t{}", generated.masked)?;
        writeln!(out, "mask_fraction\t{fraction:.4}")?;
    }

    let mut m = RunManifest::new("gendata")
        .config("method", json!(format!("{:?}", a.method).to_lowercase()))
        .config("fraction", json!(a.fraction))
        .config("generator", serde_json::to_value(cfg)?)
        .seed("subsample", a.seed)
        .seed("generator", cfg.seed)
        .input("collection", &a.collection)?;
    if let Some(ext) = &a.external {
        m = m.input("external", ext)?;
    }
    m.finish("pairs", &a.out)
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let pairs = read_pairs(&a.pairs)?;
    let collection = PassageCollection::load(&a.collection)?;
    let config = TrainConfig {
        batch_size: a.batch,
        learning_rate: a.lr,
        epochs: a.epochs,
        seed: a.seed,
    };
    let model = EncoderModel::new(a.dim, DEFAULT_BUCKETS, a.seed)?;
    let outcome = train(model, &pairs, &collection, &config)?;
    outcome.model.save(&a.out)?;

    writeln!(out, "pairs\t{}", pairs.len())?;
    for (i, loss) in outcome.epoch_losses.iter().enumerate() {
        writeln!(out, "epoch\t{}\tloss\t{loss:.6}", i + 1)?;
    }
    match outcome.epoch_losses.last() {
        Some(loss) => writeln!(out, "final_loss\t{loss:.6}")?,
        None => writeln!(out, "final_loss\tnone (zero epochs)")?,
    }

    RunManifest::new("train")
        .config("dim", json!(a.dim))
        .config("buckets", json!(DEFAULT_BUCKETS))
        .config("train", serde_json::to_value(config)?)
        .config("epoch_losses", json!(outcome.epoch_losses))
        .seed("init", a.seed)
        .seed("shuffle", config.seed)
        .input("pairs", &a.pairs)?
        .input("collection", &a.collection)?
        .finish("checkpoint", &a.out)
}

pub fn cmd_index(a: &IndexArgs, out: &mut dyn Write) -> Result<()> {
    let collection = PassageCollection::load(&a.collection)?;
    let stats = collection.stats()?;
    let model = a.model.as_deref().map(EncoderModel::load).transpose()?;
    let params = Bm25Params::default();
    let index = HybridIndex::build(&collection, &stats, params, model.as_ref(), a.shards)?;
    index.save(&a.out)?;

    writeln!(out, "passages\t{}", index.len())?;
    writeln!(out, "shards\t{}", index.shard_count())?;
    match model {
        Some(m) => writeln!(out, "dense_dim\t{}", m.dim())?,
        None => writeln!(out, "dense_dim\tnone (sparse-only)")?,
    }

    let mut m = RunManifest::new("index")
        .config("shards", json!(a.shards))
        .config("bm25", serde_json::to_value(params)?)
        .input("collection", &a.collection)?;
    if let Some(path) = &a.model {
        m = m.input("model", path)?;
    }
    m.finish("index", &a.out)
}

/// Reads `query_id<TAB>text` lines; blank lines are skipped.
pub fn read_queries(path: &Path) -> Result<Vec<(String, Vec<Token>)>> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut queries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let Some((id, text)) = line.split_once('\t') else {
            bail!("{}:{lineno}: expected `query_id<TAB>text`", path.display());
        };
        let id = id.trim();
        if id.is_empty() || id.contains(char::is_whitespace) {
            bail!(
                "{}:{lineno}: query id {id:?} is empty or contains whitespace",
                path.display()
            );
        }
        if !seen.insert(id.to_string()) {
            bail!("{}:{lineno}: duplicate query id {id:?}", path.display());
        }
        queries.push((id.to_string(), tokenize(text)));
    }
    Ok(queries)
}

pub fn cmd_search(a: &SearchArgs, out: &mut dyn Write) -> Result<()> {
    if a.tag.is_empty() || a.tag.contains(char::is_whitespace) {
        bail!("--tag must be a non-empty word");
    }
    let index = HybridIndex::load(&a.index)?;
    let model = a.model.as_deref().map(EncoderModel::load).transpose()?;
    let queries = read_queries(&a.queries)?;
    let mut run = RunFile::new(a.tag.clone());
    let mut lines = 0;
    for (id, tokens) in &queries {
        let hits = index.retrieve(tokens, model.as_ref(), a.lambda, a.k)?;
        lines += hits.len();
        run.insert_hits(id, &hits)?;
    }
    run.write_file(&a.out)?;

    writeln!(out, "queries\t{}", queries.len())?;
    writeln!(out, "lines\t{lines}")?;

    let mut m = RunManifest::new("search")
        .config("lambda", json!(a.lambda))
        .config("k", json!(a.k))
        .config("tag", json!(a.tag))
        .input("index", &a.index)?
        .input("queries", &a.queries)?;
    if let Some(path) = &a.model {
        m = m.input("model", path)?;
    }
    m.finish("run", &a.out)
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let qrels = Qrels::parse_file(&a.qrels)?;
    let config = EvalConfig {
        map_cutoff: a.map_cutoff,
        ..EvalConfig::default()
    };
    let report = evaluate_run(&RunFile::parse_file(&a.run)?, &qrels, config);
    write!(out, "{}", report.render())?;

    if let Some(other) = &a.compare {
        let other = evaluate_run(&RunFile::parse_file(other)?, &qrels, config);
        let comparisons = compare_reports(&report, &other, a.perm_rounds, a.seed)?;
        writeln!(out, "comparison\tqueries\t{}", comparisons[0].queries)?;
        writeln!(out, "metric\trun\tcompare\tp_value")?;
        for c in comparisons {
            writeln!(
                out,
                "{}\t{:.4}\t{:.4}\t{:.4}",
                c.metric.name(&config),
                c.mean_a,
                c.mean_b,
                c.p_value
            )?;
        }
    }
    Ok(())
}
