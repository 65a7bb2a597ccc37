//! `drlab`: command-line driver for the episodic hard-negative training lab.
//!
//! Stages communicate through files, so each subcommand can be rerun on
//! its own: gen-data -> index -> mine -> train -> eval / analyze.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use drlab::corpus::{
    generate_synthetic, load_corpus, load_qrels, load_queries, save_corpus, save_qrels,
    save_queries, Corpus, CorpusFormat, Qrels, QuerySet, SyntheticSpec,
};
use drlab::dense_index::{DenseIndex, IndexMode};
use drlab::diagnostics::{evaluate, write_metrics_csv, write_per_query_csv};
use drlab::encoder::{load_checkpoint, EncoderModel};
use drlab::mining::{
    mine_bm25_negatives, mine_lookahead_negatives, mine_query_negatives, NegativePool, PoolSources,
};
use drlab::sparse::SparseIndex;
use drlab::trainer::{
    analyze, initial_model, load_report, run_experiment, write_analysis, RunConfig, Strategy,
    TrainingData,
};
use drlab::util::{fnv1a, hex64};

const EXIT_CODES: &str = "\
EXIT CODES:
    0  success
    1  other failure (I/O, run directory locked)
    2  usage error (unknown flag, bad value)
    3  missing input (file not found, required index not given)
    4  invalid configuration
    5  invalid or malformed data (parse, format, unknown ids, shape)
    6  numerical failure (non-finite loss or gradient)

Failures print one JSON line to stderr: {\"error\":<kind>,\"exit_code\":<n>,\"message\":<text>}.

FILES:
    corpus      JSONL {\"id\",\"text\",\"group_tag\"?} or TSV id<TAB>text
    queries     TSV query_id<TAB>text
    qrels       TREC: query_id 0 doc_id 1
    run.toml    every training setting (see README), plus an optional
                [data] table with corpus/queries/qrels paths
    pool.jsonl  header line, then {\"query_id\",\"episode\",\"negatives\":[...]}
    *.bin       checkpoints and dense indexes (binary, versioned)
    *.csv       analysis tables, first line `# config_hash=<hex>`";

#[derive(Parser, Debug)]
#[command(name = "drlab", version, about = "Dense retrieval training with episodic hard-negative mining", after_help = EXIT_CODES)]
struct Cli {
    /// Root seed for every random choice (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory: output of `train`, input of `analyze`.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Debug logging and full error chains.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus, queries and qrels.
    GenData(GenDataArgs),
    /// Build a sparse (BM25) or dense index over a corpus.
    Index(IndexArgs),
    /// Mine negatives of one source into a pool file.
    Mine(MineArgs),
    /// Run the episodic training loop.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Write the analysis CSVs of a finished run.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = 50)]
    queries: usize,
    /// Distractor groups per query.
    #[arg(long, default_value_t = 2)]
    groups: usize,
    #[arg(long, default_value_t = 5)]
    docs_per_group: usize,
    #[arg(long, default_value_t = 500)]
    filler: usize,
    #[arg(long, default_value_t = 4000)]
    vocab: usize,
    #[arg(long, default_value_t = 6)]
    aspect_tokens: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Output directory; receives corpus.jsonl, queries.tsv, qrels.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum IndexKind {
    Sparse,
    Dense,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum FormatArg {
    Tsv,
    Jsonl,
}

#[derive(Args, Debug)]
struct CorpusArg {
    #[arg(long)]
    corpus: PathBuf,
    /// Corpus format; guessed from the extension when absent.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

#[derive(Args, Debug)]
struct IndexArgs {
    #[arg(long, value_enum)]
    kind: IndexKind,
    #[command(flatten)]
    corpus: CorpusArg,
    /// Encoder checkpoint for dense indexes; the seeded initial model otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// IVF clusters; exact search when absent.
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long, default_value_t = 8)]
    probe: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum MineSource {
    Bm25,
    QueryAnn,
    Lookahead,
}

#[derive(Args, Debug)]
struct MineArgs {
    #[arg(long, value_enum)]
    strategy: MineSource,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    /// Sparse index file (bm25).
    #[arg(long)]
    sparse_index: Option<PathBuf>,
    /// Dense index file (query-ann, lookahead).
    #[arg(long)]
    dense_index: Option<PathBuf>,
    /// Checkpoint the dense index was built with; the initial model otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Corpus with the positives' text (lookahead).
    #[command(flatten)]
    corpus: OptCorpusArg,
    /// Candidates per query; the configured mining depth when absent.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 1)]
    episode: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct OptCorpusArg {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    #[arg(long)]
    episodes: Option<u32>,
    /// Data paths; override the config's [data] table.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    qrels: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    corpus: CorpusArg,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    /// Checkpoint to evaluate; the seeded initial model otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory for metrics.csv and per_query_mrr.csv; summary to stdout only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Output directory; the run directory when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: drlab::Error| e.to_string())
}

/// Failures raised by the CLI itself rather than the library.
#[derive(Debug)]
enum CliError {
    MissingInput(String),
    Locked(PathBuf),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::MissingInput(m) => write!(f, "missing input: {m}"),
            CliError::Locked(p) => write!(
                f,
                "run directory {} is locked by another process",
                p.display()
            ),
        }
    }
}

impl std::error::Error for CliError {}

fn missing(msg: impl Into<String>) -> anyhow::Error {
    CliError::MissingInput(msg.into()).into()
}

fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::MissingInput(_) => ("missing_input", 3),
                CliError::Locked(_) => ("locked", 1),
            };
        }
        if let Some(e) = cause.downcast_ref::<drlab::Error>() {
            let kind = e.kind();
            let code = match kind {
                "missing_input" => 3,
                "config" => 4,
                "data" | "format" | "invalid_input" => 5,
                "numerical" => 6,
                _ => 1,
            };
            return (kind, code);
        }
    }
    ("other", 1)
}

fn report_failure(kind: &str, code: u8, message: &str) {
    let line = serde_json::json!({ "error": kind, "exit_code": code, "message": message });
    eprintln!("{line}");
}

/// Exclusive ownership of a run directory; released on drop.
struct RunLock {
    path: PathBuf,
    _file: File,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(".drlab.lock");
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|_| CliError::Locked(dir.to_path_buf()))?;
        Ok(Self { path, _file: file })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Default)]
struct DataPaths {
    corpus: Option<PathBuf>,
    queries: Option<PathBuf>,
    qrels: Option<PathBuf>,
}

/// Read a run configuration, splitting off the `[data]` table. Relative
/// data paths resolve against the config file's directory.
fn load_config(path: &Path) -> Result<(RunConfig, DataPaths)> {
    let raw = fs::read_to_string(path).map_err(|e| missing(format!("{}: {e}", path.display())))?;
    let mut table: toml::Table = raw
        .parse()
        .map_err(|e| drlab::Error::Config(format!("{}: {e}", path.display())))?;
    let mut data = DataPaths::default();
    if let Some(d) = table.remove("data") {
        let base = path.parent().unwrap_or(Path::new("."));
        let d = d
            .as_table()
            .ok_or_else(|| drlab::Error::Config("[data] must be a table".into()))?;
        for (key, value) in d {
            let p = value
                .as_str()
                .map(|s| base.join(s))
                .ok_or_else(|| drlab::Error::Config(format!("data.{key} must be a path string")))?;
            match key.as_str() {
                "corpus" => data.corpus = Some(p),
                "queries" => data.queries = Some(p),
                "qrels" => data.qrels = Some(p),
                other => {
                    return Err(drlab::Error::Config(format!("unknown key data.{other}")).into())
                }
            }
        }
    }
    let config =
        RunConfig::from_toml_str(&table.to_string()).with_context(|| path.display().to_string())?;
    Ok((config, data))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(missing(format!("{} does not exist", path.display())))
    }
}

fn read_corpus(path: &Path, format: Option<FormatArg>) -> Result<Corpus> {
    require(path)?;
    let format = match format {
        Some(FormatArg::Tsv) => CorpusFormat::Tsv,
        Some(FormatArg::Jsonl) => CorpusFormat::Jsonl,
        None => CorpusFormat::from_path(path),
    };
    Ok(load_corpus(path, format)?)
}

fn read_queries(path: &Path) -> Result<QuerySet> {
    require(path)?;
    Ok(load_queries(path)?)
}

fn read_qrels(path: &Path) -> Result<Qrels> {
    require(path)?;
    Ok(load_qrels(path)?)
}

/// The checkpoint's model, or the seeded initial model of the config.
fn load_model(checkpoint: Option<&Path>, config: &RunConfig) -> Result<EncoderModel> {
    match checkpoint {
        Some(p) => {
            require(p)?;
            Ok(load_checkpoint(p)?.model)
        }
        None => Ok(initial_model(config)?),
    }
}

struct RunContext {
    config: RunConfig,
    data: DataPaths,
    run_dir: Option<PathBuf>,
}

fn context(cli: &Cli) -> Result<RunContext> {
    let (mut config, data) = match &cli.config {
        Some(p) => load_config(p)?,
        None => (RunConfig::default(), DataPaths::default()),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(RunContext {
        config,
        data,
        run_dir: cli.run_dir.clone(),
    })
}

fn gen_data(args: &GenDataArgs, seed: u64) -> Result<()> {
    let spec = SyntheticSpec {
        n_queries: args.queries,
        groups_per_query: args.groups,
        docs_per_group: args.docs_per_group,
        n_filler_docs: args.filler,
        vocab_size: args.vocab,
        aspect_tokens_per_query: args.aspect_tokens,
        noise_rate: args.noise,
        seed,
    };
    let data = generate_synthetic(&spec)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    save_corpus(
        &data.corpus,
        &args.out.join("corpus.jsonl"),
        CorpusFormat::Jsonl,
    )?;
    save_queries(&data.queries, &args.out.join("queries.tsv"))?;
    save_qrels(&data.qrels, &args.out.join("qrels.txt"))?;
    let spec_json = serde_json::to_string(&spec)?;
    let manifest = serde_json::json!({
        "format": "drlab-synthetic-data",
        "version": 1,
        "config_hash": hex64(fnv1a(spec_json.as_bytes())),
        "spec": spec,
        "n_docs": data.corpus.len(),
        "n_queries": data.queries.len(),
    });
    fs::write(args.out.join("manifest.json"), format!("{manifest:#}\n"))?;
    println!(
        "{}",
        serde_json::json!({ "out": args.out, "docs": data.corpus.len(), "queries": data.queries.len(), "qrels": data.qrels.len() })
    );
    Ok(())
}

fn index(args: &IndexArgs, ctx: &RunContext) -> Result<()> {
    let corpus = read_corpus(&args.corpus.corpus, args.corpus.format)?;
    match args.kind {
        IndexKind::Sparse => {
            let index = SparseIndex::build(&corpus, ctx.config.bm25)?;
            index.save(&args.out)?;
        }
        IndexKind::Dense => {
            let model = load_model(args.checkpoint.as_deref(), &ctx.config)?;
            let mode = match args.clusters {
                Some(n_clusters) => IndexMode::Ivf {
                    n_clusters,
                    n_probe: args.probe,
                },
                None => ctx.config.index,
            };
            let index = DenseIndex::build(&model, &corpus, mode, ctx.config.seed)?;
            index.save(&args.out)?;
        }
    }
    println!(
        "{}",
        serde_json::json!({ "out": args.out, "docs": corpus.len() })
    );
    Ok(())
}

fn mine(args: &MineArgs, ctx: &RunContext) -> Result<()> {
    let depth = args.k.unwrap_or(ctx.config.mining_depth);
    let load_dense = || -> Result<(DenseIndex, EncoderModel)> {
        let path = args
            .dense_index
            .as_deref()
            .ok_or_else(|| missing("--dense-index is required for dense mining"))?;
        require(path)?;
        let index = DenseIndex::load(path)?;
        let model = load_model(args.checkpoint.as_deref(), &ctx.config)?;
        Ok((index, model))
    };
    // Check the source's own inputs before touching query files.
    let lists = match args.strategy {
        MineSource::Bm25 => {
            let path = args
                .sparse_index
                .as_deref()
                .ok_or_else(|| missing("bm25 mining needs a sparse index; build one with `index --kind sparse` and pass --sparse-index"))?;
            require(path)?;
            let sparse = SparseIndex::load(path)?;
            let (queries, qrels) = (read_queries(&args.queries)?, read_qrels(&args.qrels)?);
            mine_bm25_negatives(&sparse, &queries, &qrels, depth)?
        }
        MineSource::QueryAnn => {
            let (index, model) = load_dense()?;
            let (queries, qrels) = (read_queries(&args.queries)?, read_qrels(&args.qrels)?);
            mine_query_negatives(&index, &model, &queries, &qrels, depth)?
        }
        MineSource::Lookahead => {
            let corpus_path = args
                .corpus
                .corpus
                .as_deref()
                .ok_or_else(|| missing("lookahead mining needs --corpus"))?;
            let (index, model) = load_dense()?;
            let corpus = read_corpus(corpus_path, args.corpus.format)?;
            let (queries, qrels) = (read_queries(&args.queries)?, read_qrels(&args.qrels)?);
            mine_lookahead_negatives(&index, &model, &corpus, &queries, &qrels, depth)?
        }
    };
    let sources = match args.strategy {
        MineSource::Bm25 => PoolSources {
            bm25: Some(&lists),
            ..PoolSources::default()
        },
        MineSource::QueryAnn => PoolSources {
            query_ann: Some(&lists),
            ..PoolSources::default()
        },
        MineSource::Lookahead => PoolSources {
            lookahead: Some(&lists),
            ..PoolSources::default()
        },
    };
    let pool = NegativePool::build(
        args.episode,
        sources,
        ctx.config.alpha,
        ctx.config.beta,
        ctx.config.dedup_pool,
    )?;
    pool.save(&args.out, &ctx.config.hash_hex())?;
    println!(
        "{}",
        serde_json::json!({ "out": args.out, "queries": pool.negatives.len(), "records": pool.total_records() })
    );
    Ok(())
}

fn train(args: &TrainArgs, ctx: &RunContext) -> Result<()> {
    let run_dir = ctx
        .run_dir
        .as_deref()
        .ok_or_else(|| missing("train needs --run-dir"))?;
    let mut config = ctx.config.clone();
    if let Some(s) = args.strategy {
        config.strategy = s;
    }
    if let Some(e) = args.episodes {
        config.episodes = e;
    }
    config.validate()?;
    let pick = |flag: &Option<PathBuf>, file: &Option<PathBuf>, name: &str| {
        flag.clone().or_else(|| file.clone()).ok_or_else(|| {
            missing(format!(
                "no {name} path: pass --{name} or set data.{name} in the config"
            ))
        })
    };
    let corpus_path = pick(&args.corpus, &ctx.data.corpus, "corpus")?;
    let queries_path = pick(&args.queries, &ctx.data.queries, "queries")?;
    let qrels_path = pick(&args.qrels, &ctx.data.qrels, "qrels")?;
    let data = TrainingData::new(
        read_corpus(&corpus_path, None)?,
        read_queries(&queries_path)?,
        read_qrels(&qrels_path)?,
    )?;
    let _lock = RunLock::acquire(run_dir)?;
    fs::write(run_dir.join("config.toml"), config.to_toml_string())?;
    let report = run_experiment(&config, &data, run_dir)?;
    let last = report.episodes.last().map(|e| e.snapshot.mrr_at_10);
    println!(
        "{}",
        serde_json::json!({
            "run_dir": run_dir,
            "config_hash": report.config_hash,
            "episodes": report.episodes.len(),
            "initial_mrr@10": report.initial_snapshot.mrr_at_10,
            "final_mrr@10": last,
        })
    );
    Ok(())
}

fn eval(args: &EvalArgs, ctx: &RunContext) -> Result<()> {
    let corpus = read_corpus(&args.corpus.corpus, args.corpus.format)?;
    let queries = read_queries(&args.queries)?;
    let qrels = read_qrels(&args.qrels)?;
    let model = load_model(args.checkpoint.as_deref(), &ctx.config)?;
    let index = DenseIndex::build(&model, &corpus, IndexMode::Exact, ctx.config.seed)?;
    let snap = evaluate(
        &index,
        &model,
        &queries,
        &qrels,
        ctx.config.k_eval,
        &ctx.config.recall_cutoffs,
        0,
    )?;
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        let hash = ctx.config.hash_hex();
        write_metrics_csv(&out.join("metrics.csv"), &hash, std::slice::from_ref(&snap))?;
        write_per_query_csv(
            &out.join("per_query_mrr.csv"),
            &hash,
            std::slice::from_ref(&snap),
        )?;
    }
    let recall: serde_json::Map<String, serde_json::Value> = snap
        .recall
        .iter()
        .map(|(k, r)| (format!("recall@{k}"), serde_json::json!(r)))
        .collect();
    println!(
        "{}",
        serde_json::json!({ "queries": snap.n_queries(), "mrr@10": snap.mrr_at_10, "recall": recall })
    );
    Ok(())
}

fn analyze_run(args: &AnalyzeArgs, ctx: &RunContext) -> Result<()> {
    let run_dir = ctx
        .run_dir
        .as_deref()
        .ok_or_else(|| missing("analyze needs --run-dir"))?;
    let report_path = run_dir.join("report.json");
    require(&report_path)?;
    let _lock = RunLock::acquire(run_dir)?;
    let report = load_report(&report_path)?;
    let analysis = analyze(&report)?;
    let out = args.out.as_deref().unwrap_or(run_dir);
    let written = write_analysis(&analysis, out)?;
    println!(
        "{}",
        serde_json::json!({
            "written": written,
            "mean_forgetting": analysis.mean_forgetting(),
            "swing_rate": analysis.swing_rate(),
        })
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let ctx = context(cli)?;
    match &cli.command {
        Command::GenData(a) => gen_data(a, cli.seed.unwrap_or(SyntheticSpec::default().seed)),
        Command::Index(a) => index(a, &ctx),
        Command::Mine(a) => mine(a, &ctx),
        Command::Train(a) => train(a, &ctx),
        Command::Eval(a) => eval(a, &ctx),
        Command::Analyze(a) => analyze_run(a, &ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.kind().to_string();
            let detail = e.to_string();
            let first = detail
                .lines()
                .next()
                .unwrap_or(&msg)
                .trim_start_matches("error: ");
            report_failure("usage", 2, first);
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Debug
        } else {
            log::LevelFilter::Warn
        })
        .parse_env("DRLAB_LOG")
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (kind, code) = classify(&err);
            let message = if cli.verbose {
                format!("{err:?}")
            } else {
                format!("{err:#}")
            };
            report_failure(kind, code, &message);
            ExitCode::from(code)
        }
    }
}
