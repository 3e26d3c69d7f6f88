//! Command-line front end.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage or input error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::KvConfig;
use crate::data::{self, CandidateSet, QueryStore};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_run, DEFAULT_CUTOFF};
use crate::model::{rerank, ModelConfig, ModelParams};
use crate::numeric::Tensor;
use crate::retrieval::{retrieve_topk, Bm25Params, InvertedIndex, DEFAULT_K};
use crate::rng::{Purpose, SeedStream};
use crate::synthetic::{self, SyntheticConfig};
use crate::tokenizer::{pack_ids, DocumentText};
use crate::training::{self, TrainInputs, TrainingConfig, MODEL_CONFIG_FILE, VOCAB_FILE};

#[derive(Debug, Parser)]
#[command(name = "longrank", version, about = "BM25 retrieval and long-sequence cross-encoder re-ranking")]
pub struct Cli {
    /// Seed for every random choice; overrides any seed in config files.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a BM25 inverted index from a document file.
    Index {
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// title_body, body or url_title_body
        #[arg(long, default_value = "title_body", value_parser = parse_field)]
        field: DocumentText,
    },
    /// Write the top-k BM25 documents per query as a TREC run.
    Retrieve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = Bm25Params::default().k1)]
        k1: f64,
        #[arg(long, default_value_t = Bm25Params::default().b)]
        b: f64,
        #[arg(long, default_value = "bm25")]
        run_tag: String,
    },
    /// Fine-tune the re-ranker on candidates with relevance judgments.
    Train {
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        train_config: Option<PathBuf>,
        /// Training override `key=value`; repeatable.
        #[arg(long = "train-set", value_name = "KEY=VALUE")]
        train_set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every candidate with a trained checkpoint and write the re-ranked run.
    Rerank {
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        /// Checkpoint file; `model.cfg` and `vocab.txt` are read from its directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "longrank")]
        run_tag: String,
    },
    /// Print MRR@cutoff of a run against relevance judgments.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CUTOFF)]
        cutoff: usize,
        #[arg(long)]
        per_query: bool,
    },
    /// Compare model gradients with finite differences on a random sequence.
    Gradcheck {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 1e-3)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Packed sequence length, including the three special tokens.
        #[arg(long, default_value_t = 32)]
        seq_len: usize,
        #[arg(long, default_value_t = 4)]
        query_len: usize,
    },
    /// Generate a synthetic corpus with planted relevance.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Model override `key=value`; repeatable.
    #[arg(long = "model-set", value_name = "KEY=VALUE")]
    pub model_set: Vec<String>,
}

fn parse_field(s: &str) -> std::result::Result<DocumentText, String> {
    match s {
        "title_body" => Ok(DocumentText::TitleBody),
        "body" => Ok(DocumentText::Body),
        "url_title_body" => Ok(DocumentText::UrlTitleBody),
        _ => Err(format!("unknown field `{s}`")),
    }
}

/// Default, then file, then `key=value` flags.
fn layered(file: Option<&Path>, sets: &[String]) -> Result<KvConfig> {
    let mut kv = match file {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::new(),
    };
    for s in sets {
        kv.set_pair(s)?;
    }
    Ok(kv)
}

fn model_config(args: &ModelArgs, base: ModelConfig) -> Result<ModelConfig> {
    base.with_overrides(&layered(args.model_config.as_deref(), &args.model_set)?)
}

fn require_files(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.is_file() {
            return Err(Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
            ));
        }
    }
    Ok(())
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

/// Candidate sets restricted to the queries in `queries`.
fn restrict(candidates: BTreeMap<String, CandidateSet>, queries: &QueryStore) -> Result<BTreeMap<String, CandidateSet>> {
    let total = candidates.len();
    let kept: BTreeMap<_, _> = candidates
        .into_iter()
        .filter(|(q, _)| queries.get(q).is_some())
        .collect();
    if total > 0 && kept.is_empty() {
        return Err(Error::Constraint("no candidate query appears in the query file".into()));
    }
    if kept.len() < total {
        log::info!("using {} of {total} candidate queries present in the query file", kept.len());
    }
    Ok(kept)
}

fn cmd_index(docs: &Path, out: &Path, field: DocumentText) -> Result<()> {
    require_files(&[docs])?;
    let store = data::load_documents(docs)?;
    let index = InvertedIndex::build(&store, field)?;
    index.save(out)?;
    println!("documents\t{}", index.doc_count());
    println!("avg_doc_length\t{:.6}", index.avg_doc_length());
    Ok(())
}

fn cmd_retrieve(index: &Path, queries: &Path, k: usize, out: &Path, params: Bm25Params, tag: &str) -> Result<()> {
    require_files(&[queries])?;
    let index = InvertedIndex::load(index)?;
    let queries = data::load_queries(queries)?;
    let mut run = Vec::new();
    for q in queries.iter() {
        run.extend(retrieve_topk(&q.query_id, &q.text, &index, &params, k).to_run_entries(tag));
    }
    create_parent(out)?;
    data::write_run(&run, out)?;
    println!("queries\t{}", queries.len());
    println!("lines\t{}", run.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    docs: &Path,
    queries: &Path,
    qrels: &Path,
    candidates: &Path,
    model: &ModelArgs,
    train_config: Option<&Path>,
    train_set: &[String],
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let mut inputs = vec![docs, queries, qrels, candidates];
    inputs.extend(model.model_config.as_deref());
    inputs.extend(train_config);
    require_files(&inputs)?;
    let model_cfg = model_config(model, ModelConfig::default())?;
    let mut kv = layered(train_config, train_set)?;
    if let Some(s) = seed {
        kv.set("seed", s.to_string());
    }
    let train_cfg = TrainingConfig::default().with_overrides(&kv)?;

    let docs = data::load_documents(docs)?;
    let queries = data::load_queries(queries)?;
    let qrels = data::load_qrels(qrels)?;
    let candidates = restrict(data::load_candidates(candidates)?, &queries)?;
    let inputs = TrainInputs {
        docs: &docs,
        queries: &queries,
        qrels: &qrels,
        candidates: &candidates,
    };
    let outcome = training::train(&inputs, &model_cfg, &train_cfg, Some(out))?;
    println!("steps\t{}", outcome.reports.len());
    if let Some(loss) = outcome.final_loss() {
        println!("final_loss\t{loss:.6}");
    }
    println!("checkpoint\t{}", out.join(training::FINAL_CHECKPOINT).display());
    Ok(())
}

fn cmd_rerank(docs: &Path, queries: &Path, candidates: &Path, checkpoint: &Path, out: &Path, tag: &str) -> Result<()> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let cfg_path = dir.join(MODEL_CONFIG_FILE);
    let vocab_path = dir.join(VOCAB_FILE);
    require_files(&[docs, queries, candidates, checkpoint, &cfg_path, &vocab_path])?;
    let (vocab, params) = training::load_trained(checkpoint)?;
    let docs = data::load_documents(docs)?;
    let queries = data::load_queries(queries)?;
    let candidates = restrict(data::load_candidates(candidates)?, &queries)?;
    let mut run = Vec::new();
    for (qid, set) in &candidates {
        let query = queries.get(qid).expect("restricted to known queries");
        run.extend(rerank(query, set, &docs, &vocab, &params, tag)?);
    }
    create_parent(out)?;
    data::write_run(&run, out)?;
    println!("queries\t{}", candidates.len());
    println!("lines\t{}", run.len());
    Ok(())
}

fn cmd_eval(run: &Path, qrels: &Path, cutoff: usize, per_query: bool) -> Result<()> {
    require_files(&[run, qrels])?;
    let entries = data::load_run(run)?;
    let qrels = data::load_qrels(qrels)?;
    let report = evaluate_run(&entries, &qrels, cutoff)?;
    print!("{}", report.render(per_query));
    if report.num_queries_without_judgments > 0 {
        log::warn!(
            "{} run queries have no judgments and are excluded",
            report.num_queries_without_judgments
        );
    }
    Ok(())
}

/// Returns whether the check passed.
fn cmd_gradcheck(model: &ModelArgs, seed: u64, epsilon: f64, tolerance: f64, seq_len: usize, query_len: usize) -> Result<bool> {
    if let Some(p) = model.model_config.as_deref() {
        require_files(&[p])?;
    }
    let config = model_config(model, ModelConfig::tiny(32))?;
    if seq_len > config.max_len || seq_len < query_len + 4 {
        return Err(Error::Config(format!(
            "seq_len must lie in {}..={}",
            query_len + 4,
            config.max_len
        )));
    }
    let seeds = SeedStream::new(seed);
    let params = ModelParams::init(&config, &mut seeds.derive(Purpose::Init, 0))?;
    let mut rng = seeds.derive(Purpose::Test, 0);
    let ids = Tensor::uniform(&[seq_len - 3], 4.0, config.vocab_size as f64, &mut rng);
    let ids: Vec<u32> = ids.data().iter().map(|&x| x as u32).collect();
    let seq = pack_ids(&ids[..query_len], &ids[query_len..], config.max_len, config.global_attention)?;
    let report = training::model_gradient_check(&params, &[(seq, 1)], epsilon, tolerance)?;
    print!("{}", report.render());
    Ok(report.passed())
}

fn cmd_synth(out: &Path, seed: u64) -> Result<()> {
    let corpus = synthetic::generate(&SyntheticConfig::default(), seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    data::write_documents(&corpus.docs, out.join("docs.tsv"))?;
    data::write_queries(&corpus.queries, out.join("queries.tsv"))?;
    data::write_queries(&corpus.query_subset(&corpus.train_queries), out.join("train_queries.tsv"))?;
    data::write_queries(&corpus.query_subset(&corpus.held_out_queries), out.join("heldout_queries.tsv"))?;
    data::write_qrels(&corpus.qrels, out.join("qrels.txt"))?;
    println!("documents\t{}", corpus.docs.len());
    println!("queries\t{}", corpus.queries.len());
    println!("held_out\t{}", corpus.held_out_queries.len());
    Ok(())
}

/// Runs a parsed command; `Ok(false)` means the command ran but its check failed.
pub fn execute(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Index { docs, out, field } => cmd_index(docs, out, *field).map(|_| true),
        Command::Retrieve {
            index,
            queries,
            k,
            out,
            k1,
            b,
            run_tag,
        } => cmd_retrieve(index, queries, *k, out, Bm25Params::new(*k1, *b)?, run_tag).map(|_| true),
        Command::Train {
            docs,
            queries,
            qrels,
            candidates,
            model,
            train_config,
            train_set,
            out,
        } => cmd_train(
            docs,
            queries,
            qrels,
            candidates,
            model,
            train_config.as_deref(),
            train_set,
            cli.seed,
            out,
        )
        .map(|_| true),
        Command::Rerank {
            docs,
            queries,
            candidates,
            checkpoint,
            out,
            run_tag,
        } => cmd_rerank(docs, queries, candidates, checkpoint, out, run_tag).map(|_| true),
        Command::Eval {
            run,
            qrels,
            cutoff,
            per_query,
        } => cmd_eval(run, qrels, *cutoff, *per_query).map(|_| true),
        Command::Gradcheck {
            model,
            epsilon,
            tolerance,
            seq_len,
            query_len,
        } => cmd_gradcheck(model, cli.seed.unwrap_or(0), *epsilon, *tolerance, *seq_len, *query_len),
        Command::Synth { out } => cmd_synth(out, cli.seed.unwrap_or(0)).map(|_| true),
    }
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}
