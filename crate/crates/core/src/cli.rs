//! Command-line surface. Failures are reported on stderr as one JSON object.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use tensorlab::Tensor;

use crate::config::RunConfig;
use crate::corpus::{compute_keywords, default_stoplist, generate_synthetic, load_stoplist, Corpus, KeywordList, SplitName, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, ReportMeta};
use crate::rerank::{fuse, load_matrix, sar_rerank, save_matrix, Direction, SarConfig};
use crate::trainer::{default_checkpoint, train, Checkpoint};

pub const SEED_ENV: &str = "EBAKER_SEED";

#[derive(Debug, Parser)]
#[command(name = "ebaker", version, about = "Noise-robust cross-modal retrieval training and evaluation")]
pub struct Cli {
    /// Overrides the seed from configs and from EBAKER_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with a corruption manifest.
    Synth(SynthArgs),
    /// Rank domain keywords of one or more corpora.
    Keywords(KeywordsArgs),
    /// Train a model and write checkpoints, banks and logs.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Rerank a similarity matrix by reversed retrieval.
    Rerank(RerankArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct KeywordsArgs {
    /// Corpus directory; repeat to merge several corpora.
    #[arg(long, required = true)]
    pub corpus: Vec<PathBuf>,
    #[arg(long, default_value_t = 512)]
    pub k: usize,
    #[arg(long)]
    pub stoplist: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Keyword file; computed from the training split when absent.
    #[arg(long)]
    pub keywords: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file, or a run directory to use its default weights.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub sar: bool,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Report path; defaults to `eval_<split>[_sar].json` beside the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    /// Global-channel (or only) similarity matrix.
    #[arg(long)]
    pub sim: PathBuf,
    /// Local-channel matrix; when given the two reranks are fused.
    #[arg(long)]
    pub local: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub tau: f64,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 10)]
    pub l: usize,
    #[arg(long, default_value_t = 0.5)]
    pub mu1: f64,
    #[arg(long, default_value_t = 1.25)]
    pub mu2: f64,
    #[arg(long, default_value_t = 0.6)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.4)]
    pub beta: f64,
    #[arg(long)]
    pub raw_fallback: bool,
    /// Treat rows as texts querying images.
    #[arg(long)]
    pub t2i: bool,
    /// Fused matrix path; defaults to `<sim>.sar.ebkm`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Audit path; defaults to `<out>.audit.json`.
    #[arg(long)]
    pub audit: Option<PathBuf>,
}

/// Explicit flag first, then the environment.
pub fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn load_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Executes one parsed command and returns its stdout JSON.
pub fn execute(cli: Cli) -> Result<serde_json::Value> {
    let seed = resolve_seed(cli.seed)?;
    match cli.command {
        Command::Synth(a) => {
            let mut cfg: SynthConfig = load_json(a.config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let corpus = generate_synthetic(&cfg)?;
            corpus.save(&a.out)?;
            let m = corpus.manifest.as_ref();
            Ok(json!({
                "out": a.out,
                "train": corpus.train.len(),
                "val": corpus.val.len(),
                "test": corpus.test.len(),
                "corrupted": m.map_or(0, |m| m.num_corrupted),
                "seed": cfg.seed,
            }))
        }
        Command::Keywords(a) => {
            let stop = match &a.stoplist {
                Some(p) => load_stoplist(p)?,
                None => default_stoplist(),
            };
            let mut corpora = Vec::new();
            for dir in &a.corpus {
                let c = Corpus::load(dir)?;
                let caps = c.train.iter().flat_map(|s| s.captions.iter().cloned()).collect();
                corpora.push((dir.display().to_string(), caps));
            }
            let kw = compute_keywords(&corpora, a.k, &stop)?;
            kw.save(&a.out)?;
            Ok(json!({ "out": a.out, "keywords": kw.len() }))
        }
        Command::Train(a) => {
            let mut cfg: RunConfig = match &a.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let corpus = Corpus::load(&a.corpus)?;
            let kw = a.keywords.as_deref().map(KeywordList::load).transpose()?;
            let out = train(&corpus, kw, &cfg, Some(&a.out))?;
            let last = out.epochs.last();
            Ok(json!({
                "out": a.out,
                "epochs": out.epochs.len(),
                "steps": out.log.len(),
                "config_hash": out.sidecar.config_hash,
                "final_total": last.map(|e| e.mean.total),
                "final_mlm": last.and_then(|e| e.mean_mlm),
            }))
        }
        Command::Eval(a) => {
            let ck_path = if a.checkpoint.is_dir() {
                default_checkpoint(&a.checkpoint)?
            } else {
                a.checkpoint.clone()
            };
            let ck = Checkpoint::load(&ck_path)?;
            let corpus = Corpus::load(&a.corpus)?;
            let split = SplitName::parse(&a.split)?;
            let rc = &ck.sidecar.config;
            let alpha = a.alpha.unwrap_or(rc.alpha);
            let beta = a.beta.unwrap_or(rc.beta);
            let sar = a.sar.then(|| SarConfig {
                alpha,
                beta,
                ..rc.sar.clone()
            });
            let opts = EvalOptions { alpha, beta, sar };
            let meta = ReportMeta {
                split: split.as_str().to_string(),
                config_hash: ck.sidecar.config_hash.clone(),
                checkpoint: format!("{}@{}", ck_path.display(), ck.id),
                seed: seed.unwrap_or(rc.train.seed),
            };
            let report = evaluate(&ck.model, &ck.sidecar.vocab, corpus.split(split), &opts, &meta)?;
            let path = a.out.unwrap_or_else(|| {
                let dir = ck_path.parent().unwrap_or(Path::new("."));
                let sfx = if a.sar { "_sar" } else { "" };
                dir.join(format!("eval_{}{sfx}.json", split.as_str()))
            });
            let value = serde_json::to_value(&report)?;
            fs::write(&path, serde_json::to_string_pretty(&value)? + "\n")?;
            Ok(value)
        }
        Command::Rerank(a) => {
            let cfg = SarConfig {
                tau: a.tau,
                k: a.k,
                l: a.l,
                mu1: a.mu1,
                mu2: a.mu2,
                alpha: a.alpha,
                beta: a.beta,
                raw_fallback: a.raw_fallback,
            };
            let dir = if a.t2i { Direction::T2i } else { Direction::I2t };
            let g = sar_rerank(&load_matrix(&a.sim)?, &cfg, dir)?;
            let mut audit = json!({ "global": g.audit(&cfg) });
            let fused: Tensor = match &a.local {
                Some(p) => {
                    let l = sar_rerank(&load_matrix(p)?, &cfg, dir)?;
                    audit["local"] = serde_json::to_value(l.audit(&cfg))?;
                    fuse(&g, &l, cfg.alpha, cfg.beta, cfg.mu1, cfg.mu2)?
                }
                None => g.scores.clone(),
            };
            let out = a.out.unwrap_or_else(|| with_suffix(&a.sim, ".sar.ebkm"));
            let audit_path = a.audit.unwrap_or_else(|| with_suffix(&out, ".audit.json"));
            save_matrix(&out, &fused)?;
            fs::write(&audit_path, serde_json::to_string_pretty(&audit)? + "\n")?;
            let (q, t) = fused.dims2();
            Ok(json!({ "out": out, "audit": audit_path, "queries": q, "targets": t }))
        }
    }
}

/// Parses `argv`, runs it and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(v) => {
            // A closed stdout (e.g. piped into `head`) is not a failure.
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{}", serde_json::to_string_pretty(&v).unwrap_or_default());
            0
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            1
        }
    }
}
