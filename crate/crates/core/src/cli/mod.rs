//! Command-line surface: `gen-data`, `train`, `eval`, `decode`, `stream`
//! and `inspect-routing`.
//!
//! Exit codes: 0 success, 1 I/O or checkpoint failure, 2 configuration
//! error, 3 data error, 4 numeric failure.

mod config;
mod run;

pub use config::{apply_override, DataConfig, DecodeConfig, RunConfig, TrainConfig};
pub use run::{
    check_compatible, create_run_dir, epoch_order, evaluate, make_trainer, mean_loss, output_frame_languages,
    train_loop, CheckpointDir, EvalReport, LogEntry, MetricsLog, TrainSummary, UtteranceDecode,
};

use std::ffi::OsString;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::data::{generate_corpus, read_corpus, switch_rate, write_corpus, Corpus, Split};
use crate::encoder::ChunkSpec;
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, Model, StreamingSession};
use crate::routing::{routing_stats, ENCODER_EXPERTS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Process exit code for `err`.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Json(_) => EXIT_CONFIG,
        Error::Data(_) | Error::UnknownUtterance(_) | Error::UnmappedToken(_) | Error::InfeasibleCtc { .. } => EXIT_DATA,
        Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_FAILURE,
    }
}

#[derive(Parser, Debug)]
#[command(name = "scmoe", version, about = "Streaming switch-conformer MoE recognizer on synthetic code-switching data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. `--set model.h=1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct ChunkArgs {
    /// Chunk size in encoder frames (-1: full context).
    #[arg(long, allow_hyphen_values = true)]
    pub chunk: Option<i64>,
    /// Visible left chunks (-1: all).
    #[arg(long, allow_hyphen_values = true)]
    pub left_chunks: Option<i64>,
}

impl ChunkArgs {
    fn spec(&self, default: ChunkSpec) -> Result<ChunkSpec> {
        match (self.chunk, self.left_chunks) {
            (None, None) => Ok(default),
            (c, l) => ChunkSpec::new(c.unwrap_or(default.chunk_size), l.unwrap_or(default.num_left_chunks)),
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory (default: data.corpus_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; resumes when --checkpoint is given.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Run directory (default: <output_dir>/<hash>-<time>).
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Decode a split and report error rates, LID accuracy and routing.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        chunk: ChunkArgs,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Decode utterances and print n-best lists.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        chunk: ChunkArgs,
        #[arg(long, default_value = "test")]
        split: String,
        /// Only this utterance.
        #[arg(long)]
        utt: Option<String>,
    },
    /// Replay one utterance chunk by chunk (default chunk spec [16, 8]).
    Stream {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        chunk: ChunkArgs,
        #[arg(long)]
        utt: String,
    },
    /// Expert utilisation and cross-layer agreement of the encoder routers.
    InspectRouting {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        chunk: ChunkArgs,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        _ => Err(Error::Config(format!("unknown split {s:?}"))),
    }
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let corpus = read_corpus(&cfg.data.corpus_dir)?;
    check_compatible(cfg, &corpus)?;
    Ok(corpus)
}

fn load_model(path: &std::path::Path, cfg: &RunConfig) -> Result<Model> {
    let (model, _) = load_checkpoint(path)?;
    if model.config != cfg.model {
        return Err(Error::Config(format!("{} was trained with a different model config", path.display())));
    }
    Ok(model)
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
            let dir = out.unwrap_or_else(|| cfg.data.corpus_dir.clone());
            let corpus = generate_corpus(&cfg.data.generate)?;
            let manifest = write_corpus(&corpus, &dir)?;
            print_json(&json!({
                "dir": dir,
                "manifest": manifest,
                "switch_rate_all": switch_rate(&[corpus.train.as_slice(), &corpus.dev, &corpus.test].concat()),
            }))
        }
        Command::Train {
            common,
            checkpoint,
            run_dir,
        } => {
            let cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
            let corpus = load_corpus(&cfg)?;
            let resume = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let mut trainer = make_trainer(&cfg, resume)?;
            let dir = match run_dir {
                Some(d) => {
                    std::fs::create_dir_all(&d)?;
                    std::fs::write(d.join("config.json"), crate::model::canonical_json(&cfg)? + "\n")?;
                    d
                }
                None => create_run_dir(&cfg)?,
            };
            let mut log = MetricsLog::create(&dir.join("metrics.jsonl"))?;
            let summary = train_loop(&mut trainer, &cfg, &corpus, Some(&CheckpointDir(dir.clone())), &mut |e| {
                if let LogEntry::Epoch { epoch, dev, .. } = e {
                    eprintln!("epoch {epoch}: dev loss {:.4}", dev.total);
                }
                log.append(e)
            })?;
            print_json(&json!({ "run_dir": dir, "summary": summary }))
        }
        Command::Eval {
            common,
            checkpoint,
            chunk,
            split,
        } => {
            let cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
            let corpus = load_corpus(&cfg)?;
            let model = load_model(&checkpoint, &cfg)?;
            let spec = chunk.spec(cfg.decode.spec()?)?;
            let (report, _) = evaluate(&model, corpus.split(parse_split(&split)?), spec, cfg.decode.beam, &cfg.decode.weights)?;
            print_json(&report)
        }
        Command::Decode {
            common,
            checkpoint,
            chunk,
            split,
            utt,
        } => {
            let cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
            let corpus = load_corpus(&cfg)?;
            let model = load_model(&checkpoint, &cfg)?;
            let spec = chunk.spec(cfg.decode.spec()?)?;
            let utts: Vec<_> = match &utt {
                Some(id) => vec![corpus.find(id).ok_or_else(|| Error::UnknownUtterance(id.clone()))?],
                None => corpus.split(parse_split(&split)?).iter().collect(),
            };
            let mut out = Vec::with_capacity(utts.len());
            for u in utts {
                let res = model.attention_rescoring_decode(&u.features, spec, cfg.decode.beam, &cfg.decode.weights)?;
                out.push(json!({ "id": u.id, "reference": u.tokens, "result": res }));
            }
            print_json(&out)
        }
        Command::Stream {
            common,
            checkpoint,
            chunk,
            utt,
        } => {
            let cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
            let corpus = load_corpus(&cfg)?;
            let model = Arc::new(load_model(&checkpoint, &cfg)?);
            let spec = chunk.spec(ChunkSpec::STREAMING)?;
            let u = corpus.find(&utt).ok_or_else(|| Error::UnknownUtterance(utt.clone()))?;
            let mut session = StreamingSession::new(model, spec, cfg.decode.beam, cfg.decode.weights)?;
            for t in 0..u.frames() {
                for p in session.push(&u.features.slice_rows(t, t + 1))? {
                    println!("{}", serde_json::to_string(&p)?);
                }
            }
            let printed = session.partials().len();
            let outcome = session.finish()?;
            for p in &outcome.partials[printed..] {
                println!("{}", serde_json::to_string(p)?);
            }
            println!(
                "{}",
                json!({ "final": outcome.result.transcript(), "fused_score": outcome.result.best().fused_score, "reference": u.tokens })
            );
            Ok(())
        }
        Command::InspectRouting {
            common,
            checkpoint,
            chunk,
            split,
        } => {
            let cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
            let corpus = load_corpus(&cfg)?;
            let model = load_model(&checkpoint, &cfg)?;
            let spec = chunk.spec(cfg.decode.spec()?)?;
            let mut slots = Vec::new();
            let mut routers = Vec::new();
            let mut lid = crate::data::LidAccuracy::default();
            for u in corpus.split(parse_split(&split)?) {
                let enc = model.encode(&u.features, spec)?;
                let truth = output_frame_languages(u, model.config.subsampling, enc.grid.frames());
                for idx in &enc.router_indices {
                    lid.merge(&crate::data::lid_frame_accuracy(idx, &truth)?);
                }
                slots.push(enc.slot_indices);
                routers.push(enc.router_indices);
            }
            print_json(&json!({
                "chunk": spec,
                "sharing": model.config.router_sharing,
                "params": model.count_parameters(),
                "slots": routing_stats(&slots, ENCODER_EXPERTS),
                "routers": routing_stats(&routers, ENCODER_EXPERTS),
                "lid": lid,
            }))
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
