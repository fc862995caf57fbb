//! Training loop, evaluation and run-directory bookkeeping.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::data::{compute_metrics, lid_frame_accuracy, Corpus, ErrorReport, LidAccuracy, Utterance};
use crate::encoder::{ChunkSpec, Subsampling};
use crate::error::{Error, Result};
use crate::model::{
    canonical_json, save_checkpoint, AdamState, LossReport, LossWeights, Model, ParamCount, StepReport, Trainer,
};
use crate::nn::Ctx;
use crate::routing::{routing_stats, Language, RoutingStats, ENCODER_EXPERTS};

/// Checks that corpus and model agree on vocabulary and feature size.
pub fn check_compatible(config: &RunConfig, corpus: &Corpus) -> Result<()> {
    let v = corpus.vocab().vocab_size();
    let f = corpus.config.language.feat_dim;
    if config.model.vocab_size != v || config.model.feat_dim != f {
        return Err(Error::Config(format!(
            "model expects vocab {} / {} features, corpus has vocab {v} / {f} features",
            config.model.vocab_size, config.model.feat_dim
        )));
    }
    Ok(())
}

/// Language of each encoder output frame. With ×4 subsampling, output `t`
/// covers input frames `4t..4t+7` and takes the language of `4t+3`.
pub fn output_frame_languages(utt: &Utterance, subsampling: Subsampling, frames_out: usize) -> Vec<Language> {
    let truth = utt.frame_languages();
    match subsampling {
        Subsampling::None => truth,
        Subsampling::Conv4 => (0..frames_out).map(|t| truth[(4 * t + 3).min(truth.len() - 1)]).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceDecode {
    pub id: String,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub fused_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub chunk: ChunkSpec,
    pub beam: usize,
    pub errors: ErrorReport,
    /// Encoder routers against the alignment, pooled over router evaluations.
    pub lid: LidAccuracy,
    /// Encoder sMoE layer utilisation.
    pub routing: RoutingStats,
    pub params: ParamCount,
}

/// Attention-rescoring decode of `utts` under `spec`, with metrics.
pub fn evaluate(
    model: &Model,
    utts: &[Utterance],
    spec: ChunkSpec,
    beam: usize,
    weights: &LossWeights,
) -> Result<(EvalReport, Vec<UtteranceDecode>)> {
    let vocab = crate::data::VocabMap::new((model.config.vocab_size - 2) / 2);
    let mut refs = Vec::with_capacity(utts.len());
    let mut hyps = Vec::with_capacity(utts.len());
    let mut decodes = Vec::with_capacity(utts.len());
    let mut lid = LidAccuracy::default();
    let mut routes = Vec::with_capacity(utts.len());
    for u in utts {
        let enc = model.encode(&u.features, spec)?;
        let res = model.rescore(&enc, beam, weights)?;
        let truth = output_frame_languages(u, model.config.subsampling, enc.grid.frames());
        for idx in &enc.router_indices {
            lid.merge(&lid_frame_accuracy(idx, &truth)?);
        }
        routes.push(enc.slot_indices);
        refs.push(u.tokens.clone());
        hyps.push(res.transcript().to_vec());
        decodes.push(UtteranceDecode {
            id: u.id.clone(),
            reference: u.tokens.clone(),
            hypothesis: res.transcript().to_vec(),
            fused_score: res.best().fused_score,
        });
    }
    let report = EvalReport {
        chunk: spec,
        beam,
        errors: compute_metrics(&refs, &hyps, &vocab)?,
        lid,
        routing: routing_stats(&routes, ENCODER_EXPERTS),
        params: model.count_parameters(),
    };
    Ok((report, decodes))
}

/// Mean loss over `utts` without dropout under `spec`.
pub fn mean_loss(model: &Model, utts: &[Utterance], spec: ChunkSpec, weights: &LossWeights) -> Result<LossReport> {
    let mut reports = Vec::with_capacity(utts.len());
    for u in utts {
        let mut ctx = Ctx::eval(&model.params);
        reports.push(model.loss(&mut ctx, &u.features, &u.tokens, &u.langs, spec, weights)?.report);
    }
    Ok(LossReport::mean(&reports))
}

/// Training-set order for `epoch`, a pure function of seed and epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_e90c);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Step(StepReport),
    Epoch {
        epoch: usize,
        step: u64,
        dev: LossReport,
        best: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub best_dev_loss: Option<f64>,
    pub best_epoch: Option<usize>,
}

/// Where `train_loop` writes checkpoints; `None` keeps everything in memory.
#[derive(Clone, Debug)]
pub struct CheckpointDir(pub PathBuf);

/// Runs `config.train.epochs` epochs from the trainer's current step,
/// calling `log` for every entry. Batches are the corpus' training split
/// in a per-epoch seeded order, so a resumed run repeats the uninterrupted one.
pub fn train_loop(
    trainer: &mut Trainer,
    config: &RunConfig,
    corpus: &Corpus,
    checkpoints: Option<&CheckpointDir>,
    log: &mut dyn FnMut(&LogEntry) -> Result<()>,
) -> Result<TrainSummary> {
    let train = &corpus.train;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let bs = config.train.batch_size;
    let per_epoch = train.len().div_ceil(bs) as u64;
    let start_epoch = (trainer.state.step / per_epoch) as usize;
    let skip = (trainer.state.step % per_epoch) as usize;
    let mut summary = TrainSummary {
        steps: trainer.state.step,
        epochs: start_epoch,
        first_loss: None,
        last_loss: None,
        best_dev_loss: None,
        best_epoch: None,
    };
    for epoch in start_epoch..config.train.epochs {
        let order = epoch_order(train.len(), config.seed, epoch);
        let first_batch = if epoch == start_epoch { skip } else { 0 };
        for batch_idx in order.chunks(bs).skip(first_batch) {
            let batch: Vec<_> = batch_idx.iter().map(|&i| train[i].sample()).collect();
            let report = trainer.train_step(&batch)?;
            summary.first_loss.get_or_insert(report.loss.total);
            summary.last_loss = Some(report.loss.total);
            summary.steps = report.step;
            log(&LogEntry::Step(report))?;
        }
        summary.epochs = epoch + 1;
        let dev = if corpus.dev.is_empty() {
            None
        } else {
            Some(mean_loss(&trainer.model, &corpus.dev, ChunkSpec::FULL, &trainer.weights)?)
        };
        let best = match (&dev, summary.best_dev_loss) {
            (Some(d), Some(b)) => d.total < b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if let (true, Some(d)) = (best, &dev) {
            summary.best_dev_loss = Some(d.total);
            summary.best_epoch = Some(epoch + 1);
        }
        if let Some(CheckpointDir(dir)) = checkpoints {
            let every = config.train.checkpoint_every;
            if every > 0 && (epoch + 1) % every == 0 {
                save_checkpoint(&dir.join(format!("epoch-{:03}.ckpt", epoch + 1)), &trainer.model, Some(&trainer.state))?;
            }
            if best {
                save_checkpoint(&dir.join("best.ckpt"), &trainer.model, Some(&trainer.state))?;
            }
        }
        if let Some(dev) = dev {
            log(&LogEntry::Epoch {
                epoch: epoch + 1,
                step: trainer.state.step,
                dev,
                best,
            })?;
        }
    }
    if let Some(CheckpointDir(dir)) = checkpoints {
        save_checkpoint(&dir.join("final.ckpt"), &trainer.model, Some(&trainer.state))?;
    }
    Ok(summary)
}

/// Builds a trainer from the config, optionally resuming `(model, state)`.
pub fn make_trainer(config: &RunConfig, resume: Option<(Model, Option<AdamState>)>) -> Result<Trainer> {
    let (model, state) = match resume {
        Some((m, s)) => {
            if m.config != config.model {
                return Err(Error::Config("checkpoint model config differs from the run config".into()));
            }
            (m, s)
        }
        None => (Model::new(config.model.clone(), config.seed)?, None),
    };
    let trainer = Trainer::new(model, config.optimizer.clone(), config.weights, config.train.chunk, config.seed)?;
    match state {
        Some(s) => trainer.resume(s),
        None => Ok(trainer),
    }
}

/// `<output_dir>/<config-hash>-<unix-seconds>`, created with the canonical config inside.
pub fn create_run_dir(config: &RunConfig) -> Result<PathBuf> {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let dir = config.output_dir.join(format!("{}-{secs}", config.hash()?));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.json"), canonical_json(config)? + "\n")?;
    Ok(dir)
}

/// Appends one JSON object per line.
pub struct MetricsLog {
    file: fs::File,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(MetricsLog {
            file: fs::OpenOptions::new().create(true).append(true).open(path)?,
        })
    }

    pub fn append<T: Serialize>(&mut self, entry: &T) -> Result<()> {
        let mut line = serde_json::to_string(entry)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        Ok(())
    }
}
