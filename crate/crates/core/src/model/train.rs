//! Adam with inverse-square-root warm-up, gradient clipping and per-batch
//! dynamic chunk sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LossReport, LossWeights, Model};
use crate::encoder::{sample_dynamic_chunk, ChunkSpec};
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::numerics::Tensor;
use crate::routing::Language;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            peak_lr: 1e-3,
            warmup_steps: 200,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            grad_clip: 5.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!("peak_lr {} must be positive", self.peak_lr)));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be positive".into()));
        }
        for (n, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{n} = {b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) || self.grad_clip < 0.0 {
            return Err(Error::Config("eps must be positive and grad_clip non-negative".into()));
        }
        Ok(())
    }
}

/// Learning rate for 1-based `step`: linear warm-up to `peak_lr`, then
/// decay with `1/sqrt(step)`.
pub fn lr_at(cfg: &OptimizerConfig, step: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = cfg.warmup_steps as f64;
    cfg.peak_lr * (s / w).min((w / s).sqrt())
}

/// Attention context used during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", deny_unknown_fields)]
pub enum ChunkPolicy {
    /// Full context half the time, otherwise a random chunk, drawn per batch.
    #[default]
    Dynamic,
    Fixed {
        chunk_size: i64,
        num_left_chunks: i64,
    },
}

impl ChunkPolicy {
    pub fn validate(&self) -> Result<()> {
        if let ChunkPolicy::Fixed {
            chunk_size,
            num_left_chunks,
        } = *self
        {
            ChunkSpec::new(chunk_size, num_left_chunks)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    /// Updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Tensor> = model.params.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn matches(&self, model: &Model) -> bool {
        let e = model.params.entries();
        self.m.len() == e.len()
            && self.v.len() == e.len()
            && e.iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| m.shape() == p.value.shape() && v.shape() == p.value.shape())
    }
}

/// One training utterance.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub features: &'a Tensor,
    pub tokens: &'a [usize],
    pub langs: &'a [Language],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub chunk: ChunkSpec,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Batch mean of every loss component.
    pub loss: LossReport,
    /// `routing[slot][expert]`: frames sent to each expert by each encoder sMoE layer.
    pub routing: Vec<Vec<usize>>,
}

#[derive(Debug)]
pub struct Trainer {
    pub model: Model,
    pub opt: OptimizerConfig,
    pub state: AdamState,
    pub weights: LossWeights,
    pub chunk: ChunkPolicy,
    pub seed: u64,
}

impl Trainer {
    pub fn new(model: Model, opt: OptimizerConfig, weights: LossWeights, chunk: ChunkPolicy, seed: u64) -> Result<Self> {
        opt.validate()?;
        weights.validate()?;
        chunk.validate()?;
        let state = AdamState::new(&model);
        Ok(Trainer {
            model,
            opt,
            state,
            weights,
            chunk,
            seed,
        })
    }

    /// Continues from a saved optimizer state.
    pub fn resume(mut self, state: AdamState) -> Result<Self> {
        if !state.matches(&self.model) {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        self.state = state;
        Ok(self)
    }

    /// Randomness for update `step`, independent of how many steps ran in
    /// this process.
    fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step);
        rng
    }

    /// One Adam update on the batch-mean loss.
    pub fn train_step(&mut self, batch: &[Sample<'_>]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::invalid("train_step", "empty batch"));
        }
        let step = self.state.step + 1;
        let mut rng = self.step_rng(step);
        let spec = match self.chunk {
            ChunkPolicy::Dynamic => sample_dynamic_chunk(&mut rng),
            ChunkPolicy::Fixed {
                chunk_size,
                num_left_chunks,
            } => ChunkSpec::new(chunk_size, num_left_chunks)?,
        };

        let n_params = self.model.params.len();
        let mut grads: Vec<Tensor> = self
            .model
            .params
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.shape()))
            .collect();
        let mut reports = Vec::with_capacity(batch.len());
        let mut routing = vec![vec![0usize; crate::routing::ENCODER_EXPERTS]; 2 * self.model.config.h];
        for sample in batch {
            let mut ctx = Ctx::train(&self.model.params, Some(rng.random()));
            let out = self
                .model
                .loss(&mut ctx, sample.features, sample.tokens, sample.langs, spec, &self.weights)?;
            if !out.report.is_finite() {
                return Err(non_finite(step, spec, &out.report, "loss"));
            }
            ctx.g.backward(out.total)?;
            for (acc, g) in grads.iter_mut().zip(ctx.param_grads()) {
                if let Some(g) = g {
                    acc.add_assign(&g);
                }
            }
            for (slot, idx) in out.slot_indices.iter().enumerate() {
                for &e in idx {
                    routing[slot][e] += 1;
                }
            }
            reports.push(out.report);
        }
        debug_assert_eq!(grads.len(), n_params);
        let scale = 1.0 / batch.len() as f64;
        let mut sq = 0.0;
        for g in &mut grads {
            for v in g.data_mut() {
                *v *= scale;
                sq += *v * *v;
            }
        }
        let grad_norm = sq.sqrt();
        let loss = LossReport::mean(&reports);
        if !grad_norm.is_finite() {
            return Err(non_finite(step, spec, &loss, "gradient"));
        }
        let clip = if self.opt.grad_clip > 0.0 && grad_norm > self.opt.grad_clip {
            self.opt.grad_clip / grad_norm
        } else {
            1.0
        };

        let lr = lr_at(&self.opt, step);
        let (b1, b2) = (self.opt.beta1, self.opt.beta2);
        let c1 = 1.0 - b1.powi(step as i32);
        let c2 = 1.0 - b2.powi(step as i32);
        for (i, id) in self.model.params.ids().enumerate() {
            let g = grads[i].data();
            let m = self.state.m[i].data_mut();
            let v = self.state.v[i].data_mut();
            let p = self.model.params.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g[j] * clip;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + self.opt.eps);
            }
        }
        self.state.step = step;
        Ok(StepReport {
            step,
            lr,
            chunk: spec,
            grad_norm,
            loss,
            routing,
        })
    }
}

fn non_finite(step: u64, spec: ChunkSpec, report: &LossReport, what: &str) -> Error {
    let dump = serde_json::json!({
        "step": step,
        "chunk": spec,
        "non_finite": what,
        "loss": report,
    });
    Error::NonFinite(dump.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_schedule_shape() {
        let cfg = OptimizerConfig::default();
        assert!((lr_at(&cfg, 100) - 5e-4).abs() < 1e-15);
        assert!((lr_at(&cfg, 200) - 1e-3).abs() < 1e-15);
        assert!((lr_at(&cfg, 800) - 5e-4).abs() < 1e-15);
        assert!(lr_at(&cfg, 1) > 0.0);
    }

    #[test]
    fn chunk_policy_serde() {
        let p: ChunkPolicy = serde_json::from_str(r#"{"mode":"fixed","chunk_size":16,"num_left_chunks":8}"#).unwrap();
        assert_eq!(
            p,
            ChunkPolicy::Fixed {
                chunk_size: 16,
                num_left_chunks: 8
            }
        );
        let d: ChunkPolicy = serde_json::from_str(r#"{"mode":"dynamic"}"#).unwrap();
        assert_eq!(d, ChunkPolicy::Dynamic);
        let bad = ChunkPolicy::Fixed {
            chunk_size: 0,
            num_left_chunks: 1,
        };
        assert!(bad.validate().is_err());
    }
}
