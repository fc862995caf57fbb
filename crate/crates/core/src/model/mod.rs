//! SC-MoE assembly: switch-conformer encoder, CTC head and a pair of
//! (switch-)transformer decoders, plus the joint loss, training, decoding
//! and checkpoint plumbing.

mod checkpoint;
mod decode;
mod loss;
mod stream;
mod train;

pub use checkpoint::{
    average_checkpoints, canonical_json, init_from_baseline, load_checkpoint, read_checkpoint, save_checkpoint,
    write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use decode::{fuse_scores, DecodeResult, Encoded, ScoredHypothesis};
pub use loss::{
    asr_loss_value, lid_loss_value, total_loss_value, LossOutput, LossReport, LossWeights,
    ASR_LABEL_SMOOTHING, LID_LABEL_SMOOTHING,
};
pub use stream::{Partial, StreamOutcome, StreamingSession};
pub use train::{lr_at, AdamState, ChunkPolicy, OptimizerConfig, Sample, StepReport, Trainer};

use serde::{Deserialize, Serialize};

use crate::decoder::{BiDecoder, DecoderDims};
use crate::encoder::{Encoder, EncoderDims, Subsampling};
use crate::error::{Error, Result};
use crate::losses::BLANK;
use crate::nn::{fresh_rng, Init, Linear, ParamRole, ParamStore};
use crate::routing::{RouterSharing, DECODER_EXPERTS, ENCODER_EXPERTS};

/// Architecture of one model. `m`/`h` count standard and switch encoder
/// blocks, `k`/`g` standard and switch decoder layers per direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feat_dim: usize,
    /// Output vocabulary including blank (0) and `<sos/eos>` (last id).
    pub vocab_size: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub m: usize,
    pub h: usize,
    pub k: usize,
    pub g: usize,
    pub router_sharing: RouterSharing,
    pub subsampling: Subsampling,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feat_dim: 32,
            vocab_size: 22,
            d_model: 64,
            ffn_dim: 128,
            heads: 4,
            conv_kernel: 7,
            m: 2,
            h: 2,
            k: 1,
            g: 1,
            router_sharing: RouterSharing::R3,
            subsampling: Subsampling::None,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.feat_dim == 0 || self.d_model == 0 || self.ffn_dim == 0 {
            return bad("feat_dim, d_model and ffn_dim must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.conv_kernel == 0 {
            return bad("conv_kernel must be positive".into());
        }
        if self.vocab_size < 3 {
            return bad(format!("vocab_size {} leaves no room for tokens", self.vocab_size));
        }
        if self.m + self.h == 0 {
            return bad("encoder needs at least one block".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn sos_eos(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn blank(&self) -> usize {
        BLANK
    }

    pub fn is_moe(&self) -> bool {
        self.h > 0 || self.g > 0
    }

    /// Dense model with the same depth: every switch layer becomes a
    /// standard one.
    pub fn dense_baseline(&self) -> ModelConfig {
        ModelConfig {
            m: self.m + self.h,
            h: 0,
            k: self.k + self.g,
            g: 0,
            ..self.clone()
        }
    }

    pub fn encoder_dims(&self) -> EncoderDims {
        EncoderDims {
            feat_dim: self.feat_dim,
            d_model: self.d_model,
            ffn_dim: self.ffn_dim,
            heads: self.heads,
            conv_kernel: self.conv_kernel,
            standard_layers: self.m,
            switch_layers: self.h,
            dropout: self.dropout,
        }
    }

    pub fn decoder_dims(&self) -> DecoderDims {
        DecoderDims {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            ffn_dim: self.ffn_dim,
            heads: self.heads,
            standard_layers: self.k,
            switch_layers: self.g,
            dropout: self.dropout,
        }
    }
}

/// Total and per-frame activated parameter counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    /// Parameters used for one frame under top-1 routing.
    pub activated: usize,
    pub routers: usize,
    /// Every expert of every MoE slot.
    pub experts_total: usize,
    /// One expert per MoE slot.
    pub experts_activated: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub ctc_head: Linear,
    pub decoder: BiDecoder,
}

impl Model {
    /// Fresh model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = fresh_rng(seed);
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
        };
        let encoder = Encoder::new(&mut init, config.encoder_dims(), config.subsampling, config.router_sharing)?;
        let ctc_head = Linear::new(&mut init, "ctc_head", config.d_model, config.vocab_size, ParamRole::Dense);
        let decoder = BiDecoder::new(&mut init, config.decoder_dims(), 2 * config.h)?;
        Ok(Model {
            config,
            params,
            encoder,
            ctc_head,
            decoder,
        })
    }

    pub fn count_parameters(&self) -> ParamCount {
        let mut count = ParamCount {
            total: 0,
            activated: 0,
            routers: 0,
            experts_total: 0,
            experts_activated: 0,
        };
        for e in self.params.entries() {
            let n = e.value.len();
            count.total += n;
            match e.role {
                ParamRole::Dense => count.activated += n,
                ParamRole::Router => {
                    count.activated += n;
                    count.routers += n;
                }
                ParamRole::Expert { expert, .. } => {
                    count.experts_total += n;
                    // Experts within a slot share their shape, so one stands for any.
                    if expert == 0 {
                        count.experts_activated += n;
                        count.activated += n;
                    }
                }
            }
        }
        count
    }

    /// Expert count of every MoE slot, encoder slots first.
    pub fn slot_experts(&self) -> Vec<usize> {
        let mut v = vec![ENCODER_EXPERTS; 2 * self.config.h];
        v.extend(std::iter::repeat_n(DECODER_EXPERTS, 2 * self.config.g));
        v
    }

    /// Replaces parameter values by name, checking shapes.
    pub fn load_values<'a>(&mut self, values: impl IntoIterator<Item = (&'a str, &'a crate::numerics::Tensor)>) -> Result<()> {
        for (name, value) in values {
            let id = self
                .params
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            let slot = self.params.get_mut(id);
            if slot.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} does not match {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelConfig {
        ModelConfig {
            feat_dim: 3,
            vocab_size: 6,
            d_model: 4,
            ffn_dim: 8,
            heads: 2,
            conv_kernel: 3,
            m: 1,
            h: 1,
            k: 1,
            g: 0,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn closed_form_expert_counts_for_one_block() {
        let model = Model::new(toy(), 0).unwrap();
        let c = model.count_parameters();
        let ffn = 4 * 8 + 8 + 8 * 4 + 4;
        assert_eq!(ffn, 76);
        assert_eq!(c.experts_total, 2 * 3 * ffn);
        assert_eq!(c.routers, 4 * 3 + 3);
        assert_eq!(c.experts_activated + c.routers, 167);
    }

    #[test]
    fn baseline_has_no_sparsity() {
        let base = Model::new(toy().dense_baseline(), 0).unwrap();
        let c = base.count_parameters();
        assert_eq!(c.total, c.activated);
        assert_eq!(c.routers, 0);
    }

    #[test]
    fn activated_matches_baseline_plus_routers() {
        for sharing in [RouterSharing::R1, RouterSharing::R2, RouterSharing::R3] {
            let cfg = ModelConfig {
                h: 2,
                g: 1,
                router_sharing: sharing,
                ..toy()
            };
            let moe = Model::new(cfg.clone(), 1).unwrap().count_parameters();
            let base = Model::new(cfg.dense_baseline(), 1).unwrap().count_parameters();
            assert_eq!(moe.activated, base.total + moe.routers, "{sharing:?}");
        }
    }

    #[test]
    fn validation_rejects_bad_heads() {
        let cfg = ModelConfig { heads: 3, ..toy() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
