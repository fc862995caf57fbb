//! Two-pass decoding: CTC prefix beam search proposes an n-best list, the
//! L2R and R2L decoders rescore it.

use serde::{Deserialize, Serialize};

use super::{LossWeights, Model};
use crate::decoder::{teacher_forcing_pair, Direction};
use crate::encoder::ChunkSpec;
use crate::error::{Error, Result};
use crate::losses::{ctc_greedy_decode, ctc_neg_log_likelihood, ctc_prefix_beam_search, PosteriorGrid};
use crate::nn::Ctx;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredHypothesis {
    pub tokens: Vec<usize>,
    pub ctc_score: f64,
    pub l2r_score: f64,
    pub r2l_score: f64,
    pub fused_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    /// First-pass order (best CTC score first).
    pub nbest: Vec<ScoredHypothesis>,
    /// Index of the highest fused score; earlier entries win ties.
    pub chosen: usize,
}

impl DecodeResult {
    pub fn best(&self) -> &ScoredHypothesis {
        &self.nbest[self.chosen]
    }

    pub fn transcript(&self) -> &[usize] {
        &self.best().tokens
    }
}

/// `λ·ctc + (1−λ)·[(1−α)·l2r + α·r2l]` over log-scores.
pub fn fuse_scores(w: &LossWeights, ctc: f64, l2r: f64, r2l: f64) -> f64 {
    super::asr_loss_value(w, ctc, l2r, r2l)
}

/// Encoder-side results of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    /// CTC log posteriors `[T'×V]`.
    pub grid: PosteriorGrid,
    /// Encoder output `[T'×D]`, the decoders' memory.
    pub memory: Tensor,
    /// Expert choice per encoder sMoE layer.
    pub slot_indices: Vec<Vec<usize>>,
    /// Expert choice per router evaluation.
    pub router_indices: Vec<Vec<usize>>,
}

impl Model {
    /// Encoder forward and CTC posteriors under `spec`.
    pub fn encode(&self, x: &Tensor, spec: ChunkSpec) -> Result<Encoded> {
        let mut ctx = Ctx::eval(&self.params);
        let enc = self.encoder.forward(&mut ctx, x, spec)?;
        let logits = self.ctc_head.forward(&mut ctx, enc.features)?;
        let lp = ctx.g.log_softmax(logits, 1)?;
        Ok(Encoded {
            grid: PosteriorGrid::from_log_probs(ctx.g.value(lp).clone())?,
            memory: ctx.g.value(enc.features).clone(),
            slot_indices: enc.slot_indices,
            router_indices: enc.router_indices,
        })
    }

    /// Teacher-forced `log p(tokens, <eos>)` under the `dir` decoder.
    pub fn decoder_log_likelihood(&self, memory: &Tensor, tokens: &[usize], dir: Direction) -> Result<f64> {
        let (input, target) = teacher_forcing_pair(tokens, self.config.sos_eos(), dir);
        let mut ctx = Ctx::eval(&self.params);
        let mem = ctx.g.constant(memory.clone());
        let out = self.decoder.get(dir).forward(&mut ctx, &input, mem)?;
        let lp = ctx.g.log_softmax(out.logits, 1)?;
        let lp = ctx.g.value(lp);
        Ok(target.iter().enumerate().map(|(u, &t)| lp.at(u, t)).sum())
    }

    /// Rescores the CTC n-best of `enc`. With `beam == 1` the single
    /// candidate is the greedy CTC transcript.
    pub fn rescore(&self, enc: &Encoded, beam: usize, w: &LossWeights) -> Result<DecodeResult> {
        w.validate()?;
        let candidates: Vec<(Vec<usize>, f64)> = match beam {
            0 => return Err(Error::ZeroBeam),
            1 => {
                let tokens = ctc_greedy_decode(&enc.grid).into_ids();
                let score = -ctc_neg_log_likelihood(enc.grid.log_probs(), &tokens)?;
                vec![(tokens, score)]
            }
            _ => ctc_prefix_beam_search(&enc.grid, beam)?
                .into_iter()
                .map(|h| (h.tokens, h.log_score))
                .collect(),
        };
        let mut nbest = Vec::with_capacity(candidates.len());
        for (tokens, ctc_score) in candidates {
            let l2r_score = self.decoder_log_likelihood(&enc.memory, &tokens, Direction::L2r)?;
            let r2l_score = self.decoder_log_likelihood(&enc.memory, &tokens, Direction::R2l)?;
            nbest.push(ScoredHypothesis {
                fused_score: fuse_scores(w, ctc_score, l2r_score, r2l_score),
                tokens,
                ctc_score,
                l2r_score,
                r2l_score,
            });
        }
        let mut chosen = 0;
        for (i, h) in nbest.iter().enumerate() {
            if h.fused_score > nbest[chosen].fused_score {
                chosen = i;
            }
        }
        Ok(DecodeResult { nbest, chosen })
    }

    pub fn attention_rescoring_decode(
        &self,
        x: &Tensor,
        spec: ChunkSpec,
        beam: usize,
        w: &LossWeights,
    ) -> Result<DecodeResult> {
        let enc = self.encode(x, spec)?;
        self.rescore(&enc, beam, w)
    }
}
