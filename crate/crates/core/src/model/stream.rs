//! Chunk-by-chunk decoding session.
//!
//! Chunks are counted in encoder frames (after subsampling). Once enough
//! input has arrived to complete chunk `c`, the encoder is rerun on exactly
//! that prefix under the session's chunk mask and the greedy CTC transcript
//! is emitted as partial `c`. Partial `c` therefore depends on chunks `≤ c`
//! only, and the first one appears as soon as the first chunk is complete.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{DecodeResult, Encoded, LossWeights, Model};
use crate::encoder::ChunkSpec;
use crate::error::{Error, Result};
use crate::losses::ctc_greedy_decode;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partial {
    /// 1-based chunk index.
    pub chunk: usize,
    /// Input frames the partial was computed from.
    pub input_frames: usize,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct StreamOutcome {
    pub partials: Vec<Partial>,
    pub result: DecodeResult,
    pub encoded: Encoded,
}

#[derive(Debug)]
pub struct StreamingSession {
    model: Arc<Model>,
    spec: ChunkSpec,
    beam: usize,
    weights: LossWeights,
    rows: Vec<f64>,
    frames: usize,
    partials: Vec<Partial>,
}

impl StreamingSession {
    pub fn new(model: Arc<Model>, spec: ChunkSpec, beam: usize, weights: LossWeights) -> Result<Self> {
        if beam == 0 {
            return Err(Error::ZeroBeam);
        }
        weights.validate()?;
        Ok(StreamingSession {
            model,
            spec,
            beam,
            weights,
            rows: Vec::new(),
            frames: 0,
            partials: Vec::new(),
        })
    }

    pub fn spec(&self) -> ChunkSpec {
        self.spec
    }

    pub fn frames_received(&self) -> usize {
        self.frames
    }

    pub fn partials(&self) -> &[Partial] {
        &self.partials
    }

    /// Input frames needed to complete chunk `c` (1-based); `None` for full context.
    pub fn input_frames_for_chunk(&self, c: usize) -> Option<usize> {
        if self.spec.is_full() {
            return None;
        }
        let out = c * self.spec.chunk_size as usize;
        Some(self.model.config.subsampling.input_len_for(out))
    }

    fn prefix(&self, frames: usize) -> Result<Tensor> {
        let f = self.model.config.feat_dim;
        Tensor::new(vec![frames, f], self.rows[..frames * f].to_vec())
    }

    fn emit(&mut self, frames: usize) -> Result<Partial> {
        let enc = self.model.encode(&self.prefix(frames)?, self.spec)?;
        let partial = Partial {
            chunk: self.partials.len() + 1,
            input_frames: frames,
            tokens: ctc_greedy_decode(&enc.grid).into_ids(),
        };
        self.partials.push(partial.clone());
        Ok(partial)
    }

    /// Appends `frames: [n×F]` and returns the partials of every chunk it completes.
    pub fn push(&mut self, frames: &Tensor) -> Result<Vec<Partial>> {
        let (n, f) = frames.dims2("stream")?;
        if f != self.model.config.feat_dim {
            return Err(Error::shape("stream", frames.shape(), &[n, self.model.config.feat_dim]));
        }
        self.rows.extend_from_slice(frames.data());
        self.frames += n;
        let mut out = Vec::new();
        while let Some(need) = self.input_frames_for_chunk(self.partials.len() + 1) {
            if need > self.frames {
                break;
            }
            out.push(self.emit(need)?);
        }
        Ok(out)
    }

    /// Flushes any remainder as a short final chunk and rescores the whole stream.
    pub fn finish(mut self) -> Result<StreamOutcome> {
        let done = self.partials.last().map_or(0, |p| p.input_frames);
        if self.frames > done {
            match self.model.config.subsampling.output_len(self.frames) {
                Some(_) => {
                    self.emit(self.frames)?;
                }
                None => {
                    return Err(Error::invalid(
                        "stream",
                        format!("{} frames leave nothing after subsampling", self.frames),
                    ))
                }
            }
        }
        if self.frames == 0 {
            return Err(Error::invalid("stream", "no frames received"));
        }
        let encoded = self.model.encode(&self.prefix(self.frames)?, self.spec)?;
        let result = self.model.rescore(&encoded, self.beam, &self.weights)?;
        Ok(StreamOutcome {
            partials: self.partials,
            result,
            encoded,
        })
    }
}
