//! Conformer and switch-conformer encoder with chunk-masked attention.
//!
//! Layer body (pre-norm, macaron): `x + ½·FFN`, masked self-attention,
//! causal convolution module, `x + ½·FFN`, final layer norm. A
//! switch-conformer block swaps both FFNs for streaming MoE layers routed
//! on the previous block's output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    add_positions, residual, ConvModule, Ctx, FeedForward, Init, LayerNorm, Linear,
    MultiHeadAttention, ParamRole,
};
use crate::numerics::{Tensor, Var};
use crate::routing::{route, RouteDecision, Router, RouterSharing, StreamingMoeLayer, ENCODER_EXPERTS};

/// Attention visibility: `chunk_size` frames per chunk (−1 = whole
/// utterance), `num_left_chunks` earlier chunks visible (−1 = all).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChunkSpec {
    pub chunk_size: i64,
    pub num_left_chunks: i64,
}

impl ChunkSpec {
    pub const FULL: ChunkSpec = ChunkSpec {
        chunk_size: -1,
        num_left_chunks: -1,
    };
    pub const STREAMING: ChunkSpec = ChunkSpec {
        chunk_size: 16,
        num_left_chunks: 8,
    };

    pub fn new(chunk_size: i64, num_left_chunks: i64) -> Result<Self> {
        if chunk_size == 0 || chunk_size < -1 {
            return Err(Error::Config(format!("chunk size {chunk_size} must be >= 1 or -1")));
        }
        if num_left_chunks < -1 {
            return Err(Error::Config(format!(
                "left chunks {num_left_chunks} must be >= 0 or -1"
            )));
        }
        Ok(ChunkSpec {
            chunk_size,
            num_left_chunks,
        })
    }

    pub fn is_full(&self) -> bool {
        self.chunk_size < 0
    }

    /// Chunk length in frames for a sequence of `t` frames.
    pub fn frames_per_chunk(&self, t: usize) -> usize {
        if self.is_full() {
            t.max(1)
        } else {
            self.chunk_size as usize
        }
    }
}

impl std::fmt::Display for ChunkSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}]", self.chunk_size, self.num_left_chunks)
    }
}

/// Row-major `[T×T]` visibility mask for `spec`.
pub fn make_chunk_mask(t: usize, spec: ChunkSpec) -> Vec<bool> {
    if spec.is_full() {
        return vec![true; t * t];
    }
    let c = spec.chunk_size as usize;
    let mut mask = vec![false; t * t];
    for i in 0..t {
        let chunk = i / c;
        let first = if spec.num_left_chunks < 0 {
            0
        } else {
            chunk.saturating_sub(spec.num_left_chunks as usize) * c
        };
        let end = ((chunk + 1) * c).min(t);
        for j in first..end {
            mask[i * t + j] = true;
        }
    }
    mask
}

/// Dynamic chunk training: full context half of the time, otherwise a chunk
/// of 1..=16 frames with 0..=8 or unlimited left chunks.
pub fn sample_dynamic_chunk<R: Rng + ?Sized>(rng: &mut R) -> ChunkSpec {
    if rng.random_bool(0.5) {
        return ChunkSpec::FULL;
    }
    let chunk_size = rng.random_range(1..=16);
    let left = rng.random_range(0..=9);
    ChunkSpec {
        chunk_size,
        num_left_chunks: if left == 9 { -1 } else { left },
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subsampling {
    /// Linear projection per frame; output length `T`.
    #[default]
    None,
    /// Two stride-2 convolutions with kernel 3 and ReLU; output length
    /// `((T − 3)/2 + 1 − 3)/2 + 1` (integer division), which needs `T ≥ 7`.
    Conv4,
}

impl Subsampling {
    pub fn output_len(self, t: usize) -> Option<usize> {
        match self {
            Subsampling::None => (t >= 1).then_some(t),
            Subsampling::Conv4 => {
                if t < 7 {
                    return None;
                }
                let t1 = (t - 3) / 2 + 1;
                Some((t1 - 3) / 2 + 1)
            }
        }
    }

    /// Input frames needed for `out` output frames.
    pub fn input_len_for(self, out: usize) -> usize {
        match self {
            Subsampling::None => out,
            Subsampling::Conv4 => (out - 1) * 4 + 7,
        }
    }

    pub fn rate(self) -> usize {
        match self {
            Subsampling::None => 1,
            Subsampling::Conv4 => 4,
        }
    }
}

#[derive(Clone, Debug)]
enum FrontEnd {
    Linear(Linear),
    Conv4 { first: Linear, second: Linear },
}

#[derive(Clone, Debug)]
pub enum FfnSlot {
    Dense(FeedForward),
    /// MoE layer plus the index of the router deciding it.
    Moe { layer: StreamingMoeLayer, router: usize },
}

/// One conformer block; both FFN slots are MoE for a switch-conformer block.
#[derive(Clone, Debug)]
pub struct ConformerLayer {
    pub ff1_norm: LayerNorm,
    pub ff1: FfnSlot,
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub conv_norm: LayerNorm,
    pub conv: ConvModule,
    pub ff2_norm: LayerNorm,
    pub ff2: FfnSlot,
    pub final_norm: LayerNorm,
    pub dropout: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub feat_dim: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub standard_layers: usize,
    pub switch_layers: usize,
    pub dropout: f64,
}

impl ConformerLayer {
    fn new(init: &mut Init<'_>, name: &str, dims: &EncoderDims, ff1: FfnSlot, ff2: FfnSlot) -> Self {
        let d = dims.d_model;
        ConformerLayer {
            ff1_norm: LayerNorm::new(init, &format!("{name}.ff1_norm"), d),
            ff1,
            attn_norm: LayerNorm::new(init, &format!("{name}.attn_norm"), d),
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), d, dims.heads),
            conv_norm: LayerNorm::new(init, &format!("{name}.conv_norm"), d),
            conv: ConvModule::new(init, &format!("{name}.conv"), d, dims.conv_kernel),
            ff2_norm: LayerNorm::new(init, &format!("{name}.ff2_norm"), d),
            ff2,
            final_norm: LayerNorm::new(init, &format!("{name}.final_norm"), d),
            dropout: dims.dropout,
        }
    }

    pub fn is_switch(&self) -> bool {
        matches!(self.ff1, FfnSlot::Moe { .. })
    }

    /// Runs the block with the two FFN slots supplied by `ffn(ctx, slot, x)`.
    pub fn forward_with<F>(&self, ctx: &mut Ctx<'_>, x: Var, mask: &[bool], mut ffn: F) -> Result<Var>
    where
        F: FnMut(&mut Ctx<'_>, usize, Var) -> Result<Var>,
    {
        let h = self.ff1_norm.forward(ctx, x)?;
        let h = ffn(ctx, 0, h)?;
        let h = ctx.dropout(h, self.dropout)?;
        let x = residual(ctx, x, h, 0.5)?;

        let h = self.attn_norm.forward(ctx, x)?;
        let h = self.attn.forward(ctx, h, h, mask)?;
        let h = ctx.dropout(h, self.dropout)?;
        let x = residual(ctx, x, h, 1.0)?;

        let h = self.conv_norm.forward(ctx, x)?;
        let h = self.conv.forward(ctx, h)?;
        let h = ctx.dropout(h, self.dropout)?;
        let x = residual(ctx, x, h, 1.0)?;

        let h = self.ff2_norm.forward(ctx, x)?;
        let h = ffn(ctx, 1, h)?;
        let h = ctx.dropout(h, self.dropout)?;
        let x = residual(ctx, x, h, 0.5)?;

        self.final_norm.forward(ctx, x)
    }

    /// Standard conformer block; errors if a slot is MoE.
    pub fn forward_dense(&self, ctx: &mut Ctx<'_>, x: Var, mask: &[bool]) -> Result<Var> {
        let slots = [&self.ff1, &self.ff2];
        self.forward_with(ctx, x, mask, |ctx, s, h| match slots[s] {
            FfnSlot::Dense(ffn) => ffn.forward(ctx, h),
            FfnSlot::Moe { .. } => Err(Error::Config("dense forward on a switch layer".into())),
        })
    }

    /// Switch block: slot `s` uses `decisions[s]`.
    pub fn forward_switch(
        &self,
        ctx: &mut Ctx<'_>,
        x: Var,
        mask: &[bool],
        decisions: [&RouteDecision; 2],
    ) -> Result<Var> {
        let slots = [&self.ff1, &self.ff2];
        self.forward_with(ctx, x, mask, |ctx, s, h| match slots[s] {
            FfnSlot::Moe { layer, .. } => layer.apply(ctx, decisions[s], h),
            FfnSlot::Dense(ffn) => ffn.forward(ctx, h),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub dims: EncoderDims,
    pub subsampling: Subsampling,
    pub sharing: RouterSharing,
    front: FrontEnd,
    pub layers: Vec<ConformerLayer>,
    pub routers: Vec<Router>,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub features: Var,
    /// Router logits `[T'×3]`, one per router evaluation (the LID-CTC inputs).
    pub lid_logits: Vec<Var>,
    /// Per-frame expert choice for every sMoE layer, in layer order.
    pub slot_indices: Vec<Vec<usize>>,
    /// Per-frame expert choice of each router evaluation.
    pub router_indices: Vec<Vec<usize>>,
}

impl EncoderOutput {
    pub fn frames(&self, ctx: &Ctx<'_>) -> usize {
        ctx.g.shape(self.features)[0]
    }
}

impl Encoder {
    pub fn new(
        init: &mut Init<'_>,
        dims: EncoderDims,
        subsampling: Subsampling,
        sharing: RouterSharing,
    ) -> Result<Self> {
        let d = dims.d_model;
        if d == 0 || dims.heads == 0 || d % dims.heads != 0 {
            return Err(Error::Config(format!("d_model {d} not divisible by {} heads", dims.heads)));
        }
        if dims.standard_layers + dims.switch_layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        let front = match subsampling {
            Subsampling::None => FrontEnd::Linear(Linear::new(init, "encoder.input", dims.feat_dim, d, ParamRole::Dense)),
            Subsampling::Conv4 => FrontEnd::Conv4 {
                first: Linear::new(init, "encoder.subsample.0", 3 * dims.feat_dim, d, ParamRole::Dense),
                second: Linear::new(init, "encoder.subsample.1", 3 * d, d, ParamRole::Dense),
            },
        };
        let mut layers = Vec::new();
        for i in 0..dims.standard_layers {
            let name = format!("encoder.layers.{i}");
            let mk = |init: &mut Init<'_>, s: &str| {
                FfnSlot::Dense(FeedForward::new(init, &format!("{name}.{s}"), d, dims.ffn_dim, dims.dropout, ParamRole::Dense))
            };
            let (f1, f2) = (mk(init, "ff1"), mk(init, "ff2"));
            layers.push(ConformerLayer::new(init, &name, &dims, f1, f2));
        }
        let h = dims.switch_layers;
        let router_count = match sharing {
            _ if h == 0 => 0,
            RouterSharing::R1 => 1,
            RouterSharing::R2 => 2 * h,
            RouterSharing::R3 => h,
        };
        let mut routers = Vec::with_capacity(router_count);
        for r in 0..router_count {
            routers.push(Router::new(init, &format!("encoder.routers.{r}"), d, ENCODER_EXPERTS)?);
        }
        for b in 0..h {
            let i = dims.standard_layers + b;
            let name = format!("encoder.layers.{i}");
            let slot = |init: &mut Init<'_>, s: usize| {
                let router = match sharing {
                    RouterSharing::R1 => 0,
                    RouterSharing::R2 => 2 * b + s,
                    RouterSharing::R3 => b,
                };
                FfnSlot::Moe {
                    layer: StreamingMoeLayer::new(
                        init,
                        &format!("{name}.ff{}", s + 1),
                        2 * b + s,
                        ENCODER_EXPERTS,
                        d,
                        dims.ffn_dim,
                        dims.dropout,
                    ),
                    router,
                }
            };
            let (f1, f2) = (slot(init, 0), slot(init, 1));
            layers.push(ConformerLayer::new(init, &name, &dims, f1, f2));
        }
        Ok(Encoder {
            dims,
            subsampling,
            sharing,
            front,
            layers,
            routers,
        })
    }

    /// Subsampled length for `t` input frames, if any frame survives.
    pub fn output_len(&self, t: usize) -> Option<usize> {
        self.subsampling.output_len(t)
    }

    fn front_forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        match &self.front {
            FrontEnd::Linear(l) => l.forward(ctx, x),
            FrontEnd::Conv4 { first, second } => {
                let u = ctx.g.unfold_rows(x, 3, 2)?;
                let h = first.forward(ctx, u)?;
                let h = ctx.g.relu(h);
                let u = ctx.g.unfold_rows(h, 3, 2)?;
                let h = second.forward(ctx, u)?;
                Ok(ctx.g.relu(h))
            }
        }
    }

    /// Runs `x: [T×F]` through the front end and all blocks under `spec`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: &Tensor, spec: ChunkSpec) -> Result<EncoderOutput> {
        let (t, f) = x.dims2("encoder")?;
        if f != self.dims.feat_dim {
            return Err(Error::shape("encoder", x.shape(), &[t, self.dims.feat_dim]));
        }
        let t_out = self.output_len(t).ok_or_else(|| {
            Error::invalid("encoder", format!("{t} frames leave nothing after subsampling"))
        })?;
        let xv = ctx.g.constant(x.clone());
        let h = self.front_forward(ctx, xv)?;
        debug_assert_eq!(ctx.g.shape(h)[0], t_out);
        let h = add_positions(ctx, h)?;
        let mut h = ctx.dropout(h, self.dims.dropout)?;
        let mask = make_chunk_mask(t_out, spec);

        let mut out = EncoderOutput {
            features: h,
            lid_logits: Vec::new(),
            slot_indices: Vec::new(),
            router_indices: Vec::new(),
        };
        let mut shared: Option<RouteDecision> = None;
        for layer in &self.layers {
            let (FfnSlot::Moe { router: r1, .. }, FfnSlot::Moe { router: r2, .. }) = (&layer.ff1, &layer.ff2) else {
                h = layer.forward_dense(ctx, h, &mask)?;
                continue;
            };
            let (r1, r2) = (*r1, *r2);
            let decide = |ctx: &mut Ctx<'_>, r: usize, out: &mut EncoderOutput| -> Result<RouteDecision> {
                let d = route(ctx, &self.routers[r], h)?;
                out.lid_logits.push(d.logits);
                out.router_indices.push(d.indices.clone());
                Ok(d)
            };
            let decisions = match self.sharing {
                RouterSharing::R1 => {
                    if shared.is_none() {
                        shared = Some(decide(ctx, r1, &mut out)?);
                    }
                    let d = shared.clone().expect("set above");
                    [d.clone(), d]
                }
                RouterSharing::R3 => {
                    let d = decide(ctx, r1, &mut out)?;
                    [d.clone(), d]
                }
                RouterSharing::R2 => [decide(ctx, r1, &mut out)?, decide(ctx, r2, &mut out)?],
            };
            out.slot_indices.push(decisions[0].indices.clone());
            out.slot_indices.push(decisions[1].indices.clone());
            h = layer.forward_switch(ctx, h, &mask, [&decisions[0], &decisions[1]])?;
        }
        out.features = h;
        Ok(out)
    }

    /// Number of router evaluations per forward pass (= LID-CTC terms).
    pub fn lid_grids(&self) -> usize {
        let h = self.dims.switch_layers;
        match self.sharing {
            _ if h == 0 => 0,
            RouterSharing::R1 => 1,
            RouterSharing::R2 => 2 * h,
            RouterSharing::R3 => h,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows_visible(mask: &[bool], t: usize, row: usize) -> Vec<usize> {
        (0..t).filter(|&j| mask[row * t + j]).collect()
    }

    #[test]
    fn chunk_mask_examples() {
        let m = make_chunk_mask(4, ChunkSpec::new(2, 1).unwrap());
        assert_eq!(rows_visible(&m, 4, 0), vec![0, 1]);
        assert_eq!(rows_visible(&m, 4, 1), vec![0, 1]);
        assert_eq!(rows_visible(&m, 4, 2), vec![0, 1, 2, 3]);
        assert_eq!(rows_visible(&m, 4, 3), vec![0, 1, 2, 3]);
        let m = make_chunk_mask(4, ChunkSpec::new(2, 0).unwrap());
        assert_eq!(rows_visible(&m, 4, 2), vec![2, 3]);
        assert_eq!(rows_visible(&m, 4, 3), vec![2, 3]);
        assert!(make_chunk_mask(5, ChunkSpec::FULL).iter().all(|&b| b));
    }

    #[test]
    fn chunk_spec_validation() {
        assert!(ChunkSpec::new(0, 1).is_err());
        assert!(ChunkSpec::new(4, -2).is_err());
        assert!(ChunkSpec::new(-1, -1).is_ok());
    }

    #[test]
    fn dynamic_chunk_is_reproducible_and_in_range() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_dynamic_chunk(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        for s in draw(4) {
            if !s.is_full() {
                assert!((1..=16).contains(&s.chunk_size));
                assert!((-1..=8).contains(&s.num_left_chunks));
            }
        }
    }

    #[test]
    fn subsampling_lengths() {
        assert_eq!(Subsampling::None.output_len(5), Some(5));
        assert_eq!(Subsampling::Conv4.output_len(6), None);
        assert_eq!(Subsampling::Conv4.output_len(7), Some(1));
        assert_eq!(Subsampling::Conv4.output_len(11), Some(2));
        assert_eq!(Subsampling::Conv4.output_len(100), Some(24));
        for out in 1..20 {
            let need = Subsampling::Conv4.input_len_for(out);
            assert_eq!(Subsampling::Conv4.output_len(need), Some(out));
            assert_eq!(Subsampling::Conv4.output_len(need - 1), if out == 1 { None } else { Some(out - 1) });
        }
    }
}
