//! Transformer and switch-transformer decoders (pre-norm), one per direction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{add_positions, residual, Ctx, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention, ParamRole};
use crate::numerics::{Tensor, Var};
use crate::routing::{route, Router, StreamingMoeLayer, DECODER_EXPERTS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    L2r,
    R2l,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderDims {
    pub vocab_size: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub standard_layers: usize,
    pub switch_layers: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug)]
pub enum DecoderFfn {
    Dense(FeedForward),
    Moe { layer: StreamingMoeLayer, router: Router },
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub src_norm: LayerNorm,
    pub src_attn: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: DecoderFfn,
    pub dropout: f64,
}

/// Output of one switch-transformer layer.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub hidden: Var,
    pub router_logits: Option<Var>,
    pub indices: Option<Vec<usize>>,
}

impl DecoderLayer {
    /// Self-attention, cross-attention over `memory`, then the FFN slot. A
    /// switch layer routes on its own input `x`.
    pub fn forward(
        &self,
        ctx: &mut Ctx<'_>,
        x: Var,
        memory: Var,
        self_mask: &[bool],
        src_mask: &[bool],
    ) -> Result<LayerOutput> {
        let layer_input = x;
        let h = self.self_norm.forward(ctx, x)?;
        let h = self.self_attn.forward(ctx, h, h, self_mask)?;
        let h = ctx.dropout(h, self.dropout)?;
        let x = residual(ctx, x, h, 1.0)?;

        let h = self.src_norm.forward(ctx, x)?;
        let h = self.src_attn.forward(ctx, h, memory, src_mask)?;
        let h = ctx.dropout(h, self.dropout)?;
        let x = residual(ctx, x, h, 1.0)?;

        let h = self.ffn_norm.forward(ctx, x)?;
        let (h, router_logits, indices) = match &self.ffn {
            DecoderFfn::Dense(f) => (f.forward(ctx, h)?, None, None),
            DecoderFfn::Moe { layer, router } => {
                let d = route(ctx, router, layer_input)?;
                let y = layer.apply(ctx, &d, h)?;
                (y, Some(d.logits), Some(d.indices))
            }
        };
        let h = ctx.dropout(h, self.dropout)?;
        Ok(LayerOutput {
            hidden: residual(ctx, x, h, 1.0)?,
            router_logits,
            indices,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub dims: DecoderDims,
    pub embed: crate::nn::ParamId,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: LayerNorm,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// Token logits `[U×V]`.
    pub logits: Var,
    /// Router logits `[U×2]`, one per switch layer.
    pub router_logits: Vec<Var>,
    pub indices: Vec<Vec<usize>>,
}

/// Lower-triangular `[U×U]` mask.
pub fn causal_mask(u: usize) -> Vec<bool> {
    let mut m = vec![false; u * u];
    for i in 0..u {
        for j in 0..=i {
            m[i * u + j] = true;
        }
    }
    m
}

impl Decoder {
    /// `moe_slot_base` numbers this decoder's MoE slots for parameter accounting.
    pub fn new(init: &mut Init<'_>, name: &str, dims: DecoderDims, moe_slot_base: usize) -> Result<Self> {
        let d = dims.d_model;
        if d == 0 || dims.heads == 0 || d % dims.heads != 0 {
            return Err(Error::Config(format!("d_model {d} not divisible by {} heads", dims.heads)));
        }
        let table = Tensor::randn(&[dims.vocab_size, d], 1.0, init.rng);
        let embed = init.param(format!("{name}.embed"), table, ParamRole::Dense);
        let mut layers = Vec::new();
        for i in 0..dims.standard_layers + dims.switch_layers {
            let lname = format!("{name}.layers.{i}");
            let ffn = if i < dims.standard_layers {
                DecoderFfn::Dense(FeedForward::new(init, &format!("{lname}.ffn"), d, dims.ffn_dim, dims.dropout, ParamRole::Dense))
            } else {
                let slot = moe_slot_base + i - dims.standard_layers;
                DecoderFfn::Moe {
                    layer: StreamingMoeLayer::new(init, &format!("{lname}.ffn"), slot, DECODER_EXPERTS, d, dims.ffn_dim, dims.dropout),
                    router: Router::new(init, &format!("{lname}.router"), d, DECODER_EXPERTS)?,
                }
            };
            layers.push(DecoderLayer {
                self_norm: LayerNorm::new(init, &format!("{lname}.self_norm"), d),
                self_attn: MultiHeadAttention::new(init, &format!("{lname}.self_attn"), d, dims.heads),
                src_norm: LayerNorm::new(init, &format!("{lname}.src_norm"), d),
                src_attn: MultiHeadAttention::new(init, &format!("{lname}.src_attn"), d, dims.heads),
                ffn_norm: LayerNorm::new(init, &format!("{lname}.ffn_norm"), d),
                ffn,
                dropout: dims.dropout,
            });
        }
        Ok(Decoder {
            dims,
            embed,
            final_norm: LayerNorm::new(init, &format!("{name}.final_norm"), d),
            out: Linear::new(init, &format!("{name}.out"), d, dims.vocab_size, ParamRole::Dense),
            layers,
        })
    }

    /// Teacher-forced pass over `tokens` (already prefixed with `<sos>`, and
    /// already reversed for the right-to-left decoder).
    pub fn forward(&self, ctx: &mut Ctx<'_>, tokens: &[usize], memory: Var) -> Result<DecoderOutput> {
        if tokens.is_empty() {
            return Err(Error::invalid("decoder", "empty target sequence"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.dims.vocab_size) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                alphabet: self.dims.vocab_size,
            });
        }
        let u = tokens.len();
        let tm = ctx.g.shape(memory)[0];
        let emb = ctx.p(self.embed);
        let x = ctx.g.gather_rows(emb, tokens)?;
        let x = add_positions(ctx, x)?;
        let mut x = ctx.dropout(x, self.dims.dropout)?;
        let self_mask = causal_mask(u);
        let src_mask = vec![true; u * tm];
        let mut router_logits = Vec::new();
        let mut indices = Vec::new();
        for layer in &self.layers {
            let o = layer.forward(ctx, x, memory, &self_mask, &src_mask)?;
            x = o.hidden;
            router_logits.extend(o.router_logits);
            indices.extend(o.indices);
        }
        let x = self.final_norm.forward(ctx, x)?;
        let logits = self.out.forward(ctx, x)?;
        Ok(DecoderOutput {
            logits,
            router_logits,
            indices,
        })
    }
}

/// Left-to-right and right-to-left decoders.
#[derive(Clone, Debug)]
pub struct BiDecoder {
    pub l2r: Decoder,
    pub r2l: Decoder,
}

impl BiDecoder {
    pub fn new(init: &mut Init<'_>, dims: DecoderDims, moe_slot_base: usize) -> Result<Self> {
        let l2r = Decoder::new(init, "decoder.l2r", dims, moe_slot_base)?;
        let r2l = Decoder::new(init, "decoder.r2l", dims, moe_slot_base + dims.switch_layers)?;
        Ok(BiDecoder { l2r, r2l })
    }

    pub fn get(&self, dir: Direction) -> &Decoder {
        match dir {
            Direction::L2r => &self.l2r,
            Direction::R2l => &self.r2l,
        }
    }
}

/// Decoder input `<sos> + y` and target `y + <eos>` for `dir`.
pub fn teacher_forcing_pair(y: &[usize], sos_eos: usize, dir: Direction) -> (Vec<usize>, Vec<usize>) {
    let mut seq = y.to_vec();
    if dir == Direction::R2l {
        seq.reverse();
    }
    let mut input = Vec::with_capacity(seq.len() + 1);
    input.push(sos_eos);
    input.extend_from_slice(&seq);
    let mut target = seq;
    target.push(sos_eos);
    (input, target)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_mask_is_lower_triangular() {
        let m = causal_mask(3);
        assert_eq!(m, vec![true, false, false, true, true, false, true, true, true]);
    }

    #[test]
    fn teacher_forcing_directions() {
        let (i, t) = teacher_forcing_pair(&[3, 4, 5], 9, Direction::L2r);
        assert_eq!(i, vec![9, 3, 4, 5]);
        assert_eq!(t, vec![3, 4, 5, 9]);
        let (i, t) = teacher_forcing_pair(&[3, 4, 5], 9, Direction::R2l);
        assert_eq!(i, vec![9, 5, 4, 3]);
        assert_eq!(t, vec![5, 4, 3, 9]);
    }
}
