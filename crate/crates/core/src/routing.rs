//! Top-1 streaming mixture-of-experts layer.
//!
//! A linear router maps the router input to expert logits, softmax turns
//! them into gate values, and each frame is processed only by its argmax
//! expert, whose output is scaled by that expert's gate value. The encoder
//! uses three experts whose indices coincide with the language alphabet
//! (blank, Mandarin, English), so router logits feed LID-CTC directly; the
//! decoder uses two (Mandarin, English).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Ctx, FeedForward, Init, Linear, ParamRole};
use crate::numerics::Var;

/// Encoder expert / LID class indices.
pub const ENC_BLANK: usize = 0;
pub const ENC_MANDARIN: usize = 1;
pub const ENC_ENGLISH: usize = 2;
pub const ENCODER_EXPERTS: usize = 3;

/// Decoder expert / LID class indices.
pub const DEC_MANDARIN: usize = 0;
pub const DEC_ENGLISH: usize = 1;
pub const DECODER_EXPERTS: usize = 2;

/// Language of a token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Language {
    #[serde(rename = "MA")]
    Mandarin,
    #[serde(rename = "EN")]
    English,
}

impl Language {
    pub const ALL: [Language; 2] = [Language::Mandarin, Language::English];

    /// Class in the 3-way encoder alphabet (blank is 0).
    pub fn encoder_class(self) -> usize {
        match self {
            Language::Mandarin => ENC_MANDARIN,
            Language::English => ENC_ENGLISH,
        }
    }

    /// Class in the 2-way decoder alphabet.
    pub fn decoder_class(self) -> usize {
        match self {
            Language::Mandarin => DEC_MANDARIN,
            Language::English => DEC_ENGLISH,
        }
    }

    /// Inverse of [`Language::encoder_class`]; `None` for blank.
    pub fn from_encoder_class(class: usize) -> Option<Language> {
        match class {
            ENC_MANDARIN => Some(Language::Mandarin),
            ENC_ENGLISH => Some(Language::English),
            _ => None,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Language::Mandarin => "MA",
            Language::English => "EN",
        }
    }
}

/// How encoder routers are shared between sMoE layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum RouterSharing {
    /// One router, evaluated once, whose decision drives every sMoE layer.
    R1,
    /// Every sMoE layer owns a router.
    R2,
    /// One router per switch-conformer block, shared by its two sMoE layers.
    #[default]
    R3,
}

#[derive(Clone, Debug)]
pub struct Router {
    pub proj: Linear,
}

impl Router {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, experts: usize) -> Result<Self> {
        if experts < 2 {
            return Err(Error::Config(format!("router needs at least 2 experts, got {experts}")));
        }
        Ok(Router {
            proj: Linear::new(init, name, dim, experts, ParamRole::Router),
        })
    }

    pub fn experts(&self) -> usize {
        self.proj.out_dim
    }

    pub fn param_count(&self) -> usize {
        self.proj.param_count()
    }
}

/// Router output for one sequence.
#[derive(Clone, Debug)]
pub struct RouteDecision {
    /// Raw router logits `[T×E]`.
    pub logits: Var,
    /// Softmax gate values `[T×E]`.
    pub probs: Var,
    /// Selected expert per frame.
    pub indices: Vec<usize>,
}

/// Logits and gate probabilities of `router` on `h: [T×D]`.
pub fn route_probs(ctx: &mut Ctx<'_>, router: &Router, h: Var) -> Result<(Var, Var)> {
    let logits = router.proj.forward(ctx, h)?;
    let probs = ctx.g.softmax(logits, 1)?;
    Ok((logits, probs))
}

/// Per-row argmax; ties go to the lowest index.
pub fn select_expert(probs: &[f64], experts: usize) -> Vec<usize> {
    probs
        .chunks(experts)
        .map(|row| {
            let mut best = 0;
            for (i, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn route(ctx: &mut Ctx<'_>, router: &Router, h: Var) -> Result<RouteDecision> {
    let (logits, probs) = route_probs(ctx, router, h)?;
    let indices = select_expert(ctx.g.value(probs).data(), router.experts());
    Ok(RouteDecision {
        logits,
        probs,
        indices,
    })
}

#[derive(Clone, Debug)]
pub struct StreamingMoeLayer {
    pub experts: Vec<FeedForward>,
}

impl StreamingMoeLayer {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        slot: usize,
        experts: usize,
        dim: usize,
        hidden: usize,
        dropout: f64,
    ) -> Self {
        let experts = (0..experts)
            .map(|e| {
                FeedForward::new(
                    init,
                    &format!("{name}.experts.{e}"),
                    dim,
                    hidden,
                    dropout,
                    ParamRole::Expert { slot, expert: e },
                )
            })
            .collect();
        StreamingMoeLayer { experts }
    }

    pub fn expert_param_count(&self) -> usize {
        self.experts[0].param_count()
    }

    /// Applies the routed experts to `x: [T×D]` and scales each frame by its gate.
    ///
    /// Frames are grouped by selected expert so each expert runs once over
    /// exactly its own frames.
    pub fn apply(&self, ctx: &mut Ctx<'_>, decision: &RouteDecision, x: Var) -> Result<Var> {
        let (t, d) = ctx.g.value(x).dims2("smoe")?;
        if decision.indices.len() != t {
            return Err(Error::shape("smoe", &[t, d], &[decision.indices.len()]));
        }
        let e = self.experts.len();
        if ctx.g.shape(decision.probs) != [t, e] {
            return Err(Error::shape("smoe", ctx.g.shape(decision.probs), &[t, e]));
        }
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); e];
        for (frame, &i) in decision.indices.iter().enumerate() {
            groups[i].push(frame);
        }
        let mut parts = Vec::new();
        for (expert, rows) in self.experts.iter().zip(groups) {
            if rows.is_empty() {
                continue;
            }
            let xe = ctx.g.gather_rows(x, &rows)?;
            let ye = expert.forward(ctx, xe)?;
            ctx.expert_rows += rows.len();
            parts.push((ye, rows));
        }
        let merged = ctx.g.scatter_rows(parts, t, d)?;
        let gate = ctx.g.pick_columns(decision.probs, &decision.indices)?;
        ctx.g.scale_rows(merged, gate)
    }
}

#[derive(Clone, Debug)]
pub struct SmoeOutput {
    pub output: Var,
    pub decision: RouteDecision,
    /// Frames that went through an expert in this call.
    pub invocations: usize,
}

/// Routes on `h_router` and applies the selected experts to `x_expert`.
pub fn smoe_forward(
    ctx: &mut Ctx<'_>,
    layer: &StreamingMoeLayer,
    router: &Router,
    x_expert: Var,
    h_router: Var,
) -> Result<SmoeOutput> {
    let tx = ctx.g.value(x_expert).dims2("smoe")?.0;
    let th = ctx.g.value(h_router).dims2("smoe")?.0;
    if tx != th {
        return Err(Error::shape("smoe", ctx.g.shape(x_expert), ctx.g.shape(h_router)));
    }
    if router.experts() != layer.experts.len() {
        return Err(Error::Config("router and layer expert counts differ".into()));
    }
    let decision = route(ctx, router, h_router)?;
    let before = ctx.expert_rows;
    let output = layer.apply(ctx, &decision, x_expert)?;
    Ok(SmoeOutput {
        output,
        invocations: ctx.expert_rows - before,
        decision,
    })
}

/// Expert utilisation and cross-layer agreement over a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    /// `counts[layer][expert]`.
    pub counts: Vec<Vec<usize>>,
    /// `agreement[a][b]`: fraction of frames where layers `a` and `b` chose the same expert.
    pub agreement: Vec<Vec<f64>>,
    pub frames: usize,
}

/// `per_utterance[u][layer]` holds that layer's per-frame choices for utterance `u`.
pub fn routing_stats(per_utterance: &[Vec<Vec<usize>>], experts: usize) -> RoutingStats {
    let layers = per_utterance.first().map_or(0, Vec::len);
    let mut counts = vec![vec![0usize; experts]; layers];
    let mut same = vec![vec![0usize; layers]; layers];
    let mut frames = 0;
    for utt in per_utterance {
        let t = utt.first().map_or(0, Vec::len);
        frames += t;
        for (l, idx) in utt.iter().enumerate() {
            for &i in idx {
                counts[l][i] += 1;
            }
        }
        for a in 0..layers {
            for b in 0..layers {
                same[a][b] += utt[a].iter().zip(&utt[b]).filter(|(x, y)| x == y).count();
            }
        }
    }
    let agreement = same
        .iter()
        .map(|row| {
            row.iter()
                .map(|&s| if frames == 0 { 1.0 } else { s as f64 / frames as f64 })
                .collect()
        })
        .collect();
    RoutingStats {
        counts,
        agreement,
        frames,
    }
}
