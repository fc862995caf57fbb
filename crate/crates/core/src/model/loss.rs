//! Joint objective: ASR (CTC + bidirectional CE) plus LID (router CTC in the
//! encoder, router CE in the decoder).

use serde::{Deserialize, Serialize};

use super::Model;
use crate::decoder::{teacher_forcing_pair, Direction};
use crate::encoder::ChunkSpec;
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, ctc_loss, IGNORE_ID};
use crate::nn::Ctx;
use crate::numerics::{Graph, Tensor, Var};
use crate::routing::Language;

pub const ASR_LABEL_SMOOTHING: f64 = 0.1;
pub const LID_LABEL_SMOOTHING: f64 = 0.0;

/// `lambda` balances CTC against attention CE, `alpha` the R2L against the
/// L2R decoder; `lid_weight` scales the LID loss in the total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda: f64,
    pub alpha: f64,
    #[serde(default = "unit")]
    pub lid_weight: f64,
}

fn unit() -> f64 {
    1.0
}

impl LossWeights {
    pub const TRAIN: LossWeights = LossWeights {
        lambda: 0.3,
        alpha: 0.3,
        lid_weight: 1.0,
    };
    pub const DECODE: LossWeights = LossWeights {
        lambda: 0.3,
        alpha: 0.6,
        lid_weight: 1.0,
    };

    pub fn new(lambda: f64, alpha: f64) -> Result<Self> {
        let w = LossWeights {
            lambda,
            alpha,
            lid_weight: 1.0,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("alpha", self.alpha)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.lid_weight.is_finite() && self.lid_weight >= 0.0) {
            return Err(Error::Config(format!("lid_weight = {} must be >= 0", self.lid_weight)));
        }
        Ok(())
    }

    fn asr_coefficients(&self) -> [f64; 3] {
        let ce = 1.0 - self.lambda;
        [self.lambda, ce * (1.0 - self.alpha), ce * self.alpha]
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights::TRAIN
    }
}

fn weighted_value(terms: &[(f64, f64)]) -> f64 {
    terms.iter().fold(0.0, |acc, (c, v)| acc + c * v)
}

fn weighted_var(g: &mut Graph, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc = g.constant(Tensor::scalar(0.0));
    for &(c, v) in terms {
        let t = g.mul(v, c)?;
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

fn asr_terms<T: Copy>(w: &LossWeights, ctc: T, l2r: T, r2l: T) -> [(f64, T); 3] {
    let [a, b, c] = w.asr_coefficients();
    [(a, ctc), (b, l2r), (c, r2l)]
}

fn lid_terms<T: Copy>(w: &LossWeights, enc: &[T], l2r: &[T], r2l: &[T]) -> Result<Vec<(f64, T)>> {
    if l2r.len() != r2l.len() {
        return Err(Error::invalid("lid_loss", format!("{} L2R vs {} R2L terms", l2r.len(), r2l.len())));
    }
    let [a, b, c] = w.asr_coefficients();
    let mut terms: Vec<(f64, T)> = enc.iter().map(|&v| (a, v)).collect();
    for (&l, &r) in l2r.iter().zip(r2l) {
        terms.push((b, l));
        terms.push((c, r));
    }
    Ok(terms)
}

/// `λ·ctc + (1−λ)·[(1−α)·l2r + α·r2l]`.
pub fn asr_loss_value(w: &LossWeights, ctc: f64, l2r: f64, r2l: f64) -> f64 {
    weighted_value(&asr_terms(w, ctc, l2r, r2l))
}

/// `λ·Σ enc + (1−λ)·Σ_j [(1−α)·l2r_j + α·r2l_j]`.
pub fn lid_loss_value(w: &LossWeights, enc_ctc: &[f64], dec_l2r: &[f64], dec_r2l: &[f64]) -> Result<f64> {
    Ok(weighted_value(&lid_terms(w, enc_ctc, dec_l2r, dec_r2l)?))
}

pub fn total_loss_value(w: &LossWeights, asr: f64, lid: f64) -> f64 {
    asr + w.lid_weight * lid
}

/// Every component of one loss evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub asr: f64,
    pub lid: f64,
    pub asr_ctc: f64,
    pub asr_ce_l2r: f64,
    pub asr_ce_r2l: f64,
    /// One per encoder router evaluation.
    pub lid_ctc: Vec<f64>,
    /// One per switch decoder layer.
    pub lid_ce_l2r: Vec<f64>,
    pub lid_ce_r2l: Vec<f64>,
}

impl LossReport {
    /// Component-wise mean.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let avg = |f: &dyn Fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let avg_vec = |f: &dyn Fn(&LossReport) -> &Vec<f64>| {
            let len = reports.first().map_or(0, |r| f(r).len());
            (0..len).map(|i| reports.iter().map(|r| f(r)[i]).sum::<f64>() / n).collect()
        };
        LossReport {
            total: avg(&|r| r.total),
            asr: avg(&|r| r.asr),
            lid: avg(&|r| r.lid),
            asr_ctc: avg(&|r| r.asr_ctc),
            asr_ce_l2r: avg(&|r| r.asr_ce_l2r),
            asr_ce_r2l: avg(&|r| r.asr_ce_r2l),
            lid_ctc: avg_vec(&|r| &r.lid_ctc),
            lid_ce_l2r: avg_vec(&|r| &r.lid_ce_l2r),
            lid_ce_r2l: avg_vec(&|r| &r.lid_ce_r2l),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.asr, self.lid, self.asr_ctc, self.asr_ce_l2r, self.asr_ce_r2l]
            .iter()
            .chain(&self.lid_ctc)
            .chain(&self.lid_ce_l2r)
            .chain(&self.lid_ce_r2l)
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: Var,
    pub asr: Var,
    pub lid: Option<Var>,
    pub report: LossReport,
    /// Encoder expert choice per sMoE layer.
    pub slot_indices: Vec<Vec<usize>>,
    /// Encoder choice per router evaluation.
    pub router_indices: Vec<Vec<usize>>,
}

fn lid_ce_targets(z: &[Language], dir: Direction) -> Vec<i64> {
    let mut t: Vec<i64> = z.iter().map(|l| l.decoder_class() as i64).collect();
    if dir == Direction::R2l {
        t.reverse();
    }
    // The final decoder position predicts <eos>, which has no language.
    t.push(IGNORE_ID);
    t
}

impl Model {
    /// Teacher-forced joint loss for features `x`, tokens `y` and their
    /// languages `z`.
    pub fn loss(
        &self,
        ctx: &mut Ctx<'_>,
        x: &Tensor,
        y: &[usize],
        z: &[Language],
        spec: ChunkSpec,
        w: &LossWeights,
    ) -> Result<LossOutput> {
        if z.len() != y.len() {
            return Err(Error::invalid("lid_loss", format!("{} language labels for {} tokens", z.len(), y.len())));
        }
        let sos = self.config.sos_eos();
        if let Some(&bad) = y.iter().find(|&&t| t == 0 || t >= sos) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                alphabet: sos,
            });
        }
        let enc = self.encoder.forward(ctx, x, spec)?;
        let logits = self.ctc_head.forward(ctx, enc.features)?;
        let lp = ctx.g.log_softmax(logits, 1)?;
        let asr_ctc = ctc_loss(&mut ctx.g, lp, y)?;

        let mut ce = Vec::with_capacity(2);
        let mut lid_ce: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
        for (d, dir) in [Direction::L2r, Direction::R2l].into_iter().enumerate() {
            let (input, target) = teacher_forcing_pair(y, sos, dir);
            let out = self.decoder.get(dir).forward(ctx, &input, enc.features)?;
            let target: Vec<i64> = target.iter().map(|&t| t as i64).collect();
            ce.push(cross_entropy(&mut ctx.g, out.logits, &target, ASR_LABEL_SMOOTHING, IGNORE_ID)?);
            if !y.is_empty() {
                let lid_target = lid_ce_targets(z, dir);
                for rl in out.router_logits {
                    lid_ce[d].push(cross_entropy(&mut ctx.g, rl, &lid_target, LID_LABEL_SMOOTHING, IGNORE_ID)?);
                }
            }
        }

        let z_enc: Vec<usize> = z.iter().map(|l| l.encoder_class()).collect();
        let mut lid_ctc = Vec::with_capacity(enc.lid_logits.len());
        for &rl in &enc.lid_logits {
            let lp = ctx.g.log_softmax(rl, 1)?;
            lid_ctc.push(ctc_loss(&mut ctx.g, lp, &z_enc)?);
        }

        let asr = weighted_var(&mut ctx.g, &asr_terms(w, asr_ctc, ce[0], ce[1]))?;
        let lid_t = lid_terms(w, &lid_ctc, &lid_ce[0], &lid_ce[1])?;
        let (total, lid) = if lid_t.is_empty() {
            (asr, None)
        } else {
            let lid = weighted_var(&mut ctx.g, &lid_t)?;
            let scaled = ctx.g.mul(lid, w.lid_weight)?;
            (ctx.g.add(asr, scaled)?, Some(lid))
        };

        let val = |v: &Var| ctx.g.value(*v).item();
        let report = LossReport {
            total: val(&total),
            asr: val(&asr),
            lid: lid.as_ref().map_or(0.0, val),
            asr_ctc: val(&asr_ctc),
            asr_ce_l2r: val(&ce[0]),
            asr_ce_r2l: val(&ce[1]),
            lid_ctc: lid_ctc.iter().map(val).collect(),
            lid_ce_l2r: lid_ce[0].iter().map(val).collect(),
            lid_ce_r2l: lid_ce[1].iter().map(val).collect(),
        };
        Ok(LossOutput {
            total,
            asr,
            lid,
            report,
            slot_indices: enc.slot_indices,
            router_indices: enc.router_indices,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn asr_weighting_examples() {
        let w = LossWeights::TRAIN;
        let v = asr_loss_value(&w, 1.0, 2.0, 3.0);
        assert!((v - 1.91).abs() < 1e-12, "{v}");
        let ctc_only = LossWeights::new(1.0, 0.3).unwrap();
        assert_eq!(asr_loss_value(&ctc_only, 1.7, 2.0, 3.0), 1.7);
        let l2r_only = LossWeights::new(0.0, 0.0).unwrap();
        assert_eq!(asr_loss_value(&l2r_only, 1.7, 2.0, 3.0), 2.0);
    }

    #[test]
    fn lid_weighting_closed_form() {
        let w = LossWeights::TRAIN;
        let (a, b, cl, cr) = (0.4, 0.9, 0.5, 0.8);
        let v = lid_loss_value(&w, &[a, b], &[cl], &[cr]).unwrap();
        let want = 0.3 * (a + b) + 0.7 * (0.7 * cl + 0.3 * cr);
        assert!((v - want).abs() < 1e-12);
        assert!(lid_loss_value(&w, &[a], &[cl], &[]).is_err());
    }

    #[test]
    fn total_is_sum() {
        assert_eq!(total_loss_value(&LossWeights::TRAIN, 2.5, 1.5), 4.0);
    }

    #[test]
    fn weights_are_validated() {
        assert!(LossWeights::new(1.2, 0.0).is_err());
        assert!(LossWeights::new(0.5, -0.1).is_err());
    }

    #[test]
    fn lid_targets_ignore_eos_and_mirror() {
        let z = [Language::Mandarin, Language::English, Language::English];
        assert_eq!(lid_ce_targets(&z, Direction::L2r), vec![0, 1, 1, IGNORE_ID]);
        assert_eq!(lid_ce_targets(&z, Direction::R2l), vec![1, 1, 0, IGNORE_ID]);
    }
}
