//! Sequence and classification losses plus CTC decoders.
//!
//! Index 0 is the CTC blank in every alphabet (ASR vocabulary and the
//! three-way language alphabet alike).

mod cross_entropy;
mod ctc;
mod decode;

pub use cross_entropy::{cross_entropy, IGNORE_ID};
pub use ctc::{ctc_loss, ctc_neg_log_likelihood, ctc_required_frames};
pub use decode::{ctc_greedy_decode, ctc_prefix_beam_search, Hypothesis};

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, Tensor};

pub const BLANK: usize = 0;

/// Non-blank symbol ids over an alphabet whose index 0 is blank.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelSequence(Vec<usize>);

impl LabelSequence {
    pub fn new(ids: Vec<usize>, alphabet: usize) -> Result<Self> {
        check_labels(&ids, alphabet)?;
        Ok(LabelSequence(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn into_ids(self) -> Vec<usize> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Deref for LabelSequence {
    type Target = [usize];
    fn deref(&self) -> &[usize] {
        &self.0
    }
}

pub(crate) fn check_labels(ids: &[usize], alphabet: usize) -> Result<()> {
    match ids.iter().find(|&&l| l == BLANK || l >= alphabet) {
        Some(&label) => Err(Error::LabelOutOfRange { label, alphabet }),
        None => Ok(()),
    }
}

/// Per-frame log posteriors `[T×V]`, each row log-normalised.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorGrid(Tensor);

impl PosteriorGrid {
    pub const ROW_TOLERANCE: f64 = 1e-10;

    pub fn from_log_probs(t: Tensor) -> Result<Self> {
        let (_, v) = t.dims2("posterior_grid")?;
        if v == 0 {
            return Err(Error::invalid("posterior_grid", "empty alphabet"));
        }
        for r in 0..t.shape()[0] {
            let z = log_sum_exp(t.row(r));
            if z.abs() > Self::ROW_TOLERANCE {
                return Err(Error::invalid(
                    "posterior_grid",
                    format!("row {r} log-sums to {z}, not 0"),
                ));
            }
        }
        Ok(PosteriorGrid(t))
    }

    /// Log-softmax of raw scores, row by row.
    pub fn from_logits(t: &Tensor) -> Result<Self> {
        let (rows, v) = t.dims2("posterior_grid")?;
        let mut data = Vec::with_capacity(rows * v);
        for r in 0..rows {
            let z = log_sum_exp(t.row(r));
            data.extend(t.row(r).iter().map(|x| x - z));
        }
        Ok(PosteriorGrid(Tensor::new(vec![rows, v], data)?))
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn alphabet(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn log_probs(&self) -> &Tensor {
        &self.0
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.0.row(t)
    }
}
