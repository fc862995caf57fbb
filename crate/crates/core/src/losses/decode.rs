use std::collections::HashMap;

use super::{LabelSequence, PosteriorGrid, BLANK};
use crate::error::{Error, Result};
use crate::numerics::log_add;

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Total log-probability of every alignment collapsing to `tokens`.
    pub log_score: f64,
}

/// Per-frame argmax (lowest index on ties), repeats collapsed, blanks removed.
pub fn ctc_greedy_decode(grid: &PosteriorGrid) -> LabelSequence {
    let mut out = Vec::new();
    let mut prev = BLANK;
    for t in 0..grid.frames() {
        let row = grid.row(t);
        let best = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0;
        if best != BLANK && best != prev {
            out.push(best);
        }
        prev = best;
    }
    LabelSequence(out)
}

#[derive(Clone, Copy)]
struct PrefixScore {
    blank: f64,
    non_blank: f64,
}

impl PrefixScore {
    const EMPTY: PrefixScore = PrefixScore {
        blank: f64::NEG_INFINITY,
        non_blank: f64::NEG_INFINITY,
    };

    fn total(self) -> f64 {
        log_add(self.blank, self.non_blank)
    }
}

fn ranked(beams: HashMap<Vec<usize>, PrefixScore>) -> Vec<(Vec<usize>, PrefixScore)> {
    let mut v: Vec<_> = beams.into_iter().collect();
    v.sort_by(|a, b| {
        b.1.total()
            .total_cmp(&a.1.total())
            .then_with(|| a.0.cmp(&b.0))
    });
    v
}

/// CTC prefix beam search keeping the `beam` most probable prefixes after each frame.
///
/// Each prefix tracks the probability of ending in blank and in its last
/// label separately, so scores are full prefix marginals. Returns at most
/// `beam` hypotheses, best first.
pub fn ctc_prefix_beam_search(grid: &PosteriorGrid, beam: usize) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::ZeroBeam);
    }
    let v = grid.alphabet();
    let mut beams: Vec<(Vec<usize>, PrefixScore)> = vec![(
        Vec::new(),
        PrefixScore {
            blank: 0.0,
            non_blank: f64::NEG_INFINITY,
        },
    )];
    for t in 0..grid.frames() {
        let row = grid.row(t);
        let mut next: HashMap<Vec<usize>, PrefixScore> = HashMap::new();
        for (prefix, score) in &beams {
            let stay = next.entry(prefix.clone()).or_insert(PrefixScore::EMPTY);
            stay.blank = log_add(stay.blank, score.total() + row[BLANK]);
            let last = prefix.last().copied();
            for (c, &lp) in row.iter().enumerate().take(v).skip(1) {
                let mut extended = prefix.clone();
                extended.push(c);
                if last == Some(c) {
                    let same = next.entry(prefix.clone()).or_insert(PrefixScore::EMPTY);
                    same.non_blank = log_add(same.non_blank, score.non_blank + lp);
                    let ext = next.entry(extended).or_insert(PrefixScore::EMPTY);
                    ext.non_blank = log_add(ext.non_blank, score.blank + lp);
                } else {
                    let ext = next.entry(extended).or_insert(PrefixScore::EMPTY);
                    ext.non_blank = log_add(ext.non_blank, score.total() + lp);
                }
            }
        }
        beams = ranked(next);
        beams.retain(|(_, s)| s.total() > f64::NEG_INFINITY);
        beams.truncate(beam);
    }
    Ok(beams
        .into_iter()
        .map(|(tokens, s)| Hypothesis {
            tokens,
            log_score: s.total(),
        })
        .collect())
}
