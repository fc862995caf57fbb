//! Log-space CTC forward/backward.

use super::{check_labels, BLANK};
use crate::error::{Error, Result};
use crate::numerics::{log_add, Graph, Tensor, Var};

/// Minimum frame count for `target`: one per label plus one blank between
/// every pair of equal neighbours.
pub fn ctc_required_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

struct Lattice {
    ext: Vec<usize>,
    log_alpha: Vec<f64>,
    log_p: f64,
}

fn extended(target: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &l in target {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

fn can_skip(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

fn validate(lp: &Tensor, target: &[usize]) -> Result<(usize, usize)> {
    let (t, v) = lp.dims2("ctc_loss")?;
    check_labels(target, v)?;
    let required = ctc_required_frames(target);
    if t < required.max(1) {
        return Err(Error::InfeasibleCtc {
            frames: t,
            target_len: target.len(),
            required: required.max(1),
        });
    }
    Ok((t, v))
}

fn forward(lp: &Tensor, target: &[usize]) -> Result<Lattice> {
    let (t_len, v) = validate(lp, target)?;
    let ext = extended(target);
    let s_len = ext.len();
    let d = lp.data();
    let mut alpha = vec![f64::NEG_INFINITY; t_len * s_len];
    alpha[0] = d[BLANK];
    if s_len > 1 {
        alpha[1] = d[ext[1]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(&ext, s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = a + d[t * v + ext[s]];
        }
    }
    let last = &alpha[(t_len - 1) * s_len..];
    let log_p = if s_len > 1 {
        log_add(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };
    Ok(Lattice {
        ext,
        log_alpha: alpha,
        log_p,
    })
}

/// `-log p(target | grid)` without building a graph node.
pub fn ctc_neg_log_likelihood(log_probs: &Tensor, target: &[usize]) -> Result<f64> {
    Ok(-forward(log_probs, target)?.log_p)
}

/// CTC negative log-likelihood of `target` under the log-normalised grid `log_probs: [T×V]`.
///
/// Differentiable with respect to `log_probs`; the gradient is minus the
/// per-frame label occupancy from the forward-backward recursion.
pub fn ctc_loss(g: &mut Graph, log_probs: Var, target: &[usize]) -> Result<Var> {
    let lp = g.value(log_probs);
    let lat = forward(lp, target)?;
    if !lat.log_p.is_finite() {
        return Err(Error::NonFinite(format!(
            "ctc path probability underflowed for target of length {}",
            target.len()
        )));
    }
    let (t_len, v) = (lp.shape()[0], lp.shape()[1]);
    let ext = &lat.ext;
    let s_len = ext.len();
    let d = lp.data();

    let mut beta = vec![f64::NEG_INFINITY; s_len];
    let mut next = vec![f64::NEG_INFINITY; s_len];
    beta[s_len - 1] = d[(t_len - 1) * v + ext[s_len - 1]];
    if s_len > 1 {
        beta[s_len - 2] = d[(t_len - 1) * v + ext[s_len - 2]];
    }
    let mut grad = vec![0.0; t_len * v];
    for t in (0..t_len).rev() {
        if t < t_len - 1 {
            for s in 0..s_len {
                let mut b = beta[s];
                if s + 1 < s_len {
                    b = log_add(b, beta[s + 1]);
                }
                if s + 2 < s_len && can_skip(ext, s + 2) {
                    b = log_add(b, beta[s + 2]);
                }
                next[s] = b + d[t * v + ext[s]];
            }
            std::mem::swap(&mut beta, &mut next);
        }
        for s in 0..s_len {
            let a = lat.log_alpha[t * s_len + s];
            if a == f64::NEG_INFINITY || beta[s] == f64::NEG_INFINITY {
                continue;
            }
            let k = ext[s];
            grad[t * v + k] -= (a + beta[s] - d[t * v + k] - lat.log_p).exp();
        }
    }
    let grad = Tensor::new(vec![t_len, v], grad)?;
    g.scalar_with_grad(log_probs, -lat.log_p, grad)
}
