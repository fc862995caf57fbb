//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scmoe::model::ModelConfig;
use scmoe::nn::{Ctx, ParamStore};
use scmoe::numerics::{grad_check, relative_error, GradCheckReport, Graph, Tensor, Var};
use scmoe::routing::{route, Router, StreamingMoeLayer};
use scmoe::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Row-normalised random log-probabilities `[t×v]`.
pub fn random_log_grid(t: usize, v: usize, rng: &mut impl Rng) -> Tensor {
    let mut data = Vec::with_capacity(t * v);
    for _ in 0..t {
        let row: Vec<f64> = (0..v).map(|_| rng.random_range(-3.0..3.0)).collect();
        let z = logsumexp(&row);
        data.extend(row.iter().map(|x| x - z));
    }
    Tensor::new(vec![t, v], data).unwrap()
}

/// Collapses repeats, then drops blanks (id 0).
pub fn ctc_collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != 0 {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// `-log p(target)` by enumerating all `V^T` alignments; `None` when no path collapses to `target`.
pub fn ctc_brute_force(lp: &Tensor, target: &[usize]) -> Option<f64> {
    let (t, v) = (lp.shape()[0], lp.shape()[1]);
    let mut scores = Vec::new();
    let mut path = vec![0usize; t];
    for code in 0..v.pow(t as u32) {
        let mut c = code;
        for p in path.iter_mut() {
            *p = c % v;
            c /= v;
        }
        if ctc_collapse(&path) == target {
            scores.push(path.iter().enumerate().map(|(i, &k)| lp.data()[i * v + k]).sum::<f64>());
        }
    }
    (!scores.is_empty()).then(|| -logsumexp(&scores))
}

/// All label sequences over `1..v` with length `<= max_len`.
pub fn all_targets(v: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for k in 1..v {
                let mut n: Vec<usize> = s.clone();
                n.push(k);
                next.push(n);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Input-gradient check of a layer built on a [`Ctx`] over `params`.
pub fn ctx_grad_check<F>(params: &ParamStore, x: &Tensor, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Ctx<'_>, Var) -> Result<Var>,
{
    grad_check(
        |g: &mut Graph, xv: Var| {
            let mut ctx = Ctx::eval(params);
            std::mem::swap(&mut ctx.g, g);
            let out = f(&mut ctx, xv);
            std::mem::swap(&mut ctx.g, g);
            out
        },
        x,
        1e-5,
        1e-4,
    )
}

#[derive(Debug)]
pub struct ParamCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

/// Central-difference check of every parameter gradient of the scalar built by `f`.
///
/// At most `per_param` entries of each tensor are perturbed (evenly spaced).
/// `f` also returns a routing signature that must not change under perturbation.
pub fn param_grad_check<F>(params: &ParamStore, step: f64, per_param: usize, mut f: F) -> Result<ParamCheck>
where
    F: FnMut(&mut Ctx<'_>) -> Result<(Var, Vec<usize>)>,
{
    let mut ctx = Ctx::train(params, None);
    let (loss, routes) = f(&mut ctx)?;
    ctx.g.backward(loss)?;
    let grads = ctx.param_grads();
    drop(ctx);

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut ctx = Ctx::eval(store);
        let (l, r) = f(&mut ctx)?;
        assert_eq!(r, routes, "routing changed under perturbation");
        Ok(ctx.g.value(l).item())
    };
    let mut report = ParamCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    let mut work = params.clone();
    for (i, id) in params.ids().enumerate() {
        let n = params.get(id).len();
        let stride = n.div_ceil(per_param).max(1);
        for j in (0..n).step_by(stride) {
            let orig = params.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads[i].as_ref().map_or(0.0, |g| g.data()[j]);
            let e = relative_error(analytic, numeric);
            report.checked += 1;
            if e > report.max_rel_error || e.is_nan() {
                report.max_rel_error = e;
                report.worst = format!("{}[{j}]: analytic {analytic} numeric {numeric}", params.entry(id).name);
            }
        }
    }
    Ok(report)
}

/// Evaluates every expert on every frame, then keeps the routed one scaled by its gate.
pub fn dense_moe_oracle(params: &ParamStore, layer: &StreamingMoeLayer, router: &Router, x: &Tensor, h: &Tensor) -> Tensor {
    let mut ctx = Ctx::eval(params);
    let xv = ctx.g.constant(x.clone());
    let hv = ctx.g.constant(h.clone());
    let decision = route(&mut ctx, router, hv).unwrap();
    let e = layer.experts.len();
    let all: Vec<Tensor> = layer
        .experts
        .iter()
        .map(|ex| {
            let y = ex.forward(&mut ctx, xv).unwrap();
            ctx.g.value(y).clone()
        })
        .collect();
    let probs = ctx.g.value(decision.probs).clone();
    let (t, d) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; t * d];
    for r in 0..t {
        let k = decision.indices[r];
        let gate = probs.data()[r * e + k];
        for c in 0..d {
            out[r * d + c] = all[k].data()[r * d + c] * gate;
        }
    }
    Tensor::new(vec![t, d], out).unwrap()
}

/// Tiny model for whole-model checks.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        feat_dim: 4,
        vocab_size: 6,
        d_model: 8,
        ffn_dim: 8,
        heads: 2,
        conv_kernel: 3,
        m: 1,
        h: 1,
        k: 1,
        g: 1,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

/// Levenshtein distance by plain recursion.
pub fn edit_distance_brute(a: &[usize], b: &[usize]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = edit_distance_brute(ra, rb) + usize::from(x != y);
            let del = edit_distance_brute(ra, b) + 1;
            let ins = edit_distance_brute(a, rb) + 1;
            sub.min(del).min(ins)
        }
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Small run: 3 tokens per language, 8 features, 16/4/4 utterances.
pub fn tiny_run_config() -> scmoe::cli::RunConfig {
    let mut cfg = scmoe::cli::RunConfig::default();
    let lang = &mut cfg.data.generate.language;
    lang.tokens_per_language = 3;
    lang.feat_dim = 8;
    lang.max_tokens = 6;
    cfg.data.generate.n_train = 16;
    cfg.data.generate.n_dev = 4;
    cfg.data.generate.n_test = 4;
    cfg.model = ModelConfig {
        feat_dim: 8,
        vocab_size: 8,
        d_model: 8,
        ffn_dim: 16,
        heads: 2,
        conv_kernel: 3,
        m: 1,
        h: 1,
        ..ModelConfig::default()
    };
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    cfg.decode.beam = 3;
    cfg
}
