mod common;

use common::*;
use scmoe::decoder::{causal_mask, BiDecoder, Direction};
use scmoe::encoder::{make_chunk_mask, ChunkSpec};
use scmoe::losses::{cross_entropy, ctc_loss, IGNORE_ID};
use scmoe::model::{LossWeights, Model};
use scmoe::nn::{ConvModule, Ctx, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention, ParamRole, ParamStore};
use scmoe::numerics::{Tensor, Var};
use scmoe::routing::{route, Language, Router, StreamingMoeLayer};
use scmoe::Result;

const TOL: f64 = 1e-4;

/// Scalar `sum(y ∘ w)` for a fixed random `w`, so every output entry matters.
fn project(ctx: &mut Ctx<'_>, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(ctx.g.shape(y), 1.0, &mut rng(seed));
    let wv = ctx.g.constant(w);
    let p = ctx.g.mul(y, wv)?;
    Ok(ctx.g.sum(p))
}

fn store_with<T>(seed: u64, build: impl FnOnce(&mut Init<'_>) -> T) -> (ParamStore, T) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let layer = build(&mut Init {
        store: &mut store,
        rng: &mut r,
    });
    (store, layer)
}

fn check_both<F>(name: &str, params: &ParamStore, x: &Tensor, mut f: F)
where
    F: FnMut(&mut Ctx<'_>, Var) -> Result<(Var, Vec<usize>)>,
{
    let input = ctx_grad_check(params, x, |ctx, xv| Ok(f(ctx, xv)?.0)).unwrap();
    assert!(input.passed, "{name} input gradient: max rel error {}", input.max_rel_error);
    let p = param_grad_check(params, 1e-6, 64, |ctx| {
        let xv = ctx.g.constant(x.clone());
        f(ctx, xv)
    })
    .unwrap();
    assert!(p.max_rel_error < TOL, "{name} parameter gradient: {p:?}");
}

#[test]
fn linear() {
    let (params, l) = store_with(1, |i| Linear::new(i, "l", 5, 3, ParamRole::Dense));
    let x = Tensor::randn(&[4, 5], 1.0, &mut rng(2));
    check_both("linear", &params, &x, |ctx, xv| {
        let y = l.forward(ctx, xv)?;
        Ok((project(ctx, y, 3)?, vec![]))
    });
}

#[test]
fn layer_norm() {
    let (mut params, n) = store_with(1, |i| LayerNorm::new(i, "n", 6));
    *params.get_mut(n.gamma) = Tensor::randn(&[6], 1.0, &mut rng(7));
    *params.get_mut(n.beta) = Tensor::randn(&[6], 1.0, &mut rng(8));
    let x = Tensor::randn(&[3, 6], 1.0, &mut rng(2));
    check_both("layer_norm", &params, &x, |ctx, xv| {
        let y = n.forward(ctx, xv)?;
        Ok((project(ctx, y, 3)?, vec![]))
    });
}

#[test]
fn feed_forward() {
    let (params, f) = store_with(1, |i| FeedForward::new(i, "f", 4, 7, 0.0, ParamRole::Dense));
    let x = Tensor::randn(&[5, 4], 1.0, &mut rng(2));
    check_both("feed_forward", &params, &x, |ctx, xv| {
        let y = f.forward(ctx, xv)?;
        Ok((project(ctx, y, 3)?, vec![]))
    });
}

#[test]
fn attention_under_chunk_mask() {
    let (params, a) = store_with(1, |i| MultiHeadAttention::new(i, "a", 8, 2));
    let x = Tensor::randn(&[6, 8], 1.0, &mut rng(2));
    let mask = make_chunk_mask(6, ChunkSpec::new(2, 1).unwrap());
    check_both("attention", &params, &x, |ctx, xv| {
        let y = a.forward(ctx, xv, xv, &mask)?;
        Ok((project(ctx, y, 3)?, vec![]))
    });
}

#[test]
fn convolution_module() {
    let (params, c) = store_with(1, |i| ConvModule::new(i, "c", 4, 3));
    let x = Tensor::randn(&[6, 4], 1.0, &mut rng(2));
    check_both("conv", &params, &x, |ctx, xv| {
        let y = c.forward(ctx, xv)?;
        Ok((project(ctx, y, 3)?, vec![]))
    });
}

#[test]
fn router_logits_feed_lid_ctc() {
    let (params, r) = store_with(1, |i| Router::new(i, "r", 4, 3).unwrap());
    let x = Tensor::randn(&[5, 4], 1.0, &mut rng(2));
    check_both("router", &params, &x, |ctx, xv| {
        let d = route(ctx, &r, xv)?;
        let lp = ctx.g.log_softmax(d.logits, 1)?;
        Ok((ctc_loss(&mut ctx.g, lp, &[1, 2, 1])?, d.indices))
    });
}

#[test]
fn routed_experts_with_gate() {
    let (params, (layer, router)) = store_with(1, |i| {
        (StreamingMoeLayer::new(i, "moe", 0, 3, 4, 6, 0.0), Router::new(i, "r", 4, 3).unwrap())
    });
    let x = Tensor::randn(&[8, 4], 1.0, &mut rng(2));
    check_both("smoe", &params, &x, |ctx, xv| {
        let d = route(ctx, &router, xv)?;
        let y = layer.apply(ctx, &d, xv)?;
        Ok((project(ctx, y, 3)?, d.indices))
    });
}

#[test]
fn ctc_loss_gradient() {
    let x = Tensor::randn(&[5, 3], 1.0, &mut rng(4));
    let params = ParamStore::new();
    let r = ctx_grad_check(&params, &x, |ctx, xv| {
        let lp = ctx.g.log_softmax(xv, 1)?;
        ctc_loss(&mut ctx.g, lp, &[1, 1, 2])
    })
    .unwrap();
    assert!(r.passed, "ctc: {}", r.max_rel_error);
}

#[test]
fn smoothed_cross_entropy_gradient() {
    let x = Tensor::randn(&[4, 5], 1.0, &mut rng(4));
    let params = ParamStore::new();
    let r = ctx_grad_check(&params, &x, |ctx, xv| cross_entropy(&mut ctx.g, xv, &[1, 4, IGNORE_ID, 0], 0.1, IGNORE_ID)).unwrap();
    assert!(r.passed, "cross entropy: {}", r.max_rel_error);
}

#[test]
fn encoder_blocks_and_ctc_head() {
    let mut cfg = toy_config();
    cfg.m = 1;
    cfg.h = 1;
    let model = Model::new(cfg, 5).unwrap();
    let x = Tensor::randn(&[5, 4], 1.0, &mut rng(6));
    let spec = ChunkSpec::new(2, 1).unwrap();
    let p = param_grad_check(&model.params, 1e-6, 32, |ctx| {
        let enc = model.encoder.forward(ctx, &x, spec)?;
        let logits = model.ctc_head.forward(ctx, enc.features)?;
        let lp = ctx.g.log_softmax(logits, 1)?;
        let routes = enc.slot_indices.concat();
        Ok((ctc_loss(&mut ctx.g, lp, &[1, 3, 2])?, routes))
    })
    .unwrap();
    assert!(p.max_rel_error < TOL, "encoder: {p:?}");
}

#[test]
fn decoders_both_directions() {
    let mut cfg = toy_config();
    cfg.k = 1;
    cfg.g = 1;
    let (params, dec) = store_with(3, |i| BiDecoder::new(i, cfg.decoder_dims(), 0).unwrap());
    let memory = Tensor::randn(&[4, cfg.d_model], 1.0, &mut rng(6));
    assert_eq!(causal_mask(2), vec![true, false, true, true]);
    for dir in [Direction::L2r, Direction::R2l] {
        check_both("decoder", &params, &memory, |ctx, mv| {
            let out = dec.get(dir).forward(ctx, &[5, 1, 3], mv)?;
            let ce = cross_entropy(&mut ctx.g, out.logits, &[1, 3, 5], 0.1, IGNORE_ID)?;
            Ok((ce, out.indices.concat()))
        });
    }
}

#[test]
fn whole_toy_model() {
    let cfg = toy_config();
    let model = Model::new(cfg.clone(), 9).unwrap();
    let x = Tensor::randn(&[2, cfg.feat_dim], 1.0, &mut rng(10));
    let y = [1, 3];
    let z = [Language::Mandarin, Language::English];
    let p = param_grad_check(&model.params, 1e-6, usize::MAX, |ctx| {
        let out = model.loss(ctx, &x, &y, &z, ChunkSpec::FULL, &LossWeights::TRAIN)?;
        Ok((out.total, [out.slot_indices.concat(), out.router_indices.concat()].concat()))
    })
    .unwrap();
    assert_eq!(p.checked, model.params.total_len());
    assert!(p.max_rel_error < TOL, "toy model: {p:?}");
}
