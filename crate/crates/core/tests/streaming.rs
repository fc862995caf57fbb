mod common;

use std::sync::Arc;

use common::*;
use rand::Rng;
use scmoe::encoder::{ChunkSpec, Subsampling};
use scmoe::model::{LossWeights, Model, ModelConfig, StreamingSession};
use scmoe::numerics::Tensor;

const SPECS: [(i64, i64); 3] = [(16, 8), (4, 2), (1, 0)];

fn model(subsampling: Subsampling, seed: u64) -> Arc<Model> {
    let cfg = ModelConfig {
        feat_dim: 8,
        d_model: 16,
        ffn_dim: 16,
        heads: 2,
        subsampling,
        ..ModelConfig::default()
    };
    Arc::new(Model::new(cfg, seed).unwrap())
}

fn rows(t: &Tensor, n: usize) -> &[f64] {
    &t.data()[..n * t.shape()[1]]
}

/// Re-encoding each received prefix reproduces the full masked forward on the chunks it covers.
fn check_incremental(model: &Model, x: &Tensor) {
    let sub = model.config.subsampling;
    let t_out = sub.output_len(x.shape()[0]).unwrap();
    for (c, l) in SPECS {
        let spec = ChunkSpec::new(c, l).unwrap();
        let full = model.encode(x, spec).unwrap();
        let chunks = t_out.div_ceil(c as usize);
        for k in 1..=chunks {
            let out = (k * c as usize).min(t_out);
            let need = sub.input_len_for(out).min(x.shape()[0]);
            let part = model.encode(&x.slice_rows(0, need), spec).unwrap();
            assert!(part.memory.shape()[0] >= out);
            let d = max_abs_diff(rows(&part.memory, out), rows(&full.memory, out));
            assert!(d < 1e-5, "spec {spec:?} chunk {k}: {d}");
            let d = max_abs_diff(rows(part.grid.log_probs(), out), rows(full.grid.log_probs(), out));
            assert!(d < 1e-5, "spec {spec:?} chunk {k} posteriors: {d}");
            for (a, b) in part.slot_indices.iter().zip(&full.slot_indices) {
                assert_eq!(a[..out], b[..out]);
            }
        }
    }
}

#[test]
fn chunked_forward_matches_masked_forward() {
    let m = model(Subsampling::None, 1);
    let mut r = rng(2);
    for t in [1, 5, 16, 17, 40] {
        check_incremental(&m, &Tensor::randn(&[t, 8], 1.0, &mut r));
    }
}

#[test]
fn chunked_forward_matches_with_subsampling() {
    let m = model(Subsampling::Conv4, 3);
    let mut r = rng(4);
    for t in [7, 30, 75] {
        check_incremental(&m, &Tensor::randn(&[t, 8], 1.0, &mut r));
    }
}

#[test]
fn first_partial_after_exactly_one_chunk() {
    let mut r = rng(5);
    for sub in [Subsampling::None, Subsampling::Conv4] {
        let m = model(sub, 6);
        for (c, l) in SPECS {
            let spec = ChunkSpec::new(c, l).unwrap();
            let x = Tensor::randn(&[80, 8], 1.0, &mut r);
            let mut s = StreamingSession::new(Arc::clone(&m), spec, 2, LossWeights::DECODE).unwrap();
            let first = sub.input_len_for(c as usize);
            for t in 0..80 {
                let got = s.push(&x.slice_rows(t, t + 1)).unwrap();
                if t + 1 < first {
                    assert!(got.is_empty());
                } else if t + 1 == first {
                    assert_eq!(got.len(), 1);
                    assert_eq!(got[0].chunk, 1);
                    assert_eq!(got[0].input_frames, first);
                }
            }
            let outcome = s.finish().unwrap();
            assert!(outcome.partials.windows(2).all(|w| w[1].chunk == w[0].chunk + 1));
        }
    }
}

#[test]
fn later_frames_never_change_earlier_partials() {
    let m = model(Subsampling::None, 7);
    let mut r = rng(8);
    for (c, l) in SPECS {
        let spec = ChunkSpec::new(c, l).unwrap();
        let x = Tensor::randn(&[48, 8], 1.0, &mut r);
        let cut = r.random_range(1..48);
        let mut tail = x.slice_rows(0, cut).data().to_vec();
        tail.extend(Tensor::randn(&[48 - cut, 8], 3.0, &mut r).data());
        let y = Tensor::new(vec![48, 8], tail).unwrap();

        let run = |input: &Tensor| {
            let mut s = StreamingSession::new(Arc::clone(&m), spec, 2, LossWeights::DECODE).unwrap();
            s.push(input).unwrap();
            s.partials().to_vec()
        };
        let (a, b) = (run(&x), run(&y));
        for (pa, pb) in a.iter().zip(&b) {
            if pa.input_frames <= cut {
                assert_eq!(pa, pb);
            }
        }
        let truncated = run(&x.slice_rows(0, cut));
        assert_eq!(truncated[..], a[..truncated.len()]);
    }
}

#[test]
fn future_frames_do_not_reach_masked_outputs() {
    let m = model(Subsampling::None, 9);
    let mut r = rng(10);
    let spec = ChunkSpec::new(4, 1).unwrap();
    let x = Tensor::randn(&[20, 8], 1.0, &mut r);
    let base = m.encode(&x, spec).unwrap();
    for frame in [4usize, 9, 19] {
        let mut y = x.clone();
        for v in &mut y.data_mut()[frame * 8..(frame + 1) * 8] {
            *v += 5.0;
        }
        let moved = m.encode(&y, spec).unwrap();
        let chunk_start = frame / 4 * 4;
        let d = max_abs_diff(rows(&moved.memory, chunk_start), rows(&base.memory, chunk_start));
        assert_eq!(d, 0.0, "frame {frame} leaked into earlier chunks");
    }
}

#[test]
fn stream_final_equals_offline_decode() {
    let m = model(Subsampling::None, 11);
    let mut r = rng(12);
    for (c, l) in SPECS {
        let spec = ChunkSpec::new(c, l).unwrap();
        let x = Tensor::randn(&[37, 8], 1.0, &mut r);
        let mut s = StreamingSession::new(Arc::clone(&m), spec, 4, LossWeights::DECODE).unwrap();
        for t in (0..37).step_by(5) {
            s.push(&x.slice_rows(t, (t + 5).min(37))).unwrap();
        }
        let outcome = s.finish().unwrap();
        let offline = m.attention_rescoring_decode(&x, spec, 4, &LossWeights::DECODE).unwrap();
        assert_eq!(outcome.result, offline);
    }
}
