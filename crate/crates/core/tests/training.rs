mod common;

use common::*;
use scmoe::cli::{epoch_order, make_trainer, train_loop, CheckpointDir, LogEntry};
use scmoe::data::generate_corpus;
use scmoe::model::{load_checkpoint, lr_at, read_checkpoint, write_checkpoint, StepReport};
use scmoe::Error;

fn steps(log: &[LogEntry]) -> Vec<StepReport> {
    log.iter()
        .filter_map(|e| match e {
            LogEntry::Step(s) => Some(s.clone()),
            _ => None,
        })
        .collect()
}

#[test]
fn resumed_run_repeats_uninterrupted_run() {
    let cfg = tiny_run_config();
    let corpus = generate_corpus(&cfg.data.generate).unwrap();

    let mut full_log = Vec::new();
    let mut full = make_trainer(&cfg, None).unwrap();
    train_loop(&mut full, &cfg, &corpus, None, &mut |e| {
        full_log.push(e.clone());
        Ok(())
    })
    .unwrap();

    // Stop after 3 of 8 steps, mid-epoch.
    let mut first_log = Vec::new();
    let mut part = make_trainer(&cfg, None).unwrap();
    let stopped = train_loop(&mut part, &cfg, &corpus, None, &mut |e| {
        first_log.push(e.clone());
        if matches!(e, LogEntry::Step(s) if s.step == 3) {
            return Err(Error::Data("stop".into()));
        }
        Ok(())
    });
    assert!(stopped.is_err());
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &part.model, Some(&part.state)).unwrap();
    let resumed = read_checkpoint(&buf[..]).unwrap().into_model().unwrap();
    let mut rest = make_trainer(&cfg, Some(resumed)).unwrap();
    let mut rest_log = Vec::new();
    train_loop(&mut rest, &cfg, &corpus, None, &mut |e| {
        rest_log.push(e.clone());
        Ok(())
    })
    .unwrap();

    let joined: Vec<StepReport> = steps(&first_log).into_iter().chain(steps(&rest_log)).collect();
    assert_eq!(joined, steps(&full_log));
    for id in full.model.params.ids() {
        assert_eq!(full.model.params.get(id), rest.model.params.get(id));
    }
}

#[test]
fn log_carries_every_loss_component() {
    let cfg = tiny_run_config();
    let corpus = generate_corpus(&cfg.data.generate).unwrap();
    let mut t = make_trainer(&cfg, None).unwrap();
    let mut log = Vec::new();
    let summary = train_loop(&mut t, &cfg, &corpus, None, &mut |e| {
        log.push(serde_json::to_value(e).unwrap());
        Ok(())
    })
    .unwrap();
    assert_eq!(summary.steps, 8);
    let step = log.iter().find(|v| v["kind"] == "step").unwrap();
    for k in ["total", "asr", "lid", "asr_ctc", "asr_ce_l2r", "asr_ce_r2l", "lid_ctc", "lid_ce_l2r", "lid_ce_r2l"] {
        assert!(!step["loss"][k].is_null(), "missing {k}");
    }
    assert_eq!(step["loss"]["lid_ctc"].as_array().unwrap().len(), 1);
    assert!(step["routing"].is_object() || step["routing"].is_array());
    assert_eq!(log.iter().filter(|v| v["kind"] == "step").count(), 8);
    assert_eq!(log.iter().filter(|v| v["kind"] == "epoch").count(), 2);
}

#[test]
fn baseline_and_moe_train_from_one_corpus() {
    let mut cfg = tiny_run_config();
    cfg.train.epochs = 1;
    let corpus = generate_corpus(&cfg.data.generate).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for model in [cfg.model.clone(), cfg.model.dense_baseline()] {
        let mut c = cfg.clone();
        c.model = model;
        let mut t = make_trainer(&c, None).unwrap();
        let s = train_loop(&mut t, &c, &corpus, Some(&CheckpointDir(dir.path().to_path_buf())), &mut |_| Ok(())).unwrap();
        assert!(s.last_loss.unwrap().is_finite());
        let (m, st) = load_checkpoint(&dir.path().join("final.ckpt")).unwrap();
        assert_eq!(m.config, c.model);
        assert_eq!(st.unwrap().step, 4);
        assert!(dir.path().join("best.ckpt").exists());
    }
}

#[test]
fn epoch_order_is_a_seeded_permutation() {
    let a = epoch_order(50, 3, 0);
    let mut sorted = a.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    assert_eq!(a, epoch_order(50, 3, 0));
    assert_ne!(a, epoch_order(50, 3, 1));
    assert_ne!(a, epoch_order(50, 4, 0));
}

#[test]
fn warmup_peaks_then_decays() {
    let cfg = tiny_run_config().optimizer;
    let w = cfg.warmup_steps;
    assert!((lr_at(&cfg, w) - cfg.peak_lr).abs() < 1e-15);
    assert!((lr_at(&cfg, w / 2) - cfg.peak_lr / 2.0).abs() < 1e-15);
    assert!((lr_at(&cfg, 4 * w) - cfg.peak_lr / 2.0).abs() < 1e-15);
}

#[test]
fn non_finite_features_stop_training_with_numeric_error() {
    let cfg = tiny_run_config();
    let mut corpus = generate_corpus(&cfg.data.generate).unwrap();
    corpus.train[0].features.data_mut()[0] = f64::NAN;
    let mut t = make_trainer(&cfg, None).unwrap();
    let mut c = cfg.clone();
    c.train.batch_size = 16;
    let err = train_loop(&mut t, &c, &corpus, None, &mut |_| Ok(())).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
}
