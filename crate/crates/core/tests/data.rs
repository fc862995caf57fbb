mod common;

use common::*;
use proptest::prelude::*;
use scmoe::data::{
    attributed_edits, compute_metrics, edit_distance, generate_corpus, language_labels, lid_frame_accuracy, read_corpus,
    switch_rate, write_corpus, CorpusConfig, VocabMap,
};
use scmoe::routing::Language;
use scmoe::Error;

fn small(seed: u64) -> CorpusConfig {
    CorpusConfig {
        n_train: 30,
        n_dev: 5,
        n_test: 7,
        seed,
        ..CorpusConfig::default()
    }
}

#[test]
fn generation_is_a_pure_function_of_config() {
    let a = generate_corpus(&small(3)).unwrap();
    let b = generate_corpus(&small(3)).unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.test, b.test);
    assert_ne!(a.train, generate_corpus(&small(4)).unwrap().train);
    assert_eq!((a.train.len(), a.dev.len(), a.test.len()), (30, 5, 7));

    let dir = tempfile::tempdir().unwrap();
    let (d1, d2) = (dir.path().join("a"), dir.path().join("b"));
    let m1 = write_corpus(&a, &d1).unwrap();
    let m2 = write_corpus(&b, &d2).unwrap();
    assert_eq!(m1, m2);
    for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "manifest.json"] {
        assert_eq!(std::fs::read(d1.join(f)).unwrap(), std::fs::read(d2.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn utterances_are_consistent() {
    let c = generate_corpus(&small(5)).unwrap();
    let vocab = c.vocab();
    for u in c.train.iter().chain(&c.dev).chain(&c.test) {
        u.validate(&vocab, 32).unwrap();
        assert_eq!(u.frame_languages().len(), u.frames());
        assert_eq!(language_labels(&u.tokens, &vocab).unwrap(), u.langs);
        assert!((4..=12).contains(&u.tokens.len()));
        assert!(u.token_frames.iter().all(|n| (2..=4).contains(n)));
        assert!(u.tokens.windows(2).all(|w| w[0] != w[1]));
    }
}

#[test]
fn switch_rate_matches_probability() {
    for p in [0.1, 0.3, 0.7] {
        let mut cfg = small(11);
        cfg.n_train = 2000;
        cfg.switch_prob = p;
        let c = generate_corpus(&cfg).unwrap();
        let rate = switch_rate(&c.train);
        assert!((rate - p).abs() <= 0.02, "p={p} rate={rate}");
    }
}

#[test]
fn written_corpus_reads_back_and_detects_tampering() {
    let c = generate_corpus(&small(6)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&c, dir.path()).unwrap();
    let back = read_corpus(dir.path()).unwrap();
    assert_eq!(back.train, c.train);
    assert_eq!(back.config, c.config);

    let path = dir.path().join("dev.jsonl");
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push('\n');
    std::fs::write(&path, text).unwrap();
    assert!(matches!(read_corpus(dir.path()), Err(Error::Data(_))));
    assert!(matches!(read_corpus(&dir.path().join("missing")), Err(Error::Data(_))));
}

#[test]
fn vocabulary_layout() {
    let v = VocabMap::new(10);
    assert_eq!(v.vocab_size(), 22);
    assert_eq!(v.sos_eos(), 21);
    assert_eq!(v.token(Language::Mandarin, 0), 1);
    assert_eq!(v.token(Language::English, 9), 20);
    assert_eq!(v.language_of(10).unwrap(), Language::Mandarin);
    assert_eq!(v.language_of(11).unwrap(), Language::English);
    assert!(v.language_of(0).is_err());
    assert!(v.language_of(21).is_err());
}

#[test]
fn lid_accuracy_excludes_blank_frames() {
    use Language::*;
    let acc = lid_frame_accuracy(&[0, 1, 2, 2, 0], &[Mandarin, Mandarin, English, Mandarin, English]).unwrap();
    assert_eq!((acc.correct, acc.counted, acc.blank_frames), (2, 3, 2));
    assert!((acc.accuracy - 2.0 / 3.0).abs() < 1e-15);
    assert!(lid_frame_accuracy(&[1], &[]).is_err());
}

#[test]
fn metrics_examples() {
    let v = VocabMap::new(3);
    let refs = vec![vec![1, 2, 4], vec![5, 6], vec![1]];
    let hyps = vec![vec![1, 4], vec![5, 6, 2], vec![1]];
    let r = compute_metrics(&refs, &hyps, &v).unwrap();
    assert_eq!(r.ref_tokens, 6);
    assert_eq!(r.edits.total(), 2);
    assert!((r.mer - 2.0 / 6.0).abs() < 1e-15);
    assert_eq!(r.mandarin.edits.deletions, 1);
    assert_eq!(r.mandarin.edits.insertions, 1);
    assert_eq!(r.english.edits.total(), 0);
    assert_eq!((r.code_switched.utterances, r.mono_english.utterances, r.mono_mandarin.utterances), (1, 1, 1));
    assert!(compute_metrics(&refs, &hyps[..2], &v).is_err());
}

proptest! {
    #[test]
    fn edit_distance_equals_recursive_oracle(
        a in prop::collection::vec(1usize..7, 0..=6),
        b in prop::collection::vec(1usize..7, 0..=6),
    ) {
        let d = edit_distance(&a, &b);
        prop_assert_eq!(d, edit_distance_brute(&a, &b));
        let v = VocabMap::new(3);
        let [ma, en] = attributed_edits(&a, &b, &v).unwrap();
        prop_assert_eq!(ma.total() + en.total(), d);
        let ref_ma = a.iter().filter(|&&t| t <= 3).count();
        prop_assert!(ma.substitutions + ma.deletions <= ref_ma);
        prop_assert!(en.substitutions + en.deletions <= a.len() - ref_ma);
        let r = compute_metrics(&[a.clone()], &[b.clone()], &v).unwrap();
        prop_assert_eq!(r.edits.total(), d);
    }
}
