//! Synthetic two-language corpus and evaluation metrics.
//!
//! Each language owns `K` tokens. A token emits 2–4 frames, each its
//! prototype plus Gaussian noise. Language A prototypes live on the first
//! half of the feature dimensions, language B on the second; token `k` of
//! either language is then pulled towards a shared vector `v_k` spanning
//! all dimensions:
//!
//! `prototype = (1 − c)·u_own + c·v_k`
//!
//! so confusability `c = 0` keeps the supports disjoint and `c = 1` makes
//! paired tokens identical. Token ids: blank 0, language A `1..=K`,
//! language B `K+1..=2K`, `<sos/eos>` `2K+1`. Consecutive tokens are never
//! equal, since identical frames give no cue for a boundary.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::routing::Language;

/// Token-id layout shared by corpus and model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabMap {
    pub tokens_per_language: usize,
}

impl VocabMap {
    pub fn new(tokens_per_language: usize) -> Self {
        VocabMap { tokens_per_language }
    }

    /// Blank, both token sets and `<sos/eos>`.
    pub fn vocab_size(&self) -> usize {
        2 * self.tokens_per_language + 2
    }

    pub fn sos_eos(&self) -> usize {
        2 * self.tokens_per_language + 1
    }

    /// Id of the `index`-th (0-based) token of `lang`.
    pub fn token(&self, lang: Language, index: usize) -> usize {
        debug_assert!(index < self.tokens_per_language);
        match lang {
            Language::Mandarin => 1 + index,
            Language::English => 1 + self.tokens_per_language + index,
        }
    }

    pub fn language_of(&self, id: usize) -> Result<Language> {
        let k = self.tokens_per_language;
        match id {
            _ if (1..=k).contains(&id) => Ok(Language::Mandarin),
            _ if (k + 1..=2 * k).contains(&id) => Ok(Language::English),
            _ => Err(Error::UnmappedToken(id)),
        }
    }
}

/// Per-token language labels of `y`.
pub fn language_labels(y: &[usize], vocab: &VocabMap) -> Result<Vec<Language>> {
    y.iter().map(|&t| vocab.language_of(t)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthLanguageSpec {
    pub tokens_per_language: usize,
    pub feat_dim: usize,
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub confusability: f64,
    pub noise: f64,
}

impl Default for SynthLanguageSpec {
    fn default() -> Self {
        SynthLanguageSpec {
            tokens_per_language: 10,
            feat_dim: 32,
            min_frames_per_token: 2,
            max_frames_per_token: 4,
            min_tokens: 4,
            max_tokens: 12,
            confusability: 0.3,
            noise: 0.5,
        }
    }
}

impl SynthLanguageSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.tokens_per_language < 2 {
            return bad(format!("need at least 2 tokens per language, got {}", self.tokens_per_language));
        }
        if self.feat_dim < 2 || self.feat_dim % 2 != 0 {
            return bad(format!("feat_dim {} must be even and >= 2", self.feat_dim));
        }
        if self.min_frames_per_token == 0 || self.min_frames_per_token > self.max_frames_per_token {
            return bad("frames-per-token range is empty".into());
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad("utterance-length range is empty".into());
        }
        if !(0.0..=1.0).contains(&self.confusability) {
            return bad(format!("confusability {} outside [0, 1]", self.confusability));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be >= 0", self.noise));
        }
        Ok(())
    }

    pub fn vocab(&self) -> VocabMap {
        VocabMap::new(self.tokens_per_language)
    }

    /// `[2K × F]` prototype table, rows in token-id order starting at id 1.
    pub fn prototypes(&self, seed: u64) -> Tensor {
        let (k, f) = (self.tokens_per_language, self.feat_dim);
        let half = f / 2;
        let mut rng = stream_rng(seed, 0);
        let mut own = |lo: usize| -> Vec<Vec<f64>> {
            (0..k)
                .map(|_| {
                    let mut v = vec![0.0; f];
                    for x in &mut v[lo..lo + half] {
                        *x = rng.random_range(0.0..2.0);
                    }
                    v
                })
                .collect()
        };
        let own_a = own(0);
        let own_b = own(half);
        let shared: Vec<Vec<f64>> = (0..k).map(|_| (0..f).map(|_| rng.random_range(0.0..2.0)).collect()).collect();
        let c = self.confusability;
        let mut data = Vec::with_capacity(2 * k * f);
        for table in [&own_a, &own_b] {
            for (u, v) in table.iter().zip(&shared) {
                data.extend(u.iter().zip(v).map(|(a, b)| (1.0 - c) * a + c * b));
            }
        }
        Tensor::new(vec![2 * k, f], data).expect("prototype table")
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[T×F]`.
    pub features: Tensor,
    pub tokens: Vec<usize>,
    pub langs: Vec<Language>,
    /// Frames emitted by each token; sums to `T`.
    pub token_frames: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceRecord {
    id: String,
    features: Vec<Vec<f64>>,
    tokens: Vec<usize>,
    langs: Vec<Language>,
    token_frames: Vec<usize>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }

    /// Language of every input frame, from the generation alignment.
    pub fn frame_languages(&self) -> Vec<Language> {
        self.langs
            .iter()
            .zip(&self.token_frames)
            .flat_map(|(&l, &n)| std::iter::repeat_n(l, n))
            .collect()
    }

    pub fn sample(&self) -> crate::model::Sample<'_> {
        crate::model::Sample {
            features: &self.features,
            tokens: &self.tokens,
            langs: &self.langs,
        }
    }

    pub fn validate(&self, vocab: &VocabMap, feat_dim: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Data(format!("{}: {m}", self.id)));
        let (t, f) = self
            .features
            .dims2("utterance")
            .map_err(|e| Error::Data(format!("{}: {e}", self.id)))?;
        if f != feat_dim {
            return bad(format!("feature dimension {f}, expected {feat_dim}"));
        }
        if self.langs.len() != self.tokens.len() || self.token_frames.len() != self.tokens.len() {
            return bad("tokens, langs and token_frames differ in length".into());
        }
        if self.token_frames.iter().sum::<usize>() != t {
            return bad(format!("alignment covers {} of {t} frames", self.token_frames.iter().sum::<usize>()));
        }
        if language_labels(&self.tokens, vocab).map_err(|e| Error::Data(e.to_string()))? != self.langs {
            return bad("language labels disagree with token ids".into());
        }
        if !self.features.is_finite() {
            return bad("non-finite features".into());
        }
        Ok(())
    }

    fn to_record(&self) -> UtteranceRecord {
        let t = self.frames();
        UtteranceRecord {
            id: self.id.clone(),
            features: (0..t).map(|r| self.features.row(r).to_vec()).collect(),
            tokens: self.tokens.clone(),
            langs: self.langs.clone(),
            token_frames: self.token_frames.clone(),
        }
    }

    fn from_record(r: UtteranceRecord) -> Result<Self> {
        let features = Tensor::from_rows(&r.features).map_err(|e| Error::Data(format!("{}: {e}", r.id)))?;
        Ok(Utterance {
            id: r.id,
            features,
            tokens: r.tokens,
            langs: r.langs,
            token_frames: r.token_frames,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub language: SynthLanguageSpec,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub switch_prob: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            language: SynthLanguageSpec::default(),
            n_train: 800,
            n_dev: 100,
            n_test: 100,
            switch_prob: 0.3,
            seed: 1,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        self.language.validate()?;
        if !(0.0..=1.0).contains(&self.switch_prob) {
            return Err(Error::Config(format!("switch_prob {} outside [0, 1]", self.switch_prob)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Dev => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &[Utterance] {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn vocab(&self) -> VocabMap {
        self.config.language.vocab()
    }

    pub fn find(&self, id: &str) -> Option<&Utterance> {
        Split::ALL.iter().flat_map(|&s| self.split(s)).find(|u| u.id == id)
    }
}

/// Deterministic corpus; each split draws from its own random stream.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let spec = &config.language;
    let protos = spec.prototypes(config.seed);
    let vocab = spec.vocab();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let gen_split = |split: Split, n: usize| -> Vec<Utterance> {
        let mut rng = stream_rng(config.seed, split.stream());
        (0..n)
            .map(|i| {
                let len = rng.random_range(spec.min_tokens..=spec.max_tokens);
                let mut lang = if rng.random_bool(0.5) {
                    Language::Mandarin
                } else {
                    Language::English
                };
                let mut tokens = Vec::with_capacity(len);
                let mut langs = Vec::with_capacity(len);
                for p in 0..len {
                    if p > 0 && rng.random_bool(config.switch_prob) {
                        lang = match lang {
                            Language::Mandarin => Language::English,
                            Language::English => Language::Mandarin,
                        };
                    }
                    let tok = loop {
                        let t = vocab.token(lang, rng.random_range(0..spec.tokens_per_language));
                        if tokens.last() != Some(&t) {
                            break t;
                        }
                    };
                    tokens.push(tok);
                    langs.push(lang);
                }
                let mut token_frames = Vec::with_capacity(len);
                let mut data = Vec::new();
                for &tok in &tokens {
                    let n = rng.random_range(spec.min_frames_per_token..=spec.max_frames_per_token);
                    token_frames.push(n);
                    for _ in 0..n {
                        data.extend(protos.row(tok - 1).iter().map(|&p| p + noise.sample(&mut rng)));
                    }
                }
                let t = token_frames.iter().sum();
                Utterance {
                    id: format!("{}-{i:05}", split.name()),
                    features: Tensor::new(vec![t, spec.feat_dim], data).expect("frame rows"),
                    tokens,
                    langs,
                    token_frames,
                }
            })
            .collect()
    };
    Ok(Corpus {
        train: gen_split(Split::Train, config.n_train),
        dev: gen_split(Split::Dev, config.n_dev),
        test: gen_split(Split::Test, config.n_test),
        config: config.clone(),
    })
}

/// Fraction of adjacent token pairs whose languages differ.
pub fn switch_rate(utts: &[Utterance]) -> f64 {
    let (mut pairs, mut switches) = (0usize, 0usize);
    for u in utts {
        for w in u.langs.windows(2) {
            pairs += 1;
            switches += usize::from(w[0] != w[1]);
        }
    }
    if pairs == 0 {
        0.0
    } else {
        switches as f64 / pairs as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub file: String,
    pub utterances: usize,
    pub tokens: usize,
    pub frames: usize,
    pub switch_rate: f64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: CorpusConfig,
    pub vocab_size: usize,
    pub train: SplitSummary,
    pub dev: SplitSummary,
    pub test: SplitSummary,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn split_bytes(utts: &[Utterance]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for u in utts {
        serde_json::to_writer(&mut out, &u.to_record())?;
        out.push(b'\n');
    }
    Ok(out)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes one JSONL file per split plus the manifest; returns the manifest.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut summaries = Vec::new();
    for s in Split::ALL {
        let utts = corpus.split(s);
        let bytes = split_bytes(utts)?;
        let file = format!("{}.jsonl", s.name());
        let mut w = BufWriter::new(fs::File::create(dir.join(&file))?);
        w.write_all(&bytes)?;
        w.flush()?;
        summaries.push(SplitSummary {
            file,
            utterances: utts.len(),
            tokens: utts.iter().map(|u| u.tokens.len()).sum(),
            frames: utts.iter().map(Utterance::frames).sum(),
            switch_rate: switch_rate(utts),
            sha256: hex(&Sha256::digest(&bytes)),
        });
    }
    let mut it = summaries.into_iter();
    let manifest = Manifest {
        config: corpus.config.clone(),
        vocab_size: corpus.vocab().vocab_size(),
        train: it.next().expect("train"),
        dev: it.next().expect("dev"),
        test: it.next().expect("test"),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

pub fn read_split(path: &Path, vocab: &VocabMap, feat_dim: usize) -> Result<Vec<Utterance>> {
    let file = fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtteranceRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let u = Utterance::from_record(rec)?;
        u.validate(vocab, feat_dim)?;
        out.push(u);
    }
    Ok(out)
}

/// Loads a corpus written by [`write_corpus`], checking counts and checksums.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let mpath: PathBuf = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::Data(format!("{}: {e}", mpath.display())))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", mpath.display())))?;
    manifest.config.validate()?;
    let vocab = manifest.config.language.vocab();
    let f = manifest.config.language.feat_dim;
    let load = |s: &SplitSummary| -> Result<Vec<Utterance>> {
        let path = dir.join(&s.file);
        let bytes = fs::read(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if hex(&Sha256::digest(&bytes)) != s.sha256 {
            return Err(Error::Data(format!("{}: checksum mismatch", path.display())));
        }
        let utts = read_split(&path, &vocab, f)?;
        if utts.len() != s.utterances {
            return Err(Error::Data(format!("{}: {} utterances, manifest says {}", path.display(), utts.len(), s.utterances)));
        }
        Ok(utts)
    };
    Ok(Corpus {
        train: load(&manifest.train)?,
        dev: load(&manifest.dev)?,
        test: load(&manifest.test)?,
        config: manifest.config,
    })
}

// ---- metrics ---------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    fn add(&mut self, o: &EditCounts) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
    }
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(r: &[T], h: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=h.len()).collect();
    for i in 1..=r.len() {
        let mut cur = vec![i; h.len() + 1];
        for j in 1..=h.len() {
            let sub = prev[j - 1] + usize::from(r[i - 1] != h[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        prev = cur;
    }
    prev[h.len()]
}

/// Minimal alignment edits attributed per language: substitutions and
/// deletions to the reference token, insertions to the hypothesis token.
/// Backtracking prefers diagonal moves, then deletions.
pub fn attributed_edits(r: &[usize], h: &[usize], vocab: &VocabMap) -> Result<[EditCounts; 2]> {
    let (n, m) = (r.len(), h.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let slot = |l: Language| match l {
        Language::Mandarin => 0,
        Language::English => 1,
    };
    let mut out = [EditCounts::default(); 2];
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]) {
            if r[i - 1] != h[j - 1] {
                out[slot(vocab.language_of(r[i - 1])?)].substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            out[slot(vocab.language_of(r[i - 1])?)].deletions += 1;
            i -= 1;
        } else {
            out[slot(vocab.language_of(h[j - 1])?)].insertions += 1;
            j -= 1;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LanguageErrors {
    pub ref_tokens: usize,
    pub edits: EditCounts,
    /// Attributed edits per reference token of this language.
    pub error_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubsetErrors {
    pub utterances: usize,
    pub ref_tokens: usize,
    pub edits: usize,
    pub error_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub utterances: usize,
    pub ref_tokens: usize,
    pub edits: EditCounts,
    /// Total edits per reference token.
    pub mer: f64,
    /// Errors attributed to Mandarin-side tokens (the "Man" role).
    pub mandarin: LanguageErrors,
    /// Errors attributed to English-side tokens (the "Eng" role).
    pub english: LanguageErrors,
    /// Utterances with a single reference language, and the rest.
    pub mono_mandarin: SubsetErrors,
    pub mono_english: SubsetErrors,
    pub code_switched: SubsetErrors,
}

fn rate(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(refs: &[Vec<usize>], hyps: &[Vec<usize>], vocab: &VocabMap) -> Result<ErrorReport> {
    if refs.len() != hyps.len() {
        return Err(Error::invalid("compute_metrics", format!("{} references vs {} hypotheses", refs.len(), hyps.len())));
    }
    let mut rep = ErrorReport {
        utterances: refs.len(),
        ..ErrorReport::default()
    };
    for (r, h) in refs.iter().zip(hyps) {
        let [ma, en] = attributed_edits(r, h, vocab)?;
        let langs = language_labels(r, vocab)?;
        let n_ma = langs.iter().filter(|&&l| l == Language::Mandarin).count();
        rep.mandarin.ref_tokens += n_ma;
        rep.english.ref_tokens += r.len() - n_ma;
        rep.mandarin.edits.add(&ma);
        rep.english.edits.add(&en);
        let mut all = ma;
        all.add(&en);
        rep.edits.add(&all);
        rep.ref_tokens += r.len();
        let subset = if n_ma == r.len() {
            &mut rep.mono_mandarin
        } else if n_ma == 0 {
            &mut rep.mono_english
        } else {
            &mut rep.code_switched
        };
        subset.utterances += 1;
        subset.ref_tokens += r.len();
        subset.edits += all.total();
    }
    rep.mer = rate(rep.edits.total(), rep.ref_tokens);
    for l in [&mut rep.mandarin, &mut rep.english] {
        l.error_rate = rate(l.edits.total(), l.ref_tokens);
    }
    for s in [&mut rep.mono_mandarin, &mut rep.mono_english, &mut rep.code_switched] {
        s.error_rate = rate(s.edits, s.ref_tokens);
    }
    Ok(rep)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LidAccuracy {
    pub correct: usize,
    /// Frames routed to a language expert.
    pub counted: usize,
    pub blank_frames: usize,
    pub accuracy: f64,
}

impl LidAccuracy {
    pub fn merge(&mut self, o: &LidAccuracy) {
        self.correct += o.correct;
        self.counted += o.counted;
        self.blank_frames += o.blank_frames;
        self.accuracy = rate(self.correct, self.counted);
    }
}

/// Encoder routing choices (`0` blank, `1` Mandarin, `2` English) against
/// per-frame truth; blank-routed frames are left out of the denominator.
pub fn lid_frame_accuracy(indices: &[usize], truth: &[Language]) -> Result<LidAccuracy> {
    if indices.len() != truth.len() {
        return Err(Error::invalid("lid_frame_accuracy", format!("{} choices vs {} frames", indices.len(), truth.len())));
    }
    let mut acc = LidAccuracy::default();
    for (&i, &l) in indices.iter().zip(truth) {
        match Language::from_encoder_class(i) {
            None => acc.blank_frames += 1,
            Some(p) => {
                acc.counted += 1;
                acc.correct += usize::from(p == l);
            }
        }
    }
    acc.accuracy = rate(acc.correct, acc.counted);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(switch_prob: f64) -> CorpusConfig {
        CorpusConfig {
            n_train: 40,
            n_dev: 5,
            n_test: 5,
            switch_prob,
            seed: 9,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn vocab_layout() {
        let v = VocabMap::new(3);
        assert_eq!(v.vocab_size(), 8);
        assert_eq!(v.token(Language::English, 0), 4);
        assert_eq!(v.language_of(3).unwrap(), Language::Mandarin);
        assert!(matches!(v.language_of(0), Err(Error::UnmappedToken(0))));
        assert!(matches!(v.language_of(7), Err(Error::UnmappedToken(7))));
    }

    #[test]
    fn label_examples() {
        let v = VocabMap::new(10);
        let y = [v.token(Language::Mandarin, 3), v.token(Language::Mandarin, 7), v.token(Language::English, 1)];
        assert_eq!(
            language_labels(&y, &v).unwrap(),
            vec![Language::Mandarin, Language::Mandarin, Language::English]
        );
        assert!(language_labels(&[], &v).unwrap().is_empty());
    }

    #[test]
    fn switch_extremes() {
        let c = generate_corpus(&small(0.0)).unwrap();
        assert!(c.train.iter().all(|u| u.langs.windows(2).all(|w| w[0] == w[1])));
        let c = generate_corpus(&small(1.0)).unwrap();
        assert!(c.train.iter().all(|u| u.langs.windows(2).all(|w| w[0] != w[1])));
    }

    #[test]
    fn utterances_are_consistent() {
        let c = generate_corpus(&small(0.3)).unwrap();
        let v = c.vocab();
        for u in c.train.iter().chain(&c.test) {
            u.validate(&v, 32).unwrap();
            assert!((4..=12).contains(&u.tokens.len()));
            assert!(u.token_frames.iter().all(|n| (2..=4).contains(n)));
            assert!(u.tokens.windows(2).all(|w| w[0] != w[1]));
        }
    }

    #[test]
    fn zero_confusability_has_disjoint_supports() {
        let spec = SynthLanguageSpec {
            confusability: 0.0,
            ..SynthLanguageSpec::default()
        };
        let p = spec.prototypes(4);
        for r in 0..20 {
            let (lo, hi) = if r < 10 { (16, 32) } else { (0, 16) };
            assert!(p.row(r)[lo..hi].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn metric_examples() {
        let v = VocabMap::new(10);
        let (a1, b1) = (v.token(Language::Mandarin, 0), v.token(Language::English, 0));
        let r = compute_metrics(&[vec![a1, b1]], &[vec![a1]], &v).unwrap();
        assert_eq!(r.english.edits.deletions, 1);
        assert_eq!(r.english.error_rate, 1.0);
        assert_eq!(r.mandarin.error_rate, 0.0);
        assert_eq!(r.mer, 0.5);
        let same = compute_metrics(&[vec![a1, b1]], &[vec![a1, b1]], &v).unwrap();
        assert_eq!(same.mer, 0.0);
        assert!(compute_metrics(&[vec![a1]], &[], &v).is_err());
    }

    #[test]
    fn insertions_follow_hypothesis_language() {
        let v = VocabMap::new(10);
        let (a1, b1) = (v.token(Language::Mandarin, 0), v.token(Language::English, 0));
        let [ma, en] = attributed_edits(&[a1], &[a1, b1], &v).unwrap();
        assert_eq!(ma.total(), 0);
        assert_eq!(en.insertions, 1);
    }

    #[test]
    fn lid_accuracy_skips_blank() {
        use Language::*;
        let a = lid_frame_accuracy(&[0, 1, 2, 2], &[Mandarin, Mandarin, Mandarin, English]).unwrap();
        assert_eq!((a.correct, a.counted, a.blank_frames), (2, 3, 1));
        assert!(lid_frame_accuracy(&[1], &[]).is_err());
    }
}
