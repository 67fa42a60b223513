//! Synthetic speech → tagged-translation task and its on-disk formats.
//!
//! Each source token has a fixed random prototype vector; an utterance is the
//! concatenation of its tokens' prototypes, each repeated for a few frames,
//! plus Gaussian noise. The target is a word-by-word dictionary translation in
//! which lexicon phrases are named entities with a category.
//!
//! Files per split: `<split>.tsv` (manifest) and `<split>.feat` (features).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::model::vocab::Vocab;
use crate::model::Variant;
use crate::nncore::Tensor;
use crate::rng::rng_for;
use crate::tagset::{self, AnnotatedText, NeCategory, NeSpan, TagError};

pub const FEATURE_MAGIC: &[u8; 4] = b"JSTF";
/// Frame stride of the synthetic features.
pub const FRAME_MS: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("corrupt file {path}: {reason} (byte offset {offset})")]
    CorruptFile {
        path: PathBuf,
        offset: u64,
        reason: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("annotation error in {path} line {line}: {source}")]
    Annotation {
        path: PathBuf,
        line: usize,
        source: TagError,
    },
}

/// Generator parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    /// Number of non-entity source words (each with a one-to-one translation).
    pub common_words: usize,
    /// Lexicon entries per entity category.
    pub entries_per_category: usize,
    /// Longest entity phrase, in tokens.
    pub max_phrase_len: usize,
    /// Probability that a sentence slot is an entity mention.
    pub ne_rate: f64,
    pub frames_per_token: usize,
    /// Frame count per token varies uniformly by ± this much.
    pub frame_jitter: usize,
    pub noise_std: f64,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            common_words: 60,
            entries_per_category: 3,
            max_phrase_len: 3,
            ne_rate: 0.15,
            frames_per_token: 8,
            frame_jitter: 1,
            noise_std: 0.5,
            feature_dim: 80,
            seed: 1,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.common_words < 2 {
            return bad("common_words must be at least 2");
        }
        if self.entries_per_category == 0 {
            return bad("entries_per_category must be positive");
        }
        if self.max_phrase_len == 0 {
            return bad("max_phrase_len must be positive");
        }
        if !(0.0..1.0).contains(&self.ne_rate) {
            return bad("ne_rate must be in [0, 1)");
        }
        if self.frames_per_token == 0 || self.frame_jitter >= self.frames_per_token {
            return bad("frames_per_token must exceed frame_jitter");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and non-negative");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        Ok(())
    }
}

/// Relative mention frequency per category: Zipf-like over the regular
/// categories, with FAC, EVENT and LANGUAGE deliberately rare.
pub fn category_weight(c: NeCategory) -> f64 {
    use NeCategory::*;
    const ORDER: [NeCategory; 15] = [
        Person, Org, Gpe, Date, Cardinal, Norp, Loc, Money, Percent, Law, Ordinal, Time,
        Quantity, WorkOfArt, Product,
    ];
    match ORDER.iter().position(|x| *x == c) {
        Some(rank) => 1.0 / ((rank + 1) as f64).powf(0.7),
        None if c.is_entity() => 0.03,
        None => 0.0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LexEntry {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub category: NeCategory,
}

/// The deterministic world a [`TaskSpec`] describes: dictionary, entity
/// lexicon, vocabularies and per-token feature prototypes.
#[derive(Clone, Debug)]
pub struct Task {
    pub spec: TaskSpec,
    /// `(source word, target word)` pairs.
    pub common: Vec<(String, String)>,
    pub lexicon: Vec<LexEntry>,
    pub src_vocab: Vocab,
    /// One row per source-vocabulary id (row 0, the blank, is unused).
    pub prototypes: Tensor,
}

impl Task {
    pub fn new(spec: &TaskSpec) -> Result<Task, DataError> {
        spec.validate()?;
        let mut rng = rng_for(spec.seed, "task");

        let mut perm: Vec<usize> = (0..spec.common_words).collect();
        perm.shuffle(&mut rng);
        let common: Vec<(String, String)> = (0..spec.common_words)
            .map(|i| (format!("s{i:02}"), format!("t{:02}", perm[i])))
            .collect();

        let mut lexicon = Vec::new();
        for (ci, &cat) in NeCategory::entities().iter().enumerate() {
            for e in 0..spec.entries_per_category {
                let id = ci * spec.entries_per_category + e;
                let len = 1 + e % spec.max_phrase_len;
                let part = |k: usize| (b'a' + (k % 26) as u8) as char;
                lexicon.push(LexEntry {
                    source: (0..len).map(|k| format!("n{id:02}{}", part(k))).collect(),
                    target: (0..len).map(|k| format!("N{id:02}{}", part(k))).collect(),
                    category: cat,
                });
            }
        }

        let src_words: Vec<&str> = common
            .iter()
            .map(|(s, _)| s.as_str())
            .chain(lexicon.iter().flat_map(|e| e.source.iter().map(String::as_str)))
            .collect();
        let src_vocab = Vocab::source(&src_words);

        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut prototypes = Tensor::zeros(&[src_vocab.len(), spec.feature_dim]);
        for v in prototypes.data_mut()[spec.feature_dim..].iter_mut() {
            *v = normal.sample(&mut rng) as f32 as f64;
        }

        Ok(Task {
            spec: spec.clone(),
            common,
            lexicon,
            src_vocab,
            prototypes,
        })
    }

    /// Target words in vocabulary order (common translations, then entity tokens).
    pub fn target_words(&self) -> Vec<String> {
        self.common
            .iter()
            .map(|(_, t)| t.clone())
            .chain(self.lexicon.iter().flat_map(|e| e.target.iter().cloned()))
            .collect()
    }

    /// Decoder vocabulary; the inline variant also carries the 36 tag tokens.
    pub fn target_vocab(&self, variant: Variant) -> Vocab {
        Vocab::target(&self.target_words(), variant == Variant::Inline)
    }

    /// Feature frames for a source sentence and the frame count of each token.
    pub fn render<R: Rng>(&self, source: &[String], rng: &mut R) -> (Tensor, Vec<usize>) {
        let dim = self.spec.feature_dim;
        let noise = Normal::new(0.0, self.spec.noise_std.max(f64::MIN_POSITIVE))
            .expect("valid noise std");
        let jitter = self.spec.frame_jitter as i64;
        let durations: Vec<usize> = source
            .iter()
            .map(|_| {
                let j = if jitter > 0 {
                    rng.random_range(-jitter..=jitter)
                } else {
                    0
                };
                (self.spec.frames_per_token as i64 + j) as usize
            })
            .collect();
        let total: usize = durations.iter().sum();
        let mut data = Vec::with_capacity(total * dim);
        for (tok, &n) in source.iter().zip(&durations) {
            let id = self.src_vocab.id(tok).expect("source token in vocabulary");
            let proto = self.prototypes.row(id);
            for _ in 0..n {
                for &p in proto {
                    let v = if self.spec.noise_std > 0.0 {
                        p + noise.sample(rng)
                    } else {
                        p
                    };
                    data.push(v as f32 as f64);
                }
            }
        }
        (
            Tensor::from_vec(&[total, dim], data).expect("frame count matches"),
            durations,
        )
    }

    fn pick_category<R: Rng>(&self, rng: &mut R, exclude: Option<NeCategory>) -> NeCategory {
        let cats: Vec<NeCategory> = NeCategory::entities()
            .iter()
            .copied()
            .filter(|c| Some(*c) != exclude)
            .collect();
        let total: f64 = cats.iter().map(|c| category_weight(*c)).sum();
        let mut x = rng.random::<f64>() * total;
        for &c in &cats {
            x -= category_weight(c);
            if x < 0.0 {
                return c;
            }
        }
        *cats.last().expect("at least one category")
    }

    /// Samples one sentence of `len` source tokens.
    pub fn sample_sentence<R: Rng>(&self, len: usize, rng: &mut R) -> (Vec<String>, AnnotatedText) {
        let mut source: Vec<String> = Vec::with_capacity(len);
        let mut target = Vec::with_capacity(len);
        let mut spans = Vec::new();
        let mut prev_cat: Option<NeCategory> = None;
        let per_cat = self.spec.entries_per_category;

        while source.len() < len {
            let room = len - source.len();
            if rng.random::<f64>() < self.spec.ne_rate {
                let cat = self.pick_category(rng, prev_cat);
                let base = (cat.index() - 1) * per_cat;
                let fitting: Vec<&LexEntry> = self.lexicon[base..base + per_cat]
                    .iter()
                    .filter(|e| e.source.len() <= room)
                    .collect();
                let entry = fitting[rng.random_range(0..fitting.len())];
                let start = target.len();
                source.extend(entry.source.iter().cloned());
                target.extend(entry.target.iter().cloned());
                spans.push(NeSpan::new(start, target.len(), cat));
                prev_cat = Some(cat);
            } else {
                let last = source.last();
                let (s, t) = loop {
                    let pair = &self.common[rng.random_range(0..self.common.len())];
                    if last != Some(&pair.0) {
                        break pair;
                    }
                };
                source.push(s.clone());
                target.push(t.clone());
                prev_cat = None;
            }
        }
        (source, AnnotatedText { tokens: target, spans })
    }
}

/// One utterance of the corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub utt_id: String,
    pub features: Tensor,
    pub source: Vec<String>,
    pub target: AnnotatedText,
}

impl Example {
    pub fn n_frames(&self) -> usize {
        self.features.rows()
    }

    pub fn duration_ms(&self) -> usize {
        self.n_frames() * FRAME_MS
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_train: 8000,
            n_valid: 500,
            n_test: 500,
            min_len: 3,
            max_len: 12,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SyntheticCorpus {
    pub examples: Vec<Example>,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl SyntheticCorpus {
    pub fn split(&self, split: Split) -> Vec<&Example> {
        let idx = match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        };
        idx.iter().map(|&i| &self.examples[i]).collect()
    }
}

/// Generates train/valid/test splits; deterministic in `task.spec.seed`.
pub fn gen_corpus(task: &Task, cfg: &CorpusConfig) -> Result<SyntheticCorpus, DataError> {
    if cfg.n_train + cfg.n_valid + cfg.n_test == 0 {
        return Err(DataError::InvalidSpec("corpus must have at least one sentence".into()));
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(DataError::InvalidSpec(format!(
            "bad length range {}..={}",
            cfg.min_len, cfg.max_len
        )));
    }
    let mut rng = rng_for(task.spec.seed, "corpus");
    let mut corpus = SyntheticCorpus::default();
    for (split, n) in [
        (Split::Train, cfg.n_train),
        (Split::Valid, cfg.n_valid),
        (Split::Test, cfg.n_test),
    ] {
        for i in 0..n {
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            let (source, target) = task.sample_sentence(len, &mut rng);
            let (features, _) = task.render(&source, &mut rng);
            let idx = corpus.examples.len();
            corpus.examples.push(Example {
                utt_id: format!("{}_{i:05}", split.name()),
                features,
                source,
                target,
            });
            match split {
                Split::Train => corpus.train.push(idx),
                Split::Valid => corpus.valid.push(idx),
                Split::Test => corpus.test.push(idx),
            }
        }
    }
    Ok(corpus)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `<split>.tsv` and `<split>.feat` for every split into `dir`.
pub fn write_corpus(corpus: &SyntheticCorpus, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for split in Split::ALL {
        let examples = corpus.split(split);
        write_split(&examples, &dir.join(format!("{}.tsv", split.name())), &dir.join(format!("{}.feat", split.name())))?;
    }
    Ok(())
}

pub fn write_split(examples: &[&Example], manifest: &Path, features: &Path) -> Result<(), DataError> {
    let mut m = BufWriter::new(fs::File::create(manifest).map_err(io_err(manifest))?);
    let mut f = BufWriter::new(fs::File::create(features).map_err(io_err(features))?);
    f.write_all(FEATURE_MAGIC).map_err(io_err(features))?;
    for ex in examples {
        writeln!(
            m,
            "{}\t{}\t{}\t{}",
            ex.utt_id,
            ex.n_frames(),
            ex.source.join(" "),
            tagset::format_line(&ex.target)
        )
        .map_err(io_err(manifest))?;

        let mut rec = Vec::with_capacity(12 + ex.utt_id.len() + ex.features.len() * 4);
        rec.extend_from_slice(&(ex.utt_id.len() as u32).to_le_bytes());
        rec.extend_from_slice(ex.utt_id.as_bytes());
        rec.extend_from_slice(&(ex.n_frames() as u32).to_le_bytes());
        rec.extend_from_slice(&(ex.features.cols() as u32).to_le_bytes());
        for v in ex.features.data() {
            rec.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        f.write_all(&rec).map_err(io_err(features))?;
    }
    m.flush().map_err(io_err(manifest))?;
    f.flush().map_err(io_err(features))
}

/// Reads a corpus written by [`write_corpus`].
pub fn read_corpus(dir: &Path) -> Result<SyntheticCorpus, DataError> {
    let mut corpus = SyntheticCorpus::default();
    for split in Split::ALL {
        let examples = read_split(
            &dir.join(format!("{}.tsv", split.name())),
            &dir.join(format!("{}.feat", split.name())),
        )?;
        for ex in examples {
            let idx = corpus.examples.len();
            corpus.examples.push(ex);
            match split {
                Split::Train => corpus.train.push(idx),
                Split::Valid => corpus.valid.push(idx),
                Split::Test => corpus.test.push(idx),
            }
        }
    }
    Ok(corpus)
}

struct ManifestLine {
    utt_id: String,
    n_frames: usize,
    source: Vec<String>,
    target: AnnotatedText,
}

pub fn read_split(manifest: &Path, features: &Path) -> Result<Vec<Example>, DataError> {
    let text = fs::read_to_string(manifest).map_err(io_err(manifest))?;
    let mut lines = Vec::new();
    let mut offset = 0u64;
    for (ln, line) in text.lines().enumerate() {
        let corrupt = |reason: String| DataError::CorruptFile {
            path: manifest.to_path_buf(),
            offset,
            reason,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(corrupt(format!("line {} has {} fields", ln + 1, fields.len())));
        }
        let n_frames = fields[1]
            .parse::<usize>()
            .map_err(|_| corrupt(format!("line {}: bad frame count", ln + 1)))?;
        let target = tagset::parse_line(fields[3]).map_err(|source| DataError::Annotation {
            path: manifest.to_path_buf(),
            line: ln + 1,
            source,
        })?;
        lines.push(ManifestLine {
            utt_id: fields[0].to_string(),
            n_frames,
            source: fields[2].split_whitespace().map(String::from).collect(),
            target,
        });
        offset += line.len() as u64 + 1;
    }

    let bytes = fs::read(features).map_err(io_err(features))?;
    let mut cur = FeatureCursor {
        bytes: &bytes,
        pos: 0,
        path: features,
    };
    if cur.take(4)? != FEATURE_MAGIC {
        return Err(cur.corrupt(0, "bad magic".into()));
    }
    let mut out = Vec::with_capacity(lines.len());
    for line in lines {
        let rec_start = cur.pos as u64;
        let id_len = cur.u32()? as usize;
        let id = std::str::from_utf8(cur.take(id_len)?)
            .map_err(|_| cur.corrupt(rec_start, "utt_id is not UTF-8".into()))?
            .to_string();
        if id != line.utt_id {
            return Err(cur.corrupt(rec_start, format!("expected {} got {id}", line.utt_id)));
        }
        let n = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        if n != line.n_frames {
            return Err(cur.corrupt(
                rec_start,
                format!("{id}: manifest says {} frames, features have {n}", line.n_frames),
            ));
        }
        let raw = cur.take(n * dim * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push(Example {
            utt_id: id,
            features: Tensor::from_vec(&[n, dim], data).expect("size checked"),
            source: line.source,
            target: line.target,
        });
    }
    if cur.pos != bytes.len() {
        return Err(cur.corrupt(cur.pos as u64, "trailing bytes".into()));
    }
    Ok(out)
}

struct FeatureCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> FeatureCursor<'a> {
    fn corrupt(&self, offset: u64, reason: String) -> DataError {
        DataError::CorruptFile {
            path: self.path.to_path_buf(),
            offset,
            reason,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(self.corrupt(
                self.bytes.len() as u64,
                format!("truncated: needed {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Fraction of source tokens recovered by a nearest-prototype classifier on
/// mean-pooled frames of `n` sampled sentences.
pub fn separability(task: &Task, n: usize, seed: u64) -> f64 {
    let mut rng = rng_for(seed, "separability");
    let (mut hit, mut total) = (0usize, 0usize);
    for _ in 0..n {
        let len = rng.random_range(3..=12);
        let (source, _) = task.sample_sentence(len, &mut rng);
        let (feats, durations) = task.render(&source, &mut rng);
        let mut frame = 0;
        for (tok, &d) in source.iter().zip(&durations) {
            let dim = feats.cols();
            let mut mean = vec![0.0; dim];
            for r in frame..frame + d {
                for (m, v) in mean.iter_mut().zip(feats.row(r)) {
                    *m += v / d as f64;
                }
            }
            frame += d;
            let best = (1..task.src_vocab.len())
                .map(|id| {
                    let dist: f64 = task
                        .prototypes
                        .row(id)
                        .iter()
                        .zip(&mean)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (dist, id)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .map(|x| x.1)
                .unwrap();
            hit += usize::from(task.src_vocab.token(best) == tok);
            total += 1;
        }
    }
    hit as f64 / total as f64
}
