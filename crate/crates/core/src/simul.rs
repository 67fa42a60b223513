//! Wait-k simultaneous inference with CTC word counting, action traces and
//! length-adaptive average lagging.

use std::io::Write;
use std::time::Instant;

use thiserror::Error;

use crate::data::{Example, FRAME_MS};
use crate::eval::{corpus_bleu, strict_span_f1, EvalError};
use crate::model::vocab::{BOS, EOS};
use crate::model::{EncoderOutput, Model, ModelError, Variant, SUBSAMPLE_FACTOR};
use crate::nncore::loss::ctc_greedy_collapse;
use crate::nncore::tensor::argmax;
use crate::nncore::Tensor;
use crate::par::{self, ExecMode};
use crate::tagset::{self, AnnotatedText, NeCategory, ParallelLabels};

#[derive(Debug, Error)]
pub enum SimulError {
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("trace has no WRITE actions")]
    EmptyTrace,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyConfig {
    pub k: usize,
    /// Audio added per READ; a multiple of the 10 ms frame stride.
    pub chunk_ms: usize,
    /// Word cap; defaults to `4 × ceil(frames / 4) + 10`.
    pub max_len: Option<usize>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            k: 1,
            chunk_ms: 500,
            max_len: None,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), SimulError> {
        if self.k == 0 {
            return Err(SimulError::InvalidPolicy("k must be at least 1".into()));
        }
        if self.chunk_ms == 0 || !self.chunk_ms.is_multiple_of(FRAME_MS) {
            return Err(SimulError::InvalidPolicy(format!(
                "chunk_ms {} must be a positive multiple of {FRAME_MS}",
                self.chunk_ms
            )));
        }
        Ok(())
    }
}

/// Whether WRITE wall-clock delays include measured computation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClockMode {
    /// Computation is free: wall-clock delay equals the ideal delay.
    Ideal,
    Measured,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Read {
        consumed_ms: f64,
    },
    Write {
        word: String,
        ideal_ms: f64,
        wall_ms: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulTrace {
    pub actions: Vec<Action>,
    pub source_duration_ms: f64,
    pub hypothesis: AnnotatedText,
}

impl SimulTrace {
    /// `(ideal, wall)` delay of every WRITE, in order.
    pub fn delays(&self) -> Vec<(f64, f64)> {
        self.actions
            .iter()
            .filter_map(|a| match a {
                Action::Write { ideal_ms, wall_ms, .. } => Some((*ideal_ms, *wall_ms)),
                Action::Read { .. } => None,
            })
            .collect()
    }

    pub fn words(&self) -> Vec<&str> {
        self.actions
            .iter()
            .filter_map(|a| match a {
                Action::Write { word, .. } => Some(word.as_str()),
                Action::Read { .. } => None,
            })
            .collect()
    }
}

/// What the translator produced at a WRITE opportunity.
#[derive(Clone, Debug, PartialEq)]
pub enum Next {
    Word(String),
    EndOfSequence,
}

/// The two model-dependent pieces of the wait-k loop.
pub trait SimulAgent {
    /// Words detected in the first `consumed_ms` of audio.
    fn detect_words(&mut self, consumed_ms: usize) -> Result<usize, SimulError>;
    /// Commits the next target word given `consumed_ms` of audio.
    fn next_word(&mut self, consumed_ms: usize) -> Result<Next, SimulError>;
    /// Final hypothesis after the loop ends.
    fn hypothesis(&self) -> AnnotatedText;
}

/// Greedy CTC transcript length: argmax, merge repeats, drop blanks.
pub fn detect_words(ctc_logits: &Tensor) -> usize {
    let best: Vec<usize> = (0..ctc_logits.rows()).map(|r| argmax(ctc_logits.row(r))).collect();
    ctc_greedy_collapse(&best).len()
}

/// Generic wait-k loop: WRITE when `detected ≥ emitted + k` or the whole
/// source has been read, otherwise READ `chunk_ms` more. An end-of-sequence
/// before the source is exhausted is treated as a READ.
pub fn run_policy<A: SimulAgent>(
    agent: &mut A,
    source_ms: usize,
    policy: &PolicyConfig,
    clock: ClockMode,
) -> Result<SimulTrace, SimulError> {
    policy.validate()?;
    let max_words = policy
        .max_len
        .unwrap_or(4 * (source_ms / FRAME_MS).div_ceil(SUBSAMPLE_FACTOR) + 10);
    let mut actions = Vec::new();
    let mut consumed = 0usize;
    let mut emitted = 0usize;
    let mut compute_ms = 0.0;
    let timed = |compute: &mut f64, start: Option<Instant>| {
        if let Some(s) = start {
            *compute += s.elapsed().as_secs_f64() * 1000.0;
        }
    };
    while emitted < max_words {
        let start = (clock == ClockMode::Measured).then(Instant::now);
        let detected = if consumed > 0 {
            agent.detect_words(consumed)?
        } else {
            0
        };
        let exhausted = consumed >= source_ms;
        let mut read = true;
        if exhausted || detected >= emitted + policy.k {
            match agent.next_word(consumed)? {
                Next::Word(word) => {
                    timed(&mut compute_ms, start);
                    emitted += 1;
                    actions.push(Action::Write {
                        word,
                        ideal_ms: consumed as f64,
                        wall_ms: consumed as f64 + compute_ms,
                    });
                    read = false;
                }
                Next::EndOfSequence if exhausted => {
                    timed(&mut compute_ms, start);
                    break;
                }
                Next::EndOfSequence => {}
            }
        }
        if read {
            timed(&mut compute_ms, start);
            consumed = (consumed + policy.chunk_ms).min(source_ms);
            actions.push(Action::Read {
                consumed_ms: consumed as f64,
            });
        }
    }
    Ok(SimulTrace {
        actions,
        source_duration_ms: source_ms as f64,
        hypothesis: agent.hypothesis(),
    })
}

/// Model-backed agent: re-encodes the consumed prefix, counts CTC words and
/// extends a committed greedy hypothesis.
pub struct ModelAgent<'m> {
    model: &'m Model,
    features: &'m Tensor,
    encoded: Option<(usize, Option<EncoderOutput>)>,
    tokens: Vec<usize>,
    tags: Vec<usize>,
    token_cap: usize,
}

impl<'m> ModelAgent<'m> {
    pub fn new(model: &'m Model, features: &'m Tensor) -> Self {
        ModelAgent {
            model,
            features,
            encoded: None,
            tokens: Vec::new(),
            tags: Vec::new(),
            token_cap: 3 * (4 * features.rows().div_ceil(SUBSAMPLE_FACTOR) + 10),
        }
    }

    fn encode(&mut self, consumed_ms: usize) -> Result<Option<&EncoderOutput>, SimulError> {
        let frames = (consumed_ms / FRAME_MS).min(self.features.rows());
        if self.encoded.as_ref().is_none_or(|(f, _)| *f != frames) {
            let enc = if frames < 4 {
                None
            } else {
                Some(self.model.encode(&self.features.slice_rows(0, frames))?)
            };
            self.encoded = Some((frames, enc));
        }
        Ok(self.encoded.as_ref().and_then(|(_, e)| e.as_ref()))
    }
}

impl SimulAgent for ModelAgent<'_> {
    fn detect_words(&mut self, consumed_ms: usize) -> Result<usize, SimulError> {
        Ok(self.encode(consumed_ms)?.map_or(0, |e| detect_words(&e.ctc_logits)))
    }

    fn next_word(&mut self, consumed_ms: usize) -> Result<Next, SimulError> {
        let Some(enc) = self.encode(consumed_ms)?.cloned() else {
            return Ok(Next::EndOfSequence);
        };
        let model = self.model;
        let vocab = model.tgt_vocab();
        let mut pending = Vec::new();
        loop {
            if self.tokens.len() + pending.len() >= self.token_cap {
                self.tokens.extend(pending);
                return Ok(Next::EndOfSequence);
            }
            let mut prefix = vec![BOS];
            prefix.extend(&self.tokens);
            prefix.extend(&pending);
            let tags: Vec<usize> = if model.variant() == Variant::ParallelEmb {
                std::iter::once(NeCategory::O.index()).chain(self.tags.iter().copied()).collect()
            } else {
                Vec::new()
            };
            let out = model.decode_step(&enc, &prefix, &tags)?;
            let tok = argmax(&out.token_logits);
            if tok == EOS {
                // tags generated before an end-of-sequence are discarded with it
                return Ok(Next::EndOfSequence);
            }
            if vocab.is_tag(tok) {
                pending.push(tok);
                continue;
            }
            self.tokens.extend(pending);
            self.tokens.push(tok);
            if let Some(t) = out.tag_logits {
                self.tags.push(argmax(&t));
            }
            return Ok(Next::Word(vocab.token(tok).to_string()));
        }
    }

    fn hypothesis(&self) -> AnnotatedText {
        let vocab = self.model.tgt_vocab();
        let raw: Vec<String> = self.tokens.iter().map(|&i| vocab.token(i).to_string()).collect();
        match self.model.variant() {
            Variant::Inline => tagset::parse_inline_lenient(&raw).text,
            _ => {
                let labels = ParallelLabels {
                    labels: self
                        .tags
                        .iter()
                        .map(|&t| NeCategory::from_index(t).expect("19-way tag head"))
                        .collect(),
                };
                tagset::from_token_labels(&raw, &labels).expect("one tag per word")
            }
        }
    }
}

pub fn run_waitk(model: &Model, features: &Tensor, policy: &PolicyConfig, clock: ClockMode) -> Result<SimulTrace, SimulError> {
    let mut agent = ModelAgent::new(model, features);
    run_policy(&mut agent, features.rows() * FRAME_MS, policy, clock)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Clock {
    Ideal,
    Wall,
}

/// Length-adaptive average lagging in milliseconds.
///
/// `(1/τ) Σ_{i≤τ} d_i − (i−1)·T / max(|Y*|, |Ŷ|)`, with τ the first WRITE whose
/// ideal delay reaches the source duration (or the last WRITE).
pub fn laal(trace: &SimulTrace, ref_words: usize, clock: Clock) -> Result<f64, SimulError> {
    let delays = trace.delays();
    if delays.is_empty() {
        return Err(SimulError::EmptyTrace);
    }
    let t = trace.source_duration_ms;
    let rate = t / ref_words.max(delays.len()) as f64;
    let tau = delays
        .iter()
        .position(|(ideal, _)| *ideal >= t)
        .map_or(delays.len(), |i| i + 1);
    let sum: f64 = delays[..tau]
        .iter()
        .enumerate()
        .map(|(i, (ideal, wall))| {
            let d = match clock {
                Clock::Ideal => *ideal,
                Clock::Wall => *wall,
            };
            d - i as f64 * rate
        })
        .sum();
    Ok(sum / tau as f64)
}

pub fn write_trace<W: Write>(out: &mut W, trace: &SimulTrace) -> std::io::Result<()> {
    for a in &trace.actions {
        match a {
            Action::Read { consumed_ms } => writeln!(out, "READ\t{consumed_ms}")?,
            Action::Write {
                word,
                ideal_ms,
                wall_ms,
            } => writeln!(out, "WRITE\t{word}\t{ideal_ms}\t{wall_ms}")?,
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub bleu: f64,
    pub f1: f64,
    pub laal_ideal: f64,
    pub laal_wall: f64,
    /// Fraction of the wall-clock LAAL that is waiting for audio.
    pub wait_share: f64,
}

pub const SWEEP_HEADER: &str = "k,bleu,f1,laal_ideal,laal_wall,wait_share";

pub fn write_sweep<W: Write>(out: &mut W, rows: &[SweepRow]) -> std::io::Result<()> {
    writeln!(out, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.4},{:.6},{:.3},{:.3},{:.6}",
            r.k, r.bleu, r.f1, r.laal_ideal, r.laal_wall, r.wait_share
        )?;
    }
    Ok(())
}

/// One row per `k`: corpus BLEU and strict F1 of the simultaneous outputs and
/// mean LAAL under both clocks. Measured clocks force sequential execution.
pub fn quality_latency_sweep(
    model: &Model,
    examples: &[&Example],
    ks: &[usize],
    chunk_ms: usize,
    clock: ClockMode,
    exec: ExecMode,
) -> Result<(Vec<SweepRow>, Vec<Vec<SimulTrace>>), SimulError> {
    let exec = if clock == ClockMode::Measured {
        ExecMode::Sequential
    } else {
        exec
    };
    let refs: Vec<AnnotatedText> = examples.iter().map(|e| e.target.clone()).collect();
    let ref_tokens: Vec<Vec<String>> = refs.iter().map(|r| r.tokens.clone()).collect();
    let mut rows = Vec::with_capacity(ks.len());
    let mut all_traces = Vec::with_capacity(ks.len());
    for &k in ks {
        let policy = PolicyConfig {
            k,
            chunk_ms,
            max_len: None,
        };
        let traces = par::map(exec, examples, |ex| run_waitk(model, &ex.features, &policy, clock))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        let hyps: Vec<AnnotatedText> = traces.iter().map(|t| t.hypothesis.clone()).collect();
        let hyp_tokens: Vec<Vec<String>> = hyps.iter().map(|h| h.tokens.clone()).collect();
        let (mut ideal, mut wall, mut n) = (0.0, 0.0, 0usize);
        for (tr, r) in traces.iter().zip(&refs) {
            if tr.delays().is_empty() {
                continue;
            }
            ideal += laal(tr, r.tokens.len(), Clock::Ideal)?;
            wall += laal(tr, r.tokens.len(), Clock::Wall)?;
            n += 1;
        }
        let n = n.max(1) as f64;
        let (laal_ideal, laal_wall) = (ideal / n, wall / n);
        rows.push(SweepRow {
            k,
            bleu: corpus_bleu(&ref_tokens, &hyp_tokens)?,
            f1: strict_span_f1(&refs, &hyps)?.f1,
            laal_ideal,
            laal_wall,
            wait_share: if laal_wall > 0.0 { laal_ideal / laal_wall } else { 1.0 },
        });
        all_traces.push(traces);
    }
    Ok((rows, all_traces))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Source words spoken back to back, each `word_ms` long; detection is exact.
    struct Perfect {
        word_ms: usize,
        words: Vec<String>,
        next: usize,
    }

    impl SimulAgent for Perfect {
        fn detect_words(&mut self, consumed_ms: usize) -> Result<usize, SimulError> {
            Ok((consumed_ms / self.word_ms).min(self.words.len()))
        }

        fn next_word(&mut self, _: usize) -> Result<Next, SimulError> {
            Ok(match self.words.get(self.next) {
                Some(w) => {
                    self.next += 1;
                    Next::Word(w.clone())
                }
                None => Next::EndOfSequence,
            })
        }

        fn hypothesis(&self) -> AnnotatedText {
            AnnotatedText::plain(&self.words[..self.next])
        }
    }

    fn perfect(n: usize, word_ms: usize) -> Perfect {
        Perfect {
            word_ms,
            words: (0..n).map(|i| format!("w{i}")).collect(),
            next: 0,
        }
    }

    fn policy(k: usize, chunk_ms: usize) -> PolicyConfig {
        PolicyConfig {
            k,
            chunk_ms,
            max_len: None,
        }
    }

    #[test]
    fn uniform_micro_trace() {
        let trace = run_policy(&mut perfect(4, 500), 2000, &policy(1, 500), ClockMode::Ideal).unwrap();
        let ideal: Vec<f64> = trace.delays().iter().map(|d| d.0).collect();
        assert_eq!(ideal, vec![500.0, 1000.0, 1500.0, 2000.0]);
        assert_eq!(laal(&trace, 4, Clock::Ideal).unwrap(), 500.0);
        assert_eq!(laal(&trace, 4, Clock::Wall).unwrap(), 500.0);
        let mut buf = Vec::new();
        write_trace(&mut buf, &trace).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("READ\t500\nWRITE\tw0\t500\t500\nREAD\t1000\n"));
    }

    #[test]
    fn large_k_waits_for_the_whole_source() {
        let trace = run_policy(&mut perfect(3, 500), 1500, &policy(5, 500), ClockMode::Ideal).unwrap();
        assert_eq!(trace.delays().len(), 3);
        assert!(trace.delays().iter().all(|d| d.0 == 1500.0));
    }

    #[test]
    fn policy_validation() {
        assert!(policy(0, 500).validate().is_err());
        assert!(policy(1, 55).validate().is_err());
        assert!(policy(2, 40).validate().is_ok());
    }

    #[test]
    fn word_cap_and_source_bound() {
        let mut agent = perfect(50, 100);
        let p = PolicyConfig {
            max_len: Some(5),
            ..policy(1, 100)
        };
        let trace = run_policy(&mut agent, 1000, &p, ClockMode::Ideal).unwrap();
        assert_eq!(trace.delays().len(), 5);
        for a in &trace.actions {
            if let Action::Read { consumed_ms } = a {
                assert!(*consumed_ms <= 1000.0);
            }
        }
    }

    #[test]
    fn ctc_word_detection() {
        let onehots = |ids: &[usize]| {
            let rows: Vec<Vec<f64>> = ids
                .iter()
                .map(|&i| (0..4).map(|j| if j == i { 5.0 } else { 0.0 }).collect())
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };
        assert_eq!(detect_words(&onehots(&[0, 0, 0])), 0);
        assert_eq!(detect_words(&onehots(&[1, 1, 0, 2, 2])), 2);
        assert_eq!(detect_words(&onehots(&[1, 0, 1])), 2);
    }

    #[test]
    fn laal_cutoff_and_normalization() {
        let mk = |delays: &[(f64, f64)], t: f64| SimulTrace {
            actions: delays
                .iter()
                .map(|&(i, w)| Action::Write {
                    word: "x".into(),
                    ideal_ms: i,
                    wall_ms: w,
                })
                .collect(),
            source_duration_ms: t,
            hypothesis: AnnotatedText::default(),
        };
        let one = mk(&[(800.0, 900.0)], 800.0);
        assert_eq!(laal(&one, 1, Clock::Ideal).unwrap(), 800.0);
        assert_eq!(laal(&one, 1, Clock::Wall).unwrap(), 900.0);
        // words after the first one at T are ignored
        let tr = mk(&[(200.0, 200.0), (1000.0, 1000.0), (1000.0, 1000.0)], 1000.0);
        let expected = (200.0 + (1000.0 - 1000.0 / 3.0)) / 2.0;
        assert!((laal(&tr, 2, Clock::Ideal).unwrap() - expected).abs() < 1e-12);
        // a longer reference sets the rate
        let expected = (200.0 + (1000.0 - 1000.0 / 5.0)) / 2.0;
        assert!((laal(&tr, 5, Clock::Ideal).unwrap() - expected).abs() < 1e-12);
        assert!(matches!(laal(&mk(&[], 10.0), 1, Clock::Ideal), Err(SimulError::EmptyTrace)));
    }

    #[test]
    fn sweep_csv() {
        let rows = vec![SweepRow {
            k: 1,
            bleu: 50.0,
            f1: 0.5,
            laal_ideal: 400.0,
            laal_wall: 500.0,
            wait_share: 0.8,
        }];
        let mut buf = Vec::new();
        write_sweep(&mut buf, &rows).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "k,bleu,f1,laal_ideal,laal_wall,wait_share\n1,50.0000,0.500000,400.000,500.000,0.800000\n"
        );
    }
}
