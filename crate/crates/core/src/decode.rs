//! Offline inference: greedy and beam search for every variant, teacher-forced
//! scoring, and decoder-step accounting.

use std::io::Write;

use thiserror::Error;

use crate::data::Example;
use crate::model::vocab::{BOS, EOS};
use crate::model::{EncoderOutput, Model, ModelError, Variant};
use crate::nncore::tensor::{argmax, log_softmax};
use crate::nncore::Tensor;
use crate::par::{self, ExecMode};
use crate::tagset::{self, AnnotatedText, NeCategory, ParallelLabels};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("beam size must be at least 1")]
    InvalidBeam,
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("forced decoding needs a non-empty target")]
    EmptyTarget,
    #[error(transparent)]
    Model(ModelError),
}

impl From<ModelError> for DecodeError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::UnknownToken(t) => DecodeError::UnknownToken(t),
            other => DecodeError::Model(other),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Defaults to `4 × compressed source length + 10`.
    pub max_len: Option<usize>,
    /// Rank finished hypotheses by log-prob per emitted token.
    pub length_norm: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 5,
            max_len: None,
            length_norm: true,
        }
    }
}

pub fn default_max_len(enc: &EncoderOutput) -> usize {
    4 * enc.compressed_len() + 10
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Emitted ids, `</s>` included once finished.
    pub tokens: Vec<usize>,
    /// Category index per emitted id (parallel variants only).
    pub tags: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    fn score(&self, length_norm: bool) -> f64 {
        if length_norm && !self.tokens.is_empty() {
            self.log_prob / self.tokens.len() as f64
        } else {
            self.log_prob
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub annotated: AnnotatedText,
    /// Emitted tokens without `</s>`; tag tokens included for inline.
    pub raw_tokens: Vec<String>,
    /// Decoder forward positions, `</s>` included.
    pub decoder_steps: usize,
    pub log_prob: f64,
    pub truncated: bool,
    pub warnings: Vec<String>,
}

struct Step {
    logp: Vec<f64>,
    tag: Option<usize>,
}

fn step(model: &Model, enc: &EncoderOutput, hyp: &BeamHypothesis) -> Result<Step, ModelError> {
    let mut prefix = Vec::with_capacity(hyp.tokens.len() + 1);
    prefix.push(BOS);
    prefix.extend(&hyp.tokens);
    let tags: Vec<usize> = if model.variant() == Variant::ParallelEmb {
        std::iter::once(NeCategory::O.index())
            .chain(hyp.tags.iter().copied())
            .collect()
    } else {
        Vec::new()
    };
    let out = model.decode_step(enc, &prefix, &tags)?;
    Ok(Step {
        logp: log_softmax(&out.token_logits),
        tag: out.tag_logits.map(|t| argmax(&t)),
    })
}

fn extend(hyp: &BeamHypothesis, token: usize, logp: f64, tag: Option<usize>) -> BeamHypothesis {
    let mut h = hyp.clone();
    h.tokens.push(token);
    if let Some(t) = tag {
        h.tags.push(t);
    }
    h.log_prob += logp;
    h.finished = token == EOS;
    h
}

fn finish(model: &Model, hyp: BeamHypothesis, truncated: bool) -> DecodeResult {
    let vocab = model.tgt_vocab();
    let emitted = hyp.tokens.len() - usize::from(hyp.finished);
    let raw_tokens: Vec<String> = hyp.tokens[..emitted]
        .iter()
        .map(|&i| vocab.token(i).to_string())
        .collect();
    let mut warnings = Vec::new();
    if truncated {
        warnings.push(format!("MaxLenExceeded: stopped after {} tokens", hyp.tokens.len()));
    }
    let annotated = match model.variant() {
        Variant::Inline => {
            let rec = tagset::parse_inline_lenient(&raw_tokens);
            if rec.warnings > 0 {
                warnings.push(format!("dropped {} unbalanced tag tokens", rec.warnings));
            }
            rec.text
        }
        _ => {
            let labels = ParallelLabels {
                labels: hyp.tags[..emitted]
                    .iter()
                    .map(|&t| NeCategory::from_index(t).expect("tag head has 19 outputs"))
                    .collect(),
            };
            tagset::from_token_labels(&raw_tokens, &labels).expect("one label per token")
        }
    };
    DecodeResult {
        annotated,
        raw_tokens,
        decoder_steps: hyp.tokens.len(),
        log_prob: hyp.log_prob,
        truncated,
        warnings,
    }
}

fn empty_hyp() -> BeamHypothesis {
    BeamHypothesis {
        tokens: Vec::new(),
        tags: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy_decode(model: &Model, features: &Tensor, max_len: Option<usize>) -> Result<DecodeResult, DecodeError> {
    let enc = model.encode(features)?;
    greedy_from(model, &enc, max_len)
}

pub fn greedy_from(model: &Model, enc: &EncoderOutput, max_len: Option<usize>) -> Result<DecodeResult, DecodeError> {
    let max_len = max_len.unwrap_or_else(|| default_max_len(enc));
    let mut hyp = empty_hyp();
    while !hyp.finished && hyp.tokens.len() < max_len {
        let s = step(model, enc, &hyp)?;
        let best = argmax(&s.logp);
        hyp = extend(&hyp, best, s.logp[best], s.tag);
    }
    let truncated = !hyp.finished;
    Ok(finish(model, hyp, truncated))
}

/// Beam search over the token vocabulary. Category tags (parallel variants)
/// are the per-step argmax of the tag head and do not affect scores.
pub fn beam_search(model: &Model, features: &Tensor, cfg: &DecodeConfig) -> Result<DecodeResult, DecodeError> {
    let enc = model.encode(features)?;
    let (pool, truncated) = explore(model, &enc, cfg)?;
    let best = pool
        .into_iter()
        .reduce(|best, h| {
            if h.score(cfg.length_norm) > best.score(cfg.length_norm) {
                h
            } else {
                best
            }
        })
        .expect("beam keeps at least one hypothesis");
    Ok(finish(model, best, truncated))
}

/// Runs the beam and returns every finished hypothesis, or the surviving
/// unfinished ones (flagged `true`) if none finished within `max_len`.
pub(crate) fn explore(
    model: &Model,
    enc: &EncoderOutput,
    cfg: &DecodeConfig,
) -> Result<(Vec<BeamHypothesis>, bool), DecodeError> {
    if cfg.beam == 0 {
        return Err(DecodeError::InvalidBeam);
    }
    let max_len = cfg.max_len.unwrap_or_else(|| default_max_len(enc));
    let mut live = vec![empty_hyp()];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    let mut len = 0;
    while !live.is_empty() && finished.len() < cfg.beam && len < max_len {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        let mut steps = Vec::with_capacity(live.len());
        for (hi, hyp) in live.iter().enumerate() {
            let s = step(model, enc, hyp)?;
            for (tok, &lp) in s.logp.iter().enumerate() {
                cands.push((hyp.log_prob + lp, hi, tok));
            }
            steps.push(s);
        }
        // score desc, then hypothesis, then token id
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(cfg.beam);
        for &(_, hi, tok) in cands.iter().take(cfg.beam) {
            let h = extend(&live[hi], tok, steps[hi].logp[tok], steps[hi].tag);
            if h.finished {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
        len += 1;
    }
    if finished.is_empty() {
        Ok((live, true))
    } else {
        Ok((finished, false))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForcedScore {
    pub log_prob: f64,
    pub decoder_steps: usize,
}

/// Teacher-forced log-probability of `target` (gold tags fed back for parallel_emb).
pub fn forced_decode(model: &Model, features: &Tensor, target: &AnnotatedText) -> Result<ForcedScore, DecodeError> {
    if target.tokens.is_empty() {
        return Err(DecodeError::EmptyTarget);
    }
    let enc = model.encode(features)?;
    let (ids, labels) = model.decoder_targets(target)?;
    let mut dec_in = vec![BOS];
    dec_in.extend(&ids);
    let mut dec_out = ids;
    dec_out.push(EOS);
    let tags_in: Vec<usize> = if model.variant() == Variant::ParallelEmb {
        std::iter::once(NeCategory::O.index()).chain(labels).collect()
    } else {
        Vec::new()
    };
    let (logits, _) = model.decoder_logits(&enc, &dec_in, &tags_in)?;
    let log_prob = dec_out
        .iter()
        .enumerate()
        .map(|(i, &gold)| log_softmax(logits.row(i))[gold])
        .sum();
    Ok(ForcedScore {
        log_prob,
        decoder_steps: dec_out.len(),
    })
}

/// Decoder positions needed to emit `text` under `variant`, `</s>` included.
pub fn step_count(text: &AnnotatedText, variant: Variant) -> usize {
    let tags = if variant == Variant::Inline {
        2 * text.spans.len()
    } else {
        0
    };
    text.tokens.len() + tags + 1
}

/// Extra decoder positions of inline over parallel decoding, relative to parallel.
pub fn inline_step_overhead(texts: &[AnnotatedText]) -> f64 {
    let extra: usize = texts.iter().map(|t| 2 * t.spans.len()).sum();
    let base: usize = texts.iter().map(|t| t.tokens.len() + 1).sum();
    if base == 0 {
        0.0
    } else {
        extra as f64 / base as f64
    }
}

/// Beam (or greedy when `beam == 1`) decoding of many utterances.
pub fn decode_all(
    model: &Model,
    examples: &[&Example],
    cfg: &DecodeConfig,
    exec: ExecMode,
) -> Result<Vec<DecodeResult>, DecodeError> {
    par::map(exec, examples, |ex| beam_search(model, &ex.features, cfg))
        .into_iter()
        .collect()
}

/// One inline-tagged hypothesis per line.
pub fn write_hypotheses<W: Write>(out: &mut W, results: &[DecodeResult]) -> std::io::Result<()> {
    for r in results {
        writeln!(out, "{}", tagset::format_line(&r.annotated))?;
    }
    Ok(())
}

pub const SIDECAR_HEADER: &str = "utt_id,decoder_steps,log_prob";

pub fn write_sidecar<W: Write>(out: &mut W, utt_ids: &[&str], results: &[DecodeResult]) -> std::io::Result<()> {
    writeln!(out, "{SIDECAR_HEADER}")?;
    for (id, r) in utt_ids.iter().zip(results) {
        writeln!(out, "{id},{},{}", r.decoder_steps, r.log_prob)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::vocab::Vocab;
    use crate::model::ModelConfig;
    use crate::tagset::NeSpan;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const WORDS: [&str; 5] = ["ta", "tb", "Na", "Nb", "Nc"];

    fn model(variant: Variant, seed: u64) -> Model {
        let cfg = ModelConfig {
            feature_dim: 6,
            enc_layers: 2,
            dec_layers: 1,
            model_dim: 8,
            ffn_dim: 16,
            heads: 2,
            ctc_tap_layer: 1,
            conv_kernel: 3,
            dropout: 0.0,
            ..ModelConfig::toy(variant)
        };
        let tgt = Vocab::target(&WORDS, variant == Variant::Inline);
        Model::new(cfg, Vocab::source(&["sa", "sb"]), tgt, seed).unwrap()
    }

    fn features(t: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[t, 6], (0..t * 6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn beam_one_is_greedy() {
        for variant in Variant::ALL {
            for seed in 0..4 {
                let m = model(variant, seed);
                let x = features(24, seed);
                let g = greedy_decode(&m, &x, None).unwrap();
                let b = beam_search(
                    &m,
                    &x,
                    &DecodeConfig {
                        beam: 1,
                        ..DecodeConfig::default()
                    },
                )
                .unwrap();
                assert_eq!(g, b);
                assert_eq!(g, greedy_decode(&m, &x, None).unwrap());
            }
        }
    }

    #[test]
    fn max_len_truncation_is_flagged() {
        let m = model(Variant::Parallel, 1);
        let r = greedy_decode(&m, &features(4, 2), Some(2)).unwrap();
        assert!(r.decoder_steps <= 2);
        if r.truncated {
            assert!(r.warnings.iter().any(|w| w.starts_with("MaxLenExceeded")));
        }
        let r = beam_search(
            &m,
            &features(4, 2),
            &DecodeConfig {
                max_len: Some(3),
                ..DecodeConfig::default()
            },
        )
        .unwrap();
        assert!(r.decoder_steps <= 3);
        assert_eq!(r.truncated, r.warnings.iter().any(|w| w.starts_with("MaxLenExceeded")));
    }

    #[test]
    fn beam_result_is_best_normalized() {
        for variant in Variant::ALL {
            let m = model(variant, 3);
            let x = features(16, 5);
            let cfg = DecodeConfig::default();
            let r = beam_search(&m, &x, &cfg).unwrap();
            assert!(r.log_prob <= 0.0);
            let (pool, truncated) = explore(&m, &m.encode(&x).unwrap(), &cfg).unwrap();
            assert_eq!(truncated, r.truncated);
            let best = r.log_prob / r.decoder_steps as f64;
            for h in &pool {
                assert!(h.score(true) <= best);
            }
        }
    }

    fn random_text(rng: &mut ChaCha8Rng) -> AnnotatedText {
        let n = rng.random_range(1..8);
        let tokens: Vec<String> = (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string()).collect();
        let mut spans = Vec::new();
        let mut i = 0;
        while i < n {
            if rng.random_bool(0.3) {
                let end = rng.random_range(i + 1..=n.min(i + 3));
                let cat = NeCategory::entities()[rng.random_range(0..18)];
                spans.push(NeSpan::new(i, end, cat));
                i = end + 1;
            } else {
                i += 1;
            }
        }
        AnnotatedText::new(tokens, spans).unwrap()
    }

    #[test]
    fn forced_step_law() {
        let inline = model(Variant::Inline, 0);
        let par = model(Variant::ParallelEmb, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = features(20, 1);
        for _ in 0..30 {
            let t = random_text(&mut rng);
            let a = forced_decode(&inline, &x, &t).unwrap();
            let b = forced_decode(&par, &x, &t).unwrap();
            assert_eq!(a.decoder_steps - b.decoder_steps, 2 * t.spans.len());
            assert_eq!(a.decoder_steps, step_count(&t, Variant::Inline));
            assert_eq!(b.decoder_steps, step_count(&t, Variant::Parallel));
            assert!(a.log_prob <= 0.0 && b.log_prob <= 0.0);
        }
        let bad = AnnotatedText::plain(&["zz"]);
        assert!(matches!(forced_decode(&par, &x, &bad), Err(DecodeError::UnknownToken(_))));
        assert!(matches!(
            forced_decode(&par, &x, &AnnotatedText::plain::<&str>(&[])),
            Err(DecodeError::EmptyTarget)
        ));
    }

    #[test]
    fn decode_steps_follow_counting_rule() {
        for variant in Variant::ALL {
            let m = model(variant, 7);
            for seed in 0..3 {
                let r = greedy_decode(&m, &features(30, seed), None).unwrap();
                if !r.truncated && r.warnings.is_empty() {
                    assert_eq!(r.decoder_steps, step_count(&r.annotated, variant));
                }
                assert_eq!(r.decoder_steps, r.raw_tokens.len() + usize::from(!r.truncated));
            }
        }
    }

    #[test]
    fn overhead_ratio() {
        let t = AnnotatedText::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![NeSpan::new(0, 1, NeCategory::Person)],
        )
        .unwrap();
        assert_eq!(inline_step_overhead(&[t.clone(), AnnotatedText::plain(&["x"])]), 2.0 / 6.0);
        assert_eq!(inline_step_overhead(&[]), 0.0);
    }

    #[test]
    fn output_files() {
        let r = DecodeResult {
            annotated: AnnotatedText::new(vec!["Na".into(), "ta".into()], vec![NeSpan::new(0, 1, NeCategory::Gpe)]).unwrap(),
            raw_tokens: vec![],
            decoder_steps: 3,
            log_prob: -1.5,
            truncated: false,
            warnings: vec![],
        };
        let mut buf = Vec::new();
        write_hypotheses(&mut buf, std::slice::from_ref(&r)).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "<GPE> Na </GPE> ta\n");
        let mut buf = Vec::new();
        write_sidecar(&mut buf, &["u1"], &[r]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "utt_id,decoder_steps,log_prob\nu1,3,-1.5\n");
    }
}
