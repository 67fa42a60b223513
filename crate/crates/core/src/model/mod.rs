//! Speech encoder (convolutional subsampler, Conformer blocks, intermediate CTC
//! head, CTC compression) and the three decoder variants.

mod net;
pub mod vocab;

use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nncore::checkpoint::{read_checkpoint, write_checkpoint};
use crate::nncore::init::sinusoidal_positions;
use crate::nncore::{gradcheck, CoordSelection, GradcheckReport, Gradients, Graph, NnError, ParamSet, Tensor};
use crate::rng::rng_for;
use crate::tagset::{self, AnnotatedText, NeCategory, NUM_LABELS, NUM_TAG_TOKENS};

pub use net::{equal_runs, subsampled_len};
use net::{Layout, Net};
use vocab::{Vocab, BOS, EOS};

/// Positions precomputed for the sinusoidal table; longer inputs compute on demand.
const POSITION_CACHE: usize = 512;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input has {frames} frames, need at least {min}")]
    InputTooShort { frames: usize, min: usize },
    #[error("{tags} previous tags for {tokens} previous tokens")]
    TagAlignmentMismatch { tokens: usize, tags: usize },
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Inline,
    Parallel,
    ParallelEmb,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Inline, Variant::Parallel, Variant::ParallelEmb];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Inline => "inline",
            Variant::Parallel => "parallel",
            Variant::ParallelEmb => "parallel_emb",
        }
    }

    pub fn has_tag_head(self) -> bool {
        self != Variant::Inline
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ModelError::InvalidConfig(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    /// 1-based encoder layer feeding the CTC head and compression.
    pub ctc_tap_layer: usize,
    pub conv_kernel: usize,
    pub use_conv_module: bool,
    pub dropout: f64,
    pub variant: Variant,
    /// Source vocabulary including the CTC blank; set from the vocabulary by [`Model::new`].
    pub src_vocab_size: usize,
    /// Decoder vocabulary; set from the vocabulary by [`Model::new`].
    pub vocab_size: usize,
}

/// Total downsampling of the convolutional front end.
pub const SUBSAMPLE_FACTOR: usize = 4;

impl ModelConfig {
    /// Desk-scale defaults: 4 encoder and 2 decoder layers of width 64.
    pub fn toy(variant: Variant) -> Self {
        let enc_layers = 4;
        ModelConfig {
            feature_dim: 80,
            enc_layers,
            dec_layers: 2,
            model_dim: 64,
            ffn_dim: 128,
            heads: 4,
            ctc_tap_layer: default_tap(enc_layers),
            conv_kernel: 7,
            use_conv_module: true,
            dropout: 0.1,
            variant,
            src_vocab_size: 0,
            vocab_size: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("enc_layers and dec_layers must be positive".into());
        }
        if !(1..=self.enc_layers).contains(&self.ctc_tap_layer) {
            return bad(format!(
                "ctc_tap_layer {} outside 1..={}",
                self.ctc_tap_layer, self.enc_layers
            ));
        }
        if self.model_dim == 0 || self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            ));
        }
        if !self.model_dim.is_multiple_of(2) {
            return bad("model_dim must be even".into());
        }
        if self.ffn_dim == 0 || self.feature_dim == 0 {
            return bad("ffn_dim and feature_dim must be positive".into());
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad("conv_kernel must be odd".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)".into());
        }
        Ok(())
    }

    /// `key=value` pairs, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (k.to_string(), v);
        vec![
            kv("variant", self.variant.to_string()),
            kv("feature_dim", self.feature_dim.to_string()),
            kv("enc_layers", self.enc_layers.to_string()),
            kv("dec_layers", self.dec_layers.to_string()),
            kv("model_dim", self.model_dim.to_string()),
            kv("ffn_dim", self.ffn_dim.to_string()),
            kv("heads", self.heads.to_string()),
            kv("ctc_tap_layer", self.ctc_tap_layer.to_string()),
            kv("conv_kernel", self.conv_kernel.to_string()),
            kv("use_conv_module", self.use_conv_module.to_string()),
            kv("dropout", self.dropout.to_string()),
            kv("src_vocab_size", self.src_vocab_size.to_string()),
            kv("vocab_size", self.vocab_size.to_string()),
        ]
    }

    /// Inverse of [`ModelConfig::to_pairs`]; every key is required.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, ModelError> {
        let get = |k: &str| {
            pairs
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| ModelError::Checkpoint(format!("missing config key {k}")))
        };
        fn parse<T: FromStr>(k: &str, v: &str) -> Result<T, ModelError> {
            v.parse()
                .map_err(|_| ModelError::Checkpoint(format!("bad value `{v}` for {k}")))
        }
        let num = |k: &str| get(k).and_then(|v| parse::<usize>(k, v));
        let cfg = ModelConfig {
            variant: get("variant")?.parse()?,
            feature_dim: num("feature_dim")?,
            enc_layers: num("enc_layers")?,
            dec_layers: num("dec_layers")?,
            model_dim: num("model_dim")?,
            ffn_dim: num("ffn_dim")?,
            heads: num("heads")?,
            ctc_tap_layer: num("ctc_tap_layer")?,
            conv_kernel: num("conv_kernel")?,
            use_conv_module: parse("use_conv_module", get("use_conv_module")?)?,
            dropout: parse("dropout", get("dropout")?)?,
            src_vocab_size: num("src_vocab_size")?,
            vocab_size: num("vocab_size")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `round(2/3 · enc_layers)`, at least 1.
pub fn default_tap(enc_layers: usize) -> usize {
    ((2.0 * enc_layers as f64 / 3.0).round() as usize).clamp(1, enc_layers.max(1))
}

/// Encoder states after compression plus the tap-layer CTC view.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub states: Tensor,
    /// Pre-compression CTC logits over the source vocabulary (blank = 0).
    pub ctc_logits: Tensor,
    /// Groups of pre-compression positions merged into each state row.
    pub compression_map: Vec<Range<usize>>,
}

impl EncoderOutput {
    pub fn pre_compression_len(&self) -> usize {
        self.ctc_logits.rows()
    }

    pub fn compressed_len(&self) -> usize {
        self.states.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStepOutput {
    pub token_logits: Vec<f64>,
    /// 19-way category logits; `None` for the inline variant.
    pub tag_logits: Option<Vec<f64>>,
}

/// Loss weights and label smoothing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ctc: f64,
    pub tag: f64,
    pub label_smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ctc: 0.5,
            tag: 1.0,
            label_smoothing: 0.1,
        }
    }
}

/// Per-example loss terms. `ce` and `tag_ce` are per target position; `ctc`
/// is the CTC negative log-likelihood divided by the transcript length.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub ctc: f64,
    pub tag_ce: f64,
    pub total: f64,
}

/// Teacher-forcing encodings of one example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Targets {
    /// CTC target: source-vocabulary ids (never blank).
    pub ctc: Vec<usize>,
    /// `<s>` followed by the target ids.
    pub dec_in: Vec<usize>,
    /// Target ids followed by `</s>`.
    pub dec_out: Vec<usize>,
    /// Category index of each `dec_in` position (`<s>` is O). Empty for inline.
    pub tags_in: Vec<usize>,
    /// Category index of each `dec_out` position (`</s>` is O). Empty for inline.
    pub tags_out: Vec<usize>,
}

/// Parameters plus everything needed to interpret them.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
    params: ParamSet,
    src_vocab: Vocab,
    tgt_vocab: Vocab,
    positions: Tensor,
}

impl Model {
    /// Fresh model; `config`'s vocabulary sizes are taken from the vocabularies.
    pub fn new(mut config: ModelConfig, src_vocab: Vocab, tgt_vocab: Vocab, seed: u64) -> Result<Model, ModelError> {
        config.src_vocab_size = src_vocab.len();
        config.vocab_size = tgt_vocab.len();
        config.validate()?;
        let tags = tgt_vocab.num_tags();
        let expected = if config.variant == Variant::Inline {
            NUM_TAG_TOKENS
        } else {
            0
        };
        if tags != expected {
            return Err(ModelError::InvalidConfig(format!(
                "{} variant needs {expected} tag tokens in the target vocabulary, found {tags}",
                config.variant
            )));
        }
        let mut rng = rng_for(seed, "model-init");
        let (layout, params) = Layout::build(&config, &mut rng);
        let positions = sinusoidal_positions(POSITION_CACHE, config.model_dim);
        Ok(Model {
            config,
            layout,
            params,
            src_vocab,
            tgt_vocab,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn src_vocab(&self) -> &Vocab {
        &self.src_vocab
    }

    pub fn tgt_vocab(&self) -> &Vocab {
        &self.tgt_vocab
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    /// Id of the parallel_emb category-embedding table.
    pub fn tag_embedding(&self) -> Option<crate::nncore::ParamId> {
        self.layout.tag_emb()
    }

    fn net(&self) -> Net<'_> {
        Net {
            cfg: &self.config,
            layout: &self.layout,
            positions: &self.positions,
        }
    }

    /// Inference-mode encoder pass.
    pub fn encode(&self, features: &Tensor) -> Result<EncoderOutput, ModelError> {
        let mut g = Graph::new(&self.params);
        let enc = self.net().encode(&mut g, features.clone())?;
        Ok(EncoderOutput {
            states: g.value(enc.states).clone(),
            ctc_logits: g.value(enc.ctc_logits).clone(),
            compression_map: enc.groups,
        })
    }

    /// Decoder outputs at every prefix position: row `i` scores the token
    /// following `prev_tokens[..=i]`.
    pub fn decoder_logits(
        &self,
        enc: &EncoderOutput,
        prev_tokens: &[usize],
        prev_tags: &[usize],
    ) -> Result<(Tensor, Option<Tensor>), ModelError> {
        if prev_tokens.is_empty() {
            return Err(ModelError::Nn(NnError::DimMismatch("empty decoder prefix".into())));
        }
        let mut g = Graph::new(&self.params);
        let memory = g.input(enc.states.clone());
        let (logits, tags) = self.net().decode(&mut g, memory, prev_tokens, prev_tags)?;
        Ok((g.value(logits).clone(), tags.map(|t| g.value(t).clone())))
    }

    /// Next-token (and, for parallel variants, current-token category) logits.
    ///
    /// `prev_tags` is read only by parallel_emb and must then align with
    /// `prev_tokens`.
    pub fn decode_step(
        &self,
        enc: &EncoderOutput,
        prev_tokens: &[usize],
        prev_tags: &[usize],
    ) -> Result<DecoderStepOutput, ModelError> {
        let (logits, tags) = self.decoder_logits(enc, prev_tokens, prev_tags)?;
        let last = logits.rows() - 1;
        Ok(DecoderStepOutput {
            token_logits: logits.row(last).to_vec(),
            tag_logits: tags.map(|t| t.row(last).to_vec()),
        })
    }

    fn target_id(&self, tok: &str) -> Result<usize, ModelError> {
        self.tgt_vocab
            .id(tok)
            .ok_or_else(|| ModelError::UnknownToken(tok.to_string()))
    }

    /// Encodes the decoder side of `target` for this variant.
    pub fn decoder_targets(&self, target: &AnnotatedText) -> Result<(Vec<usize>, Vec<usize>), ModelError> {
        let ids = match self.config.variant {
            Variant::Inline => tagset::serialize_inline(target),
            _ => target.tokens.clone(),
        }
        .iter()
        .map(|t| self.target_id(t))
        .collect::<Result<Vec<_>, _>>()?;
        let labels = if self.config.variant.has_tag_head() {
            tagset::to_token_labels(target)
                .labels
                .iter()
                .map(|c| c.index())
                .collect()
        } else {
            Vec::new()
        };
        Ok((ids, labels))
    }

    pub fn targets(&self, source: &[String], target: &AnnotatedText) -> Result<Targets, ModelError> {
        let ctc = source
            .iter()
            .map(|t| {
                self.src_vocab
                    .id(t)
                    .filter(|&i| i != vocab::BLANK)
                    .ok_or_else(|| ModelError::UnknownToken(t.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let (ids, labels) = self.decoder_targets(target)?;
        let mut dec_in = vec![BOS];
        dec_in.extend(&ids);
        let mut dec_out = ids;
        dec_out.push(EOS);
        let (tags_in, tags_out) = if self.config.variant.has_tag_head() {
            let o = NeCategory::O.index();
            let mut tin = vec![o];
            tin.extend(&labels);
            let mut tout = labels;
            tout.push(o);
            (tin, tout)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(Targets {
            ctc,
            dec_in,
            dec_out,
            tags_in,
            tags_out,
        })
    }

    /// Teacher-forced losses and, when `with_grad`, parameter gradients.
    /// Dropout is active iff `dropout_rng` is given.
    pub fn forward_targets(
        &self,
        features: &Tensor,
        targets: &Targets,
        weights: &LossWeights,
        dropout_rng: Option<ChaCha8Rng>,
        with_grad: bool,
    ) -> Result<(LossBreakdown, Option<Gradients>), ModelError> {
        let mut g = match dropout_rng {
            Some(rng) => Graph::training(&self.params, rng),
            None => Graph::new(&self.params),
        };
        let net = self.net();
        let enc = net.encode(&mut g, features.clone())?;
        let (logits, tag_logits) = net.decode(&mut g, enc.states, &targets.dec_in, &targets.tags_in)?;
        let ce = g.label_smoothed_ce(logits, &targets.dec_out, weights.label_smoothing, None)?;
        let ctc_raw = g.ctc_loss(enc.ctc_logits, &targets.ctc)?;
        let ctc_norm = 1.0 / targets.ctc.len().max(1) as f64;
        let mut terms = vec![(ce, 1.0), (ctc_raw, weights.ctc * ctc_norm)];
        let mut tag_ce = 0.0;
        if let Some(tl) = tag_logits {
            let t = g.label_smoothed_ce(tl, &targets.tags_out, weights.label_smoothing, None)?;
            tag_ce = g.value(t).item();
            terms.push((t, weights.tag));
        }
        let total = g.weighted_sum(&terms);
        let breakdown = LossBreakdown {
            ce: g.value(ce).item(),
            ctc: g.value(ctc_raw).item() * ctc_norm,
            tag_ce,
            total: g.value(total).item(),
        };
        if !breakdown.total.is_finite() {
            return Err(ModelError::Nn(NnError::NonFiniteLoss(breakdown.total)));
        }
        let grads = with_grad.then(|| g.backward(total));
        Ok((breakdown, grads))
    }

    /// Convenience wrapper over [`Model::forward_targets`] without dropout.
    pub fn forward_training(
        &self,
        features: &Tensor,
        target: &AnnotatedText,
        source: &[String],
        weights: &LossWeights,
    ) -> Result<LossBreakdown, ModelError> {
        let targets = self.targets(source, target)?;
        Ok(self.forward_targets(features, &targets, weights, None, false)?.0)
    }

    /// Finite-difference check of the full teacher-forced loss (no dropout).
    pub fn gradcheck(
        &self,
        features: &Tensor,
        targets: &Targets,
        weights: &LossWeights,
        eps: f64,
        selection: CoordSelection,
    ) -> Result<GradcheckReport, ModelError> {
        let mut params = self.params.clone();
        let mut probe = self.clone();
        let mut failure = None;
        let report = gradcheck(
            &mut params,
            |p| {
                probe.params.clone_from(p);
                match probe.forward_targets(features, targets, weights, None, true) {
                    Ok((l, g)) => Ok((l.total, g.expect("gradients requested"))),
                    Err(ModelError::Nn(e)) => Err(e),
                    Err(e) => {
                        let msg = e.to_string();
                        failure = Some(e);
                        Err(NnError::DimMismatch(msg))
                    }
                }
            },
            eps,
            selection,
        );
        match (report, failure) {
            (_, Some(e)) => Err(e),
            (r, None) => Ok(r?),
        }
    }

    pub fn save<W: Write>(&self, out: &mut W) -> Result<(), ModelError> {
        let mut header = self.config.to_pairs();
        header.push(("src_vocab".into(), self.src_vocab.tokens().join(" ")));
        header.push(("tgt_vocab".into(), self.tgt_vocab.tokens().join(" ")));
        write_checkpoint(out, &header, &self.params)?;
        Ok(())
    }

    pub fn load<R: Read>(input: &mut R) -> Result<Model, ModelError> {
        let data = read_checkpoint(input)?;
        let config = ModelConfig::from_pairs(&data.config)?;
        let vocab = |k: &str| {
            data.config
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| Vocab::new(v.split_whitespace().map(String::from).collect()))
                .ok_or_else(|| ModelError::Checkpoint(format!("missing {k}")))
        };
        let (src, tgt) = (vocab("src_vocab")?, vocab("tgt_vocab")?);
        if src.len() != config.src_vocab_size || tgt.len() != config.vocab_size {
            return Err(ModelError::Checkpoint("vocabulary sizes disagree with config".into()));
        }
        let mut model = Model::new(config, src, tgt, 0)?;
        if data.tensors.len() != model.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                data.tensors.len()
            )));
        }
        for (p, (name, value)) in model.params.iter_mut().zip(data.tensors) {
            if p.name != name || p.value.shape() != value.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {name} {:?} does not match {} {:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = value;
        }
        Ok(model)
    }
}

/// Merges runs of equal CTC argmax into their mean vector (blank runs are
/// merged too, not dropped).
pub fn ctc_compress(states: &Tensor, ctc_argmax: &[usize]) -> (Tensor, Vec<Range<usize>>) {
    assert_eq!(states.rows(), ctc_argmax.len(), "one argmax per state");
    let groups = equal_runs(ctc_argmax);
    let mut out = Tensor::zeros(&[groups.len(), states.cols()]);
    for (gi, range) in groups.iter().enumerate() {
        let o = out.row_mut(gi);
        for r in range.clone() {
            for (a, b) in o.iter_mut().zip(states.row(r)) {
                *a += b;
            }
        }
        if range.len() > 1 {
            let inv = 1.0 / range.len() as f64;
            o.iter_mut().for_each(|v| *v *= inv);
        }
    }
    (out, groups)
}

/// Number of category labels the parallel tag head predicts.
pub const TAG_HEAD_WIDTH: usize = NUM_LABELS;

#[cfg(test)]
mod tests;
