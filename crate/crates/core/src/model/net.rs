//! Parameter layout and graph construction for the encoder and decoders.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError, Variant};
use crate::nncore::init::xavier_uniform;
use crate::nncore::tensor::argmax;
use crate::nncore::{Graph, NnError, ParamId, ParamSet, Tensor, Var};
use crate::tagset::NUM_LABELS;

const SUBSAMPLE_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Ffn {
    norm: Norm,
    l1: Linear,
    l2: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Attn {
    norm: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvModule {
    norm: Norm,
    pw1: Linear,
    dw_w: ParamId,
    dw_b: ParamId,
    mid_norm: Norm,
    pw2: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncBlock {
    /// Leading half-step FFN; absent in plain Transformer blocks.
    ff1: Option<Ffn>,
    attn: Attn,
    conv: Option<ConvModule>,
    ff2: Ffn,
    out_norm: Norm,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecBlock {
    self_attn: Attn,
    cross_attn: Attn,
    ffn: Ffn,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    sub1: Linear,
    sub2: Linear,
    enc: Vec<EncBlock>,
    ctc: Linear,
    tok_emb: ParamId,
    tag_emb: Option<ParamId>,
    dec: Vec<DecBlock>,
    dec_norm: Norm,
    out: Linear,
    tag_head: Option<Linear>,
}

struct Builder<'r, R: Rng> {
    params: ParamSet,
    rng: &'r mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let l = self.linear_no_bias(name, fan_in, fan_out);
        Linear {
            b: Some(self.params.add(format!("{name}.b"), Tensor::zeros(&[fan_out]))),
            ..l
        }
    }

    fn linear_no_bias(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let w = xavier_uniform(&[fan_in, fan_out], fan_in, fan_out, self.rng);
        Linear {
            w: self.params.add(format!("{name}.w"), w),
            b: None,
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.params.add(format!("{name}.g"), Tensor::filled(&[d], 1.0)),
            b: self.params.add(format!("{name}.b"), Tensor::zeros(&[d])),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, hidden: usize) -> Ffn {
        Ffn {
            norm: self.norm(&format!("{name}.norm"), d),
            l1: self.linear(&format!("{name}.l1"), d, hidden),
            l2: self.linear(&format!("{name}.l2"), hidden, d),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> Attn {
        Attn {
            norm: self.norm(&format!("{name}.norm"), d),
            q: self.linear(&format!("{name}.q"), d, d),
            // keys carry no bias
            k: self.linear_no_bias(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn embedding(&mut self, name: &str, rows: usize, d: usize) -> ParamId {
        let normal = Normal::new(0.0, (d as f64).powf(-0.5)).expect("positive std");
        let data = (0..rows * d).map(|_| normal.sample(self.rng)).collect();
        self.params
            .add(name, Tensor::from_vec(&[rows, d], data).expect("embedding shape"))
    }
}

impl Layout {
    pub(crate) fn build<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> (Layout, ParamSet) {
        let d = cfg.model_dim;
        let mut b = Builder {
            params: ParamSet::new(),
            rng,
        };
        let sub1 = b.linear("enc.sub1", SUBSAMPLE_KERNEL * cfg.feature_dim, 2 * d);
        let sub2 = b.linear("enc.sub2", SUBSAMPLE_KERNEL * d, 2 * d);
        let enc = (0..cfg.enc_layers)
            .map(|l| {
                let p = format!("enc.{l}");
                let ff1 = cfg
                    .use_conv_module
                    .then(|| b.ffn(&format!("{p}.ff1"), d, cfg.ffn_dim));
                let attn = b.attn(&format!("{p}.attn"), d);
                let conv = cfg.use_conv_module.then(|| {
                    let dw = xavier_uniform(&[cfg.conv_kernel, d], cfg.conv_kernel, cfg.conv_kernel, b.rng);
                    ConvModule {
                        norm: b.norm(&format!("{p}.conv.norm"), d),
                        pw1: b.linear(&format!("{p}.conv.pw1"), d, 2 * d),
                        dw_w: b.params.add(format!("{p}.conv.dw.w"), dw),
                        dw_b: b.params.add(format!("{p}.conv.dw.b"), Tensor::zeros(&[d])),
                        mid_norm: b.norm(&format!("{p}.conv.mid_norm"), d),
                        pw2: b.linear(&format!("{p}.conv.pw2"), d, d),
                    }
                });
                let ff2 = b.ffn(&format!("{p}.ff2"), d, cfg.ffn_dim);
                let out_norm = b.norm(&format!("{p}.out_norm"), d);
                EncBlock {
                    ff1,
                    attn,
                    conv,
                    ff2,
                    out_norm,
                }
            })
            .collect();
        let ctc = b.linear("enc.ctc", d, cfg.src_vocab_size);
        let tok_emb = b.embedding("dec.tok_emb", cfg.vocab_size, d);
        let tag_emb = (cfg.variant == Variant::ParallelEmb)
            .then(|| b.embedding("dec.tag_emb", NUM_LABELS, d));
        let dec = (0..cfg.dec_layers)
            .map(|l| {
                let p = format!("dec.{l}");
                DecBlock {
                    self_attn: b.attn(&format!("{p}.self"), d),
                    cross_attn: b.attn(&format!("{p}.cross"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, cfg.ffn_dim),
                }
            })
            .collect();
        let dec_norm = b.norm("dec.norm", d);
        let out = b.linear("dec.out", d, cfg.vocab_size);
        let tag_head = cfg
            .variant
            .has_tag_head()
            .then(|| b.linear("dec.tag_head", d, NUM_LABELS));
        let layout = Layout {
            sub1,
            sub2,
            enc,
            ctc,
            tok_emb,
            tag_emb,
            dec,
            dec_norm,
            out,
            tag_head,
        };
        (layout, b.params)
    }

    pub(crate) fn tag_emb(&self) -> Option<ParamId> {
        self.tag_emb
    }
}

/// Encoder result inside a graph.
pub(crate) struct EncVars {
    pub states: Var,
    pub ctc_logits: Var,
    pub groups: Vec<Range<usize>>,
}

/// Graph construction bound to one configuration.
pub(crate) struct Net<'m> {
    pub cfg: &'m ModelConfig,
    pub layout: &'m Layout,
    pub positions: &'m Tensor,
}

/// Output length of one stride-2 subsampling convolution.
pub fn subsampled_len(t: usize) -> usize {
    t.div_ceil(2)
}

/// Contiguous runs of equal values.
pub fn equal_runs(labels: &[usize]) -> Vec<Range<usize>> {
    let mut groups: Vec<Range<usize>> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        match groups.last_mut() {
            Some(g) if labels[g.start] == l => g.end = i + 1,
            _ => groups.push(i..i + 1),
        }
    }
    groups
}

impl Net<'_> {
    fn linear(&self, g: &mut Graph, x: Var, l: Linear) -> Result<Var, NnError> {
        let w = g.param(l.w);
        let y = g.matmul(x, w)?;
        match l.b {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    fn norm(&self, g: &mut Graph, x: Var, n: Norm) -> Var {
        let gamma = g.param(n.g);
        let beta = g.param(n.b);
        g.layer_norm(x, gamma, beta)
    }

    fn positions(&self, g: &mut Graph, len: usize) -> Var {
        let table = if len <= self.positions.rows() {
            self.positions.slice_rows(0, len)
        } else {
            crate::nncore::init::sinusoidal_positions(len, self.cfg.model_dim)
        };
        g.input(table)
    }

    /// `x + scale · dropout(r)`.
    fn residual(&self, g: &mut Graph, x: Var, r: Var, scale: f64) -> Result<Var, NnError> {
        let r = g.dropout(r, self.cfg.dropout);
        let r = if scale == 1.0 { r } else { g.scale(r, scale) };
        g.add(x, r)
    }

    fn ffn(&self, g: &mut Graph, x: Var, f: Ffn, gelu: bool) -> Result<Var, NnError> {
        let h = self.norm(g, x, f.norm);
        let h = self.linear(g, h, f.l1)?;
        let h = if gelu { g.gelu(h) } else { g.swish(h) };
        let h = g.dropout(h, self.cfg.dropout);
        self.linear(g, h, f.l2)
    }

    fn attention(&self, g: &mut Graph, x: Var, memory: Option<Var>, a: Attn, causal: bool) -> Result<Var, NnError> {
        let h = self.norm(g, x, a.norm);
        let kv = memory.unwrap_or(h);
        let q = self.linear(g, h, a.q)?;
        let k = self.linear(g, kv, a.k)?;
        let v = self.linear(g, kv, a.v)?;
        let o = g.attention(q, k, v, self.cfg.heads, causal)?;
        self.linear(g, o, a.o)
    }

    fn conv_module(&self, g: &mut Graph, x: Var, c: ConvModule) -> Result<Var, NnError> {
        let h = self.norm(g, x, c.norm);
        let h = self.linear(g, h, c.pw1)?;
        let h = g.glu(h)?;
        let w = g.param(c.dw_w);
        let h = g.depthwise_conv(h, w)?;
        let b = g.param(c.dw_b);
        let h = g.add_bias(h, b)?;
        let h = self.norm(g, h, c.mid_norm);
        let h = g.swish(h);
        self.linear(g, h, c.pw2)
    }

    fn enc_block(&self, g: &mut Graph, mut x: Var, blk: &EncBlock) -> Result<Var, NnError> {
        if let Some(ff1) = blk.ff1 {
            let r = self.ffn(g, x, ff1, false)?;
            x = self.residual(g, x, r, 0.5)?;
        }
        let r = self.attention(g, x, None, blk.attn, false)?;
        x = self.residual(g, x, r, 1.0)?;
        if let Some(conv) = blk.conv {
            let r = self.conv_module(g, x, conv)?;
            x = self.residual(g, x, r, 1.0)?;
        }
        let r = self.ffn(g, x, blk.ff2, false)?;
        let half = if blk.ff1.is_some() { 0.5 } else { 1.0 };
        x = self.residual(g, x, r, half)?;
        Ok(self.norm(g, x, blk.out_norm))
    }

    pub fn encode(&self, g: &mut Graph, features: Tensor) -> Result<EncVars, ModelError> {
        let t = features.rows();
        if t < 4 {
            return Err(ModelError::InputTooShort { frames: t, min: 4 });
        }
        if features.cols() != self.cfg.feature_dim {
            return Err(ModelError::Nn(NnError::DimMismatch(format!(
                "features have {} dims, model expects {}",
                features.cols(),
                self.cfg.feature_dim
            ))));
        }
        let x = g.input(features);
        let c = g.im2col(x, SUBSAMPLE_KERNEL, 2, 1)?;
        let h = self.linear(g, c, self.layout.sub1)?;
        let h = g.glu(h)?;
        let c = g.im2col(h, SUBSAMPLE_KERNEL, 2, 1)?;
        let h = self.linear(g, c, self.layout.sub2)?;
        let h = g.glu(h)?;
        let h = g.scale(h, (self.cfg.model_dim as f64).sqrt());
        let len = g.value(h).rows();
        let pe = self.positions(g, len);
        let h = g.add(h, pe)?;
        let mut h = g.dropout(h, self.cfg.dropout);

        let mut tap = None;
        for (l, blk) in self.layout.enc.iter().enumerate() {
            h = self.enc_block(g, h, blk)?;
            if l + 1 == self.cfg.ctc_tap_layer {
                let logits = self.linear(g, h, self.layout.ctc)?;
                let lv = g.value(logits);
                let best: Vec<usize> = (0..lv.rows()).map(|r| argmax(lv.row(r))).collect();
                let groups = equal_runs(&best);
                h = g.group_mean(h, groups.clone());
                tap = Some((logits, groups));
            }
        }
        let (ctc_logits, groups) = tap.expect("tap layer validated in config");
        Ok(EncVars {
            states: h,
            ctc_logits,
            groups,
        })
    }

    /// Decoder over a whole prefix; row `i` of the outputs predicts position `i + 1`.
    pub fn decode(
        &self,
        g: &mut Graph,
        memory: Var,
        tokens: &[usize],
        tags: &[usize],
    ) -> Result<(Var, Option<Var>), ModelError> {
        let d = self.cfg.model_dim;
        let table = g.param(self.layout.tok_emb);
        let e = g.gather(table, tokens)?;
        let mut x = g.scale(e, (d as f64).sqrt());
        if let Some(tag_emb) = self.layout.tag_emb {
            if tags.len() != tokens.len() {
                return Err(ModelError::TagAlignmentMismatch {
                    tokens: tokens.len(),
                    tags: tags.len(),
                });
            }
            let table = g.param(tag_emb);
            let te = g.gather(table, tags)?;
            x = g.add(x, te)?;
        }
        let pe = self.positions(g, tokens.len());
        x = g.add(x, pe)?;
        x = g.dropout(x, self.cfg.dropout);
        for blk in &self.layout.dec {
            let r = self.attention(g, x, None, blk.self_attn, true)?;
            x = self.residual(g, x, r, 1.0)?;
            let r = self.attention(g, x, Some(memory), blk.cross_attn, false)?;
            x = self.residual(g, x, r, 1.0)?;
            let r = self.ffn(g, x, blk.ffn, true)?;
            x = self.residual(g, x, r, 1.0)?;
        }
        let x = self.norm(g, x, self.layout.dec_norm);
        let logits = self.linear(g, x, self.layout.out)?;
        let tag_logits = match self.layout.tag_head {
            Some(h) => Some(self.linear(g, x, h)?),
            None => None,
        };
        Ok((logits, tag_logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn runs() {
        assert_eq!(equal_runs(&[5, 5, 0, 7]), vec![0..2, 2..3, 3..4]);
        assert_eq!(equal_runs(&[1, 2, 3]), vec![0..1, 1..2, 2..3]);
        assert_eq!(equal_runs(&[4, 4, 4, 4]), vec![0..4]);
        assert!(equal_runs(&[]).is_empty());
    }

    #[test]
    fn subsampling_lengths() {
        assert_eq!(subsampled_len(subsampled_len(16)), 4);
        assert_eq!(subsampled_len(17), 9);
        assert_eq!(subsampled_len(subsampled_len(17)), 5);
    }
}
