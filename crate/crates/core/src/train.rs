//! Deterministic training loop with validation-loss early stopping.

use std::io::Write;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::data::{Example, SyntheticCorpus};
use crate::model::vocab::PAD;
use crate::model::{LossBreakdown, LossWeights, Model, ModelError, Targets};
use crate::nncore::tensor::argmax;
use crate::nncore::{Adam, Gradients, LrSchedule, NnError, ParamSet, Tensor};
use crate::par::{self, ExecMode};
use crate::rng::{derive_seed, rng_for};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss diverged at step {step}: {value}")]
    DivergedLoss { step: u64, value: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("corpus has no {0} examples")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_steps: u64,
    /// Sentences per batch.
    pub batch_size: usize,
    pub seed: u64,
    /// Validations without improvement before stopping.
    pub patience: usize,
    /// Optimizer steps between validations; 0 validates once per epoch.
    pub eval_every: u64,
    /// Batches accumulated per optimizer step.
    pub update_freq: usize,
    pub clip_norm: f64,
    pub weights: LossWeights,
    pub schedule: LrSchedule,
    pub adam: Adam,
    pub exec: ExecMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_steps: 5000,
            batch_size: 16,
            seed: 1,
            patience: 5,
            eval_every: 250,
            update_freq: 1,
            clip_norm: 10.0,
            weights: LossWeights::default(),
            schedule: LrSchedule::default(),
            adam: Adam::default(),
            exec: ExecMode::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 || self.update_freq == 0 {
            return bad("batch_size and update_freq must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !(self.schedule.peak_lr > 0.0) || self.schedule.warmup_steps == 0 {
            return bad("schedule needs a positive peak_lr and warmup");
        }
        Ok(())
    }
}

/// One example's features with its teacher-forcing encodings.
#[derive(Clone, Debug)]
pub struct Prepared<'a> {
    pub features: &'a Tensor,
    pub targets: Targets,
}

pub fn prepare<'a>(model: &Model, examples: &[&'a Example]) -> Result<Vec<Prepared<'a>>, ModelError> {
    examples
        .iter()
        .map(|ex| {
            Ok(Prepared {
                features: &ex.features,
                targets: model.targets(&ex.source, &ex.target)?,
            })
        })
        .collect()
}

/// Example indices per batch for one epoch: a permutation keyed by `(seed, epoch)`.
pub fn batchify(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_for(derive_seed(seed, "batchify") ^ epoch, "epoch");
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// A padded batch. Padding frames are zero, padding tokens are `<pad>`;
/// [`Batch::example`] strips both before any loss is computed.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub members: Vec<usize>,
    /// `members.len() × max_frames × dim`, row-major.
    pub features: Vec<f64>,
    pub frame_lens: Vec<usize>,
    pub max_frames: usize,
    pub dim: usize,
    pub dec_in: Vec<Vec<usize>>,
    pub dec_out: Vec<Vec<usize>>,
    pub tags_in: Vec<Vec<usize>>,
    pub tags_out: Vec<Vec<usize>>,
    pub token_lens: Vec<usize>,
    pub ctc: Vec<Vec<usize>>,
}

impl Batch {
    pub fn new(prepared: &[Prepared], members: &[usize]) -> Batch {
        let max_frames = members.iter().map(|&i| prepared[i].features.rows()).max().unwrap_or(0);
        let max_tokens = members.iter().map(|&i| prepared[i].targets.dec_in.len()).max().unwrap_or(0);
        let dim = members.first().map_or(0, |&i| prepared[i].features.cols());
        let mut features = vec![0.0; members.len() * max_frames * dim];
        let pad = |v: &[usize]| {
            let mut p = v.to_vec();
            if !p.is_empty() {
                p.resize(max_tokens, PAD);
            }
            p
        };
        let mut b = Batch {
            members: members.to_vec(),
            features: Vec::new(),
            frame_lens: Vec::new(),
            max_frames,
            dim,
            dec_in: Vec::new(),
            dec_out: Vec::new(),
            tags_in: Vec::new(),
            tags_out: Vec::new(),
            token_lens: Vec::new(),
            ctc: Vec::new(),
        };
        for (slot, &i) in members.iter().enumerate() {
            let p = &prepared[i];
            let n = p.features.len();
            let start = slot * max_frames * dim;
            features[start..start + n].copy_from_slice(p.features.data());
            b.frame_lens.push(p.features.rows());
            b.dec_in.push(pad(&p.targets.dec_in));
            b.dec_out.push(pad(&p.targets.dec_out));
            b.tags_in.push(pad(&p.targets.tags_in));
            b.tags_out.push(pad(&p.targets.tags_out));
            b.token_lens.push(p.targets.dec_in.len());
            b.ctc.push(p.targets.ctc.clone());
        }
        b.features = features;
        b
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Unpadded features and targets of batch slot `slot`.
    pub fn example(&self, slot: usize) -> (Tensor, Targets) {
        let (t, d) = (self.frame_lens[slot], self.dim);
        let start = slot * self.max_frames * d;
        let features = Tensor::from_vec(&[t, d], self.features[start..start + t * d].to_vec())
            .expect("slot shape");
        let n = self.token_lens[slot];
        let cut = |v: &Vec<usize>| if v.is_empty() { Vec::new() } else { v[..n].to_vec() };
        let targets = Targets {
            ctc: self.ctc[slot].clone(),
            dec_in: cut(&self.dec_in[slot]),
            dec_out: cut(&self.dec_out[slot]),
            tags_in: cut(&self.tags_in[slot]),
            tags_out: cut(&self.tags_out[slot]),
        };
        (features, targets)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossLogRow {
    pub step: u64,
    pub lr: f64,
    pub ce: f64,
    pub ctc: f64,
    pub tag_ce: f64,
    pub total: f64,
    pub valid_total: Option<f64>,
}

pub const LOSS_LOG_HEADER: &str = "step,lr,ce,ctc,tag_ce,total,valid_total";

pub fn write_loss_log<W: Write>(out: &mut W, rows: &[LossLogRow]) -> std::io::Result<()> {
    writeln!(out, "{LOSS_LOG_HEADER}")?;
    for r in rows {
        let valid = r.valid_total.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step, r.lr, r.ce, r.ctc, r.tag_ce, r.total, valid
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation, or the initial model if no step ran.
    pub model: Model,
    pub log: Vec<LossLogRow>,
    pub steps: u64,
    pub best_step: u64,
    pub best_valid: Option<f64>,
    pub stopped_early: bool,
}

/// Mean teacher-forced losses over `examples` (no dropout).
pub fn mean_loss(model: &Model, examples: &[Prepared], weights: &LossWeights, exec: ExecMode) -> Result<LossBreakdown, ModelError> {
    let losses = par::map(exec, examples, |p| {
        model
            .forward_targets(p.features, &p.targets, weights, None, false)
            .map(|r| r.0)
    });
    let mut sum = LossBreakdown::default();
    for l in losses {
        let l = l?;
        sum.ce += l.ce;
        sum.ctc += l.ctc;
        sum.tag_ce += l.tag_ce;
        sum.total += l.total;
    }
    let n = examples.len().max(1) as f64;
    Ok(LossBreakdown {
        ce: sum.ce / n,
        ctc: sum.ctc / n,
        tag_ce: sum.tag_ce / n,
        total: sum.total / n,
    })
}

/// Teacher-forced next-token accuracy over every decoder position, including
/// `</s>` (and tag tokens for the inline variant).
pub fn token_accuracy(model: &Model, examples: &[Prepared], exec: ExecMode) -> Result<f64, ModelError> {
    let counts = par::map(exec, examples, |p| -> Result<(usize, usize), ModelError> {
        let enc = model.encode(p.features)?;
        let (logits, _) = model.decoder_logits(&enc, &p.targets.dec_in, &p.targets.tags_in)?;
        let hits = p
            .targets
            .dec_out
            .iter()
            .enumerate()
            .filter(|(i, &gold)| argmax(logits.row(*i)) == gold)
            .count();
        Ok((hits, p.targets.dec_out.len()))
    });
    let (mut hits, mut total) = (0, 0);
    for c in counts {
        let (h, t) = c?;
        hits += h;
        total += t;
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

fn diverged(step: u64, e: ModelError) -> TrainError {
    match e {
        ModelError::Nn(NnError::NonFiniteLoss(value)) => TrainError::DivergedLoss { step, value },
        other => TrainError::Model(other),
    }
}

/// Summed gradients and losses of one batch; summation runs in member order.
fn batch_gradients(
    model: &Model,
    batch: &Batch,
    cfg: &TrainConfig,
    step: u64,
) -> Result<(Gradients, LossBreakdown), TrainError> {
    let dropout_seed = derive_seed(cfg.seed, "dropout");
    let slots: Vec<usize> = (0..batch.len()).collect();
    let results = par::map(cfg.exec, &slots, |&slot| {
        let (features, targets) = batch.example(slot);
        let rng = rng_for(dropout_seed ^ step.rotate_left(32), &batch.members[slot].to_string());
        model.forward_targets(&features, &targets, &cfg.weights, Some(rng), true)
    });
    let mut grads = Gradients::empty(model.params().len());
    let mut loss = LossBreakdown::default();
    for r in results {
        let (l, g) = r.map_err(|e| diverged(step, e))?;
        grads.add_scaled(&g.expect("gradients requested"), 1.0);
        loss.ce += l.ce;
        loss.ctc += l.ctc;
        loss.tag_ce += l.tag_ce;
        loss.total += l.total;
    }
    Ok((grads, loss))
}

/// Trains `model` on the corpus train split, validating on the valid split.
pub fn train(model: Model, corpus: &SyntheticCorpus, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let train_ex = corpus.split(crate::data::Split::Train);
    let valid_ex = corpus.split(crate::data::Split::Valid);
    if train_ex.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if valid_ex.is_empty() {
        return Err(TrainError::EmptySplit("valid"));
    }
    let train_set = prepare(&model, &train_ex)?;
    let valid_set = prepare(&model, &valid_ex)?;
    train_prepared(model, &train_set, &valid_set, cfg)
}

/// [`train`] over already-encoded examples.
pub fn train_prepared(
    mut model: Model,
    train_set: &[Prepared],
    valid_set: &[Prepared],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut outcome = TrainOutcome {
        model: model.clone(),
        log: Vec::new(),
        steps: 0,
        best_step: 0,
        best_valid: None,
        stopped_early: false,
    };
    if cfg.max_steps == 0 {
        return Ok(outcome);
    }

    let mut best_params: Option<ParamSet> = None;
    let mut since_best = 0usize;
    let mut step = 0u64;
    let mut epoch = 0u64;
    let mut pending: Vec<Batch> = Vec::new();
    let mut last_validated = 0u64;

    'outer: loop {
        let batches = batchify(train_set.len(), cfg.batch_size, cfg.seed, epoch);
        let n_batches = batches.len();
        for (bi, members) in batches.into_iter().enumerate() {
            pending.push(Batch::new(train_set, &members));
            let epoch_end = bi + 1 == n_batches;
            if pending.len() < cfg.update_freq && !epoch_end {
                continue;
            }
            step += 1;
            let mut grads = Gradients::empty(model.params().len());
            let mut loss = LossBreakdown::default();
            let mut n = 0usize;
            for batch in pending.drain(..) {
                let (g, l) = batch_gradients(&model, &batch, cfg, step)?;
                grads.add_scaled(&g, 1.0);
                loss.ce += l.ce;
                loss.ctc += l.ctc;
                loss.tag_ce += l.tag_ce;
                loss.total += l.total;
                n += batch.len();
            }
            let inv = 1.0 / n as f64;
            grads.scale(inv);
            if !grads.all_finite() {
                return Err(TrainError::DivergedLoss {
                    step,
                    value: f64::NAN,
                });
            }
            let norm = grads.global_norm();
            if norm > cfg.clip_norm {
                grads.scale(cfg.clip_norm / norm);
            }
            let lr = cfg.schedule.lr_at(step);
            model.params_mut().set_grads(&grads);
            cfg.adam.step(model.params_mut(), lr);

            let mut row = LossLogRow {
                step,
                lr,
                ce: loss.ce * inv,
                ctc: loss.ctc * inv,
                tag_ce: loss.tag_ce * inv,
                total: loss.total * inv,
                valid_total: None,
            };
            let due = if cfg.eval_every == 0 {
                epoch_end
            } else {
                step.is_multiple_of(cfg.eval_every)
            };
            let last = step == cfg.max_steps;
            if due || last {
                let v = mean_loss(&model, valid_set, &cfg.weights, cfg.exec)
                    .map_err(|e| diverged(step, e))?
                    .total;
                row.valid_total = Some(v);
                last_validated = step;
                if outcome.best_valid.is_none_or(|b| v < b) {
                    outcome.best_valid = Some(v);
                    outcome.best_step = step;
                    best_params = Some(model.params().clone());
                    since_best = 0;
                } else {
                    since_best += 1;
                }
            }
            outcome.log.push(row);
            if last {
                break 'outer;
            }
            if since_best >= cfg.patience {
                outcome.stopped_early = true;
                break 'outer;
            }
        }
        epoch += 1;
    }
    debug_assert_eq!(last_validated, step);
    outcome.steps = step;
    if let Some(best) = best_params {
        *model.params_mut() = best;
    }
    outcome.model = model;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_corpus, CorpusConfig, Task, TaskSpec};
    use crate::model::{ModelConfig, Variant};

    fn tiny_setup(variant: Variant) -> (Task, SyntheticCorpus, Model) {
        let spec = TaskSpec {
            common_words: 8,
            entries_per_category: 1,
            feature_dim: 8,
            ..TaskSpec::default()
        };
        let task = Task::new(&spec).unwrap();
        let corpus = gen_corpus(
            &task,
            &CorpusConfig {
                n_train: 12,
                n_valid: 4,
                n_test: 2,
                min_len: 2,
                max_len: 5,
            },
        )
        .unwrap();
        let cfg = ModelConfig {
            feature_dim: 8,
            enc_layers: 2,
            dec_layers: 1,
            model_dim: 16,
            ffn_dim: 32,
            heads: 2,
            ctc_tap_layer: 1,
            ..ModelConfig::toy(variant)
        };
        let model = Model::new(cfg, task.src_vocab.clone(), task.target_vocab(variant), 3).unwrap();
        (task, corpus, model)
    }

    fn quick(max_steps: u64) -> TrainConfig {
        TrainConfig {
            max_steps,
            batch_size: 4,
            eval_every: 2,
            schedule: LrSchedule::new(0.003, 4),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_returns_initial_model() {
        let (_, corpus, model) = tiny_setup(Variant::Parallel);
        let out = train(model.clone(), &corpus, &quick(0)).unwrap();
        assert!(out.model.params().values_equal(model.params()));
        assert!(out.log.is_empty());
    }

    #[test]
    fn same_seed_same_log_in_both_modes() {
        let (_, corpus, model) = tiny_setup(Variant::ParallelEmb);
        let a = train(model.clone(), &corpus, &quick(5)).unwrap();
        let b = train(model.clone(), &corpus, &quick(5)).unwrap();
        assert_eq!(a.log, b.log);
        let seq = TrainConfig {
            exec: ExecMode::Sequential,
            ..quick(5)
        };
        let c = train(model, &corpus, &seq).unwrap();
        assert_eq!(a.log, c.log);
        assert!(a.model.params().values_equal(c.model.params()));
        assert_eq!(a.log.last().unwrap().step, 5);
        assert!(a.log.last().unwrap().valid_total.is_some());
    }

    #[test]
    fn best_validation_is_returned() {
        let (_, corpus, model) = tiny_setup(Variant::Inline);
        let out = train(model, &corpus, &quick(8)).unwrap();
        let best = out
            .log
            .iter()
            .filter_map(|r| r.valid_total)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_valid, Some(best));
        let valid = prepare(&out.model, &corpus.split(crate::data::Split::Valid)).unwrap();
        let v = mean_loss(&out.model, &valid, &LossWeights::default(), ExecMode::Sequential).unwrap();
        assert!((v.total - best).abs() < 1e-12);
    }

    #[test]
    fn batchify_contract() {
        let one = batchify(10, 64, 1, 0);
        assert_eq!(one.len(), 1);
        let mut all: Vec<usize> = one[0].clone();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_ne!(batchify(50, 8, 1, 0), batchify(50, 8, 1, 1));
        assert_eq!(batchify(50, 8, 1, 3), batchify(50, 8, 1, 3));
        assert_eq!(batchify(50, 8, 1, 0).len(), 7);
    }

    #[test]
    fn padding_is_neutral() {
        let (_, corpus, model) = tiny_setup(Variant::ParallelEmb);
        let ex = corpus.split(crate::data::Split::Train);
        let prepared = prepare(&model, &ex).unwrap();
        let members: Vec<usize> = (0..prepared.len()).collect();
        let batch = Batch::new(&prepared, &members);
        let w = LossWeights::default();
        for (slot, p) in prepared.iter().enumerate() {
            let (f, t) = batch.example(slot);
            assert_eq!(&f, p.features);
            assert_eq!(t, p.targets);
            let direct = model.forward_targets(p.features, &p.targets, &w, None, false).unwrap().0;
            let batched = model.forward_targets(&f, &t, &w, None, false).unwrap().0;
            assert!((direct.total - batched.total).abs() < 1e-6);
        }
        assert!(batch.frame_lens.iter().any(|&l| l < batch.max_frames));
    }

    #[test]
    fn loss_log_csv() {
        let rows = vec![LossLogRow {
            step: 1,
            lr: 0.5,
            ce: 1.0,
            ctc: 2.0,
            tag_ce: 0.0,
            total: 2.0,
            valid_total: None,
        }];
        let mut buf = Vec::new();
        write_loss_log(&mut buf, &rows).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "step,lr,ce,ctc,tag_ce,total,valid_total\n1,0.5,1,2,0,2,\n"
        );
    }

    #[test]
    fn invalid_config() {
        let (_, corpus, model) = tiny_setup(Variant::Parallel);
        let cfg = TrainConfig {
            patience: 0,
            ..quick(1)
        };
        assert!(matches!(train(model, &corpus, &cfg), Err(TrainError::InvalidConfig(_))));
    }
}
