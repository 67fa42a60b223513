//! Multi-seed variant comparison: train, decode and score each variant under
//! several seeds, then test every variant's means against a baseline.

use std::fmt::Write as _;

use thiserror::Error;

use crate::data::{SyntheticCorpus, Task};
use crate::decode::{decode_all, DecodeConfig, DecodeError};
use crate::eval::{evaluate, ttest_mean_greater, EvalError, EvalSummary, TTest};
use crate::model::{Model, ModelConfig, ModelError, Variant};
use crate::rng::derive_seed;
use crate::tagset::AnnotatedText;
use crate::train::{prepare, token_accuracy, train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Significance level of the one-sided comparison against the baseline.
pub const ALPHA: f64 = 0.05;

/// Everything except the variant and seed of one run.
#[derive(Clone, Debug)]
pub struct RunSettings {
    /// Model shape; its `variant` field is overridden per run.
    pub model: ModelConfig,
    /// Training settings; its `seed` field is overridden per run.
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

impl RunSettings {
    pub fn toy() -> Self {
        RunSettings {
            model: ModelConfig::toy(Variant::Parallel),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub variant: Variant,
    pub seed: u64,
    pub steps: u64,
    pub token_accuracy: f64,
    pub summary: EvalSummary,
}

impl RunMetrics {
    pub fn metric(&self, m: Metric) -> f64 {
        match m {
            Metric::Bleu => self.summary.bleu,
            Metric::NeAccuracy => 100.0 * self.summary.ne.ne_accuracy,
            Metric::F1 => 100.0 * self.summary.ne.f1,
            Metric::CatAccuracy => 100.0 * self.summary.ne.cat_accuracy,
        }
    }
}

/// Trains one model on the corpus train split, picks the best validation
/// checkpoint and scores beam-search output on the test split.
pub fn run_once(
    task: &Task,
    corpus: &SyntheticCorpus,
    variant: Variant,
    seed: u64,
    settings: &RunSettings,
) -> Result<(Model, RunMetrics), ExperimentError> {
    let cfg = ModelConfig {
        variant,
        ..settings.model.clone()
    };
    let model = Model::new(
        cfg,
        task.src_vocab.clone(),
        task.target_vocab(variant),
        derive_seed(seed, "model"),
    )?;
    let train_cfg = TrainConfig {
        seed,
        ..settings.train.clone()
    };
    let outcome = train(model, corpus, &train_cfg)?;
    let model = outcome.model;
    let test = corpus.split(crate::data::Split::Test);
    let prepared = prepare(&model, &test)?;
    let token_accuracy = token_accuracy(&model, &prepared, train_cfg.exec)?;
    let results = decode_all(&model, &test, &settings.decode, train_cfg.exec)?;
    let refs: Vec<AnnotatedText> = test.iter().map(|e| e.target.clone()).collect();
    let hyps: Vec<AnnotatedText> = results.into_iter().map(|r| r.annotated).collect();
    let summary = evaluate(&refs, &hyps)?;
    let metrics = RunMetrics {
        variant,
        seed,
        steps: outcome.steps,
        token_accuracy,
        summary,
    };
    Ok((model, metrics))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Bleu,
    NeAccuracy,
    F1,
    CatAccuracy,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Bleu, Metric::NeAccuracy, Metric::F1, Metric::CatAccuracy];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Bleu => "BLEU",
            Metric::NeAccuracy => "NE acc.",
            Metric::F1 => "F1",
            Metric::CatAccuracy => "cat. acc.",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub mean: f64,
    /// `None` for the baseline row or when the test is undefined.
    pub test: Option<TTest>,
}

impl Cell {
    pub fn significant(&self) -> bool {
        self.test.as_ref().is_some_and(|t| t.significant)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub variant: Variant,
    pub cells: Vec<Cell>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareReport {
    pub baseline: Variant,
    pub seeds: Vec<u64>,
    pub rows: Vec<CompareRow>,
    pub runs: Vec<RunMetrics>,
}

/// Per-variant means with one-sided t-tests against `baseline`.
pub fn summarize(runs: Vec<RunMetrics>, baseline: Variant) -> Result<CompareReport, ExperimentError> {
    let mut variants: Vec<Variant> = Vec::new();
    let mut seeds: Vec<u64> = Vec::new();
    for r in &runs {
        if !variants.contains(&r.variant) {
            variants.push(r.variant);
        }
        if !seeds.contains(&r.seed) {
            seeds.push(r.seed);
        }
    }
    if !variants.contains(&baseline) {
        return Err(ExperimentError::Invalid(format!("baseline {baseline} has no runs")));
    }
    let values = |v: Variant, m: Metric| -> Vec<f64> {
        runs.iter().filter(|r| r.variant == v).map(|r| r.metric(m)).collect()
    };
    let mut rows = Vec::new();
    for &v in &variants {
        let mut cells = Vec::new();
        for m in Metric::ALL {
            let xs = values(v, m);
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let test = if v == baseline {
                None
            } else {
                match ttest_mean_greater(&xs, &values(baseline, m), ALPHA) {
                    Ok(t) => Some(t),
                    Err(EvalError::DegenerateSample) => None,
                    Err(e) => return Err(e.into()),
                }
            };
            cells.push(Cell { mean, test });
        }
        rows.push(CompareRow { variant: v, cells });
    }
    Ok(CompareReport {
        baseline,
        seeds,
        rows,
        runs,
    })
}

/// Runs every `(variant, seed)` pair sequentially and summarizes.
pub fn compare(
    task: &Task,
    corpus: &SyntheticCorpus,
    variants: &[Variant],
    seeds: &[u64],
    baseline: Variant,
    settings: &RunSettings,
) -> Result<CompareReport, ExperimentError> {
    if !variants.contains(&baseline) {
        return Err(ExperimentError::Invalid(format!("baseline {baseline} is not among the variants")));
    }
    if seeds.len() < 2 {
        return Err(ExperimentError::Invalid("at least two seeds are needed for the t-test".into()));
    }
    let mut runs = Vec::new();
    for &v in variants {
        for &s in seeds {
            runs.push(run_once(task, corpus, v, s, settings)?.1);
        }
    }
    summarize(runs, baseline)
}

impl CompareReport {
    /// Fixed-width table; `†` marks a mean significantly higher than the
    /// baseline's at the 95% level.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<14}", "model");
        for m in Metric::ALL {
            let _ = write!(s, "{:>12}", m.name());
        }
        s.push('\n');
        for row in &self.rows {
            let _ = write!(s, "{:<14}", row.variant.name());
            for c in &row.cells {
                let mark = if c.significant() { "†" } else { " " };
                let _ = write!(s, "{:>11.2}{mark}", c.mean);
            }
            s.push('\n');
        }
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(
            s,
            "\nmeans over {} runs (seeds {}); † = mean higher than {} (one-sided Student's t-test, alpha {ALPHA})",
            self.seeds.len(),
            seeds.join(","),
            self.baseline.name()
        );
        s
    }

    /// One line per run.
    pub fn runs_csv(&self) -> String {
        let mut s = String::from("variant,seed,steps,token_accuracy,bleu,ne_accuracy,f1,cat_accuracy\n");
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.4},{:.6},{:.6},{:.6}",
                r.variant.name(),
                r.seed,
                r.steps,
                r.token_accuracy,
                r.summary.bleu,
                r.summary.ne.ne_accuracy,
                r.summary.ne.f1,
                r.summary.ne.cat_accuracy
            );
        }
        s
    }

    /// One line per (variant, metric) with the test statistics.
    pub fn tests_csv(&self) -> String {
        let mut s = String::from("variant,metric,mean,t,df,p,significant\n");
        for row in &self.rows {
            for (m, c) in Metric::ALL.iter().zip(&row.cells) {
                match &c.test {
                    Some(t) => {
                        let _ = writeln!(
                            s,
                            "{},{},{:.6},{:.6},{},{:.6},{}",
                            row.variant.name(),
                            m.name(),
                            c.mean,
                            t.t,
                            t.df,
                            t.p,
                            t.significant
                        );
                    }
                    None => {
                        let _ = writeln!(s, "{},{},{:.6},,,,", row.variant.name(), m.name(), c.mean);
                    }
                }
            }
        }
        s
    }
}
