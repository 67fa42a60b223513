use proptest::prelude::*;

use stner_core::data::{gen_corpus, CorpusConfig, Split, SyntheticCorpus, Task, TaskSpec};
use stner_core::decode::{beam_search, decode_all, greedy_decode, DecodeConfig};
use stner_core::eval::evaluate;
use stner_core::nncore::LrSchedule;
use stner_core::par::ExecMode;
use stner_core::simul::{
    laal, run_policy, run_waitk, Action, Clock, ClockMode, Next, PolicyConfig, SimulAgent, SimulError,
};
use stner_core::tagset::AnnotatedText;
use stner_core::train::{train, TrainConfig};
use stner_core::{Model, ModelConfig, Variant};

fn setup() -> (Task, SyntheticCorpus) {
    let spec = TaskSpec {
        common_words: 10,
        entries_per_category: 1,
        feature_dim: 12,
        ..TaskSpec::default()
    };
    let task = Task::new(&spec).unwrap();
    let corpus = gen_corpus(
        &task,
        &CorpusConfig {
            n_train: 40,
            n_valid: 8,
            n_test: 6,
            min_len: 2,
            max_len: 6,
        },
    )
    .unwrap();
    (task, corpus)
}

fn trained(task: &Task, corpus: &SyntheticCorpus, variant: Variant) -> Model {
    let cfg = ModelConfig {
        feature_dim: 12,
        enc_layers: 2,
        dec_layers: 1,
        model_dim: 16,
        ffn_dim: 32,
        heads: 2,
        ctc_tap_layer: 1,
        ..ModelConfig::toy(variant)
    };
    let model = Model::new(cfg, task.src_vocab.clone(), task.target_vocab(variant), 2).unwrap();
    let tc = TrainConfig {
        max_steps: 30,
        batch_size: 8,
        eval_every: 10,
        schedule: LrSchedule::new(0.003, 10),
        ..TrainConfig::default()
    };
    train(model, corpus, &tc).unwrap().model
}

#[test]
fn train_decode_evaluate_every_variant() {
    let (task, corpus) = setup();
    let test = corpus.split(Split::Test);
    let refs: Vec<AnnotatedText> = test.iter().map(|e| e.target.clone()).collect();
    for variant in Variant::ALL {
        let model = trained(&task, &corpus, variant);
        let results = decode_all(&model, &test, &DecodeConfig::default(), ExecMode::Parallel).unwrap();
        let seq = decode_all(&model, &test, &DecodeConfig::default(), ExecMode::Sequential).unwrap();
        assert_eq!(results, seq);
        let hyps: Vec<AnnotatedText> = results.iter().map(|r| r.annotated.clone()).collect();
        let s = evaluate(&refs, &hyps).unwrap();
        assert!((0.0..=100.0).contains(&s.bleu));
        assert!((0.0..=1.0).contains(&s.ne.f1));
        for r in &results {
            r.annotated.validate().unwrap();
            if variant != Variant::Inline {
                assert_eq!(r.decoder_steps, r.annotated.tokens.len() + usize::from(!r.truncated));
            }
        }
    }
}

#[test]
fn checkpoint_roundtrip_preserves_decoding() {
    let (task, corpus) = setup();
    let model = trained(&task, &corpus, Variant::ParallelEmb);
    let mut buf = Vec::new();
    model.save(&mut buf).unwrap();
    let back = Model::load(&mut buf.as_slice()).unwrap();
    let mut again = Vec::new();
    back.save(&mut again).unwrap();
    assert_eq!(buf, again);
    // parameters are stored as f32, so scores agree only to f32 rounding
    let cfg = DecodeConfig::default();
    for ex in corpus.split(Split::Test) {
        let a = beam_search(&model, &ex.features, &cfg).unwrap();
        let b = beam_search(&back, &ex.features, &cfg).unwrap();
        assert_eq!(a.annotated, b.annotated);
        assert_eq!(a.decoder_steps, b.decoder_steps);
        assert!((a.log_prob - b.log_prob).abs() < 1e-4);
        assert_eq!(
            greedy_decode(&model, &ex.features, None).unwrap().annotated,
            greedy_decode(&back, &ex.features, None).unwrap().annotated
        );
    }
}

#[test]
fn waitk_traces_are_well_formed() {
    let (task, corpus) = setup();
    for variant in [Variant::Inline, Variant::Parallel] {
        let model = trained(&task, &corpus, variant);
        for ex in corpus.split(Split::Test) {
            let total = ex.duration_ms() as f64;
            for k in 1..=3 {
                let policy = PolicyConfig {
                    k,
                    chunk_ms: 40,
                    max_len: None,
                };
                let trace = run_waitk(&model, &ex.features, &policy, ClockMode::Ideal).unwrap();
                let mut consumed = 0.0;
                let mut last_write = 0.0;
                for a in &trace.actions {
                    match a {
                        Action::Read { consumed_ms } => {
                            assert!(*consumed_ms > consumed && *consumed_ms <= total);
                            consumed = *consumed_ms;
                        }
                        Action::Write { ideal_ms, wall_ms, .. } => {
                            assert_eq!(*ideal_ms, consumed);
                            assert_eq!(ideal_ms, wall_ms);
                            assert!(*ideal_ms >= last_write);
                            last_write = *ideal_ms;
                        }
                    }
                }
                assert_eq!(trace.words(), trace.hypothesis.tokens);
                if !trace.delays().is_empty() {
                    let l = laal(&trace, ex.target.tokens.len(), Clock::Ideal).unwrap();
                    assert!(l <= total + 1e-9);
                }
            }
        }
    }
}

/// Words of `word_ms` each, detected exactly when fully heard.
struct Perfect {
    word_ms: usize,
    words: usize,
    next: usize,
}

impl SimulAgent for Perfect {
    fn detect_words(&mut self, consumed_ms: usize) -> Result<usize, SimulError> {
        Ok((consumed_ms / self.word_ms).min(self.words))
    }

    fn next_word(&mut self, _: usize) -> Result<Next, SimulError> {
        if self.next < self.words {
            self.next += 1;
            Ok(Next::Word(format!("w{}", self.next)))
        } else {
            Ok(Next::EndOfSequence)
        }
    }

    fn hypothesis(&self) -> AnnotatedText {
        AnnotatedText::default()
    }
}

proptest! {
    #[test]
    fn perfect_detector_lags_k_words(words in 1usize..15, k in 1usize..5, word_steps in 1usize..8) {
        let word_ms = 10 * word_steps;
        let mut agent = Perfect { word_ms, words, next: 0 };
        let policy = PolicyConfig { k, chunk_ms: word_ms, max_len: None };
        let total = words * word_ms;
        let trace = run_policy(&mut agent, total, &policy, ClockMode::Ideal).unwrap();
        let delays: Vec<f64> = trace.delays().iter().map(|d| d.0).collect();
        let expected: Vec<f64> = (0..words).map(|i| ((i + k).min(words) * word_ms) as f64).collect();
        prop_assert_eq!(&delays, &expected);
        // with k = 1 every word lags by exactly one word
        if k == 1 {
            prop_assert_eq!(laal(&trace, words, Clock::Ideal).unwrap(), word_ms as f64);
        }
    }

    #[test]
    fn laal_grows_with_k(words in 2usize..12, word_steps in 1usize..6) {
        let word_ms = 10 * word_steps;
        let total = words * word_ms;
        let mut prev = f64::NEG_INFINITY;
        for k in 1..4 {
            let mut agent = Perfect { word_ms, words, next: 0 };
            let policy = PolicyConfig { k, chunk_ms: 10, max_len: None };
            let trace = run_policy(&mut agent, total, &policy, ClockMode::Ideal).unwrap();
            let l = laal(&trace, words, Clock::Ideal).unwrap();
            prop_assert!(l >= prev);
            prev = l;
        }
    }
}
