//! Experiment configuration: `[section]` headers and `key = value` lines,
//! overridable with `--key value` on the command line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use stner_core::data::{CorpusConfig, Split, TaskSpec};
use stner_core::decode::DecodeConfig;
use stner_core::experiment::RunSettings;
use stner_core::model::LossWeights;
use stner_core::nncore::{Adam, LrSchedule};
use stner_core::par::ExecMode;
use stner_core::simul::ClockMode;
use stner_core::train::TrainConfig;
use stner_core::{ModelConfig, Variant};

use crate::error::CliError;

pub struct KeySpec {
    pub section: &'static str,
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn k(section: &'static str, key: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        section,
        key,
        default,
        help,
    }
}

pub const KEYS: &[KeySpec] = &[
    k("run", "seed", "1", "root seed; every component derives its own stream"),
    k("run", "out_dir", "runs", "directory receiving all artifacts"),
    k("run", "data_dir", "", "corpus directory (empty: <out_dir>/data)"),
    k("run", "checkpoint", "", "model checkpoint (empty: <out_dir>/model.ckpt)"),
    k("run", "variant", "parallel", "inline | parallel | parallel_emb"),
    k("run", "exec", "parallel", "parallel | sequential batch execution"),
    k("task", "common_words", "60", "non-entity source/target word pairs"),
    k("task", "entries_per_category", "3", "lexicon entries per entity category"),
    k("task", "max_phrase_len", "3", "longest entity phrase in words"),
    k("task", "ne_rate", "0.15", "probability a sentence slot holds an entity"),
    k("task", "frames_per_token", "8", "mean frames rendered per source word"),
    k("task", "frame_jitter", "1", "uniform +/- jitter on frames per word"),
    k("task", "noise_std", "0.5", "Gaussian feature noise"),
    k("task", "feature_dim", "80", "feature vector width"),
    k("corpus", "n_train", "8000", "training sentences"),
    k("corpus", "n_valid", "500", "validation sentences"),
    k("corpus", "n_test", "500", "test sentences"),
    k("corpus", "min_words", "3", "shortest sentence"),
    k("corpus", "max_words", "12", "longest sentence"),
    k("model", "enc_layers", "4", "encoder blocks"),
    k("model", "dec_layers", "2", "decoder blocks"),
    k("model", "model_dim", "64", "hidden width"),
    k("model", "ffn_dim", "128", "feed-forward width"),
    k("model", "heads", "4", "attention heads"),
    k("model", "ctc_tap_layer", "3", "encoder layer feeding CTC and compression"),
    k("model", "conv_kernel", "7", "depthwise convolution kernel"),
    k("model", "use_conv_module", "true", "conformer blocks (false: plain transformer blocks)"),
    k("model", "dropout", "0.1", "dropout probability"),
    k("train", "max_steps", "5000", "optimizer step budget"),
    k("train", "batch_size", "16", "sentences per batch"),
    k("train", "patience", "5", "validations without improvement before stopping"),
    k("train", "eval_every", "250", "steps between validations (0: once per epoch)"),
    k("train", "update_freq", "1", "batches accumulated per step"),
    k("train", "clip_norm", "10", "gradient norm clip"),
    k("train", "lr", "0.005", "peak learning rate"),
    k("train", "warmup_steps", "400", "linear warmup before inverse-sqrt decay"),
    k("train", "ctc_weight", "0.5", "auxiliary CTC loss weight"),
    k("train", "tag_weight", "1.0", "tag head loss weight"),
    k("train", "label_smoothing", "0.1", "label smoothing of the token loss"),
    k("train", "adam_beta1", "0.9", "Adam beta1"),
    k("train", "adam_beta2", "0.98", "Adam beta2"),
    k("train", "adam_eps", "1e-8", "Adam epsilon"),
    k("decode", "split", "test", "split to decode: train | valid | test"),
    k("decode", "beam", "5", "beam size"),
    k("decode", "max_len", "0", "output token cap (0: 4 x compressed length + 10)"),
    k("decode", "length_norm", "true", "rank hypotheses by per-token log-prob"),
    k("eval", "hyp", "", "hypothesis file (empty: <out_dir>/hyp.txt)"),
    k("eval", "ref", "", "reference file (empty: <out_dir>/ref.txt)"),
    k("simul", "ks", "1,2,3", "wait-k values"),
    k("simul", "chunk_ms", "500", "audio per READ, multiple of 10"),
    k("simul", "clock", "measured", "measured | ideal computation time"),
    k("gradcheck", "gc_eps", "1e-5", "finite-difference step"),
    k("gradcheck", "gc_coords", "6", "random coordinates per parameter (0: all)"),
    k("compare", "seeds", "3", "runs per variant, seeds seed..seed+n-1"),
    k("compare", "variants", "inline,parallel,parallel_emb", "variants to compare"),
    k("compare", "baseline", "parallel", "variant the significance test is against"),
];

fn spec(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|s| s.key == key)
}

/// Help text listing every key with its default.
pub fn keys_help() -> String {
    let mut s = String::from("Configuration keys (config file `[section]` / `key = value`, or `--key value`):\n");
    let mut section = "";
    for spec in KEYS {
        if spec.section != section {
            section = spec.section;
            let _ = writeln!(s, "  [{section}]");
        }
        let default = if spec.default.is_empty() { "\"\"" } else { spec.default };
        let _ = writeln!(s, "    {:<22} {:<30} {}", spec.key, default, spec.help);
    }
    s.push_str("  --config FILE            read a config file before applying overrides\n");
    s
}

/// Resolved key/value table.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<&'static str, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: KEYS.iter().map(|s| (s.key, s.default.to_string())).collect(),
        }
    }
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let spec = spec(key).ok_or_else(|| CliError::config("unknown_key", format!("unknown key `{key}`")))?;
        self.values.insert(spec.key, value.to_string());
        Ok(())
    }

    /// Parses config-file text. Keys must sit under their own section.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = || format!("{origin}:{}", n + 1);
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !KEYS.iter().any(|s| s.section == name) {
                    return Err(CliError::config("unknown_section", format!("{}: unknown section [{name}]", at())));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::config("syntax", format!("{}: expected `key = value`", at())))?;
            let key = key.trim();
            let spec = spec(key).ok_or_else(|| CliError::config("unknown_key", format!("{}: unknown key `{key}`", at())))?;
            match &section {
                Some(s) if s == spec.section => {}
                _ => {
                    return Err(CliError::config(
                        "wrong_section",
                        format!("{}: key `{key}` belongs to section [{}]", at(), spec.section),
                    ))
                }
            }
            self.values.insert(spec.key, value.trim().trim_matches('"').to_string());
        }
        Ok(())
    }

    /// Applies `--config FILE` first, then every `--key value` in order.
    pub fn from_args(args: &[String]) -> Result<Config, CliError> {
        let mut cfg = Config::default();
        let mut pairs = Vec::new();
        let mut it = args.iter();
        while let Some(a) = it.next() {
            let key = a
                .strip_prefix("--")
                .ok_or_else(|| CliError::usage(format!("expected `--key value`, found `{a}`")))?;
            let (key, value) = match key.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it.next().ok_or_else(|| CliError::usage(format!("`--{key}` needs a value")))?;
                    (key.to_string(), v.clone())
                }
            };
            pairs.push((key.replace('-', "_"), value));
        }
        for (key, value) in &pairs {
            if key == "config" {
                let text = std::fs::read_to_string(value)
                    .map_err(|e| CliError::config("io", format!("cannot read config {value}: {e}")))?;
                cfg.apply_text(&text, value)?;
            }
        }
        for (key, value) in &pairs {
            if key != "config" {
                cfg.set(key, value)?;
            }
        }
        Ok(cfg)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared key {key}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key);
        v.parse()
            .map_err(|e| CliError::config("bad_value", format!("key `{key}`: cannot parse `{v}`: {e}")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| CliError::config("bad_value", format!("key `{key}`: cannot parse `{s}`: {e}")))
            })
            .collect()
    }

    /// Non-empty text as-is, otherwise `<out_dir>/<fallback>`.
    fn path_or(&self, key: &str, fallback: &str) -> PathBuf {
        match self.raw(key) {
            "" => self.out_dir().join(fallback),
            p => PathBuf::from(p),
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out_dir"))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.path_or("data_dir", "data")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.path_or("checkpoint", "model.ckpt")
    }

    pub fn hyp_path(&self) -> PathBuf {
        self.path_or("hyp", "hyp.txt")
    }

    pub fn ref_path(&self) -> PathBuf {
        self.path_or("ref", "ref.txt")
    }

    pub fn out(&self, name: &str) -> PathBuf {
        Path::new(&self.out_dir()).join(name)
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.get("seed")
    }

    pub fn variant(&self) -> Result<Variant, CliError> {
        self.get("variant")
    }

    pub fn exec(&self) -> Result<ExecMode, CliError> {
        match self.raw("exec") {
            "parallel" => Ok(ExecMode::Parallel),
            "sequential" => Ok(ExecMode::Sequential),
            v => Err(CliError::config("bad_value", format!("key `exec`: expected parallel or sequential, got `{v}`"))),
        }
    }

    pub fn task_spec(&self) -> Result<TaskSpec, CliError> {
        Ok(TaskSpec {
            common_words: self.get("common_words")?,
            entries_per_category: self.get("entries_per_category")?,
            max_phrase_len: self.get("max_phrase_len")?,
            ne_rate: self.get("ne_rate")?,
            frames_per_token: self.get("frames_per_token")?,
            frame_jitter: self.get("frame_jitter")?,
            noise_std: self.get("noise_std")?,
            feature_dim: self.get("feature_dim")?,
            seed: self.seed()?,
        })
    }

    pub fn corpus(&self) -> Result<CorpusConfig, CliError> {
        Ok(CorpusConfig {
            n_train: self.get("n_train")?,
            n_valid: self.get("n_valid")?,
            n_test: self.get("n_test")?,
            min_len: self.get("min_words")?,
            max_len: self.get("max_words")?,
        })
    }

    pub fn model(&self, variant: Variant) -> Result<ModelConfig, CliError> {
        Ok(ModelConfig {
            feature_dim: self.get("feature_dim")?,
            enc_layers: self.get("enc_layers")?,
            dec_layers: self.get("dec_layers")?,
            model_dim: self.get("model_dim")?,
            ffn_dim: self.get("ffn_dim")?,
            heads: self.get("heads")?,
            ctc_tap_layer: self.get("ctc_tap_layer")?,
            conv_kernel: self.get("conv_kernel")?,
            use_conv_module: self.get("use_conv_module")?,
            dropout: self.get("dropout")?,
            ..ModelConfig::toy(variant)
        })
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let lr: f64 = self.get("lr")?;
        let warmup: u64 = self.get("warmup_steps")?;
        if !(lr > 0.0) || warmup == 0 {
            return Err(CliError::config("bad_value", "lr must be positive and warmup_steps at least 1"));
        }
        Ok(TrainConfig {
            max_steps: self.get("max_steps")?,
            batch_size: self.get("batch_size")?,
            seed: self.seed()?,
            patience: self.get("patience")?,
            eval_every: self.get("eval_every")?,
            update_freq: self.get("update_freq")?,
            clip_norm: self.get("clip_norm")?,
            weights: LossWeights {
                ctc: self.get("ctc_weight")?,
                tag: self.get("tag_weight")?,
                label_smoothing: self.get("label_smoothing")?,
            },
            schedule: LrSchedule::new(lr, warmup),
            adam: Adam {
                beta1: self.get("adam_beta1")?,
                beta2: self.get("adam_beta2")?,
                eps: self.get("adam_eps")?,
            },
            exec: self.exec()?,
        })
    }

    pub fn decode(&self) -> Result<DecodeConfig, CliError> {
        let max_len: usize = self.get("max_len")?;
        Ok(DecodeConfig {
            beam: self.get("beam")?,
            max_len: (max_len > 0).then_some(max_len),
            length_norm: self.get("length_norm")?,
        })
    }

    pub fn split(&self) -> Result<Split, CliError> {
        match self.raw("split") {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            v => Err(CliError::config("bad_value", format!("key `split`: unknown split `{v}`"))),
        }
    }

    pub fn clock(&self) -> Result<ClockMode, CliError> {
        match self.raw("clock") {
            "measured" => Ok(ClockMode::Measured),
            "ideal" => Ok(ClockMode::Ideal),
            v => Err(CliError::config("bad_value", format!("key `clock`: expected measured or ideal, got `{v}`"))),
        }
    }

    pub fn run_settings(&self) -> Result<RunSettings, CliError> {
        Ok(RunSettings {
            model: self.model(self.variant()?)?,
            train: self.train()?,
            decode: self.decode()?,
        })
    }
}
