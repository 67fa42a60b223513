use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use stner_core::data::{gen_corpus, read_corpus, write_corpus, SyntheticCorpus, Task};
use stner_core::decode::{decode_all, write_hypotheses, write_sidecar};
use stner_core::eval::{confusion_csv, evaluate};
use stner_core::experiment::compare;
use stner_core::nncore::CoordSelection;
use stner_core::rng::{derive_seed, rng_for};
use stner_core::simul::{quality_latency_sweep, write_sweep, write_trace};
use stner_core::tagset::{self, AnnotatedText};
use stner_core::train::{train, write_loss_log};
use stner_core::{Model, Variant};

use crate::config::Config;
use crate::error::CliError;

const GRADCHECK_GATE: f64 = 1e-4;

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    let mut f = create(path)?;
    f.write_all(text.as_bytes())
        .and_then(|_| f.flush())
        .map_err(|e| CliError::io(path, e))
}

fn with_file<F>(path: &Path, body: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let mut f = create(path)?;
    body(&mut f).and_then(|_| f.flush()).map_err(|e| CliError::io(path, e))
}

fn task(cfg: &Config) -> Result<Task, CliError> {
    Ok(Task::new(&cfg.task_spec()?)?)
}

/// Reads the corpus from `data_dir`, generating and writing it first if absent.
fn corpus(cfg: &Config, task: &Task) -> Result<SyntheticCorpus, CliError> {
    let dir = cfg.data_dir();
    if dir.join("train.tsv").exists() {
        Ok(read_corpus(&dir)?)
    } else {
        let c = gen_corpus(task, &cfg.corpus()?)?;
        write_corpus(&c, &dir)?;
        Ok(c)
    }
}

fn load_model(cfg: &Config) -> Result<Model, CliError> {
    let path = cfg.checkpoint();
    let f = File::open(&path).map_err(|e| CliError::io(&path, e))?;
    Ok(Model::load(&mut BufReader::new(f))?)
}

pub fn gen_data(cfg: &Config) -> Result<String, CliError> {
    let task = task(cfg)?;
    let c = gen_corpus(&task, &cfg.corpus()?)?;
    let dir = cfg.data_dir();
    write_corpus(&c, &dir)?;
    let spans: usize = c.examples.iter().map(|e| e.target.spans.len()).sum();
    Ok(format!(
        "data_dir: {}\ntrain: {}\nvalid: {}\ntest: {}\nentities: {spans}\nsource_vocab: {}\ntarget_words: {}\n",
        dir.display(),
        c.train.len(),
        c.valid.len(),
        c.test.len(),
        task.src_vocab.len(),
        task.target_words().len()
    ))
}

pub fn train_cmd(cfg: &Config) -> Result<String, CliError> {
    let task = task(cfg)?;
    let corpus = corpus(cfg, &task)?;
    let variant = cfg.variant()?;
    let seed = cfg.seed()?;
    let model = Model::new(
        cfg.model(variant)?,
        task.src_vocab.clone(),
        task.target_vocab(variant),
        derive_seed(seed, "model"),
    )?;
    let start = Instant::now();
    let outcome = train(model, &corpus, &cfg.train()?)?;
    let secs = start.elapsed().as_secs_f64();
    let ckpt = cfg.checkpoint();
    with_file(&ckpt, |f| {
        outcome
            .model
            .save(f)
            .map_err(|e| std::io::Error::other(e.to_string()))
    })?;
    with_file(&cfg.out("loss.csv"), |f| write_loss_log(f, &outcome.log))?;
    let report = format!(
        "variant: {variant}\nparams: {}\nsteps: {}\nbest_step: {}\nbest_valid_loss: {}\nstopped_early: {}\ncheckpoint: {}\n",
        outcome.model.num_params(),
        outcome.steps,
        outcome.best_step,
        outcome.best_valid.map_or("none".into(), |v| format!("{v:.6}")),
        outcome.stopped_early,
        ckpt.display()
    );
    write_file(&cfg.out("train.txt"), &report)?;
    Ok(format!("{report}seconds: {secs:.1}\n"))
}

pub fn decode_cmd(cfg: &Config) -> Result<String, CliError> {
    let model = load_model(cfg)?;
    let corpus = read_corpus(&cfg.data_dir())?;
    let examples = corpus.split(cfg.split()?);
    let results = decode_all(&model, &examples, &cfg.decode()?, cfg.exec()?)?;
    let ids: Vec<&str> = examples.iter().map(|e| e.utt_id.as_str()).collect();
    let hyp = cfg.out("hyp.txt");
    with_file(&hyp, |f| write_hypotheses(f, &results))?;
    with_file(&cfg.out("ref.txt"), |f| {
        examples
            .iter()
            .try_for_each(|e| writeln!(f, "{}", tagset::format_line(&e.target)))
    })?;
    with_file(&cfg.out("hyp.steps.csv"), |f| write_sidecar(f, &ids, &results))?;
    let steps: usize = results.iter().map(|r| r.decoder_steps).sum();
    let truncated = results.iter().filter(|r| r.truncated).count();
    let warnings: usize = results.iter().map(|r| r.warnings.len()).sum();
    Ok(format!(
        "variant: {}\nsentences: {}\ndecoder_steps: {steps}\ntruncated: {truncated}\nwarnings: {warnings}\nhypotheses: {}\n",
        model.variant(),
        results.len(),
        hyp.display()
    ))
}

fn read_annotated(path: &Path) -> Result<Vec<AnnotatedText>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            tagset::parse_line(l).map_err(|e| {
                CliError::config("annotation", format!("{} line {}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

pub fn eval_cmd(cfg: &Config) -> Result<String, CliError> {
    let refs = read_annotated(&cfg.ref_path())?;
    let hyps = read_annotated(&cfg.hyp_path())?;
    let summary = evaluate(&refs, &hyps)?;
    let text = summary.to_text();
    write_file(&cfg.out("eval.txt"), &text)?;
    write_file(&cfg.out("confusion.csv"), &confusion_csv(&summary.ne))?;
    Ok(text)
}

pub fn simul_cmd(cfg: &Config) -> Result<String, CliError> {
    let model = load_model(cfg)?;
    let corpus = read_corpus(&cfg.data_dir())?;
    let examples = corpus.split(cfg.split()?);
    let ks: Vec<usize> = cfg.list("ks")?;
    if ks.is_empty() {
        return Err(CliError::config("bad_value", "key `ks` lists no values"));
    }
    let chunk_ms: usize = cfg.get("chunk_ms")?;
    let (rows, traces) = quality_latency_sweep(&model, &examples, &ks, chunk_ms, cfg.clock()?, cfg.exec()?)
        .map_err(CliError::from)?;
    with_file(&cfg.out("sweep.csv"), |f| write_sweep(f, &rows))?;
    for (k, ts) in ks.iter().zip(&traces) {
        with_file(&cfg.out(&format!("traces_k{k}.txt")), |f| {
            for (ex, t) in examples.iter().zip(ts) {
                writeln!(f, "UTT\t{}", ex.utt_id)?;
                write_trace(f, t)?;
            }
            Ok(())
        })?;
    }
    let mut out = Vec::new();
    write_sweep(&mut out, &rows).map_err(|e| CliError::runtime("io", e.to_string()))?;
    Ok(String::from_utf8(out).expect("ascii csv"))
}

pub fn gradcheck_cmd(cfg: &Config) -> Result<String, CliError> {
    let task = task(cfg)?;
    let variant = cfg.variant()?;
    let seed = cfg.seed()?;
    let model = Model::new(
        cfg.model(variant)?,
        task.src_vocab.clone(),
        task.target_vocab(variant),
        derive_seed(seed, "model"),
    )?;
    let mut rng = rng_for(seed, "gradcheck");
    let (source, target) = task.sample_sentence(5, &mut rng);
    let (features, _) = task.render(&source, &mut rng);
    let targets = model.targets(&source, &target)?;
    let coords: usize = cfg.get("gc_coords")?;
    let selection = if coords == 0 {
        CoordSelection::All
    } else {
        CoordSelection::Random {
            per_param: coords,
            seed: derive_seed(seed, "gradcheck.coords"),
        }
    };
    let start = Instant::now();
    let report = model.gradcheck(&features, &targets, &cfg.train()?.weights, cfg.get("gc_eps")?, selection)?;
    let secs = start.elapsed().as_secs_f64();
    let pass = report.max_rel_error < GRADCHECK_GATE;
    let worst = report
        .worst
        .as_ref()
        .map_or("none".into(), |(name, i)| format!("{name}[{i}]"));
    let text = format!(
        "variant: {variant}\nmax_rel_error: {:e}\nchecked: {}\nworst: {worst}\ngate: {GRADCHECK_GATE:e}\nresult: {}\n",
        report.max_rel_error,
        report.checked,
        if pass { "pass" } else { "fail" }
    );
    write_file(&cfg.out(&format!("gradcheck_{variant}.txt")), &text)?;
    if pass {
        Ok(format!("{text}seconds: {secs:.1}\n"))
    } else {
        print!("{text}");
        Err(CliError::runtime(
            "gradcheck_failed",
            format!("max relative error {:e} exceeds {GRADCHECK_GATE:e}", report.max_rel_error),
        ))
    }
}

pub fn compare_cmd(cfg: &Config) -> Result<String, CliError> {
    let task = task(cfg)?;
    let corpus = corpus(cfg, &task)?;
    let n: u64 = cfg.get("seeds")?;
    let base = cfg.seed()?;
    let seeds: Vec<u64> = (0..n).map(|i| base + i).collect();
    let variants: Vec<Variant> = cfg.list("variants")?;
    let baseline: Variant = cfg.get("baseline")?;
    let report = compare(&task, &corpus, &variants, &seeds, baseline, &cfg.run_settings()?)?;
    let text = report.to_text();
    write_file(&cfg.out("compare.txt"), &text)?;
    write_file(&cfg.out("compare_runs.csv"), &report.runs_csv())?;
    write_file(&cfg.out("compare_tests.csv"), &report.tests_csv())?;
    Ok(text)
}
