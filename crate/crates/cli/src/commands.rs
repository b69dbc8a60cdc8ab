use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nartts::bench::{BenchConfig, BenchDecoder, BenchRunner, BENCH_HEADER};
use nartts::config::RunConfig;
use nartts::corpus::{generate, read_corpus, write_corpus, write_corpus_text, zero_fraction, Corpus, CorpusSpec, Inventory};
use nartts::gradcheck_suite::{run_suite, SuiteOptions, SUITES};
use nartts::io::{write_durations_text, write_mel, write_mel_text, DurationRecord, Mel};
use nartts::model::{Model, ModelInput, RunOptions};
use nartts::tensor::{read_checkpoint, Ctx, ParamStore, Precision};
use nartts::train::{evaluate, EvalMode, Trainer, METRICS_HEADER};

use crate::run::{open, prepare_out_dir, read_text, CmdResult, Failure, RunManifest};

pub const CORPUS_FILE: &str = "corpus.bin";
pub const INVENTORY_FILE: &str = "inventory.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

fn write_file(dir: &Path, name: &str, manifest: &mut RunManifest, f: impl FnOnce(&mut dyn Write) -> nartts::Result<()>) -> CmdResult {
    let file = fs::File::create(dir.join(name))?;
    let mut w = BufWriter::new(file);
    f(&mut w)?;
    w.flush()?;
    manifest.files.push(name.to_string());
    Ok(())
}

pub fn gen(spec_path: Option<&Path>, count: usize, out: &Path, force: bool) -> CmdResult {
    if count == 0 {
        return Err(Failure::Usage("--count must be at least 1".into()));
    }
    let spec = match spec_path {
        Some(p) => CorpusSpec::parse(&read_text(p)?)?,
        None => CorpusSpec::default(),
    };
    let inventory = Inventory::default();
    let utts = generate(&spec, &inventory, count)?;
    prepare_out_dir(out, force)?;

    let mut manifest = RunManifest::start("gen", &spec.to_text(), spec.seed);
    write_file(out, CORPUS_FILE, &mut manifest, |w| write_corpus(w, spec.frame_rate, spec.mel_bins, &utts))?;
    write_file(out, "corpus.txt", &mut manifest, |w| write_corpus_text(w, &inventory, &utts))?;
    write_file(out, INVENTORY_FILE, &mut manifest, |w| Ok(w.write_all(inventory.to_text().as_bytes())?))?;
    write_file(out, "spec.txt", &mut manifest, |w| Ok(w.write_all(spec.to_text().as_bytes())?))?;

    let (pauses, zero) = zero_fraction(&utts, &inventory);
    manifest.metric("utterances", utts.len() as f64);
    manifest.metric("frames", utts.iter().map(|u| u.frames()).sum::<usize>() as f64);
    manifest.metric("tokens", utts.iter().map(|u| u.tokens.len()).sum::<usize>() as f64);
    manifest.metric("pause_tokens", pauses as f64);
    manifest.metric("zero_duration_fraction", zero);
    manifest.finish(out)?;
    println!("wrote {} utterances to {}", utts.len(), out.display());
    Ok(())
}

/// Corpus file and the inventory that goes with it.
fn locate_corpus(path: &Path) -> CmdResult<(PathBuf, Inventory)> {
    let (file, dir) = if path.is_dir() {
        (path.join(CORPUS_FILE), path.to_path_buf())
    } else {
        (path.to_path_buf(), path.parent().map(Path::to_path_buf).unwrap_or_default())
    };
    let inv_path = dir.join(INVENTORY_FILE);
    let inventory = if inv_path.exists() {
        Inventory::from_text(&read_text(&inv_path)?)?
    } else {
        Inventory::default()
    };
    Ok((file, inventory))
}

fn parse_overrides(sets: &[String]) -> CmdResult<Vec<(String, String)>> {
    sets.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got '{s}'")))
        })
        .collect()
}

/// Problems that make a config unusable with a corpus.
fn corpus_mismatches(cfg: &RunConfig, corpus: &Corpus) -> Vec<String> {
    let m = &cfg.model;
    let mut errs = Vec::new();
    if m.mel_bins != corpus.bins {
        errs.push(format!("mel_bins = {} but the corpus has {} bins", m.mel_bins, corpus.bins));
    }
    if let Some(t) = corpus.utterances.iter().flat_map(|u| &u.tokens).max() {
        if *t >= m.vocab_size {
            errs.push(format!("vocab_size = {} but the corpus uses phoneme id {t}", m.vocab_size));
        }
    }
    if let Some(s) = corpus.utterances.iter().map(|u| u.speaker).max() {
        if s >= m.num_speakers {
            errs.push(format!("num_speakers = {} but the corpus uses speaker {s}", m.num_speakers));
        }
    }
    if corpus.utterances.is_empty() {
        errs.push("the corpus has no utterances".into());
    }
    errs
}

pub struct TrainArgs<'a> {
    pub config: Option<&'a Path>,
    pub corpus: &'a Path,
    pub overrides: &'a [String],
    pub resume: Option<&'a Path>,
    pub out: &'a Path,
    pub force: bool,
}

fn checkpoint_name(step: usize) -> String {
    format!("ckpt-{step:06}.ckpt")
}

/// Opens the metrics file for appending rows after `step`, keeping earlier
/// rows of a resumed run.
fn open_metrics(path: &Path, resume_step: Option<usize>) -> CmdResult<fs::File> {
    let mut kept = vec![METRICS_HEADER.to_string()];
    if let (Some(step), true) = (resume_step, path.exists()) {
        let f = BufReader::new(fs::File::open(path)?);
        for line in f.lines().skip(1) {
            let line = line?;
            let row_step: Option<usize> = line.split(',').next().and_then(|s| s.parse().ok());
            if row_step.is_some_and(|s| s < step) {
                kept.push(line);
            }
        }
    }
    let mut f = fs::File::create(path)?;
    for line in &kept {
        writeln!(f, "{line}")?;
    }
    Ok(f)
}

pub fn train(args: &TrainArgs<'_>) -> CmdResult {
    let (corpus_file, inventory) = locate_corpus(args.corpus)?;
    let corpus = read_corpus(BufReader::new(open(&corpus_file)?))?;
    let text = match args.config {
        Some(p) => read_text(p)?,
        None => String::new(),
    };
    let mut overrides = parse_overrides(args.overrides)?;
    // Shape keys follow the corpus unless stated.
    let stated: BTreeSet<String> = crate::run::config_map(&text)
        .into_keys()
        .chain(overrides.iter().map(|(k, _)| k.clone()))
        .collect();
    for (k, v) in [
        ("mel_bins", corpus.bins.to_string()),
        ("frame_rate", format!("{:?}", corpus.frame_rate)),
        ("vocab_size", inventory.len().to_string()),
    ] {
        if !stated.contains(k) {
            overrides.insert(0, (k.to_string(), v));
        }
    }
    let cfg = RunConfig::parse_with(&text, &overrides)?;
    let mismatches = corpus_mismatches(&cfg, &corpus);
    if !mismatches.is_empty() {
        return Err(nartts::Error::Config(mismatches).into());
    }

    prepare_out_dir(args.out, args.force)?;
    let out = args.out;
    let mut trainer = match args.resume {
        Some(p) => Trainer::resume(cfg.clone(), p)?,
        None => Trainer::new(cfg.clone())?,
    };
    let mut manifest = RunManifest::start("train", &cfg.to_text(), cfg.train.seed);
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    fs::write(out.join(INVENTORY_FILE), inventory.to_text())?;
    manifest.files.extend([CONFIG_FILE.to_string(), INVENTORY_FILE.to_string()]);
    if let Some(p) = args.resume {
        manifest.metric("resumed_from_step", trainer.step as f64);
        eprintln!("resuming from {} at step {}", p.display(), trainer.step);
    }

    let metrics_path = out.join(METRICS_FILE);
    let mut metrics = BufWriter::new(open_metrics(&metrics_path, args.resume.map(|_| trainer.step))?);
    manifest.files.push(METRICS_FILE.into());
    let data = &corpus.utterances;
    let tc = cfg.train.clone();
    let progress_every = (tc.steps / 20).max(1);
    let mut last = None;
    while trainer.step < tc.steps {
        let r = trainer.train_step(data)?;
        if r.step % tc.log_every.max(1) == 0 {
            writeln!(metrics, "{}", r.csv_row())?;
        }
        if r.step % progress_every == 0 || trainer.step == tc.steps {
            eprintln!(
                "step {:>6}  loss {:.5}  spec {:.5}  lr {:.4e}  beta {:.3}",
                r.step, r.loss.total, r.loss.spec_last, r.lr, r.beta
            );
        }
        if tc.checkpoint_every > 0 && trainer.step % tc.checkpoint_every == 0 {
            metrics.flush()?;
            let name = checkpoint_name(trainer.step);
            trainer.save_checkpoint(&out.join(&name))?;
            manifest.files.push(name);
        }
        last = Some(r);
    }
    metrics.flush()?;
    trainer.save_checkpoint(&out.join(FINAL_CHECKPOINT))?;
    manifest.files.push(FINAL_CHECKPOINT.into());

    manifest.metric("steps", trainer.step as f64);
    if let Some(r) = &last {
        manifest.metric("final_loss", r.loss.total);
        manifest.metric("final_spec_last", r.loss.spec_last);
    }
    let (teacher, _) = evaluate(&trainer.model, &trainer.store, data, EvalMode::TeacherDuration)?;
    let (free, _) = evaluate(&trainer.model, &trainer.store, data, EvalMode::FreeRunning)?;
    manifest.metric("teacher_spec_l1", teacher.spec_l1);
    manifest.metric("dur_frame_error", teacher.dur_frame_error);
    manifest.metric("zero_accuracy", teacher.zero_accuracy);
    manifest.metric("free_spec_l1", free.spec_l1);
    manifest.metric("free_length_matches", free.length_matches as f64);
    manifest.finish(out)?;
    println!(
        "trained {} steps: teacher L1 {:.5}, duration error {:.3} frames, zero accuracy {:.3}",
        trainer.step, teacher.spec_l1, teacher.dur_frame_error, teacher.zero_accuracy
    );
    Ok(())
}

pub struct SynthArgs<'a> {
    pub ckpt: &'a Path,
    pub text: &'a str,
    pub speaker: usize,
    pub config: Option<&'a Path>,
    pub inventory: Option<&'a Path>,
    pub out: &'a Path,
    pub force: bool,
}

pub fn synth(args: &SynthArgs<'_>) -> CmdResult {
    let dir = args.ckpt.parent().map(Path::to_path_buf).unwrap_or_default();
    let config_path = args.config.map(Path::to_path_buf).unwrap_or_else(|| dir.join(CONFIG_FILE));
    let cfg = RunConfig::parse(&read_text(&config_path)?)?;
    let inventory = match args.inventory {
        Some(p) => Inventory::from_text(&read_text(p)?)?,
        None if dir.join(INVENTORY_FILE).exists() => Inventory::from_text(&read_text(&dir.join(INVENTORY_FILE))?)?,
        None => Inventory::default(),
    };
    let tokens = inventory.encode(args.text)?;
    if tokens.is_empty() {
        return Err(Failure::Usage("--text holds no phoneme symbols".into()));
    }
    let records = read_checkpoint(BufReader::new(open(args.ckpt)?))?;
    let mut store = ParamStore::new();
    let model = Model::new(&cfg.model, &mut store, cfg.train.seed)?;
    store.load_records(&records)?;

    let input = ModelInput::new(&[tokens.clone()], &[args.speaker])?;
    let mut cx = Ctx::new(&store, Precision::High, 0);
    let result = model.forward(&mut cx, &input, None, RunOptions::SYNTH)?;
    let frames = result.frames[0].clone();
    let values: Vec<f32> = cx.g.value(result.decoder.last()).iter().map(|&v| v as f32).collect();
    let mel = Mel {
        frames: frames.iter().sum(),
        bins: cfg.model.mel_bins,
        values,
    };

    prepare_out_dir(args.out, args.force)?;
    let mut manifest = RunManifest::start("synth", &cfg.to_text(), cfg.train.seed);
    write_file(args.out, "mel.bin", &mut manifest, |w| write_mel(w, &mel))?;
    write_file(args.out, "mel.txt", &mut manifest, |w| write_mel_text(w, &mel))?;
    let record = DurationRecord {
        tokens: tokens.iter().copied().zip(frames.iter().copied()).collect(),
    };
    write_file(args.out, "durations.txt", &mut manifest, |w| write_durations_text(w, &[record]))?;
    manifest.metric("tokens", tokens.len() as f64);
    manifest.metric("frames", mel.frames as f64);
    manifest.metric("speaker", args.speaker as f64);
    manifest.finish(args.out)?;
    println!("synthesized {} frames for {} tokens into {}", mel.frames, tokens.len(), args.out.display());
    Ok(())
}

pub fn bench(decoders: &[BenchDecoder], frames: &[usize], repeats: usize, dim: usize, blocks: usize, out: Option<&Path>) -> CmdResult {
    if repeats == 0 || frames.contains(&0) {
        return Err(Failure::Usage("--repeats and every --frames value must be positive".into()));
    }
    let cfg = BenchConfig {
        d: dim,
        blocks,
        ..BenchConfig::default()
    };
    let mut csv = vec![BENCH_HEADER.to_string()];
    println!("{BENCH_HEADER}");
    for &kind in decoders {
        let runner = BenchRunner::new(kind, &cfg)?;
        for &t in frames {
            let row = runner.measure(t, repeats)?;
            println!("{}", row.csv_row());
            csv.push(row.csv_row());
        }
    }
    if let Some(path) = out {
        fs::write(path, csv.join("\n") + "\n")?;
    }
    Ok(())
}

pub fn gradcheck(module: &str, seed: u64, full: bool, inject_fault: Option<f64>) -> CmdResult {
    let names: Vec<&str> = if module == "all" {
        SUITES.to_vec()
    } else if SUITES.contains(&module) {
        vec![module]
    } else {
        return Err(Failure::Usage(format!("unknown module '{module}'; expected all or one of: {}", SUITES.join(", "))));
    };
    let opts = SuiteOptions {
        seed,
        max_entries: if full { None } else { Some(8) },
        corrupt: inject_fault,
    };
    println!("{:<22} {:>7} {:>8} {:>12}  {:<6} worst parameter", "module", "params", "checked", "max_rel_err", "status");
    let mut failed = Vec::new();
    for name in names {
        let report = run_suite(name, &opts)?;
        let worst = report
            .params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .map(|p| format!("{}[{}] analytic {:.6e} numeric {:.6e}", p.name, p.worst_index, p.analytic, p.numeric))
            .unwrap_or_default();
        let status = if report.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<22} {:>7} {:>8} {:>12.3e}  {:<6} {}",
            name,
            report.params.len(),
            report.params.iter().map(|p| p.checked).sum::<usize>(),
            report.max_rel_error(),
            status,
            worst
        );
        if !report.passed() {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "gradient check failed for {} (tolerance 1e-4): {}",
            failed.len(),
            failed.join(", ")
        )))
    }
}
