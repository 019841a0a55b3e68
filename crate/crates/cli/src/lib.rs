//! Subcommands of the `crossdistill` binary.
//!
//! Every command reads a [`RunConfig`] and writes its artifacts into one
//! output directory; reruns with the same config, seed and inputs produce
//! byte-identical files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;

use crossdistill::checks::composed_grad_checks;
use crossdistill::config::RunConfig;
use crossdistill::distill::{Arm, StudentModel};
use crossdistill::evalkit::{
    accuracy, classify, first_token_agreement, paired_bootstrap, weighted_f1, write_records_csv, AudioPrompt,
    ClassificationTask, EvalRecord, PromptSource, TextPrompt,
};
use crossdistill::manifest::{Manifest, ManifestRecord, Split};
use crossdistill::nnblocks::ParamStore;
use crossdistill::numcore::Rng;
use crossdistill::qformer::{pretrain_donor, AsrModel, InitMode};
use crossdistill::toylab::{spearman, sweep};
use crossdistill::toylm::{pretrain_lm, ToyLm};
use crossdistill::trainer::{
    build_student, load_checkpoint, restore_into, save_checkpoint, synthesize_examples, teacher_targets, train,
    write_metrics_csv, AudioExample,
};
use crossdistill::audiofront::write_wav;
use crossdistill::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const DONOR_CKPT: &str = "donor.ckpt";

#[derive(Debug, Parser)]
#[command(name = "crossdistill", version, about = "Distill a frozen toy LM into a speech adapter")]
pub struct Cli {
    /// JSON run configuration; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output (and artifact) directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic manifest and WAV files.
    Synth,
    /// Pretrain the teacher LM and the donor ASR model.
    Pretrain {
        /// Defaults to `<out>/manifest.jsonl`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train a student adapter.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// full | distill_only | align_only (default from the config).
        #[arg(long)]
        arm: Option<Arm>,
        /// decoder | scratch (default from the config).
        #[arg(long)]
        init: Option<InitMode>,
    },
    /// Evaluate prompt sources on the test split.
    Eval {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Student checkpoints, `teacher` for the text prompt, or
        /// `untrained` / `untrained:<init>` for a freshly built student.
        #[arg(required = true)]
        sources: Vec<String>,
    },
    /// Run the toy hidden-state experiment.
    Toylab {
        /// Comma-separated dimensions (default from the config).
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        /// Also sweep the configured learning rates.
        #[arg(long)]
        lr_sweep: bool,
    },
    /// Finite-difference checks of composed model pieces.
    Gradcheck,
}

/// Loads the config (or defaults) and applies the seed override.
pub fn resolve_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(cli.config.as_deref(), cli.seed)?;
    let out = cli.out.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest_path = |m: Option<PathBuf>| m.unwrap_or_else(|| out.join(MANIFEST_FILE));
    match cli.command {
        Command::Synth => cmd_synth(&cfg, out),
        Command::Pretrain { manifest } => cmd_pretrain(&cfg, out, &manifest_path(manifest)),
        Command::Train { manifest, arm, init } => {
            let mut cfg = cfg;
            if let Some(a) = arm {
                cfg.train.arm = a;
            }
            if let Some(i) = init {
                cfg.train.init_mode = i;
            }
            cmd_train(&cfg, out, &manifest_path(manifest))
        }
        Command::Eval { manifest, sources } => cmd_eval(&cfg, out, &manifest_path(manifest), &sources),
        Command::Toylab { dims, lr_sweep } => cmd_toylab(&cfg, out, dims.as_deref(), lr_sweep),
        Command::Gradcheck => cmd_gradcheck(&cfg, out),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Writes a whole file through `body`, attaching the path to I/O errors.
fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    body(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    write_file(path, |w| {
        writeln!(w, "step,loss")?;
        for (i, l) in losses.iter().enumerate() {
            writeln!(w, "{i},{l}")?;
        }
        Ok(())
    })
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let language = cfg.language()?;
    let synth = cfg.synth_spec(&language)?;
    let geometry = cfg.geometry();
    let d = &cfg.data;
    let splits = [
        (Split::Train, "train", d.train, None),
        (Split::Dev, "dev", d.dev, None),
        (Split::Test, "test", d.test, None),
        (Split::Test, "class", d.class_test, Some(cfg.class_tokens(&language))),
    ];
    let audio_dir = out.join("audio");
    if d.write_audio {
        std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    }
    let mut manifest = Manifest::new(cfg.model.vocab);
    for (i, (split, prefix, count, classes)) in splits.into_iter().enumerate() {
        let spec = cfg.example_spec(count, classes);
        let examples = synthesize_examples(&language, &synth, &geometry, &spec, prefix, &cfg.split_rng(i as u64))?;
        for ex in examples {
            let audio = if d.write_audio {
                let rel = format!("audio/{}.wav", ex.id);
                write_wav(&out.join(&rel), &ex.waveform)?;
                Some(rel)
            } else {
                None
            };
            manifest.records.push(ManifestRecord {
                id: ex.id,
                transcript: ex.transcript,
                audio,
                split,
                class: ex.class,
            });
        }
    }
    let path = out.join(MANIFEST_FILE);
    write_file(&path, |w| manifest.write(w))?;
    println!(
        "synth: {} train, {} dev, {} test -> {}",
        manifest.count(Split::Train),
        manifest.count(Split::Dev),
        manifest.count(Split::Test),
        path.display()
    );
    Ok(())
}

/// Examples of a split from a manifest file; WAV paths resolve against the
/// manifest's directory.
pub fn load_split(cfg: &RunConfig, manifest_path: &Path, split: Split, labeled: Option<bool>) -> Result<Vec<AudioExample>> {
    let manifest = Manifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let language = cfg.language()?;
    manifest.examples(split, labeled, base, cfg, &cfg.synth_spec(&language)?, &cfg.geometry())
}

pub fn cmd_pretrain(cfg: &RunConfig, out: &Path, manifest_path: &Path) -> Result<()> {
    let train_set = load_split(cfg, manifest_path, Split::Train, None)?;
    let dev_set = load_split(cfg, manifest_path, Split::Dev, None)?;
    let corpus = cfg.corpus()?;
    let (_, lm_store, lm_report) = pretrain_lm(&corpus, cfg.lm_spec(), &cfg.lm_train())?;
    info!("teacher held-out perplexity {:.3}", lm_report.held_out_perplexity);
    let (donor, donor_report) = pretrain_donor(&train_set, &dev_set, cfg.encoder_spec(), cfg.decoder_spec(), &cfg.donor_config())?;
    save_checkpoint(&lm_store, &out.join(TEACHER_CKPT))?;
    save_checkpoint(&donor.store, &out.join(DONOR_CKPT))?;
    write_losses(&out.join("teacher_metrics.csv"), &lm_report.losses)?;
    write_losses(&out.join("donor_metrics.csv"), &donor_report.losses)?;
    write_file(&out.join("pretrain_summary.csv"), |w| {
        writeln!(w, "metric,value")?;
        writeln!(w, "teacher_held_out_perplexity,{}", lm_report.held_out_perplexity)?;
        writeln!(w, "teacher_unigram_perplexity,{}", lm_report.unigram_perplexity)?;
        writeln!(w, "teacher_reply_accuracy,{}", lm_report.reply_accuracy)?;
        writeln!(w, "teacher_checksum,{}", lm_store.checksum())?;
        writeln!(w, "donor_held_out_accuracy,{}", donor_report.held_out_accuracy)?;
        writeln!(w, "donor_steps,{}", donor_report.steps_run)
    })?;
    println!(
        "pretrain: teacher perplexity {:.3} (unigram {:.3}), donor accuracy {:.3} after {} steps",
        lm_report.held_out_perplexity, lm_report.unigram_perplexity, donor_report.held_out_accuracy, donor_report.steps_run
    );
    Ok(())
}

/// The frozen teacher from its checkpoint.
pub fn load_teacher(cfg: &RunConfig, path: &Path) -> Result<(ToyLm, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let mut lm = ToyLm::new(&mut store, "lm", cfg.lm_spec(), &mut Rng::new(0))?;
    restore_into(&mut store, &load_checkpoint(path)?)?;
    lm.frozen = true;
    Ok((lm, store))
}

pub fn load_donor(cfg: &RunConfig, path: &Path) -> Result<AsrModel> {
    let mut donor = AsrModel::new(cfg.encoder_spec(), cfg.decoder_spec(), &mut Rng::new(0))?;
    restore_into(&mut donor.store, &load_checkpoint(path)?)?;
    Ok(donor)
}

/// A trained student; both init modes share one parameter layout.
pub fn load_student(cfg: &RunConfig, path: &Path) -> Result<(StudentModel, ParamStore<f32>)> {
    let shell = AsrModel::new(cfg.encoder_spec(), cfg.decoder_spec(), &mut Rng::new(0))?;
    let (student, mut store) = StudentModel::from_donor(&shell, cfg.qformer_spec(), InitMode::Scratch, false, &mut Rng::new(0))?;
    restore_into(&mut store, &load_checkpoint(path)?)?;
    Ok((student, store))
}

pub fn student_stem(arm: Arm, init: InitMode) -> String {
    format!("{arm}_{init}")
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, manifest_path: &Path) -> Result<()> {
    let tc = cfg.train_config();
    let (teacher, teacher_store) = load_teacher(cfg, &out.join(TEACHER_CKPT))?;
    let donor = load_donor(cfg, &out.join(DONOR_CKPT))?;
    let data = load_split(cfg, manifest_path, Split::Train, None)?;
    let targets = teacher_targets(&teacher, &teacher_store, &data)?;
    let (student, mut store) = build_student(&donor, cfg.qformer_spec(), &tc)?;
    let rows = train(&tc, &student, &mut store, &teacher, &teacher_store, &data, &targets)?;
    let stem = student_stem(tc.arm, tc.init_mode);
    save_checkpoint(&store, &out.join(format!("student_{stem}.ckpt")))?;
    write_file(&out.join(format!("metrics_{stem}.csv")), |w| write_metrics_csv(&rows, w))?;
    let last = rows.last().expect("at least one step");
    println!(
        "train {stem}: final combined {:.4}, reference_kl {:.4}",
        last.loss.combined, last.loss.reference_kl
    );
    Ok(())
}

/// One prompt source named on the eval command line.
enum Source {
    Teacher,
    Student(StudentModel, ParamStore<f32>),
}

fn open_source(cfg: &RunConfig, out: &Path, spec: &str) -> Result<Source> {
    if spec == "teacher" {
        return Ok(Source::Teacher);
    }
    let init = match spec.strip_prefix("untrained") {
        Some("") => Some(None),
        Some(r) if r.starts_with(':') => Some(Some(r[1..].parse::<InitMode>()?)),
        _ => None,
    };
    if let Some(init) = init {
        let mut tc = cfg.train_config();
        if let Some(i) = init {
            tc.init_mode = i;
        }
        let donor = load_donor(cfg, &out.join(DONOR_CKPT))?;
        let (s, p) = build_student(&donor, cfg.qformer_spec(), &tc)?;
        return Ok(Source::Student(s, p));
    }
    let (s, p) = load_student(cfg, Path::new(spec))?;
    Ok(Source::Student(s, p))
}

fn source_label(spec: &str) -> String {
    let base = Path::new(spec)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| spec.to_string());
    base.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect()
}

/// Labels from the source specs, with `-2`, `-3`, … appended to repeats.
pub fn unique_labels(specs: &[String]) -> Vec<String> {
    let mut seen: Vec<String> = Vec::new();
    specs
        .iter()
        .map(|s| {
            let base = source_label(s);
            let n = seen.iter().filter(|l| **l == base).count();
            seen.push(base.clone());
            if n == 0 {
                base
            } else {
                format!("{base}-{}", n + 1)
            }
        })
        .collect()
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path, manifest_path: &Path, specs: &[String]) -> Result<()> {
    let (teacher, teacher_store) = load_teacher(cfg, &out.join(TEACHER_CKPT))?;
    let test = load_split(cfg, manifest_path, Split::Test, Some(false))?;
    let labeled = load_split(cfg, manifest_path, Split::Test, Some(true))?;
    let language = cfg.language()?;
    let task = if labeled.is_empty() {
        None
    } else {
        Some(ClassificationTask::new(&language, cfg.class_tokens(&language))?)
    };
    let labels = unique_labels(specs);
    let mut indicators: Vec<Vec<f64>> = Vec::new();
    let mut summary = Vec::new();
    for (spec, label) in specs.iter().zip(&labels) {
        let source = open_source(cfg, out, spec)?;
        let text = TextPrompt {
            teacher: &teacher,
            store: &teacher_store,
        };
        let audio;
        let prompt: &dyn PromptSource = match &source {
            Source::Teacher => &text,
            Source::Student(student, store) => {
                audio = AudioPrompt {
                    student,
                    store,
                    teacher: &teacher,
                    teacher_store: &teacher_store,
                };
                &audio
            }
        };
        let (rate, records) = first_token_agreement(&teacher, &teacher_store, prompt, &test)?;
        write_file(&out.join(format!("eval_agreement_{label}.csv")), |w| write_records_csv(&records, w))?;
        let class_scores = match &task {
            Some(task) => {
                let recs: Vec<EvalRecord> = classify(&teacher, &teacher_store, prompt, task, &labeled)?;
                write_file(&out.join(format!("eval_classes_{label}.csv")), |w| write_records_csv(&recs, w))?;
                let preds: Vec<usize> = recs.iter().map(|r| r.predicted.unwrap_or(0)).collect();
                let golds: Vec<usize> = recs.iter().map(|r| r.gold.unwrap_or(0)).collect();
                Some((accuracy(&preds, &golds)?, weighted_f1(&preds, &golds, &task.class_ids())?))
            }
            None => None,
        };
        println!("eval {label}: agreement {rate:.4}");
        indicators.push(records.iter().map(|r| r.value).collect());
        summary.push((label.clone(), spec.clone(), rate, class_scores));
    }
    write_file(&out.join("eval_summary.csv"), |w| {
        writeln!(w, "label,source,examples,agreement,class_examples,accuracy,weighted_f1")?;
        for (label, spec, rate, cls) in &summary {
            let (acc, f1) = match cls {
                Some((a, f)) => (a.to_string(), f.to_string()),
                None => (String::new(), String::new()),
            };
            writeln!(w, "{label},{spec},{},{rate},{},{acc},{f1}", test.len(), labeled.len())?;
        }
        Ok(())
    })?;
    let mut rows = Vec::new();
    for i in 0..indicators.len() {
        for j in i + 1..indicators.len() {
            let r = paired_bootstrap(&indicators[i], &indicators[j], cfg.eval.resamples, cfg.seed)?;
            println!("bootstrap {} vs {}: diff {:.4}, p {:.4}", labels[i], labels[j], r.observed_diff, r.p_value);
            rows.push((i, j, r));
        }
    }
    write_file(&out.join("eval_bootstrap.csv"), |w| {
        writeln!(w, "a,b,observed_diff,ci_low,ci_high,p_value,resamples")?;
        for (i, j, r) in &rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                labels[*i], labels[*j], r.observed_diff, r.ci_low, r.ci_high, r.p_value, r.resamples
            )?;
        }
        Ok(())
    })
}

pub fn cmd_toylab(cfg: &RunConfig, out: &Path, dims: Option<&[usize]>, lr_sweep: bool) -> Result<()> {
    let dims = dims.unwrap_or(&cfg.toylab.dims);
    let lrs = lr_sweep.then_some(cfg.toylab.lr_sweep.as_slice());
    let result = sweep(dims, &cfg.toy_config(), lrs)?;
    write_file(&out.join("toylab.csv"), |w| result.write_csv(w))?;
    let summary = result.summary();
    write_file(&out.join("toylab_summary.csv"), |w| {
        writeln!(w, "dim,l2_mean,l2_std,l2_lr,kl_mean,kl_std,kl_lr,mean_gap,flagged")?;
        for s in &summary {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                s.dim, s.l2.mean, s.l2.std, s.l2_lr, s.kl.mean, s.kl.std, s.kl_lr, s.mean_gap, s.flagged
            )?;
        }
        Ok(())
    })?;
    for s in &summary {
        println!(
            "toylab dim {:5}: l2 {:.6} kl {:.6} gap {:.6}",
            s.dim, s.l2.mean, s.kl.mean, s.mean_gap
        );
    }
    if summary.len() >= 2 {
        let d: Vec<f64> = summary.iter().map(|s| s.dim as f64).collect();
        let g: Vec<f64> = summary.iter().map(|s| s.mean_gap).collect();
        println!("toylab spearman(dim, gap) = {:.4}", spearman(&d, &g)?);
    }
    Ok(())
}

pub fn cmd_gradcheck(cfg: &RunConfig, out: &Path) -> Result<()> {
    let checks = composed_grad_checks(cfg.seed)?;
    write_file(&out.join("gradcheck.csv"), |w| {
        writeln!(w, "check,max_rel_error,worst_index,analytic,numeric,passed")?;
        for c in &checks {
            let r = &c.report;
            writeln!(
                w,
                "{},{},{},{},{},{}",
                c.name,
                r.max_rel_error,
                r.worst_index,
                r.analytic,
                r.numeric,
                c.passed()
            )?;
        }
        Ok(())
    })?;
    for c in &checks {
        println!("gradcheck {}: {:.3e}", c.name, c.report.max_rel_error);
    }
    match checks.iter().find(|c| !c.passed()) {
        Some(c) => Err(Error::NumericDomain(format!(
            "{} gradient check failed with relative error {:.3e}",
            c.name, c.report.max_rel_error
        ))),
        None => Ok(()),
    }
}
