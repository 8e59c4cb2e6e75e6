//! The `vsumm` command line.

use crate::autodiff::Fault;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{load_datasets, synth_dataset, write_synth_dataset, Dataset, Video};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_model, format_plot_data, format_results_row, length_study, reduced_f1, score_frames, split_dataset,
    to_train_video, Budget, RESULTS_HEADER,
};
use crate::gradcheck::run_suite;
use crate::model::{init_params, ModelParams};
use crate::rl::{train_from, TrainVideo};
use crate::shots::{build_summary, format_summary};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "vsumm", version, about = "Video summarization with a 3D U-Net policy")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Dataset manifest; repeat to concatenate datasets.
    #[arg(long, global = true)]
    pub manifest: Vec<PathBuf>,

    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for per-video work.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Summary length as a fraction of the video, or P; repeatable.
    #[arg(long, global = true)]
    pub budget: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint and a JSONL log.
    Train {
        /// Overrides train.epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Write key-shot summaries for each video.
    Summarize {
        /// Only summarize this video id.
        #[arg(long)]
        video: Option<String>,
    },
    /// Split-based F1 evaluation, training per split unless a checkpoint is given.
    Evaluate,
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Generate a synthetic dataset.
    Synth,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FaultArg {
    ConvInputGradSign,
}

/// Merges the config file with command-line overrides.
pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if !cli.manifest.is_empty() {
        cfg.manifest = cli.manifest.clone();
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    if !cli.budget.is_empty() {
        cfg.eval.budgets = Some(cli.budget.iter().map(|b| Budget::parse(b)).collect::<Result<_>>()?);
    }
    if let Command::Train { epochs: Some(e) } = cli.command {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs a parsed command line; the caller maps errors to exit codes.
pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    let cfg = effective_config(cli)?;
    if cfg.jobs > 0 {
        // A pool may already exist when called twice in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build_global();
    }
    match &cli.command {
        Command::Train { .. } => cmd_train(&cfg, stdout),
        Command::Summarize { video } => cmd_summarize(&cfg, cli.checkpoint.as_deref(), cli.config.is_some(), video.as_deref(), stdout),
        Command::Evaluate => cmd_evaluate(&cfg, cli.checkpoint.as_deref(), cli.config.is_some(), stdout),
        Command::Gradcheck { inject_fault } => cmd_gradcheck(
            &cfg,
            inject_fault.map(|f| match f {
                FaultArg::ConvInputGradSign => Fault::ConvInputGradSign,
            }),
            stdout,
        ),
        Command::Synth => cmd_synth(&cfg, stdout),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg
        .out
        .clone()
        .ok_or_else(|| Error::Config("an output directory is required (--out)".into()))?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn load(cfg: &RunConfig) -> Result<Dataset> {
    if cfg.manifest.is_empty() {
        return Err(Error::Config("a manifest is required (--manifest)".into()));
    }
    load_datasets(&cfg.manifest)
}

fn check_channels(cfg_in: usize, ds: &Dataset) -> Result<()> {
    match ds.videos.iter().find(|v| v.features.channels() != cfg_in) {
        Some(v) => Err(Error::Config(format!(
            "{} has {} channels but model.in_channels = {cfg_in}",
            v.features.id,
            v.features.channels()
        ))),
        None => Ok(()),
    }
}

fn train_videos(cfg: &RunConfig, videos: &[&Video]) -> Result<Vec<TrainVideo>> {
    videos.iter().map(|v| to_train_video(v, cfg.model.levels)).collect()
}

struct JsonLog {
    w: BufWriter<File>,
    path: PathBuf,
}

impl JsonLog {
    fn create(path: PathBuf) -> Result<Self> {
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(JsonLog {
            w: BufWriter::new(f),
            path,
        })
    }

    fn line(&mut self, v: &serde_json::Value) -> Result<()> {
        writeln!(self.w, "{v}").map_err(|e| Error::io(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn config_event(command: &str, cfg: &RunConfig) -> serde_json::Value {
    json!({ "event": "config", "command": command, "config": cfg, "config_toml": cfg.to_toml() })
}

/// Trains on `videos` and streams per-step and per-epoch records to `log`.
fn train_logged(
    cfg: &RunConfig,
    videos: &[TrainVideo],
    seed: u64,
    log: &mut JsonLog,
    tag: serde_json::Value,
) -> Result<ModelParams> {
    let init = init_params(&cfg.model, seed)?;
    let mut io_err = None;
    let outcome = train_from(init, videos, &cfg.train, seed, &mut |rec| {
        let mut v = json!({ "event": "step", "split": tag });
        if let (Some(m), serde_json::Value::Object(r)) = (v.as_object_mut(), serde_json::to_value(rec).expect("record")) {
            m.extend(r);
        }
        if let Err(e) = log.line(&v) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    for m in &outcome.epochs {
        let mut v = json!({ "event": "epoch", "split": tag });
        if let (Some(o), serde_json::Value::Object(r)) = (v.as_object_mut(), serde_json::to_value(m).expect("metrics")) {
            o.extend(r);
        }
        log.line(&v)?;
    }
    if let Some(d) = &outcome.diverged {
        log.line(&json!({ "event": "diverged", "split": tag, "detail": d }))?;
        return Err(Error::Numeric(format!("training diverged: {d}")));
    }
    Ok(outcome.params)
}

fn cmd_train(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    let ds = load(cfg)?;
    check_channels(cfg.model.in_channels, &ds)?;
    let dir = out_dir(cfg)?;
    let mut log = JsonLog::create(dir.join("train_log.jsonl"))?;
    log.line(&config_event("train", cfg))?;
    let refs: Vec<&Video> = ds.videos.iter().collect();
    let videos = train_videos(cfg, &refs)?;
    let result = train_logged(cfg, &videos, cfg.seed, &mut log, serde_json::Value::Null);
    log.finish()?;
    let params = result?;
    let ck = dir.join("model.ckpt");
    checkpoint::save(&ck, &params)?;
    let _ = writeln!(stdout, "{}", ck.display());
    Ok(())
}

fn load_params(cfg: &RunConfig, path: Option<&Path>, strict: bool) -> Result<ModelParams> {
    let path = path.ok_or_else(|| Error::Config("a checkpoint is required (--checkpoint)".into()))?;
    if strict {
        checkpoint::load_matching(path, &cfg.model)
    } else {
        checkpoint::load(path)
    }
}

fn cmd_summarize(
    cfg: &RunConfig,
    ckpt: Option<&Path>,
    strict: bool,
    only: Option<&str>,
    stdout: &mut dyn Write,
) -> Result<()> {
    let params = load_params(cfg, ckpt, strict)?;
    let ds = load(cfg)?;
    check_channels(params.config.in_channels, &ds)?;
    let dir = out_dir(cfg)?;
    let kts = cfg.kts(&ds.defaults);
    let budgets = cfg.budgets(&ds.defaults);
    let videos: Vec<&Video> = ds
        .videos
        .iter()
        .filter(|v| only.is_none_or(|id| v.features.id == id))
        .collect();
    if let Some(id) = only.filter(|_| videos.is_empty()) {
        return Err(Error::Validation(format!("video `{id}` is not in the manifest")));
    }
    for v in videos {
        let p = score_frames(&v.features, &params)?;
        let frames = crate::rl::frame_vectors(&v.features.tensor, v.features.n)?;
        for b in &budgets {
            let l = b.resolve(v.annotations.as_ref())?;
            let s = build_summary(&p, &frames, l, &kts)?;
            let path = dir.join(format!("{}.b{}.summary", v.features.id, b));
            fs::write(&path, format_summary(&v.features.id, &s)).map_err(|e| Error::io(&path, e))?;
            let _ = writeln!(stdout, "{}", path.display());
        }
    }
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, ckpt: Option<&Path>, strict: bool, stdout: &mut dyn Write) -> Result<()> {
    let ds = load(cfg)?;
    if let Some(v) = ds.videos.iter().find(|v| v.annotations.is_none()) {
        return Err(Error::Validation(format!("{} has no annotations to evaluate against", v.features.id)));
    }
    let fixed = ckpt.map(|p| load_params(cfg, Some(p), strict)).transpose()?;
    check_channels(fixed.as_ref().map_or(cfg.model.in_channels, |p| p.config.in_channels), &ds)?;
    let dir = out_dir(cfg)?;
    let kts = cfg.kts(&ds.defaults);
    let reduction = cfg.reduction(&ds.defaults);
    let budgets = cfg.budgets(&ds.defaults);
    let ids: Vec<String> = ds.videos.iter().map(|v| v.features.id.clone()).collect();
    let splits = split_dataset(&ids, cfg.eval.splits, cfg.eval.train_fraction, cfg.seed)?;
    let by_id = |id: &String| ds.videos.iter().find(|v| &v.features.id == id).expect("split ids come from the dataset");

    let mut log = JsonLog::create(dir.join("eval_log.jsonl"))?;
    log.line(&config_event("evaluate", cfg))?;
    let mut table = String::from(RESULTS_HEADER);
    table.push('\n');
    let mut per_budget = vec![Vec::new(); budgets.len()];
    let mut study: Vec<Vec<f64>> = vec![Vec::new(); cfg.eval.study_budgets.len()];
    for (si, split) in splits.iter().enumerate() {
        let test: Vec<&Video> = split.test.iter().map(by_id).collect();
        let params = match &fixed {
            Some(p) => p.clone(),
            None => {
                let train: Vec<&Video> = split.train.iter().map(by_id).collect();
                let tv = train_videos(cfg, &train)?;
                train_logged(cfg, &tv, cfg.seed.wrapping_add(si as u64), &mut log, json!(si))?
            }
        };
        for (bi, b) in budgets.iter().enumerate() {
            let evals = evaluate_model(&params, &test, *b, &kts)?;
            for e in &evals {
                let _ = writeln!(table, "{}", format_results_row(si, b, e));
            }
            per_budget[bi].push(reduced_f1(&evals, reduction));
        }
        if cfg.eval.length_study {
            for (row, acc) in length_study(&params, &test, &cfg.eval.study_budgets, reduction, &kts)?
                .into_iter()
                .zip(study.iter_mut())
            {
                acc.push(row.f1);
            }
        }
    }
    log.finish()?;
    let results = dir.join("results.tsv");
    fs::write(&results, &table).map_err(|e| Error::io(&results, e))?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    for (b, f) in budgets.iter().zip(&per_budget) {
        let _ = writeln!(stdout, "budget {b}\t{} F1 {:.4} over {} splits", reduction.as_str(), mean(f), f.len());
    }
    if cfg.eval.length_study {
        let points: Vec<(Budget, f64)> = cfg
            .eval
            .study_budgets
            .iter()
            .zip(&study)
            .map(|(b, f)| (*b, mean(f)))
            .collect();
        let plot = dir.join("length_study.tsv");
        fs::write(&plot, format_plot_data(&points)).map_err(|e| Error::io(&plot, e))?;
        let _ = writeln!(stdout, "{}", plot.display());
    }
    let _ = writeln!(stdout, "{}", results.display());
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, fault: Option<Fault>, stdout: &mut dyn Write) -> Result<()> {
    let g = cfg.gradcheck;
    let entries = run_suite(g.eps, g.tolerance, fault)?;
    let mut failed = Vec::new();
    for e in &entries {
        let _ = writeln!(
            stdout,
            "{:<26} {:.3e} {}",
            e.name,
            e.max_rel_err,
            if e.passed { "ok" } else { "FAIL" }
        );
        if !e.passed {
            failed.push(e.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check above {:e} for: {}",
            g.tolerance,
            failed.join(", ")
        )))
    }
}

fn cmd_synth(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    let videos = synth_dataset(&cfg.synth, cfg.seed)?;
    let dir = out_dir(cfg)?;
    let manifest = write_synth_dataset(&dir, &cfg.synth, &videos)?;
    let _ = writeln!(stdout, "{}", manifest.display());
    Ok(())
}
