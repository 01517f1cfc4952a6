//! Command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{read_records, write_records};
use crate::consensus::build_graph;
use crate::data::{generate_synthetic, load_dataset, load_training, write_synthetic, DatasetManifest, SynthConfig, TrainConfig, Vocab};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, rank_captions, similarity_matrix};
use crate::gradcheck::{run_timed, TOLERANCE};
use crate::model::Model;
use crate::training::{batches_per_epoch, fit, write_train_log, LrSchedule};

pub const SEED_ENV: &str = "MHCVSE_SEED";

#[derive(Parser, Debug)]
#[command(name = "mhcvse", version, about = "Image-text matching with consensus-aware embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic paired train/val/test splits.
    Synth(SynthArgs),
    /// Train a model and write the checkpoint, config, vocabulary and logs.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split and write eval_report.csv.
    Eval(EvalArgs),
    /// Print the top-K caption ids for one image.
    Retrieve(RetrieveArgs),
    /// Write the learning-rate schedule as step,lr rows.
    LrCurve(LrCurveArgs),
    /// Run the finite-difference gradient suite.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 96)]
    pub pairs: usize,
    #[arg(long, default_value_t = 6)]
    pub regions: usize,
    #[arg(long, default_value_t = 64)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 8)]
    pub caption_len: usize,
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 1)]
    pub captions_per_image: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// key = value config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// model.ckpt written by `train`; config.txt and vocab.txt are read from the same directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Defaults to eval_report.csv next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub image_id: u64,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
}

#[derive(Args, Debug)]
pub struct LrCurveArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Optimizer steps per epoch used to turn period_epochs into steps.
    #[arg(long, default_value_t = 2)]
    pub steps_per_epoch: usize,
    /// Rows to write; defaults to the configured number of epochs.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub eta0: Option<f64>,
    #[arg(long)]
    pub eta_min: Option<f64>,
    /// Period in steps; overrides steps_per_epoch × period_epochs.
    #[arg(long)]
    pub period: Option<usize>,
    #[arg(long, default_value = "lr_curve.csv")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

/// Failure kinds map to distinct exit codes.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } | Error::Config(_) => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> ExitCode {
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Retrieve(a) => retrieve(a),
        Command::LrCurve(a) => lr_curve(a),
        Command::GradCheck(a) => grad_check(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Ok(seed) = std::env::var(SEED_ENV) {
        cfg.seed = seed.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}=`{seed}` is not a u64")))?;
    }
    Ok(cfg)
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let cfg = SynthConfig {
        n_pairs: a.pairs,
        regions: a.regions,
        feature_dim: a.feature_dim,
        caption_len: a.caption_len,
        vocab: a.vocab,
        noise: a.noise,
        captions_per_image: a.captions_per_image,
        seed: a.seed,
    };
    let data = generate_synthetic(&cfg)?;
    for m in write_synthetic(&a.out, &data)? {
        println!("{}: {} images -> {}", m.split, m.images, a.out.join(format!("{}.manifest", m.split)).display());
    }
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = load_config(a.config.as_deref())?;
    let (train_set, vocab, tokens) = load_training(&DatasetManifest::load(&a.train)?)?;
    let val_set = load_dataset(&DatasetManifest::load(&a.val)?, &vocab)?;
    let graph = build_graph(&tokens, cfg.concepts)?;
    let model = Model::new(&cfg, vocab.len(), graph.adjacency.clone())?;

    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    cfg.save(&a.out.join("config.txt"))?;
    vocab.save(&a.out.join("vocab.txt"))?;
    graph.write_concepts_csv(&a.out.join("concepts.csv"))?;
    graph.write_adjacency_csv(&a.out.join("adjacency.csv"))?;

    let result = fit(model, &train_set, &val_set)?;
    write_train_log(&a.out.join("train_log.csv"), &result.history)?;
    write_records(&a.out.join("model.ckpt"), &result.best.to_records())?;
    for rec in &result.history {
        println!("epoch {:>2}  total {:.5}  lr {:.3e}  val mR {:.4}", rec.epoch, rec.summary.terms.total, rec.summary.lr, rec.val_mr);
    }
    println!(
        "best epoch {} (val mR {:.4}){}",
        result.best_epoch,
        result.best_mr,
        if result.stopped_early { ", stopped early" } else { "" }
    );
    Ok(ExitCode::SUCCESS)
}

/// Loads a checkpoint with the config and vocabulary saved beside it.
pub fn load_trained(checkpoint: &Path) -> Result<(Model, Vocab)> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let cfg = TrainConfig::load(&dir.join("config.txt"))?;
    let vocab = Vocab::load(&dir.join("vocab.txt"))?;
    let model = Model::from_records(&cfg, &read_records(checkpoint)?)?;
    if model.vocab_size() != vocab.len() {
        return Err(Error::Data(format!(
            "checkpoint vocabulary has {} entries, vocab.txt has {}",
            model.vocab_size(),
            vocab.len()
        )));
    }
    Ok((model, vocab))
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let (model, vocab) = load_trained(&a.checkpoint)?;
    let data = load_dataset(&DatasetManifest::load(&a.manifest)?, &vocab)?;
    let result = evaluate(&model, &data)?;
    let out = a.out.unwrap_or_else(|| a.checkpoint.parent().unwrap_or(Path::new(".")).join("eval_report.csv"));
    result.write_csv(&out)?;
    println!("text  R@1 {:.4}  R@5 {:.4}  R@10 {:.4}", result.text[0], result.text[1], result.text[2]);
    println!("image R@1 {:.4}  R@5 {:.4}  R@10 {:.4}", result.image[0], result.image[1], result.image[2]);
    println!("mR {:.4}", result.mr);
    Ok(ExitCode::SUCCESS)
}

fn retrieve(a: RetrieveArgs) -> Result<ExitCode> {
    if a.k < 1 {
        return Err(Error::Input("k must be at least 1".into()));
    }
    let (model, vocab) = load_trained(&a.checkpoint)?;
    let data = load_dataset(&DatasetManifest::load(&a.manifest)?, &vocab)?;
    let image = data
        .image_index(a.image_id)
        .ok_or_else(|| Error::Input(format!("image {} is not in split `{}`", a.image_id, data.name)))?;
    let (img, txt) = model.retrieval_embeddings(&data)?;
    let scores = similarity_matrix(&img, &txt)?;
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    for (rank, c) in rank_captions(&scores, image, a.k).into_iter().enumerate() {
        let entry = &data.captions[c];
        let mark = if entry.image == image { "*" } else { " " };
        writeln!(lock, "{}\t{}{}\t{:.6}\t{}", rank + 1, entry.caption_id, mark, scores.get(image, c), entry.tokens.join(" "))
            .map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn lr_curve(a: LrCurveArgs) -> Result<ExitCode> {
    let cfg = load_config(a.config.as_deref())?;
    let eta0 = a.eta0.unwrap_or(cfg.eta0);
    let eta_min = a.eta_min.unwrap_or(if a.eta0.is_some() { eta0 * cfg.eta_min_ratio } else { cfg.eta_min() });
    let period = a.period.unwrap_or(a.steps_per_epoch * cfg.period_epochs);
    let schedule = LrSchedule::new(eta0, eta_min, period)?;
    let steps = a.steps.unwrap_or(a.steps_per_epoch * cfg.epochs);
    let mut out = String::from("step,lr\n");
    for t in 0..=steps {
        out.push_str(&format!("{t},{}\n", schedule.lr_at(t)));
    }
    std::fs::write(&a.out, out).map_err(|e| Error::io(&a.out, e))?;
    println!("wrote {} rows (period {period} steps) to {}", steps + 1, a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn grad_check(a: GradCheckArgs) -> Result<ExitCode> {
    let (reports, elapsed) = run_timed(a.seed)?;
    let mut failed = 0;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        if !r.passed() {
            failed += 1;
        }
        println!("{:<28} max rel err {:.3e}  ({} coords)  {status}", r.name, r.max_rel_err, r.coordinates);
    }
    println!("{} blocks, {failed} above {TOLERANCE:e}, {:.2}s", reports.len(), elapsed.as_secs_f64());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

/// Steps per epoch for a training manifest under `cfg`, for reporting.
pub fn steps_per_epoch(pairs: usize, cfg: &TrainConfig) -> usize {
    batches_per_epoch(pairs, cfg.batch_size)
}
