use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::early_stopping::{EarlyStopping, Verdict};
use super::schedule::LrSchedule;
use crate::autodiff::{adam_step, AdamState};
use crate::data::{Dataset, InstancePair};
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::losses::{ContrastiveMode, LossTerms};
use crate::model::Model;

/// Mutable optimizer and shuffling state carried across epochs.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    /// Optimizer steps taken so far (the schedule's `t`).
    pub step: usize,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(model: &Model) -> Self {
        Self {
            adam: AdamState::new(model.store.values()),
            // the shuffle stream is independent of the initialization stream
            rng: ChaCha8Rng::seed_from_u64(model.config.seed ^ 0x5348_5546),
            step: 0,
            epoch: 0,
        }
    }
}

/// Number of optimizer steps one epoch over `n` pairs takes. A trailing
/// batch smaller than 2 is merged into the one before it.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    let full = n / batch_size;
    match (full, n % batch_size) {
        (0, _) => usize::from(n >= 2),
        (f, r) if r >= 2 => f + 1,
        (f, _) => f,
    }
}

fn split_batches(pairs: &[InstancePair], batch_size: usize) -> Vec<&[InstancePair]> {
    let mut out: Vec<&[InstancePair]> = pairs.chunks(batch_size).collect();
    if out.len() >= 2 && out.last().is_some_and(|b| b.len() < 2) {
        out.pop();
        let start = (out.len() - 1) * batch_size;
        *out.last_mut().unwrap() = &pairs[start..];
    }
    out
}

fn diverged(epoch: usize, batch: &[InstancePair], err: Error) -> Error {
    let indices: Vec<String> = batch.iter().map(|p| format!("{}/{}", p.image, p.caption)).collect();
    Error::Diverged { epoch, detail: format!("{err}; last batch (image/caption): [{}]", indices.join(", ")) }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    /// Batch-averaged loss values and weights.
    pub terms: LossTerms,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

/// One shuffled pass over `data` with an Adam step per batch.
pub fn train_epoch(model: &mut Model, data: &Dataset, state: &mut TrainState, schedule: &LrSchedule) -> Result<EpochSummary> {
    let mut pairs = data.pairs();
    if pairs.len() < 2 {
        return Err(Error::Input(format!("training needs at least 2 pairs, got {}", pairs.len())));
    }
    pairs.shuffle(&mut state.rng);
    let epoch = state.epoch + 1;
    let batches = split_batches(&pairs, model.config.batch_size);

    let mut avg = LossTerms { base_weights: model.config.base_weights, ..LossTerms::default() };
    let mode = if state.epoch < model.config.warmup_epochs { ContrastiveMode::Sum } else { model.config.contrastive_mode };
    let mut lr = schedule.lr_at(state.step);
    for batch in &batches {
        let (tape, bind, total, terms) = model.batch_loss_with(data, batch, mode).map_err(|e| match e {
            Error::NonFinite { .. } => diverged(epoch, batch, e),
            other => other,
        })?;
        if !terms.total.is_finite() {
            return Err(diverged(epoch, batch, Error::NonFinite { op: "total_loss" }));
        }
        let grads = tape.backward(total)?;
        let grads = bind.collect_grads(&grads, &model.store);
        lr = schedule.lr_at(state.step);
        let (names, values) = model.store.split_mut();
        adam_step(values, names, &grads, &mut state.adam, lr).map_err(|e| match e {
            Error::NonFiniteGradient { .. } => diverged(epoch, batch, e),
            other => other,
        })?;
        state.step += 1;
        for i in 0..4 {
            avg.values[i] += terms.values[i];
            avg.effective_weights[i] += terms.effective_weights[i];
        }
        avg.total += terms.total;
    }
    let n = batches.len() as f64;
    for i in 0..4 {
        avg.values[i] /= n;
        avg.effective_weights[i] /= n;
    }
    avg.total /= n;
    state.epoch = epoch;
    Ok(EpochSummary { terms: avg, lr })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub summary: EpochSummary,
    pub val_mr: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Parameters from the epoch with the best validation score.
    pub best: Model,
    pub best_epoch: usize,
    pub best_mr: f64,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Schedule for `model.config` given the training set size.
pub fn schedule_for(model: &Model, train_pairs: usize) -> Result<LrSchedule> {
    let cfg = &model.config;
    let steps = batches_per_epoch(train_pairs, cfg.batch_size).max(1);
    LrSchedule::new(cfg.eta0, cfg.eta_min(), steps * cfg.period_epochs)
}

/// Trains for up to `config.epochs` epochs, scoring each with `validate`
/// and stopping after `config.patience` epochs without improvement.
pub fn fit_with<V>(mut model: Model, train: &Dataset, schedule: &LrSchedule, mut validate: V) -> Result<FitResult>
where
    V: FnMut(&Model, usize) -> Result<f64>,
{
    let mut state = TrainState::new(&model);
    let mut stopper = EarlyStopping::new(model.config.patience);
    let mut best = model.clone();
    let mut history = Vec::new();
    let mut stopped_early = false;
    for _ in 0..model.config.epochs {
        let summary = train_epoch(&mut model, train, &mut state, schedule)?;
        let val_mr = validate(&model, state.epoch)?;
        history.push(EpochRecord { epoch: state.epoch, summary, val_mr });
        match stopper.observe(state.epoch, val_mr) {
            Verdict::Improved => best = model.clone(),
            Verdict::Continue => {}
            Verdict::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(FitResult {
        best,
        best_epoch: stopper.best_epoch,
        best_mr: stopper.best.unwrap_or(f64::NAN),
        history,
        stopped_early,
    })
}

/// [`fit_with`] using validation mR and the configured schedule.
pub fn fit(model: Model, train: &Dataset, val: &Dataset) -> Result<FitResult> {
    if val.num_images() == 0 || val.num_captions() == 0 {
        return Err(Error::Config("validation split is empty".into()));
    }
    let schedule = schedule_for(&model, train.num_captions())?;
    fit_with(model, train, &schedule, |m, _| Ok(evaluate(m, val)?.mr))
}

pub const TRAIN_LOG_HEADER: &str =
    "epoch,l_instance,l_consensus,l_fusion,l_kl,lambda1,lambda2,lambda3,lambda4,total,lr";

pub fn write_train_log(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{TRAIN_LOG_HEADER}").unwrap();
    for rec in history {
        let t = &rec.summary.terms;
        let v = t.values;
        let w = t.effective_weights;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            rec.epoch, v[0], v[1], v[2], v[3], w[0], w[1], w[2], w[3], t.total, rec.summary.lr
        )
        .unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
