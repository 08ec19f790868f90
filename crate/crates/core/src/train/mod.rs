//! Per-context loss, optimizer, learning-rate schedule and the training loop.

mod loss;
mod optim;

pub use loss::{context_loss, loss_graph, LossMaskPolicy, LossTargets};
pub use optim::{clip_global_norm, global_norm, lr_schedule, Adam, OptimizerState};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_graph, ModelConfig, ModelParams, Scaler, TokenizedContext};
use crate::tensor::{Graph, Tensor};
use crate::tokenize::{Context, ExampleWindow, LayoutMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Contexts per optimizer step.
    pub batch_size: usize,
    pub steps: u64,
    pub peak_lr: f64,
    pub warmup: u64,
    pub seed: u64,
    pub clip_norm: f64,
    pub loss_mask: LossMaskPolicy,
    pub adam: Adam,
    /// Examples per context in multi-example training.
    pub context_examples: usize,
    /// Steps between checkpoints (0 disables intermediate checkpoints).
    pub checkpoint_every: u64,
    /// Threads computing per-context gradients within a step.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            steps: 5000,
            peak_lr: 5e-4,
            warmup: 500,
            seed: 0,
            clip_norm: 1.0,
            loss_mask: LossMaskPolicy::default(),
            adam: Adam::default(),
            context_examples: 16,
            checkpoint_every: 1000,
            workers: 1,
        }
    }
}

impl TrainConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // the negations also reject NaN
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) {
            return Err(Error::Validation("train.peak_lr must be positive".into()));
        }
        if self.warmup < 1 {
            return Err(Error::Validation("train.warmup must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation(
                "train.batch_size must be positive".into(),
            ));
        }
        if self.context_examples == 0 {
            return Err(Error::Validation(
                "train.context_examples must be positive".into(),
            ));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Validation("train.clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Standardizes every window of a context by the target's real points.
pub fn standardize_context(ctx: &Context) -> (Scaler, Vec<ExampleWindow>) {
    let scaler = Scaler::fit(ctx.target().real_values());
    let windows = ctx
        .windows()
        .iter()
        .map(|w| scaler.apply_window(w))
        .collect();
    (scaler, windows)
}

/// Loss and parameter gradients of one standardized training context.
pub fn context_gradients(
    params: &ModelParams,
    model_cfg: &ModelConfig,
    policy: LossMaskPolicy,
    ctx: &Context,
) -> Result<(f64, ModelParams)> {
    let (_, windows) = standardize_context(ctx);
    let tokens = TokenizedContext::new(&windows, model_cfg, LayoutMode::Train)?;
    let targets = LossTargets::build(&tokens, model_cfg.horizon_len, policy);
    let mut g = Graph::new();
    let bound = params.bind(model_cfg, &mut g);
    let preds = forward_graph(&mut g, &bound, model_cfg, &tokens)?;
    let loss = loss_graph(&mut g, preds, &targets)?;
    let value = g.value(loss).item()?;
    let mut grads = g.backward(loss)?;
    let grads = bound.map(model_cfg, |v| {
        let shape = g.value(*v).shape().to_vec();
        grads.take(*v).unwrap_or_else(|| Tensor::zeros(&shape))
    });
    Ok((value, grads))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Parameters plus optimizer moments: everything a resumed run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub params: ModelParams,
    pub opt: OptimizerState,
}

impl TrainingState {
    pub fn new(params: ModelParams, model_cfg: &ModelConfig) -> Self {
        let opt = OptimizerState::new(&params, model_cfg);
        Self { params, opt }
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }
}

/// One optimizer step on the mean loss of `batch`.
///
/// Per-context gradients may be computed on several threads; they are summed
/// in batch order, so the update does not depend on the worker count.
pub fn train_step(
    batch: &[Context],
    state: &mut TrainingState,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(Error::contract("training batch is empty"));
    }
    let step = state.opt.step + 1;
    let results = per_context(batch, &state.params, model_cfg, cfg)?;

    let mut total_loss = 0.0;
    let mut grads = state.params.zeros_like(model_cfg);
    for (i, (loss, g)) in results.into_iter().enumerate() {
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                context: i,
                loss,
            });
        }
        total_loss += loss;
        for (acc, part) in grads.fields_mut().into_iter().zip(g.fields()) {
            acc.add_assign(part.1);
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for t in grads.fields_mut() {
        for v in t.data_mut() {
            *v *= inv;
        }
    }
    let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
    let lr = lr_schedule(step, cfg.warmup, cfg.peak_lr);
    cfg.adam
        .update(&mut state.params, &grads, &mut state.opt, lr);
    Ok(StepRecord {
        step,
        lr,
        loss: total_loss * inv,
        grad_norm,
    })
}

fn per_context(
    batch: &[Context],
    params: &ModelParams,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Vec<(f64, ModelParams)>> {
    let workers = cfg.workers.clamp(1, batch.len());
    if workers == 1 {
        return batch
            .iter()
            .map(|c| context_gradients(params, model_cfg, cfg.loss_mask, c))
            .collect();
    }
    let chunk = batch.len().div_ceil(workers);
    let chunks: Vec<Result<Vec<(f64, ModelParams)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = batch
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|c| context_gradients(params, model_cfg, cfg.loss_mask, c))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("gradient worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(batch.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Supplies the batch for a given step. Implementations must be pure
/// functions of the step so that a resumed run sees the same data.
pub trait BatchSource {
    fn batch(&self, step: u64, size: usize) -> Result<Vec<Context>>;
}

/// Runs steps `state.step() + 1 ..= until`, calling `after_step` once per
/// completed step.
pub fn run_training(
    state: &mut TrainingState,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    source: &dyn BatchSource,
    until: u64,
    mut after_step: impl FnMut(&TrainingState, &StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    let mut records = Vec::new();
    while state.step() < until {
        let step = state.step() + 1;
        let batch = source.batch(step, cfg.batch_size)?;
        let record = train_step(&batch, state, model_cfg, cfg)?;
        after_step(state, &record)?;
        records.push(record);
    }
    Ok(records)
}

/// Appends `step,lr,loss` rows, writing the header when the file is new.
pub struct MetricsLog {
    file: std::fs::File,
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        let exists = path.exists()
            && std::fs::metadata(path)
                .map(|m| m.len() > 0)
                .unwrap_or(false);
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::file(path, e))?;
        if !exists {
            writeln!(file, "step,lr,loss")?;
        }
        Ok(Self { file })
    }

    pub fn record(&mut self, r: &StepRecord) -> Result<()> {
        writeln!(self.file, "{},{:e},{:e}", r.step, r.lr, r.loss)?;
        Ok(())
    }
}

/// Reads back a metrics CSV, dropping rows past `max_step` (used on resume).
pub fn read_metrics(path: &Path) -> Result<Vec<(u64, f64, f64)>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec =
            rec.map_err(|e| Error::parse(format!("{}:{}", path.display(), i + 2), e.to_string()))?;
        let field = |k: usize| -> Result<&str> {
            rec.get(k).ok_or_else(|| {
                Error::parse(format!("{}:{}", path.display(), i + 2), "missing column")
            })
        };
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| {
                Error::parse(
                    format!("{}:{}", path.display(), i + 2),
                    format!("bad number `{s}`"),
                )
            })
        };
        let step = field(0)?
            .parse()
            .map_err(|_| Error::parse(format!("{}:{}", path.display(), i + 2), "bad step"))?;
        rows.push((step, num(field(1)?)?, num(field(2)?)?));
    }
    Ok(rows)
}
