use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use tsicf::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint_with, SaveOptions};
use tsicf::contextgen::{
    load_registry, load_series, series_to_jsonl, DatasetRegistry, MixtureBatches, MixtureSampler,
    SeriesFormat,
};
use tsicf::eval::{
    ablate_num_examples, rolling_cases, rolling_eval, ForecastCase, Forecaster, ModelForecaster,
    Naive,
};
use tsicf::fsutil::write_atomic;
use tsicf::model::{forecast, init_separator, ModelConfig, ModelParams, TokenizedContext};
use tsicf::seed::derive;
use tsicf::synthetic::{disambiguation_suite, synthetic_pool, TaskKind};
use tsicf::tokenize::{left_pad_history, pad_example, ExampleWindow, LayoutMode, Token};
use tsicf::train::{read_metrics, run_training, MetricsLog, TrainingState};
use tsicf::{Error, Result};

use crate::config::RunConfig;

/// Six family files plus one file per disambiguation suite.
pub fn gen_data(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = cfg.out.join("data");
    std::fs::create_dir_all(&dir).map_err(|e| file_error(&dir, e))?;
    let mut written = Vec::new();
    for ds in synthetic_pool(&cfg.synthetic.pool(), derive(cfg.seed, "synthetic", 0))? {
        let path = dir.join(format!("{}.jsonl", ds.name));
        write_atomic(&path, series_to_jsonl(&ds.series).as_bytes())?;
        written.push(path);
    }
    for (i, tasks) in suites(cfg)?.into_iter().enumerate() {
        let mut text = String::new();
        for t in &tasks {
            text.push_str(&serde_json::to_string(t).expect("plain data serializes"));
            text.push('\n');
        }
        let path = dir.join(format!("{}.jsonl", TaskKind::ALL[i].name()));
        write_atomic(&path, text.as_bytes())?;
        written.push(path);
    }
    for p in &written {
        info!("wrote {}", p.display());
    }
    Ok(written)
}

fn suites(cfg: &RunConfig) -> Result<Vec<Vec<tsicf::synthetic::DisambiguationTask>>> {
    let s = &cfg.synthetic;
    TaskKind::ALL
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            disambiguation_suite(
                &[kind],
                s.tasks_per_kind,
                s.task_examples,
                &s.tasks,
                derive(cfg.seed, "suite", i as u64),
            )
        })
        .collect()
}

/// Missing inputs are file errors, reported before any heavy work.
fn require(path: &Path) -> Result<()> {
    match path.try_exists() {
        Ok(true) => Ok(()),
        Ok(false) => Err(file_error(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        )),
        Err(e) => Err(file_error(path, e)),
    }
}

fn file_error(path: &Path, e: std::io::Error) -> Error {
    Error::File {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Real datasets from the manifest plus the synthetic pool.
fn training_registry(cfg: &RunConfig) -> Result<DatasetRegistry> {
    let mut registry = match &cfg.registry {
        Some(path) => load_registry(path)?,
        None => DatasetRegistry::new(),
    };
    for ds in synthetic_pool(&cfg.synthetic.pool(), derive(cfg.seed, "synthetic", 0))? {
        registry.add(ds)?;
    }
    Ok(registry)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    /// Single-window contexts from scratch.
    Base,
    /// Multi-example contexts continued from a base checkpoint.
    Icf,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::Base => "base",
            Phase::Icf => "icf",
        }
    }
}

pub struct TrainArgs<'a> {
    pub init_from: Option<&'a Path>,
    pub resume: bool,
}

const CHECKPOINTS: &str = "checkpoints";
const FINAL: &str = "checkpoint";
const METRICS: &str = "metrics.csv";

fn step_dir(out: &Path, step: u64) -> PathBuf {
    out.join(CHECKPOINTS).join(format!("step-{step:08}"))
}

fn latest_checkpoint(out: &Path) -> Result<Option<PathBuf>> {
    let dir = out.join(CHECKPOINTS);
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(&dir).map_err(|e| file_error(&dir, e))? {
        let entry = entry?;
        let name = entry.file_name();
        let Some(step) = name
            .to_str()
            .and_then(|n| n.strip_prefix("step-"))
            .and_then(|n| n.parse::<u64>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| step > *b) {
            best = Some((step, entry.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Phase-1 training without `init_from`, phase-2 continued training with it.
/// Returns the final checkpoint directory.
pub fn train(cfg: &RunConfig, args: &TrainArgs) -> Result<PathBuf> {
    let out = &cfg.out;
    if let Some(p) = args.init_from {
        require(p)?;
    }
    let resume_from = if args.resume {
        let latest = latest_checkpoint(out)?.ok_or_else(|| {
            Error::Validation(format!(
                "--resume: no checkpoint under {}",
                out.join(CHECKPOINTS).display()
            ))
        })?;
        Some(latest)
    } else {
        None
    };

    let (phase, state) = match &resume_from {
        Some(path) => {
            let ckpt = load_checkpoint(path, 0)?;
            if ckpt.config != cfg.model {
                return Err(Error::Validation(format!(
                    "{}: model configuration differs from the config file",
                    path.display()
                )));
            }
            let phase = match ckpt.meta.get("phase").map(String::as_str) {
                Some("icf") => Phase::Icf,
                Some("base") => Phase::Base,
                other => {
                    return Err(Error::Validation(format!(
                        "{}: unknown training phase {other:?}",
                        path.display()
                    )))
                }
            };
            if ckpt.optimizer.is_none() || !ckpt.has_separator {
                return Err(Error::Validation(format!(
                    "{}: not a resumable checkpoint",
                    path.display()
                )));
            }
            info!("resuming {} training from {}", phase.name(), path.display());
            (phase, ckpt.into_training_state())
        }
        None => match args.init_from {
            Some(path) => {
                let mut ckpt =
                    load_checkpoint_for(path, &cfg.model, derive(cfg.seed, "separator", 0))?;
                if ckpt.has_separator {
                    ckpt.params.separator =
                        init_separator(&cfg.model, derive(cfg.seed, "separator", 0));
                }
                info!(
                    "continued training from {}; separator freshly initialized",
                    path.display()
                );
                (Phase::Icf, TrainingState::new(ckpt.params, &cfg.model))
            }
            None => (
                Phase::Base,
                TrainingState::new(
                    ModelParams::init(&cfg.model, derive(cfg.seed, "init", 0)),
                    &cfg.model,
                ),
            ),
        },
    };

    let n = match phase {
        Phase::Base => 1,
        Phase::Icf => cfg.train.context_examples,
    };
    if n > cfg.model.max_examples {
        return Err(Error::Validation(format!(
            "train.context_examples is {n}, the model holds at most {}",
            cfg.model.max_examples
        )));
    }
    let registry = training_registry(cfg)?;
    let sampler = MixtureSampler::new(
        &registry,
        cfg.mixture,
        n,
        cfg.model.max_len,
        derive(cfg.seed, "mixture", phase as u64),
    )?;
    let source = MixtureBatches {
        sampler,
        window_len: cfg.model.max_len,
        patch_len: cfg.model.patch_len,
    };

    std::fs::create_dir_all(out).map_err(|e| file_error(out, e))?;
    let metrics_path = out.join(METRICS);
    if resume_from.is_some() && metrics_path.exists() {
        let kept: Vec<_> = read_metrics(&metrics_path)?
            .into_iter()
            .filter(|r| r.0 <= state.step())
            .collect();
        let mut text = String::from("step,lr,loss\n");
        for (s, lr, loss) in kept {
            writeln!(text, "{s},{lr:e},{loss:e}").unwrap();
        }
        write_atomic(&metrics_path, text.as_bytes())?;
    } else if metrics_path.exists() {
        std::fs::remove_file(&metrics_path).map_err(|e| file_error(&metrics_path, e))?;
    }
    let mut metrics = MetricsLog::open(&metrics_path)?;

    let mut meta = BTreeMap::new();
    meta.insert("phase".to_string(), phase.name().to_string());
    meta.insert("seed".to_string(), cfg.seed.to_string());
    let save = |state: &TrainingState, path: &Path, omit_separator: bool| -> Result<()> {
        save_checkpoint_with(
            path,
            &state.params,
            &cfg.model,
            SaveOptions {
                omit_separator,
                // a checkpoint without the separator is not a resume point
                optimizer: (!omit_separator).then_some(&state.opt),
                meta: &meta,
            },
        )
    };

    let mut state = state;
    let total = cfg.train.steps;
    let report_every = (total / 20).max(1);
    info!(
        "{} training: steps {}..={total}, {n} window(s) per context, {} parameters",
        phase.name(),
        state.step() + 1,
        state.params.num_values()
    );
    let result = run_training(
        &mut state,
        &cfg.model,
        &cfg.train,
        &source,
        total,
        |s, r| {
            metrics.record(r)?;
            if r.step % report_every == 0 {
                info!(
                    "step {} lr {:.2e} loss {:.5} grad norm {:.3}",
                    r.step, r.lr, r.loss, r.grad_norm
                );
            }
            let every = cfg.train.checkpoint_every;
            if every > 0 && r.step % every == 0 {
                save(s, &step_dir(out, r.step), false)?;
            }
            Ok(())
        },
    );
    if let Err(e) = result {
        if let Some(last) = latest_checkpoint(out)? {
            warn!(
                "training aborted; last good checkpoint is {}",
                last.display()
            );
        }
        return Err(e);
    }
    let final_dir = out.join(FINAL);
    save(&state, &final_dir, phase == Phase::Base)?;
    info!("wrote {}", final_dir.display());
    Ok(final_dir)
}

#[derive(Serialize)]
struct LayoutToken {
    position: usize,
    #[serde(flatten)]
    token: Token,
    eligible: bool,
}

#[derive(Serialize)]
struct RoundLayout {
    round: usize,
    history_points: usize,
    readout: Option<usize>,
    tokens: Vec<LayoutToken>,
}

#[derive(Serialize)]
struct LayoutRecord {
    checkpoint: String,
    horizon: usize,
    examples: usize,
    rounds: Vec<RoundLayout>,
}

fn read_one_file(path: &Path) -> Result<Vec<tsicf::contextgen::TimeSeries>> {
    require(path)?;
    load_series(path, SeriesFormat::from_path(path)?)
}

pub struct ForecastArgs<'a> {
    pub checkpoint: &'a Path,
    pub history: &'a Path,
    pub examples: Option<&'a Path>,
    pub horizon: Option<usize>,
}

/// Writes `forecast.csv` and the context layout of every autoregressive
/// round to `forecast.layout.json`.
pub fn forecast_cmd(out: &Path, args: &ForecastArgs) -> Result<(PathBuf, PathBuf)> {
    require(args.checkpoint)?;
    let history = read_one_file(args.history)?;
    let history = match history.as_slice() {
        [one] => one.values.clone(),
        _ => {
            return Err(Error::Validation(format!(
                "{}: expected exactly one history series, found {}",
                args.history.display(),
                history.len()
            )))
        }
    };
    let raw_examples = match args.examples {
        Some(p) => read_one_file(p)?,
        None => Vec::new(),
    };
    let ckpt = load_checkpoint(args.checkpoint, 0)?;
    let cfg = &ckpt.config;
    let examples = raw_examples
        .iter()
        .map(|s| {
            if s.values.len() > cfg.max_len {
                return Err(Error::Capacity {
                    what: "example length",
                    got: s.values.len(),
                    max: cfg.max_len,
                });
            }
            pad_example(&s.values, cfg.max_len, cfg.patch_len)
        })
        .collect::<Result<Vec<_>>>()?;
    let horizon = args.horizon.unwrap_or(cfg.horizon_len);
    let fc = forecast(&ckpt.params, cfg, &history, &examples, horizon)?;

    let mut csv = String::from("step,value,round\n");
    for (i, (v, r)) in fc.values.iter().zip(&fc.rounds).enumerate() {
        writeln!(csv, "{},{v},{r}", i + 1).unwrap();
    }
    let rounds = fc.rounds.last().map_or(0, |r| r + 1);
    let mut layouts = Vec::with_capacity(rounds);
    for round in 0..rounds {
        let mut extended = history.clone();
        extended.extend(&fc.values[..round * cfg.horizon_len]);
        layouts.push(layout_of(cfg, &extended, &examples, round)?);
    }
    let record = LayoutRecord {
        checkpoint: args.checkpoint.display().to_string(),
        horizon,
        examples: examples.len(),
        rounds: layouts,
    };
    std::fs::create_dir_all(out).map_err(|e| file_error(out, e))?;
    let csv_path = out.join("forecast.csv");
    let layout_path = out.join("forecast.layout.json");
    write_atomic(&csv_path, csv.as_bytes())?;
    let json = serde_json::to_string_pretty(&record).expect("plain data serializes");
    write_atomic(&layout_path, json.as_bytes())?;
    Ok((csv_path, layout_path))
}

fn layout_of(
    cfg: &ModelConfig,
    history: &[f64],
    examples: &[ExampleWindow],
    round: usize,
) -> Result<RoundLayout> {
    let kept = &history[history.len().saturating_sub(cfg.max_history())..];
    let mut windows = examples.to_vec();
    windows.push(left_pad_history(kept, cfg.patch_len)?);
    let ctx = TokenizedContext::new(&windows, cfg, LayoutMode::Infer)?;
    let layout = &ctx.layout;
    Ok(RoundLayout {
        round,
        history_points: kept.len(),
        readout: layout.readout_position(),
        tokens: layout
            .tokens()
            .iter()
            .zip(layout.eligible())
            .enumerate()
            .map(|(position, (&token, &eligible))| LayoutToken {
                position,
                token,
                eligible,
            })
            .collect(),
    })
}

fn model_or_naive<'a>(
    checkpoint: Option<&Path>,
    naive: bool,
    cfg: &'a RunConfig,
    holder: &'a mut Option<(ModelParams, ModelConfig)>,
) -> Result<Box<dyn Forecaster + 'a>> {
    if naive {
        return Ok(Box::new(Naive));
    }
    let path = checkpoint.ok_or_else(|| {
        Error::Validation("a --checkpoint is required unless --baseline naive is given".into())
    })?;
    require(path)?;
    let ckpt = load_checkpoint(path, derive(cfg.seed, "separator", 0))?;
    let (params, config) = holder.insert((ckpt.params, ckpt.config));
    Ok(Box::new(ModelForecaster { params, config }))
}

/// Rolling evaluation of every configured task; writes `eval.csv`.
pub fn eval_cmd(cfg: &RunConfig, checkpoint: Option<&Path>, naive: bool) -> Result<PathBuf> {
    if cfg.eval.is_empty() {
        return Err(Error::Validation(
            "no evaluation tasks ([[eval]] is empty)".into(),
        ));
    }
    let registry = match &cfg.registry {
        Some(p) => load_registry(p)?,
        None => {
            return Err(Error::Validation(
                "evaluation needs a `registry` manifest".into(),
            ))
        }
    };
    for t in &cfg.eval {
        if registry.get(&t.dataset).is_none() {
            return Err(Error::Validation(format!(
                "eval: unknown dataset `{}`",
                t.dataset
            )));
        }
    }
    let mut holder = None;
    let f = model_or_naive(checkpoint, naive, cfg, &mut holder)?;
    let report = rolling_eval(f.as_ref(), &cfg.eval, &registry, cfg.train.workers)?;
    for w in &report.warnings {
        warn!("{w}");
    }
    if let Some(gm) = &report.gm {
        info!(
            "geometric mean scaled MAE {:.4} (se {:.4}) over {} datasets",
            gm.gm, gm.std_err, gm.used
        );
    }
    let path = cfg.out.join("eval.csv");
    std::fs::create_dir_all(&cfg.out).map_err(|e| file_error(&cfg.out, e))?;
    write_atomic(&path, report.to_csv().as_bytes())?;
    Ok(path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum AblationCases {
    /// The synthetic disambiguation suites.
    Suite,
    /// Rolling windows of the configured evaluation tasks.
    Tasks,
}

/// MAE for every configured k; writes `ablation.csv`.
pub fn ablate_cmd(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    naive: bool,
    on: AblationCases,
) -> Result<PathBuf> {
    let ks = &cfg.ablation.ks;
    if ks.is_empty() {
        return Err(Error::Validation("ablation.ks is empty".into()));
    }
    let top = *ks.iter().max().expect("non-empty");
    let cases: Vec<ForecastCase> = match on {
        AblationCases::Suite => {
            if cfg.synthetic.task_examples < top {
                return Err(Error::Validation(format!(
                    "synthetic.task_examples is {}, ablation needs {top}",
                    cfg.synthetic.task_examples
                )));
            }
            suites(cfg)?
                .iter()
                .flatten()
                .map(ForecastCase::from_task)
                .collect::<Result<_>>()?
        }
        AblationCases::Tasks => {
            if cfg.eval.is_empty() {
                return Err(Error::Validation(
                    "no evaluation tasks ([[eval]] is empty)".into(),
                ));
            }
            let registry = match &cfg.registry {
                Some(p) => load_registry(p)?,
                None => {
                    return Err(Error::Validation(
                        "ablation on tasks needs a `registry` manifest".into(),
                    ))
                }
            };
            let mut cases = Vec::new();
            for t in &cfg.eval {
                let (c, warnings) = rolling_cases(&registry, t, top)?;
                for w in warnings {
                    warn!("{w}");
                }
                let before = c.len();
                let usable: Vec<_> = c.into_iter().filter(|c| c.pool.len() >= top).collect();
                if usable.len() < before {
                    warn!(
                        "dataset `{}`: {} of {before} windows lack {top} examples; skipped",
                        t.dataset,
                        before - usable.len()
                    );
                }
                cases.extend(usable);
            }
            cases
        }
    };
    let mut holder = None;
    let f = model_or_naive(checkpoint, naive, cfg, &mut holder)?;
    let report = ablate_num_examples(f.as_ref(), &cases, ks, cfg.train.workers)?;
    for (k, m) in &report.summary {
        info!("k = {k}: mean MAE {m:.5}");
    }
    let path = cfg.out.join("ablation.csv");
    std::fs::create_dir_all(&cfg.out).map_err(|e| file_error(&cfg.out, e))?;
    write_atomic(&path, report.to_csv().as_bytes())?;
    Ok(path)
}
