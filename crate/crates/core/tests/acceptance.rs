//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsicf::checkpoint::{load_checkpoint, save_checkpoint_with, SaveOptions};
use tsicf::contextgen::{
    enumerate_windows, sample_contexts, Granularity, Grouping, MixtureBatches, MixtureSampler,
    MixtureWeights, POOL_FACTOR,
};
use tsicf::eval::{
    ablate_num_examples, scaled_mae_gm, AblationReport, ForecastCase, ModelForecaster,
};
use tsicf::model::{init_separator, Activation, ModelConfig, ModelParams, TokenizedContext};
use tsicf::synthetic::{disambiguation_suite, synthetic_pool, PoolConfig, TaskKind, TaskParams};
use tsicf::tensor::Tensor;
use tsicf::tokenize::{ExampleWindow, LayoutMode, Token};
use tsicf::train::{
    context_loss, run_training, LossMaskPolicy, LossTargets, StepRecord, TrainConfig, TrainingState,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, budget_secs: u64) -> bool {
    elapsed <= Duration::from_secs(budget_secs)
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let err = full_model_gradient_error(Activation::Relu, 3e-4);
    let elapsed = t.elapsed();
    outcome(
        err < 1e-5 && within(elapsed, 60),
        format!(
            "max relative error {err:.3e} (< 1e-5), {:.1}s (< 60s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn causality_and_masking() -> Outcome {
    let t = Instant::now();
    let cfg = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let trials = 200;
    let causal = (0..trials)
        .filter(|_| causality_trial(&cfg, &mut rng))
        .count();
    let padded = (0..trials)
        .filter(|_| padding_trial(&cfg, &mut rng))
        .count();
    let ineligible = (0..trials)
        .filter(|_| ineligible_trial(&cfg, &mut rng))
        .count();
    let elapsed = t.elapsed();
    outcome(
        causal == trials && padded == trials && ineligible == trials && within(elapsed, 60),
        format!(
            "causal {causal}/{trials}, padded {padded}/{trials}, ineligible {ineligible}/{trials} bit-identical, {:.1}s (< 60s)",
            elapsed.as_secs_f64()
        ),
    )
}

/// Desk model trained on the synthetic mixture, shared by the disambiguation
/// and ablation criteria.
struct Trained {
    params: ModelParams,
    config: ModelConfig,
    train_time: Duration,
    final_loss: f64,
}

const EXAMPLES_PER_CONTEXT: usize = 8;

fn train_desk_model() -> Trained {
    let config = ModelConfig::desk();
    let mut registry = tsicf::contextgen::DatasetRegistry::new();
    for d in synthetic_pool(&PoolConfig::default(), 1).unwrap() {
        registry.add(d).unwrap();
    }
    let weights = MixtureWeights {
        synthetic: 1.0,
        ..MixtureWeights::default()
    };
    let n = EXAMPLES_PER_CONTEXT + 1;
    let source = MixtureBatches {
        sampler: MixtureSampler::new(&registry, weights, n, config.max_len, 2).unwrap(),
        window_len: config.max_len,
        patch_len: config.patch_len,
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get().min(8));
    let train = TrainConfig {
        steps: 5000,
        context_examples: n,
        workers,
        ..TrainConfig::default()
    };
    let mut state = TrainingState::new(ModelParams::init(&config, 3), &config);
    let t = Instant::now();
    let mut window = Vec::new();
    let records = run_training(&mut state, &config, &train, &source, train.steps, |_, r| {
        window.push(r.loss);
        if r.step % 1000 == 0 {
            println!(
                "    step {:>5}  mean loss {:>10.4}  {:.0}s",
                r.step,
                window.iter().sum::<f64>() / window.len() as f64,
                t.elapsed().as_secs_f64()
            );
            window.clear();
        }
        Ok(())
    })
    .unwrap();
    let tail = &records[records.len() - 100..];
    Trained {
        params: state.params,
        config,
        train_time: t.elapsed(),
        final_loss: tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64,
    }
}

fn suite_cases() -> (Vec<String>, Vec<ForecastCase>) {
    let tasks = disambiguation_suite(
        &TaskKind::ALL,
        100,
        EXAMPLES_PER_CONTEXT,
        &TaskParams::default(),
        99,
    )
    .unwrap();
    let ids = tasks.iter().map(|t| t.id.clone()).collect();
    let cases = tasks
        .iter()
        .map(|t| ForecastCase::from_task(t).unwrap())
        .collect();
    (ids, cases)
}

fn ablate(trained: &Trained, cases: &[ForecastCase]) -> AblationReport {
    let f = ModelForecaster {
        params: &trained.params,
        config: &trained.config,
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get().min(8));
    ablate_num_examples(&f, cases, &[0, 1, 4, 8], workers).unwrap()
}

fn disambiguation(
    trained: &Trained,
    ids: &[String],
    cases: &[ForecastCase],
    report: &AblationReport,
) -> Outcome {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (k0, k4) = (&report.case_errors[0], &report.case_errors[2]);
    let (m0, m4) = (mean(k0), mean(k4));
    let reduction = 1.0 - m4 / m0;
    let pass = reduction >= 0.20 && within(trained.train_time, 30 * 60);
    if !pass {
        println!("    paired per-task MAE (k=0 vs k=4):");
        println!("    task,kind,mae_k0,mae_k4");
        for (i, c) in cases.iter().enumerate() {
            println!("    {},{},{:.6},{:.6}", ids[i], c.dataset, k0[i], k4[i]);
        }
    }
    outcome(
        pass,
        format!(
            "{} paired tasks, mean MAE k=0 {m0:.4} -> k=4 {m4:.4}, reduction {:.1}% (>= 20%), \
             training {:.0}s (< 1800s), final loss {:.3}",
            cases.len(),
            100.0 * reduction,
            trained.train_time.as_secs_f64(),
            trained.final_loss
        ),
    )
}

fn monotonicity(report: &AblationReport, eval_time: Duration) -> Outcome {
    let s = &report.summary;
    let ok = s.windows(2).all(|w| w[1].1 <= w[0].1 * 1.02);
    let listing: Vec<String> = s.iter().map(|(k, m)| format!("k={k}: {m:.4}")).collect();
    outcome(
        ok && within(eval_time, 600),
        format!(
            "{} (each <= previous + 2%), eval {:.1}s (< 600s)",
            listing.join(", "),
            eval_time.as_secs_f64()
        ),
    )
}

fn metric_oracles() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_gm: f64 = 0.0;
    let mut worst_loss: f64 = 0.0;
    let trials = 1000;
    for _ in 0..trials {
        let pairs: Vec<(f64, f64)> = (0..rng.random_range(1..20))
            .map(|_| {
                let naive = 10f64.powf(rng.random_range(-3.0..3.0));
                (naive * rng.random_range(0.05..3.0), naive)
            })
            .collect();
        let gm = scaled_mae_gm(&pairs).unwrap().gm;
        let slow = brute_force_gm(&pairs);
        worst_gm = worst_gm.max((gm - slow).abs() / slow);

        let cfg = toy_config();
        let n = rng.random_range(1..=cfg.max_examples);
        let windows: Vec<ExampleWindow> = (0..n)
            .map(|_| random_window(&mut rng, cfg.max_len, cfg.patch_len))
            .collect();
        let ctx = TokenizedContext::new(&windows, &cfg, LayoutMode::Train).unwrap();
        let rows = ctx.layout.len();
        let data = (0..rows * cfg.horizon_len)
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        let preds = Tensor::matrix(rows, cfg.horizon_len, data).unwrap();
        let targets = LossTargets::build(&ctx, cfg.horizon_len, LossMaskPolicy::MaskPadded);
        let fast = context_loss(&preds, &targets).unwrap();
        let mut nested = vec![Vec::new(); n];
        for (t, token) in ctx.layout.tokens().iter().enumerate() {
            if let Token::Patch { example, .. } = *token {
                nested[example].push(preds.row(t).to_vec());
            }
        }
        let slow = brute_force_loss(&nested, &windows, cfg.patch_len, cfg.horizon_len);
        worst_loss = worst_loss.max((fast - slow).abs() / slow.abs().max(1.0));
    }
    let elapsed = t.elapsed();
    outcome(
        worst_gm <= 1e-12 && worst_loss <= 1e-12 && within(elapsed, 10),
        format!(
            "{trials} trials: gm err {worst_gm:.1e}, loss err {worst_loss:.1e} (<= 1e-12), {:.2}s (< 10s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn pipeline_counting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut window_ok = 0;
    for _ in 0..500 {
        let m = rng.random_range(1..5000);
        let t = rng.random_range(1..500);
        let expect = if m >= t { m - t + 1 } else { 1 };
        window_ok += usize::from(enumerate_windows(m, t).unwrap().len() == expect);
    }

    let registry = mixed_registry(16, 7);
    let mut pool_ok = true;
    for ds in registry.datasets() {
        let windows: usize = ds
            .series
            .iter()
            .map(|s| enumerate_windows(s.values.len(), 16).unwrap().len())
            .sum();
        let pool = sample_contexts(&registry, &ds.name, 4, 16, None, Grouping::Dataset, 1).unwrap();
        pool_ok &= pool.len() == POOL_FACTOR * windows;
    }

    let sampler = MixtureSampler::new(&registry, MixtureWeights::default(), 2, 16, 8).unwrap();
    let draws = 100_000;
    let mut by_group: BTreeMap<Granularity, usize> = BTreeMap::new();
    let mut series = 0usize;
    for spec in sampler.iter().take(draws) {
        *by_group
            .entry(registry.get(&spec.dataset).unwrap().group)
            .or_default() += 1;
        series += usize::from(spec.kind == Grouping::Series);
    }
    let freq = |c: usize| c as f64 / draws as f64;
    let mut worst: f64 = (freq(series) - 0.5).abs();
    let mut listing = vec![format!("series-level {:.4}", freq(series))];
    for (g, &c) in &by_group {
        let target = if *g == Granularity::Synthetic {
            0.1
        } else {
            0.9 / 4.0
        };
        worst = worst.max((freq(c) - target).abs());
        listing.push(format!("{g} {:.4}", freq(c)));
    }
    outcome(
        window_ok == 500 && pool_ok && worst <= 0.01 && by_group.len() == 5,
        format!(
            "window counts {window_ok}/500, pool sizes 20N {}, mixture max deviation {worst:.4} (<= 0.01): {}",
            if pool_ok { "ok" } else { "wrong" },
            listing.join(", ")
        ),
    )
}

fn autoregressive_consistency() -> Outcome {
    let cfg = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ok = (0..50u64)
        .filter(|&s| chained_forecast_trial(&cfg, s, &mut rng))
        .count();
    outcome(
        ok == 50,
        format!("{ok}/50 contexts: 2h forecast equals two chained h forecasts exactly"),
    )
}

fn degenerate_equivalence() -> Outcome {
    let cfg = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ok = (0..50u64)
        .filter(|&s| single_example_trial(&cfg, s, &mut rng))
        .count();
    outcome(
        ok == 50,
        format!(
            "{ok}/50 weight draws: single-example path equals separator-free reference exactly"
        ),
    )
}

fn checkpoints() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config();
    let mut notes = Vec::new();

    let params = lively_params(&cfg, 9);
    let meta = BTreeMap::new();
    let full = dir.path().join("full");
    save_checkpoint_with(
        &full,
        &params,
        &cfg,
        SaveOptions {
            omit_separator: false,
            optimizer: None,
            meta: &meta,
        },
    )
    .unwrap();
    let back = load_checkpoint(&full, 0).unwrap();
    let exact = back
        .params
        .fields()
        .iter()
        .zip(params.fields())
        .all(|((_, a), (_, b))| a.bit_eq(b));
    notes.push(format!(
        "round trip {}",
        if exact { "bit-exact" } else { "differs" }
    ));

    let base = dir.path().join("base");
    save_checkpoint_with(
        &base,
        &params,
        &cfg,
        SaveOptions {
            omit_separator: true,
            optimizer: None,
            meta: &meta,
        },
    )
    .unwrap();
    let icf = load_checkpoint(&base, 77).unwrap();
    let mut expect = params.clone();
    expect.separator = init_separator(&cfg, 77);
    let only_sigma =
        !icf.has_separator && icf.params == expect && icf.params.separator != params.separator;
    notes.push(format!(
        "base->ICF {}",
        if only_sigma {
            "initializes only the separator"
        } else {
            "wrong"
        }
    ));

    let registry = mixed_registry(cfg.max_len, 10);
    let source = MixtureBatches {
        sampler: MixtureSampler::new(&registry, MixtureWeights::default(), 3, cfg.max_len, 4)
            .unwrap(),
        window_len: cfg.max_len,
        patch_len: cfg.patch_len,
    };
    let train = TrainConfig {
        steps: 60,
        warmup: 10,
        workers: 2,
        ..TrainConfig::default()
    };
    let fresh = || TrainingState::new(ModelParams::init(&cfg, 5), &cfg);
    let curve = |r: &[StepRecord]| r.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();

    let mut whole = fresh();
    let straight = run_training(&mut whole, &cfg, &train, &source, 60, |_, _| Ok(())).unwrap();

    let mut first = fresh();
    let mut resumed = run_training(&mut first, &cfg, &train, &source, 25, |_, _| Ok(())).unwrap();
    let mid = dir.path().join("mid");
    save_checkpoint_with(
        &mid,
        &first.params,
        &cfg,
        SaveOptions {
            omit_separator: false,
            optimizer: Some(&first.opt),
            meta: &meta,
        },
    )
    .unwrap();
    drop(first);
    let mut second = load_checkpoint(&mid, 0).unwrap().into_training_state();
    resumed.extend(run_training(&mut second, &cfg, &train, &source, 60, |_, _| Ok(())).unwrap());
    let same = curve(&straight) == curve(&resumed) && whole == second;
    notes.push(format!(
        "resume at step 25 of 60 {}",
        if same {
            "reproduces the loss curve exactly"
        } else {
            "diverges"
        }
    ));

    outcome(exact && only_sigma && same, notes.join("; "))
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut run = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let o = f();
        println!(
            "{} criterion {id} ({name}): {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((id, name, o));
    };
    run(1, "gradient correctness", &mut gradient_correctness);
    run(2, "causality and masking", &mut causality_and_masking);

    println!("    training desk model for criteria 3 and 4");
    let trained = train_desk_model();
    let (ids, cases) = suite_cases();
    let t = Instant::now();
    let report = ablate(&trained, &cases);
    let eval_time = t.elapsed();
    run(3, "disambiguation", &mut || {
        disambiguation(&trained, &ids, &cases, &report)
    });
    run(4, "ablation monotonicity", &mut || {
        monotonicity(&report, eval_time)
    });

    run(5, "metric oracles", &mut metric_oracles);
    run(6, "pipeline counting", &mut pipeline_counting);
    run(
        7,
        "autoregressive consistency",
        &mut autoregressive_consistency,
    );
    run(8, "degenerate equivalence", &mut degenerate_equivalence);
    run(9, "checkpoints", &mut checkpoints);

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", results.len());
    } else {
        println!("acceptance: FAILED criteria {failed:?}");
        std::process::exit(1);
    }
}
