//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]
// the oracles index explicitly to mirror the definitions they check
#![allow(clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsicf::model::{
    forecast, forecast_block, forward, forward_graph, Activation, ModelConfig, ModelParams,
    TokenizedContext,
};
use tsicf::tensor::{self, check_gradients, Tensor};
use tsicf::tokenize::{left_pad_history, pad_example, ExampleWindow, LayoutMode, Token};
use tsicf::train::{loss_graph, LossMaskPolicy, LossTargets};

/// Two layers, width 16, two heads, patches of 4, outputs of 4.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        patch_len: 4,
        horizon_len: 4,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_len: 12,
        max_examples: 4,
        activation: Activation::Relu,
    }
}

/// Weights large enough that every path carries a visible signal, with
/// random biases and gains so their gradients are exercised too.
pub fn lively_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in p.fields_mut() {
        let fan_in = if t.shape().len() == 2 {
            t.shape()[0]
        } else {
            1
        };
        let std = if t.shape().len() == 2 {
            1.7 / (fan_in as f64).sqrt()
        } else {
            0.3 * 1.7
        };
        for v in t.data_mut() {
            *v = rng.random_range(-1.0..1.0) * std;
        }
    }
    for t in [&mut p.final_norm_gain] {
        for v in t.data_mut() {
            *v += 1.0;
        }
    }
    for layer in &mut p.layers {
        for v in layer
            .attn_norm_gain
            .data_mut()
            .iter_mut()
            .chain(layer.ff_norm_gain.data_mut())
        {
            *v += 1.0;
        }
    }
    p
}

pub fn random_series(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let a = rng.random_range(0.5..2.0);
    let f = rng.random_range(0.1..0.8);
    let c = rng.random_range(-1.0..1.0);
    (0..len)
        .map(|t| c + a * (f * t as f64).sin() + rng.random_range(-0.3..0.3))
        .collect()
}

/// A window of `capacity` points holding a random-length real block that is
/// padded as short series are.
pub fn random_window(rng: &mut ChaCha8Rng, capacity: usize, patch_len: usize) -> ExampleWindow {
    let len = rng.random_range(1..=capacity);
    pad_example(&random_series(rng, len), capacity, patch_len).unwrap()
}

pub fn full_window(rng: &mut ChaCha8Rng, len: usize) -> ExampleWindow {
    ExampleWindow::from_real(random_series(rng, len)).unwrap()
}

/// Whether a patch may be attended to: its last point is real.
fn patch_eligible(mask: &[bool], p: usize, j: usize) -> bool {
    let patch = &mask[j * p..(j + 1) * p];
    !patch[p - 1] && patch.iter().any(|m| !m)
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    tensor::add_row(&tensor::matmul(x, w).unwrap(), b).unwrap()
}

fn act(x: &Tensor, a: Activation) -> Tensor {
    match a {
        Activation::Relu => tensor::relu(x),
        Activation::Gelu => tensor::gelu(x),
    }
}

fn block(x: &Tensor, b: &tsicf::model::ResidualBlock<Tensor>, a: Activation) -> Tensor {
    let h = act(&linear(x, &b.w_hidden, &b.b_hidden), a);
    let out = linear(&h, &b.w_out, &b.b_out);
    let skip = linear(x, &b.w_skip, &b.b_skip);
    tensor::add(&out, &skip).unwrap()
}

/// Forward pass for a single example with no separator, written directly
/// against the tensor kernels. Returns `(tokens x h)` predictions.
pub fn reference_forward(
    params: &ModelParams,
    cfg: &ModelConfig,
    window: &ExampleWindow,
) -> Tensor {
    let p = cfg.patch_len;
    let n = window.len().div_ceil(p);
    let mut values = window.values().to_vec();
    let mut mask = window.mask().to_vec();
    values.resize(n * p, 0.0);
    mask.resize(n * p, true);
    let rows: Vec<f64> = values
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| if m { 0.0 } else { v })
        .collect();
    let mut x = block(
        &Tensor::matrix(n, p, rows).unwrap(),
        &params.input,
        cfg.activation,
    );

    let mut blocked = vec![true; n * n];
    for q in 0..n {
        for k in 0..=q {
            blocked[q * n + k] = !patch_eligible(&mask, p, k);
        }
    }
    let dh = cfg.head_dim();
    for layer in &params.layers {
        let h = tensor::layer_norm(&x, &layer.attn_norm_gain, &layer.attn_norm_bias).unwrap();
        let q = tensor::matmul(&h, &layer.wq).unwrap();
        let k = tensor::matmul(&h, &layer.wk).unwrap();
        let v = tensor::matmul(&h, &layer.wv).unwrap();
        let mut heads = Vec::new();
        for head in 0..cfg.n_heads {
            let (lo, hi) = (head * dh, (head + 1) * dh);
            let qh = tensor::slice_cols(&q, lo, hi).unwrap();
            let kh = tensor::slice_cols(&k, lo, hi).unwrap();
            let vh = tensor::slice_cols(&v, lo, hi).unwrap();
            let s = tensor::matmul(&qh, &tensor::transpose(&kh).unwrap()).unwrap();
            let s = tensor::scale(&s, 1.0 / (dh as f64).sqrt());
            let s = tensor::masked_fill(&s, &blocked, f64::NEG_INFINITY).unwrap();
            let w = tensor::softmax_lastdim(&s);
            heads.push(tensor::matmul(&w, &vh).unwrap());
        }
        let merged = if heads.len() == 1 {
            heads.pop().unwrap()
        } else {
            tensor::concat_cols(&heads.iter().collect::<Vec<_>>()).unwrap()
        };
        let a = tensor::matmul(&merged, &layer.wo).unwrap();
        x = tensor::add(&x, &a).unwrap();
        let h = tensor::layer_norm(&x, &layer.ff_norm_gain, &layer.ff_norm_bias).unwrap();
        let f = act(&linear(&h, &layer.ff_w1, &layer.ff_b1), cfg.activation);
        let f = linear(&f, &layer.ff_w2, &layer.ff_b2);
        x = tensor::add(&x, &f).unwrap();
    }
    let x = tensor::layer_norm(&x, &params.final_norm_gain, &params.final_norm_bias).unwrap();
    block(&x, &params.output, cfg.activation)
}

/// History-only forecast of one output patch through the reference path:
/// truncate, standardize by the history, left-pad, read the last token.
pub fn reference_forecast(params: &ModelParams, cfg: &ModelConfig, history: &[f64]) -> Vec<f64> {
    let history = &history[history.len().saturating_sub(cfg.max_history())..];
    let n = history.len() as f64;
    let mean = history.iter().sum::<f64>() / n;
    let std = (history.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
        .sqrt()
        .max(1e-6);
    let scaled: Vec<f64> = history.iter().map(|v| (v - mean) / std).collect();
    let w = left_pad_history(&scaled, cfg.patch_len).unwrap();
    let out = reference_forward(params, cfg, &w);
    out.row(out.rows() - 1)
        .iter()
        .map(|v| v * std + mean)
        .collect()
}

/// Loss recomputed with explicit loops over examples, patches and horizon
/// coordinates.
pub fn brute_force_loss(
    preds: &[Vec<Vec<f64>>],
    windows: &[ExampleWindow],
    p: usize,
    h: usize,
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, w) in windows.iter().enumerate() {
        let patches = w.len().div_ceil(p);
        for j in 0..patches {
            count += 1;
            for c in 0..h {
                let pos = (j + 1) * p + c;
                if pos >= w.len() || w.mask()[pos] {
                    continue;
                }
                let d = preds[i][j][c] - w.values()[pos];
                total += d * d;
            }
        }
    }
    total / count as f64
}

pub fn brute_force_gm(pairs: &[(f64, f64)]) -> f64 {
    let mut product_logs = 0.0;
    let mut n = 0usize;
    for &(m, b) in pairs {
        if b > 0.0 {
            product_logs += m.ln() - b.ln();
            n += 1;
        }
    }
    (product_logs / n as f64).exp()
}

/// Two datasets per real granularity plus two synthetic ones, with series of
/// varied lengths (some shorter than `window_len`).
pub fn mixed_registry(window_len: usize, seed: u64) -> tsicf::contextgen::DatasetRegistry {
    use tsicf::contextgen::{Dataset, DatasetRegistry, Granularity, TimeSeries};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut registry = DatasetRegistry::new();
    for group in Granularity::REAL
        .into_iter()
        .chain([Granularity::Synthetic])
    {
        for d in 0..2 {
            let series = (0..rng.random_range(1..6))
                .map(|s| {
                    let len = rng.random_range(window_len / 2..window_len * 4);
                    TimeSeries::new(format!("s{s}"), random_series(&mut rng, len))
                })
                .collect();
            registry
                .add(Dataset::new(format!("{group}-{d}"), group, series))
                .unwrap();
        }
    }
    registry
}

pub fn rows_equal(a: &Tensor, b: &Tensor, rows: impl Iterator<Item = usize>) -> bool {
    rows.into_iter().all(|r| {
        a.row(r)
            .iter()
            .zip(b.row(r))
            .all(|(x, y)| x.to_bits() == y.to_bits())
    })
}

fn random_context(cfg: &ModelConfig, rng: &mut ChaCha8Rng, n: usize) -> Vec<ExampleWindow> {
    (0..n)
        .map(|_| random_window(rng, cfg.max_len, cfg.patch_len))
        .collect()
}

fn rebuild(windows: &[ExampleWindow], values: Vec<Vec<f64>>) -> Vec<ExampleWindow> {
    windows
        .iter()
        .zip(values)
        .map(|(w, v)| ExampleWindow::new(v, w.mask().to_vec()).unwrap())
        .collect()
}

/// Random weights, context, layout mode and position `j`; perturbs the real
/// points of every patch token after `j` and checks outputs up to `j` are
/// bit-identical.
pub fn causality_trial(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> bool {
    let params = lively_params(cfg, rng.random());
    let n = rng.random_range(1..=cfg.max_examples);
    let windows = random_context(cfg, rng, n);
    let mode = if rng.random() {
        LayoutMode::Train
    } else {
        LayoutMode::Infer
    };
    let (ctx, base) = forward(&params, cfg, &windows, mode).unwrap();
    let j = rng.random_range(0..ctx.layout.len());
    let p = cfg.patch_len;
    let mut values: Vec<Vec<f64>> = windows.iter().map(|w| w.values().to_vec()).collect();
    for token in &ctx.layout.tokens()[j + 1..] {
        if let Token::Patch { example, patch } = *token {
            for pos in patch * p..((patch + 1) * p).min(windows[example].len()) {
                if !windows[example].mask()[pos] {
                    values[example][pos] += rng.random_range(0.5..2.0);
                }
            }
        }
    }
    let (_, out) = forward(&params, cfg, &rebuild(&windows, values), mode).unwrap();
    rows_equal(&base, &out, 0..=j)
}

/// Replaces every padded value with noise; all outputs must be unchanged.
pub fn padding_trial(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> bool {
    let params = lively_params(cfg, rng.random());
    let windows = random_context(cfg, rng, cfg.max_examples);
    let values = windows
        .iter()
        .map(|w| {
            w.values()
                .iter()
                .zip(w.mask())
                .map(|(&v, &m)| if m { rng.random_range(-50.0..50.0) } else { v })
                .collect()
        })
        .collect();
    let (_, a) = forward(&params, cfg, &windows, LayoutMode::Train).unwrap();
    let (_, b) = forward(&params, cfg, &rebuild(&windows, values), LayoutMode::Train).unwrap();
    a.bit_eq(&b)
}

/// Rewrites the real points of ineligible patches; outputs at eligible
/// tokens must be unchanged. Redraws until a context has an ineligible patch.
pub fn ineligible_trial(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> bool {
    let params = lively_params(cfg, rng.random());
    loop {
        let windows = random_context(cfg, rng, cfg.max_examples);
        let (ctx, base) = forward(&params, cfg, &windows, LayoutMode::Train).unwrap();
        let eligible = ctx.layout.eligible().to_vec();
        if eligible.iter().all(|&e| e) {
            continue;
        }
        let p = cfg.patch_len;
        let mut values: Vec<Vec<f64>> = windows.iter().map(|w| w.values().to_vec()).collect();
        for (t, token) in ctx.layout.tokens().iter().enumerate() {
            if let Token::Patch { example, patch } = *token {
                if !eligible[t] {
                    for pos in patch * p..((patch + 1) * p).min(cfg.max_len) {
                        if !windows[example].mask()[pos] {
                            values[example][pos] = values[example][pos] * -3.0 + 1.0;
                        }
                    }
                }
            }
        }
        let (_, out) =
            forward(&params, cfg, &rebuild(&windows, values), LayoutMode::Train).unwrap();
        return rows_equal(&base, &out, (0..eligible.len()).filter(|&t| eligible[t]));
    }
}

/// A one-window context and a history-only forecast both equal the
/// separator-free reference path exactly.
pub fn single_example_trial(cfg: &ModelConfig, seed: u64, rng: &mut ChaCha8Rng) -> bool {
    let params = lively_params(cfg, seed);
    let w = random_window(rng, cfg.max_len, cfg.patch_len);
    let (_, out) = forward(&params, cfg, std::slice::from_ref(&w), LayoutMode::Infer).unwrap();
    let len = rng.random_range(1..2 * cfg.max_len);
    let history = random_series(rng, len);
    let got = forecast_block(&params, cfg, &history, &[]).unwrap();
    out.bit_eq(&reference_forward(&params, cfg, &w))
        && got == reference_forecast(&params, cfg, &history)
}

/// A `2h` forecast equals an `h` forecast followed by another `h` forecast
/// on the history extended with the first.
pub fn chained_forecast_trial(cfg: &ModelConfig, seed: u64, rng: &mut ChaCha8Rng) -> bool {
    let params = lively_params(cfg, seed);
    let len = rng.random_range(1..cfg.max_len + 3);
    let history = random_series(rng, len);
    let k = rng.random_range(0..cfg.max_examples);
    let examples: Vec<ExampleWindow> = (0..k).map(|_| full_window(rng, cfg.max_len)).collect();
    let h = cfg.horizon_len;
    let long = forecast(&params, cfg, &history, &examples, 2 * h).unwrap();
    let first = forecast(&params, cfg, &history, &examples, h).unwrap();
    let extended = [history.clone(), first.values.clone()].concat();
    let second = forecast(&params, cfg, &extended, &examples, h).unwrap();
    long.values == [first.values, second.values].concat()
        && long.rounds == [vec![0; h], vec![1; h]].concat()
}

/// Worst relative gradient error of the full forward pass plus loss on
/// three 12-point examples.
pub fn full_model_gradient_error(activation: Activation, eps: f64) -> f64 {
    let cfg = ModelConfig {
        activation,
        ..toy_config()
    };
    let params = lively_params(&cfg, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let windows: Vec<ExampleWindow> = (0..3).map(|_| full_window(&mut rng, 12)).collect();
    let ctx = TokenizedContext::new(&windows, &cfg, LayoutMode::Train).unwrap();
    let targets = LossTargets::build(&ctx, cfg.horizon_len, LossMaskPolicy::MaskPadded);
    let leaves: Vec<Tensor> = params
        .fields()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    check_gradients(
        |g, vars| {
            let mut it = vars.iter().copied();
            let bound = params.map(&cfg, |_| it.next().unwrap());
            let preds = forward_graph(g, &bound, &cfg, &ctx)?;
            loss_graph(g, preds, &targets)
        },
        &leaves,
        eps,
    )
    .unwrap()
}
