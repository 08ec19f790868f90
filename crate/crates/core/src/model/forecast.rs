use super::{forward, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tokenize::{left_pad_history, ExampleWindow, LayoutMode};

/// Lower bound on the scaler's standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

/// Context-level affine normalization fitted on the target's real points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scaler {
    pub mean: f64,
    pub std: f64,
}

impl Scaler {
    pub fn fit(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: 0.0,
                std: 1.0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt().max(STD_FLOOR),
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }

    pub fn apply_window(&self, w: &ExampleWindow) -> ExampleWindow {
        w.map_real(|v| self.apply(v))
    }
}

/// A multi-step point forecast.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecast {
    pub values: Vec<f64>,
    /// Autoregressive round (0-based) that produced each value.
    pub rounds: Vec<usize>,
}

fn check_inputs(cfg: &ModelConfig, history: &[f64], examples: &[ExampleWindow]) -> Result<()> {
    if history.is_empty() {
        return Err(Error::contract("forecast needs a non-empty history"));
    }
    if examples.len() + 1 > cfg.max_examples {
        return Err(Error::Capacity {
            what: "number of in-context examples",
            got: examples.len(),
            max: cfg.max_examples - 1,
        });
    }
    if let Some(w) = examples.iter().find(|w| w.len() > cfg.max_len) {
        return Err(Error::Capacity {
            what: "example length",
            got: w.len(),
            max: cfg.max_len,
        });
    }
    Ok(())
}

/// One forward pass: the next `h` points after `history`.
///
/// The history is cut to its last [`ModelConfig::max_history`] points and
/// left-padded to whole patches. Every window in the context is standardized
/// with the history's mean and standard deviation; the read-out is the last
/// eligible token of the history, mapped back to the original scale.
pub fn forecast_block(
    params: &ModelParams,
    cfg: &ModelConfig,
    history: &[f64],
    examples: &[ExampleWindow],
) -> Result<Vec<f64>> {
    check_inputs(cfg, history, examples)?;
    let start = history.len().saturating_sub(cfg.max_history());
    let history = &history[start..];
    let scaler = Scaler::fit(history);
    let mut windows: Vec<ExampleWindow> = examples.iter().map(|w| scaler.apply_window(w)).collect();
    let target = left_pad_history(history, cfg.patch_len)?;
    windows.push(scaler.apply_window(&target));
    let (ctx, preds) = forward(params, cfg, &windows, LayoutMode::Infer)?;
    let row = ctx
        .layout
        .readout_position()
        .ok_or_else(|| Error::contract("target history has no eligible patch"))?;
    Ok(preds.row(row).iter().map(|&v| scaler.invert(v)).collect())
}

/// Forecasts `horizon` points, feeding each `h`-point block back into the
/// history as observed data until enough points exist, then truncating.
pub fn forecast(
    params: &ModelParams,
    cfg: &ModelConfig,
    history: &[f64],
    examples: &[ExampleWindow],
    horizon: usize,
) -> Result<Forecast> {
    if horizon == 0 {
        return Err(Error::contract("forecast horizon must be at least 1"));
    }
    check_inputs(cfg, history, examples)?;
    let mut extended = history.to_vec();
    let mut values = Vec::with_capacity(horizon);
    let mut rounds = Vec::with_capacity(horizon);
    let mut round = 0;
    while values.len() < horizon {
        let block = forecast_block(params, cfg, &extended, examples)?;
        let take = block.len().min(horizon - values.len());
        values.extend_from_slice(&block[..take]);
        rounds.extend(std::iter::repeat_n(round, take));
        extended.extend_from_slice(&block);
        round += 1;
    }
    Ok(Forecast { values, rounds })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaler_round_trips_and_floors() {
        let s = Scaler::fit(&[1.0, 2.0, 3.0]);
        assert!((s.invert(s.apply(7.5)) - 7.5).abs() < 1e-12);
        let flat = Scaler::fit(&[4.0; 5]);
        assert_eq!(flat.std, STD_FLOOR);
        assert_eq!(flat.mean, 4.0);
    }

    #[test]
    fn input_errors() {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 8,
            ..ModelConfig::desk()
        };
        let params = ModelParams::init(&cfg, 0);
        assert!(matches!(
            forecast(&params, &cfg, &[], &[], 4),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            forecast(&params, &cfg, &[1.0], &[], 0),
            Err(Error::Contract(_))
        ));
        let ex = ExampleWindow::from_real(vec![1.0; 8]).unwrap();
        let too_many = vec![ex; cfg.max_examples];
        assert!(matches!(
            forecast(&params, &cfg, &[1.0], &too_many, 1),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn one_round_per_output_patch() {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 8,
            ..ModelConfig::desk()
        };
        let params = ModelParams::init(&cfg, 3);
        let history: Vec<f64> = (0..20).map(|t| (t as f64 * 0.3).sin()).collect();
        let f = forecast(&params, &cfg, &history, &[], cfg.horizon_len).unwrap();
        assert_eq!(f.values.len(), cfg.horizon_len);
        assert!(f.rounds.iter().all(|&r| r == 0));
        let f = forecast(&params, &cfg, &history, &[], cfg.horizon_len * 2 + 3).unwrap();
        assert_eq!(f.values.len(), cfg.horizon_len * 2 + 3);
        assert_eq!(*f.rounds.last().unwrap(), 2);
    }
}
