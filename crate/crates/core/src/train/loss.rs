use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenizedContext;
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenize::Token;

/// Which target points are dropped from the squared error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMaskPolicy {
    /// Drop targets that are padded or lie past the window end.
    #[default]
    MaskPadded,
    /// Drop only targets past the window end; padded targets count as zeros.
    OverrunOnly,
}

/// Per-token regression targets `(tokens x h)` with 0/1 weights.
///
/// Row `t` holds the `h` points after patch token `t` in its own example.
/// Separator rows have weight zero everywhere. The loss is divided by the
/// number of patch tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTargets {
    pub values: Tensor,
    pub weights: Tensor,
    pub num_patches: usize,
}

impl LossTargets {
    pub fn build(ctx: &TokenizedContext, horizon: usize, policy: LossMaskPolicy) -> Self {
        let n = ctx.layout.len();
        let mut values = vec![0.0; n * horizon];
        let mut weights = vec![0.0; n * horizon];
        for (t, token) in ctx.layout.tokens().iter().enumerate() {
            let Token::Patch { example, patch } = *token else {
                continue;
            };
            let grid = &ctx.grids[example];
            let flat = grid.flat_values();
            let mask = grid.flat_mask();
            let len = grid.window_len();
            let start = (patch + 1) * grid.patch_len();
            for k in 0..horizon {
                let pos = start + k;
                if pos >= len {
                    break;
                }
                let padded = mask[pos];
                values[t * horizon + k] = if padded { 0.0 } else { flat[pos] };
                let keep = match policy {
                    LossMaskPolicy::MaskPadded => !padded,
                    LossMaskPolicy::OverrunOnly => true,
                };
                weights[t * horizon + k] = if keep { 1.0 } else { 0.0 };
            }
        }
        Self {
            values: Tensor::matrix(n, horizon, values).expect("sized above"),
            weights: Tensor::matrix(n, horizon, weights).expect("sized above"),
            num_patches: ctx.layout.num_patch_tokens(),
        }
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        if shape != self.values.shape() {
            return Err(Error::Dimension {
                op: "context_loss",
                lhs: shape.to_vec(),
                rhs: self.values.shape().to_vec(),
            });
        }
        if self.num_patches == 0 {
            return Err(Error::contract("loss needs at least one patch token"));
        }
        Ok(())
    }
}

/// Weighted squared error summed over tokens and horizon, divided by the
/// number of patch tokens.
pub fn context_loss(predictions: &Tensor, targets: &LossTargets) -> Result<f64> {
    targets.check(predictions.shape())?;
    let total: f64 = predictions
        .data()
        .iter()
        .zip(targets.values.data())
        .zip(targets.weights.data())
        .map(|((p, y), w)| w * (p - y) * (p - y))
        .sum();
    Ok(total / targets.num_patches as f64)
}

/// [`context_loss`] recorded on a graph.
pub fn loss_graph(g: &mut Graph, predictions: Var, targets: &LossTargets) -> Result<Var> {
    targets.check(g.value(predictions).shape())?;
    let negated = targets.values.map(|v| -v);
    let diff = g.add_const(predictions, &negated)?;
    let weighted = g.mul_const(diff, targets.weights.clone())?;
    let sq = g.mul(weighted, diff)?;
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / targets.num_patches as f64))
}
