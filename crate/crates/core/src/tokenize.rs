//! Example windows, patching, and flat context layouts.
//!
//! Padding masks use `true` for padded points. Padded points always hold
//! `0.0`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A slice of a series plus its padding mask: an optional left-pad block, a
/// non-empty block of real points, then an optional right-pad block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleWindow {
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl ExampleWindow {
    pub fn new(values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if values.len() != mask.len() {
            return Err(Error::Dimension {
                op: "example_window",
                lhs: vec![values.len()],
                rhs: vec![mask.len()],
            });
        }
        let real = real_block(&mask).ok_or(Error::EmptySeries)?;
        if mask[real.clone()].iter().any(|&m| m) {
            return Err(Error::contract(
                "padding inside the real block of an example",
            ));
        }
        let mut values = values;
        for (v, &m) in values.iter_mut().zip(&mask) {
            if m {
                *v = 0.0;
            }
        }
        Ok(Self { values, mask })
    }

    /// A window with no padding.
    pub fn from_real(values: Vec<f64>) -> Result<Self> {
        let mask = vec![false; values.len()];
        Self::new(values, mask)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Index range of the real block.
    pub fn real_range(&self) -> Range<usize> {
        real_block(&self.mask).expect("validated at construction")
    }

    pub fn real_values(&self) -> &[f64] {
        &self.values[self.real_range()]
    }

    /// Applies `f` to every real point, leaving padding at zero.
    pub fn map_real(&self, f: impl Fn(f64) -> f64) -> ExampleWindow {
        let values = self
            .values
            .iter()
            .zip(&self.mask)
            .map(|(&v, &m)| if m { 0.0 } else { f(v) })
            .collect();
        ExampleWindow {
            values,
            mask: self.mask.clone(),
        }
    }
}

fn real_block(mask: &[bool]) -> Option<Range<usize>> {
    let start = mask.iter().position(|&m| !m)?;
    let end = mask.iter().rposition(|&m| !m)? + 1;
    Some(start..end)
}

/// Pads a short series into a window of length `capacity`.
///
/// A series shorter than one patch is left-padded with `patch_len - len + 1`
/// points so that its real data straddles the first patch boundary, then
/// everything is right-padded to `capacity`.
pub fn pad_example(values: &[f64], capacity: usize, patch_len: usize) -> Result<ExampleWindow> {
    let l = values.len();
    if l == 0 {
        return Err(Error::EmptySeries);
    }
    if l > capacity {
        return Err(Error::Overlong { len: l, capacity });
    }
    if patch_len == 0 || patch_len >= capacity {
        return Err(Error::contract(format!(
            "patch length {patch_len} must be in 1..{capacity}"
        )));
    }
    let left = if l < patch_len { patch_len - l + 1 } else { 0 };
    let right = capacity.saturating_sub(left + l);
    let mut out = Vec::with_capacity(left + l + right);
    let mut mask = Vec::with_capacity(left + l + right);
    out.extend(std::iter::repeat_n(0.0, left));
    mask.extend(std::iter::repeat_n(true, left));
    out.extend_from_slice(values);
    mask.extend(std::iter::repeat_n(false, l));
    out.extend(std::iter::repeat_n(0.0, right));
    mask.extend(std::iter::repeat_n(true, right));
    ExampleWindow::new(out, mask)
}

/// Left-pads a forecast history to a whole number of patches so that its last
/// patch ends exactly at the last observed point.
pub fn left_pad_history(values: &[f64], patch_len: usize) -> Result<ExampleWindow> {
    if values.is_empty() {
        return Err(Error::EmptySeries);
    }
    if patch_len == 0 {
        return Err(Error::contract("patch length must be positive"));
    }
    let left = (patch_len - values.len() % patch_len) % patch_len;
    let mut out = vec![0.0; left];
    out.extend_from_slice(values);
    let mut mask = vec![true; left];
    mask.extend(std::iter::repeat_n(false, values.len()));
    ExampleWindow::new(out, mask)
}

/// An ordered group of example windows; the last one is the forecast target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Context {
    windows: Vec<ExampleWindow>,
}

impl Context {
    pub fn new(windows: Vec<ExampleWindow>) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::EmptyContext);
        }
        Ok(Self { windows })
    }

    pub fn windows(&self) -> &[ExampleWindow] {
        &self.windows
    }

    pub fn target(&self) -> &ExampleWindow {
        self.windows.last().expect("non-empty")
    }

    /// Everything before the target.
    pub fn examples(&self) -> &[ExampleWindow] {
        &self.windows[..self.windows.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Non-overlapping patches of one example window.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    patch_len: usize,
    window_len: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
    right_incomplete: Vec<bool>,
    eligible: Vec<bool>,
}

pub fn patchify(w: &ExampleWindow, patch_len: usize) -> PatchGrid {
    assert!(patch_len >= 1, "patch length must be positive");
    let t = w.len();
    let n = t.div_ceil(patch_len);
    let mut values = vec![0.0; n * patch_len];
    let mut mask = vec![true; n * patch_len];
    values[..t].copy_from_slice(w.values());
    mask[..t].copy_from_slice(w.mask());
    let mut right_incomplete = Vec::with_capacity(n);
    let mut eligible = Vec::with_capacity(n);
    for j in 0..n {
        let m = &mask[j * patch_len..(j + 1) * patch_len];
        let last_padded = m[patch_len - 1];
        right_incomplete.push(last_padded);
        eligible.push(!last_padded && m.iter().any(|&x| !x));
    }
    PatchGrid {
        patch_len,
        window_len: t,
        values,
        mask,
        right_incomplete,
        eligible,
    }
}

impl PatchGrid {
    pub fn patch_len(&self) -> usize {
        self.patch_len
    }

    pub fn num_patches(&self) -> usize {
        self.right_incomplete.len()
    }

    /// Length of the window the grid was cut from.
    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn patch(&self, j: usize) -> &[f64] {
        &self.values[j * self.patch_len..(j + 1) * self.patch_len]
    }

    pub fn patch_mask(&self, j: usize) -> &[bool] {
        &self.mask[j * self.patch_len..(j + 1) * self.patch_len]
    }

    /// Whether the last point of patch `j` is padding.
    pub fn is_right_incomplete(&self, j: usize) -> bool {
        self.right_incomplete[j]
    }

    /// Whether later tokens may attend to patch `j`.
    pub fn is_eligible(&self, j: usize) -> bool {
        self.eligible[j]
    }

    pub fn eligible(&self) -> &[bool] {
        &self.eligible
    }

    /// Flat patch values, `num_patches * patch_len` long.
    pub fn flat_values(&self) -> &[f64] {
        &self.values
    }

    pub fn flat_mask(&self) -> &[bool] {
        &self.mask
    }

    /// Reassembles the window the grid was cut from.
    pub fn unpatch(&self) -> ExampleWindow {
        ExampleWindow::new(
            self.values[..self.window_len].to_vec(),
            self.mask[..self.window_len].to_vec(),
        )
        .expect("grid holds a valid window")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayoutMode {
    /// Every example, the target included, is followed by a separator.
    Train,
    /// No separator after the target, so the final token is its last patch.
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Token {
    Patch { example: usize, patch: usize },
    Separator { example: usize },
}

/// Flat token order of a context.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContextLayout {
    tokens: Vec<Token>,
    eligible: Vec<bool>,
    spans: Vec<Range<usize>>,
    separators: Vec<usize>,
}

pub fn layout_context(grids: &[PatchGrid], mode: LayoutMode) -> Result<ContextLayout> {
    if grids.is_empty() {
        return Err(Error::EmptyContext);
    }
    let mut tokens = Vec::new();
    let mut eligible = Vec::new();
    let mut spans = Vec::with_capacity(grids.len());
    let mut separators = Vec::new();
    let last = grids.len() - 1;
    for (i, grid) in grids.iter().enumerate() {
        let start = tokens.len();
        for j in 0..grid.num_patches() {
            tokens.push(Token::Patch {
                example: i,
                patch: j,
            });
            eligible.push(grid.is_eligible(j));
        }
        spans.push(start..tokens.len());
        if i < last || mode == LayoutMode::Train {
            separators.push(tokens.len());
            tokens.push(Token::Separator { example: i });
            eligible.push(true);
        }
    }
    Ok(ContextLayout {
        tokens,
        eligible,
        spans,
        separators,
    })
}

impl ContextLayout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn eligible(&self) -> &[bool] {
        &self.eligible
    }

    pub fn num_examples(&self) -> usize {
        self.spans.len()
    }

    /// Token positions of example `i`'s patches (separator excluded).
    pub fn span(&self, i: usize) -> Range<usize> {
        self.spans[i].clone()
    }

    pub fn separators(&self) -> &[usize] {
        &self.separators
    }

    /// Number of patch tokens, i.e. the sum of per-example patch counts.
    pub fn num_patch_tokens(&self) -> usize {
        self.tokens.len() - self.separators.len()
    }

    /// Position of the last attention-eligible patch of the final example.
    pub fn readout_position(&self) -> Option<usize> {
        let span = self.spans.last()?.clone();
        span.rev().find(|&q| self.eligible[q])
    }
}

/// Patches every window and lays them out in order.
pub fn tokenize_context(
    windows: &[ExampleWindow],
    patch_len: usize,
    mode: LayoutMode,
) -> Result<(Vec<PatchGrid>, ContextLayout)> {
    let grids: Vec<PatchGrid> = windows.iter().map(|w| patchify(w, patch_len)).collect();
    let layout = layout_context(&grids, mode)?;
    Ok((grids, layout))
}
