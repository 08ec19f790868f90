//! Synthetic series families and disambiguation tasks.
//!
//! Six families feed the synthetic part of the training mixture. The tasks
//! pose a history that two processes explain equally well (a ramp that is
//! either a trend or half a triangle wave; a half-wave rise that is either a
//! sinusoid or a smooth staircase) and supply in-context windows drawn from
//! the true process.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::contextgen::{Dataset, Granularity, TimeSeries};
use crate::error::{Error, Result};
use crate::seed::{derive, substream};
use crate::tokenize::ExampleWindow;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    LinearTrend,
    TriangleWave,
    Sinusoid,
    TrendSeasonality,
    Piecewise,
    ArmaNoise,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::LinearTrend,
        Family::TriangleWave,
        Family::Sinusoid,
        Family::TrendSeasonality,
        Family::Piecewise,
        Family::ArmaNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::LinearTrend => "linear-trend",
            Family::TriangleWave => "triangle-wave",
            Family::Sinusoid => "sinusoid",
            Family::TrendSeasonality => "trend-seasonality",
            Family::Piecewise => "piecewise",
            Family::ArmaNoise => "arma-noise",
        }
    }

    fn is_periodic(self) -> bool {
        matches!(
            self,
            Family::TriangleWave | Family::Sinusoid | Family::TrendSeasonality
        )
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown synthetic family `{s}`")))
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Closed range a parameter is drawn from: fixed when `lo == hi`,
/// log-uniform when `lo > 0`, uniform otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub lo: f64,
    pub hi: f64,
}

impl ParamRange {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi) {
            return Err(Error::Validation(format!(
                "{name} range must be finite with lo <= hi"
            )));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else if self.lo > 0.0 {
            (rng.random_range(self.lo.ln()..self.hi.ln())).exp()
        } else {
            rng.random_range(self.lo..self.hi)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub family: Family,
    pub slope: ParamRange,
    pub intercept: ParamRange,
    pub amplitude: ParamRange,
    pub period: ParamRange,
    /// Phase as a fraction of a period.
    pub phase: ParamRange,
    /// Gaussian noise std as a fraction of the clean signal's half range.
    pub noise: ParamRange,
    pub length: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            family: Family::Sinusoid,
            slope: ParamRange::new(-0.2, 0.2),
            intercept: ParamRange::new(-5.0, 5.0),
            amplitude: ParamRange::new(0.5, 5.0),
            period: ParamRange::new(8.0, 96.0),
            phase: ParamRange::new(0.0, 1.0),
            noise: ParamRange::new(0.0, 0.05),
            length: 320,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("slope", self.slope),
            ("intercept", self.intercept),
            ("amplitude", self.amplitude),
            ("period", self.period),
            ("phase", self.phase),
            ("noise", self.noise),
        ] {
            r.validate(name)?;
        }
        if self.family.is_periodic() && self.period.lo < 2.0 {
            return Err(Error::Validation("period must be at least 2".into()));
        }
        if self.noise.lo < 0.0 {
            return Err(Error::Validation("noise std must be non-negative".into()));
        }
        if self.length == 0 {
            return Err(Error::Validation(
                "synthetic length must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Unit triangle wave: 0 at `x = 0`, peak 1 at a quarter period, trough -1
/// at three quarters.
fn triangle(x: f64) -> f64 {
    let f = x - x.floor();
    if f < 0.25 {
        4.0 * f
    } else if f < 0.75 {
        2.0 - 4.0 * f
    } else {
        4.0 * f - 4.0
    }
}

/// Smooth staircase of half-cosine rises of height 2: one rise per period.
fn staircase(t: f64, period: f64) -> f64 {
    let k = (t / period).floor();
    let u = t - k * period;
    2.0 * k - (PI * u / period).cos()
}

fn clean_signal(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = spec.length;
    let slope = spec.slope.sample(rng);
    let intercept = spec.intercept.sample(rng);
    let amp = spec.amplitude.sample(rng);
    let period = spec.period.sample(rng);
    let phase = spec.phase.sample(rng);
    match spec.family {
        // t counts from 1 so slope 1, intercept 0 gives 1, 2, 3, ...
        Family::LinearTrend => (1..=n).map(|t| intercept + slope * t as f64).collect(),
        Family::TriangleWave => (0..n)
            .map(|t| intercept + amp * triangle(t as f64 / period + phase))
            .collect(),
        Family::Sinusoid => (0..n)
            .map(|t| intercept + amp * (2.0 * PI * (t as f64 / period + phase)).sin())
            .collect(),
        Family::TrendSeasonality => {
            if rng.random_bool(0.5) {
                (0..n)
                    .map(|t| {
                        let t = t as f64;
                        intercept + slope * t + amp * (2.0 * PI * (t / period + phase)).sin()
                    })
                    .collect()
            } else {
                let sign = if slope < 0.0 { -1.0 } else { 1.0 };
                let shift = phase * period;
                (0..n)
                    .map(|t| intercept + sign * amp * staircase(t as f64 + shift, period))
                    .collect()
            }
        }
        Family::Piecewise => {
            let segments = rng.random_range(2..=5usize);
            let mut cuts: Vec<usize> = (0..segments - 1)
                .map(|_| rng.random_range(1..n.max(2)))
                .collect();
            cuts.sort_unstable();
            let slopes: Vec<f64> = (0..segments).map(|_| spec.slope.sample(rng)).collect();
            let mut level = intercept;
            let mut seg = 0;
            (0..n)
                .map(|t| {
                    while seg < cuts.len() && t >= cuts[seg] {
                        seg += 1;
                    }
                    level += slopes[seg];
                    level
                })
                .collect()
        }
        Family::ArmaNoise => {
            let phi = rng.random_range(-0.9..0.95);
            let theta = rng.random_range(-0.5..0.5);
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let (mut x, mut e_prev) = (0.0, 0.0);
            (0..n)
                .map(|_| {
                    let e: f64 = normal.sample(rng);
                    x = phi * x + e + theta * e_prev;
                    e_prev = e;
                    intercept + amp * 0.3 * x
                })
                .collect()
        }
    }
}

/// A series drawn from `spec`; a pure function of its parameters and seed.
pub fn generate(spec: &SyntheticSpec) -> Result<TimeSeries> {
    spec.validate()?;
    let mut rng = substream(spec.seed, spec.family.name(), 0);
    let mut values = clean_signal(spec, &mut rng);
    let frac = spec.noise.sample(&mut rng);
    if frac > 0.0 {
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        let std = frac * ((hi - lo) / 2.0).max(1e-3);
        let normal = Normal::new(0.0, std).expect("positive std");
        for v in &mut values {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(TimeSeries {
        id: format!("{}-{}", spec.family.name(), spec.seed),
        granularity: Some(Granularity::Synthetic),
        values,
    })
}

/// Shape of the synthetic training pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub families: Vec<Family>,
    pub series_per_family: usize,
    pub series_len: usize,
    /// Template whose ranges every family uses.
    pub ranges: SyntheticSpec,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            families: Family::ALL.to_vec(),
            series_per_family: 64,
            series_len: 320,
            ranges: SyntheticSpec::default(),
        }
    }
}

/// One synthetic dataset per family; series `i` of family `f` is generated
/// with seed `derive(seed, f, i)`.
pub fn synthetic_pool(cfg: &PoolConfig, seed: u64) -> Result<Vec<Dataset>> {
    if cfg.families.is_empty() || cfg.series_per_family == 0 {
        return Err(Error::Validation("synthetic pool is empty".into()));
    }
    cfg.families
        .iter()
        .map(|&family| {
            let series = (0..cfg.series_per_family as u64)
                .map(|i| {
                    let mut s = generate(&SyntheticSpec {
                        family,
                        length: cfg.series_len,
                        seed: derive(seed, family.name(), i),
                        ..cfg.ranges.clone()
                    })?;
                    s.id = format!("{}-{i}", family.name());
                    Ok(s)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Dataset::new(family.name(), Granularity::Synthetic, series))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    TrendVsTriangle,
    TrendVsSeasonality,
}

impl TaskKind {
    pub const ALL: [TaskKind; 2] = [TaskKind::TrendVsTriangle, TaskKind::TrendVsSeasonality];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::TrendVsTriangle => "trend-vs-triangle",
            TaskKind::TrendVsSeasonality => "trend-vs-seasonality",
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which explanation of the history is true.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hypothesis {
    Trend,
    Periodic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskParams {
    /// Candidate history lengths; each task picks one.
    pub history_lens: Vec<usize>,
    pub horizon: usize,
    /// Length of each in-context window.
    pub window_len: usize,
    pub amplitude: ParamRange,
    pub level: ParamRange,
    /// Minimum MAE between the two hypotheses' continuations, relative to
    /// the amplitude.
    pub separation: f64,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            history_lens: vec![16, 24, 32],
            horizon: 16,
            window_len: 80,
            amplitude: ParamRange::new(0.5, 4.0),
            level: ParamRange::new(-3.0, 3.0),
            separation: 0.5,
        }
    }
}

impl TaskParams {
    pub fn validate(&self) -> Result<()> {
        if self.history_lens.is_empty() || self.history_lens.iter().any(|&l| l < 2) {
            return Err(Error::Validation(
                "history lengths must be at least 2".into(),
            ));
        }
        if self.horizon == 0 || self.window_len == 0 {
            return Err(Error::Validation(
                "horizon and window length must be positive".into(),
            ));
        }
        self.amplitude.validate("amplitude")?;
        self.level.validate("level")?;
        if self.amplitude.lo <= 0.0 {
            return Err(Error::Validation("task amplitude must be positive".into()));
        }
        Ok(())
    }
}

/// Value at time `t` of one hypothesis, with the history's last point (a
/// peak of height `amp`) at `t = 0` and a history of `l` points.
fn process(kind: TaskKind, hyp: Hypothesis, amp: f64, l: usize, t: i64) -> f64 {
    let lf = l as f64;
    let tf = t as f64;
    match (kind, hyp) {
        (TaskKind::TrendVsTriangle, Hypothesis::Trend) => amp + 2.0 * amp * tf / lf,
        (TaskKind::TrendVsTriangle, Hypothesis::Periodic) => {
            // distance to the nearest peak, peaks every 2l
            let m = t.rem_euclid(2 * l as i64) as f64;
            let d = m.min(2.0 * lf - m);
            amp - 2.0 * amp * d / lf
        }
        (TaskKind::TrendVsSeasonality, Hypothesis::Periodic) => amp * (PI * tf / lf).cos(),
        (TaskKind::TrendVsSeasonality, Hypothesis::Trend) => {
            // rises over t in (-l, 0] end at the peak; one rise per l steps
            let shifted = t + l as i64 - 1;
            let k = shifted.div_euclid(l as i64) as f64;
            let j = shifted.rem_euclid(l as i64) as f64;
            2.0 * amp * k - amp * (PI * (j + 1.0) / lf).cos()
        }
    }
}

/// A history both hypotheses explain, windows from the true process, and
/// both continuations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisambiguationTask {
    pub id: String,
    pub kind: TaskKind,
    pub truth: Hypothesis,
    pub history: Vec<f64>,
    pub examples: Vec<Vec<f64>>,
    /// Continuation under the true hypothesis.
    pub target: Vec<f64>,
    /// Continuation under the other hypothesis.
    pub alternative: Vec<f64>,
    pub amplitude: f64,
}

impl DisambiguationTask {
    /// Same history and target with no in-context examples.
    pub fn without_examples(&self) -> Self {
        Self {
            examples: Vec::new(),
            ..self.clone()
        }
    }

    pub fn example_windows(&self) -> Result<Vec<ExampleWindow>> {
        self.examples
            .iter()
            .map(|e| ExampleWindow::from_real(e.clone()))
            .collect()
    }

    /// Series records for JSONL export.
    pub fn to_series(&self) -> Vec<TimeSeries> {
        let tag = |part: &str, values: &[f64]| TimeSeries {
            id: format!("{}/{part}", self.id),
            granularity: Some(Granularity::Synthetic),
            values: values.to_vec(),
        };
        let mut out = vec![tag("history", &self.history)];
        out.extend(
            self.examples
                .iter()
                .enumerate()
                .map(|(j, e)| tag(&format!("example-{j}"), e)),
        );
        out.push(tag("target", &self.target));
        out.push(tag("alternative", &self.alternative));
        out
    }
}

/// Builds one task with `n_examples` in-context windows from the true
/// process. Windows end before the history starts, at random offsets up to
/// two periods earlier.
pub fn make_disambiguation_task(
    kind: TaskKind,
    n_examples: usize,
    params: &TaskParams,
    seed: u64,
) -> Result<DisambiguationTask> {
    params.validate()?;
    let mut rng = substream(seed, kind.name(), 0);
    let l = params.history_lens[rng.random_range(0..params.history_lens.len())];
    let amp = params.amplitude.sample(&mut rng);
    let level = params.level.sample(&mut rng);
    let truth = if rng.random_bool(0.5) {
        Hypothesis::Trend
    } else {
        Hypothesis::Periodic
    };
    let other = match truth {
        Hypothesis::Trend => Hypothesis::Periodic,
        Hypothesis::Periodic => Hypothesis::Trend,
    };
    let at = |hyp, t| level + process(kind, hyp, amp, l, t);
    let history: Vec<f64> = (1 - l as i64..=0).map(|t| at(truth, t)).collect();
    let horizon = 1..=params.horizon as i64;
    let target: Vec<f64> = horizon.clone().map(|t| at(truth, t)).collect();
    let alternative: Vec<f64> = horizon.map(|t| at(other, t)).collect();
    let t_len = params.window_len as i64;
    let history_start = 1 - l as i64;
    let examples = (0..n_examples)
        .map(|_| {
            let gap = rng.random_range(0..=4 * l as i64);
            let start = history_start - t_len - gap;
            (start..start + t_len).map(|t| at(truth, t)).collect()
        })
        .collect();
    Ok(DisambiguationTask {
        id: format!("{}-{seed}", kind.name()),
        kind,
        truth,
        history,
        examples,
        target,
        alternative,
        amplitude: amp,
    })
}

/// `count` tasks per kind with ids numbered from 0.
pub fn disambiguation_suite(
    kinds: &[TaskKind],
    count: usize,
    n_examples: usize,
    params: &TaskParams,
    seed: u64,
) -> Result<Vec<DisambiguationTask>> {
    let mut out = Vec::with_capacity(kinds.len() * count);
    for &kind in kinds {
        for i in 0..count {
            let mut task = make_disambiguation_task(
                kind,
                n_examples,
                params,
                derive(seed, kind.name(), i as u64),
            )?;
            task.id = format!("{}-{i:04}", kind.name());
            out.push(task);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed(family: Family) -> SyntheticSpec {
        SyntheticSpec {
            family,
            slope: ParamRange::fixed(1.0),
            intercept: ParamRange::fixed(0.0),
            amplitude: ParamRange::fixed(1.0),
            period: ParamRange::fixed(4.0),
            phase: ParamRange::fixed(0.0),
            noise: ParamRange::fixed(0.0),
            length: 5,
            seed: 3,
        }
    }

    #[test]
    fn linear_trend_example() {
        assert_eq!(
            generate(&fixed(Family::LinearTrend)).unwrap().values,
            vec![1.0, 2.0, 3.0, 4.0, 5.0]
        );
    }

    #[test]
    fn triangle_example() {
        let spec = SyntheticSpec {
            length: 8,
            ..fixed(Family::TriangleWave)
        };
        let v = generate(&spec).unwrap().values;
        let want = [0.0, 1.0, 0.0, -1.0, 0.0, 1.0, 0.0, -1.0];
        for (a, b) in v.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{v:?}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        for family in Family::ALL {
            let spec = SyntheticSpec {
                family,
                seed: 17,
                ..SyntheticSpec::default()
            };
            let a = generate(&spec).unwrap();
            assert_eq!(a, generate(&spec).unwrap());
            assert_eq!(a.values.len(), spec.length);
            assert!(a.values.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn invalid_specs() {
        let spec = SyntheticSpec {
            period: ParamRange::new(1.0, 3.0),
            ..fixed(Family::Sinusoid)
        };
        assert!(spec.validate().is_err());
        let spec = SyntheticSpec {
            noise: ParamRange::new(-0.1, 0.0),
            ..fixed(Family::Sinusoid)
        };
        assert!(spec.validate().is_err());
        assert!("zigzag".parse::<Family>().is_err());
    }

    #[test]
    fn histories_are_shared_by_both_hypotheses() {
        for kind in TaskKind::ALL {
            for l in [16usize, 24, 32] {
                for t in 1 - l as i64..=0 {
                    let a = process(kind, Hypothesis::Trend, 1.5, l, t);
                    let b = process(kind, Hypothesis::Periodic, 1.5, l, t);
                    assert!((a - b).abs() < 1e-12, "{kind} l={l} t={t}: {a} vs {b}");
                }
                assert!((process(kind, Hypothesis::Trend, 1.5, l, 0) - 1.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn continuations_are_separated() {
        let params = TaskParams::default();
        for task in disambiguation_suite(&TaskKind::ALL, 20, 4, &params, 5).unwrap() {
            let gap: f64 = task
                .target
                .iter()
                .zip(&task.alternative)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / task.target.len() as f64;
            assert!(
                gap >= params.separation * task.amplitude,
                "{}: {gap}",
                task.id
            );
            assert_eq!(task.examples.len(), 4);
            assert!(task.examples.iter().all(|e| e.len() == params.window_len));
        }
    }

    #[test]
    fn zero_example_variant_shares_history_and_target() {
        let t = make_disambiguation_task(TaskKind::TrendVsTriangle, 3, &TaskParams::default(), 1)
            .unwrap();
        let z = t.without_examples();
        assert!(z.examples.is_empty());
        assert_eq!(z.history, t.history);
        assert_eq!(z.target, t.target);
    }
}
