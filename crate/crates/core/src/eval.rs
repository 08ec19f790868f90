//! Forecast evaluation: last-value baseline, MAE, scaled MAE with geometric
//! mean aggregation, rolling-origin evaluation and the in-context example
//! ablation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::contextgen::DatasetRegistry;
use crate::error::{Error, Result};
use crate::model::{forecast, ModelConfig, ModelParams};
use crate::synthetic::DisambiguationTask;
use crate::tokenize::ExampleWindow;

/// Anything that maps a history (plus optional examples) to a forecast.
pub trait Forecaster: Sync {
    fn name(&self) -> &str;

    /// Most in-context examples accepted, if bounded.
    fn max_examples(&self) -> Option<usize> {
        None
    }

    fn forecast(
        &self,
        history: &[f64],
        examples: &[ExampleWindow],
        horizon: usize,
    ) -> Result<Vec<f64>>;
}

/// Repeats the last observed value.
#[derive(Clone, Copy, Debug, Default)]
pub struct Naive;

impl Forecaster for Naive {
    fn name(&self) -> &str {
        "naive"
    }

    fn forecast(
        &self,
        history: &[f64],
        _examples: &[ExampleWindow],
        horizon: usize,
    ) -> Result<Vec<f64>> {
        naive_forecast(history, horizon)
    }
}

pub struct ModelForecaster<'a> {
    pub params: &'a ModelParams,
    pub config: &'a ModelConfig,
}

impl Forecaster for ModelForecaster<'_> {
    fn name(&self) -> &str {
        "model"
    }

    fn max_examples(&self) -> Option<usize> {
        Some(self.config.max_examples - 1)
    }

    fn forecast(
        &self,
        history: &[f64],
        examples: &[ExampleWindow],
        horizon: usize,
    ) -> Result<Vec<f64>> {
        Ok(forecast(self.params, self.config, history, examples, horizon)?.values)
    }
}

pub fn naive_forecast(history: &[f64], horizon: usize) -> Result<Vec<f64>> {
    let last = *history
        .last()
        .ok_or_else(|| Error::contract("naive forecast needs a non-empty history"))?;
    Ok(vec![last; horizon])
}

pub fn mae(pred: &[f64], actual: &[f64]) -> Result<f64> {
    if pred.len() != actual.len() || pred.is_empty() {
        return Err(Error::Dimension {
            op: "mae",
            lhs: vec![pred.len()],
            rhs: vec![actual.len()],
        });
    }
    Ok(pred
        .iter()
        .zip(actual)
        .map(|(p, a)| (p - a).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// Geometric mean of `model / naive` ratios.
#[derive(Clone, Debug, PartialEq)]
pub struct GmSummary {
    pub gm: f64,
    /// Delta-method standard error: `gm * sd(log ratios) / sqrt(n)`.
    pub std_err: f64,
    pub used: usize,
    /// Indices of pairs dropped because the naive MAE was zero.
    pub excluded: Vec<usize>,
}

pub fn scaled_mae_gm(pairs: &[(f64, f64)]) -> Result<GmSummary> {
    let mut logs = Vec::with_capacity(pairs.len());
    let mut excluded = Vec::new();
    for (i, &(model, naive)) in pairs.iter().enumerate() {
        if naive > 0.0 {
            logs.push((model / naive).ln());
        } else {
            log::warn!("dataset {i}: naive MAE is zero, excluded from the geometric mean");
            excluded.push(i);
        }
    }
    if logs.is_empty() {
        return Err(Error::Validation(
            "no dataset has a positive naive MAE".into(),
        ));
    }
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let gm = mean.exp();
    let std_err = if logs.len() > 1 {
        let var = logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0);
        gm * var.sqrt() / n.sqrt()
    } else {
        0.0
    };
    Ok(GmSummary {
        gm,
        std_err,
        used: logs.len(),
        excluded,
    })
}

/// Rolling evaluation of one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalTask {
    pub dataset: String,
    pub history_len: usize,
    pub horizon: usize,
    /// Step between forecast origins; `None` means the horizon.
    pub stride: Option<usize>,
    /// Share of each series (its tail) that forecast origins may fall in.
    pub test_fraction: f64,
    /// Length of in-context example windows offered to the forecaster.
    pub example_len: usize,
    /// Examples offered per forecast.
    pub num_examples: usize,
}

impl Default for EvalTask {
    fn default() -> Self {
        Self {
            dataset: String::new(),
            history_len: 64,
            horizon: 16,
            stride: None,
            test_fraction: 0.2,
            example_len: 80,
            num_examples: 0,
        }
    }
}

impl EvalTask {
    pub fn validate(&self) -> Result<()> {
        if self.history_len == 0 || self.horizon == 0 || self.example_len == 0 {
            return Err(Error::Validation(format!(
                "task `{}`: history, horizon and example lengths must be positive",
                self.dataset
            )));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Validation(format!(
                "task `{}`: test fraction must lie in (0, 1)",
                self.dataset
            )));
        }
        if self.stride == Some(0) {
            return Err(Error::Validation(format!(
                "task `{}`: stride must be positive",
                self.dataset
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.horizon)
    }
}

/// Forecast origins `t` (history `t - L .. t`, truth `t .. t + H`) for a
/// series of length `len`: starting at the later of the test split and `L`,
/// advancing by the stride while the horizon fits.
pub fn rolling_origins(len: usize, task: &EvalTask) -> Vec<usize> {
    let test = (len as f64 * task.test_fraction).round() as usize;
    let split = len - test.min(len);
    let first = split.max(task.history_len);
    (first..)
        .step_by(task.stride())
        .take_while(|t| t + task.horizon <= len)
        .collect()
}

/// One forecast problem: a history, candidate examples in preference order,
/// and the truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastCase {
    pub dataset: String,
    pub history: Vec<f64>,
    pub pool: Vec<ExampleWindow>,
    pub truth: Vec<f64>,
}

impl ForecastCase {
    pub fn from_task(task: &DisambiguationTask) -> Result<Self> {
        Ok(Self {
            dataset: task.kind.name().to_string(),
            history: task.history.clone(),
            pool: task.example_windows()?,
            truth: task.target.clone(),
        })
    }
}

/// Example windows that end at or before origin `t`, most recent first:
/// non-overlapping windows of the same series walking back from `t`, then
/// windows of the other series of the dataset ending at `t`.
fn example_pool(
    all: &[Vec<f64>],
    s: usize,
    t: usize,
    len: usize,
    want: usize,
) -> Result<Vec<ExampleWindow>> {
    let mut pool = Vec::new();
    let mut end = t;
    while pool.len() < want && end >= len {
        pool.push(ExampleWindow::from_real(all[s][end - len..end].to_vec())?);
        end -= len;
    }
    for (o, other) in all.iter().enumerate() {
        if pool.len() >= want {
            break;
        }
        if o != s && other.len() >= t && t >= len {
            pool.push(ExampleWindow::from_real(other[t - len..t].to_vec())?);
        }
    }
    Ok(pool)
}

/// Every rolling case of a task, with up to `pool_size` examples each.
/// Returns a warning instead of cases when the dataset has no valid origin.
pub fn rolling_cases(
    registry: &DatasetRegistry,
    task: &EvalTask,
    pool_size: usize,
) -> Result<(Vec<ForecastCase>, Vec<String>)> {
    task.validate()?;
    let ds = registry
        .get(&task.dataset)
        .ok_or_else(|| Error::Validation(format!("unknown dataset `{}`", task.dataset)))?;
    let values: Vec<Vec<f64>> = ds.series.iter().map(|s| s.values.clone()).collect();
    let mut cases = Vec::new();
    for (s, v) in values.iter().enumerate() {
        for t in rolling_origins(v.len(), task) {
            cases.push(ForecastCase {
                dataset: ds.name.clone(),
                history: v[t - task.history_len..t].to_vec(),
                pool: example_pool(&values, s, t, task.example_len, pool_size)?,
                truth: v[t..t + task.horizon].to_vec(),
            });
        }
    }
    let mut warnings = Vec::new();
    if cases.is_empty() {
        let msg = format!("dataset `{}` has no rolling window; skipped", ds.name);
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok((cases, warnings))
}

/// Per-case MAE of `forecaster` given the first `k` pool examples.
pub fn case_errors(
    forecaster: &dyn Forecaster,
    cases: &[ForecastCase],
    k: usize,
    workers: usize,
) -> Result<Vec<f64>> {
    if let Some(max) = forecaster.max_examples() {
        if k > max {
            return Err(Error::Capacity {
                what: "number of in-context examples",
                got: k,
                max,
            });
        }
    }
    let one = |c: &ForecastCase| -> Result<f64> {
        if c.pool.len() < k {
            return Err(Error::Validation(format!(
                "dataset `{}`: a case has {} examples, {k} requested",
                c.dataset,
                c.pool.len()
            )));
        }
        let pred = forecaster.forecast(&c.history, &c.pool[..k], c.truth.len())?;
        mae(&pred, &c.truth)
    };
    let workers = workers.clamp(1, cases.len().max(1));
    if workers == 1 {
        return cases.iter().map(one).collect();
    }
    let chunk = cases.len().div_ceil(workers);
    let parts: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
        let handles: Vec<_> = cases
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(one).collect::<Result<Vec<f64>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("eval worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(cases.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetScore {
    pub dataset: String,
    pub model_mae: f64,
    pub naive_mae: f64,
    /// `None` when the naive MAE is zero.
    pub scaled_mae: Option<f64>,
    pub window_errors: Vec<f64>,
    pub naive_window_errors: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub model: String,
    pub datasets: Vec<DatasetScore>,
    pub gm: Option<GmSummary>,
    pub warnings: Vec<String>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn group_by_dataset<'a>(cases: &'a [ForecastCase], errors: &[f64]) -> BTreeMap<&'a str, Vec<f64>> {
    let mut out: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (c, &e) in cases.iter().zip(errors) {
        out.entry(c.dataset.as_str()).or_default().push(e);
    }
    out
}

/// Scores `forecaster` and the naive baseline on the same cases, giving
/// each forecast the first `k` pool examples.
pub fn evaluate_cases(
    forecaster: &dyn Forecaster,
    cases: &[ForecastCase],
    k: usize,
    workers: usize,
) -> Result<MetricReport> {
    let model = case_errors(forecaster, cases, k, workers)?;
    let naive = case_errors(&Naive, cases, 0, workers)?;
    let model_by = group_by_dataset(cases, &model);
    let naive_by = group_by_dataset(cases, &naive);
    let mut warnings = Vec::new();
    let datasets: Vec<DatasetScore> = model_by
        .into_iter()
        .map(|(name, errs)| {
            let naive_errs = naive_by[name].clone();
            let (m, n) = (mean(&errs), mean(&naive_errs));
            if n <= 0.0 {
                let msg = format!(
                    "dataset `{name}`: naive MAE is zero; excluded from the geometric mean"
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
            DatasetScore {
                dataset: name.to_string(),
                model_mae: m,
                naive_mae: n,
                scaled_mae: (n > 0.0).then(|| m / n),
                window_errors: errs,
                naive_window_errors: naive_errs,
            }
        })
        .collect();
    let pairs: Vec<(f64, f64)> = datasets
        .iter()
        .map(|d| (d.model_mae, d.naive_mae))
        .collect();
    let gm = if datasets.iter().any(|d| d.scaled_mae.is_some()) {
        Some(scaled_mae_gm(&pairs)?)
    } else {
        None
    };
    Ok(MetricReport {
        model: forecaster.name().to_string(),
        datasets,
        gm,
        warnings,
    })
}

/// Rolling evaluation over several tasks; datasets without windows are
/// skipped with a warning.
pub fn rolling_eval(
    forecaster: &dyn Forecaster,
    tasks: &[EvalTask],
    registry: &DatasetRegistry,
    workers: usize,
) -> Result<MetricReport> {
    if tasks.is_empty() {
        return Err(Error::Validation("no evaluation tasks".into()));
    }
    let mut cases = Vec::new();
    let mut warnings = Vec::new();
    let mut k = None;
    for task in tasks {
        if *k.get_or_insert(task.num_examples) != task.num_examples {
            return Err(Error::Validation(
                "all tasks of one evaluation must use the same num_examples".into(),
            ));
        }
        let (c, w) = rolling_cases(registry, task, task.num_examples)?;
        if c.iter().any(|c| c.pool.len() < task.num_examples) {
            return Err(Error::Validation(format!(
                "dataset `{}`: not enough history for {} in-context examples",
                task.dataset, task.num_examples
            )));
        }
        cases.extend(c);
        warnings.extend(w);
    }
    if cases.is_empty() {
        return Err(Error::NoWindows(
            tasks
                .iter()
                .map(|t| t.dataset.as_str())
                .collect::<Vec<_>>()
                .join(", "),
        ));
    }
    let mut report = evaluate_cases(forecaster, &cases, k.unwrap_or(0), workers)?;
    warnings.append(&mut report.warnings);
    report.warnings = warnings;
    Ok(report)
}

impl MetricReport {
    /// `dataset,model_mae,naive_mae,scaled_mae` rows, then summary rows for
    /// the mean MAE and the geometric mean of scaled MAEs, each with one
    /// standard error in the last column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,model_mae,naive_mae,scaled_mae,std_err\n");
        for d in &self.datasets {
            let scaled = d.scaled_mae.map(|s| s.to_string()).unwrap_or_default();
            let se = std_err(&d.window_errors);
            writeln!(
                out,
                "{},{},{},{scaled},{se}",
                d.dataset, d.model_mae, d.naive_mae
            )
            .unwrap();
        }
        let maes: Vec<f64> = self.datasets.iter().map(|d| d.model_mae).collect();
        let naives: Vec<f64> = self.datasets.iter().map(|d| d.naive_mae).collect();
        if !maes.is_empty() {
            writeln!(
                out,
                "mean,{},{},,{}",
                mean(&maes),
                mean(&naives),
                std_err(&maes)
            )
            .unwrap();
        }
        if let Some(gm) = &self.gm {
            writeln!(out, "geometric_mean,,,{},{}", gm.gm, gm.std_err).unwrap();
        }
        out
    }
}

fn std_err(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (var / v.len() as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub k: usize,
    pub dataset: String,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Mean MAE over datasets for each k.
    pub summary: Vec<(usize, f64)>,
    /// Per-case errors for each k, in case order.
    pub case_errors: Vec<Vec<f64>>,
}

/// MAE for every k, each case receiving the first `k` examples of its pool,
/// so smaller k always see a prefix of what larger k see.
pub fn ablate_num_examples(
    forecaster: &dyn Forecaster,
    cases: &[ForecastCase],
    ks: &[usize],
    workers: usize,
) -> Result<AblationReport> {
    if ks.is_empty() {
        return Err(Error::Validation("no example counts to ablate".into()));
    }
    if ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Validation(
            "example counts must be strictly ascending".into(),
        ));
    }
    if cases.is_empty() {
        return Err(Error::Validation("no forecast cases".into()));
    }
    if let Some(max) = forecaster.max_examples() {
        let top = *ks.last().expect("non-empty");
        if top > max {
            return Err(Error::Capacity {
                what: "number of in-context examples",
                got: top,
                max,
            });
        }
    }
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut all = Vec::new();
    for &k in ks {
        let errs = case_errors(forecaster, cases, k, workers)?;
        let by = group_by_dataset(cases, &errs);
        let means: Vec<f64> = by.values().map(|v| mean(v)).collect();
        for (name, v) in &by {
            rows.push(AblationRow {
                k,
                dataset: name.to_string(),
                mae: mean(v),
            });
        }
        summary.push((k, mean(&means)));
        all.push(errs);
    }
    Ok(AblationReport {
        rows,
        summary,
        case_errors: all,
    })
}

impl AblationReport {
    /// `k,dataset,mae` rows followed by one `k,all,mean` row per k.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,dataset,mae\n");
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.k, r.dataset, r.mae).unwrap();
        }
        for (k, m) in &self.summary {
            writeln!(out, "{k},all,{m}").unwrap();
        }
        out
    }
}
