//! Training contexts from registered datasets.
//!
//! Each series is cut into every window of length `T` (shift 1). A context
//! groups `n` windows either from one series or from anywhere in one
//! dataset. For every dataset and grouping kind a pool of `20 N` contexts is
//! defined, `N` being the dataset's window count; pool entry `i` is a pure
//! function of the seed and `i`, so pools are never materialized. A mixture
//! sampler picks a granularity group, a grouping kind, a dataset and a pool
//! entry for each draw.

mod io;

pub use io::{load_registry, load_series, series_to_jsonl, RegistryEntry, SeriesFormat};

use std::collections::HashMap;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::substream;
use crate::tokenize::{pad_example, Context, ExampleWindow};
use crate::train::BatchSource;

/// Pool size per dataset and grouping kind, as a multiple of the window count.
pub const POOL_FACTOR: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// Hourly and sub-hourly data share one group.
    #[serde(alias = "sub-hourly", alias = "hourly+sub-hourly", alias = "minutely")]
    Hourly,
    Daily,
    Weekly,
    Monthly,
    Synthetic,
}

impl Granularity {
    pub const REAL: [Granularity; 4] = [
        Granularity::Hourly,
        Granularity::Daily,
        Granularity::Weekly,
        Granularity::Monthly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Granularity::Hourly => "hourly",
            Granularity::Daily => "daily",
            Granularity::Weekly => "weekly",
            Granularity::Monthly => "monthly",
            Granularity::Synthetic => "synthetic",
        }
    }
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hourly" | "sub-hourly" | "hourly+sub-hourly" | "minutely" => Ok(Granularity::Hourly),
            "daily" => Ok(Granularity::Daily),
            "weekly" => Ok(Granularity::Weekly),
            "monthly" => Ok(Granularity::Monthly),
            "synthetic" => Ok(Granularity::Synthetic),
            other => Err(Error::Validation(format!("unknown granularity `{other}`"))),
        }
    }
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One univariate series. This is also the JSONL record format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub granularity: Option<Granularity>,
    pub values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(id: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            granularity: None,
            values,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub group: Granularity,
    /// Whether the dataset may feed context generation.
    pub eligible: bool,
    pub series: Vec<TimeSeries>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, group: Granularity, series: Vec<TimeSeries>) -> Self {
        Self {
            name: name.into(),
            group,
            eligible: true,
            series,
        }
    }
}

/// Named datasets with unique names; series ids are unique within a dataset.
#[derive(Clone, Debug, Default)]
pub struct DatasetRegistry {
    datasets: Vec<Dataset>,
    by_name: HashMap<String, usize>,
}

impl DatasetRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, dataset: Dataset) -> Result<()> {
        if self.by_name.contains_key(&dataset.name) {
            return Err(Error::DuplicateId(dataset.name));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &dataset.series {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::DuplicateId(format!("{}/{}", dataset.name, s.id)));
            }
            if s.values.is_empty() {
                return Err(Error::EmptySeries);
            }
        }
        self.by_name
            .insert(dataset.name.clone(), self.datasets.len());
        self.datasets.push(dataset);
        Ok(())
    }

    pub fn datasets(&self) -> &[Dataset] {
        &self.datasets
    }

    pub fn get(&self, name: &str) -> Option<&Dataset> {
        self.by_name.get(name).map(|&i| &self.datasets[i])
    }

    fn require(&self, name: &str) -> Result<&Dataset> {
        self.get(name)
            .ok_or_else(|| Error::Validation(format!("unknown dataset `{name}`")))
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }
}

/// Zero-based start offsets of every length-`window_len` window with shift
/// 1. A series shorter than the window yields one whole-series window.
pub fn enumerate_windows(series_len: usize, window_len: usize) -> Result<Range<usize>> {
    if series_len == 0 {
        return Err(Error::EmptySeries);
    }
    if window_len == 0 {
        return Err(Error::contract("window length must be at least 1"));
    }
    if series_len >= window_len {
        Ok(0..series_len - window_len + 1)
    } else {
        Ok(0..1)
    }
}

/// One window of one series of the dataset a spec names.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowRef {
    pub series: usize,
    pub start: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    /// All windows come from one series.
    Series,
    /// Windows come from any series of the dataset.
    Dataset,
}

impl Grouping {
    fn name(self) -> &'static str {
        match self {
            Grouping::Series => "series",
            Grouping::Dataset => "dataset",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub dataset: String,
    pub kind: Grouping,
    /// Example windows in context order; the last is the target.
    pub windows: Vec<WindowRef>,
}

impl ContextSpec {
    /// Materializes the windows. Series shorter than `window_len` are padded.
    pub fn resolve(
        &self,
        registry: &DatasetRegistry,
        window_len: usize,
        patch_len: usize,
    ) -> Result<Context> {
        let dataset = registry.require(&self.dataset)?;
        let windows = self
            .windows
            .iter()
            .map(|r| {
                let series = dataset.series.get(r.series).ok_or_else(|| {
                    Error::contract(format!(
                        "dataset `{}` has no series {}",
                        dataset.name, r.series
                    ))
                })?;
                let v = &series.values;
                if v.len() < window_len {
                    if r.start != 0 {
                        return Err(Error::contract("short series window must start at 0"));
                    }
                    return pad_example(v, window_len, patch_len);
                }
                let end = r.start + window_len;
                if end > v.len() {
                    return Err(Error::contract(format!(
                        "window {}..{end} exceeds series `{}` of length {}",
                        r.start,
                        series.id,
                        v.len()
                    )));
                }
                ExampleWindow::from_real(v[r.start..end].to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        Context::new(windows)
    }
}

/// Flat index over every window of a dataset.
#[derive(Clone, Debug)]
pub struct WindowIndex {
    /// `offsets[s]` is the flat index of series `s`'s first window.
    offsets: Vec<usize>,
    total: usize,
}

impl WindowIndex {
    pub fn new(dataset: &Dataset, window_len: usize) -> Result<Self> {
        let mut offsets = Vec::with_capacity(dataset.series.len());
        let mut total = 0;
        for s in &dataset.series {
            offsets.push(total);
            total += enumerate_windows(s.values.len(), window_len)?.len();
        }
        if total == 0 {
            return Err(Error::NoWindows(dataset.name.clone()));
        }
        Ok(Self { offsets, total })
    }

    /// Total window count `N`.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn locate(&self, flat: usize) -> WindowRef {
        let series = self.offsets.partition_point(|&o| o <= flat) - 1;
        WindowRef {
            series,
            start: flat - self.offsets[series],
        }
    }

    fn series_range(&self, series: usize) -> Range<usize> {
        let end = self.offsets.get(series + 1).copied().unwrap_or(self.total);
        self.offsets[series]..end
    }
}

/// Entry `i` of a dataset's context pool.
///
/// Windows are drawn uniformly with replacement. For series-level grouping a
/// window is drawn first to pick the series (so series are weighted by
/// window count), then all `n` windows are drawn within that series.
pub fn pool_entry(
    dataset: &Dataset,
    index: &WindowIndex,
    n: usize,
    kind: Grouping,
    seed: u64,
    i: u64,
) -> ContextSpec {
    let stream = format!("contexts/{}/{}", dataset.name, kind.name());
    let mut rng = substream(seed, &stream, i);
    let range = match kind {
        Grouping::Dataset => 0..index.total(),
        Grouping::Series => {
            let anchor = index.locate(rng.random_range(0..index.total()));
            index.series_range(anchor.series)
        }
    };
    let windows = (0..n)
        .map(|_| index.locate(rng.random_range(range.clone())))
        .collect();
    ContextSpec {
        dataset: dataset.name.clone(),
        kind,
        windows,
    }
}

/// `count` contexts of `n` windows from one dataset; `None` means `20 N`.
pub fn sample_contexts(
    registry: &DatasetRegistry,
    dataset: &str,
    n: usize,
    window_len: usize,
    count: Option<usize>,
    kind: Grouping,
    seed: u64,
) -> Result<Vec<ContextSpec>> {
    if n == 0 {
        return Err(Error::contract("contexts need at least one example"));
    }
    let ds = registry.require(dataset)?;
    let index = WindowIndex::new(ds, window_len)?;
    let count = count.unwrap_or(POOL_FACTOR * index.total());
    Ok((0..count as u64)
        .map(|i| pool_entry(ds, &index, n, kind, seed, i))
        .collect())
}

/// Mixture weights. Real groups share `1 - synthetic` equally.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureWeights {
    pub synthetic: f64,
    /// Probability of series-level grouping; dataset-level gets the rest.
    pub series_level: f64,
}

impl Default for MixtureWeights {
    fn default() -> Self {
        Self {
            synthetic: 0.1,
            series_level: 0.5,
        }
    }
}

impl MixtureWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.synthetic) || !(0.0..=1.0).contains(&self.series_level) {
            return Err(Error::Validation(
                "mixture weights must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Pool {
    dataset: usize,
    index: WindowIndex,
}

#[derive(Clone, Debug)]
struct GroupPools {
    group: Granularity,
    probability: f64,
    pools: Vec<Pool>,
}

/// Deterministic stream of context specs; draw `i` depends only on the seed
/// and `i`.
#[derive(Clone, Debug)]
pub struct MixtureSampler<'a> {
    registry: &'a DatasetRegistry,
    groups: Vec<GroupPools>,
    series_level: f64,
    n: usize,
    seed: u64,
}

impl<'a> MixtureSampler<'a> {
    /// Only eligible datasets take part. When one side of the real/synthetic
    /// split has no data, the other side receives its weight.
    pub fn new(
        registry: &'a DatasetRegistry,
        weights: MixtureWeights,
        n: usize,
        window_len: usize,
        seed: u64,
    ) -> Result<Self> {
        weights.validate()?;
        if n == 0 {
            return Err(Error::contract("contexts need at least one example"));
        }
        let mut by_group: Vec<(Granularity, Vec<Pool>)> = Vec::new();
        for group in Granularity::REAL
            .into_iter()
            .chain([Granularity::Synthetic])
        {
            let mut pools = Vec::new();
            for (d, ds) in registry.datasets().iter().enumerate() {
                if ds.group == group && ds.eligible {
                    pools.push(Pool {
                        dataset: d,
                        index: WindowIndex::new(ds, window_len)?,
                    });
                }
            }
            if !pools.is_empty() {
                by_group.push((group, pools));
            }
        }
        let real = by_group
            .iter()
            .filter(|(g, _)| *g != Granularity::Synthetic)
            .count();
        let has_synthetic = by_group.iter().any(|(g, _)| *g == Granularity::Synthetic);
        let synthetic_share = match (real, has_synthetic) {
            (0, false) => {
                return Err(Error::Validation(
                    "no eligible datasets for context generation".into(),
                ))
            }
            (0, true) => 1.0,
            (_, false) => 0.0,
            (_, true) => weights.synthetic,
        };
        let groups: Vec<GroupPools> = by_group
            .into_iter()
            .map(|(group, pools)| GroupPools {
                group,
                probability: if group == Granularity::Synthetic {
                    synthetic_share
                } else {
                    (1.0 - synthetic_share) / real as f64
                },
                pools,
            })
            .filter(|g| g.probability > 0.0)
            .collect();
        if groups.is_empty() {
            return Err(Error::Validation("mixture weights select no data".into()));
        }
        Ok(Self {
            registry,
            groups,
            series_level: weights.series_level,
            n,
            seed,
        })
    }

    /// Probability of each non-empty group.
    pub fn group_probabilities(&self) -> Vec<(Granularity, f64)> {
        self.groups
            .iter()
            .map(|g| (g.group, g.probability))
            .collect()
    }

    pub fn draw(&self, i: u64) -> ContextSpec {
        let mut rng = substream(self.seed, "mixture", i);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = self.groups.last().expect("non-empty");
        for g in &self.groups {
            acc += g.probability;
            if u < acc {
                chosen = g;
                break;
            }
        }
        let kind = if rng.random::<f64>() < self.series_level {
            Grouping::Series
        } else {
            Grouping::Dataset
        };
        let pool = &chosen.pools[rng.random_range(0..chosen.pools.len())];
        let entry = rng.random_range(0..(POOL_FACTOR * pool.index.total()) as u64);
        let dataset = &self.registry.datasets()[pool.dataset];
        pool_entry(dataset, &pool.index, self.n, kind, self.seed, entry)
    }

    pub fn iter(&self) -> impl Iterator<Item = ContextSpec> + '_ {
        (0u64..).map(move |i| self.draw(i))
    }

    pub fn registry(&self) -> &'a DatasetRegistry {
        self.registry
    }
}

/// Training batches drawn from a mixture: batch `s` holds draws
/// `(s - 1) * size ..  s * size`.
pub struct MixtureBatches<'a> {
    pub sampler: MixtureSampler<'a>,
    pub window_len: usize,
    pub patch_len: usize,
}

impl BatchSource for MixtureBatches<'_> {
    fn batch(&self, step: u64, size: usize) -> Result<Vec<Context>> {
        let first = (step.saturating_sub(1)) * size as u64;
        (first..first + size as u64)
            .map(|i| {
                self.sampler.draw(i).resolve(
                    self.sampler.registry(),
                    self.window_len,
                    self.patch_len,
                )
            })
            .collect()
    }
}
