use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetRegistry, Granularity, TimeSeries};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeriesFormat {
    /// One series per column, header row holds the ids.
    Csv,
    /// One `{"id", "granularity", "values"}` object per line.
    Jsonl,
}

impl SeriesFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(SeriesFormat::Csv),
            Some("jsonl") | Some("json") => Ok(SeriesFormat::Jsonl),
            _ => Err(Error::Validation(format!(
                "cannot infer series format of {}; use .csv or .jsonl",
                path.display()
            ))),
        }
    }
}

pub fn load_series(path: &Path, format: SeriesFormat) -> Result<Vec<TimeSeries>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let origin = path.display().to_string();
    match format {
        SeriesFormat::Csv => parse_csv(&text, &origin),
        SeriesFormat::Jsonl => parse_jsonl(&text, &origin),
    }
}

fn check_unique(series: &[TimeSeries]) -> Result<()> {
    let mut seen = HashSet::new();
    for s in series {
        if !seen.insert(s.id.as_str()) {
            return Err(Error::DuplicateId(s.id.clone()));
        }
    }
    Ok(())
}

/// Columns may end early (ragged lengths) but may not have interior gaps.
pub(crate) fn parse_csv(text: &str, origin: &str) -> Result<Vec<TimeSeries>> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(origin, e.to_string()))?
        .clone();
    let mut series: Vec<TimeSeries> = headers
        .iter()
        .map(|h| TimeSeries::new(h, Vec::new()))
        .collect();
    if series.is_empty() || series.iter().any(|s| s.id.is_empty()) {
        return Err(Error::parse(
            format!("{origin}:1"),
            "header must name every column",
        ));
    }
    check_unique(&series)?;
    let mut ended = vec![false; series.len()];
    for (r, record) in reader.records().enumerate() {
        let row = r + 2;
        let record = record.map_err(|e| Error::parse(format!("{origin}:{row}"), e.to_string()))?;
        if record.len() > series.len() {
            return Err(Error::parse(
                format!("{origin}:{row}"),
                "more cells than header columns",
            ));
        }
        for (c, s) in series.iter_mut().enumerate() {
            let cell = record.get(c).unwrap_or("");
            let loc = || format!("{origin}: row {row}, column {} (`{}`)", c + 1, s.id);
            if cell.is_empty() {
                ended[c] = true;
                continue;
            }
            if ended[c] {
                return Err(Error::parse(loc(), "value after an empty cell"));
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::parse(loc(), format!("`{cell}` is not a number")))?;
            if !v.is_finite() {
                return Err(Error::parse(loc(), format!("`{cell}` is not finite")));
            }
            s.values.push(v);
        }
    }
    if let Some(s) = series.iter().find(|s| s.values.is_empty()) {
        return Err(Error::parse(
            origin,
            format!("series `{}` has no values", s.id),
        ));
    }
    Ok(series)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    #[serde(default)]
    granularity: Option<String>,
    values: Vec<serde_json::Value>,
}

pub(crate) fn parse_jsonl(text: &str, origin: &str) -> Result<Vec<TimeSeries>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| {
            Error::parse(format!("{origin}:{line_no}:{}", e.column()), e.to_string())
        })?;
        let granularity = raw
            .granularity
            .as_deref()
            .map(str::parse)
            .transpose()
            .map_err(|e: Error| Error::parse(format!("{origin}:{line_no}"), e.to_string()))?;
        let values = raw
            .values
            .iter()
            .enumerate()
            .map(|(j, v)| {
                v.as_f64().filter(|x| x.is_finite()).ok_or_else(|| {
                    Error::parse(
                        format!("{origin}: line {line_no}, value {j}"),
                        format!("`{v}` is not a finite number"),
                    )
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(Error::parse(
                format!("{origin}:{line_no}"),
                format!("series `{}` has no values", raw.id),
            ));
        }
        out.push(TimeSeries {
            id: raw.id,
            granularity,
            values,
        });
    }
    check_unique(&out)?;
    Ok(out)
}

/// One JSON object per line.
pub fn series_to_jsonl(series: &[TimeSeries]) -> String {
    let mut out = String::new();
    for s in series {
        out.push_str(&serde_json::to_string(s).expect("plain data serializes"));
        out.push('\n');
    }
    out
}

/// A dataset line of the registry manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryEntry {
    pub name: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    #[serde(default)]
    pub format: Option<SeriesFormat>,
    pub group: Granularity,
    #[serde(default = "yes")]
    pub eligible: bool,
}

fn yes() -> bool {
    true
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryManifest {
    #[serde(default)]
    dataset: Vec<RegistryEntry>,
}

/// Reads a TOML manifest of `[[dataset]]` tables and loads every dataset.
pub fn load_registry(manifest: &Path) -> Result<DatasetRegistry> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::file(manifest, e))?;
    let parsed: RegistryManifest = toml::from_str(&text)
        .map_err(|e| Error::parse(manifest.display().to_string(), e.message()))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut registry = DatasetRegistry::new();
    for entry in parsed.dataset {
        let path = base.join(&entry.path);
        let format = match entry.format {
            Some(f) => f,
            None => SeriesFormat::from_path(&path)?,
        };
        let series = load_series(&path, format)?;
        registry.add(Dataset {
            name: entry.name,
            group: entry.group,
            eligible: entry.eligible,
            series,
        })?;
    }
    Ok(registry)
}
