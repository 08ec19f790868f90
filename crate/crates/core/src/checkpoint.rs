//! On-disk model and training state.
//!
//! A checkpoint is a directory holding `manifest.txt` and `tensors.bin`. The
//! manifest is a `key = value` text file:
//!
//! ```text
//! format = tsicf-checkpoint
//! version = 1
//! endianness = little
//! dtype = f64
//! blob = tensors.bin
//! config.d_model = 64
//! meta.phase = "base"
//! tensor.input.w_hidden = shape 8x64 offset 0 count 512
//! ```
//!
//! `config.*` values are TOML literals of [`ModelConfig`] fields, `meta.*`
//! are free-form strings, and each `tensor.*` line locates one array in the
//! blob (offsets and counts in elements, little-endian `f64`). Optimizer
//! moments are stored as `adam.m.<name>` / `adam.v.<name>` tensors with the
//! update counter in `adam.step`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::{replace_dir_atomic, write_atomic};
use crate::model::{init_separator, ModelConfig, ModelParams, Params, SEPARATOR};
use crate::tensor::Tensor;
use crate::train::{OptimizerState, TrainingState};

const FORMAT: &str = "tsicf-checkpoint";
const VERSION: &str = "1";
pub const MANIFEST: &str = "manifest.txt";
pub const BLOB: &str = "tensors.bin";

/// Everything a checkpoint may hold.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    /// False when the separator was absent on disk and freshly drawn.
    pub has_separator: bool,
    pub optimizer: Option<OptimizerState>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn into_training_state(self) -> TrainingState {
        let opt = match self.optimizer {
            Some(opt) => opt,
            None => OptimizerState::new(&self.params, &self.config),
        };
        TrainingState {
            params: self.params,
            opt,
        }
    }
}

/// What to write.
#[derive(Clone, Copy, Debug)]
pub struct SaveOptions<'a> {
    /// Leave out the separator embedding (a base checkpoint).
    pub omit_separator: bool,
    pub optimizer: Option<&'a OptimizerState>,
    pub meta: &'a BTreeMap<String, String>,
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, cfg: &ModelConfig) -> Result<()> {
    let meta = BTreeMap::new();
    save_checkpoint_with(
        path,
        params,
        cfg,
        SaveOptions {
            omit_separator: false,
            optimizer: None,
            meta: &meta,
        },
    )
}

pub fn save_checkpoint_with(
    path: &Path,
    params: &ModelParams,
    cfg: &ModelConfig,
    opts: SaveOptions,
) -> Result<()> {
    let mut manifest = String::new();
    let mut blob: Vec<u8> = Vec::new();
    writeln!(manifest, "format = {FORMAT}").unwrap();
    writeln!(manifest, "version = {VERSION}").unwrap();
    writeln!(manifest, "endianness = little").unwrap();
    writeln!(manifest, "dtype = f64").unwrap();
    writeln!(manifest, "blob = {BLOB}").unwrap();

    let table = toml::Table::try_from(cfg)
        .map_err(|e| Error::contract(format!("config serialization: {e}")))?;
    for (k, v) in &table {
        writeln!(manifest, "config.{k} = {v}").unwrap();
    }
    for (k, v) in opts.meta {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::contract(format!(
                "meta entry `{k}` is not representable"
            )));
        }
        writeln!(manifest, "meta.{k} = {v}").unwrap();
    }

    let mut offset = 0usize;
    let mut push = |name: &str, t: &Tensor, manifest: &mut String| {
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        writeln!(
            manifest,
            "tensor.{name} = shape {} offset {offset} count {}",
            shape.join("x"),
            t.len()
        )
        .unwrap();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
    };
    for (name, t) in params.fields() {
        if opts.omit_separator && name == SEPARATOR {
            continue;
        }
        push(&name, t, &mut manifest);
    }
    if let Some(opt) = opts.optimizer {
        writeln!(manifest, "adam.step = {}", opt.step).unwrap();
        for (prefix, moments) in [("adam.m", &opt.m), ("adam.v", &opt.v)] {
            for (name, t) in moments.fields() {
                push(&format!("{prefix}.{name}"), t, &mut manifest);
            }
        }
    }

    replace_dir_atomic(path, |dir| {
        write_atomic(&dir.join(BLOB), &blob)?;
        write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
    })
}

struct Entry {
    shape: Vec<usize>,
    offset: usize,
    count: usize,
}

struct Manifest {
    config: ModelConfig,
    meta: BTreeMap<String, String>,
    tensors: BTreeMap<String, Entry>,
    adam_step: Option<u64>,
}

fn parse_tensor_entry(value: &str, loc: &str) -> Result<Entry> {
    let bad = || Error::parse(loc, format!("malformed tensor entry `{value}`"));
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 6 || parts[0] != "shape" || parts[2] != "offset" || parts[4] != "count" {
        return Err(bad());
    }
    let shape = parts[1]
        .split('x')
        .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(bad)?;
    let offset = parts[3].parse().map_err(|_| bad())?;
    let count: usize = parts[5].parse().map_err(|_| bad())?;
    if shape.iter().product::<usize>() != count {
        return Err(Error::parse(
            loc,
            format!("tensor count {count} does not match shape {shape:?}"),
        ));
    }
    Ok(Entry {
        shape,
        offset,
        count,
    })
}

fn parse_manifest(text: &str, origin: &str) -> Result<Manifest> {
    let mut header = BTreeMap::new();
    let mut config_toml = String::new();
    let mut meta = BTreeMap::new();
    let mut tensors = BTreeMap::new();
    let mut adam_step = None;
    for (i, line) in text.lines().enumerate() {
        let loc = format!("{origin}:{}", i + 1);
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once(" = ")
            .ok_or_else(|| Error::parse(&loc, "expected `key = value`"))?;
        let (key, value) = (key.trim(), value.trim());
        if let Some(k) = key.strip_prefix("config.") {
            writeln!(config_toml, "{k} = {value}").unwrap();
        } else if let Some(k) = key.strip_prefix("meta.") {
            meta.insert(k.to_string(), value.to_string());
        } else if let Some(k) = key.strip_prefix("tensor.") {
            if tensors
                .insert(k.to_string(), parse_tensor_entry(value, &loc)?)
                .is_some()
            {
                return Err(Error::parse(&loc, format!("tensor `{k}` listed twice")));
            }
        } else if key == "adam.step" {
            adam_step = Some(
                value
                    .parse()
                    .map_err(|_| Error::parse(&loc, "adam.step is not an integer"))?,
            );
        } else if matches!(key, "format" | "version" | "endianness" | "dtype" | "blob") {
            header.insert(key, value.to_string());
        } else {
            return Err(Error::parse(&loc, format!("unknown key `{key}`")));
        }
    }
    let expect = |k: &str, want: &str| -> Result<()> {
        match header.get(k) {
            Some(v) if v == want => Ok(()),
            Some(v) => Err(Error::parse(
                origin,
                format!("{k} is `{v}`, expected `{want}`"),
            )),
            None => Err(Error::parse(origin, format!("missing `{k}`"))),
        }
    };
    expect("format", FORMAT)?;
    expect("version", VERSION)?;
    expect("endianness", "little")?;
    expect("dtype", "f64")?;
    expect("blob", BLOB)?;
    let config: ModelConfig = toml::from_str(&config_toml)
        .map_err(|e| Error::parse(origin, format!("config: {}", e.message())))?;
    config
        .validate()
        .map_err(|e| Error::parse(origin, format!("config: {e}")))?;
    Ok(Manifest {
        config,
        meta,
        tensors,
        adam_step,
    })
}

fn read_blob(path: &Path, manifest: &Manifest) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::parse(
            path.display().to_string(),
            "blob length is not a multiple of 8",
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    for (name, e) in &manifest.tensors {
        if e.offset
            .checked_add(e.count)
            .is_none_or(|end| end > values.len())
        {
            return Err(Error::parse(
                path.display().to_string(),
                format!("tensor `{name}` extends past the end of the blob"),
            ));
        }
    }
    Ok(values)
}

/// Loads a checkpoint with the configuration recorded in its manifest.
///
/// A missing separator is drawn fresh from `separator_seed`; every other
/// tensor must be present with the shape the configuration implies.
pub fn load_checkpoint(path: &Path, separator_seed: u64) -> Result<Checkpoint> {
    load_inner(path, None, separator_seed)
}

/// Loads parameters for `cfg`, which may differ from the stored configuration
/// in fields that do not affect shapes (such as `max_examples`).
pub fn load_checkpoint_for(
    path: &Path,
    cfg: &ModelConfig,
    separator_seed: u64,
) -> Result<Checkpoint> {
    load_inner(path, Some(cfg), separator_seed)
}

fn load_inner(path: &Path, cfg: Option<&ModelConfig>, separator_seed: u64) -> Result<Checkpoint> {
    let manifest_path = path.join(MANIFEST);
    let text =
        std::fs::read_to_string(&manifest_path).map_err(|e| Error::file(&manifest_path, e))?;
    let manifest = parse_manifest(&text, &manifest_path.display().to_string())?;
    let blob = read_blob(&path.join(BLOB), &manifest)?;
    let config = cfg.cloned().unwrap_or_else(|| manifest.config.clone());
    if let Some(cfg) = cfg {
        let mut stored = manifest.config.clone();
        stored.max_examples = cfg.max_examples;
        if stored != *cfg {
            log::warn!(
                "loading checkpoint {} into a different model configuration",
                path.display()
            );
        }
    }

    let mut used = 0usize;
    let mut fetch = |name: &str, shape: &[usize]| -> Result<Option<Tensor>> {
        let Some(e) = manifest.tensors.get(name) else {
            return Ok(None);
        };
        if e.shape != shape {
            return Err(Error::TensorShape {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: e.shape.clone(),
            });
        }
        used += 1;
        let data = blob[e.offset..e.offset + e.count].to_vec();
        Ok(Some(Tensor::new(e.shape.clone(), data)?))
    };

    let mut has_separator = true;
    let params = Params::build(&config, |name, shape, _| match fetch(name, shape)? {
        Some(t) => Ok(t),
        None if name == SEPARATOR => {
            has_separator = false;
            Ok(init_separator(&config, separator_seed))
        }
        None => Err(Error::MissingTensor(name.to_string())),
    })?;

    let optimizer = match manifest.adam_step {
        None => None,
        Some(step) => {
            let mut moments = |prefix: &str| {
                Params::build(&config, |name, shape, _| {
                    let full = format!("{prefix}.{name}");
                    fetch(&full, shape)?.ok_or(Error::MissingTensor(full))
                })
            };
            let m = moments("adam.m")?;
            let v = moments("adam.v")?;
            Some(OptimizerState { step, m, v })
        }
    };
    if used != manifest.tensors.len() {
        return Err(Error::parse(
            manifest_path.display().to_string(),
            "manifest lists tensors the model does not have",
        ));
    }
    Ok(Checkpoint {
        config,
        params,
        has_separator,
        optimizer,
        meta: manifest.meta,
    })
}
