//! Flat `key = value` experiment configs with flag overrides.
//!
//! One pair per line, `#` starts a comment, unknown keys are hard errors.
//! Command-line `--set key=value` entries override file values; dedicated
//! flags (`--method`, `--seed`, `--out`) override both.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gradsense::dataio::{CifarVariant, SynthPattern};
use gradsense::objective::{MixParams, ScheduleSpec, Strategy};
use gradsense::optim::OptimizerChoice;

use crate::CliError;

/// Which attack engines to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MethodChoice {
    Dlg,
    Magia,
}

impl MethodChoice {
    pub fn parse(s: &str) -> Result<MethodChoice, CliError> {
        match s {
            "magia" => Ok(MethodChoice::Magia),
            "dlg" => Ok(MethodChoice::Dlg),
            other => Err(CliError::config(format!("unknown method `{other}`; allowed: magia, dlg"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MethodChoice::Magia => "magia",
            MethodChoice::Dlg => "dlg",
        }
    }
}

/// Where hidden batches come from.
#[derive(Debug, Clone)]
pub enum DatasetSource {
    Synth { pattern: SynthPattern, shape: (usize, usize, usize), num_classes: usize },
    Idx { images: PathBuf, labels: PathBuf },
    Cifar { path: PathBuf, variant: CifarVariant },
}

impl DatasetSource {
    pub fn name(&self) -> String {
        match self {
            DatasetSource::Synth { pattern, .. } => format!("synth:{}", pattern.name()),
            DatasetSource::Idx { .. } => "idx".to_string(),
            DatasetSource::Cifar { variant: CifarVariant::Cifar10, .. } => "cifar10".to_string(),
            DatasetSource::Cifar { variant: CifarVariant::Cifar100, .. } => "cifar100".to_string(),
        }
    }
}

/// Fully-typed experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub arch: String,
    pub batch_size: usize,
    pub iterations: usize,
    pub alpha: f64,
    pub tv_weight: f64,
    pub strategy: Strategy,
    pub constant_s: usize,
    pub e_script: usize,
    pub optimizer: OptimizerChoice,
    pub methods: Vec<MethodChoice>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub psnr_threshold: f64,
    pub clamp_images: bool,
    pub record_every: usize,
}

impl ExperimentConfig {
    pub fn schedule(&self) -> ScheduleSpec {
        ScheduleSpec {
            strategy: self.strategy,
            constant_s: self.constant_s,
            e_script: self.e_script,
            total_iters: self.iterations,
        }
    }

    /// The scheduling parameter reported in CSV rows.
    pub fn schedule_param(&self) -> String {
        match self.strategy {
            Strategy::Constant => self.constant_s.to_string(),
            Strategy::FracConst | Strategy::RevConst => self.e_script.to_string(),
            Strategy::FracTotal | Strategy::RevTotal => "-".to_string(),
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "dataset",
    "synth_pattern",
    "synth_shape",
    "num_classes",
    "idx_images",
    "idx_labels",
    "cifar_path",
    "arch",
    "batch_size",
    "iterations",
    "alpha",
    "tv_weight",
    "strategy",
    "constant_s",
    "e_script",
    "optimizer",
    "methods",
    "seeds",
    "out",
    "psnr_threshold",
    "clamp_images",
    "record_every",
];

fn parse_pairs(text: &str, origin: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("{origin}:{}: expected `key = value`, got `{line}`", lineno + 1)))?;
        let key = key.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(CliError::config(format!(
                "{origin}:{}: unknown key `{key}` (known keys: {})",
                lineno + 1,
                KNOWN_KEYS.join(", ")
            )));
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

fn required<'a>(map: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str, CliError> {
    map.get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| CliError::config(format!("missing required key `{key}`")))
}

fn parse_usize(map: &BTreeMap<String, String>, key: &str, default: Option<usize>) -> Result<usize, CliError> {
    match map.get(key) {
        None => default.ok_or_else(|| CliError::config(format!("missing required key `{key}`"))),
        Some(v) => v
            .parse()
            .map_err(|_| CliError::config(format!("key `{key}`: expected a nonnegative integer, got `{v}`"))),
    }
}

fn parse_f64(map: &BTreeMap<String, String>, key: &str, default: f64) -> Result<f64, CliError> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| CliError::config(format!("key `{key}`: expected a number, got `{v}`"))),
    }
}

fn parse_bool(map: &BTreeMap<String, String>, key: &str, default: bool) -> Result<bool, CliError> {
    match map.get(key).map(|s| s.as_str()) {
        None => Ok(default),
        Some("true") => Ok(true),
        Some("false") => Ok(false),
        Some(v) => Err(CliError::config(format!("key `{key}`: expected true or false, got `{v}`"))),
    }
}

fn parse_shape(v: &str) -> Result<(usize, usize, usize), CliError> {
    let parts: Vec<&str> = v.split('x').collect();
    if parts.len() != 3 {
        return Err(CliError::config(format!("synth_shape must look like `1x16x16`, got `{v}`")));
    }
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| p.parse().map_err(|_| CliError::config(format!("synth_shape component `{p}` is not an integer"))))
        .collect::<Result<_, _>>()?;
    Ok((nums[0], nums[1], nums[2]))
}

/// Parse a config file plus `key=value` override strings.
pub fn parse_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
    let mut map = parse_pairs(&text, &path.display().to_string())?;
    for (i, entry) in overrides.iter().enumerate() {
        let pairs = parse_pairs(entry, &format!("--set[{i}]"))?;
        if pairs.is_empty() {
            return Err(CliError::config(format!("--set[{i}]: expected `key=value`, got `{entry}`")));
        }
        map.extend(pairs);
    }
    build_config(&map)
}

fn build_config(map: &BTreeMap<String, String>) -> Result<ExperimentConfig, CliError> {
    let dataset_kind = map.get("dataset").map(|s| s.as_str()).unwrap_or("synth");
    let dataset = match dataset_kind {
        "synth" => {
            let pattern = match map.get("synth_pattern") {
                None => SynthPattern::Blocks,
                Some(v) => SynthPattern::parse(v).map_err(|e| CliError::config(e.to_string()))?,
            };
            let shape = match map.get("synth_shape") {
                None => (1, 16, 16),
                Some(v) => parse_shape(v)?,
            };
            let num_classes = parse_usize(map, "num_classes", Some(4))?;
            DatasetSource::Synth { pattern, shape, num_classes }
        }
        "idx" => DatasetSource::Idx {
            images: PathBuf::from(required(map, "idx_images")?),
            labels: PathBuf::from(required(map, "idx_labels")?),
        },
        "cifar10" => DatasetSource::Cifar {
            path: PathBuf::from(required(map, "cifar_path")?),
            variant: CifarVariant::Cifar10,
        },
        "cifar100" => DatasetSource::Cifar {
            path: PathBuf::from(required(map, "cifar_path")?),
            variant: CifarVariant::Cifar100,
        },
        other => {
            return Err(CliError::config(format!(
                "unknown dataset `{other}`; allowed: synth, idx, cifar10, cifar100"
            )))
        }
    };

    let arch = required(map, "arch")?.to_string();
    let batch_size = parse_usize(map, "batch_size", None)?;
    let iterations = parse_usize(map, "iterations", None)?;
    if batch_size == 0 {
        return Err(CliError::config("batch_size must be at least 1"));
    }
    if iterations == 0 {
        return Err(CliError::config("iterations must be at least 1"));
    }

    let alpha = parse_f64(map, "alpha", 0.999)?;
    let tv_weight = parse_f64(map, "tv_weight", 0.005)?;
    MixParams::new(alpha, tv_weight).map_err(|e| CliError::config(e.to_string()))?;

    let strategy = match map.get("strategy") {
        None => Strategy::Constant,
        Some(v) => Strategy::parse(v).map_err(|e| CliError::config(e.to_string()))?,
    };
    let constant_s = parse_usize(map, "constant_s", Some(1))?;
    let e_script = parse_usize(map, "e_script", Some(iterations))?;

    let optimizer = match map.get("optimizer") {
        None => OptimizerChoice::Lbfgs,
        Some(v) => OptimizerChoice::parse(v).map_err(|e| CliError::config(e.to_string()))?,
    };

    let methods = match map.get("methods") {
        None => vec![MethodChoice::Magia, MethodChoice::Dlg],
        Some(v) => v
            .split(',')
            .map(|m| MethodChoice::parse(m.trim()))
            .collect::<Result<Vec<_>, _>>()?,
    };
    if methods.is_empty() {
        return Err(CliError::config("methods must list at least one of magia, dlg"));
    }

    let seeds: Vec<u64> = match map.get("seeds") {
        None => vec![1, 2, 3, 4, 5],
        Some(v) => v
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| CliError::config(format!("seed `{s}` is not a nonnegative integer")))
            })
            .collect::<Result<_, _>>()?,
    };
    if seeds.is_empty() {
        return Err(CliError::config("seeds must list at least one seed"));
    }

    let psnr_threshold = parse_f64(map, "psnr_threshold", 19.0)?;
    if !psnr_threshold.is_finite() {
        return Err(CliError::config("psnr_threshold must be finite"));
    }

    let config = ExperimentConfig {
        dataset,
        arch,
        batch_size,
        iterations,
        alpha,
        tv_weight,
        strategy,
        constant_s,
        e_script,
        optimizer,
        methods,
        seeds,
        out: PathBuf::from(map.get("out").map(|s| s.as_str()).unwrap_or("out")),
        psnr_threshold,
        clamp_images: parse_bool(map, "clamp_images", false)?,
        record_every: parse_usize(map, "record_every", Some(50))?,
    };
    config
        .schedule()
        .validate(config.batch_size)
        .map_err(|e| CliError::config(e.to_string()))?;
    Ok(config)
}
