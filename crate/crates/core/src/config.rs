//! Experiment configuration: flat `key = value` lines, `#` comments, list
//! values separated by commas.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;

use crate::error::{Error, Result};
use crate::metrics::ModelSource;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic { samples: usize, dim: usize, label_noise: f64 },
    /// Directory holding `adult.data` and `adult.test`.
    Adult { dir: PathBuf },
    /// Preprocessed cache file.
    Cache { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TopologyKind {
    Complete,
    Ring,
    EdgeList(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub data_seed: u64,
    pub test_fraction: f64,
    pub topology: TopologyKind,
    pub nodes: usize,
    pub rho: Vec<f64>,
    pub lambda: f64,
    pub domain_diameter: f64,
    pub projection: bool,
    pub c0: Option<f64>,
    pub c2: Option<f64>,
    pub t: Vec<u64>,
    pub l: Vec<u64>,
    pub epsilon: Vec<f64>,
    pub delta: f64,
    pub seeds: Vec<u64>,
    pub noise: bool,
    pub minibatch: Option<usize>,
    pub beta: Option<f64>,
    pub metric_source: ModelSource,
    pub oracle_tol: f64,
    pub output_dir: PathBuf,
    /// Keys that were absent from the file and took their default.
    pub defaulted: Vec<String>,
}

/// Every accepted key with its default, in echo order. `None` marks keys
/// that are unset unless given.
const KEYS: &[(&str, Option<&str>)] = &[
    ("dataset", Some("synthetic")),
    ("adult_dir", Some("data/adult")),
    ("cache_path", None),
    ("synthetic_samples", Some("1000")),
    ("synthetic_dim", Some("10")),
    ("label_noise", Some("0.1")),
    ("data_seed", Some("0")),
    ("test_fraction", Some("0.2")),
    ("topology", Some("complete")),
    ("edge_list", None),
    ("nodes", Some("100")),
    ("rho", Some("0.001")),
    ("lambda", Some("0.0001")),
    ("domain_diameter", Some("2")),
    ("projection", Some("true")),
    ("c0", None),
    ("c2", None),
    ("t", Some("100")),
    ("l", Some("10")),
    ("epsilon", Some("1")),
    ("delta", Some("0.00001")),
    ("seeds", Some("0,1,2,3,4,5,6,7,8,9")),
    ("noise", Some("true")),
    ("minibatch", None),
    ("beta", None),
    ("metric_source", Some("averaged")),
    ("oracle_tol", Some("1e-8")),
    ("output_dir", Some("out")),
];

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg = parse_config_str(&text)?;
    info!("configuration from {}:\n{}", path.display(), cfg.to_text());
    if !cfg.defaulted.is_empty() {
        info!("defaults applied for: {}", cfg.defaulted.join(", "));
    }
    Ok(cfg)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let mut raw: BTreeMap<&str, String> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: lineno + 1,
            message: format!("expected `key = value`, found `{line}`"),
        })?;
        let key = key.trim();
        let Some(&(known, _)) = KEYS.iter().find(|(k, _)| *k == key) else {
            return Err(Error::config(key, "unknown key"));
        };
        if raw.insert(known, value.trim().to_string()).is_some() {
            return Err(Error::config(key, "given more than once"));
        }
    }

    let mut defaulted = Vec::new();
    let mut get = |key: &'static str| -> Option<String> {
        if let Some(v) = raw.get(key) {
            return Some(v.clone());
        }
        let default = KEYS.iter().find(|(k, _)| *k == key).and_then(|(_, d)| *d)?;
        defaulted.push(key.to_string());
        Some(default.to_string())
    };

    let dataset = match get("dataset").as_deref() {
        Some("synthetic") => DatasetSource::Synthetic {
            samples: scalar(&get("synthetic_samples"), "synthetic_samples")?,
            dim: scalar(&get("synthetic_dim"), "synthetic_dim")?,
            label_noise: scalar(&get("label_noise"), "label_noise")?,
        },
        Some("adult") => DatasetSource::Adult { dir: PathBuf::from(get("adult_dir").unwrap_or_default()) },
        Some("cache") => DatasetSource::Cache {
            path: get("cache_path")
                .map(PathBuf::from)
                .ok_or_else(|| Error::config("cache_path", "required when dataset = cache"))?,
        },
        other => {
            return Err(Error::config(
                "dataset",
                format!("expected synthetic, adult or cache, got `{}`", other.unwrap_or("")),
            ))
        }
    };
    let topology = match get("topology").as_deref() {
        Some("complete") => TopologyKind::Complete,
        Some("ring") => TopologyKind::Ring,
        Some("edge_list") => TopologyKind::EdgeList(
            get("edge_list")
                .map(PathBuf::from)
                .ok_or_else(|| Error::config("edge_list", "required when topology = edge_list"))?,
        ),
        other => {
            return Err(Error::config(
                "topology",
                format!("expected complete, ring or edge_list, got `{}`", other.unwrap_or("")),
            ))
        }
    };
    let metric_source = match get("metric_source").as_deref() {
        Some("averaged") => ModelSource::Averaged,
        Some("last") => ModelSource::LastBroadcast,
        other => {
            return Err(Error::config(
                "metric_source",
                format!("expected averaged or last, got `{}`", other.unwrap_or("")),
            ))
        }
    };

    let cfg = ExperimentConfig {
        dataset,
        data_seed: scalar(&get("data_seed"), "data_seed")?,
        test_fraction: scalar(&get("test_fraction"), "test_fraction")?,
        topology,
        nodes: scalar(&get("nodes"), "nodes")?,
        rho: list(&get("rho"), "rho")?,
        lambda: scalar(&get("lambda"), "lambda")?,
        domain_diameter: scalar(&get("domain_diameter"), "domain_diameter")?,
        projection: scalar(&get("projection"), "projection")?,
        c0: optional(&get("c0"), "c0")?,
        c2: optional(&get("c2"), "c2")?,
        t: list(&get("t"), "t")?,
        l: list(&get("l"), "l")?,
        epsilon: list(&get("epsilon"), "epsilon")?,
        delta: scalar(&get("delta"), "delta")?,
        seeds: list(&get("seeds"), "seeds")?,
        noise: scalar(&get("noise"), "noise")?,
        minibatch: optional(&get("minibatch"), "minibatch")?,
        beta: optional(&get("beta"), "beta")?,
        metric_source,
        oracle_tol: scalar(&get("oracle_tol"), "oracle_tol")?,
        output_dir: PathBuf::from(get("output_dir").unwrap_or_default()),
        defaulted,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn scalar<T: FromStr>(value: &Option<String>, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let v = value.as_deref().ok_or_else(|| Error::config(key, "missing value"))?;
    v.parse().map_err(|e| Error::config(key, format!("cannot parse `{v}`: {e}")))
}

fn optional<T: FromStr>(value: &Option<String>, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    value.as_ref().map(|_| scalar(value, key)).transpose()
}

fn list<T: FromStr>(value: &Option<String>, key: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let v = value.as_deref().ok_or_else(|| Error::config(key, "missing value"))?;
    let items = v
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| Error::config(key, format!("cannot parse `{s}`: {e}"))))
        .collect::<Result<Vec<T>>>()?;
    if items.is_empty() {
        return Err(Error::config(key, "list is empty"));
    }
    Ok(items)
}

fn require(ok: bool, key: &str, message: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(key, message))
    }
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if let DatasetSource::Synthetic { samples, dim, label_noise } = self.dataset {
            require(samples >= 1, "synthetic_samples", "must be >= 1")?;
            require(dim >= 1, "synthetic_dim", "must be >= 1")?;
            require((0.0..=1.0).contains(&label_noise), "label_noise", "must lie in [0, 1]")?;
        }
        require(
            self.test_fraction > 0.0 && self.test_fraction < 1.0,
            "test_fraction",
            "must lie in (0, 1)",
        )?;
        let min_nodes = match self.topology {
            TopologyKind::Ring => 3,
            _ => 2,
        };
        require(self.nodes >= min_nodes, "nodes", format!("must be >= {min_nodes}"))?;
        require(self.rho.iter().all(|&r| positive(r)), "rho", "every value must be > 0")?;
        require(positive(self.lambda), "lambda", "must be > 0")?;
        require(positive(self.domain_diameter), "domain_diameter", "must be > 0")?;
        require(self.c0.is_none_or(positive), "c0", "must be > 0")?;
        require(self.c2.is_none_or(positive), "c2", "must be > 0")?;
        require(self.t.iter().all(|&t| t >= 1), "t", "every value must be >= 1")?;
        require(self.l.iter().all(|&l| l >= 1), "l", "every value must be >= 1")?;
        require(self.epsilon.iter().all(|&e| positive(e)), "epsilon", "every value must be > 0")?;
        require(self.delta > 0.0 && self.delta < 1.0, "delta", "must lie in (0, 1)")?;
        require(!self.seeds.is_empty(), "seeds", "must not be empty")?;
        require(self.minibatch.is_none_or(|b| b >= 1), "minibatch", "must be >= 1")?;
        require(self.beta.is_none_or(|b| b >= 0.0 && b.is_finite()), "beta", "must be >= 0")?;
        require(positive(self.oracle_tol), "oracle_tol", "must be > 0")?;
        Ok(())
    }

    /// Every setting, defaults included, in the input format.
    pub fn to_text(&self) -> String {
        fn join<T: ToString>(v: &[T]) -> String {
            v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
        }
        let mut out = String::new();
        match &self.dataset {
            DatasetSource::Synthetic { samples, dim, label_noise } => {
                let _ = writeln!(out, "dataset = synthetic");
                let _ = writeln!(out, "synthetic_samples = {samples}");
                let _ = writeln!(out, "synthetic_dim = {dim}");
                let _ = writeln!(out, "label_noise = {label_noise}");
            }
            DatasetSource::Adult { dir } => {
                let _ = writeln!(out, "dataset = adult");
                let _ = writeln!(out, "adult_dir = {}", dir.display());
            }
            DatasetSource::Cache { path } => {
                let _ = writeln!(out, "dataset = cache");
                let _ = writeln!(out, "cache_path = {}", path.display());
            }
        }
        let _ = writeln!(out, "data_seed = {}", self.data_seed);
        let _ = writeln!(out, "test_fraction = {}", self.test_fraction);
        match &self.topology {
            TopologyKind::Complete => {
                let _ = writeln!(out, "topology = complete");
            }
            TopologyKind::Ring => {
                let _ = writeln!(out, "topology = ring");
            }
            TopologyKind::EdgeList(p) => {
                let _ = writeln!(out, "topology = edge_list");
                let _ = writeln!(out, "edge_list = {}", p.display());
            }
        }
        let _ = writeln!(out, "nodes = {}", self.nodes);
        let _ = writeln!(out, "rho = {}", join(&self.rho));
        let _ = writeln!(out, "lambda = {}", self.lambda);
        let _ = writeln!(out, "domain_diameter = {}", self.domain_diameter);
        let _ = writeln!(out, "projection = {}", self.projection);
        if let Some(c0) = self.c0 {
            let _ = writeln!(out, "c0 = {c0}");
        }
        if let Some(c2) = self.c2 {
            let _ = writeln!(out, "c2 = {c2}");
        }
        let _ = writeln!(out, "t = {}", join(&self.t));
        let _ = writeln!(out, "l = {}", join(&self.l));
        let _ = writeln!(out, "epsilon = {}", join(&self.epsilon));
        let _ = writeln!(out, "delta = {}", self.delta);
        let _ = writeln!(out, "seeds = {}", join(&self.seeds));
        let _ = writeln!(out, "noise = {}", self.noise);
        if let Some(b) = self.minibatch {
            let _ = writeln!(out, "minibatch = {b}");
        }
        if let Some(b) = self.beta {
            let _ = writeln!(out, "beta = {b}");
        }
        let source = match self.metric_source {
            ModelSource::Averaged => "averaged",
            ModelSource::LastBroadcast => "last",
        };
        let _ = writeln!(out, "metric_source = {source}");
        let _ = writeln!(out, "oracle_tol = {}", self.oracle_tol);
        let _ = writeln!(out, "output_dir = {}", self.output_dir.display());
        out
    }
}
