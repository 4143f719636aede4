//! Labelled samples, the Adult preprocessing pipeline, a synthetic generator,
//! and the split of training data across nodes.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::topology::Graph;
use crate::vector::{dot, norm};

/// Encoded dimension of the Adult data after one-hot encoding.
pub const ADULT_TARGET_DIM: usize = 104;

const ADULT_FIELDS: usize = 15;
const ADULT_CONTINUOUS: [usize; 6] = [0, 2, 4, 10, 11, 12];
const ADULT_CATEGORICAL: [usize; 8] = [1, 3, 5, 6, 7, 8, 9, 13];

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    /// `+1` or `-1`.
    pub label: i8,
}

impl Sample {
    pub fn new(features: Vec<f64>, label: i8) -> Result<Self> {
        if label != 1 && label != -1 {
            return Err(Error::Parameter(format!("label must be +1 or -1, got {label}")));
        }
        Ok(Sample { features, label })
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }

    pub fn sign(&self) -> f64 {
        f64::from(self.label)
    }
}

/// The private training data held by one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodePartition {
    pub node_id: usize,
    samples: Vec<Sample>,
}

impl NodePartition {
    pub fn new(node_id: usize, samples: Vec<Sample>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::Partition(format!("node {node_id} has no samples")));
        };
        let d = first.dim();
        if let Some(bad) = samples.iter().find(|s| s.dim() != d) {
            return Err(Error::Shape { expected: d, actual: bad.dim() });
        }
        Ok(NodePartition { node_id, samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// `m_i`
    pub fn size(&self) -> usize {
        self.samples.len()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].dim()
    }
}

/// Output of a preprocessing pass.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub dim: usize,
}

/// One raw Adult record, fields trimmed. Label is already stripped of any
/// trailing period.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdultRow {
    pub fields: Vec<String>,
}

impl AdultRow {
    fn has_missing(&self) -> bool {
        self.fields.iter().any(|f| f == "?")
    }
}

/// Parses the UCI comma-separated text. Blank lines and the `|1x3 Cross
/// validator` banner of `adult.test` are skipped.
pub fn parse_adult(text: &str) -> Result<Vec<AdultRow>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('|') {
            continue;
        }
        let mut fields: Vec<String> = line.split(',').map(|f| f.trim().to_string()).collect();
        if fields.len() != ADULT_FIELDS {
            return Err(Error::Parse {
                line: lineno + 1,
                message: format!("expected {ADULT_FIELDS} fields, found {}", fields.len()),
            });
        }
        let label = fields[ADULT_FIELDS - 1].trim_end_matches('.').to_string();
        fields[ADULT_FIELDS - 1] = label;
        rows.push(AdultRow { fields });
    }
    Ok(rows)
}

/// Drops rows with missing values, one-hot encodes the categorical columns,
/// scales every column to max-abs 1, then pulls every row into the unit ball.
pub fn preprocess_adult(rows: &[AdultRow]) -> Result<Dataset> {
    let complete: Vec<&AdultRow> = rows.iter().filter(|r| !r.has_missing()).collect();

    let categories: Vec<Vec<&str>> = ADULT_CATEGORICAL
        .iter()
        .map(|&c| {
            let set: BTreeSet<&str> = complete.iter().map(|r| r.fields[c].as_str()).collect();
            set.into_iter().collect()
        })
        .collect();
    let dim = ADULT_CONTINUOUS.len() + categories.iter().map(Vec::len).sum::<usize>();

    let mut matrix = Vec::with_capacity(complete.len());
    let mut labels = Vec::with_capacity(complete.len());
    for (idx, row) in complete.iter().enumerate() {
        let mut features = Vec::with_capacity(dim);
        for &c in &ADULT_CONTINUOUS {
            let v: f64 = row.fields[c].parse().map_err(|_| Error::Parse {
                line: idx + 1,
                message: format!("non-numeric value `{}` in column {c}", row.fields[c]),
            })?;
            features.push(v);
        }
        for (cats, &c) in categories.iter().zip(&ADULT_CATEGORICAL) {
            let hit = cats.binary_search(&row.fields[c].as_str()).unwrap_or(usize::MAX);
            features.extend((0..cats.len()).map(|k| if k == hit { 1.0 } else { 0.0 }));
        }
        let label = match row.fields[ADULT_FIELDS - 1].as_str() {
            ">50K" => 1,
            "<=50K" => -1,
            other => {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!("unknown income label `{other}`"),
                })
            }
        };
        matrix.push(features);
        labels.push(label);
    }

    scale_columns(&mut matrix);
    for row in &mut matrix {
        normalize_row(row);
    }
    if dim != ADULT_TARGET_DIM {
        warn!("adult encoding produced d = {dim} (target {ADULT_TARGET_DIM})");
    }
    let samples = matrix
        .into_iter()
        .zip(labels)
        .map(|(features, label)| Sample { features, label })
        .collect();
    Ok(Dataset { samples, dim })
}

/// Reads and merges the given Adult files (typically `adult.data` and
/// `adult.test`), then preprocesses the merged rows.
pub fn load_adult(paths: &[&Path]) -> Result<Dataset> {
    let mut rows = Vec::new();
    for path in paths {
        let text = fs::read_to_string(path).map_err(|e| Error::io(*path, e))?;
        rows.extend(parse_adult(&text)?);
    }
    preprocess_adult(&rows)
}

/// Divides each column by its max absolute value; all-zero columns are left alone.
pub fn scale_columns(matrix: &mut [Vec<f64>]) {
    let Some(first) = matrix.first() else { return };
    let mut max_abs = vec![0.0f64; first.len()];
    for row in matrix.iter() {
        for (m, v) in max_abs.iter_mut().zip(row) {
            *m = m.max(v.abs());
        }
    }
    for row in matrix.iter_mut() {
        for (v, m) in row.iter_mut().zip(&max_abs) {
            if *m > 0.0 {
                *v /= m;
            }
        }
    }
}

/// Divides by `max(1, ||row||)`.
pub fn normalize_row(row: &mut [f64]) {
    let n = norm(row);
    if n > 1.0 {
        row.iter_mut().for_each(|v| *v /= n);
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub samples: Vec<Sample>,
    /// Ground-truth separator used to assign labels.
    pub separator: Vec<f64>,
}

/// Gaussian features scaled by `1/sqrt(d)` and clipped into the unit ball,
/// labelled by the sign of a random separator, with each label flipped
/// independently with probability `label_noise`.
pub fn generate_synthetic(
    n_samples: usize,
    dim: usize,
    seed: u64,
    label_noise: f64,
) -> Result<SyntheticData> {
    if n_samples == 0 || dim == 0 {
        return Err(Error::Parameter("synthetic data needs n_samples >= 1 and d >= 1".into()));
    }
    if !(0.0..=1.0).contains(&label_noise) {
        return Err(Error::Parameter(format!("label noise {label_noise} not in [0, 1]")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let separator: Vec<f64> = (0..dim).map(|_| std_normal.sample(&mut rng)).collect();
    let feature_dist = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("finite std");
    let samples = (0..n_samples)
        .map(|_| {
            let mut features: Vec<f64> = (0..dim).map(|_| feature_dist.sample(&mut rng)).collect();
            normalize_row(&mut features);
            let mut label = if dot(&separator, &features) >= 0.0 { 1 } else { -1 };
            if label_noise > 0.0 && rng.random::<f64>() < label_noise {
                label = -label;
            }
            Sample { features, label }
        })
        .collect();
    Ok(SyntheticData { samples, separator })
}

/// Seeded shuffle followed by a held-out split of `round(test_fraction * len)` samples.
pub fn train_test_split(
    samples: &[Sample],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Parameter(format!("test fraction {test_fraction} not in [0, 1)")));
    }
    let mut shuffled = samples.to_vec();
    shuffled.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let n_test = (test_fraction * samples.len() as f64).round() as usize;
    let train = shuffled.split_off(n_test);
    Ok((train, shuffled))
}

/// Shuffles by `seed` and cuts into `n` contiguous blocks whose sizes differ
/// by at most one; the first `len % n` blocks get the extra sample.
pub fn partition_even(samples: &[Sample], graph: &Graph, seed: u64) -> Result<Vec<NodePartition>> {
    let n = graph.node_count();
    if samples.len() < n {
        return Err(Error::Partition(format!(
            "{} samples cannot cover {n} nodes",
            samples.len()
        )));
    }
    let mut shuffled = samples.to_vec();
    shuffled.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let base = samples.len() / n;
    let extra = samples.len() % n;
    let mut rest = shuffled.into_iter();
    (0..n)
        .map(|i| {
            let size = base + usize::from(i < extra);
            NodePartition::new(i, rest.by_ref().take(size).collect())
        })
        .collect()
}

/// Serializes samples in the cache format: a `d=<int> n=<int>` header, then
/// one `label f1 ... fd` line per sample.
pub fn write_cache(dataset: &Dataset) -> String {
    let mut out = format!("d={} n={}\n", dataset.dim, dataset.samples.len());
    for s in &dataset.samples {
        let _ = write!(out, "{}", s.label);
        for f in &s.features {
            let _ = write!(out, " {f}");
        }
        out.push('\n');
    }
    out
}

pub fn read_cache(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, message: "empty cache file".into() })?;
    let header_err = || Error::Parse { line: 1, message: format!("bad header `{header}`") };
    let mut dim = None;
    let mut count = None;
    for tok in header.split_whitespace() {
        match tok.split_once('=') {
            Some(("d", v)) => dim = Some(v.parse::<usize>().map_err(|_| header_err())?),
            Some(("n", v)) => count = Some(v.parse::<usize>().map_err(|_| header_err())?),
            _ => return Err(header_err()),
        }
    }
    let (dim, count) = (dim.ok_or_else(header_err)?, count.ok_or_else(header_err)?);
    let mut samples = Vec::with_capacity(count);
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse { line: idx + 1, message };
        let mut toks = line.split_whitespace();
        let label: i8 = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("missing label".into()))?;
        let features = toks
            .map(|t| t.parse::<f64>().map_err(|e| bad(format!("{e}"))))
            .collect::<Result<Vec<_>>>()?;
        if features.len() != dim {
            return Err(bad(format!("expected {dim} features, found {}", features.len())));
        }
        samples.push(Sample::new(features, label).map_err(|e| bad(e.to_string()))?);
    }
    if samples.len() != count {
        return Err(Error::Parse {
            line: 1,
            message: format!("header says n={count} but {} samples follow", samples.len()),
        });
    }
    Ok(Dataset { samples, dim })
}

#[cfg(test)]
mod tests {
    use super::*;

    const ROW: &str = "39, State-gov, 77516, Bachelors, 13, Never-married, Adm-clerical, Not-in-family, White, Male, 2174, 0, 40, United-States, <=50K";

    #[test]
    fn missing_values_are_dropped() {
        let text = format!(
            "{ROW}\n50, ?, 83311, Bachelors, 13, Married-civ-spouse, Exec-managerial, Husband, White, Male, 0, 0, 13, United-States, >50K\n"
        );
        let rows = parse_adult(&text).unwrap();
        assert_eq!(rows.len(), 2);
        let ds = preprocess_adult(&rows).unwrap();
        assert_eq!(ds.samples.len(), 1);
        assert_eq!(ds.samples[0].label, -1);
    }

    #[test]
    fn test_file_labels_lose_trailing_period() {
        let text = "|1x3 Cross validator\n25, Private, 226802, 11th, 7, Never-married, Machine-op-inspct, Own-child, Black, Male, 0, 0, 40, United-States, >50K.\n";
        let rows = parse_adult(text).unwrap();
        let ds = preprocess_adult(&rows).unwrap();
        assert_eq!(ds.samples[0].label, 1);
    }

    #[test]
    fn wrong_field_count_names_line() {
        let text = format!("{ROW}\n\n1, 2, 3\n");
        assert!(matches!(parse_adult(&text), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn zero_numeric_row_is_retained() {
        let text = "0, Private, 0, HS-grad, 0, Divorced, Sales, Unmarried, White, Female, 0, 0, 0, Cuba, <=50K\n";
        let ds = preprocess_adult(&parse_adult(text).unwrap()).unwrap();
        assert_eq!(ds.samples.len(), 1);
        assert!(norm(&ds.samples[0].features) <= 1.0 + 1e-12);
        // six continuous columns + one category per categorical attribute
        assert_eq!(ds.dim, 6 + 8);
    }

    #[test]
    fn row_normalization_is_idempotent() {
        let mut row = vec![3.0, 4.0, 12.0];
        normalize_row(&mut row);
        let once = row.clone();
        normalize_row(&mut row);
        assert_eq!(row, once);
        let mut short = vec![0.3, 0.4];
        normalize_row(&mut short);
        assert_eq!(short, vec![0.3, 0.4]);
    }

    #[test]
    fn column_scaling_skips_zero_columns() {
        let mut m = vec![vec![2.0, 0.0, -4.0], vec![1.0, 0.0, 2.0]];
        scale_columns(&mut m);
        assert_eq!(m, vec![vec![1.0, 0.0, -1.0], vec![0.5, 0.0, 0.5]]);
    }

    #[test]
    fn synthetic_is_deterministic_and_bounded() {
        let a = generate_synthetic(100, 5, 7, 0.1).unwrap();
        let b = generate_synthetic(100, 5, 7, 0.1).unwrap();
        assert_eq!(a.samples, b.samples);
        assert!(a.samples.iter().all(|s| norm(&s.features) <= 1.0 + 1e-12));
        assert!(generate_synthetic(0, 5, 7, 0.0).is_err());
    }

    #[test]
    fn noiseless_synthetic_labels_follow_separator() {
        let data = generate_synthetic(500, 4, 3, 0.0).unwrap();
        for s in &data.samples {
            let z: f64 = (0..4).map(|k| data.separator[k] * s.features[k]).sum();
            assert_eq!(s.label, if z >= 0.0 { 1 } else { -1 });
        }
    }

    #[test]
    fn partition_sizes() {
        let data = generate_synthetic(10, 2, 1, 0.0).unwrap().samples;
        let g = Graph::complete(5).unwrap();
        let parts = partition_even(&data, &g, 9).unwrap();
        assert!(parts.iter().all(|p| p.size() == 2));
        assert_eq!(parts, partition_even(&data, &g, 9).unwrap());
        assert!(matches!(
            partition_even(&data[..3], &g, 9),
            Err(Error::Partition(_))
        ));
    }

    #[test]
    fn partition_sizes_follow_divmod() {
        let samples = vec![Sample { features: vec![0.0], label: 1 }; 45_222];
        let g = Graph::complete(100).unwrap();
        let parts = partition_even(&samples, &g, 0).unwrap();
        assert_eq!(parts.iter().filter(|p| p.size() == 453).count(), 22);
        assert_eq!(parts.iter().filter(|p| p.size() == 452).count(), 78);
        assert_eq!(parts.iter().map(NodePartition::size).sum::<usize>(), 45_222);
    }

    #[test]
    fn cache_roundtrip() {
        let samples = generate_synthetic(20, 3, 5, 0.2).unwrap().samples;
        let ds = Dataset { samples, dim: 3 };
        let back = read_cache(&write_cache(&ds)).unwrap();
        assert_eq!(back.samples, ds.samples);
        assert!(read_cache("d=2 n=1\n1 0.5\n").is_err());
    }
}
