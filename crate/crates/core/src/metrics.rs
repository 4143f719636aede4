//! Utility measures for a set of per-node models, and the centralized solver
//! that supplies the reference optimum.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::dataset::{NodePartition, Sample};
use crate::error::{Error, Result};
use crate::objective::{local_gradient, local_hessian, local_objective, ObjectiveSpec};
use crate::topology::Graph;
use crate::vector::{dot, mean, ModelVector};

pub const RUN_RECORD_HEADER: &str = "k,total_risk,excess_risk,feasibility,consensus_error,accuracy";

/// Metrics for one outer iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunRecord {
    pub k: u64,
    /// `sum_i L_i(w_i)`
    pub total_risk: f64,
    /// `sum_i [L_i(w_i) - L_i(w*)]`
    pub excess_risk: f64,
    /// `beta * sum_i sum_{j in N_i} ||w_i - w_j||`
    pub feasibility: f64,
    /// `max_i ||w_i - mean_j w_j||`
    pub consensus_error: f64,
    pub accuracy: f64,
}

impl RunRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.15e},{:.15e},{:.15e},{:.15e},{:.15e}",
            self.k,
            self.total_risk,
            self.excess_risk,
            self.feasibility,
            self.consensus_error,
            self.accuracy
        )
    }
}

pub fn records_to_csv(records: &[RunRecord]) -> String {
    let mut out = String::from(RUN_RECORD_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentralizedOptimum {
    pub w_star: ModelVector,
    /// `sum_i L_i(w*)`
    pub objective_value: f64,
    /// `||grad sum_i L_i(w*)||`, the optimality certificate.
    pub gradient_norm: f64,
}

pub fn global_objective(partitions: &[NodePartition], spec: &ObjectiveSpec, w: &[f64]) -> Result<f64> {
    partitions.iter().map(|p| local_objective(p, spec, w)).sum()
}

pub fn global_gradient(
    partitions: &[NodePartition],
    spec: &ObjectiveSpec,
    w: &[f64],
) -> Result<ModelVector> {
    let mut g = ModelVector::zeros(w.len());
    for p in partitions {
        g.axpy(1.0, &local_gradient(p, spec, w)?);
    }
    Ok(g)
}

const MAX_NEWTON_ITERATIONS: usize = 500;

/// Minimizes `sum_i L_i(w)` from `w = 0`; see [`solve_centralized_from`].
pub fn solve_centralized(
    partitions: &[NodePartition],
    spec: &ObjectiveSpec,
    tol: f64,
) -> Result<CentralizedOptimum> {
    let dim = partitions
        .first()
        .ok_or_else(|| Error::Partition("no partitions".into()))?
        .dim();
    solve_centralized_from(partitions, spec, tol, ModelVector::zeros(dim))
}

/// Damped Newton iteration with Armijo backtracking until the gradient norm
/// drops below `tol`. Requires `lambda > 0`.
pub fn solve_centralized_from(
    partitions: &[NodePartition],
    spec: &ObjectiveSpec,
    tol: f64,
    start: ModelVector,
) -> Result<CentralizedOptimum> {
    if !(spec.lambda > 0.0) {
        return Err(Error::Parameter("centralized solve needs lambda > 0".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::Parameter(format!("tolerance must be > 0, got {tol}")));
    }
    let d = start.dim();
    let mut w = start;
    let mut value = global_objective(partitions, spec, &w)?;
    let mut grad = global_gradient(partitions, spec, &w)?;
    for _ in 0..MAX_NEWTON_ITERATIONS {
        let gnorm = grad.norm();
        if gnorm < tol {
            return Ok(CentralizedOptimum { w_star: w, objective_value: value, gradient_norm: gnorm });
        }
        let mut hessian = vec![0.0; d * d];
        for p in partitions {
            for (h, x) in hessian.iter_mut().zip(local_hessian(p, spec, &w)?) {
                *h += x;
            }
        }
        let h = DMatrix::from_row_slice(d, d, &hessian);
        let rhs = -DVector::from_column_slice(&grad);
        let direction: Vec<f64> = match h.cholesky() {
            Some(chol) => chol.solve(&rhs).iter().copied().collect(),
            None => rhs.iter().copied().collect(),
        };
        let slope = dot(&grad, &direction);

        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha > 1e-12 {
            let mut candidate = w.clone();
            candidate.axpy(alpha, &direction);
            let cand_value = global_objective(partitions, spec, &candidate)?;
            if cand_value <= value + 1e-4 * alpha * slope {
                accepted = Some((candidate, cand_value));
                break;
            }
            alpha *= 0.5;
        }
        // Near the optimum the Armijo test drowns in rounding; take the full
        // Newton step when it still shrinks the gradient.
        let (next, next_value) = match accepted {
            Some(a) => a,
            None => {
                let mut candidate = w.clone();
                candidate.axpy(1.0, &direction);
                let cand_grad = global_gradient(partitions, spec, &candidate)?;
                if cand_grad.norm() >= gnorm {
                    return Err(Error::NonConvergence {
                        iterations: MAX_NEWTON_ITERATIONS,
                        gradient_norm: gnorm,
                    });
                }
                let v = global_objective(partitions, spec, &candidate)?;
                (candidate, v)
            }
        };
        w = next;
        value = next_value;
        grad = global_gradient(partitions, spec, &w)?;
    }
    Err(Error::NonConvergence { iterations: MAX_NEWTON_ITERATIONS, gradient_norm: grad.norm() })
}

/// Excess empirical risk and feasibility violation. Each undirected edge is
/// counted once per direction.
pub fn utility_metric(
    models: &[ModelVector],
    w_star: &[f64],
    beta: f64,
    graph: &Graph,
    partitions: &[NodePartition],
    spec: &ObjectiveSpec,
) -> Result<(f64, f64)> {
    if !(beta >= 0.0) {
        return Err(Error::Parameter(format!("beta must be >= 0, got {beta}")));
    }
    let excess = excess_risk(models, w_star, partitions, spec)?;
    Ok((excess, feasibility(models, beta, graph)))
}

pub fn total_risk(models: &[ModelVector], partitions: &[NodePartition], spec: &ObjectiveSpec) -> Result<f64> {
    check_counts(models, partitions)?;
    models.iter().zip(partitions).map(|(w, p)| local_objective(p, spec, w)).sum()
}

pub fn excess_risk(
    models: &[ModelVector],
    w_star: &[f64],
    partitions: &[NodePartition],
    spec: &ObjectiveSpec,
) -> Result<f64> {
    check_counts(models, partitions)?;
    models
        .iter()
        .zip(partitions)
        .map(|(w, p)| Ok(local_objective(p, spec, w)? - local_objective(p, spec, w_star)?))
        .sum()
}

fn check_counts(models: &[ModelVector], partitions: &[NodePartition]) -> Result<()> {
    if models.len() != partitions.len() {
        return Err(Error::Partition(format!(
            "{} models for {} partitions",
            models.len(),
            partitions.len()
        )));
    }
    Ok(())
}

pub fn feasibility(models: &[ModelVector], beta: f64, graph: &Graph) -> f64 {
    let mut total = 0.0;
    for (i, w) in models.iter().enumerate() {
        for &j in graph.neighbors(i) {
            total += w.distance(&models[j]);
        }
    }
    beta * total
}

pub fn consensus_error(models: &[ModelVector]) -> f64 {
    let Some(center) = mean(models) else { return 0.0 };
    models.iter().map(|w| w.distance(&center)).fold(0.0, f64::max)
}

/// Fraction of `test` classified correctly by the mean of `models`. A zero
/// margin counts as a miss.
pub fn accuracy(models: &[ModelVector], test: &[Sample]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Parameter("accuracy needs a nonempty test split".into()));
    }
    let w = mean(models).ok_or_else(|| Error::Parameter("no models".into()))?;
    let mut correct = 0usize;
    for s in test {
        w.check_dim(s.dim())?;
        if dot(&w, &s.features) * s.sign() > 0.0 {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Which per-node models feed the metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelSource {
    /// Running averages of all inner iterates.
    Averaged,
    /// The broadcasts of the latest round.
    LastBroadcast,
}

/// Bundles everything needed to turn per-node models into a [`RunRecord`].
#[derive(Debug, Clone, Copy)]
pub struct Evaluator<'a> {
    pub graph: &'a Graph,
    pub partitions: &'a [NodePartition],
    pub spec: &'a ObjectiveSpec,
    pub optimum: &'a CentralizedOptimum,
    pub beta: f64,
    pub test: &'a [Sample],
}

impl Evaluator<'_> {
    pub fn record(&self, k: u64, models: &[ModelVector]) -> Result<RunRecord> {
        let total = total_risk(models, self.partitions, self.spec)?;
        Ok(RunRecord {
            k,
            total_risk: total,
            excess_risk: total - self.optimum.objective_value,
            feasibility: feasibility(models, self.beta, self.graph),
            consensus_error: consensus_error(models),
            accuracy: accuracy(models, self.test)?,
        })
    }
}

/// Content hash of the training partitions and regularizer, used to key
/// cached optima.
pub fn dataset_hash(partitions: &[NodePartition], spec: &ObjectiveSpec) -> String {
    let mut h = Sha256::new();
    h.update(spec.lambda.to_le_bytes());
    h.update((spec.node_count as u64).to_le_bytes());
    for p in partitions {
        h.update((p.node_id as u64).to_le_bytes());
        h.update((p.size() as u64).to_le_bytes());
        for s in p.samples() {
            h.update([s.label as u8]);
            for f in &s.features {
                h.update(f.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

pub fn optimum_to_text(opt: &CentralizedOptimum, hash: &str) -> String {
    let mut out = format!(
        "hash={hash}\nobjective_value={}\ngradient_norm={}\nw_star=",
        opt.objective_value, opt.gradient_norm
    );
    for (i, x) in opt.w_star.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{x}");
    }
    out.push('\n');
    out
}

/// Parses a cached optimum; returns `None` when the stored hash differs.
pub fn optimum_from_text(text: &str, hash: &str) -> Result<Option<CentralizedOptimum>> {
    let mut stored_hash = None;
    let mut value = None;
    let mut gnorm = None;
    let mut w = None;
    for (i, line) in text.lines().enumerate() {
        let bad = |m: String| Error::Parse { line: i + 1, message: m };
        let Some((key, rest)) = line.split_once('=') else { continue };
        match key {
            "hash" => stored_hash = Some(rest.to_string()),
            "objective_value" => value = Some(rest.parse::<f64>().map_err(|e| bad(e.to_string()))?),
            "gradient_norm" => gnorm = Some(rest.parse::<f64>().map_err(|e| bad(e.to_string()))?),
            "w_star" => {
                w = Some(
                    rest.split_whitespace()
                        .map(|t| t.parse::<f64>().map_err(|e| bad(e.to_string())))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            other => return Err(bad(format!("unknown key `{other}`"))),
        }
    }
    if stored_hash.as_deref() != Some(hash) {
        return Ok(None);
    }
    match (value, gnorm, w) {
        (Some(objective_value), Some(gradient_norm), Some(w)) => Ok(Some(CentralizedOptimum {
            w_star: ModelVector::from_vec(w),
            objective_value,
            gradient_norm,
        })),
        _ => Err(Error::Parse { line: 0, message: "incomplete optimum cache".into() }),
    }
}
