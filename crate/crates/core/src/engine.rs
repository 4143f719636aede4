//! Synchronous simulation of differentially private consensus ADMM with `l`
//! noisy linearized primal updates per node per round.
//!
//! Each round `k`:
//!
//! 1. every node starts from its last inner iterate and performs `l` closed-form
//!    updates of the linearized augmented Lagrangian, perturbing each result
//!    with Gaussian noise scaled to the update's sensitivity;
//! 2. every node broadcasts the mean of its `l` noisy iterates;
//! 3. every node moves its dual variable against the disagreement with its
//!    neighbors' broadcasts.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;

use crate::dataset::NodePartition;
use crate::error::{Error, Result};
use crate::objective::{local_gradient, project_to_domain, subset_gradient, ObjectiveSpec};
use crate::privacy::{gaussian_perturb, sensitivity, update_rng, PrivacyBudget, SensitivityParams};
use crate::topology::Graph;
use crate::vector::{mean, ModelVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmConfig {
    /// Penalty `rho`.
    pub rho: f64,
    /// Outer iterations.
    pub t: u64,
    /// Inner updates per outer iteration.
    pub l: u64,
    pub noise_enabled: bool,
    /// Project every primal iterate onto the ball of diameter `D`.
    pub projection_enabled: bool,
    /// Use a with-replacement minibatch of this size instead of the full local gradient.
    pub minibatch_size: Option<usize>,
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Parameter(format!("rho must be > 0, got {}", self.rho)));
        }
        if self.t == 0 || self.l == 0 {
            return Err(Error::Parameter(format!(
                "t and l must be >= 1, got t={}, l={}",
                self.t, self.l
            )));
        }
        if self.minibatch_size == Some(0) {
            return Err(Error::Parameter("minibatch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// The learning-rate schedule
/// `eta(k, r) = sqrt(2 k r) / D * sqrt(c2^2 / n^2 + 8 d c0^2 c1^2 t l ln(1.25/delta) / (eps^2 m_i^2))`.
///
/// With noise disabled the privacy term is dropped (the `eps -> inf` limit).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EtaSchedule {
    diameter: f64,
    smooth_term: f64,
    /// Privacy term times `m_i^2`.
    noise_numerator: f64,
}

impl EtaSchedule {
    pub fn new(spec: &ObjectiveSpec, dim: usize, budget: Option<&PrivacyBudget>) -> Self {
        let c2_over_n = spec.objective_lipschitz / spec.node_count as f64;
        let noise_numerator = budget.map_or(0.0, |b| {
            dim as f64
                * b.c0.powi(2)
                * spec.loss_lipschitz.powi(2)
                * (b.t * b.l) as f64
                * 8.0
                * (1.25 / b.delta).ln()
                / b.epsilon.powi(2)
        });
        EtaSchedule {
            diameter: spec.domain_diameter,
            smooth_term: c2_over_n * c2_over_n,
            noise_numerator,
        }
    }

    /// `eta` for outer index `k >= 1` and inner index `r >= 1` on a node holding `m_i` samples.
    pub fn eta(&self, k: u64, r: u64, sample_count: usize) -> f64 {
        let m = sample_count as f64;
        (2.0 * k as f64 * r as f64).sqrt() / self.diameter
            * (self.smooth_term + self.noise_numerator / (m * m)).sqrt()
    }
}

/// Everything one node holds between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub node_id: usize,
    /// Current noisy inner iterate.
    pub w_inner: ModelVector,
    /// This node's broadcast from the previous round.
    pub w_prev_broadcast: ModelVector,
    /// Neighbors' broadcasts from the previous round, keyed by node id.
    pub neighbor_broadcasts: BTreeMap<usize, ModelVector>,
    /// Aggregated dual variable.
    pub dual: ModelVector,
    /// Noisy iterates produced in the current round.
    pub inner_history: Vec<ModelVector>,
    /// Running mean of every iterate an inner update started from.
    pub averaged_output: ModelVector,
    pub averaged_count: u64,
}

impl NodeState {
    /// All-zero state with zero broadcasts recorded for each neighbor.
    pub fn new(node_id: usize, dim: usize, neighbors: &[usize]) -> Self {
        NodeState {
            node_id,
            w_inner: ModelVector::zeros(dim),
            w_prev_broadcast: ModelVector::zeros(dim),
            neighbor_broadcasts: neighbors.iter().map(|&j| (j, ModelVector::zeros(dim))).collect(),
            dual: ModelVector::zeros(dim),
            inner_history: Vec::new(),
            averaged_output: ModelVector::zeros(dim),
            averaged_count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_inner.dim()
    }

    fn fold_into_average(&mut self) {
        self.averaged_count += 1;
        let step = 1.0 / self.averaged_count as f64;
        for (avg, x) in self.averaged_output.iter_mut().zip(self.w_inner.iter()) {
            *avg += (x - *avg) * step;
        }
    }

    /// Closed-form minimizer of the linearized local Lagrangian at the
    /// current inner iterate, followed by noise and optional projection.
    pub fn primal_inner_update<R: Rng + ?Sized>(
        &mut self,
        step: &InnerStep<'_>,
        rng: &mut R,
    ) -> Result<()> {
        let d = self.dim();
        for v in [&self.w_prev_broadcast, &self.dual] {
            v.check_dim(d)?;
        }
        let degree = self.neighbor_broadcasts.len() as f64;
        let grad = match step.minibatch_size {
            Some(b) => minibatch_gradient(step.partition, step.spec, b, rng, &self.w_inner)?,
            None => local_gradient(step.partition, step.spec, &self.w_inner)?,
        };

        self.fold_into_average();

        let mut numerator = grad;
        numerator.scale(-1.0);
        numerator.axpy(2.0, &self.dual);
        for w_j in self.neighbor_broadcasts.values() {
            w_j.check_dim(d)?;
            numerator.axpy(step.rho, w_j);
        }
        numerator.axpy(step.rho * degree, &self.w_prev_broadcast);
        numerator.axpy(step.eta, &self.w_inner);
        numerator.scale(1.0 / (2.0 * step.rho * degree + step.eta));

        if let Some((s, sigma)) = step.noise {
            gaussian_perturb(&mut numerator, s, sigma, rng);
        }
        if let Some(diameter) = step.projection_diameter {
            project_to_domain(&mut numerator, diameter);
        }
        self.w_inner = numerator;
        self.inner_history.push(self.w_inner.clone());
        Ok(())
    }

    /// Mean of the `l` iterates of this round. The next round continues from
    /// the last iterate, which is already held in `w_inner`.
    pub fn finish_outer_iteration(&mut self, l: u64) -> Result<ModelVector> {
        if self.inner_history.len() as u64 != l {
            return Err(Error::Protocol(format!(
                "node {} holds {} inner iterates, expected {l}",
                self.node_id,
                self.inner_history.len()
            )));
        }
        let avg = mean(&self.inner_history).ok_or_else(|| {
            Error::Protocol(format!("node {} finished a round with no iterates", self.node_id))
        })?;
        self.inner_history.clear();
        Ok(avg)
    }

    /// `dual -= (rho/2) sum_j (own - w_j)`, then records this round's
    /// broadcasts for use by the next round's primal updates.
    pub fn dual_update(
        &mut self,
        own_broadcast: &ModelVector,
        neighbor_broadcasts: &BTreeMap<usize, ModelVector>,
        rho: f64,
    ) -> Result<()> {
        let mut received = BTreeMap::new();
        let mut diff = ModelVector::zeros(self.dim());
        for &j in self.neighbor_broadcasts.keys() {
            let w_j = neighbor_broadcasts.get(&j).ok_or_else(|| {
                Error::Protocol(format!("node {} missing broadcast from {j}", self.node_id))
            })?;
            w_j.check_dim(self.dim())?;
            diff.axpy(1.0, own_broadcast);
            diff.axpy(-1.0, w_j);
            received.insert(j, w_j.clone());
        }
        self.dual.axpy(-rho / 2.0, &diff);
        self.w_prev_broadcast = own_broadcast.clone();
        self.neighbor_broadcasts = received;
        Ok(())
    }
}

/// Per-update inputs shared with [`NodeState::primal_inner_update`].
#[derive(Debug, Clone, Copy)]
pub struct InnerStep<'a> {
    pub partition: &'a NodePartition,
    pub spec: &'a ObjectiveSpec,
    pub rho: f64,
    pub eta: f64,
    /// `(sensitivity, sigma)` when noise is on.
    pub noise: Option<(f64, f64)>,
    pub projection_diameter: Option<f64>,
    pub minibatch_size: Option<usize>,
}

/// Local gradient estimated on `batch_size` samples drawn with replacement.
pub fn minibatch_gradient<R: Rng + ?Sized>(
    partition: &NodePartition,
    spec: &ObjectiveSpec,
    batch_size: usize,
    rng: &mut R,
    w: &[f64],
) -> Result<ModelVector> {
    if batch_size == 0 || batch_size > partition.size() {
        return Err(Error::Parameter(format!(
            "batch size {batch_size} outside [1, {}]",
            partition.size()
        )));
    }
    let indices: Vec<usize> =
        (0..batch_size).map(|_| rng.random_range(0..partition.size())).collect();
    subset_gradient(partition, spec, w, &indices)
}

/// A full simulation: nodes, schedule, and the round counter.
#[derive(Debug, Clone)]
pub struct Engine<'a> {
    graph: &'a Graph,
    partitions: &'a [NodePartition],
    spec: ObjectiveSpec,
    cfg: AdmmConfig,
    budget: PrivacyBudget,
    schedule: EtaSchedule,
    seed: u64,
    nodes: Vec<NodeState>,
    round: u64,
}

impl<'a> Engine<'a> {
    pub fn new(
        graph: &'a Graph,
        partitions: &'a [NodePartition],
        spec: ObjectiveSpec,
        cfg: AdmmConfig,
        budget: PrivacyBudget,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        graph.validate()?;
        if partitions.len() != graph.node_count() {
            return Err(Error::Partition(format!(
                "{} partitions for {} nodes",
                partitions.len(),
                graph.node_count()
            )));
        }
        let dim = partitions[0].dim();
        for (i, p) in partitions.iter().enumerate() {
            if p.node_id != i {
                return Err(Error::Partition(format!("partition {i} belongs to node {}", p.node_id)));
            }
            if p.dim() != dim {
                return Err(Error::Shape { expected: dim, actual: p.dim() });
            }
            if let Some(b) = cfg.minibatch_size {
                if b > p.size() {
                    return Err(Error::Parameter(format!(
                        "batch size {b} exceeds node {i}'s {} samples",
                        p.size()
                    )));
                }
            }
        }
        if cfg.noise_enabled && (cfg.t, cfg.l) != (budget.t, budget.l) {
            return Err(Error::Parameter(format!(
                "budget planned for t={}, l={} but run uses t={}, l={}",
                budget.t, budget.l, cfg.t, cfg.l
            )));
        }
        let schedule = EtaSchedule::new(&spec, dim, cfg.noise_enabled.then_some(&budget));
        let nodes = (0..graph.node_count())
            .map(|i| NodeState::new(i, dim, graph.neighbors(i)))
            .collect();
        Ok(Engine { graph, partitions, spec, cfg, budget, schedule, seed, nodes, round: 0 })
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [NodeState] {
        &mut self.nodes
    }

    /// Completed outer iterations.
    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn config(&self) -> &AdmmConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &EtaSchedule {
        &self.schedule
    }

    /// Noisy primal updates charged to each node so far.
    pub fn executed_steps(&self) -> u64 {
        self.round * self.cfg.l
    }

    pub fn averaged_models(&self) -> Vec<ModelVector> {
        self.nodes.iter().map(|s| s.averaged_output.clone()).collect()
    }

    pub fn last_broadcasts(&self) -> Vec<ModelVector> {
        self.nodes.iter().map(|s| s.w_prev_broadcast.clone()).collect()
    }

    pub fn dual_sum(&self) -> ModelVector {
        let mut sum = ModelVector::zeros(self.nodes[0].dim());
        for s in &self.nodes {
            sum.axpy(1.0, &s.dual);
        }
        sum
    }

    fn stream_id(&self, node: usize, k: u64, r: u64) -> u64 {
        ((k - 1) * self.nodes.len() as u64 + node as u64) * self.cfg.l + r
    }

    /// Runs one outer iteration across all nodes.
    pub fn step(&mut self) -> Result<()> {
        if self.round >= self.cfg.t {
            return Err(Error::BudgetExceeded {
                executed: (self.round + 1) * self.cfg.l,
                budgeted: self.cfg.t * self.cfg.l,
            });
        }
        let k = self.round + 1;
        let stream_ids: Vec<Vec<u64>> = (0..self.nodes.len())
            .map(|i| (0..self.cfg.l).map(|r| self.stream_id(i, k, r)).collect())
            .collect();
        let (cfg, spec, schedule, budget, seed) =
            (&self.cfg, &self.spec, &self.schedule, &self.budget, self.seed);

        let broadcasts: Vec<ModelVector> = self
            .nodes
            .par_iter_mut()
            .zip(self.partitions.par_iter())
            .zip(stream_ids.par_iter())
            .map(|((state, partition), streams)| {
                let degree = state.neighbor_broadcasts.len();
                for (r, &stream) in streams.iter().enumerate() {
                    let eta = schedule.eta(k, r as u64 + 1, partition.size());
                    let noise = if cfg.noise_enabled {
                        let s = sensitivity(&SensitivityParams {
                            loss_lipschitz: spec.loss_lipschitz,
                            rho: cfg.rho,
                            degree,
                            sample_count: partition.size(),
                            eta,
                        })?;
                        Some((s, budget.sigma))
                    } else {
                        None
                    };
                    let step = InnerStep {
                        partition,
                        spec,
                        rho: cfg.rho,
                        eta,
                        noise,
                        projection_diameter: cfg
                            .projection_enabled
                            .then_some(spec.domain_diameter),
                        minibatch_size: cfg.minibatch_size,
                    };
                    state.primal_inner_update(&step, &mut update_rng(seed, stream))?;
                }
                state.finish_outer_iteration(cfg.l)
            })
            .collect::<Result<_>>()?;

        for (i, state) in self.nodes.iter_mut().enumerate() {
            let received: BTreeMap<usize, ModelVector> =
                self.graph.neighbors(i).iter().map(|&j| (j, broadcasts[j].clone())).collect();
            state.dual_update(&broadcasts[i], &received, self.cfg.rho)?;
        }
        self.round = k;
        Ok(())
    }

    /// Runs the remaining rounds, calling `observe` after each one.
    pub fn run<F>(&mut self, mut observe: F) -> Result<()>
    where
        F: FnMut(&Engine<'a>) -> Result<()>,
    {
        while self.round < self.cfg.t {
            self.step()?;
            observe(self)?;
        }
        Ok(())
    }

    /// Text checkpoint of all node states. Floats use shortest round-trip
    /// formatting, so restoring is exact.
    pub fn checkpoint(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(
            out,
            "round={} nodes={} dim={} seed={}",
            self.round,
            self.nodes.len(),
            self.nodes[0].dim(),
            self.seed
        );
        let vec_line = |out: &mut String, tag: &str, v: &[f64]| {
            out.push_str(tag);
            for x in v {
                let _ = write!(out, " {x}");
            }
            out.push('\n');
        };
        for s in &self.nodes {
            let _ = writeln!(out, "node {} averaged_count={}", s.node_id, s.averaged_count);
            vec_line(&mut out, "w_inner", &s.w_inner);
            vec_line(&mut out, "w_prev_broadcast", &s.w_prev_broadcast);
            vec_line(&mut out, "dual", &s.dual);
            vec_line(&mut out, "averaged_output", &s.averaged_output);
            for (j, w) in &s.neighbor_broadcasts {
                vec_line(&mut out, &format!("neighbor {j}"), w);
            }
        }
        out
    }

    /// Replaces node states and round counter with those in `text`.
    pub fn restore(&mut self, text: &str) -> Result<()> {
        let restored = parse_checkpoint(text, self.seed)?;
        if restored.nodes.len() != self.nodes.len() {
            return Err(Error::Protocol(format!(
                "checkpoint has {} nodes, engine has {}",
                restored.nodes.len(),
                self.nodes.len()
            )));
        }
        for (old, new) in self.nodes.iter().zip(&restored.nodes) {
            let old_keys: Vec<_> = old.neighbor_broadcasts.keys().collect();
            let new_keys: Vec<_> = new.neighbor_broadcasts.keys().collect();
            if old_keys != new_keys || old.dim() != new.dim() {
                return Err(Error::Protocol(format!(
                    "checkpoint node {} does not match the engine topology",
                    new.node_id
                )));
            }
        }
        if restored.round > self.cfg.t {
            return Err(Error::Protocol(format!(
                "checkpoint round {} beyond configured t={}",
                restored.round, self.cfg.t
            )));
        }
        self.nodes = restored.nodes;
        self.round = restored.round;
        Ok(())
    }
}

pub const CHECKPOINT_MAGIC: &str = "dpadmm-checkpoint v1";

struct Restored {
    round: u64,
    nodes: Vec<NodeState>,
}

fn parse_checkpoint(text: &str, expected_seed: u64) -> Result<Restored> {
    let mut lines = text.lines().enumerate().peekable();
    let err = |line: usize, message: String| Error::Parse { line: line + 1, message };
    match lines.next() {
        Some((_, l)) if l == CHECKPOINT_MAGIC => {}
        _ => return Err(err(0, format!("missing `{CHECKPOINT_MAGIC}` header"))),
    }
    let (hl, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
    let mut fields = BTreeMap::new();
    for tok in header.split_whitespace() {
        let (k, v) = tok.split_once('=').ok_or_else(|| err(hl, format!("bad field `{tok}`")))?;
        let v: u64 = v.parse().map_err(|_| err(hl, format!("bad value in `{tok}`")))?;
        fields.insert(k, v);
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| err(hl, format!("missing `{k}`")));
    let (round, node_count, dim, seed) = (get("round")?, get("nodes")?, get("dim")?, get("seed")?);
    if seed != expected_seed {
        return Err(err(hl, format!("checkpoint seed {seed} differs from engine seed {expected_seed}")));
    }

    let parse_vec = |line: usize, toks: std::str::SplitWhitespace<'_>| -> Result<ModelVector> {
        let v = toks
            .map(|t| t.parse::<f64>().map_err(|e| err(line, format!("{e}"))))
            .collect::<Result<Vec<_>>>()?;
        if v.len() as u64 != dim {
            return Err(err(line, format!("expected {dim} values, found {}", v.len())));
        }
        Ok(ModelVector::from_vec(v))
    };

    let mut nodes = Vec::new();
    while let Some((ln, line)) = lines.next() {
        let mut toks = line.split_whitespace();
        if toks.next() != Some("node") {
            return Err(err(ln, format!("expected node block, found `{line}`")));
        }
        let node_id: usize = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| err(ln, "bad node id".into()))?;
        let averaged_count: u64 = toks
            .next()
            .and_then(|t| t.strip_prefix("averaged_count="))
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| err(ln, "bad averaged_count".into()))?;
        let mut take = |tag: &str| -> Result<ModelVector> {
            let (vl, line) = lines.next().ok_or_else(|| err(ln, format!("missing `{tag}`")))?;
            let mut toks = line.split_whitespace();
            if toks.next() != Some(tag) {
                return Err(err(vl, format!("expected `{tag}`")));
            }
            parse_vec(vl, toks)
        };
        let w_inner = take("w_inner")?;
        let w_prev_broadcast = take("w_prev_broadcast")?;
        let dual = take("dual")?;
        let averaged_output = take("averaged_output")?;
        let mut neighbor_broadcasts = BTreeMap::new();
        while let Some((nl, line)) = lines.next_if(|(_, l)| l.starts_with("neighbor ")) {
            let mut toks = line.split_whitespace();
            toks.next();
            let j: usize = toks
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| err(nl, "bad neighbor id".into()))?;
            neighbor_broadcasts.insert(j, parse_vec(nl, toks)?);
        }
        nodes.push(NodeState {
            node_id,
            w_inner,
            w_prev_broadcast,
            neighbor_broadcasts,
            dual,
            inner_history: Vec::new(),
            averaged_output,
            averaged_count,
        });
    }
    if nodes.len() as u64 != node_count {
        return Err(err(1, format!("header says {node_count} nodes, found {}", nodes.len())));
    }
    Ok(Restored { round, nodes })
}
