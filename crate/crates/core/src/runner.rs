//! Experiment orchestration: data preparation, single runs, parameter sweeps
//! and the files they write.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{error, info, warn};
use rayon::prelude::*;

use crate::config::{DatasetSource, ExperimentConfig, TopologyKind};
use crate::dataset::{
    generate_synthetic, load_adult, partition_even, read_cache, train_test_split, Dataset,
    NodePartition, Sample,
};
use crate::engine::{AdmmConfig, Engine};
use crate::error::{Error, Result};
use crate::metrics::{
    dataset_hash, optimum_from_text, optimum_to_text, records_to_csv, solve_centralized,
    CentralizedOptimum, Evaluator, ModelSource, RunRecord,
};
use crate::objective::ObjectiveSpec;
use crate::privacy::{audit_total_budget, AuditReport, PrivacyBudget};
use crate::topology::Graph;

pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const CONFIG_ECHO_FILE: &str = "config_echo.txt";

const METRIC_NAMES: [&str; 5] =
    ["total_risk", "excess_risk", "feasibility", "consensus_error", "accuracy"];

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let file_name = path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn build_graph(cfg: &ExperimentConfig) -> Result<Graph> {
    match &cfg.topology {
        TopologyKind::Complete => Graph::complete(cfg.nodes),
        TopologyKind::Ring => Graph::ring(cfg.nodes),
        TopologyKind::EdgeList(path) => Graph::load_edge_list(path, Some(cfg.nodes)),
    }
}

pub fn load_dataset(source: &DatasetSource, data_seed: u64) -> Result<Dataset> {
    match source {
        DatasetSource::Synthetic { samples, dim, label_noise } => {
            let data = generate_synthetic(*samples, *dim, data_seed, *label_noise)?;
            Ok(Dataset { samples: data.samples, dim: *dim })
        }
        DatasetSource::Adult { dir } => {
            load_adult(&[&dir.join("adult.data"), &dir.join("adult.test")])
        }
        DatasetSource::Cache { path } => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            read_cache(&text)
        }
    }
}

pub fn objective_spec(cfg: &ExperimentConfig) -> Result<ObjectiveSpec> {
    let spec = ObjectiveSpec::new(cfg.lambda, cfg.nodes, cfg.domain_diameter)?;
    match cfg.c2 {
        Some(c2) => spec.with_objective_lipschitz(c2),
        None => Ok(spec),
    }
}

/// Everything shared by the runs of a sweep: the network, the split data and
/// the reference optimum.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub graph: Graph,
    pub partitions: Vec<NodePartition>,
    pub test: Vec<Sample>,
    pub spec: ObjectiveSpec,
    pub optimum: CentralizedOptimum,
}

/// Loads and splits the data, then solves for `w*` or reads it from
/// `oracle_<hash>.txt` in `cache_dir`.
pub fn prepare(cfg: &ExperimentConfig, cache_dir: Option<&Path>) -> Result<Prepared> {
    let graph = build_graph(cfg)?;
    let dataset = load_dataset(&cfg.dataset, cfg.data_seed)?;
    let (train, test) = train_test_split(&dataset.samples, cfg.test_fraction, cfg.data_seed)?;
    if test.is_empty() {
        return Err(Error::config("test_fraction", "leaves no test samples"));
    }
    let partitions = partition_even(&train, &graph, cfg.data_seed)?;
    let spec = objective_spec(cfg)?;
    let optimum = oracle(&partitions, &spec, cfg.oracle_tol, cache_dir)?;
    info!(
        "prepared {} train / {} test samples, d={}, n={}, F(w*)={:.12e}",
        train.len(),
        test.len(),
        dataset.dim,
        graph.node_count(),
        optimum.objective_value
    );
    Ok(Prepared { graph, partitions, test, spec, optimum })
}

pub fn oracle_path(dir: &Path, hash: &str) -> PathBuf {
    dir.join(format!("oracle_{hash}.txt"))
}

fn oracle(
    partitions: &[NodePartition],
    spec: &ObjectiveSpec,
    tol: f64,
    cache_dir: Option<&Path>,
) -> Result<CentralizedOptimum> {
    let hash = dataset_hash(partitions, spec);
    let path = cache_dir.map(|d| oracle_path(d, &hash));
    if let Some(path) = &path {
        if let Ok(text) = fs::read_to_string(path) {
            if let Some(opt) = optimum_from_text(&text, &hash)? {
                if opt.gradient_norm < tol {
                    info!("reusing cached optimum {}", path.display());
                    return Ok(opt);
                }
            }
        }
    }
    let opt = solve_centralized(partitions, spec, tol)?;
    if let Some(path) = &path {
        write_atomic(path, &optimum_to_text(&opt, &hash))?;
    }
    Ok(opt)
}

/// One point of the parameter grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub epsilon: f64,
    pub l: u64,
    pub t: u64,
    pub rho: f64,
}

impl Cell {
    pub fn label(&self) -> String {
        format!("eps{}_l{}_t{}_rho{}", self.epsilon, self.l, self.t, self.rho)
    }

    pub fn run_file(&self, seed: u64) -> String {
        format!("run_{}_seed{seed}.csv", self.label())
    }

    pub fn audit_file(&self) -> String {
        format!("audit_{}.txt", self.label())
    }
}

/// The grid in config order, `epsilon` outermost and `rho` innermost.
pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for &epsilon in &cfg.epsilon {
        for &l in &cfg.l {
            for &t in &cfg.t {
                for &rho in &cfg.rho {
                    out.push(Cell { epsilon, l, t, rho });
                }
            }
        }
    }
    out
}

pub fn budget_for(cfg: &ExperimentConfig, cell: &Cell) -> Result<PrivacyBudget> {
    PrivacyBudget::new(cell.epsilon, cfg.delta, cell.t, cell.l, cfg.c0)
}

#[derive(Debug, Clone)]
pub struct CellRun {
    pub records: Vec<RunRecord>,
    pub audit: AuditReport,
    /// `max_k ||sum_i gamma_i^k||`
    pub max_dual_sum: f64,
}

/// Runs one cell for one seed, recording metrics after every outer iteration.
pub fn run_cell(prep: &Prepared, cfg: &ExperimentConfig, cell: &Cell, seed: u64) -> Result<CellRun> {
    let budget = budget_for(cfg, cell)?;
    let admm = AdmmConfig {
        rho: cell.rho,
        t: cell.t,
        l: cell.l,
        noise_enabled: cfg.noise,
        projection_enabled: cfg.projection,
        minibatch_size: cfg.minibatch,
    };
    let beta = cfg.beta.unwrap_or(cell.rho * prep.graph.max_degree() as f64);
    let evaluator = Evaluator {
        graph: &prep.graph,
        partitions: &prep.partitions,
        spec: &prep.spec,
        optimum: &prep.optimum,
        beta,
        test: &prep.test,
    };
    let mut engine = Engine::new(&prep.graph, &prep.partitions, prep.spec, admm, budget, seed)?;
    let mut records = Vec::with_capacity(cell.t as usize);
    let mut max_dual_sum = 0.0_f64;
    engine.run(|e| {
        let models = match cfg.metric_source {
            ModelSource::Averaged => e.averaged_models(),
            ModelSource::LastBroadcast => e.last_broadcasts(),
        };
        records.push(evaluator.record(e.round(), &models)?);
        max_dual_sum = max_dual_sum.max(e.dual_sum().norm());
        Ok(())
    })?;
    let audit = audit_total_budget(&budget, engine.executed_steps())?;
    Ok(CellRun { records, audit, max_dual_sum })
}

fn audit_text(cfg: &ExperimentConfig, cell: &Cell, audit: &AuditReport) -> String {
    format!("rho={}\nnoise={}\n{audit}", cell.rho, cfg.noise)
}

/// Mean and sample standard deviation (zero for a single value). Identical
/// values give exactly their value and zero, free of summation rounding.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.windows(2).all(|w| w[0] == w[1]) {
        return (values[0], 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate_header() -> String {
    let mut h = String::from("epsilon,l,t,rho,seeds");
    for m in METRIC_NAMES {
        let _ = write!(h, ",{m}_mean,{m}_std");
    }
    h
}

fn metric_values(r: &RunRecord) -> [f64; 5] {
    [r.total_risk, r.excess_risk, r.feasibility, r.consensus_error, r.accuracy]
}

/// Per-cell summary of the final records over seeds.
#[derive(Debug, Clone)]
pub struct CellSummary {
    pub cell: Cell,
    pub finals: Vec<RunRecord>,
    pub max_dual_sum: f64,
}

impl CellSummary {
    pub fn aggregate_row(&self) -> String {
        let mut row = format!(
            "{},{},{},{},{}",
            self.cell.epsilon,
            self.cell.l,
            self.cell.t,
            self.cell.rho,
            self.finals.len()
        );
        for m in 0..METRIC_NAMES.len() {
            let values: Vec<f64> = self.finals.iter().map(|r| metric_values(r)[m]).collect();
            let (mean, std) = mean_std(&values);
            let _ = write!(row, ",{mean:.15e},{std:.15e}");
        }
        row
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub summaries: Vec<CellSummary>,
    pub files: Vec<PathBuf>,
}

impl SweepOutcome {
    pub fn aggregate_csv(&self) -> String {
        let mut out = aggregate_header();
        out.push('\n');
        for s in &self.summaries {
            out.push_str(&s.aggregate_row());
            out.push('\n');
        }
        out
    }
}

/// Runs every (cell, seed) pair, writing one record CSV per pair, one audit
/// per cell and the aggregate table into `out_dir`.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    workers: Option<usize>,
    seed_offset: u64,
) -> Result<SweepOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_atomic(&out_dir.join(CONFIG_ECHO_FILE), &cfg.to_text())?;
    let prep = prepare(cfg, Some(out_dir))?;
    let grid = cells(cfg);
    let seeds: Vec<u64> = cfg.seeds.iter().map(|s| s + seed_offset).collect();
    let jobs: Vec<(usize, u64)> =
        (0..grid.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        pool = pool.num_threads(w);
    }
    let pool = pool.build().map_err(|e| Error::Parameter(format!("worker pool: {e}")))?;

    let runs: Vec<CellRun> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, seed)| {
                let cell = &grid[c];
                let run = run_cell(&prep, cfg, cell, seed)
                    .and_then(|run| {
                        write_atomic(&out_dir.join(cell.run_file(seed)), &records_to_csv(&run.records))?;
                        Ok(run)
                    })
                    .map_err(|e| {
                        let id = format!("{} seed={seed}", cell.label());
                        error!("cell {id} failed: {e}");
                        Error::Cell { cell: id, source: Box::new(e) }
                    })?;
                info!("finished {} seed={seed}", cell.label());
                Ok(run)
            })
            .collect::<Result<_>>()
    })?;

    let mut files = Vec::new();
    let mut summaries = Vec::new();
    for (c, cell) in grid.iter().enumerate() {
        let cell_runs = &runs[c * seeds.len()..(c + 1) * seeds.len()];
        let audit = &cell_runs[0].audit;
        if audit.per_step_out_of_range() {
            warn!("{}: per-update epsilon {} >= 1", cell.label(), audit.per_step_epsilon);
        }
        let audit_path = out_dir.join(cell.audit_file());
        write_atomic(&audit_path, &audit_text(cfg, cell, audit))?;
        files.extend(seeds.iter().map(|&s| out_dir.join(cell.run_file(s))));
        files.push(audit_path);
        summaries.push(CellSummary {
            cell: *cell,
            finals: cell_runs.iter().filter_map(|r| r.records.last().copied()).collect(),
            max_dual_sum: cell_runs.iter().map(|r| r.max_dual_sum).fold(0.0, f64::max),
        });
    }
    let aggregate_path = out_dir.join(AGGREGATE_FILE);
    files.push(aggregate_path.clone());
    let outcome = SweepOutcome { summaries, files };
    write_atomic(&aggregate_path, &outcome.aggregate_csv())?;
    Ok(outcome)
}

/// Fails with a config error naming the first grid key that lists more than
/// one value.
pub fn require_single_cell(cfg: &ExperimentConfig) -> Result<()> {
    for (key, len) in
        [("epsilon", cfg.epsilon.len()), ("l", cfg.l.len()), ("t", cfg.t.len()), ("rho", cfg.rho.len())]
    {
        if len != 1 {
            return Err(Error::config(key, format!("`run` needs a single value, got {len}")));
        }
    }
    Ok(())
}

/// Audit reports for every cell, charging `executed_steps` updates (default
/// the full `t * l`).
pub fn audit_cells(cfg: &ExperimentConfig, executed_steps: Option<u64>) -> Result<Vec<(Cell, AuditReport)>> {
    cells(cfg)
        .into_iter()
        .map(|cell| {
            let budget = budget_for(cfg, &cell)?;
            let steps = executed_steps.unwrap_or(budget.total_steps());
            Ok((cell, audit_total_budget(&budget, steps)?))
        })
        .collect()
}
