use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dpadmm::config::{parse_config, DatasetSource, ExperimentConfig};
use dpadmm::dataset::write_cache;
use dpadmm::metrics::{dataset_hash, optimum_to_text};
use dpadmm::runner::{
    audit_cells, load_dataset, prepare, require_single_cell, run_sweep, write_atomic,
};
use dpadmm::{Error, Result};

#[derive(Parser)]
#[command(name = "dpadmm", version, about = "Differentially private distributed ADMM experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single (epsilon, l, t, rho) cell for every configured seed.
    Run(Common),
    /// Run the full parameter grid.
    Sweep(Common),
    /// Compute the centralized optimum and cache it in the output directory.
    Oracle(Common),
    /// Print the privacy audit of every cell.
    Audit {
        #[command(flatten)]
        common: Common,
        /// Charge this many updates instead of the planned t * l.
        #[arg(long)]
        executed_steps: Option<u64>,
    },
    /// Preprocess the Adult files into a cache file.
    Preprocess(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let cfg = parse_config(&self.config)?;
        let out = self.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        Ok((cfg, out))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run(c) => {
            let (cfg, out) = c.load()?;
            require_single_cell(&cfg)?;
            let outcome = run_sweep(&cfg, &out, c.workers, c.seed_offset)?;
            print!("{}", outcome.aggregate_csv());
        }
        Command::Sweep(c) => {
            let (cfg, out) = c.load()?;
            let outcome = run_sweep(&cfg, &out, c.workers, c.seed_offset)?;
            print!("{}", outcome.aggregate_csv());
        }
        Command::Oracle(c) => {
            let (cfg, out) = c.load()?;
            create_dir(&out)?;
            let prep = prepare(&cfg, Some(&out))?;
            print!("{}", optimum_to_text(&prep.optimum, &dataset_hash(&prep.partitions, &prep.spec)));
        }
        Command::Audit { common, executed_steps } => {
            let (cfg, _) = common.load()?;
            for (cell, report) in audit_cells(&cfg, executed_steps)? {
                println!("[{}]\n{report}", cell.label());
            }
        }
        Command::Preprocess(c) => {
            let (cfg, out) = c.load()?;
            if !matches!(cfg.dataset, DatasetSource::Adult { .. }) {
                return Err(Error::Config {
                    key: "dataset".into(),
                    message: "preprocess needs dataset = adult".into(),
                });
            }
            let dataset = load_dataset(&cfg.dataset, cfg.data_seed)?;
            create_dir(&out)?;
            let path = out.join("adult.cache");
            write_atomic(&path, &write_cache(&dataset))?;
            println!("wrote {} samples, d={} to {}", dataset.samples.len(), dataset.dim, path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
