//! End-to-end runs of the `dpadmm` binary and the sweep runner.

use std::fs;
use std::path::Path;
use std::process::Command;

use dpadmm::config::{parse_config, parse_config_str, DatasetSource, TopologyKind};
use dpadmm::runner::run_sweep;

const SMALL: &str = "\
dataset = synthetic
synthetic_samples = 120
synthetic_dim = 3
nodes = 4
topology = ring
rho = 0.1
lambda = 0.01
t = 5
l = 2
";

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("exp.conf");
    fs::write(&path, body).unwrap();
    path
}

fn dpadmm(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dpadmm")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn count_with(dir: &Path, prefix: &str, ext: &str) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| {
            let name = e.as_ref().unwrap().file_name().to_string_lossy().into_owned();
            name.starts_with(prefix) && name.ends_with(ext)
        })
        .count()
}

#[test]
fn shipped_adult_config_parses_to_the_reference_setup() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/adult.conf");
    let cfg = parse_config(&path).unwrap();
    assert!(matches!(cfg.dataset, DatasetSource::Adult { .. }));
    assert_eq!(cfg.topology, TopologyKind::Complete);
    assert_eq!((cfg.nodes, cfg.rho.as_slice(), cfg.lambda), (100, &[0.001][..], 0.0001));
    assert_eq!((cfg.delta, cfg.l.as_slice(), cfg.seeds.len()), (1e-5, &[10][..], 10));
}

#[test]
fn epsilon_sweep_file_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}epsilon = 0.5, 1, 2\nseeds = 0, 1\n"));
    let out = dir.path().join("out");
    let res = dpadmm(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--workers", "2"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(count_with(&out, "run_", ".csv"), 6);
    assert_eq!(count_with(&out, "audit_", ".txt"), 3);
    let aggregate = fs::read_to_string(out.join("aggregate.csv")).unwrap();
    assert_eq!(aggregate.lines().count(), 1 + 3);
    // the sweep prints the aggregate table
    assert_eq!(String::from_utf8_lossy(&res.stdout), aggregate);

    let run = fs::read_to_string(out.join("run_eps0.5_l2_t5_rho0.1_seed1.csv")).unwrap();
    let mut lines = run.lines();
    assert_eq!(lines.next(), Some("k,total_risk,excess_risk,feasibility,consensus_error,accuracy"));
    assert_eq!(lines.count(), 5);

    let audit = fs::read_to_string(out.join("audit_eps2_l2_t5_rho0.1.txt")).unwrap();
    let composed: f64 = audit
        .lines()
        .find_map(|l| l.strip_prefix("composed_epsilon="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((composed - 2.0).abs() < 1e-9);
}

#[test]
fn noise_free_cell_has_zero_spread() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config_str(&format!("{SMALL}noise = false\nseeds = 3, 4, 5\n")).unwrap();
    let outcome = run_sweep(&cfg, dir.path(), None, 0).unwrap();
    let row = outcome.aggregate_csv().lines().nth(1).unwrap().to_string();
    let fields: Vec<f64> = row.split(',').skip(5).map(|x| x.parse().unwrap()).collect();
    for std in fields.iter().skip(1).step_by(2) {
        assert_eq!(*std, 0.0);
    }
}

#[test]
fn inner_step_recipe_rows_follow_l() {
    let dir = tempfile::tempdir().unwrap();
    let body = SMALL.replace("l = 2\n", "l = 1, 5, 10, 25\n");
    let cfg = parse_config_str(&format!("{body}epsilon = 1\nseeds = 0, 1\n")).unwrap();
    let outcome = run_sweep(&cfg, dir.path(), Some(2), 0).unwrap();
    let ls: Vec<String> = outcome
        .aggregate_csv()
        .lines()
        .skip(1)
        .map(|r| r.split(',').nth(1).unwrap().to_string())
        .collect();
    assert_eq!(ls, ["1", "5", "10", "25"]);
}

#[test]
fn seed_offset_shifts_run_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config_str(&format!("{SMALL}seeds = 0\n")).unwrap();
    run_sweep(&cfg, dir.path(), None, 7).unwrap();
    assert!(dir.path().join("run_eps1_l2_t5_rho0.1_seed7.csv").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "epsilon = -1\n");
    let res = dpadmm(&["audit", "--config", bad.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("epsilon"));

    let ok = write_config(dir.path(), SMALL);
    let res = dpadmm(&["audit", "--config", ok.to_str().unwrap(), "--executed-steps", "11"]);
    assert_eq!(res.status.code(), Some(4));
    let res = dpadmm(&["audit", "--config", ok.to_str().unwrap(), "--executed-steps", "4"]);
    assert!(res.status.success());
    assert!(String::from_utf8_lossy(&res.stdout).contains("executed_steps=4"));

    let multi = write_config(dir.path(), &format!("{SMALL}epsilon = 1, 2\n"));
    let res = dpadmm(&["run", "--config", multi.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));

    let missing = write_config(dir.path(), "dataset = cache\ncache_path = /nonexistent/x.cache\nnodes = 4\n");
    let res = dpadmm(&["oracle", "--config", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3));
}

#[test]
fn oracle_is_cached_and_reused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let first = dpadmm(&["oracle", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(first.status.success());
    assert_eq!(count_with(&out, "oracle_", ".txt"), 1);
    let second = dpadmm(&["oracle", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(first.stdout, second.stdout);
}
