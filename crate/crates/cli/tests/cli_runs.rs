//! End-to-end runs of the `fluidnet` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fluidnet_cli::{parse_header, ExperimentConfig};

fn example(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples").join(name)
}

fn fluidnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fluidnet")).args(args).output().expect("binary runs")
}

fn run_config(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    fluidnet(&args)
}

fn data_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn twist_info_single_node() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_config(&example("single_node.toml"), dir.path(), &[]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("theta*=0.2918"), "{stdout}");
    assert!(stdout.contains("q_rate=1.2315"), "{stdout}");
    let info = std::fs::read_to_string(dir.path().join("twist_info.csv")).unwrap();
    let cfg = ExperimentConfig::from_file(&example("single_node.toml")).unwrap();
    assert_eq!(parse_header(&info).unwrap(), cfg);
    let density = std::fs::read_to_string(dir.path().join("density.csv")).unwrap();
    assert_eq!(data_rows(&density).len(), 201);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let base = std::fs::read_to_string(example("single_node.toml")).unwrap();

    let empty = write_config(dir.path(), "empty.toml", &base.replace("n = [10, 20, 40, 80, 160]", "n = []"));
    assert_eq!(run_config(&empty, &dir.path().join("a"), &["--mode", "sweep"]).status.code(), Some(2));

    let no_seed = write_config(dir.path(), "noseed.toml", &base.replace("seed = 20240601\n", ""));
    assert_eq!(run_config(&no_seed, &dir.path().join("b"), &[]).status.code(), Some(2));
    assert_eq!(run_config(&no_seed, &dir.path().join("b"), &["--seed", "3"]).status.code(), Some(0));

    let broken = write_config(dir.path(), "broken.toml", "mode = [");
    assert_eq!(run_config(&broken, &dir.path().join("c"), &[]).status.code(), Some(2));

    let capped = base.replace("eps = 0.1", "eps = 0.001\nmax_runs = 200\nmin_runs = 100");
    let capped = write_config(dir.path(), "capped.toml", &capped.replace("n = [10, 20, 40, 80, 160]", "n = [10]"));
    let out_dir = dir.path().join("d");
    assert_eq!(run_config(&capped, &out_dir, &["--mode", "is"]).status.code(), Some(4));
    let rows = data_rows(&std::fs::read_to_string(out_dir.join("estimates.csv")).unwrap());
    assert_eq!(rows[0][4], "200");
    assert_eq!(rows[0][5], "true");

    let unreachable = r#"
mode = "twist-info"
seed = 1
target = [0.5, 1.0]
[network]
lambda = 1.0
horizon = 1.0
drain = [1.0, 1.0]
routing = [[1.0, 0.0], [0.0, 1.0]]
jobs = [{ kind = "exponential", rate = 1.0 }, { kind = "zero" }]
"#;
    let unreachable = write_config(dir.path(), "unreachable.toml", unreachable);
    let out_dir = dir.path().join("e");
    assert_eq!(run_config(&unreachable, &out_dir, &[]).status.code(), Some(3));
    let diag = std::fs::read_to_string(out_dir.join("diagnostic.txt")).unwrap();
    assert!(diag.contains("did not converge"));
    assert!(parse_header(&diag).is_ok());
}

#[test]
fn moments_example() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_config(&example("moments_two_node.toml"), dir.path(), &[]);
    assert_eq!(out.status.code(), Some(0));
    let rows = data_rows(&std::fs::read_to_string(dir.path().join("moments.csv")).unwrap());
    assert_eq!(rows.len(), 101);
    assert_eq!(rows[0][5].parse::<f64>().unwrap(), 1.0);
    let m2: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(m2[1] > m2[0]);
    let stationary = data_rows(&std::fs::read_to_string(dir.path().join("stationary.csv")).unwrap());
    assert_eq!(stationary[0][1], stationary[1][1]);
    assert!(dir.path().join("jump_shot.csv").exists());
}

#[test]
fn all_examples_parse() {
    for name in [
        "single_node.toml",
        "tandem_downstream.toml",
        "tandem_joint.toml",
        "modulated_1.toml",
        "modulated_2.toml",
        "moments_two_node.toml",
    ] {
        let cfg = ExperimentConfig::from_file(&example(name)).unwrap();
        assert!(cfg.validate().is_ok(), "{name}");
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
}

#[test]
fn modulated_twist_info_on_a_given_path() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(example("modulated_1.toml")).unwrap()
        + "\n[path]\nstates = [0, 1, 0]\njump_times = [0.654, 0.739]\n";
    let cfg = write_config(dir.path(), "path.toml", &text);
    let out = run_config(&cfg, &dir.path().join("o"), &["--mode", "twist-info"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("path=1@0.6540>2@0.7390>1"), "{stdout}");
    let density = data_rows(&std::fs::read_to_string(dir.path().join("o/density.csv")).unwrap());
    // Under the original measure the arrival density is piecewise constant
    // and proportional to the arrival rate of the current state.
    // Row 60 has age 0.3, inside the second segment.
    let first: f64 = density[0][3].parse().unwrap();
    let middle: f64 = density[60][3].parse().unwrap();
    let last: f64 = density[density.len() - 1][3].parse().unwrap();
    assert_eq!(density[60][1], "0.7");
    assert!((first / middle - 2.0).abs() < 1e-12);
    assert_eq!(first, last);
}
