use std::path::Path;

use ctrl_rl::cli::{self, load_config, sweep, Command, GlobalArgs};
use ctrl_rl::error::Error;

const LINEAR: &str = r#"problem = "linear_example"
B = 1.0
T = 1.0

[run]
seeds = [7]
n_iters = 3
dt = 0.05

[improve]
t_points = 3
x_points = 9
surface_paths = 200
probe_paths = 4000

[hjb]
t_steps = 200
x_min = -2.0
x_max = 2.0
x_steps = 80
"#;

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["ctrl-rl"];
    full.extend_from_slice(args);
    cli::main_with(full)
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn read_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

#[test]
fn improve_on_linear_example_is_optimal_after_one_step() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.toml", LINEAR);
    let out = dir.path().join("out");
    assert_eq!(run(&["improve", "--config", &config, "--out", out.to_str().unwrap()]), 0);
    let rows = read_rows(&out.join("improve_seed7.csv"));
    assert_eq!(rows.len(), 3);
    let stderr: f64 = rows[1][2].parse().unwrap();
    let gap: f64 = rows[1][3].parse().unwrap();
    assert!(gap <= 3.0 * stderr, "gap {gap}, stderr {stderr}");
    assert!(out.join("summary.json").exists());
}

#[test]
fn unknown_key_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.toml", &format!("bogus = 1\n{LINEAR}"));
    let out = dir.path().join("out");
    assert_eq!(run(&["improve", "--config", &config, "--out", out.to_str().unwrap()]), 2);
    assert!(!out.exists());
}

#[test]
fn invalid_values_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad_dt = LINEAR.replace("dt = 0.05", "dt = 0.07");
    let config = write_config(dir.path(), "c.toml", &bad_dt);
    let out = dir.path().join("out");
    assert_eq!(run(&["semi-q", "--config", &config, "--out", out.to_str().unwrap()]), 2);
    assert!(!out.exists());
    assert_eq!(run(&["no-such-command"]), 2);
}

#[test]
fn unwritable_output_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.toml", LINEAR);
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let out = blocker.join("out");
    assert_eq!(run(&["hjb-oracle", "--config", &config, "--out", out.to_str().unwrap()]), 4);
}

#[test]
fn summary_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.toml", LINEAR);
    let first = dir.path().join("first");
    assert_eq!(run(&["semi-q", "--config", &config, "--iters", "50", "--out", first.to_str().unwrap()]), 0);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(first.join("summary.json")).unwrap()).unwrap();
    let resolved = write_config(dir.path(), "resolved.json", &summary["config"].to_string());
    let second = dir.path().join("second");
    assert_eq!(run(&["semi-q", "--config", &resolved, "--out", second.to_str().unwrap()]), 0);
    let name = "semi_q_seed7.csv";
    assert_eq!(std::fs::read(first.join(name)).unwrap(), std::fs::read(second.join(name)).unwrap());
}

#[test]
fn environment_overrides_file_and_flags_override_environment() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.toml", LINEAR);
    let global = GlobalArgs { config: Some(config.into()), out: "unused".into(), seed: Some(3), threads: None };
    let env = vec![
        ("CTRL_RL_RUN__N_ITERS".to_string(), "12".to_string()),
        ("CTRL_RL_B".to_string(), "0.5".to_string()),
        ("CTRL_RL_RUN__SEEDS".to_string(), "[1, 2]".to_string()),
        ("UNRELATED".to_string(), "1".to_string()),
    ];
    let cfg = load_config(Command::SemiQ, &global, None, env).unwrap();
    assert_eq!(cfg.run.n_iters, 12);
    assert_eq!(cfg.b, 0.5);
    assert_eq!(cfg.run.seeds, vec![3]);
    let bad = vec![("CTRL_RL_RUN__NOPE".to_string(), "1".to_string())];
    assert!(matches!(load_config(Command::SemiQ, &global, None, bad), Err(Error::Config(_))));
}

#[test]
fn sweep_contract() {
    let curve = |s: u64| Ok((1..=20).map(|k| (s as f64 + 1.0) / k as f64).collect::<Vec<f64>>());
    let forward: Vec<_> = (0..50).map(|s| (s, curve(s))).collect();
    let backward: Vec<_> = (0..50).rev().map(|s| (s, curve(s))).collect();
    let a = sweep(forward, &[0.1]).unwrap();
    let b = sweep(backward, &[0.1]).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.quantiles[0].0, 0.9);
    assert_eq!(a.quantiles[0].1.len(), 20);
    assert!(matches!(sweep(vec![(1, curve(1))], &[0.1]), Err(Error::InvalidArgument(_))));
    let mostly_failed = vec![(1, curve(1)), (2, Err(Error::Evaluation("x".into()))), (3, Err(Error::Evaluation("y".into())))];
    assert!(matches!(sweep(mostly_failed, &[0.1]), Err(Error::InsufficientData(_))));
}

#[test]
fn multi_seed_run_writes_sweep_with_quantiles() {
    let dir = tempfile::tempdir().unwrap();
    let body = LINEAR.replace("seeds = [7]", "seeds = [3, 1, 2]").replace("B = 1.0\n", "B = 0.0\n");
    let config = write_config(dir.path(), "c.toml", &body);
    let out = dir.path().join("out");
    assert_eq!(run(&["q-learn", "--config", &config, "--iters", "40", "--out", out.to_str().unwrap()]), 0);
    for s in [1, 2, 3] {
        assert!(out.join(format!("q_learn_seed{s}.csv")).exists());
    }
    let header = csv::Reader::from_path(out.join("q_learn_sweep.csv")).unwrap().headers().unwrap().clone();
    assert_eq!(&header[0], "n");
    assert!(header.iter().any(|h| h == "q0.9"));
}
