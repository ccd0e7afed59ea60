use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_mira");

fn mira(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("MIRA_LOG")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("exp.toml");
    let text = format!(
        "[federation]\nclients = 6\nrounds = 4\nlocal_steps = 2\nsample_fraction = 0.5\n\
         [model]\nrank = 2\ninit_scale = 0.5\n\
         [tasks]\nclusters = 2\ndim = 4\nout_dim = 3\nn_train = 10\nn_test = 20\n\
         [seeds]\nmaster = 9\n\
         [output]\ndir = \"{}\"\n{extra}",
        dir.join("out").display()
    );
    fs::write(&path, text).unwrap();
    path
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn run_writes_reports_for_every_strategy() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let out = mira(&["run", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("out");
    for s in ["mira", "fedavg", "local_only"] {
        let rounds = fs::read_to_string(dir.join(s).join("rounds.csv")).unwrap();
        assert!(rounds.starts_with("t,J,F,R_value,mean_train,mean_test,up_bytes,down_bytes"));
        assert_eq!(rounds.lines().count(), 5);
        let clients = fs::read_to_string(dir.join(s).join("clients.csv")).unwrap();
        assert_eq!(clients.lines().count(), 1 + 4 * 6);
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["strategies"].as_array().unwrap().len(), 3);

    // Summary and CSV agree on the final objective.
    let rounds = fs::read_to_string(dir.join("mira").join("rounds.csv")).unwrap();
    let last_j: f64 = rounds
        .lines()
        .last()
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(
        summary["strategies"][0]["final_J"].as_f64().unwrap(),
        last_j
    );

    // The effective config re-parses and reproduces the same CSVs.
    let effective = dir.join("effective_config.toml");
    let rerun = mira(&[
        "run",
        effective.to_str().unwrap(),
        "--out",
        tmp.path().join("again").to_str().unwrap(),
    ]);
    assert_eq!(
        code(&rerun),
        0,
        "{}",
        String::from_utf8_lossy(&rerun.stderr)
    );
    for s in ["mira", "fedavg", "local_only"] {
        assert_eq!(
            fs::read(dir.join(s).join("rounds.csv")).unwrap(),
            fs::read(tmp.path().join("again").join(s).join("rounds.csv")).unwrap()
        );
    }
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "[graph]\nmystery = 1\n");
    let out = mira(&["run", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("mystery"));

    let cfg = small_config(tmp.path(), "");
    let out = Command::new(BIN)
        .args(["run", cfg.to_str().unwrap()])
        .env("MIRA_FEDERATION_SAMPLE_FRACTION", "1.5")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("sample_fraction"));
}

#[test]
fn divergence_exits_3_naming_round_and_client() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let out = Command::new(BIN)
        .args(["run", cfg.to_str().unwrap()])
        .env("MIRA_FEDERATION_LOCAL_LR", "50.0")
        .output()
        .unwrap();
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("round") && err.contains("client"), "{err}");
}

#[test]
fn grad_check_exit_codes() {
    let ok = mira(&["grad-check"]);
    assert_eq!(code(&ok), 0);
    let text = String::from_utf8_lossy(&ok.stdout);
    assert_eq!(
        text.lines().filter(|l| l.contains("max rel err")).count(),
        5
    );

    let bad = mira(&["grad-check", "--inject-fault"]);
    assert_eq!(code(&bad), 1);
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains("layer") && err.contains("seed"), "{err}");
}

#[test]
fn oracle_check_exit_codes() {
    assert_eq!(code(&mira(&["oracle-check"])), 0);
    let forced = mira(&["oracle-check", "--step-factor", "10"]);
    assert_eq!(code(&forced), 1);
    assert!(String::from_utf8_lossy(&forced.stderr).contains("contraction"));
}

#[test]
fn validate_graph_reports_invariants() {
    let tmp = tempfile::tempdir().unwrap();
    let good = tmp.path().join("good.txt");
    fs::write(&good, "3\n0 1 0\n1 0 2\n0 2 0\n").unwrap();
    let out = mira(&["validate-graph", good.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(!String::from_utf8_lossy(&out.stdout).contains("disconnected"));

    let split = tmp.path().join("split.txt");
    fs::write(&split, "4\n0 1 0 0\n1 0 0 0\n0 0 0 1\n0 0 1 0\n").unwrap();
    let out = mira(&["validate-graph", split.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("disconnected"));

    let bad = tmp.path().join("bad.txt");
    fs::write(&bad, "2\n0 1\n0 0\n").unwrap();
    let out = mira(&["validate-graph", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("asymmetric"));
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        mira_cli::config::ExperimentConfig::load(&path, std::iter::empty())
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert!(seen >= 2);
}
