use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn deferlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deferlab")).args(args).output().expect("binary runs")
}

fn write_config(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let path = dir.path().join(name);
    fs::write(&path, text).unwrap();
    path
}

fn fixtures_key(names: &[&str]) -> String {
    let list: Vec<String> = names.iter().map(|n| format!("{:?}", fixture(n).display().to_string())).collect();
    format!("fixtures = [{}]\n", list.join(", "))
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

fn run_in(dir: &TempDir, command: &str, config: &Path) -> (Output, PathBuf) {
    let out = dir.path().join("out");
    let o = deferlab(&[command, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    (o, out)
}

#[test]
fn verify_risks_on_bundled_fixtures_passes() {
    let dir = TempDir::new().unwrap();
    let text = fixtures_key(&["example2.toml", "identical_experts.toml", "shared_blind_spot.toml"])
        + "random_points = 6\nmc_samples = 20000\n";
    let config = write_config(&dir, "risks.toml", &text);
    let (o, out) = run_in(&dir, "verify-risks", &config);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = csv_rows(&out.join("risks.csv"));
    assert_eq!(rows.len(), 9 * 6);
    let header = csv::Reader::from_path(out.join("risks.csv")).unwrap().headers().unwrap().clone();
    assert_eq!(&header.iter().take(6).collect::<Vec<_>>(), &["family", "base", "J", "risk", "mc_estimate", "mc_se"]);
    assert_eq!(csv_rows(&out.join("weight_identity.csv")).len(), 9);
    let echo = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(echo.contains("command = \"verify-risks\"") && echo.contains("mc_samples = 20000"));
}

#[test]
fn missing_fixture_is_a_config_error_naming_the_key() {
    let dir = TempDir::new().unwrap();
    let config = write_config(&dir, "c.toml", "fixtures = [\"no_such_point.toml\"]\n");
    let (o, _) = run_in(&dir, "verify-risks", &config);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`fixtures`"), "{}", stderr(&o));
}

#[test]
fn corrupted_fixture_fails_at_load() {
    let dir = TempDir::new().unwrap();
    write_config(
        &dir,
        "bad_point.toml",
        "K = 2\nJ = 1\nposterior = [0.5, 0.4]\nkind = \"independent\"\ncond_accuracy = [[0.5], [0.5]]\n",
    );
    let config = write_config(&dir, "c.toml", "fixtures = [\"bad_point.toml\"]\nrandom_points = 0\n");
    let (o, _) = run_in(&dir, "verify-risks", &config);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn unknown_or_misplaced_keys_are_rejected() {
    let dir = TempDir::new().unwrap();
    let config = write_config(&dir, "c.toml", "colour = \"blue\"\n");
    assert_eq!(run_in(&dir, "verify-risks", &config).0.status.code(), Some(2));
    let config = write_config(&dir, "d.toml", "epochs = 3\n");
    let (o, _) = run_in(&dir, "verify-consistency", &config);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`epochs`"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(deferlab(&[]).status.code(), Some(2));
    assert_eq!(deferlab(&["sweep", "--seed", "minus-one"]).status.code(), Some(2));
}

#[test]
fn example2_consistency_rows() {
    let dir = TempDir::new().unwrap();
    let config = write_config(&dir, "c.toml", &(fixtures_key(&["example2.toml"]) + "random_points = 0\n"));
    let (o, out) = run_in(&dir, "verify-consistency", &config);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = csv_rows(&out.join("consistency.csv"));
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(&r[0], "example2");
        assert_eq!(&r[4], "defer:0");
        assert_eq!(&r[5], "defer:0");
        for col in [7, 8, 10] {
            assert!(r[col].parse::<f64>().unwrap() < 1e-3);
        }
    }
}

#[test]
fn condition1_violations_are_flagged_not_failed() {
    let dir = TempDir::new().unwrap();
    let text = fixtures_key(&["identical_experts.toml", "shared_blind_spot.toml"]) + "random_points = 0\n";
    let config = write_config(&dir, "c.toml", &text);
    let (o, out) = run_in(&dir, "verify-consistency", &config);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = csv_rows(&out.join("consistency.csv"));
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| &r[16] == "condition1_violated"));
    let cond = csv_rows(&out.join("condition1.csv"));
    assert!(cond.iter().all(|r| &r[3] == "false"));
}

#[test]
fn forced_non_convergence_exits_1() {
    let dir = TempDir::new().unwrap();
    let text = fixtures_key(&["example2.toml"]) + "random_points = 2\nmax_iters = 1\n";
    let config = write_config(&dir, "c.toml", &text);
    let (o, out) = run_in(&dir, "verify-consistency", &config);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let rows = csv_rows(&out.join("consistency.csv"));
    assert!(rows.iter().any(|r| &r[16] == "not_converged"));
}

const TINY_SWEEP: &str = "\
j_list = [1, 2]
num_classes = 4
family_size = 4
in_domain = 0.9
in_family = 0.6
trials = 2
n_train = 300
n_test = 200
width = 8
epochs = 3
batch_size = 32
";

#[test]
fn sweep_writes_every_cell_deterministically() {
    let dir = TempDir::new().unwrap();
    let config = write_config(&dir, "sweep.toml", TINY_SWEEP);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = deferlab(&["sweep", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--jobs", "2"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let results = fs::read(a.join("results.csv")).unwrap();
    assert_eq!(results, fs::read(b.join("results.csv")).unwrap());
    assert_eq!(fs::read(a.join("loss_curves.csv")).unwrap(), fs::read(b.join("loss_curves.csv")).unwrap());
    let rows = csv_rows(&a.join("results.csv"));
    assert_eq!(rows.len(), 2 * 2 * 2);
    assert!(rows.iter().all(|r| r[7].is_empty()));
    assert_eq!(csv_rows(&a.join("loss_curves.csv")).len(), 8 * 3);
    assert_eq!(csv_rows(&a.join("summary.csv")).len(), 4);
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = TempDir::new().unwrap();
    let config = write_config(&dir, "sweep.toml", TINY_SWEEP);
    let first = dir.path().join("first");
    let o = deferlab(&["sweep", "--config", config.to_str().unwrap(), "--out", first.to_str().unwrap(), "--seed", "99"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let echo = fs::read_to_string(first.join("config.toml")).unwrap();
    assert!(echo.contains("seed = 99"));
    // Re-run from a copy of the echo, redirected elsewhere.
    let second = dir.path().join("second");
    let copy = write_config(&dir, "echo.toml", &echo);
    let o = deferlab(&["sweep", "--config", copy.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read(first.join("results.csv")).unwrap(), fs::read(second.join("results.csv")).unwrap());
}

#[test]
fn unwritable_output_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let blocker = write_config(&dir, "not_a_dir", "");
    let config = write_config(&dir, "sweep.toml", TINY_SWEEP);
    let o = deferlab(&["sweep", "--config", config.to_str().unwrap(), "--out", blocker.join("out").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn divergent_training_exits_1() {
    let dir = TempDir::new().unwrap();
    let text = TINY_SWEEP.to_string() + "learning_rate = 1e300\n";
    let config = write_config(&dir, "sweep.toml", &text);
    let (o, _) = run_in(&dir, "sweep", &config);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}
