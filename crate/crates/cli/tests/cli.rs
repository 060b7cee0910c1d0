use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const KEYS: [&str; 10] = [
    "max_r",
    "pass_fraction",
    "violations",
    "max_index_displacement",
    "cov_empirical",
    "cov_predicted",
    "cov_distance",
    "sigma2_predicted",
    "sigma2_empirical",
    "runs",
];

fn lab(args: &[&str], threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dbm-lab"))
        .args(args)
        .env("RAYON_NUM_THREADS", threads)
        .output()
        .expect("binary runs")
}

fn assert_report_keys(stdout: &[u8]) {
    let text = String::from_utf8_lossy(stdout);
    for key in KEYS {
        assert!(text.contains(&format!("\"{key}\":")), "missing {key} in {text}");
    }
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const CLT: &str = r#"
experiment = "clt"
[sde]
n = 20
runs = 500
t_end = 0.1
step_h = 1e-3
[stats]
probes = [[0.0, 0.08], [0.2, 0.08]]
[output]
density_points = 21
"#;

#[test]
fn oracle_subcommands_pass() {
    for which in ["quadratic", "free"] {
        let out = lab(&["oracle", which], "2");
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        assert_report_keys(&out.stdout);
    }
}

#[test]
fn missing_particle_count_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "experiment = \"clt\"\n[sde]\nt_end = 0.1\n");
    let out = lab(&["run", &cfg], "1");
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sde.n"));
}

#[test]
fn bad_override_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CLT);
    let out = lab(&["run", &cfg, "--set", "sde.runs=0"], "1");
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sde.runs"));
}

#[test]
fn threshold_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CLT);
    // 500 runs cannot estimate a variance to within 0.1%
    let out = lab(&["run", &cfg, "--set", "thresholds.var_tol=0.001"], "1");
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert_report_keys(&out.stdout);
}

#[test]
fn outputs_are_byte_reproducible_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CLT);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    lab(&["run", &cfg, "--seed", "17", "--out", a.to_str().unwrap()], "1");
    lab(&["run", &cfg, "--seed", "17", "--out", b.to_str().unwrap()], "4");
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for f in ["report.json", "trajectory.csv", "mesh.csv", "density.csv", "fluctuations.csv"] {
        assert!(names.iter().any(|n| n == f), "{f} not written");
    }
    for name in names {
        let x = fs::read(a.join(&name)).unwrap();
        let y = fs::read(b.join(&name)).unwrap();
        assert!(x == y, "{name:?} differs");
    }
    let report = fs::read(a.join("report.json")).unwrap();
    assert_report_keys(&report);
}

#[test]
fn file_preset_reads_positions() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("start.csv");
    let body: String = std::iter::once("position\n".to_string())
        .chain((0..20).map(|i| format!("{}\n", -1.0 + i as f64 / 10.0)))
        .collect();
    fs::write(&csv, body).unwrap();
    let cfg = write_config(dir.path(), &format!("{CLT}[init]\npreset = \"file\"\npath = {:?}\n", csv));
    let out = lab(&["run", &cfg, "--set", "thresholds.var_tol=100", "--set", "thresholds.skewness=100",
        "--set", "thresholds.kurtosis=100", "--set", "thresholds.cov_tol=100", "--set", "thresholds.cov_distance=100"], "2");
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            dbm_core::experiment::ExperimentConfig::from_file(&path, &[]).unwrap_or_else(|e| panic!("{path:?}: {e}"));
            seen += 1;
        }
    }
    assert!(seen >= 4);
}
