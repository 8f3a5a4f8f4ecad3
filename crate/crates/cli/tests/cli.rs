use std::path::Path;
use std::process::{Command, Output};

fn sgmoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgmoe"))
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

const TINY: &str = r#"
[model]
gate = "temp_sigmoid_euclidean"
truth = "temperature_euclidean"

[sweep]
k_fit = [3]
n_grid = [150, 250, 400]
replications = 2
master_seed = 3

[em]
tol = 1e-3
max_iter = 20
"#;

fn write_tiny(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn verify_passes() {
    let out = sgmoe(&["verify"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 7);
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn usage_and_config_errors_exit_2() {
    assert_eq!(code(&sgmoe(&["frobnicate"])), 2);
    assert_eq!(code(&sgmoe(&[])), 2);
    assert_eq!(code(&sgmoe(&["sweep"])), 2);
    assert_eq!(
        code(&sgmoe(&["sweep", "--config", "/nonexistent/run.toml"])),
        2
    );

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\ngate = \"modified_sigmoid\"\ntruth = \"sigmoid_comparison\"\n[loss]\nkind = \"d3\"\n").unwrap();
    let out = sgmoe(&["sweep", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("loss.kind"));

    std::fs::write(&bad, "[model\n").unwrap();
    assert_eq!(code(&sgmoe(&["fit", "--config", bad.to_str().unwrap()])), 2);
    assert_eq!(code(&sgmoe(&["--help"])), 0);
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("records.csv");
    std::fs::write(&records, "not,a,records,file\n").unwrap();
    let out = sgmoe(&[
        "report",
        "--records",
        records.to_str().unwrap(),
        "--out",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn report_reproduces_the_sweep_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let run = dir.path().join("run");
    let out = sgmoe(&[
        "sweep",
        "--config",
        &cfg,
        "--out",
        run.to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "records.csv",
        "summary.json",
        "rates_k3.svg",
        "config.toml",
        "manifest.json",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let rep = dir.path().join("rep");
    let records = run.join("records.csv");
    let out = sgmoe(&[
        "report",
        "--records",
        records.to_str().unwrap(),
        "--out",
        rep.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read(run.join("summary.json")).unwrap(),
        std::fs::read(rep.join("summary.json")).unwrap()
    );

    // The resolved config reruns to the same records.
    let again = dir.path().join("again");
    let resolved = run.join("config.toml");
    let out = sgmoe(&[
        "sweep",
        "--config",
        resolved.to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
        "-q",
        "--sequential",
    ]);
    assert_eq!(code(&out), 0);
    let strip = |p: &Path| {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&records), strip(&again.join("records.csv")));
}

#[test]
fn simulate_then_fit() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let out = sgmoe(&[
        "simulate",
        "--preset",
        "sigmoid-comparison",
        "--n",
        "300",
        "--seed",
        "4",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(&data).unwrap().lines().count(), 301);
    assert!(dir.path().join("data.csv.manifest.json").exists());

    let out = sgmoe(&[
        "fit",
        "--preset",
        "sigmoid-comparison",
        "--data",
        data.to_str().unwrap(),
        "--k",
        "3",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    for key in ["iterations", "converged", "final loglik", "D1"] {
        assert!(text.contains(key), "{text}");
    }
}
