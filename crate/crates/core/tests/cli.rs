use std::process::Command;

fn trajlab() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_trajlab"));
    c.env("RUST_LOG", "warn");
    c
}

const SMALL: [&str; 10] = [
    "--hidden",
    "8",
    "--steps",
    "40",
    "--n-train",
    "256",
    "--n-test",
    "64",
    "--batch-size",
    "32",
];

#[test]
fn version_and_usage_exit_codes() {
    let out = trajlab().arg("--version").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains(env!("CARGO_PKG_VERSION")));
    let out = trajlab().args(["barrier", "--a", "x.ckpt"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = trajlab().args(["train", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = trajlab().args(["train", "--lr", "0"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let out = trajlab()
        .args(["barrier", "--a"])
        .arg(&missing)
        .arg("--b")
        .arg(&missing)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_then_barrier_on_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = trajlab()
        .env("TRAJLAB_OUT", dir.path())
        .arg("train")
        .args(SMALL)
        .args(["--out", "a.ckpt"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    // The resolved configuration is echoed before the run.
    assert!(String::from_utf8_lossy(&out.stderr).contains("steps = 40"));
    let ckpt = dir.path().join("a.ckpt");
    let out = trajlab()
        .args(["barrier", "--data", "test", "--a"])
        .arg(&ckpt)
        .arg("--b")
        .arg(&ckpt)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().nth(1).unwrap().split(',').next().unwrap(), "0.0");
}

#[test]
fn sweep_from_plan_file_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.txt");
    std::fs::write(
        &plan,
        "hidden = 8\nsteps = 40\nn_train = 256\nn_test = 64\nbatch_size = 32\nprobe = 32\n\
         times = 0, 0.5\nsigmas = 0, 0.01\nseeds = 1\nseeds = 2\nbarrier_wm = false\n",
    )
    .unwrap();
    let csv = dir.path().join("results.csv");
    let out = trajlab()
        .arg("sweep")
        .arg("--plan")
        .arg(&plan)
        .arg("--out")
        .arg(&csv)
        .args(["--parallel", "2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with(&format!("# trajlab {}", env!("CARGO_PKG_VERSION"))));
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 1 + 8);
    assert!(rows[0].starts_with("mode,seed,t_frac,t_step,kind,mask,sigma,l2,"));
    let out = trajlab().arg("report").arg(&csv).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 1 + 4);
}

#[test]
fn spawn_perturb_series_and_fit() {
    let dir = tempfile::tempdir().unwrap();
    let series = dir.path().join("series.csv");
    let out = trajlab()
        .arg("spawn-perturb")
        .args(SMALL)
        .args([
            "--sigma",
            "0.01",
            "--perturb-step",
            "0.25",
            "--series",
            "true",
            "--series-every",
            "5",
        ])
        .arg("--series-out")
        .arg(&series)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = trajlab().arg("fit").arg(&series).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("rate,intercept,r2,n_used"));
}

#[test]
fn gen_data_writes_idx_that_trains() {
    let dir = tempfile::tempdir().unwrap();
    let out = trajlab()
        .env("TRAJLAB_OUT", dir.path())
        .args([
            "gen-data",
            "--n-train",
            "128",
            "--n-test",
            "32",
            "--dim",
            "5",
            "--classes",
            "3",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let p = |n: &str| dir.path().join(n);
    let out = trajlab()
        .arg("train")
        .args(["--hidden", "4", "--steps", "5", "--batch-size", "16"])
        .arg("--train-images")
        .arg(p("train-images.idx"))
        .arg("--train-labels")
        .arg(p("train-labels.idx"))
        .arg("--test-images")
        .arg(p("test-images.idx"))
        .arg("--test-labels")
        .arg(p("test-labels.idx"))
        .arg("--out")
        .arg(p("m.ckpt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}
