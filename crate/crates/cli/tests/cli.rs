use std::path::Path;
use std::process::{Command, Output};

use exfm::nn::{save_checkpoint, Activation, MlpSpec};

fn exfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exfm")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Data rows of a CSV, skipping `#` lines and the header.
fn rows(csv: &str) -> Vec<Vec<f64>> {
    csv.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(|c| c.parse().unwrap_or(f64::NAN)).collect())
        .collect()
}

fn header(csv: &str) -> &str {
    csv.lines().find(|l| !l.starts_with('#')).unwrap()
}

const SMALL_CONFIG: &str = r#"
[objective]
kind = "exfm"
bank_size = 256

[model]
hidden = [32, 32]

[data]
kind = "toy"
name = "moons"
train_size = 2000
eval_size = 200

[run]
steps = 40
batch_size = 32
eval_every = 20
w2_size = 100
seed = 3
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn gauss_default_grid_header() {
    let out = stdout(&exfm(&["exact-field", "--case", "gauss"]));
    assert_eq!(header(&out), "t,x,v");
    assert_eq!(rows(&out).len(), 19 * 25);
}

#[test]
fn ot_identity_scale_gives_constant_field() {
    let out = stdout(&exfm(&["exact-field", "--case", "ot", "--mu", "1.5", "--sigma", "1"]));
    for r in rows(&out) {
        assert_eq!(r[2], 1.5);
    }
}

#[test]
fn gm_matches_quadrature_oracle() {
    let out = stdout(&exfm(&["exact-field", "--case", "gm", "--mu", "2", "--sigma", "0.5", "--with-oracle"]));
    assert_eq!(header(&out), "t,x,v,v_oracle");
    for r in rows(&out) {
        assert!((r[2] - r[3]).abs() <= 1e-6 * (1.0 + r[3].abs()), "{r:?}");
    }
}

#[test]
fn bad_case_is_usage_error() {
    let o = exfm(&["exact-field", "--case", "banana"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("banana"));
    assert_eq!(exfm(&["exact-field", "--case", "sde", "--with-oracle"]).status.code(), Some(2));
    assert_eq!(exfm(&["exact-field", "--case", "gauss", "--grid", "0:2:3,-1:1:3"]).status.code(), Some(2));
}

#[test]
fn trajectories_follow_closed_form() {
    let out = stdout(&exfm(&["trajectories", "--case", "gauss", "--starts", "-2:2:5", "--steps", "200"]));
    assert_eq!(header(&out), "path,t,x,x_closed_form");
    let r = rows(&out);
    assert_eq!(r.len(), 5 * 201);
    for row in &r {
        assert!((row[2] - row[3]).abs() < 1e-6, "{row:?}");
    }
    let gm = stdout(&exfm(&["trajectories", "--case", "gm", "--starts", "0.5:0.5:1", "--steps", "10"]));
    assert!(gm.lines().nth(1).unwrap().ends_with(','));
}

#[test]
fn estimate_grid_columns_and_error() {
    let out = stdout(&exfm(&["estimate", "--grid", "0.2:0.8:3,-1:1:3", "--bank", "5000"]));
    assert_eq!(header(&out), "t,x,v_estimate,v_exact,abs_err,ess");
    for r in rows(&out) {
        assert!((r[4] - (r[2] - r[3]).abs()).abs() < 1e-12);
        assert!(r[4] < 0.3 && r[5] > 1.0 && r[5] <= 5000.0, "{r:?}");
    }
    let rej = stdout(&exfm(&["estimate", "--grid", "0.5:0.5:1,0:0:1", "--estimator", "rejection"]));
    assert_eq!(rows(&rej).len(), 1);
}

#[test]
fn estimate_convergence_slope_is_minus_half() {
    let out = stdout(&exfm(&["estimate", "--convergence"]));
    let slope: f64 = out.lines().next().unwrap().strip_prefix("# log_log_slope=").unwrap().parse().unwrap();
    assert!((-0.65..=-0.35).contains(&slope), "slope {slope}");
    assert_eq!(header(&out), "n,rmse,rmse_sqrt_n");
    assert_eq!(rows(&out).len(), 3);
}

#[test]
fn dispersion_sweep_table() {
    let out = stdout(&exfm(&["dispersion", "--sweep", "--m", "2000", "--cfm-draws", "20000"]));
    assert!(out.starts_with("# D_x1="));
    assert_eq!(header(&out), "t,cfm_analytic,cfm_alternative,cfm_mc,exfm_numeric,excluded");
    let r = rows(&out);
    assert_eq!(r.len(), 19);
    for row in &r {
        assert!(row[4] < row[1], "{row:?}");
    }
    assert_eq!(exfm(&["dispersion"]).status.code(), Some(2));
}

#[test]
fn train_writes_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_CONFIG);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        stdout(&exfm(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]));
    }
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert!(summary["final_energy_distance"].as_f64().unwrap() >= 0.0);
    assert_eq!(summary["seed"], 3);
    let log = std::fs::read_to_string(a.join("run.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 41);
    for f in ["run.jsonl", "field.ckpt", "field_ema.ckpt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn exfm_mean_loss_below_cfm_for_same_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL_CONFIG.replace("eval_every = 20", "eval_every = 0"));
    let mut loss = Vec::new();
    for obj in ["cfm", "exfm"] {
        let out = dir.path().join(obj);
        stdout(&exfm(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--objective", obj]));
        let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
        assert_eq!(s["objective"], obj);
        loss.push(s["mean_loss"].as_f64().unwrap());
    }
    assert!(loss[1] < loss[0], "exfm {} vs cfm {}", loss[1], loss[0]);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[data]\nkind = \"csv\"\npath = \"/does/not/exist.csv\"\n[run]\nstepz = 1\n");
    let o = exfm(&["train", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("run.stepz") && err.contains("data.path"), "{err}");
    let o = exfm(&["train", "--config", "/does/not/exist.toml", "--out", "/tmp/x"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sample_and_metrics_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL_CONFIG.replace("steps = 40", "steps = 5"));
    let run = dir.path().join("run");
    stdout(&exfm(&["train", "--config", &cfg, "--out", run.to_str().unwrap()]));
    let ck = run.join("field_ema.ckpt");
    let s1 = dir.path().join("s1.csv");
    let args = ["sample", "--from", ck.to_str().unwrap(), "--n", "1000", "--seed", "9"];
    stdout(&exfm(&[&args[..], &["--out", s1.to_str().unwrap()]].concat()));
    let text = std::fs::read_to_string(&s1).unwrap();
    assert_eq!(header(&text), "x0,x1");
    let r = rows(&text);
    assert_eq!(r.len(), 1000);
    assert!(r.iter().all(|p| p.len() == 2 && p.iter().all(|v| v.is_finite())));
    assert_eq!(stdout(&exfm(&args)), text);

    let m = stdout(&exfm(&["metrics", "--x", s1.to_str().unwrap(), "--y", s1.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap()]));
    let v: serde_json::Value = serde_json::from_str(&m).unwrap();
    assert!(v["energy_distance"].as_f64().unwrap().abs() < 1e-12);
    assert!(v["w2"].as_f64().unwrap() >= 0.0);
    assert!(v["nll"].as_f64().unwrap().is_finite());
    assert_eq!(exfm(&["metrics", "--x", s1.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn diverging_field_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let spec = MlpSpec::new(1, vec![4], Activation::Relu).unwrap();
    let ck = dir.path().join("big.ckpt");
    save_checkpoint(&ck, &spec, &vec![1e200; spec.num_params()], 0, 0).unwrap();
    let o = exfm(&["sample", "--from", ck.to_str().unwrap(), "--n", "4"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn thread_count_does_not_change_output() {
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_exfm"))
            .env("EXFM_THREADS", threads)
            .args(["dispersion", "--t", "0.3,0.7", "--m", "3000", "--cfm-draws", "5000", "--seed", "4"])
            .output()
            .unwrap()
    };
    assert_eq!(stdout(&run("1")), stdout(&run("4")));
    assert_eq!(run("zero").status.code(), Some(2));
}
