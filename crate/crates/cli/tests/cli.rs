use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lordnet::config::RunConfig;
use lordnet::model::Network;
use lordnet::{io, Field};

const POISSON: &str = r#"{
    "problem": {"kind": "poisson_dirichlet"},
    "grid": {"n": 8},
    "network": {"arch": {"lord": {"variant": "poisson_linear", "channels": 2, "layers": 1, "side": 6}}},
    "train": {"loss": "mse", "lr0": 0.001, "decay_factor": 0.8, "decay_every": 10, "batch": 2, "max_iters": 4},
    "data": {"source": "fdm_trajectories", "samples": 4},
    "eval": {"test_samples": 2, "protocol": "one_step", "timing_reps": 100},
    "seeds": {"init": 3, "train": 1000, "test": 0},
    "output_dir": "OUT"
}"#;

const NS: &str = r#"{
    "problem": {"kind": "ns_liddriven", "ns": {"reynolds": 100.0, "dt": 0.01, "warm_start_steps": 2}},
    "grid": {"n": 8},
    "network": {"arch": {"lord": {"variant": "ns_lord", "channels": 2, "layers": 1, "side": 6, "embed_hidden": [3, 3]}}},
    "train": {"loss": "msr", "lr0": 0.001, "decay_factor": 0.8, "decay_every": 10, "batch": 2, "max_iters": 3},
    "data": {"source": "sampled_initials", "samples": 4},
    "eval": {"test_samples": 2, "protocol": {"rollout": {"horizon": 3}}, "timing_reps": 100},
    "seeds": {"init": 0, "train": 1000, "test": 0},
    "output_dir": "OUT"
}"#;

fn lordnet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lordnet"))
        .args(args)
        .current_dir(dir)
        .env_remove(lordnet::config::OUTPUT_ENV)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes `template` with `OUT` replaced by `dir/out`, plus textual edits.
fn config(dir: &Path, template: &str, edits: &[(&str, &str)]) -> PathBuf {
    let mut text = template.replace("OUT", &dir.join("out").display().to_string());
    for (from, to) in edits {
        assert!(text.contains(from), "{from}");
        text = text.replace(from, to);
    }
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path
}

fn ldnf_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "ldnf"))
        .collect();
    v.sort();
    v
}

#[test]
fn gen_with_zero_count_writes_an_empty_manifest() {
    let t = tempfile::tempdir().unwrap();
    let cfg = config(t.path(), POISSON, &[]);
    let o = lordnet(&["gen", "--config", cfg.to_str().unwrap(), "--count", "0", "--out", "d"], t.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(t.path().join("d/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["count"], 0);
    assert!(ldnf_files(&t.path().join("d")).is_empty());
}

#[test]
fn gen_is_reproducible_and_counts_match() {
    let t = tempfile::tempdir().unwrap();
    let cfg = config(t.path(), POISSON, &[]);
    let c = cfg.to_str().unwrap();
    for d in ["a", "b"] {
        let o = lordnet(&["gen", "--config", c, "--count", "3", "--seed", "7", "--out", d], t.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = ldnf_files(&t.path().join("a"));
    let b = ldnf_files(&t.path().join("b"));
    // mse configs get solver targets alongside the forcings
    assert_eq!(a.len(), 6);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
    let m: serde_json::Value = serde_json::from_slice(&fs::read(t.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["count"], 3);
    assert_eq!(m["first_seed"], 7);
    assert_eq!(m["files"].as_array().unwrap().len(), 6);
}

#[test]
fn existing_output_needs_force() {
    let t = tempfile::tempdir().unwrap();
    let cfg = config(t.path(), POISSON, &[]);
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&lordnet(&["gen", "--config", c, "--count", "1", "--out", "d"], t.path())), 0);
    let o = lordnet(&["gen", "--config", c, "--count", "1", "--out", "d"], t.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    assert_eq!(code(&lordnet(&["gen", "--config", c, "--count", "1", "--out", "d", "--force"], t.path())), 0);
}

#[test]
fn poisson_solve_audits_below_tolerance_and_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let cfg = config(t.path(), POISSON, &[]);
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&lordnet(&["gen", "--config", c, "--count", "3", "--out", "in"], t.path())), 0);
    io::write_field(&t.path().join("in/zero.ldnf"), &Field::zeros(&[8, 8])).unwrap();
    let mut outs = Vec::new();
    for d in ["s1", "s2"] {
        let o = lordnet(&["solve", "--config", c, "--input", "in", "--out", d], t.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let text = stdout(&o);
        let lines: Vec<&str> = text.lines().filter(|l| l.starts_with("audit")).collect();
        assert_eq!(lines.len(), 7);
        assert!(lines.iter().all(|l| l.ends_with(" ok")), "{lines:?}");
        outs.push(t.path().join(d));
    }
    let audit: serde_json::Value = serde_json::from_slice(&fs::read(outs[0].join("audit.json")).unwrap()).unwrap();
    for a in audit.as_array().unwrap() {
        assert!(a["residual"].as_f64().unwrap() <= a["bound"].as_f64().unwrap());
    }
    let zero = io::read_field(&outs[0].join("zero.ldnf")).unwrap();
    assert_eq!(zero.max_abs(), 0.0);
    let (a, b) = (ldnf_files(&outs[0]), ldnf_files(&outs[1]));
    assert_eq!(a.len(), 7);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
}

#[test]
fn ns_solve_audits_every_step() {
    let t = tempfile::tempdir().unwrap();
    let cfg = config(t.path(), NS, &[]);
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&lordnet(&["gen", "--config", c, "--count", "2", "--out", "in"], t.path())), 0);
    let o = lordnet(&["solve", "--config", c, "--input", "in", "--out", "s", "--steps", "3"], t.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.ends_with(" ok")).count(), 2);
}

#[test]
fn train_with_zero_iterations_saves_the_initialization() {
    let t = tempfile::tempdir().unwrap();
    let cfg = config(t.path(), POISSON, &[(r#""max_iters": 4"#, r#""max_iters": 0"#)]);
    let o = lordnet(&["train", "--config", cfg.to_str().unwrap()], t.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (net, iteration) = io::load_checkpoint(&t.path().join("out/checkpoint")).unwrap();
    assert_eq!(iteration, 0);
    let rc = RunConfig::load(&cfg).unwrap();
    assert_eq!(net, Network::build(rc.network, rc.seeds.init).unwrap());
}

#[test]
fn train_writes_reports_and_honours_the_env_override() {
    let t = tempfile::tempdir().unwrap();
    let cfg = config(t.path(), NS, &[]);
    let o = Command::new(env!("CARGO_BIN_EXE_lordnet"))
        .args(["train", "--config", cfg.to_str().unwrap()])
        .current_dir(t.path())
        .env(lordnet::config::OUTPUT_ENV, t.path().join("elsewhere"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = t.path().join("elsewhere");
    assert!(!t.path().join("out").exists());
    for f in ["config.json", "loss_curve.csv", "eval_errors.csv", "summary.json", "timing.json", "checkpoint/manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let curve = fs::read_to_string(out.join("loss_curve.csv")).unwrap();
    assert!(curve.starts_with("iter,lr,loss\n"));
}

#[test]
fn divergence_exits_with_the_numerical_code() {
    let t = tempfile::tempdir().unwrap();
    let cfg = config(
        t.path(),
        POISSON,
        &[(r#""max_iters": 4"#, r#""max_iters": 4, "divergence_threshold": 1e-300"#)],
    );
    let o = lordnet(&["train", "--config", cfg.to_str().unwrap()], t.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
}

#[test]
fn config_errors_name_the_offending_key() {
    let t = tempfile::tempdir().unwrap();
    let cfg = config(t.path(), POISSON, &[(r#""batch": 2"#, r#""batch": 2, "momentum": 0.9"#)]);
    let o = lordnet(&["train", "--config", cfg.to_str().unwrap()], t.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("train.momentum"), "{}", stderr(&o));
    let o = lordnet(&["train", "--config", "missing.json"], t.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn eval_of_the_fdm_reference_sits_at_the_floor() {
    let t = tempfile::tempdir().unwrap();
    let cfg = config(t.path(), NS, &[]);
    let o = lordnet(&["eval", "--config", cfg.to_str().unwrap(), "--fdm", "--out", "fdm.json"], t.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&fs::read(t.path().join("fdm.json")).unwrap()).unwrap();
    for e in v["report"]["curve"].as_array().unwrap() {
        assert!(e.as_f64().unwrap() <= 10.0 * lordnet::fdm::DEFAULT_CG_TOL);
    }
}

#[test]
fn eval_of_a_checkpoint_matches_the_training_report() {
    let t = tempfile::tempdir().unwrap();
    let cfg = config(t.path(), POISSON, &[]);
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&lordnet(&["train", "--config", c], t.path())), 0);
    let o = lordnet(&["eval", "--config", c, "--checkpoint", "out/checkpoint"], t.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(t.path().join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(v["report"], summary["eval"]);
}

#[test]
fn gradcheck_passes() {
    let t = tempfile::tempdir().unwrap();
    let o = lordnet(&["gradcheck", "--seeds", "2"], t.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn render_formats_and_slices() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path();
    io::write_field(&p.join("c.ldnf"), &Field::filled(&[4, 3], 2.5)).unwrap();
    assert_eq!(code(&lordnet(&["render", "c.ldnf", "--out", "c.pgm"], p)), 0);
    let (w, h, px) = lordnet::render::parse_pgm(&fs::read(p.join("c.pgm")).unwrap()).unwrap();
    assert_eq!((w, h), (4, 3));
    assert!(px.iter().all(|&v| v == 128));
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(p.join("c.pgm.json")).unwrap()).unwrap();
    assert_eq!(meta["min"], 2.5);
    assert_eq!(code(&lordnet(&["render", "c.ldnf", "--out", "c2.pgm", "--p2"], p)), 0);
    assert!(fs::read_to_string(p.join("c2.pgm")).unwrap().starts_with("P2"));

    let f = Field::from_fn(&[2, 3, 3], |ix| (ix[0] * 9 + ix[1] * 3 + ix[2]) as f64 / 7.0);
    io::write_field(&p.join("s.ldnf"), &f).unwrap();
    let o = lordnet(&["render", "s.ldnf", "--out", "s.pgm"], p);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--slice"));
    assert_eq!(code(&lordnet(&["render", "s.ldnf", "--out", "s.csv", "--csv", "--slice", "1"], p)), 0);
    let back = lordnet::render::parse_csv(&fs::read_to_string(p.join("s.csv")).unwrap()).unwrap();
    assert_eq!(back, f.channel(1).unwrap());
}

#[test]
fn experiments_list_and_unknown_names() {
    let t = tempfile::tempdir().unwrap();
    let o = lordnet(&["experiments", "--list"], t.path());
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).lines().count(), lordnet::experiments::PRESETS.len());
    assert_eq!(code(&lordnet(&["experiments", "no_such_preset"], t.path())), 1);
    let o = lordnet(&["experiments", "ns_periodic_n32_ci", "--print-config"], t.path());
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let cfg: RunConfig = serde_json::from_value(v["lordnet"].clone()).unwrap();
    cfg.validate().unwrap();
}

#[test]
fn entanglement_preset_runs_and_archives() {
    let t = tempfile::tempdir().unwrap();
    let o = lordnet(&["experiments", "fig1_entanglement", "--out", "res"], t.path());
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let dir = t.path().join("res/presets/fig1_entanglement");
    assert!(dir.join("outcome.json").exists());
    assert_eq!(ldnf_files(&dir).len(), 8);
}
