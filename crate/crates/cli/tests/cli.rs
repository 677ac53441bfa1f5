//! End-to-end runs of the `visf` binary on a tiny world.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[world]
trajectories = 24
steps = 30
feature_dim = 8

[method.arch]
state_dim = 4
encoder_hidden = [8]
barrier_hidden = [8]
dynamics_hidden = [8]
hyperplane_hidden = [8]

[train]
warmup_epochs = 1
joint_epochs = 1
batch_size = 32
"#;

fn visf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_visf"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = visf(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Checks the exit code and the one-line JSON error on stderr.
fn fails_with(out: &Output, code: i32, kind: &str) {
    assert_eq!(out.status.code(), Some(code), "{}", String::from_utf8_lossy(&out.stderr));
    let last = String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or_default().to_string();
    let v: serde_json::Value = serde_json::from_str(&last).expect("stderr ends in JSON");
    assert_eq!(v["error"], kind);
    assert!(v["message"].as_str().is_some_and(|m| !m.is_empty()));
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("run.toml");
    fs::write(&config, TINY).unwrap();
    let data = root.join("data");
    ok(&["gen-data", "--config", s(&config), "--out", s(&data)]);
    Fixture {
        _dir: dir,
        root,
        config,
        data,
    }
}

impl Fixture {
    fn train(&self, method: &str, seed: &str, out: &Path) {
        ok(&[
            "train", "--config", s(&self.config), "--data", s(&self.data), "--method", method, "--seed", seed, "--out",
            s(out),
        ]);
    }
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let f = fixture();
    assert!(f.data.join("frames.jsonl").is_file() && f.data.join("meta.json").is_file());
    let mut evals = Vec::new();
    for method in ["idbf", "sablas", "dh"] {
        for seed in ["1", "2"] {
            let model = f.root.join(format!("m-{method}-{seed}"));
            f.train(method, seed, &model);
            assert!(model.join("model.json").is_file());
            let manifest: serde_json::Value =
                serde_json::from_str(&fs::read_to_string(model.join("manifest.json")).unwrap()).unwrap();
            assert_eq!(manifest["method"], method);
            assert_eq!(manifest["seed"], seed.parse::<u64>().unwrap());
            let eval = f.root.join(format!("e-{method}-{seed}"));
            ok(&["eval", "--model", s(&model), "--data", s(&f.data), "--out", s(&eval)]);
            assert!(eval.join("metrics.csv").is_file());
            evals.push(eval);
        }
    }

    let filtered = f.root.join("filtered.jsonl");
    let model = f.root.join("m-idbf-1");
    ok(&["filter", "--model", s(&model), "--data", s(&f.data), "--out", s(&filtered)]);
    let lines: Vec<serde_json::Value> = fs::read_to_string(&filtered)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!lines.is_empty());
    for rec in &lines {
        let u: Vec<f64> = serde_json::from_value(rec["u_out"].clone()).unwrap();
        assert!(u.iter().all(|v| v.abs() <= 10.0 + 1e-12));
        assert!(rec["status"].is_string());
    }

    let report = f.root.join("report.csv");
    let mut args = vec!["report", "--out", s(&report), "--runs"];
    args.extend(evals.iter().map(|p| s(p)));
    ok(&args);
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("method,features,variant,runs,"));
    assert_eq!(text.lines().filter(|l| l.contains(",camera,fused,2,")).count(), 3);
    assert!(f.root.join("report.json").is_file());
}

#[test]
fn repeated_commands_are_bitwise_identical() {
    let f = fixture();
    let again = f.root.join("data2");
    ok(&["gen-data", "--config", s(&f.config), "--out", s(&again)]);
    for file in ["frames.jsonl", "meta.json"] {
        assert_eq!(fs::read(f.data.join(file)).unwrap(), fs::read(again.join(file)).unwrap());
    }
    let (a, b) = (f.root.join("a"), f.root.join("b"));
    f.train("sablas", "9", &a);
    f.train("sablas", "9", &b);
    assert_eq!(fs::read(a.join("model.json")).unwrap(), fs::read(b.join("model.json")).unwrap());
    let (ea, eb) = (f.root.join("ea"), f.root.join("eb"));
    ok(&["eval", "--model", s(&a), "--data", s(&f.data), "--out", s(&ea)]);
    ok(&["eval", "--model", s(&b), "--data", s(&f.data), "--out", s(&eb)]);
    for file in ["metrics.json", "metrics.csv"] {
        assert_eq!(fs::read(ea.join(file)).unwrap(), fs::read(eb.join(file)).unwrap());
    }
}

#[test]
fn bad_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    for (name, text) in [
        ("unknown.toml", "seed = 1\nbogus = 2\n"),
        ("noseed.toml", "[train]\njoint_epochs = 1\n"),
        ("invalid.toml", "seed = 1\n[world]\ndt = -0.1\n"),
        ("syntax.toml", "seed = = 1\n"),
    ] {
        let cfg = dir.path().join(name);
        fs::write(&cfg, text).unwrap();
        let run = visf(&["gen-data", "--config", s(&cfg), "--out", s(&out)]);
        fails_with(&run, 2, "config");
        assert!(!out.exists(), "{name} left output behind");
    }
}

#[test]
fn unreadable_inputs_exit_with_code_three() {
    let f = fixture();
    let missing = f.root.join("nowhere");
    let out = f.root.join("m");
    let run = visf(&["train", "--config", s(&f.config), "--data", s(&missing), "--out", s(&out)]);
    fails_with(&run, 3, "data");
    assert!(!out.exists());

    // A checkpoint that is not one.
    let fake = f.root.join("fake");
    fs::create_dir(&fake).unwrap();
    fs::write(fake.join("model.json"), "{\"format\": 1}").unwrap();
    let eval = f.root.join("e");
    let run = visf(&["eval", "--model", s(&fake), "--data", s(&f.data), "--out", s(&eval)]);
    fails_with(&run, 3, "data");
    assert!(!eval.exists());

    // A truncated frames file.
    let text = fs::read_to_string(f.data.join("frames.jsonl")).unwrap();
    fs::write(f.data.join("frames.jsonl"), &text[..text.len() / 2]).unwrap();
    let run = visf(&["train", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&out)]);
    fails_with(&run, 3, "data");
}

#[test]
fn divergent_training_exits_with_code_four() {
    let f = fixture();
    let cfg = f.root.join("hot.toml");
    fs::write(&cfg, TINY.replace("batch_size = 32", "batch_size = 32\nlearning_rate = 1e200")).unwrap();
    let out = f.root.join("m");
    let run = visf(&["train", "--config", s(&cfg), "--data", s(&f.data), "--method", "idbf", "--out", s(&out)]);
    fails_with(&run, 4, "numerical");
    assert!(!out.exists());
}

#[test]
fn unwritable_output_exits_with_code_one() {
    let f = fixture();
    let blocker = f.root.join("file");
    fs::write(&blocker, "x").unwrap();
    let out = blocker.join("sub");
    let run = visf(&["gen-data", "--config", s(&f.config), "--out", s(&out)]);
    fails_with(&run, 1, "io");
}

#[test]
fn mismatched_checkpoint_and_dataset_is_a_data_error() {
    let f = fixture();
    let model = f.root.join("m");
    f.train("dh", "1", &model);
    let cfg = f.root.join("wide.toml");
    fs::write(&cfg, TINY.replace("feature_dim = 8", "feature_dim = 12")).unwrap();
    let wide = f.root.join("wide");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&wide)]);
    let out = f.root.join("f.jsonl");
    let run = visf(&["filter", "--model", s(&model), "--data", s(&wide), "--out", s(&out)]);
    fails_with(&run, 3, "data");
    assert!(!out.exists());
}
