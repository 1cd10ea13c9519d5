use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "name": "cli-graph",
  "seed": 5,
  "env": {"kind": "graph", "n_nodes": 8, "sparsity": 0.3, "max_steps": 5, "seed": 2},
  "dataset": {"source": "generate", "n_trajectories": 40},
  "model": {"context_k": 5, "n_layers": 1, "n_heads": 1, "d_model": 8, "return_bins": {"min": -5, "max": 0}},
  "train": {"steps": 4, "batch_size": 4, "learning_rate": 0.001, "warmup_steps": 2, "schedule": "warmup_cosine",
            "grad_clip": 1.0, "weight_decay": 0.0001, "dropout": 0.1, "seed": 0, "objective": "dt"},
  "arms": [
    {"name": "dt", "objective": "dt", "predict_returns": true, "evals": [
      {"kind": "graph_prior", "gamma": 10.0, "episodes_per_start": 1}
    ]},
    {"name": "bc", "objective": "bc"}
  ]
}"#;

fn dt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    assert_eq!(code(&dt(&[])), 1);
    assert_eq!(code(&dt(&["train", "--config"])), 1);
    assert_eq!(code(&dt(&["--help"])), 0);
    assert_eq!(
        code(&dt(&["run", "--config", "/nonexistent/config.json"])),
        1
    );

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &CONFIG.replace(r#""kind": "graph""#, r#""kind": "maze""#),
    );
    let out = dt(&["run", "--config", &cfg]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("env"));

    let cfg = write_config(dir.path(), CONFIG);
    assert_eq!(
        code(&dt(&[
            "train", "--config", &cfg, "--arm", "missing", "--out", "m.json"
        ])),
        1
    );
    assert_eq!(code(&dt(&["run", "--config", &cfg, "--steps", "0"])), 1);
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let model = dir.path().join("absent.json");
    let out = dt(&[
        "eval",
        "--config",
        &cfg,
        "--arm",
        "dt",
        "--model",
        model.to_str().unwrap(),
        "--episodes",
        "2",
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn staged_commands_and_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, CONFIG);
    let s = |p: &str| d.join(p).to_str().unwrap().to_string();
    let ok = |args: &[&str]| {
        let out = dt(args);
        assert_eq!(
            code(&out),
            0,
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    };

    let msg = ok(&[
        "gen-data",
        "--config",
        &cfg,
        "--out",
        &s("data.djsonl"),
        "--n-trajectories",
        "30",
    ]);
    assert!(msg.starts_with("30 trajectories"), "{msg}");
    ok(&[
        "train",
        "--config",
        &cfg,
        "--data",
        &s("data.djsonl"),
        "--arm",
        "dt",
        "--out",
        &s("dt.json"),
    ]);
    assert!(d.join("dt.train.csv").exists());

    let eval_dir = s("eval");
    let common = [
        "--config",
        &cfg,
        "--data",
        &s("data.djsonl"),
        "--arm",
        "dt",
        "--model",
        &s("dt.json"),
        "--output-dir",
        &eval_dir,
    ];
    ok(&[
        &["eval"][..],
        &common,
        &["--episodes", "3", "--target-return", "-2"],
    ]
    .concat());
    ok(&[
        &["sweep"][..],
        &common,
        &["--targets", "-4,-2,0", "--episodes-per-target", "2"],
    ]
    .concat());
    ok(&[&["analyze"][..], &common].concat());
    for f in [
        "success_dt.csv",
        "sweep_dt.csv",
        "histogram_dt.csv",
        "histogram_dt.svg",
        "stitching_dt.csv",
    ] {
        assert!(d.join("eval").join(f).exists(), "{f}");
    }

    let out = ok(&[
        "run",
        "--config",
        &cfg,
        "--output-dir",
        &s("run"),
        "--seed",
        "9",
    ]);
    assert!(out.contains("goal_reach_rate"), "{out}");
    let metrics = fs::read_to_string(d.join("run").join("metrics.csv")).unwrap();
    assert!(
        metrics
            .lines()
            .skip(1)
            .all(|l| l.split(',').nth(1) == Some("9")),
        "{metrics}"
    );
}
