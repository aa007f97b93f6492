use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stg2seq"))
        .args(args)
        .env_clear()
        .output()
        .expect("spawn stg2seq")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, seed: &str) {
    ok(&[
        "synth-data",
        "--regions",
        "5",
        "--steps",
        "240",
        "--steps-per-day",
        "24",
        "--seed",
        seed,
        "--out",
        p(dir),
    ]);
}

const SMALL_RUN: &str = r#"{"history": 6, "short_window": 2, "patch": 2, "hidden": 4,
  "train": {"max_epochs": 1, "batch_size": 16}}"#;

fn train(data_dir: &Path, out: &Path) {
    let cfg = data_dir.join("run.json");
    std::fs::write(&cfg, SMALL_RUN).unwrap();
    ok(&[
        "train",
        "--data",
        p(&data_dir.join("demand.csv")),
        "--config",
        p(&cfg),
        "--out",
        p(out),
    ]);
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    synth(&tmp.path().join("a"), "9");
    synth(&tmp.path().join("b"), "9");
    synth(&tmp.path().join("c"), "10");
    let read = |d: &str| std::fs::read(tmp.path().join(d).join("demand.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn graph_files_written() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "1");
    let g = tmp.path().join("graph");
    ok(&[
        "build-graph",
        "--data",
        p(&tmp.path().join("demand.csv")),
        "--epsilon",
        "0.1",
        "--out",
        p(&g),
    ]);
    let adj = std::fs::read_to_string(g.join("adjacency.csv")).unwrap();
    assert_eq!(adj.lines().count(), 5);
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(g.join("graph.json")).unwrap()).unwrap();
    assert_eq!(sidecar["n_regions"], 5);
}

#[test]
fn forecast_and_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "2");
    let model = tmp.path().join("model");
    train(tmp.path(), &model);
    assert!(model.join("model.json").exists());
    assert!(model.join("model.manifest.json").exists());

    let demand = tmp.path().join("demand.csv");
    let fc = tmp.path().join("fc.csv");
    ok(&[
        "forecast",
        "--checkpoint",
        p(&model.join("model.json")),
        "--data",
        p(&demand),
        "--anchor",
        "200",
        "--tau",
        "3",
        "--mode",
        "free",
        "--out",
        p(&fc),
    ]);
    let text = std::fs::read_to_string(&fc).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 5 * 2);

    let teacher = ok(&[
        "forecast",
        "--checkpoint",
        p(&model.join("model.json")),
        "--data",
        p(&demand),
        "--anchor",
        "200",
        "--tau",
        "1",
        "--mode",
        "teacher",
    ]);
    let free1 = ok(&[
        "forecast",
        "--checkpoint",
        p(&model.join("model.json")),
        "--data",
        p(&demand),
        "--anchor",
        "200",
        "--tau",
        "1",
        "--mode",
        "free",
    ]);
    assert_eq!(teacher.stdout, free1.stdout);

    // a forecast equal to the truth scores zero everywhere
    let truth_rows: String = text
        .lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let step = 200 + f[1].parse::<usize>().unwrap();
            let key = format!("{step},{},{},", f[2], f[3]);
            let value = std::fs::read_to_string(&demand)
                .unwrap()
                .lines()
                .find(|l| l.starts_with(&key))
                .unwrap()
                .rsplit(',')
                .next()
                .unwrap()
                .to_string();
            format!("{},{},{},{},{value}\n", f[0], f[1], f[2], f[3])
        })
        .collect();
    let perfect = tmp.path().join("perfect.csv");
    std::fs::write(
        &perfect,
        format!("anchor,horizon_step,region,channel,value\n{truth_rows}"),
    )
    .unwrap();
    let out = ok(&["evaluate", "--forecast", p(&perfect), "--truth", p(&demand)]);
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["aggregate"]["rmse"], 0.0);
    assert_eq!(json["aggregate"]["mae"], 0.0);
    assert_eq!(json["per_step"].as_array().unwrap().len(), 3);
}

#[test]
fn test_split_does_not_leak_into_training() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "3");
    let poisoned = tmp.path().join("poisoned");
    std::fs::create_dir(&poisoned).unwrap();
    std::fs::copy(
        tmp.path().join("dataset.json"),
        poisoned.join("dataset.json"),
    )
    .unwrap();
    let cal: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("dataset.json")).unwrap())
            .unwrap();
    let train_end = cal["train_end_step"].as_u64().unwrap() as usize;
    let csv = std::fs::read_to_string(tmp.path().join("demand.csv")).unwrap();
    let mut lines = csv.lines();
    let mut out = format!("{}\n", lines.next().unwrap());
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f[0].parse::<usize>().unwrap() >= train_end {
            out += &format!("{},{},{},99999\n", f[0], f[1], f[2]);
        } else {
            out += &format!("{line}\n");
        }
    }
    std::fs::write(poisoned.join("demand.csv"), out).unwrap();
    std::fs::write(poisoned.join("run.json"), SMALL_RUN).unwrap();

    train(tmp.path(), &tmp.path().join("m1"));
    train(&poisoned, &tmp.path().join("m2"));
    let a = std::fs::read(tmp.path().join("m1/model.json")).unwrap();
    let b = std::fs::read(tmp.path().join("m2/model.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(
        run(&[
            "build-graph",
            "--data",
            "/nonexistent/demand.csv",
            "--out",
            "/tmp/x"
        ])
        .status
        .code(),
        Some(1)
    );

    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("demand.csv");
    std::fs::write(&bad, "step,region,channel,value\n0,0,0,NaN\n").unwrap();
    std::fs::write(tmp.path().join("dataset.json"), r#"{"steps_per_day": 24}"#).unwrap();
    let code = run(&[
        "build-graph",
        "--data",
        p(&bad),
        "--out",
        p(&tmp.path().join("g")),
    ])
    .status
    .code();
    assert_eq!(code, Some(1));
}

#[test]
fn env_vars_stand_in_for_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_stg2seq"))
        .arg("synth-data")
        .env_clear()
        .env("STG2SEQ_REGIONS", "4")
        .env("STG2SEQ_STEPS", "60")
        .env("STG2SEQ_OUT", tmp.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(tmp.path().join("demand.csv").exists());
}

#[test]
fn self_test_passes() {
    let out = ok(&["self-test"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("[PASS]")).count(), 3);
}

#[test]
fn overflowing_weights_exit_numerical() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "4");
    let model = tmp.path().join("model");
    train(tmp.path(), &model);
    let path = model.join("model.json");
    let mut ckpt: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    for tensor in ckpt["tensors"].as_object_mut().unwrap().values_mut() {
        for v in tensor["data"].as_array_mut().unwrap() {
            *v = serde_json::json!(1e308);
        }
    }
    std::fs::write(&path, ckpt.to_string()).unwrap();
    let out = run(&[
        "forecast",
        "--checkpoint",
        p(&path),
        "--data",
        p(&tmp.path().join("demand.csv")),
        "--anchor",
        "200",
        "--tau",
        "2",
    ]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
