use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn confrank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_confrank"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let output = confrank(args);
    assert!(
        output.status.success(),
        "confrank {args:?} failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8(output.stdout).unwrap()
}

fn status(args: &[&str]) -> i32 {
    confrank(args).status.code().expect("exit code")
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn json(file: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(file).unwrap()).unwrap()
}

const SMALL: [&str; 6] = ["--embedding-dim", "4", "--hidden-units", "8", "--hash-dim", "1024"];

/// Generates `days` days of 400 examples into `<tmp>/gen`.
fn generate(tmp: &TempDir, days: usize) -> String {
    let out = path(tmp.path(), "gen");
    let days = days.to_string();
    ok(&[
        "gen",
        "--days",
        &days,
        "--examples-per-day",
        "400",
        "--hash-dim",
        "1024",
        "--seed",
        "3",
        "--out",
        &out,
    ]);
    path(tmp.path(), "gen/data.csv")
}

fn train(data: &str, out: &str, extra: &[&str]) {
    let mut args = vec!["train", "--data", data, "--epochs", "2", "--seed", "1", "--out", out];
    args.extend(SMALL);
    args.extend(extra);
    ok(&args);
}

#[test]
fn gen_is_reproducible_and_sized() {
    let tmp = TempDir::new().unwrap();
    let data = generate(&tmp, 4);
    let again = path(tmp.path(), "again");
    ok(&[
        "gen",
        "--days",
        "4",
        "--examples-per-day",
        "400",
        "--hash-dim",
        "1024",
        "--seed",
        "3",
        "--out",
        &again,
    ]);
    let first = std::fs::read(&data).unwrap();
    assert_eq!(first, std::fs::read(Path::new(&again).join("data.csv")).unwrap());
    let text = String::from_utf8(first).unwrap();
    assert!(text.starts_with("id,timestamp,label,"));
    assert_eq!(text.lines().count(), 1 + 4 * 400);
}

#[test]
fn exit_codes_follow_the_error_class() {
    let tmp = TempDir::new().unwrap();
    let out = path(tmp.path(), "x");
    assert_eq!(status(&["--help"]), 0);
    assert_eq!(status(&["frobnicate"]), 1);
    assert_eq!(status(&["gen", "--drift-rate", "-1", "--out", &out]), 1);
    assert_eq!(status(&["train", "--data", "/nonexistent/data.csv", "--out", &out]), 2);
    let data = generate(&tmp, 4);
    assert_eq!(
        status(&[
            "train",
            "--data",
            &data,
            "--mode",
            "erm",
            "--lambda-cr",
            "0.4",
            "--out",
            &out
        ]),
        1
    );
    assert_eq!(
        status(&["train", "--data", &data, "--mode", "sideways", "--out", &out]),
        1
    );
    assert_eq!(
        status(&[
            "onepass",
            "--data",
            &data,
            "--warmup-days",
            "3",
            "--cycle-days",
            "5",
            "--out",
            &out
        ]),
        2
    );
}

#[test]
fn zero_weight_ranking_mode_reports_like_erm() {
    let tmp = TempDir::new().unwrap();
    let data = generate(&tmp, 5);
    let erm = path(tmp.path(), "erm");
    let cr = path(tmp.path(), "cr");
    train(&data, &erm, &["--mode", "erm"]);
    train(&data, &cr, &["--mode", "cr", "--lambda-cr", "0", "--lambda-rcr", "0"]);
    for file in ["report.json", "history.jsonl", "model.snap"] {
        assert_eq!(
            std::fs::read(Path::new(&erm).join(file)).unwrap(),
            std::fs::read(Path::new(&cr).join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn eval_without_teacher_omits_ranking_scores() {
    let tmp = TempDir::new().unwrap();
    let data = generate(&tmp, 4);
    let model_dir = path(tmp.path(), "model");
    train(&data, &model_dir, &[]);
    let snapshot = path(Path::new(&model_dir), "model.snap");

    let line = ok(&["eval", "--snapshot", &snapshot, "--data", &data]);
    let report: Value = serde_json::from_str(line.trim()).unwrap();
    assert!(report.get("c_acc").is_none() && report.get("c_auc").is_none());
    assert_eq!(report["n"], 1600);

    let line = ok(&[
        "eval",
        "--snapshot",
        &snapshot,
        "--data",
        &data,
        "--teacher-snapshot",
        &snapshot,
    ]);
    let report: Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(report["c_acc"], 0.0);
    assert_eq!(report["c_auc"], 0.0);
}

#[test]
fn sweep_cells_match_individual_training_runs() {
    let tmp = TempDir::new().unwrap();
    let data = generate(&tmp, 5);
    let single = path(tmp.path(), "single");
    let mut args = vec![
        "sweep",
        "--data",
        &data,
        "--epochs",
        "2",
        "--seed",
        "1",
        "--grid-cr",
        "0.4",
        "--grid-rcr",
        "0.5",
        "--out",
        &single,
    ];
    args.extend(SMALL);
    ok(&args);
    let sweep = std::fs::read_to_string(Path::new(&single).join("sweep.csv")).unwrap();
    let row: Vec<&str> = sweep.lines().nth(1).unwrap().split(',').collect();

    let trained = path(tmp.path(), "trained");
    train(
        &data,
        &trained,
        &["--mode", "cr", "--lambda-cr", "0.4", "--lambda-rcr", "0.5"],
    );
    let report = json(Path::new(&trained).join("report.json"));
    assert_eq!(row[2].parse::<f64>().unwrap(), report["auc"].as_f64().unwrap());

    let grid = path(tmp.path(), "grid");
    let mut args = vec![
        "sweep",
        "--data",
        &data,
        "--epochs",
        "1",
        "--grid-cr",
        "0,0.2,0.4,0.8",
        "--grid-rcr",
        "0,0.25,0.5,1",
        "--out",
        &grid,
    ];
    args.extend(SMALL);
    ok(&args);
    let sweep = std::fs::read_to_string(Path::new(&grid).join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().next().unwrap(), "lambda_cr,lambda_rcr,test_auc,best");
    assert_eq!(sweep.lines().count(), 1 + 16);
    assert_eq!(sweep.lines().filter(|l| l.ends_with(",1")).count(), 1);
}

#[test]
fn onepass_writes_one_report_per_cycle() {
    let tmp = TempDir::new().unwrap();
    let data = generate(&tmp, 12);
    let out = path(tmp.path(), "run");
    let mut args = vec![
        "onepass",
        "--data",
        &data,
        "--mode",
        "rcr",
        "--warmup-days",
        "5",
        "--cycle-days",
        "7",
        "--out",
        &out,
    ];
    args.extend(SMALL);
    ok(&args);
    let cycles = std::fs::read_to_string(Path::new(&out).join("cycles.jsonl")).unwrap();
    let reports: Vec<Value> = cycles.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(reports.len(), 7);
    assert!(reports[0]["serve"].get("c_acc").is_none());
    for pair in reports.windows(2) {
        assert_eq!(pair[1]["served_version"], pair[0]["produced_version"]);
        assert!(pair[1]["serve"]["c_auc"].is_number());
    }
    let margins = std::fs::read_to_string(Path::new(&out).join("margins.csv")).unwrap();
    assert_eq!(margins.lines().count(), 1 + 7);
    let manifest = json(Path::new(&out).join("manifest.json"));
    assert_eq!(manifest["status"], "succeeded");
}

#[test]
fn flags_override_config_file_values() {
    let tmp = TempDir::new().unwrap();
    let data = generate(&tmp, 4);
    let config = path(tmp.path(), "run.conf");
    std::fs::write(
        &config,
        "# shared settings\nmode = rcr\nlambda_rcr = 0.3\nepochs = 1\nbatch_size = 64\n",
    )
    .unwrap();

    let out = path(tmp.path(), "run");
    let mut args = vec![
        "train",
        "--config",
        &config,
        "--data",
        &data,
        "--lambda-rcr",
        "0.7",
        "--out",
        &out,
    ];
    args.extend(SMALL);
    ok(&args);
    let manifest = json(Path::new(&out).join("manifest.json"));
    let config_used = &manifest["config"];
    assert_eq!(config_used["mode"], "rcr");
    assert_eq!(config_used["weights"]["lambda_rcr"], 0.7);
    assert_eq!(config_used["epochs"], 1);
    assert_eq!(config_used["batch_size"], 64);

    std::fs::write(&config, "{\"mode\": \"cr\", \"batch_sise\": 64}").unwrap();
    assert_eq!(
        status(&["train", "--config", &config, "--data", &data, "--out", &out]),
        1
    );
}

#[test]
fn replay_refuses_modified_inputs() {
    let tmp = TempDir::new().unwrap();
    let data = generate(&tmp, 4);
    let out = path(tmp.path(), "run");
    train(&data, &out, &[]);
    let manifest = path(Path::new(&out), "manifest.json");
    let replay = path(tmp.path(), "replay");
    ok(&["replay", "--manifest", &manifest, "--out", &replay]);
    assert_eq!(
        std::fs::read(Path::new(&out).join("model.snap")).unwrap(),
        std::fs::read(Path::new(&replay).join("model.snap")).unwrap()
    );
    std::fs::write(&data, "id,timestamp,label,f0\n").unwrap();
    assert_eq!(status(&["replay", "--manifest", &manifest, "--out", &replay]), 2);
}
