use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn rmm(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rmm"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn trained() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = rmm(dir.path(), &["train-tasks"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

fn report(dir: &Path, name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(name)).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_tasks_writes_checkpoints_and_is_idempotent() {
    let dir = trained();
    let files = [
        "pt.rmmc",
        "ft_task-a.rmmc",
        "ft_task-b.rmmc",
        "data/task-a_eval.bin",
        "data/task-b_train.json",
    ];
    let stamps: Vec<_> = files
        .iter()
        .map(|f| std::fs::metadata(dir.path().join(f)).unwrap().modified().unwrap())
        .collect();
    let o = rmm(dir.path(), &["train-tasks"]);
    assert!(o.status.success());
    for (f, t) in files.iter().zip(stamps) {
        assert_eq!(
            std::fs::metadata(dir.path().join(f)).unwrap().modified().unwrap(),
            t,
            "{f}"
        );
    }
}

#[test]
fn malformed_config_reports_position() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{\n  \"seed\": 1,\n  oops\n}").unwrap();
    let o = rmm(dir.path(), &["--config", cfg.to_str().unwrap(), "train-tasks"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = rmm(dir.path(), &["--set", "search.nonsense=3", "train-tasks"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn average_of_identical_models_is_that_model() {
    let dir = trained();
    let a = dir.path().join("ft_task-a.rmmc");
    let models = format!("checkpoints.models=[{:?},{:?}]", a, a);
    let o = rmm(dir.path(), &["--set", &models, "merge", "--method", "avg"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(dir.path().join("merged.rmmc")).unwrap(),
        std::fs::read(&a).unwrap()
    );
}

#[test]
fn copy_plan_reproduces_first_model() {
    let dir = trained();
    let plan = dir.path().join("plan.json");
    std::fs::write(
        &plan,
        r#"[{"layer":1,"action":"model:1"},{"layer":2,"action":"model:1"},{"layer":3,"action":"model:1"}]"#,
    )
    .unwrap();
    let o = rmm(dir.path(), &["merge", "--plan", plan.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(dir.path().join("merged.rmmc")).unwrap(),
        std::fs::read(dir.path().join("ft_task-a.rmmc")).unwrap()
    );
    let r = report(dir.path(), "report.json");
    assert!(r["accuracy"]["mean"].as_f64().unwrap() > 0.5);
    assert!(r["config"].is_object());
}

#[test]
fn bad_method_and_bad_plan_exit_codes() {
    let dir = trained();
    assert_eq!(
        rmm(dir.path(), &["merge", "--method", "bogus"]).status.code(),
        Some(1)
    );
    let plan = dir.path().join("plan.json");
    std::fs::write(&plan, r#"[{"layer":1,"action":"model:7"}]"#).unwrap();
    assert_eq!(
        rmm(dir.path(), &["merge", "--plan", plan.to_str().unwrap()])
            .status
            .code(),
        Some(3)
    );
}

#[test]
fn search_is_deterministic_and_reports() {
    let dir = trained();
    let args = ["--set", "search.total_episodes=40", "search"];
    let o = rmm(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("wall time"));
    assert!(stdout.contains("speed-up"));
    let first = report(dir.path(), "report.json");
    let o = rmm(dir.path(), &args);
    assert!(o.status.success());
    let second = report(dir.path(), "report.json");
    assert_eq!(first["best_plan"], second["best_plan"]);
    assert_eq!(first["best_full_reward"], second["best_full_reward"]);
    for key in [
        "baseline_rewards",
        "oracle_reward",
        "wall_time_seconds",
        "episode_log_path",
        "config",
    ] {
        assert!(!first[key].is_null(), "{key}");
    }
    assert!(first["oracle_reward"].as_f64() >= first["best_full_reward"].as_f64());
    let csv = std::fs::read_to_string(dir.path().join("rewards.csv")).unwrap();
    assert_eq!(csv.lines().count(), 41);
    assert!(csv.starts_with("episode,raw_reward,smoothed_reward,wrapped,acc_task-a,acc_task-b"));
    assert!(dir.path().join("merged.rmmc").exists());
}

#[test]
fn missing_checkpoint_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let o = rmm(dir.path(), &["search"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("pt.rmmc"), "{}", stderr(&o));
}

#[test]
fn oracle_table_has_64_rows_and_dominates_baselines() {
    let dir = trained();
    let o = rmm(dir.path(), &["oracle"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let t = report(dir.path(), "oracle_table.json");
    assert_eq!(t["table"].as_array().unwrap().len(), 64);
    let best = t["best_reward"].as_f64().unwrap();
    // avg and dare are outside the default two-operator space
    let ta = t["baseline_rewards"]["ta"].as_f64().unwrap();
    let ties = t["baseline_rewards"]["ties"].as_f64().unwrap();
    assert!(best >= ta && best >= ties);
}

#[test]
fn oversized_oracle_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let o = rmm(
        dir.path(),
        &[
            "--set",
            "arch.hidden_layers=18",
            "--set",
            r#"merge.ops=["avg","ta","ties","dare"]"#,
            "--set",
            r#"checkpoints.models=["a","b","c","d"]"#,
            "oracle",
        ],
    );
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn eval_lists_every_source() {
    let dir = trained();
    let o = rmm(dir.path(), &["eval"]);
    assert!(o.status.success());
    let r = report(dir.path(), "report.json");
    assert_eq!(r["accuracy"].as_object().unwrap().len(), 3);
}
