use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn weightlora(args: &[&str], out_env: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weightlora"))
        .args(args)
        .env("WEIGHTLORA_OUT", out_env)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn json(o: &Output) -> Value {
    serde_json::from_str(stdout(o).trim()).unwrap_or_else(|e| panic!("{e}: {}", stdout(o)))
}

fn single_error_line(o: &Output, kind: &str) -> String {
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("error: {kind}: ")), "{err}");
    lines[0].to_string()
}

#[test]
fn count_reproduces_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = weightlora(&["count", "--rank", "8"], dir.path());
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "442368 (0.24%)");
    let o = weightlora(&["count", "--rank", "8", "--k", "1", "--json"], dir.path());
    let v = json(&o);
    assert_eq!(v["count"], 12288);
    assert_eq!(v["percent_display"], "0.007");
    // 0.00668% to two significant figures is 0.0067
    assert_eq!(v["display_rounded"], true);
    let o = weightlora(&["count", "--rank", "8", "--slots", "0,1,2,3,4,5,6,7,8,9", "--json"], dir.path());
    let v = json(&o);
    assert_eq!(v["count"], 122880);
    assert_eq!(v["percent_display"], "0.07");
    assert_eq!(v["display_rounded"], true);
    let o = weightlora(&["count", "--rank", "8", "--k", "5", "--json"], dir.path());
    assert_eq!(json(&o)["percent_display"], "0.03");
}

#[test]
fn invalid_config_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = weightlora(&["train", "--k", "0"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(single_error_line(&o, "config"), "error: config: k: k must be ≥ 1");

    let o = weightlora(&["train", "--method", "dora"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(single_error_line(&o, "config").starts_with("error: config: method: "));

    let o = weightlora(&["train", "--no-such-flag"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    single_error_line(&o, "config");

    let o = weightlora(&["count", "--catalog", "gpt-9"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(single_error_line(&o, "config").starts_with("error: config: catalog: "));
}

#[test]
fn unknown_config_keys_are_denied() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"rank": 2, "schedule": {"k": 2, "warmup": 10}}"#).unwrap();
    let o = weightlora(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(single_error_line(&o, "config").starts_with("error: config: warmup: "));

    let o = weightlora(&["train", "--config", "/no/such/file.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(single_error_line(&o, "config").starts_with("error: config: config: "));
}

#[test]
fn degenerate_run_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = weightlora(&["train", "--lr-omega", "1e300"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(single_error_line(&o, "degenerate").contains("diverged"));
}

#[test]
fn train_writes_outputs_under_the_run_id() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"seed": 4, "schedule": {"k": 2, "total_steps": 300}}"#).unwrap();
    let args = ["train", "--config", cfg.to_str().unwrap(), "--total-steps", "400", "--json"];
    let o = weightlora(&args, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let v = json(&o);
    let run_id = v["run_id"].as_str().unwrap();
    assert_eq!(run_id.len(), 16);
    // flags override the file; the whole config is echoed
    assert_eq!(v["config"]["schedule"]["total_steps"], 400);
    assert_eq!(v["config"]["seed"], 4);
    assert_eq!(v["config"]["rank"], 2);

    let run_dir = dir.path().join(run_id);
    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"], v["config"]);
    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,loss,lr,omega_l0,trainable_params,batch_size,adapters_with_grad,omega_support,val_loss"
    );
    assert_eq!(lines.count(), 400);

    // same config and seed, same directory
    let again = json(&weightlora(&args, dir.path()));
    assert_eq!(again["run_id"], v["run_id"]);
    let other = json(&weightlora(&["train", "--seed", "5", "--json"], dir.path()));
    assert_ne!(other["run_id"], v["run_id"]);
}

#[test]
fn out_flag_beats_the_environment() {
    let env_dir = tempfile::tempdir().unwrap();
    let flag_dir = tempfile::tempdir().unwrap();
    let o = weightlora(
        &["train", "--total-steps", "250", "--out", flag_dir.path().to_str().unwrap(), "--json"],
        env_dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let run_id = json(&o)["run_id"].as_str().unwrap().to_string();
    assert!(flag_dir.path().join(&run_id).join("summary.json").exists());
    assert!(!env_dir.path().join(&run_id).exists());
}

#[test]
fn probe_writes_a_profile() {
    let dir = tempfile::tempdir().unwrap();
    let o = weightlora(&["probe", "--seed", "1", "--epochs", "2", "--json"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let v = json(&o);
    assert_eq!(v["scores"].as_array().unwrap().len(), 6);
    assert_eq!(v["top_k"].as_array().unwrap().len(), 2);
    let profile = std::fs::read_to_string(dir.path().join(v["run_id"].as_str().unwrap()).join("profile.csv")).unwrap();
    assert!(profile.starts_with("slot_id,layer,projection_type,score\n"));
    assert_eq!(profile.lines().count(), 7);
}

#[test]
fn ablate_reports_a_sign_test() {
    let dir = tempfile::tempdir().unwrap();
    let o = weightlora(&["ablate", "--seeds", "0,1,2,3", "--json"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let v = json(&o);
    let t = &v["sign_test"];
    let n = t["wins"].as_u64().unwrap() + t["losses"].as_u64().unwrap() + t["ties"].as_u64().unwrap();
    assert_eq!(n, 4);
    let csv = std::fs::read_to_string(dir.path().join(v["run_id"].as_str().unwrap()).join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn expand_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = weightlora(&["expand-check", "--trials", "50", "--json"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let v = json(&o);
    assert_eq!(v["pass"], true);
    assert!(v["schemes"]["qr"]["max_residual"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn wlora_plus_reports_the_expansion() {
    let dir = tempfile::tempdir().unwrap();
    let o = weightlora(&["train", "--expansion", "qr", "--json"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let v = json(&o);
    assert_eq!(v["config"]["method"], "wlora+");
    assert_eq!(v["report"]["params_after_t"], v["report"]["params_before_t"]);
    assert!(v["report"]["expansion_residual"].as_f64().unwrap() <= 1e-10);

    let o = weightlora(&["train", "--method", "wlora+"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(single_error_line(&o, "config").starts_with("error: config: expansion: "));
}
