mod common;

use std::path::Path;
use std::process::{Command, Output};

fn oncotwin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oncotwin"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn missing_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = oncotwin(dir.path(), &["--config", "absent.json", "cohort"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.json"));
}

#[test]
fn simulate_patient_three_soc_writes_761_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = oncotwin(dir.path(), &["simulate", "--patient", "3", "--output", "p3.csv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("p3.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t_days,N_cells"));
    assert_eq!(lines.count(), 761);
    let echo = stdout(&o);
    assert_eq!(echo.lines().filter(|l| l.contains(',') && l.chars().next().is_some_and(|c| c.is_ascii_digit())).count(), 153);
    assert!(echo.starts_with("day,N_cells\n0,"));
}

#[test]
fn zero_growth_gives_a_constant_column() {
    let dir = tempfile::tempdir().unwrap();
    let o = oncotwin(
        dir.path(),
        &["simulate", "--theta", "0,1e11,2e9,0.05", "--allow-zero", "--untreated", "--output", "flat.csv"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("flat.csv")).unwrap();
    let values: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(values.len(), 761);
    assert!(values.iter().all(|v| v.parse::<f64>().unwrap() == 2e9));

    let strict = oncotwin(dir.path(), &["simulate", "--theta", "0,1e11,2e9,0.05", "--untreated"]);
    assert_eq!(strict.status.code(), Some(5));
}

#[test]
fn stage_commands_chain_through_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("small.json");
    std::fs::write(&cfg_path, serde_json::to_vec_pretty(&common::small_config(5)).unwrap()).unwrap();
    let run = |args: &[&str]| {
        let mut all = vec!["--config", "small.json", "--out", "runs"];
        all.extend_from_slice(args);
        oncotwin(dir.path(), &all)
    };

    let early = run(&["optimize", "--patient", "p001"]);
    assert_eq!(early.status.code(), Some(4), "{}", String::from_utf8_lossy(&early.stderr));

    assert!(run(&["cohort"]).status.success());
    let unknown = run(&["calibrate", "--patient", "p999"]);
    assert_eq!(unknown.status.code(), Some(4));
    let cal = run(&["calibrate"]);
    assert!(cal.status.success(), "{}", String::from_utf8_lossy(&cal.stderr));
    assert_eq!(stdout(&cal).lines().count(), 4);
    let opt = run(&["optimize"]);
    assert!(opt.status.success(), "{}", String::from_utf8_lossy(&opt.stderr));
    let surv = run(&["survival", "--arm", "OUU:60", "--arm", "SOC"]);
    assert!(surv.status.success(), "{}", String::from_utf8_lossy(&surv.stderr));
    assert!(stdout(&surv).contains("OUU:60: 4 patients, logrank p = "));

    let hash = common::small_config(5);
    let root = dir.path().join("runs").join(oncotwin::config::RunConfig::hash(&hash));
    assert!(root.join("curves/OUU-60.csv").exists());
    assert!(root.join("logrank/OUU-60.json").exists());
    assert!(!root.join("curves/OUU-80.csv").exists());
    let front_csv = std::fs::read_to_string(root.join("fronts/p001.csv")).unwrap();
    assert!(front_csv.starts_with("patient_id,d_max_gy,u1,u2,u3,u4,u5,u6,total_dose_gy"));
    assert!(front_csv.lines().any(|l| l.starts_with("p001,SOC,")));

    let bad = run(&["survival", "--arm", "OUU:65"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn evaluate_prints_json_and_rejects_out_of_bounds_doses() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.json"), serde_json::to_vec(&common::small_config(6)).unwrap()).unwrap();
    let base = ["--config", "small.json", "--out", "runs"];
    let go = |args: &[&str]| oncotwin(dir.path(), &[&base[..], args].concat());
    assert!(go(&["cohort"]).status.success());
    assert!(go(&["calibrate", "--patient", "p003"]).status.success());

    let o = go(&["evaluate", "--patient", "p003", "--u", "2,2,2,2,2", "--n-mc", "400", "--mc-seed", "9"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["total_dose"], 60.0);
    assert_eq!(v["n_mc"], 400);
    let hist = &v["ttp_samples_histogram"];
    assert_eq!(hist["counts"].as_array().unwrap().len(), 132);

    let bad = go(&["evaluate", "--patient", "p003", "--u", "2,2,11,2,2"]);
    assert_eq!(bad.status.code(), Some(2));
}
