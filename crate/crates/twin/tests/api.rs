mod common;

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use oncotwin::api::{router, ApiState};
use oncotwin::artifacts::RunDir;
use oncotwin::pipeline;
use oncotwin_core::calibration::PosteriorEnsemble;
use oncotwin_core::risk::ThetaSet;
use oncotwin_core::seed;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    run: RunDir,
    state: Arc<ApiState>,
}

fn fixture(seed: u64) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let (run, _) = common::reproduce_small(dir.path(), seed);
    let state = Arc::new(ApiState::load(&run).unwrap());
    Fixture { _dir: dir, run, state }
}

async fn call(state: &Arc<ApiState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, v)
}

fn assert_error_body(v: &Value) {
    assert!(v["error"].is_string(), "{v}");
    assert!(v["detail"].is_string(), "{v}");
}

#[tokio::test]
async fn lists_patients_without_ground_truth() {
    let f = fixture(21);
    let (status, v) = call(&f.state, "GET", "/patients", None).await;
    assert_eq!(status, StatusCode::OK);
    let list = v.as_array().unwrap();
    assert_eq!(list.len(), 4);
    assert_eq!(list[0]["id"], "p001");
    assert!(list.iter().all(|p| p["calibrated"] == true && p["optimized"] == true));

    let mut everything = v.to_string();
    for uri in ["/patients/p001/posterior?force", "/patients/p001/pareto"] {
        everything += &call(&f.state, "GET", uri, None).await.1.to_string();
    }
    assert!(!everything.contains("theta_true"));
    assert!(!everything.contains("oracle"));
}

#[tokio::test]
async fn unknown_resources_are_404() {
    let f = fixture(22);
    for (method, uri, body) in [
        ("GET", "/patients/p999/posterior", None),
        ("GET", "/patients/p999/pareto", None),
        ("POST", "/patients/p999/evaluate", Some(json!({"u": [2, 2, 2, 2, 2]}))),
        ("POST", "/patients/p999/optimize", Some(json!({"d_max": 60}))),
        ("GET", "/jobs/77", None),
        ("GET", "/nowhere", None),
    ] {
        let (status, v) = call(&f.state, method, uri, body).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        assert_error_body(&v);
    }
}

#[tokio::test]
async fn invalid_regimens_are_422() {
    let f = fixture(23);
    for body in [
        json!({"u": [2, 2, 10.5, 2, 2]}),
        json!({"u": [2, 2, 2, 2, -0.1]}),
        json!({"u": [2, 2, 2, 2]}),
        json!({"u": [2, 2, 2, 2, 2, 2]}),
        json!({"u": [2, 2, 2, 2, 2], "alpha": 1.0}),
        json!({"u": [2, 2, 2, 2, 2], "n_mc": 100}),
        json!({"regimen": "soc"}),
    ] {
        let (status, v) = call(&f.state, "POST", "/patients/p001/evaluate?force", Some(body.clone())).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
        assert_error_body(&v);
    }
    let (status, _) = call(&f.state, "POST", "/patients/p001/optimize?force", Some(json!({"d_max": 5}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn flagged_posterior_is_409_unless_forced() {
    let f = fixture(24);
    let mut ens: PosteriorEnsemble = pipeline::load_ensemble(&f.run, "p002").unwrap();
    ens.diagnostics.as_mut().unwrap().converged = false;
    f.run.store(&f.run.ensemble_path("p002"), &ens).unwrap();
    let state = Arc::new(ApiState::load(&f.run).unwrap());

    let (status, v) = call(&state, "GET", "/patients/p002/posterior", None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_error_body(&v);
    assert_eq!(v["converged"], false);
    assert!(v["diagnostics"]["r_hat"].is_object());
    let (status, _) = call(&state, "POST", "/patients/p002/evaluate", Some(json!({"u": [2, 2, 2, 2, 2]}))).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (status, v) = call(&state, "GET", "/patients/p002/posterior?force", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["converged"], false);
    let (status, _) = call(&state, "GET", "/patients/p002/posterior?force=false", None).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn posterior_summary_has_four_marginals() {
    let f = fixture(25);
    let (status, v) = call(&f.state, "GET", "/patients/p003/posterior?force", None).await;
    assert_eq!(status, StatusCode::OK);
    let n = v["n_samples"].as_u64().unwrap();
    assert_eq!(n, 4 * 400);
    for name in ["rho", "K", "N_initial", "alpha_RT"] {
        let m = &v["marginals"][name];
        let counts: u64 = m["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum();
        assert_eq!(counts, n, "{name}");
        assert_eq!(m["edges"].as_array().unwrap().len(), m["counts"].as_array().unwrap().len() + 1);
    }
}

fn lower_tail_mean(mut ttp: Vec<f64>, alpha: f64) -> f64 {
    ttp.sort_by(f64::total_cmp);
    let k = ((1.0 - alpha) * ttp.len() as f64).round() as usize;
    ttp[..k].iter().sum::<f64>() / k as f64
}

#[tokio::test]
async fn superquantile_tightens_with_tail_level() {
    let f = fixture(26);
    let cfg = f.run.config();
    let ens = pipeline::load_ensemble(&f.run, "p001").unwrap();
    let set = ThetaSet::draw(&ens, 2000, 5, cfg.fixed, cfg.grid, cfg.ttp).unwrap();
    let ttp = set.ttp(&oncotwin_core::model::TreatmentRegimen::standard_of_care()).unwrap();

    let mut sq = Vec::new();
    for alpha in [0.5, 0.95] {
        let body = json!({"u": [2, 2, 2, 2, 2], "alpha": alpha, "n_mc": 2000, "seed": 5});
        let (status, v) = call(&f.state, "POST", "/patients/p001/evaluate?force", Some(body)).await;
        assert_eq!(status, StatusCode::OK);
        let got = v["ttp_superquantile"].as_f64().unwrap();
        let oracle = lower_tail_mean(ttp.clone(), alpha);
        assert!((got - oracle).abs() <= 1e-9 * oracle.abs(), "alpha {alpha}: {got} vs {oracle}");
        sq.push(got);
    }
    assert!(sq[1] <= sq[0], "{sq:?}");
}

#[tokio::test]
async fn evaluate_matches_the_stored_soc_reference() {
    let f = fixture(27);
    let cfg = f.run.config().clone();
    let front = pipeline::load_front(&f.run, "p004").unwrap().front;
    let report_seed = seed::derive(pipeline::optimization_config(&cfg, 3).seed, &[seed::OPTIMIZER_REPORT]);
    let body = json!({"u": [2, 2, 2, 2, 2], "n_mc": cfg.optimization.n_mc, "seed": report_seed});
    let (status, v) = call(&f.state, "POST", "/patients/p004/evaluate?force", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    let soc = &front.soc_reference;
    let got = v["ttp_superquantile"].as_f64().unwrap();
    assert!((got - soc.ttp_superquantile).abs() <= 3.0 * soc.std_error + 1e-9);
    assert_eq!(got, soc.ttp_superquantile);
    assert_eq!(v["total_dose"], 60.0);

    let hist = &v["ttp_samples_histogram"];
    let binned: u64 = hist["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum();
    assert_eq!(binned + hist["end_of_simulation"].as_u64().unwrap(), cfg.optimization.n_mc as u64);
}

#[tokio::test]
async fn evaluate_agrees_exactly_with_the_cli() {
    let f = fixture(28);
    let body = json!({"u": [1, 3, 0, 4.5, 2], "alpha": 0.9, "n_mc": 600, "seed": 31});
    let (status, api) = call(&f.state, "POST", "/patients/p002/evaluate?force", Some(body)).await;
    assert_eq!(status, StatusCode::OK);

    let cfg_path = f.run.root().join("..").join("cfg.json");
    std::fs::write(&cfg_path, serde_json::to_vec(f.run.config()).unwrap()).unwrap();
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_oncotwin"))
        .args(["--config", cfg_path.to_str().unwrap(), "--out"])
        .arg(f.run.root().parent().unwrap())
        .args(["evaluate", "--patient", "p002", "--u", "1,3,0,4.5,2", "--alpha", "0.9", "--n-mc", "600", "--mc-seed", "31"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cli: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(api, cli);
}

#[tokio::test]
async fn optimize_runs_as_a_polled_job() {
    let f = fixture(29);
    let (status, v) = call(&f.state, "POST", "/patients/p001/optimize?force", Some(json!({"d_max": 50, "alpha": 0.9}))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let poll = v["poll"].as_str().unwrap().to_string();

    let mut last = Value::Null;
    for _ in 0..600 {
        let (status, v) = call(&f.state, "GET", &poll, None).await;
        assert_eq!(status, StatusCode::OK);
        last = v;
        if last["status"] != "running" {
            break;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    assert_eq!(last["status"], "done", "{last}");
    let point = &last["result"];
    assert_eq!(point["d_max"], 50.0);
    assert!(point["total_dose"].as_f64().unwrap() <= 50.0 + 1e-9);
    assert!(point["ttp_superquantile"].as_f64().unwrap() > 0.0);
}

#[tokio::test]
async fn single_restart_optimize_answers_directly() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::small_config(30);
    cfg.optimization.restarts = 1;
    let run = RunDir::open(dir.path(), cfg).unwrap();
    let cohort = pipeline::build_cohort(&run).unwrap();
    pipeline::run_calibration(&run, &cohort, &["p001".to_string()]).unwrap();
    let state = Arc::new(ApiState::load(&run).unwrap());

    let (status, v) = call(&state, "POST", "/patients/p001/optimize?force", Some(json!({"d_max": 40}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["restarts"], 1);
    assert!(v["total_dose"].as_f64().unwrap() <= 40.0 + 1e-9);

    let (status, v) = call(&state, "GET", "/patients/p001/pareto", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["error"], "not_optimized");
    let (status, _) = call(&state, "GET", "/patients/p002/posterior", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn concurrent_evaluations_are_isolated() {
    let f = fixture(31);
    let body = |s: u64| json!({"u": [2, 2, 2, 2, 2], "n_mc": 400, "seed": s});
    let (a, b, c) = tokio::join!(
        call(&f.state, "POST", "/patients/p001/evaluate?force", Some(body(1))),
        call(&f.state, "POST", "/patients/p001/evaluate?force", Some(body(2))),
        call(&f.state, "POST", "/patients/p001/evaluate?force", Some(body(1))),
    );
    assert_eq!(a.0, StatusCode::OK);
    assert_eq!(a.1, c.1);
    assert_eq!(b.1["seed"], 2);
}
