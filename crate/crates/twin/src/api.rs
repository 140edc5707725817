//! JSON-over-HTTP service on top of a completed run directory.
//!
//! | method | path                         |                                    |
//! |--------|------------------------------|------------------------------------|
//! | GET    | `/patients`                  | ids and artifact availability      |
//! | GET    | `/patients/{id}/posterior`   | marginal histograms, diagnostics   |
//! | GET    | `/patients/{id}/pareto`      | stored front and SOC reference     |
//! | POST   | `/patients/{id}/evaluate`    | what-if evaluation of `u2..u6`     |
//! | POST   | `/patients/{id}/optimize`    | one dose cap; async when restarts > 1 |
//! | GET    | `/jobs/{id}`                 | optimize job status                |
//!
//! Endpoints that read a posterior answer 409 when its diagnostics flag
//! non-convergence, unless the request carries `?force`.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use oncotwin_core::calibration::{Diagnostics, PosteriorEnsemble};
use oncotwin_core::model::PatientParameters;
use oncotwin_core::optimizer::{optimize_regimen, ParetoPoint};
use oncotwin_core::TwinError;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::artifacts::RunDir;
use crate::config::RunConfig;
use crate::error::{AppError, AppResult};
use crate::pipeline::{self, EvaluateError, EvaluateRequest, PatientFront};

const HISTOGRAM_BINS: usize = 40;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    error: &'static str,
    detail: String,
    extra: Option<Value>,
}

impl ApiError {
    fn new(status: StatusCode, error: &'static str, detail: impl Into<String>) -> Self {
        Self {
            status,
            error,
            detail: detail.into(),
            extra: None,
        }
    }

    fn unknown_patient(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_patient", format!("no patient {id}"))
    }

    fn invalid(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", detail)
    }

    fn internal(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", detail)
    }
}

impl From<EvaluateError> for ApiError {
    fn from(e: EvaluateError) -> Self {
        match e {
            EvaluateError::Invalid(d) => Self::invalid(d),
            EvaluateError::Model(e) => model_error(e),
        }
    }
}

fn model_error(e: TwinError) -> ApiError {
    match e {
        TwinError::InvalidParameter { .. }
        | TwinError::InvalidRegimen(_)
        | TwinError::InvalidConfig(_)
        | TwinError::InsufficientSamples { .. }
        | TwinError::OutOfRange(_) => ApiError::invalid(e.to_string()),
        other => ApiError::internal(other.to_string()),
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.error, "detail": self.detail });
        if let (Some(Value::Object(extra)), Value::Object(map)) = (self.extra, &mut body) {
            map.extend(extra);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum JobStatus {
    Running,
    Done { result: ParetoPoint },
    Failed { error: String },
}

/// Async optimize jobs. The only mutable state in the service; every write
/// goes through the one lock.
#[derive(Default)]
struct Jobs {
    next: u64,
    map: HashMap<u64, JobStatus>,
}

struct PatientEntry {
    index: usize,
    ensemble: Option<Arc<PosteriorEnsemble>>,
    front: Option<PatientFront>,
}

pub struct ApiState {
    config: RunConfig,
    ids: Vec<String>,
    patients: HashMap<String, PatientEntry>,
    jobs: Mutex<Jobs>,
}

impl ApiState {
    /// Load the cohort and whatever ensembles and fronts exist. The oracle
    /// section of the cohort file is dropped here.
    pub fn load(run: &RunDir) -> AppResult<Self> {
        let cohort = pipeline::load_cohort(run)?;
        let mut ids = Vec::new();
        let mut patients = HashMap::new();
        for (index, p) in cohort.patients.iter().enumerate() {
            let ensemble = optional(pipeline::load_ensemble(run, &p.id))?.map(Arc::new);
            let front = optional(pipeline::load_front(run, &p.id))?;
            ids.push(p.id.clone());
            patients.insert(p.id.clone(), PatientEntry { index, ensemble, front });
        }
        Ok(Self {
            config: run.config().clone(),
            ids,
            patients,
            jobs: Mutex::default(),
        })
    }

    fn patient(&self, id: &str) -> ApiResult<&PatientEntry> {
        self.patients.get(id).ok_or_else(|| ApiError::unknown_patient(id))
    }

    fn ensemble(&self, id: &str, force: bool) -> ApiResult<(usize, Arc<PosteriorEnsemble>)> {
        let p = self.patient(id)?;
        let ens = p
            .ensemble
            .clone()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_calibrated", format!("{id} has no posterior")))?;
        if !force && !ens.is_converged() {
            let mut e = ApiError::new(
                StatusCode::CONFLICT,
                "not_converged",
                format!("posterior diagnostics for {id} flag non-convergence; retry with ?force"),
            );
            e.extra = Some(json!({ "converged": false, "diagnostics": ens.diagnostics }));
            return Err(e);
        }
        Ok((p.index, ens))
    }
}

fn optional<T>(r: AppResult<T>) -> AppResult<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(AppError::MissingArtifact { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Default, Deserialize)]
pub struct ForceQuery {
    force: Option<String>,
}

impl ForceQuery {
    /// `?force`, `?force=true` and `?force=1` all count.
    fn is_set(&self) -> bool {
        self.force.as_deref().is_some_and(|v| !matches!(v, "false" | "0"))
    }
}

pub fn router(state: Arc<ApiState>) -> Router {
    Router::new()
        .route("/patients", get(list_patients))
        .route("/patients/{id}/posterior", get(posterior))
        .route("/patients/{id}/pareto", get(pareto))
        .route("/patients/{id}/evaluate", post(evaluate))
        .route("/patients/{id}/optimize", post(optimize))
        .route("/jobs/{id}", get(job))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint") })
        .with_state(state)
}

pub async fn serve(state: Arc<ApiState>, bind: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

#[derive(Debug, Serialize)]
struct PatientListing {
    id: String,
    calibrated: bool,
    converged: Option<bool>,
    optimized: bool,
}

async fn list_patients(State(s): State<Arc<ApiState>>) -> Json<Vec<PatientListing>> {
    let list = s
        .ids
        .iter()
        .map(|id| {
            let p = &s.patients[id];
            PatientListing {
                id: id.clone(),
                calibrated: p.ensemble.is_some(),
                converged: p.ensemble.as_ref().map(|e| e.is_converged()),
                optimized: p.front.is_some(),
            }
        })
        .collect();
    Json(list)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginal {
    pub mean: f64,
    pub std_dev: f64,
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub patient_id: String,
    pub n_samples: usize,
    pub converged: bool,
    pub diagnostics: Option<Diagnostics>,
    pub marginals: BTreeMap<String, Marginal>,
}

pub fn marginal(values: &[f64], bins: usize) -> Marginal {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std_dev = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
    let mut counts = vec![0; bins];
    for v in values {
        counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
    }
    Marginal {
        mean,
        std_dev,
        edges,
        counts,
    }
}

pub fn posterior_summary(id: &str, ens: &PosteriorEnsemble) -> PosteriorSummary {
    let marginals = PatientParameters::NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let v: Vec<f64> = ens.samples.iter().map(|t| t.to_array()[i]).collect();
            (name.to_string(), marginal(&v, HISTOGRAM_BINS))
        })
        .collect();
    PosteriorSummary {
        patient_id: id.to_string(),
        n_samples: ens.samples.len(),
        converged: ens.is_converged(),
        diagnostics: ens.diagnostics.clone(),
        marginals,
    }
}

async fn posterior(
    State(s): State<Arc<ApiState>>,
    Path(id): Path<String>,
    Query(q): Query<ForceQuery>,
) -> ApiResult<Json<PosteriorSummary>> {
    let (_, ens) = s.ensemble(&id, q.is_set())?;
    Ok(Json(posterior_summary(&id, &ens)))
}

async fn pareto(State(s): State<Arc<ApiState>>, Path(id): Path<String>) -> ApiResult<Json<PatientFront>> {
    s.patient(&id)?
        .front
        .clone()
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_optimized", format!("{id} has no pareto front")))
}

async fn evaluate(
    State(s): State<Arc<ApiState>>,
    Path(id): Path<String>,
    Query(q): Query<ForceQuery>,
    body: Result<Json<EvaluateRequest>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Json<pipeline::Evaluation>> {
    let (_, ens) = s.ensemble(&id, q.is_set())?;
    let Json(req) = body.map_err(|e| ApiError::invalid(e.body_text()))?;
    let state = s.clone();
    let out = tokio::task::spawn_blocking(move || pipeline::evaluate(&state.config, &ens, &req))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(out))
}

#[derive(Debug, Clone, Deserialize)]
pub struct OptimizeRequest {
    pub d_max: f64,
    pub alpha: Option<f64>,
}

async fn optimize(
    State(s): State<Arc<ApiState>>,
    Path(id): Path<String>,
    Query(q): Query<ForceQuery>,
    body: Result<Json<OptimizeRequest>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Response> {
    let (index, ens) = s.ensemble(&id, q.is_set())?;
    let Json(req) = body.map_err(|e| ApiError::invalid(e.body_text()))?;
    let mut cfg = pipeline::optimization_config(&s.config, index);
    if let Some(a) = req.alpha {
        cfg.alpha = a;
    }
    cfg.d_max_grid = vec![req.d_max];
    cfg.validate().map_err(model_error)?;

    let c = s.config.clone();
    let run = move || optimize_regimen(&ens, req.d_max, &cfg, c.fixed, c.grid, c.ttp);
    if s.config.optimization.restarts <= 1 {
        let point = tokio::task::spawn_blocking(run)
            .await
            .map_err(|e| ApiError::internal(e.to_string()))?
            .map_err(model_error)?;
        return Ok(Json(point).into_response());
    }

    let job_id = {
        let mut jobs = s.jobs.lock().expect("job registry poisoned");
        jobs.next += 1;
        let id = jobs.next;
        jobs.map.insert(id, JobStatus::Running);
        id
    };
    let state = s.clone();
    tokio::task::spawn_blocking(move || {
        let status = match run() {
            Ok(result) => JobStatus::Done { result },
            Err(e) => JobStatus::Failed { error: e.to_string() },
        };
        state.jobs.lock().expect("job registry poisoned").map.insert(job_id, status);
    });
    let body = json!({ "job_id": job_id, "status": "running", "poll": format!("/jobs/{job_id}") });
    Ok((StatusCode::ACCEPTED, Json(body)).into_response())
}

async fn job(State(s): State<Arc<ApiState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let unknown = || ApiError::new(StatusCode::NOT_FOUND, "unknown_job", format!("no job {id}"));
    let job_id: u64 = id.parse().map_err(|_| unknown())?;
    let jobs = s.jobs.lock().expect("job registry poisoned");
    let status = jobs.map.get(&job_id).ok_or_else(unknown)?;
    let mut body = serde_json::to_value(status).expect("job status serializes");
    body["job_id"] = json!(job_id);
    Ok(Json(body))
}
