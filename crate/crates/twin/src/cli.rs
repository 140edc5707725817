//! Command-line front end. Every stage reads and writes the run directory
//! `<out>/<config hash>/`.

use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use oncotwin_core::model::{case_study, simulate_checked, ParameterCheck, PatientParameters, TreatmentRegimen, N_WEEKS};

use crate::api::{self, ApiState};
use crate::artifacts::{write_bytes, RunDir};
use crate::config::{RunConfig, Scale};
use crate::error::{AppError, AppResult};
use crate::pipeline::{self, EvaluateError, EvaluateRequest};

#[derive(Debug, Parser)]
#[command(name = "oncotwin", version, about = "Predictive digital twins for radiotherapy dose planning")]
pub struct Cli {
    /// Run configuration JSON. Without it the `--scale` preset is used.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Scale::Desk)]
    pub scale: Scale,
    /// Root of the run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Forward-simulate one parameter set and write the trajectory CSV.
    Simulate(SimulateArgs),
    /// Generate the virtual cohort.
    Cohort,
    /// Calibrate posterior ensembles from cohort observations.
    Calibrate(PatientArgs),
    /// Compute Pareto fronts from stored ensembles.
    Optimize(PatientArgs),
    /// Kaplan-Meier curves, variance bands and logrank tests per arm.
    Survival(SurvivalArgs),
    /// Run every stage and write the cohort summary.
    Reproduce,
    /// What-if evaluation of a regimen for one calibrated patient.
    Evaluate(EvaluateArgs),
    /// Serve the HTTP API over the run directory.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Case-study patient 1, 2 or 3.
    #[arg(long, conflicts_with = "theta")]
    pub patient: Option<usize>,
    /// `rho,K,N_initial,alpha_RT`.
    #[arg(long, value_delimiter = ',')]
    pub theta: Option<Vec<f64>>,
    /// Weekly doses `u2..u6` in Gy/day; standard of care when omitted.
    #[arg(long, value_delimiter = ',', conflicts_with = "untreated")]
    pub tail: Option<Vec<f64>>,
    #[arg(long)]
    pub untreated: bool,
    /// Admit zero-valued parameters, e.g. `rho = 0`.
    #[arg(long)]
    pub allow_zero: bool,
    /// CSV destination; defaults to `<out>/trajectory.csv`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PatientArgs {
    /// Patient ids such as `p001`; all patients when omitted.
    #[arg(long = "patient")]
    pub patients: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SurvivalArgs {
    /// Arms such as `OUU:60` or `SOC`; all arms when omitted.
    #[arg(long = "arm")]
    pub arms: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub patient: String,
    /// Weekly doses `u2..u6` in Gy/day.
    #[arg(long, value_delimiter = ',', required = true)]
    pub u: Vec<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub n_mc: Option<usize>,
    /// Monte Carlo seed; the master seed when omitted.
    #[arg(long)]
    pub mc_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
}

pub fn resolve_config(cli: &Cli) -> AppResult<RunConfig> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::preset(cli.scale, cli.seed.unwrap_or(0)),
    };
    let cfg = match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> AppResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| AppError::InvalidConfig(e.to_string()))?;
    }
    let cfg = resolve_config(&cli)?;
    if let Command::Simulate(args) = &cli.command {
        return simulate(&cfg, &cli.out, args);
    }
    let run = RunDir::open(&cli.out, cfg)?;
    let mut stdout = std::io::stdout().lock();
    let mut say = |line: String| {
        let _ = writeln!(stdout, "{line}");
    };
    match cli.command {
        Command::Simulate(_) => unreachable!(),
        Command::Cohort => {
            let cohort = pipeline::build_cohort(&run)?;
            say(format!("{} patients -> {}", cohort.patients.len(), run.cohort_path().display()));
        }
        Command::Calibrate(args) => {
            let cohort = pipeline::load_cohort(&run)?;
            for (id, ens) in pipeline::run_calibration(&run, &cohort, &args.patients)? {
                let p = cohort.patient(&id).expect("calibrated patient is in the cohort");
                pipeline::store_record(&run, &id, &p.observations, &ens)?;
                let flag = if ens.is_converged() { "" } else { " (not converged)" };
                say(format!("{id}: {} draws -> {}{flag}", ens.len(), run.ensemble_path(&id).display()));
            }
        }
        Command::Optimize(args) => {
            let cohort = pipeline::load_cohort(&run)?;
            let ids = if args.patients.is_empty() {
                cohort.patients.iter().map(|p| p.id.clone()).collect()
            } else {
                args.patients
            };
            let ensembles = ids
                .iter()
                .map(|id| {
                    pipeline::patient_index(&cohort, id)?;
                    Ok((id.clone(), pipeline::load_ensemble(&run, id)?))
                })
                .collect::<AppResult<Vec<_>>>()?;
            for pf in pipeline::run_optimization(&run, &cohort, &ensembles)? {
                let p = cohort.patient(&pf.patient_id).expect("optimized patient is in the cohort");
                let ens = &ensembles.iter().find(|(id, _)| *id == pf.patient_id).expect("ensemble loaded").1;
                pipeline::store_record(&run, &pf.patient_id, &p.observations, ens)?;
                say(format!(
                    "{}: {} points, SOC TTP {:.1} d -> {}",
                    pf.patient_id,
                    pf.front.points.len(),
                    pf.front.soc_reference.ttp_superquantile,
                    run.front_path(&pf.patient_id).display()
                ));
            }
        }
        Command::Survival(args) => {
            let cohort = pipeline::load_cohort(&run)?;
            let mut ensembles = Vec::new();
            let mut fronts = Vec::new();
            for p in &cohort.patients {
                ensembles.push((p.id.clone(), pipeline::load_ensemble(&run, &p.id)?));
                fronts.push(pipeline::load_front(&run, &p.id)?);
            }
            let all_arms = pipeline::arms(run.config());
            if let Some(bad) = args.arms.iter().find(|a| !all_arms.contains(a)) {
                return Err(AppError::InvalidConfig(format!("unknown arm {bad}; expected one of {all_arms:?}")));
            }
            let indices: Vec<usize> = (0..cohort.patients.len()).collect();
            let mut arms = pipeline::survival_analysis(run.config(), &fronts, &ensembles, &indices)?;
            if !args.arms.is_empty() {
                arms.retain(|a| args.arms.contains(&a.arm));
            }
            pipeline::store_survival(&run, &arms)?;
            for a in &arms {
                let p = a.logrank.map(|l| format!(", logrank p = {}", l.rounded().p_value)).unwrap_or_default();
                say(format!("{}: {} patients{p} -> {}", a.arm, a.input.len(), run.curve_path(&a.arm).display()));
            }
        }
        Command::Reproduce => {
            let r = pipeline::reproduce(&run)?;
            say(serde_json::to_string_pretty(&r.summary).expect("summary serializes"));
            say(format!("-> {}", run.summary_path().display()));
        }
        Command::Evaluate(args) => {
            let cohort = pipeline::load_cohort(&run)?;
            pipeline::patient_index(&cohort, &args.patient)?;
            let ens = pipeline::load_ensemble(&run, &args.patient)?;
            let req = EvaluateRequest {
                u: args.u,
                alpha: args.alpha,
                n_mc: args.n_mc,
                seed: args.mc_seed,
            };
            let out = pipeline::evaluate(run.config(), &ens, &req).map_err(|e| match e {
                EvaluateError::Invalid(d) => AppError::InvalidConfig(d),
                EvaluateError::Model(m) => AppError::Model(m),
            })?;
            say(serde_json::to_string_pretty(&out).expect("evaluation serializes"));
        }
        Command::Serve(args) => {
            let state = Arc::new(ApiState::load(&run)?);
            let rt = tokio::runtime::Runtime::new().map_err(|source| AppError::Io {
                path: "tokio runtime".into(),
                source,
            })?;
            rt.block_on(api::serve(state, args.bind)).map_err(|source| AppError::Io {
                path: args.bind.to_string(),
                source,
            })?;
        }
    }
    Ok(())
}

fn simulate(cfg: &RunConfig, out: &std::path::Path, args: &SimulateArgs) -> AppResult<()> {
    let theta = match (&args.theta, args.patient) {
        (Some(v), _) => PatientParameters::from_array(
            v.as_slice()
                .try_into()
                .map_err(|_| AppError::InvalidConfig(format!("--theta takes 4 values, got {}", v.len())))?,
        ),
        (None, Some(n)) => case_study::by_number(n)
            .ok_or_else(|| AppError::InvalidConfig(format!("case-study patient must be 1, 2 or 3, got {n}")))?,
        (None, None) => return Err(AppError::InvalidConfig("pass --patient N or --theta".into())),
    };
    let regimen = if args.untreated {
        TreatmentRegimen::untreated()
    } else if let Some(t) = &args.tail {
        let tail: [f64; N_WEEKS - 1] = t
            .as_slice()
            .try_into()
            .map_err(|_| AppError::InvalidConfig(format!("--tail takes {} values, got {}", N_WEEKS - 1, t.len())))?;
        TreatmentRegimen::from_tail(tail)?
    } else {
        TreatmentRegimen::standard_of_care()
    };
    let check = if args.allow_zero {
        ParameterCheck::AllowZero
    } else {
        ParameterCheck::Strict
    };
    let traj = simulate_checked(&theta, &cfg.fixed, &regimen, &cfg.grid, check)?;
    let path = args.output.clone().unwrap_or_else(|| out.join("trajectory.csv"));
    let mut csv = Vec::new();
    traj.write_csv(&mut csv).expect("writing to memory");
    write_bytes(&path, &csv)?;
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "day,N_cells");
    for (d, n) in traj.day_boundaries() {
        let _ = writeln!(stdout, "{d},{n:e}");
    }
    let _ = writeln!(stdout, "{} rows -> {}", traj.values.len(), path.display());
    Ok(())
}
