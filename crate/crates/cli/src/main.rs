//! `mfg`: solve mean-field equilibria, recover rewards by maximum causal
//! entropy IRL, simulate expert data and run the two-step pipeline.

mod manifest;
mod trajectories;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use mfg_core::estimation::{self, EstimatorConfig};
use mfg_core::gnep::{self, GnepConfig, JacobianMode};
use mfg_core::irl::{self, IrlConfig, IrlProblem};
use mfg_core::pipeline::{
    self, to_stable_json, EquilibriumDocument, IrlDocument, PipelineConfig, PipelineError,
};
use mfg_core::{builtin_malware, load_model, Error, ModelSpec, SimplexVector};

use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(
    name = "mfg",
    version,
    about = "Mean-field equilibria and maximum causal entropy IRL"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute a mean-field equilibrium with the potential-reduction GNEP solver.
    SolveMfe(SolveMfeArgs),
    /// Recover a policy by maximum causal entropy IRL.
    SolveIrl(SolveIrlArgs),
    /// Simulate trajectories under an equilibrium and dump them as CSV.
    Simulate(SimulateArgs),
    /// Estimate the mean field and feature expectation from a trajectory CSV.
    Estimate(EstimateArgs),
    /// Check equilibrium (and optionally IRL) residuals.
    Verify(VerifyArgs),
    /// Forward solve, expert statistics, IRL and verification in one run.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Model JSON file, or builtin:malware2 / builtin:malware10.
    #[arg(long)]
    model: String,
    /// Override the cost weights (comma separated).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    theta: Option<Vec<f64>>,
    /// Override the discount factor.
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum JacobianArg {
    Analytic,
    Fd,
}

#[derive(Args, Debug, Clone)]
struct GnepArgs {
    /// Centering parameter.
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    /// Backtracking base of the line search.
    #[arg(long, default_value_t = 0.001)]
    kappa: f64,
    /// Stop when the KKT residual norm drops below this.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Iteration cap of the forward solver.
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
    /// Jacobian of the KKT map.
    #[arg(long, value_enum, default_value_t = JacobianArg::Analytic)]
    jacobian: JacobianArg,
    /// Relative singular-value cutoff of the pseudo-inverse fallback.
    #[arg(long, default_value_t = 1e-4)]
    pinv_rcond: f64,
}

impl GnepArgs {
    fn config(&self) -> GnepConfig {
        GnepConfig {
            sigma: self.sigma,
            kappa: self.kappa,
            tol: self.tol,
            max_iter: self.max_iter,
            jacobian: match self.jacobian {
                JacobianArg::Analytic => JacobianMode::Analytic,
                JacobianArg::Fd => JacobianMode::FiniteDifference,
            },
            pinv_rcond: self.pinv_rcond,
            ..GnepConfig::default()
        }
    }
}

#[derive(Args, Debug, Clone)]
struct IrlArgs {
    /// Gradient step γ (default 1/L).
    #[arg(long)]
    step: Option<f64>,
    /// Stop when the sup-norm of the dual gradient drops below this.
    #[arg(long, default_value_t = 1e-2)]
    grad_tol: f64,
    /// Iteration cap of gradient descent.
    #[arg(long, default_value_t = 5_000_000)]
    irl_max_iter: usize,
}

impl IrlArgs {
    fn config(&self) -> IrlConfig {
        IrlConfig {
            step: self.step,
            grad_tol: self.grad_tol,
            max_iter: self.irl_max_iter,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct SimArgs {
    /// Number of trajectories d.
    #[arg(long, default_value_t = 10_000)]
    trajectories: usize,
    /// Horizon T (default: smallest T with tail bound below 1e-4).
    #[arg(long)]
    horizon: Option<usize>,
    /// RNG seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SolveMfeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    gnep: GnepArgs,
    /// Equilibrium output file.
    #[arg(long, default_value = "equilibrium.json")]
    out: PathBuf,
    /// Manifest path (default: manifest.json next to --out).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SolveIrlArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    irl: IrlArgs,
    /// Equilibrium JSON; the expert statistics are computed exactly from it.
    #[arg(long, conflicts_with = "mean_field")]
    equilibrium: Option<PathBuf>,
    /// Expert mean field (comma separated), used with --feature-expectation.
    #[arg(long, value_delimiter = ',', requires = "feature_expectation")]
    mean_field: Option<Vec<f64>>,
    /// Expert discounted feature expectation (comma separated).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    feature_expectation: Option<Vec<f64>>,
    /// IRL output file.
    #[arg(long, default_value = "irl.json")]
    out: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    sim: SimArgs,
    /// Equilibrium JSON providing the policy and the mean field.
    #[arg(long)]
    equilibrium: PathBuf,
    /// Trajectory CSV output.
    #[arg(long, default_value = "trajectories.csv")]
    out: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Trajectory CSV (trajectory_id, t, state, action).
    #[arg(long)]
    trajectories: PathBuf,
    /// Evaluate features at this mean field instead of the estimated one.
    #[arg(long, value_delimiter = ',')]
    mean_field: Option<Vec<f64>>,
    /// Estimate output file.
    #[arg(long, default_value = "estimate.json")]
    out: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Equilibrium JSON to verify.
    #[arg(long)]
    equilibrium: PathBuf,
    /// IRL result to verify against the equilibrium's expert statistics.
    #[arg(long)]
    irl: Option<PathBuf>,
    /// Residual report output.
    #[arg(long, default_value = "verify.json")]
    out: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    /// Model file or builtin name (positional form of --model).
    #[arg(conflicts_with = "model")]
    model_positional: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    theta: Option<Vec<f64>>,
    #[arg(long)]
    beta: Option<f64>,
    #[command(flatten)]
    gnep: GnepArgs,
    #[command(flatten)]
    irl: IrlArgs,
    /// Replace the exact expert feature expectation by simulation.
    #[arg(long)]
    estimate: bool,
    #[command(flatten)]
    sim: SimArgs,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

/// Failure classes, mapped to exit codes 1 and 2.
#[derive(Debug)]
enum Failure {
    Solver(anyhow::Error),
    Input(anyhow::Error),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Solver(_) => 1,
            Failure::Input(_) => 2,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Solver(e) | Failure::Input(e) => format!("{e:#}"),
        }
    }
}

fn is_solver_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::GnepNotConverged(_)
            | Error::IrlNotConverged(_)
            | Error::NonDescent { .. }
            | Error::LineSearchStall { .. }
            | Error::NonFinite { .. }
    )
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if is_solver_failure(&e) {
            Failure::Solver(e.into())
        } else {
            Failure::Input(e.into())
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if is_solver_failure(&e.source) {
            Failure::Solver(e.into())
        } else {
            Failure::Input(e.into())
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::SolveMfe(a) => {
            with_manifest("solve-mfe", manifest_path(&a.manifest, &a.out), |m| {
                solve_mfe(&a, m)
            })
        }
        Command::SolveIrl(a) => {
            with_manifest("solve-irl", manifest_path(&a.manifest, &a.out), |m| {
                solve_irl(&a, m)
            })
        }
        Command::Simulate(a) => {
            with_manifest("simulate", manifest_path(&a.manifest, &a.out), |m| {
                simulate(&a, m)
            })
        }
        Command::Estimate(a) => {
            with_manifest("estimate", manifest_path(&a.manifest, &a.out), |m| {
                estimate(&a, m)
            })
        }
        Command::Verify(a) => with_manifest("verify", manifest_path(&a.manifest, &a.out), |m| {
            verify(&a, m)
        }),
        Command::Pipeline(a) => {
            let path = a.out_dir.join("manifest.json");
            with_manifest("pipeline", path, |m| run_pipeline(&a, m))
        }
    }
}

fn manifest_path(explicit: &Option<PathBuf>, out: &Path) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| out.parent().unwrap_or(Path::new("")).join("manifest.json"))
}

/// Runs `body` and writes the manifest whether it succeeds or not.
fn with_manifest(
    command: &str,
    path: PathBuf,
    body: impl FnOnce(&mut RunManifest) -> CmdResult,
) -> CmdResult {
    let start = Instant::now();
    let mut manifest = RunManifest::new(command);
    let result = body(&mut manifest);
    manifest.finish(
        start.elapsed(),
        result.as_ref().err().map(|f| (f.exit_code(), f.message())),
    );
    if let Err(e) = manifest.write(&path) {
        log::error!("could not write manifest {}: {e:#}", path.display());
        if result.is_ok() {
            return Err(Failure::Input(e));
        }
    }
    result
}

fn read_input(path: &Path, manifest: &mut RunManifest) -> anyhow::Result<String> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    manifest.add_input(path, text.as_bytes());
    Ok(text)
}

fn write_output(path: &Path, text: &str, manifest: &mut RunManifest) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    manifest.add_output(path);
    Ok(())
}

fn load_spec(
    model: &str,
    theta: Option<&[f64]>,
    beta: Option<f64>,
    manifest: &mut RunManifest,
) -> Result<ModelSpec, Failure> {
    let spec = match model.strip_prefix("builtin:") {
        Some("malware2") => builtin_malware(
            2,
            theta.unwrap_or(&[0.2, 1.0, 0.4]),
            Some(0.9),
            beta.unwrap_or(0.8),
        )?,
        Some("malware10") => builtin_malware(
            10,
            theta.unwrap_or(&[0.1, 1.0, 0.4]),
            None,
            beta.unwrap_or(0.8),
        )?,
        Some(other) => {
            return Err(
                anyhow!("unknown builtin model '{other}' (use malware2 or malware10)").into(),
            )
        }
        None => {
            let path = Path::new(model);
            let text = read_input(path, manifest)?;
            let mut spec = load_model(&text)
                .with_context(|| format!("invalid model file {}", path.display()))?;
            if let Some(t) = theta {
                spec = spec.with_theta(t.to_vec())?;
            }
            if let Some(b) = beta {
                spec = spec.with_beta(b)?;
            }
            spec
        }
    };
    manifest.set(
        "model",
        json!({ "source": model, "document": spec.to_document() }),
    );
    Ok(spec)
}

fn spec_from(a: &ModelArgs, manifest: &mut RunManifest) -> Result<ModelSpec, Failure> {
    load_spec(&a.model, a.theta.as_deref(), a.beta, manifest)
}

fn read_equilibrium(
    path: &Path,
    spec: &ModelSpec,
    manifest: &mut RunManifest,
) -> Result<(SimplexVector, mfg_core::Policy), Failure> {
    let text = read_input(path, manifest)?;
    let doc = EquilibriumDocument::from_json(&text)
        .with_context(|| format!("invalid equilibrium file {}", path.display()))?;
    Ok(doc
        .decode(spec)
        .with_context(|| format!("equilibrium file {}", path.display()))?)
}

fn gnep_summary(report: &mfg_core::KktReport) -> Value {
    json!({
        "converged": report.converged,
        "iterations": report.iterations,
        "h_norm_final": report.h_norm_final(),
        "pseudo_inverse_steps": report.pseudo_inverse_steps,
        "steepest_descent_steps": report.steepest_descent_steps,
        "psi_strictly_decreasing": report.psi_strictly_decreasing(),
    })
}

fn gnep_failure_summary(e: &Error) -> Option<Value> {
    match e {
        Error::GnepNotConverged(r) => Some(gnep_summary(r)),
        Error::IrlNotConverged(t) => Some(json!({
            "converged": false,
            "iterations": t.iterations(),
            "grad_norm_final": t.final_grad_norm(),
        })),
        _ => None,
    }
}

fn solve_mfe(a: &SolveMfeArgs, m: &mut RunManifest) -> CmdResult {
    let spec = spec_from(&a.model, m)?;
    spec.require_theta()?;
    let cfg = a.gnep.config();
    m.set("gnep", serde_json::to_value(&cfg).expect("serializable"));
    let (eq, report) = gnep::solve_gnep(&spec, &cfg).inspect_err(|e| {
        if let Some(s) = gnep_failure_summary(e) {
            m.set("convergence", s);
        }
    })?;
    m.set("convergence", gnep_summary(&report));
    let doc = EquilibriumDocument::new(&eq, &report);
    write_output(&a.out, &to_stable_json(&doc)?, m)?;
    Ok(())
}

fn solve_irl(a: &SolveIrlArgs, m: &mut RunManifest) -> CmdResult {
    let spec = spec_from(&a.model, m)?;
    let problem = match (&a.equilibrium, &a.mean_field, &a.feature_expectation) {
        (Some(path), _, _) => {
            let (mu, pi) = read_equilibrium(path, &spec, m)?;
            IrlProblem::from_expert_policy(spec.without_theta(), &pi, mu)?
        }
        (None, Some(mu), Some(f)) => IrlProblem::new(spec.without_theta(), SimplexVector::new(mu.clone())?, f.clone())?,
        _ => {
            return Err(anyhow!(
                "solve-irl needs expert data: pass --equilibrium FILE or --mean-field with --feature-expectation"
            )
            .into())
        }
    };
    let cfg = a.irl.config();
    m.set("irl", serde_json::to_value(&cfg).expect("serializable"));
    m.set("expert", json!({ "mean_field": problem.mu_e().as_slice(), "feature_expectation": problem.f_expert() }));
    let sol = irl::solve_irl(&problem, &cfg).inspect_err(|e| {
        if let Some(s) = gnep_failure_summary(e) {
            m.set("convergence", s);
        }
    })?;
    let residuals = irl::verify_irl(&problem, &sol.occupation);
    m.set(
        "convergence",
        json!({ "converged": true, "iterations": sol.trace.iterations(), "grad_norm_final": sol.trace.final_grad_norm(), "step": sol.trace.step }),
    );
    m.set(
        "residuals",
        serde_json::to_value(residuals).expect("serializable"),
    );
    write_output(
        &a.out,
        &to_stable_json(&IrlDocument::new(&sol, residuals))?,
        m,
    )?;
    Ok(())
}

fn estimator_config(sim: &SimArgs, spec: &ModelSpec, mu: &SimplexVector) -> EstimatorConfig {
    let horizon = sim
        .horizon
        .unwrap_or_else(|| estimation::horizon_for_tolerance(spec, mu, 1e-4));
    EstimatorConfig::new(sim.trajectories, horizon, sim.seed)
}

fn simulate(a: &SimulateArgs, m: &mut RunManifest) -> CmdResult {
    let spec = spec_from(&a.model, m)?;
    let (mu, pi) = read_equilibrium(&a.equilibrium, &spec, m)?;
    let cfg = estimator_config(&a.sim, &spec, &mu);
    m.set(
        "estimator",
        serde_json::to_value(cfg).expect("serializable"),
    );
    let trs = estimation::simulate(&spec, &pi, &mu, &mu, &cfg)?;
    let csv = trajectories::to_csv(&trs)?;
    write_output(&a.out, &csv, m)?;
    Ok(())
}

fn estimate(a: &EstimateArgs, m: &mut RunManifest) -> CmdResult {
    let spec = spec_from(&a.model, m)?;
    let text = read_input(&a.trajectories, m)?;
    let trs = trajectories::from_csv(&text, spec.n_states(), spec.n_actions())
        .with_context(|| format!("invalid trajectory file {}", a.trajectories.display()))?;
    let mu_hat = estimation::estimate_mean_field(&trs, spec.n_states())?;
    let mu_f = match &a.mean_field {
        Some(mu) => SimplexVector::new(mu.clone())?,
        None => mu_hat.clone(),
    };
    let est = estimation::estimate_feature_expectation(&spec, &trs, &mu_f, spec.beta())?;
    let doc = json!({
        "mean_field": mu_hat.as_slice(),
        "feature_expectation": est.value,
        "std_error": est.std_error,
        "tail_bound": est.tail_bound,
        "n_trajectories": trs.len(),
    });
    write_output(&a.out, &to_stable_json(&doc)?, m)?;
    Ok(())
}

fn verify(a: &VerifyArgs, m: &mut RunManifest) -> CmdResult {
    let spec = spec_from(&a.model, m)?;
    spec.require_theta()?;
    let (mu, pi) = read_equilibrium(&a.equilibrium, &spec, m)?;
    let res = gnep::verify_mfe(&spec, &pi, &mu)?;
    let mut report = json!({
        "optimality_gap": res.optimality_gap,
        "relative_gap": res.relative_gap(),
        "optimal_cost": res.optimal_cost,
        "invariance_residual": res.invariance_residual,
    });
    if let Some(path) = &a.irl {
        let text = read_input(path, m)?;
        let doc: IrlDocument = serde_json::from_str(&text)
            .with_context(|| format!("invalid IRL file {}", path.display()))?;
        let problem =
            IrlProblem::from_expert_policy(spec.clone().without_theta(), &pi, mu.clone())?;
        let nu = mfg_core::OccupationMeasure::from_rows(&doc.occupation, spec.beta())?;
        report["irl"] = serde_json::to_value(irl::verify_irl(&problem, &nu)).expect("serializable");
    }
    m.set("residuals", report.clone());
    write_output(&a.out, &to_stable_json(&report)?, m)?;
    Ok(())
}

fn run_pipeline(a: &PipelineArgs, m: &mut RunManifest) -> CmdResult {
    let model = a
        .model_positional
        .as_deref()
        .or(a.model.as_deref())
        .ok_or_else(|| anyhow!("pipeline needs a model (positional or --model)"))?;
    let spec = load_spec(model, a.theta.as_deref(), a.beta, m)?;
    spec.require_theta()?;
    let mut cfg = PipelineConfig {
        gnep: a.gnep.config(),
        irl: a.irl.config(),
        estimate: None,
    };
    m.set(
        "gnep",
        serde_json::to_value(&cfg.gnep).expect("serializable"),
    );
    m.set("irl", serde_json::to_value(&cfg.irl).expect("serializable"));
    if a.estimate {
        // max ‖f(·, ·, μ)‖ over the simplex is attained at a vertex.
        let horizon = a.sim.horizon.unwrap_or_else(|| {
            (0..spec.n_states())
                .map(|x| {
                    estimation::horizon_for_tolerance(
                        &spec,
                        &SimplexVector::dirac(spec.n_states(), x),
                        1e-4,
                    )
                })
                .max()
                .unwrap_or(1)
        });
        let est = EstimatorConfig::new(a.sim.trajectories, horizon, a.sim.seed);
        m.set(
            "estimator",
            serde_json::to_value(est).expect("serializable"),
        );
        cfg.estimate = Some(est);
    }
    let out = pipeline::run_pipeline(&spec, &cfg).inspect_err(|e| {
        if let Some(s) = gnep_failure_summary(&e.source) {
            m.set("convergence", json!({ "stage": e.stage, "summary": s }));
        }
    })?;
    write_output(
        &a.out_dir.join("equilibrium.json"),
        &to_stable_json(&out.equilibrium_document())?,
        m,
    )?;
    write_output(
        &a.out_dir.join("irl.json"),
        &to_stable_json(&out.irl_document())?,
        m,
    )?;
    if a.estimate {
        write_output(
            &a.out_dir.join("trajectories.csv"),
            &trajectories::to_csv(&out.trajectories)?,
            m,
        )?;
    }
    m.set(
        "convergence",
        json!({
            "gnep": gnep_summary(&out.kkt),
            "irl": { "converged": true, "iterations": out.irl.trace.iterations(), "grad_norm_final": out.irl.trace.final_grad_norm(), "step": out.irl.trace.step },
        }),
    );
    m.set(
        "residuals",
        json!({
            "mfe": {
                "optimality_gap": out.mfe_residuals.optimality_gap,
                "relative_gap": out.mfe_residuals.relative_gap(),
                "invariance_residual": out.mfe_residuals.invariance_residual,
            },
            "irl": out.irl_residuals,
        }),
    );
    m.set(
        "expert",
        json!({ "mean_field": out.mu_expert.as_slice(), "feature_expectation": out.f_expert, "tail_bound": out.tail_bound }),
    );
    Ok(())
}
