//! The two-step pipeline (forward MFE, then IRL at the equilibrium) and the
//! on-disk result documents.

use std::io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{self, EstimatorConfig, Trajectory};
use crate::gnep::{self, Equilibrium, GnepConfig, KktReport, MfeResiduals};
use crate::irl::{self, DualPoint, IrlConfig, IrlProblem, IrlResiduals, IrlSolution};
use crate::mdp::{self, Policy};
use crate::model::{ModelSpec, SimplexVector};

/// Writes every float as `{:.11e}` (12 significant digits).
#[derive(Clone, Debug, Default)]
pub struct FixedFloatFormatter {
    inner: serde_json::ser::PrettyFormatter<'static>,
}

impl serde_json::ser::Formatter for FixedFloatFormatter {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            write!(writer, "{value:.11e}")
        } else {
            writer.write_all(b"null")
        }
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_array(w)
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array(w)
    }
    fn begin_array_value<W: ?Sized + io::Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> io::Result<()> {
        self.inner.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array_value(w)
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object(w)
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object(w)
    }
    fn begin_object_key<W: ?Sized + io::Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> io::Result<()> {
        self.inner.begin_object_key(w, first)
    }
    fn end_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object_key(w)
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object_value(w)
    }
}

/// Pretty JSON with fixed float formatting and a trailing newline.
pub fn to_stable_json<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FixedFloatFormatter::default());
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Parse(format!("serialization failed: {e}")))?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumDocument {
    pub mean_field: Vec<f64>,
    pub policy: Vec<Vec<f64>>,
    pub occupation: Vec<Vec<f64>>,
    pub optimality_gap: f64,
    pub invariance_residual: f64,
    pub iterations: usize,
    pub h_norm_final: f64,
}

impl EquilibriumDocument {
    pub fn new(eq: &Equilibrium, report: &KktReport) -> Self {
        Self {
            mean_field: eq.mean_field.to_vec(),
            policy: eq.policy.rows(),
            occupation: eq.occupation.rows(),
            optimality_gap: eq.optimality_gap,
            invariance_residual: eq.invariance_residual,
            iterations: report.iterations,
            h_norm_final: report.h_norm_final(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Mean field and policy, validated against `spec`.
    pub fn decode(&self, spec: &ModelSpec) -> Result<(SimplexVector, Policy)> {
        if self.mean_field.len() != spec.n_states() || self.policy.len() != spec.n_states() {
            return Err(Error::DimensionMismatch(
                "equilibrium file does not match the model".into(),
            ));
        }
        let pi = Policy::from_rows(&self.policy)?;
        if pi.n_actions() != spec.n_actions() {
            return Err(Error::DimensionMismatch(
                "equilibrium policy has the wrong number of actions".into(),
            ));
        }
        Ok((SimplexVector::new(self.mean_field.clone())?, pi))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrlDocument {
    pub dual: DualPoint,
    pub occupation: Vec<Vec<f64>>,
    pub policy: Vec<Vec<f64>>,
    pub residuals: IrlResiduals,
    pub iterations: usize,
    pub g_final: f64,
}

impl IrlDocument {
    pub fn new(sol: &IrlSolution, residuals: IrlResiduals) -> Self {
        Self {
            dual: sol.dual.clone(),
            occupation: sol.occupation.rows(),
            policy: sol.policy.rows(),
            residuals,
            iterations: sol.trace.iterations(),
            g_final: sol.trace.final_g(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Forward,
    Expert,
    Inverse,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Forward => "forward (solve_gnep)",
            Stage::Expert => "expert feature expectation",
            Stage::Inverse => "inverse (solve_irl)",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("pipeline stage {stage}: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, PipelineError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, PipelineError> {
        self.map_err(|source| PipelineError { stage, source })
    }
}

#[derive(Clone, Debug, Default)]
pub struct PipelineConfig {
    pub gnep: GnepConfig,
    pub irl: IrlConfig,
    /// Replace the exact expert feature expectation with simulation.
    pub estimate: Option<EstimatorConfig>,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub equilibrium: Equilibrium,
    pub kkt: KktReport,
    pub mfe_residuals: MfeResiduals,
    pub mu_expert: SimplexVector,
    pub f_expert: Vec<f64>,
    /// Present when the expert data came from simulation.
    pub tail_bound: Option<f64>,
    pub trajectories: Vec<Trajectory>,
    pub irl: IrlSolution,
    pub irl_residuals: IrlResiduals,
}

impl PipelineOutput {
    pub fn equilibrium_document(&self) -> EquilibriumDocument {
        EquilibriumDocument::new(&self.equilibrium, &self.kkt)
    }

    pub fn irl_document(&self) -> IrlDocument {
        IrlDocument::new(&self.irl, self.irl_residuals)
    }
}

/// Expert mean field, feature expectation, tail bound and sampled trajectories.
pub type ExpertData = (SimplexVector, Vec<f64>, Option<f64>, Vec<Trajectory>);

/// Expert data at `(π, μ)`: exact, or estimated from simulated trajectories
/// started at `μ`.
pub fn expert_data(
    spec: &ModelSpec,
    pi: &Policy,
    mu: &SimplexVector,
    estimate: Option<&EstimatorConfig>,
) -> Result<ExpertData> {
    match estimate {
        None => Ok((
            mu.clone(),
            mdp::feature_expectation(spec, pi, mu, mu)?,
            None,
            Vec::new(),
        )),
        Some(cfg) => {
            let trajectories = estimation::simulate(spec, pi, mu, mu, cfg)?;
            let mu_hat = estimation::estimate_mean_field(&trajectories, spec.n_states())?;
            let est = estimation::estimate_feature_expectation(
                spec,
                &trajectories,
                &mu_hat,
                spec.beta(),
            )?;
            Ok((mu_hat, est.value, Some(est.tail_bound), trajectories))
        }
    }
}

pub fn run_pipeline(
    spec: &ModelSpec,
    config: &PipelineConfig,
) -> std::result::Result<PipelineOutput, PipelineError> {
    let (equilibrium, kkt) = gnep::solve_gnep(spec, &config.gnep).at(Stage::Forward)?;
    let mfe_residuals =
        gnep::verify_mfe(spec, &equilibrium.policy, &equilibrium.mean_field).at(Stage::Forward)?;
    let (mu_expert, f_expert, tail_bound, trajectories) = expert_data(
        spec,
        &equilibrium.policy,
        &equilibrium.mean_field,
        config.estimate.as_ref(),
    )
    .at(Stage::Expert)?;
    let problem = IrlProblem::new(
        spec.clone().without_theta(),
        mu_expert.clone(),
        f_expert.clone(),
    )
    .at(Stage::Inverse)?;
    let irl = irl::solve_irl(&problem, &config.irl).at(Stage::Inverse)?;
    let irl_residuals = irl::verify_irl(&problem, &irl.occupation);
    Ok(PipelineOutput {
        equilibrium,
        kkt,
        mfe_residuals,
        mu_expert,
        f_expert,
        tail_bound,
        trajectories,
        irl,
        irl_residuals,
    })
}
