//! Maximum causal entropy inverse reinforcement learning given the expert
//! mean field `μ_E` and discounted feature expectation.
//!
//! The dual of the occupation-measure program is minimized by constant-step
//! gradient descent. Its minimizer induces the Boltzmann occupation measure
//! `ν*(x, a) ∝ exp k(x, a)`, from which the policy is recovered.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{self, OccupationMeasure, Policy};
use crate::model::{ModelSpec, SimplexVector};
use crate::numerics::{self, dot, norm2, norm_inf, DenseMatrix};

/// IRL inputs: model (θ not needed), expert mean field and expert feature
/// expectation.
#[derive(Clone, Debug)]
pub struct IrlProblem {
    spec: ModelSpec,
    mu_e: SimplexVector,
    f_expert: Vec<f64>,
    // Cached at μ_E.
    features: Vec<f64>,
    kernel: Vec<f64>,
    log_mu: Vec<f64>,
}

impl IrlProblem {
    /// Feature expectation supplied directly.
    pub fn new(spec: ModelSpec, mu_e: SimplexVector, f_expert: Vec<f64>) -> Result<Self> {
        let nx = spec.n_states();
        if mu_e.len() != nx {
            return Err(Error::DimensionMismatch(format!(
                "expert mean field has {} entries, model has {nx} states",
                mu_e.len()
            )));
        }
        if let Some((x, v)) = mu_e.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::Validation(format!(
                "expert mean field must be strictly positive, state {x} has mass {v}"
            )));
        }
        if f_expert.len() != spec.feature_dim() {
            return Err(Error::DimensionMismatch(format!(
                "expert feature expectation has {} entries, model has {} features",
                f_expert.len(),
                spec.feature_dim()
            )));
        }
        if f_expert.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(
                "expert feature expectation is not finite".into(),
            ));
        }
        let features: Vec<f64> = spec.features_at(&mu_e).iter().flatten().copied().collect();
        let k = spec.kernel_at(&mu_e);
        let na = spec.n_actions();
        let kernel: Vec<f64> = (0..spec.n_pairs())
            .flat_map(|xa| k.row(xa / na, xa % na).to_vec())
            .collect();
        let log_mu = mu_e.iter().map(|m| m.ln()).collect();
        Ok(Self {
            spec,
            mu_e,
            f_expert,
            features,
            kernel,
            log_mu,
        })
    }

    /// Feature expectation computed exactly from a known expert policy,
    /// started from `μ_E`.
    pub fn from_expert_policy(spec: ModelSpec, pi_e: &Policy, mu_e: SimplexVector) -> Result<Self> {
        let f = mdp::feature_expectation(&spec, pi_e, &mu_e, &mu_e)?;
        Self::new(spec, mu_e, f)
    }

    /// Mean field and feature expectation estimated from trajectories.
    pub fn from_trajectories(
        spec: ModelSpec,
        trajectories: &[crate::estimation::Trajectory],
    ) -> Result<Self> {
        let mu_hat = crate::estimation::estimate_mean_field(trajectories, spec.n_states())?;
        let est = crate::estimation::estimate_feature_expectation(
            &spec,
            trajectories,
            &mu_hat,
            spec.beta(),
        )?;
        Self::new(spec, mu_hat, est.value)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn mu_e(&self) -> &SimplexVector {
        &self.mu_e
    }

    pub fn f_expert(&self) -> &[f64] {
        &self.f_expert
    }

    fn beta(&self) -> f64 {
        self.spec.beta()
    }

    fn n_states(&self) -> usize {
        self.spec.n_states()
    }

    fn k(&self) -> usize {
        self.spec.feature_dim()
    }

    fn feature(&self, xa: usize) -> &[f64] {
        &self.features[xa * self.k()..(xa + 1) * self.k()]
    }

    fn kernel_row(&self, xa: usize) -> &[f64] {
        let nx = self.n_states();
        &self.kernel[xa * nx..(xa + 1) * nx]
    }

    /// Dimension of the dual variable.
    pub fn dual_dim(&self) -> usize {
        self.k() + 2 * self.n_states()
    }
}

/// Dual variables `(θ, λ, ξ)`; also used for gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualPoint {
    pub theta: Vec<f64>,
    pub lambda: Vec<f64>,
    pub xi: Vec<f64>,
}

impl DualPoint {
    pub fn zeros(problem: &IrlProblem) -> Self {
        Self {
            theta: vec![0.0; problem.k()],
            lambda: vec![0.0; problem.n_states()],
            xi: vec![0.0; problem.n_states()],
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        [&self.theta[..], &self.lambda, &self.xi].concat()
    }

    pub fn from_vec(problem: &IrlProblem, v: &[f64]) -> Result<Self> {
        let (k, nx) = (problem.k(), problem.n_states());
        if v.len() != k + 2 * nx {
            return Err(Error::DimensionMismatch(format!(
                "dual vector has {} entries, expected {}",
                v.len(),
                k + 2 * nx
            )));
        }
        Ok(Self {
            theta: v[..k].to_vec(),
            lambda: v[k..k + nx].to_vec(),
            xi: v[k + nx..].to_vec(),
        })
    }

    pub fn norm_inf(&self) -> f64 {
        norm_inf(&self.theta)
            .max(norm_inf(&self.lambda))
            .max(norm_inf(&self.xi))
    }

    pub fn norm2(&self) -> f64 {
        norm2(&self.to_vec())
    }

    fn axpy(&mut self, alpha: f64, g: &DualPoint) {
        for (a, b) in self
            .theta
            .iter_mut()
            .chain(self.lambda.iter_mut())
            .chain(self.xi.iter_mut())
            .zip(g.theta.iter().chain(&g.lambda).chain(&g.xi))
        {
            *a += alpha * b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessConstants {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub m: f64,
    pub l: f64,
}

impl SmoothnessConstants {
    pub fn from_parts(m1: f64, m2: f64, m3: f64, beta: f64, n_pairs: usize) -> Self {
        let m = m1.max(m2).max(m3);
        let l = 2.0 * m * (m1 / (1.0 - beta) + 2.0 * (n_pairs as f64).sqrt());
        Self { m1, m2, m3, m, l }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrlConfig {
    /// Gradient step; `None` means `1/L`.
    pub step: Option<f64>,
    /// Stop once `‖∇g‖∞ ≤ grad_tol`.
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for IrlConfig {
    fn default() -> Self {
        Self {
            step: None,
            grad_tol: 1e-2,
            max_iter: 5_000_000,
        }
    }
}

/// Per-iteration `g(d_k)` and `‖∇g(d_k)‖∞`, for `k = 0..=iterations`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrlTrace {
    pub g: Vec<f64>,
    pub grad_norm: Vec<f64>,
    pub step: f64,
    pub converged: bool,
}

impl IrlTrace {
    pub fn iterations(&self) -> usize {
        self.g.len().saturating_sub(1)
    }

    pub fn final_grad_norm(&self) -> f64 {
        self.grad_norm.last().copied().unwrap_or(f64::NAN)
    }

    pub fn final_g(&self) -> f64 {
        self.g.last().copied().unwrap_or(f64::NAN)
    }

    /// `g_{k+1} ≤ g_k + slack` for every k.
    pub fn is_nonincreasing(&self, slack: f64) -> bool {
        self.g.windows(2).all(|w| w[1] <= w[0] + slack)
    }
}

#[derive(Clone, Debug)]
pub struct IrlSolution {
    pub dual: DualPoint,
    pub occupation: OccupationMeasure,
    pub policy: Policy,
    pub trace: IrlTrace,
}

/// Constraint residuals of a candidate occupation measure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrlResiduals {
    pub feat: f64,
    pub flow: f64,
    pub marg: f64,
    pub pos: f64,
}

impl IrlResiduals {
    pub fn max(&self) -> f64 {
        self.feat.max(self.flow).max(self.marg).max(self.pos)
    }
}

/// Outcome of the span check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanCheck {
    pub holds: bool,
    pub rank: usize,
    /// `k + 2|X|`.
    pub required: usize,
}

/// `k(x, a) = log μ_E(x) + ⟨θ, f(x,a,μ_E)⟩
///            + (1−β)[λ_x + Σ_z ξ_z (p(z|x,a,μ_E) − μ_E(z))]`.
pub fn k_table(problem: &IrlProblem, d: &DualPoint) -> Vec<f64> {
    let na = problem.spec.n_actions();
    let beta = problem.beta();
    let xi_mu = dot(&d.xi, &problem.mu_e);
    (0..problem.spec.n_pairs())
        .map(|xa| {
            let x = xa / na;
            problem.log_mu[x]
                + dot(&d.theta, problem.feature(xa))
                + (1.0 - beta) * (d.lambda[x] + dot(&d.xi, problem.kernel_row(xa)) - xi_mu)
        })
        .collect()
}

fn softmax(k: &[f64]) -> (Vec<f64>, f64) {
    let lse = numerics::log_sum_exp(k).expect("nonempty table");
    (k.iter().map(|v| (v - lse).exp()).collect(), lse)
}

/// Boltzmann occupation measure `ν* = exp(k) / Σ exp(k)`.
pub fn boltzmann(problem: &IrlProblem, d: &DualPoint) -> OccupationMeasure {
    let (nu, _) = softmax(&k_table(problem, d));
    OccupationMeasure::from_table(nu, problem.spec.n_actions(), problem.beta())
        .expect("finite table")
}

/// `g = LSE(k)/(1−β) − ⟨θ, f_E⟩ − ⟨λ, μ_E⟩`.
pub fn dual_objective(problem: &IrlProblem, d: &DualPoint) -> f64 {
    let lse = numerics::log_sum_exp(&k_table(problem, d)).expect("nonempty table");
    lse / (1.0 - problem.beta()) - dot(&d.theta, &problem.f_expert) - dot(&d.lambda, &problem.mu_e)
}

fn gradient_from_nu(problem: &IrlProblem, nu: &[f64]) -> DualPoint {
    let (k, nx, na) = (problem.k(), problem.n_states(), problem.spec.n_actions());
    let scale = 1.0 / (1.0 - problem.beta());
    let mut theta = vec![0.0; k];
    let mut lambda = vec![0.0; nx];
    let mut xi = vec![0.0; nx];
    for (xa, &w) in nu.iter().enumerate() {
        for (t, f) in theta.iter_mut().zip(problem.feature(xa)) {
            *t += scale * w * f;
        }
        lambda[xa / na] += w;
        for (s, p) in xi.iter_mut().zip(problem.kernel_row(xa)) {
            *s += w * p;
        }
    }
    for (t, f) in theta.iter_mut().zip(&problem.f_expert) {
        *t -= f;
    }
    for ((l, s), m) in lambda
        .iter_mut()
        .zip(xi.iter_mut())
        .zip(problem.mu_e.iter())
    {
        *l -= m;
        *s -= m;
    }
    DualPoint { theta, lambda, xi }
}

/// `(∇_θ g, ∇_λ g, ∇_ξ g)`.
pub fn dual_gradient(problem: &IrlProblem, d: &DualPoint) -> DualPoint {
    let (nu, _) = softmax(&k_table(problem, d));
    gradient_from_nu(problem, &nu)
}

fn objective_and_gradient(problem: &IrlProblem, d: &DualPoint) -> (f64, DualPoint) {
    let (nu, lse) = softmax(&k_table(problem, d));
    let g = lse / (1.0 - problem.beta())
        - dot(&d.theta, &problem.f_expert)
        - dot(&d.lambda, &problem.mu_e);
    (g, gradient_from_nu(problem, &nu))
}

/// Smoothness constants of the dual objective.
pub fn smoothness_constants(problem: &IrlProblem) -> SmoothnessConstants {
    let np = problem.spec.n_pairs();
    let beta = problem.beta();
    let m1 = (0..np)
        .map(|xa| norm2(problem.feature(xa)))
        .fold(0.0, f64::max);
    let m3 = (0..np)
        .map(|xa| {
            let diff: Vec<f64> = problem
                .kernel_row(xa)
                .iter()
                .zip(problem.mu_e.iter())
                .map(|(p, m)| p - m)
                .collect();
            norm2(&diff)
        })
        .fold(0.0, f64::max);
    SmoothnessConstants::from_parts(m1, 1.0 - beta, (1.0 - beta) * m3, beta, np)
}

/// Stacked `(f(x,a,μ_E), p(·|x,a,μ_E), e(·|x,a))` rows, one per pair.
pub fn span_matrix(problem: &IrlProblem) -> DenseMatrix {
    let (k, nx, na) = (problem.k(), problem.n_states(), problem.spec.n_actions());
    let np = problem.spec.n_pairs();
    let mut m = DenseMatrix::zeros(np, k + 2 * nx);
    for xa in 0..np {
        for (j, f) in problem.feature(xa).iter().enumerate() {
            m[(xa, j)] = *f;
        }
        for (y, p) in problem.kernel_row(xa).iter().enumerate() {
            m[(xa, k + y)] = *p;
        }
        m[(xa, k + nx + xa / na)] = 1.0;
    }
    m
}

/// Whether the stacked vectors span `R^k × R^X × R^X`.
pub fn check_span_assumption(problem: &IrlProblem) -> SpanCheck {
    let m = span_matrix(problem);
    let rank = numerics::rank(&m, 1e-10);
    let required = m.cols();
    SpanCheck {
        holds: rank == required,
        rank,
        required,
    }
}

/// Gradient descent from `d₀ = 0` until `‖∇g‖∞ ≤ grad_tol`.
pub fn solve_irl(problem: &IrlProblem, config: &IrlConfig) -> Result<IrlSolution> {
    let consts = smoothness_constants(problem);
    let step = config.step.unwrap_or(1.0 / consts.l);
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::BadParameter("step must be positive".into()));
    }
    if !(config.grad_tol > 0.0) {
        return Err(Error::BadParameter("grad_tol must be positive".into()));
    }
    if step > 1.0 / consts.l {
        log::warn!(
            "step {step} exceeds 1/L = {:e}; the descent guarantee does not apply",
            1.0 / consts.l
        );
    }
    let mut d = DualPoint::zeros(problem);
    let mut trace = IrlTrace {
        g: Vec::new(),
        grad_norm: Vec::new(),
        step,
        converged: false,
    };
    for iteration in 0..=config.max_iter {
        let (g, grad) = objective_and_gradient(problem, &d);
        let gn = grad.norm_inf();
        if !g.is_finite() || !gn.is_finite() {
            return Err(Error::NonFinite { iteration });
        }
        trace.g.push(g);
        trace.grad_norm.push(gn);
        if gn <= config.grad_tol {
            trace.converged = true;
            break;
        }
        if iteration == config.max_iter {
            break;
        }
        d.axpy(-step, &grad);
    }
    if !trace.converged {
        return Err(Error::IrlNotConverged(Box::new(trace)));
    }
    let occupation = boltzmann(problem, &d);
    let policy = mdp::disintegrate(&occupation);
    Ok(IrlSolution {
        dual: d,
        occupation,
        policy,
        trace,
    })
}

/// Feature, flow, marginal and positivity residuals of `ν`.
pub fn verify_irl(problem: &IrlProblem, nu: &OccupationMeasure) -> IrlResiduals {
    let spec = &problem.spec;
    let feats = mdp::feature_expectation_of(spec, nu.as_slice(), &problem.mu_e);
    let feat = feats
        .iter()
        .zip(&problem.f_expert)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let nx = problem.n_states();
    let mut push = vec![0.0; nx];
    for (xa, w) in nu.as_slice().iter().enumerate() {
        for (o, p) in push.iter_mut().zip(problem.kernel_row(xa)) {
            *o += w * p;
        }
    }
    let flow = push
        .iter()
        .zip(problem.mu_e.iter())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let marg = nu
        .state_marginal()
        .iter()
        .zip(problem.mu_e.iter())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let pos = nu.as_slice().iter().fold(0.0f64, |m, v| m.max(-v));
    IrlResiduals {
        feat,
        flow,
        marg,
        pos,
    }
}

/// Primal objective `(1/(1−β)) Σ −log(ν(x,a)/μ_E(x)) ν(x,a)`, `0 log 0 = 0`.
pub fn primal_objective(problem: &IrlProblem, nu: &OccupationMeasure) -> f64 {
    let na = problem.spec.n_actions();
    let s: f64 = nu
        .as_slice()
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.0)
        .map(|(xa, v)| -v * (v.ln() - problem.log_mu[xa / na]))
        .sum();
    s / (1.0 - problem.beta())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{malware10, malware2, random_affine_model, random_simplex};
    use crate::model::ModelDocument;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reference_problem() -> IrlProblem {
        IrlProblem::new(
            malware2().without_theta(),
            SimplexVector::new(vec![0.65, 0.35]).unwrap(),
            vec![1.75, 0.6125, 3.0175],
        )
        .unwrap()
    }

    fn random_dual(rng: &mut ChaCha8Rng, p: &IrlProblem, scale: f64) -> DualPoint {
        let v: Vec<f64> = (0..p.dual_dim())
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        DualPoint::from_vec(p, &v).unwrap()
    }

    #[test]
    fn rejects_bad_inputs() {
        let spec = malware2();
        assert!(IrlProblem::new(
            spec.clone(),
            SimplexVector::new(vec![1.0, 0.0]).unwrap(),
            vec![0.0; 3]
        )
        .is_err());
        assert!(IrlProblem::new(spec.clone(), SimplexVector::uniform(2), vec![0.0; 2]).is_err());
        assert!(IrlProblem::new(spec, SimplexVector::uniform(2), vec![f64::NAN; 3]).is_err());
    }

    #[test]
    fn k_table_cases() {
        let p = reference_problem();
        let zero = DualPoint::zeros(&p);
        let k = k_table(&p, &zero);
        assert_eq!(
            k,
            vec![0.65f64.ln(), 0.65f64.ln(), 0.35f64.ln(), 0.35f64.ln()]
        );

        let mut d = zero.clone();
        d.theta = vec![1.0, 0.0, 0.0];
        assert!((k_table(&p, &d)[2] - (0.35f64.ln() + 1.0)).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = random_dual(&mut rng, &p, 1.0);
        let mut shifted = d.clone();
        shifted.lambda.iter_mut().for_each(|l| *l += 2.0);
        for (a, b) in k_table(&p, &d).iter().zip(k_table(&p, &shifted)) {
            assert!((b - a - 0.2 * 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn boltzmann_cases() {
        let p = reference_problem();
        let nu = boltzmann(&p, &DualPoint::zeros(&p));
        for (xa, v) in nu.as_slice().iter().enumerate() {
            assert!((v - p.mu_e()[xa / 2] / 2.0).abs() < 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let d = random_dual(&mut rng, &p, 3.0);
            let nu = boltzmann(&p, &d);
            assert!((nu.total_mass() - 1.0).abs() < 1e-12);
            assert!(nu.as_slice().iter().all(|v| *v > 0.0));
            let mut shifted = d.clone();
            shifted.lambda.iter_mut().for_each(|l| *l -= 1.3);
            let nu2 = boltzmann(&p, &shifted);
            for (a, b) in nu.as_slice().iter().zip(nu2.as_slice()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dual_objective_cases() {
        let p = reference_problem();
        let g0 = dual_objective(&p, &DualPoint::zeros(&p));
        assert!((g0 - 5.0 * 2f64.ln()).abs() < 1e-12);
        assert!((g0 - 3.46574).abs() < 1e-5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let d = random_dual(&mut rng, &p, 2.0);
            let mut s = d.clone();
            s.lambda.iter_mut().for_each(|l| *l += 0.7);
            assert!((dual_objective(&p, &d) - dual_objective(&p, &s)).abs() < 1e-12);
            let e = random_dual(&mut rng, &p, 2.0);
            let mid = DualPoint::from_vec(
                &p,
                &d.to_vec()
                    .iter()
                    .zip(e.to_vec())
                    .map(|(a, b)| 0.5 * (a + b))
                    .collect::<Vec<_>>(),
            )
            .unwrap();
            let avg = 0.5 * (dual_objective(&p, &d) + dual_objective(&p, &e));
            assert!(dual_objective(&p, &mid) <= avg + 1e-10);
        }
    }

    fn fd_gradient(p: &IrlProblem, d: &DualPoint) -> Vec<f64> {
        numerics::jacobian_fd(
            |v| vec![dual_objective(p, &DualPoint::from_vec(p, v).unwrap())],
            &d.to_vec(),
            1e-6,
            crate::exec::Execution::Sequential,
        )
        .unwrap()
        .row(0)
        .to_vec()
    }

    #[test]
    fn gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let problems = [
            reference_problem(),
            IrlProblem::from_expert_policy(
                malware10(),
                &Policy::deterministic(&[0, 0, 0, 0, 0, 0, 0, 1, 1, 1], 2),
                SimplexVector::uniform(10),
            )
            .unwrap(),
        ];
        for p in &problems {
            for _ in 0..20 {
                let d = random_dual(&mut rng, p, 1.0);
                let g = dual_gradient(p, &d).to_vec();
                let fd = fd_gradient(p, &d);
                for (a, b) in g.iter().zip(&fd) {
                    assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()), "{a} vs {b}");
                }
                let gl = dual_gradient(p, &d).lambda;
                assert!(gl.iter().sum::<f64>().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_vanishes_at_matching_boltzmann() {
        // Take any Boltzmann measure and declare it the expert: feature,
        // marginal and flow moments then match at the same dual point only
        // if μ_E is its marginal and its push-forward, so build the problem
        // from the zero dual, where ν* = μ_E ⊗ uniform.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = random_affine_model(&mut rng, 3, 2, 2);
        // A kernel whose push-forward of μ ⊗ uniform is μ itself: a model
        // with p(·|x,a) = μ for every pair.
        let mu = random_simplex(&mut rng, 3);
        let mut doc = spec.to_document();
        for y in 0..3 {
            for x in 0..3 {
                for a in 0..2 {
                    doc.p0[y][x][a] = mu[y];
                }
            }
        }
        doc.p1 = None;
        let spec = ModelSpec::from_document(doc).unwrap();
        let nu: Vec<f64> = (0..6).map(|xa| mu[xa / 2] / 2.0).collect();
        let f = mdp::feature_expectation_of(&spec, &nu, &mu);
        let p = IrlProblem::new(spec, mu, f).unwrap();
        let g = dual_gradient(&p, &DualPoint::zeros(&p));
        assert!(g.norm_inf() < 1e-12);
        let sol = solve_irl(&p, &IrlConfig::default()).unwrap();
        assert_eq!(sol.trace.iterations(), 0);
        assert_eq!(sol.dual, DualPoint::zeros(&p));
    }

    #[test]
    fn smoothness_cases() {
        let p = reference_problem();
        let s = smoothness_constants(&p);
        assert_eq!(s.m2, 1.0 - 0.8);
        let expect = (1.0f64 + 0.35 * 0.35 + 1.0).sqrt();
        assert!((s.m1 - expect).abs() < 1e-12);
        assert!((s.m1 - 1.4569).abs() < 1e-4);
        let f = SmoothnessConstants::from_parts(1.0, 1.0, 1.0, 0.5, 4);
        assert_eq!(f.l, 12.0);
        assert_eq!(s.m, s.m1.max(s.m2).max(s.m3));
    }

    fn brute_rank(m: &DenseMatrix) -> usize {
        let mut a: Vec<Vec<f64>> = (0..m.rows()).map(|i| m.row(i).to_vec()).collect();
        let mut rank = 0;
        for c in 0..m.cols() {
            let piv = (rank..a.len()).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()));
            let Some(p) = piv else { break };
            if a[p][c].abs() < 1e-9 {
                continue;
            }
            a.swap(rank, p);
            for i in 0..a.len() {
                if i != rank {
                    let f = a[i][c] / a[rank][c];
                    let pivot_row = a[rank].clone();
                    for (x, y) in a[i].iter_mut().zip(&pivot_row) {
                        *x -= f * y;
                    }
                }
            }
            rank += 1;
        }
        rank
    }

    #[test]
    fn span_assumption_cases() {
        let s = check_span_assumption(&reference_problem());
        assert_eq!(s.required, 7);
        assert!(!s.holds && s.rank <= 4);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            // k + 2|X| = 1 + 4 ≤ |X||A| = 8
            let spec = random_affine_model(&mut rng, 2, 4, 1);
            let mu = random_simplex(&mut rng, 2);
            let p = IrlProblem::new(spec, mu, vec![0.0]).unwrap();
            let s = check_span_assumption(&p);
            assert_eq!(s.rank, brute_rank(&span_matrix(&p)));
        }
    }

    /// Permutation dynamics `l` and one-hot features through a bijection
    /// `h` of the pairs. The vector `(0, 1, −1)` is orthogonal to every
    /// stacked row, `u2(l(x)) + u3(x) = 1 − 1`, so the span is a proper
    /// subspace: `|X||A|` rows cannot span `|X||A| + 2|X|` dimensions.
    #[test]
    fn bijective_construction_rank() {
        let (nx, na) = (3, 2);
        let np = nx * na;
        let l = [1usize, 2, 0];
        let h = [3usize, 0, 5, 1, 4, 2];
        let mut p0 = vec![vec![vec![0.0; na]; nx]; nx];
        let mut f0 = vec![vec![vec![0.0; np]; na]; nx];
        for x in 0..nx {
            for a in 0..na {
                p0[l[x]][x][a] = 1.0;
                f0[x][a][h[x * na + a]] = 1.0;
            }
        }
        let spec = ModelSpec::from_document(ModelDocument {
            n_states: nx,
            n_actions: na,
            feature_dim: np,
            beta: 0.5,
            theta: None,
            state_labels: None,
            p0,
            p1: None,
            f0,
            f1: None,
        })
        .unwrap();
        let p = IrlProblem::new(spec, SimplexVector::uniform(nx), vec![0.0; np]).unwrap();
        let s = check_span_assumption(&p);
        assert_eq!(s.required, np + 2 * nx);
        assert_eq!(s.rank, np);
        assert!(!s.holds);
        let m = span_matrix(&p);
        let u: Vec<f64> = (0..np)
            .map(|_| 0.0)
            .chain(vec![1.0; nx])
            .chain(vec![-1.0; nx])
            .collect();
        assert!(m.mul_vec(&u).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn hessian_probe_is_psd() {
        let p = reference_problem();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let eps = 1e-3;
        for _ in 0..50 {
            let d = random_dual(&mut rng, &p, 2.0).to_vec();
            let w: Vec<f64> = (0..d.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let at = |s: f64| {
                let v: Vec<f64> = d.iter().zip(&w).map(|(a, b)| a + s * b).collect();
                dual_objective(&p, &DualPoint::from_vec(&p, &v).unwrap())
            };
            let second = (at(eps) - 2.0 * at(0.0) + at(-eps)) / (eps * eps);
            assert!(second >= -1e-6, "{second}");
        }
    }

    #[test]
    fn verify_irl_cases() {
        let spec = malware2();
        let mu = SimplexVector::new(vec![29.0 / 45.0, 16.0 / 45.0]).unwrap();
        let repair = 1.0 - (16.0 / 45.0) / (0.9 * 29.0 / 45.0);
        let pi = Policy::from_rows(&[[1.0 - repair, repair], [0.0, 1.0]]).unwrap();
        let p = IrlProblem::from_expert_policy(spec.clone(), &pi, mu.clone()).unwrap();
        let nu = mdp::occupation_measure(&spec, &pi, &mu, &mu).unwrap();
        assert!(verify_irl(&p, &nu).max() <= 1e-8);

        let reference_nu =
            OccupationMeasure::from_rows(&[[0.3960, 0.2540], [0.0, 0.35]], 0.8).unwrap();
        assert!(verify_irl(&reference_problem(), &reference_nu).max() <= 0.01);

        let bad = OccupationMeasure::from_rows(&[[0.1, 0.1], [0.4, 0.4]], 0.8).unwrap();
        assert!(verify_irl(&p, &bad).marg > 0.0);
    }

    #[test]
    fn duality_gap_is_inner_product_with_gradient() {
        // g(d) − primal(ν*(d)) = ⟨d, ∇g(d)⟩ for every d.
        let p = reference_problem();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let d = random_dual(&mut rng, &p, 2.0);
            let gap = dual_objective(&p, &d) - primal_objective(&p, &boltzmann(&p, &d));
            let inner = dot(&d.to_vec(), &dual_gradient(&p, &d).to_vec());
            assert!((gap - inner).abs() < 1e-10);
        }
    }

    #[test]
    fn descent_with_inverse_lipschitz_step() {
        let p = reference_problem();
        let cfg = IrlConfig {
            max_iter: 2000,
            grad_tol: 1e-12,
            ..IrlConfig::default()
        };
        let err = solve_irl(&p, &cfg).unwrap_err();
        let Error::IrlNotConverged(trace) = err else {
            panic!("expected non-convergence")
        };
        assert_eq!(trace.iterations(), 2000);
        assert!(trace.is_nonincreasing(0.0));
    }

    #[test]
    fn huge_step_is_reported() {
        let p = reference_problem();
        let cfg = IrlConfig {
            step: Some(1e308),
            max_iter: 100,
            ..IrlConfig::default()
        };
        let r = solve_irl(&p, &cfg);
        assert!(matches!(r, Err(Error::NonFinite { .. })), "{r:?}");
    }
}
