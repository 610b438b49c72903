//! Single-agent computations for the MDP obtained by freezing the mean-field
//! term: Bellman operators, value iteration (hard and soft), policy
//! evaluation, stationary distributions, discounted occupation measures,
//! causal entropy and feature expectations.
//!
//! Cost minimization is the convention for the hard Bellman operator; the
//! soft operator works with rewards `r_θ = ⟨θ, f⟩`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Kernel, ModelSpec, SimplexVector};
use crate::numerics::{self, norm_inf, DenseMatrix};

/// Threshold below which a state marginal counts as zero.
pub const MARGINAL_EPS: f64 = 1e-12;

/// Stationary policy `π(a | x)`, rows over states.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    n_actions: usize,
    data: Vec<f64>,
}

impl Policy {
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n_actions = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * n_actions);
        for (x, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != n_actions {
                return Err(Error::DimensionMismatch(format!(
                    "policy row {x} has {} actions, expected {n_actions}",
                    r.len()
                )));
            }
            SimplexVector::new(r.to_vec())
                .map_err(|e| Error::Validation(format!("policy row {x}: {e}")))?;
            data.extend(r.iter().map(|v| v.max(0.0)));
        }
        Ok(Self { n_actions, data })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_actions,
            data: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// Deterministic policy picking `actions[x]` in state `x`.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let mut data = vec![0.0; actions.len() * n_actions];
        for (x, &a) in actions.iter().enumerate() {
            data[x * n_actions + a] = 1.0;
        }
        Self { n_actions, data }
    }

    pub fn n_states(&self) -> usize {
        self.data.len() / self.n_actions
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, x: usize, a: usize) -> f64 {
        self.data[x * self.n_actions + a]
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.data[x * self.n_actions..(x + 1) * self.n_actions]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data
            .chunks(self.n_actions)
            .map(<[f64]>::to_vec)
            .collect()
    }

    /// Most likely action per state (lowest index on ties).
    pub fn dominant_actions(&self) -> Vec<usize> {
        (0..self.n_states())
            .map(|x| argmin_by(self.row(x), |p| -p))
            .collect()
    }

    /// Convex combination `(1 - eps) π + eps · uniform`.
    pub fn mix_uniform(&self, eps: f64) -> Self {
        let u = 1.0 / self.n_actions as f64;
        Self {
            n_actions: self.n_actions,
            data: self
                .data
                .iter()
                .map(|p| (1.0 - eps) * p + eps * u)
                .collect(),
        }
    }

    fn check_against(&self, spec: &ModelSpec) {
        assert_eq!(
            self.n_states(),
            spec.n_states(),
            "policy/model state count mismatch"
        );
        assert_eq!(
            self.n_actions,
            spec.n_actions(),
            "policy/model action count mismatch"
        );
    }
}

/// Normalized state-action occupation measure `ν(x, a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupationMeasure {
    n_actions: usize,
    nu: Vec<f64>,
    beta: f64,
    mu0: Option<SimplexVector>,
}

impl OccupationMeasure {
    /// Wraps a table that is not tagged with an initial distribution (no
    /// flow identity is implied).
    pub fn from_table(nu: Vec<f64>, n_actions: usize, beta: f64) -> Result<Self> {
        if n_actions == 0 || !nu.len().is_multiple_of(n_actions) {
            return Err(Error::DimensionMismatch(format!(
                "{} entries do not form rows of {n_actions} actions",
                nu.len()
            )));
        }
        if nu.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(
                "occupation measure has non-finite entries".into(),
            ));
        }
        Ok(Self {
            n_actions,
            nu,
            beta,
            mu0: None,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], beta: f64) -> Result<Self> {
        let n_actions = rows.first().map_or(0, |r| r.as_ref().len());
        let nu: Vec<f64> = rows
            .iter()
            .flat_map(|r| r.as_ref().iter().copied())
            .collect();
        Self::from_table(nu, n_actions, beta)
    }

    pub fn n_states(&self) -> usize {
        self.nu.len() / self.n_actions
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Initial distribution this measure was computed from, when it was
    /// built by [`occupation_measure`] (flow-consistent).
    pub fn mu0(&self) -> Option<&SimplexVector> {
        self.mu0.as_ref()
    }

    pub fn get(&self, x: usize, a: usize) -> f64 {
        self.nu[x * self.n_actions + a]
    }

    /// Row-major `(x, a)` layout.
    pub fn as_slice(&self) -> &[f64] {
        &self.nu
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.nu
            .chunks(self.n_actions)
            .map(<[f64]>::to_vec)
            .collect()
    }

    /// `ν^X(x) = Σ_a ν(x, a)`.
    pub fn state_marginal(&self) -> Vec<f64> {
        self.nu
            .chunks(self.n_actions)
            .map(|r| r.iter().sum())
            .collect()
    }

    /// `ν^A(a) = Σ_x ν(x, a)`.
    pub fn action_marginal(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_actions];
        for row in self.nu.chunks(self.n_actions) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn total_mass(&self) -> f64 {
        self.nu.iter().sum()
    }

    /// `‖ν^X − (1−β)μ0 − β ν p_μ‖∞`.
    pub fn flow_residual(&self, spec: &ModelSpec, mu: &[f64], mu0: &[f64]) -> f64 {
        let beta = spec.beta();
        let push = spec.kernel_at(mu).push_forward(&self.nu);
        let marg = self.state_marginal();
        marg.iter()
            .zip(mu0)
            .zip(&push)
            .fold(0.0, |m, ((nx, m0), p)| {
                m.max((nx - (1.0 - beta) * m0 - beta * p).abs())
            })
    }
}

/// State values `V(x)` and state-action values `Q(x, a)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueFunctions {
    pub v: Vec<f64>,
    /// Row-major `(x, a)`.
    pub q: Vec<f64>,
    pub n_actions: usize,
}

impl ValueFunctions {
    pub fn q(&self, x: usize, a: usize) -> f64 {
        self.q[x * self.n_actions + a]
    }

    pub fn q_row(&self, x: usize) -> &[f64] {
        &self.q[x * self.n_actions..(x + 1) * self.n_actions]
    }
}

fn argmin_by(values: &[f64], key: impl Fn(f64) -> f64) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if key(v) < key(values[best]) {
            best = i;
        }
    }
    best
}

/// `Q(x, a) = c(x, a) + β Σ_y p(y | x, a) V(y)`.
fn q_from_v(costs: &[f64], kernel: &Kernel, beta: f64, v: &[f64]) -> Vec<f64> {
    let na = kernel.n_actions();
    costs
        .iter()
        .enumerate()
        .map(|(xa, c)| c + beta * numerics::dot(kernel.row(xa / na, xa % na), v))
        .collect()
}

/// Hard Bellman operator in the cost convention:
/// `(T V)(x) = min_a [c(x, a, μ) + β Σ_y p(y | x, a, μ) V(y)]`.
pub fn bellman_operator(spec: &ModelSpec, mu: &SimplexVector, v: &[f64]) -> Result<Vec<f64>> {
    let costs = spec.costs_at(mu)?;
    let kernel = spec.kernel_at(mu);
    let q = q_from_v(costs.as_slice(), &kernel, spec.beta(), v);
    Ok(q.chunks(spec.n_actions())
        .map(|r| r.iter().copied().fold(f64::INFINITY, f64::min))
        .collect())
}

/// Soft Bellman operator in the reward convention:
/// `(T V)(x) = log Σ_a exp(r_θ(x, a) + β Σ_y p(y | x, a, μ) V(y))`.
pub fn soft_bellman_operator(
    spec: &ModelSpec,
    mu: &SimplexVector,
    theta: &[f64],
    v: &[f64],
) -> Vec<f64> {
    let rewards = rewards(spec, mu, theta);
    let kernel = spec.kernel_at(mu);
    let q = q_from_v(&rewards, &kernel, spec.beta(), v);
    q.chunks(spec.n_actions())
        .map(|r| numerics::log_sum_exp(r).expect("at least one action"))
        .collect()
}

fn rewards(spec: &ModelSpec, mu: &[f64], theta: &[f64]) -> Vec<f64> {
    assert_eq!(theta.len(), spec.feature_dim(), "theta length mismatch");
    spec.features_at(mu)
        .iter()
        .map(|f| numerics::dot(f, theta))
        .collect()
}

/// Value iteration for the frozen-μ MDP. Stops once the a-posteriori bound
/// `β/(1−β)·‖V_{k+1} − V_k‖∞` is at most `tol · (1 + ‖V‖∞)`. The greedy
/// policy is deterministic with ties going to the lowest action index.
pub fn value_iteration(
    spec: &ModelSpec,
    mu: &SimplexVector,
    tol: f64,
) -> Result<(ValueFunctions, Policy)> {
    assert!(tol > 0.0, "tolerance must be positive");
    let costs = spec.costs_at(mu)?;
    let kernel = spec.kernel_at(mu);
    let beta = spec.beta();
    let na = spec.n_actions();
    let mut v = vec![0.0; spec.n_states()];
    let factor = beta / (1.0 - beta);
    loop {
        let q = q_from_v(costs.as_slice(), &kernel, beta, &v);
        let next: Vec<f64> = q
            .chunks(na)
            .map(|r| r.iter().copied().fold(f64::INFINITY, f64::min))
            .collect();
        let delta = next
            .iter()
            .zip(&v)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        v = next;
        if factor * delta <= tol * (1.0 + norm_inf(&v)) {
            break;
        }
    }
    let q = q_from_v(costs.as_slice(), &kernel, beta, &v);
    let actions: Vec<usize> = q.chunks(na).map(|r| argmin_by(r, |c| c)).collect();
    Ok((
        ValueFunctions {
            v,
            q,
            n_actions: na,
        },
        Policy::deterministic(&actions, na),
    ))
}

/// Row-stochastic state chain `T(x, y) = Σ_a π(a | x) p(y | x, a, μ)`.
pub fn policy_chain(spec: &ModelSpec, pi: &Policy, mu: &[f64]) -> DenseMatrix {
    pi.check_against(spec);
    let kernel = spec.kernel_at(mu);
    let nx = spec.n_states();
    let mut t = DenseMatrix::zeros(nx, nx);
    for x in 0..nx {
        for a in 0..spec.n_actions() {
            let w = pi.prob(x, a);
            if w == 0.0 {
                continue;
            }
            for (y, p) in kernel.row(x, a).iter().enumerate() {
                t[(x, y)] += w * p;
            }
        }
    }
    t
}

/// Discounted cost-to-go `V^π` in the cost convention, by a direct solve of
/// `(I − β T_π) V = c_π`.
pub fn policy_evaluation(spec: &ModelSpec, pi: &Policy, mu: &SimplexVector) -> Result<Vec<f64>> {
    let costs = spec.costs_at(mu)?;
    let t = policy_chain(spec, pi, mu);
    let nx = spec.n_states();
    let beta = spec.beta();
    let mut a = DenseMatrix::identity(nx);
    for x in 0..nx {
        for y in 0..nx {
            a[(x, y)] -= beta * t[(x, y)];
        }
    }
    let c_pi: Vec<f64> = (0..nx)
        .map(|x| {
            (0..spec.n_actions())
                .map(|u| pi.prob(x, u) * costs.get(x, u))
                .sum()
        })
        .collect();
    numerics::solve_linear(&a, &c_pi)
}

/// Expected discounted cost `J(π, μ) = Σ_x μ(x) V^π(x)` with the initial
/// state drawn from μ itself.
pub fn discounted_cost(spec: &ModelSpec, pi: &Policy, mu: &SimplexVector) -> Result<f64> {
    Ok(numerics::dot(mu, &policy_evaluation(spec, pi, mu)?))
}

/// Invariant distribution of the chain induced by `π` with the kernel
/// frozen at `mu`.
pub fn stationary_distribution(
    spec: &ModelSpec,
    pi: &Policy,
    mu: &SimplexVector,
) -> Result<SimplexVector> {
    let t = policy_chain(spec, pi, mu);
    let nx = spec.n_states();
    // A = Tᵀ − I
    let mut a = t.transpose();
    for i in 0..nx {
        a[(i, i)] -= 1.0;
    }
    let r = numerics::rank(&a, 1e-10);
    if r + 1 < nx {
        return Err(Error::NonUniqueStationary { dimension: nx - r });
    }
    // Replace the last balance equation by the normalization.
    let mut sys = a.clone();
    for j in 0..nx {
        sys[(nx - 1, j)] = 1.0;
    }
    let mut rhs = vec![0.0; nx];
    rhs[nx - 1] = 1.0;
    let mut m = numerics::solve_linear(&sys, &rhs)?;
    for v in m.iter_mut() {
        if *v < 0.0 && *v > -1e-12 {
            *v = 0.0;
        }
    }
    SimplexVector::normalized(&m)
}

/// Power iteration from the uniform distribution; a fallback for chains with
/// several recurrent classes, where the limit depends on the start.
pub fn stationary_by_power_iteration(
    spec: &ModelSpec,
    pi: &Policy,
    mu: &SimplexVector,
    tol: f64,
    max_iter: usize,
) -> SimplexVector {
    let t = policy_chain(spec, pi, mu);
    let nx = spec.n_states();
    let mut m = vec![1.0 / nx as f64; nx];
    for _ in 0..max_iter {
        let next = t.tr_mul_vec(&m);
        let delta = next
            .iter()
            .zip(&m)
            .fold(0.0f64, |d, (a, b)| d.max((a - b).abs()));
        m = next;
        if delta <= tol {
            break;
        }
    }
    SimplexVector::normalized(&m).expect("stochastic iteration keeps mass")
}

/// Discounted state-action occupation measure of `π` started from `mu0`,
/// from the linear solve `(I − β T_πᵀ) m = (1 − β) μ0`.
pub fn occupation_measure(
    spec: &ModelSpec,
    pi: &Policy,
    mu: &SimplexVector,
    mu0: &SimplexVector,
) -> Result<OccupationMeasure> {
    let t = policy_chain(spec, pi, mu);
    let nx = spec.n_states();
    let beta = spec.beta();
    let mut a = DenseMatrix::identity(nx);
    for x in 0..nx {
        for y in 0..nx {
            a[(y, x)] -= beta * t[(x, y)];
        }
    }
    let rhs: Vec<f64> = mu0.iter().map(|m| (1.0 - beta) * m).collect();
    let m = numerics::solve_linear(&a, &rhs)?;
    let na = spec.n_actions();
    let mut nu = Vec::with_capacity(nx * na);
    for (x, mx) in m.iter().enumerate() {
        let mx = mx.max(0.0);
        for u in 0..na {
            nu.push(pi.prob(x, u) * mx);
        }
    }
    Ok(OccupationMeasure {
        n_actions: na,
        nu,
        beta,
        mu0: Some(mu0.clone()),
    })
}

/// `π(a | x) = ν(x, a) / ν^X(x)`; states without mass get the uniform row.
/// Negative round-off in `ν` is treated as zero.
pub fn disintegrate(nu: &OccupationMeasure) -> Policy {
    let na = nu.n_actions();
    let mut data = Vec::with_capacity(nu.nu.len());
    for row in nu.nu.chunks(na) {
        let clipped: Vec<f64> = row.iter().map(|v| v.max(0.0)).collect();
        let mass: f64 = clipped.iter().sum();
        if mass > MARGINAL_EPS {
            data.extend(clipped.iter().map(|v| v / mass));
        } else {
            data.extend(std::iter::repeat_n(1.0 / na as f64, na));
        }
    }
    Policy {
        n_actions: na,
        data,
    }
}

/// `Σ −log(ν(x,a)/ν^X(x)) ν(x,a) / (1 − β)` with `0 log 0 = 0`.
pub fn entropy_of_occupation(nu: &OccupationMeasure, beta: f64) -> f64 {
    let marg = nu.state_marginal();
    let na = nu.n_actions();
    let mut h = 0.0;
    for (xa, &v) in nu.nu.iter().enumerate() {
        let mx = marg[xa / na];
        if v > 0.0 && mx > 0.0 {
            h -= v * (v / mx).ln();
        }
    }
    h / (1.0 - beta)
}

/// Discounted causal entropy `E Σ_t β^t (−log π(a_t | x_t))` from `mu0`,
/// evaluated through the occupation measure.
pub fn causal_entropy(
    spec: &ModelSpec,
    pi: &Policy,
    mu: &SimplexVector,
    mu0: &SimplexVector,
) -> Result<f64> {
    let nu = occupation_measure(spec, pi, mu, mu0)?;
    Ok(entropy_of_occupation(&nu, spec.beta()))
}

/// `(1/(1−β)) Σ f(x, a, μ) ν(x, a)` for a given occupation table.
pub fn feature_expectation_of(spec: &ModelSpec, nu: &[f64], mu: &[f64]) -> Vec<f64> {
    let f = spec.features_at(mu);
    let mut out = vec![0.0; spec.feature_dim()];
    for (fx, &w) in f.iter().zip(nu) {
        for (o, v) in out.iter_mut().zip(fx) {
            *o += v * w;
        }
    }
    let scale = 1.0 / (1.0 - spec.beta());
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

/// Discounted feature expectation `E Σ_t β^t f(x_t, a_t, μ)` from `mu0`.
pub fn feature_expectation(
    spec: &ModelSpec,
    pi: &Policy,
    mu: &SimplexVector,
    mu0: &SimplexVector,
) -> Result<Vec<f64>> {
    let nu = occupation_measure(spec, pi, mu, mu0)?;
    Ok(feature_expectation_of(spec, nu.as_slice(), mu))
}

/// Soft (entropy-regularized) value iteration with discount β in the reward
/// convention. Returns the soft values and the Boltzmann policy
/// `π(a | x) = exp(Q(x, a) − V(x))`.
pub fn soft_value_iteration(
    spec: &ModelSpec,
    mu: &SimplexVector,
    theta: &[f64],
    tol: f64,
) -> (ValueFunctions, Policy) {
    assert!(tol > 0.0, "tolerance must be positive");
    let r = rewards(spec, mu, theta);
    let kernel = spec.kernel_at(mu);
    let beta = spec.beta();
    let na = spec.n_actions();
    let mut v = vec![0.0; spec.n_states()];
    let factor = beta / (1.0 - beta);
    loop {
        let q = q_from_v(&r, &kernel, beta, &v);
        let next: Vec<f64> = q
            .chunks(na)
            .map(|row| numerics::log_sum_exp(row).expect("at least one action"))
            .collect();
        let delta = next
            .iter()
            .zip(&v)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        v = next;
        if factor * delta <= tol * (1.0 + norm_inf(&v)) {
            break;
        }
    }
    let q = q_from_v(&r, &kernel, beta, &v);
    let data: Vec<f64> = q
        .iter()
        .enumerate()
        .map(|(xa, qv)| (qv - v[xa / na]).exp())
        .collect();
    let mut pi = Policy {
        n_actions: na,
        data,
    };
    // Renormalize against round-off.
    for x in 0..pi.n_states() {
        let s: f64 = pi.row(x).iter().sum();
        for u in 0..na {
            pi.data[x * na + u] /= s;
        }
    }
    (
        ValueFunctions {
            v,
            q,
            n_actions: na,
        },
        pi,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{malware2, random_affine_model, random_simplex};
    use crate::model::{builtin_malware, ModelDocument};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_policy(rng: &mut ChaCha8Rng, nx: usize, na: usize) -> Policy {
        let rows: Vec<Vec<f64>> = (0..nx)
            .map(|_| random_simplex(rng, na).into_inner())
            .collect();
        Policy::from_rows(&rows).unwrap()
    }

    fn reference_policy() -> Policy {
        Policy::from_rows(&[[0.61, 0.39], [0.0, 1.0]]).unwrap()
    }

    /// Distribution of (x_t, a_t) propagated step by step; independent of
    /// the linear solve.
    fn truncated_series(
        spec: &ModelSpec,
        pi: &Policy,
        mu: &SimplexVector,
        mu0: &SimplexVector,
        horizon: usize,
        mut per_pair: impl FnMut(usize, usize, f64),
    ) {
        let k = spec.kernel_at(mu);
        let (nx, na) = (spec.n_states(), spec.n_actions());
        let mut law = mu0.to_vec();
        let mut disc = 1.0;
        for _ in 0..horizon {
            for x in 0..nx {
                for a in 0..na {
                    per_pair(x, a, disc * law[x] * pi.prob(x, a));
                }
            }
            let mut next = vec![0.0; nx];
            for x in 0..nx {
                for a in 0..na {
                    for y in 0..nx {
                        next[y] += law[x] * pi.prob(x, a) * k.prob(y, x, a);
                    }
                }
            }
            law = next;
            disc *= spec.beta();
        }
    }

    #[test]
    fn myopic_limit() {
        let spec = malware2().with_beta(1e-9).unwrap();
        let mu = SimplexVector::new(vec![0.65, 0.35]).unwrap();
        let (vf, pi) = value_iteration(&spec, &mu, 1e-12).unwrap();
        let c = spec.costs_at(&mu).unwrap();
        for x in 0..2 {
            let min = c.get(x, 0).min(c.get(x, 1));
            assert!((vf.v[x] - min).abs() < 1e-8);
        }
        assert_eq!(pi.dominant_actions(), vec![0, 0]);
    }

    fn single_action_model() -> ModelSpec {
        ModelSpec::from_document(ModelDocument {
            n_states: 2,
            n_actions: 1,
            feature_dim: 1,
            beta: 0.7,
            theta: Some(vec![1.0]),
            state_labels: None,
            p0: vec![vec![vec![0.3], vec![0.6]], vec![vec![0.7], vec![0.4]]],
            p1: None,
            f0: vec![vec![vec![1.0]], vec![vec![2.0]]],
            f1: None,
        })
        .unwrap()
    }

    #[test]
    fn single_action_value_is_policy_evaluation() {
        let spec = single_action_model();
        let mu = SimplexVector::uniform(2);
        let (vf, pi) = value_iteration(&spec, &mu, 1e-13).unwrap();
        let v = policy_evaluation(&spec, &pi, &mu).unwrap();
        for x in 0..2 {
            assert!((vf.v[x] - v[x]).abs() < 1e-10);
        }
        // Soft iteration with one action is plain evaluation of the reward.
        let (sv, spi) = soft_value_iteration(&spec, &mu, &[1.0], 1e-13);
        for x in 0..2 {
            assert!((sv.v[x] - v[x]).abs() < 1e-10);
            assert!((spi.prob(x, 0) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn stationary_reset_and_doubly_stochastic() {
        // Every action resets to state 0.
        let spec = builtin_malware(10, &[0.1, 1.0, 0.4], None, 0.8).unwrap();
        let pi = Policy::deterministic(&[1; 10], 2);
        let m = stationary_distribution(&spec, &pi, &SimplexVector::uniform(10)).unwrap();
        assert!((m[0] - 1.0).abs() < 1e-12);

        let ds = ModelSpec::from_document(ModelDocument {
            n_states: 3,
            n_actions: 1,
            feature_dim: 1,
            beta: 0.5,
            theta: None,
            state_labels: None,
            p0: vec![
                vec![vec![0.2], vec![0.5], vec![0.3]],
                vec![vec![0.3], vec![0.2], vec![0.5]],
                vec![vec![0.5], vec![0.3], vec![0.2]],
            ],
            p1: None,
            f0: vec![vec![vec![0.0]]; 3],
            f1: None,
        })
        .unwrap();
        let m = stationary_distribution(&ds, &Policy::uniform(3, 1), &SimplexVector::uniform(3))
            .unwrap();
        for v in m.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stationary_reference_policy() {
        let spec = malware2();
        let mu = SimplexVector::new(vec![0.65, 0.35]).unwrap();
        let m = stationary_distribution(&spec, &reference_policy(), &mu).unwrap();
        assert!(
            (m[0] - 0.65).abs() < 5e-3 && (m[1] - 0.35).abs() < 5e-3,
            "{m:?}"
        );
        let t = policy_chain(&spec, &reference_policy(), &mu);
        let r = t.tr_mul_vec(&m);
        assert!(r.iter().zip(m.iter()).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn stationary_non_unique() {
        // Two absorbing states.
        let spec = ModelSpec::from_document(ModelDocument {
            n_states: 2,
            n_actions: 1,
            feature_dim: 1,
            beta: 0.5,
            theta: None,
            state_labels: None,
            p0: vec![vec![vec![1.0], vec![0.0]], vec![vec![0.0], vec![1.0]]],
            p1: None,
            f0: vec![vec![vec![0.0]]; 2],
            f1: None,
        })
        .unwrap();
        let pi = Policy::uniform(2, 1);
        let mu = SimplexVector::uniform(2);
        assert!(matches!(
            stationary_distribution(&spec, &pi, &mu),
            Err(Error::NonUniqueStationary { dimension: 2 })
        ));
        let m = stationary_by_power_iteration(&spec, &pi, &mu, 1e-14, 100);
        assert_eq!(m.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn occupation_zero_discount() {
        let spec = malware2().with_beta(1e-9).unwrap();
        let mu0 = SimplexVector::new(vec![0.3, 0.7]).unwrap();
        let pi = reference_policy();
        let nu = occupation_measure(&spec, &pi, &mu0, &mu0).unwrap();
        for x in 0..2 {
            for a in 0..2 {
                assert!((nu.get(x, a) - mu0[x] * pi.prob(x, a)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn occupation_marginal_equals_stationary_start() {
        let spec = malware2();
        let pi = reference_policy();
        let mu = SimplexVector::new(vec![0.65, 0.35]).unwrap();
        let stat = stationary_distribution(&spec, &pi, &mu).unwrap();
        let nu = occupation_measure(&spec, &pi, &mu, &stat).unwrap();
        let marg = nu.state_marginal();
        assert!(marg
            .iter()
            .zip(stat.iter())
            .all(|(a, b)| (a - b).abs() < 1e-8));
    }

    #[test]
    fn occupation_matches_truncated_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let spec = random_affine_model(&mut rng, 4, 3, 2);
            let mu = random_simplex(&mut rng, 4);
            let mu0 = random_simplex(&mut rng, 4);
            let pi = random_policy(&mut rng, 4, 3);
            let nu = occupation_measure(&spec, &pi, &mu, &mu0).unwrap();
            let mut series = [0.0; 12];
            let beta = spec.beta();
            truncated_series(&spec, &pi, &mu, &mu0, 200, |x, a, w| {
                series[x * 3 + a] += (1.0 - beta) * w
            });
            let tail = beta.powi(200) / (1.0 - beta);
            for (s, n) in series.iter().zip(nu.as_slice()) {
                assert!((s - n).abs() <= tail + 1e-12);
            }
            assert!(nu.flow_residual(&spec, &mu, &mu0) < 1e-8);
            assert!((nu.total_mass() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn disintegrate_cases() {
        let nu = OccupationMeasure::from_rows(&[[0.3965, 0.2535], [0.0, 0.35]], 0.8).unwrap();
        let pi = disintegrate(&nu);
        assert!((pi.prob(0, 0) - 0.61).abs() < 1e-12);
        assert!((pi.prob(0, 1) - 0.39).abs() < 1e-12);
        assert_eq!(pi.row(1), &[0.0, 1.0]);

        let nu = OccupationMeasure::from_rows(&[[0.5, 0.5], [0.0, 0.0]], 0.8).unwrap();
        assert_eq!(disintegrate(&nu).row(1), &[0.5, 0.5]);
    }

    #[test]
    fn disintegrate_recovers_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = random_affine_model(&mut rng, 5, 3, 2);
        let mu = random_simplex(&mut rng, 5);
        let pi = random_policy(&mut rng, 5, 3);
        let nu = occupation_measure(&spec, &pi, &mu, &mu).unwrap();
        let back = disintegrate(&nu);
        for x in 0..5 {
            for a in 0..3 {
                assert!((back.prob(x, a) - pi.prob(x, a)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn entropy_cases() {
        let spec = malware2();
        let mu = SimplexVector::uniform(2);
        let det = Policy::deterministic(&[0, 1], 2);
        assert_eq!(causal_entropy(&spec, &det, &mu, &mu).unwrap(), 0.0);
        let h = causal_entropy(&spec, &Policy::uniform(2, 2), &mu, &mu).unwrap();
        assert!((h - 5.0 * 2f64.ln()).abs() < 1e-12);
        assert!((h - 3.4657).abs() < 1e-4);
    }

    #[test]
    fn entropy_matches_truncated_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let spec = random_affine_model(&mut rng, 3, 2, 2);
            let mu = random_simplex(&mut rng, 3);
            let mu0 = random_simplex(&mut rng, 3);
            let pi = random_policy(&mut rng, 3, 2);
            let h = causal_entropy(&spec, &pi, &mu, &mu0).unwrap();
            let mut direct = 0.0;
            truncated_series(&spec, &pi, &mu, &mu0, 200, |x, a, w| {
                let p = pi.prob(x, a);
                if p > 0.0 {
                    direct -= w * p.ln();
                }
            });
            let bound = spec.beta().powi(200) * 2f64.ln() / (1.0 - spec.beta());
            assert!((h - direct).abs() <= bound + 1e-10);
        }
    }

    #[test]
    fn feature_expectation_from_expert_table() {
        let spec = malware2();
        let nu = [0.3965, 0.2535, 0.0, 0.35];
        let fe = feature_expectation_of(&spec, &nu, &[0.65, 0.35]);
        let expect = [1.75, 0.6125, 3.0175];
        for (a, b) in fe.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{fe:?}");
        }
        let zero = ModelSpec::from_document(ModelDocument {
            f0: vec![vec![vec![0.0; 3]; 2]; 2],
            f1: None,
            ..spec.to_document()
        })
        .unwrap();
        let fe = feature_expectation(
            &zero,
            &reference_policy(),
            &SimplexVector::uniform(2),
            &SimplexVector::uniform(2),
        )
        .unwrap();
        assert!(fe.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn soft_zero_reward() {
        let spec = malware2();
        let (vf, pi) = soft_value_iteration(&spec, &SimplexVector::uniform(2), &[0.0; 3], 1e-13);
        for x in 0..2 {
            assert!((vf.v[x] - 2f64.ln() / 0.2).abs() < 1e-10);
            assert!((pi.prob(x, 0) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_matches_long_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let spec = random_affine_model(&mut rng, 2, 2, 2);
        let mu = random_simplex(&mut rng, 2);
        let theta = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let (vf, _) = soft_value_iteration(&spec, &mu, &theta, 1e-13);
        // 10 000 plain iterations of the operator.
        let mut v = vec![0.0; 2];
        for _ in 0..10_000 {
            v = soft_bellman_operator(&spec, &mu, &theta, &v);
        }
        for x in 0..2 {
            assert!((vf.v[x] - v[x]).abs() < 1e-10);
            let qmax = vf
                .q_row(x)
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(vf.v[x] >= qmax);
        }
    }

    #[test]
    fn operators_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let spec = random_affine_model(&mut rng, 4, 2, 3);
            let mu = random_simplex(&mut rng, 4);
            let theta: Vec<f64> = spec.theta().unwrap().to_vec();
            let v1: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
            let v2: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
            let d = v1
                .iter()
                .zip(&v2)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            let t1 = bellman_operator(&spec, &mu, &v1).unwrap();
            let t2 = bellman_operator(&spec, &mu, &v2).unwrap();
            let dt = t1
                .iter()
                .zip(&t2)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(dt <= spec.beta() * d + 1e-12);
            let s1 = soft_bellman_operator(&spec, &mu, &theta, &v1);
            let s2 = soft_bellman_operator(&spec, &mu, &theta, &v2);
            let ds = s1
                .iter()
                .zip(&s2)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(ds <= spec.beta() * d + 1e-12);
        }
    }
}
